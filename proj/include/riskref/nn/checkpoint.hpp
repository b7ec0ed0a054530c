#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "riskref/error.hpp"
#include "riskref/nn/optim.hpp"

// Checkpoint layout (all integers and floats little-endian):
//   "RRCKPT\0\0" | u32 version | u32 count
//   count x { u32 name_len | name | u32 ndims | u64 dims[ndims] | f64 values[] }
//   u8 has_optimizer
//   [ f64 lr | f64 wd | f64 beta1 | f64 beta2 | f64 eps | i64 step | u32 count
//     count x { u32 name_len | name | u64 n | f64 m[n] | f64 v[n] } ]

namespace riskref::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline constexpr char kMagic[8] = {'R', 'R', 'C', 'K', 'P', 'T', '\0', '\0'};

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline void put_doubles(std::ostream& os, std::span<const double> v) {
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

template <class T>
T get(std::istream& is, const std::string& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error("truncated checkpoint " + path);
  return v;
}
inline std::string get_string(std::istream& is, const std::string& path) {
  const auto n = get<std::uint32_t>(is, path);
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw std::runtime_error("truncated checkpoint " + path);
  return s;
}
inline std::vector<double> get_doubles(std::istream& is, std::size_t n, const std::string& path) {
  std::vector<double> v(n);
  if (!is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double))))
    throw std::runtime_error("truncated checkpoint " + path);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ParameterList& params,
                            const OptimizerState* optimizer = nullptr) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  os.write(detail::kMagic, sizeof(detail::kMagic));
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    detail::put_string(os, p.name);
    detail::put<std::uint32_t>(os, 2);
    detail::put<std::uint64_t>(os, p.tensor.rows());
    detail::put<std::uint64_t>(os, p.tensor.cols());
    detail::put_doubles(os, p.tensor.values());
  }
  detail::put<std::uint8_t>(os, optimizer ? 1 : 0);
  if (optimizer) {
    const auto& c = optimizer->config;
    for (double v : {c.lr, c.weight_decay, c.beta1, c.beta2, c.eps}) detail::put<double>(os, v);
    detail::put<std::int64_t>(os, optimizer->step);
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(optimizer->first_moment.size()));
    for (const auto& [name, m] : optimizer->first_moment) {
      const auto& v = optimizer->second_moment.at(name);
      detail::put_string(os, name);
      detail::put<std::uint64_t>(os, m.size());
      detail::put_doubles(os, m);
      detail::put_doubles(os, v);
    }
  }
  if (!os) throw std::runtime_error("failed writing checkpoint " + path);
}

// Copies stored values into `params` by name. Every parameter must be present
// with a matching shape. Returns the optimizer state if one was stored.
inline std::optional<OptimizerState> load_checkpoint(const std::string& path, ParameterList& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifact(path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, detail::kMagic, 8) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  const auto version = detail::get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  const auto count = detail::get<std::uint32_t>(is, path);
  std::map<std::string, std::pair<Shape, std::vector<double>>> stored;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = detail::get_string(is, path);
    const auto ndims = detail::get<std::uint32_t>(is, path);
    std::vector<std::uint64_t> dims(ndims);
    std::uint64_t n = 1;
    for (auto& d : dims) n *= (d = detail::get<std::uint64_t>(is, path));
    if (ndims != 2) throw std::runtime_error("checkpoint " + path + ": parameter " + name + " is not rank 2");
    stored[name] = {Shape{dims[0], dims[1]}, detail::get_doubles(is, n, path)};
  }
  for (auto& p : params) {
    auto it = stored.find(p.name);
    if (it == stored.end()) throw std::runtime_error("checkpoint " + path + " lacks parameter " + p.name);
    if (it->second.first != p.tensor.shape())
      throw ShapeError("checkpoint parameter " + p.name, it->second.first, p.tensor.shape());
    auto dst = p.tensor.mutable_values();
    std::copy(it->second.second.begin(), it->second.second.end(), dst.begin());
  }
  const auto has_optimizer = detail::get<std::uint8_t>(is, path);
  if (!has_optimizer) return std::nullopt;
  OptimizerState state;
  auto& c = state.config;
  for (double* v : {&c.lr, &c.weight_decay, &c.beta1, &c.beta2, &c.eps}) *v = detail::get<double>(is, path);
  state.step = detail::get<std::int64_t>(is, path);
  const auto n_states = detail::get<std::uint32_t>(is, path);
  for (std::uint32_t i = 0; i < n_states; ++i) {
    auto name = detail::get_string(is, path);
    const auto n = detail::get<std::uint64_t>(is, path);
    state.first_moment[name] = detail::get_doubles(is, n, path);
    state.second_moment[name] = detail::get_doubles(is, n, path);
  }
  return state;
}

}  // namespace riskref::nn
