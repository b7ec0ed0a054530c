#pragma once

#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "riskref/cohort.hpp"
#include "riskref/config.hpp"
#include "riskref/error.hpp"

// Newline-delimited patient records, one JSON object per line:
//   {"id":"P000012","visits":[{"time":40,"imaging":[...],"label":0,
//     "clinical":{"psa":..,"age":..,"prostate_volume":..}}, ...]}
// Floats carry 17 significant digits.

namespace riskref {

inline std::string to_json_line(const PatientRecord& p) {
  std::string out = "{\"id\":\"" + p.id + "\",\"visits\":[";
  for (std::size_t i = 0; i < p.visits.size(); ++i) {
    const auto& v = p.visits[i];
    if (i) out += ',';
    out += "{\"time\":" + std::to_string(v.time);
    if (v.imaging) {
      out += ",\"imaging\":[";
      for (std::size_t k = 0; k < v.imaging->size(); ++k) {
        if (k) out += ',';
        out += format_double((*v.imaging)[k]);
      }
      out += ']';
    }
    if (v.label) out += ",\"label\":" + std::to_string(*v.label);
    if (v.clinical) {
      out += ",\"clinical\":{\"psa\":" + format_double(v.clinical->psa) + ",\"age\":" + format_double(v.clinical->age) +
             ",\"prostate_volume\":" + format_double(v.clinical->prostate_volume) + "}";
    }
    out += '}';
  }
  out += "]}";
  return out;
}

inline PatientRecord from_json_line(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  PatientRecord p;
  p.id = j.at("id").get<std::string>();
  for (const auto& jv : j.at("visits")) {
    Visit v;
    v.time = jv.at("time").get<int>();
    if (jv.contains("imaging")) v.imaging = jv.at("imaging").get<std::vector<double>>();
    if (jv.contains("label")) v.label = jv.at("label").get<int>();
    if (jv.contains("clinical")) {
      const auto& c = jv.at("clinical");
      v.clinical = ClinicalSample{c.at("psa").get<double>(), c.at("age").get<double>(),
                                  c.at("prostate_volume").get<double>()};
    }
    if (!v.imaging && !v.clinical) throw std::runtime_error("visit without imaging or clinical data in " + p.id);
    if (v.imaging.has_value() != v.label.has_value())
      throw std::runtime_error("visit label present without imaging (or vice versa) in " + p.id);
    if (!p.visits.empty() && v.time <= p.visits.back().time)
      throw std::runtime_error("visits not strictly increasing in time for " + p.id);
    p.visits.push_back(std::move(v));
  }
  return p;
}

inline void write_cohort(const std::string& path, const Cohort& cohort) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path);
  for (const auto& p : cohort) os << to_json_line(p) << '\n';
}

inline Cohort read_cohort(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifact(path);
  Cohort cohort;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      cohort.push_back(from_json_line(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cohort;
}

}  // namespace riskref
