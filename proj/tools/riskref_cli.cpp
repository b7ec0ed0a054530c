#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "riskref/experiment.hpp"

using namespace riskref;

namespace {

struct Options {
  std::string config;
  std::optional<long long> seed;
  std::string out;
  std::string variant;
  std::string conditions;
};

ExperimentConfig resolve(const Options& o) {
  auto kv = o.config.empty() ? KeyValueConfig() : KeyValueConfig::load(o.config);
  if (o.seed) kv.set("seed", *o.seed);
  if (!o.out.empty()) kv.set("out", o.out);
  if (!o.conditions.empty()) kv.set("conditions", o.conditions);
  return ExperimentConfig::from_config(kv);
}

std::vector<Variant> selected(const Options& o, const ExperimentConfig& c) {
  if (!o.variant.empty()) return {parse_variant(o.variant)};
  std::vector<Variant> out;
  for (auto v : {Variant::imaging, Variant::clinical, Variant::joint, Variant::combined})
    if (std::find(c.variants.begin(), c.variants.end(), v) != c.variants.end()) out.push_back(v);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"riskref: longitudinal risk refinement experiments"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config, "key = value configuration file");
  app.add_option("--seed", o.seed, "master seed (overrides the config)");
  app.add_option("--out", o.out, "output directory");
  app.add_option("--variant", o.variant, "clinical, imaging, combined or joint-ablation");
  app.add_option("--conditions", o.conditions, "comma-separated subset of p0,p1,p2,p3,lag1,lag2,lag3");
  auto* generate = app.add_subcommand("generate", "generate and split the synthetic cohort");
  auto* train = app.add_subcommand("train", "train variants (all configured, or --variant)");
  auto* evaluate = app.add_subcommand("evaluate", "evaluate trained variants on the test split");
  auto* report = app.add_subcommand("report", "aggregate reports and write the manifest");
  auto* run = app.add_subcommand("run", "generate, train, evaluate and report");
  CLI11_PARSE(app, argc, argv);

  try {
    const auto config = resolve(o);
    if (generate->parsed()) {
      const auto s = cmd_generate(config);
      std::cout << "patients " << s.generated << ", removed " << s.removed_nonmonotone << " non-monotone; split "
                << s.train << "/" << s.validation << "/" << s.test << "\n";
    } else if (train->parsed()) {
      for (auto v : selected(o, config)) {
        cmd_train(config, v);
        std::cout << "trained " << variant_name(v) << " -> " << checkpoint_path(config.out, v).string() << "\n";
      }
    } else if (evaluate->parsed()) {
      for (auto v : selected(o, config)) {
        const auto rows = cmd_evaluate(config, v);
        std::cout << variant_name(v) << ": " << rows.size() << " rows\n";
      }
    } else if (report->parsed()) {
      cmd_report(config);
      std::cout << read_text(report_path(config.out, "summary.txt"));
    } else if (run->parsed()) {
      if (!o.variant.empty()) throw ConfigError("variant", "run always covers the configured variants");
      cmd_run(config);
      std::cout << read_text(report_path(config.out, "summary.txt"));
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const MissingArtifact& e) {
    std::cerr << e.what() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
