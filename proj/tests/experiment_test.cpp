#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "riskref/experiment.hpp"

using namespace riskref;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("riskref_experiment_test_" + name);
  fs::remove_all(p);
  return p;
}

ExperimentConfig small_config(const fs::path& out) {
  ExperimentConfig c;
  c.out = out.string();
  c.cohort.n_patients = 300;
  c.train.pretrain_epochs = 1;
  c.train.epochs = 2;
  c.train.lr = 1e-3;
  c.train.freeze_stage3 = true;
  return c;
}

template <class E, class F>
E expect_throw(F&& f) {
  try {
    f();
  } catch (const E& e) {
    return e;
  }
  ADD_FAILURE() << "expected exception";
  throw std::logic_error("no exception");
}

}  // namespace

TEST(Condition, ParsesPriorAndLagNames) {
  const auto p2 = parse_condition("p2");
  EXPECT_EQ(p2.kind, Condition::Kind::priors);
  EXPECT_EQ(p2.k, 2u);
  const auto l3 = parse_condition("lag3");
  EXPECT_EQ(l3.kind, Condition::Kind::lag);
  EXPECT_EQ(l3.k, 3u);
  for (const char* bad : {"p4", "lag0", "lag4", "prior1", "", "P1"})
    EXPECT_EQ(expect_throw<ConfigError>([&] { parse_condition(bad); }).key(), "conditions") << bad;
  EXPECT_THROW(ExperimentConfig::parse_conditions({}), ConfigError);
}

TEST(Condition, PriorSelections) {
  EXPECT_EQ(condition_selection(parse_condition("p0"), Track::imaging, 5), std::vector<std::size_t>{});
  EXPECT_EQ(condition_selection(parse_condition("p3"), Track::imaging, 5), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(condition_selection(parse_condition("lag3"), Track::imaging, 5), std::vector<std::size_t>{2});
  EXPECT_EQ(condition_selection(parse_condition("p3"), Track::clinical, 7), (std::vector<std::size_t>{0, 3, 6}));
  EXPECT_EQ(condition_selection(parse_condition("lag2"), Track::clinical, 4), std::vector<std::size_t>{1});
  EXPECT_EQ(condition_selection(parse_condition("lag3"), Track::clinical, 4), std::vector<std::size_t>{3});
  EXPECT_THROW(condition_selection(parse_condition("p1"), Track::imaging, 2), std::invalid_argument);
  EXPECT_EQ(combined_clinical_selection(0), std::vector<std::size_t>{});
  EXPECT_EQ(combined_clinical_selection(1), std::vector<std::size_t>{0});
  EXPECT_EQ(combined_clinical_selection(5), (std::vector<std::size_t>{0, 4}));
}

TEST(ExperimentConfig, RoundTripsThroughText) {
  ExperimentConfig c;
  c.seed = 42;
  c.out = "somewhere";
  c.split = {0.5, 0.25, 0.25};
  c.variants = {Variant::joint, Variant::imaging};
  c.conditions = ExperimentConfig::parse_conditions({"p0", "lag2"});
  c.horizons = {kFiveYear};
  c.target_clinical = 0.8;
  c.cohort.n_patients = 123;
  c.train.epochs = 9;
  c.train.refine_lr = 3e-4;
  const auto text = c.to_config().str();
  const auto back = ExperimentConfig::from_config(KeyValueConfig::parse(text));
  EXPECT_EQ(back.to_config().str(), text);
  EXPECT_EQ(back.seed, 42u);
  EXPECT_EQ(back.variants, c.variants);
  ASSERT_EQ(back.conditions.size(), 2u);
  EXPECT_EQ(back.conditions[1].name, "lag2");
  EXPECT_EQ(back.horizons, std::vector<Horizon>{kFiveYear});
  EXPECT_EQ(back.cohort.n_patients, 123);
  EXPECT_EQ(back.train.refine_lr, 3e-4);
}

TEST(ExperimentConfig, ErrorsNameTheOffendingKey) {
  auto key_of = [](const std::string& text) {
    return expect_throw<ConfigError>([&] { ExperimentConfig::from_config(KeyValueConfig::parse(text)); }).key();
  };
  EXPECT_EQ(key_of("bogus = 1\n"), "bogus");
  EXPECT_EQ(key_of("split = 0.5, 0.5\n"), "split");
  EXPECT_EQ(key_of("split = 0.5, 0.3, 0.3\n"), "split");
  EXPECT_EQ(key_of("conditions = p0, p9\n"), "conditions");
  EXPECT_EQ(key_of("horizons = 10y\n"), "horizons");
  EXPECT_EQ(key_of("variants = everything\n"), "variant");
  EXPECT_EQ(key_of("seed = -1\n"), "seed");
  EXPECT_EQ(key_of("target_sensitivity.imaging = 1.5\n"), "target_sensitivity.imaging");
  EXPECT_EQ(key_of("train.lr = fast\n"), "train.lr");
  EXPECT_EQ(key_of("train.refine_lr = -1\n"), "train.refine_lr");
}

TEST(ExperimentConfig, SeedsAreExplicitAndDistinct) {
  ExperimentConfig c;
  c.seed = 3;
  std::set<std::uint64_t> seeds{c.cohort_seed(), c.split_seed()};
  for (auto v : {Variant::clinical, Variant::imaging, Variant::combined, Variant::joint}) seeds.insert(c.train_seed(v));
  EXPECT_EQ(seeds.size(), 6u);
}

TEST(Manifest, Sha256KnownVectors) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Pipeline, MissingArtifactsAreNamed) {
  const auto out = scratch("missing");
  auto c = small_config(out);
  auto e = expect_throw<MissingArtifact>([&] { cmd_train(c, Variant::imaging); });
  EXPECT_NE(e.path().find("train.jsonl"), std::string::npos);
  cmd_generate(c);
  e = expect_throw<MissingArtifact>([&] { cmd_evaluate(c, Variant::clinical); });
  EXPECT_NE(e.path().find("clinical.ckpt"), std::string::npos);
  e = expect_throw<MissingArtifact>([&] { cmd_train(c, Variant::combined); });
  EXPECT_NE(e.path().find("imaging.ckpt"), std::string::npos);
  e = expect_throw<MissingArtifact>([&] { cmd_report(c); });
  EXPECT_NE(e.path().find(".csv"), std::string::npos);
  fs::remove_all(out);
}

class PipelineRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    out_ = new fs::path(scratch("run"));
    config_ = new ExperimentConfig(small_config(*out_));
    cmd_run(*config_);
  }
  static void TearDownTestSuite() {
    fs::remove_all(*out_);
    delete config_;
    delete out_;
  }
  static fs::path* out_;
  static ExperimentConfig* config_;
};

fs::path* PipelineRun::out_ = nullptr;
ExperimentConfig* PipelineRun::config_ = nullptr;

TEST_F(PipelineRun, WritesEveryArtifact) {
  for (const char* f : {"config.txt", "manifest.txt", "cohort/train.jsonl", "cohort/validation.jsonl", "cohort/test.jsonl",
                        "cohort/summary.txt", "reports/report.csv", "reports/summary.txt", "reports/ablation.csv"})
    EXPECT_TRUE(fs::exists(*out_ / f)) << f;
  for (auto v : {Variant::clinical, Variant::imaging, Variant::combined, Variant::joint}) {
    EXPECT_TRUE(fs::exists(checkpoint_path(*out_, v))) << variant_name(v);
    EXPECT_TRUE(fs::exists(report_path(*out_, std::string(variant_name(v)) + ".csv"))) << variant_name(v);
  }
  for (auto v : {Variant::clinical, Variant::imaging, Variant::combined, Variant::joint})
    EXPECT_TRUE(fs::exists(log_path(*out_, v))) << variant_name(v);
}

TEST_F(PipelineRun, ManifestChecksumsEveryFile) {
  std::istringstream is(read_text(*out_ / "manifest.txt"));
  std::string line;
  std::size_t listed = 0;
  while (std::getline(is, line)) {
    const auto sep = line.find("  ");
    ASSERT_NE(sep, std::string::npos);
    const auto rel = line.substr(sep + 2);
    EXPECT_EQ(line.substr(0, sep), sha256_hex(read_text(*out_ / rel))) << rel;
    ++listed;
  }
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(*out_)) files += e.is_regular_file();
  EXPECT_EQ(listed + 1, files);
}

TEST_F(PipelineRun, ConfigFileReproducesTheRun) {
  const auto kv = KeyValueConfig::load((*out_ / "config.txt").string());
  EXPECT_EQ(ExperimentConfig::from_config(kv).to_config().str(), config_->to_config().str());
}

TEST_F(PipelineRun, ReportsRecomputeWithoutDrift) {
  for (auto v : {Variant::imaging, Variant::combined}) {
    const auto path = report_path(*out_, std::string(variant_name(v)) + ".csv");
    const auto before = read_text(path);
    cmd_evaluate(*config_, v);
    EXPECT_EQ(read_text(path), before) << variant_name(v);
  }
}

TEST_F(PipelineRun, ReportRowsCoverTheGrid) {
  const auto rows = parse_report_csv(read_text(report_path(*out_, "report.csv")));
  std::map<std::string, std::size_t> per_variant;
  for (const auto& r : rows) {
    ++per_variant[r.variant];
    // Comparisons are against the prior-free row, which the joint baseline lacks.
    const bool compared = r.condition != "p0" && r.variant != "joint-ablation";
    EXPECT_EQ(r.mcnemar_sensitivity_p.has_value(), compared) << r.variant << " " << r.condition;
    EXPECT_EQ(r.mcnemar_specificity_p.has_value(), compared) << r.variant << " " << r.condition;
  }
  EXPECT_EQ(per_variant["imaging"], 14u);
  EXPECT_EQ(per_variant["combined"], 14u);
  EXPECT_EQ(per_variant["joint-ablation"], 12u);  // no prior-free joint row
  const auto summary = read_text(report_path(*out_, "summary.txt"));
  const auto header = summary.substr(0, summary.find('\n'));
  for (const char* field : {"specificity", "sensitivity", "AUC [95% CI]", "current", "5y"})
    EXPECT_NE(header.find(field), std::string::npos) << field;
  const auto ablation = read_text(report_path(*out_, "ablation.csv"));
  EXPECT_EQ(ablation.substr(0, ablation.find('\n')), "horizon,model,FN,TP,FP,TN,sens,spec,fpr");
}

TEST_F(PipelineRun, PriorFreeConditionMatchesUnrefinedModel) {
  const auto split = load_split(*out_);
  for (auto v : {Variant::imaging, Variant::clinical, Variant::combined}) {
    const auto [bundle, norm] = load_bundle(checkpoint_path(*out_, v), v, config_->train);
    const auto set = evaluation_set(split.test, v, norm);
    ASSERT_FALSE(set.cases.empty());
    const auto refined = predict_condition(bundle, set, parse_condition("p0"));
    const auto& base_model = v == Variant::clinical ? *bundle.clinical : *bundle.imaging;
    const auto base = base_outputs(base_model, set.cases);
    for (std::size_t i = 0; i < set.cases.size(); ++i) {
      const auto plain = detail::unrefined(base[i]);
      EXPECT_EQ(refined[i].logits, plain.logits) << variant_name(v) << " case " << i;
      EXPECT_EQ(refined[i].probabilities, plain.probabilities);
    }
  }
}

TEST_F(PipelineRun, EvaluationCasesCarryThreePriors) {
  const auto split = load_split(*out_);
  const auto [bundle, norm] = load_bundle(checkpoint_path(*out_, Variant::combined), Variant::combined, config_->train);
  const auto set = evaluation_set(split.test, Variant::combined, norm);
  ASSERT_EQ(set.clinical_of.size(), set.cases.size());
  for (std::size_t i = 0; i < set.cases.size(); ++i) {
    EXPECT_GE(set.cases[i].priors.size(), kEvaluationPriors);
    if (set.clinical_of[i]) EXPECT_EQ(set.clinical[*set.clinical_of[i]].patient_id, set.cases[i].patient_id);
  }
}

// ---------------------------------------------------------------- CLI

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(RISKREF_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

}  // namespace

TEST(Cli, ExitCodes) {
  const auto dir = scratch("cli");
  const auto conf = dir / "small.conf";
  write_file(conf,
             "cohort.n_patients = 100\ncohort.max_visits = 3\ntrain.pretrain_epochs = 1\ntrain.epochs = 1\n"
             "variants = imaging\n");
  const auto out = (dir / "out").string();
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_NE(run_cli(""), 0);
  write_file(dir / "bad.conf", "no_such_key = 1\n");
  EXPECT_EQ(run_cli("--config " + (dir / "bad.conf").string() + " --out " + out + " generate"), 2);
  EXPECT_EQ(run_cli("--config " + conf.string() + " --out " + out + " --conditions p7 generate"), 2);
  EXPECT_EQ(run_cli("--config " + conf.string() + " --out " + out + " --variant nope train"), 2);
  EXPECT_EQ(run_cli("--config " + (dir / "absent.conf").string() + " generate"), 3);
  EXPECT_EQ(run_cli("--config " + conf.string() + " --out " + out + " evaluate"), 3);
  EXPECT_EQ(run_cli("--config " + conf.string() + " --out " + out + " generate"), 0);
  EXPECT_EQ(run_cli("--config " + conf.string() + " --out " + out + " --seed 5 train"), 0);
  // At most two imaging priors per case: nothing qualifies for evaluation.
  EXPECT_EQ(run_cli("--config " + conf.string() + " --out " + out + " --seed 5 evaluate"), 4);
  fs::remove_all(dir);
}
