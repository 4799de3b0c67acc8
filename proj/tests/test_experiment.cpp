#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "vamsl/experiment.hpp"

using namespace vamsl;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.experiment = ExperimentKind::two_component_mixture;
  c.components = 2;
  c.d = 5;
  c.n = 100;
  c.held_out = 20;
  c.particles = 5;
  c.total_steps = 300;
  c.early_round_steps = 10;
  c.gamma_theta = 1.0;
  c.edge_prob = 0.1;
  c.expected_edges_per_node = 1.0;
  c.min_abs_weight = 0.5;
  c.queries_per_round = 2;
  c.query_rounds = 1;
  c.outer_samples = 20;
  c.seeds = {1, 2, 3, 4, 5};
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("vamsl_test_experiment_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

}  // namespace

TEST(Experiment, OutputFileContract) {
  const ExperimentConfig cfg = small_config();
  const ExperimentOutcome out = run_experiment(cfg);
  const fs::path dir = scratch("contract");
  write_experiment(out, dir);

  const nlohmann::json report = nlohmann::json::parse(slurp(dir / "report.json"));
  EXPECT_EQ(report["config_hash"], config_hash(cfg));
  EXPECT_FALSE(report["partial"].get<bool>());
  EXPECT_EQ(report["seeds"].size(), 5u);
  EXPECT_EQ(config_from_json(report["config"]).seeds, cfg.seeds);
  for (const char* key : {"eshd_mean", "accuracy", "held_out_accuracy", "map_neg_lppd", "gmm_accuracy"}) {
    ASSERT_TRUE(report["summary"].contains(key)) << key;
    const auto& ci = report["summary"][key];
    EXPECT_LE(ci["lo"].get<double>(), ci["mean"].get<double>());
    EXPECT_LE(ci["mean"].get<double>(), ci["hi"].get<double>());
  }

  for (std::uint64_t s : cfg.seeds) {
    const nlohmann::json seed = nlohmann::json::parse(slurp(dir / ("seed-" + std::to_string(s)) / "report.json"));
    EXPECT_EQ(seed["status"], "ok");
    EXPECT_EQ(seed["rounds"].size(), 2u);
    EXPECT_EQ(seed["truth"]["graphs"].size(), 2u);
    EXPECT_EQ(seed["data"]["n"], 100);
    EXPECT_EQ(seed["data"]["held_out"], 20);
    EXPECT_LE(seed["elicitation"]["records"].size(), 4u);
    EXPECT_EQ(seed["final"]["lppd_rows"], "held_out");
  }

  const std::vector<std::string> csv = lines_of(slurp(dir / "metrics.csv"));
  ASSERT_FALSE(csv.empty());
  EXPECT_EQ(csv.front(), "seed,round,queries,metric,value");
  for (std::size_t i = 1; i < csv.size(); ++i) EXPECT_EQ(std::count(csv[i].begin(), csv[i].end(), ','), 4) << csv[i];

  int evaluations = 0;
  for (const auto& line : lines_of(slurp(dir / "progress.ndjson"))) {
    const nlohmann::json ev = nlohmann::json::parse(line);
    EXPECT_TRUE(ev.contains("event"));
    EXPECT_TRUE(ev.contains("seed"));
    EXPECT_TRUE(ev.contains("query_round"));
    evaluations += ev["event"] == "evaluation";
  }
  EXPECT_EQ(evaluations, 10);
}

TEST(Experiment, RerunIsByteIdenticalAndWorkerInvariant) {
  ExperimentConfig cfg = small_config();
  cfg.seeds = {7, 8};
  const fs::path a = scratch("rerun_a"), b = scratch("rerun_b");
  write_experiment(run_experiment(cfg), a);
  cfg.workers = 2;
  cfg.output_dir = "elsewhere";
  write_experiment(run_experiment(cfg), b);
  for (const char* f : {"report.json", "metrics.csv", "seed-7/report.json", "seed-8/report.json"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;

  auto strip = [](const std::string& text) {
    std::string out;
    for (const auto& line : lines_of(text)) {
      nlohmann::json j = nlohmann::json::parse(line);
      if (j.contains("record")) j["record"].erase("timestamp_ms");
      j.erase("timestamp_ms");
      out += j.dump() + "\n";
    }
    return out;
  };
  EXPECT_EQ(strip(slurp(a / "progress.ndjson")), strip(slurp(b / "progress.ndjson")));
}

TEST(Experiment, ZeroBudgetMatchesPlainInference) {
  ExperimentConfig cfg = small_config();
  cfg.query_rounds = 0;
  const std::uint64_t seed = 3;
  const SeedRun run = run_seed(cfg, seed);
  ASSERT_TRUE(run.ok);
  const SeedContext ctx = prepare_seed(cfg, seed);
  const MixtureState state = run_cavi(ctx.data, cfg.vamsl_config(), {}, seed);
  EXPECT_EQ(run.report["final"]["state_hash"], hex64(state_hash(state)));
  EXPECT_TRUE(run.report["elicitation"]["records"].empty());
}

TEST(Experiment, ComparisonAtZeroBudgetHasIdenticalColumns) {
  ExperimentConfig cfg = small_config();
  cfg.query_rounds = 0;
  cfg.seeds = {1, 2};
  const StrategyComparison c = compare_strategies(cfg, {QueryStrategy::bed, QueryStrategy::random});
  ASSERT_EQ(c.eshd.size(), 2u);
  EXPECT_EQ(c.eshd[0], c.eshd[1]);
  EXPECT_TRUE(c.failed_seeds.empty());
  const auto& diff = c.summary["final_difference"]["ci"];
  EXPECT_EQ(diff["mean"], 0.0);
  const fs::path dir = scratch("compare");
  write_comparison(c, cfg, dir);
  const std::vector<std::string> csv = lines_of(slurp(dir / "compare.csv"));
  EXPECT_EQ(csv.front(), "seed,budget,bed,random");
  EXPECT_EQ(csv.size(), 3u);
}

TEST(Experiment, PerfectOracleRecoversTheTruth) {
  ExperimentConfig cfg = small_config();
  cfg.experiment = ExperimentKind::single_component_querying;
  cfg.components = 1;
  cfg.d = 4;
  cfg.held_out = 0;
  cfg.perfect_oracle = true;
  cfg.queries_per_round = 4;
  cfg.query_rounds = 3;
  cfg.seeds = {11};
  const SeedRun run = run_seed(cfg, 11);
  ASSERT_TRUE(run.ok) << run.report.dump();
  EXPECT_EQ(run.report["final"]["eshd_mean"], 0.0);
  EXPECT_EQ(run.report["final"]["map_shd"][0], 0);
}

TEST(Experiment, RealDataDimensionMismatchIsConfigError) {
  ExperimentConfig cfg = small_config();
  cfg.experiment = ExperimentKind::real_data;
  cfg.data_path = std::string(VAMSL_TEST_DATA) + "/breast_cancer.csv";
  cfg.query_rounds = 0;
  cfg.seeds = {1};
  try {
    run_experiment(cfg);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "dims.d");
  }
}

TEST(Bootstrap, IntervalBracketsTheMean) {
  const Interval flat = bootstrap_mean_ci({2.0, 2.0, 2.0}, 1);
  EXPECT_EQ(flat.lo, 2.0);
  EXPECT_EQ(flat.hi, 2.0);
  const Interval ci = bootstrap_mean_ci({1.0, 2.0, 3.0, 4.0, 10.0}, 2);
  EXPECT_DOUBLE_EQ(ci.mean, 4.0);
  EXPECT_LT(ci.lo, ci.mean);
  EXPECT_GT(ci.hi, ci.mean);
  EXPECT_GE(ci.lo, 1.0);
  EXPECT_LE(ci.hi, 10.0);
  EXPECT_THROW(bootstrap_mean_ci({}, 1), ContractError);
}
