#pragma once

// Experiment suites across seeds: data and ground truth per seed, the
// elicitation loop with a simulated expert, evaluation per query round and the
// report, CSV and progress files.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vamsl/config.hpp"
#include "vamsl/elicitation_loop.hpp"
#include "vamsl/errors.hpp"
#include "vamsl/expert_oracle.hpp"
#include "vamsl/metrics.hpp"
#include "vamsl/mixture.hpp"
#include "vamsl/parallel.hpp"
#include "vamsl/rng.hpp"
#include "vamsl/synthetic.hpp"

namespace vamsl {

/// The config without the fields that cannot change any number in the
/// outputs (output directory, worker count).
inline nlohmann::json numeric_config(const ExperimentConfig& cfg) {
  nlohmann::json j = to_json(cfg);
  j.erase("output_dir");
  j.erase("workers");
  return j;
}

inline std::string config_hash(const ExperimentConfig& cfg) {
  const std::string text = numeric_config(cfg).dump();
  Fnv1a h;
  h.add_bytes(text.data(), text.size());
  return hex64(h.value());
}

inline nlohmann::json to_json(const Adjacency& g) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < g.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < g.cols(); ++j) row.push_back(g(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Everything one seed's run needs before inference starts.
struct SeedContext {
  std::uint64_t seed = 0;
  Dataset data;
  std::optional<GroundTruthMixture> truth;
  /// Graph the simulated expert answers from, indexed by true label.
  std::vector<Adjacency> reference;
  std::optional<double> truth_oracle_accuracy;
};

namespace detail {

inline Dataset rows_of_class(const Dataset& full, int label) {
  std::vector<Eigen::Index> keep;
  for (std::size_t r = 0; r < full.labels->size(); ++r)
    if ((*full.labels)[r] == label) keep.push_back(static_cast<Eigen::Index>(r));
  Dataset out;
  out.rows.resize(static_cast<Eigen::Index>(keep.size()), full.rows.cols());
  for (std::size_t i = 0; i < keep.size(); ++i) out.rows.row(static_cast<Eigen::Index>(i)) = full.rows.row(keep[i]);
  return out;
}

inline SeedContext prepare_real_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  SeedContext ctx;
  ctx.seed = seed;
  CsvTable table = load_csv(cfg.data_path, cfg.standardize);
  if (table.data.num_vars() != cfg.d)
    throw ConfigError("dims.d", "data file has " + std::to_string(table.data.num_vars()) + " feature columns");
  Dataset pool = std::move(table.data);
  if (cfg.query_rounds > 0) {
    if (!pool.labels) throw ConfigError("data.path", "querying on real data needs a label column");
    if (static_cast<int>(table.label_names.size()) != cfg.components)
      throw ConfigError("dims.components", "must equal the number of classes in the data file");
    // one half builds the expert's reference graphs, class by class
    Dataset split = split_held_out(pool, static_cast<int>(pool.size() / 2), derive_seed(seed, {0x72656673ULL}));
    Dataset reference_half;
    reference_half.rows = *split.held_out;
    reference_half.labels = split.held_out_labels;
    ExperimentConfig single = cfg;
    single.components = 1;
    const VamslConfig vc = single.vamsl_config();
    for (int c = 0; c < cfg.components; ++c) {
      const Dataset rows = rows_of_class(reference_half, c);
      if (rows.size() < 2) throw ConfigError("data.path", "too few reference rows for class " + table.label_names[static_cast<std::size_t>(c)]);
      const MixtureState s = run_cavi(rows, vc, {}, derive_seed(seed, {0x72656673ULL, static_cast<std::uint64_t>(c)}));
      ctx.reference.push_back(map_graph(s, 0, rows, vc));
    }
    pool.rows = split.rows;
    pool.labels = split.labels;
  }
  if (cfg.held_out >= pool.size()) throw ConfigError("dims.held_out", "must be smaller than the usable row count");
  ctx.data = cfg.held_out > 0 ? split_held_out(pool, cfg.held_out, derive_seed(seed, {0x686f6c64ULL})) : pool;
  return ctx;
}

}  // namespace detail

inline SeedContext prepare_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  if (cfg.experiment == ExperimentKind::real_data) return detail::prepare_real_data(cfg, seed);
  SeedContext ctx;
  ctx.seed = seed;
  const TruthSpec spec = cfg.truth_spec();
  const std::uint64_t truth_seed = derive_seed(seed, {0x7472757468ULL});
  if (cfg.min_oracle_accuracy > 0.0) {
    SeparationSpec sep;
    sep.min_oracle_accuracy = cfg.min_oracle_accuracy;
    ctx.truth = sample_separated_mixture(spec, truth_seed, sep);
  } else {
    ctx.truth = sample_ground_truth(spec, truth_seed);
  }
  Rng rng = make_stream(seed, {0x64617461ULL});
  ctx.data = generate_observations(*ctx.truth, cfg.n, rng, cfg.held_out);
  for (const auto& c : ctx.truth->components) ctx.reference.push_back(c.graph);
  if (ctx.truth->num_components() > 1)
    ctx.truth_oracle_accuracy = oracle_accuracy(*ctx.truth, ctx.data.rows, *ctx.data.labels);
  return ctx;
}

/// Component-to-label permutation fitted on the training rows; identity when
/// there are no labels or a single component.
inline std::vector<int> component_permutation(const MixtureState& state, const Dataset& data) {
  const int k = state.num_components();
  std::vector<int> perm(static_cast<std::size_t>(k));
  std::iota(perm.begin(), perm.end(), 0);
  if (k > 1 && data.labels) perm = match_and_score(state.responsibilities, *data.labels).permutation;
  return perm;
}

/// Metrics of one inferred state. ESHD and MAP SHD of component k are measured
/// against the truth component it was matched to.
inline nlohmann::json evaluate_state(const MixtureState& state, const VamslConfig& vc, const SeedContext& ctx) {
  nlohmann::json out;
  const int k_count = state.num_components();
  const std::vector<int> perm = component_permutation(state, ctx.data);
  out["permutation"] = perm;
  if (ctx.truth) {
    nlohmann::json eshds = nlohmann::json::array(), shds = nlohmann::json::array();
    double sum = 0.0;
    for (int k = 0; k < k_count; ++k) {
      const int label = perm[static_cast<std::size_t>(k)];
      if (label >= ctx.truth->num_components()) {
        eshds.push_back(nullptr);
        shds.push_back(nullptr);
        continue;
      }
      const Adjacency& truth = ctx.truth->components[static_cast<std::size_t>(label)].graph;
      const double e = eshd(component_graphs(state, k, vc), truth);
      eshds.push_back(e);
      shds.push_back(shd(map_graph(state, k, ctx.data, vc), truth));
      sum += e;
    }
    out["eshd"] = eshds;
    out["eshd_mean"] = sum / k_count;
    out["map_shd"] = shds;
  }
  if (k_count > 1 && ctx.data.labels) {
    out["accuracy"] = match_and_score(state.responsibilities, *ctx.data.labels).accuracy;
    if (ctx.data.held_out && ctx.data.held_out_labels)
      out["held_out_accuracy"] = match_and_score(state.responsibilities, *ctx.data.labels,
                                                 predict_responsibilities(state, *ctx.data.held_out, vc),
                                                 *ctx.data.held_out_labels)
                                     .accuracy;
  }
  const bool held = ctx.data.held_out.has_value();
  const Eigen::MatrixXd& eval_rows = held ? *ctx.data.held_out : ctx.data.rows;
  const Eigen::MatrixXd resp = held ? predict_responsibilities(state, eval_rows, vc) : state.responsibilities;
  out["map_neg_lppd"] = map_neg_lppd(particle_log_likelihoods(state, eval_rows, vc), resp);
  out["lppd_rows"] = held ? "held_out" : "train";
  out["restarts"] = state.restarts;
  out["converged"] = state.converged;
  out["state_hash"] = hex64(state_hash(state));
  return out;
}

inline nlohmann::json gmm_baseline_report(const SeedContext& ctx, int k) {
  if (k < 2 || !ctx.data.labels) return nullptr;
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t i = 0; i < 5; ++i) seeds.push_back(derive_seed(ctx.seed, {0x676d6dULL, i}));
  const GmmResult fit = gmm_em_baseline(ctx.data.rows, k, seeds);
  nlohmann::json out = {{"accuracy", match_and_score(fit.responsibilities, *ctx.data.labels).accuracy},
                        {"log_likelihood", fit.log_likelihood}};
  if (ctx.data.held_out && ctx.data.held_out_labels)
    out["held_out_accuracy"] =
        match_and_score(fit.responsibilities, *ctx.data.labels, gmm_predict(fit, *ctx.data.held_out),
                        *ctx.data.held_out_labels)
            .accuracy;
  return out;
}

inline nlohmann::json record_json_without_time(const ElicitationRecord& r) {
  nlohmann::json j = to_json(r);
  j.erase("timestamp_ms");
  return j;
}

struct SeedRun {
  nlohmann::json report;                 // deterministic, no timestamps
  std::vector<nlohmann::json> progress;  // events in order, may carry timestamps
  bool ok = true;
};

/// One seed of an experiment under the configured strategy. The simulated
/// expert answers for component k from the reference graph of the label k was
/// matched to after the latest inference.
inline SeedRun run_seed(const ExperimentConfig& cfg, std::uint64_t seed, int inner_workers = 1) {
  SeedRun run;
  run.report = {{"seed", seed}, {"experiment", to_string(cfg.experiment)}, {"strategy", to_string(cfg.strategy)}};
  auto emit = [&](nlohmann::json j, int query_round) {
    j["seed"] = seed;
    j["query_round"] = query_round;
    run.progress.push_back(std::move(j));
  };
  try {
    const SeedContext ctx = prepare_seed(cfg, seed);
    run.report["data"] = dataset_manifest(ctx.data, seed);
    if (ctx.truth) {
      nlohmann::json graphs = nlohmann::json::array();
      for (const auto& c : ctx.truth->components) graphs.push_back(to_json(c.graph));
      run.report["truth"] = {{"graphs", graphs}, {"mixing", ctx.truth->mixing}};
      if (ctx.truth_oracle_accuracy) run.report["truth"]["oracle_accuracy"] = *ctx.truth_oracle_accuracy;
    } else if (!ctx.reference.empty()) {
      nlohmann::json graphs = nlohmann::json::array();
      for (const auto& g : ctx.reference) graphs.push_back(to_json(g));
      run.report["reference_graphs"] = graphs;
    }

    ExperimentConfig inner = cfg;
    inner.workers = inner_workers;
    const VamslConfig vc = inner.vamsl_config();
    const LoopSettings settings = cfg.loop_settings();
    std::optional<ExpertOracle> oracle;
    if (!ctx.reference.empty()) oracle.emplace(cfg.oracle_spec(ctx.reference), derive_seed(seed, {0x6f72636cULL}));

    std::vector<int> perm;
    int current_round = 0;
    nlohmann::json rounds = nlohmann::json::array();
    const RoundCallback on_round = [&](int round, const ElicitationDriver& driver) {
      current_round = round;
      perm = component_permutation(driver.state(), ctx.data);
      nlohmann::json m = evaluate_state(driver.state(), vc, ctx);
      m["round"] = round;
      m["queries"] = driver.records().size();
      emit({{"event", "evaluation"}, {"metrics", m}}, round);
      rounds.push_back(std::move(m));
      for (const auto& q : driver.pending()) emit({{"event", "query"}, {"query", to_json(q)}}, round);
    };
    const Responder responder = [&](int component, Edge edge) -> std::optional<double> {
      if (!oracle) return std::nullopt;
      const int label = perm[static_cast<std::size_t>(component)];
      if (label >= static_cast<int>(ctx.reference.size())) return std::nullopt;
      const double psi = oracle->respond(edge, label);
      return psi;
    };
    const ProgressSink sink = [&](const nlohmann::json& j) { emit(j, current_round); };
    const ElicitationResult result = run_elicitation_loop(ctx.data, vc, settings, responder, seed, on_round, sink);

    nlohmann::json records = nlohmann::json::array();
    for (const auto& r : result.records) {
      records.push_back(record_json_without_time(r));
      nlohmann::json ev = {{"event", "response"}, {"record", to_json(r)}};
      emit(ev, current_round);
    }
    run.report["rounds"] = rounds;
    run.report["final"] = rounds.back();
    run.report["elicitation"] = {{"records", records},
                                 {"rounds_completed", result.rounds_completed},
                                 {"aborted", result.aborted},
                                 {"under_run", result.under_run}};
    if (cfg.components > 1) run.report["baseline_gmm"] = gmm_baseline_report(ctx, cfg.components);
    run.report["status"] = "ok";
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    run.ok = false;
    run.report["status"] = "failed";
    run.report["error"] = e.what();
    emit({{"event", "failure"}, {"error", e.what()}}, -1);
  }
  return run;
}

struct Interval {
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

/// Percentile bootstrap of the mean.
inline Interval bootstrap_mean_ci(const std::vector<double>& values, std::uint64_t seed, int resamples = 1000,
                                  double level = 0.95) {
  if (values.empty()) throw ContractError("bootstrap_mean_ci: no values");
  const double n = static_cast<double>(values.size());
  Interval out;
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  Rng rng(seed);
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i)
      s += values[static_cast<std::size_t>(rng.uniform() * n)];
    m = s / n;
  }
  std::sort(means.begin(), means.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(resamples - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    const std::size_t j = std::min(i + 1, means.size() - 1);
    return means[i] + (pos - static_cast<double>(i)) * (means[j] - means[i]);
  };
  out.lo = quantile((1.0 - level) / 2.0);
  out.hi = quantile(1.0 - (1.0 - level) / 2.0);
  return out;
}

inline nlohmann::json to_json(const Interval& ci) { return {{"mean", ci.mean}, {"lo", ci.lo}, {"hi", ci.hi}}; }

struct ExperimentOutcome {
  nlohmann::json report;  // aggregate
  std::vector<SeedRun> seeds;
  bool partial = false;
};

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

inline std::string csv_number(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

/// Scalar metrics of one evaluation, flattened to name -> value.
inline std::vector<std::pair<std::string, double>> flat_metrics(const nlohmann::json& m) {
  std::vector<std::pair<std::string, double>> out;
  for (auto it = m.begin(); it != m.end(); ++it) {
    if (it.key() == "round" || it.key() == "permutation") continue;
    if (it.value().is_number()) out.emplace_back(it.key(), it.value().get<double>());
    if (it.value().is_boolean()) out.emplace_back(it.key(), it.value().get<bool>() ? 1.0 : 0.0);
    if (it.value().is_array())
      for (std::size_t k = 0; k < it.value().size(); ++k)
        if (it.value()[k].is_number()) out.emplace_back(it.key() + "_" + std::to_string(k), it.value()[k].get<double>());
  }
  return out;
}

inline std::vector<SeedRun> run_seeds(const ExperimentConfig& cfg) {
  std::vector<SeedRun> runs(cfg.seeds.size());
  const int inner = cfg.seeds.size() > 1 ? 1 : cfg.workers;
  parallel_for(cfg.seeds.size(), cfg.workers, [&](std::size_t i) { runs[i] = run_seed(cfg, cfg.seeds[i], inner); });
  return runs;
}

}  // namespace detail

/// Runs every seed and aggregates the final-round metrics. Failed seeds are
/// reported with a failure marker and left out of the aggregate.
inline ExperimentOutcome run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentOutcome out;
  out.seeds = detail::run_seeds(cfg);
  std::map<std::string, std::vector<double>> finals;
  nlohmann::json statuses = nlohmann::json::array();
  for (const auto& s : out.seeds) {
    statuses.push_back({{"seed", s.report["seed"]}, {"status", s.report["status"]}});
    if (!s.ok) {
      out.partial = true;
      continue;
    }
    for (const auto& [name, v] : detail::flat_metrics(s.report["final"])) finals[name].push_back(v);
    if (s.report.contains("baseline_gmm") && !s.report["baseline_gmm"].is_null())
      for (const auto& [name, v] : detail::flat_metrics(s.report["baseline_gmm"])) finals["gmm_" + name].push_back(v);
  }
  nlohmann::json summary = nlohmann::json::object();
  for (const auto& [name, values] : finals)
    summary[name] = to_json(bootstrap_mean_ci(values, derive_seed(cfg.seeds.front(), {0x626f6f74ULL})));
  out.report = {{"config", numeric_config(cfg)},
                {"config_hash", config_hash(cfg)},
                {"seeds", statuses},
                {"partial", out.partial},
                {"summary", summary}};
  return out;
}

/// Writes report.json, seed-<s>/report.json, metrics.csv and progress.ndjson.
inline void write_experiment(const ExperimentOutcome& outcome, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  detail::write_text(dir / "report.json", outcome.report.dump(2) + "\n");
  std::string csv = "seed,round,queries,metric,value\n";
  std::string progress;
  for (const auto& s : outcome.seeds) {
    const std::string seed = std::to_string(s.report["seed"].get<std::uint64_t>());
    detail::write_text(dir / ("seed-" + seed) / "report.json", s.report.dump(2) + "\n");
    if (s.ok) {
      for (const auto& m : s.report["rounds"])
        for (const auto& [name, v] : detail::flat_metrics(m))
          if (name != "queries")
            csv += seed + "," + std::to_string(m["round"].get<int>()) + "," +
                   std::to_string(m["queries"].get<int>()) + "," + name + "," + detail::csv_number(v) + "\n";
      if (s.report.contains("baseline_gmm") && !s.report["baseline_gmm"].is_null())
        for (const auto& [name, v] : detail::flat_metrics(s.report["baseline_gmm"]))
          csv += seed + ",,," + "gmm_" + name + "," + detail::csv_number(v) + "\n";
    }
    for (const auto& p : s.progress) progress += p.dump() + "\n";
  }
  detail::write_text(dir / "metrics.csv", csv);
  detail::write_text(dir / "progress.ndjson", progress);
}

// ---------------------------------------------------------------- comparison

struct StrategyComparison {
  std::vector<QueryStrategy> strategies;
  std::vector<std::uint64_t> seeds;
  /// eshd[s][i][r]: mean ESHD of strategy s, seed i, after r answered rounds.
  std::vector<std::vector<std::vector<double>>> eshd;
  std::vector<std::uint64_t> failed_seeds;
  nlohmann::json summary;
};

/// Paired ESHD per seed under each strategy. Data, ground truth and expert
/// answers depend only on the seed, so the columns differ only by the queries.
inline StrategyComparison compare_strategies(ExperimentConfig cfg, const std::vector<QueryStrategy>& strategies) {
  cfg.validate();
  if (strategies.empty()) throw ConfigError("strategies", "at least one strategy required");
  if (cfg.experiment == ExperimentKind::real_data) throw ConfigError("experiment", "comparison needs a synthetic truth");
  StrategyComparison out;
  out.strategies = strategies;
  out.seeds = cfg.seeds;
  const std::size_t n = cfg.seeds.size();
  std::vector<std::vector<SeedRun>> runs(strategies.size());
  for (std::size_t s = 0; s < strategies.size(); ++s) {
    ExperimentConfig c = cfg;
    c.strategy = strategies[s];
    runs[s] = detail::run_seeds(c);
  }
  std::vector<bool> ok(n, true);
  for (const auto& col : runs)
    for (std::size_t i = 0; i < n; ++i) ok[i] = ok[i] && col[i].ok;
  for (std::size_t i = 0; i < n; ++i)
    if (!ok[i]) out.failed_seeds.push_back(cfg.seeds[i]);

  out.eshd.assign(strategies.size(), {});
  for (std::size_t s = 0; s < strategies.size(); ++s)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> per_round;
      if (ok[i])
        for (const auto& m : runs[s][i].report["rounds"]) per_round.push_back(m["eshd_mean"].get<double>());
      out.eshd[s].push_back(std::move(per_round));
    }

  const std::uint64_t boot_seed = derive_seed(cfg.seeds.front(), {0x626f6f74ULL});
  nlohmann::json summary = nlohmann::json::object();
  const int rounds = cfg.query_rounds + 1;
  for (std::size_t s = 0; s < strategies.size(); ++s) {
    nlohmann::json per_round = nlohmann::json::array();
    for (int r = 0; r < rounds; ++r) {
      std::vector<double> v;
      for (std::size_t i = 0; i < n; ++i)
        if (ok[i] && static_cast<int>(out.eshd[s][i].size()) > r) v.push_back(out.eshd[s][i][static_cast<std::size_t>(r)]);
      if (v.empty()) {
        per_round.push_back(nullptr);
        continue;
      }
      nlohmann::json j = to_json(bootstrap_mean_ci(v, boot_seed));
      j["budget"] = r * cfg.queries_per_round;
      per_round.push_back(std::move(j));
    }
    summary[to_string(strategies[s])] = per_round;
  }
  if (strategies.size() == 2) {
    std::vector<double> diff;
    for (std::size_t i = 0; i < n; ++i)
      if (ok[i] && !out.eshd[0][i].empty() && !out.eshd[1][i].empty())
        diff.push_back(out.eshd[0][i].back() - out.eshd[1][i].back());
    if (!diff.empty())
      summary["final_difference"] = {{"minuend", to_string(strategies[0])},
                                     {"subtrahend", to_string(strategies[1])},
                                     {"ci", to_json(bootstrap_mean_ci(diff, boot_seed))}};
  }
  out.summary = summary;
  return out;
}

inline nlohmann::json to_json(const StrategyComparison& c) {
  nlohmann::json per_seed = nlohmann::json::array();
  for (std::size_t i = 0; i < c.seeds.size(); ++i) {
    nlohmann::json row = {{"seed", c.seeds[i]}};
    for (std::size_t s = 0; s < c.strategies.size(); ++s) row[to_string(c.strategies[s])] = c.eshd[s][i];
    per_seed.push_back(std::move(row));
  }
  return {{"per_seed", per_seed}, {"failed_seeds", c.failed_seeds}, {"summary", c.summary}};
}

/// compare.json plus compare.csv with one row per seed and budget.
inline void write_comparison(const StrategyComparison& c, const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json j = to_json(c);
  j["config"] = numeric_config(cfg);
  j["config_hash"] = config_hash(cfg);
  detail::write_text(dir / "compare.json", j.dump(2) + "\n");
  std::string csv = "seed,budget";
  for (auto s : c.strategies) csv += "," + to_string(s);
  csv += "\n";
  for (std::size_t i = 0; i < c.seeds.size(); ++i) {
    const std::size_t rounds = c.eshd.front()[i].size();
    for (std::size_t r = 0; r < rounds; ++r) {
      csv += std::to_string(c.seeds[i]) + "," + std::to_string(static_cast<int>(r) * cfg.queries_per_round);
      for (std::size_t s = 0; s < c.strategies.size(); ++s) csv += "," + detail::csv_number(c.eshd[s][i][r]);
      csv += "\n";
    }
  }
  detail::write_text(dir / "compare.csv", csv);
}

}  // namespace vamsl
