#pragma once

// Expert-in-the-loop inference: infer, select queries per component, collect
// answers, fold them into the component beliefs and infer again until the
// query budget is spent.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "vamsl/bed.hpp"
#include "vamsl/bn_likelihood.hpp"
#include "vamsl/elicitation.hpp"
#include "vamsl/errors.hpp"
#include "vamsl/latent_graph.hpp"
#include "vamsl/mixture.hpp"
#include "vamsl/rng.hpp"

namespace vamsl {

enum class QueryStrategy { bed, random };

inline std::string to_string(QueryStrategy s) { return s == QueryStrategy::bed ? "bed" : "random"; }

inline QueryStrategy parse_query_strategy(const std::string& s) {
  if (s == "bed") return QueryStrategy::bed;
  if (s == "random") return QueryStrategy::random;
  throw ConfigError("query.strategy", "expected \"bed\" or \"random\", got \"" + s + "\"");
}

struct LoopSettings {
  int queries_per_component = 5;  // M
  int query_rounds = 0;           // B
  QueryStrategy strategy = QueryStrategy::bed;
  BedSettings bed;

  void validate() const {
    if (queries_per_component < 0) throw ConfigError("query.per_round", "must be nonnegative");
    if (query_rounds < 0) throw ConfigError("query.rounds", "must be nonnegative");
    bed.simulator.validate();
    if (bed.outer_samples < 1) throw ConfigError("query.outer_samples", "must be positive");
  }
};

/// Seed of the inference run that follows `round` answered query rounds.
inline std::uint64_t inference_seed(std::uint64_t seed, int round) {
  return round == 0 ? seed : derive_seed(seed, {0x71727964ULL, static_cast<std::uint64_t>(round)});
}

enum class LoopPhase { inferring, awaiting_responses, done };

inline std::string to_string(LoopPhase p) {
  switch (p) {
    case LoopPhase::inferring: return "inferring";
    case LoopPhase::awaiting_responses: return "awaiting_responses";
    case LoopPhase::done: return "done";
  }
  return "done";
}

/// Edge probabilities of every used particle at the end of its annealing schedule.
inline std::vector<Eigen::MatrixXd> particle_edge_probs(const MixtureState& state, int k, const VamslConfig& cfg) {
  const ComponentState& comp = state.components.at(static_cast<std::size_t>(k));
  const int d = state.num_vars;
  const double omega = cfg.schedules.omega(std::max<long>(comp.particles.step, 1));
  std::vector<Eigen::MatrixXd> out;
  for (std::size_t p : used_particles(comp))
    out.push_back(soft_graph(embedding_of(comp.particles.particles[p], cfg.latent_dim_for(d), d), omega,
                             comp.beliefs.mask)
                      .probs);
  return out;
}

/// Step-by-step driver shared by the in-process loop and the session service.
/// Call infer(), answer the pending queries, then infer() again; the driver
/// is done once `query_rounds` rounds were answered and the last inference ran.
class ElicitationDriver {
 public:
  ElicitationDriver(Dataset data, VamslConfig cfg, LoopSettings settings, std::uint64_t seed,
                    ProgressSink sink = {})
      : data_(std::move(data)), cfg_(std::move(cfg)), settings_(std::move(settings)), seed_(seed), sink_(std::move(sink)) {
    cfg_.validate();
    settings_.validate();
    beliefs_.assign(static_cast<std::size_t>(cfg_.num_components), ComponentBeliefs(data_.num_vars()));
  }

  LoopPhase phase() const { return phase_; }
  int round() const { return round_; }
  const MixtureState& state() const {
    if (!state_) throw ContractError("ElicitationDriver: no inference has run yet");
    return *state_;
  }
  bool has_state() const { return state_.has_value(); }
  const std::vector<ComponentBeliefs>& beliefs() const { return beliefs_; }
  const std::vector<QueryCandidate>& pending() const { return pending_; }
  const VamslConfig& config() const { return cfg_; }
  const LoopSettings& settings() const { return settings_; }
  const Dataset& data() const { return data_; }
  bool under_run() const { return under_run_; }

  std::vector<ElicitationRecord> records() const {
    std::vector<ElicitationRecord> out;
    for (const auto& b : beliefs_) out.insert(out.end(), b.records.begin(), b.records.end());
    return out;
  }

  /// Runs inference for the current round and, if budget remains, selects the
  /// next queries. Unanswered queries from the previous round are dropped.
  void infer() {
    if (phase_ == LoopPhase::done) throw ContractError("ElicitationDriver::infer: loop already finished");
    pending_.clear();
    phase_ = LoopPhase::inferring;
    state_ = run_cavi(data_, cfg_, beliefs_, inference_seed(seed_, round_), sink_);
    if (round_ >= settings_.query_rounds || settings_.queries_per_component == 0) {
      phase_ = LoopPhase::done;
      return;
    }
    pending_ = propose();
    phase_ = pending_.empty() ? LoopPhase::done : LoopPhase::awaiting_responses;
  }

  /// Records an answer to a pending query.
  ElicitationRecord answer(int component, Edge edge, double psi_star) {
    if (phase_ != LoopPhase::awaiting_responses) throw ContractError("answer: not awaiting responses");
    auto it = std::find_if(pending_.begin(), pending_.end(),
                           [&](const QueryCandidate& q) { return q.component == component && q.edge == edge; });
    if (it == pending_.end()) throw ContractError("answer: edge is not a pending query for this component");
    if (!(psi_star >= 0.0 && psi_star <= 1.0)) throw ContractError("answer: psi_star must lie in [0, 1]");
    ElicitationRecord rec = register_response(psi_star, edge, component, cfg_.elicitation,
                                              beliefs_[static_cast<std::size_t>(component)]);
    pending_.erase(it);
    return rec;
  }

  /// Closes the current query round so that the next infer() uses the answers.
  void close_round() {
    if (phase_ != LoopPhase::awaiting_responses) throw ContractError("close_round: not awaiting responses");
    pending_.clear();
    ++round_;
    phase_ = LoopPhase::inferring;
  }

  /// Ends the loop early, keeping the last inferred state.
  void abort() {
    pending_.clear();
    phase_ = LoopPhase::done;
    aborted_ = true;
  }
  bool aborted() const { return aborted_; }

 private:
  std::vector<QueryCandidate> propose() {
    std::vector<QueryCandidate> out;
    const int m = settings_.queries_per_component;
    const std::uint64_t round_seed = derive_seed(seed_, {0x73656c63ULL, static_cast<std::uint64_t>(round_)});
    for (int k = 0; k < cfg_.num_components; ++k) {
      const std::vector<Edge> candidates = design_space(beliefs_[static_cast<std::size_t>(k)], settings_.bed.excluded);
      std::vector<QueryCandidate> picked;
      if (settings_.strategy == QueryStrategy::bed) {
        picked = take_top(rank_edges(k, candidates, particle_edge_probs(*state_, k, cfg_), settings_.bed, round_seed,
                                     cfg_.workers),
                          m, under_run_);
      } else {
        Rng rng = make_stream(round_seed, {0x726e64ULL, static_cast<std::uint64_t>(k)});
        picked = random_queries(k, candidates, m, rng, under_run_);
      }
      out.insert(out.end(), picked.begin(), picked.end());
    }
    return out;
  }

  Dataset data_;
  VamslConfig cfg_;
  LoopSettings settings_;
  std::uint64_t seed_;
  ProgressSink sink_;
  std::vector<ComponentBeliefs> beliefs_;
  std::optional<MixtureState> state_;
  std::vector<QueryCandidate> pending_;
  LoopPhase phase_ = LoopPhase::inferring;
  int round_ = 0;
  bool under_run_ = false;
  bool aborted_ = false;
};

/// Returns psi* for a query, or nullopt to stop the loop.
using Responder = std::function<std::optional<double>(int component, Edge edge)>;

struct ElicitationResult {
  MixtureState state;
  std::vector<ElicitationRecord> records;
  std::vector<ComponentBeliefs> beliefs;
  int rounds_completed = 0;
  bool aborted = false;
  bool under_run = false;
};

/// Called after every inference with the round index (answered rounds so far).
using RoundCallback = std::function<void(int round, const ElicitationDriver&)>;

inline ElicitationResult run_elicitation_loop(const Dataset& data, const VamslConfig& cfg, const LoopSettings& settings,
                                              const Responder& responder, std::uint64_t seed,
                                              const RoundCallback& on_round = {}, const ProgressSink& sink = {}) {
  ElicitationDriver driver(data, cfg, settings, seed, sink);
  for (;;) {
    driver.infer();
    if (on_round) on_round(driver.round(), driver);
    if (driver.phase() == LoopPhase::done) break;
    const std::vector<QueryCandidate> queries = driver.pending();
    bool stop = false;
    for (const auto& q : queries) {
      const std::optional<double> psi = responder ? responder(q.component, q.edge) : std::nullopt;
      if (!psi) {
        stop = true;
        break;
      }
      driver.answer(q.component, q.edge, *psi);
    }
    if (stop) {
      driver.abort();
      break;
    }
    driver.close_round();
  }
  return {driver.state(), driver.records(), driver.beliefs(), driver.round(), driver.aborted(), driver.under_run()};
}

inline nlohmann::json to_json(const ElicitationRecord& r) {
  nlohmann::json j = {{"component", r.component},
                      {"edge", {r.edge.from, r.edge.to}},
                      {"psi_star", r.psi_star},
                      {"kind", to_string(r.kind)},
                      {"timestamp_ms", r.timestamp_ms}};
  if (r.imagined) j["imagined"] = {{"n", r.imagined->n}, {"k", r.imagined->k}};
  return j;
}

}  // namespace vamsl
