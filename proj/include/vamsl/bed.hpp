#pragma once

// Query selection by expected information gain. The simulator maps a particle's
// edge probability g to a response distribution Beta(a_s g + 1, b_s (1 - g) + 1)
// (continuous) or Bernoulli(g) (binary).

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "vamsl/elicitation.hpp"
#include "vamsl/errors.hpp"
#include "vamsl/latent_graph.hpp"
#include "vamsl/parallel.hpp"
#include "vamsl/rng.hpp"

namespace vamsl {

struct SimulatorSpec {
  double alpha_s = 10.0;
  double beta_s = 10.0;
  bool binary_mode = false;

  void validate() const {
    if (!(alpha_s > 0.0)) throw ConfigError("simulator.alpha_s", "must be positive");
    if (!(beta_s > 0.0)) throw ConfigError("simulator.beta_s", "must be positive");
  }

  double shape_a(double g) const { return alpha_s * g + 1.0; }
  double shape_b(double g) const { return beta_s * (1.0 - g) + 1.0; }
};

/// log p(psi | g) under the simulator. In binary mode psi must be 0 or 1.
inline double simulator_log_density(double psi, double g, const SimulatorSpec& spec) {
  if (spec.binary_mode) {
    if (psi == 1.0) return g > 0.0 ? std::log(g) : -std::numeric_limits<double>::infinity();
    if (psi == 0.0) return g < 1.0 ? std::log1p(-g) : -std::numeric_limits<double>::infinity();
    throw ContractError("simulator_log_density: binary responses are 0 or 1");
  }
  return log_beta_density(psi, spec.shape_a(g), spec.shape_b(g));
}

inline double simulate_response(double g, const SimulatorSpec& spec, Rng& rng) {
  if (!(g >= 0.0 && g <= 1.0)) throw ContractError("simulate_response: edge probability outside [0, 1]");
  if (spec.binary_mode) return rng.uniform() < g ? 1.0 : 0.0;
  return sample_beta(spec.shape_a(g), spec.shape_b(g), rng);
}

struct EigEstimate {
  double value = 0.0;
  double standard_error = 0.0;
};

namespace detail {

inline double log_mean_exp(const std::vector<double>& v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s / static_cast<double>(v.size()));
}

}  // namespace detail

/// Nested Monte Carlo EIG over one edge. `edge_probs` holds G(Z_p)_ij for every
/// particle p; all particles enter the inner marginal.
inline EigEstimate eig_nmc(const std::vector<double>& edge_probs, const SimulatorSpec& spec, int outer_samples,
                           Rng& rng) {
  if (outer_samples < 1) throw ContractError("eig_nmc: need at least one outer sample");
  if (edge_probs.empty()) throw ContractError("eig_nmc: empty particle set");
  const std::size_t n = edge_probs.size();
  std::vector<double> terms(static_cast<std::size_t>(outer_samples));
  std::vector<double> inner(n);
  for (int s = 0; s < outer_samples; ++s) {
    const std::size_t pick = std::min(n - 1, static_cast<std::size_t>(rng.uniform() * static_cast<double>(n)));
    const double psi = simulate_response(edge_probs[pick], spec, rng);
    for (std::size_t p = 0; p < n; ++p) inner[p] = simulator_log_density(psi, edge_probs[p], spec);
    terms[static_cast<std::size_t>(s)] = inner[pick] - detail::log_mean_exp(inner);
  }
  double mean = 0.0;
  for (double t : terms) mean += t;
  mean /= outer_samples;
  double var = 0.0;
  for (double t : terms) var += (t - mean) * (t - mean);
  const double se = outer_samples > 1 ? std::sqrt(var / (outer_samples - 1) / outer_samples) : 0.0;
  return {mean, se};
}

/// Exact EIG for the binary simulator: the outer expectation over psi in
/// {0, 1} is enumerated, so the result is deterministic given the particles.
inline double eig_rao_blackwell(const std::vector<double>& edge_probs) {
  if (edge_probs.empty()) throw ContractError("eig_rao_blackwell: empty particle set");
  if (std::all_of(edge_probs.begin(), edge_probs.end(), [&](double g) { return g == edge_probs.front(); })) return 0.0;
  const double n = static_cast<double>(edge_probs.size());
  double mean = 0.0;
  for (double g : edge_probs) mean += g;
  mean /= n;
  auto xlogy = [](double x, double y) { return x > 0.0 ? x * std::log(y) : 0.0; };
  double out = 0.0;
  for (double g : edge_probs) {
    out += xlogy(g, g) - xlogy(g, mean);
    out += xlogy(1.0 - g, 1.0 - g) - xlogy(1.0 - g, 1.0 - mean);
  }
  return std::max(0.0, out / n);
}

struct QueryCandidate {
  int component = 0;
  Edge edge;
  double eig = 0.0;
  double standard_error = 0.0;
  int rank = 0;
};

struct QuerySelection {
  std::vector<QueryCandidate> queries;
  bool under_run = false;  // some component had fewer than M candidates
};

struct BedSettings {
  SimulatorSpec simulator;
  int outer_samples = 200;
  /// Edges the user removed from the design space.
  std::vector<Edge> excluded;
};

/// Free, never-queried, non-excluded off-diagonal edges in row-major order.
inline std::vector<Edge> design_space(const ComponentBeliefs& beliefs, const std::vector<Edge>& excluded = {}) {
  const int d = beliefs.mask.num_vars();
  std::vector<Edge> out;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      const Edge e{i, j};
      if (i == j || !beliefs.mask.is_free(i, j) || beliefs.was_queried(e)) continue;
      if (std::find(excluded.begin(), excluded.end(), e) != excluded.end()) continue;
      out.push_back(e);
    }
  return out;
}

/// Ranks one component's candidate edges by EIG. `soft_graphs` holds each
/// particle's soft graph. Ties, including exact zeros, fall back to row-major
/// edge order.
inline std::vector<QueryCandidate> rank_edges(int component, const std::vector<Edge>& candidates,
                                              const std::vector<Eigen::MatrixXd>& soft_graphs,
                                              const BedSettings& settings, std::uint64_t round_seed, int workers = 1) {
  settings.simulator.validate();
  std::vector<QueryCandidate> out(candidates.size());
  parallel_for(candidates.size(), workers, [&](std::size_t c) {
    const Edge e = candidates[c];
    std::vector<double> probs;
    probs.reserve(soft_graphs.size());
    for (const auto& g : soft_graphs) probs.push_back(std::clamp(g(e.from, e.to), 0.0, 1.0));
    QueryCandidate q{component, e, 0.0, 0.0, 0};
    if (settings.simulator.binary_mode) {
      q.eig = eig_rao_blackwell(probs);
    } else {
      Rng rng = make_stream(round_seed, {static_cast<std::uint64_t>(component), static_cast<std::uint64_t>(e.from),
                                         static_cast<std::uint64_t>(e.to)});
      const EigEstimate est = eig_nmc(probs, settings.simulator, settings.outer_samples, rng);
      q.eig = est.value;
      q.standard_error = est.standard_error;
    }
    out[c] = q;
  });
  std::stable_sort(out.begin(), out.end(), [](const QueryCandidate& a, const QueryCandidate& b) {
    if (a.eig != b.eig) return a.eig > b.eig;
    return a.edge < b.edge;
  });
  for (std::size_t r = 0; r < out.size(); ++r) out[r].rank = static_cast<int>(r) + 1;
  return out;
}

/// Keeps the first `m` entries of a ranked list, flagging a shortfall.
inline std::vector<QueryCandidate> take_top(std::vector<QueryCandidate> ranked, int m, bool& under_run) {
  if (static_cast<int>(ranked.size()) < m) under_run = true;
  if (static_cast<int>(ranked.size()) > m) ranked.resize(static_cast<std::size_t>(m));
  return ranked;
}

/// Uniformly random subset of `m` candidates, returned in draw order.
inline std::vector<QueryCandidate> random_queries(int component, std::vector<Edge> candidates, int m, Rng& rng,
                                                  bool& under_run) {
  std::vector<QueryCandidate> out;
  if (static_cast<int>(candidates.size()) < m) under_run = true;
  for (int r = 0; r < m && !candidates.empty(); ++r) {
    const std::size_t pick =
        std::min(candidates.size() - 1, static_cast<std::size_t>(rng.uniform() * static_cast<double>(candidates.size())));
    out.push_back({component, candidates[pick], 0.0, 0.0, r + 1});
    candidates.erase(candidates.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  return out;
}

inline nlohmann::json to_json(const QueryCandidate& q) {
  return {{"component", q.component}, {"edge", {q.edge.from, q.edge.to}}, {"eig", q.eig}, {"rank", q.rank}};
}

inline nlohmann::json to_json(const QuerySelection& s) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& q : s.queries) arr.push_back(to_json(q));
  return arr;
}

}  // namespace vamsl
