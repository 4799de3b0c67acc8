#pragma once

// Simulated expert: Beta-distributed answers centred on |r - 1 + 1{edge}| for a
// reference graph per component.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "vamsl/errors.hpp"
#include "vamsl/latent_graph.hpp"
#include "vamsl/rng.hpp"

namespace vamsl {

struct OracleSpec {
  std::vector<Adjacency> reference_graphs;
  double reliability = 0.9;
  double variance = 0.05;
  double mean_lo = 0.02;
  double mean_hi = 0.98;
  /// Answer exactly 0 or 1 from the reference graph (hard responses).
  bool perfect = false;

  void validate() const {
    if (reference_graphs.empty()) throw ConfigError("oracle.reference_graphs", "need one graph per component");
    if (!(reliability >= 0.0 && reliability <= 1.0)) throw ConfigError("oracle.reliability", "must lie in [0, 1]");
    if (!(variance > 0.0 && variance < 0.25)) throw ConfigError("oracle.variance", "must lie in (0, 0.25)");
    if (!(mean_lo > 0.0 && mean_lo <= 0.5 && mean_hi >= 0.5 && mean_hi < 1.0 && mean_lo <= mean_hi))
      throw ConfigError("oracle.mean_clamp", "bounds must satisfy 0 < lo <= 0.5 <= hi < 1");
  }
};

struct BetaShape {
  double a = 1.0;
  double b = 1.0;
};

inline double oracle_mean(bool edge_present, const OracleSpec& spec) {
  const double m = std::abs(spec.reliability - 1.0 + (edge_present ? 1.0 : 0.0));
  return std::clamp(m, spec.mean_lo, spec.mean_hi);
}

/// Moment-matched Beta for mean m. Where m(1 - m) does not exceed the
/// configured variance the variance is reduced to m(1 - m) / 2, which keeps the
/// mean and gives Beta(m, 1 - m).
inline BetaShape oracle_shape(double m, double variance) {
  if (!(m > 0.0 && m < 1.0)) throw ContractError("oracle_shape: mean must lie in (0, 1)");
  const double spread = m * (1.0 - m);
  const double v = variance < spread ? variance : 0.5 * spread;
  const double c = spread / v - 1.0;
  return {m * c, (1.0 - m) * c};
}

class ExpertOracle {
 public:
  ExpertOracle(OracleSpec spec, std::uint64_t seed) : spec_(std::move(spec)), seed_(seed) { spec_.validate(); }

  const OracleSpec& spec() const { return spec_; }

  /// The answer for (component, edge) depends only on the seed and the
  /// question, so different query strategies see the same expert.
  double respond(Edge edge, int component) const {
    if (component < 0 || component >= static_cast<int>(spec_.reference_graphs.size()))
      throw ContractError("ExpertOracle::respond: no reference graph for component");
    const Adjacency& g = spec_.reference_graphs[static_cast<std::size_t>(component)];
    if (edge.from < 0 || edge.to < 0 || edge.from >= g.rows() || edge.to >= g.rows())
      throw ContractError("ExpertOracle::respond: edge outside the reference graph");
    const bool present = g(edge.from, edge.to) != 0;
    if (spec_.perfect) return present ? 1.0 : 0.0;
    const BetaShape s = oracle_shape(oracle_mean(present, spec_), spec_.variance);
    Rng rng = make_stream(seed_, {static_cast<std::uint64_t>(component), static_cast<std::uint64_t>(edge.from),
                                  static_cast<std::uint64_t>(edge.to)});
    return sample_beta(s.a, s.b, rng);
  }

  /// Independent draw from the same response distribution (for calibration checks).
  double draw(Edge edge, int component, Rng& rng) const {
    const bool present = spec_.reference_graphs.at(static_cast<std::size_t>(component))(edge.from, edge.to) != 0;
    if (spec_.perfect) return present ? 1.0 : 0.0;
    const BetaShape s = oracle_shape(oracle_mean(present, spec_), spec_.variance);
    return sample_beta(s.a, s.b, rng);
  }

 private:
  OracleSpec spec_;
  std::uint64_t seed_;
};

}  // namespace vamsl
