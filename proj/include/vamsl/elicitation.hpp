#pragma once

// Elicited edge beliefs: the imaginary-observations user model, the
// elicitation likelihood on soft graphs, per-particle elicitation matrices and
// hard-constraint registration.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vamsl/errors.hpp"
#include "vamsl/latent_graph.hpp"
#include "vamsl/rng.hpp"

namespace vamsl {

/// Beta(alpha0, beta0) prior of the expert before seeing any trials.
struct ExpertPriorHyper {
  double alpha0 = 10.0;
  double beta0 = 10.0;

  void validate() const {
    if (!(alpha0 > 1.0)) throw ConfigError("elicitation.alpha0", "must exceed 1 for the prior mode to exist");
    if (!(beta0 > 1.0)) throw ConfigError("elicitation.beta0", "must exceed 1 for the prior mode to exist");
  }

  double prior_mode() const { return (alpha0 - 1.0) / (alpha0 + beta0 - 2.0); }
};

/// n imagined trials of which k confirmed the edge (k is 0 or n).
struct ImaginaryObservations {
  int n = 0;
  int k = 0;

  friend bool operator==(const ImaginaryObservations&, const ImaginaryObservations&) = default;
};

/// Inverts the conjugate Beta-binomial mode update: the smallest integer
/// number of all-confirming (or all-refuting) trials that moves the prior mode
/// to psi_star, rounded down.
inline ImaginaryObservations map_response_to_observations(double psi_star, const ExpertPriorHyper& hyper) {
  hyper.validate();
  if (!(psi_star > 0.0 && psi_star < 1.0))
    throw ContractError("map_response_to_observations: psi_star must lie in (0, 1)");
  const double mode = hyper.prior_mode();
  const double s = hyper.alpha0 + hyper.beta0 - 2.0;
  // exact integers such as (0.7 * 18 - 9) / 0.3 = 12 land just below in floating point
  auto floor_tol = [](double v) { return std::floor(v + 1e-9 * std::max(1.0, std::abs(v))); };
  if (psi_star > mode) {
    const int n = static_cast<int>(floor_tol((psi_star * s - hyper.alpha0 + 1.0) / (1.0 - psi_star)));
    return {std::max(n, 0), std::max(n, 0)};
  }
  if (psi_star < mode) {
    const int n = static_cast<int>(floor_tol((hyper.alpha0 - 1.0 - psi_star * s) / psi_star));
    return {std::max(n, 0), 0};
  }
  return {0, 0};
}

enum class ResponseKind { hard_present, hard_absent, soft };

inline const char* to_string(ResponseKind k) {
  switch (k) {
    case ResponseKind::hard_present: return "hard_present";
    case ResponseKind::hard_absent: return "hard_absent";
    case ResponseKind::soft: return "soft";
  }
  return "soft";
}

struct ElicitationRecord {
  Edge edge;
  double psi_star = 0.5;
  ResponseKind kind = ResponseKind::soft;
  std::optional<ImaginaryObservations> imagined;  // soft records only
  int component = 0;
  std::int64_t timestamp_ms = 0;                  // wall clock, audit only

  bool is_hard() const { return kind != ResponseKind::soft; }
};

struct ElicitationSettings {
  ExpertPriorHyper hyper;
  /// Responses within this distance of 0 or 1 become hard constraints.
  double hard_epsilon = 1e-3;
};

/// Everything elicited for one mixture component.
struct ComponentBeliefs {
  HardConstraintMask mask;
  std::vector<ElicitationRecord> records;
  /// (component, from, to) pairs already put to the expert.
  std::vector<Edge> queried;
  int replaced = 0;      // duplicate registrations replaced by a later answer
  int downgraded = 0;    // hard-present answers that would close a required cycle

  ComponentBeliefs() = default;
  explicit ComponentBeliefs(int d) : mask(d) {}

  std::vector<ElicitationRecord> soft_records() const {
    std::vector<ElicitationRecord> out;
    for (const auto& r : records)
      if (r.kind == ResponseKind::soft) out.push_back(r);
    return out;
  }

  bool was_queried(Edge e) const { return std::find(queried.begin(), queried.end(), e) != queried.end(); }
};

inline std::int64_t wall_clock_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

/// Classifies a response as hard or soft and stores it in `beliefs`. Hard
/// responses pin the mask entry; a required edge that would close a cycle of
/// required edges is kept as a soft record at the clamp boundary instead.
inline ElicitationRecord register_response(double psi_star, Edge edge, int component, const ElicitationSettings& settings,
                                           ComponentBeliefs& beliefs) {
  const int d = beliefs.mask.num_vars();
  if (edge.from < 0 || edge.to < 0 || edge.from >= d || edge.to >= d || edge.from == edge.to)
    throw ContractError("register_response: edge outside the design space");
  if (!(psi_star >= 0.0 && psi_star <= 1.0)) throw ContractError("register_response: psi_star must lie in [0, 1]");
  settings.hyper.validate();
  const double eps = settings.hard_epsilon;

  // replace-with-latest
  auto old = std::find_if(beliefs.records.begin(), beliefs.records.end(),
                          [&](const ElicitationRecord& r) { return r.edge == edge; });
  if (old != beliefs.records.end()) {
    if (old->is_hard()) beliefs.mask.set(edge.from, edge.to, EdgeConstraint::free);
    beliefs.records.erase(old);
    ++beliefs.replaced;
  }

  ElicitationRecord rec;
  rec.edge = edge;
  rec.psi_star = psi_star;
  rec.component = component;
  rec.timestamp_ms = wall_clock_ms();

  if (psi_star >= 1.0 - eps && beliefs.mask.would_close_required_cycle(edge.from, edge.to)) {
    ++beliefs.downgraded;
    rec.psi_star = 1.0 - eps;
    rec.kind = ResponseKind::soft;
    rec.imagined = map_response_to_observations(rec.psi_star, settings.hyper);
  } else if (psi_star >= 1.0 - eps) {
    rec.kind = ResponseKind::hard_present;
    beliefs.mask.set(edge.from, edge.to, EdgeConstraint::required);
  } else if (psi_star <= eps) {
    rec.kind = ResponseKind::hard_absent;
    beliefs.mask.set(edge.from, edge.to, EdgeConstraint::forbidden);
  } else {
    rec.kind = ResponseKind::soft;
    rec.imagined = map_response_to_observations(psi_star, settings.hyper);
  }
  beliefs.records.push_back(rec);
  if (!beliefs.was_queried(edge)) beliefs.queried.push_back(edge);
  return rec;
}

/// One entry of a particle's elicitation matrix.
struct ElicitedObservation {
  Edge edge;
  double psi = 0.5;  // psi_star, or 0.5 when left out for this particle
  ImaginaryObservations obs;
};

using ElicitationMatrix = std::vector<ElicitedObservation>;

inline ElicitationMatrix full_elicitation_matrix(const std::vector<ElicitationRecord>& soft_records) {
  ElicitationMatrix m;
  for (const auto& r : soft_records) {
    if (r.kind != ResponseKind::soft || !r.imagined) throw ContractError("elicitation matrix: soft records only");
    m.push_back({r.edge, r.psi_star, *r.imagined});
  }
  return m;
}

/// Each particle keeps a response with probability max(psi, 1 - psi);
/// otherwise the entry reads 0.5 and contributes no observations.
inline std::vector<ElicitationMatrix> sample_elicitation_matrices(const std::vector<ElicitationRecord>& soft_records,
                                                                  std::size_t num_particles, Rng& rng) {
  if (num_particles == 0) throw ContractError("sample_elicitation_matrices: need at least one particle");
  const ElicitationMatrix full = full_elicitation_matrix(soft_records);
  std::vector<ElicitationMatrix> out(num_particles);
  for (auto& m : out) {
    m.reserve(full.size());
    for (const auto& e : full) {
      const double keep = std::max(e.psi, 1.0 - e.psi);
      if (rng.uniform() < keep)
        m.push_back(e);
      else
        m.push_back({e.edge, 0.5, {0, 0}});
    }
  }
  return out;
}

struct ElicitationLikelihood {
  double value = 0.0;
  Eigen::MatrixXd grad_soft;  // d value / d G(Z)_ij
};

inline constexpr double kProbClamp = 1e-12;

/// sum over entries of k ln G_ij (confirming trials) or n ln(1 - G_ij)
/// (refuting trials); the binomial coefficient and the other factor are 1.
inline ElicitationLikelihood elicitation_log_likelihood(const ElicitationMatrix& entries, const SoftGraph& soft,
                                                        const HardConstraintMask& mask) {
  const int d = soft.num_vars();
  ElicitationLikelihood out{0.0, Eigen::MatrixXd::Zero(d, d)};
  for (const auto& e : entries) {
    if (!mask.is_free(e.edge.from, e.edge.to))
      throw ContractError("elicitation_log_likelihood: soft record on a hard-constrained entry");
    if (e.obs.n == 0) continue;
    const double p = std::clamp(soft.probs(e.edge.from, e.edge.to), kProbClamp, 1.0 - kProbClamp);
    if (e.obs.k == e.obs.n) {
      out.value += e.obs.k * std::log(p);
      out.grad_soft(e.edge.from, e.edge.to) += e.obs.k / p;
    } else {
      out.value += e.obs.n * std::log1p(-p);
      out.grad_soft(e.edge.from, e.edge.to) -= e.obs.n / (1.0 - p);
    }
  }
  return out;
}

inline ElicitationLikelihood elicitation_log_likelihood(const std::vector<ElicitationRecord>& records,
                                                        const SoftGraph& soft, const HardConstraintMask& mask) {
  return elicitation_log_likelihood(full_elicitation_matrix(records), soft, mask);
}

/// Gradient of the elicitation log likelihood w.r.t. the logits U_i . V_j,
/// using d ln sigma(w x)/dx = w (1 - sigma) so saturated entries keep their pull.
inline Eigen::MatrixXd elicitation_logit_gradient(const ElicitationMatrix& entries, const SoftGraph& soft,
                                                  double omega) {
  const int d = soft.num_vars();
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(d, d);
  for (const auto& e : entries) {
    if (e.obs.n == 0) continue;
    const double p = soft.probs(e.edge.from, e.edge.to);
    if (e.obs.k == e.obs.n)
      g(e.edge.from, e.edge.to) += e.obs.k * omega * (1.0 - p);
    else
      g(e.edge.from, e.edge.to) -= e.obs.n * omega * p;
  }
  return g;
}

}  // namespace vamsl
