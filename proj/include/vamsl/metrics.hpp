#pragma once

// Structural Hamming distances, label matching by linear assignment,
// predictive density and the Gaussian-mixture EM baseline.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "vamsl/errors.hpp"
#include "vamsl/latent_graph.hpp"
#include "vamsl/rng.hpp"

namespace vamsl {

/// One change per unordered pair whose edge state differs, so a reversed edge
/// costs 1.
inline int shd(const Adjacency& a, const Adjacency& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols() || a.rows() != a.cols())
    throw ContractError("shd: adjacency shapes differ");
  const Eigen::Index d = a.rows();
  int out = 0;
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = i + 1; j < d; ++j)
      if ((a(i, j) != 0) != (b(i, j) != 0) || (a(j, i) != 0) != (b(j, i) != 0)) ++out;
  return out;
}

inline double eshd(const std::vector<Adjacency>& graphs, const Adjacency& truth) {
  if (graphs.empty()) throw ContractError("eshd: empty particle set");
  double total = 0.0;
  for (const auto& g : graphs) total += shd(g, truth);
  return total / static_cast<double>(graphs.size());
}

/// Minimum-cost perfect assignment on a square matrix (shortest augmenting
/// path with potentials). Returns assignment[row] = column.
inline std::vector<int> hungarian(const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n) throw ContractError("hungarian: cost matrix must be square");
  if (!cost.allFinite()) throw ContractError("hungarian: cost entries must be finite");
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials and matching, column 0 is a sentinel
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<int> match(static_cast<std::size_t>(n) + 1, 0), way(static_cast<std::size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
    std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = match[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(match[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (match[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      match[static_cast<std::size_t>(j0)] = match[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> assignment(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= n; ++j) assignment[static_cast<std::size_t>(match[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return assignment;
}

inline double assignment_cost(const Eigen::MatrixXd& cost, const std::vector<int>& assignment) {
  double c = 0.0;
  for (std::size_t r = 0; r < assignment.size(); ++r) c += cost(static_cast<Eigen::Index>(r), assignment[r]);
  return c;
}

inline std::vector<int> map_labels(const Eigen::MatrixXd& responsibilities) {
  std::vector<int> out(static_cast<std::size_t>(responsibilities.rows()));
  for (Eigen::Index n = 0; n < responsibilities.rows(); ++n) {
    Eigen::Index k = 0;
    responsibilities.row(n).maxCoeff(&k);
    out[static_cast<std::size_t>(n)] = static_cast<int>(k);
  }
  return out;
}

struct MatchResult {
  double accuracy = 0.0;
  /// permutation[component] = true label
  std::vector<int> permutation;
};

/// Chooses the component-to-label permutation that maximises agreement on
/// (fit_labels, fit_truth), then scores (eval_labels, eval_truth) under it.
inline MatchResult match_labels(const std::vector<int>& fit_labels, const std::vector<int>& fit_truth,
                                const std::vector<int>& eval_labels, const std::vector<int>& eval_truth,
                                int num_components) {
  if (fit_labels.size() != fit_truth.size() || eval_labels.size() != eval_truth.size())
    throw ContractError("match_and_score: label vectors differ in length");
  if (eval_labels.empty()) throw ContractError("match_and_score: nothing to score");
  int n = num_components;
  for (int l : fit_truth) n = std::max(n, l + 1);
  for (int l : eval_truth) n = std::max(n, l + 1);
  if (n > 20) throw ContractError("match_and_score: at most 20 components");
  Eigen::MatrixXd agree = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t r = 0; r < fit_labels.size(); ++r) agree(fit_labels[r], fit_truth[r]) += 1.0;
  const std::vector<int> perm = hungarian(-agree);
  int hits = 0;
  for (std::size_t r = 0; r < eval_labels.size(); ++r)
    if (perm[static_cast<std::size_t>(eval_labels[r])] == eval_truth[r]) ++hits;
  MatchResult out;
  out.accuracy = static_cast<double>(hits) / static_cast<double>(eval_labels.size());
  out.permutation.assign(perm.begin(), perm.begin() + num_components);
  return out;
}

/// Matching and scoring on the same rows.
inline MatchResult match_and_score(const Eigen::MatrixXd& responsibilities, const std::vector<int>& truth) {
  const std::vector<int> labels = map_labels(responsibilities);
  return match_labels(labels, truth, labels, truth, static_cast<int>(responsibilities.cols()));
}

/// Permutation fitted on in-sample rows, accuracy on held-out rows.
inline MatchResult match_and_score(const Eigen::MatrixXd& fit_resp, const std::vector<int>& fit_truth,
                                   const Eigen::MatrixXd& eval_resp, const std::vector<int>& eval_truth) {
  return match_labels(map_labels(fit_resp), fit_truth, map_labels(eval_resp), eval_truth,
                      static_cast<int>(fit_resp.cols()));
}

/// Negated sum over rows of log mean_p p(x_n | G_k, Theta_k) for the row's MAP
/// component k. `loglik[k]` is N x P with per-particle log likelihoods.
inline double map_neg_lppd(const std::vector<Eigen::MatrixXd>& loglik, const Eigen::MatrixXd& responsibilities) {
  if (static_cast<Eigen::Index>(loglik.size()) != responsibilities.cols())
    throw ContractError("map_neg_lppd: one likelihood table per component required");
  const std::vector<int> labels = map_labels(responsibilities);
  double total = 0.0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const Eigen::MatrixXd& table = loglik[static_cast<std::size_t>(labels[n])];
    if (table.rows() != responsibilities.rows()) throw ContractError("map_neg_lppd: row count mismatch");
    const auto row = table.row(static_cast<Eigen::Index>(n));
    const double m = row.maxCoeff();
    total += m + std::log((row.array() - m).exp().mean());
  }
  return -total;
}

namespace detail {

struct Gaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

}  // namespace detail

struct GmmResult {
  std::vector<int> labels;
  std::vector<detail::Gaussian> components;
  Eigen::VectorXd weights;
  Eigen::MatrixXd responsibilities;
  std::vector<double> log_likelihood_trace;
  double log_likelihood = -std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;
  int ridge_retries = 0;
};

namespace detail {

/// Row-wise log N(x | mean, cov); nullopt when cov is not positive definite.
inline std::optional<Eigen::VectorXd> gaussian_log_density(const Eigen::MatrixXd& x, const Gaussian& g) {
  Eigen::LLT<Eigen::MatrixXd> llt(g.cov);
  if (llt.info() != Eigen::Success) return std::nullopt;
  const Eigen::MatrixXd lower = llt.matrixL();
  const double logdet = 2.0 * lower.diagonal().array().log().sum();
  if (!std::isfinite(logdet)) return std::nullopt;
  const Eigen::MatrixXd centred = (x.rowwise() - g.mean.transpose()).transpose();
  const Eigen::MatrixXd solved = llt.matrixL().solve(centred);
  const double d = static_cast<double>(x.cols());
  return Eigen::VectorXd((-0.5 * solved.colwise().squaredNorm().array() - 0.5 * (d * std::log(2.0 * M_PI) + logdet))
                             .transpose());
}

}  // namespace detail

struct GmmSettings {
  int max_iterations = 200;
  double tolerance = 1e-6;
  double ridge = 1e-6;
};

/// EM for a full-covariance Gaussian mixture from one seed. Means start at K
/// distinct random rows, covariances at the pooled covariance.
inline GmmResult gmm_em(const Eigen::MatrixXd& x, int k, std::uint64_t seed, const GmmSettings& settings = {}) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  if (k < 1 || k > n) throw ContractError("gmm_em: need 1 <= K <= N");
  Rng rng(seed);
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (int c = 0; c < k; ++c) {
    const auto j = static_cast<std::size_t>(c) +
                   static_cast<std::size_t>(rng.uniform() * static_cast<double>(static_cast<std::size_t>(n) - c));
    std::swap(idx[static_cast<std::size_t>(c)], idx[std::min(j, static_cast<std::size_t>(n) - 1)]);
  }
  const Eigen::VectorXd pooled_mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centred = x.rowwise() - pooled_mean.transpose();
  Eigen::MatrixXd pooled_cov = centred.transpose() * centred / static_cast<double>(n);
  pooled_cov += settings.ridge * Eigen::MatrixXd::Identity(d, d);

  std::vector<detail::Gaussian> comps(static_cast<std::size_t>(k));
  for (int c = 0; c < k; ++c) comps[static_cast<std::size_t>(c)] = {x.row(idx[static_cast<std::size_t>(c)]).transpose(), pooled_cov};
  Eigen::VectorXd weights = Eigen::VectorXd::Constant(k, 1.0 / k);

  GmmResult out;
  out.seed = seed;
  Eigen::MatrixXd logp(n, k);
  double prev = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < settings.max_iterations; ++it) {
    // E step
    for (int c = 0; c < k; ++c) {
      auto& g = comps[static_cast<std::size_t>(c)];
      auto dens = detail::gaussian_log_density(x, g);
      if (!dens) {
        g.cov += settings.ridge * Eigen::MatrixXd::Identity(d, d);
        ++out.ridge_retries;
        dens = detail::gaussian_log_density(x, g);
        if (!dens) throw NumericError("gmm_em: singular covariance after ridge");
      }
      logp.col(c) = dens->array() + std::log(std::max(weights(c), 1e-300));
    }
    const Eigen::VectorXd rowmax = logp.rowwise().maxCoeff();
    const Eigen::VectorXd lse =
        rowmax.array() + (logp.colwise() - rowmax).array().exp().rowwise().sum().log();
    const double ll = lse.sum();
    out.log_likelihood_trace.push_back(ll);
    out.responsibilities = (logp.colwise() - lse).array().exp();
    out.log_likelihood = ll;
    if (std::abs(ll - prev) <= settings.tolerance * std::max(1.0, std::abs(ll))) break;
    prev = ll;
    // M step
    for (int c = 0; c < k; ++c) {
      const Eigen::VectorXd r = out.responsibilities.col(c);
      const double nk = std::max(r.sum(), 1e-12);
      weights(c) = nk / static_cast<double>(n);
      auto& g = comps[static_cast<std::size_t>(c)];
      g.mean = x.transpose() * r / nk;
      const Eigen::MatrixXd cx = x.rowwise() - g.mean.transpose();
      g.cov = cx.transpose() * r.asDiagonal() * cx / nk;
    }
  }
  out.labels = map_labels(out.responsibilities);
  out.components = std::move(comps);
  out.weights = weights;
  return out;
}

/// Posterior component probabilities of new rows under a fitted mixture.
inline Eigen::MatrixXd gmm_predict(const GmmResult& fit, const Eigen::MatrixXd& x) {
  const int k = static_cast<int>(fit.components.size());
  if (k == 0) throw ContractError("gmm_predict: empty model");
  Eigen::MatrixXd logp(x.rows(), k);
  for (int c = 0; c < k; ++c) {
    const auto dens = detail::gaussian_log_density(x, fit.components[static_cast<std::size_t>(c)]);
    if (!dens) throw NumericError("gmm_predict: singular covariance");
    logp.col(c) = dens->array() + std::log(std::max(fit.weights(c), 1e-300));
  }
  const Eigen::VectorXd rowmax = logp.rowwise().maxCoeff();
  const Eigen::VectorXd lse = rowmax.array() + (logp.colwise() - rowmax).array().exp().rowwise().sum().log();
  return (logp.colwise() - lse).array().exp();
}

/// Best of several seeds by final in-sample log likelihood.
inline GmmResult gmm_em_baseline(const Eigen::MatrixXd& x, int k, const std::vector<std::uint64_t>& seeds,
                                 const GmmSettings& settings = {}) {
  if (seeds.empty()) throw ContractError("gmm_em_baseline: need at least one seed");
  GmmResult best;
  for (auto s : seeds) {
    GmmResult r = gmm_em(x, k, s, settings);
    if (r.log_likelihood > best.log_likelihood || best.labels.empty()) best = std::move(r);
  }
  return best;
}

}  // namespace vamsl
