#pragma once

// Gaussian Bayesian-network likelihoods with linear or 2-layer MLP mean
// functions. Parameters are stored dense for every potential edge and masked
// by the graph at evaluation time, so the parameter vector has the same shape
// for every sampled graph.

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <vector>

#include "vamsl/errors.hpp"
#include "vamsl/latent_graph.hpp"
#include "vamsl/rng.hpp"

namespace vamsl {

enum class ModelKind { linear, mlp };

inline constexpr double kDefaultNoiseVar = 0.1;
inline constexpr int kDefaultHiddenWidth = 5;

/// Flat parameter vector plus its layout.
///
/// linear: d x d weight matrix, column-major, (i, j) is the weight of i -> j.
/// mlp: per node j a block [W1 (d x h, column-major) | b1 (h) | w2 (h) | b2 (1)].
class BnParams {
 public:
  BnParams() = default;

  static BnParams linear(int d, double noise_var = kDefaultNoiseVar) {
    return BnParams(ModelKind::linear, d, 0, noise_var);
  }

  static BnParams mlp(int d, int hidden = kDefaultHiddenWidth, double noise_var = kDefaultNoiseVar) {
    return BnParams(ModelKind::mlp, d, hidden, noise_var);
  }

  static BnParams like(ModelKind kind, int d, int hidden, double noise_var) {
    return kind == ModelKind::linear ? linear(d, noise_var) : mlp(d, hidden, noise_var);
  }

  static Eigen::Index param_count(ModelKind kind, int d, int hidden) {
    return kind == ModelKind::linear ? Eigen::Index(d) * d : Eigen::Index(d) * node_block(d, hidden);
  }

  ModelKind kind() const { return kind_; }
  int num_vars() const { return d_; }
  int hidden() const { return hidden_; }
  double noise_var() const { return noise_var_; }
  Eigen::Index size() const { return values_.size(); }

  Eigen::VectorXd& values() { return values_; }
  const Eigen::VectorXd& values() const { return values_; }

  void set_values(const Eigen::Ref<const Eigen::VectorXd>& v) {
    if (v.size() != values_.size()) throw ContractError("BnParams: parameter vector size mismatch");
    values_ = v;
  }

  Eigen::Map<Eigen::MatrixXd> weights() { return {values_.data(), d_, d_}; }
  Eigen::Map<const Eigen::MatrixXd> weights() const { return {values_.data(), d_, d_}; }

  // MLP accessors for node j
  Eigen::Map<const Eigen::MatrixXd> layer1(int j) const { return {block(j), d_, hidden_}; }
  Eigen::Map<const Eigen::VectorXd> bias1(int j) const { return {block(j) + d_ * hidden_, hidden_}; }
  Eigen::Map<const Eigen::VectorXd> layer2(int j) const { return {block(j) + (d_ + 1) * hidden_, hidden_}; }
  double bias2(int j) const { return block(j)[(d_ + 2) * hidden_]; }

  Eigen::Map<Eigen::MatrixXd> layer1(int j) { return {block(j), d_, hidden_}; }
  Eigen::Map<Eigen::VectorXd> bias1(int j) { return {block(j) + d_ * hidden_, hidden_}; }
  Eigen::Map<Eigen::VectorXd> layer2(int j) { return {block(j) + (d_ + 1) * hidden_, hidden_}; }
  double& bias2(int j) { return block(j)[(d_ + 2) * hidden_]; }

  void fill_standard_normal(Rng& rng) {
    for (Eigen::Index i = 0; i < values_.size(); ++i) values_[i] = rng.normal();
  }

 private:
  BnParams(ModelKind kind, int d, int hidden, double noise_var)
      : kind_(kind), d_(d), hidden_(hidden), noise_var_(noise_var),
        values_(Eigen::VectorXd::Zero(param_count(kind, d, hidden))) {
    if (d < 1) throw ContractError("BnParams: d must be positive");
    if (kind == ModelKind::mlp && hidden < 1) throw ContractError("BnParams: hidden width must be positive");
    if (!(noise_var > 0.0)) throw ContractError("BnParams: noise variance must be positive");
  }

  static Eigen::Index node_block(int d, int hidden) { return Eigen::Index(d) * hidden + 2 * hidden + 1; }

  double* block(int j) { return values_.data() + j * node_block(d_, hidden_); }
  const double* block(int j) const { return values_.data() + j * node_block(d_, hidden_); }

  ModelKind kind_ = ModelKind::linear;
  int d_ = 0;
  int hidden_ = 0;
  double noise_var_ = kDefaultNoiseVar;
  Eigen::VectorXd values_;
};

struct Dataset {
  Eigen::MatrixXd rows;
  std::optional<Eigen::MatrixXd> held_out;
  std::optional<std::vector<int>> labels;
  std::optional<std::vector<int>> held_out_labels;

  Eigen::Index size() const { return rows.rows(); }
  int num_vars() const { return static_cast<int>(rows.cols()); }
};

namespace detail {

inline void check_shapes(Eigen::Index cols, const Adjacency& g, const BnParams& theta) {
  if (g.rows() != g.cols() || g.rows() != cols || theta.num_vars() != cols)
    throw ContractError("bn-likelihood: dimension mismatch between data, graph and parameters");
}

inline double gaussian_log_norm(double var) { return -0.5 * std::log(2.0 * M_PI * var); }

}  // namespace detail

/// Per-node conditional means for every row (N x d).
inline Eigen::MatrixXd predict_means(const Eigen::MatrixXd& x, const Adjacency& g, const BnParams& theta) {
  detail::check_shapes(x.cols(), g, theta);
  const Eigen::MatrixXd gd = g.cast<double>();
  if (theta.kind() == ModelKind::linear) return x * gd.cwiseProduct(theta.weights());

  const int d = theta.num_vars();
  Eigen::MatrixXd means(x.rows(), d);
  for (int j = 0; j < d; ++j) {
    const Eigen::MatrixXd masked = x * gd.col(j).asDiagonal();
    Eigen::MatrixXd hidden = (masked * theta.layer1(j)).rowwise() + theta.bias1(j).transpose();
    hidden = hidden.cwiseMax(0.0);
    means.col(j) = (hidden * theta.layer2(j)).array() + theta.bias2(j);
  }
  return means;
}

/// log p(x_n | G, Theta) for each row.
inline Eigen::VectorXd log_likelihood_rows(const Eigen::MatrixXd& x, const Adjacency& g, const BnParams& theta) {
  const Eigen::MatrixXd resid = x - predict_means(x, g, theta);
  const double var = theta.noise_var();
  return (resid.rowwise().squaredNorm() / (-2.0 * var)).array() +
         static_cast<double>(x.cols()) * detail::gaussian_log_norm(var);
}

inline double log_likelihood_row(const Eigen::VectorXd& x, const Adjacency& g, const BnParams& theta) {
  if (x.size() != theta.num_vars()) throw ContractError("log_likelihood_row: dimension mismatch");
  return log_likelihood_rows(x.transpose(), g, theta)(0);
}

/// Standard normal log density over every parameter entry, non-edges included.
inline double log_param_prior(const BnParams& theta) {
  return -0.5 * static_cast<double>(theta.size()) * std::log(2.0 * M_PI) - 0.5 * theta.values().squaredNorm();
}

inline Eigen::VectorXd log_param_prior_gradient(const BnParams& theta) { return -theta.values(); }

struct LogJoint {
  double value = 0.0;
  Eigen::VectorXd gradient;  // w.r.t. theta, empty when not requested
  Eigen::MatrixXd graph_gradient;  // w.r.t. the adjacency entries, empty when not requested
};

namespace detail {

/// Shared body of the hard and relaxed log joints. `gd` may hold entries in
/// [0, 1]; the linear mean is x (W * G) and MLP inputs are scaled by G.
inline LogJoint log_joint_impl(const Eigen::MatrixXd& x, const Eigen::VectorXd& weights, const Eigen::MatrixXd& gd,
                               const BnParams& theta, bool theta_gradient, bool graph_gradient) {
  if (weights.size() != x.rows()) throw ContractError("weighted_log_joint: one weight per row required");
  const double var = theta.noise_var();
  const int d = theta.num_vars();

  LogJoint out;
  out.value = log_param_prior(theta) + weights.sum() * d * gaussian_log_norm(var);
  if (theta_gradient) out.gradient = log_param_prior_gradient(theta);
  if (graph_gradient) out.graph_gradient = Eigen::MatrixXd::Zero(d, d);

  if (theta.kind() == ModelKind::linear) {
    const Eigen::MatrixXd resid = x - x * gd.cwiseProduct(theta.weights());
    out.value -= weights.dot(resid.rowwise().squaredNorm()) / (2.0 * var);
    if (theta_gradient || graph_gradient) {
      const Eigen::MatrixXd back = x.transpose() * weights.asDiagonal() * resid / var;
      if (theta_gradient) {
        const Eigen::MatrixXd gw = back.cwiseProduct(gd);
        out.gradient += Eigen::Map<const Eigen::VectorXd>(gw.data(), gw.size());
      }
      if (graph_gradient) out.graph_gradient = back.cwiseProduct(theta.weights());
    }
    return out;
  }

  BnParams grad = theta;
  for (int j = 0; j < d; ++j) {
    const Eigen::MatrixXd masked = x * gd.col(j).asDiagonal();
    const Eigen::MatrixXd pre = (masked * theta.layer1(j)).rowwise() + theta.bias1(j).transpose();
    const Eigen::MatrixXd act = pre.cwiseMax(0.0);
    const Eigen::VectorXd mean = (act * theta.layer2(j)).array() + theta.bias2(j);
    const Eigen::VectorXd resid = x.col(j) - mean;
    out.value -= weights.dot(resid.cwiseAbs2()) / (2.0 * var);
    if (!theta_gradient && !graph_gradient) continue;
    // d/d mean of the weighted log density
    const Eigen::VectorXd dmean = weights.cwiseProduct(resid) / var;
    Eigen::MatrixXd dpre = dmean * theta.layer2(j).transpose();
    dpre = dpre.cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
    if (theta_gradient) {
      grad.layer2(j) = act.transpose() * dmean;
      grad.bias2(j) = dmean.sum();
      grad.layer1(j) = masked.transpose() * dpre;
      grad.bias1(j) = dpre.colwise().sum().transpose();
    }
    if (graph_gradient) {
      const Eigen::MatrixXd dmasked = dpre * theta.layer1(j).transpose();
      out.graph_gradient.col(j) = x.cwiseProduct(dmasked).colwise().sum().transpose();
    }
  }
  if (theta_gradient) out.gradient += grad.values();
  return out;
}

}  // namespace detail

/// log p(Theta) + sum_n w_n log p(x_n | G, Theta) and optionally its gradient in
/// Theta. MLP gradients are backpropagated through both layers and the ReLU.
inline LogJoint weighted_log_joint(const Eigen::MatrixXd& x, const Eigen::VectorXd& weights, const Adjacency& g,
                                   const BnParams& theta, bool with_gradient) {
  detail::check_shapes(x.cols(), g, theta);
  return detail::log_joint_impl(x, weights, g.cast<double>(), theta, with_gradient, false);
}

/// The same log joint on a relaxed graph with entries in [0, 1], with the
/// gradient w.r.t. those entries (diagonal included; callers mask it).
inline LogJoint relaxed_log_joint(const Eigen::MatrixXd& x, const Eigen::VectorXd& weights,
                                  const Eigen::MatrixXd& graph, const BnParams& theta) {
  if (graph.rows() != graph.cols() || graph.rows() != x.cols() || theta.num_vars() != x.cols())
    throw ContractError("bn-likelihood: dimension mismatch between data, graph and parameters");
  return detail::log_joint_impl(x, weights, graph, theta, false, true);
}

/// Gradient of [log p(Theta) + sum_n w_n log p(x_n | G, Theta)] w.r.t. Theta.
inline Eigen::VectorXd grad_theta_log_joint(const Eigen::MatrixXd& x, const Eigen::VectorXd& weights,
                                            const Adjacency& g, const BnParams& theta) {
  for (Eigen::Index n = 0; n < weights.size(); ++n)
    if (weights[n] < 0.0 || weights[n] > 1.0) throw ContractError("grad_theta_log_joint: weights must lie in [0, 1]");
  return weighted_log_joint(x, weights, g, theta, true).gradient;
}

}  // namespace vamsl
