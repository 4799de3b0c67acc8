#pragma once

// Mixture orchestration: responsibilities, Dirichlet mixing weights, assignment
// sampling, the per-component log-target gradient and the coordinate-ascent
// loop with random restarts.

#include <Eigen/Dense>
#include <boost/math/special_functions/digamma.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "vamsl/bn_likelihood.hpp"
#include "vamsl/elicitation.hpp"
#include "vamsl/errors.hpp"
#include "vamsl/latent_graph.hpp"
#include "vamsl/parallel.hpp"
#include "vamsl/rng.hpp"
#include "vamsl/svgd.hpp"

namespace vamsl {

/// How grad_Z of the graph expectation is estimated: likelihood ratio on
/// Bernoulli graph samples, or pathwise through logistic-noise relaxed graphs.
enum class ZGradientEstimator { score_function, relaxed };

inline std::string to_string(ZGradientEstimator e) {
  return e == ZGradientEstimator::score_function ? "score_function" : "relaxed";
}

struct VamslConfig {
  int num_components = 1;
  int latent_dim = 0;  // 0: same as the number of variables
  int particles = 20;
  ModelKind model = ModelKind::linear;
  int hidden = kDefaultHiddenWidth;
  double noise_var = kDefaultNoiseVar;
  Schedules schedules;
  int cavi_rounds = 10;
  int early_round_steps = 50;
  KernelSpec kernel;
  /// nullopt: ER with two expected edges per node, q = 4 / (d - 1) clamped to [0.01, 0.5]
  std::optional<StructurePriorSpec> structure_prior;
  double sigma_z = 0.0;  // 0: 1 / sqrt(latent dimension)
  int graph_samples = 4;
  ZGradientEstimator z_estimator = ZGradientEstimator::relaxed;
  double relaxation_temperature = 1.0;
  double dirichlet_prior = 1.0;
  int max_restarts = 5;
  double collapse_threshold = 1e-12;
  ElicitationSettings elicitation;
  int workers = 1;

  void validate() const {
    if (num_components < 1) throw ConfigError("vamsl.num_components", "must be positive");
    if (latent_dim < 0) throw ConfigError("vamsl.latent_dim", "must be nonnegative");
    if (particles < 1) throw ConfigError("vamsl.particles", "must be positive");
    if (model == ModelKind::mlp && hidden < 1) throw ConfigError("vamsl.hidden", "must be positive");
    if (!(noise_var > 0.0)) throw ConfigError("vamsl.noise_var", "must be positive");
    if (!(schedules.beta_slope > 0.0)) throw ConfigError("schedules.beta_slope", "must be positive");
    if (!(schedules.omega_slope > 0.0)) throw ConfigError("schedules.omega_slope", "must be positive");
    if (!(schedules.rmsprop.learning_rate > 0.0)) throw ConfigError("schedules.learning_rate", "must be positive");
    if (cavi_rounds < 1) throw ConfigError("vamsl.cavi_rounds", "must be positive");
    if (early_round_steps < 0) throw ConfigError("vamsl.early_round_steps", "must be nonnegative");
    if (schedules.total_steps <= static_cast<long>(cavi_rounds - 1) * early_round_steps)
      throw ConfigError("schedules.total_steps", "must leave at least one step for the final round");
    if (!(kernel.gamma_z > 0.0)) throw ConfigError("kernel.gamma_z", "must be positive");
    if (!(kernel.gamma_theta > 0.0)) throw ConfigError("kernel.gamma_theta", "must be positive");
    if (structure_prior) structure_prior->validate();
    if (!(sigma_z >= 0.0)) throw ConfigError("vamsl.sigma_z", "must be nonnegative");
    if (graph_samples < 1) throw ConfigError("vamsl.graph_samples", "must be positive");
    if (!(relaxation_temperature > 0.0)) throw ConfigError("vamsl.relaxation_temperature", "must be positive");
    if (!(dirichlet_prior > 0.0)) throw ConfigError("vamsl.dirichlet_prior", "must be positive");
    if (max_restarts < 0) throw ConfigError("vamsl.max_restarts", "must be nonnegative");
    if (!(collapse_threshold >= 0.0)) throw ConfigError("vamsl.collapse_threshold", "must be nonnegative");
    elicitation.hyper.validate();
    if (!(elicitation.hard_epsilon > 0.0 && elicitation.hard_epsilon < 0.5))
      throw ConfigError("elicitation.epsilon", "must lie in (0, 0.5)");
    if (workers < 1) throw ConfigError("workers", "must be positive");
  }

  int latent_dim_for(int d) const { return latent_dim > 0 ? latent_dim : d; }

  double sigma_z_for(int d) const { return sigma_z > 0.0 ? sigma_z : 1.0 / std::sqrt(double(latent_dim_for(d))); }

  StructurePriorSpec structure_prior_for(int d) const {
    if (structure_prior) return *structure_prior;
    return StructurePriorSpec::erdos_renyi(std::clamp(4.0 / (d - 1.0), 0.01, 0.5));
  }

  /// SVGD steps in 1-based round u.
  long steps_in_round(int u) const {
    if (u < cavi_rounds) return early_round_steps;
    return schedules.total_steps - static_cast<long>(cavi_rounds - 1) * early_round_steps;
  }
};

struct ComponentState {
  ParticleSet particles;
  ComponentBeliefs beliefs;
  std::vector<ElicitationMatrix> matrices;  // one per particle
  std::vector<std::size_t> retained;        // acyclic particles after the final round
};

struct MixtureState {
  int num_vars = 0;
  int latent_dim = 0;
  std::vector<ComponentState> components;
  Eigen::MatrixXd responsibilities;
  Eigen::VectorXd dirichlet_alpha;
  Eigen::VectorXd prior_alpha;
  int cavi_round = 0;
  int restarts = 0;
  bool converged = true;
  bool annealed = false;
  long weight_fallbacks = 0;
  std::vector<std::string> notes;

  int num_components() const { return static_cast<int>(components.size()); }
  long step() const { return components.empty() ? 0 : components.front().particles.step; }
};

inline LatentEmbedding embedding_of(const SteinParticle& p, int latent_dim, int d) {
  return LatentEmbedding::from_flat(p.z, latent_dim, d);
}

inline BnParams params_of(const SteinParticle& p, const VamslConfig& cfg, int d) {
  BnParams theta = BnParams::like(cfg.model, d, cfg.hidden, cfg.noise_var);
  theta.set_values(p.theta);
  return theta;
}

/// Particles from the latent Gaussian prior with standard normal parameters.
inline ParticleSet initialize_particles(int d, const VamslConfig& cfg, Rng& rng) {
  const int l = cfg.latent_dim_for(d);
  std::vector<SteinParticle> ps;
  ps.reserve(static_cast<std::size_t>(cfg.particles));
  for (int p = 0; p < cfg.particles; ++p) {
    const LatentEmbedding z = LatentEmbedding::standard_normal(l, d, cfg.sigma_z_for(d), rng);
    BnParams theta = BnParams::like(cfg.model, d, cfg.hidden, cfg.noise_var);
    theta.fill_standard_normal(rng);
    ps.push_back({z.flatten(), theta.values()});
  }
  return ParticleSet::from(std::move(ps));
}

// ---------------------------------------------------------------- mixing

/// softmax_k [E_k(n) + digamma(alpha_k) - digamma(sum alpha)], row by row.
inline Eigen::MatrixXd responsibilities_from(const Eigen::MatrixXd& expected_loglik, const Eigen::VectorXd& alpha) {
  if (expected_loglik.cols() != alpha.size()) throw ContractError("responsibilities: K mismatch");
  const double total = boost::math::digamma(alpha.sum());
  Eigen::RowVectorXd offset(alpha.size());
  for (Eigen::Index k = 0; k < alpha.size(); ++k) offset(k) = boost::math::digamma(alpha(k)) - total;
  Eigen::MatrixXd logits = expected_loglik.rowwise() + offset;
  for (Eigen::Index n = 0; n < logits.rows(); ++n) {
    const double m = logits.row(n).maxCoeff();
    if (!std::isfinite(m)) throw NumericError("responsibilities: non-finite log likelihood in row " + std::to_string(n));
    logits.row(n) = (logits.row(n).array() - m).exp();
    logits.row(n) /= logits.row(n).sum();
  }
  return logits;
}

inline Eigen::VectorXd update_mixing_weights(const Eigen::MatrixXd& responsibilities, const Eigen::VectorXd& prior) {
  if (responsibilities.cols() != prior.size()) throw ContractError("update_mixing_weights: K mismatch");
  return prior + responsibilities.colwise().sum().transpose();
}

/// One categorical draw per row, returned as an N x K indicator matrix.
inline Eigen::MatrixXd sample_assignments(const Eigen::MatrixXd& responsibilities, Rng& rng) {
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(responsibilities.rows(), responsibilities.cols());
  for (Eigen::Index n = 0; n < responsibilities.rows(); ++n) {
    double u = rng.uniform();
    Eigen::Index pick = responsibilities.cols() - 1;
    for (Eigen::Index k = 0; k < responsibilities.cols(); ++k) {
      u -= responsibilities(n, k);
      if (u < 0.0) {
        pick = k;
        break;
      }
    }
    while (responsibilities(n, pick) <= 0.0 && pick > 0) --pick;
    c(n, pick) = 1.0;
  }
  return c;
}

inline double responsibility_entropy(const Eigen::MatrixXd& r) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < r.size(); ++i) {
    const double p = r.data()[i];
    if (p > 0.0) h -= p * std::log(p);
  }
  return r.rows() > 0 ? h / static_cast<double>(r.rows()) : 0.0;
}

namespace detail {

/// Self-normalised weights exp(l_m - lse(l)); uniform when every l_m is -inf.
inline Eigen::VectorXd normalized_weights(const Eigen::VectorXd& log_w, bool& fell_back) {
  const double m = log_w.maxCoeff();
  fell_back = !std::isfinite(m);
  if (fell_back) return Eigen::VectorXd::Constant(log_w.size(), 1.0 / static_cast<double>(log_w.size()));
  Eigen::VectorXd w = (log_w.array() - m).exp();
  return w / w.sum();
}

inline Eigen::MatrixXd rows_with_weight(const Eigen::MatrixXd& x, const Eigen::VectorXd& c) {
  Eigen::Index count = 0;
  for (Eigen::Index n = 0; n < c.size(); ++n) count += c(n) > 0.5 ? 1 : 0;
  Eigen::MatrixXd out(count, x.cols());
  Eigen::Index r = 0;
  for (Eigen::Index n = 0; n < c.size(); ++n)
    if (c(n) > 0.5) out.row(r++) = x.row(n);
  return out;
}

inline bool is_binary(const Eigen::VectorXd& c) {
  for (Eigen::Index n = 0; n < c.size(); ++n)
    if (c(n) != 0.0 && c(n) != 1.0) return false;
  return true;
}

}  // namespace detail

// ---------------------------------------------------------------- gradients

/// Everything the log-target gradient of one component needs, fixed for an
/// SVGD segment.
struct ComponentTarget {
  int num_vars = 0;
  int latent_dim = 0;
  const VamslConfig* config = nullptr;
  const HardConstraintMask* mask = nullptr;
  const std::vector<ElicitationMatrix>* matrices = nullptr;  // may be empty
  StructurePriorSpec structure_prior;
  /// Rows with their likelihood exponents c_nk.
  Eigen::MatrixXd rows;
  Eigen::VectorXd weights;
  std::uint64_t stream_seed = 0;
  std::atomic<long>* fallbacks = nullptr;
};

/// Latent prior part of the gradient w.r.t. the logits U_i . V_j (acyclicity,
/// structure prior and elicitation terms) for one particle.
inline Eigen::MatrixXd latent_prior_logit_gradient(const SoftGraph& soft, const HardConstraintMask& mask,
                                                   const StructurePriorSpec& prior, const ElicitationMatrix* matrix,
                                                   double beta, double omega) {
  const Eigen::MatrixXd free = mask.free_indicator();
  const Eigen::MatrixXd dsoft = (omega * soft.probs.array() * (1.0 - soft.probs.array())).matrix().cwiseProduct(free);
  Eigen::MatrixXd c = (structure_prior_gradient(soft, prior) - beta * acyclicity_gradient(soft.probs)).cwiseProduct(dsoft);
  if (matrix) c += elicitation_logit_gradient(*matrix, soft, omega).cwiseProduct(free);
  return c;
}

/// Pathwise estimate of grad_logits log E[p(Theta|G) prod_n p(x_n|G,Theta)^c_n]
/// using relaxed graphs logistic((L + omega * logits) / tau) with L standard
/// logistic noise. Pinned entries stay at 0 or 1.
inline Eigen::MatrixXd relaxed_logit_gradient(const Eigen::MatrixXd& logits, double omega,
                                              const ComponentTarget& target, const BnParams& theta, Rng& rng) {
  const VamslConfig& cfg = *target.config;
  const int d = target.num_vars;
  const double tau = cfg.relaxation_temperature;
  const Eigen::MatrixXd free = target.mask->free_indicator();
  const int m_samples = cfg.graph_samples;
  std::vector<Eigen::MatrixXd> chains;
  Eigen::VectorXd log_f(m_samples);
  for (int m = 0; m < m_samples; ++m) {
    Eigen::MatrixXd g(d, d);
    for (int j = 0; j < d; ++j)
      for (int i = 0; i < d; ++i) {
        const double u = std::clamp(rng.uniform(), 1e-12, 1.0 - 1e-12);
        g(i, j) = logistic((std::log(u) - std::log1p(-u) + omega * logits(i, j)) / tau);
      }
    apply_mask(g, *target.mask);
    LogJoint lj = relaxed_log_joint(target.rows, target.weights, g, theta);
    log_f(m) = lj.value;
    const Eigen::MatrixXd dg = (g.array() * (1.0 - g.array()) * (omega / tau)).matrix();
    chains.push_back(lj.graph_gradient.cwiseProduct(dg).cwiseProduct(free));
  }
  bool fell_back = false;
  const Eigen::VectorXd w = detail::normalized_weights(log_f, fell_back);
  if (fell_back && target.fallbacks) target.fallbacks->fetch_add(1, std::memory_order_relaxed);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(d, d);
  for (int m = 0; m < m_samples; ++m) out += w(m) * chains[static_cast<std::size_t>(m)];
  return out;
}

/// Gradient of the log target of one particle at step t. `rng` drives the
/// graph samples of the score-function estimator.
inline SteinParticle component_log_target_grad(const SteinParticle& particle, std::size_t index, long t,
                                               const ComponentTarget& target, Rng& rng) {
  const VamslConfig& cfg = *target.config;
  const int d = target.num_vars;
  const int l = target.latent_dim;
  const LatentEmbedding z = embedding_of(particle, l, d);
  const BnParams theta = params_of(particle, cfg, d);
  const double omega = cfg.schedules.omega(t);
  const double beta = cfg.schedules.beta(t);
  const Eigen::MatrixXd logits = z.inner_products();
  const SoftGraph soft = soft_graph_from_logits(logits, omega, *target.mask);
  const Eigen::MatrixXd free = target.mask->free_indicator();

  const ElicitationMatrix* matrix = nullptr;
  if (target.matrices && index < target.matrices->size()) matrix = &(*target.matrices)[index];
  Eigen::MatrixXd c = latent_prior_logit_gradient(soft, *target.mask, target.structure_prior, matrix, beta, omega);

  // grad_Theta: self-normalized estimate over Bernoulli graph samples
  const int m_samples = cfg.graph_samples;
  std::vector<Adjacency> graphs;
  std::vector<Eigen::VectorXd> theta_grads;
  Eigen::VectorXd log_f(m_samples);
  for (int m = 0; m < m_samples; ++m) {
    graphs.push_back(sample_graph(soft, rng));
    LogJoint lj = weighted_log_joint(target.rows, target.weights, graphs.back(), theta, true);
    log_f(m) = lj.value;
    theta_grads.push_back(std::move(lj.gradient));
  }
  bool fell_back = false;
  const Eigen::VectorXd w = detail::normalized_weights(log_f, fell_back);
  if (fell_back && target.fallbacks) target.fallbacks->fetch_add(1, std::memory_order_relaxed);

  Eigen::VectorXd grad_theta = Eigen::VectorXd::Zero(theta.size());
  for (int m = 0; m < m_samples; ++m) grad_theta += w(m) * theta_grads[static_cast<std::size_t>(m)];

  if (cfg.z_estimator == ZGradientEstimator::score_function) {
    Eigen::MatrixXd score = Eigen::MatrixXd::Zero(d, d);
    for (int m = 0; m < m_samples; ++m)
      score += w(m) * (graphs[static_cast<std::size_t>(m)].cast<double>() - soft.probs);
    c += omega * score.cwiseProduct(free);
  } else {
    c += relaxed_logit_gradient(logits, omega, target, theta, rng);
  }

  const double sz = cfg.sigma_z_for(d);
  const double var = sz * sz;
  LatentEmbedding grad;
  grad.u = z.v * c.transpose() - z.u / var;
  grad.v = z.u * c - z.v / var;
  return {grad.flatten(), grad_theta};
}

inline GradientOracle make_gradient_oracle(const ComponentTarget& target) {
  return [&target](const SteinParticle& p, std::size_t index, long t) {
    Rng rng = make_stream(target.stream_seed, {static_cast<std::uint64_t>(index), static_cast<std::uint64_t>(t)});
    return component_log_target_grad(p, index, t, target, rng);
  };
}

// ---------------------------------------------------------------- expectations

/// (1/P) sum_p E log p(x_n | G, Theta_p) for every row. Before annealing the
/// graph expectation is weighted by p(Theta|G) prod_n p(x_n|G,Theta)^c_n over
/// graphs drawn from p(G|Z_p); afterwards the hard graph G_inf(Z_p) is used.
inline Eigen::VectorXd expected_log_likelihood(const ComponentState& comp, const Eigen::MatrixXd& x,
                                               const Eigen::VectorXd& exponents, const VamslConfig& cfg, int d,
                                               long t, bool hard, std::uint64_t seed, long* fallbacks) {
  const int l = cfg.latent_dim_for(d);
  const HardConstraintMask& mask = comp.beliefs.mask;
  std::vector<std::size_t> use;
  if (hard && !comp.retained.empty())
    use = comp.retained;
  else
    for (std::size_t p = 0; p < comp.particles.size(); ++p) use.push_back(p);

  const double omega = cfg.schedules.omega(std::max<long>(t, 1));
  Eigen::VectorXd total = Eigen::VectorXd::Zero(x.rows());
  for (std::size_t p : use) {
    const SteinParticle& particle = comp.particles.particles[p];
    const LatentEmbedding z = embedding_of(particle, l, d);
    const BnParams theta = params_of(particle, cfg, d);
    if (hard) {
      total += log_likelihood_rows(x, hard_graph(z, mask), theta);
      continue;
    }
    Rng rng = make_stream(seed, {static_cast<std::uint64_t>(p)});
    const SoftGraph soft = soft_graph(z, omega, mask);
    Eigen::VectorXd log_w(cfg.graph_samples);
    std::vector<Eigen::VectorXd> rows;
    for (int m = 0; m < cfg.graph_samples; ++m) {
      const Adjacency g = sample_graph(soft, rng);
      rows.push_back(log_likelihood_rows(x, g, theta));
      log_w(m) = log_param_prior(theta) + exponents.dot(rows.back());
    }
    bool fell_back = false;
    const Eigen::VectorXd w = detail::normalized_weights(log_w, fell_back);
    if (fell_back && fallbacks) ++*fallbacks;
    for (int m = 0; m < cfg.graph_samples; ++m) total += w(m) * rows[static_cast<std::size_t>(m)];
  }
  return total / static_cast<double>(use.size());
}

/// Recomputes responsibilities. `exponents` is N x K (sampled assignments, or
/// current responsibilities before the first draw). Returns true when some
/// component's total responsibility falls below the collapse threshold.
inline bool update_responsibilities(MixtureState& state, const Eigen::MatrixXd& x, const Eigen::MatrixXd& exponents,
                                    const VamslConfig& cfg, bool hard, std::uint64_t seed) {
  const int k_count = state.num_components();
  Eigen::MatrixXd e(x.rows(), k_count);
  std::vector<long> fallbacks(static_cast<std::size_t>(k_count), 0);
  parallel_for(static_cast<std::size_t>(k_count), cfg.workers, [&](std::size_t k) {
    e.col(static_cast<Eigen::Index>(k)) = expected_log_likelihood(
        state.components[k], x, exponents.col(static_cast<Eigen::Index>(k)), cfg, state.num_vars, state.step(), hard,
        derive_seed(seed, {k}), &fallbacks[k]);
  });
  for (long f : fallbacks) state.weight_fallbacks += f;
  state.responsibilities = responsibilities_from(e, state.dirichlet_alpha);
  const Eigen::VectorXd mass = state.responsibilities.colwise().sum().transpose();
  return (mass.array() < cfg.collapse_threshold).any();
}

// ---------------------------------------------------------------- progress

using ProgressSink = std::function<void(const nlohmann::json&)>;

inline double mean_soft_acyclicity(const ComponentState& comp, const VamslConfig& cfg, int d) {
  const int l = cfg.latent_dim_for(d);
  const double omega = cfg.schedules.omega(std::max<long>(comp.particles.step, 1));
  double h = 0.0;
  for (const auto& p : comp.particles.particles)
    h += acyclicity(soft_graph(embedding_of(p, l, d), omega, comp.beliefs.mask).probs);
  return h / static_cast<double>(comp.particles.size());
}

inline nlohmann::json progress_record(const MixtureState& state, const VamslConfig& cfg, const std::string& event) {
  nlohmann::json h = nlohmann::json::array();
  for (const auto& c : state.components) h.push_back(mean_soft_acyclicity(c, cfg, state.num_vars));
  std::vector<double> alpha(state.dirichlet_alpha.data(), state.dirichlet_alpha.data() + state.dirichlet_alpha.size());
  return {{"event", event},
          {"round", state.cavi_round},
          {"restart", state.restarts},
          {"step", state.step()},
          {"mean_h", h},
          {"responsibility_entropy", responsibility_entropy(state.responsibilities)},
          {"alpha", alpha}};
}

// ---------------------------------------------------------------- hashing

class Fnv1a {
 public:
  void add_bytes(const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= b[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  void add(double v) { add_bytes(&v, sizeof v); }
  void add(std::int64_t v) { add_bytes(&v, sizeof v); }
  template <typename Derived>
  void add(const Eigen::DenseBase<Derived>& m) {
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) add(static_cast<double>(m(i, j)));
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

/// Hash of every number in the state. Timestamps are left out.
inline std::uint64_t state_hash(const MixtureState& s) {
  Fnv1a h;
  for (const auto& c : s.components) {
    for (const auto& p : c.particles.particles) {
      h.add(p.z);
      h.add(p.theta);
    }
    h.add(static_cast<std::int64_t>(c.particles.step));
    for (const auto& r : c.beliefs.records) {
      h.add(static_cast<std::int64_t>(r.edge.from));
      h.add(static_cast<std::int64_t>(r.edge.to));
      h.add(r.psi_star);
    }
  }
  h.add(s.responsibilities);
  h.add(s.dirichlet_alpha);
  h.add(static_cast<std::int64_t>(s.restarts));
  return h.value();
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return out;
}

// ---------------------------------------------------------------- main loop

/// Runs one SVGD segment of `steps` steps on component k.
inline void run_segment(ComponentState& comp, const Eigen::MatrixXd& x, const Eigen::VectorXd& assignment,
                        const VamslConfig& cfg, int d, long steps, std::uint64_t seed, std::atomic<long>& fallbacks) {
  ComponentTarget target;
  target.num_vars = d;
  target.latent_dim = cfg.latent_dim_for(d);
  target.config = &cfg;
  target.mask = &comp.beliefs.mask;
  target.matrices = &comp.matrices;
  target.structure_prior = cfg.structure_prior_for(d);
  if (detail::is_binary(assignment)) {
    target.rows = detail::rows_with_weight(x, assignment);
    target.weights = Eigen::VectorXd::Ones(target.rows.rows());
  } else {
    target.rows = x;
    target.weights = assignment;
  }
  target.stream_seed = seed;
  target.fallbacks = &fallbacks;
  const GradientOracle oracle = make_gradient_oracle(target);
  for (long s = 0; s < steps; ++s) comp.particles = svgd_step(std::move(comp.particles), oracle, cfg.schedules, cfg.kernel, cfg.workers);
}

inline std::vector<std::size_t> acyclic_particles(const ComponentState& comp, const VamslConfig& cfg, int d) {
  const int l = cfg.latent_dim_for(d);
  std::vector<std::size_t> out;
  for (std::size_t p = 0; p < comp.particles.size(); ++p)
    if (is_acyclic(hard_graph(embedding_of(comp.particles.particles[p], l, d), comp.beliefs.mask))) out.push_back(p);
  return out;
}

/// Coordinate ascent over responsibilities, mixing weights and per-component
/// particles. `beliefs` holds each component's elicited constraints (empty
/// means none). Restarts reinitialise particles but keep the elicited prior.
inline MixtureState run_cavi(const Dataset& data, const VamslConfig& cfg, std::vector<ComponentBeliefs> beliefs,
                             std::uint64_t seed, const ProgressSink& sink = {}) {
  cfg.validate();
  const int d = data.num_vars();
  const int k_count = cfg.num_components;
  if (d < 2) throw ContractError("run_cavi: need at least two variables");
  if (data.size() < 1) throw ContractError("run_cavi: empty dataset");
  if (beliefs.empty()) beliefs.assign(static_cast<std::size_t>(k_count), ComponentBeliefs(d));
  if (static_cast<int>(beliefs.size()) != k_count) throw ContractError("run_cavi: one belief set per component");
  for (const auto& b : beliefs) {
    if (b.mask.num_vars() != d) throw ContractError("run_cavi: constraint mask dimension mismatch");
    if (!b.mask.required_edges_acyclic()) throw ContractError("run_cavi: required edges form a cycle");
  }
  const Eigen::MatrixXd& x = data.rows;

  MixtureState state;
  state.num_vars = d;
  state.latent_dim = cfg.latent_dim_for(d);
  state.prior_alpha = Eigen::VectorXd::Constant(k_count, cfg.dirichlet_prior);
  std::atomic<long> fallbacks{0};

  // elicitation matrices are drawn once and survive restarts
  std::vector<std::vector<ElicitationMatrix>> matrices(static_cast<std::size_t>(k_count));
  for (int k = 0; k < k_count; ++k) {
    Rng rng = make_stream(seed, {0x656c6963ULL, static_cast<std::uint64_t>(k)});
    matrices[static_cast<std::size_t>(k)] =
        sample_elicitation_matrices(beliefs[static_cast<std::size_t>(k)].soft_records(),
                                    static_cast<std::size_t>(cfg.particles), rng);
  }

  auto emit = [&](const std::string& event) {
    if (sink) sink(progress_record(state, cfg, event));
  };

  for (int attempt = 0;; ++attempt) {
    state.restarts = attempt;
    state.components.clear();
    for (int k = 0; k < k_count; ++k) {
      Rng rng = make_stream(seed, {0x696e6974ULL, static_cast<std::uint64_t>(attempt), static_cast<std::uint64_t>(k)});
      ComponentState comp;
      comp.particles = initialize_particles(d, cfg, rng);
      comp.beliefs = beliefs[static_cast<std::size_t>(k)];
      comp.matrices = matrices[static_cast<std::size_t>(k)];
      state.components.push_back(std::move(comp));
    }
    state.responsibilities = Eigen::MatrixXd::Constant(data.size(), k_count, 1.0 / k_count);
    state.dirichlet_alpha = state.prior_alpha;
    state.annealed = false;
    Eigen::MatrixXd exponents = state.responsibilities;
    bool restart = false;

    for (int u = 1; u <= cfg.cavi_rounds && !restart; ++u) {
      state.cavi_round = u;
      const std::uint64_t round_seed = derive_seed(seed, {0x726f756eULL, static_cast<std::uint64_t>(attempt),
                                                          static_cast<std::uint64_t>(u)});
      const bool collapsed =
          update_responsibilities(state, x, exponents, cfg, false, derive_seed(round_seed, {1}));
      if (collapsed) {
        if (attempt < cfg.max_restarts) {
          state.notes.push_back("restart after responsibility collapse in round " + std::to_string(u));
          emit("restart");
          restart = true;
          break;
        }
        state.converged = false;
        state.notes.push_back("responsibility collapse with restart budget exhausted");
      }
      state.dirichlet_alpha = update_mixing_weights(state.responsibilities, state.prior_alpha);
      Rng assign_rng(derive_seed(round_seed, {2}));
      exponents = sample_assignments(state.responsibilities, assign_rng);
      const long steps = cfg.steps_in_round(u);
      for (int k = 0; k < k_count; ++k)
        run_segment(state.components[static_cast<std::size_t>(k)], x, exponents.col(k), cfg, d, steps,
                    derive_seed(round_seed, {3, static_cast<std::uint64_t>(k)}), fallbacks);
      emit("round");
    }
    if (restart) continue;

    // final annealed update with hard graphs
    state.annealed = true;
    bool missing = false;
    for (auto& comp : state.components) {
      comp.retained = acyclic_particles(comp, cfg, d);
      if (comp.retained.empty()) missing = true;
    }
    if (missing && attempt < cfg.max_restarts) {
      state.notes.push_back("restart: a component has no acyclic particle");
      emit("restart");
      continue;
    }
    if (missing) {
      state.converged = false;
      state.notes.push_back("no acyclic particle in some component with restart budget exhausted");
    }
    const std::uint64_t final_seed = derive_seed(seed, {0x66696e61ULL, static_cast<std::uint64_t>(attempt)});
    update_responsibilities(state, x, exponents, cfg, true, final_seed);
    state.dirichlet_alpha = update_mixing_weights(state.responsibilities, state.prior_alpha);
    break;
  }
  state.weight_fallbacks += fallbacks.load();
  emit("done");
  return state;
}

// ---------------------------------------------------------------- summaries

/// Hard graphs of the retained particles (all particles when none were kept).
inline std::vector<Adjacency> component_graphs(const MixtureState& state, int k, const VamslConfig& cfg) {
  const ComponentState& comp = state.components.at(static_cast<std::size_t>(k));
  const int d = state.num_vars;
  std::vector<Adjacency> out;
  auto add = [&](std::size_t p) {
    out.push_back(hard_graph(embedding_of(comp.particles.particles[p], cfg.latent_dim_for(d), d), comp.beliefs.mask));
  };
  if (!comp.retained.empty())
    for (std::size_t p : comp.retained) add(p);
  else
    for (std::size_t p = 0; p < comp.particles.size(); ++p) add(p);
  return out;
}

inline std::vector<std::size_t> used_particles(const ComponentState& comp) {
  if (!comp.retained.empty()) return comp.retained;
  std::vector<std::size_t> all(comp.particles.size());
  for (std::size_t p = 0; p < all.size(); ++p) all[p] = p;
  return all;
}

/// Particle-averaged soft graph at the current temperature.
inline Eigen::MatrixXd mean_soft_graph(const MixtureState& state, int k, const VamslConfig& cfg) {
  const ComponentState& comp = state.components.at(static_cast<std::size_t>(k));
  const int d = state.num_vars;
  const double omega = cfg.schedules.omega(std::max<long>(comp.particles.step, 1));
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(d, d);
  for (const auto& p : comp.particles.particles)
    acc += soft_graph(embedding_of(p, cfg.latent_dim_for(d), d), omega, comp.beliefs.mask).probs;
  return acc / static_cast<double>(comp.particles.size());
}

/// Fraction of (retained) particles whose hard graph has each edge.
inline Eigen::MatrixXd edge_marginals(const MixtureState& state, int k, const VamslConfig& cfg) {
  const auto graphs = component_graphs(state, k, cfg);
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(state.num_vars, state.num_vars);
  for (const auto& g : graphs) acc += g.cast<double>();
  return acc / static_cast<double>(graphs.size());
}

/// The retained particle's hard graph with the highest log joint: parameter
/// prior + responsibility-weighted likelihood + structure prior.
inline Adjacency map_graph(const MixtureState& state, int k, const Dataset& data, const VamslConfig& cfg) {
  const ComponentState& comp = state.components.at(static_cast<std::size_t>(k));
  const int d = state.num_vars;
  const Eigen::VectorXd w = state.responsibilities.col(k);
  const StructurePriorSpec prior = cfg.structure_prior_for(d);
  double best = -std::numeric_limits<double>::infinity();
  Adjacency best_g;
  for (std::size_t p : used_particles(comp)) {
    const SteinParticle& particle = comp.particles.particles[p];
    const Adjacency g = hard_graph(embedding_of(particle, cfg.latent_dim_for(d), d), comp.beliefs.mask);
    const double score = weighted_log_joint(data.rows, w, g, params_of(particle, cfg, d), false).value +
                         log_structure_prior(SoftGraph{g.cast<double>()}, prior);
    if (score > best || best_g.size() == 0) {
      best = score;
      best_g = g;
    }
  }
  return best_g;
}

/// Per-component N x P tables of log p(x_n | G_inf(Z_p), Theta_p).
inline std::vector<Eigen::MatrixXd> particle_log_likelihoods(const MixtureState& state, const Eigen::MatrixXd& x,
                                                             const VamslConfig& cfg) {
  std::vector<Eigen::MatrixXd> out;
  const int d = state.num_vars;
  for (const auto& comp : state.components) {
    const auto use = used_particles(comp);
    Eigen::MatrixXd table(x.rows(), static_cast<Eigen::Index>(use.size()));
    for (std::size_t i = 0; i < use.size(); ++i) {
      const SteinParticle& p = comp.particles.particles[use[i]];
      table.col(static_cast<Eigen::Index>(i)) =
          log_likelihood_rows(x, hard_graph(embedding_of(p, cfg.latent_dim_for(d), d), comp.beliefs.mask),
                              params_of(p, cfg, d));
    }
    out.push_back(std::move(table));
  }
  return out;
}

/// Responsibilities of new rows under the annealed state (hard graphs, current alpha).
inline Eigen::MatrixXd predict_responsibilities(const MixtureState& state, const Eigen::MatrixXd& x,
                                                const VamslConfig& cfg) {
  const auto tables = particle_log_likelihoods(state, x, cfg);
  Eigen::MatrixXd e(x.rows(), state.num_components());
  for (int k = 0; k < state.num_components(); ++k) e.col(k) = tables[static_cast<std::size_t>(k)].rowwise().mean();
  return responsibilities_from(e, state.dirichlet_alpha);
}

}  // namespace vamsl
