#pragma once

// Stein variational gradient descent over particles made of a latent part and
// a parameter part, with the additive squared-exponential kernel and
// per-coordinate RMS step-size adaptation.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "vamsl/errors.hpp"
#include "vamsl/parallel.hpp"

namespace vamsl {

struct SteinParticle {
  Eigen::VectorXd z;
  Eigen::VectorXd theta;

  friend bool operator==(const SteinParticle& a, const SteinParticle& b) {
    return a.z.size() == b.z.size() && a.theta.size() == b.theta.size() && a.z == b.z && a.theta == b.theta;
  }
};

/// Running mean of squared updates, one entry per coordinate.
struct AdaptationState {
  Eigen::VectorXd z_sq;
  Eigen::VectorXd theta_sq;
};

struct ParticleSet {
  std::vector<SteinParticle> particles;
  std::vector<AdaptationState> adaptation;
  long step = 0;

  static ParticleSet from(std::vector<SteinParticle> ps) {
    ParticleSet set;
    set.adaptation.reserve(ps.size());
    for (const auto& p : ps)
      set.adaptation.push_back({Eigen::VectorXd::Zero(p.z.size()), Eigen::VectorXd::Zero(p.theta.size())});
    set.particles = std::move(ps);
    return set;
  }

  std::size_t size() const { return particles.size(); }
};

struct KernelSpec {
  double gamma_z = 5.0;
  double gamma_theta = 500.0;
};

struct KernelValue {
  double value = 0.0;
  Eigen::VectorXd grad_z;      // d kappa / d a.z
  Eigen::VectorXd grad_theta;  // d kappa / d a.theta
};

/// kappa(a, b) = exp(-|Z_a - Z_b|^2 / gamma_Z) + exp(-|Theta_a - Theta_b|^2 / gamma_Theta)
inline KernelValue additive_se_kernel(const SteinParticle& a, const SteinParticle& b, const KernelSpec& spec) {
  if (!(spec.gamma_z > 0.0) || !(spec.gamma_theta > 0.0))
    throw ContractError("additive_se_kernel: length-scales must be positive");
  const Eigen::VectorXd dz = a.z - b.z;
  const Eigen::VectorXd dt = a.theta - b.theta;
  const double kz = std::exp(-dz.squaredNorm() / spec.gamma_z);
  const double kt = std::exp(-dt.squaredNorm() / spec.gamma_theta);
  return {kz + kt, (-2.0 * kz / spec.gamma_z) * dz, (-2.0 * kt / spec.gamma_theta) * dt};
}

struct RmsPropSpec {
  double learning_rate = 0.005;
  double decay = 0.9;
  double epsilon = 1e-8;
};

/// Linear annealing: beta_t = beta_slope * t, omega_t = omega_slope * t.
struct Schedules {
  double beta_slope = 1.0;
  double omega_slope = 0.2;
  RmsPropSpec rmsprop;
  long total_steps = 6000;

  double beta(long t) const { return beta_slope * static_cast<double>(t); }
  double omega(long t) const { return omega_slope * static_cast<double>(t); }
};

/// Gradient of the log target for particle `index` at (1-based) step `t`.
using GradientOracle = std::function<SteinParticle(const SteinParticle&, std::size_t index, long t)>;

/// One RMSProp ascent step along `direction`, updating the adaptation state.
inline void rmsprop_ascent(Eigen::VectorXd& x, Eigen::VectorXd& avg_sq, const Eigen::VectorXd& direction,
                           const RmsPropSpec& spec) {
  avg_sq = spec.decay * avg_sq + (1.0 - spec.decay) * direction.cwiseAbs2();
  x.array() += spec.learning_rate * direction.array() / (avg_sq.array() + spec.epsilon).sqrt();
}

namespace detail {

inline void require_finite(const Eigen::VectorXd& v, std::size_t particle, const char* term) {
  if (!v.allFinite())
    throw NumericError("svgd_step: non-finite " + std::string(term) + " for particle " + std::to_string(particle));
}

}  // namespace detail

/// Moves every particle by eta * phi(particle) where
///   phi(x) = 1/P sum_p [kappa(x_p, x) grad log p(x_p) + grad_{x_p} kappa(x_p, x)].
/// Gradients are evaluated on a snapshot; the update is applied synchronously.
inline ParticleSet svgd_step(ParticleSet set, const GradientOracle& log_target_grad, const Schedules& schedules,
                             const KernelSpec& kernel, int workers = 1) {
  const std::size_t n = set.size();
  if (n == 0) throw ContractError("svgd_step: empty particle set");
  if (set.adaptation.size() != n) throw ContractError("svgd_step: adaptation state size mismatch");
  const long t = set.step + 1;

  std::vector<SteinParticle> grads(n);
  parallel_for(n, workers, [&](std::size_t p) {
    grads[p] = log_target_grad(set.particles[p], p, t);
    detail::require_finite(grads[p].z, p, "target gradient (z)");
    detail::require_finite(grads[p].theta, p, "target gradient (theta)");
  });

  std::vector<SteinParticle> phi(n);
  parallel_for(n, workers, [&](std::size_t q) {
    SteinParticle acc{Eigen::VectorXd::Zero(set.particles[q].z.size()),
                      Eigen::VectorXd::Zero(set.particles[q].theta.size())};
    for (std::size_t p = 0; p < n; ++p) {
      const KernelValue k = additive_se_kernel(set.particles[p], set.particles[q], kernel);
      acc.z += k.value * grads[p].z + k.grad_z;
      acc.theta += k.value * grads[p].theta + k.grad_theta;
    }
    acc.z /= static_cast<double>(n);
    acc.theta /= static_cast<double>(n);
    detail::require_finite(acc.z, q, "kernel update (z)");
    detail::require_finite(acc.theta, q, "kernel update (theta)");
    phi[q] = std::move(acc);
  });

  for (std::size_t q = 0; q < n; ++q) {
    rmsprop_ascent(set.particles[q].z, set.adaptation[q].z_sq, phi[q].z, schedules.rmsprop);
    rmsprop_ascent(set.particles[q].theta, set.adaptation[q].theta_sq, phi[q].theta, schedules.rmsprop);
  }
  set.step = t;
  return set;
}

}  // namespace vamsl
