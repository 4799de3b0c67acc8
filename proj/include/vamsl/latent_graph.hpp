#pragma once

// Latent graph embeddings Z = [U, V], the soft-graph map, the polynomial
// acyclicity penalty, structure priors and hard-constraint masking.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "vamsl/errors.hpp"
#include "vamsl/rng.hpp"

namespace vamsl {

/// Binary adjacency, entry (i, j) = 1 means edge i -> j.
using Adjacency = Eigen::MatrixXi;

struct Edge {
  int from = 0;
  int to = 0;

  friend auto operator<=>(const Edge&, const Edge&) = default;
};

enum class EdgeConstraint : std::uint8_t { free, required, forbidden };

/// Ternary d x d mask. The diagonal is always forbidden.
class HardConstraintMask {
 public:
  HardConstraintMask() = default;

  explicit HardConstraintMask(int d) : d_(d), entries_(static_cast<std::size_t>(d) * d, EdgeConstraint::free) {
    if (d < 1) throw ContractError("HardConstraintMask: d must be positive");
    for (int i = 0; i < d; ++i) entries_[index(i, i)] = EdgeConstraint::forbidden;
  }

  int num_vars() const { return d_; }

  EdgeConstraint at(int i, int j) const {
    check(i, j);
    return entries_[index(i, j)];
  }

  bool is_free(int i, int j) const { return at(i, j) == EdgeConstraint::free; }

  void set(int i, int j, EdgeConstraint c) {
    check(i, j);
    if (i == j && c != EdgeConstraint::forbidden) throw ContractError("HardConstraintMask: self-loops stay forbidden");
    entries_[index(i, j)] = c;
  }

  /// True when adding the required edge i -> j would close a cycle among
  /// required edges.
  bool would_close_required_cycle(int i, int j) const {
    check(i, j);
    if (i == j) return true;
    // is there a required path j ~> i?
    std::vector<char> seen(static_cast<std::size_t>(d_), 0);
    std::vector<int> stack{j};
    seen[static_cast<std::size_t>(j)] = 1;
    while (!stack.empty()) {
      const int a = stack.back();
      stack.pop_back();
      if (a == i) return true;
      for (int b = 0; b < d_; ++b) {
        if (!seen[static_cast<std::size_t>(b)] && entries_[index(a, b)] == EdgeConstraint::required) {
          seen[static_cast<std::size_t>(b)] = 1;
          stack.push_back(b);
        }
      }
    }
    return false;
  }

  bool required_edges_acyclic() const {
    // Kahn's algorithm over required edges
    std::vector<int> indeg(static_cast<std::size_t>(d_), 0);
    for (int i = 0; i < d_; ++i)
      for (int j = 0; j < d_; ++j)
        if (entries_[index(i, j)] == EdgeConstraint::required) ++indeg[static_cast<std::size_t>(j)];
    std::vector<int> ready;
    for (int j = 0; j < d_; ++j)
      if (indeg[static_cast<std::size_t>(j)] == 0) ready.push_back(j);
    int visited = 0;
    while (!ready.empty()) {
      const int a = ready.back();
      ready.pop_back();
      ++visited;
      for (int b = 0; b < d_; ++b)
        if (entries_[index(a, b)] == EdgeConstraint::required && --indeg[static_cast<std::size_t>(b)] == 0)
          ready.push_back(b);
    }
    return visited == d_;
  }

  /// 1 on free entries, 0 on pinned ones.
  Eigen::MatrixXd free_indicator() const {
    Eigen::MatrixXd m(d_, d_);
    for (int i = 0; i < d_; ++i)
      for (int j = 0; j < d_; ++j) m(i, j) = entries_[index(i, j)] == EdgeConstraint::free ? 1.0 : 0.0;
    return m;
  }

  bool fully_pinned() const {
    for (auto c : entries_)
      if (c == EdgeConstraint::free) return false;
    return true;
  }

  friend bool operator==(const HardConstraintMask&, const HardConstraintMask&) = default;

 private:
  std::size_t index(int i, int j) const { return static_cast<std::size_t>(i) * static_cast<std::size_t>(d_) + j; }

  void check(int i, int j) const {
    if (i < 0 || j < 0 || i >= d_ || j >= d_) throw ContractError("HardConstraintMask: index out of range");
  }

  int d_ = 0;
  std::vector<EdgeConstraint> entries_;
};

/// Z = [U, V] with U, V in R^{l x d}. Column i of U and column j of V give the
/// logit of edge i -> j through their inner product.
struct LatentEmbedding {
  Eigen::MatrixXd u;
  Eigen::MatrixXd v;

  static LatentEmbedding zeros(int latent_dim, int num_vars) {
    return {Eigen::MatrixXd::Zero(latent_dim, num_vars), Eigen::MatrixXd::Zero(latent_dim, num_vars)};
  }

  static LatentEmbedding standard_normal(int latent_dim, int num_vars, double sigma, Rng& rng) {
    LatentEmbedding z = zeros(latent_dim, num_vars);
    for (Eigen::Index c = 0; c < num_vars; ++c)
      for (Eigen::Index r = 0; r < latent_dim; ++r) z.u(r, c) = sigma * rng.normal();
    for (Eigen::Index c = 0; c < num_vars; ++c)
      for (Eigen::Index r = 0; r < latent_dim; ++r) z.v(r, c) = sigma * rng.normal();
    return z;
  }

  int num_vars() const { return static_cast<int>(u.cols()); }
  int latent_dim() const { return static_cast<int>(u.rows()); }
  Eigen::Index size() const { return u.size() + v.size(); }

  /// [vec(U); vec(V)], column-major.
  Eigen::VectorXd flatten() const {
    Eigen::VectorXd out(size());
    out.head(u.size()) = Eigen::Map<const Eigen::VectorXd>(u.data(), u.size());
    out.tail(v.size()) = Eigen::Map<const Eigen::VectorXd>(v.data(), v.size());
    return out;
  }

  static LatentEmbedding from_flat(const Eigen::Ref<const Eigen::VectorXd>& flat, int latent_dim, int num_vars) {
    const Eigen::Index n = static_cast<Eigen::Index>(latent_dim) * num_vars;
    if (flat.size() != 2 * n) throw ContractError("LatentEmbedding::from_flat: size mismatch");
    LatentEmbedding z;
    z.u = Eigen::Map<const Eigen::MatrixXd>(flat.data(), latent_dim, num_vars);
    z.v = Eigen::Map<const Eigen::MatrixXd>(flat.data() + n, latent_dim, num_vars);
    return z;
  }

  /// Logits matrix, (i, j) = U_i . V_j.
  Eigen::MatrixXd inner_products() const { return u.transpose() * v; }
};

struct SoftGraph {
  Eigen::MatrixXd probs;

  int num_vars() const { return static_cast<int>(probs.rows()); }
};

struct StructurePriorSpec {
  enum class Family { erdos_renyi, scale_free };

  Family family = Family::erdos_renyi;
  double edge_prob = 0.5;

  static StructurePriorSpec erdos_renyi(double q) { return {Family::erdos_renyi, q}; }
  static StructurePriorSpec scale_free() { return {Family::scale_free, 0.5}; }

  void validate() const {
    if (family == Family::erdos_renyi && !(edge_prob > 0.0 && edge_prob < 1.0))
      throw ConfigError("structure_prior.edge_prob", "must lie in (0, 1)");
  }
};

inline double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Pins required entries to 1 and forbidden entries (and the diagonal) to 0.
inline void apply_mask(Eigen::MatrixXd& probs, const HardConstraintMask& mask) {
  const int d = static_cast<int>(probs.rows());
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      switch (mask.at(i, j)) {
        case EdgeConstraint::required: probs(i, j) = 1.0; break;
        case EdgeConstraint::forbidden: probs(i, j) = 0.0; break;
        case EdgeConstraint::free: break;
      }
    }
}

/// G_omega(Z)_ij = logistic(omega * U_i . V_j) on free entries.
inline SoftGraph soft_graph_from_logits(const Eigen::MatrixXd& logits, double omega, const HardConstraintMask& mask) {
  if (!(omega > 0.0)) throw ContractError("soft_graph: omega must be positive");
  if (!logits.allFinite()) throw NumericError("soft_graph: non-finite inner product");
  SoftGraph g{logits.unaryExpr([omega](double x) { return logistic(omega * x); })};
  apply_mask(g.probs, mask);
  return g;
}

inline SoftGraph soft_graph(const LatentEmbedding& z, double omega, const HardConstraintMask& mask) {
  if (z.num_vars() != mask.num_vars()) throw ContractError("soft_graph: mask dimension mismatch");
  return soft_graph_from_logits(z.inner_products(), omega, mask);
}

/// G_infinity(Z): the hard graph obtained as omega -> infinity.
inline Adjacency hard_graph(const LatentEmbedding& z, const HardConstraintMask& mask) {
  const Eigen::MatrixXd logits = z.inner_products();
  const int d = z.num_vars();
  Adjacency g = Adjacency::Zero(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      switch (mask.at(i, j)) {
        case EdgeConstraint::required: g(i, j) = 1; break;
        case EdgeConstraint::forbidden: g(i, j) = 0; break;
        case EdgeConstraint::free: g(i, j) = logits(i, j) > 0.0 ? 1 : 0; break;
      }
    }
  return g;
}

/// Independent Bernoulli draw per entry. Pinned entries are exactly 0 or 1
/// and therefore deterministic.
inline Adjacency sample_graph(const SoftGraph& soft, Rng& rng) {
  const int d = soft.num_vars();
  Adjacency g(d, d);
  for (int j = 0; j < d; ++j)
    for (int i = 0; i < d; ++i) {
      const double p = soft.probs(i, j);
      g(i, j) = p >= 1.0 ? 1 : (p <= 0.0 ? 0 : (rng.uniform() < p ? 1 : 0));
    }
  return g;
}

namespace detail {

inline Eigen::MatrixXd matrix_power(const Eigen::MatrixXd& m, int k) {
  const Eigen::Index d = m.rows();
  if (k == 0) return Eigen::MatrixXd::Identity(d, d);
  if ((k & (k - 1)) == 0) {
    // power of two: repeated squaring
    Eigen::MatrixXd out = m;
    for (int p = 1; p < k; p *= 2) out = (out * out).eval();
    return out;
  }
  Eigen::MatrixXd out = m;
  for (int p = 1; p < k; ++p) out = (out * m).eval();
  return out;
}

}  // namespace detail

/// Below this value a graph counts as acyclic.
inline constexpr double kAcyclicTolerance = 1e-8;

/// h(A) = tr[(I + A/d)^d] - d. Zero exactly on DAG supports for nonnegative A.
inline double acyclicity(const Eigen::MatrixXd& a) {
  const Eigen::Index d = a.rows();
  if (a.cols() != d) throw ContractError("acyclicity: matrix must be square");
  const Eigen::MatrixXd m = Eigen::MatrixXd::Identity(d, d) + a / static_cast<double>(d);
  return detail::matrix_power(m, static_cast<int>(d)).trace() - static_cast<double>(d);
}

inline double acyclicity(const Adjacency& g) { return acyclicity(Eigen::MatrixXd(g.cast<double>())); }

/// dh/dA = [(I + A/d)^(d-1)]^T.
inline Eigen::MatrixXd acyclicity_gradient(const Eigen::MatrixXd& a) {
  const Eigen::Index d = a.rows();
  const Eigen::MatrixXd m = Eigen::MatrixXd::Identity(d, d) + a / static_cast<double>(d);
  return detail::matrix_power(m, static_cast<int>(d) - 1).transpose();
}

inline bool is_acyclic(const Adjacency& g) { return acyclicity(g) < kAcyclicTolerance; }

/// Unnormalized log structure prior evaluated on a soft graph.
///   ER: |G| ln q + (C(d,2) - |G|) ln(1 - q)
///   SF: -3 sum_i ln(1 + |row_i|)
inline double log_structure_prior(const SoftGraph& soft, const StructurePriorSpec& spec) {
  spec.validate();
  const double d = soft.num_vars();
  if (spec.family == StructurePriorSpec::Family::erdos_renyi) {
    const double s = soft.probs.sum();
    const double pairs = d * (d - 1.0) / 2.0;
    return s * std::log(spec.edge_prob) + (pairs - s) * std::log1p(-spec.edge_prob);
  }
  double out = 0.0;
  for (Eigen::Index i = 0; i < soft.probs.rows(); ++i) out -= 3.0 * std::log1p(soft.probs.row(i).sum());
  return out;
}

/// d log_structure_prior / d soft entries.
inline Eigen::MatrixXd structure_prior_gradient(const SoftGraph& soft, const StructurePriorSpec& spec) {
  const Eigen::Index d = soft.probs.rows();
  if (spec.family == StructurePriorSpec::Family::erdos_renyi)
    return Eigen::MatrixXd::Constant(d, d, std::log(spec.edge_prob) - std::log1p(-spec.edge_prob));
  Eigen::MatrixXd g(d, d);
  for (Eigen::Index i = 0; i < d; ++i) g.row(i).setConstant(-3.0 / (1.0 + soft.probs.row(i).sum()));
  return g;
}

struct LatentPriorValue {
  double value = 0.0;
  LatentEmbedding gradient;
};

/// Independent N(0, sigma_z^2) log density over every entry of U and V.
inline LatentPriorValue log_latent_gaussian_prior(const LatentEmbedding& z, double sigma_z) {
  if (!(sigma_z > 0.0)) throw ContractError("log_latent_gaussian_prior: sigma_z must be positive");
  const double var = sigma_z * sigma_z;
  const double n = static_cast<double>(z.size());
  LatentPriorValue out;
  out.value = -0.5 * n * std::log(2.0 * M_PI * var) - 0.5 * (z.u.squaredNorm() + z.v.squaredNorm()) / var;
  out.gradient = {-z.u / var, -z.v / var};
  return out;
}

}  // namespace vamsl
