#pragma once

// Ground-truth Bayesian networks, mixture data generation and CSV ingestion.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "vamsl/bn_likelihood.hpp"
#include "vamsl/errors.hpp"
#include "vamsl/latent_graph.hpp"
#include "vamsl/rng.hpp"

namespace vamsl {

inline std::vector<int> random_permutation(int d, Rng& rng) {
  std::vector<int> perm(static_cast<std::size_t>(d));
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = d - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.uniform() * (i + 1));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(std::min(j, i))]);
  }
  return perm;
}

/// Erdos-Renyi DAG: random topological order, each forward edge kept with
/// probability min(1, 2 e d / (d (d - 1))).
inline Adjacency sample_er_dag(int d, double expected_edges_per_node, Rng& rng) {
  if (d < 2) throw ContractError("sample_er_dag: d must be at least 2");
  if (expected_edges_per_node < 0.0) throw ContractError("sample_er_dag: negative edge density");
  const double p = std::min(1.0, 2.0 * expected_edges_per_node * d / (static_cast<double>(d) * (d - 1)));
  const std::vector<int> order = random_permutation(d, rng);
  Adjacency g = Adjacency::Zero(d, d);
  for (int a = 0; a < d; ++a)
    for (int b = a + 1; b < d; ++b)
      if (rng.uniform() < p) g(order[static_cast<std::size_t>(a)], order[static_cast<std::size_t>(b)]) = 1;
  return g;
}

/// Preferential attachment over a random order: node number i draws
/// min(m, i) distinct parents among earlier nodes with weight 1 + out-degree.
inline Adjacency sample_sf_dag(int d, int m, Rng& rng) {
  if (d < 2) throw ContractError("sample_sf_dag: d must be at least 2");
  if (m < 1) throw ContractError("sample_sf_dag: attachment must be at least 1");
  const std::vector<int> order = random_permutation(d, rng);
  Adjacency g = Adjacency::Zero(d, d);
  std::vector<double> outdeg(static_cast<std::size_t>(d), 0.0);
  for (int i = 1; i < d; ++i) {
    std::vector<int> pool(order.begin(), order.begin() + i);
    const int draws = std::min(m, i);
    for (int k = 0; k < draws; ++k) {
      double total = 0.0;
      for (int c : pool) total += 1.0 + outdeg[static_cast<std::size_t>(c)];
      double u = rng.uniform() * total;
      std::size_t pick = pool.size() - 1;
      for (std::size_t c = 0; c < pool.size(); ++c) {
        u -= 1.0 + outdeg[static_cast<std::size_t>(pool[c])];
        if (u < 0.0) {
          pick = c;
          break;
        }
      }
      const int parent = pool[pick];
      g(parent, order[static_cast<std::size_t>(i)]) = 1;
      outdeg[static_cast<std::size_t>(parent)] += 1.0;
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
    }
  }
  return g;
}

/// Kahn order of an acyclic adjacency; throws on a cycle.
inline std::vector<int> topological_order(const Adjacency& g) {
  const int d = static_cast<int>(g.rows());
  std::vector<int> indeg(static_cast<std::size_t>(d), 0);
  for (int j = 0; j < d; ++j) indeg[static_cast<std::size_t>(j)] = g.col(j).sum();
  std::vector<int> order;
  std::vector<int> ready;
  for (int j = d - 1; j >= 0; --j)
    if (indeg[static_cast<std::size_t>(j)] == 0) ready.push_back(j);
  while (!ready.empty()) {
    const int a = ready.back();
    ready.pop_back();
    order.push_back(a);
    for (int b = d - 1; b >= 0; --b)
      if (g(a, b) && --indeg[static_cast<std::size_t>(b)] == 0) ready.push_back(b);
  }
  if (static_cast<int>(order.size()) != d) throw ContractError("topological_order: graph has a cycle");
  return order;
}

/// Depth-first cycle check, independent of the spectral penalty.
inline bool has_cycle_dfs(const Adjacency& g) {
  const int d = static_cast<int>(g.rows());
  std::vector<int> color(static_cast<std::size_t>(d), 0);
  std::function<bool(int)> visit = [&](int a) {
    color[static_cast<std::size_t>(a)] = 1;
    for (int b = 0; b < d; ++b) {
      if (!g(a, b)) continue;
      if (color[static_cast<std::size_t>(b)] == 1) return true;
      if (color[static_cast<std::size_t>(b)] == 0 && visit(b)) return true;
    }
    color[static_cast<std::size_t>(a)] = 2;
    return false;
  };
  for (int a = 0; a < d; ++a)
    if (color[static_cast<std::size_t>(a)] == 0 && visit(a)) return true;
  return false;
}

struct GroundTruthBn {
  Adjacency graph;
  BnParams params;
};

struct GroundTruthMixture {
  std::vector<GroundTruthBn> components;
  std::vector<double> mixing;
  std::uint64_t seed = 0;

  int num_components() const { return static_cast<int>(components.size()); }
};

enum class GraphFamily { erdos_renyi, scale_free };

struct TruthSpec {
  int d = 5;
  int components = 1;
  GraphFamily family = GraphFamily::erdos_renyi;
  double expected_edges_per_node = 2.0;
  int sf_attachment = 2;
  ModelKind model = ModelKind::linear;
  int hidden = kDefaultHiddenWidth;
  double noise_var = kDefaultNoiseVar;
  /// Linear weights are resampled until |w| reaches this value (0 keeps the
  /// plain standard normal draw).
  double min_abs_weight = 0.0;
  std::vector<double> mixing;  // empty: uniform
};

inline GroundTruthMixture sample_ground_truth(const TruthSpec& spec, std::uint64_t seed) {
  if (spec.components < 1) throw ConfigError("truth.components", "must be positive");
  GroundTruthMixture truth;
  truth.seed = seed;
  truth.mixing = spec.mixing.empty() ? std::vector<double>(static_cast<std::size_t>(spec.components),
                                                           1.0 / spec.components)
                                     : spec.mixing;
  if (static_cast<int>(truth.mixing.size()) != spec.components)
    throw ConfigError("truth.mixing", "one probability per component required");
  double total = 0.0;
  for (double p : truth.mixing) {
    if (p < 0.0) throw ConfigError("truth.mixing", "probabilities must be nonnegative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("truth.mixing", "probabilities must sum to 1");

  for (int k = 0; k < spec.components; ++k) {
    Rng rng = make_stream(seed, {0x7472757468ULL, static_cast<std::uint64_t>(k)});
    GroundTruthBn bn;
    bn.graph = spec.family == GraphFamily::erdos_renyi ? sample_er_dag(spec.d, spec.expected_edges_per_node, rng)
                                                       : sample_sf_dag(spec.d, spec.sf_attachment, rng);
    bn.params = BnParams::like(spec.model, spec.d, spec.hidden, spec.noise_var);
    bn.params.fill_standard_normal(rng);
    if (spec.model == ModelKind::linear) {
      auto w = bn.params.weights();
      for (int i = 0; i < spec.d; ++i)
        for (int j = 0; j < spec.d; ++j) {
          if (!bn.graph(i, j)) {
            w(i, j) = 0.0;
            continue;
          }
          while (std::abs(w(i, j)) < spec.min_abs_weight) w(i, j) = rng.normal();
        }
    }
    truth.components.push_back(std::move(bn));
  }
  return truth;
}

/// Ancestral sample of one row from a single BN.
inline Eigen::VectorXd sample_row(const GroundTruthBn& bn, const std::vector<int>& order, Rng& rng) {
  const int d = bn.params.num_vars();
  const double sd = std::sqrt(bn.params.noise_var());
  Eigen::RowVectorXd x = Eigen::RowVectorXd::Zero(d);
  for (int j : order) {
    const Eigen::MatrixXd mean = predict_means(x, bn.graph, bn.params);
    x(j) = mean(0, j) + sd * rng.normal();
  }
  return x.transpose();
}

struct LabelledRows {
  Eigen::MatrixXd rows;
  std::vector<int> labels;
};

inline LabelledRows sample_rows(const GroundTruthMixture& truth, int n, Rng& rng) {
  if (n < 1) throw ContractError("generate_observations: N must be positive");
  const int d = truth.components.front().params.num_vars();
  std::vector<std::vector<int>> orders;
  for (const auto& c : truth.components) orders.push_back(topological_order(c.graph));
  LabelledRows out{Eigen::MatrixXd(n, d), std::vector<int>(static_cast<std::size_t>(n))};
  for (int r = 0; r < n; ++r) {
    double u = rng.uniform();
    int k = truth.num_components() - 1;
    for (int c = 0; c < truth.num_components(); ++c) {
      u -= truth.mixing[static_cast<std::size_t>(c)];
      if (u < 0.0) {
        k = c;
        break;
      }
    }
    // a zero-probability component is never drawn, even at the boundary
    while (truth.mixing[static_cast<std::size_t>(k)] <= 0.0 && k > 0) --k;
    out.labels[static_cast<std::size_t>(r)] = k;
    out.rows.row(r) = sample_row(truth.components[static_cast<std::size_t>(k)],
                                 orders[static_cast<std::size_t>(k)], rng)
                          .transpose();
  }
  return out;
}

/// N training rows plus an optional held-out set, labels kept for evaluation.
inline Dataset generate_observations(const GroundTruthMixture& truth, int n, Rng& rng, int held_out = 0) {
  Dataset data;
  LabelledRows train = sample_rows(truth, n, rng);
  data.rows = std::move(train.rows);
  data.labels = std::move(train.labels);
  if (held_out > 0) {
    LabelledRows ho = sample_rows(truth, held_out, rng);
    data.held_out = std::move(ho.rows);
    data.held_out_labels = std::move(ho.labels);
  }
  return data;
}

/// Accuracy of labelling each row by the component with the highest true
/// likelihood (mixing weights included).
inline double oracle_accuracy(const GroundTruthMixture& truth, const Eigen::MatrixXd& rows,
                              const std::vector<int>& labels) {
  if (static_cast<Eigen::Index>(labels.size()) != rows.rows()) throw ContractError("oracle_accuracy: label count mismatch");
  const int k_count = static_cast<int>(truth.components.size());
  Eigen::MatrixXd ll(rows.rows(), k_count);
  for (int k = 0; k < k_count; ++k)
    ll.col(k) = log_likelihood_rows(rows, truth.components[static_cast<std::size_t>(k)].graph,
                                    truth.components[static_cast<std::size_t>(k)].params)
                    .array() +
                std::log(std::max(truth.mixing[static_cast<std::size_t>(k)], 1e-300));
  int hits = 0;
  for (Eigen::Index n = 0; n < rows.rows(); ++n) {
    Eigen::Index best = 0;
    ll.row(n).maxCoeff(&best);
    if (best == labels[static_cast<std::size_t>(n)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(rows.rows());
}

struct SeparationSpec {
  double min_oracle_accuracy = 0.97;
  int pilot_rows = 1000;
  int max_attempts = 200;
};

/// Redraws the ground truth until the likelihood oracle separates the
/// components on a pilot sample. Attempt a uses seed derive_seed(seed, {a}).
inline GroundTruthMixture sample_separated_mixture(const TruthSpec& spec, std::uint64_t seed,
                                                   const SeparationSpec& sep = {}) {
  for (int a = 0; a < sep.max_attempts; ++a) {
    GroundTruthMixture truth = sample_ground_truth(spec, derive_seed(seed, {static_cast<std::uint64_t>(a)}));
    Rng rng = make_stream(seed, {0x70696c6fULL, static_cast<std::uint64_t>(a)});
    const LabelledRows pilot = sample_rows(truth, sep.pilot_rows, rng);
    if (oracle_accuracy(truth, pilot.rows, pilot.labels) >= sep.min_oracle_accuracy) return truth;
  }
  throw ConfigError("truth.separation", "no sufficiently separated mixture within the attempt limit");
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline double parse_number(const std::string& cell, std::size_t line) {
  if (cell.empty()) throw ParseError(line, "empty cell");
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(cell, &used);
  } catch (const std::exception&) {
    throw ParseError(line, "non-numeric cell '" + cell + "'");
  }
  if (used != cell.size() || !std::isfinite(v)) throw ParseError(line, "non-numeric cell '" + cell + "'");
  return v;
}

}  // namespace detail

struct CsvTable {
  std::vector<std::string> columns;  // feature names, label column excluded
  Dataset data;
  std::vector<std::string> label_names;
};

/// z-scores every column in place (population variance). Constant columns are
/// centred only.
inline void standardize_columns(Eigen::MatrixXd& x) {
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const double mean = x.col(c).mean();
    x.col(c).array() -= mean;
    const double sd = std::sqrt(x.col(c).squaredNorm() / static_cast<double>(x.rows()));
    if (sd > 0.0) x.col(c) /= sd;
  }
}

/// Header row required. A first column named "label" holds per-row classes
/// (numeric or text) and is kept out of the feature matrix.
inline CsvTable load_csv_stream(std::istream& in, bool standardize) {
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!detail::trim(line).empty()) {
      header = detail::split_csv(line);
      break;
    }
  }
  if (header.empty()) throw ParseError(0, "empty CSV file");
  std::string first = header.front();
  std::transform(first.begin(), first.end(), first.begin(), [](unsigned char c) { return std::tolower(c); });
  const bool has_label = first == "label";

  CsvTable table;
  table.columns.assign(header.begin() + (has_label ? 1 : 0), header.end());
  if (table.columns.empty()) throw ParseError(line_no, "no feature columns");
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::map<std::string, int> label_ids;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv(line);
    if (cells.size() != header.size())
      throw ParseError(line_no, "expected " + std::to_string(header.size()) + " cells, found " +
                                    std::to_string(cells.size()));
    std::vector<double> row;
    row.reserve(table.columns.size());
    for (std::size_t c = has_label ? 1 : 0; c < cells.size(); ++c) row.push_back(detail::parse_number(cells[c], line_no));
    rows.push_back(std::move(row));
    if (has_label) {
      const auto [it, inserted] = label_ids.emplace(cells.front(), static_cast<int>(table.label_names.size()));
      if (inserted) table.label_names.push_back(cells.front());
      labels.push_back(it->second);
    }
  }
  if (rows.empty()) throw ParseError(line_no, "no data rows");
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(table.columns.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  if (standardize) standardize_columns(x);
  table.data.rows = std::move(x);
  if (has_label) table.data.labels = std::move(labels);
  return table;
}

inline CsvTable load_csv(const std::string& path, bool standardize) {
  std::ifstream in(path);
  if (!in) throw ParseError(0, "cannot open " + path);
  return load_csv_stream(in, standardize);
}

/// Deterministic split: a seeded shuffle, the first `held_out` rows go to the
/// held-out set.
inline Dataset split_held_out(const Dataset& full, int held_out, std::uint64_t seed) {
  const int n = static_cast<int>(full.size());
  if (held_out < 0 || held_out >= n) throw ContractError("split_held_out: held-out size must be in [0, N)");
  Rng rng(seed);
  const std::vector<int> perm = random_permutation(n, rng);
  Dataset out;
  out.rows.resize(n - held_out, full.rows.cols());
  if (held_out > 0) out.held_out = Eigen::MatrixXd(held_out, full.rows.cols());
  std::vector<int> tr_labels, ho_labels;
  for (int r = 0; r < n; ++r) {
    const int src = perm[static_cast<std::size_t>(r)];
    if (r < held_out) {
      out.held_out->row(r) = full.rows.row(src);
      if (full.labels) ho_labels.push_back((*full.labels)[static_cast<std::size_t>(src)]);
    } else {
      out.rows.row(r - held_out) = full.rows.row(src);
      if (full.labels) tr_labels.push_back((*full.labels)[static_cast<std::size_t>(src)]);
    }
  }
  if (full.labels) {
    out.labels = std::move(tr_labels);
    if (held_out > 0) out.held_out_labels = std::move(ho_labels);
  }
  return out;
}

inline nlohmann::json dataset_manifest(const Dataset& data, std::uint64_t seed) {
  return {{"n", data.size()},
          {"d", data.num_vars()},
          {"held_out", data.held_out ? data.held_out->rows() : 0},
          {"labels", data.labels.has_value()},
          {"seed", seed}};
}

}  // namespace vamsl
