#pragma once

// Experiment configuration as a single versioned JSON document.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vamsl/bed.hpp"
#include "vamsl/elicitation_loop.hpp"
#include "vamsl/errors.hpp"
#include "vamsl/expert_oracle.hpp"
#include "vamsl/mixture.hpp"
#include "vamsl/synthetic.hpp"

namespace vamsl {

inline constexpr int kConfigSchemaVersion = 1;

enum class ExperimentKind { single_component_querying, two_component_mixture, real_data };

inline std::string to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::single_component_querying: return "single_component_querying";
    case ExperimentKind::two_component_mixture: return "two_component_mixture";
    case ExperimentKind::real_data: return "real_data";
  }
  return "";
}

struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::single_component_querying;

  // dims
  int d = 5;
  int latent_dim = 0;  // 0: d
  int components = 1;
  int n = 200;
  int held_out = 0;
  int particles = 20;
  long total_steps = 6000;
  int cavi_rounds = 10;
  int early_round_steps = 50;

  // model
  ModelKind model = ModelKind::linear;
  int hidden = kDefaultHiddenWidth;
  double noise_var = kDefaultNoiseVar;

  // schedules and optimiser; nullopt picks the model-specific default
  double beta_slope = 1.0;
  std::optional<double> omega_slope;
  double learning_rate = 0.005;

  // kernel
  double gamma_z = 5.0;
  std::optional<double> gamma_theta;

  // latent prior and estimator
  double sigma_z = 0.0;  // 0: 1 / sqrt(latent dimension)
  std::string prior_family = "erdos_renyi";
  std::optional<double> edge_prob;
  int graph_samples = 4;
  ZGradientEstimator z_estimator = ZGradientEstimator::relaxed;
  double dirichlet_prior = 1.0;
  int max_restarts = 5;

  // elicitation
  double alpha0 = 10.0;
  double beta0 = 10.0;
  double epsilon = 1e-3;

  // oracle
  double reliability = 0.9;
  double oracle_variance = 0.05;
  bool perfect_oracle = false;

  // queries
  int queries_per_round = 5;
  int query_rounds = 0;
  QueryStrategy strategy = QueryStrategy::bed;
  int outer_samples = 200;
  double alpha_s = 10.0;
  double beta_s = 10.0;
  bool binary_simulator = false;

  // synthetic ground truth
  double expected_edges_per_node = 1.0;
  double min_abs_weight = 0.0;
  std::string truth_family = "erdos_renyi";
  double min_oracle_accuracy = 0.0;  // > 0: redraw mixtures until separated

  // real data
  std::string data_path;
  bool standardize = true;

  std::vector<std::uint64_t> seeds{1};
  std::string output_dir = "out";
  int workers = 1;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;

  double resolved_omega_slope() const { return omega_slope.value_or(model == ModelKind::linear ? 0.2 : 0.02); }
  double resolved_gamma_theta() const { return gamma_theta.value_or(model == ModelKind::linear ? 500.0 : 1000.0); }

  void validate() const {
    auto positive = [](double v, const char* field) {
      if (!(v > 0.0)) throw ConfigError(field, "must be positive");
    };
    if (d < 2) throw ConfigError("dims.d", "must be at least 2");
    if (latent_dim < 0) throw ConfigError("dims.latent_dim", "must be nonnegative");
    if (components < 1) throw ConfigError("dims.components", "must be positive");
    if (experiment == ExperimentKind::single_component_querying && components != 1)
      throw ConfigError("dims.components", "single_component_querying needs exactly one component");
    if (n < 1) throw ConfigError("dims.n", "must be positive");
    if (held_out < 0) throw ConfigError("dims.held_out", "must be nonnegative");
    if (particles < 1) throw ConfigError("dims.particles", "must be positive");
    if (prior_family != "erdos_renyi" && prior_family != "scale_free")
      throw ConfigError("prior.family", "expected erdos_renyi or scale_free");
    if (truth_family != "erdos_renyi" && truth_family != "scale_free")
      throw ConfigError("truth.family", "expected erdos_renyi or scale_free");
    if (edge_prob && !(*edge_prob > 0.0 && *edge_prob < 1.0)) throw ConfigError("prior.edge_prob", "must lie in (0, 1)");
    positive(expected_edges_per_node, "truth.expected_edges_per_node");
    if (min_abs_weight < 0.0) throw ConfigError("truth.min_abs_weight", "must be nonnegative");
    if (!(min_oracle_accuracy >= 0.0 && min_oracle_accuracy <= 1.0))
      throw ConfigError("truth.min_oracle_accuracy", "must lie in [0, 1]");
    if (experiment == ExperimentKind::real_data && data_path.empty())
      throw ConfigError("data.path", "required for real_data experiments");
    if (seeds.empty()) throw ConfigError("seeds", "at least one seed required");
    if (output_dir.empty()) throw ConfigError("output_dir", "must not be empty");
    if (outer_samples < 1) throw ConfigError("query.outer_samples", "must be positive");
    vamsl_config(seeds.front()).validate();
    loop_settings().validate();
    oracle_spec({Adjacency::Zero(d, d)}).validate();
  }

  VamslConfig vamsl_config(std::uint64_t = 0) const {
    VamslConfig c;
    c.num_components = components;
    c.latent_dim = latent_dim;
    c.particles = particles;
    c.model = model;
    c.hidden = hidden;
    c.noise_var = noise_var;
    c.schedules.beta_slope = beta_slope;
    c.schedules.omega_slope = resolved_omega_slope();
    c.schedules.rmsprop.learning_rate = learning_rate;
    c.schedules.total_steps = total_steps;
    c.cavi_rounds = cavi_rounds;
    c.early_round_steps = early_round_steps;
    c.kernel.gamma_z = gamma_z;
    c.kernel.gamma_theta = resolved_gamma_theta();
    if (prior_family == "scale_free")
      c.structure_prior = StructurePriorSpec::scale_free();
    else if (edge_prob)
      c.structure_prior = StructurePriorSpec::erdos_renyi(*edge_prob);
    c.sigma_z = sigma_z;
    c.graph_samples = graph_samples;
    c.z_estimator = z_estimator;
    c.dirichlet_prior = dirichlet_prior;
    c.max_restarts = max_restarts;
    c.elicitation.hyper = {alpha0, beta0};
    c.elicitation.hard_epsilon = epsilon;
    c.workers = workers;
    return c;
  }

  LoopSettings loop_settings() const {
    LoopSettings s;
    s.queries_per_component = queries_per_round;
    s.query_rounds = query_rounds;
    s.strategy = strategy;
    s.bed.outer_samples = outer_samples;
    s.bed.simulator = {alpha_s, beta_s, binary_simulator};
    return s;
  }

  OracleSpec oracle_spec(std::vector<Adjacency> reference) const {
    OracleSpec o;
    o.reference_graphs = std::move(reference);
    o.reliability = reliability;
    o.variance = oracle_variance;
    o.perfect = perfect_oracle;
    return o;
  }

  TruthSpec truth_spec() const {
    TruthSpec t;
    t.d = d;
    t.components = components;
    t.family = truth_family == "scale_free" ? GraphFamily::scale_free : GraphFamily::erdos_renyi;
    t.expected_edges_per_node = expected_edges_per_node;
    t.model = model;
    t.hidden = hidden;
    t.noise_var = noise_var;
    t.min_abs_weight = min_abs_weight;
    return t;
  }
};

namespace detail {

/// Reads one JSON object section, naming the full path in every error and
/// rejecting keys it does not know.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  ~Section() = default;

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    out = as<T>(key);
  }

  template <typename T>
  void get(const std::string& key, std::optional<T>& out) {
    if (!has(key)) {
      if (j_.contains(key)) out.reset();
      return;
    }
    out = as<T>(key);
  }

  Section child(const std::string& key) {
    seen_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, field(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown field");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  template <typename T>
  T as(const std::string& key) const {
    const nlohmann::json& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(field(key), "expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(field(key), "expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned()) return v.get<T>();
        if (v.get<std::int64_t>() < 0) throw ConfigError(field(key), "must be nonnegative");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(field(key), "expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(field(key), "expected a string");
    }
    return v.get<T>();
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {
      {"schema_version", kConfigSchemaVersion},
      {"experiment", to_string(c.experiment)},
      {"dims",
       {{"d", c.d},
        {"latent_dim", c.latent_dim},
        {"components", c.components},
        {"n", c.n},
        {"held_out", c.held_out},
        {"particles", c.particles},
        {"total_steps", c.total_steps},
        {"cavi_rounds", c.cavi_rounds},
        {"early_round_steps", c.early_round_steps}}},
      {"model",
       {{"kind", c.model == ModelKind::linear ? "linear" : "mlp"}, {"hidden", c.hidden}, {"noise_var", c.noise_var}}},
      {"schedules",
       {{"beta_slope", c.beta_slope}, {"omega_slope", opt(c.omega_slope)}, {"learning_rate", c.learning_rate}}},
      {"kernel", {{"gamma_z", c.gamma_z}, {"gamma_theta", opt(c.gamma_theta)}}},
      {"prior",
       {{"family", c.prior_family},
        {"edge_prob", opt(c.edge_prob)},
        {"sigma_z", c.sigma_z},
        {"graph_samples", c.graph_samples},
        {"z_estimator", to_string(c.z_estimator)},
        {"dirichlet_prior", c.dirichlet_prior},
        {"max_restarts", c.max_restarts}}},
      {"elicitation", {{"alpha0", c.alpha0}, {"beta0", c.beta0}, {"epsilon", c.epsilon}}},
      {"oracle", {{"reliability", c.reliability}, {"variance", c.oracle_variance}, {"perfect", c.perfect_oracle}}},
      {"query",
       {{"per_round", c.queries_per_round},
        {"rounds", c.query_rounds},
        {"strategy", to_string(c.strategy)},
        {"outer_samples", c.outer_samples},
        {"alpha_s", c.alpha_s},
        {"beta_s", c.beta_s},
        {"binary", c.binary_simulator}}},
      {"truth",
       {{"expected_edges_per_node", c.expected_edges_per_node},
        {"min_abs_weight", c.min_abs_weight},
        {"family", c.truth_family},
        {"min_oracle_accuracy", c.min_oracle_accuracy}}},
      {"data", {{"path", c.data_path}, {"standardize", c.standardize}}},
      {"seeds", c.seeds},
      {"output_dir", c.output_dir},
      {"workers", c.workers},
  };
}

/// Parses and validates. Missing fields keep their defaults; unknown fields
/// and type mismatches raise ConfigError naming the field.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::Section root(j, "");
  int version = -1;
  root.get("schema_version", version);
  if (version != kConfigSchemaVersion)
    throw ConfigError("schema_version", "expected " + std::to_string(kConfigSchemaVersion));

  std::string experiment = to_string(c.experiment);
  root.get("experiment", experiment);
  if (experiment == "single_component_querying")
    c.experiment = ExperimentKind::single_component_querying;
  else if (experiment == "two_component_mixture")
    c.experiment = ExperimentKind::two_component_mixture;
  else if (experiment == "real_data")
    c.experiment = ExperimentKind::real_data;
  else
    throw ConfigError("experiment", "unknown experiment \"" + experiment + "\"");

  {
    auto s = root.child("dims");
    s.get("d", c.d);
    s.get("latent_dim", c.latent_dim);
    s.get("components", c.components);
    s.get("n", c.n);
    s.get("held_out", c.held_out);
    s.get("particles", c.particles);
    s.get("total_steps", c.total_steps);
    s.get("cavi_rounds", c.cavi_rounds);
    s.get("early_round_steps", c.early_round_steps);
    s.finish();
  }
  {
    auto s = root.child("model");
    std::string kind = c.model == ModelKind::linear ? "linear" : "mlp";
    s.get("kind", kind);
    if (kind == "linear")
      c.model = ModelKind::linear;
    else if (kind == "mlp")
      c.model = ModelKind::mlp;
    else
      throw ConfigError("model.kind", "expected linear or mlp");
    s.get("hidden", c.hidden);
    s.get("noise_var", c.noise_var);
    s.finish();
  }
  {
    auto s = root.child("schedules");
    s.get("beta_slope", c.beta_slope);
    s.get("omega_slope", c.omega_slope);
    s.get("learning_rate", c.learning_rate);
    s.finish();
  }
  {
    auto s = root.child("kernel");
    s.get("gamma_z", c.gamma_z);
    s.get("gamma_theta", c.gamma_theta);
    s.finish();
  }
  {
    auto s = root.child("prior");
    s.get("family", c.prior_family);
    s.get("edge_prob", c.edge_prob);
    s.get("sigma_z", c.sigma_z);
    s.get("graph_samples", c.graph_samples);
    std::string est = to_string(c.z_estimator);
    s.get("z_estimator", est);
    if (est == "relaxed")
      c.z_estimator = ZGradientEstimator::relaxed;
    else if (est == "score_function")
      c.z_estimator = ZGradientEstimator::score_function;
    else
      throw ConfigError("prior.z_estimator", "expected relaxed or score_function");
    s.get("dirichlet_prior", c.dirichlet_prior);
    s.get("max_restarts", c.max_restarts);
    s.finish();
  }
  {
    auto s = root.child("elicitation");
    s.get("alpha0", c.alpha0);
    s.get("beta0", c.beta0);
    s.get("epsilon", c.epsilon);
    s.finish();
  }
  {
    auto s = root.child("oracle");
    s.get("reliability", c.reliability);
    s.get("variance", c.oracle_variance);
    s.get("perfect", c.perfect_oracle);
    s.finish();
  }
  {
    auto s = root.child("query");
    s.get("per_round", c.queries_per_round);
    s.get("rounds", c.query_rounds);
    std::string strategy = to_string(c.strategy);
    s.get("strategy", strategy);
    try {
      c.strategy = parse_query_strategy(strategy);
    } catch (const ConfigError&) {
      throw ConfigError("query.strategy", "expected bed or random");
    }
    s.get("outer_samples", c.outer_samples);
    s.get("alpha_s", c.alpha_s);
    s.get("beta_s", c.beta_s);
    s.get("binary", c.binary_simulator);
    s.finish();
  }
  {
    auto s = root.child("truth");
    s.get("expected_edges_per_node", c.expected_edges_per_node);
    s.get("min_abs_weight", c.min_abs_weight);
    s.get("family", c.truth_family);
    s.get("min_oracle_accuracy", c.min_oracle_accuracy);
    s.finish();
  }
  {
    auto s = root.child("data");
    s.get("path", c.data_path);
    s.get("standardize", c.standardize);
    s.finish();
  }
  if (root.has("seeds")) {
    const nlohmann::json& arr = j.at("seeds");
    if (!arr.is_array()) throw ConfigError("seeds", "expected an array of nonnegative integers");
    c.seeds.clear();
    for (const auto& v : arr) {
      if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
        throw ConfigError("seeds", "expected an array of nonnegative integers");
      c.seeds.push_back(v.get<std::uint64_t>());
    }
  }
  root.get("output_dir", c.output_dir);
  root.get("workers", c.workers);
  root.finish();
  c.validate();
  return c;
}

inline ExperimentConfig config_from_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<document>", std::string("invalid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_string(ss.str());
}

}  // namespace vamsl
