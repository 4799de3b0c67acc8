#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "vamsl/elicitation_loop.hpp"
#include "vamsl/metrics.hpp"
#include "vamsl/synthetic.hpp"

using namespace vamsl;

namespace {

double beta_mode(double a, double b) { return (a - 1.0) / (a + b - 2.0); }

SoftGraph constant_soft(int d, double p) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Constant(d, d, p);
  m.diagonal().setZero();
  return {m};
}

VamslConfig loop_config(int k = 1) {
  VamslConfig cfg;
  cfg.num_components = k;
  cfg.particles = 5;
  cfg.schedules.total_steps = 300;
  cfg.early_round_steps = 10;
  cfg.structure_prior = StructurePriorSpec::erdos_renyi(0.1);
  cfg.kernel.gamma_theta = 1.0;
  return cfg;
}

struct Toy {
  GroundTruthMixture truth;
  Dataset data;
};

Toy toy(int d, int k, std::uint64_t seed) {
  TruthSpec ts;
  ts.d = d;
  ts.components = k;
  ts.expected_edges_per_node = 1.0;
  ts.min_abs_weight = 0.5;
  Toy t{sample_ground_truth(ts, seed), {}};
  Rng rng(seed);
  t.data = generate_observations(t.truth, 60, rng);
  return t;
}

}  // namespace

TEST(ImaginaryObservations, WorkedExamples) {
  const ExpertPriorHyper h{10.0, 10.0};
  EXPECT_EQ(map_response_to_observations(0.9, h), (ImaginaryObservations{72, 72}));
  EXPECT_EQ(map_response_to_observations(0.25, h), (ImaginaryObservations{18, 0}));
  EXPECT_EQ(map_response_to_observations(0.5, h), (ImaginaryObservations{0, 0}));
  EXPECT_EQ(map_response_to_observations(0.7, h), (ImaginaryObservations{12, 12}));
  EXPECT_NEAR(beta_mode(10 + 72, 10), 0.9, 1e-12);
  EXPECT_NEAR(beta_mode(10, 10 + 18), 0.25, 1e-12);
}

TEST(ImaginaryObservations, RoundTripWithinFlooringSlack) {
  for (double a0 : {2.0, 10.0, 50.0}) {
    const ExpertPriorHyper h{a0, a0};
    for (int g = 1; g <= 19; ++g) {
      const double psi = 0.05 * g;
      if (std::abs(psi - 0.5) < 1e-12) continue;
      const ImaginaryObservations o = map_response_to_observations(psi, h);
      EXPECT_TRUE(o.k == 0 || o.k == o.n);
      const double denom = a0 + a0 + o.n - 2.0;
      EXPECT_LE(std::abs(beta_mode(a0 + o.k, a0 + o.n - o.k) - psi), 1.0 / denom + 1e-12)
          << "alpha0 " << a0 << " psi " << psi;
    }
  }
}

TEST(ImaginaryObservations, MonotoneAwayFromPriorMode) {
  const ExpertPriorHyper h{10.0, 10.0};
  int prev = 0;
  for (int g = 11; g <= 19; ++g) {
    const int n = map_response_to_observations(0.05 * g, h).n;
    EXPECT_GE(n, prev);
    prev = n;
  }
  prev = 0;
  for (int g = 9; g >= 1; --g) {
    const int n = map_response_to_observations(0.05 * g, h).n;
    EXPECT_GE(n, prev);
    prev = n;
  }
}

TEST(ImaginaryObservations, StrongerPriorNeedsMoreTrials) {
  for (double psi : {0.1, 0.3, 0.7, 0.95}) {
    int prev = -1;
    for (double a0 : {2.0, 10.0, 50.0}) {
      const int n = map_response_to_observations(psi, ExpertPriorHyper{a0, a0}).n;
      EXPECT_GT(n, prev) << psi;
      prev = n;
    }
  }
}

TEST(ImaginaryObservations, InvalidInputs) {
  EXPECT_THROW(map_response_to_observations(1.0, ExpertPriorHyper{}), ContractError);
  EXPECT_THROW(map_response_to_observations(0.5, ExpertPriorHyper{1.0, 10.0}), ConfigError);
}

TEST(ElicitationLikelihood, ClosedFormValues) {
  const HardConstraintMask mask(3);
  const ElicitationMatrix present{{{0, 1}, 0.9, {3, 3}}};
  EXPECT_NEAR(elicitation_log_likelihood(present, constant_soft(3, 0.5), mask).value, std::log(1.0 / 8.0), 1e-12);
  const ElicitationMatrix absent{{{1, 2}, 0.1, {5, 0}}};
  EXPECT_NEAR(elicitation_log_likelihood(absent, constant_soft(3, 0.2), mask).value, 5.0 * std::log(0.8), 1e-12);
  EXPECT_EQ(elicitation_log_likelihood(ElicitationMatrix{}, constant_soft(3, 0.3), mask).value, 0.0);
}

TEST(ElicitationLikelihood, GradientMatchesFiniteDifferences) {
  const HardConstraintMask mask(3);
  const ElicitationMatrix m{{{0, 1}, 0.9, {72, 72}}, {{2, 1}, 0.25, {18, 0}}};
  Eigen::MatrixXd p(3, 3);
  p << 0, 0.3, 0.6, 0.2, 0, 0.9, 0.5, 0.4, 0;
  const Eigen::MatrixXd g = elicitation_log_likelihood(m, SoftGraph{p}, mask).grad_soft;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      Eigen::MatrixXd up = p, down = p;
      up(i, j) += 1e-7;
      down(i, j) -= 1e-7;
      const double num = (elicitation_log_likelihood(m, SoftGraph{up}, mask).value -
                          elicitation_log_likelihood(m, SoftGraph{down}, mask).value) / 2e-7;
      EXPECT_NEAR(g(i, j), num, 1e-4 * std::max(1.0, std::abs(num)));
    }
}

TEST(ElicitationLikelihood, HardMaskedEntryIsContractError) {
  HardConstraintMask mask(3);
  mask.set(0, 1, EdgeConstraint::required);
  const ElicitationMatrix m{{{0, 1}, 0.9, {3, 3}}};
  EXPECT_THROW(elicitation_log_likelihood(m, constant_soft(3, 0.5), mask), ContractError);
}

TEST(ElicitationMatrices, KeepProbabilityIsResponseConfidence) {
  Rng rng(1);
  ElicitationRecord strong;
  strong.edge = {0, 1};
  strong.psi_star = 1.0 - 1e-3;
  strong.imagined = map_response_to_observations(strong.psi_star, ExpertPriorHyper{});
  ElicitationRecord even = strong;
  even.edge = {1, 0};
  even.psi_star = 0.5;
  even.imagined = ImaginaryObservations{0, 0};
  ElicitationRecord mid = strong;
  mid.edge = {0, 2};
  mid.psi_star = 0.3;
  mid.imagined = map_response_to_observations(0.3, ExpertPriorHyper{});

  const auto ms = sample_elicitation_matrices({strong, even, mid}, 10000, rng);
  int kept_strong = 0, kept_mid = 0;
  for (const auto& m : ms) {
    ASSERT_EQ(m.size(), 3u);
    kept_strong += m[0].psi == strong.psi_star;
    EXPECT_EQ(m[1].psi, 0.5);
    kept_mid += m[2].psi == 0.3;
    if (m[2].psi == 0.5) {
      EXPECT_EQ(m[2].obs.n, 0);
    }
  }
  EXPECT_NEAR(kept_strong / 1e4, 1.0 - 1e-3, 0.02);
  EXPECT_NEAR(kept_mid / 1e4, 0.7, 0.02);

  for (const auto& m : sample_elicitation_matrices({}, 4, rng)) EXPECT_TRUE(m.empty());
}

TEST(RegisterResponse, HardAndSoftClassification) {
  ElicitationSettings s;
  ComponentBeliefs b(3);
  EXPECT_EQ(register_response(1.0, {0, 1}, 0, s, b).kind, ResponseKind::hard_present);
  EXPECT_EQ(b.mask.at(0, 1), EdgeConstraint::required);
  EXPECT_EQ(register_response(0.0005, {1, 2}, 0, s, b).kind, ResponseKind::hard_absent);
  EXPECT_EQ(b.mask.at(1, 2), EdgeConstraint::forbidden);
  const ElicitationRecord soft = register_response(0.7, {2, 0}, 0, s, b);
  EXPECT_EQ(soft.kind, ResponseKind::soft);
  EXPECT_EQ(*soft.imagined, (ImaginaryObservations{12, 12}));
  const ElicitationRecord inert = register_response(0.5, {0, 2}, 0, s, b);
  EXPECT_EQ(*inert.imagined, (ImaginaryObservations{0, 0}));
  EXPECT_FALSE(register_response(0.9, {1, 0}, 0, s, b).is_hard());
  EXPECT_EQ(b.soft_records().size(), 3u);
}

TEST(RegisterResponse, LatestAnswerReplacesEarlierOne) {
  ElicitationSettings s;
  ComponentBeliefs b(3);
  register_response(1.0, {0, 1}, 0, s, b);
  register_response(0.3, {0, 1}, 0, s, b);
  EXPECT_EQ(b.records.size(), 1u);
  EXPECT_EQ(b.replaced, 1);
  EXPECT_EQ(b.mask.at(0, 1), EdgeConstraint::free);
  EXPECT_EQ(b.records[0].psi_star, 0.3);
}

TEST(RegisterResponse, CycleClosingRequiredEdgeBecomesSoft) {
  ElicitationSettings s;
  ComponentBeliefs b(3);
  register_response(1.0, {0, 1}, 0, s, b);
  register_response(1.0, {1, 2}, 0, s, b);
  const ElicitationRecord r = register_response(1.0, {2, 0}, 0, s, b);
  EXPECT_EQ(r.kind, ResponseKind::soft);
  EXPECT_DOUBLE_EQ(r.psi_star, 1.0 - s.hard_epsilon);
  EXPECT_EQ(b.downgraded, 1);
  EXPECT_TRUE(b.mask.required_edges_acyclic());
  EXPECT_EQ(b.mask.at(2, 0), EdgeConstraint::free);
}

TEST(RegisterResponse, RejectsEdgesOutsideDesignSpace) {
  ComponentBeliefs b(3);
  EXPECT_THROW(register_response(0.7, {1, 1}, 0, ElicitationSettings{}, b), ContractError);
  EXPECT_THROW(register_response(0.7, {0, 3}, 0, ElicitationSettings{}, b), ContractError);
  EXPECT_THROW(register_response(1.5, {0, 1}, 0, ElicitationSettings{}, b), ContractError);
}

TEST(PriorPull, SingleRecordPullsSoftEdgeUp) {
  const int d = 3;
  VamslConfig cfg = loop_config();
  ComponentBeliefs beliefs(d);
  register_response(0.9, {0, 1}, 0, cfg.elicitation, beliefs);
  Rng rng(3);
  const auto matrices = sample_elicitation_matrices(beliefs.soft_records(), 10, rng);
  cfg.particles = 10;

  ComponentTarget target;
  target.num_vars = d;
  target.latent_dim = d;
  target.config = &cfg;
  target.mask = &beliefs.mask;
  target.matrices = &matrices;
  target.structure_prior = *cfg.structure_prior;
  target.rows = Eigen::MatrixXd(0, d);
  target.weights = Eigen::VectorXd(0);
  target.stream_seed = 17;
  ParticleSet set = initialize_particles(d, cfg, rng);
  const GradientOracle oracle = make_gradient_oracle(target);
  for (int s = 0; s < 500; ++s) set = svgd_step(std::move(set), oracle, cfg.schedules, cfg.kernel);
  double mean = 0.0;
  const double omega = cfg.schedules.omega(set.step);
  for (const auto& p : set.particles) mean += soft_graph(embedding_of(p, d, d), omega, beliefs.mask).probs(0, 1);
  EXPECT_GT(mean / 10.0, 0.7);
}

TEST(ElicitationLoop, ZeroBudgetEqualsPlainInference) {
  const Toy t = toy(3, 1, 21);
  const VamslConfig cfg = loop_config();
  LoopSettings settings;
  settings.query_rounds = 0;
  const ElicitationResult r = run_elicitation_loop(t.data, cfg, settings, {}, 8);
  EXPECT_EQ(state_hash(r.state), state_hash(run_cavi(t.data, cfg, {}, 8)));
  EXPECT_TRUE(r.records.empty());
}

TEST(ElicitationLoop, BedNeverRepeatsAQueriedEdge) {
  const Toy t = toy(4, 1, 22);
  const VamslConfig cfg = loop_config();
  LoopSettings settings;
  settings.queries_per_component = 2;
  settings.query_rounds = 3;  // 6 = d(d-1)/2 queries
  settings.bed.outer_samples = 50;
  std::set<std::pair<int, int>> seen;
  int asked = 0;
  const Responder soft = [&](int, Edge e) -> std::optional<double> {
    EXPECT_TRUE(seen.insert({e.from, e.to}).second) << e.from << "->" << e.to;
    ++asked;
    return 0.6;
  };
  const ElicitationResult r = run_elicitation_loop(t.data, cfg, settings, soft, 4);
  EXPECT_EQ(asked, 6);
  EXPECT_EQ(r.rounds_completed, 3);
  EXPECT_FALSE(r.aborted);
}

TEST(ElicitationLoop, PerfectOracleWithFullBudgetPinsTruth) {
  const Toy t = toy(3, 1, 23);
  const VamslConfig cfg = loop_config();
  LoopSettings settings;
  settings.queries_per_component = 6;
  settings.query_rounds = 1;
  settings.bed.outer_samples = 20;
  const Adjacency& truth = t.truth.components[0].graph;
  const Responder perfect = [&](int, Edge e) -> std::optional<double> { return truth(e.from, e.to) ? 1.0 : 0.0; };
  const ElicitationResult r = run_elicitation_loop(t.data, cfg, settings, perfect, 5);
  EXPECT_TRUE(r.beliefs[0].mask.fully_pinned());
  EXPECT_EQ(eshd(component_graphs(r.state, 0, cfg), truth), 0.0);
}

TEST(ElicitationLoop, ResponderStopEndsLoopWithPartialRecords) {
  const Toy t = toy(3, 1, 24);
  LoopSettings settings;
  settings.queries_per_component = 2;
  settings.query_rounds = 2;
  settings.strategy = QueryStrategy::random;
  int calls = 0;
  const Responder stop_after_one = [&](int, Edge) -> std::optional<double> {
    return ++calls == 1 ? std::optional<double>(0.8) : std::nullopt;
  };
  const ElicitationResult r = run_elicitation_loop(t.data, loop_config(), settings, stop_after_one, 6);
  EXPECT_TRUE(r.aborted);
  EXPECT_EQ(r.records.size(), 1u);
  EXPECT_EQ(r.rounds_completed, 0);
}

TEST(ElicitationLoop, ComponentsGetTheirOwnQueries) {
  const Toy t = toy(3, 2, 25);
  LoopSettings settings;
  settings.queries_per_component = 2;
  settings.query_rounds = 1;
  settings.bed.outer_samples = 20;
  ElicitationDriver driver(t.data, loop_config(2), settings, 7);
  driver.infer();
  ASSERT_EQ(driver.phase(), LoopPhase::awaiting_responses);
  int per[2] = {0, 0};
  for (const auto& q : driver.pending()) ++per[q.component];
  EXPECT_EQ(per[0], 2);
  EXPECT_EQ(per[1], 2);
  EXPECT_THROW(driver.answer(0, {0, 0}, 0.5), ContractError);
  const QueryCandidate q = driver.pending().front();
  driver.answer(q.component, q.edge, 0.9);
  EXPECT_EQ(driver.beliefs()[static_cast<std::size_t>(q.component)].records.size(), 1u);
  EXPECT_TRUE(driver.beliefs()[static_cast<std::size_t>(1 - q.component)].records.empty());
  driver.close_round();
  driver.infer();
  EXPECT_EQ(driver.phase(), LoopPhase::done);
}
