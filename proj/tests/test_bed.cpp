#include <gtest/gtest.h>

#include <cmath>

#include "vamsl/bed.hpp"

using namespace vamsl;

namespace {

// Mutual information between psi in {0, 1} and a uniformly chosen particle.
double exact_binary_eig(const std::vector<double>& g) {
  const double n = static_cast<double>(g.size());
  double marginal = 0.0;
  for (double p : g) marginal += p / n;
  double out = 0.0;
  for (double p : g) {
    for (int psi = 0; psi < 2; ++psi) {
      const double like = psi ? p : 1.0 - p;
      const double mlike = psi ? marginal : 1.0 - marginal;
      if (like > 0.0) out += like * std::log(like / mlike) / n;
    }
  }
  return out;
}

std::vector<Eigen::MatrixXd> graphs_with_edge(int d, const std::vector<double>& split, double agreed) {
  std::vector<Eigen::MatrixXd> out;
  for (double s : split) {
    Eigen::MatrixXd g = Eigen::MatrixXd::Constant(d, d, agreed);
    g.diagonal().setZero();
    g(2, 1) = s;
    out.push_back(g);
  }
  return out;
}

}  // namespace

TEST(Simulator, BetaShapesFromEdgeProbability) {
  const SimulatorSpec spec;
  EXPECT_DOUBLE_EQ(spec.shape_a(0.5), 6.0);
  EXPECT_DOUBLE_EQ(spec.shape_b(0.5), 6.0);
  EXPECT_DOUBLE_EQ((spec.shape_a(0.5) - 1) / (spec.shape_a(0.5) + spec.shape_b(0.5) - 2), 0.5);
  EXPECT_DOUBLE_EQ(spec.shape_a(0.0), 1.0);
  EXPECT_DOUBLE_EQ(spec.shape_b(0.0), 11.0);
  double prev = simulator_log_density(0.01, 0.0, spec);
  for (int i = 2; i < 100; ++i) {
    const double cur = simulator_log_density(0.01 * i, 0.0, spec);
    EXPECT_LT(cur, prev);
    prev = cur;
  }
  // Beta(6, 6) density at 0.5
  EXPECT_NEAR(simulator_log_density(0.5, 0.5, spec), std::log(std::tgamma(12.0) / std::pow(std::tgamma(6.0), 2) / 1024.0),
              1e-10);
}

TEST(Simulator, SampleMeanMatchesBetaMean) {
  Rng rng(1);
  const SimulatorSpec spec;
  double sum = 0.0;
  for (int s = 0; s < 20000; ++s) sum += simulate_response(0.8, spec, rng);
  EXPECT_NEAR(sum / 20000.0, 9.0 / 12.0, 0.01);
}

TEST(Simulator, BinaryModeIsBernoulli) {
  Rng rng(2);
  SimulatorSpec spec;
  spec.binary_mode = true;
  for (int s = 0; s < 100; ++s) EXPECT_EQ(simulate_response(1.0, spec, rng), 1.0);
  EXPECT_NEAR(simulator_log_density(1.0, 0.3, spec), std::log(0.3), 1e-15);
  EXPECT_THROW(simulator_log_density(0.5, 0.3, spec), ContractError);
}

TEST(Eig, IdenticalParticlesGiveExactlyZero) {
  Rng rng(3);
  const std::vector<double> same(8, 0.37);
  EXPECT_EQ(eig_nmc(same, SimulatorSpec{}, 100, rng).value, 0.0);
  SimulatorSpec binary;
  binary.binary_mode = true;
  EXPECT_EQ(eig_nmc(same, binary, 100, rng).value, 0.0);
  EXPECT_EQ(eig_rao_blackwell(same), 0.0);
}

TEST(Eig, RaoBlackwellOneBit) {
  EXPECT_NEAR(eig_rao_blackwell({0.0, 1.0}), std::log(2.0), 1e-15);
  EXPECT_NEAR(eig_rao_blackwell({0.05, 0.95}), exact_binary_eig({0.05, 0.95}), 1e-14);
}

TEST(Eig, RaoBlackwellMatchesIndependentEnumeration) {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> g(2 + t % 7);
    for (double& p : g) p = rng.uniform();
    EXPECT_NEAR(eig_rao_blackwell(g), exact_binary_eig(g), 1e-12);
    EXPECT_GE(eig_rao_blackwell(g), 0.0);
  }
}

TEST(Eig, NestedMonteCarloAgreesWithRaoBlackwell) {
  SimulatorSpec binary;
  binary.binary_mode = true;
  Rng rng(5);
  {
    const EigEstimate e = eig_nmc({0.05, 0.95}, binary, 2000, rng);
    EXPECT_LE(std::abs(e.value - eig_rao_blackwell({0.05, 0.95})), 3.0 * e.standard_error);
  }
  int within = 0;
  for (int t = 0; t < 20; ++t) {
    std::vector<double> g(2 + t % 5);
    for (double& p : g) p = rng.uniform();
    const EigEstimate e = eig_nmc(g, binary, 2000, rng);
    within += std::abs(e.value - eig_rao_blackwell(g)) <= 3.0 * e.standard_error;
  }
  EXPECT_GE(within, 19);
}

TEST(Eig, NestedMonteCarloNonnegativeWithinError) {
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> g(3 + t % 6);
    for (double& p : g) p = rng.uniform();
    const EigEstimate e = eig_nmc(g, SimulatorSpec{}, 2000, rng);
    EXPECT_GE(e.value, -3.0 * e.standard_error);
  }
}

TEST(Eig, StandardErrorShrinksAsInverseRootSamples) {
  std::vector<double> g{0.1, 0.3, 0.5, 0.7, 0.9, 0.2};
  std::vector<double> xs, ys;
  for (int s : {100, 1000, 10000}) {
    Rng rng(7);
    const EigEstimate e = eig_nmc(g, SimulatorSpec{}, s, rng);
    xs.push_back(std::log(static_cast<double>(s)));
    ys.push_back(std::log(e.standard_error));
  }
  const double mx = (xs[0] + xs[1] + xs[2]) / 3, my = (ys[0] + ys[1] + ys[2]) / 3;
  double num = 0, den = 0;
  for (int i = 0; i < 3; ++i) {
    num += (xs[i] - mx) * (ys[i] - my);
    den += (xs[i] - mx) * (xs[i] - mx);
  }
  const double slope = num / den;
  EXPECT_GE(slope, -0.6);
  EXPECT_LE(slope, -0.4);
}

TEST(Selection, DegenerateParticlesUseRowMajorOrder) {
  ComponentBeliefs b(3);
  const auto ranked = rank_edges(0, design_space(b), graphs_with_edge(3, {0.4, 0.4, 0.4}, 0.4), BedSettings{}, 1);
  bool under = false;
  const auto top = take_top(ranked, 3, under);
  ASSERT_EQ(top.size(), 3u);
  EXPECT_EQ(top[0].edge, (Edge{0, 1}));
  EXPECT_EQ(top[1].edge, (Edge{0, 2}));
  EXPECT_EQ(top[2].edge, (Edge{1, 0}));
  EXPECT_FALSE(under);
  for (const auto& q : ranked) EXPECT_EQ(q.eig, 0.0);
}

TEST(Selection, SplitBeliefEdgeRankedFirst) {
  ComponentBeliefs b(4);
  for (bool binary : {true, false}) {
    BedSettings settings;
    settings.simulator.binary_mode = binary;
    const auto ranked = rank_edges(0, design_space(b), graphs_with_edge(4, {0.02, 0.98, 0.05, 0.95}, 0.3), settings, 9);
    EXPECT_EQ(ranked.front().edge, (Edge{2, 1}));
    EXPECT_EQ(ranked.front().rank, 1);
  }
}

TEST(Selection, UnderRunReturnsRemainder) {
  ComponentBeliefs b(3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (i != j && !(i == 1 && j == 2)) b.mask.set(i, j, EdgeConstraint::forbidden);
  bool under = false;
  const auto top = take_top(rank_edges(0, design_space(b), graphs_with_edge(3, {0.5}, 0.5), BedSettings{}, 1), 4, under);
  EXPECT_TRUE(under);
  ASSERT_EQ(top.size(), 1u);
  EXPECT_EQ(top[0].edge, (Edge{1, 2}));
  Rng rng(1);
  bool under_random = false;
  EXPECT_EQ(random_queries(0, design_space(b), 3, rng, under_random).size(), 1u);
  EXPECT_TRUE(under_random);
}

TEST(DesignSpace, ExcludesMaskedQueriedAndUserExcludedEdges) {
  ComponentBeliefs b(3);
  b.mask.set(0, 1, EdgeConstraint::required);
  b.queried.push_back({1, 0});
  const auto space = design_space(b, {{2, 1}});
  EXPECT_EQ(space, (std::vector<Edge>{{0, 2}, {1, 2}, {2, 0}}));
}

TEST(Selection, RankingIsDeterministicAcrossWorkers) {
  ComponentBeliefs b(4);
  Rng rng(10);
  std::vector<Eigen::MatrixXd> graphs;
  for (int p = 0; p < 6; ++p) {
    Eigen::MatrixXd g(4, 4);
    for (int i = 0; i < 16; ++i) g.data()[i] = rng.uniform();
    graphs.push_back(g);
  }
  const auto a = rank_edges(1, design_space(b), graphs, BedSettings{}, 77, 1);
  const auto c = rank_edges(1, design_space(b), graphs, BedSettings{}, 77, 4);
  ASSERT_EQ(a.size(), c.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].edge, c[i].edge);
    EXPECT_EQ(a[i].eig, c[i].eig);
  }
  const nlohmann::json j = to_json(a.front());
  EXPECT_EQ(j["component"], 1);
  EXPECT_EQ(j["rank"], 1);
  EXPECT_EQ(j["edge"].size(), 2u);
}
