#include <gtest/gtest.h>

#include <cmath>

#include "vamsl/rng.hpp"
#include "vamsl/svgd.hpp"

using namespace vamsl;

namespace {

SteinParticle random_particle(int nz, int nt, Rng& rng, double scale = 1.0) {
  SteinParticle p{Eigen::VectorXd(nz), Eigen::VectorXd(nt)};
  for (int i = 0; i < nz; ++i) p.z[i] = scale * rng.normal();
  for (int i = 0; i < nt; ++i) p.theta[i] = scale * rng.normal();
  return p;
}

// grad log N(0, I) on both blocks
SteinParticle standard_normal_score(const SteinParticle& p, std::size_t, long) { return {-p.z, -p.theta}; }

}  // namespace

TEST(Kernel, IdenticalParticlesGiveTwo) {
  Rng rng(1);
  const SteinParticle a = random_particle(4, 3, rng);
  const KernelValue k = additive_se_kernel(a, a, KernelSpec{5.0, 500.0});
  EXPECT_DOUBLE_EQ(k.value, 2.0);
  EXPECT_EQ(k.grad_z.norm() + k.grad_theta.norm(), 0.0);
}

TEST(Kernel, UnitScaledDistancesGiveTwoOverE) {
  SteinParticle a{Eigen::Vector2d(0, 0), Eigen::Vector2d(0, 0)};
  SteinParticle b{Eigen::Vector2d(std::sqrt(5.0), 0), Eigen::Vector2d(0, std::sqrt(500.0))};
  EXPECT_NEAR(additive_se_kernel(a, b, KernelSpec{5.0, 500.0}).value, 2.0 / std::exp(1.0), 1e-14);
}

TEST(Kernel, SymmetricAndPositive) {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    const SteinParticle a = random_particle(3, 5, rng, 3.0), b = random_particle(3, 5, rng, 3.0);
    const KernelSpec spec{0.5 + rng.uniform(), 0.5 + rng.uniform()};
    const double ab = additive_se_kernel(a, b, spec).value;
    EXPECT_EQ(ab, additive_se_kernel(b, a, spec).value);
    EXPECT_GE(ab, 0.0);
  }
}

TEST(Kernel, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  const double h = 1e-6;
  for (int t = 0; t < 20; ++t) {
    const SteinParticle a = random_particle(3, 4, rng), b = random_particle(3, 4, rng);
    const KernelSpec spec{2.0 + rng.uniform(), 3.0 + rng.uniform()};
    const KernelValue k = additive_se_kernel(a, b, spec);
    for (int i = 0; i < 3; ++i) {
      SteinParticle up = a, down = a;
      up.z[i] += h;
      down.z[i] -= h;
      const double num = (additive_se_kernel(up, b, spec).value - additive_se_kernel(down, b, spec).value) / (2 * h);
      EXPECT_NEAR(k.grad_z[i], num, 1e-6);
    }
    for (int i = 0; i < 4; ++i) {
      SteinParticle up = a, down = a;
      up.theta[i] += h;
      down.theta[i] -= h;
      const double num = (additive_se_kernel(up, b, spec).value - additive_se_kernel(down, b, spec).value) / (2 * h);
      EXPECT_NEAR(k.grad_theta[i], num, 1e-6);
    }
  }
}

TEST(Kernel, RejectsNonPositiveLengthScale) {
  const SteinParticle a{Eigen::VectorXd::Zero(1), Eigen::VectorXd::Zero(1)};
  EXPECT_THROW(additive_se_kernel(a, a, KernelSpec{0.0, 1.0}), ContractError);
}

TEST(SvgdStep, SingleParticleIsAdaptedGradientAscent) {
  Rng rng(4);
  ParticleSet set = ParticleSet::from({random_particle(4, 3, rng)});
  Schedules sched;
  SteinParticle x = set.particles[0];
  AdaptationState ada = set.adaptation[0];
  for (int step = 0; step < 25; ++step) {
    const SteinParticle g = standard_normal_score(x, 0, step + 1);
    // kernel weight of a particle with itself is 2 and its gradient is 0
    rmsprop_ascent(x.z, ada.z_sq, Eigen::VectorXd(2.0 * g.z), sched.rmsprop);
    rmsprop_ascent(x.theta, ada.theta_sq, Eigen::VectorXd(2.0 * g.theta), sched.rmsprop);
    set = svgd_step(std::move(set), standard_normal_score, sched, KernelSpec{});
    ASSERT_EQ(set.particles[0].z, x.z);
    ASSERT_EQ(set.particles[0].theta, x.theta);
  }
  EXPECT_EQ(set.step, 25);
}

TEST(SvgdStep, RecoversTwoDimensionalStandardNormal) {
  Rng rng(5);
  std::vector<SteinParticle> init;
  for (int p = 0; p < 30; ++p) {
    SteinParticle q = random_particle(2, 0, rng, 0.5);
    q.z.array() += 1.0;
    init.push_back(q);
  }
  ParticleSet set = ParticleSet::from(init);
  Schedules sched;
  sched.rmsprop.learning_rate = 0.05;
  const KernelSpec kernel{1.0, 1.0};
  for (int s = 0; s < 1000; ++s) set = svgd_step(std::move(set), standard_normal_score, sched, kernel);
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  for (const auto& p : set.particles) mean += p.z;
  mean /= 30.0;
  Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
  for (const auto& p : set.particles) cov += (p.z - mean) * (p.z - mean).transpose();
  cov /= 29.0;
  EXPECT_LT(mean.norm(), 0.15);
  EXPECT_LT((cov - Eigen::Matrix2d::Identity()).norm(), 0.2) << cov;
}

TEST(SvgdStep, IdenticalParticlesStayTied) {
  Rng rng(6);
  const SteinParticle a = random_particle(3, 2, rng), b = random_particle(3, 2, rng);
  ParticleSet set = ParticleSet::from({a, b, a});
  for (int s = 0; s < 200; ++s) set = svgd_step(std::move(set), standard_normal_score, Schedules{}, KernelSpec{});
  EXPECT_TRUE(set.particles[0] == set.particles[2]);
  EXPECT_FALSE(set.particles[0] == set.particles[1]);
}

TEST(SvgdStep, WorkerCountDoesNotChangeResult) {
  Rng rng(7);
  std::vector<SteinParticle> init;
  for (int p = 0; p < 8; ++p) init.push_back(random_particle(3, 2, rng));
  ParticleSet one = ParticleSet::from(init), many = ParticleSet::from(init);
  for (int s = 0; s < 20; ++s) {
    one = svgd_step(std::move(one), standard_normal_score, Schedules{}, KernelSpec{}, 1);
    many = svgd_step(std::move(many), standard_normal_score, Schedules{}, KernelSpec{}, 4);
  }
  for (std::size_t p = 0; p < 8; ++p) EXPECT_TRUE(one.particles[p] == many.particles[p]);
}

TEST(SvgdStep, NonFiniteGradientNamesParticle) {
  Rng rng(8);
  ParticleSet set = ParticleSet::from({random_particle(2, 1, rng), random_particle(2, 1, rng)});
  const GradientOracle bad = [](const SteinParticle& p, std::size_t i, long) {
    SteinParticle g{-p.z, -p.theta};
    if (i == 1) g.theta[0] = std::nan("");
    return g;
  };
  try {
    svgd_step(std::move(set), bad, Schedules{}, KernelSpec{});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("particle 1"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("theta"), std::string::npos);
  }
}

TEST(Schedules, LinearAndNondecreasing) {
  const Schedules s;
  EXPECT_DOUBLE_EQ(s.beta(10), 10.0);
  EXPECT_DOUBLE_EQ(s.omega(10), 2.0);
  for (long t = 1; t < 100; ++t) {
    EXPECT_LE(s.beta(t), s.beta(t + 1));
    EXPECT_LE(s.omega(t), s.omega(t + 1));
  }
}
