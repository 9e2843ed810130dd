#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "pbfqe/mdp.hpp"

using namespace pbfqe;

namespace {

TabularMdp one_state(double r) {
  Eigen::MatrixXd p = Eigen::MatrixXd::Ones(2, 1);
  Eigen::MatrixXd rew(1, 2);
  rew << r, 0.0;
  return TabularMdp(1, 2, {p}, {rew}, TabularMdp::point_mass(1, 0), {{0, 1}});
}

// Two states that swap deterministically under action 0 and stay under action 1.
TabularMdp deterministic_chain() {
  Eigen::MatrixXd p(4, 2);
  p << 0, 1,  // s0 a0 -> s1
      1, 0,   // s0 a1 -> s0
      1, 0,   // s1 a0 -> s0
      0, 1;   // s1 a1 -> s1
  Eigen::MatrixXd r(2, 2);
  r << 0.2, 0.0, 0.7, 0.4;
  return TabularMdp(2, 2, {p, p, p}, {r, r, r}, TabularMdp::point_mass(2, 0), {{0, 1}, {0, 1}, {0, 1}});
}

}  // namespace

TEST(TabularMdp, RejectsRowsOffTheSimplex) {
  Eigen::MatrixXd p(2, 1);
  p << 1.0, 0.9;
  Eigen::MatrixXd r = Eigen::MatrixXd::Zero(1, 2);
  EXPECT_THROW(TabularMdp(1, 2, {p}, {r}, TabularMdp::point_mass(1, 0), {{0, 0}}), InvariantError);
}

TEST(TabularMdp, RejectsRewardOutsideUnitInterval) {
  Eigen::MatrixXd p = Eigen::MatrixXd::Ones(2, 1);
  Eigen::MatrixXd r(1, 2);
  r << 1.5, 0.0;
  EXPECT_THROW(TabularMdp(1, 2, {p}, {r}, TabularMdp::point_mass(1, 0), {{0, 1}}), InvariantError);
}

TEST(TabularMdp, RejectsNonzeroAnchor) {
  Eigen::MatrixXd p = Eigen::MatrixXd::Ones(2, 1);
  Eigen::MatrixXd r(1, 2);
  r << 0.5, 0.1;
  EXPECT_THROW(TabularMdp(1, 2, {p}, {r}, TabularMdp::point_mass(1, 0), {{0, 1}}), InvariantError);
}

TEST(TabularMdp, StepOutsideHorizonNamesTheStep) {
  const auto m = one_state(0.5);
  try {
    m.rewards(2);
    FAIL();
  } catch (const RangeError& e) {
    EXPECT_NE(std::string(e.what()).find("h=2"), std::string::npos);
  }
}

TEST(TabularMdp, JsonRoundTripIsExact) {
  const auto m = random_tabular_mdp({}, 17);
  const auto back = TabularMdp::from_json(Json::parse(to_json_string(m.to_json())));
  for (int h = 1; h <= m.horizon(); ++h) {
    EXPECT_EQ(m.transitions(h), back.transitions(h));
    EXPECT_EQ(m.rewards(h), back.rewards(h));
    EXPECT_EQ(m.anchor(h).state, back.anchor(h).state);
  }
  EXPECT_EQ(m.initial(), back.initial());
}

TEST(Policy, CheckPolicyRejectsWrongShape) {
  const auto m = random_tabular_mdp({}, 1);
  EXPECT_THROW(m.check_policy(Policy::uniform(2, 4, 2)), DimensionError);
  EXPECT_THROW(m.check_policy(Policy::uniform(3, 4, 3)), DimensionError);
}

TEST(ExactPolicyValue, ZeroRewardGivesZero) {
  auto m = random_tabular_mdp({}, 3);
  std::vector<Eigen::MatrixXd> zero(3, Eigen::MatrixXd::Zero(4, 2));
  m = m.with_rewards(zero);
  EXPECT_EQ(exact_policy_value(m, Policy::random_softmax(3, 4, 2, 1.0, 9)), 0.0);
  for (const auto& q : exact_q_function(m, Policy::uniform(3, 4, 2))) EXPECT_TRUE((q.array() == 0.0).all());
}

TEST(ExactPolicyValue, HorizonOneSingleStateEqualsTheReward) {
  const auto m = one_state(0.5);
  const auto pi = Policy::deterministic(2, {{0}});
  EXPECT_DOUBLE_EQ(exact_policy_value(m, pi), 0.5);
}

TEST(ExactPolicyValue, MatchesLoopOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RandomMdpOptions opt;
    opt.fixed_initial_state = seed % 2 == 0;
    const auto m = random_tabular_mdp(opt, seed);
    const auto pi = Policy::random_softmax(3, 4, 2, 0.7, seed + 100);
    EXPECT_NEAR(exact_policy_value(m, pi), oracle::value_by_loops(m, pi), 1e-12);
  }
}

TEST(ExactPolicyValue, AgreesWithMillionRollouts) {
  const auto m = random_tabular_mdp({}, 2024);
  const auto pi = Policy::uniform(3, 4, 2);
  Rng rng = make_rng(5);
  const auto mc = monte_carlo_value(m, pi, 1'000'000, rng);
  EXPECT_LE(std::abs(mc.mean - exact_policy_value(m, pi)), 3.0 * mc.standard_error)
      << "mc " << mc.mean << " se " << mc.standard_error;
}

TEST(ExactQFunction, TerminalStepIsTheReward) {
  const auto m = random_tabular_mdp({}, 8);
  const auto q = exact_q_function(m, Policy::uniform(3, 4, 2));
  EXPECT_EQ(q[2], m.rewards(3));
}

TEST(ExactQFunction, IntegratesToThePolicyValue) {
  RandomMdpOptions opt;
  opt.fixed_initial_state = false;
  const auto m = random_tabular_mdp(opt, 4);
  const auto pi = Policy::random_softmax(3, 4, 2, 1.0, 4);
  const auto q = exact_q_function(m, pi);
  EXPECT_NEAR(integrate_first_step(q[0], m.initial(), pi.step(1)), exact_policy_value(m, pi), 1e-10);
}

TEST(ExactQFunction, BellmanConsistencyEntrywise) {
  const auto m = random_tabular_mdp({}, 12);
  const auto pi = Policy::random_softmax(3, 4, 2, 2.0, 1);
  const auto q = exact_q_function(m, pi);
  const auto ref = oracle::q_by_loops(m, pi);
  for (int h = 0; h < 3; ++h)
    for (int s = 0; s < 4; ++s)
      for (int a = 0; a < 2; ++a) EXPECT_NEAR(q[static_cast<std::size_t>(h)](s, a), ref[h][s][a], 1e-10);
}

TEST(Rollout, DeterministicMdpGivesTheUniquePath) {
  const auto m = deterministic_chain();
  const auto pi = Policy::deterministic(2, {{0, 1}, {0, 1}, {0, 0}});
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng = make_rng(seed);
    const auto t = rollout(m, pi, rng);
    ASSERT_EQ(t.steps.size(), 3u);
    EXPECT_EQ(t.steps[0].state, 0);
    EXPECT_EQ(t.steps[0].action, 0);
    EXPECT_EQ(t.steps[1].state, 1);
    EXPECT_EQ(t.steps[1].action, 1);
    EXPECT_EQ(t.steps[2].state, 1);
    EXPECT_EQ(t.steps[2].action, 0);
    EXPECT_DOUBLE_EQ(t.total_reward(), 0.2 + 0.4 + 0.7);
  }
}

TEST(Rollout, SameSeedSameTrajectoryAndChaining) {
  const auto m = random_tabular_mdp({}, 6);
  const auto pi = Policy::uniform(3, 4, 2);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng a = make_rng(seed), b = make_rng(seed);
    const auto ta = rollout(m, pi, a), tb = rollout(m, pi, b);
    for (std::size_t i = 0; i < ta.steps.size(); ++i) {
      EXPECT_EQ(ta.steps[i].state, tb.steps[i].state);
      EXPECT_EQ(ta.steps[i].action, tb.steps[i].action);
      EXPECT_EQ(ta.steps[i].next_state, tb.steps[i].next_state);
      EXPECT_EQ(ta.steps[i].reward, m.reward(ta.steps[i].h, ta.steps[i].state, ta.steps[i].action));
      if (i + 1 < ta.steps.size()) EXPECT_EQ(ta.steps[i].next_state, ta.steps[i + 1].state);
    }
  }
}

TEST(VisitationDistribution, PointMassAtStepOne) {
  const auto m = random_tabular_mdp({}, 2);
  const auto pi = Policy::deterministic(2, {{1, 0, 0, 0}, {0, 0, 0, 0}, {0, 0, 0, 0}});
  const auto q = visitation_distribution(m, pi, 1);
  Eigen::VectorXd expect = Eigen::VectorXd::Zero(8);
  expect(m.pair_index(0, 1)) = 1.0;
  EXPECT_EQ(q, expect);
}

TEST(VisitationDistribution, SymmetricTwoStateIsUniform) {
  Eigen::MatrixXd p = Eigen::MatrixXd::Constant(4, 2, 0.5);
  Eigen::MatrixXd r = Eigen::MatrixXd::Zero(2, 2);
  Eigen::VectorXd xi = Eigen::VectorXd::Constant(2, 0.5);
  const TabularMdp m(2, 2, {p, p}, {r, r}, xi, {{0, 0}, {0, 0}});
  for (int h = 1; h <= 2; ++h) {
    const auto q = visitation_distribution(m, Policy::uniform(2, 2, 2), h);
    for (Eigen::Index i = 0; i < 4; ++i) EXPECT_NEAR(q(i), 0.25, 1e-15);
  }
}

TEST(VisitationDistribution, MatchesRolloutFrequencies) {
  const auto m = random_tabular_mdp({}, 31);
  const auto pi = Policy::random_softmax(3, 4, 2, 1.0, 2);
  const auto q = visitation_distribution(m, pi, 3);
  const int n = 1'000'000;
  std::vector<double> count(8, 0.0);
  Rng rng = make_rng(99);
  for (int i = 0; i < n; ++i) {
    const auto t = rollout(m, pi, rng);
    count[static_cast<std::size_t>(m.pair_index(t.steps[2].state, t.steps[2].action))] += 1.0;
  }
  for (int i = 0; i < 8; ++i) {
    const double p = q(i);
    const double se = std::sqrt(p * (1 - p) / n);
    EXPECT_LE(std::abs(count[static_cast<std::size_t>(i)] / n - p), 3.0 * se + 1e-12) << "cell " << i;
  }
}

TEST(VisitationDistribution, EveryStepIsADistribution) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    RandomMdpOptions opt;
    opt.horizon = 5;
    opt.num_states = 6;
    opt.num_actions = 3;
    opt.fixed_initial_state = seed % 3 != 0;
    const auto m = random_tabular_mdp(opt, seed);
    const auto pi = Policy::random_softmax(5, 6, 3, 0.5, seed);
    for (int h = 1; h <= 5; ++h) {
      const auto q = visitation_distribution(m, pi, h);
      EXPECT_TRUE((q.array() >= 0.0).all());
      EXPECT_NEAR(q.sum(), 1.0, 1e-12);
    }
  }
}

TEST(MonteCarlo, DpAgreementOnHundredSeeds) {
  int within = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto m = random_tabular_mdp({}, 1000 + seed);
    const auto pi = Policy::random_softmax(3, 4, 2, 1.0, seed);
    Rng rng = make_rng(derive_seed(seed, {7}));
    const auto mc = monte_carlo_value(m, pi, 20000, rng);
    if (std::abs(mc.mean - exact_policy_value(m, pi)) <= 3.0 * mc.standard_error) ++within;
  }
  EXPECT_GE(within, 99);
}
