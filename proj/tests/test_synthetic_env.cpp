#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "oracles.hpp"
#include "pbfqe/synthetic_env.hpp"

using namespace pbfqe;

TEST(MakeEmbeddedMdp, IdentityFrameWithoutDistortionKeepsLatentCoordinates) {
  EnvConfig c;
  c.intrinsic_dim = c.ambient_dim = 3;
  c.feature_dim = 2;
  c.identity_frame = true;
  c.distortion = 0.0;
  const auto env = make_embedded_mdp(c);
  EXPECT_EQ(env.frame(), Eigen::MatrixXd::Identity(3, 3));
  EXPECT_EQ(env.embedding(), env.latent_coords());
}

TEST(MakeEmbeddedMdp, SameSeedIsBitwiseIdentical) {
  EnvConfig c;
  c.seed = 77;
  const auto a = make_embedded_mdp(c), b = make_embedded_mdp(c);
  for (int h = 1; h <= c.horizon; ++h) {
    EXPECT_EQ(a.latent().rewards(h), b.latent().rewards(h));
    EXPECT_EQ(a.latent().transitions(h), b.latent().transitions(h));
  }
  EXPECT_EQ(a.embedding(), b.embedding());
  c.seed = 78;
  EXPECT_NE(make_embedded_mdp(c).latent().rewards(1), a.latent().rewards(1));
}

TEST(MakeEmbeddedMdp, HighAmbientPointsAreSeparated) {
  EnvConfig c;
  c.intrinsic_dim = 2;
  c.ambient_dim = 50;
  c.num_states = 8;
  c.num_actions = 3;
  c.seed = 5;
  const auto env = make_embedded_mdp(c);
  const auto& x = env.embedding();
  ASSERT_EQ(x.rows(), 24);
  for (int i = 0; i < 24; ++i)
    for (int j = i + 1; j < 24; ++j) {
      double d2 = 0.0;
      for (int k = 0; k < 50; ++k) d2 += (x(i, k) - x(j, k)) * (x(i, k) - x(j, k));
      EXPECT_GE(std::sqrt(d2), 1e-3) << i << "," << j;
    }
}

TEST(MakeEmbeddedMdp, InvariantsHoldAcrossSeeds) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    EnvConfig c;
    c.seed = seed;
    c.intrinsic_dim = 1 + static_cast<int>(seed % 3);
    c.ambient_dim = c.intrinsic_dim + static_cast<int>(seed % 5);
    c.feature_dim = 1;
    c.coordinate_bound = 0.5 + 0.1 * static_cast<double>(seed % 4);
    c.reward_scale = seed % 7 == 0 ? 0.5 : 1.0;
    c.anchor_at_minimum = seed % 2 == 0;
    c.anchor = {1, 2};
    const auto env = make_embedded_mdp(c);
    EXPECT_LE(env.embedding().cwiseAbs().maxCoeff(), c.coordinate_bound + 1e-15);
    for (int h = 1; h <= c.horizon; ++h) {
      const auto& r = env.latent().rewards(h);
      EXPECT_GE(r.minCoeff(), 0.0);
      EXPECT_LE(r.maxCoeff(), 1.0);
      const auto f = env.latent().anchor(h);
      EXPECT_EQ(r(f.state, f.action), 0.0);
      if (!c.anchor_at_minimum) EXPECT_EQ(f.state * c.num_actions + f.action, 1 * c.num_actions + 2);
    }
  }
}

TEST(MakeEmbeddedMdp, RejectsInvalidConfig) {
  EnvConfig c;
  c.intrinsic_dim = 9;
  EXPECT_THROW(make_embedded_mdp(c), ConfigError);
  c = EnvConfig{};
  c.reward_scale = 1.5;
  EXPECT_THROW(make_embedded_mdp(c), ConfigError);
}

TEST(MakeEmbeddedMdp, JsonRoundTripIsExact) {
  EnvConfig c;
  c.seed = 3;
  const auto env = make_embedded_mdp(c);
  const auto back = EmbeddedMdp::from_json(Json::parse(to_json_string(env.to_json())));
  EXPECT_EQ(back.embedding(), env.embedding());
  for (int h = 1; h <= 3; ++h) EXPECT_EQ(back.latent().rewards(h), env.latent().rewards(h));
  EXPECT_EQ(back.config().to_json(), env.config().to_json());
}

TEST(TransitionDataset, ZeroSizeRejected) {
  const auto env = make_embedded_mdp({});
  EXPECT_THROW(generate_transition_dataset(env, Policy::uniform(3, 5, 3), 0, 1), RangeError);
}

TEST(TransitionDataset, SinglePathMdpRepeatsOneSample) {
  Eigen::MatrixXd p(4, 2);
  p << 0, 1, 0, 1, 1, 0, 1, 0;
  Eigen::MatrixXd r = Eigen::MatrixXd::Zero(2, 2);
  const TabularMdp m(2, 2, {p, p}, {r, r}, TabularMdp::point_mass(2, 0), {{0, 0}, {0, 0}});
  const auto pi = Policy::deterministic(2, {{1, 1}, {0, 0}});
  const auto ds = generate_transition_dataset(m, pi, 500, 3);
  for (int h = 1; h <= 2; ++h) {
    ASSERT_EQ(ds.step(h).size(), 500u);
    for (const auto& t : ds.step(h)) {
      EXPECT_EQ(t.pair, ds.step(h).front().pair);
      EXPECT_EQ(t.next_state, ds.step(h).front().next_state);
    }
  }
}

TEST(TransitionDataset, StepTwoFrequenciesMatchOccupancy) {
  EnvConfig c;
  c.seed = 12;
  const auto env = make_embedded_mdp(c);
  const auto pi = Policy::random_softmax(3, 5, 3, 1.0, 8);
  const std::size_t K = 100000;
  const auto ds = generate_transition_dataset(env, pi, K, 21);
  const auto q = visitation_distribution(env.latent(), pi, 2);
  std::vector<double> count(15, 0.0);
  for (const auto& t : ds.step(2)) count[static_cast<std::size_t>(t.pair)] += 1.0;
  for (int i = 0; i < 15; ++i) {
    const double se = std::sqrt(q(i) * (1 - q(i)) / K);
    EXPECT_LE(std::abs(count[static_cast<std::size_t>(i)] / K - q(i)), 3 * se + 1e-12) << "pair " << i;
  }
}

TEST(TransitionDataset, NextStatesFollowTheKernel) {
  EnvConfig c;
  c.seed = 2;
  const auto env = make_embedded_mdp(c);
  const auto ds = generate_transition_dataset(env, Policy::uniform(3, 5, 3), 200000, 4);
  // Pool over pairs: the marginal of s' equals sum_pair q(pair) P(. | pair).
  const auto q = visitation_distribution(env.latent(), Policy::uniform(3, 5, 3), 1);
  const Eigen::VectorXd expect = env.latent().transitions(1).transpose() * q;
  std::vector<double> counts(5, 0.0);
  for (const auto& t : ds.step(1)) counts[static_cast<std::size_t>(t.next_state)] += 1.0;
  double stat = 0.0;
  for (int s = 0; s < 5; ++s) {
    const double e = 200000 * expect(s);
    stat += (counts[static_cast<std::size_t>(s)] - e) * (counts[static_cast<std::size_t>(s)] - e) / e;
  }
  // df = 4
  EXPECT_GT(oracle::chi2_sf_even(stat, 4), 0.01) << stat;
}

TEST(PreferenceDataset, ZeroRewardLabelsAreUniform) {
  EnvConfig c;
  c.reward_scale = 0.0;
  const auto env = make_embedded_mdp(c);
  const auto ds = generate_preference_dataset(env, PairSampler::uniform(env.latent()), 100000, 9);
  for (int h = 1; h <= 3; ++h) {
    std::vector<double> n(3, 0.0);
    for (const auto& p : ds.step(h)) n[static_cast<std::size_t>(p.label)] += 1.0;
    double stat = 0.0;
    for (double x : n) stat += (x - 100000.0 / 3) * (x - 100000.0 / 3) / (100000.0 / 3);
    EXPECT_GT(oracle::chi2_sf_even(stat, 2), 0.01) << "h=" << h;
  }
}

TEST(PreferenceDataset, AnchorFrequencyMatchesClosedForm) {
  // One state, three actions; candidates are drawn from the two reward-1 pairs.
  Eigen::MatrixXd r(1, 3);
  r << 1.0, 1.0, 0.0;
  Eigen::VectorXd eta(3);
  eta << 0.5, 0.5, 0.0;
  const auto ds = generate_preference_dataset({r}, {2}, PairSampler({eta}), 100000, 13);
  double anchor = 0.0;
  for (const auto& p : ds.step(1)) {
    EXPECT_EQ(p.pairs[kAnchorSlot], 2);
    anchor += p.label == kAnchorSlot;
  }
  const double expect = 1.0 / (2.0 * std::exp(1.0) + 1.0);
  EXPECT_NEAR(expect, 0.1554, 5e-5);
  const double se = std::sqrt(expect * (1 - expect) / 100000);
  EXPECT_LE(std::abs(anchor / 100000 - expect), 3 * se);
}

TEST(PreferenceDataset, SameSeedSameLabels) {
  const auto env = make_embedded_mdp({});
  const auto eta = PairSampler::uniform(env.latent());
  const auto a = generate_preference_dataset(env, eta, 2000, 5), b = generate_preference_dataset(env, eta, 2000, 5);
  for (int h = 1; h <= 3; ++h)
    for (std::size_t k = 0; k < 2000; ++k) {
      EXPECT_EQ(a.step(h)[k].label, b.step(h)[k].label);
      EXPECT_EQ(a.step(h)[k].pairs, b.step(h)[k].pairs);
    }
}

TEST(PreferenceDataset, ConstantShiftLeavesLabelsUnchanged) {
  const auto env = make_embedded_mdp({});
  const auto eta = PairSampler::uniform(env.latent());
  std::vector<int> anchors;
  for (int h = 1; h <= 3; ++h) anchors.push_back(env.anchor_pair(h));
  auto shifted = reward_tables(env.latent());
  // c chosen so r + c is exact in binary for rewards of this magnitude.
  for (auto& t : shifted) t.array() += 0.25;
  const auto a = generate_preference_dataset(reward_tables(env.latent()), anchors, eta, 5000, 44);
  const auto b = generate_preference_dataset(shifted, anchors, eta, 5000, 44);
  std::size_t diff = 0;
  for (int h = 1; h <= 3; ++h)
    for (std::size_t k = 0; k < 5000; ++k) diff += a.step(h)[k].label != b.step(h)[k].label;
  EXPECT_EQ(diff, 0u);
}

TEST(PreferenceDataset, CandidateMarginalMatchesEta) {
  const auto env = make_embedded_mdp({});
  const auto eta = PairSampler::occupancy(env.latent(), Policy::random_softmax(3, 5, 3, 1.0, 2));
  const std::size_t n = 50000;
  const auto ds = generate_preference_dataset(env, eta, n, 17);
  std::vector<double> count(15, 0.0);
  for (const auto& p : ds.step(2)) count[static_cast<std::size_t>(p.pairs[0])] += 1.0;
  for (int i = 0; i < 15; ++i) {
    const double q = eta.step(2)(i);
    EXPECT_LE(std::abs(count[static_cast<std::size_t>(i)] / n - q), 4 * std::sqrt(q * (1 - q) / n) + 1e-12);
  }
}

TEST(DatasetCsv, HeadersAndRowCounts) {
  EnvConfig c;
  c.ambient_dim = 3;
  const auto env = make_embedded_mdp(c);
  std::ostringstream t, p;
  write_transitions_csv(t, env, generate_transition_dataset(env, Policy::uniform(3, 5, 3), 4, 1));
  write_preferences_csv(p, env, generate_preference_dataset(env, PairSampler::uniform(env.latent()), 2, 1));
  const std::string ts = t.str(), ps = p.str();
  EXPECT_EQ(ts.substr(0, ts.find('\n')), "h,k,x0,x1,x2,sprime_index");
  EXPECT_EQ(ps.substr(0, ps.find('\n')), "h,k,cand0_x0,cand0_x1,cand0_x2,cand1_x0,cand1_x1,cand1_x2,label");
  EXPECT_EQ(std::count(ts.begin(), ts.end(), '\n'), 1 + 12);
  EXPECT_EQ(std::count(ps.begin(), ps.end(), '\n'), 1 + 6);
}
