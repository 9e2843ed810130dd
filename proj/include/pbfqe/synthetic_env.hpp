#pragma once

// Synthetic environments with a low-dimensional latent structure.
//
// Every state-action pair (s, a) of a tabular latent MDP carries latent
// coordinates z in [0,1]^d. The observable representation is a smooth
// injective embedding x = scale * F (z + distortion(z)) in R^D, with F a
// D x d matrix with orthonormal columns. Rewards factor as r_h = f_h o psi_h
// with a smooth feature map psi_h : [0,1]^d -> [0,B']^d~ and a bounded head
// f_h, rescaled to [0,1] over the finite support and shifted so the anchor
// pair has reward exactly 0.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pbfqe/choice_model.hpp"
#include "pbfqe/error.hpp"
#include "pbfqe/json_io.hpp"
#include "pbfqe/mdp.hpp"
#include "pbfqe/rng.hpp"

namespace pbfqe {

struct EnvConfig {
  int intrinsic_dim = 2;  // d
  int ambient_dim = 8;    // D
  int feature_dim = 1;    // d~
  int num_states = 5;
  int num_actions = 3;
  int horizon = 3;
  /// Amplitude of the trigonometric coordinate distortion; 0 keeps z as is.
  double distortion = 0.1;
  /// Frequency of the reward feature map and head.
  double reward_frequency = 1.0;
  /// Multiplies the rescaled reward; 0 gives an all-zero reward.
  double reward_scale = 1.0;
  /// Upper end of the feature range [0, B'].
  double feature_bound = 1.0;
  /// Bound B on embedded coordinates; the embedding is shrunk if needed.
  double coordinate_bound = 1.0;
  /// Minimum pairwise distance between embedded points.
  double min_gap = 1e-3;
  double transition_concentration = 0.5;
  bool identity_frame = false;
  bool fixed_initial_state = true;
  /// Plant the anchor at the pair with the lowest raw reward (no clipping
  /// needed), otherwise at `anchor` for every step.
  bool anchor_at_minimum = true;
  StateAction anchor{0, 0};
  std::uint64_t seed = 0;

  void validate() const {
    if (intrinsic_dim < 1 || ambient_dim < 1 || feature_dim < 1)
      throw ConfigError("dimensions must be positive");
    if (intrinsic_dim > ambient_dim) throw ConfigError("intrinsic_dim must not exceed ambient_dim");
    if (feature_dim > intrinsic_dim) throw ConfigError("feature_dim must not exceed intrinsic_dim");
    if (num_states < 1 || num_actions < 1 || horizon < 1)
      throw ConfigError("num_states, num_actions and horizon must be positive");
    if (identity_frame && intrinsic_dim != ambient_dim)
      throw ConfigError("identity_frame requires intrinsic_dim == ambient_dim");
    if (!(reward_scale >= 0.0 && reward_scale <= 1.0)) throw ConfigError("reward_scale must lie in [0,1]");
    if (!(coordinate_bound > 0.0) || !(feature_bound > 0.0) || !(min_gap >= 0.0) ||
        !(transition_concentration > 0.0))
      throw ConfigError("bounds, gap and concentration must be positive");
    if (!anchor_at_minimum && (anchor.state < 0 || anchor.state >= num_states || anchor.action < 0 ||
                               anchor.action >= num_actions))
      throw ConfigError("anchor outside the state-action space");
  }

  Json to_json() const {
    return {{"intrinsic_dim", intrinsic_dim},
            {"ambient_dim", ambient_dim},
            {"feature_dim", feature_dim},
            {"num_states", num_states},
            {"num_actions", num_actions},
            {"horizon", horizon},
            {"distortion", distortion},
            {"reward_frequency", reward_frequency},
            {"reward_scale", reward_scale},
            {"feature_bound", feature_bound},
            {"coordinate_bound", coordinate_bound},
            {"min_gap", min_gap},
            {"transition_concentration", transition_concentration},
            {"identity_frame", identity_frame},
            {"fixed_initial_state", fixed_initial_state},
            {"anchor_at_minimum", anchor_at_minimum},
            {"anchor", Json::array({anchor.state, anchor.action})},
            {"seed", seed}};
  }

  static EnvConfig from_json(const Json& j) {
    EnvConfig c;
    c.intrinsic_dim = j.value("intrinsic_dim", c.intrinsic_dim);
    c.ambient_dim = j.value("ambient_dim", c.ambient_dim);
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.num_states = j.value("num_states", c.num_states);
    c.num_actions = j.value("num_actions", c.num_actions);
    c.horizon = j.value("horizon", c.horizon);
    c.distortion = j.value("distortion", c.distortion);
    c.reward_frequency = j.value("reward_frequency", c.reward_frequency);
    c.reward_scale = j.value("reward_scale", c.reward_scale);
    c.feature_bound = j.value("feature_bound", c.feature_bound);
    c.coordinate_bound = j.value("coordinate_bound", c.coordinate_bound);
    c.min_gap = j.value("min_gap", c.min_gap);
    c.transition_concentration = j.value("transition_concentration", c.transition_concentration);
    c.identity_frame = j.value("identity_frame", c.identity_frame);
    c.fixed_initial_state = j.value("fixed_initial_state", c.fixed_initial_state);
    c.anchor_at_minimum = j.value("anchor_at_minimum", c.anchor_at_minimum);
    if (j.contains("anchor")) c.anchor = {j["anchor"][0].get<int>(), j["anchor"][1].get<int>()};
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  }
};

/// Latent tabular MDP together with its embedded representation.
class EmbeddedMdp {
 public:
  EmbeddedMdp() = default;
  EmbeddedMdp(EnvConfig config, TabularMdp latent, Eigen::MatrixXd latent_coords, Eigen::MatrixXd frame,
              Eigen::MatrixXd embedding, std::vector<Eigen::MatrixXd> features)
      : config_(std::move(config)), latent_(std::move(latent)), latent_coords_(std::move(latent_coords)),
        frame_(std::move(frame)), embedding_(std::move(embedding)), features_(std::move(features)) {}

  const EnvConfig& config() const { return config_; }
  const TabularMdp& latent() const { return latent_; }
  int horizon() const { return latent_.horizon(); }
  int num_pairs() const { return latent_.num_pairs(); }
  int ambient_dim() const { return static_cast<int>(embedding_.cols()); }

  /// Row p holds the latent coordinates of flattened pair p.
  const Eigen::MatrixXd& latent_coords() const { return latent_coords_; }
  /// D x d matrix with orthonormal columns.
  const Eigen::MatrixXd& frame() const { return frame_; }
  /// Row p holds the embedding of flattened pair p.
  const Eigen::MatrixXd& embedding() const { return embedding_; }
  Eigen::VectorXd embed(int s, int a) const { return embedding_.row(latent_.pair_index(s, a)).transpose(); }
  /// features(h) row p holds psi_h at pair p.
  const Eigen::MatrixXd& features(int h) const { return features_.at(static_cast<std::size_t>(h - 1)); }

  int anchor_pair(int h) const {
    const auto f = latent_.anchor(h);
    return latent_.pair_index(f.state, f.action);
  }

  /// Largest |x_i| over the support.
  double max_abs_coordinate() const { return embedding_.cwiseAbs().maxCoeff(); }

  double min_pairwise_distance() const {
    double best = INFINITY;
    for (Eigen::Index i = 0; i < embedding_.rows(); ++i)
      for (Eigen::Index j = i + 1; j < embedding_.rows(); ++j)
        best = std::min(best, (embedding_.row(i) - embedding_.row(j)).norm());
    return best;
  }

  Json to_json() const {
    Json feats = Json::array();
    for (const auto& f : features_) feats.push_back(matrix_to_json(f));
    return {{"format", "pbfqe.embedded_mdp"},
            {"version", 1},
            {"config", config_.to_json()},
            {"latent", latent_.to_json()},
            {"latent_coords", matrix_to_json(latent_coords_)},
            {"frame", matrix_to_json(frame_)},
            {"embedding", matrix_to_json(embedding_)},
            {"features", std::move(feats)}};
  }

  static EmbeddedMdp from_json(const Json& j) {
    if (j.at("format") != "pbfqe.embedded_mdp") throw Error("not an embedded MDP document");
    std::vector<Eigen::MatrixXd> feats;
    for (const auto& f : j.at("features")) feats.push_back(matrix_from_json(f));
    return EmbeddedMdp(EnvConfig::from_json(j.at("config")), TabularMdp::from_json(j.at("latent")),
                       matrix_from_json(j.at("latent_coords")), matrix_from_json(j.at("frame")),
                       matrix_from_json(j.at("embedding")), std::move(feats));
  }

 private:
  EnvConfig config_;
  TabularMdp latent_;
  Eigen::MatrixXd latent_coords_;
  Eigen::MatrixXd frame_;
  Eigen::MatrixXd embedding_;
  std::vector<Eigen::MatrixXd> features_;
};

namespace detail {

/// D x d matrix with orthonormal columns (Gram-Schmidt on Gaussian columns).
inline Eigen::MatrixXd random_frame(int D, int d, Rng& rng) {
  Eigen::MatrixXd g(D, d);
  for (int c = 0; c < d; ++c)
    for (int r = 0; r < D; ++r) g(r, c) = standard_normal(rng);
  Eigen::MatrixXd q(D, d);
  for (int c = 0; c < d; ++c) {
    Eigen::VectorXd v = g.col(c);
    for (int k = 0; k < c; ++k) v -= q.col(k).dot(v) * q.col(k);
    for (int k = 0; k < c; ++k) v -= q.col(k).dot(v) * q.col(k);
    q.col(c) = v / v.norm();
  }
  return q;
}

/// z + amp * sin(2 pi (z_{i+1} + phase_i)), a smooth injective perturbation
/// for small amp.
inline Eigen::VectorXd distort(const Eigen::VectorXd& z, double amp, const Eigen::VectorXd& phase) {
  const auto d = z.size();
  Eigen::VectorXd out = z;
  if (amp == 0.0 || d == 1) {
    if (amp != 0.0) out(0) += amp * std::sin(2.0 * std::numbers::pi * (z(0) + phase(0)));
    return out;
  }
  for (Eigen::Index i = 0; i < d; ++i)
    out(i) += amp * std::sin(2.0 * std::numbers::pi * (z((i + 1) % d) + phase(i)));
  return out;
}

}  // namespace detail

inline EmbeddedMdp make_embedded_mdp(const EnvConfig& cfg) {
  cfg.validate();
  const int d = cfg.intrinsic_dim;
  const int D = cfg.ambient_dim;
  const int np = cfg.num_states * cfg.num_actions;
  const double two_pi = 2.0 * std::numbers::pi;

  Rng geom = make_rng(derive_seed(cfg.seed, {1}));
  const Eigen::MatrixXd frame = cfg.identity_frame ? Eigen::MatrixXd::Identity(D, d) : detail::random_frame(D, d, geom);
  Eigen::VectorXd phase(d);
  for (int i = 0; i < d; ++i) phase(i) = uniform01(geom);

  Eigen::MatrixXd z(np, d), x(np, D);
  bool separated = false;
  for (int attempt = 0; attempt < 100 && !separated; ++attempt) {
    for (int p = 0; p < np; ++p)
      for (int i = 0; i < d; ++i) z(p, i) = uniform01(geom);
    for (int p = 0; p < np; ++p)
      x.row(p) = (frame * detail::distort(z.row(p).transpose(), cfg.distortion, phase)).transpose();
    const double mx = x.cwiseAbs().maxCoeff();
    if (mx > cfg.coordinate_bound) x *= cfg.coordinate_bound / mx;
    separated = true;
    for (int i = 0; i < np && separated; ++i)
      for (int j = i + 1; j < np && separated; ++j)
        if ((x.row(i) - x.row(j)).norm() < cfg.min_gap) separated = false;
  }
  if (!separated) throw InvariantError("could not place embedded points at the configured gap");

  Rng dyn = make_rng(derive_seed(cfg.seed, {2}));
  std::vector<Eigen::MatrixXd> trans;
  for (int h = 0; h < cfg.horizon; ++h) {
    Eigen::MatrixXd p(np, cfg.num_states);
    for (int r = 0; r < np; ++r) p.row(r) = detail::dirichlet(cfg.num_states, cfg.transition_concentration, dyn).transpose();
    trans.push_back(std::move(p));
  }

  Rng rew = make_rng(derive_seed(cfg.seed, {3}));
  std::vector<Eigen::MatrixXd> rewards, features;
  std::vector<StateAction> anchors;
  for (int h = 0; h < cfg.horizon; ++h) {
    // psi_h(z)_j = B' (1 + sin(2 pi w_j . z + phi_j)) / 2 ; f_h(u) = (1 + sin(v . u + c)) / 2
    Eigen::MatrixXd w(cfg.feature_dim, d);
    Eigen::VectorXd phi(cfg.feature_dim), v(cfg.feature_dim);
    for (int j = 0; j < cfg.feature_dim; ++j) {
      for (int i = 0; i < d; ++i) w(j, i) = cfg.reward_frequency * standard_normal(rew) / std::sqrt(d);
      phi(j) = two_pi * uniform01(rew);
      v(j) = cfg.reward_frequency * two_pi * standard_normal(rew) / (std::sqrt(cfg.feature_dim) * cfg.feature_bound);
    }
    const double c = two_pi * uniform01(rew);
    Eigen::MatrixXd feat(np, cfg.feature_dim);
    Eigen::VectorXd raw(np);
    for (int p = 0; p < np; ++p) {
      for (int j = 0; j < cfg.feature_dim; ++j)
        feat(p, j) = cfg.feature_bound * 0.5 * (1.0 + std::sin(two_pi * w.row(j).dot(z.row(p)) + phi(j)));
      raw(p) = 0.5 * (1.0 + std::sin(v.dot(feat.row(p)) + c));
    }
    Eigen::Index argmin = 0;
    const double lo = raw.minCoeff(&argmin);
    const double hi = raw.maxCoeff();
    Eigen::VectorXd scaled = hi > lo ? Eigen::VectorXd((raw.array() - lo) / (hi - lo)) : Eigen::VectorXd::Zero(np);
    const StateAction anchor = cfg.anchor_at_minimum
                                   ? StateAction{static_cast<int>(argmin) / cfg.num_actions,
                                                 static_cast<int>(argmin) % cfg.num_actions}
                                   : cfg.anchor;
    const double at_anchor = scaled(anchor.state * cfg.num_actions + anchor.action);
    Eigen::MatrixXd r(cfg.num_states, cfg.num_actions);
    for (int s = 0; s < cfg.num_states; ++s)
      for (int a = 0; a < cfg.num_actions; ++a)
        r(s, a) = cfg.reward_scale * std::max(0.0, scaled(s * cfg.num_actions + a) - at_anchor);
    r(anchor.state, anchor.action) = 0.0;
    rewards.push_back(std::move(r));
    features.push_back(std::move(feat));
    anchors.push_back(anchor);
  }

  Eigen::VectorXd xi = cfg.fixed_initial_state ? TabularMdp::point_mass(cfg.num_states, 0)
                                               : Eigen::VectorXd::Constant(cfg.num_states, 1.0 / cfg.num_states);
  TabularMdp latent(cfg.num_states, cfg.num_actions, std::move(trans), std::move(rewards), std::move(xi),
                    std::move(anchors));
  return EmbeddedMdp(cfg, std::move(latent), std::move(z), frame, std::move(x), std::move(features));
}

/// Per-step sampling distribution eta_h over flattened state-action pairs.
class PairSampler {
 public:
  PairSampler() = default;
  explicit PairSampler(std::vector<Eigen::VectorXd> probs) : probs_(std::move(probs)) {
    for (std::size_t h = 0; h < probs_.size(); ++h)
      detail::check_simplex(probs_[h], "sampling distribution at step h=" + std::to_string(h + 1));
  }

  static PairSampler uniform(const TabularMdp& mdp) {
    return PairSampler(std::vector<Eigen::VectorXd>(static_cast<std::size_t>(mdp.horizon()),
                                                    Eigen::VectorXd::Constant(mdp.num_pairs(), 1.0 / mdp.num_pairs())));
  }

  /// Occupancy q_h of an exploration policy.
  static PairSampler occupancy(const TabularMdp& mdp, const Policy& explore) {
    std::vector<Eigen::VectorXd> probs;
    for (int h = 1; h <= mdp.horizon(); ++h) probs.push_back(visitation_distribution(mdp, explore, h));
    return PairSampler(std::move(probs));
  }

  int horizon() const { return static_cast<int>(probs_.size()); }
  const Eigen::VectorXd& step(int h) const { return probs_.at(static_cast<std::size_t>(h - 1)); }
  int sample(int h, Rng& rng) const {
    const auto& p = step(h);
    return static_cast<int>(sample_categorical(std::span<const double>(p.data(), p.size()), rng));
  }

 private:
  std::vector<Eigen::VectorXd> probs_;
};

struct TransitionSample {
  int pair = 0;  // flattened (s, a)
  int next_state = 0;
};

/// D_h for h = 1..H; steps[h-1] holds K samples.
struct TransitionDataset {
  std::vector<std::vector<TransitionSample>> steps;
  const std::vector<TransitionSample>& step(int h) const { return steps.at(static_cast<std::size_t>(h - 1)); }
};

struct PreferenceSample {
  /// Flattened pairs; slot 2 is always the anchor.
  std::array<int, kCandidates> pairs{};
  int label = 0;
};

/// D_h^HF for h = 1..H; steps[h-1] holds K_HF samples.
struct PreferenceDataset {
  std::vector<std::vector<PreferenceSample>> steps;
  const std::vector<PreferenceSample>& step(int h) const { return steps.at(static_cast<std::size_t>(h - 1)); }
};

/// K i.i.d. draws of (s, a) from the behavior occupancy at every step, with
/// s' ~ P_h(. | s, a).
inline TransitionDataset generate_transition_dataset(const TabularMdp& mdp, const Policy& behavior, std::size_t K,
                                                     std::uint64_t seed) {
  if (K < 1) throw RangeError("transition dataset size K must be at least 1");
  mdp.check_policy(behavior);
  TransitionDataset ds;
  for (int h = 1; h <= mdp.horizon(); ++h) {
    Rng rng = make_rng(derive_seed(seed, {static_cast<std::uint64_t>(h)}));
    const Eigen::VectorXd q = visitation_distribution(mdp, behavior, h);
    const std::span<const double> qs(q.data(), static_cast<std::size_t>(q.size()));
    std::vector<TransitionSample> samples;
    samples.reserve(K);
    for (std::size_t k = 0; k < K; ++k) {
      const int pair = static_cast<int>(sample_categorical(qs, rng));
      const auto [s, a] = mdp.pair_at(pair);
      const Eigen::RowVectorXd ps = mdp.next_state_probs(h, s, a);
      const int next = static_cast<int>(sample_categorical(std::span<const double>(ps.data(), ps.size()), rng));
      samples.push_back({pair, next});
    }
    ds.steps.push_back(std::move(samples));
  }
  return ds;
}

inline TransitionDataset generate_transition_dataset(const EmbeddedMdp& env, const Policy& behavior, std::size_t K,
                                                     std::uint64_t seed) {
  return generate_transition_dataset(env.latent(), behavior, K, seed);
}

/// Preference data from arbitrary per-step reward tables (|S| x |A|, not
/// required to be normalized). Candidates 0 and 1 are i.i.d. from eta_h and
/// candidate 2 is the anchor; labels follow the softmax choice model.
inline PreferenceDataset generate_preference_dataset(const std::vector<Eigen::MatrixXd>& rewards,
                                                     const std::vector<int>& anchor_pairs, const PairSampler& eta,
                                                     std::size_t K_HF, std::uint64_t seed) {
  if (K_HF < 1) throw RangeError("preference dataset size K_HF must be at least 1");
  if (rewards.size() != anchor_pairs.size() || static_cast<int>(rewards.size()) != eta.horizon())
    throw DimensionError("rewards, anchors and eta must cover the same horizon");
  PreferenceDataset ds;
  for (int h = 1; h <= eta.horizon(); ++h) {
    const Eigen::MatrixXd& r = rewards[static_cast<std::size_t>(h - 1)];
    const auto na = r.cols();
    if (eta.step(h).size() != r.size()) throw DimensionError("eta support does not match reward table at step h=" + std::to_string(h));
    const auto value = [&](int pair) { return r(pair / na, pair % na); };
    Rng rng = make_rng(derive_seed(seed, {static_cast<std::uint64_t>(h)}));
    std::vector<PreferenceSample> samples;
    samples.reserve(K_HF);
    for (std::size_t k = 0; k < K_HF; ++k) {
      PreferenceSample ps;
      ps.pairs[0] = eta.sample(h, rng);
      ps.pairs[1] = eta.sample(h, rng);
      ps.pairs[kAnchorSlot] = anchor_pairs[static_cast<std::size_t>(h - 1)];
      const auto probs = choice_probabilities({value(ps.pairs[0]), value(ps.pairs[1]), value(ps.pairs[2])});
      ps.label = sample_choice(probs, rng);
      samples.push_back(ps);
    }
    ds.steps.push_back(std::move(samples));
  }
  return ds;
}

inline std::vector<Eigen::MatrixXd> reward_tables(const TabularMdp& mdp) {
  std::vector<Eigen::MatrixXd> r;
  for (int h = 1; h <= mdp.horizon(); ++h) r.push_back(mdp.rewards(h));
  return r;
}

inline PreferenceDataset generate_preference_dataset(const EmbeddedMdp& env, const PairSampler& eta, std::size_t K_HF,
                                                     std::uint64_t seed) {
  std::vector<int> anchors;
  for (int h = 1; h <= env.horizon(); ++h) anchors.push_back(env.anchor_pair(h));
  return generate_preference_dataset(reward_tables(env.latent()), anchors, eta, K_HF, seed);
}

inline void write_transitions_csv(std::ostream& out, const EmbeddedMdp& env, const TransitionDataset& ds) {
  out << "h,k";
  for (int i = 0; i < env.ambient_dim(); ++i) out << ",x" << i;
  out << ",sprime_index\n";
  for (std::size_t h = 0; h < ds.steps.size(); ++h) {
    for (std::size_t k = 0; k < ds.steps[h].size(); ++k) {
      const auto& t = ds.steps[h][k];
      out << h + 1 << ',' << k;
      for (int i = 0; i < env.ambient_dim(); ++i) out << ',' << format_double(env.embedding()(t.pair, i));
      out << ',' << t.next_state << '\n';
    }
  }
}

inline void write_preferences_csv(std::ostream& out, const EmbeddedMdp& env, const PreferenceDataset& ds) {
  out << "h,k";
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < env.ambient_dim(); ++i) out << ",cand" << c << "_x" << i;
  out << ",label\n";
  for (std::size_t h = 0; h < ds.steps.size(); ++h) {
    for (std::size_t k = 0; k < ds.steps[h].size(); ++k) {
      const auto& p = ds.steps[h][k];
      out << h + 1 << ',' << k;
      for (int c = 0; c < 2; ++c)
        for (int i = 0; i < env.ambient_dim(); ++i) out << ',' << format_double(env.embedding()(p.pairs[static_cast<std::size_t>(c)], i));
      out << ',' << p.label << '\n';
    }
  }
}

inline Json dataset_manifest(const EnvConfig& cfg, std::uint64_t seed, std::size_t K, std::size_t K_HF) {
  return {{"format", "pbfqe.datasets"}, {"env", cfg.to_json()}, {"seed", seed}, {"K", K}, {"K_HF", K_HF}};
}

}  // namespace pbfqe
