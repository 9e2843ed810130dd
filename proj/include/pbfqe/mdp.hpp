#pragma once

// Finite-horizon tabular MDPs, tabular policies, and the exact oracles used to
// score every estimator: backward dynamic programming for Q and v, forward
// propagation for state-action occupancies, and seeded rollouts.
//
// Steps are 1-based in every function that takes a step argument (h = 1..H).
// Per-step containers are plain vectors, so step h lives at index h - 1.
// State-action pairs are flattened as s * |A| + a.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "pbfqe/error.hpp"
#include "pbfqe/json_io.hpp"
#include "pbfqe/rng.hpp"

namespace pbfqe {

struct StateAction {
  int state = 0;
  int action = 0;
  friend bool operator==(const StateAction&, const StateAction&) = default;
};

inline constexpr double kSimplexTolerance = 1e-12;

namespace detail {

inline void check_simplex(const Eigen::Ref<const Eigen::VectorXd>& p, const std::string& what) {
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (!std::isfinite(p(i)) || p(i) < 0.0)
      throw InvariantError(what + ": entry " + std::to_string(i) + " is negative or non-finite");
  }
  if (std::abs(p.sum() - 1.0) > kSimplexTolerance)
    throw InvariantError(what + ": sums to " + format_double(p.sum()) + ", not 1");
}

}  // namespace detail

/// Per-step action distributions pi_h(a | s), stored as |S| x |A| matrices.
class Policy {
 public:
  Policy() = default;

  explicit Policy(std::vector<Eigen::MatrixXd> probs) : probs_(std::move(probs)) {
    if (probs_.empty()) throw DimensionError("policy needs at least one step");
    const auto s = probs_[0].rows();
    const auto a = probs_[0].cols();
    for (std::size_t h = 0; h < probs_.size(); ++h) {
      const auto& m = probs_[h];
      if (m.rows() != s || m.cols() != a)
        throw DimensionError("policy step " + std::to_string(h + 1) + " has inconsistent shape");
      for (Eigen::Index st = 0; st < s; ++st)
        detail::check_simplex(m.row(st).transpose(), "policy step " + std::to_string(h + 1) +
                                                         " state " + std::to_string(st));
    }
  }

  static Policy uniform(int horizon, int num_states, int num_actions) {
    return Policy(std::vector<Eigen::MatrixXd>(
        static_cast<std::size_t>(horizon),
        Eigen::MatrixXd::Constant(num_states, num_actions, 1.0 / num_actions)));
  }

  /// actions[h-1][s] is the action taken at step h in state s.
  static Policy deterministic(int num_actions, const std::vector<std::vector<int>>& actions) {
    std::vector<Eigen::MatrixXd> probs;
    for (const auto& step : actions) {
      Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(step.size()), num_actions);
      for (std::size_t s = 0; s < step.size(); ++s) {
        if (step[s] < 0 || step[s] >= num_actions) throw RangeError("action index out of range");
        m(static_cast<Eigen::Index>(s), step[s]) = 1.0;
      }
      probs.push_back(std::move(m));
    }
    return Policy(std::move(probs));
  }

  /// Softmax policy with logits temperature * N(0,1), one draw per (h, s, a).
  static Policy random_softmax(int horizon, int num_states, int num_actions, double temperature,
                               std::uint64_t seed) {
    Rng rng = make_rng(seed);
    std::vector<Eigen::MatrixXd> probs;
    for (int h = 0; h < horizon; ++h) {
      Eigen::MatrixXd m(num_states, num_actions);
      for (int s = 0; s < num_states; ++s) {
        for (int a = 0; a < num_actions; ++a) m(s, a) = temperature * standard_normal(rng);
        const double mx = m.row(s).maxCoeff();
        m.row(s) = (m.row(s).array() - mx).exp();
        m.row(s) /= m.row(s).sum();
      }
      probs.push_back(std::move(m));
    }
    return Policy(std::move(probs));
  }

  /// (1 - weight) * a + weight * b, step by step.
  static Policy mixture(const Policy& a, const Policy& b, double weight) {
    if (a.horizon() != b.horizon() || a.num_states() != b.num_states() ||
        a.num_actions() != b.num_actions())
      throw DimensionError("cannot mix policies of different shapes");
    std::vector<Eigen::MatrixXd> probs;
    for (int h = 1; h <= a.horizon(); ++h) {
      Eigen::MatrixXd m = (1.0 - weight) * a.step(h) + weight * b.step(h);
      for (Eigen::Index s = 0; s < m.rows(); ++s) m.row(s) /= m.row(s).sum();
      probs.push_back(std::move(m));
    }
    return Policy(std::move(probs));
  }

  int horizon() const { return static_cast<int>(probs_.size()); }
  int num_states() const { return probs_.empty() ? 0 : static_cast<int>(probs_[0].rows()); }
  int num_actions() const { return probs_.empty() ? 0 : static_cast<int>(probs_[0].cols()); }

  const Eigen::MatrixXd& step(int h) const { return probs_.at(static_cast<std::size_t>(h - 1)); }
  double prob(int h, int s, int a) const { return step(h)(s, a); }

  Json to_json() const {
    Json j = Json::array();
    for (const auto& m : probs_) j.push_back(matrix_to_json(m));
    return j;
  }
  static Policy from_json(const Json& j) {
    std::vector<Eigen::MatrixXd> probs;
    for (const auto& m : j) probs.push_back(matrix_from_json(m));
    return Policy(std::move(probs));
  }

 private:
  std::vector<Eigen::MatrixXd> probs_;
};

class TabularMdp {
 public:
  TabularMdp() = default;

  /// transitions[h-1] is (|S|*|A|) x |S| with row s*|A|+a holding P_h(. | s, a);
  /// rewards[h-1] is |S| x |A|; initial is the distribution xi of s_1.
  TabularMdp(int num_states, int num_actions, std::vector<Eigen::MatrixXd> transitions,
             std::vector<Eigen::MatrixXd> rewards, Eigen::VectorXd initial,
             std::vector<StateAction> anchors)
      : num_states_(num_states),
        num_actions_(num_actions),
        transitions_(std::move(transitions)),
        rewards_(std::move(rewards)),
        initial_(std::move(initial)),
        anchors_(std::move(anchors)) {
    validate();
  }

  /// Point-mass initial distribution on state s0.
  static Eigen::VectorXd point_mass(int num_states, int s0) {
    Eigen::VectorXd xi = Eigen::VectorXd::Zero(num_states);
    xi(s0) = 1.0;
    return xi;
  }

  int horizon() const { return static_cast<int>(transitions_.size()); }
  int num_states() const { return num_states_; }
  int num_actions() const { return num_actions_; }
  int num_pairs() const { return num_states_ * num_actions_; }
  int pair_index(int s, int a) const { return s * num_actions_ + a; }
  StateAction pair_at(int index) const { return {index / num_actions_, index % num_actions_}; }

  const Eigen::MatrixXd& transitions(int h) const { return transitions_.at(step_index(h)); }
  const Eigen::MatrixXd& rewards(int h) const { return rewards_.at(step_index(h)); }
  const Eigen::VectorXd& initial() const { return initial_; }
  StateAction anchor(int h) const { return anchors_.at(step_index(h)); }

  double reward(int h, int s, int a) const { return rewards(h)(s, a); }
  auto next_state_probs(int h, int s, int a) const {
    return transitions(h).row(pair_index(s, a));
  }

  /// Same dynamics with a replacement reward table (must satisfy the invariants).
  TabularMdp with_rewards(std::vector<Eigen::MatrixXd> rewards) const {
    return TabularMdp(num_states_, num_actions_, transitions_, std::move(rewards), initial_,
                      anchors_);
  }

  void check_policy(const Policy& pi) const {
    if (pi.horizon() != horizon())
      throw DimensionError("policy horizon " + std::to_string(pi.horizon()) +
                           " != MDP horizon " + std::to_string(horizon()));
    for (int h = 1; h <= horizon(); ++h) {
      if (pi.step(h).rows() != num_states_ || pi.step(h).cols() != num_actions_)
        throw DimensionError("policy shape mismatch at step h=" + std::to_string(h));
    }
  }

  Json to_json() const {
    Json j;
    j["horizon"] = horizon();
    j["num_states"] = num_states_;
    j["num_actions"] = num_actions_;
    Json trans = Json::array(), rew = Json::array(), anc = Json::array();
    for (int h = 1; h <= horizon(); ++h) {
      Json step = Json::array();
      for (int s = 0; s < num_states_; ++s) {
        Json per_action = Json::array();
        for (int a = 0; a < num_actions_; ++a)
          per_action.push_back(vector_to_json(next_state_probs(h, s, a).transpose()));
        step.push_back(std::move(per_action));
      }
      trans.push_back(std::move(step));
      rew.push_back(matrix_to_json(rewards(h)));
      anc.push_back(Json::array({anchor(h).state, anchor(h).action}));
    }
    j["transitions"] = std::move(trans);
    j["rewards"] = std::move(rew);
    j["initial"] = vector_to_json(initial_);
    j["anchor"] = std::move(anc);
    return j;
  }

  static TabularMdp from_json(const Json& j) {
    const int horizon = j.at("horizon").get<int>();
    const int ns = j.at("num_states").get<int>();
    const int na = j.at("num_actions").get<int>();
    if (static_cast<int>(j.at("transitions").size()) != horizon ||
        static_cast<int>(j.at("rewards").size()) != horizon ||
        static_cast<int>(j.at("anchor").size()) != horizon)
      throw DimensionError("per-step arrays must have length horizon");
    std::vector<Eigen::MatrixXd> trans, rew;
    std::vector<StateAction> anchors;
    for (int h = 0; h < horizon; ++h) {
      const auto& step = j["transitions"][h];
      if (static_cast<int>(step.size()) != ns)
        throw DimensionError("transitions at step h=" + std::to_string(h + 1) + " has wrong state count");
      Eigen::MatrixXd p(ns * na, ns);
      for (int s = 0; s < ns; ++s) {
        if (static_cast<int>(step[s].size()) != na)
          throw DimensionError("transitions at step h=" + std::to_string(h + 1) + " has wrong action count");
        for (int a = 0; a < na; ++a) {
          const auto row = vector_from_json(step[s][a]);
          if (row.size() != ns)
            throw DimensionError("transition row at step h=" + std::to_string(h + 1) + " has wrong length");
          p.row(s * na + a) = row.transpose();
        }
      }
      trans.push_back(std::move(p));
      rew.push_back(matrix_from_json(j["rewards"][h]));
      anchors.push_back({j["anchor"][h][0].get<int>(), j["anchor"][h][1].get<int>()});
    }
    return TabularMdp(ns, na, std::move(trans), std::move(rew), vector_from_json(j.at("initial")),
                      std::move(anchors));
  }

 private:
  std::size_t step_index(int h) const {
    if (h < 1 || h > horizon())
      throw RangeError("step h=" + std::to_string(h) + " outside 1.." + std::to_string(horizon()));
    return static_cast<std::size_t>(h - 1);
  }

  void validate() const {
    if (num_states_ <= 0 || num_actions_ <= 0) throw DimensionError("empty state or action set");
    if (transitions_.empty()) throw DimensionError("horizon must be positive");
    if (rewards_.size() != transitions_.size() || anchors_.size() != transitions_.size())
      throw DimensionError("transitions, rewards and anchors must all have length H");
    if (initial_.size() != num_states_) throw DimensionError("initial distribution has wrong length");
    detail::check_simplex(initial_, "initial distribution");
    for (std::size_t i = 0; i < transitions_.size(); ++i) {
      const std::string step = "step h=" + std::to_string(i + 1);
      const auto& p = transitions_[i];
      if (p.rows() != num_pairs() || p.cols() != num_states_)
        throw DimensionError("transition matrix shape mismatch at " + step);
      for (Eigen::Index r = 0; r < p.rows(); ++r)
        detail::check_simplex(p.row(r).transpose(), "transition row " + std::to_string(r) + " at " + step);
      const auto& r = rewards_[i];
      if (r.rows() != num_states_ || r.cols() != num_actions_)
        throw DimensionError("reward table shape mismatch at " + step);
      if (!(r.array() >= 0.0).all() || !(r.array() <= 1.0).all())
        throw InvariantError("rewards outside [0,1] at " + step);
      const auto& f = anchors_[i];
      if (f.state < 0 || f.state >= num_states_ || f.action < 0 || f.action >= num_actions_)
        throw RangeError("anchor out of range at " + step);
      if (r(f.state, f.action) != 0.0) throw InvariantError("anchor reward is not 0 at " + step);
    }
  }

  int num_states_ = 0;
  int num_actions_ = 0;
  std::vector<Eigen::MatrixXd> transitions_;
  std::vector<Eigen::MatrixXd> rewards_;
  Eigen::VectorXd initial_;
  std::vector<StateAction> anchors_;
};

/// Per-step tables, index h-1 holds Q_h (|S| x |A|).
using QTables = std::vector<Eigen::MatrixXd>;

/// Expected next-step value sum_{s'} P_h(s'|s,a) sum_{a'} pi_{h+1}(a'|s') Q_{h+1}(s',a'),
/// as an |S| x |A| table. `q_next` is Q_{h+1} and `pi_next` is pi_{h+1}.
inline Eigen::MatrixXd continuation_table(const TabularMdp& mdp, int h, const Eigen::MatrixXd& q_next,
                                          const Eigen::MatrixXd& pi_next) {
  const Eigen::VectorXd v_next = (pi_next.array() * q_next.array()).rowwise().sum();
  const Eigen::VectorXd flat = mdp.transitions(h) * v_next;
  Eigen::MatrixXd out(mdp.num_states(), mdp.num_actions());
  for (int s = 0; s < mdp.num_states(); ++s)
    for (int a = 0; a < mdp.num_actions(); ++a) out(s, a) = flat(mdp.pair_index(s, a));
  return out;
}

/// Q_h^pi for every step by backward recursion with Q_{H+1} = 0.
inline QTables exact_q_function(const TabularMdp& mdp, const Policy& pi) {
  mdp.check_policy(pi);
  const int H = mdp.horizon();
  QTables q(static_cast<std::size_t>(H));
  q[H - 1] = mdp.rewards(H);
  for (int h = H - 1; h >= 1; --h)
    q[h - 1] = mdp.rewards(h) + continuation_table(mdp, h, q[h], pi.step(h + 1));
  return q;
}

/// sum_s xi(s) sum_a pi_1(a|s) Q_1(s,a).
inline double integrate_first_step(const Eigen::MatrixXd& q1, const Eigen::VectorXd& xi,
                                   const Eigen::MatrixXd& pi1) {
  return xi.dot((pi1.array() * q1.array()).rowwise().sum().matrix());
}

inline double exact_policy_value(const TabularMdp& mdp, const Policy& pi) {
  const QTables q = exact_q_function(mdp, pi);
  return integrate_first_step(q[0], mdp.initial(), pi.step(1));
}

/// Distribution of s_h under pi (h = 1..H+1).
inline Eigen::VectorXd state_distribution(const TabularMdp& mdp, const Policy& pi, int h) {
  mdp.check_policy(pi);
  if (h < 1 || h > mdp.horizon() + 1)
    throw RangeError("step h=" + std::to_string(h) + " outside 1.." + std::to_string(mdp.horizon() + 1));
  Eigen::VectorXd d = mdp.initial();
  for (int t = 1; t < h; ++t) {
    Eigen::VectorXd occ(mdp.num_pairs());
    for (int s = 0; s < mdp.num_states(); ++s)
      for (int a = 0; a < mdp.num_actions(); ++a) occ(mdp.pair_index(s, a)) = d(s) * pi.prob(t, s, a);
    d = mdp.transitions(t).transpose() * occ;
  }
  return d;
}

/// Occupancy q_h^pi over flattened state-action pairs.
inline Eigen::VectorXd visitation_distribution(const TabularMdp& mdp, const Policy& pi, int h) {
  if (h < 1 || h > mdp.horizon())
    throw RangeError("step h=" + std::to_string(h) + " outside 1.." + std::to_string(mdp.horizon()));
  const Eigen::VectorXd d = state_distribution(mdp, pi, h);
  Eigen::VectorXd occ(mdp.num_pairs());
  for (int s = 0; s < mdp.num_states(); ++s)
    for (int a = 0; a < mdp.num_actions(); ++a) occ(mdp.pair_index(s, a)) = d(s) * pi.prob(h, s, a);
  return occ;
}

struct TrajectoryStep {
  int h = 0;
  int state = 0;
  int action = 0;
  double reward = 0.0;
  int next_state = 0;
};

struct Trajectory {
  std::vector<TrajectoryStep> steps;

  double total_reward() const {
    double r = 0.0;
    for (const auto& st : steps) r += st.reward;
    return r;
  }
};

inline Trajectory rollout(const TabularMdp& mdp, const Policy& pi, Rng& rng) {
  Trajectory traj;
  traj.steps.reserve(static_cast<std::size_t>(mdp.horizon()));
  const Eigen::VectorXd& xi = mdp.initial();
  int s = static_cast<int>(sample_categorical(std::span<const double>(xi.data(), xi.size()), rng));
  for (int h = 1; h <= mdp.horizon(); ++h) {
    const Eigen::RowVectorXd pa = pi.step(h).row(s);
    const int a = static_cast<int>(sample_categorical(std::span<const double>(pa.data(), pa.size()), rng));
    const Eigen::RowVectorXd ps = mdp.next_state_probs(h, s, a);
    const int next = static_cast<int>(sample_categorical(std::span<const double>(ps.data(), ps.size()), rng));
    traj.steps.push_back({h, s, a, mdp.reward(h, s, a), next});
    s = next;
  }
  return traj;
}

struct MonteCarloEstimate {
  double mean = 0.0;
  double standard_error = 0.0;
};

inline MonteCarloEstimate monte_carlo_value(const TabularMdp& mdp, const Policy& pi,
                                            std::size_t episodes, Rng& rng) {
  mdp.check_policy(pi);
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t i = 0; i < episodes; ++i) {
    const double g = rollout(mdp, pi, rng).total_reward();
    sum += g;
    sum_sq += g * g;
  }
  const double n = static_cast<double>(episodes);
  const double mean = sum / n;
  const double var = episodes > 1 ? std::max(0.0, (sum_sq - n * mean * mean) / (n - 1.0)) : 0.0;
  return {mean, std::sqrt(var / n)};
}

struct RandomMdpOptions {
  int horizon = 3;
  int num_states = 4;
  int num_actions = 2;
  /// Dirichlet concentration of each transition row; smaller is peakier.
  double concentration = 1.0;
  bool fixed_initial_state = true;
  StateAction anchor{0, 0};
};

namespace detail {

/// Marsaglia-Tsang gamma draw (shape >= 1, boosted otherwise).
inline double gamma_draw(double shape, Rng& rng) {
  if (shape < 1.0) return gamma_draw(shape + 1.0, rng) * std::pow(1.0 - uniform01(rng), 1.0 / shape);
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = standard_normal(rng);
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = 1.0 - uniform01(rng);
    if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
  }
}

inline Eigen::VectorXd dirichlet(int n, double concentration, Rng& rng) {
  Eigen::VectorXd g(n);
  for (int i = 0; i < n; ++i) g(i) = gamma_draw(concentration, rng);
  g /= g.sum();
  return g;
}

}  // namespace detail

/// Seeded random MDP: Dirichlet transition rows, uniform [0,1] rewards with the
/// anchor entry forced to 0 at every step.
inline TabularMdp random_tabular_mdp(const RandomMdpOptions& opt, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  std::vector<Eigen::MatrixXd> trans, rew;
  std::vector<StateAction> anchors;
  for (int h = 0; h < opt.horizon; ++h) {
    Eigen::MatrixXd p(opt.num_states * opt.num_actions, opt.num_states);
    for (Eigen::Index r = 0; r < p.rows(); ++r)
      p.row(r) = detail::dirichlet(opt.num_states, opt.concentration, rng).transpose();
    // Renormalize so every row sums to 1 to within a couple of ulps.
    for (Eigen::Index r = 0; r < p.rows(); ++r) p.row(r) /= p.row(r).sum();
    Eigen::MatrixXd r(opt.num_states, opt.num_actions);
    for (int s = 0; s < opt.num_states; ++s)
      for (int a = 0; a < opt.num_actions; ++a) r(s, a) = uniform01(rng);
    r(opt.anchor.state, opt.anchor.action) = 0.0;
    trans.push_back(std::move(p));
    rew.push_back(std::move(r));
    anchors.push_back(opt.anchor);
  }
  Eigen::VectorXd xi = opt.fixed_initial_state
                           ? TabularMdp::point_mass(opt.num_states, 0)
                           : Eigen::VectorXd::Constant(opt.num_states, 1.0 / opt.num_states);
  return TabularMdp(opt.num_states, opt.num_actions, std::move(trans), std::move(rew), std::move(xi),
                    std::move(anchors));
}

}  // namespace pbfqe
