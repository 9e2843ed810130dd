#pragma once

// Fitted Q-evaluation with a learned reward.
//
// For h = H, ..., 1 the step-h Q-function is regressed onto
//   y = rhat_h(s, a) + sum_a' pi_{h+1}(a' | s') Qhat_{h+1}(s', a'),   Qhat_{H+1} = 0,
// over the step-h transition slice, and the value estimate integrates Qhat_1
// against xi and pi_1. Q-functions are evaluated on the finite support, so
// every fitted step is also kept as an |S| x |A| table.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pbfqe/error.hpp"
#include "pbfqe/mdp.hpp"
#include "pbfqe/relu_net.hpp"
#include "pbfqe/reward_mle.hpp"
#include "pbfqe/synthetic_env.hpp"
#include "pbfqe/training.hpp"

namespace pbfqe {

enum class QMode {
  kNeural,   // ReLU network on embedded inputs
  kTabular,  // one-hot inputs solved by closed-form least squares
};

enum class RewardSource {
  kLearned,  // fit from preferences
  kOracle,   // true reward table
};

struct FqeConfig {
  QMode mode = QMode::kNeural;
  /// Output bounds are overwritten with [-H, H].
  NetConfig net;
  OptimizerConfig opt;
};

inline FqeConfig default_fqe() {
  FqeConfig c;
  c.net.hidden_layers = 2;
  c.net.width = 32;
  c.net.weight_bound = 10.0;
  c.opt.learning_rate = 1e-2;
  c.opt.epochs = 1500;
  return c;
}

/// rhat + sum_a' pi_next(a' | s') q_next(s', a'). An empty q_next means the
/// horizon has been reached and the continuation is zero.
inline double regression_target(double reward_hat, const Eigen::MatrixXd& q_next, const Eigen::MatrixXd& pi_next,
                                int next_state) {
  if (q_next.size() == 0) return reward_hat;
  double cont = 0.0;
  for (Eigen::Index a = 0; a < q_next.cols(); ++a) cont += pi_next(next_state, a) * q_next(next_state, a);
  return reward_hat + cont;
}

/// Regression targets for a step slice; reward_hat is indexed by flattened pair.
inline Eigen::VectorXd regression_targets(const std::vector<TransitionSample>& slice, const Eigen::VectorXd& reward_hat,
                                          const Eigen::MatrixXd& q_next, const Eigen::MatrixXd& pi_next) {
  Eigen::VectorXd y(static_cast<Eigen::Index>(slice.size()));
  for (std::size_t k = 0; k < slice.size(); ++k)
    y(static_cast<Eigen::Index>(k)) = regression_target(reward_hat(slice[k].pair), q_next, pi_next, slice[k].next_state);
  return y;
}

struct QStepFit {
  Eigen::MatrixXd table;  // |S| x |A|
  std::optional<ReluNetwork> network;
  double training_mse = 0.0;
};

/// Least squares on one-hot features: the per-pair mean target, 0 for pairs
/// that never occur (the minimum-norm solution).
inline QStepFit fit_q_tabular(const std::vector<TransitionSample>& slice, const Eigen::VectorXd& targets, int num_states,
                              int num_actions) {
  const int np = num_states * num_actions;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(np), count = Eigen::VectorXd::Zero(np);
  for (std::size_t k = 0; k < slice.size(); ++k) {
    sum(slice[k].pair) += targets(static_cast<Eigen::Index>(k));
    count(slice[k].pair) += 1.0;
  }
  QStepFit fit;
  fit.table = Eigen::MatrixXd::Zero(num_states, num_actions);
  for (int p = 0; p < np; ++p)
    if (count(p) > 0) fit.table(p / num_actions, p % num_actions) = sum(p) / count(p);
  double sse = 0.0;
  for (std::size_t k = 0; k < slice.size(); ++k) {
    const double r = fit.table(slice[k].pair / num_actions, slice[k].pair % num_actions) - targets(static_cast<Eigen::Index>(k));
    sse += r * r;
  }
  fit.training_mse = sse / static_cast<double>(slice.size());
  return fit;
}

/// One backward step: regress onto the Bellman targets built from q_next.
/// `points` holds the embedding of every flattened pair.
inline QStepFit fit_q_step(const Eigen::MatrixXd& points, int num_states, int num_actions,
                           const std::vector<TransitionSample>& slice, const Eigen::VectorXd& reward_hat,
                           const Eigen::MatrixXd& q_next, const Eigen::MatrixXd& pi_next, const FqeConfig& cfg, int h,
                           int horizon) {
  if (slice.empty()) throw RangeError("transition slice at step h=" + std::to_string(h) + " is empty");
  const Eigen::VectorXd y = regression_targets(slice, reward_hat, q_next, pi_next);
  if (cfg.mode == QMode::kTabular) return fit_q_tabular(slice, y, num_states, num_actions);

  std::vector<int> point_of;
  point_of.reserve(slice.size());
  for (const auto& t : slice) point_of.push_back(t.pair);
  SquaredErrorObjective obj(points, std::move(point_of), y);
  if (cfg.opt.batch_size == 0) obj = obj.grouped();

  NetConfig net_cfg = cfg.net;
  net_cfg.input_dim = static_cast<int>(points.cols());
  net_cfg.output_lo = -static_cast<double>(horizon);
  net_cfg.output_hi = static_cast<double>(horizon);
  OptimizerConfig opt = cfg.opt;
  opt.seed = derive_seed(cfg.opt.seed, {0x71ULL, static_cast<std::uint64_t>(h), 1});
  const ReluNetwork init(net_cfg, derive_seed(cfg.opt.seed, {0x71ULL, static_cast<std::uint64_t>(h), 0}));
  TrainResult tr;
  try {
    tr = train(init, obj, opt);
  } catch (const DivergenceError& e) {
    throw DivergenceError("Q fit at step h=" + std::to_string(h) + ": " + e.what());
  }
  QStepFit fit;
  const Eigen::VectorXd values = tr.network.forward_batch(points);
  fit.table = Eigen::MatrixXd(num_states, num_actions);
  for (int p = 0; p < num_states * num_actions; ++p) fit.table(p / num_actions, p % num_actions) = values(p);
  fit.training_mse = tr.best_loss;
  fit.network = std::move(tr.network);
  return fit;
}

/// Fitted Q-functions for steps 1..H (tables always present).
struct FittedQ {
  std::vector<QStepFit> steps;
  const Eigen::MatrixXd& table(int h) const { return steps.at(static_cast<std::size_t>(h - 1)).table; }
  QTables tables() const {
    QTables t;
    for (const auto& s : steps) t.push_back(s.table);
    return t;
  }
};

inline double estimate_value(const Eigen::MatrixXd& q1, const Eigen::VectorXd& xi, const Eigen::MatrixXd& pi1) {
  detail::check_simplex(xi, "initial distribution");
  for (Eigen::Index s = 0; s < pi1.rows(); ++s) detail::check_simplex(pi1.row(s).transpose(), "pi_1");
  return integrate_first_step(q1, xi, pi1);
}

/// Qhat_h - r_h - P_h^pi Qhat_{h+1} under the true model, as an |S| x |A| table.
inline Eigen::MatrixXd bellman_residual_table(const TabularMdp& mdp, const QTables& q, const Policy& pi, int h) {
  Eigen::MatrixXd res = q.at(static_cast<std::size_t>(h - 1)) - mdp.rewards(h);
  if (h < mdp.horizon()) res -= continuation_table(mdp, h, q[static_cast<std::size_t>(h)], pi.step(h + 1));
  return res;
}

/// E_{(s,a) ~ weights}[residual^2] with weights over flattened pairs.
inline double weighted_mean_square(const TabularMdp& mdp, const Eigen::MatrixXd& table, const Eigen::VectorXd& weights) {
  double acc = 0.0;
  for (int s = 0; s < mdp.num_states(); ++s)
    for (int a = 0; a < mdp.num_actions(); ++a) acc += weights(mdp.pair_index(s, a)) * table(s, a) * table(s, a);
  return acc;
}

struct PipelineConfig {
  RewardSource reward = RewardSource::kLearned;
  RewardFitConfig reward_fit = default_reward_fit();
  FqeConfig fqe = default_fqe();
  /// Pairs drawn from eta_h to estimate the reward MSE.
  std::size_t reward_eval_samples = 20000;
  std::uint64_t seed = 0;
};

struct EvalReport {
  double v_hat = 0.0;
  double v_true = 0.0;
  std::vector<double> reward_losses;     // final NLL per step (empty for oracle reward)
  std::vector<double> q_losses;          // training MSE per step
  std::vector<double> bellman_residuals; // E_{q_h^{pi_0}}[(Qhat_h - T_h Qhat_{h+1})^2] under the true model
  std::vector<MseEstimate> reward_mse;   // per step, under eta_h
  std::vector<std::size_t> reward_nonzeros;

  double abs_error() const { return std::abs(v_hat - v_true); }
  double reward_mse_mean() const {
    if (reward_mse.empty()) return 0.0;
    double s = 0.0;
    for (const auto& m : reward_mse) s += m.mean;
    return s / static_cast<double>(reward_mse.size());
  }

  Json to_json() const {
    Json mse = Json::array();
    for (const auto& m : reward_mse) mse.push_back({{"mean", m.mean}, {"stderr", m.standard_error}});
    return {{"v_hat", v_hat},
            {"v_true", v_true},
            {"abs_err", abs_error()},
            {"reward_losses", reward_losses},
            {"q_losses", q_losses},
            {"bellman_residuals", bellman_residuals},
            {"reward_mse", std::move(mse)},
            {"reward_nonzeros", reward_nonzeros}};
  }
};

struct PipelineResult {
  EvalReport report;
  FittedQ q;
  std::optional<LearnedReward> reward;
  std::vector<Eigen::VectorXd> reward_tables;  // rhat_h per flattened pair
};

/// Output of the reward-learning stage: rhat_h tables plus diagnostics.
struct RewardStage {
  std::optional<LearnedReward> reward;
  std::vector<Eigen::VectorXd> tables;  // rhat_h per flattened pair
  std::vector<double> losses;
  std::vector<MseEstimate> mse;
  std::vector<std::size_t> nonzeros;
};

/// Fits the reward on every step (or copies the true reward in oracle mode)
/// and measures the squared error under eta.
inline RewardStage run_reward_stage(const EmbeddedMdp& env, const PreferenceDataset& preferences,
                                    const PairSampler& eta, const PipelineConfig& cfg) {
  const TabularMdp& mdp = env.latent();
  const int H = mdp.horizon();
  RewardStage st;
  if (cfg.reward == RewardSource::kOracle) {
    for (int h = 1; h <= H; ++h) {
      st.tables.push_back(flatten_rewards(mdp, h));
      st.mse.push_back({0.0, 0.0});
    }
    return st;
  }
  if (static_cast<int>(preferences.steps.size()) != H)
    throw DimensionError("preference dataset does not cover steps 1.." + std::to_string(H));
  RewardFitConfig rc = cfg.reward_fit;
  rc.opt.seed = derive_seed(cfg.seed, {0x524557ULL});
  try {
    st.reward = fit_reward(env, preferences, rc);
  } catch (const Error& e) {
    throw Error(std::string("stage fit_reward: ") + e.what());
  }
  for (int h = 1; h <= H; ++h) {
    st.tables.push_back(st.reward->table(h));
    st.losses.push_back(st.reward->training_loss(h));
    st.nonzeros.push_back(st.reward->nonzeros(h));
  }
  st.mse = reward_mse(*st.reward, mdp, draw_pairs(eta, cfg.reward_eval_samples, derive_seed(cfg.seed, {0x4d5345ULL})));
  return st;
}

/// Backward Q fits on `transitions` against a finished reward stage, then the
/// value integral and the diagnostics under the true model.
inline PipelineResult run_fqe_stage(const EmbeddedMdp& env, const TransitionDataset& transitions,
                                    const Policy& target, const Policy& behavior, RewardStage reward,
                                    const PipelineConfig& cfg) {
  const TabularMdp& mdp = env.latent();
  const int H = mdp.horizon();
  mdp.check_policy(target);
  if (static_cast<int>(transitions.steps.size()) != H)
    throw DimensionError("transition dataset does not cover steps 1.." + std::to_string(H));
  if (static_cast<int>(reward.tables.size()) != H) throw DimensionError("reward stage does not cover the horizon");

  PipelineResult out;
  out.report.reward_losses = std::move(reward.losses);
  out.report.reward_mse = std::move(reward.mse);
  out.report.reward_nonzeros = std::move(reward.nonzeros);
  out.reward = std::move(reward.reward);
  out.reward_tables = std::move(reward.tables);

  FqeConfig fc = cfg.fqe;
  fc.opt.seed = derive_seed(cfg.seed, {0x465145ULL});
  out.q.steps.resize(static_cast<std::size_t>(H));
  out.report.q_losses.assign(static_cast<std::size_t>(H), 0.0);
  const Eigen::MatrixXd none;
  for (int h = H; h >= 1; --h) {
    const Eigen::MatrixXd& q_next = h == H ? none : out.q.table(h + 1);
    const Eigen::MatrixXd& pi_next = h == H ? none : target.step(h + 1);
    try {
      out.q.steps[static_cast<std::size_t>(h - 1)] =
          fit_q_step(env.embedding(), mdp.num_states(), mdp.num_actions(), transitions.step(h),
                     out.reward_tables[static_cast<std::size_t>(h - 1)], q_next, pi_next, fc, h, H);
    } catch (const Error& e) {
      throw Error(std::string("stage fit_q_step: ") + e.what());
    }
    out.report.q_losses[static_cast<std::size_t>(h - 1)] = out.q.steps[static_cast<std::size_t>(h - 1)].training_mse;
  }

  out.report.v_hat = estimate_value(out.q.table(1), mdp.initial(), target.step(1));
  out.report.v_true = exact_policy_value(mdp, target);
  const QTables tables = out.q.tables();
  for (int h = 1; h <= H; ++h)
    out.report.bellman_residuals.push_back(weighted_mean_square(
        mdp, bellman_residual_table(mdp, tables, target, h), visitation_distribution(mdp, behavior, h)));
  return out;
}

/// Preference-based FQE end to end: reward fit for all steps, backward Q
/// fits, then the value integral. behavior and eta are used only for the
/// diagnostics in the report.
inline PipelineResult run_pipeline(const EmbeddedMdp& env, const TransitionDataset& transitions,
                                   const PreferenceDataset& preferences, const Policy& target, const Policy& behavior,
                                   const PairSampler& eta, const PipelineConfig& cfg) {
  env.latent().check_policy(target);
  return run_fqe_stage(env, transitions, target, behavior, run_reward_stage(env, preferences, eta, cfg), cfg);
}

}  // namespace pbfqe
