#pragma once

// Empirical objectives and projected mini-batch training for ReluNetwork.
//
// Objectives are defined over a table of distinct input points. Each example
// refers to points by row index, so a mini-batch only evaluates the network
// on the distinct points it touches. This keeps the cost of a step
// independent of how many examples share the same input, which is the
// common case on finite state-action supports.

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "pbfqe/choice_model.hpp"
#include "pbfqe/error.hpp"
#include "pbfqe/relu_net.hpp"
#include "pbfqe/rng.hpp"

namespace pbfqe {

template <typename O>
concept Objective = requires(const O& o, std::size_t k, std::vector<int>& out,
                             std::span<const std::size_t> batch, const Eigen::VectorXd& values,
                             Eigen::VectorXd* grad) {
  { o.size() } -> std::convertible_to<std::size_t>;
  { o.points() } -> std::convertible_to<const Eigen::MatrixXd&>;
  o.append_points(k, out);
  /// Weighted mean loss over the batch; adds d loss / d values into *grad.
  { o.loss(batch, values, grad) } -> std::convertible_to<double>;
};

/// Mean squared error sum_k w_k (f(x_{p_k}) - y_k)^2 / sum_k w_k + offset.
class SquaredErrorObjective {
 public:
  SquaredErrorObjective() = default;

  /// One example per row of X.
  SquaredErrorObjective(Eigen::MatrixXd X, Eigen::VectorXd targets) : points_(std::move(X)) {
    if (points_.rows() != targets.size()) throw DimensionError("inputs and targets differ in length");
    point_of_.resize(static_cast<std::size_t>(targets.size()));
    std::iota(point_of_.begin(), point_of_.end(), 0);
    targets_ = std::move(targets);
    weights_ = Eigen::VectorXd::Ones(targets_.size());
  }

  /// Examples refer to rows of `points`.
  SquaredErrorObjective(Eigen::MatrixXd points, std::vector<int> point_of, Eigen::VectorXd targets)
      : points_(std::move(points)), point_of_(std::move(point_of)), targets_(std::move(targets)) {
    if (static_cast<Eigen::Index>(point_of_.size()) != targets_.size())
      throw DimensionError("point indices and targets differ in length");
    for (int p : point_of_)
      if (p < 0 || p >= points_.rows()) throw RangeError("point index out of range");
    weights_ = Eigen::VectorXd::Ones(targets_.size());
  }

  /// Collapses repeated points to their mean target with a count weight. The
  /// full-batch loss is unchanged: the within-point variance is kept as a
  /// constant offset.
  SquaredErrorObjective grouped() const {
    const auto np = static_cast<std::size_t>(points_.rows());
    std::vector<double> count(np, 0.0), sum(np, 0.0);
    for (std::size_t k = 0; k < point_of_.size(); ++k) {
      const auto p = static_cast<std::size_t>(point_of_[k]);
      count[p] += weights_(static_cast<Eigen::Index>(k));
      sum[p] += weights_(static_cast<Eigen::Index>(k)) * targets_(static_cast<Eigen::Index>(k));
    }
    SquaredErrorObjective g;
    g.points_ = points_;
    std::vector<double> t, w;
    for (std::size_t p = 0; p < np; ++p) {
      if (count[p] == 0.0) continue;
      g.point_of_.push_back(static_cast<int>(p));
      t.push_back(sum[p] / count[p]);
      w.push_back(count[p]);
    }
    g.targets_ = Eigen::Map<Eigen::VectorXd>(t.data(), static_cast<Eigen::Index>(t.size()));
    g.weights_ = Eigen::Map<Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
    double within = 0.0;
    for (std::size_t k = 0; k < point_of_.size(); ++k) {
      const auto p = static_cast<std::size_t>(point_of_[k]);
      const double d = targets_(static_cast<Eigen::Index>(k)) - sum[p] / count[p];
      within += weights_(static_cast<Eigen::Index>(k)) * d * d;
    }
    g.offset_ = offset_ + within / weights_.sum();
    return g;
  }

  std::size_t size() const { return point_of_.size(); }
  const Eigen::MatrixXd& points() const { return points_; }
  const Eigen::VectorXd& targets() const { return targets_; }
  const std::vector<int>& point_of() const { return point_of_; }
  void append_points(std::size_t k, std::vector<int>& out) const { out.push_back(point_of_[k]); }

  double loss(std::span<const std::size_t> batch, const Eigen::VectorXd& values, Eigen::VectorXd* grad) const {
    double wsum = 0.0;
    for (std::size_t k : batch) wsum += weights_(static_cast<Eigen::Index>(k));
    double total = 0.0;
    for (std::size_t k : batch) {
      const auto i = static_cast<Eigen::Index>(k);
      const int p = point_of_[k];
      const double r = values(p) - targets_(i);
      total += weights_(i) * r * r;
      if (grad) (*grad)(p) += 2.0 * weights_(i) * r / wsum;
    }
    return total / wsum + offset_;
  }

 private:
  Eigen::MatrixXd points_;
  std::vector<int> point_of_;
  Eigen::VectorXd targets_;
  Eigen::VectorXd weights_;
  double offset_ = 0.0;
};

/// Mean negative log-likelihood of softmax choices among three candidates,
/// each candidate being a row of `points`.
class ChoiceObjective {
 public:
  ChoiceObjective() = default;

  ChoiceObjective(Eigen::MatrixXd points, std::vector<std::array<int, kCandidates>> candidates,
                  std::vector<int> labels)
      : points_(std::move(points)), candidates_(std::move(candidates)), labels_(std::move(labels)),
        weights_(candidates_.size(), 1.0) {
    if (candidates_.size() != labels_.size()) throw DimensionError("candidates and labels differ in length");
    for (std::size_t k = 0; k < candidates_.size(); ++k) {
      for (int p : candidates_[k])
        if (p < 0 || p >= points_.rows()) throw RangeError("candidate point index out of range");
      if (labels_[k] < 0 || labels_[k] >= kCandidates) throw RangeError("choice label out of range");
    }
  }

  /// Merges identical (candidates, label) observations into weighted ones.
  /// The full-batch loss is unchanged.
  ChoiceObjective grouped() const {
    std::vector<std::size_t> order(candidates_.size());
    std::iota(order.begin(), order.end(), 0);
    const auto key = [&](std::size_t k) { return std::tuple(candidates_[k], labels_[k]); };
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
    ChoiceObjective g;
    g.points_ = points_;
    for (std::size_t k : order) {
      if (!g.candidates_.empty() && std::tuple(g.candidates_.back(), g.labels_.back()) == key(k)) {
        g.weights_.back() += weights_[k];
      } else {
        g.candidates_.push_back(candidates_[k]);
        g.labels_.push_back(labels_[k]);
        g.weights_.push_back(weights_[k]);
      }
    }
    return g;
  }

  std::size_t size() const { return candidates_.size(); }
  const Eigen::MatrixXd& points() const { return points_; }
  void append_points(std::size_t k, std::vector<int>& out) const {
    for (int p : candidates_[k]) out.push_back(p);
  }

  double loss(std::span<const std::size_t> batch, const Eigen::VectorXd& values, Eigen::VectorXd* grad) const {
    double wsum = 0.0;
    for (std::size_t k : batch) wsum += weights_[k];
    double total = 0.0;
    for (std::size_t k : batch) {
      ScoredChoice c;
      for (int i = 0; i < kCandidates; ++i) c.rewards[static_cast<std::size_t>(i)] = values(candidates_[k][static_cast<std::size_t>(i)]);
      c.label = labels_[k];
      total += weights_[k] * negative_log_likelihood(std::span<const ScoredChoice>(&c, 1));
      if (grad) {
        const auto g = nll_reward_gradient(c);
        for (int i = 0; i < kCandidates; ++i)
          (*grad)(candidates_[k][static_cast<std::size_t>(i)]) += weights_[k] * g[static_cast<std::size_t>(i)] / wsum;
      }
    }
    return total / wsum;
  }

 private:
  Eigen::MatrixXd points_;
  std::vector<std::array<int, kCandidates>> candidates_;
  std::vector<int> labels_;
  std::vector<double> weights_;
};

struct LossAndGradient {
  double loss = 0.0;
  Eigen::VectorXd gradient;
};

/// Reusable scratch space for batched evaluation on a subset of points.
class PointEvaluator {
 public:
  explicit PointEvaluator(std::size_t num_points)
      : slot_(num_points, -1), values_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(num_points))),
        grad_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(num_points))) {}

  /// `boundary_penalty` adds lambda * mean_j dist(raw_j, [lo, hi])^2 over the
  /// touched points. It vanishes inside the output bound and lets points that
  /// escaped the clip recover a gradient.
  template <Objective O>
  LossAndGradient evaluate(const ReluNetwork& net, const O& obj, std::span<const std::size_t> batch,
                           bool with_gradient, double boundary_penalty = 0.0) {
    touched_.clear();
    scratch_.clear();
    for (std::size_t k : batch) obj.append_points(k, scratch_);
    for (int p : scratch_) {
      if (slot_[static_cast<std::size_t>(p)] < 0) {
        slot_[static_cast<std::size_t>(p)] = static_cast<int>(touched_.size());
        touched_.push_back(p);
      }
    }
    Eigen::MatrixXd X(static_cast<Eigen::Index>(touched_.size()), obj.points().cols());
    for (std::size_t j = 0; j < touched_.size(); ++j) X.row(static_cast<Eigen::Index>(j)) = obj.points().row(touched_[j]);
    const ForwardCache cache = net.forward_cached(X);
    for (std::size_t j = 0; j < touched_.size(); ++j) values_(touched_[j]) = cache.output(static_cast<Eigen::Index>(j));

    LossAndGradient out;
    out.loss = obj.loss(batch, values_, with_gradient ? &grad_ : nullptr);
    if (with_gradient) {
      Eigen::VectorXd dout(static_cast<Eigen::Index>(touched_.size()));
      for (std::size_t j = 0; j < touched_.size(); ++j) dout(static_cast<Eigen::Index>(j)) = grad_(touched_[j]);
      if (boundary_penalty > 0.0) {
        Eigen::VectorXd draw = dout;
        const double n = static_cast<double>(touched_.size());
        for (Eigen::Index j = 0; j < draw.size(); ++j) {
          const double r = cache.raw(j);
          const bool inside = r >= net.output_lo() && r <= net.output_hi();
          if (!inside) draw(j) = 2.0 * boundary_penalty * (r - net.clip(r)) / n;
        }
        out.gradient = net.backward_raw(cache, draw);
      } else {
        out.gradient = net.backward(cache, dout);
      }
    }
    if (boundary_penalty > 0.0) {
      double pen = 0.0;
      for (Eigen::Index j = 0; j < cache.raw.size(); ++j) {
        const double e = cache.raw(j) - net.clip(cache.raw(j));
        pen += e * e;
      }
      out.loss += boundary_penalty * pen / static_cast<double>(touched_.size());
    }
    for (int p : touched_) {
      slot_[static_cast<std::size_t>(p)] = -1;
      grad_(p) = 0.0;
    }
    return out;
  }

 private:
  std::vector<int> slot_;
  std::vector<int> touched_;
  std::vector<int> scratch_;
  Eigen::VectorXd values_;
  Eigen::VectorXd grad_;
};

inline std::vector<std::size_t> all_examples(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

/// Exact gradient of the batch loss with respect to the flat parameters.
template <Objective O>
LossAndGradient loss_gradient(const ReluNetwork& net, const O& obj, std::span<const std::size_t> batch) {
  if (batch.empty()) throw RangeError("loss_gradient needs a nonempty batch");
  PointEvaluator ev(static_cast<std::size_t>(obj.points().rows()));
  return ev.evaluate(net, obj, batch, true);
}

template <Objective O>
LossAndGradient loss_gradient(const ReluNetwork& net, const O& obj) {
  const auto idx = all_examples(obj.size());
  return loss_gradient(net, obj, idx);
}

template <Objective O>
double training_loss(const ReluNetwork& net, const O& obj) {
  if (obj.size() == 0) throw RangeError("empty objective");
  PointEvaluator ev(static_cast<std::size_t>(obj.points().rows()));
  const auto idx = all_examples(obj.size());
  return ev.evaluate(net, obj, idx, false).loss;
}

enum class OptimizerMethod { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerMethod method = OptimizerMethod::kAdam;
  double learning_rate = 1e-2;
  /// 0 means full batch.
  std::size_t batch_size = 0;
  int epochs = 500;
  std::uint64_t seed = 0;
  /// Project onto the weight bound after every this many steps (and at the
  /// end of every epoch).
  int projection_every = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Weight of the quadratic penalty on raw outputs outside the clip range.
  double boundary_penalty = 0.0;

  void validate() const {
    if (!(learning_rate > 0.0) || epochs < 1 || projection_every < 1 || !(boundary_penalty >= 0.0))
      throw RangeError("optimizer needs positive learning rate, epochs and projection cadence");
  }

  Json to_json() const {
    return {{"method", method == OptimizerMethod::kAdam ? "adam" : "sgd"},
            {"learning_rate", learning_rate},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"seed", seed},
            {"projection_every", projection_every},
            {"boundary_penalty", boundary_penalty}};
  }
};

struct TrainResult {
  ReluNetwork network;
  double best_loss = std::numeric_limits<double>::infinity();
  int best_epoch = 0;  // 0 is the initial iterate
  std::vector<double> epoch_losses;
};

/// Projected mini-batch descent. Returns the (projected) iterate with the
/// lowest full training loss seen at epoch boundaries, including the start.
template <Objective O>
TrainResult train(ReluNetwork net, const O& obj, const OptimizerConfig& opt) {
  opt.validate();
  if (obj.size() == 0) throw RangeError("training set is empty");
  net.project();
  Rng rng = make_rng(opt.seed);
  PointEvaluator ev(static_cast<std::size_t>(obj.points().rows()));
  std::vector<std::size_t> order = all_examples(obj.size());
  const std::size_t batch = opt.batch_size == 0 ? obj.size() : std::min(opt.batch_size, obj.size());
  const bool full = batch == obj.size();

  Eigen::VectorXd theta = net.parameters();
  Eigen::VectorXd m = Eigen::VectorXd::Zero(theta.size());
  Eigen::VectorXd v = Eigen::VectorXd::Zero(theta.size());
  long step = 0;

  TrainResult result;
  const auto consider = [&](int epoch, double loss) {
    if (!std::isfinite(loss))
      throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch));
    result.epoch_losses.push_back(loss);
    if (loss < result.best_loss) {
      result.best_loss = loss;
      result.best_epoch = epoch;
      result.network = net;
    }
  };
  consider(0, ev.evaluate(net, obj, order, false, opt.boundary_penalty).loss);

  for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
    if (!full) shuffle(order, rng);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t len = std::min(batch, order.size() - start);
      const auto lg = ev.evaluate(net, obj, std::span<const std::size_t>(order).subspan(start, len), true,
                                    opt.boundary_penalty);
      if (!std::isfinite(lg.loss) || !lg.gradient.allFinite())
        throw DivergenceError("non-finite loss or gradient at epoch " + std::to_string(epoch));
      ++step;
      if (opt.method == OptimizerMethod::kAdam) {
        m = opt.beta1 * m + (1.0 - opt.beta1) * lg.gradient;
        v = opt.beta2 * v + (1.0 - opt.beta2) * lg.gradient.cwiseAbs2();
        const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
        theta.array() -= opt.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + opt.epsilon);
      } else {
        theta -= opt.learning_rate * lg.gradient;
      }
      net.set_parameters(theta);
      if (step % opt.projection_every == 0) {
        net.project();
        theta = net.parameters();
      }
    }
    net.project();
    theta = net.parameters();
    consider(epoch, ev.evaluate(net, obj, order, false, opt.boundary_penalty).loss);
  }
  return result;
}

}  // namespace pbfqe
