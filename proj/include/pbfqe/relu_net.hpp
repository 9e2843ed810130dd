#pragma once

// Feed-forward ReLU networks with bounded weights and clipped outputs:
//
//   f(x) = clip( W_L ReLU( ... ReLU(W_1 x + b_1) ... ) + b_L , [lo, hi] )
//
// The weight bound tau is enforced by `project`, which clamps every entry of
// every W_i and b_i into [-tau, tau]. Parameters are exposed as one flat
// vector laid out layer by layer, each layer as row-major W_i followed by b_i.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pbfqe/error.hpp"
#include "pbfqe/json_io.hpp"
#include "pbfqe/rng.hpp"

namespace pbfqe {

struct NetConfig {
  int input_dim = 1;
  /// Number of hidden ReLU layers; 0 gives an affine map.
  int hidden_layers = 2;
  int width = 32;
  /// tau: bound on every weight and bias entry.
  double weight_bound = 10.0;
  double output_lo = -1.0;
  double output_hi = 1.0;
  /// Multiplier on the output layer's initial weights.
  double output_init_scale = 0.1;

  Json to_json() const {
    return {{"input_dim", input_dim},         {"hidden_layers", hidden_layers},
            {"width", width},                 {"weight_bound", weight_bound},
            {"output_lo", output_lo},         {"output_hi", output_hi},
            {"output_init_scale", output_init_scale}};
  }
};

/// Architecture sizing that grows with the sample count n:
/// depth ~ alpha/(2 alpha + d) log n, width ~ n^{d/(2 alpha + d)},
/// tau = max(B, 1, sqrt(d), reach^2).
struct ScalingOptions {
  double depth_scale = 1.0;
  double width_scale = 1.0;
  int min_depth = 1;
  int max_depth = 6;
  int min_width = 4;
  int max_width = 256;
  double coordinate_bound = 1.0;  // B
  double reach = 0.0;             // omega; 0 drops the term
};

inline NetConfig paper_scaling(std::size_t samples, int intrinsic_dim, double smoothness, int input_dim,
                               double output_lo, double output_hi, const ScalingOptions& opt = {}) {
  if (samples < 2 || intrinsic_dim < 1 || !(smoothness > 0.0))
    throw RangeError("paper_scaling needs samples >= 2, d >= 1, alpha > 0");
  const double n = static_cast<double>(samples);
  const double d = intrinsic_dim;
  const double a = smoothness;
  NetConfig cfg;
  cfg.input_dim = input_dim;
  cfg.hidden_layers = std::clamp(static_cast<int>(std::lround(opt.depth_scale * a / (2 * a + d) * std::log(n))),
                                 opt.min_depth, opt.max_depth);
  cfg.width = std::clamp(static_cast<int>(std::ceil(opt.width_scale * std::pow(n, d / (2 * a + d)))),
                         opt.min_width, opt.max_width);
  cfg.weight_bound = std::max({opt.coordinate_bound, 1.0, std::sqrt(d), opt.reach * opt.reach});
  cfg.output_lo = output_lo;
  cfg.output_hi = output_hi;
  return cfg;
}

/// Activations kept by a batched forward pass for backpropagation.
struct ForwardCache {
  std::vector<Eigen::MatrixXd> activations;  // A_0 = X^T, A_i = ReLU(Z_i), width x n
  std::vector<Eigen::MatrixXd> pre;          // Z_i for hidden layers
  Eigen::RowVectorXd raw;                    // unclipped output
  Eigen::VectorXd output;                    // clipped output
};

class ReluNetwork {
 public:
  ReluNetwork() = default;

  /// Random initialization (He-normal hidden layers), projected onto the bound.
  ReluNetwork(const NetConfig& cfg, std::uint64_t seed)
      : lo_(cfg.output_lo), hi_(cfg.output_hi), tau_(cfg.weight_bound) {
    check_config(cfg);
    Rng rng = make_rng(seed);
    int fan_in = cfg.input_dim;
    for (int layer = 0; layer <= cfg.hidden_layers; ++layer) {
      const bool last = layer == cfg.hidden_layers;
      const int fan_out = last ? 1 : cfg.width;
      const double sd = last ? cfg.output_init_scale / std::sqrt(fan_in) : std::sqrt(2.0 / fan_in);
      Eigen::MatrixXd w(fan_out, fan_in);
      for (Eigen::Index r = 0; r < w.rows(); ++r)
        for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = sd * standard_normal(rng);
      Eigen::VectorXd b = Eigen::VectorXd::Zero(fan_out);
      if (last) b(0) = 0.5 * (lo_ + hi_);
      weights_.push_back(std::move(w));
      biases_.push_back(std::move(b));
      fan_in = fan_out;
    }
    project();
  }

  ReluNetwork(std::vector<Eigen::MatrixXd> weights, std::vector<Eigen::VectorXd> biases, double output_lo,
              double output_hi, double weight_bound)
      : weights_(std::move(weights)), biases_(std::move(biases)), lo_(output_lo), hi_(output_hi),
        tau_(weight_bound) {
    if (weights_.empty() || weights_.size() != biases_.size())
      throw DimensionError("network needs matching weight and bias lists");
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      if (weights_[i].rows() != biases_[i].size())
        throw DimensionError("layer " + std::to_string(i + 1) + ": bias length != rows");
      if (i > 0 && weights_[i].cols() != weights_[i - 1].rows())
        throw DimensionError("layer " + std::to_string(i + 1) + ": input width mismatch");
    }
    if (weights_.back().rows() != 1) throw DimensionError("output layer must be scalar");
    if (!(lo_ <= hi_) || !(tau_ > 0.0)) throw RangeError("invalid output or weight bound");
  }

  int input_dim() const { return static_cast<int>(weights_.front().cols()); }
  int num_layers() const { return static_cast<int>(weights_.size()); }
  double output_lo() const { return lo_; }
  double output_hi() const { return hi_; }
  double weight_bound() const { return tau_; }
  const std::vector<Eigen::MatrixXd>& weights() const { return weights_; }
  const std::vector<Eigen::VectorXd>& biases() const { return biases_; }

  double clip(double v) const { return std::clamp(v, lo_, hi_); }

  double forward(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    if (x.size() != input_dim())
      throw DimensionError("input has dimension " + std::to_string(x.size()) + ", network expects " +
                           std::to_string(input_dim()));
    Eigen::VectorXd a = x;
    for (std::size_t i = 0; i + 1 < weights_.size(); ++i)
      a = (weights_[i] * a + biases_[i]).cwiseMax(0.0);
    return clip((weights_.back() * a)(0) + biases_.back()(0));
  }

  /// Rows of X are inputs.
  Eigen::VectorXd forward_batch(const Eigen::MatrixXd& X) const { return forward_cached(X).output; }

  ForwardCache forward_cached(const Eigen::MatrixXd& X) const {
    if (X.cols() != input_dim())
      throw DimensionError("input has dimension " + std::to_string(X.cols()) + ", network expects " +
                           std::to_string(input_dim()));
    ForwardCache c;
    c.activations.push_back(X.transpose());
    for (std::size_t i = 0; i + 1 < weights_.size(); ++i) {
      Eigen::MatrixXd z = weights_[i] * c.activations.back();
      z.colwise() += biases_[i];
      c.activations.push_back(z.cwiseMax(0.0));
      c.pre.push_back(std::move(z));
    }
    c.raw = weights_.back() * c.activations.back();
    c.raw.array() += biases_.back()(0);
    c.output = c.raw.transpose().unaryExpr([this](double v) { return clip(v); });
    return c;
  }

  /// Gradient of sum_j dloss(j) * f(x_j) with respect to the flat parameters.
  /// ReLU uses subgradient 0 at the kink; clipping passes the gradient inside
  /// [lo, hi] and blocks it outside.
  Eigen::VectorXd backward(const ForwardCache& c, const Eigen::VectorXd& dloss) const {
    Eigen::VectorXd delta(dloss.size());
    for (Eigen::Index j = 0; j < dloss.size(); ++j)
      delta(j) = (c.raw(j) >= lo_ && c.raw(j) <= hi_) ? dloss(j) : 0.0;
    return backward_raw(c, delta);
  }

  /// Gradient of sum_j draw(j) * raw(x_j), i.e. with the clip bypassed.
  Eigen::VectorXd backward_raw(const ForwardCache& c, const Eigen::VectorXd& draw) const {
    Eigen::VectorXd grad(num_parameters());
    Eigen::MatrixXd d = draw.transpose();
    Eigen::Index end = grad.size();
    for (std::size_t li = weights_.size(); li-- > 0;) {
      const Eigen::MatrixXd& a_prev = c.activations[li];
      const Eigen::MatrixXd gw = d * a_prev.transpose();
      const Eigen::VectorXd gb = d.rowwise().sum();
      const Eigen::Index nb = gb.size();
      const Eigen::Index nw = gw.size();
      grad.segment(end - nb, nb) = gb;
      for (Eigen::Index r = 0; r < gw.rows(); ++r)
        grad.segment(end - nb - nw + r * gw.cols(), gw.cols()) = gw.row(r).transpose();
      end -= nb + nw;
      if (li > 0) {
        Eigen::MatrixXd back = weights_[li].transpose() * d;
        d = back.array() * (c.pre[li - 1].array() > 0.0).cast<double>();
      }
    }
    return grad;
  }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < weights_.size(); ++i)
      n += static_cast<std::size_t>(weights_[i].size() + biases_[i].size());
    return n;
  }

  /// Realized sparsity: number of nonzero weights and biases.
  std::size_t nonzeros() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < weights_.size(); ++i)
      n += static_cast<std::size_t>((weights_[i].array() != 0.0).count() + (biases_[i].array() != 0.0).count());
    return n;
  }

  Eigen::VectorXd parameters() const {
    Eigen::VectorXd p(num_parameters());
    Eigen::Index k = 0;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      for (Eigen::Index r = 0; r < weights_[i].rows(); ++r)
        for (Eigen::Index c = 0; c < weights_[i].cols(); ++c) p(k++) = weights_[i](r, c);
      for (Eigen::Index r = 0; r < biases_[i].size(); ++r) p(k++) = biases_[i](r);
    }
    return p;
  }

  void set_parameters(const Eigen::VectorXd& p) {
    if (p.size() != static_cast<Eigen::Index>(num_parameters())) throw DimensionError("parameter count mismatch");
    Eigen::Index k = 0;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      for (Eigen::Index r = 0; r < weights_[i].rows(); ++r)
        for (Eigen::Index c = 0; c < weights_[i].cols(); ++c) weights_[i](r, c) = p(k++);
      for (Eigen::Index r = 0; r < biases_[i].size(); ++r) biases_[i](r) = p(k++);
    }
  }

  /// Clamp every parameter into [-tau, tau]. Idempotent.
  ReluNetwork& project() {
    for (auto& w : weights_) w = w.cwiseMax(-tau_).cwiseMin(tau_);
    for (auto& b : biases_) b = b.cwiseMax(-tau_).cwiseMin(tau_);
    return *this;
  }

  bool within_bounds() const {
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      if (weights_[i].cwiseAbs().maxCoeff() > tau_ || biases_[i].cwiseAbs().maxCoeff() > tau_) return false;
    }
    return true;
  }

  /// Checkpoint document: layer shapes plus row-major parameter arrays.
  Json to_json() const {
    Json layers = Json::array();
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      Json w = Json::array();
      for (Eigen::Index r = 0; r < weights_[i].rows(); ++r)
        for (Eigen::Index c = 0; c < weights_[i].cols(); ++c) w.push_back(weights_[i](r, c));
      layers.push_back({{"rows", weights_[i].rows()},
                        {"cols", weights_[i].cols()},
                        {"weights", std::move(w)},
                        {"bias", vector_to_json(biases_[i])}});
    }
    return {{"format", "pbfqe.relu_net"}, {"version", 1},          {"output_lo", lo_},
            {"output_hi", hi_},           {"weight_bound", tau_}, {"layers", std::move(layers)}};
  }

  static ReluNetwork from_json(const Json& j) {
    if (j.at("format") != "pbfqe.relu_net" || j.at("version") != 1)
      throw Error("unsupported network checkpoint format");
    std::vector<Eigen::MatrixXd> ws;
    std::vector<Eigen::VectorXd> bs;
    for (const auto& layer : j.at("layers")) {
      const auto rows = layer.at("rows").get<Eigen::Index>();
      const auto cols = layer.at("cols").get<Eigen::Index>();
      const auto& flat = layer.at("weights");
      if (static_cast<Eigen::Index>(flat.size()) != rows * cols) throw DimensionError("weight array size mismatch");
      Eigen::MatrixXd w(rows, cols);
      for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) w(r, c) = flat[static_cast<std::size_t>(r * cols + c)].get<double>();
      ws.push_back(std::move(w));
      bs.push_back(vector_from_json(layer.at("bias")));
    }
    return ReluNetwork(std::move(ws), std::move(bs), j.at("output_lo").get<double>(),
                       j.at("output_hi").get<double>(), j.at("weight_bound").get<double>());
  }

 private:
  static void check_config(const NetConfig& cfg) {
    if (cfg.input_dim < 1 || cfg.hidden_layers < 0 || cfg.width < 1)
      throw DimensionError("network needs input_dim >= 1, hidden_layers >= 0, width >= 1");
    if (!(cfg.weight_bound > 0.0) || !(cfg.output_lo <= cfg.output_hi))
      throw RangeError("network needs tau > 0 and output_lo <= output_hi");
  }

  std::vector<Eigen::MatrixXd> weights_;
  std::vector<Eigen::VectorXd> biases_;
  double lo_ = -1.0;
  double hi_ = 1.0;
  double tau_ = 1.0;
};

}  // namespace pbfqe
