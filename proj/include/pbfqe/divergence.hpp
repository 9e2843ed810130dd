#pragma once

// Distribution-shift diagnostics on finite supports.
//
// The restricted chi-square divergence takes a supremum over a function
// class. Here the class is a finite list of probes, so every restricted value
// reported is a lower bound of the divergence over the full class. It is
// exact when the probe list contains the maximizer, e.g. p/q for the
// unrestricted class.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <ostream>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pbfqe/error.hpp"
#include "pbfqe/mdp.hpp"
#include "pbfqe/relu_net.hpp"
#include "pbfqe/synthetic_env.hpp"

namespace pbfqe {

class FiniteDistribution {
 public:
  FiniteDistribution() = default;
  explicit FiniteDistribution(Eigen::VectorXd probs, std::vector<std::string> labels = {})
      : probs_(std::move(probs)), labels_(std::move(labels)) {
    detail::check_simplex(probs_, "finite distribution");
    if (!labels_.empty() && static_cast<Eigen::Index>(labels_.size()) != probs_.size())
      throw DimensionError("label count does not match support size");
  }

  Eigen::Index size() const { return probs_.size(); }
  const Eigen::VectorXd& probs() const { return probs_; }
  double operator[](Eigen::Index i) const { return probs_(i); }
  std::string label(Eigen::Index i) const {
    return labels_.empty() ? std::to_string(i) : labels_[static_cast<std::size_t>(i)];
  }

  double expect(const Eigen::VectorXd& f) const { return probs_.dot(f); }

 private:
  Eigen::VectorXd probs_;
  std::vector<std::string> labels_;
};

/// Sum_x q(x) (p(x)/q(x) - 1)^2 with 0/0 = 0.
inline double pearson_chi_square(const FiniteDistribution& p, const FiniteDistribution& q) {
  if (p.size() != q.size()) throw DimensionError("distributions have different supports");
  double chi = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (q[i] == 0.0) {
      if (p[i] != 0.0) throw SupportError("p charges atom " + p.label(i) + " where q is zero");
      continue;
    }
    const double r = p[i] / q[i] - 1.0;
    chi += q[i] * r * r;
  }
  return chi;
}

/// Finite family of functions on the support, each stored by its values.
class ProbeClass {
 public:
  void add(Eigen::VectorXd values, std::string name = {}) {
    if (!values.allFinite()) throw InvariantError("probe " + name + " is not finite on the support");
    if (!probes_.empty() && values.size() != probes_.front().size())
      throw DimensionError("probe " + name + " has the wrong support size");
    probes_.push_back(std::move(values));
    names_.push_back(std::move(name));
  }

  std::size_t size() const { return probes_.size(); }
  bool empty() const { return probes_.empty(); }
  const Eigen::VectorXd& operator[](std::size_t i) const { return probes_[i]; }
  const std::string& name(std::size_t i) const { return names_[i]; }

  bool contains(const Eigen::VectorXd& g) const {
    for (const auto& p : probes_)
      if (p.size() == g.size() && p == g) return true;
    return false;
  }

 private:
  std::vector<Eigen::VectorXd> probes_;
  std::vector<std::string> names_;
};

struct RestrictedChiSquare {
  /// max_f E_{q1}[f]^2 / E_{q2}[f^2] - 1 over usable probes (a lower bound).
  double value = 0.0;
  /// The maximal ratio itself, i.e. value + 1.
  double max_ratio = 0.0;
  std::size_t argmax = 0;
  std::size_t usable = 0;
};

inline RestrictedChiSquare restricted_chi_square_detail(const FiniteDistribution& q1, const FiniteDistribution& q2,
                                                        const ProbeClass& probes) {
  if (q1.size() != q2.size()) throw DimensionError("distributions have different supports");
  RestrictedChiSquare out;
  out.max_ratio = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < probes.size(); ++i) {
    const Eigen::VectorXd& f = probes[i];
    if (f.size() != q1.size()) throw DimensionError("probe " + probes.name(i) + " has the wrong support size");
    const double den = q2.expect(f.cwiseAbs2());
    if (den <= 0.0) continue;  // 0/0 convention: probe carries no information
    const double num = q1.expect(f);
    const double ratio = num * num / den;
    ++out.usable;
    if (ratio > out.max_ratio) {
      out.max_ratio = ratio;
      out.argmax = i;
    }
  }
  if (out.usable == 0) throw RangeError("no probe has positive second moment under q2");
  out.value = out.max_ratio - 1.0;
  return out;
}

inline double restricted_chi_square(const FiniteDistribution& q1, const FiniteDistribution& q2, const ProbeClass& probes) {
  return restricted_chi_square_detail(q1, q2, probes).value;
}

struct ShiftBoundCheck {
  bool holds = false;
  double lhs = 0.0;    // E_{q1}[g]
  double rhs = 0.0;    // sqrt(E_{q2}[g^2] (1 + chi2_Q))
  double slack = 0.0;  // rhs - lhs
};

/// Relative rounding allowance for the tight (Cauchy-Schwarz equality) case.
inline constexpr double kShiftBoundTolerance = 1e-12;

/// Checks E_{q1}[g] <= sqrt(E_{q2}[g^2] (1 + chi2_Q(q1, q2))) with the
/// divergence taken over `probes`, which must contain g.
inline ShiftBoundCheck verify_shift_bound(const Eigen::VectorXd& g, const FiniteDistribution& q1,
                                          const FiniteDistribution& q2, const ProbeClass& probes) {
  if (!probes.contains(g)) throw RangeError("verify_shift_bound: g is not a member of the probe class");
  ShiftBoundCheck c;
  c.lhs = q1.expect(g);
  const double second = q2.expect(g.cwiseAbs2());
  const auto chi = restricted_chi_square_detail(q1, q2, probes);
  c.rhs = std::sqrt(second * std::max(0.0, chi.max_ratio));
  c.slack = c.rhs - c.lhs;
  c.holds = c.lhs <= c.rhs + kShiftBoundTolerance * std::max(1.0, std::abs(c.rhs));
  return c;
}

/// Constant, polynomial (degree <= 4) and trigonometric probes on the
/// coordinates of `points`, plus `relu_count` random bounded ReLU networks.
inline ProbeClass default_probes(const Eigen::MatrixXd& points, std::size_t relu_count, std::uint64_t seed) {
  ProbeClass pc;
  const Eigen::Index n = points.rows();
  const Eigen::Index dim = points.cols();
  pc.add(Eigen::VectorXd::Ones(n), "const");
  for (Eigen::Index j = 0; j < dim; ++j) {
    const Eigen::VectorXd x = points.col(j);
    for (int deg = 1; deg <= 4; ++deg) pc.add(x.array().pow(deg).matrix(), "x" + std::to_string(j) + "^" + std::to_string(deg));
    for (int k = 1; k <= 2; ++k) {
      pc.add((k * std::numbers::pi * x.array()).sin().matrix(), "sin" + std::to_string(k) + "_x" + std::to_string(j));
      pc.add((k * std::numbers::pi * x.array()).cos().matrix(), "cos" + std::to_string(k) + "_x" + std::to_string(j));
    }
  }
  NetConfig cfg;
  cfg.input_dim = static_cast<int>(dim);
  cfg.hidden_layers = 2;
  cfg.width = 16;
  cfg.weight_bound = 2.0;
  cfg.output_lo = -10.0;
  cfg.output_hi = 10.0;
  cfg.output_init_scale = 1.0;
  for (std::size_t i = 0; i < relu_count; ++i) {
    const ReluNetwork net(cfg, derive_seed(seed, {0x70726f6265ULL, i}));
    pc.add(net.forward_batch(points), "relu" + std::to_string(i));
  }
  return pc;
}

struct StepDivergence {
  int h = 0;
  double chi2_restricted = 0.0;
  /// Pearson chi-square, +inf when the support condition fails.
  double chi2_pearson = 0.0;
};

struct KappaProfile {
  double kappa1 = 0.0;  // target vs behavior occupancy
  double kappa2 = 0.0;  // target vs eta
  std::vector<StepDivergence> transition_steps;
  std::vector<StepDivergence> preference_steps;
  std::size_t probe_count = 0;
};

inline double pearson_or_infinity(const FiniteDistribution& p, const FiniteDistribution& q) {
  try {
    return pearson_chi_square(p, q);
  } catch (const SupportError&) {
    return std::numeric_limits<double>::infinity();
  }
}

/// kappa1 = sum_h sqrt(1 + chi2_Q(q_h^pi, q_h^pi0)), kappa2 = sum_h sqrt(1 + chi2_Q(q_h^pi, eta_h)),
/// both over the probe surrogate (lower-bound estimates).
inline KappaProfile kappa_profile(const TabularMdp& mdp, const Policy& target, const Policy& behavior,
                                  const PairSampler& eta, const ProbeClass& probes) {
  KappaProfile k;
  k.probe_count = probes.size();
  for (int h = 1; h <= mdp.horizon(); ++h) {
    const FiniteDistribution qt(visitation_distribution(mdp, target, h));
    const FiniteDistribution qb(visitation_distribution(mdp, behavior, h));
    const FiniteDistribution qe(eta.step(h));
    const auto c1 = restricted_chi_square_detail(qt, qb, probes);
    const auto c2 = restricted_chi_square_detail(qt, qe, probes);
    k.kappa1 += std::sqrt(std::max(0.0, c1.max_ratio));
    k.kappa2 += std::sqrt(std::max(0.0, c2.max_ratio));
    k.transition_steps.push_back({h, c1.value, pearson_or_infinity(qt, qb)});
    k.preference_steps.push_back({h, c2.value, pearson_or_infinity(qt, qe)});
  }
  return k;
}

inline void write_diagnostics_csv(std::ostream& out, const KappaProfile& k) {
  out << "h,kind,chi2_restricted,chi2_pearson,probe_count\n";
  const auto fmt = [](double v) { return std::isfinite(v) ? format_double(v) : std::string("inf"); };
  for (const auto& s : k.transition_steps)
    out << s.h << ",kappa1," << fmt(s.chi2_restricted) << ',' << fmt(s.chi2_pearson) << ',' << k.probe_count << '\n';
  for (const auto& s : k.preference_steps)
    out << s.h << ",kappa2," << fmt(s.chi2_restricted) << ',' << fmt(s.chi2_pearson) << ',' << k.probe_count << '\n';
}

}  // namespace pbfqe
