#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pbfqe/error.hpp"
#include "pbfqe/rng.hpp"

namespace pbfqe::stats {

inline double mean(std::span<const double> v) {
  if (v.empty()) throw RangeError("mean of an empty sample");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw RangeError("median of an empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Linear interpolation between order statistics (type 7).
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw RangeError("quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
};

inline LineFit ordinary_least_squares(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw RangeError("least squares needs at least two points");
  const double mx = mean(x), my = mean(y);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx == 0.0) throw RangeError("least squares needs at least two distinct x values");
  const double slope = sxy / sxx;
  return {slope, my - slope * mx};
}

/// Survival function of the chi-square distribution with an even number of
/// degrees of freedom: exp(-x/2) sum_{i < df/2} (x/2)^i / i!.
inline double chi_square_survival_even(double x, int df) {
  if (df <= 0 || df % 2) throw RangeError("chi_square_survival_even needs positive even df");
  if (x <= 0.0) return 1.0;
  const double half = 0.5 * x;
  double term = 1.0, sum = 1.0;
  for (int i = 1; i < df / 2; ++i) {
    term *= half / i;
    sum += term;
  }
  return std::exp(-half) * sum;
}

/// Pearson goodness-of-fit statistic sum (O - E)^2 / E.
inline double pearson_statistic(std::span<const double> observed_counts, std::span<const double> expected_probs) {
  if (observed_counts.size() != expected_probs.size()) throw DimensionError("count/probability size mismatch");
  double n = 0.0;
  for (double c : observed_counts) n += c;
  double stat = 0.0;
  for (std::size_t i = 0; i < observed_counts.size(); ++i) {
    const double e = n * expected_probs[i];
    if (e <= 0.0) {
      if (observed_counts[i] > 0.0) return INFINITY;
      continue;
    }
    stat += (observed_counts[i] - e) * (observed_counts[i] - e) / e;
  }
  return stat;
}

/// Log-log decay fit of the per-x median of y, with a percentile bootstrap
/// band for the slope obtained by resampling the y values within each x.
struct DecayFit {
  double slope = 0.0;
  double intercept = 0.0;
  double band_lo = 0.0;
  double band_hi = 0.0;
  std::size_t points = 0;
  std::vector<double> x;
  std::vector<double> median_y;
};

inline DecayFit fit_decay(const std::map<double, std::vector<double>>& groups, std::size_t min_points = 3,
                          std::size_t min_per_point = 5, int resamples = 2000, double level = 0.95,
                          std::uint64_t seed = 0) {
  if (groups.size() < min_points)
    throw RangeError("decay fit needs at least " + std::to_string(min_points) + " grid points");
  DecayFit fit;
  std::vector<double> lx, ly;
  for (const auto& [x, ys] : groups) {
    if (ys.size() < min_per_point)
      throw RangeError("decay fit needs at least " + std::to_string(min_per_point) + " seeds per grid point");
    if (!(x > 0.0)) throw RangeError("decay fit needs positive x");
    const double m = median(ys);
    if (!(m > 0.0)) throw RangeError("decay fit needs positive medians");
    fit.x.push_back(x);
    fit.median_y.push_back(m);
    lx.push_back(std::log(x));
    ly.push_back(std::log(m));
  }
  const auto line = ordinary_least_squares(lx, ly);
  fit.slope = line.slope;
  fit.intercept = line.intercept;
  fit.points = groups.size();

  Rng rng = make_rng(seed);
  std::vector<double> slopes;
  slopes.reserve(static_cast<std::size_t>(resamples));
  std::vector<double> boot_y(groups.size());
  for (int b = 0; b < resamples; ++b) {
    std::size_t gi = 0;
    bool ok = true;
    for (const auto& [x, ys] : groups) {
      std::vector<double> s(ys.size());
      for (auto& v : s) v = ys[uniform_index(rng, ys.size())];
      const double m = median(std::move(s));
      if (!(m > 0.0)) ok = false;
      boot_y[gi++] = ok ? std::log(m) : 0.0;
    }
    if (ok) slopes.push_back(ordinary_least_squares(lx, boot_y).slope);
  }
  if (slopes.empty()) throw RangeError("bootstrap produced no valid resamples");
  const double tail = 0.5 * (1.0 - level);
  fit.band_lo = quantile(slopes, tail);
  fit.band_hi = quantile(slopes, 1.0 - tail);
  return fit;
}

}  // namespace pbfqe::stats
