#include "refgame/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include <boost/math/distributions/students_t.hpp>

#include "refgame/errors.hpp"

namespace refgame::stats {

namespace {

// Slack for comparing ECDF differences that are equal in exact arithmetic.
constexpr double kTieSlack = 1e-12;

struct Pooled {
  // Running counts of a and b items at the end of each tie group.
  std::vector<std::size_t> a_counts;
  std::vector<std::size_t> b_counts;
};

Pooled pool(std::span<const double> a, std::span<const double> b) {
  std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  Pooled p;
  std::size_t i = 0, j = 0;
  while (i < sa.size() || j < sb.size()) {
    double v;
    if (j == sb.size() || (i < sa.size() && sa[i] <= sb[j])) {
      v = sa[i];
    } else {
      v = sb[j];
    }
    while (i < sa.size() && sa[i] == v) ++i;
    while (j < sb.size() && sb[j] == v) ++j;
    p.a_counts.push_back(i);
    p.b_counts.push_back(j);
  }
  return p;
}

double signed_gap(double fa, double fb, Alternative alt) {
  switch (alt) {
    case Alternative::Greater:
      return fa - fb;
    case Alternative::Less:
      return fb - fa;
    case Alternative::TwoSided:
      break;
  }
  return std::abs(fa - fb);
}

void check_samples(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw ParameterError("KS test needs two non-empty samples");
  for (double v : a) {
    if (!std::isfinite(v)) throw ParameterError("KS test sample contains a non-finite value");
  }
  for (double v : b) {
    if (!std::isfinite(v)) throw ParameterError("KS test sample contains a non-finite value");
  }
}

}  // namespace

std::string_view to_string(Alternative alt) {
  switch (alt) {
    case Alternative::Greater:
      return "greater";
    case Alternative::Less:
      return "less";
    case Alternative::TwoSided:
      break;
  }
  return "two-sided";
}

Alternative parse_alternative(std::string_view text) {
  if (text == "two-sided" || text == "two_sided" || text == "two") return Alternative::TwoSided;
  if (text == "greater") return Alternative::Greater;
  if (text == "less") return Alternative::Less;
  throw ParameterError("unknown alternative '" + std::string(text) + "'");
}

double kolmogorov_survival(double x) {
  if (x <= 0.0) return 1.0;
  // small x: use the theta-function form, which converges fast there
  if (x < 1.18) {
    const double y = std::exp(-std::numbers::pi * std::numbers::pi / (8.0 * x * x));
    double s = 0.0;
    for (int k = 1; k < 20; k += 2) s += std::pow(y, k * k);
    return std::clamp(1.0 - std::sqrt(2.0 * std::numbers::pi) / x * s, 0.0, 1.0);
  }
  double s = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * x * x);
    s += (k % 2 ? 1.0 : -1.0) * term;
    if (term < 1e-300) break;
  }
  return std::clamp(2.0 * s, 0.0, 1.0);
}

double ks_exact_p(std::span<const double> a, std::span<const double> b, Alternative alt, double d) {
  check_samples(a, b);
  const Pooled p = pool(a, b);
  const std::size_t n = a.size(), m = b.size();
  // boundary[k] is true when k items total mark the end of a tie group
  std::vector<char> boundary(n + m + 1, 0);
  for (std::size_t g = 0; g < p.a_counts.size(); ++g) boundary[p.a_counts[g] + p.b_counts[g]] = 1;

  // Probability that a uniformly random labelling stays strictly below d at
  // every group boundary; paths are (i a-items, j b-items) lattice walks.
  auto below = [&](std::size_t i, std::size_t j) {
    const double fa = static_cast<double>(i) / static_cast<double>(n);
    const double fb = static_cast<double>(j) / static_cast<double>(m);
    return signed_gap(fa, fb, alt) < d - kTieSlack;
  };
  std::vector<double> row(m + 1, 0.0), next(m + 1, 0.0);
  // row[j] holds the probability mass at (i, j) with i = current step index
  row[0] = 1.0;
  for (std::size_t i = 0; i <= n; ++i) {
    // propagate moves along b within this row
    for (std::size_t j = 0; j <= m; ++j) {
      if (j > 0) {
        const double remaining = static_cast<double>(n - i + m - (j - 1));
        row[j] += row[j - 1] * static_cast<double>(m - (j - 1)) / remaining;
      }
      if (boundary[i + j] && !below(i, j)) row[j] = 0.0;
    }
    if (i == n) break;
    for (std::size_t j = 0; j <= m; ++j) {
      const double remaining = static_cast<double>(n - i + m - j);
      next[j] = row[j] * static_cast<double>(n - i) / remaining;
    }
    std::swap(row, next);
  }
  return std::clamp(1.0 - row[m], 0.0, 1.0);
}

TestResult ks_two_sample(std::span<const double> a, std::span<const double> b, Alternative alt) {
  check_samples(a, b);
  const std::size_t n = a.size(), m = b.size();
  const Pooled p = pool(a, b);
  double d = 0.0;
  for (std::size_t g = 0; g < p.a_counts.size(); ++g) {
    const double fa = static_cast<double>(p.a_counts[g]) / static_cast<double>(n);
    const double fb = static_cast<double>(p.b_counts[g]) / static_cast<double>(m);
    d = std::max(d, signed_gap(fa, fb, alt));
  }
  TestResult r;
  r.statistic = d;
  r.alternative = alt;
  r.n = n;
  r.m = m;
  if (n * m <= kKsExactLimit) {
    r.p_value = ks_exact_p(a, b, alt, d);
  } else {
    const double en = static_cast<double>(n) * static_cast<double>(m) / static_cast<double>(n + m);
    r.p_value = alt == Alternative::TwoSided ? kolmogorov_survival(d * std::sqrt(en))
                                             : std::exp(-2.0 * d * d * en);
  }
  if (d <= kTieSlack) r.p_value = 1.0;
  r.p_value = std::clamp(r.p_value, 0.0, 1.0);
  return r;
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto l, auto r) { return x[l] < x[r]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i + 1;
    while (j < order.size() && x[order[j]] == x[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j - 1)) / 2.0 + 1.0;
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = avg;
    i = j;
  }
  return ranks;
}

double spearman_rho(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw DimensionError("spearman: samples differ in length (" + std::to_string(x.size()) +
                         " vs " + std::to_string(y.size()) + ")");
  }
  if (x.size() < 2) throw ParameterError("spearman: need at least 2 pairs");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  // ranks average to (n+1)/2 exactly
  const double mean = (static_cast<double>(x.size()) + 1.0) / 2.0;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    const double dx = rx[i] - mean, dy = ry[i] - mean;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) {
    throw UndefinedCorrelationError("spearman: zero rank variance, correlation undefined");
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

TestResult spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() < 3) throw ParameterError("spearman: need at least 3 pairs");
  TestResult r;
  r.statistic = spearman_rho(x, y);
  r.n = r.m = x.size();
  const double rho = r.statistic;
  if (std::abs(rho) >= 1.0) {
    r.p_value = 0.0;
    return r;
  }
  const double df = static_cast<double>(x.size() - 2);
  const double t = rho * std::sqrt(df / ((1.0 - rho) * (1.0 + rho)));
  boost::math::students_t dist(df);
  r.p_value = std::clamp(2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))), 0.0, 1.0);
  return r;
}

}  // namespace refgame::stats
