#pragma once

// Two-sample Kolmogorov-Smirnov and Spearman rank-order tests.

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace refgame::stats {

enum class Alternative { TwoSided, Greater, Less };

std::string_view to_string(Alternative alt);
Alternative parse_alternative(std::string_view text);

struct TestResult {
  double statistic = 0.0;
  double p_value = 1.0;
  Alternative alternative = Alternative::TwoSided;
  std::size_t n = 0;
  std::size_t m = 0;
};

/// Largest n*m for which KS p-values are computed exactly (conditional on the
/// observed ties); larger samples use the asymptotic distribution.
inline constexpr std::size_t kKsExactLimit = 10000;

/// D = sup |F_a - F_b| (two-sided), sup (F_a - F_b) (greater) or
/// sup (F_b - F_a) (less), with both ECDFs evaluated at the pooled points.
TestResult ks_two_sample(std::span<const double> a, std::span<const double> b,
                         Alternative alt = Alternative::TwoSided);

/// Exact permutation p-value of the KS statistic `d` given pooled tie
/// structure.
double ks_exact_p(std::span<const double> a, std::span<const double> b, Alternative alt, double d);

/// Kolmogorov survival function Q(x) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 x^2).
double kolmogorov_survival(double x);

/// Ranks starting at 1; tied values share their average rank.
std::vector<double> average_ranks(std::span<const double> x);

/// Pearson correlation of average ranks. Throws UndefinedCorrelationError if
/// either input has zero rank variance.
double spearman_rho(std::span<const double> x, std::span<const double> y);

/// rho with a two-sided p-value from t = rho*sqrt((n-2)/(1-rho^2)) on n-2
/// degrees of freedom; |rho| = 1 gives p = 0.
TestResult spearman(std::span<const double> x, std::span<const double> y);

}  // namespace refgame::stats
