#include "refgame/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "refgame/errors.hpp"
#include "refgame/stats.hpp"

namespace refgame::metrics {

std::size_t hamming_distance(const stimuli::Meaning& a, const stimuli::Meaning& b) {
  if (a.values.size() != b.values.size()) {
    throw DimensionError("hamming_distance: meanings differ in length");
  }
  std::size_t d = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) d += a.values[i] != b.values[i];
  return d;
}

std::size_t edit_distance(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] != b[j - 1]);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double topographic_similarity(const LanguageSample& sample) {
  const std::size_t n = sample.meanings.size();
  if (n != sample.messages.size()) {
    throw DimensionError("topographic_similarity: " + std::to_string(n) + " meanings vs " +
                         std::to_string(sample.messages.size()) + " messages");
  }
  if (n < 2) throw ParameterError("topographic_similarity: need at least 2 items");
  std::vector<double> dm, du;
  dm.reserve(n * (n - 1) / 2);
  du.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      dm.push_back(static_cast<double>(hamming_distance(sample.meanings[i], sample.meanings[j])));
      du.push_back(static_cast<double>(edit_distance(sample.messages[i], sample.messages[j])));
    }
  }
  if (dm.size() < 2) {
    throw UndefinedCorrelationError("topographic_similarity: a single pair has no variance");
  }
  return stats::spearman_rho(dm, du);
}

LanguageSample subsample(const LanguageSample& sample, std::size_t max_items, Rng& rng) {
  const std::size_t n = sample.meanings.size();
  if (n <= max_items) return sample;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < max_items; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(max_items);
  std::sort(idx.begin(), idx.end());
  LanguageSample out;
  for (auto i : idx) {
    out.meanings.push_back(sample.meanings[i]);
    out.messages.push_back(sample.messages[i]);
  }
  return out;
}

double accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> targets) {
  if (predictions.size() != targets.size()) {
    throw DimensionError("accuracy: predictions and targets differ in length");
  }
  if (predictions.empty()) throw ParameterError("accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) hits += predictions[i] == targets[i];
  return static_cast<double>(hits) / static_cast<double>(targets.size());
}

GapRecord test_train_gap(double train, double test, std::string metric) {
  if (!std::isfinite(train) || !std::isfinite(test)) {
    throw ParameterError("test_train_gap: values must be finite");
  }
  return GapRecord{std::move(metric), train, test, test - train};
}

}  // namespace refgame::metrics
