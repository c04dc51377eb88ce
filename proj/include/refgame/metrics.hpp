#pragma once

// Compositionality and generalisation measurements.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "refgame/rng.hpp"
#include "refgame/stimuli.hpp"

namespace refgame::metrics {

/// Parallel meanings and messages. Messages hold symbol indices already
/// truncated at the first end-of-sentence (which is excluded).
struct LanguageSample {
  std::vector<stimuli::Meaning> meanings;
  std::vector<std::vector<int>> messages;
};

/// Pairs are computed exactly up to this many items; larger samples are
/// subsampled uniformly.
inline constexpr std::size_t kMaxToposimItems = 1500;

std::size_t hamming_distance(const stimuli::Meaning& a, const stimuli::Meaning& b);
std::size_t edit_distance(std::span<const int> a, std::span<const int> b);

/// Spearman correlation between pairwise Hamming meaning distances and
/// pairwise Levenshtein message distances over all unordered pairs.
/// Throws UndefinedCorrelationError when either distance vector is constant.
double topographic_similarity(const LanguageSample& sample);

/// Uniform subsample without replacement to at most `max_items` items,
/// keeping the original relative order.
LanguageSample subsample(const LanguageSample& sample, std::size_t max_items, Rng& rng);

/// Fraction of exact matches.
double accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> targets);

struct GapRecord {
  std::string metric;  // "accuracy" or "toposim"
  double train = 0.0;
  double test = 0.0;
  double gap = 0.0;  // test - train
};

GapRecord test_train_gap(double train, double test, std::string metric = "accuracy");

}  // namespace refgame::metrics
