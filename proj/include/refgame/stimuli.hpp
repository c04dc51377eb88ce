#pragma once

// Structured meaning spaces over the dSprites latent axes, the
// interpolation/extrapolation train-test splits, and the two stimulus
// encodings (concatenated one-hots and a procedurally rendered heart sprite).

#include <compare>
#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "refgame/diffcore.hpp"

namespace refgame::stimuli {

using diff::Tensor;

enum class Strategy { Interpolation, Extrapolation };
enum class StimulusKind { Symbolic, Visual };

std::string_view to_string(Strategy s);
std::string_view to_string(StimulusKind k);
Strategy parse_strategy(std::string_view text);
StimulusKind parse_stimulus_kind(std::string_view text);

struct Axis {
  std::string name;
  int full_cardinality = 0;
  /// Indices into the original axis, strictly increasing.
  std::vector<int> values;

  std::size_t cardinality() const { return values.size(); }
};

struct LatentSpec {
  std::vector<Axis> axes;

  /// X, Y (every 4th of 32), then Orientation (every 5th of 40), then Scale
  /// (all 6), nested by `n_attrs` in {2,3,4}.
  static LatentSpec dsprites(int n_attrs);

  std::size_t num_axes() const { return axes.size(); }
  std::size_t num_meanings() const;
  std::size_t symbolic_dim() const;
};

/// Per-axis value indices into the subsampled value lists.
struct Meaning {
  std::vector<int> values;

  auto operator<=>(const Meaning&) const = default;
};

/// Position of `m` in the lexicographic enumeration (first axis slowest).
std::size_t meaning_index(const Meaning& m, const LatentSpec& spec);
Meaning meaning_at(std::size_t index, const LatentSpec& spec);
std::vector<Meaning> enumerate_meanings(const LatentSpec& spec);

using TestingMask = std::vector<std::vector<bool>>;

struct Benchmark {
  LatentSpec spec;
  Strategy strategy = Strategy::Interpolation;
  std::vector<Meaning> train;
  std::vector<Meaning> test;
  /// testing_purpose[axis][value] marks testing-purpose values.
  TestingMask testing_purpose;

  std::vector<std::size_t> train_ids() const;
  std::vector<std::size_t> test_ids() const;
};

/// Testing-purpose values: every second position (1,3,5,...) for
/// interpolation, the first half for extrapolation. A meaning with two or
/// more testing-purpose components goes to test, all others to train.
Benchmark build_benchmark(int n_attrs, Strategy strategy);

TestingMask testing_mask(const LatentSpec& spec, Strategy strategy);

bool is_test_meaning(const Meaning& m, const TestingMask& mask);

/// Concatenated per-axis one-hot vectors.
std::vector<double> encode_symbolic(const Meaning& m, const LatentSpec& spec);

inline constexpr std::size_t kImageSize = 32;

/// Grayscale [1,32,32] heart sprite for `m`; pixel values in [0,1].
Tensor render_visual(const Meaning& m, const LatentSpec& spec);

/// Precomputed encodings for every meaning of a spec, addressable by
/// meaning_index.
class StimulusBank {
 public:
  StimulusBank(const LatentSpec& spec, StimulusKind kind);

  StimulusKind kind() const { return kind_; }
  std::size_t size() const { return count_; }
  /// Shape of one stimulus, without the batch dimension.
  const diff::Shape& item_shape() const { return item_shape_; }

  /// Batched stimuli [n, ...item_shape] for the given meaning indices.
  Tensor gather(std::span<const std::size_t> ids) const;

 private:
  StimulusKind kind_;
  std::size_t count_;
  std::size_t item_size_;
  diff::Shape item_shape_;
  std::vector<double> data_;
};

/// Writes train.csv, test.csv (one meaning per row, comma-separated value
/// indices) and manifest.json (counts, mask) into `dir`.
void write_splits(const Benchmark& bench, const std::filesystem::path& dir);

}  // namespace refgame::stimuli
