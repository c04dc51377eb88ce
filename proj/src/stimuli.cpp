#include "refgame/stimuli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "refgame/errors.hpp"

namespace refgame::stimuli {

namespace {

// Sprite geometry in pixels on the 32x32 canvas.
constexpr double kCenterMin = 8.0;
constexpr double kCenterMax = 24.0;
constexpr double kHalfWidthMin = 4.0;
constexpr double kHalfWidthMax = 10.0;
// Used when the spec has no Scale axis.
constexpr double kDefaultHalfWidth = 7.0;
// Horizontal half-extent of the unit heart curve.
constexpr double kHeartHalfWidth = 1.139;
constexpr int kSupersample = 4;

Axis make_axis(std::string name, int full, int stride) {
  Axis a{std::move(name), full, {}};
  for (int v = 0; v < full; v += stride) a.values.push_back(v);
  return a;
}

bool inside_heart(double x, double y) {
  const double r = x * x + y * y - 1.0;
  return r * r * r - x * x * y * y * y <= 0.0;
}

const Axis* find_axis(const LatentSpec& spec, std::string_view name, std::size_t& pos) {
  for (std::size_t i = 0; i < spec.axes.size(); ++i) {
    if (spec.axes[i].name == name) {
      pos = i;
      return &spec.axes[i];
    }
  }
  return nullptr;
}

}  // namespace

std::string_view to_string(Strategy s) {
  return s == Strategy::Interpolation ? "interpolation" : "extrapolation";
}

std::string_view to_string(StimulusKind k) {
  return k == StimulusKind::Symbolic ? "symbolic" : "visual";
}

Strategy parse_strategy(std::string_view text) {
  if (text == "interpolation" || text == "inter") return Strategy::Interpolation;
  if (text == "extrapolation" || text == "extra") return Strategy::Extrapolation;
  throw ParameterError("unknown split strategy '" + std::string(text) + "'");
}

StimulusKind parse_stimulus_kind(std::string_view text) {
  if (text == "symbolic") return StimulusKind::Symbolic;
  if (text == "visual") return StimulusKind::Visual;
  throw ParameterError("unknown stimulus kind '" + std::string(text) + "'");
}

LatentSpec LatentSpec::dsprites(int n_attrs) {
  if (n_attrs < 2 || n_attrs > 4) {
    throw ParameterError("number of attributes must be 2, 3 or 4, got " + std::to_string(n_attrs));
  }
  LatentSpec spec;
  spec.axes.push_back(make_axis("X", 32, 4));
  spec.axes.push_back(make_axis("Y", 32, 4));
  if (n_attrs >= 3) spec.axes.push_back(make_axis("Orientation", 40, 5));
  if (n_attrs >= 4) spec.axes.push_back(make_axis("Scale", 6, 1));
  return spec;
}

std::size_t LatentSpec::num_meanings() const {
  std::size_t n = 1;
  for (const auto& a : axes) n *= a.cardinality();
  return n;
}

std::size_t LatentSpec::symbolic_dim() const {
  std::size_t n = 0;
  for (const auto& a : axes) n += a.cardinality();
  return n;
}

std::size_t meaning_index(const Meaning& m, const LatentSpec& spec) {
  if (m.values.size() != spec.num_axes()) {
    throw DimensionError("meaning has " + std::to_string(m.values.size()) + " components, spec has " +
                         std::to_string(spec.num_axes()) + " axes");
  }
  std::size_t idx = 0;
  for (std::size_t a = 0; a < spec.num_axes(); ++a) {
    const auto card = spec.axes[a].cardinality();
    if (m.values[a] < 0 || static_cast<std::size_t>(m.values[a]) >= card) {
      throw IndexError("meaning component " + std::to_string(m.values[a]) + " outside axis " +
                       spec.axes[a].name);
    }
    idx = idx * card + static_cast<std::size_t>(m.values[a]);
  }
  return idx;
}

Meaning meaning_at(std::size_t index, const LatentSpec& spec) {
  if (index >= spec.num_meanings()) throw IndexError("meaning index out of range");
  Meaning m;
  m.values.resize(spec.num_axes());
  for (std::size_t a = spec.num_axes(); a-- > 0;) {
    const auto card = spec.axes[a].cardinality();
    m.values[a] = static_cast<int>(index % card);
    index /= card;
  }
  return m;
}

std::vector<Meaning> enumerate_meanings(const LatentSpec& spec) {
  std::vector<Meaning> all;
  all.reserve(spec.num_meanings());
  for (std::size_t i = 0; i < spec.num_meanings(); ++i) all.push_back(meaning_at(i, spec));
  return all;
}

TestingMask testing_mask(const LatentSpec& spec, Strategy strategy) {
  TestingMask mask;
  for (const auto& axis : spec.axes) {
    const std::size_t n = axis.cardinality();
    std::vector<bool> row(n, false);
    for (std::size_t v = 0; v < n; ++v) {
      row[v] = strategy == Strategy::Interpolation ? (v % 2 == 1) : (v < n / 2);
    }
    mask.push_back(std::move(row));
  }
  return mask;
}

bool is_test_meaning(const Meaning& m, const TestingMask& mask) {
  int count = 0;
  for (std::size_t a = 0; a < m.values.size(); ++a) {
    if (mask.at(a).at(static_cast<std::size_t>(m.values[a]))) ++count;
  }
  return count >= 2;
}

Benchmark build_benchmark(int n_attrs, Strategy strategy) {
  Benchmark b;
  b.spec = LatentSpec::dsprites(n_attrs);
  b.strategy = strategy;
  b.testing_purpose = testing_mask(b.spec, strategy);
  for (auto& m : enumerate_meanings(b.spec)) {
    (is_test_meaning(m, b.testing_purpose) ? b.test : b.train).push_back(std::move(m));
  }
  return b;
}

std::vector<std::size_t> Benchmark::train_ids() const {
  std::vector<std::size_t> ids;
  for (const auto& m : train) ids.push_back(meaning_index(m, spec));
  return ids;
}

std::vector<std::size_t> Benchmark::test_ids() const {
  std::vector<std::size_t> ids;
  for (const auto& m : test) ids.push_back(meaning_index(m, spec));
  return ids;
}

std::vector<double> encode_symbolic(const Meaning& m, const LatentSpec& spec) {
  meaning_index(m, spec);  // validates
  std::vector<double> out(spec.symbolic_dim(), 0.0);
  std::size_t offset = 0;
  for (std::size_t a = 0; a < spec.num_axes(); ++a) {
    out[offset + static_cast<std::size_t>(m.values[a])] = 1.0;
    offset += spec.axes[a].cardinality();
  }
  return out;
}

Tensor render_visual(const Meaning& m, const LatentSpec& spec) {
  meaning_index(m, spec);

  auto original = [&](std::string_view name, double& frac, double& full) {
    std::size_t pos = 0;
    const Axis* axis = find_axis(spec, name, pos);
    if (!axis) return false;
    const int v = axis->values[static_cast<std::size_t>(m.values[pos])];
    frac = static_cast<double>(v);
    full = static_cast<double>(axis->full_cardinality);
    return true;
  };

  double v = 0, full = 1;
  double cx = (kCenterMin + kCenterMax) / 2, cy = cx;
  if (original("X", v, full)) cx = kCenterMin + (kCenterMax - kCenterMin) * v / (full - 1);
  if (original("Y", v, full)) cy = kCenterMin + (kCenterMax - kCenterMin) * v / (full - 1);
  double theta = 0.0;
  if (original("Orientation", v, full)) theta = 2.0 * std::numbers::pi * v / full;
  double half_width = kDefaultHalfWidth;
  if (original("Scale", v, full)) {
    half_width = kHalfWidthMin + (kHalfWidthMax - kHalfWidthMin) * v / (full - 1);
  }

  const double unit = kHeartHalfWidth / half_width;
  const double cs = std::cos(theta), sn = std::sin(theta);
  Tensor img({1, kImageSize, kImageSize});
  auto px = img.mutable_data();
  constexpr double kCell = 1.0 / kSupersample;
  for (std::size_t r = 0; r < kImageSize; ++r) {
    for (std::size_t c = 0; c < kImageSize; ++c) {
      int hits = 0;
      for (int sr = 0; sr < kSupersample; ++sr) {
        for (int sc = 0; sc < kSupersample; ++sc) {
          const double dx = static_cast<double>(c) + (sc + 0.5) * kCell - cx;
          const double dy = -(static_cast<double>(r) + (sr + 0.5) * kCell - cy);
          // rotate by -theta into the sprite frame
          const double hx = (cs * dx + sn * dy) * unit;
          const double hy = (-sn * dx + cs * dy) * unit;
          if (inside_heart(hx, hy)) ++hits;
        }
      }
      px[r * kImageSize + c] =
          std::clamp(static_cast<double>(hits) / (kSupersample * kSupersample), 0.0, 1.0);
    }
  }
  return img;
}

StimulusBank::StimulusBank(const LatentSpec& spec, StimulusKind kind)
    : kind_(kind), count_(spec.num_meanings()) {
  if (kind == StimulusKind::Symbolic) {
    item_shape_ = {spec.symbolic_dim()};
  } else {
    item_shape_ = {1, kImageSize, kImageSize};
  }
  item_size_ = diff::shape_numel(item_shape_);
  data_.reserve(count_ * item_size_);
  for (std::size_t i = 0; i < count_; ++i) {
    const Meaning m = meaning_at(i, spec);
    if (kind == StimulusKind::Symbolic) {
      const auto enc = encode_symbolic(m, spec);
      data_.insert(data_.end(), enc.begin(), enc.end());
    } else {
      const auto img = render_visual(m, spec);
      data_.insert(data_.end(), img.data().begin(), img.data().end());
    }
  }
}

Tensor StimulusBank::gather(std::span<const std::size_t> ids) const {
  diff::Shape shape{ids.size()};
  shape.insert(shape.end(), item_shape_.begin(), item_shape_.end());
  std::vector<double> out;
  out.reserve(ids.size() * item_size_);
  for (auto id : ids) {
    if (id >= count_) throw IndexError("stimulus id out of range");
    const auto first = data_.begin() + static_cast<std::ptrdiff_t>(id * item_size_);
    out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(item_size_));
  }
  return Tensor(std::move(shape), std::move(out));
}

void write_splits(const Benchmark& bench, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto write_csv = [](const std::filesystem::path& path, const std::vector<Meaning>& rows) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    for (const auto& m : rows) {
      for (std::size_t i = 0; i < m.values.size(); ++i) {
        if (i) os << ',';
        os << m.values[i];
      }
      os << '\n';
    }
  };
  write_csv(dir / "train.csv", bench.train);
  write_csv(dir / "test.csv", bench.test);

  nlohmann::ordered_json manifest;
  manifest["attributes"] = bench.spec.num_axes();
  manifest["strategy"] = std::string(to_string(bench.strategy));
  manifest["train_count"] = bench.train.size();
  manifest["test_count"] = bench.test.size();
  manifest["rule"] = "test iff >= 2 testing-purpose components";
  auto& axes = manifest["axes"] = nlohmann::ordered_json::array();
  for (std::size_t a = 0; a < bench.spec.num_axes(); ++a) {
    const auto& axis = bench.spec.axes[a];
    nlohmann::ordered_json row;
    row["name"] = axis.name;
    row["full_cardinality"] = axis.full_cardinality;
    row["values"] = axis.values;
    std::vector<int> testing;
    for (std::size_t v = 0; v < axis.cardinality(); ++v) {
      if (bench.testing_purpose[a][v]) testing.push_back(static_cast<int>(v));
    }
    row["testing_purpose"] = testing;
    axes.push_back(std::move(row));
  }
  std::ofstream os(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  os << manifest.dump(2) << '\n';
}

}  // namespace refgame::stimuli
