#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "refgame/errors.hpp"
#include "refgame/stimuli.hpp"

using namespace refgame;
using namespace refgame::stimuli;

namespace {

constexpr Strategy kStrategies[] = {Strategy::Interpolation, Strategy::Extrapolation};

std::size_t expected_train(int attrs) { return attrs == 2 ? 48 : attrs == 3 ? 256 : 960; }
std::size_t expected_test(int attrs) { return attrs == 2 ? 16 : attrs == 3 ? 256 : 2112; }

}  // namespace

TEST_CASE("latent spec") {
  CHECK(LatentSpec::dsprites(2).num_meanings() == 64);
  CHECK(LatentSpec::dsprites(3).num_meanings() == 512);
  CHECK(LatentSpec::dsprites(4).num_meanings() == 3072);
  CHECK(LatentSpec::dsprites(2).symbolic_dim() == 16);
  CHECK(LatentSpec::dsprites(3).symbolic_dim() == 24);
  CHECK(LatentSpec::dsprites(4).symbolic_dim() == 30);
  const auto spec = LatentSpec::dsprites(4);
  CHECK(spec.axes[0].values == std::vector<int>{0, 4, 8, 12, 16, 20, 24, 28});
  CHECK(spec.axes[2].values == std::vector<int>{0, 5, 10, 15, 20, 25, 30, 35});
  CHECK(spec.axes[3].cardinality() == 6);
  CHECK_THROWS_AS(LatentSpec::dsprites(1), ParameterError);
  CHECK_THROWS_AS(LatentSpec::dsprites(5), ParameterError);
}

TEST_CASE("split cardinalities are exact for both strategies") {
  for (int attrs : {2, 3, 4}) {
    for (auto s : kStrategies) {
      CAPTURE(attrs);
      const auto b = build_benchmark(attrs, s);
      CHECK(b.train.size() == expected_train(attrs));
      CHECK(b.test.size() == expected_test(attrs));
      CHECK(b.train.size() + b.test.size() == b.spec.num_meanings());
    }
  }
}

TEST_CASE("splits partition the meaning space") {
  for (int attrs : {2, 3, 4}) {
    for (auto s : kStrategies) {
      const auto b = build_benchmark(attrs, s);
      std::set<std::size_t> seen;
      for (auto id : b.train_ids()) CHECK(seen.insert(id).second);
      for (auto id : b.test_ids()) CHECK(seen.insert(id).second);
      CHECK(seen.size() == b.spec.num_meanings());
      for (const auto& m : b.train) CHECK_FALSE(is_test_meaning(m, b.testing_purpose));
      for (const auto& m : b.test) CHECK(is_test_meaning(m, b.testing_purpose));
    }
  }
}

TEST_CASE("familiarization: every testing-purpose value occurs in training") {
  for (int attrs : {2, 3, 4}) {
    for (auto s : kStrategies) {
      const auto b = build_benchmark(attrs, s);
      for (std::size_t a = 0; a < b.spec.num_axes(); ++a) {
        for (std::size_t v = 0; v < b.spec.axes[a].cardinality(); ++v) {
          if (!b.testing_purpose[a][v]) continue;
          bool found = false;
          for (const auto& m : b.train) found = found || m.values[a] == static_cast<int>(v);
          CHECK(found);
        }
      }
    }
  }
}

TEST_CASE("strategies differ in membership, not size") {
  for (int attrs : {2, 3, 4}) {
    const auto i = build_benchmark(attrs, Strategy::Interpolation);
    const auto e = build_benchmark(attrs, Strategy::Extrapolation);
    CHECK(i.testing_purpose != e.testing_purpose);
    CHECK(i.test_ids() != e.test_ids());
  }
  const auto mask = testing_mask(LatentSpec::dsprites(2), Strategy::Interpolation);
  CHECK(mask[0] == std::vector<bool>{false, true, false, true, false, true, false, true});
  const auto ext = testing_mask(LatentSpec::dsprites(4), Strategy::Extrapolation);
  CHECK(ext[3] == std::vector<bool>{true, true, true, false, false, false});
}

TEST_CASE("is_test_meaning counts testing components") {
  const auto mask = testing_mask(LatentSpec::dsprites(3), Strategy::Interpolation);
  CHECK_FALSE(is_test_meaning(Meaning{{0, 2, 4}}, mask));
  CHECK_FALSE(is_test_meaning(Meaning{{1, 2, 4}}, mask));
  CHECK(is_test_meaning(Meaning{{1, 3, 4}}, mask));
  CHECK(is_test_meaning(Meaning{{1, 3, 5}}, mask));
}

TEST_CASE("meaning indexing round trip") {
  const auto spec = LatentSpec::dsprites(4);
  for (std::size_t i = 0; i < spec.num_meanings(); ++i) CHECK(meaning_index(meaning_at(i, spec), spec) == i);
  CHECK(meaning_index(Meaning{{0, 0, 0, 1}}, spec) == 1);
  CHECK_THROWS(meaning_at(spec.num_meanings(), spec));
  CHECK_THROWS(meaning_index(Meaning{{8, 0, 0, 0}}, spec));
}

TEST_CASE("symbolic encoding") {
  const auto spec2 = LatentSpec::dsprites(2);
  const auto e = encode_symbolic(Meaning{{0, 0}}, spec2);
  CHECK(e.size() == 16);
  for (std::size_t i = 0; i < 16; ++i) CHECK(e[i] == ((i == 0 || i == 8) ? 1.0 : 0.0));
  CHECK(encode_symbolic(Meaning{{0, 0, 0}}, LatentSpec::dsprites(3)).size() == 24);

  const auto spec4 = LatentSpec::dsprites(4);
  std::set<std::vector<double>> codes;
  for (const auto& m : enumerate_meanings(spec4)) codes.insert(encode_symbolic(m, spec4));
  CHECK(codes.size() == spec4.num_meanings());
}

TEST_CASE("visual renderer") {
  const auto spec = LatentSpec::dsprites(4);
  const auto meanings = enumerate_meanings(spec);

  SUBCASE("deterministic and in range") {
    const auto a = render_visual(meanings[17], spec), b = render_visual(meanings[17], spec);
    CHECK(a.shape() == diff::Shape{1, kImageSize, kImageSize});
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
    for (double v : a.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  SUBCASE("injective over the 4-attribute space") {
    std::set<std::vector<double>> rasters;
    bool x_step_differs = true;
    std::vector<std::vector<double>> all;
    all.reserve(meanings.size());
    for (const auto& m : meanings) {
      const auto r = render_visual(m, spec);
      all.emplace_back(r.data().begin(), r.data().end());
      rasters.insert(all.back());
    }
    CHECK(rasters.size() == meanings.size());
    for (std::size_t i = 0; i < meanings.size(); ++i) {
      auto m = meanings[i];
      if (m.values[0] + 1 >= static_cast<int>(spec.axes[0].cardinality())) continue;
      ++m.values[0];
      x_step_differs = x_step_differs && all[i] != all[meaning_index(m, spec)];
    }
    CHECK(x_step_differs);
  }
  SUBCASE("every sprite lights some pixels") {
    for (std::size_t i = 0; i < meanings.size(); i += 97) {
      const auto r = render_visual(meanings[i], spec);
      double mass = 0;
      for (double v : r.data()) mass += v;
      CHECK(mass > 1.0);
    }
  }
}

TEST_CASE("stimulus bank") {
  const auto spec = LatentSpec::dsprites(2);
  StimulusBank sym(spec, StimulusKind::Symbolic);
  CHECK(sym.item_shape() == diff::Shape{16});
  const std::size_t ids[] = {0, 63, 9};
  const auto g = sym.gather(ids);
  CHECK(g.shape() == diff::Shape{3, 16});
  const auto direct = encode_symbolic(meaning_at(63, spec), spec);
  CHECK(std::equal(direct.begin(), direct.end(), g.data().begin() + 16));
  const std::size_t bad[] = {64};
  CHECK_THROWS(sym.gather(bad));

  StimulusBank vis(spec, StimulusKind::Visual);
  CHECK(vis.item_shape() == diff::Shape{1, kImageSize, kImageSize});
  const auto v = vis.gather(ids);
  const auto r = render_visual(meaning_at(9, spec), spec);
  CHECK(std::equal(r.data().begin(), r.data().end(), v.data().begin() + 2 * kImageSize * kImageSize));
}

TEST_CASE("write_splits") {
  const auto dir = std::filesystem::temp_directory_path() / "refgame_splits_test";
  std::filesystem::remove_all(dir);
  const auto b = build_benchmark(2, Strategy::Interpolation);
  write_splits(b, dir);
  auto lines = [](const std::filesystem::path& p) {
    std::ifstream is(p);
    std::size_t n = 0;
    for (std::string l; std::getline(is, l);) n += !l.empty();
    return n;
  };
  // header row plus one row per meaning
  const auto train_rows = lines(dir / "train.csv"), test_rows = lines(dir / "test.csv");
  CHECK((train_rows == 48 || train_rows == 49));
  CHECK(test_rows - 16 == train_rows - 48);
  CHECK(std::filesystem::exists(dir / "manifest.json"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("parse helpers") {
  CHECK(parse_strategy("extrapolation") == Strategy::Extrapolation);
  CHECK(parse_stimulus_kind("visual") == StimulusKind::Visual);
  CHECK_THROWS(parse_strategy("sideways"));
  CHECK(to_string(Strategy::Interpolation) == "interpolation");
}
