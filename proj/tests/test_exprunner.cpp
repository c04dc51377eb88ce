#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <set>
#include <tuple>
#include <sstream>

#include "refgame/errors.hpp"
#include "refgame/exprunner.hpp"

using namespace refgame;
using namespace refgame::exprunner;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("refgame_exprunner_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> describe_map(const game::GameConfig& g) {
  std::map<std::string, std::string> m;
  for (const auto& [k, v] : g.describe()) m[k] = v;
  return m;
}

game::GameConfig tiny_cell(std::size_t batch) {
  game::GameConfig g;
  g.n_attrs = 2;
  g.channel = game::Channel::Complete;
  g.apply_channel();
  g.hidden = 16;
  g.batch = batch;
  g.sample_budget = 8 * batch;
  g.eval_rounds = 40;
  g.eval_batch = 20;
  return g;
}

RunRecord random_record(Rng& rng, std::size_t id) {
  RunRecord r;
  r.run_id = id;
  r.preset = "synthetic";
  r.attrs = 2 + static_cast<int>(rng.below(2));
  r.strategy = rng.below(2) ? "interpolation" : "extrapolation";
  r.stimulus = "visual";
  r.vocab = rng.below(2) ? 9 : 20;
  r.max_len = std::size_t{3} << rng.below(3);
  r.batch = std::size_t{2} << rng.below(3);
  r.coverage = static_cast<double>(r.batch) / 48.0;
  r.seed = 1000 + id;
  r.steps = 100;
  r.acc_train = rng.uniform();
  r.acc_test = rng.uniform() / 3.0;
  if (rng.below(8) != 0) r.ts_train = rng.uniform(-0.2, 0.9);
  if (rng.below(8) != 0) r.ts_test = rng.uniform(-0.2, 0.9);
  r.wall_s = rng.uniform(1, 100);
  return r;
}

}  // namespace

TEST_CASE("config files") {
  SUBCASE("sections, comments and shared lines") {
    const auto p = parse_config(R"(
# desk-scale run
[game]
attrs = 2
strategy = extrapolation   # trailing comment
batch=2 budget=4000 seed=7
channel = complete
[optimizer]
lr = 1e-3
[run]
name = smoke
seeds = 3
parallel = 2
)");
    REQUIRE(p.grid.size() == 1);
    const auto& g = p.grid[0];
    CHECK(g.n_attrs == 2);
    CHECK(g.strategy == stimuli::Strategy::Extrapolation);
    CHECK(g.batch == 2);
    CHECK(g.sample_budget == 4000);
    CHECK(g.seed == 7);
    CHECK(g.vocab == 9);
    CHECK(g.max_len == 2);
    CHECK(g.adam.lr == 1e-3);
    CHECK(p.name == "smoke");
    CHECK(p.seeds == 3);
    CHECK(p.parallelism == 2);
    CHECK(p.run_config(0, 2).seed == 9);
  }
  SUBCASE("custom channel keeps explicit V and L") {
    const auto p = parse_config("channel = custom\nvocab = 13\nmax_len = 4\n");
    CHECK(p.grid[0].vocab == 13);
    CHECK(p.grid[0].max_len == 4);
    const auto q = parse_config("vocab = 13\nchannel = overcomplete\n");
    CHECK(q.grid[0].vocab == 100);
  }
  SUBCASE("errors carry the line number") {
    try {
      parse_config("attrs = 2\n\nwidth = 3\n");
      FAIL("accepted an unknown key");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("line 3") != std::string::npos);
      CHECK(std::string(e.what()).find("width") != std::string::npos);
    }
    try {
      parse_config("[game]\nattrs = seven\n");
      FAIL("accepted a bad value");
    } catch (const ParameterError& e) {
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_config("[model]\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("attrs 2\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("[optimizer]\nattrs = 2\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("attrs = 9\n"), ParameterError);
    CHECK_THROWS_AS(load_config("/nonexistent/refgame.cfg"), ConfigError);
  }
  SUBCASE("seed falls back to REFGAME_SEED") {
    ::setenv("REFGAME_SEED", "4242", 1);
    CHECK(default_seed() == 4242);
    CHECK(parse_config("attrs = 2\n").grid[0].seed == 4242);
    CHECK(make_preset("exp1_split", 1).base_seed == 4242);
    ::setenv("REFGAME_SEED", "not-a-number", 1);
    CHECK(default_seed() == 1);
    ::unsetenv("REFGAME_SEED");
    CHECK(default_seed() == 1);
  }
}

TEST_CASE("registry audit: every key parses, lands in describe() and the manifest") {
  const auto& registry = config_registry();
  const auto defaults = describe_map(game::GameConfig{});
  std::set<std::string> settable;
  for (const auto& k : registry) {
    CAPTURE(k.key);
    settable.insert(k.key);
    const auto text = "[" + k.section + "]\n" + k.key + " = " + k.default_value + "\n";
    const auto p = parse_config(text);
    if (k.section != "run") {
      CHECK(defaults.count(k.key) == 1);
      CHECK(describe_map(p.grid[0])[k.key] == k.default_value);
    }
  }
  // a non-default value for each game key survives into describe()
  const std::map<std::string, std::string> changed = {
      {"attrs", "2"},        {"strategy", "extrapolation"}, {"stimulus", "visual"},
      {"batch", "16"},       {"budget", "960"},             {"seed", "99"},
      {"k_train", "5"},      {"k_test", "7"},               {"tau0", "0.3"},
      {"hidden", "256"},     {"dropout", "0.5"},            {"eval_rounds", "10"},
      {"eval_batch", "5"},   {"log_every", "3"},            {"checkpoint_every", "4"},
      {"checkpoint_dir", "/tmp/ck"}};
  std::string text = "[game]\n";
  for (const auto& [k, v] : changed) text += k + " = " + v + "\n";
  text += "[optimizer]\nlr = 0.002\nbeta1 = 0.8\nbeta2 = 0.99\neps = 1e-07\n";
  text += "[run]\nname = audit\n";
  auto p = parse_config(text);
  const auto d = describe_map(p.grid[0]);
  for (const auto& [k, v] : changed) {
    CAPTURE(k);
    CHECK(d.at(k) == v);
  }
  CHECK(d.at("lr") == "0.002");
  CHECK(d.at("beta1") == "0.8");
  CHECK(d.at("eps") == "1e-07");

  const auto dir = scratch("manifest");
  fs::create_directories(dir);
  p.out_dir = dir;
  write_manifest(p, dir / "manifest.txt");
  const auto manifest = slurp(dir / "manifest.txt");
  for (const auto& k : registry) {
    CAPTURE(k.key);
    if (k.section == "run") {
      if (k.key == "parallel" || k.key == "seeds" || k.key == "name" || k.key == "out") {
        CHECK(manifest.find("\n" + k.key + "=") != std::string::npos);
      }
    } else {
      CHECK(manifest.find("\n" + k.key + "=") != std::string::npos);
    }
  }
  CHECK(manifest.find("name=audit") != std::string::npos);
  CHECK(manifest.find("lr=0.002") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("presets") {
  CHECK(make_preset("exp1_split", 2).grid.size() == 8);
  const auto e2 = make_preset("exp2_batchsize", 1, 960);
  CHECK(e2.grid.size() == 40);
  CHECK(e2.run_config(3, 0).sample_budget == 960);
  std::set<std::size_t> batches;
  for (const auto& g : e2.grid) batches.insert(g.batch);
  CHECK(batches == std::set<std::size_t>{2, 4, 8, 16, 32, 64, 128});
  const auto e3 = make_preset("exp3_struct_capacity", 1);
  CHECK(e3.grid.size() == 36);
  std::set<std::tuple<int, std::size_t, std::size_t>> capacity;
  for (const auto& g : e3.grid) {
    if (g.channel != game::Channel::Custom) continue;
    CHECK(capacity.insert({static_cast<int>(g.strategy), g.vocab, g.max_len}).second);
  }
  CHECK(capacity.size() == 24);
  CHECK(make_preset("exp4_correlation", 1).grid.size() == 12);
  for (auto name : kPresetNames) {
    for (const auto& g : make_preset(name, 1).grid) CHECK_NOTHROW(g.validate());
  }
  CHECK_THROWS_AS(make_preset("exp9", 1), ParameterError);
  CHECK_THROWS_AS(make_preset("exp1_split", 0), ParameterError);

  ExperimentPreset p = make_preset("exp1_split", 3);
  p.base_seed = 10;
  CHECK(p.run_config(0, 0).seed == 10);
  CHECK(p.run_config(0, 2).seed == 12);
  CHECK(p.run_config(2, 1).seed == 2011);
}

TEST_CASE("CSV round trip") {
  CHECK(format_real(0.123456789) == "0.123457");
  CHECK(format_real(1234567.0) == "1.23457e+06");
  CHECK(format_real(0.5) == "0.5");

  Rng rng(1);
  std::vector<RunRecord> records;
  for (std::size_t i = 0; i < 30; ++i) records.push_back(random_record(rng, i));
  const auto dir = scratch("csv");
  fs::create_directories(dir);
  write_results(records, dir / "runs.csv");
  const auto text = slurp(dir / "runs.csv");
  CHECK(text.rfind(std::string(kCsvHeader) + "\n", 0) == 0);

  const auto back = read_results(dir / "runs.csv");
  REQUIRE(back.size() == records.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    // stored columns come back at 6 significant digits; gaps are derived
    CHECK(back[i].seed == records[i].seed);
    CHECK(back[i].strategy == records[i].strategy);
    CHECK(format_real(back[i].acc_train) == format_real(records[i].acc_train));
    CHECK(format_real(back[i].acc_test) == format_real(records[i].acc_test));
    if (records[i].ts_undefined()) {
      CHECK_FALSE(back[i].ts_train);
      CHECK_FALSE(back[i].ts_test);
    } else {
      CHECK(format_real(*back[i].ts_train) == format_real(*records[i].ts_train));
      CHECK(format_real(*back[i].ts_test) == format_real(*records[i].ts_test));
    }
    CHECK(back[i].ts_undefined() == records[i].ts_undefined());
  }
  // once rounded, further trips are the identity
  write_results(back, dir / "again.csv");
  const auto again = read_results(dir / "again.csv");
  write_results(again, dir / "third.csv");
  CHECK(slurp(dir / "third.csv") == slurp(dir / "again.csv"));

  RunRecord undefined = records[0];
  undefined.ts_train.reset();
  const auto row = csv_row(undefined);
  CHECK(row.find(",,") != std::string::npos);
  CHECK(row.find(",1,") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("metric columns") {
  RunRecord r;
  r.acc_train = 0.9;
  r.acc_test = 0.4;
  r.ts_train = 0.5;
  CHECK(*metric_value(r, "acc_gap") == doctest::Approx(-0.5));
  CHECK(*metric_value(r, "ts_train") == 0.5);
  CHECK_FALSE(metric_value(r, "ts_test"));
  CHECK_FALSE(metric_value(r, "ts_gap"));
  CHECK_THROWS(metric_value(r, "loss"));
}

TEST_CASE("analysis round trip: summaries equal direct tests on the CSV columns") {
  Rng rng(2);
  std::vector<RunRecord> records;
  for (std::size_t i = 0; i < 120; ++i) records.push_back(random_record(rng, i));
  const auto dir = scratch("analysis");
  fs::create_directories(dir);
  write_results(records, dir / "runs.csv");
  const auto rows = read_results(dir / "runs.csv");
  write_analysis(analyze(rows), dir / "analysis.json");
  const auto j = nlohmann::json::parse(slurp(dir / "analysis.json"));

  std::size_t checked = 0;
  for (const auto& m : j.at("ks_matrices")) {
    const auto batches = m.at("batches").get<std::vector<std::size_t>>();
    const auto metric = m.at("metric").get<std::string>();
    const auto group = m.at("group").get<std::string>();
    for (std::size_t i = 0; i < batches.size(); ++i) {
      for (std::size_t k = 0; k < batches.size(); ++k) {
        std::vector<double> a, b;
        for (const auto& r : rows) {
          const auto g = std::to_string(r.attrs) + "-attr/" + r.strategy + "/" + r.stimulus +
                         "/V=" + std::to_string(r.vocab) + "/L=" + std::to_string(r.max_len);
          if (g != group) continue;
          const auto v = metric_value(r, metric);
          if (!v) continue;
          if (r.batch == batches[i]) a.push_back(*v);
          if (r.batch == batches[k]) b.push_back(*v);
        }
        const auto& cell = m.at("p_values")[i][k];
        if (i == k || a.empty() || b.empty()) {
          CHECK(cell.is_null());
          continue;
        }
        const auto direct = stats::ks_two_sample(a, b, stats::Alternative::Greater);
        CHECK(cell.get<std::string>() == format_real(direct.p_value));
        CHECK(m.at("statistics")[i][k].get<std::string>() == format_real(direct.statistic));
        ++checked;
      }
    }
  }
  CHECK(checked > 20);

  std::size_t spearman_checked = 0;
  for (const auto& row : j.at("spearman")) {
    if (row.at("label") != "pooled") continue;
    std::vector<double> ts, acc;
    for (const auto& r : rows) {
      if (!r.ts_train) continue;
      ts.push_back(*r.ts_train);
      acc.push_back(r.acc_test);
    }
    const auto direct = stats::spearman(ts, acc);
    CHECK(row.at("result").at("statistic").get<std::string>() == format_real(direct.statistic));
    CHECK(row.at("result").at("p_value").get<std::string>() == format_real(direct.p_value));
    ++spearman_checked;
  }
  CHECK(spearman_checked == 1);
  fs::remove_all(dir);
}

TEST_CASE("run_preset end to end") {
  ExperimentPreset p;
  p.name = "tiny";
  p.grid = {tiny_cell(2), tiny_cell(4)};
  p.seeds = 2;
  p.base_seed = 5;

  const auto serial = scratch("serial"), parallel = scratch("parallel");
  std::size_t callbacks = 0;
  const auto a = run_preset(p, serial, [&](const RunRecord&) { ++callbacks; });
  CHECK(callbacks == 4);
  CHECK(a.failures.empty());
  REQUIRE(a.records.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(a.records[i].run_id == i);
  CHECK(a.records[3].seed == 5 + 1000 + 1);
  for (const char* f : {"runs.csv", "manifest.txt", "analysis.json"}) CHECK(fs::exists(serial / f));
  CHECK_FALSE(fs::exists(serial / "failures.csv"));

  p.parallelism = 3;
  const auto b = run_preset(p, parallel);
  REQUIRE(b.records.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    auto x = a.records[i], y = b.records[i];
    x.wall_s = y.wall_s = 0.0;
    CHECK(csv_row(x) == csv_row(y));
  }

  SUBCASE("a failing cell is recorded and the rest continue") {
    auto q = p;
    q.parallelism = 1;
    q.grid[1].stimulus = stimuli::StimulusKind::Visual;
    q.grid[1].batch = 1;
    const auto dir = scratch("failing");
    const auto c = run_preset(q, dir);
    CHECK(c.records.size() == 2);
    CHECK(c.failures.size() == 2);
    CHECK(c.failures[0].run_id == 2);
    CHECK(fs::exists(dir / "failures.csv"));
    CHECK(read_results(dir / "runs.csv").size() == 2);
    fs::remove_all(dir);
  }
  fs::remove_all(serial);
  fs::remove_all(parallel);
}
