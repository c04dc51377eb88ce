#include "refgame/exprunner.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "refgame/errors.hpp"

namespace refgame::exprunner {

namespace {

// Seeds of different grid cells are kept apart by this offset.
constexpr std::uint64_t kCellSeedStride = 1000;

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ParameterError("invalid value '" + value + "' for " + key);
  }
  return out;
}

double parse_real(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != value.size() || value.empty()) {
    throw ParameterError("invalid value '" + value + "' for " + key);
  }
  return out;
}

// Applies one key to the preset; returns false for unknown keys.
bool apply_key(ExperimentPreset& preset, game::GameConfig& g, bool& channel_set,
               bool& seed_set, const std::string& section, const std::string& key,
               const std::string& value) {
  const std::string id = section + "." + key;
  if (id == "game.attrs") {
    g.n_attrs = parse_number<int>(key, value);
  } else if (id == "game.strategy") {
    g.strategy = stimuli::parse_strategy(value);
  } else if (id == "game.stimulus") {
    g.stimulus = stimuli::parse_stimulus_kind(value);
  } else if (id == "game.channel") {
    g.channel = game::parse_channel(value);
    channel_set = true;
  } else if (id == "game.vocab") {
    g.vocab = parse_number<std::size_t>(key, value);
  } else if (id == "game.max_len") {
    g.max_len = parse_number<std::size_t>(key, value);
  } else if (id == "game.k_train") {
    g.k_train = parse_number<std::size_t>(key, value);
  } else if (id == "game.k_test") {
    g.k_test = parse_number<std::size_t>(key, value);
  } else if (id == "game.batch") {
    g.batch = parse_number<std::size_t>(key, value);
  } else if (id == "game.budget") {
    g.sample_budget = parse_number<std::size_t>(key, value);
  } else if (id == "game.seed") {
    g.seed = parse_number<std::uint64_t>(key, value);
    seed_set = true;
  } else if (id == "game.tau0") {
    g.tau0 = parse_real(key, value);
  } else if (id == "game.hidden") {
    g.hidden = parse_number<std::size_t>(key, value);
  } else if (id == "game.dropout") {
    g.embedding_dropout = parse_real(key, value);
  } else if (id == "game.eval_rounds") {
    g.eval_rounds = parse_number<std::size_t>(key, value);
  } else if (id == "game.eval_batch") {
    g.eval_batch = parse_number<std::size_t>(key, value);
  } else if (id == "game.log_every") {
    g.log_every = parse_number<std::size_t>(key, value);
  } else if (id == "game.checkpoint_every") {
    g.checkpoint_every = parse_number<std::size_t>(key, value);
  } else if (id == "game.checkpoint_dir") {
    g.checkpoint_dir = value;
  } else if (id == "optimizer.lr") {
    g.adam.lr = parse_real(key, value);
  } else if (id == "optimizer.beta1") {
    g.adam.beta1 = parse_real(key, value);
  } else if (id == "optimizer.beta2") {
    g.adam.beta2 = parse_real(key, value);
  } else if (id == "optimizer.eps") {
    g.adam.eps = parse_real(key, value);
  } else if (id == "run.name") {
    preset.name = value;
  } else if (id == "run.seeds") {
    preset.seeds = parse_number<std::size_t>(key, value);
  } else if (id == "run.parallel") {
    preset.parallelism = parse_number<std::size_t>(key, value);
  } else if (id == "run.out") {
    preset.out_dir = value;
  } else {
    return false;
  }
  return true;
}

std::string real_or_empty(const std::optional<double>& v) {
  return v ? format_real(*v) : std::string();
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::optional<double> optional_real(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::stod(s);
}

nlohmann::ordered_json result_json(const stats::TestResult& r) {
  nlohmann::ordered_json j;
  j["statistic"] = format_real(r.statistic);
  j["p_value"] = format_real(r.p_value);
  j["alternative"] = std::string(stats::to_string(r.alternative));
  j["n"] = r.n;
  j["m"] = r.m;
  return j;
}

game::GameConfig base_config(int attrs, stimuli::Strategy strategy, stimuli::StimulusKind kind,
                             game::Channel channel, std::size_t batch) {
  game::GameConfig g;
  g.n_attrs = attrs;
  g.strategy = strategy;
  g.stimulus = kind;
  g.channel = channel;
  g.batch = batch;
  g.apply_channel();
  return g;
}

// Batch sizes giving the lowest (~4%) coverage per benchmark size.
std::size_t low_coverage_batch(int attrs) {
  switch (attrs) {
    case 2:
      return 2;
    case 3:
      return 8;
    default:
      return 40;
  }
}

constexpr stimuli::Strategy kStrategies[] = {stimuli::Strategy::Interpolation,
                                             stimuli::Strategy::Extrapolation};
constexpr stimuli::StimulusKind kKinds[] = {stimuli::StimulusKind::Symbolic,
                                            stimuli::StimulusKind::Visual};
constexpr game::Channel kChannels[] = {game::Channel::Complete, game::Channel::Overcomplete};

}  // namespace

game::GameConfig ExperimentPreset::run_config(std::size_t cell, std::size_t seed_index) const {
  game::GameConfig g = grid.at(cell);
  g.seed = base_seed + kCellSeedStride * cell + seed_index;
  if (budget_override) g.sample_budget = *budget_override;
  if (!g.checkpoint_dir.empty()) {
    g.checkpoint_dir /= "run_" + std::to_string(cell * seeds + seed_index);
  }
  return g;
}

const std::vector<ConfigKey>& config_registry() {
  static const std::vector<ConfigKey> registry = [] {
    const game::GameConfig g;
    std::vector<ConfigKey> keys;
    static const std::set<std::string> optimizer = {"lr", "beta1", "beta2", "eps"};
    // derived or fixed entries of describe() are not settable
    static const std::set<std::string> fixed = {
        "steps",           "loss",              "leaky_relu_slope",     "batchnorm_eps",
        "batchnorm_momentum", "conv_padding",   "init",                 "precision",
        "prng",            "gumbel_uniform_clamp", "argmax_tie_break",  "decision_tie_break",
        "sos",             "eos_symbol",        "test_distractors",     "toposim",
        "toposim_max_items"};
    std::vector<ConfigKey> opt;
    for (const auto& [k, v] : g.describe()) {
      if (fixed.count(k)) continue;
      (optimizer.count(k) ? opt : keys).push_back({optimizer.count(k) ? "optimizer" : "game", k, v});
    }
    keys.insert(keys.end(), opt.begin(), opt.end());
    keys.push_back({"run", "name", "custom"});
    keys.push_back({"run", "seeds", "1"});
    keys.push_back({"run", "parallel", "1"});
    keys.push_back({"run", "out", ""});
    return keys;
  }();
  return registry;
}

std::uint64_t default_seed() {
  if (const char* env = std::getenv("REFGAME_SEED")) {
    std::uint64_t v = 0;
    const std::string s(env);
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec == std::errc() && ptr == s.data() + s.size()) return v;
  }
  return 1;
}

ExperimentPreset parse_config(std::string_view text) {
  ExperimentPreset preset;
  game::GameConfig g;
  bool channel_set = false, seed_set = false;
  std::string section = "game";
  std::istringstream is{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (section != "game" && section != "optimizer" && section != "run") {
        throw ConfigError(where + "unknown section [" + section + "]");
      }
      continue;
    }
    std::vector<std::pair<std::string, std::string>> pairs;
    const auto eq_count = std::count(line.begin(), line.end(), '=');
    if (eq_count == 0) throw ConfigError(where + "expected key = value");
    if (eq_count == 1) {
      const auto eq = line.find('=');
      pairs.emplace_back(trim(std::string_view(line).substr(0, eq)),
                         trim(std::string_view(line).substr(eq + 1)));
    } else {
      std::istringstream tokens(line);
      std::string tok;
      while (tokens >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos || eq == 0) {
          throw ConfigError(where + "expected key=value tokens, got '" + tok + "'");
        }
        pairs.emplace_back(tok.substr(0, eq), tok.substr(eq + 1));
      }
    }
    for (const auto& [key, value] : pairs) {
      if (key.empty()) throw ConfigError(where + "missing key");
      try {
        if (!apply_key(preset, g, channel_set, seed_set, section, key, value)) {
          throw ConfigError(where + "unknown key '" + key + "' in [" + section + "]");
        }
      } catch (const ParameterError& e) {
        throw ParameterError(where + e.what());
      }
    }
  }
  if (!seed_set) g.seed = default_seed();
  if (channel_set) {
    const std::size_t v = g.vocab, l = g.max_len;
    g.apply_channel();
    // explicit V/L only make sense with the custom channel
    if (g.channel == game::Channel::Custom) {
      g.vocab = v;
      g.max_len = l;
    }
  } else {
    g.apply_channel();
  }
  g.validate();
  if (preset.seeds < 1) throw ParameterError("seeds must be >= 1");
  if (preset.parallelism < 1) throw ParameterError("parallel must be >= 1");
  preset.base_seed = g.seed;
  preset.grid.push_back(g);
  return preset;
}

ExperimentPreset load_config(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_config(buf.str());
}

ExperimentPreset make_preset(std::string_view name, std::size_t seeds,
                             std::optional<std::size_t> budget) {
  if (seeds < 1) throw ParameterError("seeds must be >= 1");
  ExperimentPreset p;
  p.name = std::string(name);
  p.seeds = seeds;
  p.budget_override = budget;
  p.base_seed = default_seed();
  using stimuli::Strategy;
  using stimuli::StimulusKind;
  if (name == "exp1_split") {
    for (auto kind : kKinds) {
      for (auto strategy : kStrategies) {
        for (auto channel : kChannels) {
          p.grid.push_back(base_config(3, strategy, kind, channel, low_coverage_batch(3)));
        }
      }
    }
  } else if (name == "exp2_batchsize") {
    const std::vector<std::pair<int, std::vector<std::size_t>>> sweeps = {
        {2, {2, 4, 8, 16, 32}}, {3, {8, 16, 32, 64, 128}}};
    for (auto kind : kKinds) {
      for (const auto& [attrs, batches] : sweeps) {
        for (auto strategy : kStrategies) {
          for (auto b : batches) {
            p.grid.push_back(base_config(attrs, strategy, kind, game::Channel::Overcomplete, b));
          }
        }
      }
    }
  } else if (name == "exp3_struct_capacity") {
    for (int attrs : {2, 3, 4}) {
      for (auto strategy : kStrategies) {
        for (auto channel : kChannels) {
          p.grid.push_back(base_config(attrs, strategy, StimulusKind::Visual, channel,
                                       low_coverage_batch(attrs)));
        }
      }
    }
    auto capacity = [&](Strategy strategy, std::size_t v, std::size_t l) {
      auto g = base_config(3, strategy, StimulusKind::Visual, game::Channel::Custom,
                           low_coverage_batch(3));
      g.vocab = v;
      g.max_len = l;
      p.grid.push_back(g);
    };
    for (auto strategy : kStrategies) {
      for (std::size_t v : {9, 20}) {
        for (std::size_t l : {3, 6, 10, 20}) capacity(strategy, v, l);
      }
      for (std::size_t l : {10, 20}) {
        for (std::size_t v : {9, 20, 50, 100}) {
          // (V=9|20, L=10|20) cells already exist in the L sweep
          if ((v == 9 || v == 20)) continue;
          capacity(strategy, v, l);
        }
      }
    }
  } else if (name == "exp4_correlation") {
    for (int attrs : {2, 3, 4}) {
      for (auto strategy : kStrategies) {
        for (auto channel : kChannels) {
          p.grid.push_back(base_config(attrs, strategy, StimulusKind::Visual, channel,
                                       low_coverage_batch(attrs)));
        }
      }
    }
  } else {
    throw ParameterError("unknown preset '" + std::string(name) +
                         "' (expected exp1_split, exp2_batchsize, exp3_struct_capacity or "
                         "exp4_correlation)");
  }
  return p;
}

std::optional<double> RunRecord::ts_gap() const {
  if (ts_undefined()) return std::nullopt;
  return *ts_test - *ts_train;
}

std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  // avoid "-0"
  if (std::string_view(buf) == "-0") return "0";
  return buf;
}

std::string csv_row(const RunRecord& r) {
  std::ostringstream os;
  os << r.run_id << ',' << r.preset << ',' << r.attrs << ',' << r.strategy << ',' << r.stimulus
     << ',' << r.vocab << ',' << r.max_len << ',' << r.batch << ',' << format_real(r.coverage)
     << ',' << r.seed << ',' << r.steps << ',' << format_real(r.acc_train) << ','
     << format_real(r.acc_test) << ',' << format_real(r.acc_gap()) << ','
     << (r.ts_undefined() ? "" : real_or_empty(r.ts_train)) << ','
     << (r.ts_undefined() ? "" : real_or_empty(r.ts_test)) << ',' << real_or_empty(r.ts_gap())
     << ',' << (r.ts_undefined() ? 1 : 0) << ',' << format_real(r.wall_s);
  return os.str();
}

void write_results(std::span<const RunRecord> records, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << kCsvHeader << '\n';
  for (const auto& r : records) os << csv_row(r) << '\n';
  if (!os) throw std::runtime_error("error writing " + path.string());
}

std::vector<RunRecord> read_results(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kCsvHeader) {
    throw ConfigError(path.string() + ": unexpected header");
  }
  std::vector<RunRecord> out;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != 19) {
      throw ConfigError(path.string() + ": line " + std::to_string(line_no) + " has " +
                        std::to_string(c.size()) + " columns");
    }
    RunRecord r;
    r.run_id = std::stoull(c[0]);
    r.preset = c[1];
    r.attrs = std::stoi(c[2]);
    r.strategy = c[3];
    r.stimulus = c[4];
    r.vocab = std::stoull(c[5]);
    r.max_len = std::stoull(c[6]);
    r.batch = std::stoull(c[7]);
    r.coverage = std::stod(c[8]);
    r.seed = std::stoull(c[9]);
    r.steps = std::stoull(c[10]);
    r.acc_train = std::stod(c[11]);
    r.acc_test = std::stod(c[12]);
    if (c[17] != "1") {
      r.ts_train = optional_real(c[14]);
      r.ts_test = optional_real(c[15]);
    }
    r.wall_s = std::stod(c[18]);
    out.push_back(std::move(r));
  }
  return out;
}

std::optional<double> metric_value(const RunRecord& r, std::string_view metric) {
  if (metric == "acc_train") return r.acc_train;
  if (metric == "acc_test") return r.acc_test;
  if (metric == "acc_gap") return r.acc_gap();
  if (metric == "ts_train") return r.ts_train;
  if (metric == "ts_test") return r.ts_test;
  if (metric == "ts_gap") return r.ts_gap();
  throw ParameterError("unknown metric '" + std::string(metric) + "'");
}

Analysis analyze(std::span<const RunRecord> records) {
  Analysis out;
  using Key = std::tuple<int, std::string, std::string, std::size_t, std::size_t>;

  // KS matrices across batch sizes within one benchmark and channel
  std::map<Key, std::map<std::size_t, std::vector<const RunRecord*>>> by_batch;
  for (const auto& r : records) {
    by_batch[{r.attrs, r.strategy, r.stimulus, r.vocab, r.max_len}][r.batch].push_back(&r);
  }
  for (const auto& [key, groups] : by_batch) {
    if (groups.size() < 2) continue;
    for (const char* metric : {"ts_train", "acc_gap"}) {
      KsMatrix m;
      const auto& [attrs, strategy, stimulus, v, l] = key;
      m.group = std::to_string(attrs) + "-attr/" + strategy + "/" + stimulus + "/V=" +
                std::to_string(v) + "/L=" + std::to_string(l);
      m.metric = metric;
      std::vector<std::vector<double>> values;
      for (const auto& [batch, runs] : groups) {
        m.batches.push_back(batch);
        std::vector<double> vals;
        for (const auto* r : runs) {
          if (auto x = metric_value(*r, metric)) vals.push_back(*x);
        }
        values.push_back(std::move(vals));
      }
      const std::size_t n = m.batches.size();
      m.cells.assign(n, std::vector<std::optional<stats::TestResult>>(n));
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          if (i == j || values[i].empty() || values[j].empty()) continue;
          m.cells[i][j] = stats::ks_two_sample(values[i], values[j], stats::Alternative::Greater);
        }
      }
      out.ks.push_back(std::move(m));
    }
  }

  auto add_spearman = [&](std::string label, std::string metric, std::string factor,
                          const std::vector<double>& x, const std::vector<double>& y) {
    SpearmanRow row{std::move(label), std::move(metric), std::move(factor), std::nullopt, ""};
    if (x.size() < 3) {
      row.note = "fewer than 3 runs";
    } else {
      try {
        row.result = stats::spearman(x, y);
      } catch (const UndefinedCorrelationError&) {
        row.note = "undefined (zero rank variance)";
      }
    }
    out.spearman.push_back(std::move(row));
  };

  // capacity sweeps: metric vs L at fixed V, metric vs V at fixed L
  using SweepKey = std::tuple<int, std::string, std::string, std::size_t, std::size_t>;
  std::map<SweepKey, std::vector<const RunRecord*>> fixed_v, fixed_l;
  for (const auto& r : records) {
    fixed_v[{r.attrs, r.strategy, r.stimulus, r.batch, r.vocab}].push_back(&r);
    fixed_l[{r.attrs, r.strategy, r.stimulus, r.batch, r.max_len}].push_back(&r);
  }
  auto sweep = [&](const auto& groups, const char* factor, const char* fixed_name,
                   auto factor_of) {
    for (const auto& [key, runs] : groups) {
      std::set<std::size_t> levels;
      for (const auto* r : runs) levels.insert(factor_of(*r));
      if (levels.size() < 2) continue;
      const auto& [attrs, strategy, stimulus, batch, fixed] = key;
      const std::string label = std::to_string(attrs) + "-attr/" + strategy + "/" + stimulus +
                                "/B=" + std::to_string(batch) + "/" + fixed_name + "=" +
                                std::to_string(fixed);
      for (const char* metric : {"ts_train", "ts_test", "acc_test"}) {
        std::vector<double> x, y;
        for (const auto* r : runs) {
          if (auto v = metric_value(*r, metric)) {
            x.push_back(static_cast<double>(factor_of(*r)));
            y.push_back(*v);
          }
        }
        add_spearman(label, metric, factor, x, y);
      }
    }
  };
  sweep(fixed_v, "L", "V", [](const RunRecord& r) { return r.max_len; });
  sweep(fixed_l, "V", "L", [](const RunRecord& r) { return r.vocab; });

  // pooled training-time toposim vs zero-shot accuracy
  std::vector<double> ts, acc;
  for (const auto& r : records) {
    if (r.ts_train) {
      ts.push_back(*r.ts_train);
      acc.push_back(r.acc_test);
    }
  }
  add_spearman("pooled", "acc_test", "ts_train", ts, acc);
  return out;
}

void write_analysis(const Analysis& analysis, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  auto& ks = j["ks_matrices"] = nlohmann::ordered_json::array();
  for (const auto& m : analysis.ks) {
    nlohmann::ordered_json e;
    e["group"] = m.group;
    e["metric"] = m.metric;
    e["alternative"] = "greater";
    e["batches"] = m.batches;
    auto& p = e["p_values"] = nlohmann::ordered_json::array();
    auto& d = e["statistics"] = nlohmann::ordered_json::array();
    for (const auto& row : m.cells) {
      auto pr = nlohmann::ordered_json::array();
      auto dr = nlohmann::ordered_json::array();
      for (const auto& c : row) {
        pr.push_back(c ? nlohmann::ordered_json(format_real(c->p_value)) : nlohmann::ordered_json());
        dr.push_back(c ? nlohmann::ordered_json(format_real(c->statistic))
                       : nlohmann::ordered_json());
      }
      p.push_back(std::move(pr));
      d.push_back(std::move(dr));
    }
    ks.push_back(std::move(e));
  }
  auto& sp = j["spearman"] = nlohmann::ordered_json::array();
  for (const auto& row : analysis.spearman) {
    nlohmann::ordered_json e;
    e["label"] = row.label;
    e["metric"] = row.metric;
    e["factor"] = row.factor;
    if (row.result) {
      e["result"] = result_json(*row.result);
    } else {
      e["result"] = nullptr;
      e["note"] = row.note;
    }
    sp.push_back(std::move(e));
  }
  j["toposim"] = "spearman(hamming meaning distance, levenshtein message distance)";
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

void write_manifest(const ExperimentPreset& preset, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "preset=" << preset.name << '\n'
     << "name=" << preset.name << '\n'
     << "out=" << preset.out_dir.string() << '\n'
     << "seeds=" << preset.seeds << '\n'
     << "base_seed=" << preset.base_seed << '\n'
     << "cell_seed_stride=" << kCellSeedStride << '\n'
     << "parallel=" << preset.parallelism << '\n'
     << "budget_override="
     << (preset.budget_override ? std::to_string(*preset.budget_override) : "") << '\n'
     << "cells=" << preset.grid.size() << '\n';
  for (std::size_t c = 0; c < preset.grid.size(); ++c) {
    os << "\n[cell " << c << "]\n";
    for (const auto& [k, v] : preset.run_config(c, 0).describe()) {
      os << k << '=' << v << '\n';
    }
  }
}

PresetOutcome run_preset(const ExperimentPreset& preset, const std::filesystem::path& out_dir,
                         const RunCallback& on_run) {
  if (preset.grid.empty()) throw ParameterError("preset has an empty grid");
  if (preset.seeds < 1 || preset.parallelism < 1) {
    throw ParameterError("seeds and parallelism must be >= 1");
  }
  std::filesystem::create_directories(out_dir);
  write_manifest(preset, out_dir / "manifest.txt");

  const std::size_t total = preset.grid.size() * preset.seeds;
  PresetOutcome outcome;
  std::mutex mu;
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    for (std::size_t id = next++; id < total; id = next++) {
      const std::size_t cell = id / preset.seeds, s = id % preset.seeds;
      const game::GameConfig cfg = preset.run_config(cell, s);
      const auto t0 = std::chrono::steady_clock::now();
      try {
        const auto report = game::train(cfg);
        if (report.diverged) throw DivergenceError(report.diagnostic, report.diverged_at);
        RunRecord r;
        r.run_id = id;
        r.preset = preset.name;
        r.attrs = cfg.n_attrs;
        r.strategy = std::string(stimuli::to_string(cfg.strategy));
        r.stimulus = std::string(stimuli::to_string(cfg.stimulus));
        r.vocab = cfg.vocab;
        r.max_len = cfg.max_len;
        r.batch = cfg.batch;
        r.coverage = report.coverage;
        r.seed = cfg.seed;
        r.steps = report.steps;
        r.acc_train = report.acc_train;
        r.acc_test = report.acc_test;
        r.ts_train = report.ts_train;
        r.ts_test = report.ts_test;
        r.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::lock_guard lock(mu);
        outcome.records.push_back(r);
        if (on_run) on_run(r);
      } catch (const std::exception& e) {
        std::lock_guard lock(mu);
        outcome.failures.push_back({id, cfg.seed, e.what()});
      }
    }
  };
  const std::size_t n_workers = std::min(preset.parallelism, total);
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::sort(outcome.records.begin(), outcome.records.end(),
            [](const auto& a, const auto& b) { return a.run_id < b.run_id; });
  std::sort(outcome.failures.begin(), outcome.failures.end(),
            [](const auto& a, const auto& b) { return a.run_id < b.run_id; });
  write_results(outcome.records, out_dir / "runs.csv");
  if (!outcome.failures.empty()) {
    std::ofstream os(out_dir / "failures.csv", std::ios::binary | std::ios::trunc);
    os << "run_id,seed,error\n";
    for (const auto& f : outcome.failures) {
      std::string msg = f.error;
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      os << f.run_id << ',' << f.seed << ',' << msg << '\n';
    }
  }
  // analysis reads the CSV back so it sees exactly the emitted values
  write_analysis(analyze(read_results(out_dir / "runs.csv")), out_dir / "analysis.json");
  return outcome;
}

}  // namespace refgame::exprunner
