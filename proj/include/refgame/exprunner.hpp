#pragma once

// Experiment configuration, presets, seeded batch execution and result
// files (runs.csv, manifest.txt, analysis.json).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "refgame/game.hpp"
#include "refgame/stats.hpp"

namespace refgame::exprunner {

struct ExperimentPreset {
  std::string name = "custom";
  std::vector<game::GameConfig> grid;
  std::size_t seeds = 1;
  std::uint64_t base_seed = 1;
  /// Replaces every cell's sample budget when set.
  std::optional<std::size_t> budget_override;
  std::size_t parallelism = 1;
  std::filesystem::path out_dir;

  /// Fully specified configuration of (cell, seed index).
  game::GameConfig run_config(std::size_t cell, std::size_t seed_index) const;
};

/// One recognised configuration key and its default.
struct ConfigKey {
  std::string section;
  std::string key;
  std::string default_value;
};

/// Every accepted configuration key.
const std::vector<ConfigKey>& config_registry();

/// Seed used when a configuration does not set one: REFGAME_SEED if it
/// holds an integer, else 1.
std::uint64_t default_seed();

/// Line-based `key = value` text with optional `[game]`, `[optimizer]` and
/// `[run]` sections; several `key=value` tokens may share a line. `#`
/// starts a comment. Unknown keys and malformed lines raise ConfigError
/// with the line number; invalid values raise ParameterError.
ExperimentPreset parse_config(std::string_view text);
ExperimentPreset load_config(const std::filesystem::path& path);

inline constexpr std::string_view kPresetNames[] = {"exp1_split", "exp2_batchsize",
                                                    "exp3_struct_capacity", "exp4_correlation"};

/// The paper's experiment grids. Throws ParameterError for unknown names.
ExperimentPreset make_preset(std::string_view name, std::size_t seeds,
                             std::optional<std::size_t> budget = std::nullopt);

struct RunRecord {
  std::size_t run_id = 0;
  std::string preset;
  int attrs = 0;
  std::string strategy;
  std::string stimulus;
  std::size_t vocab = 0;
  std::size_t max_len = 0;
  std::size_t batch = 0;
  double coverage = 0.0;
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  double acc_train = 0.0;
  double acc_test = 0.0;
  std::optional<double> ts_train;
  std::optional<double> ts_test;
  double wall_s = 0.0;

  double acc_gap() const { return acc_test - acc_train; }
  bool ts_undefined() const { return !ts_train || !ts_test; }
  std::optional<double> ts_gap() const;
};

struct RunFailure {
  std::size_t run_id = 0;
  std::uint64_t seed = 0;
  std::string error;
};

struct PresetOutcome {
  std::vector<RunRecord> records;  // sorted by run_id
  std::vector<RunFailure> failures;
};

using RunCallback = std::function<void(const RunRecord&)>;

/// Runs grid x seeds on a pool of `preset.parallelism` workers. Writes
/// runs.csv, manifest.txt, failures.csv (if any) and analysis.json into
/// `out_dir`. A failing run is recorded and the preset continues.
PresetOutcome run_preset(const ExperimentPreset& preset, const std::filesystem::path& out_dir,
                         const RunCallback& on_run = {});

inline constexpr std::string_view kCsvHeader =
    "run_id,preset,attrs,strategy,stimulus,V,L,batch,coverage,seed,steps,acc_train,acc_test,"
    "acc_gap,ts_train,ts_test,ts_gap,ts_undefined,wall_s";

/// Reals with 6 significant digits.
std::string format_real(double v);

std::string csv_row(const RunRecord& r);
void write_results(std::span<const RunRecord> records, const std::filesystem::path& path);
std::vector<RunRecord> read_results(const std::filesystem::path& path);

/// Runs are grouped into benchmarks by (attrs, strategy, stimulus).
struct KsMatrix {
  std::string group;
  std::string metric;
  std::vector<std::size_t> batches;
  /// cells[i][j]: KS test of batch i's values against batch j's with the
  /// "greater" alternative; unset on the diagonal or when either side is
  /// empty.
  std::vector<std::vector<std::optional<stats::TestResult>>> cells;
};

struct SpearmanRow {
  std::string label;
  std::string metric;
  std::string factor;
  std::optional<stats::TestResult> result;
  std::string note;
};

struct Analysis {
  std::vector<KsMatrix> ks;
  std::vector<SpearmanRow> spearman;
};

/// Metric column by name: acc_train, acc_test, acc_gap, ts_train, ts_test,
/// ts_gap. Undefined toposim values are skipped.
std::optional<double> metric_value(const RunRecord& r, std::string_view metric);

/// KS matrices over batch sizes for every benchmark with 2+ batch sizes, and
/// Spearman tests of metrics against L and V (capacity sweeps) and of
/// ts_train against acc_test (pooled).
Analysis analyze(std::span<const RunRecord> records);

void write_analysis(const Analysis& analysis, const std::filesystem::path& path);

void write_manifest(const ExperimentPreset& preset, const std::filesystem::path& path);

}  // namespace refgame::exprunner
