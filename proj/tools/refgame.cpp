// Command-line front end: training runs, experiment presets, split export,
// ILM analytics and the statistical tests.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "refgame/errors.hpp"
#include "refgame/exprunner.hpp"
#include "refgame/ilm.hpp"
#include "refgame/stats.hpp"
#include "refgame/stimuli.hpp"

namespace {

using namespace refgame;

std::vector<double> read_values(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::vector<double> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(std::stod(line));
    } catch (const std::exception&) {
      throw ParameterError(path + ":" + std::to_string(n) + ": not a number: " + line);
    }
  }
  return out;
}

void print_run(const exprunner::RunRecord& r) {
  std::printf("run %zu seed=%llu acc_train=%s acc_test=%s ts_train=%s ts_test=%s wall_s=%s\n",
              r.run_id, static_cast<unsigned long long>(r.seed),
              exprunner::format_real(r.acc_train).c_str(),
              exprunner::format_real(r.acc_test).c_str(),
              r.ts_train ? exprunner::format_real(*r.ts_train).c_str() : "undefined",
              r.ts_test ? exprunner::format_real(*r.ts_test).c_str() : "undefined",
              exprunner::format_real(r.wall_s).c_str());
  std::fflush(stdout);
}

int finish(const exprunner::PresetOutcome& outcome, const std::filesystem::path& out) {
  for (const auto& f : outcome.failures) {
    std::fprintf(stderr, "run %zu failed: %s\n", f.run_id, f.error.c_str());
  }
  std::printf("wrote %s\n", (out / "runs.csv").string().c_str());
  return outcome.failures.empty() ? 0 : 3;
}

void print_ilm_row(const ilm::IlmEnv& env) {
  const double eh = ilm::expressivity_holistic(env);
  const double ec = ilm::expressivity_compositional(env);
  std::printf("%zu,%s,%s,%s,", env.observations, exprunner::format_real(env.coverage()).c_str(),
              exprunner::format_real(eh).c_str(), exprunner::format_real(ec).c_str());
  if (eh + ec > 0) {
    std::printf("%s\n", exprunner::format_real(ilm::relative_stability(env)).c_str());
  } else {
    std::printf("\n");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Referential-game laboratory"};
  app.require_subcommand(1);

  std::string config_path, train_out;
  auto* train = app.add_subcommand("train", "Train one configuration (all seeds)");
  train->add_option("--config", config_path, "key = value configuration file")->required();
  train->add_option("--out", train_out, "Output directory (overrides [run] out)");

  std::string preset_name, preset_out;
  std::size_t seeds = 1, parallel = 1, budget = 0;
  auto* preset = app.add_subcommand("preset", "Run one of the experiment presets");
  preset->add_option("--name", preset_name, "exp1_split|exp2_batchsize|exp3_struct_capacity|exp4_correlation")
      ->required();
  preset->add_option("--out", preset_out, "Output directory")->required();
  preset->add_option("--seeds", seeds, "Seeds per grid cell")->check(CLI::PositiveNumber);
  preset->add_option("--parallel", parallel, "Worker threads")->check(CLI::PositiveNumber);
  preset->add_option("--budget", budget, "Sample budget override (0: keep 480000)");

  int attrs = 3;
  std::string strategy = "interpolation", splits_out;
  auto* splits = app.add_subcommand("splits", "Export a train/test split");
  splits->add_option("--attrs", attrs, "2, 3 or 4")->required();
  splits->add_option("--strategy", strategy, "interpolation|extrapolation")->required();
  splits->add_option("--out", splits_out, "Output directory")->required();

  std::size_t features = 0, values = 0, observations = 0, objects = 0, mc = 0;
  std::string sweep;
  auto* ilm_cmd = app.add_subcommand("ilm", "Iterated-learning stability analytics");
  ilm_cmd->add_option("--features", features, "F")->required()->check(CLI::PositiveNumber);
  ilm_cmd->add_option("--values", values, "V")->required()->check(CLI::PositiveNumber);
  ilm_cmd->add_option("--observations", observations, "R");
  ilm_cmd->add_option("--objects", objects, "N (default V^F)");
  ilm_cmd->add_option("--mc", mc, "Monte Carlo trials");
  ilm_cmd->add_option("--sweep", sweep, "R=a..b: CSV of R, b, E_h, E_c, S");

  std::string test, file_a, file_b, alt = "two-sided";
  auto* stats_cmd = app.add_subcommand("stats", "KS or Spearman test on two files");
  stats_cmd->add_option("--test", test, "ks|spearman")->required()->check(CLI::IsMember({"ks", "spearman"}));
  stats_cmd->add_option("--a", file_a, "One value per line")->required();
  stats_cmd->add_option("--b", file_b, "One value per line")->required();
  stats_cmd->add_option("--alt", alt, "two-sided|greater|less");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      auto p = exprunner::load_config(config_path);
      const std::filesystem::path out =
          !train_out.empty() ? std::filesystem::path(train_out)
                             : (!p.out_dir.empty() ? p.out_dir : std::filesystem::path("runs") / p.name);
      for (const auto& [k, v] : p.run_config(0, 0).describe()) std::printf("%s=%s\n", k.c_str(), v.c_str());
      return finish(exprunner::run_preset(p, out, print_run), out);
    }
    if (*preset) {
      auto p = exprunner::make_preset(preset_name, seeds,
                                      budget > 0 ? std::optional<std::size_t>(budget) : std::nullopt);
      p.parallelism = parallel;
      p.out_dir = preset_out;
      std::printf("preset=%s cells=%zu seeds=%zu runs=%zu\n", p.name.c_str(), p.grid.size(),
                  p.seeds, p.grid.size() * p.seeds);
      return finish(exprunner::run_preset(p, preset_out, print_run), preset_out);
    }
    if (*splits) {
      const auto bench = stimuli::build_benchmark(attrs, stimuli::parse_strategy(strategy));
      stimuli::write_splits(bench, splits_out);
      std::printf("train=%zu test=%zu out=%s\n", bench.train.size(), bench.test.size(),
                  splits_out.c_str());
      return 0;
    }
    if (*ilm_cmd) {
      ilm::IlmEnv env = ilm::IlmEnv::square(features, values, observations);
      if (objects > 0) env.objects = objects;
      if (!sweep.empty()) {
        const auto eq = sweep.find('='), dots = sweep.find("..");
        if (sweep.substr(0, eq) != "R" || eq == std::string::npos || dots == std::string::npos) {
          throw ParameterError("--sweep expects R=a..b");
        }
        const auto lo = std::stoull(sweep.substr(eq + 1, dots - eq - 1));
        const auto hi = std::stoull(sweep.substr(dots + 2));
        if (lo > hi) throw ParameterError("--sweep: empty range");
        std::printf("R,b,E_h,E_c,S\n");
        for (auto r = lo; r <= hi; ++r) {
          env.observations = r;
          print_ilm_row(env);
        }
        return 0;
      }
      std::printf("N=%zu F=%zu V=%zu R=%zu M=%s b=%s\n", env.objects, env.features, env.values,
                  env.observations, exprunner::format_real(env.meanings()).c_str(),
                  exprunner::format_real(env.coverage()).c_str());
      std::printf("E_h=%s\nE_c=%s\n",
                  exprunner::format_real(ilm::expressivity_holistic(env)).c_str(),
                  exprunner::format_real(ilm::expressivity_compositional(env)).c_str());
      try {
        std::printf("S=%s\n", exprunner::format_real(ilm::relative_stability(env)).c_str());
      } catch (const UndefinedStabilityError& e) {
        std::printf("S=undefined (%s)\n", e.what());
      }
      if (mc > 0) {
        const auto seed = exprunner::default_seed();
        for (auto lang : {ilm::Language::Holistic, ilm::Language::Compositional}) {
          const auto est = ilm::monte_carlo_expressivity(env, lang, mc, seed);
          std::printf("mc_%s=%s ci95=[%s, %s] trials=%zu\n",
                      std::string(ilm::to_string(lang)).c_str(),
                      exprunner::format_real(est.mean).c_str(),
                      exprunner::format_real(est.mean - 1.96 * est.std_error).c_str(),
                      exprunner::format_real(est.mean + 1.96 * est.std_error).c_str(), est.trials);
        }
      }
      return 0;
    }
    if (*stats_cmd) {
      const auto a = read_values(file_a), b = read_values(file_b);
      const auto r = test == "ks" ? stats::ks_two_sample(a, b, stats::parse_alternative(alt))
                                  : stats::spearman(a, b);
      std::printf("test=%s alternative=%s n=%zu m=%zu\nstatistic=%s\np_value=%s\n", test.c_str(),
                  std::string(stats::to_string(r.alternative)).c_str(), r.n, r.m,
                  exprunner::format_real(r.statistic).c_str(),
                  exprunner::format_real(r.p_value).c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
