#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>
#include <string>

#include "refgame/errors.hpp"
#include "refgame/exprunner.hpp"
#include "refgame/game.hpp"
#include "refgame/ilm.hpp"
#include "refgame/metrics.hpp"
#include "refgame/stats.hpp"
#include "refgame/stimuli.hpp"

namespace py = pybind11;
using namespace refgame;

namespace {

std::vector<std::vector<int>> meaning_rows(const std::vector<stimuli::Meaning>& ms) {
  std::vector<std::vector<int>> out;
  out.reserve(ms.size());
  for (const auto& m : ms) out.push_back(m.values);
  return out;
}

py::dict record_dict(const exprunner::RunRecord& r) {
  py::dict d;
  d["run_id"] = r.run_id;
  d["preset"] = r.preset;
  d["attrs"] = r.attrs;
  d["strategy"] = r.strategy;
  d["stimulus"] = r.stimulus;
  d["V"] = r.vocab;
  d["L"] = r.max_len;
  d["batch"] = r.batch;
  d["coverage"] = r.coverage;
  d["seed"] = r.seed;
  d["steps"] = r.steps;
  d["acc_train"] = r.acc_train;
  d["acc_test"] = r.acc_test;
  d["acc_gap"] = r.acc_gap();
  d["ts_train"] = r.ts_train;
  d["ts_test"] = r.ts_test;
  d["ts_gap"] = r.ts_gap();
  d["wall_s"] = r.wall_s;
  return d;
}

ilm::IlmEnv make_env(std::size_t f, std::size_t v, std::size_t r, std::optional<std::size_t> n) {
  auto env = ilm::IlmEnv::square(f, v, r);
  if (n) env.objects = *n;
  env.validate();
  return env;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Referential games with a straight-through Gumbel-Softmax channel";

  // errors
  auto base = py::register_exception<ParameterError>(m, "ParameterError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<UndefinedCorrelationError>(m, "UndefinedCorrelationError", PyExc_ArithmeticError);
  py::register_exception<UndefinedStabilityError>(m, "UndefinedStabilityError", PyExc_ArithmeticError);
  py::register_exception<StateError>(m, "StateError", PyExc_RuntimeError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_RuntimeError);
  (void)base;

  // stimuli
  py::class_<stimuli::Benchmark>(m, "Benchmark")
      .def_property_readonly("attrs", [](const stimuli::Benchmark& b) { return b.spec.num_axes(); })
      .def_property_readonly("strategy",
                             [](const stimuli::Benchmark& b) { return std::string(stimuli::to_string(b.strategy)); })
      .def_property_readonly("train", [](const stimuli::Benchmark& b) { return meaning_rows(b.train); })
      .def_property_readonly("test", [](const stimuli::Benchmark& b) { return meaning_rows(b.test); })
      .def_readonly("testing_purpose", &stimuli::Benchmark::testing_purpose)
      .def("__repr__", [](const stimuli::Benchmark& b) {
        return "<Benchmark " + std::to_string(b.spec.num_axes()) + "-attr " +
               std::string(stimuli::to_string(b.strategy)) + " train=" + std::to_string(b.train.size()) +
               " test=" + std::to_string(b.test.size()) + ">";
      });
  m.def(
      "build_benchmark",
      [](int attrs, const std::string& strategy) {
        return stimuli::build_benchmark(attrs, stimuli::parse_strategy(strategy));
      },
      py::arg("attrs"), py::arg("strategy") = "interpolation");

  // metrics
  m.def("edit_distance", [](const std::vector<int>& a, const std::vector<int>& b) {
    return metrics::edit_distance(a, b);
  });
  m.def(
      "topographic_similarity",
      [](const std::vector<std::vector<int>>& meanings, const std::vector<std::vector<int>>& messages) {
        metrics::LanguageSample s;
        for (const auto& v : meanings) s.meanings.push_back(stimuli::Meaning{v});
        s.messages = messages;
        return metrics::topographic_similarity(s);
      },
      py::arg("meanings"), py::arg("messages"));

  // stats
  py::class_<stats::TestResult>(m, "TestResult")
      .def_readonly("statistic", &stats::TestResult::statistic)
      .def_readonly("p_value", &stats::TestResult::p_value)
      .def_property_readonly("alternative",
                             [](const stats::TestResult& r) { return std::string(stats::to_string(r.alternative)); })
      .def_readonly("n", &stats::TestResult::n)
      .def_readonly("m", &stats::TestResult::m)
      .def("__repr__", [](const stats::TestResult& r) {
        return "<TestResult statistic=" + std::to_string(r.statistic) + " p=" + std::to_string(r.p_value) + ">";
      });
  m.def(
      "ks_two_sample",
      [](const std::vector<double>& a, const std::vector<double>& b, const std::string& alt) {
        return stats::ks_two_sample(a, b, stats::parse_alternative(alt));
      },
      py::arg("a"), py::arg("b"), py::arg("alternative") = "two-sided");
  m.def(
      "spearman",
      [](const std::vector<double>& x, const std::vector<double>& y) { return stats::spearman(x, y); },
      py::arg("x"), py::arg("y"));

  // ilm
  m.def(
      "expressivity_holistic",
      [](std::size_t f, std::size_t v, std::size_t r, std::optional<std::size_t> n) {
        return ilm::expressivity_holistic(make_env(f, v, r, n));
      },
      py::arg("features"), py::arg("values"), py::arg("observations"), py::arg("objects") = py::none());
  m.def(
      "expressivity_compositional",
      [](std::size_t f, std::size_t v, std::size_t r, std::optional<std::size_t> n) {
        return ilm::expressivity_compositional(make_env(f, v, r, n));
      },
      py::arg("features"), py::arg("values"), py::arg("observations"), py::arg("objects") = py::none());
  m.def(
      "relative_stability",
      [](std::size_t f, std::size_t v, std::size_t r, std::optional<std::size_t> n) {
        return ilm::relative_stability(make_env(f, v, r, n));
      },
      py::arg("features"), py::arg("values"), py::arg("observations"), py::arg("objects") = py::none());
  m.def(
      "monte_carlo_expressivity",
      [](std::size_t f, std::size_t v, std::size_t r, const std::string& language, std::size_t trials,
         std::uint64_t seed, std::optional<std::size_t> n) {
        const auto lang = language == "holistic"        ? ilm::Language::Holistic
                          : language == "compositional" ? ilm::Language::Compositional
                                                        : throw ParameterError("unknown language '" + language + "'");
        const auto e = ilm::monte_carlo_expressivity(make_env(f, v, r, n), lang, trials, seed);
        return py::make_tuple(e.mean, e.std_error);
      },
      py::arg("features"), py::arg("values"), py::arg("observations"), py::arg("language"),
      py::arg("trials") = 10000, py::arg("seed") = 1, py::arg("objects") = py::none());

  // game
  py::class_<game::GameConfig>(m, "GameConfig")
      .def(py::init<>())
      .def_readwrite("attrs", &game::GameConfig::n_attrs)
      .def_property(
          "strategy", [](const game::GameConfig& g) { return std::string(stimuli::to_string(g.strategy)); },
          [](game::GameConfig& g, const std::string& s) { g.strategy = stimuli::parse_strategy(s); })
      .def_property(
          "stimulus", [](const game::GameConfig& g) { return std::string(stimuli::to_string(g.stimulus)); },
          [](game::GameConfig& g, const std::string& s) { g.stimulus = stimuli::parse_stimulus_kind(s); })
      .def_property(
          "channel", [](const game::GameConfig& g) { return std::string(game::to_string(g.channel)); },
          [](game::GameConfig& g, const std::string& s) {
            g.channel = game::parse_channel(s);
            g.apply_channel();
          })
      .def_readwrite("vocab", &game::GameConfig::vocab)
      .def_readwrite("max_len", &game::GameConfig::max_len)
      .def_readwrite("k_train", &game::GameConfig::k_train)
      .def_readwrite("k_test", &game::GameConfig::k_test)
      .def_readwrite("batch", &game::GameConfig::batch)
      .def_readwrite("budget", &game::GameConfig::sample_budget)
      .def_readwrite("seed", &game::GameConfig::seed)
      .def_readwrite("tau0", &game::GameConfig::tau0)
      .def_readwrite("hidden", &game::GameConfig::hidden)
      .def_readwrite("dropout", &game::GameConfig::embedding_dropout)
      .def_readwrite("eval_rounds", &game::GameConfig::eval_rounds)
      .def_readwrite("eval_batch", &game::GameConfig::eval_batch)
      .def_property(
          "lr", [](const game::GameConfig& g) { return g.adam.lr; },
          [](game::GameConfig& g, double v) { g.adam.lr = v; })
      .def_property_readonly("steps", &game::GameConfig::steps)
      .def("validate", &game::GameConfig::validate)
      .def("describe", [](const game::GameConfig& g) {
        py::dict d;
        for (const auto& [k, v] : g.describe()) d[py::str(k)] = v;
        return d;
      });

  py::class_<game::TrainReport>(m, "TrainReport")
      .def_readonly("losses", &game::TrainReport::losses)
      .def_readonly("steps", &game::TrainReport::steps)
      .def_readonly("coverage", &game::TrainReport::coverage)
      .def_readonly("acc_train", &game::TrainReport::acc_train)
      .def_readonly("acc_test", &game::TrainReport::acc_test)
      .def_readonly("ts_train", &game::TrainReport::ts_train)
      .def_readonly("ts_test", &game::TrainReport::ts_test)
      .def_readonly("diverged", &game::TrainReport::diverged)
      .def_readonly("diagnostic", &game::TrainReport::diagnostic);

  m.def(
      "train",
      [](const game::GameConfig& config, std::optional<game::ProgressFn> progress) {
        if (progress) return game::train(config, *progress);
        py::gil_scoped_release release;
        return game::train(config);
      },
      py::arg("config"), py::arg("progress") = py::none(),
      "Train one speaker/listener pair; `progress(step, loss, accuracy)` is called every log_every steps.");

  // experiments
  py::class_<exprunner::ExperimentPreset>(m, "ExperimentPreset")
      .def_readwrite("name", &exprunner::ExperimentPreset::name)
      .def_readwrite("grid", &exprunner::ExperimentPreset::grid)
      .def_readwrite("seeds", &exprunner::ExperimentPreset::seeds)
      .def_readwrite("base_seed", &exprunner::ExperimentPreset::base_seed)
      .def_readwrite("budget_override", &exprunner::ExperimentPreset::budget_override)
      .def_readwrite("parallel", &exprunner::ExperimentPreset::parallelism)
      .def("run_config", &exprunner::ExperimentPreset::run_config, py::arg("cell"), py::arg("seed_index"));

  m.def("parse_config", [](const std::string& text) { return exprunner::parse_config(text); });
  m.def(
      "make_preset",
      [](const std::string& name, std::size_t seeds, std::optional<std::size_t> budget) {
        return exprunner::make_preset(name, seeds, budget);
      },
      py::arg("name"), py::arg("seeds") = 1, py::arg("budget") = py::none());
  m.def(
      "run_preset",
      [](const exprunner::ExperimentPreset& preset, const std::filesystem::path& out) {
        exprunner::PresetOutcome outcome;
        {
          py::gil_scoped_release release;
          outcome = exprunner::run_preset(preset, out);
        }
        py::list records, failures;
        for (const auto& r : outcome.records) records.append(record_dict(r));
        for (const auto& f : outcome.failures) failures.append(py::make_tuple(f.run_id, f.seed, f.error));
        return py::make_tuple(records, failures);
      },
      py::arg("preset"), py::arg("out"),
      "Run every (cell, seed); returns (records, failures) and writes runs.csv, manifest.txt and "
      "analysis.json under `out`.");
  m.def("read_results", [](const std::filesystem::path& path) {
    py::list out;
    for (const auto& r : exprunner::read_results(path)) out.append(record_dict(r));
    return out;
  });
}
