#include "refgame/game.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include "refgame/errors.hpp"
#include "refgame/metrics.hpp"

namespace refgame::game {

namespace {

// Independent random streams of one run.
enum Stream : std::uint64_t {
  kInitStream = 0,
  kSamplingStream = 1,
  kPlayStream = 2,
  kEvalTrainStream = 3,
  kEvalTestStream = 4,
  kDescribeStream = 5,
  kSubsampleStream = 6,
};

Rng stream(const GameConfig& config, Stream s) { return Rng(derive_seed(config.seed, s)); }

// Shortest text that parses back to the same double.
std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// Draws `count` distinct entries of `pool` (in place partial shuffle).
void draw_distinct(std::vector<std::size_t>& pool, std::size_t count, Rng& rng,
                   std::vector<std::size_t>& out) {
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
    out.push_back(pool[i]);
  }
}

std::optional<double> toposim_or_undefined(std::span<const std::size_t> ids,
                                           const stimuli::Benchmark& bench,
                                           const stimuli::StimulusBank& bank, Agents& agents,
                                           const GameConfig& config, Stream describe_stream) {
  Rng pick = stream(config, kSubsampleStream);
  std::vector<std::size_t> chosen(ids.begin(), ids.end());
  if (chosen.size() > metrics::kMaxToposimItems) {
    pick.shuffle(std::span<std::size_t>(chosen));
    chosen.resize(metrics::kMaxToposimItems);
    std::sort(chosen.begin(), chosen.end());
  }
  Rng rng = stream(config, describe_stream);
  metrics::LanguageSample sample;
  sample.messages = describe_meanings(chosen, bank, agents, config.eval_batch, rng);
  for (auto id : chosen) sample.meanings.push_back(stimuli::meaning_at(id, bench.spec));
  try {
    return metrics::topographic_similarity(sample);
  } catch (const UndefinedCorrelationError&) {
    return std::nullopt;
  }
}

}  // namespace

std::string_view to_string(Channel c) {
  switch (c) {
    case Channel::Complete:
      return "complete";
    case Channel::Overcomplete:
      return "overcomplete";
    case Channel::Custom:
      break;
  }
  return "custom";
}

Channel parse_channel(std::string_view text) {
  if (text == "complete") return Channel::Complete;
  if (text == "overcomplete") return Channel::Overcomplete;
  if (text == "custom") return Channel::Custom;
  throw ParameterError("unknown channel '" + std::string(text) + "'");
}

void GameConfig::apply_channel() {
  if (channel == Channel::Complete) {
    vocab = 9;
    max_len = static_cast<std::size_t>(n_attrs);
  } else if (channel == Channel::Overcomplete) {
    vocab = 100;
    max_len = 20;
  }
}

void GameConfig::validate() const {
  if (n_attrs < 2 || n_attrs > 4) throw ParameterError("attrs must be 2, 3 or 4");
  if (batch < 1) throw ParameterError("batch size must be >= 1");
  if (vocab < 2) throw ParameterError("vocabulary size must be >= 2");
  if (max_len < 1) throw ParameterError("maximum sentence length must be >= 1");
  if (k_train < 1 || k_test < 1) throw ParameterError("number of distractors must be >= 1");
  if (sample_budget < batch) throw ParameterError("sample budget must cover at least one batch");
  if (hidden < 1) throw ParameterError("hidden size must be >= 1");
  if (!(tau0 > 0.0)) throw ParameterError("tau0 must be positive");
  if (!(embedding_dropout >= 0.0 && embedding_dropout < 1.0)) {
    throw ParameterError("dropout probability must be in [0, 1)");
  }
  if (!(adam.lr > 0.0)) throw ParameterError("learning rate must be positive");
  if (eval_rounds < 1 || eval_batch < 1) throw ParameterError("evaluation sizes must be >= 1");
  if (stimulus == stimuli::StimulusKind::Visual && batch < 2) {
    throw ParameterError("visual stimuli need batch >= 2 for batch normalisation");
  }
}

agents::AgentConfig GameConfig::agent_config(const stimuli::StimulusBank& bank) const {
  agents::AgentConfig a;
  a.kind = stimulus;
  a.stimulus_shape = bank.item_shape();
  a.hidden = hidden;
  a.vocab = vocab;
  a.max_len = max_len;
  a.tau0 = tau0;
  a.embedding_dropout = embedding_dropout;
  return a;
}

std::vector<std::pair<std::string, std::string>> GameConfig::describe() const {
  return {
      {"attrs", std::to_string(n_attrs)},
      {"strategy", std::string(stimuli::to_string(strategy))},
      {"stimulus", std::string(stimuli::to_string(stimulus))},
      {"channel", std::string(to_string(channel))},
      {"vocab", std::to_string(vocab)},
      {"max_len", std::to_string(max_len)},
      {"k_train", std::to_string(k_train)},
      {"k_test", std::to_string(k_test)},
      {"batch", std::to_string(batch)},
      {"budget", std::to_string(sample_budget)},
      {"steps", std::to_string(steps())},
      {"seed", std::to_string(seed)},
      {"lr", format_double(adam.lr)},
      {"beta1", format_double(adam.beta1)},
      {"beta2", format_double(adam.beta2)},
      {"eps", format_double(adam.eps)},
      {"tau0", format_double(tau0)},
      {"hidden", std::to_string(hidden)},
      {"dropout", format_double(embedding_dropout)},
      {"eval_rounds", std::to_string(eval_rounds)},
      {"eval_batch", std::to_string(eval_batch)},
      {"log_every", std::to_string(log_every)},
      {"checkpoint_every", std::to_string(checkpoint_every)},
      {"checkpoint_dir", checkpoint_dir.string()},
      {"loss", "nll_of_target"},
      {"leaky_relu_slope", format_double(diff::kLeakySlope)},
      {"batchnorm_eps", "1e-05"},
      {"batchnorm_momentum", "0.1"},
      {"conv_padding", "1"},
      {"init", "uniform_fan_in;lstm_forget_bias=1"},
      {"precision", "float64"},
      {"prng", "xoshiro256**/splitmix64"},
      {"gumbel_uniform_clamp", "1e-20"},
      {"argmax_tie_break", "lowest_index"},
      {"decision_tie_break", "uniform"},
      {"sos", "zero_vector"},
      {"eos_symbol", std::to_string(agents::kEosSymbol)},
      {"test_distractors", "test_then_train"},
      {"toposim", "hamming/levenshtein/spearman"},
      {"toposim_max_items", std::to_string(metrics::kMaxToposimItems)},
  };
}

std::vector<std::size_t> RoundBatch::flat_candidates() const {
  std::vector<std::size_t> out;
  for (const auto& c : candidates) out.insert(out.end(), c.begin(), c.end());
  return out;
}

RoundBatch sample_round(std::span<const std::size_t> split, std::size_t batch, std::size_t k,
                        Rng& rng, std::span<const std::size_t> fallback) {
  if (split.empty()) throw StateError("sample_round: empty split");
  if (batch < 1) throw ParameterError("sample_round: batch must be >= 1");
  if (k < 1) throw ParameterError("sample_round: need at least one distractor");
  RoundBatch round;
  std::vector<std::size_t> pool, extra;
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t target = split[rng.below(split.size())];
    pool.clear();
    for (auto id : split) {
      if (id != target) pool.push_back(id);
    }
    std::vector<std::size_t> cand;
    cand.reserve(k + 1);
    if (pool.size() >= k) {
      draw_distinct(pool, k, rng, cand);
    } else {
      cand.insert(cand.end(), pool.begin(), pool.end());
      extra.clear();
      for (auto id : fallback) {
        if (id != target && std::find(pool.begin(), pool.end(), id) == pool.end()) {
          extra.push_back(id);
        }
      }
      const std::size_t from_extra = std::min(extra.size(), k - cand.size());
      draw_distinct(extra, from_extra, rng, cand);
      // both pools exhausted: repeat items
      std::vector<std::size_t> all(pool);
      all.insert(all.end(), extra.begin(), extra.end());
      if (all.empty() && cand.size() < k) all.push_back(target);
      while (cand.size() < k) cand.push_back(all[rng.below(all.size())]);
    }
    cand.push_back(target);
    rng.shuffle(std::span<std::size_t>(cand));
    // position of the (first) target entry; only it counts as the target
    std::size_t pos = 0;
    while (cand[pos] != target) ++pos;
    round.targets.push_back(target);
    round.candidates.push_back(std::move(cand));
    round.target_positions.push_back(pos);
  }
  return round;
}

std::vector<diff::Parameter*> Agents::parameters() {
  auto out = speaker.parameters();
  for (auto* p : listener.parameters()) out.push_back(p);
  return out;
}

Agents make_agents(const GameConfig& config, const stimuli::StimulusBank& bank, Rng& rng) {
  const auto ac = config.agent_config(bank);
  agents::Speaker speaker(ac, rng);
  agents::Listener listener(ac, rng);
  return Agents{std::move(speaker), std::move(listener)};
}

PlayResult play_and_loss(Tape& tape, const RoundBatch& round, const stimuli::StimulusBank& bank,
                         Agents& agents, Rng& rng, Mode mode) {
  const std::size_t B = round.batch();
  const std::size_t C = round.num_candidates();
  PlayResult res;
  const Tensor targets = bank.gather(round.targets);
  const Tensor candidates = bank.gather(round.flat_candidates());
  res.message = agents.speaker.speak(tape, targets, rng, mode);
  const Tensor scores = agents.listener.listen_and_score(tape, res.message, candidates, C, rng, mode);
  res.loss = diff::cross_entropy_loss(tape, scores, round.target_positions);

  const auto s = scores.data();
  std::vector<std::size_t> best;
  for (std::size_t b = 0; b < B; ++b) {
    const double mx = *std::max_element(s.begin() + static_cast<std::ptrdiff_t>(b * C),
                                        s.begin() + static_cast<std::ptrdiff_t>((b + 1) * C));
    best.clear();
    for (std::size_t c = 0; c < C; ++c) {
      if (s[b * C + c] == mx) best.push_back(c);
    }
    if (best.empty()) best.push_back(0);  // non-finite scores
    res.predictions.push_back(best.size() == 1 ? best[0] : best[rng.below(best.size())]);
  }
  res.accuracy = metrics::accuracy(res.predictions, round.target_positions);
  return res;
}

double evaluate(std::span<const std::size_t> split, std::span<const std::size_t> fallback,
                const stimuli::StimulusBank& bank, Agents& agents, std::size_t k,
                std::size_t n_rounds, std::size_t eval_batch, Rng& rng) {
  if (n_rounds == 0 || eval_batch == 0) throw ParameterError("evaluate: sizes must be >= 1");
  double hits = 0.0;
  for (std::size_t done = 0; done < n_rounds;) {
    const std::size_t b = std::min(eval_batch, n_rounds - done);
    const RoundBatch round = sample_round(split, b, k, rng, fallback);
    Tape tape(false);
    const PlayResult res = play_and_loss(tape, round, bank, agents, rng, Mode::Eval);
    hits += res.accuracy * static_cast<double>(b);
    done += b;
  }
  return hits / static_cast<double>(n_rounds);
}

std::vector<std::vector<int>> describe_meanings(std::span<const std::size_t> ids,
                                                const stimuli::StimulusBank& bank, Agents& agents,
                                                std::size_t chunk, Rng& rng) {
  std::vector<std::vector<int>> out;
  out.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); i += chunk) {
    const auto part = ids.subspan(i, std::min(chunk, ids.size() - i));
    Tape tape(false);
    const auto msg = agents.speaker.speak(tape, bank.gather(part), rng, Mode::Eval);
    for (const auto& row : msg.symbol_indices()) out.push_back(agents::truncate_at_eos(row));
  }
  return out;
}

static const diff::Parameter* first_non_finite(std::span<diff::Parameter* const> params) {
  for (const auto* p : params) {
    for (double v : p->value.data()) {
      if (!std::isfinite(v)) return p;
    }
  }
  return nullptr;
}

TrainReport train(const GameConfig& config, const stimuli::Benchmark& bench,
                  const stimuli::StimulusBank& bank, Agents& agents, const ProgressFn& progress) {
  config.validate();
  const auto train_ids = bench.train_ids();
  const auto test_ids = bench.test_ids();
  auto params = agents.parameters();

  TrainReport report;
  report.steps = config.steps();
  report.coverage = static_cast<double>(config.batch) / static_cast<double>(train_ids.size());
  report.losses.reserve(report.steps);

  Rng sampling = stream(config, kSamplingStream);
  Rng play = stream(config, kPlayStream);
  double window_acc = 0.0;
  std::size_t window = 0;
  for (std::size_t step = 1; step <= report.steps; ++step) {
    const RoundBatch round = sample_round(train_ids, config.batch, config.k_train, sampling);
    Tape tape;
    PlayResult res = play_and_loss(tape, round, bank, agents, play, Mode::Train);
    const double loss = res.loss.item();
    report.losses.push_back(loss);
    report.targets_presented += round.batch();
    if (!std::isfinite(loss)) {
      report.diverged = true;
      report.diverged_at = step;
      report.diagnostic = "non-finite loss " + format_double(loss) + " at step " +
                          std::to_string(step);
      return report;
    }
    diff::zero_grad(params);
    tape.backward(res.loss);
    diff::adam_step(params, config.adam);
    if (const auto* bad = first_non_finite(params)) {
      report.diverged = true;
      report.diverged_at = step;
      report.diagnostic = "non-finite value in parameter '" + bad->name + "' after step " +
                          std::to_string(step);
      return report;
    }

    window_acc += res.accuracy;
    ++window;
    if (config.log_every > 0 && (step % config.log_every == 0 || step == report.steps)) {
      report.train_accuracy_log.emplace_back(step, window_acc / static_cast<double>(window));
      window_acc = 0.0;
      window = 0;
    }
    if (progress) progress(step, loss, res.accuracy);
    if (!config.checkpoint_dir.empty() && config.checkpoint_every > 0 &&
        step % config.checkpoint_every == 0 && step != report.steps) {
      std::filesystem::create_directories(config.checkpoint_dir);
      diff::save_checkpoint(config.checkpoint_dir / ("step_" + std::to_string(step) + ".rgl"),
                            std::vector<const diff::Parameter*>(params.begin(), params.end()));
    }
  }
  if (!config.checkpoint_dir.empty()) {
    std::filesystem::create_directories(config.checkpoint_dir);
    diff::save_checkpoint(config.checkpoint_dir / "final.rgl",
                          std::vector<const diff::Parameter*>(params.begin(), params.end()));
  }

  Rng eval_train = stream(config, kEvalTrainStream);
  report.acc_train = evaluate(train_ids, {}, bank, agents, config.k_train, config.eval_rounds,
                              config.eval_batch, eval_train);
  Rng eval_test = stream(config, kEvalTestStream);
  report.acc_test = evaluate(test_ids, train_ids, bank, agents, config.k_test, config.eval_rounds,
                             config.eval_batch, eval_test);
  report.ts_train = toposim_or_undefined(train_ids, bench, bank, agents, config, kDescribeStream);
  report.ts_test = toposim_or_undefined(test_ids, bench, bank, agents, config, kDescribeStream);
  return report;
}

TrainReport train(const GameConfig& config, const ProgressFn& progress) {
  config.validate();
  const auto bench = stimuli::build_benchmark(config.n_attrs, config.strategy);
  const stimuli::StimulusBank bank(bench.spec, config.stimulus);
  Rng init = stream(config, kInitStream);
  Agents agents = make_agents(config, bank, init);
  return train(config, bench, bank, agents, progress);
}

}  // namespace refgame::game
