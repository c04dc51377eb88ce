#pragma once

// The discriminative referential game: round sampling, the joint
// speaker/listener loss, budgeted training and evaluation.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "refgame/agents.hpp"
#include "refgame/diffcore.hpp"
#include "refgame/stimuli.hpp"

namespace refgame::game {

using diff::Mode;
using diff::Tape;
using diff::Tensor;

enum class Channel { Complete, Overcomplete, Custom };

std::string_view to_string(Channel c);
Channel parse_channel(std::string_view text);

struct GameConfig {
  int n_attrs = 3;
  stimuli::Strategy strategy = stimuli::Strategy::Interpolation;
  stimuli::StimulusKind stimulus = stimuli::StimulusKind::Symbolic;
  Channel channel = Channel::Overcomplete;
  std::size_t vocab = 100;
  std::size_t max_len = 20;
  std::size_t k_train = 47;
  std::size_t k_test = 63;
  std::size_t batch = 8;
  std::size_t sample_budget = 480000;
  std::uint64_t seed = 1;
  diff::AdamConfig adam;
  double tau0 = 0.2;
  std::size_t hidden = 256;
  double embedding_dropout = 0.8;
  std::size_t eval_rounds = 2000;
  std::size_t eval_batch = 50;
  /// Steps between periodic train-accuracy log entries (0 disables).
  std::size_t log_every = 1000;
  /// Directory for parameter checkpoints (empty disables).
  std::filesystem::path checkpoint_dir;
  /// Steps between intermediate checkpoints (0: final checkpoint only).
  std::size_t checkpoint_every = 0;

  /// Sets vocab/max_len from the channel preset: complete gives V=9,
  /// L=n_attrs; overcomplete gives V=100, L=20. Custom leaves them alone.
  void apply_channel();
  void validate() const;
  std::size_t steps() const { return sample_budget / batch; }
  agents::AgentConfig agent_config(const stimuli::StimulusBank& bank) const;

  /// Every field as ordered (key, value) text pairs, for manifests.
  std::vector<std::pair<std::string, std::string>> describe() const;
};

struct RoundBatch {
  std::vector<std::size_t> targets;                  // meaning ids, size B
  std::vector<std::vector<std::size_t>> candidates;  // B lists of K+1 meaning ids
  std::vector<std::size_t> target_positions;         // index of the target in its list

  std::size_t batch() const { return targets.size(); }
  std::size_t num_candidates() const { return candidates.empty() ? 0 : candidates[0].size(); }
  /// All candidate ids, item-major.
  std::vector<std::size_t> flat_candidates() const;
};

/// B targets drawn uniformly from `split`. Each target gets K distractors
/// drawn from `split` minus the target, without replacement while the pool
/// allows it. When that pool is short, the remainder comes from `fallback`
/// (without replacement), and only after both are exhausted are repeats
/// allowed. Candidates are shuffled and the target position recorded.
RoundBatch sample_round(std::span<const std::size_t> split, std::size_t batch, std::size_t k,
                        Rng& rng, std::span<const std::size_t> fallback = {});

struct Agents {
  agents::Speaker speaker;
  agents::Listener listener;

  std::vector<diff::Parameter*> parameters();
};

Agents make_agents(const GameConfig& config, const stimuli::StimulusBank& bank, Rng& rng);

struct PlayResult {
  Tensor loss;
  double accuracy = 0.0;
  std::vector<std::size_t> predictions;
  agents::Message message;
};

/// The speaker sees only the targets; the listener scores each candidate
/// list. loss = mean NLL of the target position; predictions are argmax
/// with ties broken uniformly at random.
PlayResult play_and_loss(Tape& tape, const RoundBatch& round, const stimuli::StimulusBank& bank,
                         Agents& agents, Rng& rng, Mode mode);

/// Mean accuracy over `n_rounds` rounds in eval mode, played in chunks of
/// `eval_batch`. Gradient-free and side-effect free.
double evaluate(std::span<const std::size_t> split, std::span<const std::size_t> fallback,
                const stimuli::StimulusBank& bank, Agents& agents, std::size_t k,
                std::size_t n_rounds, std::size_t eval_batch, Rng& rng);

/// Messages (EoS-truncated) the speaker produces in eval mode for each id.
std::vector<std::vector<int>> describe_meanings(std::span<const std::size_t> ids,
                                                const stimuli::StimulusBank& bank, Agents& agents,
                                                std::size_t chunk, Rng& rng);

struct TrainReport {
  std::vector<double> losses;
  /// (step, batch accuracy averaged over the last log window)
  std::vector<std::pair<std::size_t, double>> train_accuracy_log;
  std::size_t steps = 0;
  std::size_t targets_presented = 0;
  double coverage = 0.0;
  double acc_train = 0.0;
  double acc_test = 0.0;
  std::optional<double> ts_train;
  std::optional<double> ts_test;
  bool diverged = false;
  std::size_t diverged_at = 0;
  std::string diagnostic;
};

using ProgressFn = std::function<void(std::size_t step, double loss, double accuracy)>;

/// Runs floor(budget / B) gradient steps. A non-finite loss stops training
/// and is recorded in the report (final metrics are then left unset).
TrainReport train(const GameConfig& config, const stimuli::Benchmark& bench,
                  const stimuli::StimulusBank& bank, Agents& agents,
                  const ProgressFn& progress = {});

/// Builds the benchmark, stimuli and agents from `config` and trains.
TrainReport train(const GameConfig& config, const ProgressFn& progress = {});

}  // namespace refgame::game
