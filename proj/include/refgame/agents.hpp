#pragma once

// Speaker and listener agents: stimulus encoder f, LSTM language module,
// ST-GS emission on the speaker side and a dot-product decision module on
// the listener side. The two agents never share parameters.

#include <cstddef>
#include <string>
#include <vector>

#include "refgame/channel.hpp"
#include "refgame/diffcore.hpp"
#include "refgame/stimuli.hpp"

namespace refgame::agents {

using diff::Mode;
using diff::Parameter;
using diff::Tape;
using diff::Tensor;

/// Index of the grounded end-of-sentence symbol.
inline constexpr std::size_t kEosSymbol = 0;

/// What the speaker passes on at each position: the straight-through
/// one-hot, or the relaxed Gumbel-Softmax sample itself (a smooth forward
/// used by finite-difference checks; its gradient equals the
/// straight-through gradient).
enum class Emission { StraightThrough, Relaxed };

struct AgentConfig {
  stimuli::StimulusKind kind = stimuli::StimulusKind::Symbolic;
  /// Shape of one stimulus (e.g. {24} or {1,32,32}).
  diff::Shape stimulus_shape;
  std::size_t hidden = 256;
  std::size_t vocab = 100;
  std::size_t max_len = 20;
  double tau0 = 0.2;
  double embedding_dropout = 0.8;
  Emission emission = Emission::StraightThrough;
};

/// Stimulus module f: four stride-2 conv + batchnorm + leaky ReLU layers
/// flattened to 256 values (visual), or one affine layer + leaky ReLU
/// (symbolic).
class Encoder {
 public:
  Encoder(const std::string& prefix, const AgentConfig& config, Rng& rng);

  /// [N, ...stimulus_shape] -> [N, hidden]
  Tensor encode(Tape& tape, const Tensor& stimuli, Mode mode);

  std::vector<Parameter*> parameters();

 private:
  struct ConvLayer {
    Parameter kernel;
    Parameter bias;
    Parameter gamma;
    Parameter beta;
    diff::BatchNormStats stats;
  };

  stimuli::StimulusKind kind_;
  diff::Shape stimulus_shape_;
  std::size_t hidden_;
  std::vector<Parameter> affine_;  // symbolic: weight, bias
  std::vector<ConvLayer> conv_;    // visual
};

struct LstmParams {
  LstmParams(const std::string& prefix, std::size_t input, std::size_t hidden, Rng& rng);

  Parameter w_ih;
  Parameter w_hh;
  Parameter bias;
  std::size_t hidden;

  diff::LstmOutput step(Tape& tape, const Tensor& x, const Tensor& h, const Tensor& c) const;
  std::vector<Parameter*> parameters();
};

/// L one-hot symbol rows per batch item, stored position-major so that each
/// position stays a node of the gradient graph.
struct Message {
  std::vector<Tensor> symbols;  // L tensors of shape [B,V]
  std::size_t batch = 0;
  std::size_t vocab = 0;

  std::size_t max_len() const { return symbols.size(); }
  /// symbol_indices()[b][i]: hot index at position i.
  std::vector<std::vector<int>> symbol_indices() const;
  /// Position of the first end-of-sentence symbol + 1, or L.
  std::vector<std::size_t> effective_lengths() const;
  /// Dense [B,L,V] copy of the symbol values.
  Tensor dense() const;
};

/// Symbols up to (excluding) the first end-of-sentence.
std::vector<int> truncate_at_eos(const std::vector<int>& symbols);

class Speaker {
 public:
  Speaker(const AgentConfig& config, Rng& rng);

  /// h_0 = f(target), c_0 = 0, m_0 = start-of-sentence (a zero input vector,
  /// outside the emittable alphabet). For i = 1..L:
  /// h_i = LSTM(m_{i-1}, h_{i-1}); m_i = ST-GS(nu(h_i), tau(h_i)).
  Message speak(Tape& tape, const Tensor& targets, Rng& rng, Mode mode);

  std::vector<Parameter*> parameters();
  const AgentConfig& config() const { return config_; }

 private:
  AgentConfig config_;
  Encoder encoder_;
  LstmParams lstm_;
  Parameter proj_w_;
  Parameter proj_b_;
  channel::TemperatureHead temperature_;
};

class Listener {
 public:
  Listener(const AgentConfig& config, Rng& rng);

  /// Final LSTM state h_L after consuming the embedded message from a zero
  /// initial state. Embedding dropout is active in train mode only.
  Tensor read(Tape& tape, const Message& message, Rng& rng, Mode mode);

  /// softmax_i(<h_L, f(s_i)>) over the candidates of each batch item.
  /// `candidates` is [B*(K+1), ...] with item b's candidates contiguous.
  Tensor listen_and_score(Tape& tape, const Message& message, const Tensor& candidates,
                          std::size_t num_candidates, Rng& rng, Mode mode);

  std::vector<Parameter*> parameters();
  const AgentConfig& config() const { return config_; }

 private:
  AgentConfig config_;
  Encoder encoder_;
  Parameter embed_w_;
  Parameter embed_b_;
  LstmParams lstm_;
};

}  // namespace refgame::agents
