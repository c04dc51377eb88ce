#include "refgame/agents.hpp"

#include <algorithm>

#include "refgame/errors.hpp"

namespace refgame::agents {

namespace {

constexpr std::size_t kConvChannels[4] = {32, 32, 64, 64};

Parameter make_param(const std::string& name, diff::Shape shape, std::size_t fan_in, Rng& rng) {
  return Parameter(name, diff::uniform_init(std::move(shape), fan_in, rng));
}

}  // namespace

// ---- Encoder ---------------------------------------------------------------

Encoder::Encoder(const std::string& prefix, const AgentConfig& config, Rng& rng)
    : kind_(config.kind), stimulus_shape_(config.stimulus_shape), hidden_(config.hidden) {
  if (kind_ == stimuli::StimulusKind::Symbolic) {
    if (stimulus_shape_.size() != 1) {
      throw DimensionError("symbolic encoder expects a flat stimulus shape, got " +
                           diff::shape_str(stimulus_shape_));
    }
    const std::size_t in = stimulus_shape_[0];
    affine_.push_back(make_param(prefix + ".linear.weight", {hidden_, in}, in, rng));
    affine_.push_back(make_param(prefix + ".linear.bias", {hidden_}, in, rng));
    return;
  }
  if (stimulus_shape_ != diff::Shape{1, stimuli::kImageSize, stimuli::kImageSize}) {
    throw DimensionError("visual encoder expects [1,32,32] stimuli, got " +
                         diff::shape_str(stimulus_shape_));
  }
  const std::size_t flat = kConvChannels[3] * 2 * 2;
  if (hidden_ != flat) {
    throw DimensionError("visual encoder produces " + std::to_string(flat) +
                         " features; hidden size must match, got " + std::to_string(hidden_));
  }
  std::size_t in_ch = 1;
  for (std::size_t l = 0; l < 4; ++l) {
    const std::size_t out_ch = kConvChannels[l];
    const std::string p = prefix + ".conv" + std::to_string(l);
    conv_.push_back(ConvLayer{
        make_param(p + ".kernel", {out_ch, in_ch, 3, 3}, in_ch * 9, rng),
        make_param(p + ".bias", {out_ch}, in_ch * 9, rng),
        Parameter(p + ".bn.gamma", Tensor({out_ch}, 1.0)),
        Parameter(p + ".bn.beta", Tensor({out_ch}, 0.0)),
        diff::BatchNormStats(out_ch),
    });
    in_ch = out_ch;
  }
}

Tensor Encoder::encode(Tape& tape, const Tensor& stimuli, Mode mode) {
  if (stimuli.rank() != stimulus_shape_.size() + 1 ||
      !std::equal(stimulus_shape_.begin(), stimulus_shape_.end(), stimuli.shape().begin() + 1)) {
    throw DimensionError("encoder expects [N," + diff::shape_str(stimulus_shape_).substr(1) +
                         " stimuli, got " + diff::shape_str(stimuli.shape()));
  }
  const std::size_t n = stimuli.dim(0);
  if (kind_ == stimuli::StimulusKind::Symbolic) {
    return diff::leaky_relu(tape, diff::linear(tape, stimuli, affine_[0].value, affine_[1].value));
  }
  Tensor x = stimuli;
  for (auto& layer : conv_) {
    x = diff::conv2d_s2(tape, x, layer.kernel.value, layer.bias.value);
    x = diff::batch_norm2d(tape, x, layer.gamma.value, layer.beta.value, layer.stats, mode);
    x = diff::leaky_relu(tape, x);
  }
  return diff::reshape(tape, x, {n, hidden_});
}

std::vector<Parameter*> Encoder::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : affine_) out.push_back(&p);
  for (auto& l : conv_) {
    out.insert(out.end(), {&l.kernel, &l.bias, &l.gamma, &l.beta});
  }
  return out;
}

// ---- LSTM parameters -------------------------------------------------------

LstmParams::LstmParams(const std::string& prefix, std::size_t input, std::size_t hidden_,
                       Rng& rng)
    : w_ih(make_param(prefix + ".w_ih", {4 * hidden_, input}, hidden_, rng)),
      w_hh(make_param(prefix + ".w_hh", {4 * hidden_, hidden_}, hidden_, rng)),
      bias(make_param(prefix + ".bias", {4 * hidden_}, hidden_, rng)),
      hidden(hidden_) {
  // forget gate starts open
  auto b = bias.value.mutable_data();
  for (std::size_t j = hidden; j < 2 * hidden; ++j) b[j] = 1.0;
}

diff::LstmOutput LstmParams::step(Tape& tape, const Tensor& x, const Tensor& h,
                                  const Tensor& c) const {
  return diff::lstm_step(tape, x, h, c, w_ih.value, w_hh.value, bias.value);
}

std::vector<Parameter*> LstmParams::parameters() { return {&w_ih, &w_hh, &bias}; }

// ---- Message ---------------------------------------------------------------

std::vector<std::vector<int>> Message::symbol_indices() const {
  std::vector<std::vector<int>> out(batch, std::vector<int>(symbols.size(), 0));
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    const auto hot = channel::argmax_rows(symbols[i]);
    for (std::size_t b = 0; b < batch; ++b) out[b][i] = static_cast<int>(hot[b]);
  }
  return out;
}

std::vector<std::size_t> Message::effective_lengths() const {
  std::vector<std::size_t> out;
  for (const auto& row : symbol_indices()) {
    std::size_t len = row.size();
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (row[i] == static_cast<int>(kEosSymbol)) {
        len = i + 1;
        break;
      }
    }
    out.push_back(len);
  }
  return out;
}

Tensor Message::dense() const {
  const std::size_t L = symbols.size();
  Tensor out({batch, L, vocab});
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < L; ++i) {
    const auto sd = symbols[i].data();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t v = 0; v < vocab; ++v) od[(b * L + i) * vocab + v] = sd[b * vocab + v];
    }
  }
  return out;
}

std::vector<int> truncate_at_eos(const std::vector<int>& symbols) {
  std::vector<int> out;
  for (int s : symbols) {
    if (s == static_cast<int>(kEosSymbol)) break;
    out.push_back(s);
  }
  return out;
}

// ---- Speaker ---------------------------------------------------------------

Speaker::Speaker(const AgentConfig& config, Rng& rng)
    : config_(config),
      encoder_("speaker.encoder", config, rng),
      lstm_("speaker.lstm", config.vocab, config.hidden, rng),
      proj_w_(make_param("speaker.proj.weight", {config.vocab, config.hidden}, config.hidden, rng)),
      proj_b_(make_param("speaker.proj.bias", {config.vocab}, config.hidden, rng)),
      temperature_(config.hidden, config.tau0, rng) {
  if (config.max_len < 1) throw ParameterError("maximum sentence length must be >= 1");
  if (config.vocab < 2) throw ParameterError("vocabulary size must be >= 2");
  temperature_.weight.name = "speaker.temperature.weight";
  temperature_.bias.name = "speaker.temperature.bias";
}

Message Speaker::speak(Tape& tape, const Tensor& targets, Rng& rng, Mode mode) {
  const std::size_t B = targets.dim(0);
  Tensor h = encoder_.encode(tape, targets, mode);
  Tensor c({B, config_.hidden});
  Tensor input({B, config_.vocab});  // start-of-sentence
  Message msg;
  msg.batch = B;
  msg.vocab = config_.vocab;
  for (std::size_t i = 0; i < config_.max_len; ++i) {
    auto next = lstm_.step(tape, input, h, c);
    h = next.h;
    c = next.c;
    Tensor logits = diff::linear(tape, h, proj_w_.value, proj_b_.value);
    auto sym = channel::emit_symbol(tape, logits, h, temperature_, rng);
    input = config_.emission == Emission::Relaxed ? sym.soft : sym.hard;
    msg.symbols.push_back(input);
  }
  return msg;
}

std::vector<Parameter*> Speaker::parameters() {
  auto out = encoder_.parameters();
  for (auto* p : lstm_.parameters()) out.push_back(p);
  out.insert(out.end(), {&proj_w_, &proj_b_, &temperature_.weight, &temperature_.bias});
  return out;
}

// ---- Listener --------------------------------------------------------------

Listener::Listener(const AgentConfig& config, Rng& rng)
    : config_(config),
      encoder_("listener.encoder", config, rng),
      embed_w_(make_param("listener.embed.weight", {config.hidden, config.vocab}, config.vocab, rng)),
      embed_b_(make_param("listener.embed.bias", {config.hidden}, config.vocab, rng)),
      lstm_("listener.lstm", config.hidden, config.hidden, rng) {}

Tensor Listener::read(Tape& tape, const Message& message, Rng& rng, Mode mode) {
  const std::size_t B = message.batch;
  Tensor h({B, config_.hidden});
  Tensor c({B, config_.hidden});
  for (const auto& symbol : message.symbols) {
    if (symbol.rank() != 2 || symbol.dim(1) != config_.vocab) {
      throw DimensionError("listener expects [B," + std::to_string(config_.vocab) +
                           "] symbols, got " + diff::shape_str(symbol.shape()));
    }
    Tensor e = diff::linear(tape, symbol, embed_w_.value, embed_b_.value);
    e = diff::dropout(tape, e, config_.embedding_dropout, mode, rng);
    auto next = lstm_.step(tape, e, h, c);
    h = next.h;
    c = next.c;
  }
  return h;
}

Tensor Listener::listen_and_score(Tape& tape, const Message& message, const Tensor& candidates,
                                  std::size_t num_candidates, Rng& rng, Mode mode) {
  if (num_candidates < 2) {
    throw ParameterError("decision module needs at least 2 candidates, got " +
                         std::to_string(num_candidates));
  }
  const std::size_t B = message.batch;
  if (candidates.dim(0) != B * num_candidates) {
    throw DimensionError("expected " + std::to_string(B * num_candidates) + " candidates, got " +
                         std::to_string(candidates.dim(0)));
  }
  Tensor h = read(tape, message, rng, mode);
  Tensor feats = encoder_.encode(tape, candidates, mode);
  feats = diff::reshape(tape, feats, {B, num_candidates, config_.hidden});
  return diff::softmax(tape, diff::batched_dot(tape, h, feats), -1);
}

std::vector<Parameter*> Listener::parameters() {
  auto out = encoder_.parameters();
  out.insert(out.end(), {&embed_w_, &embed_b_});
  for (auto* p : lstm_.parameters()) out.push_back(p);
  return out;
}

}  // namespace refgame::agents
