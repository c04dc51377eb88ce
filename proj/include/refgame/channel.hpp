#pragma once

// Straight-Through Gumbel-Softmax channel with a learned per-symbol
// temperature tau(h) = 1 / (tau0 + softplus(alpha(h))).

#include <cstddef>
#include <vector>

#include "refgame/diffcore.hpp"
#include "refgame/rng.hpp"

namespace refgame::channel {

using diff::Tensor;
using diff::Tape;

/// Lower clamp applied to uniform samples before the double log.
inline constexpr double kUniformClamp = 1e-20;

/// -log(-log(u)) with u clamped into the open unit interval.
double gumbel_from_uniform(double u);

/// i.i.d. standard Gumbel samples.
Tensor gumbel_noise(const diff::Shape& shape, Rng& rng);

/// softmax((logits + noise) / tau) row-wise. `logits` [B,V] are treated as
/// unnormalized log-probabilities; `tau` [B] must be positive.
/// Differentiable with respect to both logits and tau.
Tensor gumbel_softmax_relax(Tape& tape, const Tensor& logits, const Tensor& tau,
                            const Tensor& noise);
Tensor gumbel_softmax_relax(Tape& tape, const Tensor& logits, const Tensor& tau, Rng& rng);

/// Forward: one-hot at the row argmax (lowest index wins ties).
/// Backward: identity, i.e. the gradient flows to `soft` unchanged.
Tensor straight_through_discretize(Tape& tape, const Tensor& soft);

/// Row-wise argmax, lowest index on ties.
std::vector<std::size_t> argmax_rows(const Tensor& t);

/// Single affine map from the decoder hidden state to a scalar logit.
struct TemperatureHead {
  TemperatureHead(std::size_t hidden, double tau0, Rng& rng);

  diff::Parameter weight;  // [1, hidden]
  diff::Parameter bias;    // [1]
  double tau0;
};

/// 1 / (tau0 + softplus(a)) applied elementwise to a [B] tensor.
Tensor temperature_from_logit(Tape& tape, const Tensor& a, double tau0);

/// tau(h) for h [B,H]; returns [B], each entry in (0, 1/tau0].
Tensor learned_temperature(Tape& tape, const Tensor& h, const TemperatureHead& head);

struct RelaxedSymbol {
  Tensor soft;
  Tensor hard;
  Tensor temperature;
};

/// One channel use: temperature from `h`, relaxed sample of `logits`, and its
/// straight-through discretization.
RelaxedSymbol emit_symbol(Tape& tape, const Tensor& logits, const Tensor& h,
                          const TemperatureHead& head, Rng& rng);

}  // namespace refgame::channel
