#include "refgame/channel.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "refgame/errors.hpp"

namespace refgame::channel {

namespace {

double softplus(double a) {
  // log(1 + e^a) without overflow
  return a > 0 ? a + std::log1p(std::exp(-a)) : std::log1p(std::exp(a));
}

double logistic(double a) {
  return a >= 0 ? 1.0 / (1.0 + std::exp(-a)) : std::exp(a) / (1.0 + std::exp(a));
}

}  // namespace

double gumbel_from_uniform(double u) {
  const double hi = std::nextafter(1.0, 0.0);
  const double clamped = std::clamp(u, kUniformClamp, hi);
  return -std::log(-std::log(clamped));
}

Tensor gumbel_noise(const diff::Shape& shape, Rng& rng) {
  Tensor g(shape);
  for (auto& v : g.mutable_data()) v = gumbel_from_uniform(rng.uniform());
  return g;
}

Tensor gumbel_softmax_relax(Tape& tape, const Tensor& logits, const Tensor& tau,
                            const Tensor& noise) {
  if (logits.rank() != 2 || tau.rank() != 1 || tau.dim(0) != logits.dim(0) ||
      noise.shape() != logits.shape()) {
    throw DimensionError("gumbel_softmax_relax: logits " + diff::shape_str(logits.shape()) +
                         " tau " + diff::shape_str(tau.shape()) + " noise " +
                         diff::shape_str(noise.shape()));
  }
  const std::size_t B = logits.dim(0), V = logits.dim(1);
  const auto ld = logits.data();
  const auto td = tau.data();
  const auto nd = noise.data();
  // NaN passes through so a diverging run surfaces as a non-finite loss
  for (double t : td) {
    if (t <= 0.0) throw ParameterError("gumbel_softmax_relax: temperature must be positive");
  }
  Tensor out({B, V});
  auto od = out.mutable_data();
  for (std::size_t b = 0; b < B; ++b) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < V; ++v) {
      od[b * V + v] = (ld[b * V + v] + nd[b * V + v]) / td[b];
      mx = std::max(mx, od[b * V + v]);
    }
    double z = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
      od[b * V + v] = std::exp(od[b * V + v] - mx);
      z += od[b * V + v];
    }
    for (std::size_t v = 0; v < V; ++v) od[b * V + v] /= z;
  }

  if (tape.tracks({&logits, &tau})) {
    tape.record("gumbel_softmax_relax", {out}, [logits, tau, noise, out, B, V]() {
      const auto dy = out.grad();
      const auto y = out.data();
      const auto ld = logits.data();
      const auto nd = noise.data();
      const auto td = tau.data();
      for (std::size_t b = 0; b < B; ++b) {
        // z = (logits + noise) / tau;  dL/dz = y * (dy - <dy, y>)
        double dot = 0.0;
        for (std::size_t v = 0; v < V; ++v) dot += dy[b * V + v] * y[b * V + v];
        double dtau = 0.0;
        for (std::size_t v = 0; v < V; ++v) {
          const double dz = y[b * V + v] * (dy[b * V + v] - dot);
          if (logits.requires_grad()) logits.grad_buffer()[b * V + v] += dz / td[b];
          dtau -= dz * (ld[b * V + v] + nd[b * V + v]) / (td[b] * td[b]);
        }
        if (tau.requires_grad()) tau.grad_buffer()[b] += dtau;
      }
    });
  }
  return out;
}

Tensor gumbel_softmax_relax(Tape& tape, const Tensor& logits, const Tensor& tau, Rng& rng) {
  return gumbel_softmax_relax(tape, logits, tau, gumbel_noise(logits.shape(), rng));
}

std::vector<std::size_t> argmax_rows(const Tensor& t) {
  const std::size_t cols = t.shape().back();
  const std::size_t rows = t.numel() / cols;
  std::vector<std::size_t> idx(rows, 0);
  const auto d = t.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 1; c < cols; ++c) {
      if (d[r * cols + c] > d[r * cols + idx[r]]) idx[r] = c;
    }
  }
  return idx;
}

Tensor straight_through_discretize(Tape& tape, const Tensor& soft) {
  if (soft.rank() != 2) {
    throw DimensionError("straight_through_discretize: expected [B,V], got " +
                         diff::shape_str(soft.shape()));
  }
  const std::size_t V = soft.dim(1);
  Tensor hard(soft.shape());
  const auto hot = argmax_rows(soft);
  auto hd = hard.mutable_data();
  for (std::size_t b = 0; b < hot.size(); ++b) hd[b * V + hot[b]] = 1.0;
  if (tape.tracks({&soft})) {
    tape.record("straight_through", {hard}, [soft, hard]() {
      const auto dy = hard.grad();
      auto gs = soft.grad_buffer();
      for (std::size_t i = 0; i < dy.size(); ++i) gs[i] += dy[i];
    });
  }
  return hard;
}

TemperatureHead::TemperatureHead(std::size_t hidden, double tau0_, Rng& rng)
    : weight("temperature.weight", diff::uniform_init({1, hidden}, hidden, rng)),
      bias("temperature.bias", Tensor({1}, 0.0)),
      tau0(tau0_) {
  if (!(tau0 > 0.0)) throw ParameterError("tau0 must be positive");
}

Tensor temperature_from_logit(Tape& tape, const Tensor& a, double tau0) {
  if (!(tau0 > 0.0)) throw ParameterError("tau0 must be positive");
  Tensor out(a.shape());
  const auto ad = a.data();
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < ad.size(); ++i) od[i] = 1.0 / (tau0 + softplus(ad[i]));
  if (tape.tracks({&a})) {
    tape.record("temperature", {out}, [a, out]() {
      const auto dy = out.grad();
      const auto ad = a.data();
      const auto tau = out.data();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < dy.size(); ++i) {
        ga[i] -= dy[i] * tau[i] * tau[i] * logistic(ad[i]);
      }
    });
  }
  return out;
}

Tensor learned_temperature(Tape& tape, const Tensor& h, const TemperatureHead& head) {
  Tensor a = diff::linear(tape, h, head.weight.value, head.bias.value);
  a = diff::reshape(tape, a, {h.dim(0)});
  return temperature_from_logit(tape, a, head.tau0);
}

RelaxedSymbol emit_symbol(Tape& tape, const Tensor& logits, const Tensor& h,
                          const TemperatureHead& head, Rng& rng) {
  RelaxedSymbol sym;
  sym.temperature = learned_temperature(tape, h, head);
  sym.soft = gumbel_softmax_relax(tape, logits, sym.temperature, rng);
  sym.hard = straight_through_discretize(tape, sym.soft);
  return sym;
}

}  // namespace refgame::channel
