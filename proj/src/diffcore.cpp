#include "refgame/diffcore.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <limits>
#include <bit>
#include <cassert>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "refgame/errors.hpp"

namespace refgame::diff {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using CVec = Eigen::Map<const Eigen::VectorXd>;
using Vec = Eigen::Map<Eigen::VectorXd>;

CMapR cmat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return CMapR(t.data().data(), static_cast<Eigen::Index>(rows),
               static_cast<Eigen::Index>(cols));
}

MapR mmat(std::span<double> s, std::size_t rows, std::size_t cols) {
  return MapR(s.data(), static_cast<Eigen::Index>(rows),
              static_cast<Eigen::Index>(cols));
}

[[noreturn]] void dim_error(std::string_view op, const std::string& detail) {
  throw DimensionError(std::string(op) + ": " + detail);
}

void require_rank(std::string_view op, const Tensor& t, std::size_t rank,
                  std::string_view what) {
  if (!t.defined() || t.rank() != rank) {
    dim_error(op, std::string(what) + " must have rank " + std::to_string(rank) +
                      ", got " + (t.defined() ? shape_str(t.shape()) : "undefined"));
  }
}

void check_finite([[maybe_unused]] std::string_view op,
                  [[maybe_unused]] const Tensor& t) {
#ifndef NDEBUG
  for (double v : t.data()) {
    assert(std::isfinite(v) && "non-finite value after forward op");
  }
#endif
}

double sigmoid(double x) {
  if (x >= 0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}


// Small-batch products. For a handful of rows, per-row matrix-vector kernels
// avoid repacking the weight matrix on every call.
constexpr std::size_t kSmallBatch = 8;

// Y[B,O] (=|+=) X[B,I] * W[O,I]^T
void product_xwt(MapR Y, const CMapR& X, const CMapR& W, bool accumulate) {
  if (static_cast<std::size_t>(X.rows()) <= kSmallBatch) {
    for (Eigen::Index b = 0; b < X.rows(); ++b) {
      if (accumulate) {
        Y.row(b).transpose().noalias() += W * X.row(b).transpose();
      } else {
        Y.row(b).transpose().noalias() = W * X.row(b).transpose();
      }
    }
    return;
  }
  if (accumulate) {
    Y.noalias() += X * W.transpose();
  } else {
    Y.noalias() = X * W.transpose();
  }
}

// dX[B,I] += dY[B,O] * W[O,I]
void accumulate_dx(MapR dX, const CMapR& dY, const CMapR& W) {
  if (static_cast<std::size_t>(dY.rows()) <= kSmallBatch) {
    for (Eigen::Index b = 0; b < dY.rows(); ++b) {
      dX.row(b).transpose().noalias() += W.transpose() * dY.row(b).transpose();
    }
    return;
  }
  dX.noalias() += dY * W;
}

// dW[O,I] += dY[B,O]^T * X[B,I]
void accumulate_dw(MapR dW, const CMapR& dY, const CMapR& X) {
  if (static_cast<std::size_t>(dY.rows()) <= kSmallBatch) {
    for (Eigen::Index b = 0; b < dY.rows(); ++b) {
      dW.noalias() += dY.row(b).transpose() * X.row(b);
    }
    return;
  }
  dW.noalias() += dY.transpose() * X;
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill) : s_(std::make_shared<detail::Storage>()) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
  }
  s_->data.assign(shape_numel(shape), fill);
  s_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : s_(std::make_shared<detail::Storage>()) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  s_->shape = std::move(shape);
  s_->data.assign(data.begin(), data.end());
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return s_->data[0];
}

std::span<double> Tensor::grad_buffer() const {
  if (s_->grad.empty()) s_->grad.assign(s_->data.size(), 0.0);
  return s_->grad;
}

void Tensor::zero_grad() const { s_->grad.assign(s_->data.size(), 0.0); }

Tensor Tensor::clone() const {
  Tensor out;
  out.s_ = std::make_shared<detail::Storage>();
  out.s_->shape = s_->shape;
  out.s_->data = s_->data;
  return out;
}

// ---- Tape ------------------------------------------------------------------

bool Tape::tracks(std::initializer_list<const Tensor*> inputs) const {
  if (!recording()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t && t->defined() && t->requires_grad(); });
}

void Tape::record(std::string_view op, std::vector<Tensor> outputs,
                  std::function<void()> backward) {
  if (consumed_) throw StateError("tape already consumed by a backward pass");
  for (auto& t : outputs) t.set_requires_grad(true);
  entries_.push_back(Entry{op, std::move(outputs), std::move(backward)});
}

void Tape::backward(Tensor loss) {
  if (consumed_) throw StateError("tape already consumed by a backward pass");
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss");
  }
  consumed_ = true;
  loss.grad_buffer()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    const bool live = std::any_of(it->outputs.begin(), it->outputs.end(),
                                  [](const Tensor& t) { return t.has_grad(); });
    if (live) it->backward();
  }
  entries_.clear();
}

// ---- primitives ------------------------------------------------------------

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank("linear", x, 2, "x");
  require_rank("linear", w, 2, "w");
  require_rank("linear", b, 1, "b");
  const std::size_t B = x.dim(0), I = x.dim(1), O = w.dim(0);
  if (w.dim(1) != I || b.dim(0) != O) {
    dim_error("linear", "x " + shape_str(x.shape()) + " w " + shape_str(w.shape()) +
                            " b " + shape_str(b.shape()));
  }
  Tensor out({B, O});
  auto Y = mmat(out.mutable_data(), B, O);
  product_xwt(Y, cmat(x, B, I), cmat(w, O, I), false);
  Y.rowwise() += CVec(b.data().data(), static_cast<Eigen::Index>(O)).transpose();
  check_finite("linear", out);

  if (tape.tracks({&x, &w, &b})) {
    tape.record("linear", {out}, [x, w, b, out, B, I, O]() mutable {
      CMapR dYm(out.grad().data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(O));
      if (x.requires_grad()) {
        accumulate_dx(mmat(x.grad_buffer(), B, I), dYm, cmat(w, O, I));
      }
      if (w.requires_grad()) {
        accumulate_dw(mmat(w.grad_buffer(), O, I), dYm, cmat(x, B, I));
      }
      if (b.requires_grad()) {
        Vec(b.grad_buffer().data(), static_cast<Eigen::Index>(O)) +=
            dYm.colwise().sum().transpose();
      }
    });
  }
  return out;
}

Tensor conv2d_s2(Tape& tape, const Tensor& x, const Tensor& k, const Tensor& b) {
  require_rank("conv2d_s2", x, 4, "x");
  require_rank("conv2d_s2", k, 4, "kernel");
  require_rank("conv2d_s2", b, 1, "bias");
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = k.dim(0);
  if (H % 2 != 0 || W % 2 != 0) {
    dim_error("conv2d_s2", "spatial dims must be even, got " + shape_str(x.shape()));
  }
  if (k.dim(1) != Cin || k.dim(2) != 3 || k.dim(3) != 3 || b.dim(0) != Cout) {
    dim_error("conv2d_s2", "x " + shape_str(x.shape()) + " kernel " + shape_str(k.shape()) +
                               " bias " + shape_str(b.shape()));
  }
  const std::size_t Ho = H / 2, Wo = W / 2, P = Ho * Wo, KC = Cin * 9;

  // im2col per image: cols[(ci*9 + ki*3 + kj), (i*Wo + j)]
  auto cols = std::make_shared<detail::Buffer>(B * KC * P, 0.0);
  const auto xd = x.data();
  for (std::size_t n = 0; n < B; ++n) {
    double* cn = cols->data() + n * KC * P;
    for (std::size_t ci = 0; ci < Cin; ++ci) {
      const double* xc = xd.data() + (n * Cin + ci) * H * W;
      for (std::size_t ki = 0; ki < 3; ++ki) {
        for (std::size_t kj = 0; kj < 3; ++kj) {
          double* row = cn + (ci * 9 + ki * 3 + kj) * P;
          for (std::size_t i = 0; i < Ho; ++i) {
            const long r = static_cast<long>(2 * i + ki) - 1;
            if (r < 0 || r >= static_cast<long>(H)) continue;
            for (std::size_t j = 0; j < Wo; ++j) {
              const long c = static_cast<long>(2 * j + kj) - 1;
              if (c < 0 || c >= static_cast<long>(W)) continue;
              row[i * Wo + j] = xc[r * static_cast<long>(W) + c];
            }
          }
        }
      }
    }
  }

  Tensor out({B, Cout, Ho, Wo});
  auto K = cmat(k, Cout, KC);
  CVec bias(b.data().data(), static_cast<Eigen::Index>(Cout));
  for (std::size_t n = 0; n < B; ++n) {
    auto On = MapR(out.mutable_data().data() + n * Cout * P, static_cast<Eigen::Index>(Cout),
                   static_cast<Eigen::Index>(P));
    CMapR Cn(cols->data() + n * KC * P, static_cast<Eigen::Index>(KC),
             static_cast<Eigen::Index>(P));
    On.noalias() = K * Cn;
    On.colwise() += bias;
  }
  check_finite("conv2d_s2", out);

  if (tape.tracks({&x, &k, &b})) {
    tape.record("conv2d_s2", {out},
                [x, k, b, out, cols, B, Cin, H, W, Cout, Ho, Wo, P, KC]() mutable {
      const double* dy = out.grad().data();
      auto K = cmat(k, Cout, KC);
      MatR dcols(static_cast<Eigen::Index>(KC), static_cast<Eigen::Index>(P));
      for (std::size_t n = 0; n < B; ++n) {
        CMapR dOn(dy + n * Cout * P, static_cast<Eigen::Index>(Cout),
                  static_cast<Eigen::Index>(P));
        CMapR Cn(cols->data() + n * KC * P, static_cast<Eigen::Index>(KC),
                 static_cast<Eigen::Index>(P));
        if (k.requires_grad()) {
          mmat(k.grad_buffer(), Cout, KC).noalias() += dOn * Cn.transpose();
        }
        if (b.requires_grad()) {
          Vec(b.grad_buffer().data(), static_cast<Eigen::Index>(Cout)) += dOn.rowwise().sum();
        }
        if (x.requires_grad()) {
          dcols.noalias() = K.transpose() * dOn;
          double* dx = x.grad_buffer().data();
          for (std::size_t ci = 0; ci < Cin; ++ci) {
            double* dxc = dx + (n * Cin + ci) * H * W;
            for (std::size_t ki = 0; ki < 3; ++ki) {
              for (std::size_t kj = 0; kj < 3; ++kj) {
                const double* row = dcols.data() + (ci * 9 + ki * 3 + kj) * P;
                for (std::size_t i = 0; i < Ho; ++i) {
                  const long r = static_cast<long>(2 * i + ki) - 1;
                  if (r < 0 || r >= static_cast<long>(H)) continue;
                  for (std::size_t j = 0; j < Wo; ++j) {
                    const long c = static_cast<long>(2 * j + kj) - 1;
                    if (c < 0 || c >= static_cast<long>(W)) continue;
                    dxc[r * static_cast<long>(W) + c] += row[i * Wo + j];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor batch_norm2d(Tape& tape, const Tensor& x, const Tensor& gamma,
                    const Tensor& beta, BatchNormStats& stats, Mode mode) {
  require_rank("batch_norm2d", x, 4, "x");
  require_rank("batch_norm2d", gamma, 1, "gamma");
  require_rank("batch_norm2d", beta, 1, "beta");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.dim(0) != C || beta.dim(0) != C || stats.running_mean.size() != C ||
      stats.running_var.size() != C) {
    dim_error("batch_norm2d", "channel count mismatch for x " + shape_str(x.shape()));
  }
  if (mode == Mode::Train && B < 2) {
    throw ParameterError("batch_norm2d: degenerate batch of size 1 in train mode");
  }
  const double count = static_cast<double>(B * HW);
  std::vector<double> mean(C), inv_std(C);
  const auto xd = x.data();
  if (mode == Mode::Train) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < B; ++n) {
        const double* p = xd.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      const double mu = s / count;
      double v = 0.0;
      for (std::size_t n = 0; n < B; ++n) {
        const double* p = xd.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) v += (p[i] - mu) * (p[i] - mu);
      }
      const double var = v / count;
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + stats.eps);
      const double unbiased = count > 1 ? v / (count - 1.0) : var;
      stats.running_mean[c] = (1.0 - stats.momentum) * stats.running_mean[c] + stats.momentum * mu;
      stats.running_var[c] =
          (1.0 - stats.momentum) * stats.running_var[c] + stats.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = stats.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(stats.running_var[c] + stats.eps);
    }
  }

  Tensor out(x.shape());
  auto xhat = std::make_shared<detail::Buffer>(x.numel());
  auto od = out.mutable_data();
  const auto g = gamma.data();
  const auto bt = beta.data();
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const double xh = (xd[off + i] - mean[c]) * inv_std[c];
        (*xhat)[off + i] = xh;
        od[off + i] = g[c] * xh + bt[c];
      }
    }
  }
  check_finite("batch_norm2d", out);

  if (tape.tracks({&x, &gamma, &beta})) {
    tape.record("batch_norm2d", {out},
                [x, gamma, beta, out, xhat, inv_std, mode, B, C, HW, count]() mutable {
      const auto dy = out.grad();
      const auto g = gamma.data();
      std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
      for (std::size_t n = 0; n < B; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t off = (n * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) {
            sum_dy[c] += dy[off + i];
            sum_dy_xhat[c] += dy[off + i] * (*xhat)[off + i];
          }
        }
      }
      if (gamma.requires_grad()) {
        auto gg = gamma.grad_buffer();
        for (std::size_t c = 0; c < C; ++c) gg[c] += sum_dy_xhat[c];
      }
      if (beta.requires_grad()) {
        auto gb = beta.grad_buffer();
        for (std::size_t c = 0; c < C; ++c) gb[c] += sum_dy[c];
      }
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        for (std::size_t n = 0; n < B; ++n) {
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (n * C + c) * HW;
            const double scale = g[c] * inv_std[c];
            for (std::size_t i = 0; i < HW; ++i) {
              if (mode == Mode::Train) {
                gx[off + i] += scale * (dy[off + i] - sum_dy[c] / count -
                                        (*xhat)[off + i] * sum_dy_xhat[c] / count);
              } else {
                gx[off + i] += scale * dy[off + i];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor leaky_relu(Tape& tape, const Tensor& x) {
  Tensor out(x.shape());
  auto od = out.mutable_data();
  const auto xd = x.data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] > 0 ? xd[i] : kLeakySlope * xd[i];
  if (tape.tracks({&x})) {
    tape.record("leaky_relu", {out}, [x, out]() mutable {
      const auto dy = out.grad();
      const auto xd = x.data();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < xd.size(); ++i) gx[i] += xd[i] > 0 ? dy[i] : kLeakySlope * dy[i];
    });
  }
  return out;
}

LstmOutput lstm_step(Tape& tape, const Tensor& x, const Tensor& h, const Tensor& c,
                     const Tensor& w_ih, const Tensor& w_hh, const Tensor& bias) {
  require_rank("lstm_step", x, 2, "x");
  require_rank("lstm_step", h, 2, "h");
  require_rank("lstm_step", c, 2, "c");
  require_rank("lstm_step", w_ih, 2, "w_ih");
  require_rank("lstm_step", w_hh, 2, "w_hh");
  require_rank("lstm_step", bias, 1, "bias");
  const std::size_t B = x.dim(0), I = x.dim(1), H = h.dim(1), G = 4 * H;
  if (h.dim(0) != B || c.dim(0) != B || c.dim(1) != H || w_ih.dim(0) != G ||
      w_ih.dim(1) != I || w_hh.dim(0) != G || w_hh.dim(1) != H || bias.dim(0) != G) {
    dim_error("lstm_step", "x " + shape_str(x.shape()) + " h " + shape_str(h.shape()) + " c " +
                               shape_str(c.shape()) + " w_ih " + shape_str(w_ih.shape()) +
                               " w_hh " + shape_str(w_hh.shape()) + " bias " +
                               shape_str(bias.shape()));
  }

  // activated gates [B,4H]: sigmoid(i), sigmoid(f), tanh(g), sigmoid(o)
  auto gates = std::make_shared<MatR>(static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(G));
  MapR gmap(gates->data(), gates->rows(), gates->cols());
  product_xwt(gmap, cmat(x, B, I), cmat(w_ih, G, I), false);
  product_xwt(gmap, cmat(h, B, H), cmat(w_hh, G, H), true);
  gates->rowwise() += CVec(bias.data().data(), static_cast<Eigen::Index>(G)).transpose();

  Tensor h_out({B, H});
  Tensor c_out({B, H});
  auto tanh_c = std::make_shared<detail::Buffer>(B * H);
  const auto cd = c.data();
  auto hd = h_out.mutable_data();
  auto cod = c_out.mutable_data();
  for (std::size_t n = 0; n < B; ++n) {
    double* gr = gates->data() + n * G;
    for (std::size_t j = 0; j < H; ++j) {
      const double ig = sigmoid(gr[j]);
      const double fg = sigmoid(gr[H + j]);
      const double gg = std::tanh(gr[2 * H + j]);
      const double og = sigmoid(gr[3 * H + j]);
      gr[j] = ig;
      gr[H + j] = fg;
      gr[2 * H + j] = gg;
      gr[3 * H + j] = og;
      const double cn = fg * cd[n * H + j] + ig * gg;
      const double tc = std::tanh(cn);
      cod[n * H + j] = cn;
      (*tanh_c)[n * H + j] = tc;
      hd[n * H + j] = og * tc;
    }
  }
  check_finite("lstm_step", h_out);

  if (tape.tracks({&x, &h, &c, &w_ih, &w_hh, &bias})) {
    tape.record("lstm_step", {h_out, c_out},
                [x, h, c, w_ih, w_hh, bias, h_out, c_out, gates, tanh_c, B, I, H, G]() mutable {
      const auto dh = h_out.grad();
      const auto dc = c_out.grad();
      const auto cd = c.data();
      MatR dG(static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(G));
      detail::Buffer dc_prev(B * H);
      for (std::size_t n = 0; n < B; ++n) {
        const double* gr = gates->data() + n * G;
        double* dgr = dG.data() + n * G;
        for (std::size_t j = 0; j < H; ++j) {
          const std::size_t idx = n * H + j;
          const double ig = gr[j], fg = gr[H + j], gg = gr[2 * H + j], og = gr[3 * H + j];
          const double tc = (*tanh_c)[idx];
          const double dhv = dh.empty() ? 0.0 : dh[idx];
          const double dcv = (dc.empty() ? 0.0 : dc[idx]) + dhv * og * (1.0 - tc * tc);
          dgr[j] = dcv * gg * ig * (1.0 - ig);
          dgr[H + j] = dcv * cd[idx] * fg * (1.0 - fg);
          dgr[2 * H + j] = dcv * ig * (1.0 - gg * gg);
          dgr[3 * H + j] = dhv * tc * og * (1.0 - og);
          dc_prev[idx] = dcv * fg;
        }
      }
      const CMapR dGm(dG.data(), dG.rows(), dG.cols());
      if (x.requires_grad()) accumulate_dx(mmat(x.grad_buffer(), B, I), dGm, cmat(w_ih, G, I));
      if (h.requires_grad()) accumulate_dx(mmat(h.grad_buffer(), B, H), dGm, cmat(w_hh, G, H));
      if (c.requires_grad()) {
        auto gc = c.grad_buffer();
        for (std::size_t i = 0; i < B * H; ++i) gc[i] += dc_prev[i];
      }
      if (w_ih.requires_grad()) {
        accumulate_dw(mmat(w_ih.grad_buffer(), G, I), dGm, cmat(x, B, I));
      }
      if (w_hh.requires_grad()) {
        accumulate_dw(mmat(w_hh.grad_buffer(), G, H), dGm, cmat(h, B, H));
      }
      if (bias.requires_grad()) {
        Vec(bias.grad_buffer().data(), static_cast<Eigen::Index>(G)) +=
            dG.colwise().sum().transpose();
      }
    });
  }
  return {h_out, c_out};
}

Tensor softmax(Tape& tape, const Tensor& x, int axis) {
  const int rank = static_cast<int>(x.rank());
  const int ax = axis < 0 ? rank + axis : axis;
  if (ax < 0 || ax >= rank) {
    dim_error("softmax", "axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= x.dim(static_cast<std::size_t>(i));
  for (int i = ax + 1; i < rank; ++i) inner *= x.dim(static_cast<std::size_t>(i));
  const std::size_t K = x.dim(static_cast<std::size_t>(ax));

  Tensor out(x.shape());
  const auto xd = x.data();
  auto od = out.mutable_data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * K * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, xd[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const double e = std::exp(xd[base + k * inner] - mx);
        od[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < K; ++k) od[base + k * inner] /= z;
    }
  }
  if (tape.tracks({&x})) {
    tape.record("softmax", {out}, [x, out, outer, inner, K]() mutable {
      const auto dy = out.grad();
      const auto y = out.data();
      auto gx = x.grad_buffer();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * K * inner + in;
          double dot = 0.0;
          for (std::size_t k = 0; k < K; ++k) dot += dy[base + k * inner] * y[base + k * inner];
          for (std::size_t k = 0; k < K; ++k) {
            gx[base + k * inner] += y[base + k * inner] * (dy[base + k * inner] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor dropout(Tape& tape, const Tensor& x, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ParameterError("dropout: probability must lie in [0, 1), got " + std::to_string(p));
  }
  if (mode == Mode::Eval || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<detail::Buffer>(x.numel());
  for (auto& m : *mask) m = rng.uniform() < p ? 0.0 : keep_scale;
  Tensor out(x.shape());
  const auto xd = x.data();
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] * (*mask)[i];
  if (tape.tracks({&x})) {
    tape.record("dropout", {out}, [x, out, mask]() mutable {
      const auto dy = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < dy.size(); ++i) gx[i] += dy[i] * (*mask)[i];
    });
  }
  return out;
}

Tensor cross_entropy_loss(Tape& tape, const Tensor& scores,
                          std::span<const std::size_t> targets) {
  require_rank("cross_entropy_loss", scores, 2, "scores");
  const std::size_t B = scores.dim(0), N = scores.dim(1);
  if (targets.size() != B) {
    dim_error("cross_entropy_loss", std::to_string(targets.size()) + " targets for batch of " +
                                        std::to_string(B));
  }
  const auto sd = scores.data();
  for (std::size_t b = 0; b < B; ++b) {
    if (targets[b] >= N) {
      throw IndexError("cross_entropy_loss: target " + std::to_string(targets[b]) +
                       " outside [0, " + std::to_string(N) + ")");
    }
    double row = 0.0;
    for (std::size_t n = 0; n < N; ++n) row += sd[b * N + n];
    if (std::abs(row - 1.0) > 1e-6) {
      throw ParameterError("cross_entropy_loss: score row " + std::to_string(b) +
                           " is not a probability distribution");
    }
  }
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    total -= std::log(std::max(sd[b * N + targets[b]], kProbabilityFloor));
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(B));
  if (tape.tracks({&scores})) {
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    tape.record("cross_entropy_loss", {out}, [scores, out, tgt, B, N]() mutable {
      const double dy = out.grad()[0];
      const auto sd = scores.data();
      auto gs = scores.grad_buffer();
      for (std::size_t b = 0; b < B; ++b) {
        const double p = sd[b * N + tgt[b]];
        if (p > kProbabilityFloor) gs[b * N + tgt[b]] -= dy / (static_cast<double>(B) * p);
      }
    });
  }
  return out;
}

Tensor batched_dot(Tape& tape, const Tensor& queries, const Tensor& keys) {
  require_rank("batched_dot", queries, 2, "queries");
  require_rank("batched_dot", keys, 3, "keys");
  const std::size_t B = queries.dim(0), H = queries.dim(1), N = keys.dim(1);
  if (keys.dim(0) != B || keys.dim(2) != H) {
    dim_error("batched_dot", "queries " + shape_str(queries.shape()) + " keys " +
                                 shape_str(keys.shape()));
  }
  Tensor out({B, N});
  auto od = out.mutable_data();
  for (std::size_t b = 0; b < B; ++b) {
    CVec q(queries.data().data() + b * H, static_cast<Eigen::Index>(H));
    CMapR K(keys.data().data() + b * N * H, static_cast<Eigen::Index>(N),
            static_cast<Eigen::Index>(H));
    Vec(od.data() + b * N, static_cast<Eigen::Index>(N)).noalias() = K * q;
  }
  if (tape.tracks({&queries, &keys})) {
    tape.record("batched_dot", {out}, [queries, keys, out, B, H, N]() mutable {
      const auto dy = out.grad();
      for (std::size_t b = 0; b < B; ++b) {
        CVec d(dy.data() + b * N, static_cast<Eigen::Index>(N));
        if (queries.requires_grad()) {
          CMapR K(keys.data().data() + b * N * H, static_cast<Eigen::Index>(N),
                  static_cast<Eigen::Index>(H));
          Vec(queries.grad_buffer().data() + b * H, static_cast<Eigen::Index>(H)).noalias() +=
              K.transpose() * d;
        }
        if (keys.requires_grad()) {
          CVec q(queries.data().data() + b * H, static_cast<Eigen::Index>(H));
          MapR(keys.grad_buffer().data() + b * N * H, static_cast<Eigen::Index>(N),
               static_cast<Eigen::Index>(H))
              .noalias() += d * q.transpose();
        }
      }
    });
  }
  return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    dim_error("add", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out(a.shape());
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = a.data()[i] + b.data()[i];
  if (tape.tracks({&a, &b})) {
    tape.record("add", {out}, [a, b, out]() mutable {
      const auto dy = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < dy.size(); ++i) ga[i] += dy[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < dy.size(); ++i) gb[i] += dy[i];
      }
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    dim_error("mul", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out(a.shape());
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = a.data()[i] * b.data()[i];
  if (tape.tracks({&a, &b})) {
    tape.record("mul", {out}, [a, b, out]() mutable {
      const auto dy = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < dy.size(); ++i) ga[i] += dy[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < dy.size(); ++i) gb[i] += dy[i] * a.data()[i];
      }
    });
  }
  return out;
}

Tensor sum(Tape& tape, const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (tape.tracks({&x})) {
    tape.record("sum", {out}, [x, out]() mutable {
      const double dy = out.grad()[0];
      for (auto& g : x.grad_buffer()) g += dy;
    });
  }
  return out;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    dim_error("reshape", shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  if (tape.tracks({&x})) {
    tape.record("reshape", {out}, [x, out]() mutable {
      const auto dy = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < dy.size(); ++i) gx[i] += dy[i];
    });
  }
  return out;
}

// ---- parameters ------------------------------------------------------------

Parameter::Parameter(std::string name_, Tensor init)
    : name(std::move(name_)),
      value(std::move(init)),
      first_moment(value.numel(), 0.0),
      second_moment(value.numel(), 0.0) {
  value.set_requires_grad(true);
}

void adam_step(std::span<Parameter* const> params, const AdamConfig& config) {
  for (Parameter* p : params) {
    if (!p->value.has_grad()) {
      throw StateError("adam_step: parameter '" + p->name + "' has no gradient");
    }
  }
  for (Parameter* p : params) {
    p->steps += 1;
    const double t = static_cast<double>(p->steps);
    const double bc1 = 1.0 - std::pow(config.beta1, t);
    const double bc2 = 1.0 - std::pow(config.beta2, t);
    auto w = p->value.mutable_data();
    const auto g = p->value.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      double& m = p->first_moment[i];
      double& v = p->second_moment[i];
      m = config.beta1 * m + (1.0 - config.beta1) * g[i];
      v = config.beta2 * v + (1.0 - config.beta2) * g[i] * g[i];
      w[i] -= config.lr * (m / bc1) / (std::sqrt(v / bc2) + config.eps);
    }
    p->value.clear_grad();
  }
}

void zero_grad(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->value.zero_grad();
}

Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.uniform(-bound, bound);
  return t;
}

// ---- grad_check ------------------------------------------------------------

double grad_check(const ScalarFunction& f, std::span<const Tensor> point, double step) {
  std::vector<Tensor> leaves;
  leaves.reserve(point.size());
  for (const auto& t : point) leaves.push_back(t.clone().set_requires_grad(true));

  auto evaluate = [&](std::vector<Tensor>& args) {
    Tape tape(false);
    Tensor y = f(tape, args);
    if (y.numel() != 1) throw ContractError("grad_check: function must be scalar-valued");
    return y.item();
  };

  Tape tape;
  Tensor y = f(tape, leaves);
  if (y.numel() != 1) throw ContractError("grad_check: function must be scalar-valued");
  tape.backward(y);

  std::vector<Tensor> probe;
  for (const auto& t : leaves) probe.push_back(t.clone());
  const double base = evaluate(probe);
  if (base != y.item() || evaluate(probe) != base) {
    throw ContractError(
        "grad_check: function is not deterministic (re-seed any Rng inside f)");
  }

  double worst = 0.0;
  for (std::size_t a = 0; a < probe.size(); ++a) {
    auto values = probe[a].mutable_data();
    const auto analytic = leaves[a].has_grad() ? leaves[a].grad() : std::span<const double>();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + step;
      const double up = evaluate(probe);
      values[i] = orig - step;
      const double down = evaluate(probe);
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double exact = analytic.empty() ? 0.0 : analytic[i];
      const double denom = std::max({std::abs(exact), std::abs(numeric), 1e-3});
      worst = std::max(worst, std::abs(exact - numeric) / denom);
    }
  }
  return worst;
}

// ---- checkpoints -----------------------------------------------------------

namespace {

template <typename T>
void put_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  is.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!is) throw StateError("checkpoint: truncated file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

constexpr char kMagic[4] = {'R', 'G', 'L', '1'};

}  // namespace

void save_checkpoint(const std::filesystem::path& path,
                     std::span<const Parameter* const> params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, 4);
  for (const Parameter* p : params) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(p->value.rank()));
    for (auto d : p->value.shape()) put_le<std::uint64_t>(os, d);
    for (double v : p->value.data()) put_le<double>(os, v);
  }
  if (!os) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

std::map<std::string, Tensor> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || !std::equal(magic, magic + 4, kMagic)) {
    throw StateError("checkpoint: bad magic in " + path.string());
  }
  std::map<std::string, Tensor> out;
  while (is.peek() != std::char_traits<char>::eof()) {
    const auto len = get_le<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto rank = get_le<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get_le<std::uint64_t>(is));
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = get_le<double>(is);
    out.emplace(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return out;
}

void load_checkpoint(const std::filesystem::path& path, std::span<Parameter* const> params) {
  auto stored = read_checkpoint(path);
  for (Parameter* p : params) {
    auto it = stored.find(p->name);
    if (it == stored.end()) throw StateError("checkpoint: missing parameter '" + p->name + "'");
    if (it->second.shape() != p->value.shape()) {
      throw DimensionError("checkpoint: shape mismatch for '" + p->name + "': " +
                           shape_str(it->second.shape()) + " vs " +
                           shape_str(p->value.shape()));
    }
    std::copy(it->second.data().begin(), it->second.data().end(),
              p->value.mutable_data().begin());
  }
}

}  // namespace refgame::diff
