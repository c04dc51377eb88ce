#pragma once

// Minimal reverse-mode differentiation: a shape-carrying Tensor handle, an
// explicit Tape of recorded primitives, the primitive set used by the agents,
// Adam, a finite-difference gradient checker, and flat binary checkpoints.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "refgame/rng.hpp"

namespace refgame::diff {

using Shape = std::vector<std::size_t>;

enum class Mode { Train, Eval };

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

// Vectorised kernels pick their summation order from each buffer's address
// alignment; a fixed alignment keeps results independent of heap layout.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

struct Storage {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until first accumulation
  bool requires_grad = false;
};
}  // namespace detail

/// Reference-semantics handle to a dense row-major array of doubles.
/// Copies alias the same storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t numel() const { return s_->data.size(); }

  std::span<const double> data() const { return s_->data; }
  std::span<double> mutable_data() { return s_->data; }
  double item() const;

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    s_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const double> grad() const { return s_->grad; }
  /// Gradient buffer, zero-allocated on first access.
  std::span<double> grad_buffer() const;
  void zero_grad() const;
  void clear_grad() const { detail::Buffer().swap(s_->grad); }

  /// Deep copy of the values; the copy does not require grad.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  std::shared_ptr<detail::Storage> s_;
};

/// Ordered record of primitive applications. Each entry keeps its outputs
/// (the backward rule captures its inputs) and is replayed in reverse by a
/// single backward pass, after which the tape is consumed.
class Tape {
 public:
  Tape() = default;
  /// A non-recording tape evaluates forward only.
  explicit Tape(bool recording) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool recording() const { return recording_ && !consumed_; }
  bool consumed() const { return consumed_; }
  std::size_t size() const { return entries_.size(); }

  /// True when an op over these inputs must be recorded.
  bool tracks(std::initializer_list<const Tensor*> inputs) const;

  /// Registers a primitive. Marks the outputs as requiring grad.
  void record(std::string_view op, std::vector<Tensor> outputs,
              std::function<void()> backward);

  /// Seeds d(loss)/d(loss) = 1 and replays entries in reverse order.
  /// Throws ContractError for non-scalar loss, StateError if already consumed.
  void backward(Tensor loss);

 private:
  struct Entry {
    std::string_view op;
    std::vector<Tensor> outputs;
    std::function<void()> backward;
  };
  std::vector<Entry> entries_;
  bool recording_ = true;
  bool consumed_ = false;
};

// ---- primitives -----------------------------------------------------------

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kProbabilityFloor = 1e-12;

/// out[b,o] = sum_i x[b,i] * w[o,i] + b[o]
Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b);

/// 3x3 cross-correlation, stride 2, zero padding 1. Halves H and W.
Tensor conv2d_s2(Tape& tape, const Tensor& x, const Tensor& k, const Tensor& b);

struct BatchNormStats {
  explicit BatchNormStats(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel normalization over (B,H,W). Train mode uses batch statistics
/// and updates the running estimates; eval mode uses the running estimates.
Tensor batch_norm2d(Tape& tape, const Tensor& x, const Tensor& gamma,
                    const Tensor& beta, BatchNormStats& stats, Mode mode);

Tensor leaky_relu(Tape& tape, const Tensor& x);

struct LstmOutput {
  Tensor h;
  Tensor c;
};

/// One LSTM cell step. Gate layout in w_ih [4H,I], w_hh [4H,H] and bias [4H]
/// is (input, forget, cell, output).
LstmOutput lstm_step(Tape& tape, const Tensor& x, const Tensor& h,
                     const Tensor& c, const Tensor& w_ih, const Tensor& w_hh,
                     const Tensor& bias);

/// Max-shifted softmax along `axis` (negative counts from the end).
Tensor softmax(Tape& tape, const Tensor& x, int axis = -1);

/// Inverted dropout. Train mode zeroes with probability p and scales the
/// survivors by 1/(1-p); eval mode is the identity.
Tensor dropout(Tape& tape, const Tensor& x, double p, Mode mode, Rng& rng);

/// Mean over the batch of -log(max(scores[b, target_b], 1e-12)).
/// `scores` holds one probability distribution per row.
Tensor cross_entropy_loss(Tape& tape, const Tensor& scores,
                          std::span<const std::size_t> targets);

/// out[b,n] = <queries[b,:], keys[b,n,:]>
Tensor batched_dot(Tape& tape, const Tensor& queries, const Tensor& keys);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sum(Tape& tape, const Tensor& x);
Tensor reshape(Tape& tape, const Tensor& x, Shape shape);

// ---- parameters and optimization -------------------------------------------

struct Parameter {
  Parameter(std::string name, Tensor init);

  std::string name;
  Tensor value;
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::int64_t steps = 0;
};

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam update; clears each gradient afterward.
/// A parameter without a gradient buffer raises StateError.
void adam_step(std::span<Parameter* const> params, const AdamConfig& config);

/// Allocates (or resets) a zero gradient on every parameter.
void zero_grad(std::span<Parameter* const> params);

/// Fan-in scaled uniform U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng);

// ---- verification ----------------------------------------------------------

using ScalarFunction = std::function<Tensor(Tape&, std::span<const Tensor>)>;

/// Compares the tape gradient of a scalar function against central finite
/// differences at `point`, coordinate by coordinate. Returns the largest
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-3).
///
/// The function must be deterministic: stochastic ops have to draw from an
/// Rng re-seeded inside `f` on every call. A function that returns different
/// values for the same input is rejected with ContractError.
double grad_check(const ScalarFunction& f, std::span<const Tensor> point,
                  double step = 1e-5);

// ---- checkpoints -----------------------------------------------------------

/// Flat binary: "RGL1", then per parameter: u32 name length, name bytes,
/// u32 rank, u64 dims, float64 values; all little-endian.
void save_checkpoint(const std::filesystem::path& path,
                     std::span<const Parameter* const> params);

std::map<std::string, Tensor> read_checkpoint(const std::filesystem::path& path);

/// Copies stored values into `params` by name; shapes must match.
void load_checkpoint(const std::filesystem::path& path,
                     std::span<Parameter* const> params);

}  // namespace refgame::diff
