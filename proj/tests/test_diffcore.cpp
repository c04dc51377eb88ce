#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <memory>
#include <numeric>

#include "refgame/diffcore.hpp"
#include "refgame/errors.hpp"
#include "support.hpp"

using namespace refgame;
using namespace refgame::diff;
using refgame::testing::probe_loss;
using refgame::testing::random_distribution;
using refgame::testing::random_tensor;

TEST_CASE("linear forward examples") {
  Tape tape(false);
  Tensor x({1, 2}, {1, 2});
  Tensor eye({2, 2}, {1, 0, 0, 1});
  auto y = linear(tape, x, eye, Tensor({2}, 0.0));
  CHECK(y.data()[0] == 1.0);
  CHECK(y.data()[1] == 2.0);

  Rng rng(1);
  auto z = linear(tape, Tensor({1, 2}), random_tensor({2, 2}, rng), Tensor({2}, {3, 4}));
  CHECK(z.data()[0] == 3.0);
  CHECK(z.data()[1] == 4.0);

  CHECK_THROWS_AS(linear(tape, Tensor({1, 3}), eye, Tensor({2})), DimensionError);
}

TEST_CASE("linear gradient matches finite differences") {
  Rng rng(2);
  const std::vector<Tensor> point = {random_tensor({4, 8}, rng), random_tensor({5, 8}, rng),
                                     random_tensor({5}, rng)};
  const double err = grad_check(
      [](Tape& t, std::span<const Tensor> a) { return probe_loss(t, linear(t, a[0], a[1], a[2])); },
      point);
  CHECK(err < 1e-6);
}

TEST_CASE("conv2d_s2 shapes and gradient") {
  Tape tape(false);
  SUBCASE("zero input and bias give zero output") {
    Rng rng(3);
    auto y = conv2d_s2(tape, Tensor({2, 3, 8, 8}), random_tensor({4, 3, 3, 3}, rng), Tensor({4}));
    CHECK(y.shape() == Shape{2, 4, 4, 4});
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("four layers take 32x32 to 64x2x2") {
    Rng rng(4);
    Tensor x = random_tensor({1, 1, 32, 32}, rng);
    std::size_t in = 1;
    for (std::size_t out : {32, 32, 64, 64}) {
      x = conv2d_s2(tape, x, random_tensor({out, in, 3, 3}, rng), Tensor({out}));
      in = out;
    }
    CHECK(x.shape() == Shape{1, 64, 2, 2});
  }
  SUBCASE("odd spatial size is rejected") {
    CHECK_THROWS_AS(conv2d_s2(tape, Tensor({1, 1, 5, 4}), Tensor({1, 1, 3, 3}), Tensor({1})),
                    DimensionError);
  }
  SUBCASE("single tap against a hand computation") {
    // kernel picks the centre tap: output(i,j) = x(2i, 2j)
    Tensor x({1, 1, 4, 4});
    std::iota(x.mutable_data().begin(), x.mutable_data().end(), 0.0);
    Tensor k({1, 1, 3, 3});
    k.mutable_data()[4] = 1.0;
    auto y = conv2d_s2(tape, x, k, Tensor({1}));
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[1] == 2.0);
    CHECK(y.data()[2] == 8.0);
    CHECK(y.data()[3] == 10.0);
  }
  SUBCASE("gradient") {
    Rng rng(5);
    const std::vector<Tensor> point = {random_tensor({1, 2, 8, 8}, rng),
                                       random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)};
    const double err = grad_check(
        [](Tape& t, std::span<const Tensor> a) {
          return probe_loss(t, conv2d_s2(t, a[0], a[1], a[2]));
        },
        point);
    CHECK(err < 1e-5);
  }
}

TEST_CASE("batch_norm2d") {
  Tape tape(false);
  SUBCASE("normalises each channel in train mode") {
    Rng rng(6);
    BatchNormStats stats(3);
    auto y = batch_norm2d(tape, random_tensor({4, 3, 4, 4}, rng, -3, 5), Tensor({3}, 1.0),
                          Tensor({3}, 0.0), stats, Mode::Train);
    for (std::size_t c = 0; c < 3; ++c) {
      double mean = 0, sq = 0;
      for (std::size_t b = 0; b < 4; ++b) {
        for (std::size_t i = 0; i < 16; ++i) {
          const double v = y.data()[(b * 3 + c) * 16 + i];
          mean += v;
          sq += v * v;
        }
      }
      mean /= 64;
      CHECK(std::abs(mean) < 1e-6);
      CHECK(std::abs(sq / 64 - mean * mean - 1.0) < 1e-5);
    }
  }
  SUBCASE("constant channels collapse to beta") {
    BatchNormStats stats(2);
    Tensor x({2, 2, 2, 2});
    auto d = x.mutable_data();
    for (std::size_t i = 0; i < 16; ++i) d[i] = (i / 4) % 2 ? 7.0 : -2.0;
    auto y = batch_norm2d(tape, x, Tensor({2}, {3.0, 0.5}), Tensor({2}, {1.5, -4.0}), stats,
                          Mode::Train);
    for (std::size_t i = 0; i < 16; ++i) CHECK(y.data()[i] == doctest::Approx((i / 4) % 2 ? -4.0 : 1.5));
  }
  SUBCASE("running statistics drive eval mode") {
    BatchNormStats stats(1);
    Tensor x({2, 1, 1, 2}, {1, 2, 3, 4});
    batch_norm2d(tape, x, Tensor({1}, 1.0), Tensor({1}, 0.0), stats, Mode::Train);
    CHECK(stats.running_mean[0] == doctest::Approx(0.25));  // 0.9*0 + 0.1*2.5
    const double var_unbiased = 5.0 / 3.0;
    CHECK(stats.running_var[0] == doctest::Approx(0.9 + 0.1 * var_unbiased));
    auto y = batch_norm2d(tape, x, Tensor({1}, 1.0), Tensor({1}, 0.0), stats, Mode::Eval);
    CHECK(y.data()[0] ==
          doctest::Approx((1.0 - 0.25) / std::sqrt(stats.running_var[0] + 1e-5)));
    // eval mode leaves the statistics alone
    CHECK(stats.running_mean[0] == doctest::Approx(0.25));
  }
  SUBCASE("single-item batch is degenerate in train mode") {
    BatchNormStats stats(1);
    CHECK_THROWS(batch_norm2d(tape, Tensor({1, 1, 2, 2}), Tensor({1}, 1.0), Tensor({1}), stats,
                              Mode::Train));
  }
  SUBCASE("gradient") {
    Rng rng(7);
    const std::vector<Tensor> point = {random_tensor({4, 3, 4, 4}, rng),
                                       random_tensor({3}, rng, 0.5, 1.5), random_tensor({3}, rng)};
    const double err = grad_check(
        [](Tape& t, std::span<const Tensor> a) {
          BatchNormStats stats(3);
          return probe_loss(t, batch_norm2d(t, a[0], a[1], a[2], stats, Mode::Train));
        },
        point);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("leaky_relu") {
  Tape tape(false);
  auto y = leaky_relu(tape, Tensor({2}, {5.0, -1.0}));
  CHECK(y.data()[0] == 5.0);
  CHECK(y.data()[1] == doctest::Approx(-0.01));
  const std::vector<Tensor> point = {Tensor({1}, {-2.0})};
  Tape grad_tape;
  Tensor x = point[0].clone().set_requires_grad();
  grad_tape.backward(sum(grad_tape, leaky_relu(grad_tape, x)));
  CHECK(x.grad()[0] == doctest::Approx(0.01));
  CHECK(grad_check([](Tape& t, std::span<const Tensor> a) { return sum(t, leaky_relu(t, a[0])); },
                   point) < 1e-8);
}

TEST_CASE("lstm_step") {
  Tape tape(false);
  SUBCASE("zero parameters give zero state") {
    Rng rng(8);
    auto out = lstm_step(tape, random_tensor({2, 3}, rng), Tensor({2, 4}), Tensor({2, 4}),
                         Tensor({16, 3}), Tensor({16, 4}), Tensor({16}));
    for (double v : out.h.data()) CHECK(v == 0.0);
    for (double v : out.c.data()) CHECK(v == 0.0);
  }
  SUBCASE("open forget gate and closed input gate keep the cell") {
    Rng rng(9);
    Tensor bias({16});
    auto b = bias.mutable_data();
    for (std::size_t j = 0; j < 4; ++j) b[j] = -50.0;      // input gate shut
    for (std::size_t j = 4; j < 8; ++j) b[j] = 50.0;       // forget gate open
    Tensor c = random_tensor({2, 4}, rng);
    auto out = lstm_step(tape, random_tensor({2, 3}, rng), random_tensor({2, 4}, rng), c,
                         Tensor({16, 3}), Tensor({16, 4}), bias);
    for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(out.c.data()[i] - c.data()[i]) < 1e-6);
  }
  SUBCASE("matches a hand-rolled cell") {
    Rng rng(10);
    Tensor x = random_tensor({1, 2}, rng), h = random_tensor({1, 1}, rng),
           c = random_tensor({1, 1}, rng), wih = random_tensor({4, 2}, rng),
           whh = random_tensor({4, 1}, rng), bias = random_tensor({4}, rng);
    auto out = lstm_step(tape, x, h, c, wih, whh, bias);
    auto pre = [&](int g) {
      return wih.data()[g * 2] * x.data()[0] + wih.data()[g * 2 + 1] * x.data()[1] +
             whh.data()[g] * h.data()[0] + bias.data()[g];
    };
    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    const double cn = sig(pre(1)) * c.data()[0] + sig(pre(0)) * std::tanh(pre(2));
    CHECK(out.c.data()[0] == doctest::Approx(cn).epsilon(1e-12));
    CHECK(out.h.data()[0] == doctest::Approx(sig(pre(3)) * std::tanh(cn)).epsilon(1e-12));
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(lstm_step(tape, Tensor({2, 3}), Tensor({2, 4}), Tensor({2, 4}),
                              Tensor({16, 2}), Tensor({16, 4}), Tensor({16})),
                    DimensionError);
  }
  SUBCASE("gradient over every input and parameter") {
    Rng rng(11);
    const std::vector<Tensor> point = {random_tensor({2, 3}, rng),  random_tensor({2, 4}, rng),
                                       random_tensor({2, 4}, rng),  random_tensor({16, 3}, rng),
                                       random_tensor({16, 4}, rng), random_tensor({16}, rng)};
    const double err = grad_check(
        [](Tape& t, std::span<const Tensor> a) {
          auto o = lstm_step(t, a[0], a[1], a[2], a[3], a[4], a[5]);
          return add(t, probe_loss(t, o.h, 1), probe_loss(t, o.c, 2));
        },
        point);
    CHECK(err < 1e-5);
  }
}

TEST_CASE("softmax") {
  Tape tape(false);
  auto u = softmax(tape, Tensor({4}, 0.3));
  for (double v : u.data()) CHECK(v == doctest::Approx(0.25));
  auto big = softmax(tape, Tensor({2}, {1000.0, 0.0}));
  CHECK(big.data()[0] == 1.0);
  CHECK(big.data()[1] == doctest::Approx(0.0));
  CHECK(std::isfinite(big.data()[1]));

  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    auto y = softmax(tape, random_tensor({3, 5}, rng, -1000, 1000));
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 5; ++c) {
        CHECK(y.data()[r * 5 + c] >= 0.0);
        s += y.data()[r * 5 + c];
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
  SUBCASE("axis 0") {
    auto y = softmax(tape, Tensor({2, 1}, {0.0, 0.0}), 0);
    CHECK(y.data()[0] == doctest::Approx(0.5));
  }
  const std::vector<Tensor> point = {random_tensor({6}, rng, -2, 2)};
  CHECK(grad_check([](Tape& t, std::span<const Tensor> a) { return probe_loss(t, softmax(t, a[0])); },
                   point) < 1e-6);
}

TEST_CASE("dropout") {
  Tape tape(false);
  Rng rng(13);
  Tensor x = random_tensor({100}, rng);
  auto same = dropout(tape, x, 0.0, Mode::Train, rng);
  for (std::size_t i = 0; i < 100; ++i) CHECK(same.data()[i] == x.data()[i]);
  auto eval = dropout(tape, x, 0.8, Mode::Eval, rng);
  for (std::size_t i = 0; i < 100; ++i) CHECK(eval.data()[i] == x.data()[i]);

  auto y = dropout(tape, Tensor({100000}, 1.0), 0.8, Mode::Train, rng);
  std::size_t zeros = 0;
  for (double v : y.data()) {
    if (v == 0.0) {
      ++zeros;
    } else {
      CHECK(v == doctest::Approx(5.0));
    }
  }
  const double rate = static_cast<double>(zeros) / 1e5;
  CHECK(rate >= 0.79);
  CHECK(rate <= 0.81);
  CHECK_THROWS_AS(dropout(tape, x, 1.0, Mode::Train, rng), ParameterError);

  // fixed mask: re-seeded per evaluation
  const std::vector<Tensor> point = {random_tensor({10}, rng)};
  CHECK(grad_check(
            [](Tape& t, std::span<const Tensor> a) {
              Rng r(5);
              return probe_loss(t, dropout(t, a[0], 0.5, Mode::Train, r));
            },
            point) < 1e-8);
}

TEST_CASE("cross_entropy_loss") {
  Tape tape(false);
  const std::size_t t0[] = {0};
  CHECK(cross_entropy_loss(tape, Tensor({1, 3}, {1, 0, 0}), t0).item() == doctest::Approx(0.0));
  const std::size_t t2[] = {2};
  CHECK(cross_entropy_loss(tape, Tensor({1, 4}, 0.25), t2).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));
  // probability floor keeps the loss finite
  const double floored = cross_entropy_loss(tape, Tensor({1, 2}, {1, 0}), std::vector<std::size_t>{1}).item();
  CHECK(floored == doctest::Approx(-std::log(1e-12)));
  CHECK_THROWS_AS(cross_entropy_loss(tape, Tensor({1, 3}, {1, 0, 0}), std::vector<std::size_t>{3}),
                  IndexError);

  Rng rng(14);
  const std::vector<Tensor> point = {random_distribution(3, 5, rng)};
  CHECK(grad_check(
            [](Tape& t, std::span<const Tensor> a) {
              const std::size_t targets[] = {1, 4, 0};
              // renormalise so perturbed rows stay distributions
              return cross_entropy_loss(t, softmax(t, a[0]), targets);
            },
            point) < 1e-6);
}

TEST_CASE("batched_dot, add, mul, sum, reshape gradients") {
  Rng rng(15);
  const std::vector<Tensor> point = {random_tensor({2, 3}, rng), random_tensor({2, 4, 3}, rng)};
  CHECK(grad_check(
            [](Tape& t, std::span<const Tensor> a) {
              return probe_loss(t, batched_dot(t, a[0], a[1]));
            },
            point) < 1e-6);
  const std::vector<Tensor> pair = {random_tensor({3, 2}, rng), random_tensor({3, 2}, rng)};
  CHECK(grad_check(
            [](Tape& t, std::span<const Tensor> a) {
              return probe_loss(t, reshape(t, mul(t, add(t, a[0], a[1]), a[1]), {6}));
            },
            pair) < 1e-6);
  Tape tape(false);
  auto d = batched_dot(tape, Tensor({1, 2}, {1, 2}), Tensor({1, 2, 2}, {3, 4, 5, 6}));
  CHECK(d.data()[0] == 11.0);
  CHECK(d.data()[1] == 17.0);
  CHECK_THROWS_AS(reshape(tape, Tensor({2, 3}), {4}), DimensionError);
}

TEST_CASE("property: primitive gradients on random shapes") {
  Rng rng(16);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = 1 + rng.below(3), I = 1 + rng.below(4), H = 1 + rng.below(4);
    std::vector<Tensor> point = {random_tensor({B, I}, rng),     random_tensor({B, H}, rng),
                                 random_tensor({B, H}, rng),     random_tensor({4 * H, I}, rng),
                                 random_tensor({4 * H, H}, rng), random_tensor({4 * H}, rng),
                                 random_tensor({H, I}, rng),     random_tensor({H}, rng)};
    const double err = grad_check(
        [](Tape& t, std::span<const Tensor> a) {
          auto o = lstm_step(t, a[0], a[1], a[2], a[3], a[4], a[5]);
          auto lin = leaky_relu(t, linear(t, a[0], a[6], a[7]));
          auto s = softmax(t, add(t, o.h, lin));
          return add(t, probe_loss(t, s, 3), probe_loss(t, o.c, 4));
        },
        point);
    worst = std::max(worst, err);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("tape contract") {
  Tensor x({2}, {1, 2});
  x.set_requires_grad();
  Tape tape;
  auto y = sum(tape, mul(tape, x, x));
  tape.backward(y);
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 4.0);
  CHECK(tape.consumed());
  CHECK_THROWS_AS(tape.backward(y), StateError);

  Tape other;
  auto v = mul(other, x, x);
  CHECK_THROWS_AS(other.backward(v), ContractError);

  CHECK_THROWS_AS(grad_check([](Tape& t, std::span<const Tensor> a) { return mul(t, a[0], a[0]); },
                             std::vector<Tensor>{Tensor({2}, 1.0)}),
                  ContractError);
  CHECK(grad_check([](Tape& t, std::span<const Tensor> a) { return sum(t, mul(t, a[0], a[0])); },
                   std::vector<Tensor>{Tensor({3}, {0.3, -1.2, 2.0})}) < 1e-8);

  // a stochastic function without a re-seeded rng is rejected
  auto shared = std::make_shared<Rng>(3);
  CHECK_THROWS_AS(grad_check(
                      [shared](Tape& t, std::span<const Tensor> a) {
                        return sum(t, dropout(t, a[0], 0.5, Mode::Train, *shared));
                      },
                      std::vector<Tensor>{Tensor({50}, 1.0)}),
                  ContractError);
}

TEST_CASE("adam") {
  Parameter p("w", Tensor({1}, {1.0}));
  p.value.grad_buffer()[0] = 1.0;
  Parameter* ps[] = {&p};
  adam_step(ps, AdamConfig{0.1, 0.9, 0.999, 1e-8});
  CHECK(p.value.data()[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK_FALSE(p.value.has_grad());
  CHECK_THROWS_AS(adam_step(ps, AdamConfig{}), StateError);

  Parameter q("q", Tensor({3}, {1.0, -2.0, 0.5}));
  Parameter* qs[] = {&q};
  zero_grad(qs);
  adam_step(qs, AdamConfig{});
  CHECK(q.value.data()[0] == 1.0);
  CHECK(q.value.data()[1] == -2.0);

  SUBCASE("quadratic bowl") {
    Parameter w("w", Tensor({1}, {1.0}));
    Parameter* ws[] = {&w};
    double prev = 1.0;
    bool monotone = true;
    for (int i = 0; i < 200; ++i) {
      zero_grad(ws);
      Tape tape;
      auto loss = sum(tape, mul(tape, w.value, w.value));
      const double l = loss.item();
      monotone = monotone && l <= prev;
      prev = l;
      tape.backward(loss);
      adam_step(ws, AdamConfig{});
    }
    CHECK(monotone);
    // far from the minimum Adam moves about lr per step
    CHECK(w.value.data()[0] == doctest::Approx(1.0 - 200 * 3e-4).epsilon(1e-3));
  }
}

TEST_CASE("checkpoint round trip") {
  Rng rng(17);
  Parameter a("speaker.w", random_tensor({3, 2}, rng));
  Parameter b("listener.b", random_tensor({4}, rng));
  const auto path = std::filesystem::temp_directory_path() / "refgame_ckpt_test.rgl";
  const Parameter* out[] = {&a, &b};
  save_checkpoint(path, out);

  const auto stored = read_checkpoint(path);
  CHECK(stored.size() == 2);
  CHECK(stored.at("speaker.w").shape() == Shape{3, 2});

  Parameter a2("speaker.w", Tensor({3, 2}));
  Parameter b2("listener.b", Tensor({4}));
  Parameter* in[] = {&a2, &b2};
  load_checkpoint(path, in);
  for (std::size_t i = 0; i < 6; ++i) CHECK(a2.value.data()[i] == a.value.data()[i]);
  for (std::size_t i = 0; i < 4; ++i) CHECK(b2.value.data()[i] == b.value.data()[i]);

  Parameter wrong("speaker.w", Tensor({2, 3}));
  Parameter* bad[] = {&wrong};
  CHECK_THROWS(load_checkpoint(path, bad));
  std::filesystem::remove(path);
}

TEST_CASE("replay is bit-identical") {
  auto run = [] {
    Rng rng(18);
    Parameter w("w", random_tensor({3, 4}, rng));
    Parameter b("b", random_tensor({3}, rng));
    Parameter* ps[] = {&w, &b};
    for (int i = 0; i < 20; ++i) {
      zero_grad(ps);
      Tape tape;
      auto x = random_tensor({2, 4}, rng);
      auto y = dropout(tape, softmax(tape, linear(tape, x, w.value, b.value)), 0.3, Mode::Train, rng);
      auto loss = probe_loss(tape, y);
      tape.backward(loss);
      adam_step(ps, AdamConfig{});
    }
    std::vector<double> out(w.value.data().begin(), w.value.data().end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("results do not depend on heap layout") {
  // Vectorised kernels choose their summation order from buffer alignment,
  // so storage must be aligned the same way wherever it lands.
  Rng rng(19);
  const auto x = random_tensor({3, 37}, rng), w = random_tensor({29, 37}, rng), b = random_tensor({29}, rng);
  const auto q = random_tensor({2, 37}, rng), k = random_tensor({2, 5, 37}, rng);
  auto eval = [&] {
    Tape tape(false);
    auto y = linear(tape, x.clone(), w.clone(), b.clone());
    auto d = batched_dot(tape, q.clone(), k.clone());
    std::vector<double> out(y.data().begin(), y.data().end());
    out.insert(out.end(), d.data().begin(), d.data().end());
    return out;
  };
  const auto reference = eval();
  std::vector<std::unique_ptr<char[]>> junk;
  for (std::size_t shift = 1; shift <= 64; ++shift) {
    junk.push_back(std::make_unique<char[]>(shift * 8 + 1));
    Tensor t({1 + shift});
    CHECK(reinterpret_cast<std::uintptr_t>(t.data().data()) % 64 == 0);
    CHECK(eval() == reference);
  }
}
