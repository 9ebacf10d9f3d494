// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "shishu/linalg.hpp"
#include "shishu/tensor.hpp"

using shishu::Index;
using shishu::RngState;
using shishu::Shape;
using DTensor = shishu::Tensor<double>;

namespace {

DTensor random_tensor(Shape shape, RngState& rng, double scl = 1.0) {
  return shishu::normal_init<double>(std::move(shape), 0.0, scl, rng);
}

// Independent reference: plain three-loop product with ascending-k
// accumulation per entry.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, Index m,
                                 Index n, Index k) {
  std::vector<double> c(static_cast<std::size_t>(m * n));
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < n; ++j) {
      double acc = 0.0;
      for (Index p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

// Backprop gradient of loss = sum(op_output ⊙ fixed_random) vs central
// finite differences on the same loss.
void check_grad(const std::function<DTensor(const DTensor&)>& op, const DTensor& x0,
                std::uint64_t probe_seed, double tol = 1e-4) {
  RngState rng(probe_seed);
  DTensor probe_weights;
  {
    shishu::NoGradGuard ng;
    DTensor y0 = op(x0);
    probe_weights = random_tensor(y0.shape, rng);
  }
  DTensor x = x0.clone();
  x.mark_parameter();
  DTensor loss = shishu::sum(shishu::mul(op(x), probe_weights));
  shishu::backward(loss);

  auto f = [&](const DTensor& xv) {
    shishu::NoGradGuard ng;
    return shishu::sum(shishu::mul(op(xv), probe_weights)).value();
  };
  DTensor fd = shishu::finite_diff_grad<double>(f, x0);

  REQUIRE(x.grad);
  for (std::size_t i = 0; i < fd.data->size(); ++i) {
    const double bp = (*x.grad)[i];
    const double ref = (*fd.data)[i];
    const double err = std::abs(bp - ref) / std::max({std::abs(bp), std::abs(ref), 1.0});
    INFO("element " << i << " backprop " << bp << " fd " << ref);
    REQUIRE(err < tol);
  }
}

}  // namespace

TEST_CASE("matmul identity cases") {
  DTensor i2({2, 2}, {1, 0, 0, 1});
  DTensor a({2, 2}, {1, 2, 3, 4});

  DTensor ii = shishu::matmul(i2, i2);
  CHECK((*ii.data) == std::vector<double>{1, 0, 0, 1});

  DTensor ai = shishu::matmul(a, i2);
  CHECK((*ai.data) == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("matmul matches triple-loop reference exactly in double") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    RngState rng(seed);
    DTensor a = random_tensor({3, 4}, rng);
    DTensor b = random_tensor({4, 2}, rng);
    DTensor c = shishu::matmul(a, b);
    std::vector<double> ref = naive_matmul(*a.data, *b.data, 3, 2, 4);
    for (std::size_t i = 0; i < ref.size(); ++i) REQUIRE((*c.data)[i] == ref[i]);
  }
}

TEST_CASE("matmul transpose flags match rearranged reference exactly") {
  RngState rng(7);
  DTensor a = random_tensor({5, 3}, rng);   // used as aᵀ: [3x5]
  DTensor b = random_tensor({4, 3}, rng);   // used as bᵀ: [3x4]
  DTensor x = random_tensor({6, 3}, rng);

  // x · bᵀ
  DTensor xbt = shishu::matmul(x, b, false, true);
  std::vector<double> bt(12);
  for (Index r = 0; r < 3; ++r)
    for (Index c = 0; c < 4; ++c) bt[r * 4 + c] = (*b.data)[c * 3 + r];
  std::vector<double> ref = naive_matmul(*x.data, bt, 6, 4, 3);
  for (std::size_t i = 0; i < ref.size(); ++i) REQUIRE((*xbt.data)[i] == ref[i]);

  // aᵀ · x_small where a is [5x3]
  DTensor y = random_tensor({5, 2}, rng);
  DTensor aty = shishu::matmul(a, y, true, false);
  std::vector<double> at(15);
  for (Index r = 0; r < 3; ++r)
    for (Index c = 0; c < 5; ++c) at[r * 5 + c] = (*a.data)[c * 3 + r];
  std::vector<double> ref2 = naive_matmul(at, *y.data, 3, 2, 5);
  for (std::size_t i = 0; i < ref2.size(); ++i) REQUIRE((*aty.data)[i] == ref2[i]);
}

TEST_CASE("matmul shape mismatch throws") {
  DTensor a({2, 3}, std::vector<double>(6, 1.0));
  DTensor b({2, 2}, std::vector<double>(4, 1.0));
  CHECK_THROWS_AS(shishu::matmul(a, b), std::invalid_argument);
}

TEST_CASE("matmul gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    RngState rng(seed);
    DTensor a0 = random_tensor({3, 4}, rng);
    DTensor b = random_tensor({4, 2}, rng);
    check_grad([&](const DTensor& a) { return shishu::matmul(a, b); }, a0, seed * 31 + 1);
    DTensor a = random_tensor({3, 4}, rng);
    DTensor b0 = random_tensor({4, 2}, rng);
    check_grad([&](const DTensor& bb) { return shishu::matmul(a, bb); }, b0, seed * 31 + 2);
  }
}

TEST_CASE("bmm matches per-batch reference and reverse-mode gradients") {
  RngState rng(11);
  DTensor a = random_tensor({2, 3, 2, 4}, rng);
  DTensor b = random_tensor({2, 3, 4, 3}, rng);
  DTensor c = shishu::bmm(a, b);
  for (Index t = 0; t < 6; ++t) {
    std::vector<double> at(a.ptr() + t * 8, a.ptr() + (t + 1) * 8);
    std::vector<double> bt(b.ptr() + t * 12, b.ptr() + (t + 1) * 12);
    std::vector<double> ref = naive_matmul(at, bt, 2, 3, 4);
    for (std::size_t i = 0; i < ref.size(); ++i) REQUIRE((*c.data)[t * 6 + i] == ref[i]);
  }

  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    RngState r2(seed + 100);
    DTensor a0 = random_tensor({2, 2, 3}, r2);
    DTensor b0 = random_tensor({2, 3, 2}, r2);
    check_grad([&](const DTensor& av) { return shishu::bmm(av, b0); }, a0, seed * 53 + 1);
    check_grad([&](const DTensor& bv) { return shishu::bmm(a0, bv); }, b0, seed * 53 + 2);
    // trans_b path
    DTensor bt = random_tensor({2, 2, 3}, r2);
    check_grad([&](const DTensor& av) { return shishu::bmm(av, bt, true); }, a0, seed * 53 + 3);
    check_grad([&](const DTensor& bv) { return shishu::bmm(a0, bv, true); }, bt, seed * 53 + 4);
  }
}

TEST_CASE("silu fixed points and saturation") {
  DTensor z = DTensor::scalar(0.0);
  CHECK(shishu::silu(z).value() == 0.0);

  DTensor big({3}, {20.0, 25.0, 30.0});
  DTensor y = shishu::silu(big);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs((*y.data)[i] - (*big.data)[i]) < 1e-6);

  // scalar reference at x = 1 in extended precision
  const long double sig1 = 1.0L / (1.0L + std::exp(-1.0L));
  DTensor one = DTensor::scalar(1.0);
  CHECK(std::abs(shishu::silu(one).value() - static_cast<double>(sig1)) < 1e-12);
}

TEST_CASE("silu gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    RngState rng(seed);
    DTensor x0 = random_tensor({4, 5}, rng, 2.0);
    check_grad([](const DTensor& x) { return shishu::silu(x); }, x0, seed * 17 + 5);
  }
}

TEST_CASE("rmsnorm of ones is ones") {
  DTensor x({2, 4}, std::vector<double>(8, 1.0));
  DTensor w({4}, std::vector<double>(4, 1.0));
  DTensor y = shishu::rmsnorm(x, w, 0.0);
  for (double v : *y.data) CHECK(v == 1.0);
}

TEST_CASE("rmsnorm is scale invariant at eps zero") {
  RngState rng(3);
  DTensor x = random_tensor({3, 8}, rng);
  DTensor w = random_tensor({8}, rng);
  DTensor base = shishu::rmsnorm(x, w, 0.0);
  for (double alpha : {0.5, 2.0, 10.0, 100.0}) {
    DTensor xs = shishu::scale(x, alpha);
    DTensor ys = shishu::rmsnorm(xs, w, 0.0);
    for (std::size_t i = 0; i < base.data->size(); ++i)
      CHECK(std::abs((*ys.data)[i] - (*base.data)[i]) < 1e-6);
  }
}

TEST_CASE("rmsnorm matches scalar reference") {
  RngState rng(5);
  DTensor x = random_tensor({4, 6}, rng);
  DTensor w = random_tensor({6}, rng);
  const double eps = 1e-5;
  DTensor y = shishu::rmsnorm(x, w, eps);
  for (Index r = 0; r < 4; ++r) {
    double ms = 0.0;
    for (Index c = 0; c < 6; ++c) {
      const double v = (*x.data)[r * 6 + c];
      ms += v * v;
    }
    const double inv = 1.0 / std::sqrt(ms / 6.0 + eps);
    for (Index c = 0; c < 6; ++c) {
      const double ref = (*w.data)[c] * (*x.data)[r * 6 + c] * inv;
      const double got = (*y.data)[r * 6 + c];
      CHECK(std::abs(got - ref) <= 1e-6 * std::max(1.0, std::abs(ref)));
    }
  }
}

TEST_CASE("rmsnorm input and weight gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    RngState rng(seed);
    DTensor x0 = random_tensor({3, 6}, rng);
    DTensor w = random_tensor({6}, rng);
    check_grad([&](const DTensor& x) { return shishu::rmsnorm(x, w, 1e-5); }, x0, seed * 7 + 1);
    DTensor x = random_tensor({3, 6}, rng);
    DTensor w0 = random_tensor({6}, rng);
    check_grad([&](const DTensor& wv) { return shishu::rmsnorm(x, wv, 1e-5); }, w0, seed * 7 + 2);
  }
}

TEST_CASE("rmsnorm rejects bad arguments") {
  DTensor x({2, 3}, std::vector<double>(6, 1.0));
  DTensor w({3}, std::vector<double>(3, 1.0));
  CHECK_THROWS_AS(shishu::rmsnorm(x, w, -1.0), std::invalid_argument);
  DTensor wbad({2}, std::vector<double>(2, 1.0));
  CHECK_THROWS_AS(shishu::rmsnorm(x, wbad, 0.0), std::invalid_argument);
  // all-zero row with eps 0 divides by zero; surfaced, never silent
  DTensor zeros({1, 3}, std::vector<double>(3, 0.0));
  CHECK_THROWS_AS(shishu::rmsnorm(zeros, w, 0.0), std::runtime_error);
}

TEST_CASE("softmax symmetry and stability") {
  DTensor x({1, 3}, {0.0, 0.0, 0.0});
  DTensor y = shishu::softmax_rows(x);
  for (double v : *y.data) CHECK(std::abs(v - 1.0 / 3.0) < 1e-12);

  DTensor hot({1, 2}, {1000.0, 0.0});
  DTensor yh = shishu::softmax_rows(hot);
  CHECK(std::abs((*yh.data)[0] - 1.0) < 1e-6);
  CHECK((*yh.data)[1] < 1e-6);
  CHECK((*yh.data)[1] >= 0.0);
}

TEST_CASE("softmax matches naive exp-sum reference") {
  RngState rng(9);
  DTensor x = random_tensor({5, 7}, rng, 3.0);
  DTensor y = shishu::softmax_rows(x);
  for (Index r = 0; r < 5; ++r) {
    double z = 0.0;
    for (Index c = 0; c < 7; ++c) z += std::exp((*x.data)[r * 7 + c]);
    double row_sum = 0.0;
    for (Index c = 0; c < 7; ++c) {
      const double ref = std::exp((*x.data)[r * 7 + c]) / z;
      CHECK(std::abs((*y.data)[r * 7 + c] - ref) < 1e-9);
      CHECK((*y.data)[r * 7 + c] >= 0.0);
      CHECK((*y.data)[r * 7 + c] <= 1.0);
      row_sum += (*y.data)[r * 7 + c];
    }
    CHECK(std::abs(row_sum - 1.0) < 1e-6);
  }
}

TEST_CASE("softmax gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    RngState rng(seed);
    DTensor x0 = random_tensor({3, 5}, rng);
    check_grad([](const DTensor& x) { return shishu::softmax_rows(x); }, x0, seed * 13 + 3);
  }
}

TEST_CASE("causal softmax zeroes the future and normalizes the prefix") {
  RngState rng(21);
  DTensor scores = random_tensor({2, 4, 4}, rng);
  DTensor p = shishu::causal_softmax(scores, 0);
  for (Index b = 0; b < 2; ++b)
    for (Index r = 0; r < 4; ++r) {
      double row_sum = 0.0;
      for (Index c = 0; c < 4; ++c) {
        const double v = (*p.data)[(b * 4 + r) * 4 + c];
        if (c > r) {
          REQUIRE(v == 0.0);
        } else {
          row_sum += v;
        }
      }
      CHECK(std::abs(row_sum - 1.0) < 1e-6);
    }

  // last row attends everywhere: equals a plain softmax of that row
  DTensor last({1, 4}, {scores.ptr()[12], scores.ptr()[13], scores.ptr()[14], scores.ptr()[15]});
  DTensor ref = shishu::softmax_rows(last);
  for (Index c = 0; c < 4; ++c) CHECK(std::abs((*p.data)[12 + c] - (*ref.data)[c]) < 1e-12);
}

TEST_CASE("causal softmax with cache offset shifts the valid prefix") {
  RngState rng(22);
  DTensor scores = random_tensor({1, 2, 5}, rng);
  DTensor p = shishu::causal_softmax(scores, 3);
  // row 0 sees columns [0,3], row 1 sees [0,4]
  CHECK((*p.data)[4] == 0.0);
  double s0 = 0.0, s1 = 0.0;
  for (Index c = 0; c < 4; ++c) s0 += (*p.data)[c];
  for (Index c = 0; c < 5; ++c) s1 += (*p.data)[5 + c];
  CHECK(std::abs(s0 - 1.0) < 1e-6);
  CHECK(std::abs(s1 - 1.0) < 1e-6);
  CHECK_THROWS_AS(shishu::causal_softmax(scores, 4), std::invalid_argument);
}

TEST_CASE("causal softmax gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    RngState rng(seed);
    DTensor x0 = random_tensor({2, 3, 3}, rng);
    check_grad([](const DTensor& x) { return shishu::causal_softmax(x, 0); }, x0, seed * 19 + 4);
  }
}

TEST_CASE("rope at position zero is the identity") {
  RngState rng(2);
  DTensor x = random_tensor({2, 1, 8}, rng);
  DTensor y = shishu::rope_apply(x, {0}, 10000.0);
  for (std::size_t i = 0; i < x.data->size(); ++i) REQUIRE((*y.data)[i] == (*x.data)[i]);
}

TEST_CASE("rope preserves pair norms") {
  RngState rng(4);
  DTensor x = random_tensor({3, 5, 6}, rng);
  std::vector<Index> pos = {0, 1, 2, 3, 4};
  DTensor y = shishu::rope_apply(x, pos, 10000.0);
  for (Index p = 0; p < 15; ++p)
    for (Index j = 0; j < 3; ++j) {
      const double x0 = (*x.data)[p * 6 + 2 * j], x1 = (*x.data)[p * 6 + 2 * j + 1];
      const double y0 = (*y.data)[p * 6 + 2 * j], y1 = (*y.data)[p * 6 + 2 * j + 1];
      CHECK(std::abs(std::hypot(y0, y1) - std::hypot(x0, x1)) < 1e-6);
    }
}

TEST_CASE("rope pair zero at position one rotates by exactly one radian") {
  // theta^(−0/hd) = 1, so the first pair's angle equals the position.
  DTensor x({1, 1, 4}, {1.0, 0.0, 0.5, -0.25});
  DTensor y = shishu::rope_apply(x, {1}, 10000.0);
  CHECK(std::abs((*y.data)[0] - std::cos(1.0)) < 1e-12);
  CHECK(std::abs((*y.data)[1] - std::sin(1.0)) < 1e-12);
  // second pair rotates by theta^(-2/4) = 0.01 radians
  const double c = std::cos(0.01), s = std::sin(0.01);
  CHECK(std::abs((*y.data)[2] - (c * 0.5 - s * -0.25)) < 1e-12);
  CHECK(std::abs((*y.data)[3] - (s * 0.5 + c * -0.25)) < 1e-12);

  DTensor odd({1, 1, 3}, {1.0, 2.0, 3.0});
  CHECK_THROWS_AS(shishu::rope_apply(odd, {0}, 10000.0), std::invalid_argument);
}

TEST_CASE("rope gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    RngState rng(seed);
    DTensor x0 = random_tensor({2, 3, 4}, rng);
    std::vector<Index> pos = {5, 6, 7};
    check_grad([&](const DTensor& x) { return shishu::rope_apply(x, pos, 10000.0); }, x0,
               seed * 23 + 6);
  }
}

TEST_CASE("cross entropy of uniform logits is log vocab") {
  DTensor logits({2, 4}, std::vector<double>(8, 0.7));
  DTensor loss = shishu::cross_entropy(logits, {1, 3});
  CHECK(std::abs(loss.value() - std::log(4.0)) < 1e-12);
}

TEST_CASE("cross entropy vanishes with a growing correct-class margin") {
  double prev = 1e9;
  for (double margin : {2.0, 5.0, 10.0, 20.0}) {
    DTensor logits({1, 3}, {margin, 0.0, 0.0});
    const double l = shishu::cross_entropy(logits, {0}).value();
    CHECK(l < prev);
    prev = l;
  }
  CHECK(prev < 1e-8);
}

TEST_CASE("cross entropy skips the ignore sentinel and rejects bad targets") {
  DTensor logits({3, 4}, std::vector<double>(12, 0.0));
  DTensor loss = shishu::cross_entropy(logits, {1, shishu::kIgnoreIndex, 2});
  CHECK(std::abs(loss.value() - std::log(4.0)) < 1e-12);
  CHECK_THROWS_AS(shishu::cross_entropy(logits, {1, 4, 2}), std::out_of_range);
  CHECK_THROWS_AS(shishu::cross_entropy(logits, {1, -3, 2}), std::out_of_range);
}

TEST_CASE("cross entropy gradient matches finite differences") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    RngState rng(seed);
    DTensor x0 = random_tensor({3, 5}, rng);
    std::vector<std::int32_t> targets = {static_cast<std::int32_t>(seed % 5),
                                         shishu::kIgnoreIndex,
                                         static_cast<std::int32_t>((seed * 3) % 5)};
    DTensor x = x0.clone();
    x.mark_parameter();
    DTensor loss = shishu::cross_entropy(x, targets);
    shishu::backward(loss);
    auto f = [&](const DTensor& xv) {
      shishu::NoGradGuard ng;
      return shishu::cross_entropy(xv, targets).value();
    };
    DTensor fd = shishu::finite_diff_grad<double>(f, x0);
    double grad_sum = 0.0;
    for (std::size_t i = 0; i < fd.data->size(); ++i) {
      const double bp = (*x.grad)[i];
      const double ref = (*fd.data)[i];
      REQUIRE(std::abs(bp - ref) / std::max({std::abs(bp), std::abs(ref), 1.0}) < 1e-4);
      grad_sum += bp;
    }
    // (softmax − onehot) rows each sum to zero
    CHECK(std::abs(grad_sum) < 1e-9);
  }
}

TEST_CASE("embedding gathers rows and accumulates duplicate ids") {
  DTensor table({3, 2}, {1, 2, 3, 4, 5, 6});
  table.mark_parameter();
  DTensor out = shishu::embedding<double>({2, 0, 2}, {3}, table);
  CHECK((*out.data) == std::vector<double>{5, 6, 1, 2, 5, 6});

  DTensor loss = shishu::sum(out);
  shishu::backward(loss);
  // id 2 used twice, id 0 once, id 1 never
  CHECK((*table.grad) == std::vector<double>{1, 1, 0, 0, 2, 2});

  CHECK_THROWS_AS(shishu::embedding<double>({3}, {1}, table), std::out_of_range);
}

TEST_CASE("head reshapes round-trip and repeat_kv copies planes") {
  RngState rng(14);
  DTensor x = random_tensor({2, 3, 8}, rng);
  DTensor heads = shishu::to_heads(x, 4);
  REQUIRE(heads.shape == Shape{2, 4, 3, 2});
  DTensor back = shishu::merge_heads(heads);
  REQUIRE(back.shape == x.shape);
  for (std::size_t i = 0; i < x.data->size(); ++i) REQUIRE((*back.data)[i] == (*x.data)[i]);

  DTensor kv = random_tensor({1, 2, 3, 2}, rng);
  DTensor rep = shishu::repeat_kv(kv, 3);
  REQUIRE(rep.shape == Shape{1, 6, 3, 2});
  for (Index h = 0; h < 2; ++h)
    for (Index r = 0; r < 3; ++r)
      for (Index i = 0; i < 6; ++i)
        REQUIRE((*rep.data)[((h * 3 + r) * 3) * 2 + i] == (*kv.data)[(h * 3) * 2 + i]);

  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    RngState r2(seed);
    DTensor x0 = random_tensor({1, 2, 2, 2}, r2);
    check_grad([](const DTensor& v) { return shishu::repeat_kv(v, 2); }, x0, seed * 29 + 7);
    DTensor x1 = random_tensor({1, 2, 4}, r2);
    check_grad([](const DTensor& v) { return shishu::merge_heads(shishu::to_heads(v, 2)); }, x1,
               seed * 29 + 8);
  }
}

TEST_CASE("elementwise ops and graph reuse accumulate correctly") {
  DTensor x({2}, {3.0, -2.0});
  x.mark_parameter();
  // loss = sum(x ⊙ x): reuse of x as both parents must double-count
  DTensor loss = shishu::sum(shishu::mul(x, x));
  shishu::backward(loss);
  CHECK((*x.grad) == std::vector<double>{6.0, -4.0});

  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    RngState rng(seed);
    DTensor a0 = random_tensor({3, 3}, rng);
    DTensor b = random_tensor({3, 3}, rng);
    check_grad([&](const DTensor& a) { return shishu::add(a, b); }, a0, seed * 37 + 1);
    check_grad([&](const DTensor& a) { return shishu::mul(a, b); }, a0, seed * 37 + 2);
    check_grad([&](const DTensor& a) { return shishu::scale(a, 2.5); }, a0, seed * 37 + 3);
    check_grad([&](const DTensor& a) { return shishu::reshape(a, {9}); }, a0, seed * 37 + 4);
  }
}

TEST_CASE("finite values are enforced") {
  DTensor big = DTensor::scalar(1e308);
  CHECK_THROWS_AS(shishu::mul(big, big), std::runtime_error);
}

TEST_CASE("lstsq recovers identity, scalar, and planted maps") {
  RngState rng(31);
  DTensor x = random_tensor({40, 5}, rng);

  auto r1 = shishu::lstsq(x, x);
  for (Index i = 0; i < 5; ++i)
    for (Index j = 0; j < 5; ++j)
      CHECK(std::abs((*r1.w.data)[i * 5 + j] - (i == j ? 1.0 : 0.0)) < 1e-8);
  CHECK(r1.mse < 1e-16);
  CHECK_FALSE(r1.ridged);

  DTensor x2 = shishu::scale(x, 2.0);
  auto r2 = shishu::lstsq(x, x2);
  for (Index i = 0; i < 5; ++i)
    for (Index j = 0; j < 5; ++j)
      CHECK(std::abs((*r2.w.data)[i * 5 + j] - (i == j ? 2.0 : 0.0)) < 1e-8);

  DTensor a = random_tensor({5, 5}, rng);
  DTensor z = shishu::matmul(x, a, false, true);  // rows z_j = A x_j
  auto r3 = shishu::lstsq(x, z);
  for (std::size_t i = 0; i < 25; ++i) CHECK(std::abs((*r3.w.data)[i] - (*a.data)[i]) < 1e-6);
  CHECK(r3.mse < 1e-10);
}

TEST_CASE("lstsq residual is orthogonal to the column space") {
  RngState rng(33);
  DTensor x = random_tensor({50, 4}, rng);
  DTensor noise = random_tensor({50, 3}, rng, 0.1);
  DTensor a = random_tensor({3, 4}, rng);
  DTensor z = shishu::add(shishu::matmul(x, a, false, true), noise);
  auto r = shishu::lstsq(x, z);
  // residual R = X Wᵀ − Z; require ||Xᵀ R||∞ < 1e-6
  DTensor fit = shishu::matmul(x, r.w, false, true);
  for (Index c = 0; c < 4; ++c)
    for (Index j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (Index i = 0; i < 50; ++i)
        dot += (*x.data)[i * 4 + c] * ((*fit.data)[i * 3 + j] - (*z.data)[i * 3 + j]);
      CHECK(std::abs(dot) < 1e-6);
    }
}

TEST_CASE("lstsq flags degenerate inputs and still returns a finite map") {
  RngState rng(35);
  DTensor x = random_tensor({20, 3}, rng);
  for (Index i = 0; i < 20; ++i) (*x.data)[i * 3 + 2] = 0.0;  // dead column
  DTensor z = random_tensor({20, 3}, rng);
  auto r = shishu::lstsq(x, z);
  CHECK(r.ridged);
  for (double v : *r.w.data) CHECK(std::isfinite(v));
}

TEST_CASE("normal_init determinism and moments") {
  RngState a(42), b(42);
  DTensor t1 = shishu::normal_init<double>({257}, 0.0, 0.02, a);
  DTensor t2 = shishu::normal_init<double>({257}, 0.0, 0.02, b);
  REQUIRE((*t1.data) == (*t2.data));

  RngState c(1);
  DTensor flat = shishu::normal_init<double>({13}, -1.5, 0.0, c);
  for (double v : *flat.data) CHECK(v == -1.5);

  RngState d(7);
  DTensor big = shishu::normal_init<double>({1000000}, 0.0, 0.02, d);
  double s1 = 0.0, s2 = 0.0;
  for (double v : *big.data) {
    s1 += v;
    s2 += v * v;
  }
  const double mean = s1 / 1e6;
  const double sd = std::sqrt(s2 / 1e6 - mean * mean);
  CHECK(std::abs(mean) < 1e-4);
  CHECK(sd >= 0.0199);
  CHECK(sd <= 0.0201);
}

TEST_CASE("rng integer stream is stable across instances") {
  RngState a(123), b(123);
  for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());
  RngState c(124);
  CHECK(a.next_u64() != c.next_u64());

  RngState d(55);
  for (int i = 0; i < 200; ++i) {
    const std::uint64_t v = d.next_below(7);
    REQUIRE(v < 7);
  }

  std::vector<int> v1 = {1, 2, 3, 4, 5, 6, 7, 8}, v2 = v1;
  RngState e(77), f(77);
  e.shuffle(v1.begin(), v1.end());
  f.shuffle(v2.begin(), v2.end());
  CHECK(v1 == v2);
}

TEST_CASE("finite_diff_grad on analytic cases") {
  auto f = [](const DTensor& x) {
    shishu::NoGradGuard ng;
    return shishu::sum(shishu::mul(x, x)).value();
  };
  DTensor x({2}, {1.0, 2.0});
  DTensor g = shishu::finite_diff_grad<double>(f, x);
  CHECK(std::abs((*g.data)[0] - 2.0) < 1e-6);
  CHECK(std::abs((*g.data)[1] - 4.0) < 1e-6);

  auto konst = [](const DTensor&) { return 3.5; };
  DTensor gc = shishu::finite_diff_grad<double>(konst, x);
  CHECK((*gc.data)[0] == 0.0);
  CHECK((*gc.data)[1] == 0.0);
}
