// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "test_util.hpp"
#include "vexpert/error.hpp"
#include "vexpert/gradcheck.hpp"
#include "vexpert/ops.hpp"

using namespace vexpert;
using testing::max_abs_diff;
using testing::random_tensor;
using testing::weighted_sum;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Tolerances for per-op finite-difference checks.
GradCheckOptions op_check() {
  GradCheckOptions o;
  o.step = 1e-5;
  o.tol = 1e-6;
  return o;
}

void expect_grad_ok(const std::function<Tensor(Tape&)>& f, std::vector<Tensor> inputs) {
  const auto r = grad_check(f, std::move(inputs), op_check());
  INFO("worst " << r.worst << " rel " << r.max_rel_error);
  CHECK(r.checked > 0);
  CHECK(r.passed);
}

ops::AttentionMask causal_mask(std::int64_t batch, std::int64_t L, std::vector<std::int64_t> lengths = {}) {
  ops::AttentionMask m{batch, L, L, std::vector<std::uint8_t>(static_cast<std::size_t>(batch * L * L), 0)};
  for (std::int64_t b = 0; b < batch; ++b) {
    const std::int64_t len = lengths.empty() ? L : lengths[static_cast<std::size_t>(b)];
    for (std::int64_t i = 0; i < L; ++i)
      for (std::int64_t j = 0; j < L; ++j) {
        const bool ok = i < len ? (j <= i) : (j < len);
        m.allowed[static_cast<std::size_t>((b * L + i) * L + j)] = ok;
      }
  }
  return m;
}

}  // namespace

TEST_CASE("tensor shape invariants") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  CHECK_THROWS_AS(Tensor({0, 3}, {}), ShapeError);
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.dim(-1) == 3);
  CHECK_THROWS_AS(t.dim(2), ShapeError);
  CHECK_FALSE(t.has_grad());
}

TEST_CASE("matmul values and errors") {
  Tape tape;
  Tensor id({2, 2}, {1, 0, 0, 1});
  Tensor b({2, 2}, {2, 3, 4, 5});
  auto c = ops::matmul(tape, id, b);
  CHECK(std::vector<double>(c.data().begin(), c.data().end()) == std::vector<double>{2, 3, 4, 5});
  auto d = ops::matmul(tape, Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4}));
  CHECK(d.item() == 11.0);

  try {
    ops::matmul(tape, Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches finite differences") {
  auto a = random_tensor({3, 4}, 1);
  auto b = random_tensor({4, 2}, 2);
  expect_grad_ok([&](Tape& t) { return ops::sum(t, ops::matmul(t, a, b)); }, {a, b});
  auto ab = random_tensor({2, 3, 4}, 3);
  auto shared = random_tensor({4, 5}, 4);
  expect_grad_ok([&](Tape& t) { return weighted_sum(t, ops::matmul(t, ab, shared)); }, {ab, shared});
}

TEST_CASE("softmax values") {
  Tape tape;
  auto u = ops::softmax_lastdim(tape, Tensor({3}, {0, 0, 0}));
  for (double p : u.data()) CHECK(p == doctest::Approx(1.0 / 3).epsilon(1e-15));

  auto m = ops::softmax_lastdim(tape, Tensor({2}, {0, -kInf}));
  CHECK(m.data()[0] == 1.0);
  CHECK(m.data()[1] == 0.0);

  // Direct exponentiation oracle.
  auto s = ops::softmax_lastdim(tape, Tensor({3}, {1, 2, 3}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(s.data()[i] - std::exp(i + 1.0) / z) < 1e-12);

  CHECK_THROWS_AS(ops::softmax_lastdim(tape, Tensor({2, 2}, {0, 1, -kInf, -kInf})), DomainError);
}

TEST_CASE("softmax rows sum to one and masked entries are exactly zero") {
  Tape tape;
  auto x = random_tensor({5, 7}, 11, false, 4.0);
  auto data = x.mutable_data();
  for (int r = 0; r < 5; ++r) data[static_cast<std::size_t>(r * 7 + (r % 7))] = -kInf;
  auto p = ops::softmax_lastdim(tape, x);
  for (int r = 0; r < 5; ++r) {
    double total = 0;
    for (int c = 0; c < 7; ++c) total += p.data()[static_cast<std::size_t>(r * 7 + c)];
    CHECK(std::abs(total - 1.0) < 1e-12);
    CHECK(p.data()[static_cast<std::size_t>(r * 7 + (r % 7))] == 0.0);
  }
}

TEST_CASE("softmax-then-pick passes grad_check at 1e-6") {
  auto x = random_tensor({3}, 5);
  Tensor pick({3}, {0, 1, 0});
  auto r = grad_check([&](Tape& t) { return ops::sum(t, ops::mul(t, ops::softmax_lastdim(t, x), pick)); }, x, 1e-5,
                      1e-6);
  CHECK(r.passed);
}

TEST_CASE("masked_softmax equals -inf softmax") {
  Tape tape;
  const auto mask = causal_mask(2, 4, {4, 3});
  auto scores = random_tensor({2, 3, 4, 4}, 7, false);
  auto p = ops::masked_softmax(tape, scores, mask);
  auto filled = scores.detach();
  auto fd = filled.mutable_data();
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t h = 0; h < 3; ++h)
      for (std::int64_t i = 0; i < 4; ++i)
        for (std::int64_t j = 0; j < 4; ++j)
          if (!mask.at(b, i, j)) fd[static_cast<std::size_t>(((b * 3 + h) * 4 + i) * 4 + j)] = -kInf;
  auto q = ops::softmax_lastdim(tape, filled);
  CHECK(max_abs_diff(p.data(), q.data()) < 1e-15);
  for (std::size_t i = 0; i < p.data().size(); ++i)
    if (std::isinf(fd[i])) CHECK(p.data()[i] == 0.0);
}

TEST_CASE("rmsnorm values") {
  Tape tape;
  auto y = ops::rmsnorm(tape, Tensor({4}, {-3, -3, -3, -3}), Tensor::filled({4}, 1.0), 1e-300);
  for (double v : y.data()) CHECK(v == doctest::Approx(-1.0).epsilon(1e-15));
  auto z = ops::rmsnorm(tape, random_tensor({3, 4}, 2, false), Tensor::zeros({4}), 1e-6);
  for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("elementwise and structural op values") {
  Tape tape;
  CHECK(ops::silu(tape, Tensor::scalar(0.0)).item() == 0.0);
  auto ce = ops::cross_entropy(tape, Tensor({4}, {0.3, 0.3, 0.3, 0.3}), std::vector<std::int64_t>{2});
  CHECK(std::abs(ce.item() - std::log(4.0)) < 1e-12);

  auto a = random_tensor({2, 3, 4}, 1, false);
  auto b = random_tensor({2, 5, 4}, 2, false);
  auto c = ops::concat_seq(tape, a, b);
  CHECK(c.shape() == Shape{2, 8, 4});
  auto [a2, b2] = ops::split_seq(tape, c, 3);
  CHECK(std::equal(a.data().begin(), a.data().end(), a2.data().begin()));
  CHECK(std::equal(b.data().begin(), b.data().end(), b2.data().begin()));
  CHECK_THROWS_AS(ops::concat_seq(tape, a, random_tensor({2, 3, 5}, 3, false)), ShapeError);

  auto table = random_tensor({5, 3}, 4, false);
  CHECK_THROWS_AS(ops::embed(tape, table, std::vector<std::int64_t>{5}), InvalidArgument);
  CHECK_THROWS_AS(ops::embed(tape, table, std::vector<std::int64_t>{-1}), InvalidArgument);
}

TEST_CASE("backward basics") {
  Tensor x({2}, {1, 2}, true);
  {
    Tape tape;
    tape.backward(ops::sum(tape, x));
    CHECK(x.grad()[0] == 1.0);
    CHECK(x.grad()[1] == 1.0);
  }
  x.clear_grad();
  {
    Tape tape;
    tape.backward(ops::sum(tape, ops::mul(tape, x, x)));
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 4.0);
  }
  Tape tape;
  CHECK_THROWS_AS(tape.backward(ops::mul(tape, x, x)), ShapeError);
}

TEST_CASE("backward never touches frozen tensors") {
  auto w = random_tensor({3, 3}, 1, false);
  auto x = random_tensor({2, 3}, 2, true);
  Tape tape;
  tape.backward(weighted_sum(tape, ops::matmul(tape, x, w)));
  CHECK(x.has_grad());
  CHECK_FALSE(w.has_grad());
}

TEST_CASE("tape is topologically ordered and each op runs backward once") {
  auto x = random_tensor({2, 2}, 1);
  Tape tape;
  auto y = ops::matmul(tape, x, x);
  auto z = ops::add(tape, y, x);
  auto loss = ops::sum(tape, ops::silu(tape, z));
  for (const auto& e : tape.entries())
    for (auto id : e.input_ids) CHECK(id < e.output_id);

  int calls = 0;
  Tensor out = Tensor::scalar(0.0);
  tape.record("probe", {loss}, out, [&](std::span<const double>) { ++calls; });
  tape.backward(out);
  CHECK(calls == 1);
}

TEST_CASE("grad_check controls") {
  auto x = random_tensor({4}, 3);
  auto r = grad_check([&](Tape& t) { return ops::sum(t, x); }, x, 1e-5, 1e-6);
  CHECK(r.passed);
  CHECK(r.max_abs_error < 1e-9);

  // Negative control: square with a deliberately wrong derivative (x instead of 2x).
  auto bad_square = [](Tape& tape, const Tensor& in) {
    std::vector<double> out(in.data().begin(), in.data().end());
    for (double& v : out) v *= v;
    Tensor y(in.shape(), std::move(out));
    if (tape.wants_grad({&in})) {
      tape.record("bad_square", {in}, y, [in](std::span<const double> g) {
        auto gi = in.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * in.data()[i];
      });
    }
    return y;
  };
  auto wrong = grad_check([&](Tape& t) { return ops::sum(t, bad_square(t, x)); }, x, 1e-5, 1e-6);
  CHECK_FALSE(wrong.passed);
}

TEST_CASE("every differentiable op matches finite differences") {
  auto a = random_tensor({3, 4}, 1);
  auto b = random_tensor({3, 4}, 2);
  auto v = random_tensor({4}, 3);
  SUBCASE("add sub mul scale") {
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, ops::add(t, a, b)); }, {a, b});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, ops::sub(t, a, b)); }, {a, b});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, ops::mul(t, a, b)); }, {a, b});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, ops::scale(t, a, -0.7)); }, {a});
  }
  SUBCASE("add_bias silu silu_mul") {
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, ops::add_bias(t, a, v)); }, {a, v});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, ops::silu(t, a)); }, {a});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, ops::silu_mul(t, a, b)); }, {a, b});
  }
  SUBCASE("rmsnorm") {
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, ops::rmsnorm(t, a, v, 1e-6)); }, {a, v});
  }
  SUBCASE("softmax and cross_entropy") {
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, ops::softmax_lastdim(t, a)); }, {a});
    const std::vector<std::int64_t> targets{0, 3, 1};
    expect_grad_ok([&](Tape& t) { return ops::cross_entropy(t, a, targets); }, {a});
  }
  SUBCASE("masked_softmax") {
    auto s = random_tensor({2, 2, 3, 3}, 4);
    const auto mask = causal_mask(2, 3, {3, 2});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, ops::masked_softmax(t, s, mask)); }, {s});
  }
  SUBCASE("embed gather interleave") {
    auto table = random_tensor({5, 3}, 5);
    const std::vector<std::int64_t> ids{4, 0, 4, 2};
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, ops::embed(t, table, ids)); }, {table});
    const std::vector<std::int64_t> rows{2, 0, 2};
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, ops::gather_rows(t, a, rows)); }, {a});
    auto c = random_tensor({2, 4}, 6);
    expect_grad_ok(
        [&](Tape& t) {
          std::vector<ops::RowGroup> groups{{a, {4, 0, 2}}, {c, {1, 3}}};
          return weighted_sum(t, ops::interleave_rows(t, groups, 5));
        },
        {a, c});
  }
  SUBCASE("concat split reshape transpose swap") {
    auto x = random_tensor({2, 3, 4}, 7);
    auto y = random_tensor({2, 2, 4}, 8);
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, ops::concat_seq(t, x, y)); }, {x, y});
    expect_grad_ok(
        [&](Tape& t) {
          auto [p, q] = ops::split_seq(t, x, 1);
          return ops::add(t, weighted_sum(t, p, 1), weighted_sum(t, q, 2));
        },
        {x});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, ops::reshape(t, x, {4, 6})); }, {x});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, ops::transpose_last2(t, x)); }, {x});
    auto w = random_tensor({2, 3, 4, 2}, 9);
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, ops::swap_axes12(t, w)); }, {w});
  }
  SUBCASE("mean and dropout") {
    expect_grad_ok([&](Tape& t) { return ops::mean(t, ops::mul(t, a, a)); }, {a});
    expect_grad_ok(
        [&](Tape& t) {
          std::mt19937_64 rng(3);  // same mask on every evaluation
          return weighted_sum(t, ops::dropout(t, a, 0.3, rng));
        },
        {a});
  }
  SUBCASE("rope and rope_rows") {
    auto x = random_tensor({2, 3, 4}, 10);
    const std::vector<std::int64_t> pos{0, 5, 5};
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, ops::rope(t, x, pos, 100.0)); }, {x});
    auto flat = random_tensor({3, 8}, 11);
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, ops::rope_rows(t, flat, pos, 2, 100.0)); }, {flat});
  }
  SUBCASE("fused attention") {
    const std::int64_t B = 2, L = 3, H = 2, hd = 2;
    auto q = random_tensor({B * L, H * hd}, 12);
    auto k = random_tensor({B * L, H * hd}, 13);
    auto vv = random_tensor({B * L, H * hd}, 14);
    const auto mask = causal_mask(B, L, {3, 2});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, ops::attention(t, q, k, vv, H, mask)); }, {q, k, vv});
  }
}

TEST_CASE("fused attention equals an explicit per-head loop") {
  const std::int64_t B = 2, L = 4, H = 2, hd = 3, D = H * hd;
  auto q = random_tensor({B * L, D}, 1, false);
  auto k = random_tensor({B * L, D}, 2, false);
  auto v = random_tensor({B * L, D}, 3, false);
  const auto mask = causal_mask(B, L, {4, 2});
  Tape tape;
  auto out = ops::attention(tape, q, k, v, H, mask);

  std::vector<double> expect(static_cast<std::size_t>(B * L * D), 0.0);
  auto at = [&](const Tensor& t, std::int64_t row, std::int64_t col) {
    return t.data()[static_cast<std::size_t>(row * D + col)];
  };
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t i = 0; i < L; ++i) {
        std::vector<double> w(static_cast<std::size_t>(L), 0.0);
        double total = 0;
        for (std::int64_t j = 0; j < L; ++j) {
          if (!mask.at(b, i, j)) continue;
          double s = 0;
          for (std::int64_t d = 0; d < hd; ++d) s += at(q, b * L + i, h * hd + d) * at(k, b * L + j, h * hd + d);
          w[static_cast<std::size_t>(j)] = std::exp(s / std::sqrt(double(hd)));
          total += w[static_cast<std::size_t>(j)];
        }
        for (std::int64_t j = 0; j < L; ++j)
          for (std::int64_t d = 0; d < hd; ++d)
            expect[static_cast<std::size_t>((b * L + i) * D + h * hd + d)] +=
                w[static_cast<std::size_t>(j)] / total * at(v, b * L + j, h * hd + d);
      }
  CHECK(max_abs_diff(out.data(), expect) < 1e-12);
}

TEST_CASE("rope_rows equals rope on the split-head layout") {
  const std::int64_t L = 4, H = 2, hd = 4;
  auto flat = random_tensor({L, H * hd}, 1, false);
  const std::vector<std::int64_t> pos{0, 1, 1, 7};
  Tape tape;
  auto a = ops::rope_rows(tape, flat, pos, H, 10000.0);
  auto split = ops::swap_axes12(tape, ops::reshape(tape, flat, {1, L, H, hd}));  // [1, H, L, hd]
  auto b = ops::reshape(tape, ops::swap_axes12(tape, ops::rope(tape, split, pos, 10000.0)), {L, H * hd});
  CHECK(max_abs_diff(a.data(), b.data()) < 1e-15);
}
