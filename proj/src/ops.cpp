// SPDX-License-Identifier: Apache-2.0
#include "vexpert/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "vexpert/error.hpp"

namespace vexpert::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::size_t sz(std::int64_t v) { return static_cast<std::size_t>(v); }

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " differ");
  }
}

void require_finite(const char* op, std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw DomainError(std::string(op) + " produced a non-finite value");
  }
}

std::int64_t leading(const Shape& s) {
  std::int64_t n = 1;
  for (std::size_t i = 0; i + 2 < s.size(); ++i) n *= s[i];
  return n;
}

// Elementwise unary op with derivative expressed through input and output.
template <class F, class D>
Tensor unary(Tape& tape, const char* name, const Tensor& x, F f, D dfdx) {
  auto in = x.data();
  Buffer out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  Tensor y(x.shape(), std::move(out));
  if (tape.wants_grad({&x})) {
    tape.record(name, {x}, y, [x, y, dfdx](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      auto xi = x.data();
      auto yi = y.data();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * dfdx(xi[i], yi[i]);
    });
  }
  return y;
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw ShapeError("matmul: operands need rank >= 2, got " + shape_str(sa) + " and " + shape_str(sb));
  }
  const std::int64_t m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
  if (sb[sb.size() - 2] != k) {
    throw ShapeError("matmul: inner dimensions differ in " + shape_str(sa) + " x " + shape_str(sb));
  }
  const std::int64_t ba = leading(sa), bb = leading(sb);
  Shape lead_a(sa.begin(), sa.end() - 2), lead_b(sb.begin(), sb.end() - 2);
  Shape out_shape;
  if (lead_a == lead_b) {
    out_shape = lead_a;
  } else if (bb == 1) {
    out_shape = lead_a;
  } else if (ba == 1) {
    out_shape = lead_b;
  } else {
    throw ShapeError("matmul: batch dimensions of " + shape_str(sa) + " and " + shape_str(sb) + " do not broadcast");
  }
  out_shape.push_back(m);
  out_shape.push_back(n);
  const std::int64_t batch = std::max(ba, bb);
  const bool share_b = bb == 1 && ba > 1;
  const bool share_a = ba == 1 && bb > 1;

  Buffer out(sz(batch * m * n));
  if (share_b) {
    // Shared right operand: one GEMM over all stacked rows.
    MutMap(out.data(), batch * m, n).noalias() = ConstMap(a.data().data(), batch * m, k) * ConstMap(b.data().data(), k, n);
  } else {
    for (std::int64_t i = 0; i < batch; ++i) {
      const double* pa = a.data().data() + (share_a ? 0 : i * m * k);
      const double* pb = b.data().data() + (share_b ? 0 : i * k * n);
      MutMap(out.data() + i * m * n, m, n).noalias() = ConstMap(pa, m, k) * ConstMap(pb, k, n);
    }
  }
  Tensor c(std::move(out_shape), std::move(out));
  if (tape.wants_grad({&a, &b})) {
    tape.record("matmul", {a, b}, c, [a, b, m, k, n, batch, share_a, share_b](std::span<const double> g) mutable {
      if (share_b) {
        ConstMap gc(g.data(), batch * m, n);
        if (a.requires_grad()) {
          MutMap(a.grad_buffer().data(), batch * m, k).noalias() += gc * ConstMap(b.data().data(), k, n).transpose();
        }
        if (b.requires_grad()) {
          MutMap(b.grad_buffer().data(), k, n).noalias() += ConstMap(a.data().data(), batch * m, k).transpose() * gc;
        }
        return;
      }
      for (std::int64_t i = 0; i < batch; ++i) {
        ConstMap gc(g.data() + i * m * n, m, n);
        const std::int64_t oa = share_a ? 0 : i * m * k;
        const std::int64_t ob = share_b ? 0 : i * k * n;
        if (a.requires_grad()) {
          MutMap(a.grad_buffer().data() + oa, m, k).noalias() += gc * ConstMap(b.data().data() + ob, k, n).transpose();
        }
        if (b.requires_grad()) {
          MutMap(b.grad_buffer().data() + ob, k, n).noalias() += ConstMap(a.data().data() + oa, m, k).transpose() * gc;
        }
      }
    });
  }
  return c;
}

Tensor transpose_last2(Tape& tape, const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last2: rank < 2 in " + shape_str(x.shape()));
  const std::int64_t r = x.dim(-2), c = x.dim(-1), batch = leading(x.shape());
  Buffer out(sz(batch * r * c));
  for (std::int64_t i = 0; i < batch; ++i) {
    MutMap(out.data() + i * r * c, c, r) = ConstMap(x.data().data() + i * r * c, r, c).transpose();
  }
  Shape s = x.shape();
  std::swap(s[s.size() - 1], s[s.size() - 2]);
  Tensor y(std::move(s), std::move(out));
  if (tape.wants_grad({&x})) {
    tape.record("transpose_last2", {x}, y, [x, r, c, batch](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      for (std::int64_t i = 0; i < batch; ++i) {
        MutMap(gx.data() + i * r * c, r, c) += ConstMap(g.data() + i * r * c, c, r).transpose();
      }
    });
  }
  return y;
}

Tensor swap_axes12(Tape& tape, const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("swap_axes12: rank-4 tensor required, got " + shape_str(x.shape()));
  const auto s = x.shape();
  const std::int64_t A = s[0], B = s[1], C = s[2], D = s[3];
  auto src = x.data();
  Buffer out(src.size());
  for (std::int64_t a = 0; a < A; ++a)
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < C; ++c) {
        const double* from = src.data() + ((a * B + b) * C + c) * D;
        std::copy(from, from + D, out.data() + ((a * C + c) * B + b) * D);
      }
  Tensor y({A, C, B, D}, std::move(out));
  if (tape.wants_grad({&x})) {
    tape.record("swap_axes12", {x}, y, [x, A, B, C, D](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      for (std::int64_t a = 0; a < A; ++a)
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t c = 0; c < C; ++c) {
            const double* from = g.data() + ((a * C + c) * B + b) * D;
            double* to = gx.data() + ((a * B + b) * C + c) * D;
            for (std::int64_t d = 0; d < D; ++d) to[d] += from[d];
          }
    });
  }
  return y;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor y(std::move(shape), Buffer(x.data().begin(), x.data().end()));
  if (tape.wants_grad({&x})) {
    tape.record("reshape", {x}, y, [x](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    });
  }
  return y;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  auto pa = a.data(), pb = b.data();
  Buffer out(pa.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
  Tensor c(a.shape(), std::move(out));
  if (tape.wants_grad({&a, &b})) {
    tape.record("add", {a, b}, c, [a, b](std::span<const double> g) mutable {
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto gt = t->grad_buffer();
        for (std::size_t i = 0; i < gt.size(); ++i) gt[i] += g[i];
      }
    });
  }
  return c;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  auto pa = a.data(), pb = b.data();
  Buffer out(pa.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] - pb[i];
  Tensor c(a.shape(), std::move(out));
  if (tape.wants_grad({&a, &b})) {
    tape.record("sub", {a, b}, c, [a, b](std::span<const double> g) mutable {
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return c;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  auto pa = a.data(), pb = b.data();
  Buffer out(pa.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
  Tensor c(a.shape(), std::move(out));
  if (tape.wants_grad({&a, &b})) {
    tape.record("mul", {a, b}, c, [a, b](std::span<const double> g) mutable {
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        auto vb = b.data();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * vb[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        auto va = a.data();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * va[i];
      }
    });
  }
  return c;
}

Tensor scale(Tape& tape, const Tensor& x, double factor) {
  return unary(
      tape, "scale", x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  const std::int64_t d = x.dim(-1);
  if (bias.numel() != d) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match last dim of " + shape_str(x.shape()));
  }
  auto px = x.data(), pb = bias.data();
  Buffer out(px.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] + pb[i % sz(d)];
  Tensor y(x.shape(), std::move(out));
  if (tape.wants_grad({&x, &bias})) {
    tape.record("add_bias", {x, bias}, y, [x, bias, d](std::span<const double> g) mutable {
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % sz(d)] += g[i];
      }
    });
  }
  return y;
}

Tensor silu(Tape& tape, const Tensor& x) {
  return unary(
      tape, "silu", x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor rmsnorm(Tape& tape, const Tensor& x, const Tensor& gain, double eps) {
  if (!(eps > 0)) throw InvalidArgument("rmsnorm: eps must be positive");
  const std::int64_t d = x.dim(-1);
  if (gain.numel() != d) {
    throw ShapeError("rmsnorm: gain " + shape_str(gain.shape()) + " does not match last dim of " + shape_str(x.shape()));
  }
  const std::int64_t rows = x.numel() / d;
  auto px = x.data(), pg = gain.data();
  Buffer out(px.size());
  Buffer inv(sz(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = px.data() + r * d;
    double ss = 0;
    for (std::int64_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    const double s = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    inv[sz(r)] = s;
    for (std::int64_t j = 0; j < d; ++j) out[sz(r * d + j)] = xr[j] * s * pg[sz(j)];
  }
  Tensor y(x.shape(), std::move(out));
  if (tape.wants_grad({&x, &gain})) {
    tape.record("rmsnorm", {x, gain}, y, [x, gain, d, rows, inv = std::move(inv)](std::span<const double> g) mutable {
      auto px = x.data(), pg = gain.data();
      const bool want_x = x.requires_grad(), want_g = gain.requires_grad();
      std::span<double> gx, gg;
      if (want_x) gx = x.grad_buffer();
      if (want_g) gg = gain.grad_buffer();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = px.data() + r * d;
        const double* gr = g.data() + r * d;
        const double s = inv[sz(r)];
        if (want_g) {
          for (std::int64_t j = 0; j < d; ++j) gg[sz(j)] += gr[j] * xr[j] * s;
        }
        if (want_x) {
          double dot = 0;
          for (std::int64_t j = 0; j < d; ++j) dot += gr[j] * pg[sz(j)] * xr[j];
          const double c = s * s * s * dot / static_cast<double>(d);
          for (std::int64_t j = 0; j < d; ++j) gx[sz(r * d + j)] += s * pg[sz(j)] * gr[j] - c * xr[j];
        }
      }
    });
  }
  return y;
}

namespace {

// Softmax backward for one row: dx = p * (g - <g, p>).
void softmax_row_backward(const double* p, const double* g, double* gx, std::int64_t n) {
  double dot = 0;
  for (std::int64_t j = 0; j < n; ++j) dot += g[j] * p[j];
  for (std::int64_t j = 0; j < n; ++j) gx[j] += p[j] * (g[j] - dot);
}

void record_softmax_backward(Tape& tape, const char* name, const Tensor& x, Tensor& y, std::int64_t n) {
  tape.record(name, {x}, y, [x, y, n](std::span<const double> g) mutable {
    auto gx = x.grad_buffer();
    auto p = y.data();
    const std::int64_t rows = static_cast<std::int64_t>(p.size()) / n;
    for (std::int64_t r = 0; r < rows; ++r) softmax_row_backward(p.data() + r * n, g.data() + r * n, gx.data() + r * n, n);
  });
}

}  // namespace

Tensor softmax_lastdim(Tape& tape, const Tensor& x) {
  const std::int64_t n = x.dim(-1);
  const std::int64_t rows = x.numel() / n;
  auto px = x.data();
  Buffer out(px.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = px.data() + r * n;
    double* yr = out.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < n; ++j) {
      if (std::isnan(xr[j]) || xr[j] == std::numeric_limits<double>::infinity()) {
        throw DomainError("softmax_lastdim: input contains NaN or +inf");
      }
      mx = std::max(mx, xr[j]);
    }
    if (std::isinf(mx)) throw DomainError("softmax_lastdim: row " + std::to_string(r) + " is entirely masked");
    double total = 0;
    for (std::int64_t j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      total += yr[j];
    }
    for (std::int64_t j = 0; j < n; ++j) yr[j] /= total;
  }
  Tensor y(x.shape(), std::move(out));
  if (tape.wants_grad({&x})) record_softmax_backward(tape, "softmax_lastdim", x, y, n);
  return y;
}

Tensor masked_softmax(Tape& tape, const Tensor& scores, const AttentionMask& mask) {
  if (scores.rank() != 4 || scores.dim(0) != mask.batch || scores.dim(2) != mask.rows || scores.dim(3) != mask.cols) {
    throw ShapeError("masked_softmax: scores " + shape_str(scores.shape()) + " vs mask [" + std::to_string(mask.batch) +
                     ",*," + std::to_string(mask.rows) + "," + std::to_string(mask.cols) + "]");
  }
  const std::int64_t B = mask.batch, H = scores.dim(1), L = mask.rows, K = mask.cols;
  auto px = scores.data();
  Buffer out(px.size(), 0.0);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t i = 0; i < L; ++i) {
        const std::int64_t off = ((b * H + h) * L + i) * K;
        const std::uint8_t* allow = mask.allowed.data() + (b * L + i) * K;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < K; ++j)
          if (allow[j]) mx = std::max(mx, px[sz(off + j)]);
        if (std::isinf(mx)) throw DomainError("masked_softmax: query row " + std::to_string(i) + " has no visible key");
        double total = 0;
        for (std::int64_t j = 0; j < K; ++j) {
          if (!allow[j]) continue;
          const double e = std::exp(px[sz(off + j)] - mx);
          out[sz(off + j)] = e;
          total += e;
        }
        for (std::int64_t j = 0; j < K; ++j) out[sz(off + j)] /= total;
      }
  Tensor y(scores.shape(), std::move(out));
  if (tape.wants_grad({&scores})) record_softmax_backward(tape, "masked_softmax", scores, y, K);
  return y;
}

Tensor embed(Tape& tape, const Tensor& table, std::span<const std::int64_t> ids) {
  if (table.rank() != 2) throw ShapeError("embed: table must be [V, D], got " + shape_str(table.shape()));
  const std::int64_t V = table.dim(0), D = table.dim(1);
  if (ids.empty()) throw InvalidArgument("embed: empty id list");
  Buffer out(ids.size() * sz(D));
  auto pt = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= V) {
      throw InvalidArgument("embed: token id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(V));
    }
    std::copy_n(pt.data() + ids[i] * D, D, out.data() + i * sz(D));
  }
  Tensor y({static_cast<std::int64_t>(ids.size()), D}, std::move(out));
  if (tape.wants_grad({&table})) {
    tape.record("embed", {table}, y, [table, D, ids = std::vector<std::int64_t>(ids.begin(), ids.end())](
                                          std::span<const double> g) mutable {
      auto gt = table.grad_buffer();
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::int64_t j = 0; j < D; ++j) gt[sz(ids[i] * D + j)] += g[i * sz(D) + sz(j)];
    });
  }
  return y;
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const std::int64_t> targets) {
  const std::int64_t V = logits.dim(-1);
  const std::int64_t N = logits.numel() / V;
  if (static_cast<std::int64_t>(targets.size()) != N) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  auto pz = logits.data();
  Buffer probs(pz.size());
  double loss = 0;
  for (std::int64_t r = 0; r < N; ++r) {
    const std::int64_t t = targets[sz(r)];
    if (t < 0 || t >= V) throw InvalidArgument("cross_entropy: target " + std::to_string(t) + " outside vocabulary");
    const double* z = pz.data() + r * V;
    double mx = *std::max_element(z, z + V);
    double total = 0;
    for (std::int64_t j = 0; j < V; ++j) {
      probs[sz(r * V + j)] = std::exp(z[j] - mx);
      total += probs[sz(r * V + j)];
    }
    for (std::int64_t j = 0; j < V; ++j) probs[sz(r * V + j)] /= total;
    loss += std::log(total) + mx - z[t];
  }
  loss /= static_cast<double>(N);
  require_finite("cross_entropy", std::span<const double>(&loss, 1));
  Tensor y = Tensor::scalar(loss);
  if (tape.wants_grad({&logits})) {
    tape.record("cross_entropy", {logits}, y,
                [logits, V, N, probs = std::move(probs), t = std::vector<std::int64_t>(targets.begin(), targets.end())](
                    std::span<const double> g) mutable {
                  auto gz = logits.grad_buffer();
                  const double s = g[0] / static_cast<double>(N);
                  for (std::int64_t r = 0; r < N; ++r) {
                    for (std::int64_t j = 0; j < V; ++j) gz[sz(r * V + j)] += s * probs[sz(r * V + j)];
                    gz[sz(r * V + t[sz(r)])] -= s;
                  }
                });
  }
  return y;
}

Tensor concat_seq(Tape& tape, const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin()) ||
      sa.back() != sb.back()) {
    throw ShapeError("concat_seq: " + shape_str(sa) + " and " + shape_str(sb) + " differ outside the sequence dim");
  }
  const std::int64_t la = a.dim(-2), lb = b.dim(-2), d = a.dim(-1), batch = leading(sa);
  Buffer out(sz(batch * (la + lb) * d));
  for (std::int64_t i = 0; i < batch; ++i) {
    std::copy_n(a.data().data() + i * la * d, la * d, out.data() + i * (la + lb) * d);
    std::copy_n(b.data().data() + i * lb * d, lb * d, out.data() + i * (la + lb) * d + la * d);
  }
  Shape s = sa;
  s[s.size() - 2] = la + lb;
  Tensor y(std::move(s), std::move(out));
  if (tape.wants_grad({&a, &b})) {
    tape.record("concat_seq", {a, b}, y, [a, b, la, lb, d, batch](std::span<const double> g) mutable {
      for (std::int64_t i = 0; i < batch; ++i) {
        const double* src = g.data() + i * (la + lb) * d;
        if (a.requires_grad()) {
          double* ga = a.grad_buffer().data() + i * la * d;
          for (std::int64_t j = 0; j < la * d; ++j) ga[j] += src[j];
        }
        if (b.requires_grad()) {
          double* gb = b.grad_buffer().data() + i * lb * d;
          for (std::int64_t j = 0; j < lb * d; ++j) gb[j] += src[la * d + j];
        }
      }
    });
  }
  return y;
}

std::pair<Tensor, Tensor> split_seq(Tape& tape, const Tensor& x, std::int64_t at) {
  if (x.rank() < 2) throw ShapeError("split_seq: rank < 2 in " + shape_str(x.shape()));
  const std::int64_t L = x.dim(-2), d = x.dim(-1), batch = leading(x.shape());
  if (at <= 0 || at >= L) {
    throw ShapeError("split_seq: split point " + std::to_string(at) + " outside (0, " + std::to_string(L) + ") for " +
                     shape_str(x.shape()));
  }
  Buffer first(sz(batch * at * d)), second(sz(batch * (L - at) * d));
  for (std::int64_t i = 0; i < batch; ++i) {
    const double* src = x.data().data() + i * L * d;
    std::copy_n(src, at * d, first.data() + i * at * d);
    std::copy_n(src + at * d, (L - at) * d, second.data() + i * (L - at) * d);
  }
  Shape s1 = x.shape(), s2 = x.shape();
  s1[s1.size() - 2] = at;
  s2[s2.size() - 2] = L - at;
  Tensor y1(std::move(s1), std::move(first)), y2(std::move(s2), std::move(second));
  if (tape.wants_grad({&x})) {
    tape.record("split_seq.head", {x}, y1, [x, at, L, d, batch](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      for (std::int64_t i = 0; i < batch; ++i)
        for (std::int64_t j = 0; j < at * d; ++j) gx[sz(i * L * d + j)] += g[sz(i * at * d + j)];
    });
    tape.record("split_seq.tail", {x}, y2, [x, at, L, d, batch](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      for (std::int64_t i = 0; i < batch; ++i)
        for (std::int64_t j = 0; j < (L - at) * d; ++j) gx[sz(i * L * d + at * d + j)] += g[sz(i * (L - at) * d + j)];
    });
  }
  return {y1, y2};
}

Tensor gather_rows(Tape& tape, const Tensor& x, std::span<const std::int64_t> rows) {
  if (rows.empty()) throw InvalidArgument("gather_rows: empty row list");
  const std::int64_t n = x.dim(0);
  const std::int64_t w = x.numel() / n;
  Buffer out(rows.size() * sz(w));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= n) {
      throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " outside " + shape_str(x.shape()));
    }
    std::copy_n(x.data().data() + rows[i] * w, w, out.data() + i * sz(w));
  }
  Shape s = x.shape();
  s[0] = static_cast<std::int64_t>(rows.size());
  Tensor y(std::move(s), std::move(out));
  if (tape.wants_grad({&x})) {
    tape.record("gather_rows", {x}, y, [x, w, idx = std::vector<std::int64_t>(rows.begin(), rows.end())](
                                           std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::int64_t j = 0; j < w; ++j) gx[sz(idx[i] * w + j)] += g[i * sz(w) + sz(j)];
    });
  }
  return y;
}

Tensor interleave_rows(Tape& tape, std::span<const RowGroup> groups, std::int64_t n_rows) {
  if (groups.empty()) throw InvalidArgument("interleave_rows: no groups");
  Shape row_shape(groups.front().rows.shape().begin() + 1, groups.front().rows.shape().end());
  const std::int64_t w = numel(row_shape);
  Buffer out(sz(n_rows * w));
  std::vector<std::uint8_t> seen(sz(n_rows), 0);
  for (const auto& grp : groups) {
    Shape rs(grp.rows.shape().begin() + 1, grp.rows.shape().end());
    if (rs != row_shape || grp.rows.dim(0) != static_cast<std::int64_t>(grp.target.size())) {
      throw ShapeError("interleave_rows: group " + shape_str(grp.rows.shape()) + " does not match row shape " +
                       shape_str(row_shape) + " with " + std::to_string(grp.target.size()) + " targets");
    }
    for (std::size_t i = 0; i < grp.target.size(); ++i) {
      const auto t = grp.target[i];
      if (t < 0 || t >= n_rows || seen[sz(t)]) {
        throw InvalidArgument("interleave_rows: destination row " + std::to_string(t) + " invalid or repeated");
      }
      seen[sz(t)] = 1;
      std::copy_n(grp.rows.data().data() + i * sz(w), w, out.data() + t * w);
    }
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) {
    throw InvalidArgument("interleave_rows: some destination rows are not covered");
  }
  Shape s{n_rows};
  s.insert(s.end(), row_shape.begin(), row_shape.end());
  Tensor y(std::move(s), std::move(out));
  bool any = false;
  for (const auto& grp : groups) any = any || tape.wants_grad({&grp.rows});
  if (any) {
    std::vector<Tensor> inputs;
    for (const auto& grp : groups) inputs.push_back(grp.rows);
    tape.record("interleave_rows", inputs, y,
                [grps = std::vector<RowGroup>(groups.begin(), groups.end()), w](std::span<const double> g) mutable {
                  for (auto& grp : grps) {
                    if (!grp.rows.requires_grad()) continue;
                    auto gr = grp.rows.grad_buffer();
                    for (std::size_t i = 0; i < grp.target.size(); ++i)
                      for (std::int64_t j = 0; j < w; ++j) gr[i * sz(w) + sz(j)] += g[sz(grp.target[i] * w + j)];
                  }
                });
  }
  return y;
}

namespace {

// Rotates pairs in place by +angle (sign = 1) or -angle (sign = -1).
void rotate_pairs(const double* in, double* out, const double* cos_t, const double* sin_t, std::int64_t half,
                  double sign, bool accumulate) {
  for (std::int64_t i = 0; i < half; ++i) {
    const double c = cos_t[i], s = sign * sin_t[i];
    const double x0 = in[2 * i], x1 = in[2 * i + 1];
    const double y0 = x0 * c - x1 * s;
    const double y1 = x0 * s + x1 * c;
    if (accumulate) {
      out[2 * i] += y0;
      out[2 * i + 1] += y1;
    } else {
      out[2 * i] = y0;
      out[2 * i + 1] = y1;
    }
  }
}

}  // namespace

Tensor rope(Tape& tape, const Tensor& x, std::span<const std::int64_t> positions, double theta) {
  if (x.rank() < 2) throw ShapeError("rope: rank < 2 in " + shape_str(x.shape()));
  const std::int64_t L = x.dim(-2), hd = x.dim(-1);
  if (hd % 2 != 0) throw ShapeError("rope: head dimension must be even, got " + shape_str(x.shape()));
  const std::int64_t groups = x.numel() / (L * hd);
  std::int64_t per_batch = 0;  // groups sharing one batch entry of positions
  if (static_cast<std::int64_t>(positions.size()) == L) {
    per_batch = groups;
  } else if (x.rank() == 4 && static_cast<std::int64_t>(positions.size()) == x.dim(0) * L) {
    per_batch = x.dim(1);
  } else {
    throw ShapeError("rope: " + std::to_string(positions.size()) + " positions for " + shape_str(x.shape()));
  }
  const std::int64_t half = hd / 2;
  const std::int64_t n_pos = static_cast<std::int64_t>(positions.size());
  Buffer cos_t(sz(n_pos * half)), sin_t(sz(n_pos * half));
  for (std::int64_t p = 0; p < n_pos; ++p)
    for (std::int64_t i = 0; i < half; ++i) {
      const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      const double ang = static_cast<double>(positions[sz(p)]) * freq;
      cos_t[sz(p * half + i)] = std::cos(ang);
      sin_t[sz(p * half + i)] = std::sin(ang);
    }
  auto px = x.data();
  Buffer out(px.size());
  auto table_row = [=](std::int64_t g, std::int64_t l) {
    const std::int64_t b = n_pos == L ? 0 : g / per_batch;
    return (b * L + l) * half;
  };
  for (std::int64_t g = 0; g < groups; ++g)
    for (std::int64_t l = 0; l < L; ++l) {
      const std::int64_t off = (g * L + l) * hd;
      const auto t = table_row(g, l);
      rotate_pairs(px.data() + off, out.data() + off, cos_t.data() + t, sin_t.data() + t, half, 1.0, false);
    }
  Tensor y(x.shape(), std::move(out));
  if (tape.wants_grad({&x})) {
    tape.record("rope", {x}, y,
                [x, groups, L, hd, half, table_row, cos_t = std::move(cos_t), sin_t = std::move(sin_t)](
                    std::span<const double> g) mutable {
                  auto gx = x.grad_buffer();
                  for (std::int64_t gi = 0; gi < groups; ++gi)
                    for (std::int64_t l = 0; l < L; ++l) {
                      const std::int64_t off = (gi * L + l) * hd;
                      const auto t = table_row(gi, l);
                      rotate_pairs(g.data() + off, gx.data() + off, cos_t.data() + t, sin_t.data() + t, half, -1.0,
                                   true);
                    }
                });
  }
  return y;
}

Tensor rope_rows(Tape& tape, const Tensor& x, std::span<const std::int64_t> positions, std::int64_t heads,
                 double theta) {
  if (x.rank() != 2) throw ShapeError("rope_rows: expects [rows, heads * head_dim], got " + shape_str(x.shape()));
  const std::int64_t N = x.dim(0), D = x.dim(1);
  if (heads <= 0 || D % heads != 0 || (D / heads) % 2 != 0) {
    throw ShapeError("rope_rows: width " + std::to_string(D) + " does not split into " + std::to_string(heads) +
                     " even-sized heads");
  }
  if (static_cast<std::int64_t>(positions.size()) != N) {
    throw ShapeError("rope_rows: " + std::to_string(positions.size()) + " positions for " + shape_str(x.shape()));
  }
  const std::int64_t hd = D / heads, half = hd / 2;
  Buffer freq(sz(half));
  for (std::int64_t i = 0; i < half; ++i) {
    freq[sz(i)] = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
  }
  Buffer cos_t(sz(N * half)), sin_t(sz(N * half));
  for (std::int64_t r = 0; r < N; ++r)
    for (std::int64_t i = 0; i < half; ++i) {
      const double ang = static_cast<double>(positions[sz(r)]) * freq[sz(i)];
      cos_t[sz(r * half + i)] = std::cos(ang);
      sin_t[sz(r * half + i)] = std::sin(ang);
    }
  auto px = x.data();
  Buffer out(px.size());
  for (std::int64_t r = 0; r < N; ++r)
    for (std::int64_t h = 0; h < heads; ++h) {
      const std::int64_t off = r * D + h * hd;
      rotate_pairs(px.data() + off, out.data() + off, cos_t.data() + r * half, sin_t.data() + r * half, half, 1.0,
                   false);
    }
  Tensor y(x.shape(), std::move(out));
  if (tape.wants_grad({&x})) {
    tape.record("rope_rows", {x}, y,
                [x, N, D, heads, hd, half, cos_t = std::move(cos_t), sin_t = std::move(sin_t)](
                    std::span<const double> g) mutable {
                  auto gx = x.grad_buffer();
                  for (std::int64_t r = 0; r < N; ++r)
                    for (std::int64_t h = 0; h < heads; ++h) {
                      const std::int64_t off = r * D + h * hd;
                      rotate_pairs(g.data() + off, gx.data() + off, cos_t.data() + r * half,
                                   sin_t.data() + r * half, half, -1.0, true);
                    }
                });
  }
  return y;
}

namespace {

using Stride = Eigen::OuterStride<>;
using StridedConst = Eigen::Map<const RowMat, 0, Stride>;
using StridedMut = Eigen::Map<RowMat, 0, Stride>;

// Masked softmax of one [L, K] score block in place; masked entries become 0.
void masked_softmax_block(double* s, const std::uint8_t* allow, std::int64_t L, std::int64_t K) {
  for (std::int64_t i = 0; i < L; ++i) {
    double* row = s + i * K;
    const std::uint8_t* a = allow + i * K;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < K; ++j)
      if (a[j]) mx = std::max(mx, row[j]);
    if (std::isinf(mx)) throw DomainError("attention: query row " + std::to_string(i) + " has no visible key");
    Eigen::Map<Eigen::ArrayXd> r(row, K);
    r = (r - mx).exp();
    double total = 0;
    for (std::int64_t j = 0; j < K; ++j) {
      if (!a[j]) row[j] = 0.0;
      total += row[j];
    }
    r *= 1.0 / total;
  }
}

}  // namespace

Tensor attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v, std::int64_t heads,
                 const AttentionMask& mask) {
  if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("attention: q, k, v must share one [rows, width] shape, got " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  const std::int64_t B = mask.batch, L = mask.rows, D = q.dim(1);
  if (mask.rows != mask.cols || q.dim(0) != B * L) {
    throw ShapeError("attention: " + shape_str(q.shape()) + " rows do not match a mask of " + std::to_string(B) +
                     " sequences of " + std::to_string(L));
  }
  if (heads <= 0 || D % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(D) + " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::int64_t hd = D / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  // probs[b, h] is the [L, L] attention matrix, kept for the backward pass.
  Buffer probs(sz(B * heads * L * L));
  Buffer out(sz(B * L * D));
  const double *pq = q.data().data(), *pk = k.data().data(), *pv = v.data().data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t h = 0; h < heads; ++h) {
      const std::int64_t off = b * L * D + h * hd;
      double* P = probs.data() + (b * heads + h) * L * L;
      MutMap Pm(P, L, L);
      Pm.noalias() = scale * (StridedConst(pq + off, L, hd, Stride(D)) * StridedConst(pk + off, L, hd, Stride(D)).transpose());
      masked_softmax_block(P, mask.allowed.data() + b * L * L, L, L);
      StridedMut(out.data() + off, L, hd, Stride(D)).noalias() = Pm * StridedConst(pv + off, L, hd, Stride(D));
    }
  Tensor y(q.shape(), std::move(out));
  if (tape.wants_grad({&q, &k, &v})) {
    tape.record("attention", {q, k, v}, y,
                [q, k, v, B, L, D, heads, hd, scale, probs = std::move(probs)](std::span<const double> g) mutable {
                  const double *pq = q.data().data(), *pk = k.data().data(), *pv = v.data().data();
                  double* gq = q.requires_grad() ? q.grad_buffer().data() : nullptr;
                  double* gk = k.requires_grad() ? k.grad_buffer().data() : nullptr;
                  double* gv = v.requires_grad() ? v.grad_buffer().data() : nullptr;
                  RowMat dP(L, L);
                  for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t h = 0; h < heads; ++h) {
                      const std::int64_t off = b * L * D + h * hd;
                      ConstMap P(probs.data() + (b * heads + h) * L * L, L, L);
                      StridedConst dO(g.data() + off, L, hd, Stride(D));
                      if (gv) StridedMut(gv + off, L, hd, Stride(D)).noalias() += P.transpose() * dO;
                      if (!gq && !gk) continue;
                      dP.noalias() = dO * StridedConst(pv + off, L, hd, Stride(D)).transpose();
                      // dS = P * (dP - rowsum(dP * P)), folded with the score scale.
                      for (std::int64_t i = 0; i < L; ++i) {
                        const double dot = P.row(i).dot(dP.row(i));
                        dP.row(i) = scale * (P.row(i).array() * (dP.row(i).array() - dot)).matrix();
                      }
                      if (gq) {
                        StridedMut(gq + off, L, hd, Stride(D)).noalias() += dP * StridedConst(pk + off, L, hd, Stride(D));
                      }
                      if (gk) {
                        StridedMut(gk + off, L, hd, Stride(D)).noalias() +=
                            dP.transpose() * StridedConst(pq + off, L, hd, Stride(D));
                      }
                    }
                });
  }
  return y;
}

Tensor silu_mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("silu_mul", a, b);
  const auto n = static_cast<Eigen::Index>(a.numel());
  Eigen::Map<const Eigen::ArrayXd> pa(a.data().data(), n), pb(b.data().data(), n);
  Eigen::ArrayXd sig = 1.0 / (1.0 + (-pa).exp());
  Buffer out(sz(n));
  Eigen::Map<Eigen::ArrayXd>(out.data(), n) = pa * sig * pb;
  Tensor c(a.shape(), std::move(out));
  if (tape.wants_grad({&a, &b})) {
    tape.record("silu_mul", {a, b}, c, [a, b, n, sig = std::move(sig)](std::span<const double> g) mutable {
      Eigen::Map<const Eigen::ArrayXd> pa(a.data().data(), n), pb(b.data().data(), n), gc(g.data(), n);
      if (a.requires_grad()) {
        Eigen::Map<Eigen::ArrayXd>(a.grad_buffer().data(), n) += gc * pb * sig * (1.0 + pa * (1.0 - sig));
      }
      if (b.requires_grad()) Eigen::Map<Eigen::ArrayXd>(b.grad_buffer().data(), n) += gc * pa * sig;
    });
  }
  return c;
}

Tensor sum(Tape& tape, const Tensor& x) {
  double total = 0;
  for (double v : x.data()) total += v;
  Tensor y = Tensor::scalar(total);
  if (tape.wants_grad({&x})) {
    tape.record("sum", {x}, y, [x](std::span<const double> g) mutable {
      for (double& v : x.grad_buffer()) v += g[0];
    });
  }
  return y;
}

Tensor mean(Tape& tape, const Tensor& x) { return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.numel())); }

Tensor dropout(Tape& tape, const Tensor& x, double p, std::mt19937_64& rng) {
  if (p < 0 || p >= 1) throw InvalidArgument("dropout: probability must be in [0, 1)");
  if (p == 0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  Buffer m(sz(x.numel()));
  for (double& v : m) v = keep(rng) ? s : 0.0;
  auto px = x.data();
  Buffer out(px.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] * m[i];
  Tensor y(x.shape(), std::move(out));
  if (tape.wants_grad({&x})) {
    tape.record("dropout", {x}, y, [x, m = std::move(m)](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * m[i];
    });
  }
  return y;
}

}  // namespace vexpert::ops
