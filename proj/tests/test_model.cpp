// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "test_util.hpp"
#include "vexpert/error.hpp"
#include "vexpert/gradcheck.hpp"
#include "vexpert/model.hpp"

using namespace vexpert;
using testing::max_abs_diff;
using testing::random_tensor;
using testing::weighted_sum;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ff = 24;
  c.vocab_size = 64;
  c.max_seq = 40;
  c.patch.image_h = 8;
  c.patch.image_w = 8;
  c.patch.patch_size = 4;
  c.patch.encoder_dim = 8;
  c.patch.encoder_heads = 2;
  c.seed = 5;
  return c;
}

void set(Tensor t, std::vector<double> values) {
  auto d = t.mutable_data();
  REQUIRE(d.size() == values.size());
  std::copy(values.begin(), values.end(), d.begin());
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Row-vector product x[1, n] * W[n, m] for row-major W.
std::vector<double> vecmat(const std::vector<double>& x, const Tensor& w) {
  const auto n = static_cast<std::size_t>(w.dim(0)), m = static_cast<std::size_t>(w.dim(1));
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j] += x[i] * w.data()[i * m + j];
  return out;
}

double silu(double v) { return v / (1.0 + std::exp(-v)); }

std::vector<double> swiglu_oracle(const std::vector<double>& x, const FfnBranch& w) {
  auto g = vecmat(x, w.gate);
  auto u = vecmat(x, w.up);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = silu(g[i]) * u[i];
  return vecmat(g, w.down);
}

MixedSequence random_sequence(const ModelConfig& c, std::uint64_t seed, std::size_t pre, std::size_t post,
                              bool image) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int64_t> id(0, c.vocab_size - 1);
  MixedSequence s;
  for (std::size_t i = 0; i < pre; ++i) s.pre_text.push_back(id(rng));
  for (std::size_t i = 0; i < post; ++i) s.post_text.push_back(id(rng));
  if (image) {
    std::uniform_real_distribution<double> px(0.0, 1.0);
    std::vector<double> v(static_cast<std::size_t>(c.patch.image_h * c.patch.image_w * c.patch.channels));
    for (double& x : v) x = px(rng);
    s.image = Tensor({c.patch.image_h, c.patch.image_w, c.patch.channels}, std::move(v));
  }
  return s;
}

Tensor logits_of(const Model& m, std::span<const MixedSequence> batch, bool use_expert = true) {
  Tape tape;
  tape.set_recording(false);
  ForwardOptions o;
  o.use_expert = use_expert;
  return forward(tape, m, batch, o);
}

}  // namespace

TEST_CASE("build_model parameter structure") {
  const auto c = small_config();
  const std::int64_t D = c.d_model, F = c.d_ff, V = c.vocab_size, L = c.n_layers;
  const auto& pc = c.patch;
  const std::int64_t E = pc.encoder_dim, P = pc.patch_values(), A = 4 * D, EF = 2 * E;
  const std::int64_t vision = P * E + E + pc.patches() * E +
                              pc.encoder_layers * (2 * E + 4 * E * E + 3 * E * EF) + 2 * E * A + A * D;
  const std::int64_t decoder = V * D + L * (4 * D * D + 3 * D * F + 2 * D) + D;

  ModelConfig none = c;
  none.ve_placement = ExpertPlacement::none;
  const auto pn = count_params(none);
  CHECK(pn.total == decoder + vision);
  CHECK(pn.trainable == vision);  // decoder body contributes nothing trainable
  Model mn = build_model(none);
  std::int64_t n = 0;
  for (const auto& p : mn.parameters()) n += p.tensor.numel();
  CHECK(n == pn.total);

  const auto pe = count_params(c);
  CHECK(pe.expert_qkv_ffn == pe.frozen_qkv_ffn);
  CHECK(pe.frozen_qkv_ffn == L * (3 * D * D + 3 * D * F));
  CHECK(pe.trainable == vision + pe.expert_qkv_ffn);

  Model m = build_model(c);
  for (const auto& w : m.layers) {
    REQUIRE(w.attn_image);
    CHECK(values(w.attn_image->wq) == values(w.attn_text.wq));
    CHECK(values(w.ffn_image->down) == values(w.ffn_text.down));
    CHECK(w.attn_image->wq.requires_grad());
    CHECK_FALSE(w.attn_text.wq.requires_grad());
    CHECK_FALSE(w.wo.requires_grad());
    CHECK_FALSE(w.attn_norm.requires_grad());
  }
  CHECK(m.encoder.proj.requires_grad());
  CHECK(m.adapter.gate.requires_grad());
}

TEST_CASE("build_model rejects bad placements and base weights") {
  auto c = small_config();
  c.ve_placement = ExpertPlacement::every_kth;
  c.ve_k = 0;
  CHECK_THROWS_AS(build_model(c), ConfigError);
  c.ve_k = c.n_layers + 1;
  CHECK_THROWS_AS(build_model(c), ConfigError);

  auto ok = small_config();
  TensorMap base;
  for (const auto& p : build_model(ok).parameters()) base.emplace(p.name, p.tensor);
  base["layers.0.text.wq"] = Tensor::zeros({3, 3});
  CHECK_THROWS_AS(build_model(ok, &base), ShapeError);
}

TEST_CASE("base weights are copied and from_llm experts follow them") {
  const auto c = small_config();
  Model donor = build_model([&] {
    auto d = c;
    d.seed = 99;
    return d;
  }());
  TensorMap base;
  for (const auto& p : donor.parameters()) base.emplace(p.name, p.tensor);
  Model m = build_model(c, &base);
  CHECK(values(m.layers[1].attn_text.wk) == values(donor.layers[1].attn_text.wk));
  CHECK(values(m.layers[1].attn_image->wk) == values(donor.layers[1].attn_text.wk));
  CHECK(values(m.embedding) == values(donor.embedding));
}

TEST_CASE("expert placements") {
  auto c = small_config();
  c.n_layers = 5;
  c.ve_placement = ExpertPlacement::every_kth;
  c.ve_k = 2;
  Model m = build_model(c);
  for (int l = 0; l < 5; ++l) {
    CHECK(m.layers[static_cast<std::size_t>(l)].attn_image.has_value() == (l % 2 == 0));
    CHECK(m.layers[static_cast<std::size_t>(l)].ffn_image.has_value() == (l % 2 == 0));
  }
  c.ve_placement = ExpertPlacement::ffn_only;
  m = build_model(c);
  for (const auto& w : m.layers) {
    CHECK_FALSE(w.attn_image.has_value());
    CHECK(w.ffn_image.has_value());
  }
  c.ve_init = ExpertInit::random;
  m = build_model(c);
  CHECK(values(m.layers[0].ffn_image->gate) != values(m.layers[0].ffn_text.gate));
}

TEST_CASE("position ids share one id across the image block") {
  CHECK(position_ids({1, 3, 6}) == std::vector<std::int64_t>{0, 1, 1, 1, 2, 3});
  CHECK(position_ids({0, 0, 4}) == std::vector<std::int64_t>{0, 1, 2, 3});
  CHECK(position_ids({2, 4, 7}) == std::vector<std::int64_t>{0, 1, 2, 2, 2, 2, 3});
}

TEST_CASE("rope_apply") {
  Tape tape;
  auto x = random_tensor({2, 5, 4}, 1, false);
  const std::vector<std::int64_t> zeros(5, 0);
  CHECK(values(rope_apply(tape, x, zeros, 10000.0)) == values(x));

  const std::vector<std::int64_t> pos{0, 3, 9, 100, 12345};
  auto y = rope_apply(tape, x, pos, 10000.0);
  for (std::size_t i = 0; i < values(x).size(); i += 2) {
    const double a = std::hypot(x.data()[i], x.data()[i + 1]);
    const double b = std::hypot(y.data()[i], y.data()[i + 1]);
    CHECK(std::abs(a - b) < 1e-12);
  }

  // q.k after rotation depends only on the position difference.
  auto q = random_tensor({1, 1, 8}, 2, false);
  auto k = random_tensor({1, 1, 8}, 3, false);
  auto dot_at = [&](std::int64_t p1, std::int64_t p2) {
    const std::vector<std::int64_t> a{p1}, b{p2};
    auto rq = rope_apply(tape, q, a, 10000.0), rk = rope_apply(tape, k, b, 10000.0);
    double s = 0;
    for (std::size_t i = 0; i < 8; ++i) s += rq.data()[i] * rk.data()[i];
    return s;
  };
  CHECK(std::abs(dot_at(5, 3) - dot_at(7, 5)) < 1e-9);

  CHECK_THROWS_AS(rope_apply(tape, random_tensor({1, 2, 3}, 4, false), std::vector<std::int64_t>{0, 1}, 10000.0),
                  ShapeError);
}

TEST_CASE("patch encoder") {
  auto c = small_config();
  c.patch.image_h = c.patch.image_w = 16;
  c.patch.patch_size = 8;
  Model m = build_model(c);
  auto img = random_tensor({16, 16, 3}, 3, false);
  Tape tape;
  CHECK(patch_encode(tape, m, std::vector<Tensor>{img}).shape() == Shape{4, c.patch.encoder_dim});
  CHECK_THROWS_AS(patch_encode(tape, m, std::vector<Tensor>{random_tensor({8, 16, 3}, 4, false)}), ShapeError);

  // encoder_layers = 0: per-patch linear embedding plus bias and position.
  c.patch.encoder_layers = 0;
  Model lin = build_model(c);
  auto out = patch_encode(tape, lin, std::vector<Tensor>{img});
  const int ps = 8, C = 3, E = c.patch.encoder_dim;
  for (int p = 0; p < 4; ++p) {
    const int py = p / 2, px = p % 2;
    for (int e = 0; e < E; ++e) {
      double s = lin.encoder.bias.data()[static_cast<std::size_t>(e)] +
                 lin.encoder.pos.data()[static_cast<std::size_t>(p * E + e)];
      for (int y = 0; y < ps; ++y)
        for (int x = 0; x < ps; ++x)
          for (int ch = 0; ch < C; ++ch) {
            const double pix = img.data()[static_cast<std::size_t>(((py * ps + y) * 16 + px * ps + x) * C + ch)];
            s += pix * lin.encoder.proj.data()[static_cast<std::size_t>(((y * ps + x) * C + ch) * E + e)];
          }
      CHECK(std::abs(out.data()[static_cast<std::size_t>(p * E + e)] - s) < 1e-12);
    }
  }
}

TEST_CASE("patch encoder gradients") {
  auto c = small_config();
  c.patch.image_h = c.patch.image_w = 4;
  c.patch.patch_size = 2;
  c.patch.encoder_dim = 4;
  Model m = build_model(c);
  auto img = random_tensor({4, 4, 3}, 3, false);
  std::vector<Tensor> enc;
  for (const auto& p : m.parameters())
    if (p.name.starts_with("encoder.")) enc.push_back(p.tensor);
  GradCheckOptions o;
  o.step = 1e-5;
  o.tol = 1e-4;
  auto r = grad_check([&](Tape& t) { return weighted_sum(t, patch_encode(t, m, std::vector<Tensor>{img})); }, enc, o);
  INFO(r.worst);
  CHECK(r.passed);
}

TEST_CASE("SwiGLU adapter") {
  // Hand-set 2 -> 2 -> 2 weights against the direct formula.
  FfnBranch w{Tensor({2, 2}, {0.5, -1.0, 2.0, 0.25}), Tensor({2, 2}, {1.0, 0.0, -0.5, 3.0}),
              Tensor({2, 2}, {1.5, 0.5, -2.0, 1.0})};
  const std::vector<double> x{0.3, -0.7};
  Tape tape;
  auto y = swiglu(tape, w, Tensor({1, 2}, x));
  const auto want = swiglu_oracle(x, w);
  CHECK(max_abs_diff(y.data(), want) < 1e-12);

  auto c = small_config();
  Model m = build_model(c);
  auto feats = random_tensor({5, c.patch.encoder_dim}, 1, false);
  auto out = mlp_adapter(tape, m, feats);
  CHECK(out.shape() == Shape{5, c.d_model});
  // Rows are independent: a permutation of inputs permutes outputs.
  const std::vector<std::int64_t> perm{3, 0, 4, 1, 2};
  auto permuted = mlp_adapter(tape, m, ops::gather_rows(tape, feats, perm));
  auto expect = ops::gather_rows(tape, out, perm);
  CHECK(values(permuted) == values(expect));
  for (auto* t : {&m.adapter.gate, &m.adapter.up, &m.adapter.down}) set(*t, std::vector<double>(t->numel(), 0.0));
  for (double v : mlp_adapter(tape, m, feats).data()) CHECK(v == 0.0);
}

TEST_CASE("ve_attention brute-force oracle: 1 image row + 1 text row, H=1, D=2") {
  ModelConfig c;
  c.d_model = 2;
  c.n_heads = 1;
  c.n_layers = 1;
  c.d_ff = 2;
  c.vocab_size = 8;
  c.max_seq = 4;
  Model m = build_model(c);
  auto& w = m.layers[0];
  set(w.attn_image->wq, {0.9, -0.3, 0.2, 1.1});
  set(w.attn_image->wk, {-0.4, 0.8, 1.3, 0.1});
  set(w.attn_image->wv, {0.7, 0.6, -1.2, 0.5});
  set(w.attn_text.wq, {1.0, 0.4, -0.6, 0.3});
  set(w.attn_text.wk, {0.2, -1.1, 0.9, 0.7});
  set(w.attn_text.wv, {-0.3, 1.4, 0.8, -0.9});
  set(w.wo, {1.2, -0.2, 0.5, 0.9});
  const std::vector<double> x_img{0.8, -1.5}, x_txt{-0.6, 0.4};

  const std::vector<SequenceLayout> seqs{{0, 1, 2}};
  const BatchLayout layout = make_batch_layout(seqs, ImageMaskMode::causal);
  Tape tape;
  std::vector<double> xs = x_img;
  xs.insert(xs.end(), x_txt.begin(), x_txt.end());
  auto out = ve_attention(tape, Tensor({2, 2}, xs), layout, w, c);

  // Independent evaluation: image row at position 0, text row at position 1,
  // rotation angle = position (single frequency for head_dim 2).
  auto rot = [](std::vector<double> v, double angle) {
    return std::vector<double>{v[0] * std::cos(angle) - v[1] * std::sin(angle),
                               v[0] * std::sin(angle) + v[1] * std::cos(angle)};
  };
  auto q1 = rot(vecmat(x_txt, w.attn_text.wq), 1.0);
  auto k0 = rot(vecmat(x_img, w.attn_image->wk), 0.0);
  auto k1 = rot(vecmat(x_txt, w.attn_text.wk), 1.0);
  auto v0 = vecmat(x_img, w.attn_image->wv);
  auto v1 = vecmat(x_txt, w.attn_text.wv);
  const double s0 = (q1[0] * k0[0] + q1[1] * k0[1]) / std::sqrt(2.0);
  const double s1 = (q1[0] * k1[0] + q1[1] * k1[1]) / std::sqrt(2.0);
  const double p0 = 1.0 / (1.0 + std::exp(s1 - s0)), p1 = 1.0 - p0;
  const auto row0 = vecmat(v0, w.wo);  // causal: the image row sees only itself
  const auto row1 = vecmat({p0 * v0[0] + p1 * v1[0], p0 * v0[1] + p1 * v1[1]}, w.wo);
  const std::vector<double> want{row0[0], row0[1], row1[0], row1[1]};
  CHECK(max_abs_diff(out.data(), want) < 1e-12);
}

TEST_CASE("ve_attention and ve_ffn reduce to the frozen branch") {
  const auto c = small_config();
  Model m = build_model(c);
  const auto& w = m.layers[0];
  Tape tape;

  // No image rows: expert unused, bit-exact with the frozen-only path.
  const std::vector<SequenceLayout> text_only{{0, 0, 5}, {0, 0, 3}};
  const auto lt = make_batch_layout(text_only, c.image_mask_mode);
  auto x = random_tensor({10, c.d_model}, 1, false);
  CHECK(values(ve_attention(tape, x, lt, w, c, true)) == values(ve_attention(tape, x, lt, w, c, false)));
  CHECK(values(ve_ffn(tape, x, lt, w, true)) == values(swiglu(tape, w.ffn_text, x)));

  // from_llm: identical branches give the single-branch result.
  const std::vector<SequenceLayout> mixed{{1, 4, 7}, {2, 4, 7}};
  const auto lm = make_batch_layout(mixed, c.image_mask_mode);
  auto y = random_tensor({14, c.d_model}, 2, false);
  CHECK(max_abs_diff(ve_attention(tape, y, lm, w, c, true).data(), ve_attention(tape, y, lm, w, c, false).data()) <
        1e-12);
  CHECK(max_abs_diff(ve_ffn(tape, y, lm, w, true).data(), swiglu(tape, w.ffn_text, y).data()) < 1e-12);
  CHECK_THROWS_AS(ve_ffn(tape, x, lm, w), ShapeError);
}

TEST_CASE("ve_ffn routes rows by branch (direct formula)") {
  ModelConfig c;
  c.d_model = 2;
  c.n_heads = 1;
  c.n_layers = 1;
  c.d_ff = 2;
  c.vocab_size = 8;
  c.ve_init = ExpertInit::random;
  Model m = build_model(c);
  auto& w = m.layers[0];
  set(w.ffn_image->gate, {0.3, -0.8, 1.1, 0.4});
  set(w.ffn_image->up, {-0.5, 0.9, 0.2, 1.3});
  set(w.ffn_image->down, {0.6, -1.0, 0.7, 0.25});
  set(w.ffn_text.gate, {1.2, 0.1, -0.4, 0.9});
  set(w.ffn_text.up, {0.5, 0.5, -1.5, 0.3});
  set(w.ffn_text.down, {-0.2, 0.8, 1.4, -0.6});
  const std::vector<double> xt{0.4, -0.9}, xi{-1.1, 0.6};
  // Sequence: text row then image row.
  const std::vector<SequenceLayout> seqs{{1, 1, 2}};
  const auto layout = make_batch_layout(seqs, ImageMaskMode::causal);
  Tape tape;
  auto out = ve_ffn(tape, Tensor({2, 2}, {xt[0], xt[1], xi[0], xi[1]}), layout, w);
  auto t = swiglu_oracle(xt, w.ffn_text), i = swiglu_oracle(xi, *w.ffn_image);
  CHECK(max_abs_diff(out.data(), std::vector<double>{t[0], t[1], i[0], i[1]}) < 1e-12);
}

TEST_CASE("frozen-LM invariance, init equivalence and determinism") {
  const auto c = small_config();
  ModelConfig base_cfg = c;
  base_cfg.ve_placement = ExpertPlacement::none;
  Model base = build_model(base_cfg);
  for (auto placement : {ExpertPlacement::every_layer, ExpertPlacement::every_kth, ExpertPlacement::ffn_only}) {
    for (auto init : {ExpertInit::from_llm, ExpertInit::random}) {
      ModelConfig vc = c;
      vc.ve_placement = placement;
      vc.ve_k = 2;
      vc.ve_init = init;
      Model ve = build_model(vc);
      std::vector<MixedSequence> batch{random_sequence(c, 1, 6, 0, false), random_sequence(c, 2, 3, 0, false)};
      CHECK(values(logits_of(ve, batch)) == values(logits_of(base, batch)));
    }
  }

  Model ve = build_model(c);
  std::vector<MixedSequence> mixed{random_sequence(c, 3, 1, 5, true), random_sequence(c, 4, 2, 2, true),
                                   random_sequence(c, 5, 4, 0, false)};
  CHECK(max_abs_diff(logits_of(ve, mixed).data(), logits_of(ve, mixed, false).data()) < 1e-10);

  ModelConfig toy = c;
  toy.d_model = 32;
  toy.n_heads = 4;
  CHECK(values(logits_of(build_model(toy), mixed)) == values(logits_of(build_model(toy), mixed)));
}

TEST_CASE("forward input errors") {
  const auto c = small_config();
  Model m = build_model(c);
  std::vector<MixedSequence> too_long{random_sequence(c, 1, static_cast<std::size_t>(c.max_seq) + 1, 0, false)};
  CHECK_THROWS_AS(logits_of(m, too_long), InvalidArgument);
  auto bad = random_sequence(c, 2, 3, 0, false);
  bad.pre_text[1] = c.vocab_size;
  std::vector<MixedSequence> b{bad};
  CHECK_THROWS_AS(logits_of(m, b), InvalidArgument);
}

TEST_CASE("gradient confinement") {
  const auto c = small_config();
  Model m = build_model(c);
  std::vector<MixedSequence> batch{random_sequence(c, 1, 1, 4, true), random_sequence(c, 2, 3, 0, false)};
  Tape tape;
  auto logits = forward(tape, m, batch);
  tape.backward(weighted_sum(tape, logits));
  for (const auto& p : m.parameters()) {
    INFO(p.name);
    CHECK(p.tensor.has_grad() == p.tensor.requires_grad());
  }
}

TEST_CASE("causal structure and the full-within-image mask") {
  auto c = small_config();
  const std::vector<SequenceLayout> seqs{{1, 4, 8}};
  Model m = build_model(c);
  const auto& w = m.layers[0];
  auto x = random_tensor({8, c.d_model}, 1, false);
  auto run = [&](ImageMaskMode mode, std::int64_t perturb_row) {
    auto y = x.detach();
    y.mutable_data()[static_cast<std::size_t>(perturb_row * c.d_model)] += 0.5;
    Tape tape;
    return std::pair{values(ve_attention(tape, x, make_batch_layout(seqs, mode), w, c)),
                     values(ve_attention(tape, y, make_batch_layout(seqs, mode), w, c))};
  };
  auto row_equal = [&](const std::vector<double>& a, const std::vector<double>& b, std::int64_t r) {
    const auto D = static_cast<std::size_t>(c.d_model), s = static_cast<std::size_t>(r) * D;
    return std::equal(a.begin() + s, a.begin() + s + D, b.begin() + s);
  };
  // Causal: perturbing row 3 (image) leaves rows 0..2 bit-identical.
  auto [a, b] = run(ImageMaskMode::causal, 3);
  for (int r = 0; r < 3; ++r) CHECK(row_equal(a, b, r));
  CHECK_FALSE(row_equal(a, b, 3));
  // Full mask: earlier image rows now see row 3, text row 0 still does not.
  auto [fa, fb] = run(ImageMaskMode::full_within_image, 3);
  CHECK(row_equal(fa, fb, 0));
  CHECK_FALSE(row_equal(fa, fb, 1));
  // A text row after the image never leaks back into image rows.
  auto [ta, tb] = run(ImageMaskMode::full_within_image, 6);
  for (int r = 0; r < 6; ++r) CHECK(row_equal(ta, tb, r));
}

TEST_CASE("shared image position: later text sees the image block as a set") {
  const auto c = small_config();
  Model m = build_model(c);
  const auto& w = m.layers[0];
  const std::vector<SequenceLayout> seqs{{1, 4, 7}};
  const auto layout = make_batch_layout(seqs, ImageMaskMode::causal);
  auto x = random_tensor({7, c.d_model}, 1, false);
  // Swap image rows 1 and 4.
  auto y = ops::gather_rows(*std::make_unique<Tape>(), x, std::vector<std::int64_t>{0, 4, 2, 3, 1, 5, 6});
  Tape tape;
  auto ox = values(ve_attention(tape, x, layout, w, c));
  auto oy = values(ve_attention(tape, y, layout, w, c));
  const auto D = static_cast<std::size_t>(c.d_model);
  for (std::size_t r = 5; r < 7; ++r)
    for (std::size_t d = 0; d < D; ++d) CHECK(std::abs(ox[r * D + d] - oy[r * D + d]) < 1e-12);
}

TEST_CASE("attention rows sum to one") {
  const std::int64_t B = 2, L = 5, H = 2, hd = 3;
  auto q = random_tensor({B * L, H * hd}, 1, false, 3.0);
  auto k = random_tensor({B * L, H * hd}, 2, false, 3.0);
  const std::vector<SequenceLayout> seqs{{1, 2, 5}, {0, 0, 3}};
  const auto layout = make_batch_layout(seqs, ImageMaskMode::causal);
  Tape tape;
  auto out = ops::attention(tape, q, k, Tensor::filled({B * L, H * hd}, 1.0), H, layout.mask);
  for (double v : out.data()) CHECK(std::abs(v - 1.0) < 1e-9);
}

TEST_CASE("FLOP parity") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 20; ++i) {
    ModelConfig c = small_config();
    c.n_layers = 1 + static_cast<int>(rng() % 6);
    c.d_ff = 8 + static_cast<int>(rng() % 64);
    ModelConfig none = c;
    none.ve_placement = ExpertPlacement::none;
    const auto li = static_cast<std::int64_t>(rng() % 20), lt = 1 + static_cast<std::int64_t>(rng() % 30);
    CHECK(count_flops(c, li, lt).total == count_flops(none, li, lt).total);
  }
}
