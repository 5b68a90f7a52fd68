// SPDX-License-Identifier: Apache-2.0
#include "vexpert/model.hpp"

#include <algorithm>
#include <cmath>

#include "vexpert/error.hpp"

namespace vexpert {

namespace {

constexpr double kInitStd = 0.02;

Tensor normal(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor fan_in_normal(Shape shape, std::mt19937_64& rng) {
  const double stddev = 1.0 / std::sqrt(static_cast<double>(shape.front()));
  return normal(std::move(shape), stddev, rng, true);
}

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t offset) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(offset)};
  return std::mt19937_64(seq);
}

AttentionBranch copy_branch(const AttentionBranch& b) {
  return {b.wq.detach(true), b.wk.detach(true), b.wv.detach(true)};
}
FfnBranch copy_branch(const FfnBranch& b) { return {b.gate.detach(true), b.up.detach(true), b.down.detach(true)}; }

// M is Model or const Model; f receives (name, Tensor&) accordingly.
template <class M, class F>
void visit(M& m, F&& f) {
  f("embedding", m.embedding);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    auto& w = m.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    f(p + "attn_norm", w.attn_norm);
    f(p + "text.wq", w.attn_text.wq);
    f(p + "text.wk", w.attn_text.wk);
    f(p + "text.wv", w.attn_text.wv);
    f(p + "wo", w.wo);
    f(p + "ffn_norm", w.ffn_norm);
    f(p + "text.gate", w.ffn_text.gate);
    f(p + "text.up", w.ffn_text.up);
    f(p + "text.down", w.ffn_text.down);
    if (w.attn_image) {
      f(p + "image.wq", w.attn_image->wq);
      f(p + "image.wk", w.attn_image->wk);
      f(p + "image.wv", w.attn_image->wv);
    }
    if (w.ffn_image) {
      f(p + "image.gate", w.ffn_image->gate);
      f(p + "image.up", w.ffn_image->up);
      f(p + "image.down", w.ffn_image->down);
    }
  }
  f("final_norm", m.final_norm);
  f("encoder.proj", m.encoder.proj);
  f("encoder.bias", m.encoder.bias);
  f("encoder.pos", m.encoder.pos);
  for (std::size_t i = 0; i < m.encoder.layers.size(); ++i) {
    auto& e = m.encoder.layers[i];
    const std::string p = "encoder.layers." + std::to_string(i) + ".";
    f(p + "norm1", e.norm1);
    f(p + "wq", e.wq);
    f(p + "wk", e.wk);
    f(p + "wv", e.wv);
    f(p + "wo", e.wo);
    f(p + "norm2", e.norm2);
    f(p + "gate", e.ffn.gate);
    f(p + "up", e.ffn.up);
    f(p + "down", e.ffn.down);
  }
  f("adapter.gate", m.adapter.gate);
  f("adapter.up", m.adapter.up);
  f("adapter.down", m.adapter.down);
}

// Multi-head attention over flat rows, with rotary positions when given.
Tensor attend(Tape& tape, Tensor q, Tensor k, const Tensor& v, std::int64_t heads, const ops::AttentionMask& mask,
              const std::vector<std::int64_t>* positions, double theta) {
  if (positions) {
    q = ops::rope_rows(tape, q, *positions, heads, theta);
    k = ops::rope_rows(tape, k, *positions, heads, theta);
  }
  return ops::attention(tape, q, k, v, heads, mask);
}

Tensor maybe_dropout(Tape& tape, const Tensor& x, const ForwardOptions& options) {
  if (options.dropout <= 0 || options.rng == nullptr) return x;
  return ops::dropout(tape, x, options.dropout, *options.rng);
}

}  // namespace

std::vector<NamedTensor> Model::parameters() const {
  std::vector<NamedTensor> out;
  visit(*this, [&](const std::string& name, const Tensor& t) { out.push_back({name, t}); });
  return out;
}

std::vector<Tensor> Model::trainable_parameters() const {
  std::vector<Tensor> out;
  visit(*this, [&](const std::string&, const Tensor& t) {
    if (t.requires_grad()) out.push_back(t);
  });
  return out;
}

std::vector<Tensor> Model::frozen_parameters() const {
  std::vector<Tensor> out;
  visit(*this, [&](const std::string&, const Tensor& t) {
    if (!t.requires_grad()) out.push_back(t);
  });
  return out;
}

Model Model::clone() const {
  Model m = *this;
  visit(m, [](const std::string&, Tensor& t) { t = t.detach(t.requires_grad()); });
  return m;
}

Model build_model(const ModelConfig& config, const TensorMap* base_weights) {
  config.validate();
  const std::int64_t D = config.d_model, F = config.d_ff, V = config.vocab_size;
  auto dec = stream(config.seed, 0);
  auto exp = stream(config.seed, 1);
  auto vis = stream(config.seed, 2);

  Model m;
  m.config = config;
  m.embedding = normal({V, D}, kInitStd, dec, false);
  for (int l = 0; l < config.n_layers; ++l) {
    LayerWeights w;
    w.attn_norm = Tensor::filled({D}, 1.0);
    w.attn_text = {normal({D, D}, kInitStd, dec, false), normal({D, D}, kInitStd, dec, false),
                   normal({D, D}, kInitStd, dec, false)};
    w.wo = normal({D, D}, kInitStd, dec, false);
    w.ffn_norm = Tensor::filled({D}, 1.0);
    w.ffn_text = {normal({D, F}, kInitStd, dec, false), normal({D, F}, kInitStd, dec, false),
                  normal({F, D}, kInitStd, dec, false)};
    m.layers.push_back(std::move(w));
  }
  m.final_norm = Tensor::filled({D}, 1.0);

  if (base_weights) {
    // Only the decoder exists at this point; vision tensors are still undefined.
    visit(m, [&](const std::string& name, Tensor& t) {
      if (!t.defined()) return;
      auto it = base_weights->find(name);
      if (it == base_weights->end()) throw InvalidArgument("base weights lack tensor '" + name + "'");
      if (it->second.shape() != t.shape()) {
        throw ShapeError("base weight '" + name + "' has shape " + shape_str(it->second.shape()) + ", config needs " +
                         shape_str(t.shape()));
      }
      auto dst = t.mutable_data();
      std::copy(it->second.data().begin(), it->second.data().end(), dst.begin());
    });
  }

  // Experts are added after the base weights are final so that from_llm
  // copies what was loaded.
  for (int l = 0; l < config.n_layers; ++l) {
    auto& w = m.layers[static_cast<std::size_t>(l)];
    const bool random = config.ve_init == ExpertInit::random;
    if (config.attention_expert(l)) {
      w.attn_image = random ? AttentionBranch{normal({D, D}, kInitStd, exp, true), normal({D, D}, kInitStd, exp, true),
                                              normal({D, D}, kInitStd, exp, true)}
                            : copy_branch(w.attn_text);
    }
    if (config.ffn_expert(l)) {
      w.ffn_image = random ? FfnBranch{normal({D, F}, kInitStd, exp, true), normal({D, F}, kInitStd, exp, true),
                                       normal({F, D}, kInitStd, exp, true)}
                           : copy_branch(w.ffn_text);
    }
  }

  const auto& pc = config.patch;
  const std::int64_t E = pc.encoder_dim, EF = config.encoder_ffn(), A = config.adapter_hidden();
  m.encoder.proj = fan_in_normal({pc.patch_values(), E}, vis);
  m.encoder.bias = Tensor::zeros({E}, true);
  m.encoder.pos = normal({pc.patches(), E}, kInitStd, vis, true);
  for (int i = 0; i < pc.encoder_layers; ++i) {
    EncoderLayer e;
    e.norm1 = Tensor::filled({E}, 1.0, true);
    e.wq = fan_in_normal({E, E}, vis);
    e.wk = fan_in_normal({E, E}, vis);
    e.wv = fan_in_normal({E, E}, vis);
    e.wo = fan_in_normal({E, E}, vis);
    e.norm2 = Tensor::filled({E}, 1.0, true);
    e.ffn = {fan_in_normal({E, EF}, vis), fan_in_normal({E, EF}, vis), fan_in_normal({EF, E}, vis)};
    m.encoder.layers.push_back(std::move(e));
  }
  m.adapter = {fan_in_normal({E, A}, vis), fan_in_normal({E, A}, vis), fan_in_normal({A, D}, vis)};
  return m;
}

SequenceLayout layout_of(const MixedSequence& seq, const ModelConfig& config) {
  SequenceLayout l;
  l.image_start = static_cast<std::int64_t>(seq.pre_text.size());
  l.image_len = seq.image ? config.patch.patches() : 0;
  l.total_len = l.image_start + l.image_len + static_cast<std::int64_t>(seq.post_text.size());
  return l;
}

std::vector<std::int64_t> position_ids(const SequenceLayout& layout) {
  if (layout.image_start < 0 || layout.image_len < 0 || layout.image_start + layout.image_len > layout.total_len) {
    throw InvalidArgument("position_ids: inconsistent layout");
  }
  std::vector<std::int64_t> ids(static_cast<std::size_t>(layout.total_len));
  if (layout.image_len == 0) {
    for (std::int64_t i = 0; i < layout.total_len; ++i) ids[static_cast<std::size_t>(i)] = i;
    return ids;
  }
  const std::int64_t end = layout.image_start + layout.image_len;
  for (std::int64_t i = 0; i < layout.total_len; ++i) {
    std::int64_t p = i;
    if (i >= layout.image_start && i < end) {
      p = layout.image_start;
    } else if (i >= end) {
      p = layout.image_start + 1 + (i - end);
    }
    ids[static_cast<std::size_t>(i)] = p;
  }
  return ids;
}

BatchLayout make_batch_layout(std::span<const SequenceLayout> sequences, ImageMaskMode mode) {
  if (sequences.empty()) throw InvalidArgument("empty batch");
  BatchLayout out;
  out.batch = static_cast<std::int64_t>(sequences.size());
  out.sequences.assign(sequences.begin(), sequences.end());
  for (const auto& s : sequences) {
    if (s.total_len <= 0) throw InvalidArgument("empty sequence in batch");
    out.length = std::max(out.length, s.total_len);
  }
  const std::int64_t L = out.length;
  const auto rows = static_cast<std::size_t>(out.batch * L);
  out.pad.assign(rows, 0);
  out.positions.assign(rows, 0);
  out.mask.batch = out.batch;
  out.mask.rows = L;
  out.mask.cols = L;
  out.mask.allowed.assign(rows * static_cast<std::size_t>(L), 0);
  for (std::int64_t b = 0; b < out.batch; ++b) {
    const auto& s = sequences[static_cast<std::size_t>(b)];
    const auto ids = position_ids(s);
    const std::int64_t img_end = s.image_start + s.image_len;
    for (std::int64_t i = 0; i < L; ++i) {
      const std::int64_t row = b * L + i;
      const bool is_pad = i >= s.total_len;
      out.pad[static_cast<std::size_t>(row)] = is_pad;
      out.positions[static_cast<std::size_t>(row)] =
          is_pad ? ids.back() + (i - s.total_len + 1) : ids[static_cast<std::size_t>(i)];
      const bool is_image = i >= s.image_start && i < img_end;
      (is_image ? out.image_rows : out.text_rows).push_back(row);
      for (std::int64_t j = 0; j < s.total_len; ++j) {
        bool ok = j <= i;
        if (mode == ImageMaskMode::full_within_image && is_image && j >= s.image_start && j < img_end) ok = true;
        out.mask.allowed[static_cast<std::size_t>(row * L + j)] = ok;
      }
    }
  }
  return out;
}

Tensor patchify(const Tensor& image, const PatchConfig& pc) {
  const Shape want{pc.image_h, pc.image_w, pc.channels};
  if (image.shape() != want) {
    throw ShapeError("image has shape " + shape_str(image.shape()) + ", config expects " + shape_str(want));
  }
  const int ps = pc.patch_size, gw = pc.image_w / ps, gh = pc.image_h / ps;
  std::vector<double> out(static_cast<std::size_t>(pc.patches() * pc.patch_values()));
  auto px = image.data();
  std::size_t k = 0;
  for (int py = 0; py < gh; ++py)
    for (int pxi = 0; pxi < gw; ++pxi)
      for (int y = 0; y < ps; ++y)
        for (int x = 0; x < ps; ++x)
          for (int c = 0; c < pc.channels; ++c) {
            const std::size_t src =
                (static_cast<std::size_t>(py * ps + y) * static_cast<std::size_t>(pc.image_w) +
                 static_cast<std::size_t>(pxi * ps + x)) *
                    static_cast<std::size_t>(pc.channels) +
                static_cast<std::size_t>(c);
            out[k++] = px[src];
          }
  return Tensor({pc.patches(), pc.patch_values()}, std::move(out));
}

Tensor swiglu(Tape& tape, const FfnBranch& w, const Tensor& x) {
  Tensor gated = ops::silu_mul(tape, ops::matmul(tape, x, w.gate), ops::matmul(tape, x, w.up));
  return ops::matmul(tape, gated, w.down);
}

Tensor patch_encode(Tape& tape, const Model& model, std::span<const Tensor> images) {
  if (images.empty()) throw InvalidArgument("patch_encode: no images");
  const auto& pc = model.config.patch;
  const std::int64_t P = pc.patches(), n = static_cast<std::int64_t>(images.size());
  std::vector<double> stacked;
  stacked.reserve(static_cast<std::size_t>(n * P * pc.patch_values()));
  for (const auto& img : images) {
    Tensor p = patchify(img, pc);
    stacked.insert(stacked.end(), p.data().begin(), p.data().end());
  }
  Tensor patches({n * P, pc.patch_values()}, std::move(stacked));
  Tensor x = ops::add_bias(tape, ops::matmul(tape, patches, model.encoder.proj), model.encoder.bias);
  {
    // The position embedding is shared by every image; stack one copy each.
    std::vector<ops::RowGroup> groups;
    for (std::int64_t i = 0; i < n; ++i) {
      std::vector<std::int64_t> rows(static_cast<std::size_t>(P));
      for (std::int64_t r = 0; r < P; ++r) rows[static_cast<std::size_t>(r)] = i * P + r;
      groups.push_back({model.encoder.pos, std::move(rows)});
    }
    Tensor pos_all = ops::interleave_rows(tape, groups, n * P);
    x = ops::add(tape, x, pos_all);
  }
  if (model.encoder.layers.empty()) return x;

  ops::AttentionMask full;
  full.batch = n;
  full.rows = P;
  full.cols = P;
  full.allowed.assign(static_cast<std::size_t>(n * P * P), 1);
  const double eps = model.config.norm_eps;
  for (const auto& e : model.encoder.layers) {
    Tensor h = ops::rmsnorm(tape, x, e.norm1, eps);
    Tensor ctx = attend(tape, ops::matmul(tape, h, e.wq), ops::matmul(tape, h, e.wk), ops::matmul(tape, h, e.wv),
                        pc.encoder_heads, full, nullptr, 0.0);
    x = ops::add(tape, x, ops::matmul(tape, ctx, e.wo));
    x = ops::add(tape, x, swiglu(tape, e.ffn, ops::rmsnorm(tape, x, e.norm2, eps)));
  }
  return x;
}

Tensor mlp_adapter(Tape& tape, const Model& model, const Tensor& features) {
  if (features.rank() != 2 || features.dim(1) != model.config.patch.encoder_dim) {
    throw ShapeError("mlp_adapter: features " + shape_str(features.shape()) + " do not have encoder_dim " +
                     std::to_string(model.config.patch.encoder_dim));
  }
  return swiglu(tape, model.adapter, features);
}

Tensor rope_apply(Tape& tape, const Tensor& q_or_k, std::span<const std::int64_t> ids, double theta) {
  return ops::rope(tape, q_or_k, ids, theta);
}

namespace {

struct RowSplit {
  Tensor image, text;
};

RowSplit split_rows(Tape& tape, const Tensor& x, const BatchLayout& layout) {
  RowSplit s;
  s.image = ops::gather_rows(tape, x, layout.image_rows);
  if (!layout.text_rows.empty()) s.text = ops::gather_rows(tape, x, layout.text_rows);
  return s;
}

// concat(x_I W_I, x_T W_T) put back in sequence order.
Tensor merge_branches(Tape& tape, const Tensor& image_out, const Tensor& text_out, const BatchLayout& layout) {
  std::vector<ops::RowGroup> groups{{image_out, layout.image_rows}};
  if (text_out.defined()) groups.push_back({text_out, layout.text_rows});
  return ops::interleave_rows(tape, groups, layout.batch * layout.length);
}

Tensor project(Tape& tape, const RowSplit& rows, const Tensor& w_image, const Tensor& w_text,
               const BatchLayout& layout) {
  Tensor img = ops::matmul(tape, rows.image, w_image);
  Tensor txt = rows.text.defined() ? ops::matmul(tape, rows.text, w_text) : Tensor();
  return merge_branches(tape, img, txt, layout);
}

void check_rows(const Tensor& x, const BatchLayout& layout, const char* op) {
  if (x.rank() != 2 || x.dim(0) != layout.batch * layout.length) {
    throw ShapeError(std::string(op) + ": input " + shape_str(x.shape()) + " does not match layout of " +
                     std::to_string(layout.batch) + "x" + std::to_string(layout.length) + " rows");
  }
}

}  // namespace

Tensor ve_attention(Tape& tape, const Tensor& x, const BatchLayout& layout, const LayerWeights& w,
                    const ModelConfig& config, bool use_expert) {
  check_rows(x, layout, "ve_attention");
  Tensor q, k, v;
  if (use_expert && w.attn_image && !layout.image_rows.empty()) {
    const RowSplit rows = split_rows(tape, x, layout);
    q = project(tape, rows, w.attn_image->wq, w.attn_text.wq, layout);
    k = project(tape, rows, w.attn_image->wk, w.attn_text.wk, layout);
    v = project(tape, rows, w.attn_image->wv, w.attn_text.wv, layout);
  } else {
    q = ops::matmul(tape, x, w.attn_text.wq);
    k = ops::matmul(tape, x, w.attn_text.wk);
    v = ops::matmul(tape, x, w.attn_text.wv);
  }
  Tensor ctx = attend(tape, q, k, v, config.n_heads, layout.mask, &layout.positions, config.rope_theta);
  return ops::matmul(tape, ctx, w.wo);
}

Tensor ve_ffn(Tape& tape, const Tensor& x, const BatchLayout& layout, const LayerWeights& w, bool use_expert) {
  check_rows(x, layout, "ve_ffn");
  if (use_expert && w.ffn_image && !layout.image_rows.empty()) {
    const RowSplit rows = split_rows(tape, x, layout);
    Tensor img = swiglu(tape, *w.ffn_image, rows.image);
    Tensor txt = rows.text.defined() ? swiglu(tape, w.ffn_text, rows.text) : Tensor();
    return merge_branches(tape, img, txt, layout);
  }
  return swiglu(tape, w.ffn_text, x);
}

ForwardOutput forward_hidden(Tape& tape, const Model& model, std::span<const MixedSequence> batch,
                             const ForwardOptions& options) {
  const auto& cfg = model.config;
  std::vector<SequenceLayout> layouts;
  for (const auto& s : batch) {
    layouts.push_back(layout_of(s, cfg));
    if (layouts.back().total_len > cfg.max_seq) {
      throw InvalidArgument("sequence of length " + std::to_string(layouts.back().total_len) + " exceeds max_seq " +
                            std::to_string(cfg.max_seq));
    }
  }
  ForwardOutput out;
  out.layout = make_batch_layout(layouts, cfg.image_mask_mode);
  const auto& lay = out.layout;
  const std::int64_t L = lay.length, N = lay.batch * L, D = cfg.d_model;

  std::vector<std::int64_t> text_ids, text_dst, pad_dst;
  std::vector<Tensor> images;
  for (std::int64_t b = 0; b < lay.batch; ++b) {
    const auto& s = batch[static_cast<std::size_t>(b)];
    const auto& l = layouts[static_cast<std::size_t>(b)];
    for (std::size_t i = 0; i < s.pre_text.size(); ++i) {
      text_ids.push_back(s.pre_text[i]);
      text_dst.push_back(b * L + static_cast<std::int64_t>(i));
    }
    if (s.image) images.push_back(*s.image);
    for (std::size_t i = 0; i < s.post_text.size(); ++i) {
      text_ids.push_back(s.post_text[i]);
      text_dst.push_back(b * L + l.image_start + l.image_len + static_cast<std::int64_t>(i));
    }
    for (std::int64_t i = l.total_len; i < L; ++i) pad_dst.push_back(b * L + i);
  }

  std::vector<ops::RowGroup> groups;
  if (!text_ids.empty()) groups.push_back({ops::embed(tape, model.embedding, text_ids), text_dst});
  if (!images.empty()) {
    out.image_features = patch_encode(tape, model, images);
    groups.push_back({mlp_adapter(tape, model, out.image_features), lay.image_rows});
  }
  if (!pad_dst.empty()) {
    groups.push_back({Tensor::zeros({static_cast<std::int64_t>(pad_dst.size()), D}), pad_dst});
  }
  Tensor x = ops::interleave_rows(tape, groups, N);

  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& w = model.layers[static_cast<std::size_t>(l)];
    Tensor h = ops::rmsnorm(tape, x, w.attn_norm, cfg.norm_eps);
    x = ops::add(tape, x, maybe_dropout(tape, ve_attention(tape, h, lay, w, cfg, options.use_expert), options));
    h = ops::rmsnorm(tape, x, w.ffn_norm, cfg.norm_eps);
    x = ops::add(tape, x, maybe_dropout(tape, ve_ffn(tape, h, lay, w, options.use_expert), options));
  }
  out.hidden = ops::rmsnorm(tape, x, model.final_norm, cfg.norm_eps);
  return out;
}

Tensor logits_for_rows(Tape& tape, const Model& model, const Tensor& hidden, std::span<const std::int64_t> rows) {
  Tensor h = ops::gather_rows(tape, hidden, rows);
  return ops::matmul(tape, h, ops::transpose_last2(tape, model.embedding));
}

Tensor forward(Tape& tape, const Model& model, std::span<const MixedSequence> batch, const ForwardOptions& options) {
  ForwardOutput out = forward_hidden(tape, model, batch, options);
  Tensor logits = ops::matmul(tape, out.hidden, ops::transpose_last2(tape, model.embedding));
  return ops::reshape(tape, logits, {out.layout.batch, out.layout.length, model.config.vocab_size});
}

ParamCounts count_params(const ModelConfig& config) {
  config.validate();
  const std::int64_t D = config.d_model, F = config.d_ff, V = config.vocab_size;
  const std::int64_t qkv = 3 * D * D, ffn = 3 * D * F;
  ParamCounts c;
  c.frozen_qkv_ffn = config.n_layers * (qkv + ffn);
  c.frozen = V * D + config.n_layers * (qkv + D * D + ffn + 2 * D) + D;
  for (int l = 0; l < config.n_layers; ++l) {
    if (config.attention_expert(l)) c.expert_qkv_ffn += qkv;
    if (config.ffn_expert(l)) c.expert_qkv_ffn += ffn;
  }
  const auto& pc = config.patch;
  const std::int64_t E = pc.encoder_dim, EF = config.encoder_ffn(), A = config.adapter_hidden();
  const std::int64_t encoder =
      pc.patch_values() * E + E + pc.patches() * E + pc.encoder_layers * (2 * E + 4 * E * E + 3 * E * EF);
  c.vision = encoder + 2 * E * A + A * D;
  c.trainable = c.expert_qkv_ffn + c.vision;
  c.total = c.frozen + c.trainable;
  return c;
}

FlopCount count_flops(const ModelConfig& config, std::int64_t image_len, std::int64_t text_len) {
  config.validate();
  if (image_len < 0 || text_len < 0 || image_len + text_len == 0) {
    throw InvalidArgument("count_flops: need a non-empty sequence");
  }
  const std::int64_t D = config.d_model, F = config.d_ff, V = config.vocab_size, L = image_len + text_len;
  // Per-row projection cost of each branch, read off its weight shapes. A
  // row goes through exactly one branch, so the expert changes which weights
  // are used, not how many multiply-adds are spent.
  const std::int64_t text_qkv = 3 * D * D, text_ffn = D * F * 2 + F * D;
  FlopCount f;
  for (int l = 0; l < config.n_layers; ++l) {
    const std::int64_t image_qkv = config.attention_expert(l) ? 3 * (D * D) : text_qkv;
    const std::int64_t image_ffn = config.ffn_expert(l) ? (D * F) + (D * F) + (F * D) : text_ffn;
    f.decoder += image_len * (image_qkv + image_ffn) + text_len * (text_qkv + text_ffn);
    f.decoder += L * D * D;      // shared output projection
    f.decoder += 2 * L * L * D;  // scores and weighted values over all heads
  }
  f.decoder += L * D * V;  // tied output head
  if (image_len > 0) {
    const auto& pc = config.patch;
    const std::int64_t E = pc.encoder_dim, EF = config.encoder_ffn(), A = config.adapter_hidden();
    f.vision = image_len * pc.patch_values() * E;
    f.vision += pc.encoder_layers * (image_len * (4 * E * E + 3 * E * EF) + 2 * image_len * image_len * E);
    f.vision += image_len * (2 * E * A + A * D);
  }
  f.total = f.decoder + f.vision;
  f.per_token = static_cast<double>(f.total) / static_cast<double>(L);
  return f;
}

}  // namespace vexpert
