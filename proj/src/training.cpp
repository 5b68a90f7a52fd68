// SPDX-License-Identifier: Apache-2.0
#include "vexpert/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <numeric>
#include <random>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "vexpert/error.hpp"

namespace vexpert {

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint32_t offset) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), offset};
  return std::mt19937_64(seq);
}

// Stream offsets under the run seed; 0-2 are taken by model initialisation.
constexpr std::uint32_t kShuffleStream = 3;
constexpr std::uint32_t kDropoutStream = 4;
constexpr std::uint32_t kSslHeadStream = 5;

std::vector<std::int64_t> masked_rows(std::span<const std::uint8_t> mask) {
  std::vector<std::int64_t> rows;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) rows.push_back(static_cast<std::int64_t>(i));
  }
  if (rows.empty()) throw DomainError("masked loss over a batch with no answer positions");
  return rows;
}

std::vector<std::int64_t> pick(std::span<const std::int64_t> v, std::span<const std::int64_t> rows) {
  std::vector<std::int64_t> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(v[static_cast<std::size_t>(r)]);
  return out;
}

}  // namespace

std::vector<std::int64_t> encode_text(std::string_view text) {
  std::vector<std::int64_t> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(static_cast<unsigned char>(c));
  return ids;
}

std::string decode_tokens(std::span<const std::int64_t> ids) {
  std::string out;
  for (auto id : ids) {
    if (id >= 0 && id < 256) {
      out += static_cast<char>(static_cast<unsigned char>(id));
    } else {
      out += "\xEF\xBF\xBD";
    }
  }
  return out;
}

MixedSequence make_training_sequence(const Example& ex, const ModelConfig& config) {
  if (ex.answer.empty()) throw InvalidArgument("example has an empty answer");
  MixedSequence s;
  s.pre_text = {tokens::kBos};
  s.image = ex.image;
  s.post_text = encode_text(ex.prompt + " " + ex.answer);
  const auto lay = layout_of(s, config);
  const auto total = static_cast<std::size_t>(lay.total_len);
  const auto first_post = static_cast<std::size_t>(lay.image_start + lay.image_len);
  const std::size_t answer_start = first_post + ex.prompt.size() + 1;  // row of the first answer byte
  s.targets.assign(total, tokens::kPad);
  s.loss_mask.assign(total, 0);
  // Row p predicts row p + 1 whenever that row is text.
  for (std::size_t p = 0; p + 1 < total; ++p) {
    const std::size_t next = p + 1;
    if (next < static_cast<std::size_t>(lay.image_start)) {
      s.targets[p] = s.pre_text[next];
    } else if (next >= first_post) {
      s.targets[p] = s.post_text[next - first_post];
      s.loss_mask[p] = next >= answer_start;
    }
  }
  s.targets[total - 1] = tokens::kEos;
  s.loss_mask[total - 1] = 1;
  return s;
}

MixedSequence make_prompt_sequence(const std::string& prompt, const std::optional<Tensor>& image) {
  MixedSequence s;
  s.pre_text = {tokens::kBos};
  s.image = image;
  s.post_text = encode_text(prompt + " ");
  return s;
}

FlatTargets flatten_targets(std::span<const MixedSequence> batch, const BatchLayout& layout) {
  if (static_cast<std::int64_t>(batch.size()) != layout.batch) throw InvalidArgument("batch does not match layout");
  FlatTargets out;
  const auto rows = static_cast<std::size_t>(layout.batch * layout.length);
  out.targets.assign(rows, tokens::kPad);
  out.mask.assign(rows, 0);
  for (std::int64_t b = 0; b < layout.batch; ++b) {
    const auto& s = batch[static_cast<std::size_t>(b)];
    const auto total = static_cast<std::size_t>(layout.sequences[static_cast<std::size_t>(b)].total_len);
    if (s.targets.size() != total || s.loss_mask.size() != total) {
      throw ShapeError("sequence " + std::to_string(b) + " has " + std::to_string(s.targets.size()) + " targets and " +
                       std::to_string(s.loss_mask.size()) + " mask entries for " + std::to_string(total) + " rows");
    }
    const auto base = static_cast<std::size_t>(b * layout.length);
    std::copy(s.targets.begin(), s.targets.end(), out.targets.begin() + static_cast<std::ptrdiff_t>(base));
    std::copy(s.loss_mask.begin(), s.loss_mask.end(), out.mask.begin() + static_cast<std::ptrdiff_t>(base));
  }
  return out;
}

Tensor masked_lm_loss(Tape& tape, const Tensor& logits, std::span<const std::int64_t> targets,
                      std::span<const std::uint8_t> loss_mask) {
  if (logits.rank() != 3) throw ShapeError("masked_lm_loss: logits must be [B, L, V], got " + shape_str(logits.shape()));
  const std::int64_t rows = logits.dim(0) * logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != rows || loss_mask.size() != targets.size()) {
    throw ShapeError("masked_lm_loss: targets/mask length does not match logits " + shape_str(logits.shape()));
  }
  const auto sel = masked_rows(loss_mask);
  Tensor flat = ops::reshape(tape, logits, {rows, logits.dim(2)});
  return ops::cross_entropy(tape, ops::gather_rows(tape, flat, sel), pick(targets, sel));
}

Tensor masked_lm_loss_from_hidden(Tape& tape, const Model& model, const Tensor& hidden,
                                  std::span<const std::int64_t> targets, std::span<const std::uint8_t> loss_mask) {
  if (hidden.rank() != 2 || static_cast<std::int64_t>(targets.size()) != hidden.dim(0) ||
      loss_mask.size() != targets.size()) {
    throw ShapeError("masked_lm_loss_from_hidden: targets/mask length does not match hidden " +
                     shape_str(hidden.shape()));
  }
  const auto sel = masked_rows(loss_mask);
  return ops::cross_entropy(tape, logits_for_rows(tape, model, hidden, sel), pick(targets, sel));
}

OptimizerState make_optimizer_state(std::span<const Tensor> params) {
  OptimizerState s;
  for (const auto& p : params) {
    s.m.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    s.v.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
  }
  return s;
}

void adamw_step(std::span<Tensor> params, OptimizerState& state, double lr, const AdamWOptions& o) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw InvalidArgument("optimizer state tracks " + std::to_string(state.m.size()) + " tensors, got " +
                          std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].requires_grad()) continue;
    if (!params[i].has_grad()) throw InvalidArgument("trainable tensor " + std::to_string(i) + " has no gradient");
    if (state.m[i].size() != static_cast<std::size_t>(params[i].numel())) {
      throw ShapeError("optimizer moments do not match tensor " + std::to_string(i) + " of shape " +
                       shape_str(params[i].shape()));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.requires_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = o.beta1 * m[k] + (1.0 - o.beta1) * g[k];
      v[k] = o.beta2 * v[k] + (1.0 - o.beta2) * g[k] * g[k];
      const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + o.eps);
      w[k] -= lr * (update + o.weight_decay * w[k]);
    }
  }
}

double clip_grad_norm(std::span<const Tensor> params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (const auto& p : params) {
      if (!p.has_grad()) continue;
      for (double& g : p.grad_buffer()) g *= f;
    }
  }
  return norm;
}

double lr_at(std::int64_t step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.total_steps) {
    throw InvalidArgument("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(cfg.total_steps) +
                          "]");
  }
  if (step <= cfg.warmup_steps) {
    return cfg.lr_peak * (static_cast<double>(step) / static_cast<double>(cfg.warmup_steps));
  }
  const double t = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return cfg.lr_peak * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

EmaState ema_init(std::span<const Tensor> params, double decay) {
  if (!(decay >= 0.0 && decay < 1.0)) throw InvalidArgument("EMA decay must lie in [0, 1)");
  EmaState e;
  e.decay = decay;
  for (const auto& p : params) e.shadow.push_back(p.detach());
  return e;
}

void ema_update(EmaState& ema, std::span<const Tensor> params) {
  if (ema.shadow.size() != params.size()) throw ShapeError("EMA shadow count does not match parameters");
  const double d = ema.decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (ema.shadow[i].shape() != params[i].shape()) {
      throw ShapeError("EMA shadow " + shape_str(ema.shadow[i].shape()) + " vs parameter " +
                       shape_str(params[i].shape()));
    }
    auto s = ema.shadow[i].mutable_data();
    auto p = params[i].data();
    for (std::size_t k = 0; k < s.size(); ++k) s[k] = d * s[k] + (1.0 - d) * p[k];
  }
}

TensorMap pretrain_base_decoder(const ModelConfig& config, std::span<const Example> data, const TrainConfig& cfg,
                                const TrainOptions& options) {
  ModelConfig base_cfg = config;
  base_cfg.ve_placement = ExpertPlacement::none;
  Model base = build_model(base_cfg);
  for (auto& p : base.parameters()) {
    const bool vision = p.name.starts_with("encoder.") || p.name.starts_with("adapter.");
    p.tensor.set_requires_grad(!vision);
  }
  std::vector<Example> text;
  text.reserve(data.size());
  for (const auto& ex : data) text.push_back({ex.prompt, ex.answer, std::nullopt});
  TrainConfig tc = cfg;
  tc.ema_enabled = false;
  tc.ssl_loss_enabled = false;
  TrainResult r = train(std::move(base), text, tc, options);
  TensorMap out;
  for (const auto& p : r.model.parameters()) {
    if (p.name.starts_with("encoder.") || p.name.starts_with("adapter.")) continue;
    out.emplace(p.name, p.tensor.detach(false));
  }
  return out;
}

Model with_ema_weights(const Model& model, const EmaState& ema) {
  Model out = model.clone();
  auto trainable = out.trainable_parameters();
  if (trainable.size() != ema.shadow.size()) throw ShapeError("EMA shadow count does not match the model");
  for (std::size_t i = 0; i < trainable.size(); ++i) {
    if (trainable[i].shape() != ema.shadow[i].shape()) throw ShapeError("EMA shadow shape does not match the model");
    auto dst = trainable[i].mutable_data();
    auto src = ema.shadow[i].data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return out;
}

Tensor image_ssl_loss(Tape& tape, const Tensor& hidden_image, const Tensor& target_feats, const Tensor& head) {
  if (hidden_image.rank() != 2 || target_feats.rank() != 2 || head.rank() != 2) {
    throw ShapeError("image_ssl_loss: expects rank-2 hidden, targets and head");
  }
  const std::int64_t L = hidden_image.dim(0);
  if (L < 2) throw InvalidArgument("image_ssl_loss needs at least 2 image rows, got " + std::to_string(L));
  if (target_feats.dim(0) != L || head.dim(0) != hidden_image.dim(1) || head.dim(1) != target_feats.dim(1)) {
    throw ShapeError("image_ssl_loss: hidden " + shape_str(hidden_image.shape()) + ", targets " +
                     shape_str(target_feats.shape()) + ", head " + shape_str(head.shape()) + " do not line up");
  }
  Tensor pred = ops::matmul(tape, ops::split_seq(tape, hidden_image, L - 1).first, head);
  Tensor next = ops::split_seq(tape, target_feats, 1).second;
  Tensor diff = ops::sub(tape, pred, next);
  return ops::mean(tape, ops::mul(tape, diff, diff));
}

void MetricsLog::append(const StepMetrics& m) {
  std::lock_guard lock(mu_);
  entries_.push_back(m);
  if (out_) {
    *out_ << nlohmann::json{{"step", m.step}, {"lr", m.lr}, {"loss", m.loss}, {"ema", m.ema}}.dump() << '\n';
    out_->flush();
  }
}

std::vector<StepMetrics> MetricsLog::entries() const {
  std::lock_guard lock(mu_);
  return entries_;
}

namespace {

Tensor ssl_term(Tape& tape, const ForwardOutput& fwd, std::span<const MixedSequence> batch, const Tensor& head) {
  const auto& lay = fwd.layout;
  const Tensor feats = fwd.image_features.detach();
  Tensor total;
  std::int64_t n_images = 0, feat_row = 0;
  for (std::int64_t b = 0; b < lay.batch; ++b) {
    if (!batch[static_cast<std::size_t>(b)].image) continue;
    const auto& l = lay.sequences[static_cast<std::size_t>(b)];
    std::vector<std::int64_t> rows(static_cast<std::size_t>(l.image_len)), frows(rows.size());
    for (std::int64_t i = 0; i < l.image_len; ++i) {
      rows[static_cast<std::size_t>(i)] = b * lay.length + l.image_start + i;
      frows[static_cast<std::size_t>(i)] = feat_row++;
    }
    Tensor term = image_ssl_loss(tape, ops::gather_rows(tape, fwd.hidden, rows), ops::gather_rows(tape, feats, frows),
                                 head);
    total = total.defined() ? ops::add(tape, total, term) : term;
    ++n_images;
  }
  if (!total.defined()) return total;
  return ops::scale(tape, total, 1.0 / static_cast<double>(n_images));
}

}  // namespace

TrainResult train(Model model_in, std::span<const Example> data, const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  if (data.empty()) throw InvalidArgument("train: empty dataset");
  Model model = model_in.clone();

  std::vector<MixedSequence> seqs;
  seqs.reserve(data.size());
  for (const auto& ex : data) seqs.push_back(make_training_sequence(ex, model.config));

  std::vector<Tensor> params = model.trainable_parameters();
  const std::size_t n_model_params = params.size();
  Tensor ssl_head;
  if (cfg.ssl_loss_enabled) {
    auto rng = stream(options.seed, kSslHeadStream);
    std::normal_distribution<double> dist(0.0, 0.02);
    const std::int64_t D = model.config.d_model, E = model.config.patch.encoder_dim;
    std::vector<double> v(static_cast<std::size_t>(D * E));
    for (double& x : v) x = dist(rng);
    ssl_head = Tensor({D, E}, std::move(v), true);
    params.push_back(ssl_head);
  }
  OptimizerState opt = make_optimizer_state(params);
  const AdamWOptions adam{cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay};
  std::optional<EmaState> ema;
  if (cfg.ema_enabled) {
    ema = ema_init(std::span<const Tensor>(params.data(), n_model_params), cfg.ema_decay);
  }

  auto shuffle_rng = stream(options.seed, kShuffleStream);
  auto dropout_rng = stream(options.seed, kDropoutStream);
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), shuffle_rng);
  std::size_t cursor = 0;

  TrainResult result;
  std::vector<MixedSequence> batch;
  for (std::int64_t step = 1; step <= cfg.total_steps; ++step) {
    batch.clear();
    for (int i = 0; i < cfg.batch_size; ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        cursor = 0;
      }
      batch.push_back(seqs[order[cursor++]]);
    }
    for (auto& p : params) p.clear_grad();

    Tape tape;
    ForwardOptions fo;
    fo.dropout = cfg.dropout;
    fo.rng = &dropout_rng;
    ForwardOutput fwd = forward_hidden(tape, model, batch, fo);
    const FlatTargets flat = flatten_targets(batch, fwd.layout);
    Tensor loss = masked_lm_loss_from_hidden(tape, model, fwd.hidden, flat.targets, flat.mask);
    if (cfg.ssl_loss_enabled) {
      Tensor ssl = ssl_term(tape, fwd, batch, ssl_head);
      if (ssl.defined()) loss = ops::add(tape, loss, ops::scale(tape, ssl, cfg.ssl_weight));
    }
    tape.backward(loss);
    // Tensors this batch does not reach (e.g. the vision path on a text-only
    // batch) take a zero gradient.
    for (auto& p : params) {
      if (!p.has_grad()) p.grad_buffer();
    }
    clip_grad_norm(params, cfg.grad_clip);
    const double lr = lr_at(step, cfg);
    adamw_step(params, opt, lr, adam);
    if (ema) ema_update(*ema, std::span<const Tensor>(params.data(), n_model_params));

    const StepMetrics m{step, lr, loss.item(), cfg.ema_enabled};
    result.metrics.push_back(m);
    if (options.log) options.log->append(m);
    if (options.on_step) options.on_step(step, m.loss);
    spdlog::debug("step {} lr {:.3e} loss {:.6f}", step, lr, m.loss);
  }
  for (auto& p : params) p.clear_grad();
  if (ema) result.ema_model = with_ema_weights(model, *ema);
  result.model = std::move(model);
  return result;
}

BoxDecoder greedy_box_decoder(const Model& model, std::size_t batch_size) {
  if (batch_size == 0) throw InvalidArgument("decoder batch size must be positive");
  return [&model, batch_size](std::span<const Example> items) {
    std::vector<std::string> out;
    out.reserve(items.size());
    for (std::size_t start = 0; start < items.size(); start += batch_size) {
      const std::size_t n = std::min(batch_size, items.size() - start);
      std::vector<MixedSequence> seqs;
      for (std::size_t i = 0; i < n; ++i) {
        seqs.push_back(make_prompt_sequence(items[start + i].prompt, items[start + i].image));
      }
      std::vector<std::vector<std::int64_t>> generated(n);
      for (std::size_t t = 0; t < kBoxTextLength; ++t) {
        Tape tape;
        tape.set_recording(false);
        ForwardOutput fwd = forward_hidden(tape, model, seqs);
        std::vector<std::int64_t> last(n);
        for (std::size_t b = 0; b < n; ++b) {
          last[b] = static_cast<std::int64_t>(b) * fwd.layout.length + fwd.layout.sequences[b].total_len - 1;
        }
        Tensor logits = logits_for_rows(tape, model, fwd.hidden, last);
        const auto V = static_cast<std::size_t>(logits.dim(1));
        auto data = logits.data();
        for (std::size_t b = 0; b < n; ++b) {
          const auto row = data.subspan(b * V, V);
          const auto id = static_cast<std::int64_t>(std::max_element(row.begin(), row.end()) - row.begin());
          generated[b].push_back(id);
          seqs[b].post_text.push_back(id);
        }
      }
      for (auto& g : generated) out.push_back(decode_tokens(g));
    }
    return out;
  };
}

RecReport eval_rec(const BoxDecoder& decoder, std::span<const Example> data, std::size_t batch_size) {
  if (data.empty()) throw InvalidArgument("eval_rec: empty dataset");
  if (batch_size == 0) throw InvalidArgument("eval batch size must be positive");
  RecReport r;
  double iou_sum = 0;
  std::size_t exact = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const auto chunk = data.subspan(start, std::min(batch_size, data.size() - start));
    const auto outputs = decoder(chunk);
    if (outputs.size() != chunk.size()) throw InvalidArgument("decoder returned the wrong number of outputs");
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const QuantizedBox gold = parse_box(chunk[i].answer);
      try {
        const QuantizedBox got = parse_box(outputs[i]);
        if (got == gold) ++exact;
        iou_sum += iou(dequantize(got), dequantize(gold));
      } catch (const ParseError& e) {
        ++r.unparsable;
        spdlog::debug("sample {}: unparsable output '{}': {}", start + i, outputs[i], e.what());
      }
    }
  }
  r.samples = data.size();
  r.exact_match = static_cast<double>(exact) / static_cast<double>(r.samples);
  r.mean_iou = iou_sum / static_cast<double>(r.samples);
  return r;
}

RecReport eval_rec(const Model& model, std::span<const Example> data, std::size_t batch_size) {
  return eval_rec(greedy_box_decoder(model, batch_size), data, batch_size);
}

std::vector<Example> examples_from_samples(const std::vector<Sample>& samples, const std::string& image_root) {
  std::map<std::string, Tensor> cache;
  std::vector<Example> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    Example ex{s.prompt, s.answer, std::nullopt};
    if (!s.image_ref.empty()) {
      const std::string path = (std::filesystem::path(image_root) / s.image_ref).string();
      auto it = cache.find(path);
      if (it == cache.end()) it = cache.emplace(path, read_ppm(path).to_tensor()).first;
      ex.image = it->second;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<Example> load_examples(const std::string& path) {
  if (!std::filesystem::exists(path)) throw IoError("dataset not found: " + path);
  const auto root = std::filesystem::path(path).parent_path().string();
  return examples_from_samples(read_samples_jsonl(path), root);
}

ModelConfig gradcheck_toy_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ff = 32;
  c.vocab_size = 64;
  c.max_seq = 32;
  c.patch.image_h = 4;
  c.patch.image_w = 4;
  c.patch.patch_size = 2;
  c.patch.encoder_layers = 1;
  c.patch.encoder_dim = 8;
  c.patch.encoder_heads = 2;
  return c;
}

std::vector<MixedSequence> random_check_batch(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  auto rng = stream(seed, 0);
  std::uniform_int_distribution<std::int64_t> id(0, config.vocab_size - 1);
  std::uniform_real_distribution<double> pixel(0.0, 1.0);
  auto ids = [&](std::size_t n) {
    std::vector<std::int64_t> v(n);
    for (auto& x : v) x = id(rng);
    return v;
  };
  const auto& pc = config.patch;
  std::vector<double> px(static_cast<std::size_t>(pc.image_h * pc.image_w * pc.channels));
  for (double& x : px) x = pixel(rng);

  MixedSequence with_image;
  with_image.pre_text = ids(2);
  with_image.image = Tensor({pc.image_h, pc.image_w, pc.channels}, std::move(px));
  with_image.post_text = ids(5);
  MixedSequence text_only;
  text_only.post_text = ids(4);

  std::vector<MixedSequence> batch{with_image, text_only};
  for (auto& seq : batch) {
    const auto L = static_cast<std::size_t>(layout_of(seq, config).total_len);
    seq.targets = ids(L);
    seq.loss_mask.assign(L, 0);
    // Mask the last two targets plus a random earlier one.
    seq.loss_mask[L - 1] = seq.loss_mask[L - 2] = 1;
    seq.loss_mask[std::uniform_int_distribution<std::size_t>(0, L - 1)(rng)] = 1;
  }
  return batch;
}

PipelineCheck check_pipeline_gradients(const Model& model, std::span<const MixedSequence> batch,
                                       const GradCheckOptions& options) {
  auto loss_fn = [&](Tape& tape) {
    ForwardOutput fwd = forward_hidden(tape, model, batch);
    const FlatTargets flat = flatten_targets(batch, fwd.layout);
    return masked_lm_loss_from_hidden(tape, model, fwd.hidden, flat.targets, flat.mask);
  };
  PipelineCheck out;
  const auto params = model.parameters();
  for (const auto& p : params) p.tensor.clear_grad();
  {
    Tape tape;
    tape.backward(loss_fn(tape));
    for (const auto& p : params) {
      if (!p.tensor.requires_grad() && p.tensor.has_grad()) out.frozen_with_grad.push_back(p.name);
      p.tensor.clear_grad();
    }
  }
  out.grads = grad_check(loss_fn, model.trainable_parameters(), options);
  std::vector<std::string> names;
  for (const auto& p : params) {
    if (p.tensor.requires_grad()) names.push_back(p.name);
  }
  if (out.grads.checked > 0 && out.grads.worst_tensor < names.size()) {
    out.grads.worst = names[out.grads.worst_tensor] + "[" + std::to_string(out.grads.worst_element) + "]";
  }
  return out;
}

}  // namespace vexpert
