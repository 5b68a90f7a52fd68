// SPDX-License-Identifier: Apache-2.0
#include "vexpert/config.hpp"

#include <fstream>
#include <set>

#include "vexpert/error.hpp"

namespace vexpert {

using nlohmann::json;

namespace {

template <class E>
struct EnumNames;

template <>
struct EnumNames<ExpertPlacement> {
  static constexpr std::pair<ExpertPlacement, const char*> values[] = {
      {ExpertPlacement::every_layer, "every_layer"},
      {ExpertPlacement::every_kth, "every_kth"},
      {ExpertPlacement::ffn_only, "ffn_only"},
      {ExpertPlacement::none, "none"}};
};
template <>
struct EnumNames<ExpertInit> {
  static constexpr std::pair<ExpertInit, const char*> values[] = {{ExpertInit::from_llm, "from_llm"},
                                                                  {ExpertInit::random, "random"}};
};
template <>
struct EnumNames<ImageMaskMode> {
  static constexpr std::pair<ImageMaskMode, const char*> values[] = {
      {ImageMaskMode::causal, "causal"}, {ImageMaskMode::full_within_image, "full_within_image"}};
};
template <>
struct EnumNames<TrainStage> {
  static constexpr std::pair<TrainStage, const char*> values[] = {{TrainStage::pretrain_caption, "pretrain_caption"},
                                                                  {TrainStage::pretrain_mixed, "pretrain_mixed"},
                                                                  {TrainStage::sft, "sft"}};
};

template <class E>
std::string enum_name(E e) {
  for (const auto& [v, n] : EnumNames<E>::values)
    if (v == e) return n;
  return "?";
}

template <class E>
E enum_from(const json& j, const std::string& key) {
  if (!j.is_string()) throw ConfigError("'" + key + "' must be a string");
  const auto s = j.get<std::string>();
  for (const auto& [v, n] : EnumNames<E>::values)
    if (s == n) return v;
  throw ConfigError("'" + key + "' has unknown value '" + s + "'");
}

// Reads the object's keys into fields; anything unhandled is an error.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be a JSON object");
  }
  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown key '" + k + "' in " + where_);
    }
  }
  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  template <class T>
  void get(const std::string& key, T& out) {
    const json* v = find(key);
    if (!v) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v->is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v->is_number_integer()) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v->is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v->is_string()) throw ConfigError("");
      }
      out = v->get<T>();
    } catch (const std::exception&) {
      throw ConfigError("'" + key + "' in " + where_ + " has the wrong type");
    }
  }
  template <class E>
  void get_enum(const std::string& key, E& out) {
    if (const json* v = find(key)) out = enum_from<E>(*v, key);
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace

std::string to_string(ExpertPlacement p) { return enum_name(p); }
std::string to_string(ExpertInit i) { return enum_name(i); }
std::string to_string(ImageMaskMode m) { return enum_name(m); }
std::string to_string(TrainStage s) { return enum_name(s); }

bool ModelConfig::attention_expert(int layer) const {
  switch (ve_placement) {
    case ExpertPlacement::every_layer:
      return true;
    case ExpertPlacement::every_kth:
      return layer % ve_k == 0;
    case ExpertPlacement::ffn_only:
    case ExpertPlacement::none:
      return false;
  }
  return false;
}

bool ModelConfig::ffn_expert(int layer) const {
  switch (ve_placement) {
    case ExpertPlacement::every_layer:
    case ExpertPlacement::ffn_only:
      return true;
    case ExpertPlacement::every_kth:
      return layer % ve_k == 0;
    case ExpertPlacement::none:
      return false;
  }
  return false;
}

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(d_model > 0 && n_heads > 0 && n_layers > 0 && d_ff > 0, "model dimensions must be positive");
  need(vocab_size > 0 && max_seq > 0, "vocab_size and max_seq must be positive");
  need(d_model % n_heads == 0, "d_model must be divisible by n_heads");
  need(head_dim() % 2 == 0, "head dimension must be even for rotary embedding");
  need(patch.image_h > 0 && patch.image_w > 0 && patch.channels > 0 && patch.patch_size > 0,
       "image geometry must be positive");
  need(patch.image_h % patch.patch_size == 0 && patch.image_w % patch.patch_size == 0,
       "image size must be a multiple of patch_size");
  need(patch.encoder_layers >= 0 && patch.encoder_dim > 0 && patch.encoder_heads > 0, "bad encoder geometry");
  need(patch.encoder_dim % patch.encoder_heads == 0, "encoder_dim must be divisible by encoder_heads");
  need(rope_theta > 0 && norm_eps > 0, "rope_theta and norm_eps must be positive");
  if (ve_placement == ExpertPlacement::every_kth) {
    need(ve_k > 0 && ve_k <= n_layers, "every_kth placement needs 0 < ve_k <= n_layers");
  }
}

TrainConfig TrainConfig::for_stage(TrainStage stage) {
  TrainConfig c;
  c.stage = stage;
  switch (stage) {
    case TrainStage::pretrain_caption:
      break;
    case TrainStage::pretrain_mixed:
      c.lr_peak = 1e-5;
      c.warmup_steps = 1200;
      c.total_steps = 60000;
      c.batch_size = 1024;
      break;
    case TrainStage::sft:
      c.lr_peak = 1e-5;
      c.total_steps = 6000;
      c.warmup_steps = 600;
      c.batch_size = 1024;
      c.weight_decay = 0.1;
      break;
  }
  return c;
}

void TrainConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(warmup_steps > 0 && warmup_steps <= total_steps, "need 0 < warmup_steps <= total_steps");
  need(batch_size > 0, "batch_size must be positive");
  need(lr_peak >= 0 && weight_decay >= 0, "lr_peak and weight_decay must be non-negative");
  need(adam_beta1 > 0 && adam_beta1 < 1 && adam_beta2 > 0 && adam_beta2 < 1, "Adam betas must lie in (0, 1)");
  need(adam_eps > 0, "adam_eps must be positive");
  need(ema_decay > 0 && ema_decay < 1, "ema_decay must lie in (0, 1)");
  need(dropout >= 0 && dropout < 1, "dropout must lie in [0, 1)");
  need(grad_clip >= 0 && ssl_weight >= 0, "grad_clip and ssl_weight must be non-negative");
}

json to_json(const ModelConfig& c) {
  return json{{"d_model", c.d_model},
              {"n_heads", c.n_heads},
              {"n_layers", c.n_layers},
              {"d_ff", c.d_ff},
              {"vocab_size", c.vocab_size},
              {"max_seq", c.max_seq},
              {"ve_placement", to_string(c.ve_placement)},
              {"ve_k", c.ve_k},
              {"ve_init", to_string(c.ve_init)},
              {"image_mask_mode", to_string(c.image_mask_mode)},
              {"patch",
               {{"image_h", c.patch.image_h},
                {"image_w", c.patch.image_w},
                {"channels", c.patch.channels},
                {"patch_size", c.patch.patch_size},
                {"encoder_layers", c.patch.encoder_layers},
                {"encoder_dim", c.patch.encoder_dim},
                {"encoder_heads", c.patch.encoder_heads}}},
              {"rope_theta", c.rope_theta},
              {"norm_eps", c.norm_eps},
              {"seed", c.seed}};
}

json to_json(const TrainConfig& c) {
  return json{{"lr_peak", c.lr_peak},
              {"warmup_steps", c.warmup_steps},
              {"total_steps", c.total_steps},
              {"batch_size", c.batch_size},
              {"weight_decay", c.weight_decay},
              {"adam_beta1", c.adam_beta1},
              {"adam_beta2", c.adam_beta2},
              {"adam_eps", c.adam_eps},
              {"ema_enabled", c.ema_enabled},
              {"ema_decay", c.ema_decay},
              {"ssl_loss_enabled", c.ssl_loss_enabled},
              {"ssl_weight", c.ssl_weight},
              {"dropout", c.dropout},
              {"grad_clip", c.grad_clip},
              {"stage", to_string(c.stage)}};
}

json to_json(const RunConfig& c) {
  return json{{"model", to_json(c.model)},
              {"train", to_json(c.train)},
              {"data", {{"train", c.data.train}, {"eval", c.data.eval}}},
              {"base",
               {{"checkpoint", c.base.checkpoint},
                {"pretrain_steps", c.base.pretrain_steps},
                {"lr_peak", c.base.lr_peak},
                {"warmup_steps", c.base.warmup_steps}}},
              {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  {
    Reader r(j, "model config");
    r.get("d_model", c.d_model);
    r.get("n_heads", c.n_heads);
    r.get("n_layers", c.n_layers);
    r.get("d_ff", c.d_ff);
    r.get("vocab_size", c.vocab_size);
    r.get("max_seq", c.max_seq);
    r.get_enum("ve_placement", c.ve_placement);
    r.get("ve_k", c.ve_k);
    r.get_enum("ve_init", c.ve_init);
    r.get_enum("image_mask_mode", c.image_mask_mode);
    if (const json* p = r.find("patch")) {
      Reader pr(*p, "patch config");
      pr.get("image_h", c.patch.image_h);
      pr.get("image_w", c.patch.image_w);
      pr.get("channels", c.patch.channels);
      pr.get("patch_size", c.patch.patch_size);
      pr.get("encoder_layers", c.patch.encoder_layers);
      pr.get("encoder_dim", c.patch.encoder_dim);
      pr.get("encoder_heads", c.patch.encoder_heads);
      pr.finish();
    }
    r.get("rope_theta", c.rope_theta);
    r.get("norm_eps", c.norm_eps);
    r.get("seed", c.seed);
    r.finish();
  }
  c.validate();
  return c;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  {
    // The stage picks the defaults the remaining keys override.
    Reader r(j, "train config");
    r.get_enum("stage", c.stage);
    c = TrainConfig::for_stage(c.stage);
    r.get("lr_peak", c.lr_peak);
    r.get("warmup_steps", c.warmup_steps);
    r.get("total_steps", c.total_steps);
    r.get("batch_size", c.batch_size);
    r.get("weight_decay", c.weight_decay);
    r.get("adam_beta1", c.adam_beta1);
    r.get("adam_beta2", c.adam_beta2);
    r.get("adam_eps", c.adam_eps);
    r.get("ema_enabled", c.ema_enabled);
    r.get("ema_decay", c.ema_decay);
    r.get("ssl_loss_enabled", c.ssl_loss_enabled);
    r.get("ssl_weight", c.ssl_weight);
    r.get("dropout", c.dropout);
    r.get("grad_clip", c.grad_clip);
    r.finish();
  }
  c.validate();
  return c;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  Reader r(j, "run config");
  if (const json* m = r.find("model")) c.model = model_config_from_json(*m);
  if (const json* t = r.find("train")) c.train = train_config_from_json(*t);
  if (const json* d = r.find("data")) {
    Reader dr(*d, "data config");
    dr.get("train", c.data.train);
    dr.get("eval", c.data.eval);
    dr.finish();
  }
  if (const json* b = r.find("base")) {
    Reader br(*b, "base config");
    br.get("checkpoint", c.base.checkpoint);
    br.get("pretrain_steps", c.base.pretrain_steps);
    br.get("lr_peak", c.base.lr_peak);
    br.get("warmup_steps", c.base.warmup_steps);
    br.finish();
  }
  c.base.validate();
  r.get("seed", c.seed);
  r.finish();
  return c;
}

void BaseConfig::validate() const {
  if (pretrain_steps < 0) throw ConfigError("base.pretrain_steps must be >= 0");
  if (!checkpoint.empty() && pretrain_steps > 0) {
    throw ConfigError("base.checkpoint and base.pretrain_steps are mutually exclusive");
  }
  if (pretrain_steps > 0) {
    if (!(lr_peak > 0)) throw ConfigError("base.lr_peak must be > 0");
    if (warmup_steps <= 0 || warmup_steps > pretrain_steps) {
      throw ConfigError("base.warmup_steps must lie in [1, pretrain_steps]");
    }
  }
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace vexpert
