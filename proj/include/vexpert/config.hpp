// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <json.hpp>

namespace vexpert {

enum class ExpertPlacement { every_layer, every_kth, ffn_only, none };
enum class ExpertInit { from_llm, random };
enum class ImageMaskMode { causal, full_within_image };
enum class TrainStage { pretrain_caption, pretrain_mixed, sft };

/// Stand-in vision encoder geometry.
struct PatchConfig {
  int image_h = 32;
  int image_w = 32;
  int channels = 3;
  int patch_size = 8;
  int encoder_layers = 1;
  int encoder_dim = 64;
  int encoder_heads = 2;

  int patches() const { return (image_h / patch_size) * (image_w / patch_size); }
  int patch_values() const { return patch_size * patch_size * channels; }
  bool operator==(const PatchConfig&) const = default;
};

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_layers = 4;
  int d_ff = 128;
  int vocab_size = 259;
  int max_seq = 96;
  ExpertPlacement ve_placement = ExpertPlacement::every_layer;
  int ve_k = 4;  // only read for every_kth
  ExpertInit ve_init = ExpertInit::from_llm;
  ImageMaskMode image_mask_mode = ImageMaskMode::causal;
  PatchConfig patch;
  double rope_theta = 10000.0;
  double norm_eps = 1e-6;
  std::uint64_t seed = 0;

  int head_dim() const { return d_model / n_heads; }
  int adapter_hidden() const { return 4 * d_model; }
  int encoder_ffn() const { return 2 * patch.encoder_dim; }
  bool attention_expert(int layer) const;
  bool ffn_expert(int layer) const;

  /// Throws ConfigError when an invariant does not hold.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
  double lr_peak = 1e-4;
  int warmup_steps = 12000;
  int total_steps = 120000;
  int batch_size = 8192;
  double weight_decay = 0.05;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  bool ema_enabled = true;
  double ema_decay = 0.999;
  bool ssl_loss_enabled = false;
  double ssl_weight = 1.0;
  double dropout = 0.1;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
  TrainStage stage = TrainStage::pretrain_caption;

  /// Published hyperparameters for each stage; SFT has no published warmup and
  /// uses 10% of its steps.
  static TrainConfig for_stage(TrainStage stage);

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct DataConfig {
  std::string train;  // sample JSONL
  std::string eval;   // optional REC sample JSONL
  bool operator==(const DataConfig&) const = default;
};

/// Where the frozen decoder weights come from: a checkpoint's decoder
/// tensors, a text-only warm start of `pretrain_steps` steps, or (neither
/// set) the seeded random init.
struct BaseConfig {
  std::string checkpoint;
  int pretrain_steps = 0;
  double lr_peak = 3e-3;
  int warmup_steps = 20;

  void validate() const;
  bool operator==(const BaseConfig&) const = default;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  BaseConfig base;
  std::uint64_t seed = 0;
  bool operator==(const RunConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const RunConfig& c);

/// Strict parsers: unknown keys and wrong types raise ConfigError; absent
/// keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

std::string to_string(ExpertPlacement p);
std::string to_string(ExpertInit i);
std::string to_string(ImageMaskMode m);
std::string to_string(TrainStage s);

}  // namespace vexpert
