// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only language model with a per-layer visual expert: image rows of
// the sequence use their own trainable QKV and FFN weights while text rows
// use the frozen base weights. Attention itself runs over the whole mixed
// sequence with one shared output projection.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vexpert/config.hpp"
#include "vexpert/ops.hpp"
#include "vexpert/tensor.hpp"

namespace vexpert {

struct AttentionBranch {
  Tensor wq, wk, wv;  // [D, D]
};

/// SwiGLU block: down(silu(x gate) * (x up)).
struct FfnBranch {
  Tensor gate, up;  // [in, hidden]
  Tensor down;      // [hidden, out]
};

struct LayerWeights {
  AttentionBranch attn_text;
  Tensor wo;  // shared by both branches
  FfnBranch ffn_text;
  Tensor attn_norm, ffn_norm;
  std::optional<AttentionBranch> attn_image;
  std::optional<FfnBranch> ffn_image;
};

struct EncoderLayer {
  Tensor norm1, wq, wk, wv, wo, norm2;
  FfnBranch ffn;
};

/// Patchify, linear embedding plus learned position embedding, then
/// bidirectional transformer layers. Emits one feature row per patch and no
/// pooled token.
struct PatchEncoder {
  Tensor proj;  // [patch_size^2 * channels, encoder_dim]
  Tensor bias;  // [encoder_dim]
  Tensor pos;   // [patches, encoder_dim]
  std::vector<EncoderLayer> layers;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using TensorMap = std::map<std::string, Tensor>;

struct Model {
  ModelConfig config;
  Tensor embedding;  // [V, D], tied with the output head
  std::vector<LayerWeights> layers;
  Tensor final_norm;
  PatchEncoder encoder;
  FfnBranch adapter;  // encoder_dim -> 4D -> D

  /// Every tensor in a fixed order with stable dotted names.
  std::vector<NamedTensor> parameters() const;
  std::vector<Tensor> trainable_parameters() const;
  std::vector<Tensor> frozen_parameters() const;
  /// Deep copy; the clone shares no storage with this model.
  Model clone() const;
};

/// Builds the model. Frozen decoder tensors are drawn from N(0, 0.02) with a
/// seeded generator, or copied from `base_weights` (by parameter name) when
/// given. Experts copy the text branch (from_llm) or draw fresh values.
Model build_model(const ModelConfig& config, const TensorMap* base_weights = nullptr);

/// One sample: [pre_text] [image block] [post_text].
struct MixedSequence {
  std::vector<std::int64_t> pre_text;
  std::optional<Tensor> image;  // [image_h, image_w, channels], values in [0, 1]
  std::vector<std::int64_t> post_text;
  std::vector<std::int64_t> targets;    // next-token id per position (may be empty for inference)
  std::vector<std::uint8_t> loss_mask;  // true where the target is an answer token
};

struct SequenceLayout {
  std::int64_t image_start = 0;
  std::int64_t image_len = 0;
  std::int64_t total_len = 0;
};

SequenceLayout layout_of(const MixedSequence& seq, const ModelConfig& config);

/// Positions for rotary embedding: text counts up normally, every image row
/// shares the id image_start, and text after the image continues from
/// image_start + 1.
std::vector<std::int64_t> position_ids(const SequenceLayout& layout);

/// Right-padded batch of layouts flattened to batch * length rows.
struct BatchLayout {
  std::int64_t batch = 0;
  std::int64_t length = 0;
  std::vector<SequenceLayout> sequences;
  std::vector<std::int64_t> image_rows;  // ascending flat row indices
  std::vector<std::int64_t> text_rows;   // every other row, padding included
  std::vector<std::uint8_t> pad;         // per flat row
  std::vector<std::int64_t> positions;   // per flat row
  ops::AttentionMask mask;
};

BatchLayout make_batch_layout(std::span<const SequenceLayout> sequences, ImageMaskMode mode);

/// Non-overlapping patches of one image, [patches, patch_size^2 * channels].
Tensor patchify(const Tensor& image, const PatchConfig& patch);

/// Encodes `images` and stacks their features: [images.size() * patches, encoder_dim].
Tensor patch_encode(Tape& tape, const Model& model, std::span<const Tensor> images);

Tensor swiglu(Tape& tape, const FfnBranch& w, const Tensor& x);
Tensor mlp_adapter(Tape& tape, const Model& model, const Tensor& features);

Tensor rope_apply(Tape& tape, const Tensor& q_or_k, std::span<const std::int64_t> ids, double theta);

/// Attention over rows x [batch * length, D] (already normalised). Image rows
/// are projected with the expert QKV when the layer has one and `use_expert`
/// is set; everything else uses the frozen text projections.
Tensor ve_attention(Tape& tape, const Tensor& x, const BatchLayout& layout, const LayerWeights& w,
                    const ModelConfig& config, bool use_expert = true);

/// FFN with image rows through the expert FFN, text rows through the frozen FFN.
Tensor ve_ffn(Tape& tape, const Tensor& x, const BatchLayout& layout, const LayerWeights& w, bool use_expert = true);

struct ForwardOptions {
  /// When false, image rows go through the frozen branch too, i.e. the
  /// shared-weight decoder.
  bool use_expert = true;
  double dropout = 0;
  std::mt19937_64* rng = nullptr;
};

struct ForwardOutput {
  Tensor hidden;          // [batch * length, D] after the final norm
  Tensor image_features;  // [n_images * patches, encoder_dim], encoder output
  BatchLayout layout;
};

ForwardOutput forward_hidden(Tape& tape, const Model& model, std::span<const MixedSequence> batch,
                             const ForwardOptions& options = {});

/// Tied output head on the selected flat rows of `hidden`: [rows, V].
Tensor logits_for_rows(Tape& tape, const Model& model, const Tensor& hidden, std::span<const std::int64_t> rows);

/// Full logits [batch, length, V].
Tensor forward(Tape& tape, const Model& model, std::span<const MixedSequence> batch,
               const ForwardOptions& options = {});

struct ParamCounts {
  std::int64_t frozen = 0;
  std::int64_t trainable = 0;
  std::int64_t total = 0;
  std::int64_t frozen_qkv_ffn = 0;  // text-branch QKV + FFN over all layers
  std::int64_t expert_qkv_ffn = 0;  // image-branch QKV + FFN over all layers
  std::int64_t vision = 0;          // encoder + adapter
};

ParamCounts count_params(const ModelConfig& config);

struct FlopCount {
  std::int64_t total = 0;      // multiply-adds for the whole sequence
  std::int64_t decoder = 0;    // projections, FFNs, attention and output head
  std::int64_t vision = 0;     // encoder + adapter
  double per_token = 0;        // total / (image_len + text_len)
};

/// Closed-form multiply-add count of one forward pass over a sequence with
/// `image_len` image rows and `text_len` text rows.
FlopCount count_flops(const ModelConfig& config, std::int64_t image_len, std::int64_t text_len);

}  // namespace vexpert
