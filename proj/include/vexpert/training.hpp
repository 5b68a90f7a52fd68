// SPDX-License-Identifier: Apache-2.0
//
// Answer-masked language-model training of the trainable parameters:
// tokenization, loss, AdamW, warmup + cosine schedule, EMA shadow weights,
// the optional image SSL loss, and the train / REC eval loops.
#pragma once

#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vexpert/config.hpp"
#include "vexpert/gradcheck.hpp"
#include "vexpert/grounding.hpp"
#include "vexpert/model.hpp"

namespace vexpert {

/// Byte-level vocabulary: ids 0..255 are bytes, then three specials.
namespace tokens {
inline constexpr std::int64_t kBos = 256;
inline constexpr std::int64_t kEos = 257;
inline constexpr std::int64_t kPad = 258;
inline constexpr std::int64_t kVocab = 259;
}  // namespace tokens

std::vector<std::int64_t> encode_text(std::string_view text);
/// Bytes back to text; any special id becomes U+FFFD's byte sequence, so the
/// result never silently drops a token.
std::string decode_tokens(std::span<const std::int64_t> ids);

/// A prompt/answer pair with its image, ready to become a sequence.
struct Example {
  std::string prompt;
  std::string answer;
  std::optional<Tensor> image;  // [image_h, image_w, channels]
};

/// [BOS] [image] prompt " " answer, trained to predict answer bytes and EOS.
/// targets[p] is the token at row p + 1 (kPad where the next row is an image
/// row, EOS at the last row); loss_mask marks answer and EOS targets only.
MixedSequence make_training_sequence(const Example& ex, const ModelConfig& config);
/// [BOS] [image] prompt " ", the prefix greedy decoding continues from.
MixedSequence make_prompt_sequence(const std::string& prompt, const std::optional<Tensor>& image);

/// Loads a sample JSONL file; image paths are relative to the file's folder.
std::vector<Example> load_examples(const std::string& path);
std::vector<Example> examples_from_samples(const std::vector<Sample>& samples, const std::string& image_root);

/// Targets and mask of a batch flattened to the batch layout's rows (pad rows
/// get kPad and mask false).
struct FlatTargets {
  std::vector<std::int64_t> targets;
  std::vector<std::uint8_t> mask;
};
FlatTargets flatten_targets(std::span<const MixedSequence> batch, const BatchLayout& layout);

/// Mean cross-entropy of logits [B, L, V] over the masked positions only.
/// Throws DomainError when no position is masked.
Tensor masked_lm_loss(Tape& tape, const Tensor& logits, std::span<const std::int64_t> targets,
                      std::span<const std::uint8_t> loss_mask);

/// Same loss computed from final hidden rows, projecting only masked rows
/// through the output head.
Tensor masked_lm_loss_from_hidden(Tape& tape, const Model& model, const Tensor& hidden,
                                  std::span<const std::int64_t> targets, std::span<const std::uint8_t> loss_mask);

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct OptimizerState {
  std::vector<std::vector<double>> m, v;  // one pair per parameter
  std::int64_t step = 0;
};

OptimizerState make_optimizer_state(std::span<const Tensor> params);

/// One bias-corrected Adam step with decoupled weight decay lr * wd * theta.
/// Tensors with requires_grad == false are skipped; a trainable tensor without
/// a gradient raises InvalidArgument.
void adamw_step(std::span<Tensor> params, OptimizerState& state, double lr, const AdamWOptions& options);

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before scaling. max_norm <= 0 only measures.
double clip_grad_norm(std::span<const Tensor> params, double max_norm);

/// Linear warmup from 0 to lr_peak, then cosine decay to 0 at total_steps.
double lr_at(std::int64_t step, const TrainConfig& cfg);

struct EmaState {
  std::vector<Tensor> shadow;  // detached copies, same order as the tracked params
  double decay = 0.999;
};

EmaState ema_init(std::span<const Tensor> params, double decay);
/// shadow <- decay * shadow + (1 - decay) * param.
void ema_update(EmaState& ema, std::span<const Tensor> params);

/// Linear head hidden row i -> prediction of target row i + 1, scored with
/// mean squared error over rows 0..L-2. `head` is [D, D_t].
Tensor image_ssl_loss(Tape& tape, const Tensor& hidden_image, const Tensor& target_feats, const Tensor& head);

struct StepMetrics {
  std::int64_t step = 0;
  double lr = 0;
  double loss = 0;
  bool ema = false;
};

/// Append-only JSONL sink, safe to call from several threads.
class MetricsLog {
 public:
  explicit MetricsLog(std::ostream* out = nullptr) : out_(out) {}
  void append(const StepMetrics& m);
  std::vector<StepMetrics> entries() const;

 private:
  mutable std::mutex mu_;
  std::ostream* out_;
  std::vector<StepMetrics> entries_;
};

struct TrainOptions {
  std::uint64_t seed = 0;
  MetricsLog* log = nullptr;
  /// Called after each step with (step, loss); may be empty.
  std::function<void(std::int64_t, double)> on_step;
};

struct TrainResult {
  Model model;
  std::optional<Model> ema_model;  // present when EMA is enabled
  std::vector<StepMetrics> metrics;
};

/// Trains the model's trainable tensors for cfg.total_steps steps of
/// cfg.batch_size shuffled examples. Deterministic given options.seed.
TrainResult train(Model model, std::span<const Example> data, const TrainConfig& cfg, const TrainOptions& options = {});

/// Stand-in for a pretrained language model: a fresh decoder for `config`
/// trained on the examples' text alone (images dropped, experts and vision
/// frozen). Returns the decoder tensors by name for
/// build_model(config, &weights). EMA and the SSL loss are ignored.
TensorMap pretrain_base_decoder(const ModelConfig& config, std::span<const Example> data, const TrainConfig& cfg,
                                const TrainOptions& options = {});

/// Model copy whose trainable tensors take the EMA shadow values.
Model with_ema_weights(const Model& model, const EmaState& ema);

/// Maps a batch of examples to exactly kBoxTextLength decoded characters each.
using BoxDecoder = std::function<std::vector<std::string>(std::span<const Example>)>;

/// Greedy decoding of kBoxTextLength bytes after the prompt.
BoxDecoder greedy_box_decoder(const Model& model, std::size_t batch_size = 32);

struct RecReport {
  double exact_match = 0;
  double mean_iou = 0;
  std::size_t samples = 0;
  std::size_t unparsable = 0;
};

/// Decodes every example and compares against its gold box answer;
/// unparsable output scores as a miss with IoU 0.
RecReport eval_rec(const BoxDecoder& decoder, std::span<const Example> data, std::size_t batch_size = 32);
RecReport eval_rec(const Model& model, std::span<const Example> data, std::size_t batch_size = 32);

/// 2 layers, D=16, H=2, vocab 64, one 4x4 image cut into 2x2 patches of
/// 2x2 pixels: small enough to finite-difference every trainable element.
ModelConfig gradcheck_toy_config();

/// Two sequences with random in-vocabulary ids, targets and answer masks:
/// one with an image between text spans, one shorter text-only sequence
/// (so the batch carries padding).
std::vector<MixedSequence> random_check_batch(const ModelConfig& config, std::uint64_t seed);

struct PipelineCheck {
  GradCheckReport grads;
  std::vector<std::string> frozen_with_grad;  // names of frozen tensors that received a gradient
  bool passed() const { return grads.passed && frozen_with_grad.empty(); }
};

/// Finite-difference check of the masked LM loss with respect to every
/// trainable tensor, plus a check that no frozen tensor gets a gradient.
PipelineCheck check_pipeline_gradients(const Model& model, std::span<const MixedSequence> batch,
                                       const GradCheckOptions& options);

}  // namespace vexpert
