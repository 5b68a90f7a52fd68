// SPDX-License-Identifier: Apache-2.0
//
// Box coordinates as 000-999 digit strings, conversions between grounded
// captions and REG/REC samples, prompt templates, and a synthetic REC set.
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "vexpert/tensor.hpp"

namespace vexpert {

/// Fractions of image width/height, 0 <= x0 <= x1 <= 1 and likewise for y.
struct BoundingBox {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  /// Throws InvalidArgument when an invariant does not hold.
  void validate() const;
  bool operator==(const BoundingBox&) const = default;
};

struct QuantizedBox {
  int qx0 = 0, qy0 = 0, qx1 = 0, qy1 = 0;

  void validate() const;
  bool operator==(const QuantizedBox&) const = default;
};

/// min(999, floor(1000 v)); v must lie in [0, 1].
int quantize_coord(double v);
/// (q + 0.5) / 1000; q must lie in [0, 999].
double dequantize_coord(int q);

QuantizedBox quantize(const BoundingBox& box);
BoundingBox dequantize(const QuantizedBox& q);

/// Always 19 characters: "[[DDD,DDD,DDD,DDD]]".
inline constexpr std::size_t kBoxTextLength = 19;
std::string serialize_box(const QuantizedBox& q);
/// Exact inverse of serialize_box. Throws ParseError naming the first
/// offending character offset.
QuantizedBox parse_box(std::string_view text);

/// Intersection over union; 0 when the union is empty.
double iou(const BoundingBox& a, const BoundingBox& b);

struct GroundingLink {
  std::size_t start = 0;  // byte offsets into the caption text, [start, end)
  std::size_t end = 0;
  BoundingBox box;
};

struct GroundedCaption {
  std::string text;
  std::vector<GroundingLink> links;

  /// Spans must be non-empty, inside the text, ascending and non-overlapping.
  void validate() const;
  std::string_view phrase(std::size_t link) const;
};

enum class Task { GC, REG, REC, GroundedVQA };

std::string to_string(Task t);  // "gc", "reg", "rec", "gvqa"
Task task_from_string(std::string_view s);

struct Sample {
  std::string prompt;
  std::string answer;
  Task task = Task::REC;
  std::string image_ref;
  bool operator==(const Sample&) const = default;
};

/// One sample per link: ("Describe this region [box].", "Phrase."), the
/// phrase written as a sentence (first letter upper-cased, final period).
std::vector<Sample> gc_to_reg(const GroundedCaption& caption, const std::string& image_ref = "");

struct RecConversion {
  std::vector<Sample> samples;
  std::size_t skipped_ambiguous = 0;
};

/// One ("Where is the {head}?", box) sample per link whose head is unique in
/// the caption; links sharing a head are all skipped and counted.
RecConversion gc_to_rec_counted(const GroundedCaption& caption, const std::string& image_ref = "");
std::vector<Sample> gc_to_rec(const GroundedCaption& caption, const std::string& image_ref = "");

/// Lower-cased phrase with a leading "a", "an", "the" or "another" removed
/// and surrounding whitespace and trailing punctuation trimmed.
std::string phrase_head(std::string_view phrase);

/// ("Where is the X?", box) -> ("Describe this region box.", "the X").
Sample rec_to_reg(const Sample& rec);
/// ("Describe this region box.", phrase) -> ("Where is the X?", box), where X
/// is the phrase head.
Sample reg_to_rec(const Sample& reg);

enum class PromptStyle { short_answer, long_answer };

/// "Question: {q} Short answer:" or "Question: {q} Answer:".
std::string format_prompt(std::string_view question, PromptStyle style);

/// 8-bit interleaved RGB image.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> rgb;  // height * width * 3

  std::uint8_t at(int y, int x, int c) const {
    return rgb[static_cast<std::size_t>((y * width + x) * 3 + c)];
  }
  /// [height, width, 3] with values scaled to [0, 1].
  Tensor to_tensor() const;
  bool operator==(const Image&) const = default;
};

void write_ppm(const std::string& path, const Image& image);
Image read_ppm(const std::string& path);

struct SynthItem {
  Image image;
  GroundedCaption caption;  // "a {color} square", one link over the whole text
  std::string color;
};

inline constexpr const char* kSynthColors[4] = {"red", "green", "blue", "yellow"};

/// Black `image_size` square images, each with one filled square of side
/// 1..max(1, grid/4) cells at a random cell-aligned position. Colors cycle
/// with the item index so classes are balanced. Item i depends only on
/// (seed, i), so index ranges may be generated independently.
std::vector<SynthItem> synth_rec_dataset(std::size_t n, std::uint64_t seed, int image_size, int grid,
                                         std::size_t first_index = 0);

/// Sample JSONL: {"task", "image", "prompt", "answer"} per line. Readers throw
/// DataError with the line number on schema violations.
void write_samples_jsonl(const std::string& path, const std::vector<Sample>& samples);
std::vector<Sample> read_samples_jsonl(const std::string& path);

/// Grounded caption JSONL: {"image", "caption", "links": [{"start", "end", "box"}]}.
struct CaptionRecord {
  std::string image;
  GroundedCaption caption;
};
void write_captions_jsonl(const std::string& path, const std::vector<CaptionRecord>& records);
std::vector<CaptionRecord> read_captions_jsonl(const std::string& path);

}  // namespace vexpert
