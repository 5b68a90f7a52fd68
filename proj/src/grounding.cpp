// SPDX-License-Identifier: Apache-2.0
#include "vexpert/grounding.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include <json.hpp>

#include "vexpert/error.hpp"

namespace vexpert {

using nlohmann::json;

namespace {

constexpr std::string_view kRegPrefix = "Describe this region ";
constexpr std::string_view kRecPrefix = "Where is the ";

void check_unit(double v, const char* name) {
  if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
    throw InvalidArgument(std::string("box coordinate ") + name + " = " + std::to_string(v) + " outside [0, 1]");
  }
}

void check_q(int q, const char* name) {
  if (q < 0 || q > 999) {
    throw InvalidArgument(std::string("quantized coordinate ") + name + " = " + std::to_string(q) +
                          " outside [0, 999]");
  }
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string as_sentence(std::string_view phrase) {
  std::string s = trim(phrase);
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  if (s.empty() || s.back() != '.') s += '.';
  return s;
}

}  // namespace

void BoundingBox::validate() const {
  check_unit(x0, "x0");
  check_unit(y0, "y0");
  check_unit(x1, "x1");
  check_unit(y1, "y1");
  if (x0 > x1 || y0 > y1) {
    throw InvalidArgument("malformed box: need x0 <= x1 and y0 <= y1, got (" + std::to_string(x0) + ", " +
                          std::to_string(y0) + ", " + std::to_string(x1) + ", " + std::to_string(y1) + ")");
  }
}

void QuantizedBox::validate() const {
  check_q(qx0, "qx0");
  check_q(qy0, "qy0");
  check_q(qx1, "qx1");
  check_q(qy1, "qy1");
  if (qx0 > qx1 || qy0 > qy1) throw InvalidArgument("malformed quantized box: need qx0 <= qx1 and qy0 <= qy1");
}

int quantize_coord(double v) {
  check_unit(v, "v");
  return std::min(999, static_cast<int>(std::floor(1000.0 * v)));
}

double dequantize_coord(int q) {
  check_q(q, "q");
  return (q + 0.5) / 1000.0;
}

QuantizedBox quantize(const BoundingBox& b) {
  b.validate();
  return {quantize_coord(b.x0), quantize_coord(b.y0), quantize_coord(b.x1), quantize_coord(b.y1)};
}

BoundingBox dequantize(const QuantizedBox& q) {
  q.validate();
  return {dequantize_coord(q.qx0), dequantize_coord(q.qy0), dequantize_coord(q.qx1), dequantize_coord(q.qy1)};
}

std::string serialize_box(const QuantizedBox& q) {
  q.validate();
  char buf[32];
  std::snprintf(buf, sizeof buf, "[[%03d,%03d,%03d,%03d]]", q.qx0, q.qy0, q.qx1, q.qy1);
  return buf;
}

QuantizedBox parse_box(std::string_view text) {
  // 'D' marks a digit slot.
  static constexpr std::string_view kTemplate = "[[DDD,DDD,DDD,DDD]]";
  const std::size_t n = std::min(text.size(), kTemplate.size());
  for (std::size_t i = 0; i < n; ++i) {
    const char want = kTemplate[i];
    const char got = text[i];
    const bool ok = want == 'D' ? std::isdigit(static_cast<unsigned char>(got)) != 0 : got == want;
    if (!ok) {
      throw ParseError(std::string("box: expected ") + (want == 'D' ? "a digit" : std::string("'") + want + "'") +
                           ", got '" + got + "'",
                       i);
    }
  }
  if (text.size() < kTemplate.size()) throw ParseError("box: text ends early", text.size());
  if (text.size() > kTemplate.size()) throw ParseError("box: trailing characters", kTemplate.size());
  auto field = [&](std::size_t at) {
    return (text[at] - '0') * 100 + (text[at + 1] - '0') * 10 + (text[at + 2] - '0');
  };
  QuantizedBox q{field(2), field(6), field(10), field(14)};
  if (q.qx0 > q.qx1) throw ParseError("box: x1 is smaller than x0", 10);
  if (q.qy0 > q.qy1) throw ParseError("box: y1 is smaller than y0", 14);
  return q;
}

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double ix = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double iy = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = ix * iy;
  const double uni = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

void GroundedCaption::validate() const {
  std::size_t prev_end = 0;
  for (std::size_t i = 0; i < links.size(); ++i) {
    const auto& l = links[i];
    if (l.start >= l.end || l.end > text.size()) {
      throw InvalidArgument("link " + std::to_string(i) + " span [" + std::to_string(l.start) + ", " +
                            std::to_string(l.end) + ") is empty or outside the caption");
    }
    if (l.start < prev_end) throw InvalidArgument("link " + std::to_string(i) + " overlaps or precedes its predecessor");
    l.box.validate();
    prev_end = l.end;
  }
}

std::string_view GroundedCaption::phrase(std::size_t link) const {
  const auto& l = links.at(link);
  return std::string_view(text).substr(l.start, l.end - l.start);
}

std::string to_string(Task t) {
  switch (t) {
    case Task::GC: return "gc";
    case Task::REG: return "reg";
    case Task::REC: return "rec";
    case Task::GroundedVQA: return "gvqa";
  }
  return "?";
}

Task task_from_string(std::string_view s) {
  if (s == "gc") return Task::GC;
  if (s == "reg") return Task::REG;
  if (s == "rec") return Task::REC;
  if (s == "gvqa") return Task::GroundedVQA;
  throw InvalidArgument("unknown task '" + std::string(s) + "' (expected gc, reg, rec or gvqa)");
}

std::string phrase_head(std::string_view phrase) {
  std::string s = lower(trim(phrase));
  while (!s.empty() && std::ispunct(static_cast<unsigned char>(s.back()))) s.pop_back();
  for (std::string_view article : {"another ", "the ", "an ", "a "}) {
    if (s.starts_with(article)) {
      s = trim(std::string_view(s).substr(article.size()));
      break;
    }
  }
  return s;
}

std::vector<Sample> gc_to_reg(const GroundedCaption& caption, const std::string& image_ref) {
  caption.validate();
  std::vector<Sample> out;
  out.reserve(caption.links.size());
  for (std::size_t i = 0; i < caption.links.size(); ++i) {
    const std::string box = serialize_box(quantize(caption.links[i].box));
    out.push_back({std::string(kRegPrefix) + box + ".", as_sentence(caption.phrase(i)), Task::REG, image_ref});
  }
  return out;
}

RecConversion gc_to_rec_counted(const GroundedCaption& caption, const std::string& image_ref) {
  caption.validate();
  std::vector<std::string> heads;
  std::map<std::string, int> seen;
  for (std::size_t i = 0; i < caption.links.size(); ++i) {
    heads.push_back(phrase_head(caption.phrase(i)));
    ++seen[heads.back()];
  }
  RecConversion out;
  for (std::size_t i = 0; i < caption.links.size(); ++i) {
    if (seen[heads[i]] > 1) {
      ++out.skipped_ambiguous;
      continue;
    }
    out.samples.push_back({std::string(kRecPrefix) + heads[i] + "?", serialize_box(quantize(caption.links[i].box)),
                           Task::REC, image_ref});
  }
  return out;
}

std::vector<Sample> gc_to_rec(const GroundedCaption& caption, const std::string& image_ref) {
  return gc_to_rec_counted(caption, image_ref).samples;
}

Sample rec_to_reg(const Sample& rec) {
  if (rec.task != Task::REC) throw InvalidArgument("rec_to_reg needs a REC sample, got " + to_string(rec.task));
  const std::string_view p = rec.prompt;
  if (!p.starts_with(kRecPrefix) || !p.ends_with("?") || p.size() <= kRecPrefix.size() + 1) {
    throw InvalidArgument("REC prompt does not match \"Where is the X?\": " + rec.prompt);
  }
  const QuantizedBox box = parse_box(rec.answer);
  const std::string referent(p.substr(kRecPrefix.size(), p.size() - kRecPrefix.size() - 1));
  return {std::string(kRegPrefix) + serialize_box(box) + ".", "the " + referent, Task::REG, rec.image_ref};
}

Sample reg_to_rec(const Sample& reg) {
  if (reg.task != Task::REG) throw InvalidArgument("reg_to_rec needs a REG sample, got " + to_string(reg.task));
  const std::string_view p = reg.prompt;
  if (!p.starts_with(kRegPrefix) || !p.ends_with(".") || p.size() != kRegPrefix.size() + kBoxTextLength + 1) {
    throw InvalidArgument("REG prompt does not match \"Describe this region [box].\": " + reg.prompt);
  }
  const QuantizedBox box = parse_box(p.substr(kRegPrefix.size(), kBoxTextLength));
  const std::string head = phrase_head(reg.answer);
  if (head.empty()) throw InvalidArgument("REG answer has no phrase: '" + reg.answer + "'");
  return {std::string(kRecPrefix) + head + "?", serialize_box(box), Task::REC, reg.image_ref};
}

std::string format_prompt(std::string_view question, PromptStyle style) {
  if (trim(question).empty()) throw InvalidArgument("format_prompt: empty question");
  const char* tail = style == PromptStyle::short_answer ? " Short answer:" : " Answer:";
  return "Question: " + std::string(question) + tail;
}

Tensor Image::to_tensor() const {
  std::vector<double> v(rgb.size());
  for (std::size_t i = 0; i < rgb.size(); ++i) v[i] = rgb[i] / 255.0;
  return Tensor({height, width, 3}, std::move(v));
}

void write_ppm(const std::string& path, const Image& image) {
  if (image.rgb.size() != static_cast<std::size_t>(image.height) * image.width * 3) {
    throw InvalidArgument("image buffer does not match its dimensions");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.rgb.data()), static_cast<std::streamsize>(image.rgb.size()));
  if (!out) throw IoError("write failed: " + path);
}

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  auto token = [&]() {
    std::string t;
    int c;
    while ((c = in.get()) != EOF) {
      if (c == '#') {
        while ((c = in.get()) != EOF && c != '\n') {
        }
        continue;
      }
      if (std::isspace(c)) {
        if (!t.empty()) break;
        continue;
      }
      t += static_cast<char>(c);
    }
    return t;
  };
  if (token() != "P6") throw IoError(path + ": not a binary PPM (P6) file");
  Image img;
  int maxval = 0;
  try {
    img.width = std::stoi(token());
    img.height = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw IoError(path + ": malformed PPM header");
  }
  if (img.width <= 0 || img.height <= 0 || maxval != 255) throw IoError(path + ": unsupported PPM geometry or depth");
  img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.rgb.size())) throw IoError(path + ": truncated pixel data");
  return img;
}

std::vector<SynthItem> synth_rec_dataset(std::size_t n, std::uint64_t seed, int image_size, int grid,
                                         std::size_t first_index) {
  if (image_size <= 0 || grid <= 0 || image_size % grid != 0) {
    throw InvalidArgument("grid " + std::to_string(grid) + " must divide image size " + std::to_string(image_size));
  }
  const int cell = image_size / grid;
  const int max_side = std::max(1, grid / 4);
  static const std::uint8_t kRgb[4][3] = {{255, 0, 0}, {0, 255, 0}, {0, 0, 255}, {255, 255, 0}};
  std::vector<SynthItem> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::uint64_t index = first_index + k;
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    std::mt19937_64 rng(seq);
    const int side = std::uniform_int_distribution<int>(1, max_side)(rng);
    const int cx = std::uniform_int_distribution<int>(0, grid - side)(rng);
    const int cy = std::uniform_int_distribution<int>(0, grid - side)(rng);
    const int color = static_cast<int>(index % 4);

    SynthItem item;
    item.color = kSynthColors[color];
    item.image.height = item.image.width = image_size;
    item.image.rgb.assign(static_cast<std::size_t>(image_size) * image_size * 3, 0);
    for (int y = cy * cell; y < (cy + side) * cell; ++y) {
      for (int x = cx * cell; x < (cx + side) * cell; ++x) {
        for (int c = 0; c < 3; ++c) item.image.rgb[static_cast<std::size_t>((y * image_size + x) * 3 + c)] = kRgb[color][c];
      }
    }
    item.caption.text = "a " + item.color + " square";
    const double s = image_size;
    item.caption.links.push_back({0, item.caption.text.size(),
                                  BoundingBox{cx * cell / s, cy * cell / s, (cx + side) * cell / s,
                                              (cy + side) * cell / s}});
    out.push_back(std::move(item));
  }
  return out;
}

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  return out;
}

template <class F>
void for_each_line(const std::string& path, F&& f) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(std::string("invalid JSON: ") + e.what(), no);
    }
    if (!j.is_object()) throw DataError("record is not a JSON object", no);
    try {
      f(j, no);
    } catch (const DataError&) {
      throw;
    } catch (const json::exception& e) {
      throw DataError(e.what(), no);
    } catch (const InvalidArgument& e) {
      throw DataError(e.what(), no);
    }
  }
}

void expect_keys(const json& j, std::initializer_list<std::string_view> keys, std::size_t line) {
  for (const auto& [k, v] : j.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw DataError("unknown field '" + k + "'", line);
  }
  for (auto k : keys) {
    if (!j.contains(k)) throw DataError("missing field '" + std::string(k) + "'", line);
  }
}

const std::string& str_field(const json& j, const char* key, std::size_t line) {
  const auto& v = j.at(key);
  if (!v.is_string()) throw DataError(std::string("field '") + key + "' must be a string", line);
  return v.get_ref<const std::string&>();
}

}  // namespace

void write_samples_jsonl(const std::string& path, const std::vector<Sample>& samples) {
  auto out = open_out(path);
  for (const auto& s : samples) {
    out << json{{"task", to_string(s.task)}, {"image", s.image_ref}, {"prompt", s.prompt}, {"answer", s.answer}}.dump()
        << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

std::vector<Sample> read_samples_jsonl(const std::string& path) {
  std::vector<Sample> out;
  for_each_line(path, [&](const json& j, std::size_t no) {
    expect_keys(j, {"task", "image", "prompt", "answer"}, no);
    Sample s;
    s.task = task_from_string(str_field(j, "task", no));
    s.image_ref = str_field(j, "image", no);
    s.prompt = str_field(j, "prompt", no);
    s.answer = str_field(j, "answer", no);
    if (s.answer.empty()) throw DataError("empty answer", no);
    if (s.task == Task::REC) {
      try {
        parse_box(s.answer);
      } catch (const ParseError& e) {
        throw DataError(std::string("REC answer is not a box: ") + e.what(), no);
      }
    }
    out.push_back(std::move(s));
  });
  return out;
}

void write_captions_jsonl(const std::string& path, const std::vector<CaptionRecord>& records) {
  auto out = open_out(path);
  for (const auto& r : records) {
    json links = json::array();
    for (const auto& l : r.caption.links) {
      links.push_back({{"start", l.start}, {"end", l.end}, {"box", {l.box.x0, l.box.y0, l.box.x1, l.box.y1}}});
    }
    out << json{{"image", r.image}, {"caption", r.caption.text}, {"links", links}}.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

std::vector<CaptionRecord> read_captions_jsonl(const std::string& path) {
  std::vector<CaptionRecord> out;
  for_each_line(path, [&](const json& j, std::size_t no) {
    expect_keys(j, {"image", "caption", "links"}, no);
    CaptionRecord r;
    r.image = str_field(j, "image", no);
    r.caption.text = str_field(j, "caption", no);
    const auto& links = j.at("links");
    if (!links.is_array()) throw DataError("field 'links' must be an array", no);
    for (const auto& l : links) {
      if (!l.is_object()) throw DataError("link is not an object", no);
      expect_keys(l, {"start", "end", "box"}, no);
      if (!l.at("start").is_number_unsigned() || !l.at("end").is_number_unsigned()) {
        throw DataError("link 'start' and 'end' must be non-negative integers", no);
      }
      const auto& b = l.at("box");
      if (!b.is_array() || b.size() != 4 || !std::all_of(b.begin(), b.end(), [](const json& v) { return v.is_number(); })) {
        throw DataError("link 'box' must be an array of 4 numbers", no);
      }
      r.caption.links.push_back({l.at("start").get<std::size_t>(), l.at("end").get<std::size_t>(),
                                 BoundingBox{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                                             b[3].get<double>()}});
    }
    r.caption.validate();
    out.push_back(std::move(r));
  });
  return out;
}

}  // namespace vexpert
