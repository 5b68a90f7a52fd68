// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "vexpert/error.hpp"
#include "vexpert/grounding.hpp"

using namespace vexpert;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("vexpert_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

// Caption with links over the given phrases, found left to right.
GroundedCaption caption_with(const std::string& text, const std::vector<std::pair<std::string, BoundingBox>>& links) {
  GroundedCaption c{text, {}};
  std::size_t from = 0;
  for (const auto& [phrase, box] : links) {
    const auto at = text.find(phrase, from);
    REQUIRE(at != std::string::npos);
    c.links.push_back({at, at + phrase.size(), box});
    from = at + phrase.size();
  }
  return c;
}

const BoundingBox kB1{0.1, 0.2, 0.4, 0.9};
const BoundingBox kB2{0.55, 0.15, 0.95, 0.85};

}  // namespace

TEST_CASE("quantize boundaries and rule") {
  CHECK(quantize({0, 0, 1, 1}) == QuantizedBox{0, 0, 999, 999});
  CHECK(quantize({0.5, 0.5, 0.5, 0.5}) == QuantizedBox{500, 500, 500, 500});
  CHECK_THROWS_AS(quantize({0.6, 0, 0.5, 1}), InvalidArgument);
  CHECK_THROWS_AS(quantize({0, 0, 1.2, 1}), InvalidArgument);
  CHECK(dequantize({0, 0, 999, 999}) == BoundingBox{0.0005, 0.0005, 0.9995, 0.9995});
  CHECK(dequantize_coord(500) == 0.5005);
  CHECK_THROWS_AS(dequantize({0, 0, 1000, 5}), InvalidArgument);
}

TEST_CASE("quantization round trips") {
  // Exhaustive over one coordinate.
  for (int q = 0; q < 1000; ++q) CHECK(quantize_coord(dequantize_coord(q)) == q);
  // Uniform grid of 10^4 boxes.
  double worst = 0;
  for (int i = 0; i <= 99; ++i)
    for (int j = 0; j <= 99; ++j) {
      const double a = i / 99.0, b = j / 99.0;
      const BoundingBox box{std::min(a, b), std::min(b, a), std::max(a, b), std::max(a, b)};
      const auto back = dequantize(quantize(box));
      for (auto [u, v] : {std::pair{box.x0, back.x0}, {box.y0, back.y0}, {box.x1, back.x1}, {box.y1, back.y1}})
        worst = std::max(worst, std::abs(u - v));
    }
  CHECK(worst <= 0.0005 + 1e-15);
  // Monotone.
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 10000; ++i) {
    double a = u(rng), b = u(rng);
    if (a > b) std::swap(a, b);
    CHECK(quantize_coord(a) <= quantize_coord(b));
  }
}

TEST_CASE("box serialization") {
  CHECK(serialize_box({15, 23, 998, 87}) == "[[015,023,998,087]]");
  CHECK(parse_box("[[015,023,998,087]]") == QuantizedBox{15, 23, 998, 87});
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> d(0, 999);
  for (int i = 0; i < 1000; ++i) {
    int a = d(rng), b = d(rng), c = d(rng), e = d(rng);
    const QuantizedBox q{std::min(a, b), std::min(c, e), std::max(a, b), std::max(c, e)};
    const auto s = serialize_box(q);
    CHECK(s.size() == kBoxTextLength);
    CHECK(parse_box(s) == q);
  }
}

TEST_CASE("parse_box names the offending offset") {
  auto offset_of = [](std::string_view s) -> long {
    try {
      parse_box(s);
    } catch (const ParseError& e) {
      return static_cast<long>(e.offset());
    }
    return -1;
  };
  CHECK(offset_of("[[15,23,998,87]]") == 4);   // missing zero padding
  CHECK(offset_of("[[015, 023,998,087]]") == 6);  // space
  CHECK(offset_of("[015,023,998,087]]") == 1);  // missing bracket
  CHECK(offset_of("[[015,023,998,087]") == 18);  // text ends early
  CHECK(offset_of("[[015,023,998,087]]x") == 19);
  CHECK(offset_of("[[500,023,400,087]]") == 10);  // x1 < x0
  CHECK(offset_of("[[015,923,998,087]]") == 14);  // y1 < y0
  CHECK(offset_of("") == 0);
}

TEST_CASE("iou") {
  CHECK(iou(kB1, kB1) == 1.0);
  CHECK(iou({0, 0, 0.5, 1}, {0.5, 0, 1, 1}) == 0.0);
  CHECK(iou({0, 0, 0.5, 0.5}, {0.25, 0, 0.75, 0.5}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(iou({0.3, 0.3, 0.3, 0.3}, {0.3, 0.3, 0.3, 0.3}) == 0.0);
}

TEST_CASE("grounded caption conversions: worked examples") {
  const auto walk = caption_with("A man and a woman are walking together.", {{"A man", kB1}, {"a woman", kB2}});
  const auto reg = gc_to_reg(walk, "img.ppm");
  REQUIRE(reg.size() == 2);
  CHECK(reg[1].prompt == "Describe this region " + serialize_box(quantize(kB2)) + ".");
  CHECK(reg[1].answer == "A woman.");
  CHECK(reg[0].answer == "A man.");
  CHECK(reg[0].task == Task::REG);
  CHECK(reg[0].image_ref == "img.ppm");

  const auto rec = gc_to_rec_counted(walk);
  REQUIRE(rec.samples.size() == 2);
  CHECK(rec.samples[0].prompt == "Where is the man?");
  CHECK(rec.samples[0].answer == serialize_box(quantize(kB1)));
  CHECK(rec.samples[1].prompt == "Where is the woman?");
  CHECK(rec.skipped_ambiguous == 0);

  const auto run = caption_with("A man is running, while another man is looking.", {{"A man", kB1}, {"another man", kB2}});
  const auto amb = gc_to_rec_counted(run);
  CHECK(amb.samples.empty());
  CHECK(amb.skipped_ambiguous == 2);
  CHECK(gc_to_reg(run).size() == 2);
}

TEST_CASE("conversion edge cases") {
  const GroundedCaption none{"Nothing here.", {}};
  CHECK(gc_to_reg(none).empty());
  CHECK(gc_to_rec(none).empty());
  const auto one = caption_with("The red square.", {{"The red square", kB1}});
  CHECK(gc_to_rec(one).size() == 1);
  CHECK(gc_to_rec(one)[0].prompt == "Where is the red square?");
  CHECK(phrase_head("  Another Dog, ") == "dog");
  CHECK(phrase_head("an apple") == "apple");

  // Pure functions: same input, same output.
  CHECK(gc_to_reg(one) == gc_to_reg(one));

  GroundedCaption overlapping{"abcdef", {{0, 3, kB1}, {2, 5, kB2}}};
  CHECK_THROWS_AS(overlapping.validate(), InvalidArgument);
  GroundedCaption outside{"abc", {{1, 9, kB1}}};
  CHECK_THROWS_AS(outside.validate(), InvalidArgument);
}

TEST_CASE("REC <-> REG") {
  const Sample rec{"Where is the man?", "[[015,023,998,087]]", Task::REC, "x.ppm"};
  const Sample reg = rec_to_reg(rec);
  CHECK(reg.prompt == "Describe this region [[015,023,998,087]].");
  CHECK(reg.answer == "the man");
  CHECK(reg.task == Task::REG);
  const Sample back = reg_to_rec(reg);
  CHECK(back.prompt == rec.prompt);
  CHECK(back.answer == rec.answer);
  CHECK_THROWS_AS(rec_to_reg({"Where is the man?", "[[15,23,998,87]]", Task::REC, ""}), ParseError);
  CHECK_THROWS_AS(rec_to_reg(reg), InvalidArgument);
  CHECK_THROWS_AS(reg_to_rec({"Describe this region [[1,2]].", "the man", Task::REG, ""}), InvalidArgument);
  CHECK_THROWS_AS(reg_to_rec({"Describe this region [[015,023,998,08x]].", "the man", Task::REG, ""}), ParseError);
}

TEST_CASE("prompt templates") {
  CHECK(format_prompt("What color?", PromptStyle::short_answer) == "Question: What color? Short answer:");
  CHECK(format_prompt("Explain.", PromptStyle::long_answer) == "Question: Explain. Answer:");
  CHECK_THROWS_AS(format_prompt("", PromptStyle::short_answer), InvalidArgument);
}

TEST_CASE("synthetic REC set") {
  const auto a = synth_rec_dataset(1, 42, 32, 8);
  const auto b = synth_rec_dataset(1, 42, 32, 8);
  CHECK(a[0].image == b[0].image);
  CHECK(a[0].caption.links[0].box == b[0].caption.links[0].box);
  CHECK_THROWS_AS(synth_rec_dataset(1, 1, 30, 8), InvalidArgument);

  const auto items = synth_rec_dataset(64, 7, 32, 8);
  std::map<std::string, int> colors;
  for (const auto& it : items) {
    ++colors[it.color];
    const auto& box = it.caption.links.at(0).box;
    CHECK_NOTHROW(box.validate());
    CHECK(it.caption.text == "a " + it.color + " square");

    // Pixel-scan oracle: extent of non-background pixels.
    int x0 = 32, y0 = 32, x1 = -1, y1 = -1;
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        if (it.image.at(y, x, 0) || it.image.at(y, x, 1) || it.image.at(y, x, 2)) {
          x0 = std::min(x0, x);
          y0 = std::min(y0, y);
          x1 = std::max(x1, x);
          y1 = std::max(y1, y);
        }
    REQUIRE(x1 >= 0);
    const double px = 1.0 / 32;
    CHECK(std::abs(box.x0 - x0 * px) <= px);
    CHECK(std::abs(box.y0 - y0 * px) <= px);
    CHECK(std::abs(box.x1 - (x1 + 1) * px) <= px);
    CHECK(std::abs(box.y1 - (y1 + 1) * px) <= px);
  }
  for (const char* c : kSynthColors) CHECK(colors[c] == 16);

  // Index ranges generate independently (sharding).
  const auto tail = synth_rec_dataset(4, 7, 32, 8, 60);
  for (int i = 0; i < 4; ++i) CHECK(tail[static_cast<std::size_t>(i)].image == items[static_cast<std::size_t>(60 + i)].image);
}

TEST_CASE("PPM round trip and errors") {
  const auto dir = temp_dir("ppm");
  const auto img = synth_rec_dataset(1, 3, 16, 4)[0].image;
  write_ppm((dir / "a.ppm").string(), img);
  CHECK(read_ppm((dir / "a.ppm").string()) == img);
  write_text(dir / "c.ppm", "P6\n# comment\n2 1\n255\nabcdef");
  const auto c = read_ppm((dir / "c.ppm").string());
  CHECK(c.width == 2);
  CHECK(c.at(0, 1, 2) == 'f');
  write_text(dir / "bad.ppm", "P3\n1 1\n255\n0 0 0\n");
  CHECK_THROWS_AS(read_ppm((dir / "bad.ppm").string()), IoError);
  write_text(dir / "short.ppm", "P6\n2 2\n255\nabc");
  CHECK_THROWS_AS(read_ppm((dir / "short.ppm").string()), IoError);
  CHECK_THROWS_AS(read_ppm((dir / "missing.ppm").string()), IoError);

  const auto t = img.to_tensor();
  CHECK(t.shape() == Shape{16, 16, 3});
}

TEST_CASE("sample and caption JSONL") {
  const auto dir = temp_dir("jsonl");
  const std::vector<Sample> samples{{"Where is the man?", "[[015,023,998,087]]", Task::REC, "a.ppm"},
                                    {"Describe this region [[015,023,998,087]].", "A man.", Task::REG, "a.ppm"}};
  write_samples_jsonl((dir / "s.jsonl").string(), samples);
  CHECK(read_samples_jsonl((dir / "s.jsonl").string()) == samples);

  auto line_of = [&](const std::string& content, bool captions) -> long {
    write_text(dir / "bad.jsonl", content);
    try {
      if (captions)
        read_captions_jsonl((dir / "bad.jsonl").string());
      else
        read_samples_jsonl((dir / "bad.jsonl").string());
    } catch (const DataError& e) {
      return static_cast<long>(e.line());
    }
    return -1;
  };
  const std::string good = R"({"task":"rec","image":"a","prompt":"p","answer":"[[000,000,001,001]]"})";
  CHECK(line_of(good + "\n" + R"({"task":"rec","image":"a","prompt":"p"})" + "\n", false) == 2);
  CHECK(line_of(good + "\n\n" + R"({"task":"xyz","image":"a","prompt":"p","answer":"a"})", false) == 3);
  CHECK(line_of(R"({"task":"rec","image":"a","prompt":"p","answer":"[[1,2,3,4]]"})", false) == 1);
  CHECK(line_of(R"({"task":"reg","image":"a","prompt":"p","answer":""})", false) == 1);
  CHECK(line_of(R"({"task":"reg","image":"a","prompt":"p","answer":"x","extra":1})", false) == 1);
  CHECK(line_of("not json", false) == 1);

  std::vector<CaptionRecord> caps{{"a.ppm", caption_with("A man and a woman.", {{"A man", kB1}, {"a woman", kB2}})}};
  write_captions_jsonl((dir / "c.jsonl").string(), caps);
  const auto back = read_captions_jsonl((dir / "c.jsonl").string());
  REQUIRE(back.size() == 1);
  CHECK(back[0].caption.text == caps[0].caption.text);
  CHECK(back[0].caption.links[1].box == kB2);
  CHECK(line_of(R"({"image":"a","caption":"abc","links":[{"start":2,"end":1,"box":[0,0,1,1]}]})", true) == 1);
  CHECK(line_of(R"({"image":"a","caption":"abc","links":[{"start":0,"end":1,"box":[0,0,1]}]})", true) == 1);
  CHECK(line_of(R"({"image":"a","caption":"abc","links":[{"start":0,"end":1,"box":[0.5,0,0.2,1]}]})", true) == 1);
  write_text(dir / "empty.jsonl", "");
  CHECK(read_captions_jsonl((dir / "empty.jsonl").string()).empty());
}
