// SPDX-License-Identifier: Apache-2.0
#include "vexpert.h"

#include <cstring>
#include <string>

#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "vexpert/checkpoint.hpp"
#include "vexpert/commands.hpp"
#include "vexpert/error.hpp"
#include "vexpert/grounding.hpp"
#include "vexpert/training.hpp"

struct vx_model {
  vexpert::Model model;
};

namespace {

thread_local std::string g_last_error;

// stdout carries results only, so the default logger is moved to stderr as
// soon as the library is loaded.
const bool g_logger_ready = [] {
  auto logger = spdlog::stderr_color_mt("vexpert");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  return true;
}();

vx_status fail(vx_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

// Runs f, translating exceptions into status codes.
template <class F>
vx_status guarded(F&& f) {
  try {
    g_last_error.clear();
    return f();
  } catch (const vexpert::ParseError& e) {
    return fail(VX_PARSE, e.what());
  } catch (const vexpert::DataError& e) {
    return fail(VX_DATA, e.what());
  } catch (const vexpert::ShapeError& e) {
    return fail(VX_SHAPE, e.what());
  } catch (const vexpert::IoError& e) {
    return fail(VX_IO, e.what());
  } catch (const vexpert::ConfigError& e) {
    return fail(VX_CONFIG, e.what());
  } catch (const vexpert::DomainError& e) {
    return fail(VX_DOMAIN, e.what());
  } catch (const vexpert::Error& e) {
    return fail(VX_INVALID_ARGUMENT, e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(VX_PARSE, std::string("JSON: ") + e.what());
  } catch (const std::exception& e) {
    return fail(VX_INTERNAL, e.what());
  } catch (...) {
    return fail(VX_INTERNAL, "unknown exception");
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void need(bool ok, const char* what) {
  if (!ok) throw vexpert::InvalidArgument(what);
}

}  // namespace

extern "C" {

const char* vx_version(void) { return "0.1.0"; }

const char* vx_status_name(vx_status status) {
  switch (status) {
    case VX_OK: return "ok";
    case VX_INVALID_ARGUMENT: return "invalid_argument";
    case VX_SHAPE: return "shape";
    case VX_PARSE: return "parse";
    case VX_IO: return "io";
    case VX_CONFIG: return "config";
    case VX_DOMAIN: return "domain";
    case VX_DATA: return "data";
    case VX_CHECK_FAILED: return "check_failed";
    case VX_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* vx_last_error(void) { return g_last_error.c_str(); }

void vx_string_free(char* s) { std::free(s); }

vx_status vx_set_log_level(const char* level) {
  return guarded([&] {
    need(level != nullptr, "level is NULL");
    const std::string l = level;
    if (l == "error") {
      spdlog::set_level(spdlog::level::err);
    } else if (l == "info") {
      spdlog::set_level(spdlog::level::info);
    } else if (l == "debug") {
      spdlog::set_level(spdlog::level::debug);
    } else {
      throw vexpert::InvalidArgument("log level must be error, info or debug, got '" + l + "'");
    }
    return VX_OK;
  });
}

vx_status vx_default_config(char** json_out) {
  return guarded([&] {
    need(json_out != nullptr, "json_out is NULL");
    *json_out = dup_string(vexpert::to_json(vexpert::RunConfig{}).dump(2));
    return VX_OK;
  });
}

vx_status vx_model_create(const char* model_config_json, vx_model** out) {
  return guarded([&] {
    need(out != nullptr, "out is NULL");
    *out = nullptr;
    vexpert::ModelConfig cfg;
    if (model_config_json != nullptr) {
      cfg = vexpert::model_config_from_json(nlohmann::json::parse(model_config_json));
    }
    *out = new vx_model{vexpert::build_model(cfg)};
    return VX_OK;
  });
}

vx_status vx_model_load(const char* path, vx_model** out) {
  return guarded([&] {
    need(path != nullptr && out != nullptr, "path and out must not be NULL");
    *out = nullptr;
    *out = new vx_model{vexpert::load_checkpoint(std::string(path))};
    return VX_OK;
  });
}

vx_status vx_model_save(const vx_model* model, const char* path) {
  return guarded([&] {
    need(model != nullptr && path != nullptr, "model and path must not be NULL");
    vexpert::save_checkpoint(std::string(path), model->model);
    return VX_OK;
  });
}

void vx_model_free(vx_model* model) { delete model; }

vx_status vx_model_config(const vx_model* model, char** json_out) {
  return guarded([&] {
    need(model != nullptr && json_out != nullptr, "model and json_out must not be NULL");
    *json_out = dup_string(vexpert::to_json(model->model.config).dump(2));
    return VX_OK;
  });
}

vx_status vx_model_param_counts(const vx_model* model, int64_t* trainable, int64_t* frozen) {
  return guarded([&] {
    need(model != nullptr, "model is NULL");
    const auto c = vexpert::count_params(model->model.config);
    if (trainable) *trainable = c.trainable;
    if (frozen) *frozen = c.frozen;
    return VX_OK;
  });
}

vx_status vx_model_text_logits(const vx_model* model, const int64_t* ids, size_t n, double* logits_out,
                               size_t logits_len) {
  return guarded([&] {
    need(model != nullptr && ids != nullptr && logits_out != nullptr, "model, ids and logits_out must not be NULL");
    need(n > 0, "empty token sequence");
    const auto V = static_cast<size_t>(model->model.config.vocab_size);
    need(logits_len >= n * V, "logits_out is shorter than n * vocab_size");
    vexpert::MixedSequence seq;
    seq.pre_text.assign(ids, ids + n);
    vexpert::Tape tape;
    tape.set_recording(false);
    const vexpert::Tensor logits = vexpert::forward(tape, model->model, std::span(&seq, 1));
    const auto d = logits.data();
    std::copy(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(n * V), logits_out);
    return VX_OK;
  });
}

static_assert(VX_ANSWER_MAX == 3 * vexpert::kBoxTextLength + 1);

vx_status vx_model_answer_box(const vx_model* model, const char* prompt, const uint8_t* rgb, int height, int width,
                              char* out, size_t out_len) {
  return guarded([&] {
    need(model != nullptr && prompt != nullptr && rgb != nullptr && out != nullptr, "NULL argument");
    need(out_len > vexpert::kBoxTextLength, "out must hold at least 20 bytes");
    need(height > 0 && width > 0, "image size must be positive");
    vexpert::Image img;
    img.height = height;
    img.width = width;
    img.rgb.assign(rgb, rgb + static_cast<size_t>(height) * static_cast<size_t>(width) * 3);
    vexpert::Example ex{prompt, "", img.to_tensor()};
    const auto text = vexpert::greedy_box_decoder(model->model, 1)(std::span(&ex, 1)).at(0);
    if (text.size() >= out_len) {
      throw vexpert::InvalidArgument("answer needs " + std::to_string(text.size() + 1) + " bytes, out holds " +
                                     std::to_string(out_len));
    }
    std::memcpy(out, text.data(), text.size());
    out[text.size()] = '\0';
    return VX_OK;
  });
}

vx_status vx_box_serialize(const double box[4], char* out, size_t out_len) {
  return guarded([&] {
    need(box != nullptr && out != nullptr, "NULL argument");
    need(out_len > vexpert::kBoxTextLength, "out must hold at least 20 bytes");
    const auto text = vexpert::serialize_box(vexpert::quantize({box[0], box[1], box[2], box[3]}));
    std::memcpy(out, text.c_str(), text.size() + 1);
    return VX_OK;
  });
}

vx_status vx_box_parse(const char* text, int quantized[4], size_t* error_offset) {
  try {
    need(text != nullptr && quantized != nullptr, "NULL argument");
    const auto q = vexpert::parse_box(text);
    quantized[0] = q.qx0;
    quantized[1] = q.qy0;
    quantized[2] = q.qx1;
    quantized[3] = q.qy1;
    g_last_error.clear();
    return VX_OK;
  } catch (const vexpert::ParseError& e) {
    if (error_offset) *error_offset = e.offset();
    return fail(VX_PARSE, e.what());
  } catch (...) {
    return guarded([] () -> vx_status { throw; });
  }
}

vx_status vx_cmd_run(const char* verb, const char* args_json, char** result_json) {
  return guarded([&] {
    need(verb != nullptr && result_json != nullptr, "verb and result_json must not be NULL");
    *result_json = nullptr;
    const auto args = args_json ? nlohmann::json::parse(args_json) : nlohmann::json::object();
    const auto r = vexpert::run_command(verb, args);
    *result_json = dup_string(r.output.dump());
    if (r.check_failed) return fail(VX_CHECK_FAILED, verb + std::string(": check failed"));
    return VX_OK;
  });
}

}  // extern "C"
