/* SPDX-License-Identifier: Apache-2.0 */
/*
 * C interface to the vexpert library. Objects are opaque handles; every
 * fallible call returns a vx_status and leaves a message for
 * vx_last_error() on the calling thread. Strings returned through char**
 * are heap-allocated and must be released with vx_string_free.
 */
#ifndef VEXPERT_H
#define VEXPERT_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define VX_API __declspec(dllexport)
#else
#define VX_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum vx_status {
  VX_OK = 0,
  VX_INVALID_ARGUMENT = 1,
  VX_SHAPE = 2,
  VX_PARSE = 3,
  VX_IO = 4,
  VX_CONFIG = 5,
  VX_DOMAIN = 6,
  VX_DATA = 7,
  /* The call completed but a check it performs failed (e.g. gradcheck). */
  VX_CHECK_FAILED = 8,
  VX_INTERNAL = 9
} vx_status;

typedef struct vx_model vx_model;

VX_API const char* vx_version(void);
VX_API const char* vx_status_name(vx_status status);
/* Message of the last failing call on this thread; "" if none. */
VX_API const char* vx_last_error(void);
VX_API void vx_string_free(char* s);
/* "error", "info" or "debug"; diagnostics always go to stderr. */
VX_API vx_status vx_set_log_level(const char* level);

/* Default run configuration (model, train, data, base, seed) as JSON. */
VX_API vx_status vx_default_config(char** json_out);

/* Builds a freshly initialised model from a model-config JSON object;
 * NULL or "{}" gives the defaults. */
VX_API vx_status vx_model_create(const char* model_config_json, vx_model** out);
VX_API vx_status vx_model_load(const char* path, vx_model** out);
VX_API vx_status vx_model_save(const vx_model* model, const char* path);
VX_API void vx_model_free(vx_model* model);
VX_API vx_status vx_model_config(const vx_model* model, char** json_out);
VX_API vx_status vx_model_param_counts(const vx_model* model, int64_t* trainable, int64_t* frozen);
/* Next-token logits for a text-only sequence: n * vocab_size doubles. */
VX_API vx_status vx_model_text_logits(const vx_model* model, const int64_t* ids, size_t n, double* logits_out,
                                      size_t logits_len);
/* Greedy 19-token box answer for an interleaved 8-bit RGB image of the
 * model's configured size. Special tokens decode to U+FFFD (3 bytes), so
 * VX_ANSWER_MAX bytes always suffice; a smaller buffer that cannot hold the
 * answer gives VX_INVALID_ARGUMENT. */
#define VX_ANSWER_MAX 58
VX_API vx_status vx_model_answer_box(const vx_model* model, const char* prompt, const uint8_t* rgb, int height,
                                     int width, char* out, size_t out_len);

/* Box as fractions in [0, 1] -> "[[DDD,DDD,DDD,DDD]]"; out must hold 20 bytes. */
VX_API vx_status vx_box_serialize(const double box[4], char* out, size_t out_len);
/* Parses a serialized box into quantized coordinates; on VX_PARSE,
 * *error_offset (if given) is the first offending character. */
VX_API vx_status vx_box_parse(const char* text, int quantized[4], size_t* error_offset);

/* Runs a command verb (train, eval, convert, synth, inspect, gradcheck,
 * dump-config) with JSON arguments. *result_json is set on VX_OK and on
 * VX_CHECK_FAILED. */
VX_API vx_status vx_cmd_run(const char* verb, const char* args_json, char** result_json);

#ifdef __cplusplus
}
#endif

#endif /* VEXPERT_H */
