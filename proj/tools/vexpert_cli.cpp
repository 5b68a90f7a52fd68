// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Every verb is forwarded to vx_cmd_run; the JSON
// result goes to stdout and diagnostics to stderr.
//
// Exit codes: 0 success, 1 a verification failed (gradcheck), 2 bad usage,
// configuration or data, 3 internal error.
#include <cstdio>
#include <cstdlib>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "vexpert.h"

namespace {

int run(const std::string& verb, const nlohmann::json& args) {
  char* out = nullptr;
  const vx_status s = vx_cmd_run(verb.c_str(), args.dump().c_str(), &out);
  if (out) {
    std::fputs(out, stdout);
    std::fputc('\n', stdout);
    vx_string_free(out);
  }
  if (s == VX_OK) return 0;
  std::fprintf(stderr, "vexpert %s: %s (%s)\n", verb.c_str(), vx_last_error(), vx_status_name(s));
  if (s == VX_CHECK_FAILED) return 1;
  return s == VX_INTERNAL ? 3 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* level = std::getenv("VE_LOG")) {
    if (vx_set_log_level(level) != VX_OK) {
      std::fprintf(stderr, "vexpert: VE_LOG: %s\n", vx_last_error());
      return 2;
    }
  }

  CLI::App app{"Visual-expert language model toolkit"};
  app.require_subcommand(1);
  nlohmann::json args = nlohmann::json::object();

  std::string config, out, ckpt, data, in, from = "gc", to;
  std::optional<std::uint64_t> seed;
  std::size_t batch = 32, n = 0, eval_n = 0, max_per_tensor = 0;
  int size = 32, grid = 8;
  double step = 1e-4, tol = 1e-4;

  auto* train = app.add_subcommand("train", "Train a model from a run config");
  train->add_option("--config", config, "Run config JSON")->required();
  train->add_option("--out", out, "Output directory")->required();
  train->add_option("--seed", seed, "Overrides the config seed");

  auto* eval = app.add_subcommand("eval", "Greedy REC evaluation of a checkpoint");
  eval->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  eval->add_option("--data", data, "REC sample JSONL")->required();
  eval->add_option("--batch", batch, "Decoding batch size");

  auto* convert = app.add_subcommand("convert", "Convert grounded captions to REG or REC samples");
  convert->add_option("--in", in, "Grounded-caption JSONL")->required();
  convert->add_option("--from", from, "Source format")->check(CLI::IsMember({"gc"}));
  convert->add_option("--to", to, "Target task")->required()->check(CLI::IsMember({"reg", "rec"}));
  convert->add_option("--out", out, "Output sample JSONL")->required();

  auto* synth = app.add_subcommand("synth", "Generate the synthetic colored-square REC set");
  synth->add_option("--n", n, "Number of training items")->required();
  synth->add_option("--seed", seed, "Generator seed")->required();
  synth->add_option("--size", size, "Image side in pixels");
  synth->add_option("--grid", grid, "Grid cells per side");
  synth->add_option("--out", out, "Output directory")->required();
  synth->add_option("--eval-n", eval_n, "Extra held-out items written to rec_eval.jsonl");

  auto* inspect = app.add_subcommand("inspect", "Parameter and FLOP report");
  inspect->add_option("--config", config, "Run config JSON (defaults when absent)");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the full training loss");
  gradcheck->add_option("--config", config, "Run config JSON (toy config when absent)");
  gradcheck->add_option("--seed", seed, "Seed for weights and the random batch");
  gradcheck->add_option("--step", step, "Central-difference step");
  gradcheck->add_option("--tol", tol, "Maximum relative error");
  gradcheck->add_option("--max-per-tensor", max_per_tensor, "Elements checked per tensor, 0 for all");

  auto* dump = app.add_subcommand("dump-config", "Print the default run config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (train->parsed()) {
    args = {{"config", config}, {"out", out}};
    if (seed) args["seed"] = *seed;
    return run("train", args);
  }
  if (eval->parsed()) return run("eval", {{"ckpt", ckpt}, {"data", data}, {"batch", batch}});
  if (convert->parsed()) return run("convert", {{"in", in}, {"from", from}, {"to", to}, {"out", out}});
  if (synth->parsed()) {
    args = {{"n", n}, {"seed", *seed}, {"size", size}, {"grid", grid}, {"out", out}};
    if (eval_n > 0) args["eval_n"] = eval_n;
    return run("synth", args);
  }
  if (inspect->parsed()) {
    if (!config.empty()) args["config"] = config;
    return run("inspect", args);
  }
  if (gradcheck->parsed()) {
    args = {{"step", step}, {"tol", tol}, {"max_per_tensor", max_per_tensor}};
    if (!config.empty()) args["config"] = config;
    if (seed) args["seed"] = *seed;
    return run("gradcheck", args);
  }
  if (dump->parsed()) return run("dump-config", args);
  return 2;
}
