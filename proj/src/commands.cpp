// SPDX-License-Identifier: Apache-2.0
#include "vexpert/commands.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include <spdlog/spdlog.h>

#include "vexpert/checkpoint.hpp"
#include "vexpert/error.hpp"
#include "vexpert/grounding.hpp"
#include "vexpert/training.hpp"

namespace vexpert {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Typed access to a command's argument object with unknown-key rejection.
class Args {
 public:
  Args(const json& j, std::string verb) : j_(j), verb_(std::move(verb)) {
    if (!j_.is_object()) throw InvalidArgument(verb_ + ": arguments must be a JSON object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_[key].is_null();
  }

  std::string str(const std::string& key) {
    if (!has(key)) throw InvalidArgument(verb_ + ": missing argument '" + key + "'");
    if (!j_[key].is_string()) throw InvalidArgument(verb_ + ": '" + key + "' must be a string");
    return j_[key].get<std::string>();
  }

  std::string str_or(const std::string& key, std::string fallback) { return has(key) ? str(key) : fallback; }

  template <class T>
  T num(const std::string& key) {
    if (!has(key)) throw InvalidArgument(verb_ + ": missing argument '" + key + "'");
    const json& v = j_[key];
    if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw InvalidArgument(verb_ + ": '" + key + "' must be an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
          throw InvalidArgument(verb_ + ": '" + key + "' must be non-negative");
        }
      }
    } else {
      if (!v.is_number()) throw InvalidArgument(verb_ + ": '" + key + "' must be a number");
    }
    return v.get<T>();
  }

  template <class T>
  T num_or(const std::string& key, T fallback) {
    return has(key) ? num<T>(key) : fallback;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw InvalidArgument(verb_ + ": unknown argument '" + k + "'");
    }
  }

 private:
  const json& j_;
  std::string verb_;
  std::set<std::string> seen_;
};

json report_json(const RecReport& r) { return {{"exact_match", r.exact_match}, {"mean_iou", r.mean_iou}}; }

// Relative data paths in a run config are taken relative to the config file.
std::string resolve(const std::string& path, const fs::path& base_dir) {
  if (path.empty()) return path;
  fs::path p(path);
  return p.is_absolute() ? path : (base_dir / p).string();
}

bool is_decoder_tensor(const std::string& name) {
  return !name.starts_with("encoder.") && !name.starts_with("adapter.") && name.find(".image.") == std::string::npos;
}

CommandResult cmd_train(Args& a) {
  const std::string config_path = a.str("config");
  const fs::path out_dir = a.str("out");
  const bool seed_given = a.has("seed");
  const auto seed_arg = a.num_or<std::uint64_t>("seed", 0);
  a.finish();

  RunConfig run = load_run_config(config_path);
  if (seed_given) run.seed = seed_arg;
  run.model.seed = run.seed;
  if (run.data.train.empty()) throw ConfigError("run config has no data.train path");
  const fs::path cfg_dir = fs::path(config_path).parent_path();
  const auto train_data = load_examples(resolve(run.data.train, cfg_dir));
  std::vector<Example> eval_data;
  if (!run.data.eval.empty()) eval_data = load_examples(resolve(run.data.eval, cfg_dir));

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + out_dir.string() + "': " + ec.message());

  TensorMap base;
  bool have_base = false;
  if (!run.base.checkpoint.empty()) {
    Model src = load_checkpoint(resolve(run.base.checkpoint, cfg_dir));
    for (const auto& p : src.parameters()) {
      if (is_decoder_tensor(p.name)) base.emplace(p.name, p.tensor);
    }
    have_base = true;
  } else if (run.base.pretrain_steps > 0) {
    TrainConfig pc = run.train;
    pc.total_steps = run.base.pretrain_steps;
    pc.warmup_steps = run.base.warmup_steps;
    pc.lr_peak = run.base.lr_peak;
    std::ofstream base_log_file(out_dir / "base_metrics.jsonl");
    if (!base_log_file) throw IoError("cannot write base_metrics.jsonl");
    MetricsLog base_log(&base_log_file);
    TrainOptions opts;
    opts.seed = run.seed;
    opts.log = &base_log;
    opts.on_step = [&](std::int64_t step, double loss) {
      if (step % 50 == 0) spdlog::info("base step {} loss {:.4f}", step, loss);
    };
    spdlog::info("text-only base pretraining for {} steps", pc.total_steps);
    base = pretrain_base_decoder(run.model, train_data, pc, opts);
    have_base = true;
  }

  Model model = build_model(run.model, have_base ? &base : nullptr);
  std::ofstream log_file(out_dir / "metrics.jsonl");
  if (!log_file) throw IoError("cannot write metrics.jsonl");
  MetricsLog log(&log_file);
  TrainOptions opts;
  opts.seed = run.seed;
  opts.log = &log;
  opts.on_step = [&](std::int64_t step, double loss) {
    if (step % 50 == 0) spdlog::info("step {} loss {:.4f}", step, loss);
  };
  TrainResult r = train(std::move(model), train_data, run.train, opts);

  json out;
  out["steps"] = run.train.total_steps;
  out["final_loss"] = r.metrics.empty() ? 0.0 : r.metrics.back().loss;
  out["seed"] = run.seed;
  const auto ckpt = out_dir / "model.ckpt";
  save_checkpoint(ckpt.string(), r.model);
  out["checkpoint"] = ckpt.string();
  out["metrics"] = (out_dir / "metrics.jsonl").string();
  if (r.ema_model) {
    const auto ema_ckpt = out_dir / "model_ema.ckpt";
    save_checkpoint(ema_ckpt.string(), *r.ema_model);
    out["ema_checkpoint"] = ema_ckpt.string();
  } else {
    out["ema_checkpoint"] = nullptr;
  }
  if (!eval_data.empty()) {
    out["eval"] = report_json(eval_rec(r.model, eval_data));
    if (r.ema_model) out["eval_ema"] = report_json(eval_rec(*r.ema_model, eval_data));
  }
  return {out, false};
}

CommandResult cmd_eval(Args& a) {
  const auto ckpt = a.str("ckpt");
  const auto data_path = a.str("data");
  const auto batch = a.num_or<std::size_t>("batch", 32);
  a.finish();
  if (batch == 0) throw InvalidArgument("eval: batch must be positive");
  Model model = load_checkpoint(ckpt);
  const auto data = load_examples(data_path);
  if (data.empty()) throw DataError("dataset '" + data_path + "' has no samples", 1);
  const RecReport r = eval_rec(model, data, batch);
  spdlog::info("evaluated {} samples, {} unparsable", r.samples, r.unparsable);
  return {report_json(r), false};
}

CommandResult cmd_convert(Args& a) {
  const auto in = a.str("in");
  const auto from = a.str_or("from", "gc");
  const auto to = a.str("to");
  const auto out = a.str("out");
  a.finish();
  if (from != "gc") throw InvalidArgument("convert: only --from gc is supported, got '" + from + "'");
  if (to != "reg" && to != "rec") throw InvalidArgument("convert: --to must be reg or rec, got '" + to + "'");

  const auto records = read_captions_jsonl(in);
  std::vector<Sample> samples;
  std::size_t skipped = 0;
  for (const auto& rec : records) {
    if (to == "reg") {
      auto s = gc_to_reg(rec.caption, rec.image);
      samples.insert(samples.end(), s.begin(), s.end());
    } else {
      auto c = gc_to_rec_counted(rec.caption, rec.image);
      samples.insert(samples.end(), c.samples.begin(), c.samples.end());
      skipped += c.skipped_ambiguous;
    }
  }
  write_samples_jsonl(out, samples);
  return {json{{"read", records.size()}, {"emitted", samples.size()}, {"skipped_ambiguous", skipped}}, false};
}

CommandResult cmd_synth(Args& a) {
  const auto n = a.num<std::size_t>("n");
  const auto seed = a.num<std::uint64_t>("seed");
  const auto size = a.num<int>("size");
  const auto grid = a.num<int>("grid");
  const fs::path out_dir = a.str("out");
  const auto eval_n = a.num_or<std::size_t>("eval_n", 0);
  a.finish();

  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create '" + (out_dir / "images").string() + "': " + ec.message());

  auto emit = [&](std::size_t count, std::size_t first, std::vector<CaptionRecord>* captions) {
    std::vector<Sample> rec;
    for (auto& item : synth_rec_dataset(count, seed, size, grid, first)) {
      char name[32];
      std::snprintf(name, sizeof name, "images/%06zu.ppm", first++);
      write_ppm((out_dir / name).string(), item.image);
      auto c = gc_to_rec(item.caption, name);
      rec.insert(rec.end(), c.begin(), c.end());
      if (captions) captions->push_back({name, std::move(item.caption)});
    }
    return rec;
  };

  std::vector<CaptionRecord> captions;
  const auto rec = emit(n, 0, &captions);
  write_captions_jsonl((out_dir / "captions.jsonl").string(), captions);
  write_samples_jsonl((out_dir / "rec.jsonl").string(), rec);
  json out{{"items", n},
           {"captions", (out_dir / "captions.jsonl").string()},
           {"rec", (out_dir / "rec.jsonl").string()}};
  if (eval_n > 0) {
    // Held-out items continue the index sequence, so they never repeat a
    // training item.
    const auto held = emit(eval_n, n, nullptr);
    write_samples_jsonl((out_dir / "rec_eval.jsonl").string(), held);
    out["eval_items"] = eval_n;
    out["rec_eval"] = (out_dir / "rec_eval.jsonl").string();
  }
  return {out, false};
}

ModelConfig model_config_arg(Args& a, const ModelConfig& fallback) {
  if (!a.has("config")) return fallback;
  return load_run_config(a.str("config")).model;
}

CommandResult cmd_inspect(Args& a) {
  const ModelConfig cfg = model_config_arg(a, ModelConfig{});
  a.finish();
  ModelConfig base_cfg = cfg;
  base_cfg.ve_placement = ExpertPlacement::none;
  const std::int64_t image_len = cfg.patch.patches();
  const std::int64_t text_len = std::max<std::int64_t>(1, cfg.max_seq - image_len);
  const FlopCount ve = count_flops(cfg, image_len, text_len);
  const FlopCount base = count_flops(base_cfg, image_len, text_len);
  const ParamCounts p = count_params(cfg);
  json out;
  out["params"] = {{"total", p.total},
                   {"trainable", p.trainable},
                   {"frozen", p.frozen},
                   {"frozen_qkv_ffn", p.frozen_qkv_ffn},
                   {"expert_qkv_ffn", p.expert_qkv_ffn},
                   {"vision", p.vision}};
  out["sequence"] = {{"image_len", image_len}, {"text_len", text_len}};
  out["flops_ve"] = ve.per_token;
  out["flops_base"] = base.per_token;
  out["flops_ve_total"] = ve.total;
  out["flops_base_total"] = base.total;
  out["flops_equal"] = ve.total == base.total;
  return {out, false};
}

CommandResult cmd_gradcheck(Args& a) {
  const ModelConfig cfg = model_config_arg(a, gradcheck_toy_config());
  const auto seed = a.num_or<std::uint64_t>("seed", 0);
  GradCheckOptions opts;
  opts.step = a.num_or<double>("step", 1e-4);
  opts.tol = a.num_or<double>("tol", 1e-4);
  opts.max_per_tensor = a.num_or<std::size_t>("max_per_tensor", 0);
  a.finish();
  if (!(opts.step > 0) || !(opts.tol > 0)) throw InvalidArgument("gradcheck: step and tol must be positive");

  ModelConfig model_cfg = cfg;
  model_cfg.seed = seed;
  const Model model = build_model(model_cfg);
  const auto batch = random_check_batch(model_cfg, seed);
  const PipelineCheck check = check_pipeline_gradients(model, batch, opts);
  json out{{"passed", check.passed()},
           {"checked", check.grads.checked},
           {"max_rel_error", check.grads.max_rel_error},
           {"max_abs_error", check.grads.max_abs_error},
           {"worst", check.grads.worst},
           {"tol", opts.tol},
           {"frozen_with_grad", check.frozen_with_grad}};
  return {out, !check.passed()};
}

CommandResult cmd_dump_config(Args& a) {
  a.finish();
  return {to_json(RunConfig{}), false};
}

}  // namespace

CommandResult run_command(const std::string& verb, const json& args) {
  Args a(args, verb);
  if (verb == "train") return cmd_train(a);
  if (verb == "eval") return cmd_eval(a);
  if (verb == "convert") return cmd_convert(a);
  if (verb == "synth") return cmd_synth(a);
  if (verb == "inspect") return cmd_inspect(a);
  if (verb == "gradcheck") return cmd_gradcheck(a);
  if (verb == "dump-config") return cmd_dump_config(a);
  throw InvalidArgument("unknown command '" + verb + "'");
}

}  // namespace vexpert
