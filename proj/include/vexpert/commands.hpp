// SPDX-License-Identifier: Apache-2.0
//
// The command verbs behind the CLI. Each takes a JSON object of arguments
// and returns a JSON result; failures are thrown as vexpert::Error.
#pragma once

#include <string>

#include <json.hpp>

namespace vexpert {

struct CommandResult {
  nlohmann::json output;
  /// The command ran but a verification it performs did not hold.
  bool check_failed = false;
};

/// Verbs: train, eval, convert, synth, inspect, gradcheck, dump-config.
///   train      {config, out, seed?}
///   eval       {ckpt, data, batch?}
///   convert    {in, from: "gc", to: "reg"|"rec", out}
///   synth      {n, seed, size, grid, out, eval_n?}
///   inspect    {config?}
///   gradcheck  {config?, seed?, step?, tol?, max_per_tensor?}
///   dump-config {}
/// Unknown verbs and unknown argument keys raise InvalidArgument.
CommandResult run_command(const std::string& verb, const nlohmann::json& args);

}  // namespace vexpert
