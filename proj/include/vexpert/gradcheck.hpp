// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vexpert/tensor.hpp"

namespace vexpert {

struct GradCheckReport {
  double max_rel_error = 0;
  double max_abs_error = 0;
  std::size_t checked = 0;
  std::string worst;  // "<tensor index>[<element>]" of the largest relative error
  std::size_t worst_tensor = 0;
  std::size_t worst_element = 0;
  bool passed = true;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tol = 1e-6;
  /// Denominator floor of the relative error |a - b| / max(|a|, |b|, floor);
  /// keeps gradients that are zero up to rounding from dominating.
  double floor = 1e-6;
  /// Check at most this many elements per tensor (evenly strided); 0 = all.
  std::size_t max_per_tensor = 0;
};

/// Compares tape gradients of the scalar `f` with central differences for
/// every element of every tensor in `inputs` (which must require grad).
/// `f` is called once with a recording tape and twice per element with a
/// paused one; it must be deterministic.
GradCheckReport grad_check(const std::function<Tensor(Tape&)>& f, std::vector<Tensor> inputs,
                           const GradCheckOptions& options);

inline GradCheckReport grad_check(const std::function<Tensor(Tape&)>& f, Tensor x, double step, double tol) {
  return grad_check(f, std::vector<Tensor>{std::move(x)}, GradCheckOptions{step, tol});
}

}  // namespace vexpert
