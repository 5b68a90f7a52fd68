// SPDX-License-Identifier: Apache-2.0
#include "vexpert/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "vexpert/error.hpp"

namespace vexpert {

GradCheckReport grad_check(const std::function<Tensor(Tape&)>& f, std::vector<Tensor> inputs,
                           const GradCheckOptions& options) {
  for (auto& t : inputs) {
    if (!t.requires_grad()) throw InvalidArgument("grad_check: input does not require grad");
    t.clear_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = f(tape);
    tape.backward(loss);
    for (auto& t : inputs) {
      if (t.has_grad()) {
        analytic.emplace_back(t.grad().begin(), t.grad().end());
      } else {
        analytic.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
      }
      t.clear_grad();
    }
  }

  auto eval = [&] {
    Tape tape;
    tape.set_recording(false);
    return f(tape).item();
  };

  GradCheckReport report;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto data = inputs[ti].mutable_data();
    const std::size_t n = data.size();
    const std::size_t stride = options.max_per_tensor == 0 ? 1 : std::max<std::size_t>(1, n / options.max_per_tensor);
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = data[i];
      data[i] = saved + options.step;
      const double up = eval();
      data[i] = saved - options.step;
      const double down = eval();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[ti][i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), options.floor});
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error || report.checked == 0) {
        report.max_rel_error = std::max(report.max_rel_error, rel);
        if (rel >= report.max_rel_error) {
          report.worst = std::to_string(ti) + "[" + std::to_string(i) + "]";
          report.worst_tensor = ti;
          report.worst_element = i;
        }
      }
      ++report.checked;
    }
  }
  report.passed = report.max_rel_error < options.tol;
  return report;
}

}  // namespace vexpert
