// Central-difference gradient checker.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "iidnet/autodiff/ops.hpp"
#include "iidnet/autodiff/tensor.hpp"
#include "iidnet/rng.hpp"

namespace iidnet::ad {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  /// Sampled entries whose +-step evaluations switched a relu/abs branch.
  std::size_t branch_switches = 0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-4;
  /// Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-8;
  /// Check at most this many randomly chosen entries (0 = all).
  std::size_t max_samples = 0;
  std::uint64_t seed = 0;
  /// Central differences do not estimate the derivative when the interval
  /// [x - h, x + h] straddles a kink. When set, such entries are counted in
  /// branch_switches and replaced by further random entries instead of
  /// being compared.
  bool skip_branch_switches = false;
};

/// Compares backward() gradients of a scalar function f against central
/// differences (f(x + h) - f(x - h)) / 2h for every entry of every input (or a
/// random subsample). f must be deterministic and rebuild its graph per call.
inline GradCheckReport grad_check(const std::function<Tensor<double>()>& f,
                                  std::vector<Tensor<double>> inputs,
                                  const GradCheckOptions& opt = {}) {
  for (auto& in : inputs) in.zero_grad();
  std::vector<std::int8_t> base_branches;
  {
    BranchRecorder rec;
    Tensor<double> loss = f();
    base_branches = rec.branches();
    backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& in : inputs) analytic.emplace_back(in.grad().begin(), in.grad().end());

  std::vector<std::pair<std::size_t, std::size_t>> entries;
  for (std::size_t t = 0; t < inputs.size(); ++t)
    for (std::size_t i = 0; i < inputs[t].numel(); ++i) entries.emplace_back(t, i);
  const bool subsample = opt.max_samples != 0 && entries.size() > opt.max_samples;
  if (subsample) {
    Rng rng(opt.seed);
    std::shuffle(entries.begin(), entries.end(), rng.engine());
  }

  const auto evaluate = [&](bool& switched) {
    BranchRecorder rec;
    const double v = f().item();
    switched = switched || rec.branches() != base_branches;
    return v;
  };

  GradCheckReport report;
  for (auto [t, i] : entries) {
    if (subsample && report.checked == opt.max_samples) break;
    auto values = inputs[t].mutable_value();
    const double saved = values[i];
    bool switched = false;
    values[i] = saved + opt.step;
    const double up = evaluate(switched);
    values[i] = saved - opt.step;
    const double down = evaluate(switched);
    values[i] = saved;
    if (switched) {
      ++report.branch_switches;
      if (opt.skip_branch_switches) continue;
    }
    const double numeric = (up - down) / (2.0 * opt.step);
    const double a = analytic[t][i];
    const double abs_err = std::abs(a - numeric);
    const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), opt.floor});
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    if (rel > report.max_rel_error || report.checked == 0) {
      report.max_rel_error = rel;
      report.worst_input = t;
      report.worst_index = i;
      report.worst_analytic = a;
      report.worst_numeric = numeric;
    }
    ++report.checked;
  }
  report.passed = report.max_rel_error < opt.tolerance;
  return report;
}

}  // namespace iidnet::ad
