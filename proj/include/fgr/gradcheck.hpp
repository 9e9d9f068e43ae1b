#pragma once

#include <cstdint>
#include <vector>

#include "fgr/rng.hpp"
#include "fgr/tensor.hpp"

namespace fgr {

struct GradCheckReport {
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::vector<double> per_input;  // max relative error per input tensor
};

// Compares tape gradients of `fn` against central finite differences.
// The (possibly non-scalar) output is reduced with a fixed random projection
// so every output element participates. `fn` must be a pure function of the
// given inputs and must not capture an active tape of its own.
template <typename T, typename Fn>
GradCheckReport grad_check(Fn&& fn, std::vector<Tensor<T>> inputs, double step,
                           double tolerance, uint64_t projection_seed = 17) {
  for (auto& in : inputs) in.set_requires_grad(true);

  // projection weights in [0.5, 1.5]; fixed across all evaluations
  Tensor<T> probe = fn(inputs);
  Rng rng(projection_seed);
  Tensor<T> proj(probe.shape());
  for (auto& v : proj.data()) v = static_cast<T>(rng.uniform(0.5, 1.5));

  const auto project = [&](const Tensor<T>& out) {
    double acc = 0.0;
    const T* ov = out.ptr();
    const T* pv = proj.ptr();
    for (int64_t i = 0; i < out.size(); ++i)
      acc += static_cast<double>(ov[i]) * static_cast<double>(pv[i]);
    return acc;
  };

  // analytic gradients
  for (auto& in : inputs) in.reset_grad();
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    Tensor<T> out = fn(inputs);
    Tensor<T> loss = sum(mul(out, proj));
    tape.backward(loss);
  }

  GradCheckReport report;
  report.tolerance = tolerance;
  for (auto& in : inputs) {
    double worst = 0.0;
    std::vector<T>& values = in.data();
    const std::vector<T>& analytic =
        in.has_grad() ? in.grad() : in.ensure_grad();
    for (size_t i = 0; i < values.size(); ++i) {
      const T saved = values[i];
      values[i] = saved + static_cast<T>(step);
      const double up = project(fn(inputs));
      values[i] = saved - static_cast<T>(step);
      const double down = project(fn(inputs));
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = static_cast<double>(analytic[i]);
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-3});
      worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
    report.per_input.push_back(worst);
    report.max_rel_err = std::max(report.max_rel_err, worst);
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

// Fills tensors with uniform draws in [lo, hi]; values whose magnitude falls
// below `kink_margin` are pushed away from zero so kinked ops (relu, mae)
// stay differentiable at the sampled point.
template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0,
                        double hi = 1.0, double kink_margin = 0.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) {
    double x = rng.uniform(lo, hi);
    if (kink_margin > 0.0 && std::fabs(x) < kink_margin)
      x = x < 0.0 ? -kink_margin : kink_margin;
    v = static_cast<T>(x);
  }
  return t;
}

}  // namespace fgr
