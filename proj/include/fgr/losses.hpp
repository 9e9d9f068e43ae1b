#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "fgr/tensor.hpp"

namespace fgr {

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& recon, const Tensor<T>& target) {
  if (recon.shape() != target.shape())
    throw ShapeError("mse_loss: shape mismatch " + shape_str(recon.shape()) +
                     " vs " + shape_str(target.shape()));
  const int64_t n = recon.size();
  const T* r = recon.ptr();
  const T* t = target.ptr();
  T acc = T(0);
  for (int64_t i = 0; i < n; ++i) {
    const T d = t[i] - r[i];
    acc += d * d;
  }
  Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(n));
  if (Tape<T>* tape = Tape<T>::active()) {
    tape->record("mse_loss", out, [=](Tape<T>& tp) {
      if (!out.has_grad()) return;
      const T g = out.grad()[0] * T(2) / static_cast<T>(n);
      const T* r = recon.ptr();
      const T* t = target.ptr();
      if (tp.flows(recon)) {
        recon.ensure_grad();
        T* gr = recon.grad().data();
        for (int64_t i = 0; i < n; ++i) gr[i] += g * (r[i] - t[i]);
      }
      if (tp.flows(target)) {
        target.ensure_grad();
        T* gt = target.grad().data();
        for (int64_t i = 0; i < n; ++i) gt[i] += g * (t[i] - r[i]);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mae_loss(const Tensor<T>& recon, const Tensor<T>& target) {
  if (recon.shape() != target.shape())
    throw ShapeError("mae_loss: shape mismatch " + shape_str(recon.shape()) +
                     " vs " + shape_str(target.shape()));
  const int64_t n = recon.size();
  const T* r = recon.ptr();
  const T* t = target.ptr();
  T acc = T(0);
  for (int64_t i = 0; i < n; ++i) acc += std::fabs(t[i] - r[i]);
  Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(n));
  if (Tape<T>* tape = Tape<T>::active()) {
    tape->record("mae_loss", out, [=](Tape<T>& tp) {
      if (!out.has_grad()) return;
      const T g = out.grad()[0] / static_cast<T>(n);
      const T* r = recon.ptr();
      const T* t = target.ptr();
      // subgradient at zero difference is 0
      if (tp.flows(recon)) {
        recon.ensure_grad();
        T* gr = recon.grad().data();
        for (int64_t i = 0; i < n; ++i)
          gr[i] += r[i] > t[i] ? g : (r[i] < t[i] ? -g : T(0));
      }
      if (tp.flows(target)) {
        target.ensure_grad();
        T* gt = target.grad().data();
        for (int64_t i = 0; i < n; ++i)
          gt[i] += t[i] > r[i] ? g : (t[i] < r[i] ? -g : T(0));
      }
    });
  }
  return out;
}

namespace detail {

template <typename T>
void check_unit_range(const Tensor<T>& t, const char* who) {
  for (T v : t.data())
    if (!(v >= T(-1e-9) && v <= T(1) + T(1e-9)))
      throw std::invalid_argument(std::string(who) +
                                  ": image values must lie in [0,1]");
}

}  // namespace detail

// Whole-image statistics form with c1 = 0.01^2 and c2 = 0.03^2 on [0,1] data.
// Differentiable; composed from primitive ops.
template <typename T>
Tensor<T> ssim(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("ssim: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  detail::check_unit_range(a, "ssim");
  detail::check_unit_range(b, "ssim");
  const T c1 = static_cast<T>(1e-4);
  const T c2 = static_cast<T>(9e-4);
  Tensor<T> mu_a = mean(a);
  Tensor<T> mu_b = mean(b);
  Tensor<T> var_a = sub(mean(mul(a, a)), mul(mu_a, mu_a));
  Tensor<T> var_b = sub(mean(mul(b, b)), mul(mu_b, mu_b));
  Tensor<T> cov = sub(mean(mul(a, b)), mul(mu_a, mu_b));
  Tensor<T> num = mul(add_scalar(mul_scalar(mul(mu_a, mu_b), T(2)), c1),
                      add_scalar(mul_scalar(cov, T(2)), c2));
  Tensor<T> den = mul(add_scalar(add(mul(mu_a, mu_a), mul(mu_b, mu_b)), c1),
                      add_scalar(add(var_a, var_b), c2));
  return div(num, den);
}

template <typename T>
Tensor<T> ssim_loss(const Tensor<T>& a, const Tensor<T>& b) {
  return add_scalar(mul_scalar(ssim(a, b), T(-1)), T(1));
}

// Plain (non-differentiable) helpers over logits.
template <typename T>
std::vector<T> softmax_row(const T* row, int64_t k) {
  std::vector<T> p(static_cast<size_t>(k));
  T m = row[0];
  for (int64_t j = 1; j < k; ++j) m = std::max(m, row[j]);
  T z = T(0);
  for (int64_t j = 0; j < k; ++j) {
    p[static_cast<size_t>(j)] = std::exp(row[j] - m);
    z += p[static_cast<size_t>(j)];
  }
  for (int64_t j = 0; j < k; ++j) p[static_cast<size_t>(j)] /= z;
  return p;
}

template <typename T>
int argmax_row(const T* row, int64_t k) {
  int best = 0;
  for (int64_t j = 1; j < k; ++j)
    if (row[j] > row[best]) best = static_cast<int>(j);
  return best;
}

// Mean over the batch of -log softmax(logits)[target]; probabilities are
// clamped below at 1e-12 before the log.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits,
                        const std::vector<int>& targets) {
  detail::require<T>(logits.ndim() == 2,
                     "cross_entropy: logits must be (batch,classes), got " +
                         shape_str(logits.shape()));
  const int64_t batch = logits.dim(0), k = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != batch)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for batch of " + std::to_string(batch));
  for (int t : targets)
    if (t < 0 || t >= k)
      throw std::out_of_range("cross_entropy: target class " +
                              std::to_string(t) + " out of range for " +
                              std::to_string(k) + " classes");
  const T clamp = static_cast<T>(1e-12);

  T acc = T(0);
  for (int64_t i = 0; i < batch; ++i) {
    const std::vector<T> p = softmax_row(logits.ptr() + i * k, k);
    acc -= std::log(std::max(p[static_cast<size_t>(targets[i])], clamp));
  }
  Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(batch));

  if (Tape<T>* tape = Tape<T>::active()) {
    const std::vector<int> tgt = targets;
    tape->record("cross_entropy", out, [=](Tape<T>& tp) {
      if (!out.has_grad() || !tp.flows(logits)) return;
      logits.ensure_grad();
      const T g = out.grad()[0] / static_cast<T>(batch);
      T* gl = logits.grad().data();
      for (int64_t i = 0; i < batch; ++i) {
        const std::vector<T> p = softmax_row(logits.ptr() + i * k, k);
        // below the clamp the sample contributes a constant, so no gradient
        if (p[static_cast<size_t>(tgt[i])] < clamp) continue;
        for (int64_t j = 0; j < k; ++j) {
          const T ind = j == tgt[i] ? T(1) : T(0);
          gl[i * k + j] += g * (p[static_cast<size_t>(j)] - ind);
        }
      }
    });
  }
  return out;
}

// alpha * rec + (1 - alpha) * cls
template <typename T>
Tensor<T> combined_loss(const Tensor<T>& rec_loss, const Tensor<T>& cls_loss,
                        double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw std::invalid_argument("combined_loss: alpha must lie in [0,1], got " +
                                std::to_string(alpha));
  return add(mul_scalar(rec_loss, static_cast<T>(alpha)),
             mul_scalar(cls_loss, static_cast<T>(1.0 - alpha)));
}

}  // namespace fgr
