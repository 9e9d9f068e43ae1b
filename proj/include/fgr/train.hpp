#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fgr/losses.hpp"
#include "fgr/model.hpp"
#include "fgr/rng.hpp"
#include "fgr/tensor.hpp"

namespace fgr {

enum class RecLoss { MSE, MAE, SSIM };

inline const char* rec_loss_name(RecLoss r) {
  switch (r) {
    case RecLoss::MSE: return "mse";
    case RecLoss::MAE: return "mae";
    case RecLoss::SSIM: return "ssim";
  }
  return "?";
}

inline RecLoss parse_rec_loss(const std::string& s) {
  if (s == "mse" || s == "MSE") return RecLoss::MSE;
  if (s == "mae" || s == "MAE") return RecLoss::MAE;
  if (s == "ssim" || s == "SSIM") return RecLoss::SSIM;
  throw std::invalid_argument("unknown reconstruction loss: " + s);
}

struct TrainConfig {
  double learning_rate = 0.001;
  int batch_size = 2;
  int epochs = 15;
  double alpha = 0.5;
  RecLoss rec_loss = RecLoss::MSE;
  std::optional<double> lr_decay_gamma;  // single mid-run decay when present
  uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0))
      throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
    if (batch_size < 1)
      throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    if (!(alpha >= 0.0 && alpha <= 1.0))
      throw std::invalid_argument("TrainConfig: alpha must lie in [0,1]");
    if (lr_decay_gamma && !(*lr_decay_gamma > 0.0 && *lr_decay_gamma <= 1.0))
      throw std::invalid_argument("TrainConfig: lr_decay_gamma must lie in (0,1]");
  }
};

template <typename T>
struct LabeledImage {
  Tensor<T> image;  // [channels, side, side]
  int label = 0;
};

// --------------------------------------------------------------------------
// Adam
// --------------------------------------------------------------------------

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;  // one slot per parameter tensor
  int64_t t = 0;
};

template <typename T>
AdamState<T> init_adam(FGRNetParams<T>& params) {
  AdamState<T> state;
  params.for_each_parameter([&](const std::string&, const Tensor<T>& p) {
    state.m.emplace_back(p.data().size(), T(0));
    state.v.emplace_back(p.data().size(), T(0));
  });
  return state;
}

// Bias-corrected Adam update for one tensor. A missing gradient counts as
// zero. `t` is the already-incremented step counter.
template <typename T>
void adam_update(std::vector<T>& value, const std::vector<T>* grad,
                 std::vector<T>& m, std::vector<T>& v, int64_t t, double lr,
                 double beta1, double beta2, double eps) {
  const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
  const T corr1 = static_cast<T>(1.0 - std::pow(beta1, static_cast<double>(t)));
  const T corr2 = static_cast<T>(1.0 - std::pow(beta2, static_cast<double>(t)));
  const T step = static_cast<T>(lr);
  const T epsilon = static_cast<T>(eps);
  for (size_t i = 0; i < value.size(); ++i) {
    const T g = grad ? (*grad)[i] : T(0);
    m[i] = b1 * m[i] + (T(1) - b1) * g;
    v[i] = b2 * v[i] + (T(1) - b2) * g * g;
    const T mhat = m[i] / corr1;
    const T vhat = v[i] / corr2;
    value[i] -= step * mhat / (std::sqrt(vhat) + epsilon);
  }
}

template <typename T>
void adam_step(FGRNetParams<T>& params, AdamState<T>& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  ++state.t;
  size_t slot = 0;
  params.for_each_parameter([&](const std::string& name, const Tensor<T>& p) {
    const std::vector<T>* grad = p.has_grad() ? &p.grad() : nullptr;
    if (grad)
      for (T g : *grad)
        if (!std::isfinite(static_cast<double>(g)))
          throw std::runtime_error("adam_step: non-finite gradient in " + name);
    adam_update(p.data(), grad, state.m[slot], state.v[slot], state.t, lr,
                beta1, beta2, eps);
    ++slot;
  });
}

// --------------------------------------------------------------------------
// Augmentation and balancing
// --------------------------------------------------------------------------

template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& img) {
  const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor<T> out(img.shape());
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        out.ptr()[(ch * h + y) * w + x] = img.ptr()[(ch * h + y) * w + (w - 1 - x)];
  return out;
}

template <typename T>
Tensor<T> flip_vertical(const Tensor<T>& img) {
  const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor<T> out(img.shape());
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < h; ++y)
      std::copy(img.ptr() + (ch * h + (h - 1 - y)) * w,
                img.ptr() + (ch * h + (h - 1 - y)) * w + w,
                out.ptr() + (ch * h + y) * w);
  return out;
}

// Clockwise quarter turns on a square image.
template <typename T>
Tensor<T> rotate_quarter(const Tensor<T>& img, int quarter_turns) {
  const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  detail::require<T>(h == w, "rotate_quarter: image must be square, got " +
                                 shape_str(img.shape()));
  const int q = ((quarter_turns % 4) + 4) % 4;
  if (q == 0) return img.clone();
  Tensor<T> out(img.shape());
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        int64_t sy = y, sx = x;
        switch (q) {
          case 1: sy = h - 1 - x; sx = y; break;
          case 2: sy = h - 1 - y; sx = w - 1 - x; break;
          case 3: sy = x; sx = w - 1 - y; break;
        }
        out.ptr()[(ch * h + y) * w + x] = img.ptr()[(ch * h + sy) * w + sx];
      }
  return out;
}

// Uniform draw over identity, the two flips and the three quarter rotations;
// every choice is an exact pixel permutation, so labels are preserved.
template <typename T>
Tensor<T> augment(const Tensor<T>& image, Rng& rng) {
  detail::require<T>(image.ndim() == 3 && image.dim(1) == image.dim(2),
                     "augment: image must be square (channels,side,side)");
  switch (rng.uniform_int(6)) {
    case 0: return image.clone();
    case 1: return flip_horizontal(image);
    case 2: return flip_vertical(image);
    case 3: return rotate_quarter(image, 1);
    case 4: return rotate_quarter(image, 2);
    default: return rotate_quarter(image, 3);
  }
}

// Oversamples minority classes with augmented copies until every class
// matches the majority count. No sample is dropped; originals keep their
// order and copies are appended.
template <typename T>
std::vector<LabeledImage<T>> balance_dataset(
    const std::vector<LabeledImage<T>>& samples, Rng& rng) {
  if (samples.empty())
    throw std::invalid_argument("balance_dataset: empty sample set");
  int num_classes = 0;
  for (const auto& s : samples) num_classes = std::max(num_classes, s.label + 1);
  std::vector<std::vector<size_t>> by_class(static_cast<size_t>(num_classes));
  for (size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].label < 0)
      throw std::invalid_argument("balance_dataset: negative label");
    by_class[static_cast<size_t>(samples[i].label)].push_back(i);
  }
  size_t target = 0;
  for (const auto& idx : by_class) {
    if (idx.empty())
      throw std::invalid_argument("balance_dataset: a class has no samples");
    target = std::max(target, idx.size());
  }
  std::vector<LabeledImage<T>> out = samples;
  for (int c = 0; c < num_classes; ++c) {
    const auto& idx = by_class[static_cast<size_t>(c)];
    for (size_t need = target - idx.size(); need > 0; --need) {
      const size_t base = idx[static_cast<size_t>(rng.uniform_int(
          static_cast<int>(idx.size())))];
      out.push_back({augment(samples[base].image, rng), c});
    }
  }
  return out;
}

// --------------------------------------------------------------------------
// Training loop
// --------------------------------------------------------------------------

struct EpochStats {
  double rec_loss = 0.0;
  double cls_loss = 0.0;
  double total_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;

  // tab-separated: epoch, rec_loss, cls_loss, total_loss, val_accuracy
  std::string to_table() const {
    std::ostringstream os;
    os << "epoch\trec_loss\tcls_loss\ttotal_loss\tval_accuracy\n";
    os << std::setprecision(10);
    for (size_t e = 0; e < epochs.size(); ++e)
      os << e + 1 << '\t' << epochs[e].rec_loss << '\t' << epochs[e].cls_loss
         << '\t' << epochs[e].total_loss << '\t' << epochs[e].val_accuracy
         << '\n';
    return os.str();
  }
};

namespace detail {

template <typename T>
Tensor<T> assemble_batch(const std::vector<LabeledImage<T>>& samples,
                         const std::vector<size_t>& order, size_t start,
                         size_t count, std::vector<int>& labels) {
  const Shape& s = samples[order[start]].image.shape();
  Tensor<T> batch(Shape{static_cast<int64_t>(count), s[0], s[1], s[2]});
  labels.clear();
  const int64_t plane = shape_numel(s);
  for (size_t i = 0; i < count; ++i) {
    const LabeledImage<T>& sample = samples[order[start + i]];
    std::copy(sample.image.ptr(), sample.image.ptr() + plane,
              batch.ptr() + static_cast<int64_t>(i) * plane);
    labels.push_back(sample.label);
  }
  return batch;
}

template <typename T>
Tensor<T> reconstruction_loss(RecLoss kind, const Tensor<T>& recon,
                              const Tensor<T>& target) {
  switch (kind) {
    case RecLoss::MSE: return mse_loss(recon, target);
    case RecLoss::MAE: return mae_loss(recon, target);
    case RecLoss::SSIM: {
      // mean of per-image ssim losses
      const int64_t b = recon.dim(0);
      Tensor<T> acc = ssim_loss(slice_batch(recon, 0), slice_batch(target, 0));
      for (int64_t i = 1; i < b; ++i)
        acc = add(acc, ssim_loss(slice_batch(recon, i), slice_batch(target, i)));
      return mul_scalar(acc, T(1) / static_cast<T>(b));
    }
  }
  throw std::logic_error("reconstruction_loss: bad kind");
}

}  // namespace detail

template <typename T>
double validation_accuracy(const FGRNetParams<T>& params,
                           const std::vector<LabeledImage<T>>& val) {
  if (val.empty()) return 0.0;
  int correct = 0;
  for (const auto& sample : val) {
    const Shape& s = sample.image.shape();
    Tensor<T> batch(Shape{1, s[0], s[1], s[2]}, sample.image.data());
    Tensor<T> logits = forward_infer(params, batch);
    if (argmax_row(logits.ptr(), logits.dim(1)) == sample.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(val.size());
}

template <typename T>
double mean_validation_ssim(const FGRNetParams<T>& params,
                            const std::vector<LabeledImage<T>>& val) {
  if (val.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& sample : val) {
    const Shape& s = sample.image.shape();
    Tensor<T> batch(Shape{1, s[0], s[1], s[2]}, sample.image.data());
    auto out = forward_train(params, batch);
    acc += static_cast<double>(ssim(out.reconstruction, batch).item());
  }
  return acc / static_cast<double>(val.size());
}

// Joint optimization of reconstruction and classification. Shuffled
// mini-batches, Adam updates, one EpochStats entry per epoch; fully
// deterministic in config.seed.
template <typename T>
TrainHistory train(FGRNetParams<T>& params,
                   const std::vector<LabeledImage<T>>& train_set,
                   const std::vector<LabeledImage<T>>& val_set,
                   const TrainConfig& config) {
  config.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");

  Rng rng(config.seed);
  AdamState<T> state = init_adam(params);
  TrainHistory history;

  std::vector<size_t> order(train_set.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double lr = config.learning_rate;
    if (config.lr_decay_gamma && epoch >= config.epochs / 2)
      lr *= *config.lr_decay_gamma;

    // Fisher-Yates with the run RNG: a permutation, never a resample
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1],
                order[static_cast<size_t>(rng.uniform_int(static_cast<int>(i)))]);

    EpochStats stats;
    size_t steps = 0;
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(config.batch_size)) {
      const size_t count = std::min(static_cast<size_t>(config.batch_size),
                                    order.size() - start);
      std::vector<int> labels;
      Tensor<T> batch = detail::assemble_batch(train_set, order, start, count, labels);

      Tape<T> tape;
      double rec_val, cls_val, total_val;
      {
        TapeScope<T> scope(tape);
        ForwardResult<T> out = forward_train(params, batch);
        Tensor<T> rec = detail::reconstruction_loss(config.rec_loss,
                                                    out.reconstruction, batch);
        Tensor<T> cls = cross_entropy(out.logits, labels);
        Tensor<T> loss = combined_loss(rec, cls, config.alpha);
        rec_val = static_cast<double>(rec.item());
        cls_val = static_cast<double>(cls.item());
        total_val = static_cast<double>(loss.item());
        if (!std::isfinite(total_val))
          throw std::runtime_error("train: loss diverged at epoch " +
                                   std::to_string(epoch + 1) + ", step " +
                                   std::to_string(steps + 1));
        params.zero_grads();
        tape.backward(loss);
      }
      adam_step(params, state, lr);
      stats.rec_loss += rec_val;
      stats.cls_loss += cls_val;
      stats.total_loss += total_val;
      ++steps;
    }
    stats.rec_loss /= static_cast<double>(steps);
    stats.cls_loss /= static_cast<double>(steps);
    stats.total_loss /= static_cast<double>(steps);
    stats.val_accuracy = validation_accuracy(params, val_set);
    history.epochs.push_back(stats);
  }
  return history;
}

}  // namespace fgr
