#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace fgr {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// Dimension/shape contract violations; the message names the offending axis.
class ShapeError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
  using std::logic_error::logic_error;
};

namespace detail {

template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first backward accumulation
  bool requires_grad = false;
  bool from_op = false;  // produced by an op recorded on a tape
};

}  // namespace detail

// Dense N-d array in batch, channel, height, width order for image data.
// Copying a Tensor copies a handle; both handles address the same payload.
template <typename T>
class Tensor {
 public:
  using Data = detail::TensorData<T>;

  Tensor() : d_(std::make_shared<Data>()) {}

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : d_(std::make_shared<Data>()) {
    d_->shape = std::move(shape);
    d_->data.assign(static_cast<size_t>(shape_numel(d_->shape)), fill);
    d_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : d_(std::make_shared<Data>()) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw ShapeError("Tensor: " + std::to_string(values.size()) +
                       " values do not fill shape " + shape_str(shape));
    d_->shape = std::move(shape);
    d_->data = std::move(values);
    d_->requires_grad = requires_grad;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{v}, requires_grad);
  }

  const Shape& shape() const { return d_->shape; }
  int ndim() const { return static_cast<int>(d_->shape.size()); }
  int64_t dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(d_->data.size()); }

  std::vector<T>& data() const { return d_->data; }
  T* ptr() const { return d_->data.data(); }

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    d_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !d_->grad.empty(); }
  std::vector<T>& grad() const {
    if (d_->grad.empty())
      throw ContractError("Tensor: gradient not populated; run backward first");
    return d_->grad;
  }
  std::vector<T>& ensure_grad() const {
    if (d_->grad.empty()) d_->grad.assign(d_->data.size(), T(0));
    return d_->grad;
  }
  void reset_grad() const { d_->grad.clear(); }

  bool from_op() const { return d_->from_op; }
  Data* node() const { return d_.get(); }

  T item() const {
    if (size() != 1)
      throw ContractError("Tensor: item() on non-scalar of shape " +
                          shape_str(d_->shape));
    return d_->data[0];
  }

  T at(std::initializer_list<int64_t> idx) const {
    if (idx.size() != d_->shape.size())
      throw ShapeError("Tensor: index rank mismatch");
    int64_t off = 0;
    size_t axis = 0;
    for (int64_t i : idx) {
      off = off * d_->shape[axis] + i;
      ++axis;
    }
    return d_->data[static_cast<size_t>(off)];
  }

  // Deep copy of the payload (gradient state is not copied).
  Tensor clone() const {
    Tensor c(d_->shape, d_->data, d_->requires_grad);
    return c;
  }

  bool all_finite() const {
    for (T v : d_->data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

 private:
  std::shared_ptr<Data> d_;
};

// Ordered record of executed operations. Ops executed while a TapeScope is
// live are appended in execution order, which is also a valid topological
// order; backward replays each node exactly once in reverse.
template <typename T>
class Tape {
 public:
  struct Node {
    const char* op;
    std::function<void(Tape&)> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& active_slot() {
    thread_local Tape* slot = nullptr;
    return slot;
  }
  static Tape* active() { return active_slot(); }

  void record(const char* op, const Tensor<T>& output,
              std::function<void(Tape&)> backward_fn) {
    output.node()->from_op = true;
    outputs_.insert(output.node());
    nodes_.push_back(Node{op, std::move(backward_fn)});
  }

  size_t size() const { return nodes_.size(); }

  size_t count(std::string_view op) const {
    size_t n = 0;
    for (const Node& node : nodes_)
      if (op == node.op) ++n;
    return n;
  }

  bool produced(const Tensor<T>& t) const {
    return outputs_.count(t.node()) != 0;
  }

  // True if gradient should be accumulated into `t` during this replay.
  bool flows(const Tensor<T>& t) const {
    if (t.from_op()) return true;
    if (!t.requires_grad()) return false;
    return leaf_filter_.empty() || leaf_filter_.count(t.node()) != 0;
  }

  // Reverse-mode replay seeded at a scalar loss. When `leaves` is non-empty,
  // gradient accumulation into leaf tensors is restricted to that set;
  // intermediate results always propagate.
  void backward(const Tensor<T>& loss,
                const std::vector<Tensor<T>>& leaves = {}) {
    if (loss.size() != 1)
      throw ContractError("backward: loss must be scalar, got shape " +
                          shape_str(loss.shape()));
    if (!produced(loss))
      throw ContractError("backward: loss was not produced on this tape");
    leaf_filter_.clear();
    for (const Tensor<T>& l : leaves) leaf_filter_.insert(l.node());
    loss.ensure_grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
      it->backward(*this);
    leaf_filter_.clear();
  }

 private:
  std::vector<Node> nodes_;
  std::unordered_set<const void*> outputs_;
  std::unordered_set<const void*> leaf_filter_;
};

// Binds a Tape as the recording target for the current thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::active_slot()) {
    Tape<T>::active_slot() = &tape;
  }
  ~TapeScope() { Tape<T>::active_slot() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

template <typename T>
void backward(const Tensor<T>& loss, Tape<T>& tape,
              const std::vector<Tensor<T>>& leaves = {}) {
  tape.backward(loss, leaves);
}

namespace detail {

// Row-major kernels, tiled so the working set of the two inner loops stays
// cache-resident for the long-and-thin shapes convolution produces. The
// per-element accumulation order is independent of the tiling, so results
// stay bit-reproducible.

inline constexpr int64_t kGemmTileJ = 512;
inline constexpr int64_t kGemmTileK = 256;

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_acc(const T* __restrict a, const T* __restrict b, T* __restrict c,
              int64_t m, int64_t k, int64_t n) {
  for (int64_t j0 = 0; j0 < n; j0 += kGemmTileJ) {
    const int64_t j1 = std::min(n, j0 + kGemmTileJ);
    for (int64_t k0 = 0; k0 < k; k0 += kGemmTileK) {
      const int64_t k1 = std::min(k, k0 + kGemmTileK);
      for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t p = k0; p < k1; ++p) {
          const T aip = arow[p];
          const T* brow = b + p * n;
          for (int64_t j = j0; j < j1; ++j) crow[j] += aip * brow[j];
        }
      }
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
template <typename T>
void gemm_at_b_acc(const T* __restrict a, const T* __restrict b,
                   T* __restrict c, int64_t m, int64_t k, int64_t n) {
  for (int64_t k0 = 0; k0 < k; k0 += kGemmTileK) {
    const int64_t k1 = std::min(k, k0 + kGemmTileK);
    for (int64_t j0 = 0; j0 < n; j0 += kGemmTileJ) {
      const int64_t j1 = std::min(n, j0 + kGemmTileJ);
      for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* brow = b + i * n;
        for (int64_t p = k0; p < k1; ++p) {
          const T aip = arow[p];
          T* crow = c + p * n;
          for (int64_t j = j0; j < j1; ++j) crow[j] += aip * brow[j];
        }
      }
    }
  }
}

template <typename T>
void transpose(const T* src, T* dst, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

// Unfold one [C,H,W] image into columns [C*k*k, Ho*Wo] with zero padding.
template <typename T>
void im2col(const T* img, T* col, int64_t c_in, int64_t h, int64_t w,
            int64_t k, int64_t stride, int64_t pad, int64_t ho, int64_t wo) {
  for (int64_t c = 0; c < c_in; ++c) {
    const T* plane = img + c * h * w;
    for (int64_t ki = 0; ki < k; ++ki) {
      for (int64_t kj = 0; kj < k; ++kj) {
        T* row = col + ((c * k + ki) * k + kj) * (ho * wo);
        for (int64_t oh = 0; oh < ho; ++oh) {
          const int64_t ih = oh * stride + ki - pad;
          T* out = row + oh * wo;
          if (ih < 0 || ih >= h) {
            std::fill(out, out + wo, T(0));
            continue;
          }
          const T* in = plane + ih * w;
          for (int64_t ow = 0; ow < wo; ++ow) {
            const int64_t iw = ow * stride + kj - pad;
            out[ow] = (iw >= 0 && iw < w) ? in[iw] : T(0);
          }
        }
      }
    }
  }
}

// Scatter-add of column gradients back to one [C,H,W] image gradient.
template <typename T>
void col2im_acc(const T* col, T* img, int64_t c_in, int64_t h, int64_t w,
                int64_t k, int64_t stride, int64_t pad, int64_t ho,
                int64_t wo) {
  for (int64_t c = 0; c < c_in; ++c) {
    T* plane = img + c * h * w;
    for (int64_t ki = 0; ki < k; ++ki) {
      for (int64_t kj = 0; kj < k; ++kj) {
        const T* row = col + ((c * k + ki) * k + kj) * (ho * wo);
        for (int64_t oh = 0; oh < ho; ++oh) {
          const int64_t ih = oh * stride + ki - pad;
          if (ih < 0 || ih >= h) continue;
          const T* in = row + oh * wo;
          T* out = plane + ih * w;
          for (int64_t ow = 0; ow < wo; ++ow) {
            const int64_t iw = ow * stride + kj - pad;
            if (iw >= 0 && iw < w) out[iw] += in[ow];
          }
        }
      }
    }
  }
}

struct LerpTap {
  int64_t lo, hi;
  double t;
};

// Half-pixel-center sampling with border clamp: output index i reads source
// coordinate (i + 0.5) / factor - 0.5.
inline std::vector<LerpTap> upsample_taps(int64_t src, int64_t factor) {
  std::vector<LerpTap> taps(static_cast<size_t>(src * factor));
  for (int64_t i = 0; i < src * factor; ++i) {
    const double coord = (static_cast<double>(i) + 0.5) / factor - 0.5;
    const double base = std::floor(coord);
    double t = coord - base;
    int64_t lo = static_cast<int64_t>(base);
    int64_t hi = lo + 1;
    lo = std::clamp<int64_t>(lo, 0, src - 1);
    hi = std::clamp<int64_t>(hi, 0, src - 1);
    taps[static_cast<size_t>(i)] = LerpTap{lo, hi, t};
  }
  return taps;
}

template <typename T>
void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations. Each op validates shapes, computes the forward value, and, if a
// tape is active, records a closure that accumulates (+=) gradients into its
// inputs when replayed.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, int stride = 1, int padding = 0) {
  using detail::require;
  require<T>(input.ndim() == 4,
             "conv2d: input must be (batch,channel,height,width), got " +
                 shape_str(input.shape()));
  require<T>(weight.ndim() == 4,
             "conv2d: weight must be (out,in,k,k), got " +
                 shape_str(weight.shape()));
  require<T>(stride >= 1, "conv2d: stride must be positive");
  require<T>(padding >= 0, "conv2d: padding must be non-negative");
  const int64_t batch = input.dim(0), c_in = input.dim(1), h = input.dim(2),
                w = input.dim(3);
  const int64_t c_out = weight.dim(0), k = weight.dim(2);
  require<T>(weight.dim(2) == weight.dim(3), "conv2d: kernel must be square");
  require<T>(weight.dim(1) == c_in,
             "conv2d: channel axis mismatch: input has " +
                 std::to_string(c_in) + " channels, weight expects " +
                 std::to_string(weight.dim(1)));
  require<T>(bias.ndim() == 1 && bias.dim(0) == c_out,
             "conv2d: bias axis must have " + std::to_string(c_out) +
                 " entries, got " + shape_str(bias.shape()));
  require<T>(k <= h + 2 * padding,
             "conv2d: kernel exceeds padded input on height axis");
  require<T>(k <= w + 2 * padding,
             "conv2d: kernel exceeds padded input on width axis");

  const int64_t ho = (h + 2 * padding - k) / stride + 1;
  const int64_t wo = (w + 2 * padding - k) / stride + 1;
  const int64_t cols = c_in * k * k;
  const int64_t n = ho * wo;

  Tensor<T> out(Shape{batch, c_out, ho, wo});
  {
    std::vector<T> col(static_cast<size_t>(cols * n));
    const T* bptr = bias.ptr();
    for (int64_t b = 0; b < batch; ++b) {
      detail::im2col(input.ptr() + b * c_in * h * w, col.data(), c_in, h, w, k,
                     stride, padding, ho, wo);
      T* ob = out.ptr() + b * c_out * n;
      for (int64_t o = 0; o < c_out; ++o)
        std::fill(ob + o * n, ob + (o + 1) * n, bptr[o]);
      detail::gemm_acc(weight.ptr(), col.data(), ob, c_out, cols, n);
    }
  }

  if (Tape<T>* tape = Tape<T>::active()) {
    const int64_t s = stride, p = padding;
    tape->record("conv2d", out, [=](Tape<T>& tp) {
      if (!out.has_grad()) return;
      const bool want_in = tp.flows(input);
      const bool want_w = tp.flows(weight);
      const bool want_b = tp.flows(bias);
      if (!want_in && !want_w && !want_b) return;
      const T* go = out.grad().data();
      std::vector<T> col, col_t, gcol;
      if (want_w) {
        col.resize(static_cast<size_t>(cols * n));
        col_t.resize(static_cast<size_t>(cols * n));
        weight.ensure_grad();
      }
      if (want_in) {
        gcol.resize(static_cast<size_t>(cols * n));
        input.ensure_grad();
      }
      if (want_b) bias.ensure_grad();
      for (int64_t b = 0; b < batch; ++b) {
        const T* gob = go + b * c_out * n;
        if (want_b) {
          T* gb = bias.grad().data();
          for (int64_t o = 0; o < c_out; ++o) {
            T acc = T(0);
            const T* row = gob + o * n;
            for (int64_t j = 0; j < n; ++j) acc += row[j];
            gb[o] += acc;
          }
        }
        if (want_w) {
          detail::im2col(input.ptr() + b * c_in * h * w, col.data(), c_in, h,
                         w, k, s, p, ho, wo);
          detail::transpose(col.data(), col_t.data(), cols, n);
          detail::gemm_acc(gob, col_t.data(), weight.grad().data(), c_out, n,
                           cols);
        }
        if (want_in) {
          std::fill(gcol.begin(), gcol.end(), T(0));
          detail::gemm_at_b_acc(weight.ptr(), gob, gcol.data(), c_out, cols,
                                n);
          detail::col2im_acc(gcol.data(), input.grad().data() + b * c_in * h * w,
                             c_in, h, w, k, s, p, ho, wo);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, int kernel, int stride) {
  using detail::require;
  require<T>(input.ndim() == 4, "maxpool2d: input must be 4-d, got " +
                                    shape_str(input.shape()));
  require<T>(kernel >= 1 && stride >= 1,
             "maxpool2d: kernel and stride must be positive");
  const int64_t batch = input.dim(0), c = input.dim(1), h = input.dim(2),
                w = input.dim(3);
  require<T>(kernel <= h, "maxpool2d: kernel exceeds input height axis");
  require<T>(kernel <= w, "maxpool2d: kernel exceeds input width axis");
  const int64_t ho = (h - kernel) / stride + 1;
  const int64_t wo = (w - kernel) / stride + 1;

  Tensor<T> out(Shape{batch, c, ho, wo});
  const T* in = input.ptr();
  T* ov = out.ptr();
  for (int64_t bc = 0; bc < batch * c; ++bc) {
    const T* plane = in + bc * h * w;
    T* oplane = ov + bc * ho * wo;
    for (int64_t oh = 0; oh < ho; ++oh)
      for (int64_t ow = 0; ow < wo; ++ow) {
        T best = plane[(oh * stride) * w + ow * stride];
        for (int64_t ki = 0; ki < kernel; ++ki)
          for (int64_t kj = 0; kj < kernel; ++kj) {
            const T v = plane[(oh * stride + ki) * w + ow * stride + kj];
            if (v > best) best = v;
          }
        oplane[oh * wo + ow] = best;
      }
  }

  if (Tape<T>* tape = Tape<T>::active()) {
    const int64_t ks = kernel, st = stride;
    tape->record("maxpool2d", out, [=](Tape<T>& tp) {
      if (!out.has_grad() || !tp.flows(input)) return;
      input.ensure_grad();
      const T* in = input.ptr();
      const T* go = out.grad().data();
      T* gi = input.grad().data();
      for (int64_t bc = 0; bc < batch * c; ++bc) {
        const T* plane = in + bc * h * w;
        T* gplane = gi + bc * h * w;
        const T* gout = go + bc * ho * wo;
        for (int64_t oh = 0; oh < ho; ++oh)
          for (int64_t ow = 0; ow < wo; ++ow) {
            // ties route to the first maximum in row-major scan order
            int64_t arg = (oh * st) * w + ow * st;
            T best = plane[arg];
            for (int64_t ki = 0; ki < ks; ++ki)
              for (int64_t kj = 0; kj < ks; ++kj) {
                const int64_t idx = (oh * st + ki) * w + ow * st + kj;
                if (plane[idx] > best) {
                  best = plane[idx];
                  arg = idx;
                }
              }
            gplane[arg] += gout[oh * wo + ow];
          }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& input, int factor) {
  using detail::require;
  require<T>(input.ndim() == 4, "bilinear_upsample: input must be 4-d, got " +
                                    shape_str(input.shape()));
  require<T>(factor >= 1, "bilinear_upsample: factor must be >= 1");
  const int64_t batch = input.dim(0), c = input.dim(1), h = input.dim(2),
                w = input.dim(3);
  const int64_t fh = h * factor, fw = w * factor;
  const auto ytaps = detail::upsample_taps(h, factor);
  const auto xtaps = detail::upsample_taps(w, factor);

  Tensor<T> out(Shape{batch, c, fh, fw});
  const T* in = input.ptr();
  T* ov = out.ptr();
  for (int64_t bc = 0; bc < batch * c; ++bc) {
    const T* plane = in + bc * h * w;
    T* oplane = ov + bc * fh * fw;
    for (int64_t oy = 0; oy < fh; ++oy) {
      const auto& yt = ytaps[static_cast<size_t>(oy)];
      const T wy1 = static_cast<T>(yt.t), wy0 = T(1) - wy1;
      const T* r0 = plane + yt.lo * w;
      const T* r1 = plane + yt.hi * w;
      T* orow = oplane + oy * fw;
      for (int64_t ox = 0; ox < fw; ++ox) {
        const auto& xt = xtaps[static_cast<size_t>(ox)];
        const T wx1 = static_cast<T>(xt.t), wx0 = T(1) - wx1;
        orow[ox] = wy0 * (wx0 * r0[xt.lo] + wx1 * r0[xt.hi]) +
                   wy1 * (wx0 * r1[xt.lo] + wx1 * r1[xt.hi]);
      }
    }
  }

  if (Tape<T>* tape = Tape<T>::active()) {
    tape->record("bilinear_upsample", out, [=](Tape<T>& tp) {
      if (!out.has_grad() || !tp.flows(input)) return;
      input.ensure_grad();
      const T* go = out.grad().data();
      T* gi = input.grad().data();
      for (int64_t bc = 0; bc < batch * c; ++bc) {
        const T* gplane = go + bc * fh * fw;
        T* giplane = gi + bc * h * w;
        for (int64_t oy = 0; oy < fh; ++oy) {
          const auto& yt = ytaps[static_cast<size_t>(oy)];
          const T wy1 = static_cast<T>(yt.t), wy0 = T(1) - wy1;
          const T* grow = gplane + oy * fw;
          for (int64_t ox = 0; ox < fw; ++ox) {
            const auto& xt = xtaps[static_cast<size_t>(ox)];
            const T wx1 = static_cast<T>(xt.t), wx0 = T(1) - wx1;
            const T g = grow[ox];
            giplane[yt.lo * w + xt.lo] += wy0 * wx0 * g;
            giplane[yt.lo * w + xt.hi] += wy0 * wx1 * g;
            giplane[yt.hi * w + xt.lo] += wy1 * wx0 * g;
            giplane[yt.hi * w + xt.hi] += wy1 * wx1 * g;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* xv = x.ptr();
  T* ov = out.ptr();
  const int64_t n = x.size();
  for (int64_t i = 0; i < n; ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  if (Tape<T>* tape = Tape<T>::active()) {
    tape->record("relu", out, [=](Tape<T>& tp) {
      if (!out.has_grad() || !tp.flows(x)) return;
      x.ensure_grad();
      const T* xv = x.ptr();
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      // subgradient at 0 is 0
      for (int64_t i = 0; i < n; ++i)
        if (xv[i] > T(0)) gx[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* xv = x.ptr();
  T* ov = out.ptr();
  const int64_t n = x.size();
  for (int64_t i = 0; i < n; ++i)
    ov[i] = T(1) / (T(1) + std::exp(-xv[i]));
  if (Tape<T>* tape = Tape<T>::active()) {
    tape->record("sigmoid", out, [=](Tape<T>& tp) {
      if (!out.has_grad() || !tp.flows(x)) return;
      x.ensure_grad();
      const T* ov = out.ptr();
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t i = 0; i < n; ++i) gx[i] += go[i] * ov[i] * (T(1) - ov[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  using detail::require;
  require<T>(input.ndim() == 2, "linear: input must be (batch,features), got " +
                                    shape_str(input.shape()));
  require<T>(weight.ndim() == 2, "linear: weight must be (in,out), got " +
                                     shape_str(weight.shape()));
  const int64_t b = input.dim(0), f = input.dim(1), g = weight.dim(1);
  require<T>(weight.dim(0) == f,
             "linear: inner axis mismatch: input features " +
                 std::to_string(f) + " vs weight rows " +
                 std::to_string(weight.dim(0)));
  require<T>(bias.ndim() == 1 && bias.dim(0) == g,
             "linear: bias axis must have " + std::to_string(g) + " entries");

  Tensor<T> out(Shape{b, g});
  T* ov = out.ptr();
  const T* bp = bias.ptr();
  for (int64_t i = 0; i < b; ++i) std::copy(bp, bp + g, ov + i * g);
  detail::gemm_acc(input.ptr(), weight.ptr(), ov, b, f, g);

  if (Tape<T>* tape = Tape<T>::active()) {
    tape->record("linear", out, [=](Tape<T>& tp) {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      if (tp.flows(input)) {
        input.ensure_grad();
        T* gi = input.grad().data();
        const T* wv = weight.ptr();
        for (int64_t i = 0; i < b; ++i)
          for (int64_t p = 0; p < f; ++p) {
            const T* grow = go + i * g;
            const T* wrow = wv + p * g;
            T acc = T(0);
            for (int64_t j = 0; j < g; ++j) acc += grow[j] * wrow[j];
            gi[i * f + p] += acc;
          }
      }
      if (tp.flows(weight)) {
        weight.ensure_grad();
        detail::gemm_at_b_acc(input.ptr(), go, weight.grad().data(), b, f, g);
      }
      if (tp.flows(bias)) {
        bias.ensure_grad();
        T* gb = bias.grad().data();
        for (int64_t i = 0; i < b; ++i) {
          const T* grow = go + i * g;
          for (int64_t j = 0; j < g; ++j) gb[j] += grow[j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  using detail::require;
  require<T>(a.ndim() == 4 && b.ndim() == 4,
             "concat_channels: inputs must be 4-d");
  require<T>(a.dim(0) == b.dim(0),
             "concat_channels: batch axis mismatch: " +
                 std::to_string(a.dim(0)) + " vs " + std::to_string(b.dim(0)));
  require<T>(a.dim(2) == b.dim(2),
             "concat_channels: height axis mismatch: " +
                 std::to_string(a.dim(2)) + " vs " + std::to_string(b.dim(2)));
  require<T>(a.dim(3) == b.dim(3),
             "concat_channels: width axis mismatch: " +
                 std::to_string(a.dim(3)) + " vs " + std::to_string(b.dim(3)));
  const int64_t batch = a.dim(0), c1 = a.dim(1), c2 = b.dim(1), h = a.dim(2),
                w = a.dim(3);
  const int64_t plane = h * w;
  Tensor<T> out(Shape{batch, c1 + c2, h, w});
  for (int64_t i = 0; i < batch; ++i) {
    std::copy(a.ptr() + i * c1 * plane, a.ptr() + (i + 1) * c1 * plane,
              out.ptr() + i * (c1 + c2) * plane);
    std::copy(b.ptr() + i * c2 * plane, b.ptr() + (i + 1) * c2 * plane,
              out.ptr() + (i * (c1 + c2) + c1) * plane);
  }
  if (Tape<T>* tape = Tape<T>::active()) {
    tape->record("concat_channels", out, [=](Tape<T>& tp) {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      if (tp.flows(a)) {
        a.ensure_grad();
        T* ga = a.grad().data();
        for (int64_t i = 0; i < batch; ++i) {
          const T* src = go + i * (c1 + c2) * plane;
          T* dst = ga + i * c1 * plane;
          for (int64_t j = 0; j < c1 * plane; ++j) dst[j] += src[j];
        }
      }
      if (tp.flows(b)) {
        b.ensure_grad();
        T* gb = b.grad().data();
        for (int64_t i = 0; i < batch; ++i) {
          const T* src = go + (i * (c1 + c2) + c1) * plane;
          T* dst = gb + i * c2 * plane;
          for (int64_t j = 0; j < c2 * plane; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require<T>(x.ndim() == 4, "global_avg_pool: input must be 4-d, got " +
                                        shape_str(x.shape()));
  const int64_t batch = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{batch, c});
  const T* xv = x.ptr();
  T* ov = out.ptr();
  for (int64_t bc = 0; bc < batch * c; ++bc) {
    T acc = T(0);
    const T* p = xv + bc * plane;
    for (int64_t j = 0; j < plane; ++j) acc += p[j];
    ov[bc] = acc / static_cast<T>(plane);
  }
  if (Tape<T>* tape = Tape<T>::active()) {
    tape->record("global_avg_pool", out, [=](Tape<T>& tp) {
      if (!out.has_grad() || !tp.flows(x)) return;
      x.ensure_grad();
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t bc = 0; bc < batch * c; ++bc) {
        const T g = go[bc] / static_cast<T>(plane);
        T* p = gx + bc * plane;
        for (int64_t j = 0; j < plane; ++j) p[j] += g;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape target) {
  if (shape_numel(target) != x.size())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(target));
  Tensor<T> out(std::move(target), x.data());
  if (Tape<T>* tape = Tape<T>::active()) {
    tape->record("reshape", out, [=](Tape<T>& tp) {
      if (!out.has_grad() || !tp.flows(x)) return;
      x.ensure_grad();
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      const int64_t n = x.size();
      for (int64_t i = 0; i < n; ++i) gx[i] += go[i];
    });
  }
  return out;
}

namespace detail {

template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary_elementwise(const char* name, const Tensor<T>& a,
                             const Tensor<T>& b, Fwd fwd, Bwd bwd) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(name) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  const T* av = a.ptr();
  const T* bv = b.ptr();
  T* ov = out.ptr();
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) ov[i] = fwd(av[i], bv[i]);
  if (Tape<T>* tape = Tape<T>::active()) {
    tape->record(name, out, [=](Tape<T>& tp) {
      if (!out.has_grad()) return;
      const bool wa = tp.flows(a), wb = tp.flows(b);
      if (!wa && !wb) return;
      if (wa) a.ensure_grad();
      if (wb) b.ensure_grad();
      const T* go = out.grad().data();
      T* ga = wa ? a.grad().data() : nullptr;
      T* gb = wb ? b.grad().data() : nullptr;
      const T* av = a.ptr();
      const T* bv = b.ptr();
      for (int64_t i = 0; i < n; ++i) bwd(go[i], av[i], bv[i], ga ? ga + i : nullptr,
                                          gb ? gb + i : nullptr);
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_elementwise<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T g, T, T, T* ga, T* gb) {
        if (ga) *ga += g;
        if (gb) *gb += g;
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_elementwise<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T g, T, T, T* ga, T* gb) {
        if (ga) *ga += g;
        if (gb) *gb -= g;
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_elementwise<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T g, T x, T y, T* ga, T* gb) {
        if (ga) *ga += g * y;
        if (gb) *gb += g * x;
      });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_elementwise<T>(
      "div", a, b, [](T x, T y) { return x / y; },
      [](T g, T x, T y, T* ga, T* gb) {
        if (ga) *ga += g / y;
        if (gb) *gb -= g * x / (y * y);
      });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  Tensor<T> out(x.shape());
  const T* xv = x.ptr();
  T* ov = out.ptr();
  const int64_t n = x.size();
  for (int64_t i = 0; i < n; ++i) ov[i] = xv[i] + c;
  if (Tape<T>* tape = Tape<T>::active()) {
    tape->record("add_scalar", out, [=](Tape<T>& tp) {
      if (!out.has_grad() || !tp.flows(x)) return;
      x.ensure_grad();
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t i = 0; i < n; ++i) gx[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
  Tensor<T> out(x.shape());
  const T* xv = x.ptr();
  T* ov = out.ptr();
  const int64_t n = x.size();
  for (int64_t i = 0; i < n; ++i) ov[i] = xv[i] * c;
  if (Tape<T>* tape = Tape<T>::active()) {
    tape->record("mul_scalar", out, [=](Tape<T>& tp) {
      if (!out.has_grad() || !tp.flows(x)) return;
      x.ensure_grad();
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t i = 0; i < n; ++i) gx[i] += go[i] * c;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  const T* xv = x.ptr();
  const int64_t n = x.size();
  for (int64_t i = 0; i < n; ++i) acc += xv[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (Tape<T>* tape = Tape<T>::active()) {
    tape->record("sum", out, [=](Tape<T>& tp) {
      if (!out.has_grad() || !tp.flows(x)) return;
      x.ensure_grad();
      const T g = out.grad()[0];
      T* gx = x.grad().data();
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  detail::require<T>(x.size() > 0, "mean: empty tensor");
  T acc = T(0);
  const T* xv = x.ptr();
  const int64_t n = x.size();
  for (int64_t i = 0; i < n; ++i) acc += xv[i];
  Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(n));
  if (Tape<T>* tape = Tape<T>::active()) {
    tape->record("mean", out, [=](Tape<T>& tp) {
      if (!out.has_grad() || !tp.flows(x)) return;
      x.ensure_grad();
      const T g = out.grad()[0] / static_cast<T>(n);
      T* gx = x.grad().data();
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

// Scalar view of one element, by flat index.
template <typename T>
Tensor<T> pick(const Tensor<T>& x, int64_t flat_index) {
  if (flat_index < 0 || flat_index >= x.size())
    throw ShapeError("pick: index " + std::to_string(flat_index) +
                     " out of range for " + shape_str(x.shape()));
  Tensor<T> out = Tensor<T>::scalar(x.data()[static_cast<size_t>(flat_index)]);
  if (Tape<T>* tape = Tape<T>::active()) {
    tape->record("pick", out, [=](Tape<T>& tp) {
      if (!out.has_grad() || !tp.flows(x)) return;
      x.ensure_grad();
      x.grad()[static_cast<size_t>(flat_index)] += out.grad()[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> pick(const Tensor<T>& x, int64_t row, int64_t col) {
  detail::require<T>(x.ndim() == 2, "pick: row/col form needs a 2-d tensor");
  return pick(x, row * x.dim(1) + col);
}

// One batch element as a batch of size 1.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, int64_t index) {
  detail::require<T>(x.ndim() >= 1, "slice_batch: scalar input");
  if (index < 0 || index >= x.dim(0))
    throw ShapeError("slice_batch: batch index " + std::to_string(index) +
                     " out of range for " + shape_str(x.shape()));
  Shape shape = x.shape();
  shape[0] = 1;
  const int64_t plane = x.size() / x.dim(0);
  Tensor<T> out(shape);
  std::copy(x.ptr() + index * plane, x.ptr() + (index + 1) * plane, out.ptr());
  if (Tape<T>* tape = Tape<T>::active()) {
    tape->record("slice_batch", out, [=](Tape<T>& tp) {
      if (!out.has_grad() || !tp.flows(x)) return;
      x.ensure_grad();
      const T* go = out.grad().data();
      T* gx = x.grad().data() + index * plane;
      for (int64_t i = 0; i < plane; ++i) gx[i] += go[i];
    });
  }
  return out;
}

}  // namespace fgr
