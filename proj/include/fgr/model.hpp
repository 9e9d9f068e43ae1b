#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fgr/rng.hpp"
#include "fgr/tensor.hpp"

namespace fgr {

class ConfigError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Architecture hyperparameters. Every parameter tensor shape is a pure
// function of this struct. Stages are 3x3/stride-1/pad-1 conv stacks, each
// closed by a 2x2/2 max-pool; the decoder mirrors them with bilinear
// upsampling and skip concatenation; the classifier runs on the globally
// average-pooled bottleneck.
struct ModelConfig {
  int input_size = 480;
  int in_channels = 3;
  std::vector<int> block_conv_counts{2, 2, 2, 3, 3};
  std::vector<int> block_channels{64, 128, 256, 512, 512};
  int bottleneck_channels = 512;
  int num_classes = 2;
  std::vector<int> classifier_widths{256, 128, 64};
  std::string preset = "paper";

  static ModelConfig paper(int num_classes = 2) {
    ModelConfig c;
    c.num_classes = num_classes;
    return c;
  }

  // Reduced configuration with the same topology: 64 px, narrow channels.
  static ModelConfig desk(int num_classes = 2) {
    ModelConfig c;
    c.input_size = 64;
    c.block_channels = {8, 16, 32, 64, 64};
    c.bottleneck_channels = 64;
    c.num_classes = num_classes;
    c.preset = "desk";
    return c;
  }

  int stages() const { return static_cast<int>(block_channels.size()); }
  int bottleneck_spatial() const { return input_size >> stages(); }

  // Spatial side after each stage's pool.
  std::vector<int> stage_spatial_sizes() const {
    std::vector<int> sizes;
    int s = input_size;
    for (int i = 0; i < stages(); ++i) {
      s /= 2;
      sizes.push_back(s);
    }
    return sizes;
  }

  void validate() const {
    if (block_channels.empty())
      throw ConfigError("ModelConfig: no stages configured");
    if (block_conv_counts.size() != block_channels.size())
      throw ConfigError("ModelConfig: block lists must have equal length");
    for (int n : block_conv_counts)
      if (n < 1) throw ConfigError("ModelConfig: conv counts must be >= 1");
    for (int c : block_channels)
      if (c < 2 || c % 2 != 0)
        throw ConfigError("ModelConfig: block channels must be even and >= 2");
    if (in_channels < 1) throw ConfigError("ModelConfig: in_channels must be >= 1");
    if (num_classes != 2 && num_classes != 3)
      throw ConfigError("ModelConfig: num_classes must be 2 or 3");
    if (bottleneck_channels != block_channels.back())
      throw ConfigError(
          "ModelConfig: bottleneck_channels must equal the last stage width");
    if (classifier_widths.empty())
      throw ConfigError("ModelConfig: classifier_widths must be non-empty");
    for (int w : classifier_widths)
      if (w < 1) throw ConfigError("ModelConfig: classifier widths must be >= 1");
    const int div = 1 << stages();
    if (input_size <= 0 || input_size % div != 0)
      throw ConfigError("ModelConfig: input_size must be a positive multiple of " +
                        std::to_string(div));
  }
};

// Enumerates (name, shape) for every parameter, in the fixed order used by
// initialization, checkpoints and the optimizer.
template <typename Fn>
void for_each_parameter_shape(const ModelConfig& cfg, Fn&& fn) {
  const int stages = cfg.stages();
  int in_ch = cfg.in_channels;
  for (int s = 0; s < stages; ++s) {
    const int out_ch = cfg.block_channels[static_cast<size_t>(s)];
    for (int c = 0; c < cfg.block_conv_counts[static_cast<size_t>(s)]; ++c) {
      const std::string base =
          "enc.s" + std::to_string(s + 1) + ".c" + std::to_string(c + 1);
      fn(base + ".weight", Shape{out_ch, in_ch, 3, 3});
      fn(base + ".bias", Shape{out_ch});
      in_ch = out_ch;
    }
  }
  const int cb = cfg.bottleneck_channels;
  fn("dec.center.c1.weight", Shape{cb, cb, 3, 3});
  fn("dec.center.c1.bias", Shape{cb});
  fn("dec.center.c2.weight", Shape{cb / 2, cb, 3, 3});
  fn("dec.center.c2.bias", Shape{cb / 2});
  int stream = cb / 2;
  for (int k = 1; k <= stages; ++k) {
    const int skip_ch = cfg.block_channels[static_cast<size_t>(stages - k)];
    const int cat = stream + skip_ch;
    const int mid = skip_ch;
    const int out = skip_ch / 2;
    const std::string base = "dec.b" + std::to_string(k);
    fn(base + ".c1.weight", Shape{mid, cat, 3, 3});
    fn(base + ".c1.bias", Shape{mid});
    fn(base + ".c2.weight", Shape{out, mid, 3, 3});
    fn(base + ".c2.bias", Shape{out});
    stream = out;
  }
  fn("dec.final.weight", Shape{cfg.in_channels, stream, 1, 1});
  fn("dec.final.bias", Shape{cfg.in_channels});
  int f = cb;
  for (size_t i = 0; i <= cfg.classifier_widths.size(); ++i) {
    const int g = i < cfg.classifier_widths.size() ? cfg.classifier_widths[i]
                                                   : cfg.num_classes;
    const std::string base = "cls.l" + std::to_string(i + 1);
    fn(base + ".weight", Shape{f, g});
    fn(base + ".bias", Shape{g});
    f = g;
  }
}

inline int64_t parameter_count(const ModelConfig& cfg) {
  int64_t n = 0;
  for_each_parameter_shape(cfg, [&](const std::string&, const Shape& s) {
    n += shape_numel(s);
  });
  return n;
}

template <typename T>
struct ConvParam {
  Tensor<T> weight, bias;
};

template <typename T>
struct LinearParam {
  Tensor<T> weight, bias;
};

template <typename T>
struct FGRNetParams {
  ModelConfig config;
  std::vector<std::vector<ConvParam<T>>> encoder;          // [stage][conv]
  ConvParam<T> center1, center2;
  std::vector<std::pair<ConvParam<T>, ConvParam<T>>> decoder;  // per block
  ConvParam<T> final_proj;
  std::vector<LinearParam<T>> classifier;

  template <typename Fn>
  void for_each_parameter(Fn&& fn) {
    for (size_t s = 0; s < encoder.size(); ++s)
      for (size_t c = 0; c < encoder[s].size(); ++c) {
        const std::string base =
            "enc.s" + std::to_string(s + 1) + ".c" + std::to_string(c + 1);
        fn(base + ".weight", encoder[s][c].weight);
        fn(base + ".bias", encoder[s][c].bias);
      }
    fn("dec.center.c1.weight", center1.weight);
    fn("dec.center.c1.bias", center1.bias);
    fn("dec.center.c2.weight", center2.weight);
    fn("dec.center.c2.bias", center2.bias);
    for (size_t k = 0; k < decoder.size(); ++k) {
      const std::string base = "dec.b" + std::to_string(k + 1);
      fn(base + ".c1.weight", decoder[k].first.weight);
      fn(base + ".c1.bias", decoder[k].first.bias);
      fn(base + ".c2.weight", decoder[k].second.weight);
      fn(base + ".c2.bias", decoder[k].second.bias);
    }
    fn("dec.final.weight", final_proj.weight);
    fn("dec.final.bias", final_proj.bias);
    for (size_t i = 0; i < classifier.size(); ++i) {
      const std::string base = "cls.l" + std::to_string(i + 1);
      fn(base + ".weight", classifier[i].weight);
      fn(base + ".bias", classifier[i].bias);
    }
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for_each_parameter(
        [&](const std::string& name, const Tensor<T>& t) { out.emplace_back(name, t); });
    return out;
  }

  int64_t parameter_count() {
    int64_t n = 0;
    for_each_parameter([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
  }

  void zero_grads() {
    for_each_parameter([](const std::string&, const Tensor<T>& t) { t.reset_grad(); });
  }

  void set_requires_grad(bool v) {
    for_each_parameter([&](const std::string&, Tensor<T>& t) { t.set_requires_grad(v); });
  }
};

// Weights drawn from a fan-in-scaled uniform distribution, biases zero;
// deterministic in `seed`.
template <typename T>
FGRNetParams<T> build_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  FGRNetParams<T> p;
  p.config = cfg;

  Rng rng(seed);
  const auto make = [&](const Shape& shape) {
    Tensor<T> t(shape, T(0), true);
    if (shape.size() > 1) {  // weight: fan-in scaled; bias stays zero
      int64_t fan_in = 1;
      for (size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    return t;
  };

  const int stages = cfg.stages();
  int in_ch = cfg.in_channels;
  p.encoder.resize(static_cast<size_t>(stages));
  for (int s = 0; s < stages; ++s) {
    const int out_ch = cfg.block_channels[static_cast<size_t>(s)];
    for (int c = 0; c < cfg.block_conv_counts[static_cast<size_t>(s)]; ++c) {
      ConvParam<T> conv{make(Shape{out_ch, in_ch, 3, 3}), make(Shape{out_ch})};
      p.encoder[static_cast<size_t>(s)].push_back(std::move(conv));
      in_ch = out_ch;
    }
  }
  const int cb = cfg.bottleneck_channels;
  p.center1 = {make(Shape{cb, cb, 3, 3}), make(Shape{cb})};
  p.center2 = {make(Shape{cb / 2, cb, 3, 3}), make(Shape{cb / 2})};
  int stream = cb / 2;
  for (int k = 1; k <= stages; ++k) {
    const int skip_ch = cfg.block_channels[static_cast<size_t>(stages - k)];
    const int cat = stream + skip_ch;
    const int mid = skip_ch;
    const int out = skip_ch / 2;
    p.decoder.push_back({{make(Shape{mid, cat, 3, 3}), make(Shape{mid})},
                         {make(Shape{out, mid, 3, 3}), make(Shape{out})}});
    stream = out;
  }
  p.final_proj = {make(Shape{cfg.in_channels, stream, 1, 1}),
                  make(Shape{cfg.in_channels})};
  int f = cb;
  for (size_t i = 0; i <= cfg.classifier_widths.size(); ++i) {
    const int g = i < cfg.classifier_widths.size() ? cfg.classifier_widths[i]
                                                   : cfg.num_classes;
    p.classifier.push_back({make(Shape{f, g}), make(Shape{g})});
    f = g;
  }
  return p;
}

template <typename T>
struct EncodeResult {
  Tensor<T> bottleneck;
  std::vector<Tensor<T>> skips;  // pre-pool feature map of each stage
};

template <typename T>
EncodeResult<T> encode(const FGRNetParams<T>& p, const Tensor<T>& image) {
  detail::require<T>(image.ndim() == 4,
                     "encode: image must be (batch,channel,height,width), got " +
                         shape_str(image.shape()));
  detail::require<T>(image.dim(1) == p.config.in_channels,
                     "encode: channel axis must be " +
                         std::to_string(p.config.in_channels) + ", got " +
                         std::to_string(image.dim(1)));
  detail::require<T>(
      image.dim(2) == p.config.input_size && image.dim(3) == p.config.input_size,
      "encode: spatial axes must be " + std::to_string(p.config.input_size) +
          "x" + std::to_string(p.config.input_size) + ", got " +
          std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(3)));

  EncodeResult<T> result;
  Tensor<T> x = image;
  for (const auto& stage : p.encoder) {
    for (const auto& conv : stage)
      x = relu(conv2d(x, conv.weight, conv.bias, 1, 1));
    result.skips.push_back(x);
    x = maxpool2d(x, 2, 2);
  }
  result.bottleneck = x;
  return result;
}

template <typename T>
Tensor<T> decode(const FGRNetParams<T>& p, const Tensor<T>& bottleneck,
                 const std::vector<Tensor<T>>& skips) {
  const int stages = p.config.stages();
  if (static_cast<int>(skips.size()) != stages)
    throw ContractError("decode: expected " + std::to_string(stages) +
                        " skip maps, got " + std::to_string(skips.size()));
  Tensor<T> x = relu(conv2d(bottleneck, p.center1.weight, p.center1.bias, 1, 1));
  x = relu(conv2d(x, p.center2.weight, p.center2.bias, 1, 1));
  for (int k = 0; k < stages; ++k) {
    const Tensor<T>& skip = skips[static_cast<size_t>(stages - 1 - k)];
    x = bilinear_upsample(x, 2);
    if (skip.dim(2) != x.dim(2) || skip.dim(3) != x.dim(3))
      throw ContractError("decode: skip map " + shape_str(skip.shape()) +
                          " does not align with stream " + shape_str(x.shape()));
    x = concat_channels(x, skip);
    x = relu(conv2d(x, p.decoder[static_cast<size_t>(k)].first.weight,
                    p.decoder[static_cast<size_t>(k)].first.bias, 1, 1));
    x = relu(conv2d(x, p.decoder[static_cast<size_t>(k)].second.weight,
                    p.decoder[static_cast<size_t>(k)].second.bias, 1, 1));
  }
  x = conv2d(x, p.final_proj.weight, p.final_proj.bias, 1, 0);
  return sigmoid(x);  // reconstruction bounded to (0,1)
}

template <typename T>
Tensor<T> classify(const FGRNetParams<T>& p, const Tensor<T>& bottleneck) {
  Tensor<T> h = global_avg_pool(bottleneck);
  for (size_t i = 0; i + 1 < p.classifier.size(); ++i)
    h = relu(linear(h, p.classifier[i].weight, p.classifier[i].bias));
  return linear(h, p.classifier.back().weight, p.classifier.back().bias);
}

template <typename T>
struct ForwardResult {
  Tensor<T> reconstruction;
  Tensor<T> logits;
};

template <typename T>
ForwardResult<T> forward_train(const FGRNetParams<T>& p, const Tensor<T>& image) {
  EncodeResult<T> enc = encode(p, image);
  Tensor<T> logits = classify(p, enc.bottleneck);
  Tensor<T> recon = decode(p, enc.bottleneck, enc.skips);
  return {recon, logits};
}

// Encoder + classifier only; no decoder computation is executed.
template <typename T>
Tensor<T> forward_infer(const FGRNetParams<T>& p, const Tensor<T>& image) {
  EncodeResult<T> enc = encode(p, image);
  return classify(p, enc.bottleneck);
}

}  // namespace fgr
