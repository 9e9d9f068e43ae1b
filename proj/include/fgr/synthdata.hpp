#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fgr/image_io.hpp"
#include "fgr/rng.hpp"
#include "fgr/tensor.hpp"
#include "fgr/train.hpp"

namespace fgr {

enum class LabelScheme { TwoClass, ThreeClass };

inline int scheme_classes(LabelScheme s) {
  return s == LabelScheme::TwoClass ? 2 : 3;
}

inline const char* scheme_name(LabelScheme s) {
  return s == LabelScheme::TwoClass ? "two_class" : "three_class";
}

inline LabelScheme parse_scheme(const std::string& s) {
  if (s == "two_class" || s == "2") return LabelScheme::TwoClass;
  if (s == "three_class" || s == "3") return LabelScheme::ThreeClass;
  throw std::invalid_argument("unknown label scheme: " + s);
}

inline std::vector<std::string> scheme_class_names(LabelScheme s) {
  if (s == LabelScheme::TwoClass) return {"gradable", "ungradable"};
  return {"good", "usable", "reject"};
}

// Generator parameters recorded per sample.
struct GenParams {
  int vessel_count = 0;
  double blur_sigma = 0.0;
  double exposure_offset = 0.0;
  double occlusion_fraction = 0.0;
  double severity = 0.0;
  double disk_cx = 0.0, disk_cy = 0.0, disk_r = 0.0;
};

template <typename T>
struct SyntheticSample {
  Tensor<T> image;  // [3,S,S], in-aperture pixels > 0, outside exactly 0
  int label = 0;
  LabelScheme scheme = LabelScheme::TwoClass;
  GenParams gen;
};

// Sum of squared first differences over rows and columns of every channel; a
// simple sharpness measure used by the degradation contracts.
template <typename T>
double high_frequency_energy(const Tensor<T>& img) {
  const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  double acc = 0.0;
  for (int64_t ch = 0; ch < c; ++ch) {
    const T* plane = img.ptr() + ch * h * w;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        if (x + 1 < w) {
          const double d = static_cast<double>(plane[y * w + x + 1]) -
                           static_cast<double>(plane[y * w + x]);
          acc += d * d;
        }
        if (y + 1 < h) {
          const double d = static_cast<double>(plane[(y + 1) * w + x]) -
                           static_cast<double>(plane[y * w + x]);
          acc += d * d;
        }
      }
  }
  return acc;
}

namespace detail {

template <typename T>
void separable_gaussian_blur(Tensor<T>& img, double sigma) {
  if (sigma <= 0.0) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
  double norm = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<size_t>(i + radius)] =
        std::exp(-0.5 * (i * i) / (sigma * sigma));
    norm += kernel[static_cast<size_t>(i + radius)];
  }
  for (auto& k : kernel) k /= norm;

  const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  std::vector<double> tmp(static_cast<size_t>(h * w));
  for (int64_t ch = 0; ch < c; ++ch) {
    T* plane = img.ptr() + ch * h * w;
    // horizontal pass, clamped borders
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const int64_t sx = std::clamp<int64_t>(x + i, 0, w - 1);
          acc += kernel[static_cast<size_t>(i + radius)] *
                 static_cast<double>(plane[y * w + sx]);
        }
        tmp[static_cast<size_t>(y * w + x)] = acc;
      }
    // vertical pass
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const int64_t sy = std::clamp<int64_t>(y + i, 0, h - 1);
          acc += kernel[static_cast<size_t>(i + radius)] *
                 tmp[static_cast<size_t>(sy * w + x)];
        }
        plane[y * w + x] = static_cast<T>(acc);
      }
  }
}

}  // namespace detail

// Procedural fundus-like image: circular aperture on black, warm radial
// background, bright optic disk, darker macula, branching vessel tree.
// Deterministic in `seed`.
template <typename T>
Tensor<T> generate_fundus(uint64_t seed, int size, GenParams* out_params = nullptr) {
  if (size < 32)
    throw std::invalid_argument("generate_fundus: size must be >= 32");
  Rng rng(seed);
  const int64_t s = size;
  const double cx = (size - 1) / 2.0, cy = (size - 1) / 2.0;
  const double aperture = 0.48 * size;

  Tensor<T> img(Shape{3, s, s});
  const int64_t plane = s * s;
  T* red = img.ptr();
  T* green = img.ptr() + plane;
  T* blue = img.ptr() + 2 * plane;

  const double base_r = rng.uniform(0.72, 0.88);
  const double base_g = rng.uniform(0.40, 0.55);
  const double base_b = rng.uniform(0.16, 0.28);

  for (int64_t y = 0; y < s; ++y)
    for (int64_t x = 0; x < s; ++x) {
      const double d = std::hypot(x - cx, y - cy);
      if (d > aperture) continue;
      const double falloff = 1.0 - 0.45 * (d / aperture) * (d / aperture);
      red[y * s + x] = static_cast<T>(base_r * falloff);
      green[y * s + x] = static_cast<T>(base_g * falloff);
      blue[y * s + x] = static_cast<T>(base_b * falloff);
    }

  // optic disk: bright ellipse off-center
  const double disk_angle = rng.uniform(0.0, 6.283185307179586);
  const double disk_dist = rng.uniform(0.35, 0.6) * aperture;
  const double disk_cx = cx + disk_dist * std::cos(disk_angle);
  const double disk_cy = cy + disk_dist * std::sin(disk_angle);
  const double disk_r = rng.uniform(0.10, 0.14) * size;
  const double disk_b = disk_r * rng.uniform(0.8, 0.95);
  for (int64_t y = 0; y < s; ++y)
    for (int64_t x = 0; x < s; ++x) {
      const double u = (x - disk_cx) / disk_r, v = (y - disk_cy) / disk_b;
      const double q = u * u + v * v;
      if (q > 4.0) continue;
      const double wgt = 0.95 * std::exp(-q * 1.35);
      red[y * s + x] = static_cast<T>((1 - wgt) * red[y * s + x] + wgt * 0.99);
      green[y * s + x] = static_cast<T>((1 - wgt) * green[y * s + x] + wgt * 0.93);
      blue[y * s + x] = static_cast<T>((1 - wgt) * blue[y * s + x] + wgt * 0.72);
    }

  // macula: soft dark spot roughly opposite the disk
  const double mac_angle = disk_angle + 3.141592653589793 + rng.uniform(-0.5, 0.5);
  const double mac_dist = rng.uniform(0.2, 0.4) * aperture;
  const double mac_cx = cx + mac_dist * std::cos(mac_angle);
  const double mac_cy = cy + mac_dist * std::sin(mac_angle);
  const double mac_r = rng.uniform(0.08, 0.12) * size;
  for (int64_t y = 0; y < s; ++y)
    for (int64_t x = 0; x < s; ++x) {
      const double u = (x - mac_cx) / mac_r, v = (y - mac_cy) / mac_r;
      const double q = u * u + v * v;
      if (q > 4.0) continue;
      const double dark = 1.0 - 0.45 * std::exp(-q * 1.6);
      red[y * s + x] = static_cast<T>(red[y * s + x] * dark);
      green[y * s + x] = static_cast<T>(green[y * s + x] * dark);
      blue[y * s + x] = static_cast<T>(blue[y * s + x] * dark);
    }

  // vessels: biased random-walk polylines radiating from the disk
  const int vessel_count = 6 + rng.uniform_int(5);
  const auto stamp = [&](double px, double py, double radius) {
    const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(px - radius - 1));
    const int64_t x1 = std::min<int64_t>(s - 1, static_cast<int64_t>(px + radius + 1));
    const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(py - radius - 1));
    const int64_t y1 = std::min<int64_t>(s - 1, static_cast<int64_t>(py + radius + 1));
    for (int64_t y = y0; y <= y1; ++y)
      for (int64_t x = x0; x <= x1; ++x) {
        const double d = std::hypot(x - px, y - py);
        if (d > radius) continue;
        const double wgt = 0.85 * (1.0 - d / (radius + 0.5));
        red[y * s + x] = static_cast<T>((1 - wgt) * red[y * s + x] + wgt * 0.42);
        green[y * s + x] = static_cast<T>((1 - wgt) * green[y * s + x] + wgt * 0.10);
        blue[y * s + x] = static_cast<T>((1 - wgt) * blue[y * s + x] + wgt * 0.07);
      }
  };
  struct Walker {
    double x, y, dir, width;
    int steps;
  };
  std::vector<Walker> queue;
  for (int b = 0; b < vessel_count; ++b) {
    const double dir = rng.uniform(0.0, 6.283185307179586);
    queue.push_back({disk_cx, disk_cy, dir,
                     size * rng.uniform(0.012, 0.02),
                     static_cast<int>(size * rng.uniform(0.5, 0.95))});
  }
  size_t head = 0;
  while (head < queue.size()) {
    Walker wlk = queue[head++];
    for (int i = 0; i < wlk.steps; ++i) {
      wlk.x += std::cos(wlk.dir);
      wlk.y += std::sin(wlk.dir);
      if (std::hypot(wlk.x - cx, wlk.y - cy) > aperture - 1.0) break;
      wlk.dir += rng.normal(0.0, 0.16);
      const double frac = static_cast<double>(i) / wlk.steps;
      stamp(wlk.x, wlk.y, std::max(0.55, wlk.width * (1.0 - 0.6 * frac)));
      if (queue.size() < 40 && rng.uniform() < 0.015)
        queue.push_back({wlk.x, wlk.y,
                         wlk.dir + (rng.uniform() < 0.5 ? 1 : -1) * rng.uniform(0.4, 0.9),
                         wlk.width * 0.6, (wlk.steps - i) / 2});
    }
  }

  // keep the interior strictly non-black, then mask the outside to exact zero
  for (int64_t y = 0; y < s; ++y)
    for (int64_t x = 0; x < s; ++x) {
      const bool inside = std::hypot(x - cx, y - cy) <= aperture;
      for (int64_t c = 0; c < 3; ++c) {
        T& v = img.ptr()[c * plane + y * s + x];
        v = inside ? static_cast<T>(std::clamp(static_cast<double>(v), 0.02, 1.0))
                   : T(0);
      }
    }

  if (out_params) {
    out_params->vessel_count = vessel_count;
    out_params->disk_cx = disk_cx;
    out_params->disk_cy = disk_cy;
    out_params->disk_r = disk_r;
  }
  return img;
}

template <typename T>
struct DegradeResult {
  Tensor<T> image;
  double severity = 0.0;
};

// Quality degradation: contrast compression, haze, soft occlusion blobs,
// blur and an exposure shift, all proportional to severity. Larger severity
// never increases the sharpness energy. The aperture mask is inferred from
// exact zeros and re-applied, so the outside stays exactly black.
template <typename T>
DegradeResult<T> degrade(const Tensor<T>& image, double severity, Rng& rng,
                         GenParams* io_params = nullptr) {
  const double sev = std::clamp(severity, 0.0, 1.0);
  if (sev == 0.0) {
    if (io_params) io_params->severity = 0.0;
    return {image.clone(), 0.0};
  }
  const int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const int64_t plane = h * w;
  std::vector<char> outside(static_cast<size_t>(plane), 0);
  for (int64_t i = 0; i < plane; ++i) {
    bool zero = true;
    for (int64_t ch = 0; ch < c; ++ch)
      if (image.ptr()[ch * plane + i] != T(0)) zero = false;
    outside[static_cast<size_t>(i)] = zero ? 1 : 0;
  }

  Tensor<T> img = image.clone();
  const double contrast = 1.0 - 0.55 * sev;
  const double haze = 0.35 * sev;
  const double haze_color[3] = {0.74, 0.68, 0.60};
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < plane; ++i) {
      if (outside[static_cast<size_t>(i)]) continue;
      T& v = img.ptr()[ch * plane + i];
      double x = 0.5 + (static_cast<double>(v) - 0.5) * contrast;
      x = x * (1.0 - haze) + haze * haze_color[ch];
      v = static_cast<T>(x);
    }

  // soft occlusion blobs (shadow-like), only at noticeable severities
  double occlusion_fraction = 0.0;
  if (sev > 0.25) {
    const int blobs = 1 + rng.uniform_int(2);
    const double aperture = 0.48 * static_cast<double>(w);
    for (int b = 0; b < blobs; ++b) {
      const double bx = w * rng.uniform(0.25, 0.75);
      const double by = h * rng.uniform(0.25, 0.75);
      const double br = w * (0.08 + 0.18 * sev * rng.uniform());
      occlusion_fraction += (br * br) / (aperture * aperture);
      const double depth = 0.5 * sev;
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
          const int64_t i = y * w + x;
          if (outside[static_cast<size_t>(i)]) continue;
          const double q = (std::pow(x - bx, 2) + std::pow(y - by, 2)) / (br * br);
          if (q > 9.0) continue;
          const double dim = 1.0 - depth * std::exp(-q);
          for (int64_t ch = 0; ch < c; ++ch)
            img.ptr()[ch * plane + i] =
                static_cast<T>(img.ptr()[ch * plane + i] * dim);
        }
    }
    occlusion_fraction = std::min(1.0, occlusion_fraction);
  }

  const double blur_sigma = 2.3 * sev * (0.85 + 0.3 * rng.uniform());
  detail::separable_gaussian_blur(img, blur_sigma);

  const double exposure = 0.22 * sev * (2.0 * rng.uniform() - 1.0);
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < plane; ++i) {
      if (outside[static_cast<size_t>(i)]) continue;
      T& v = img.ptr()[ch * plane + i];
      double x = static_cast<double>(v);
      x = exposure >= 0.0 ? x + exposure : x * (1.0 + exposure);
      v = static_cast<T>(std::clamp(x, 0.0, 1.0));
    }

  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < plane; ++i)
      if (outside[static_cast<size_t>(i)]) img.ptr()[ch * plane + i] = T(0);

  if (io_params) {
    io_params->blur_sigma = blur_sigma;
    io_params->exposure_offset = exposure;
    io_params->occlusion_fraction = occlusion_fraction;
    io_params->severity = sev;
  }
  return {img, sev};
}

template <typename T>
struct Dataset {
  std::vector<SyntheticSample<T>> train, test;
  LabelScheme scheme = LabelScheme::TwoClass;
};

namespace detail {

inline std::pair<double, double> severity_band(LabelScheme scheme, int label) {
  if (scheme == LabelScheme::TwoClass)
    return label == 0 ? std::pair{0.0, 0.1} : std::pair{0.6, 1.0};
  switch (label) {
    case 0: return {0.0, 0.1};
    case 1: return {0.3, 0.5};
    default: return {0.7, 1.0};
  }
}

}  // namespace detail

// Balanced labeled set with a deterministic per-class 80/20 split. Severity
// bands per class leave deliberate gaps so the classes stay separable.
template <typename T>
Dataset<T> make_dataset(int n, LabelScheme scheme, uint64_t seed, int size = 64) {
  const int k = scheme_classes(scheme);
  const int per_class = n / k;
  if (per_class < 10)
    throw std::invalid_argument("make_dataset: need at least 10 samples per class");
  Dataset<T> ds;
  ds.scheme = scheme;
  const int train_per = per_class * 8 / 10;
  for (int label = 0; label < k; ++label) {
    const auto [lo, hi] = detail::severity_band(scheme, label);
    for (int i = 0; i < per_class; ++i) {
      const uint64_t idx = static_cast<uint64_t>(label) * per_class + i;
      SyntheticSample<T> sample;
      sample.label = label;
      sample.scheme = scheme;
      Tensor<T> clean = generate_fundus<T>(derive_seed(seed, 2 * idx), size, &sample.gen);
      Rng srng(derive_seed(seed, 2 * idx + 1));
      const double sev = srng.uniform(lo, hi);
      DegradeResult<T> deg = degrade(clean, sev, srng, &sample.gen);
      sample.image = deg.image;
      (i < train_per ? ds.train : ds.test).push_back(std::move(sample));
    }
  }
  return ds;
}

template <typename T>
std::vector<LabeledImage<T>> to_labeled(const std::vector<SyntheticSample<T>>& v) {
  std::vector<LabeledImage<T>> out;
  out.reserve(v.size());
  for (const auto& s : v) out.push_back({s.image, s.label});
  return out;
}

// --------------------------------------------------------------------------
// On-disk form: one P6 image per sample plus a tab-separated manifest.
// --------------------------------------------------------------------------

template <typename T>
void save_dataset(const std::string& dir, const Dataset<T>& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  std::ofstream manifest(fs::path(dir) / "manifest.tsv");
  if (!manifest) throw ImageError("save_dataset: cannot write manifest in " + dir);
  manifest << "filename\tsplit\tlabel\tscheme\tseverity\tvessel_count"
              "\tblur_sigma\texposure_offset\tocclusion_fraction\n";
  manifest << std::setprecision(17);
  int index = 0;
  const auto dump = [&](const std::vector<SyntheticSample<T>>& split,
                        const char* split_name) {
    for (const auto& sample : split) {
      std::ostringstream name;
      name << "images/img_" << std::setw(5) << std::setfill('0') << index++ << ".ppm";
      write_ppm((fs::path(dir) / name.str()).string(), tensor_to_image(sample.image));
      manifest << name.str() << '\t' << split_name << '\t' << sample.label << '\t'
               << scheme_name(sample.scheme) << '\t' << sample.gen.severity << '\t'
               << sample.gen.vessel_count << '\t' << sample.gen.blur_sigma << '\t'
               << sample.gen.exposure_offset << '\t'
               << sample.gen.occlusion_fraction << '\n';
    }
  };
  dump(ds.train, "train");
  dump(ds.test, "test");
}

template <typename T>
Dataset<T> load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream manifest(fs::path(dir) / "manifest.tsv");
  if (!manifest) throw ImageError("load_dataset: no manifest.tsv in " + dir);
  Dataset<T> ds;
  std::string line;
  std::getline(manifest, line);  // header
  bool scheme_seen = false;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string filename, split, scheme_str;
    SyntheticSample<T> sample;
    row >> filename >> split >> sample.label >> scheme_str >>
        sample.gen.severity >> sample.gen.vessel_count >> sample.gen.blur_sigma >>
        sample.gen.exposure_offset >> sample.gen.occlusion_fraction;
    if (!row) throw ImageError("load_dataset: malformed manifest row: " + line);
    sample.scheme = parse_scheme(scheme_str);
    if (!scheme_seen) {
      ds.scheme = sample.scheme;
      scheme_seen = true;
    }
    sample.image = image_to_tensor<T>(read_ppm((fs::path(dir) / filename).string()));
    (split == "train" ? ds.train : ds.test).push_back(std::move(sample));
  }
  if (ds.train.empty() && ds.test.empty())
    throw ImageError("load_dataset: empty dataset in " + dir);
  return ds;
}

}  // namespace fgr
