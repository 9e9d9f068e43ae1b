#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fgr/tensor.hpp"

namespace fgr {

class ImageError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Packed 8-bit RGB rows.
struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> rgb;
};

// Binary portable pixmap, P6 maxval 255.
inline void write_ppm(const std::string& path, const ImageU8& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ImageError("write_ppm: cannot open " + path);
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.rgb.data()),
           static_cast<std::streamsize>(img.rgb.size()));
  if (!os) throw ImageError("write_ppm: write failed: " + path);
}

inline ImageU8 read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ImageError("read_ppm: cannot open " + path);
  std::string magic;
  is >> magic;
  if (magic != "P6") throw ImageError("read_ppm: not a P6 pixmap: " + path);
  const auto next_int = [&]() {
    int c = is.get();
    while (is && (std::isspace(c) || c == '#')) {
      if (c == '#')
        while (is && is.get() != '\n') {}
      c = is.get();
    }
    int v = 0;
    bool any = false;
    while (is && std::isdigit(c)) {
      v = v * 10 + (c - '0');
      any = true;
      c = is.get();
    }
    if (!any) throw ImageError("read_ppm: malformed header: " + path);
    return v;
  };
  ImageU8 img;
  img.width = next_int();
  img.height = next_int();
  const int maxval = next_int();
  if (maxval != 255) throw ImageError("read_ppm: unsupported maxval in " + path);
  img.rgb.resize(static_cast<size_t>(img.width) * img.height * 3);
  is.read(reinterpret_cast<char*>(img.rgb.data()),
          static_cast<std::streamsize>(img.rgb.size()));
  if (!is) throw ImageError("read_ppm: truncated pixel data: " + path);
  return img;
}

template <typename T>
ImageU8 tensor_to_image(const Tensor<T>& chw) {
  detail::require<T>(chw.ndim() == 3 && chw.dim(0) == 3,
                     "tensor_to_image: expected (3,height,width), got " +
                         shape_str(chw.shape()));
  ImageU8 img;
  img.height = static_cast<int>(chw.dim(1));
  img.width = static_cast<int>(chw.dim(2));
  img.rgb.resize(static_cast<size_t>(img.width) * img.height * 3);
  const int64_t plane = chw.dim(1) * chw.dim(2);
  for (int64_t i = 0; i < plane; ++i)
    for (int64_t c = 0; c < 3; ++c) {
      const double v = std::clamp(static_cast<double>(chw.ptr()[c * plane + i]), 0.0, 1.0);
      img.rgb[static_cast<size_t>(i * 3 + c)] =
          static_cast<uint8_t>(std::lround(v * 255.0));
    }
  return img;
}

template <typename T>
Tensor<T> image_to_tensor(const ImageU8& img) {
  Tensor<T> t(Shape{3, img.height, img.width});
  const int64_t plane = static_cast<int64_t>(img.height) * img.width;
  for (int64_t i = 0; i < plane; ++i)
    for (int64_t c = 0; c < 3; ++c)
      t.ptr()[c * plane + i] =
          static_cast<T>(img.rgb[static_cast<size_t>(i * 3 + c)]) / T(255);
  return t;
}

// Heat overlay over the grayscale base image. Signed polarity tints positive
// values green and negative values red; magnitude polarity uses one warm hue.
// The map is normalized per call by its own absolute maximum; an all-zero map
// leaves the base image untinted.
template <typename T>
ImageU8 render_overlay_values(const Tensor<T>& image, const std::vector<T>& map,
                              int height, int width, bool signed_polarity) {
  detail::require<T>(image.ndim() == 3 && image.dim(0) == 3,
                     "render_overlay: image must be (3,height,width)");
  if (image.dim(1) != height || image.dim(2) != width ||
      static_cast<int64_t>(map.size()) != int64_t(height) * width)
    throw ShapeError("render_overlay: map " + std::to_string(height) + "x" +
                     std::to_string(width) + " does not align with image " +
                     shape_str(image.shape()));
  double peak = 0.0;
  for (T v : map) peak = std::max(peak, std::fabs(static_cast<double>(v)));

  ImageU8 out;
  out.height = height;
  out.width = width;
  out.rgb.resize(static_cast<size_t>(height) * width * 3);
  const int64_t plane = int64_t(height) * width;
  for (int64_t i = 0; i < plane; ++i) {
    const double gray =
        (static_cast<double>(image.ptr()[i]) +
         static_cast<double>(image.ptr()[plane + i]) +
         static_cast<double>(image.ptr()[2 * plane + i])) / 3.0;
    double r = gray, g = gray, b = gray;
    if (peak > 0.0) {
      const double v = static_cast<double>(map[static_cast<size_t>(i)]) / peak;
      if (signed_polarity) {
        const double a = std::fabs(v);
        if (v > 0.0) {  // supportive region: green
          r = (1 - a) * gray;
          g = (1 - a) * gray + a;
          b = (1 - a) * gray;
        } else if (v < 0.0) {  // opposing region: red
          r = (1 - a) * gray + a;
          g = (1 - a) * gray;
          b = (1 - a) * gray;
        }
      } else {
        const double a = std::fabs(v);
        r = (1 - a) * gray + a * 1.0;
        g = (1 - a) * gray + a * 0.45;
        b = (1 - a) * gray;
      }
    }
    out.rgb[static_cast<size_t>(3 * i)] = static_cast<uint8_t>(std::lround(std::clamp(r, 0.0, 1.0) * 255));
    out.rgb[static_cast<size_t>(3 * i + 1)] = static_cast<uint8_t>(std::lround(std::clamp(g, 0.0, 1.0) * 255));
    out.rgb[static_cast<size_t>(3 * i + 2)] = static_cast<uint8_t>(std::lround(std::clamp(b, 0.0, 1.0) * 255));
  }
  return out;
}

}  // namespace fgr
