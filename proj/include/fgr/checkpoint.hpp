#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fgr/model.hpp"
#include "fgr/tensor.hpp"

namespace fgr {

class IoError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("checkpoint: truncated file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

inline uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw IoError("checkpoint: truncated file");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

// little-endian IEEE-754 payloads
template <typename T>
void write_scalars(std::ostream& os, const std::vector<T>& v) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(T)));
  } else {
    for (T x : v) {
      if constexpr (sizeof(T) == 4) {
        uint32_t bits;
        std::memcpy(&bits, &x, 4);
        write_u32(os, bits);
      } else {
        uint64_t bits;
        std::memcpy(&bits, &x, 8);
        write_u64(os, bits);
      }
    }
  }
}

template <typename T>
void read_scalars(std::istream& is, std::vector<T>& v) {
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(T)));
    if (!is) throw IoError("checkpoint: truncated tensor payload");
  } else {
    for (auto& x : v) {
      if constexpr (sizeof(T) == 4) {
        uint32_t bits = read_u32(is);
        std::memcpy(&x, &bits, 4);
      } else {
        uint64_t bits = read_u64(is);
        std::memcpy(&x, &bits, 8);
      }
    }
  }
}

inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stoi(tok));
  return out;
}

inline std::string int_list_str(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i)
    s += (i ? "," : "") + std::to_string(v[static_cast<size_t>(i)]);
  return s;
}

}  // namespace detail

inline std::string serialize_config(const ModelConfig& cfg) {
  std::ostringstream os;
  os << "preset=" << cfg.preset << "\n";
  os << "input_size=" << cfg.input_size << "\n";
  os << "in_channels=" << cfg.in_channels << "\n";
  os << "block_conv_counts=" << detail::int_list_str(cfg.block_conv_counts) << "\n";
  os << "block_channels=" << detail::int_list_str(cfg.block_channels) << "\n";
  os << "bottleneck_channels=" << cfg.bottleneck_channels << "\n";
  os << "num_classes=" << cfg.num_classes << "\n";
  os << "classifier_widths=" << detail::int_list_str(cfg.classifier_widths) << "\n";
  return os.str();
}

inline ModelConfig parse_config(const std::string& text) {
  ModelConfig cfg;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw IoError("checkpoint: malformed config line: " + line);
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "preset") cfg.preset = value;
    else if (key == "input_size") cfg.input_size = std::stoi(value);
    else if (key == "in_channels") cfg.in_channels = std::stoi(value);
    else if (key == "block_conv_counts") cfg.block_conv_counts = detail::parse_int_list(value);
    else if (key == "block_channels") cfg.block_channels = detail::parse_int_list(value);
    else if (key == "bottleneck_channels") cfg.bottleneck_channels = std::stoi(value);
    else if (key == "num_classes") cfg.num_classes = std::stoi(value);
    else if (key == "classifier_widths") cfg.classifier_widths = detail::parse_int_list(value);
    else throw IoError("checkpoint: unknown config key: " + key);
  }
  cfg.validate();
  return cfg;
}

inline constexpr char kCheckpointMagic[8] = {'F', 'G', 'R', 'C',
                                             'K', 'P', 'T', '1'};

template <typename T>
void save_checkpoint(const std::string& path, FGRNetParams<T>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open for writing: " + path);
  os.write(kCheckpointMagic, 8);
  detail::write_u32(os, static_cast<uint32_t>(sizeof(T)));
  const std::string cfg = serialize_config(params.config);
  detail::write_u32(os, static_cast<uint32_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

  auto named = params.named_parameters();
  detail::write_u32(os, static_cast<uint32_t>(named.size()));
  for (auto& [name, tensor] : named) {
    detail::write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(os, static_cast<uint32_t>(tensor.shape().size()));
    for (int64_t d : tensor.shape()) detail::write_u64(os, static_cast<uint64_t>(d));
    detail::write_scalars(os, tensor.data());
  }
  if (!os) throw IoError("checkpoint: write failed: " + path);
}

template <typename T>
FGRNetParams<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  const uint32_t scalar_size = detail::read_u32(is);
  if (scalar_size != sizeof(T))
    throw IoError("checkpoint: stores " + std::to_string(scalar_size * 8) +
                  "-bit scalars, expected " + std::to_string(sizeof(T) * 8));
  const uint32_t cfg_len = detail::read_u32(is);
  std::string cfg_text(cfg_len, '\0');
  is.read(cfg_text.data(), cfg_len);
  if (!is) throw IoError("checkpoint: truncated config");
  const ModelConfig cfg = parse_config(cfg_text);

  FGRNetParams<T> params = build_model<T>(cfg, 0);
  auto named = params.named_parameters();
  const uint32_t count = detail::read_u32(is);
  if (count != named.size())
    throw IoError("checkpoint: holds " + std::to_string(count) +
                  " tensors, model needs " + std::to_string(named.size()));
  for (auto& [name, tensor] : named) {
    const uint32_t name_len = detail::read_u32(is);
    std::string stored(name_len, '\0');
    is.read(stored.data(), name_len);
    if (stored != name)
      throw IoError("checkpoint: expected tensor '" + name + "', found '" +
                    stored + "'");
    const uint32_t ndim = detail::read_u32(is);
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<int64_t>(detail::read_u64(is));
    if (shape != tensor.shape())
      throw IoError("checkpoint: tensor '" + name + "' has shape " +
                    shape_str(shape) + ", model needs " +
                    shape_str(tensor.shape()));
    detail::read_scalars(is, tensor.data());
  }
  return params;
}

}  // namespace fgr
