#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hdbformer/metrics.hpp"
#include "hdbformer/tensor.hpp"

namespace hdbf {

/// Binary PGM (P5, maxval 255) of image `i` of a label map.
inline std::string encode_pgm(const LabelMap& labels, std::size_t i = 0) {
  if (i >= labels.n) throw ContractError("encode_pgm: image index out of range");
  std::ostringstream o;
  o << "P5\n" << labels.w << ' ' << labels.h << "\n255\n";
  std::string out = o.str();
  const std::size_t plane = labels.h * labels.w;
  out.append(reinterpret_cast<const char*>(labels.data.data() + i * plane), plane);
  return out;
}

inline LabelMap decode_pgm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (!in || magic != "P5" || maxval != 255) throw DataError("not an 8-bit binary PGM");
  in.get();  // single whitespace before the raster
  LabelMap m(1, h, w);
  in.read(reinterpret_cast<char*>(m.data.data()), static_cast<std::streamsize>(h * w));
  if (static_cast<std::size_t>(in.gcount()) != h * w) throw DataError("truncated PGM raster");
  return m;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("write failed: " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for reading: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// Flat little-endian float32 dump of a tensor's values.
template <typename T>
std::string encode_f32le(const Tensor<T>& t) {
  std::string out;
  out.reserve(t.numel() * 4);
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const float f = static_cast<float>(t[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
  }
  return out;
}

inline std::vector<float> decode_f32le(const std::string& bytes) {
  if (bytes.size() % 4) throw DataError("f32 dump size is not a multiple of 4");
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * i + b])) << (8 * b);
    std::memcpy(&out[i], &bits, 4);
  }
  return out;
}

/// JSON sidecar describing a probability dump: {"shape": [...], "classes": K}.
inline std::string prob_sidecar_json(const Shape& shape, std::size_t classes) {
  std::ostringstream o;
  o << "{\"shape\": [";
  for (std::size_t i = 0; i < shape.size(); ++i) o << (i ? ", " : "") << shape[i];
  o << "], \"classes\": " << classes << "}\n";
  return o.str();
}

/// Writes `<stem>.f32` and `<stem>.json`.
template <typename T>
void write_probabilities(const std::string& stem, const Tensor<T>& probs) {
  if (probs.rank() != 4) throw ShapeError("write_probabilities expects N×K×H×W");
  write_file(stem + ".f32", encode_f32le(probs));
  write_file(stem + ".json", prob_sidecar_json(probs.shape(), probs.dim(1)));
}

}  // namespace hdbf
