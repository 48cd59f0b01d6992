#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "virm/tensor.hpp"

namespace virm {

/// Decoded IDX payload: the tensor (values scaled to [0,1] as byte/255) plus
/// the leading-dimension element count.
struct IdxData {
  Tensor values;
  std::size_t items = 0;
};

/// Parses the IDX container format: two zero magic bytes, a type byte (only
/// 0x08, unsigned byte, is supported), a dimension-count byte, big-endian
/// 32-bit dimension sizes, then the raw payload.
inline IdxData parse_idx(std::span<const unsigned char> bytes) {
  if (bytes.size() < 4) {
    throw FormatError("idx: truncated header: " + std::to_string(bytes.size()) +
                      " bytes, need at least 4");
  }
  if (bytes[0] != 0 || bytes[1] != 0) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "idx: bad magic prefix 0x%02X 0x%02X (expected 0x00 0x00)",
                  bytes[0], bytes[1]);
    throw FormatError(buf);
  }
  if (bytes[2] != 0x08) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "idx: unsupported type byte 0x%02X (only 0x08 supported)",
                  bytes[2]);
    throw FormatError(buf);
  }
  const std::size_t ndims = bytes[3];
  const std::size_t header = 4 + 4 * ndims;
  if (bytes.size() < header) {
    throw FormatError("idx: truncated header: " + std::to_string(bytes.size()) +
                      " bytes, need " + std::to_string(header) + " for " +
                      std::to_string(ndims) + " dimensions");
  }
  std::vector<std::size_t> dims(ndims);
  std::size_t numel = 1;
  for (std::size_t d = 0; d < ndims; ++d) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v = (v << 8) | bytes[4 + 4 * d + static_cast<std::size_t>(b)];
    dims[d] = v;
    numel *= v;
  }
  if (bytes.size() != header + numel) {
    throw FormatError("idx: truncated payload: expected " + std::to_string(numel) +
                      " data bytes, got " + std::to_string(bytes.size() - header));
  }
  Tensor t(dims);
  for (std::size_t i = 0; i < numel; ++i) {
    t[i] = static_cast<double>(bytes[header + i]) / 255.0;
  }
  IdxData out;
  out.items = ndims > 0 ? dims[0] : 1;
  out.values = std::move(t);
  return out;
}

/// Inverse of parse_idx for byte-valued tensors; values are mapped back with
/// round(v * 255) clamped into [0, 255], so parse -> encode is the identity
/// on well-formed input bytes.
inline std::vector<unsigned char> encode_idx(const Tensor& t) {
  const auto shape = t.shape();
  if (shape.size() > 255) throw ValueError("idx: rank above 255 not encodable");
  std::vector<unsigned char> bytes;
  bytes.reserve(4 + 4 * shape.size() + t.numel());
  bytes.push_back(0);
  bytes.push_back(0);
  bytes.push_back(0x08);
  bytes.push_back(static_cast<unsigned char>(shape.size()));
  for (std::size_t d : shape) {
    if (d > 0xFFFFFFFFull) throw ValueError("idx: dimension too large for 32-bit size");
    for (int b = 3; b >= 0; --b) bytes.push_back(static_cast<unsigned char>((d >> (8 * b)) & 0xFF));
  }
  for (std::size_t i = 0; i < t.numel(); ++i) {
    double v = std::round(t[i] * 255.0);
    v = std::min(255.0, std::max(0.0, v));
    bytes.push_back(static_cast<unsigned char>(v));
  }
  return bytes;
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed on " + path);
  return bytes;
}

inline void write_file_bytes(const std::string& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed on " + path);
}

/// Loads an IDX image file and checks it has rank 3 (items x rows x cols).
inline Tensor load_idx_images(const std::string& path) {
  IdxData d = parse_idx(read_file_bytes(path));
  if (d.values.rank() != 3) {
    throw FormatError("idx: expected rank-3 image file at " + path + ", got shape " +
                      d.values.shape_str());
  }
  return std::move(d.values);
}

/// Loads an IDX label file (rank 1); values are rescaled back to integer
/// class indices.
inline std::vector<int> load_idx_labels(const std::string& path) {
  IdxData d = parse_idx(read_file_bytes(path));
  if (d.values.rank() != 1) {
    throw FormatError("idx: expected rank-1 label file at " + path + ", got shape " +
                      d.values.shape_str());
  }
  std::vector<int> labels(d.values.numel());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    labels[i] = static_cast<int>(std::lround(d.values[i] * 255.0));
  }
  return labels;
}

}  // namespace virm
