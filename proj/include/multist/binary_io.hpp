#pragma once

// Embedding matrices on disk: "SPFE" magic, u32 version, u32 rows, u32 cols,
// then rows*cols little-endian float32 values in row-major order.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "multist/linalg.hpp"

namespace multist {

inline constexpr std::array<char, 4> kEmbeddingMagic = {'S', 'P', 'F', 'E'};
inline constexpr std::uint32_t kEmbeddingVersion = 1;

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<unsigned char>((v >> (8 * b)) & 0xFFu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::vector<unsigned char> read_all(const std::string& path, ErrorCode missing) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), missing, "cannot open " + path);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace detail

inline std::vector<unsigned char> encode_embeddings(const Matrix& m) {
  std::vector<unsigned char> out(kEmbeddingMagic.begin(), kEmbeddingMagic.end());
  detail::put_u32(out, kEmbeddingVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(m(i, j)));
      detail::put_u32(out, bits);
    }
  }
  return out;
}

inline Matrix decode_embeddings(const std::vector<unsigned char>& bytes, const std::string& what) {
  require(bytes.size() >= 16 && std::memcmp(bytes.data(), kEmbeddingMagic.data(), 4) == 0,
          ErrorCode::EmbeddingShapeMismatch, what + ": bad magic");
  const std::uint32_t version = detail::get_u32(bytes.data() + 4);
  require(version == kEmbeddingVersion, ErrorCode::EmbeddingShapeMismatch,
          what + ": unsupported version " + std::to_string(version));
  const std::uint32_t rows = detail::get_u32(bytes.data() + 8);
  const std::uint32_t cols = detail::get_u32(bytes.data() + 12);
  require(bytes.size() == 16 + 4ull * rows * cols, ErrorCode::EmbeddingShapeMismatch,
          what + ": payload size does not match header shape");
  Matrix m(rows, cols);
  const unsigned char* p = bytes.data() + 16;
  for (std::uint32_t i = 0; i < rows; ++i)
    for (std::uint32_t j = 0; j < cols; ++j, p += 4) m(i, j) = std::bit_cast<float>(detail::get_u32(p));
  return m;
}

inline void write_embeddings(const std::string& path, const Matrix& m) {
  const auto bytes = encode_embeddings(m);
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::MissingFile, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Matrix read_embeddings(const std::string& path) {
  return decode_embeddings(detail::read_all(path, ErrorCode::MissingEmbeddingFile), path);
}

}  // namespace multist
