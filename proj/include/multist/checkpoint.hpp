#pragma once

// Model checkpoints: "MSCK" magic, u32 version, RNG state (seed, key, counter
// as u64), u32 tensor count, then per tensor a u32-length name, u32 rows,
// u32 cols and rows*cols little-endian float64 values in row-major order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "multist/binary_io.hpp"
#include "multist/fusion.hpp"
#include "multist/gene_encoder.hpp"
#include "multist/rng.hpp"

namespace multist {

inline constexpr std::array<char, 4> kCheckpointMagic = {'M', 'S', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint64_t rng_seed = 0;
  std::uint64_t rng_key = 0;
  std::uint64_t rng_counter = 0;
  std::map<std::string, Matrix> tensors;

  void set_rng(const SeededRng& rng) {
    rng_seed = rng.seed();
    rng_key = rng.key();
    rng_counter = rng.counter();
  }
  SeededRng rng() const { return SeededRng::from_state(rng_seed, rng_key, rng_counter); }

  const Matrix& at(const std::string& name) const {
    const auto it = tensors.find(name);
    require(it != tensors.end(), ErrorCode::MalformedRow, "checkpoint has no tensor " + name);
    return it->second;
  }
};

namespace detail {

inline void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

/// Bounds-checked cursor over a byte buffer.
class ByteReader {
 public:
  ByteReader(const std::vector<unsigned char>& b, std::string what) : b_(b), what_(std::move(what)) {}

  const unsigned char* take(std::size_t n) {
    require(pos_ + n <= b_.size(), ErrorCode::MalformedRow, what_ + ": truncated checkpoint");
    const unsigned char* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() { return get_u32(take(4)); }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    return lo | (static_cast<std::uint64_t>(u32()) << 32);
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::vector<unsigned char>& b_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& c) {
  std::vector<unsigned char> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, c.rng_seed);
  detail::put_u64(out, c.rng_key);
  detail::put_u64(out, c.rng_counter);
  detail::put_u32(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, m] : c.tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) detail::put_u64(out, std::bit_cast<std::uint64_t>(m(i, j)));
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes, const std::string& what) {
  detail::ByteReader r(bytes, what);
  require(std::memcmp(r.take(4), kCheckpointMagic.data(), 4) == 0, ErrorCode::MalformedRow, what + ": bad magic");
  const std::uint32_t version = r.u32();
  require(version == kCheckpointVersion, ErrorCode::MalformedRow,
          what + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.rng_seed = r.u64();
  c.rng_key = r.u64();
  c.rng_counter = r.u64();
  const std::uint32_t count = r.u32();
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint32_t len = r.u32();
    const auto* p = r.take(len);
    std::string name(reinterpret_cast<const char*>(p), len);
    const std::uint32_t rows = r.u32(), cols = r.u32();
    Matrix m(rows, cols);
    for (std::uint32_t i = 0; i < rows; ++i)
      for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = std::bit_cast<double>(r.u64());
    c.tensors.emplace(std::move(name), std::move(m));
  }
  require(r.done(), ErrorCode::MalformedRow, what + ": trailing bytes after the last tensor");
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  const auto bytes = encode_checkpoint(c);
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::MissingFile, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(detail::read_all(path, ErrorCode::MissingFile), path);
}

// Named groups ----------------------------------------------------------------

template <class W>
void store_weights(Checkpoint& c, const std::string& prefix, const W& w) {
  w.visit([&](const char* name, const Matrix& m) { c.tensors[prefix + name] = m; });
}

template <class W>
void restore_weights(const Checkpoint& c, const std::string& prefix, W& w) {
  w.visit([&](const char* name, Matrix& m) { m = c.at(prefix + name); });
}

inline void store_encoder(Checkpoint& c, const EncoderParams& p) {
  store_weights(c, "encoder.", p.w);
  c.tensors["encoder.running_mean1"] = p.running.mean1;
  c.tensors["encoder.running_var1"] = p.running.var1;
  c.tensors["encoder.running_mean2"] = p.running.mean2;
  c.tensors["encoder.running_var2"] = p.running.var2;
}

inline EncoderParams restore_encoder(const Checkpoint& c) {
  EncoderParams p;
  restore_weights(c, "encoder.", p.w);
  p.running.mean1 = c.at("encoder.running_mean1");
  p.running.var1 = c.at("encoder.running_var1");
  p.running.mean2 = c.at("encoder.running_mean2");
  p.running.var2 = c.at("encoder.running_var2");
  return p;
}

inline void store_gan(Checkpoint& c, const GanParams& g) {
  store_weights(c, "generator.", g.gen);
  store_weights(c, "discriminator.", g.disc);
}

inline GanParams restore_gan(const Checkpoint& c) {
  GanParams g;
  restore_weights(c, "generator.", g.gen);
  restore_weights(c, "discriminator.", g.disc);
  return g;
}

inline void store_fusion(Checkpoint& c, const FusionParams& f) {
  store_weights(c, "fusion.", f.w);
}

}  // namespace multist
