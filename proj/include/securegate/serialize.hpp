#pragma once

// Little-endian binary encoding primitives. Checkpoints and simulated network
// messages share these; everything is written to byte buffers first so
// message sizes and contents can be inspected before touching disk.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "securegate/tensor.hpp"

namespace securegate {

using Bytes = std::vector<std::uint8_t>;

static_assert(std::endian::native == std::endian::little,
              "big-endian hosts would need byte swaps in serialize.hpp");

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { raw(&v, 2); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f32(float v) { raw(&v, 4); }
  void f64(double v) { raw(&v, 8); }

  void magic(const char m[4]) { raw(m, 4); }

  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }

  // f32 payload; training runs in f64 and checkpoints downcast.
  void tensor_f32(const Tensor& t) {
    u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape) u32(static_cast<std::uint32_t>(d));
    for (double v : t.data) f32(static_cast<float>(v));
  }

  const Bytes& bytes() const { return buf_; }
  Bytes take() { return std::move(buf_); }

 private:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  Bytes buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const Bytes& b) : buf_(b) {}

  std::uint8_t u8() { return *take(1); }
  std::uint16_t u16() { return scalar<std::uint16_t>(); }
  std::uint32_t u32() { return scalar<std::uint32_t>(); }
  std::uint64_t u64() { return scalar<std::uint64_t>(); }
  float f32() { return scalar<float>(); }
  double f64() { return scalar<double>(); }

  void expect_magic(const char m[4], const std::string& what) {
    const std::uint8_t* p = take(4);
    if (std::memcmp(p, m, 4) != 0)
      throw std::runtime_error(what + ": bad magic");
  }

  std::string str() {
    std::uint32_t n = u32();
    const std::uint8_t* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }

  Tensor tensor_f32() {
    std::uint32_t rank = u32();
    if (rank == 0 || rank > 8) throw std::runtime_error("tensor: bad rank");
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) {
      d = u32();
      if (d == 0) throw std::runtime_error("tensor: zero dimension");
    }
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.data) v = static_cast<double>(f32());
    return t;
  }

  bool done() const { return pos_ == buf_.size(); }

 private:
  template <typename T>
  T scalar() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }

  const std::uint8_t* take(std::size_t n) {
    if (pos_ + n > buf_.size())
      throw std::runtime_error("truncated file: wanted " + std::to_string(n) +
                               " bytes at offset " + std::to_string(pos_));
    const std::uint8_t* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }

  const Bytes& buf_;
  std::size_t pos_ = 0;
};

inline void write_file(const std::string& path, const Bytes& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline Bytes read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cannot open: " + path);
  const std::streamsize n = f.tellg();
  f.seekg(0);
  Bytes b(static_cast<std::size_t>(n));
  f.read(reinterpret_cast<char*>(b.data()), n);
  if (!f) throw std::runtime_error("read failed: " + path);
  return b;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
  Bytes b = read_file(path);
  return std::string(b.begin(), b.end());
}

// Substring scan used by the privacy-isolation checks.
inline bool contains_bytes(const Bytes& haystack, const Bytes& needle) {
  if (needle.empty() || needle.size() > haystack.size()) return false;
  return std::search(haystack.begin(), haystack.end(), needle.begin(),
                     needle.end()) != haystack.end();
}

inline Bytes to_bytes(const std::string& s) {
  return Bytes(s.begin(), s.end());
}

}  // namespace securegate
