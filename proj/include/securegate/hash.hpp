#pragma once

// SHA-256 helpers on top of OpenSSL's EVP interface: content hashes for the
// run manifest and the HMAC construction that derives key-token embeddings.

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace securegate {

using Digest = std::array<std::uint8_t, 32>;

inline Digest sha256(const void* data, std::size_t n) {
  Digest out{};
  unsigned int len = 0;
  if (EVP_Digest(data, n, out.data(), &len, EVP_sha256(), nullptr) != 1 ||
      len != out.size())
    throw std::runtime_error("sha256: digest failed");
  return out;
}

inline Digest sha256(const std::vector<std::uint8_t>& b) {
  return sha256(b.data(), b.size());
}

inline Digest sha256(const std::string& s) { return sha256(s.data(), s.size()); }

inline std::string hex(const Digest& d) {
  static const char* k = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (std::uint8_t b : d) {
    s.push_back(k[b >> 4]);
    s.push_back(k[b & 0xf]);
  }
  return s;
}

// HMAC-SHA256: H((K ^ opad) || H((K ^ ipad) || msg)).
inline Digest hmac_sha256(const std::string& key, const std::string& msg) {
  std::array<std::uint8_t, 64> block{};
  if (key.size() > block.size()) {
    Digest kd = sha256(key);
    std::copy(kd.begin(), kd.end(), block.begin());
  } else {
    std::copy(key.begin(), key.end(), block.begin());
  }
  std::vector<std::uint8_t> inner;
  inner.reserve(block.size() + msg.size());
  for (std::uint8_t b : block) inner.push_back(b ^ 0x36);
  inner.insert(inner.end(), msg.begin(), msg.end());
  Digest ih = sha256(inner);

  std::vector<std::uint8_t> outer;
  outer.reserve(block.size() + ih.size());
  for (std::uint8_t b : block) outer.push_back(b ^ 0x5c);
  outer.insert(outer.end(), ih.begin(), ih.end());
  return sha256(outer);
}

inline std::uint64_t digest_to_u64(const Digest& d, std::size_t offset = 0) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(d[offset + i]) << (8 * i);
  return v;
}

}  // namespace securegate
