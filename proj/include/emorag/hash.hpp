#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "emorag/errors.hpp"

namespace emorag {

inline constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ull;

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = kFnvOffset) {
  return fnv1a64(s.data(), s.size(), h);
}

inline std::string to_hex16(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

// Incremental hasher for structured content. Fields are length-prefixed so
// adjacent fields cannot alias each other.
class Hasher {
 public:
  Hasher& bytes(const void* data, std::size_t n) {
    h_ = fnv1a64(&n, sizeof(n), h_);
    h_ = fnv1a64(data, n, h_);
    return *this;
  }
  Hasher& str(std::string_view s) { return bytes(s.data(), s.size()); }
  Hasher& u64(std::uint64_t v) { return bytes(&v, sizeof(v)); }
  Hasher& i64(std::int64_t v) { return bytes(&v, sizeof(v)); }
  Hasher& f64(double v) { return bytes(&v, sizeof(v)); }

  std::uint64_t value() const { return h_; }
  std::string hex() const { return to_hex16(h_); }

 private:
  std::uint64_t h_ = kFnvOffset;
};

inline std::string fingerprint_bytes(const std::vector<std::uint8_t>& bytes) {
  return to_hex16(fnv1a64(bytes.data(), bytes.size()));
}

inline std::string fingerprint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot open file for fingerprint: " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)),
                        std::istreambuf_iterator<char>());
  return to_hex16(fnv1a64(buf.data(), buf.size()));
}

}  // namespace emorag
