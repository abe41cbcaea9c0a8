#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace moelab {

// Incremental FNV-1a (64-bit). Digests are used for content identity of
// checkpoints, calibration sets and report files, not for security.
class Fnv64 {
 public:
  void update(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      state_ ^= static_cast<std::uint64_t>(p[i]);
      state_ *= 0x100000001b3ULL;
    }
  }

  void update_u64(std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    update(buf, 8);
  }

  void update_double(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    update_u64(bits);
  }

  void update_str(const std::string& s) {
    update_u64(s.size());
    update(s.data(), s.size());
  }

  std::uint64_t value() const { return state_; }

  std::string hex() const {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    std::uint64_t v = state_;
    for (int i = 15; i >= 0; --i) {
      out[static_cast<std::size_t>(i)] = digits[v & 0xF];
      v >>= 4;
    }
    return out;
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv64(const void* data, std::size_t len) {
  Fnv64 h;
  h.update(data, len);
  return h.value();
}

inline std::string fnv64_hex(const void* data, std::size_t len) {
  Fnv64 h;
  h.update(data, len);
  return h.hex();
}

inline std::string fnv64_hex(const std::vector<unsigned char>& bytes) {
  return fnv64_hex(bytes.data(), bytes.size());
}

inline std::string fnv64_hex(const std::string& s) {
  return fnv64_hex(s.data(), s.size());
}

}  // namespace moelab
