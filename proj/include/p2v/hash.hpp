#pragma once

#include <cstdint>
#include <cstring>
#include <string_view>

namespace p2v {

// 64-bit FNV-1a; stable across platforms, used for content hashes and seeds.
class Fnv1a {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) {
    update_pod(static_cast<std::uint64_t>(s.size()));
    update(s.data(), s.size());
  }
  template <class T>
  void update_pod(const T& v) {
    update(&v, sizeof(T));
  }
  std::uint64_t digest() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a(std::string_view s) {
  Fnv1a h;
  h.update(s.data(), s.size());
  return h.digest();
}

}  // namespace p2v
