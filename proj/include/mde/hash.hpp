#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

namespace mde {

// FNV-1a, 64-bit. Used for cache keys and config fingerprints, not security.
class Hasher {
  public:
    void update(const void* bytes, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(bytes);
        for (std::size_t i = 0; i < n; ++i) {
            h_ ^= p[i];
            h_ *= 0x100000001b3ULL;
        }
    }

    void add(std::uint64_t v) { update(&v, sizeof(v)); }
    void add(std::int64_t v) { update(&v, sizeof(v)); }
    void add(std::uint32_t v) { update(&v, sizeof(v)); }
    void add(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        add(bits);
    }
    void add(std::string_view s) {
        add(static_cast<std::uint64_t>(s.size()));
        update(s.data(), s.size());
    }

    std::uint64_t digest() const { return h_; }

  private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a64(std::string_view s) {
    Hasher h;
    h.update(s.data(), s.size());
    return h.digest();
}

std::string hash_hex(std::uint64_t h);

} // namespace mde
