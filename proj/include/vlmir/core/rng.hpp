#pragma once

#include <cstdint>
#include <cmath>
#include <string>
#include <string_view>

namespace vlmir {

// splitmix64-seeded xoshiro256** with an explicit Box-Muller normal, so
// streams are reproducible bit-for-bit regardless of the standard library.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : s_) {
            x += 0x9e3779b97f4a7c15ULL;
            uint64_t z = x;
            z          = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z          = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            w          = z ^ (z >> 31);
        }
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t      = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0, 1)
    double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    uint64_t below(uint64_t n) { return next_u64() % n; }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r  = std::sqrt(-2.0 * std::log(u1));
        const double a  = 6.283185307179586476925286766559 * u2;
        spare_          = r * std::sin(a);
        have_spare_     = true;
        return r * std::cos(a);
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4];
    double spare_     = 0.0;
    bool have_spare_  = false;
};

// FNV-1a, used both by the hash tokenizer and for deriving per-item seeds.
inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t derive_seed(uint64_t base, std::string_view tag) {
    char buf[32];
    int n = 0;
    for (int i = 0; i < 8; ++i) buf[n++] = char((base >> (8 * i)) & 0xff);
    uint64_t h = fnv1a(tag);
    return fnv1a(std::string_view(buf, size_t(n)), h);
}

inline uint64_t derive_seed(uint64_t base, uint64_t index) {
    return derive_seed(base, std::to_string(index));
}

}  // namespace vlmir
