#pragma once

#include <cmath>
#include <cstdint>

namespace hnseg {

// splitmix64 finalizer; the workhorse behind every random draw in the project.
inline uint64_t rng_mix(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t rng_key(uint64_t a, uint64_t b) { return rng_mix(a ^ rng_mix(b)); }
inline uint64_t rng_key(uint64_t a, uint64_t b, uint64_t c) { return rng_key(rng_key(a, b), c); }

// Counter-based stream: draw i depends only on (key, i). No hidden global state,
// so data-loading order and thread count never change the values a consumer sees.
class CounterRng {
  public:
    explicit CounterRng(uint64_t key) : key_(key) {}
    CounterRng(uint64_t seed, uint64_t stream) : key_(rng_key(seed, stream)) {}
    CounterRng(uint64_t seed, uint64_t stream_a, uint64_t stream_b)
        : key_(rng_key(seed, stream_a, stream_b)) {}

    uint64_t next_u64() { return rng_mix(key_ + 0x632be59bd9b4e019ull * ++counter_); }

    // [0,1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0,n) without modulo bias (Lemire reduction)
    int64_t uniform_int(int64_t n) {
        return int64_t((__uint128_t(next_u64()) * __uint128_t(uint64_t(n))) >> 64);
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // Box-Muller; u1 in (0,1] so the log stays finite
        double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // N(0,std) truncated to [-2*std, 2*std], rejection-sampled
    double truncated_normal(double std_dev) {
        for (;;) {
            double x = normal() * std_dev;
            if (std::abs(x) <= 2.0 * std_dev) return x;
        }
    }

  private:
    uint64_t key_;
    uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace hnseg
