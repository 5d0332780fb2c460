#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace jointseg {

// Deterministic PRNG used everywhere randomness is needed. SplitMix64 core:
// tiny, fast, and bit-stable across platforms and standard libraries, which
// std::mt19937 + std::*_distribution are not. State is a single u64 so it can
// be serialized into checkpoints verbatim.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1): 53 mantissa bits, the usual fixed mapping.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be > 0. Rejection-free modulo is fine
    // here: n is always tiny relative to 2^64 so the bias is unobservable, and
    // the mapping stays fixed forever (bit-exact reproducibility trumps
    // statistical perfection for this tool).
    uint64_t uniform_index(uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller (both values used, cached).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        // u1 in (0,1] so log() is finite.
        double u1 = 1.0 - uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // Normal truncated to +/- 2 sigma (resampled), the usual ViT weight init.
    double truncated_normal(double stddev) {
        for (;;) {
            double z = normal();
            if (z >= -2.0 && z <= 2.0) return z * stddev;
        }
    }

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) {
        state_ = s;
        have_spare_ = false;
    }

    // Derive an independent stream from (seed, purpose). Hashing the tag keeps
    // consumers decoupled: adding a new stream never perturbs existing ones.
    static Rng derive(uint64_t seed, std::string_view purpose) {
        uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
        for (char c : purpose) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
        Rng mix(seed ^ h);
        // Burn one output so closely related seeds decorrelate.
        Rng out(mix.next_u64());
        return out;
    }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace jointseg
