#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "gaitkit/common.hpp"

namespace gaitkit {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t salt) {
    return splitmix64(seed ^ splitmix64(salt));
}

// Deterministic random source. std::mt19937_64 supplies the raw stream; the
// uniform/normal transforms are done by hand so the produced doubles do not
// depend on the standard library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::uint64_t uniform_int(std::uint64_t n) {
        return n == 0 ? 0 : next_u64() % n;
    }

    // Box-Muller; the second value of each pair is cached.
    double normal() {
        if (has_cache_) {
            has_cache_ = false;
            return cache_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        cache_ = r * std::sin(a);
        has_cache_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Derive an independent deterministic stream.
    Rng fork(std::uint64_t salt) const {
        return Rng(hash_combine(base_state_hash(), salt));
    }

    std::string state_string() const {
        std::ostringstream os;
        os << engine_ << " " << (has_cache_ ? 1 : 0) << " ";
        os.precision(17);
        os << std::scientific << cache_;
        return os.str();
    }

    static Rng from_state(const std::string& state) {
        Rng rng(0);
        std::istringstream is(state);
        is >> rng.engine_;
        int has = 0;
        is >> has >> rng.cache_;
        if (!is) throw FormatError("rng state: malformed state string");
        rng.has_cache_ = has != 0;
        return rng;
    }

private:
    // Stable per-instance salt base for fork(); mixes the next raw output
    // without consuming it.
    std::uint64_t base_state_hash() const {
        std::ostringstream os;
        os << engine_;
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (char c : os.str()) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
        return h;
    }

    std::mt19937_64 engine_;
    bool has_cache_ = false;
    double cache_ = 0.0;
};

}  // namespace gaitkit
