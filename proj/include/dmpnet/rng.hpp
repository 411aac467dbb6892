#pragma once

#include <cstdint>
#include <random>

namespace dmpnet {

// Seeded RNG with hand-rolled uniform draws. std::mt19937's word stream is
// pinned by the standard, the std distributions are not, so deriving floats
// directly from the words keeps generated datasets and initializations
// bit-identical everywhere.
class Rng {
   public:
    explicit Rng(std::uint64_t seed) : engine_(static_cast<std::uint32_t>(seed ^ (seed >> 32))) {}

    std::uint32_t next_u32() { return engine_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u32()) * (1.0 / 4294967296.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [lo, hi] inclusive
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(next_u32() % static_cast<std::uint32_t>(hi - lo + 1));
    }

    bool coin(double p = 0.5) { return uniform() < p; }

   private:
    std::mt19937 engine_;
};

}  // namespace dmpnet
