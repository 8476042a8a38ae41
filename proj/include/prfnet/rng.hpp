#pragma once

#include <cstdint>
#include <random>

namespace prfnet {

// Deterministic random source. All stochastic choices in the library
// (weight init, shuffling, crops, distortions, synthetic data) flow through
// one of these so a run is reproducible from its seed.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    double normal(double mean = 0.0, double stddev = 1.0) {
        std::normal_distribution<double> d(mean, stddev);
        return d(engine_);
    }

    double uniform(double lo = 0.0, double hi = 1.0) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(engine_);
    }

    // Inclusive bounds.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        std::uniform_int_distribution<int64_t> d(lo, hi);
        return d(engine_);
    }

    // Derive an independent child seed; used to give sub-tasks their own stream.
    uint64_t fork_seed() {
        std::uniform_int_distribution<uint64_t> d;
        return d(engine_);
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace prfnet
