#pragma once

#include <cstdint>
#include <cstring>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace uforge {

inline constexpr const char* kToolVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Error taxonomy. Every failure mode maps onto one of these; the CLI turns
// them into exit codes (config 2, missing artifact 3, numeric 4).
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
    using Error::Error;
};

// Non-finite values anywhere in a computation. Message carries the op name.
struct NumericError : Error {
    using Error::Error;
};

struct LayoutError : Error {
    using Error::Error;
};

struct AutogradError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct MissingArtifactError : Error {
    using Error::Error;
};

struct DataError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. All randomness in the project flows through this class
// so that a (seed, call sequence) pair fully determines every result.
// Normal deviates use Box-Muller instead of std::normal_distribution, whose
// algorithm is implementation-defined.
// ---------------------------------------------------------------------------

class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1), 53 random bits.
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive bounds. Modulo bias is negligible at 64 bits.
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double two_pi = 6.283185307179586476925286766559;
        double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(two_pi * u2);
        have_spare_ = true;
        return r * std::cos(two_pi * u2);
    }

    // Derives an independent stream seed (splitmix64 finalizer).
    static uint64_t derive(uint64_t seed, uint64_t stream) {
        uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

  private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// FNV-1a content hashing, used for artifact/table/schedule identity.
// ---------------------------------------------------------------------------

class Fnv1a {
  public:
    void add_bytes(const void* p, size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h_ ^= b[i];
            h_ *= 0x100000001B3ull;
        }
    }
    void add_u64(uint64_t v) { add_bytes(&v, sizeof(v)); }
    void add_double(double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        add_u64(bits);
    }
    void add_doubles(const std::vector<double>& v) {
        for (double x : v) add_double(x);
    }
    void add_string(const std::string& s) {
        add_u64(s.size());
        add_bytes(s.data(), s.size());
    }
    uint64_t digest() const { return h_; }

    static std::string hex(uint64_t v);

  private:
    uint64_t h_ = 1469598103934665603ull;
};

// ---------------------------------------------------------------------------
// Shared worker pool. Tasks must write to disjoint outputs; results are then
// independent of scheduling, which keeps every parallel path deterministic.
// Calls from inside a worker run inline (no nested parallelism).
// ---------------------------------------------------------------------------

void parallel_tasks(int n_tasks, const std::function<void(int)>& fn);

int worker_count();

bool is_finite(double v);

}  // namespace uforge
