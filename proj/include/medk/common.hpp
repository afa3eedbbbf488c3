#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace medk {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Raised on malformed inputs / artifact files (CLI exit code 3).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised when a training loss goes non-finite (CLI exit code 4).
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline double silu_grad(double x) {
    double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

// Stable softmax (max subtraction).
VectorXd softmax(const VectorXd& scores);

// Shannon entropy in nats, with the 0*log(0) = 0 convention.
double entropy(const VectorXd& p);

// Distribution after temperature scaling of raw scores. T <= 0 degenerates
// to a one-hot at the argmax (greedy limit).
VectorXd probs_from_scores(const VectorXd& scores, double temperature);

// Argmax with ties broken toward the lowest token id.
int argmax_token(const VectorXd& p);

// Token ids sorted by (probability desc, id asc); at most top_n entries.
std::vector<int> ranked_tokens(const VectorXd& p, int top_n);

// Deterministic RNG. mt19937_64 output is pinned by the standard; the
// transforms below avoid std::*_distribution, whose streams are not.
class Rng {
   public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller (cosine branch only).
    double normal() {
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Uniform integer in [0, n), rejection sampled (no modulo bias).
    uint64_t bounded(uint64_t n);

    // Sample an index from a probability vector via inverse CDF.
    int categorical(const VectorXd& p);

    uint64_t raw() { return eng_(); }

   private:
    std::mt19937_64 eng_;
};

// FNV-1a 64-bit, used for weight checksums and artifact digests.
uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 1469598103934665603ULL);

std::string to_hex(uint64_t v);

}  // namespace medk
