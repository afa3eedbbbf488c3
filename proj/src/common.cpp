#include "medk/common.hpp"

#include <algorithm>
#include <numeric>

namespace medk {

VectorXd softmax(const VectorXd& scores) {
    VectorXd out = scores.array() - scores.maxCoeff();
    out = out.array().exp();
    out /= out.sum();
    return out;
}

double entropy(const VectorXd& p) {
    double h = 0.0;
    for (int i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
    }
    return h;
}

VectorXd probs_from_scores(const VectorXd& scores, double temperature) {
    if (temperature <= 0.0) {
        VectorXd out = VectorXd::Zero(scores.size());
        out[argmax_token(scores)] = 1.0;
        return out;
    }
    return softmax(scores / temperature);
}

int argmax_token(const VectorXd& p) {
    int best = 0;
    for (int i = 1; i < p.size(); ++i) {
        if (p[i] > p[best]) best = i;
    }
    return best;
}

std::vector<int> ranked_tokens(const VectorXd& p, int top_n) {
    std::vector<int> ids(p.size());
    std::iota(ids.begin(), ids.end(), 0);
    int n = std::min<int>(top_n, static_cast<int>(ids.size()));
    std::partial_sort(ids.begin(), ids.begin() + n, ids.end(), [&](int a, int b) {
        if (p[a] != p[b]) return p[a] > p[b];
        return a < b;
    });
    ids.resize(n);
    return ids;
}

uint64_t Rng::bounded(uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::bounded: n must be positive");
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t r;
    do {
        r = eng_();
    } while (r >= limit);
    return r % n;
}

int Rng::categorical(const VectorXd& p) {
    double u = uniform();
    double cum = 0.0;
    int last_positive = 0;
    for (int i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        last_positive = i;
        cum += p[i];
        if (u < cum) return i;
    }
    return last_positive;  // guards against cum < 1 from rounding
}

uint64_t fnv1a64(const void* data, size_t n, uint64_t h) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
    }
    return h;
}

std::string to_hex(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace medk
