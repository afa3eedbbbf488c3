#pragma once

#include <cstdint>

namespace medk {

struct ModelConfig {
    int vocab_size = 257;       // default byte-level vocab: 0 = end marker, 1..256 = bytes
    int hidden_dim = 32;
    int num_layers = 2;
    int num_attn_heads = 2;
    int head_dim = 16;          // num_attn_heads * head_dim == hidden_dim
    int intermediate_dim = 64;
    int num_medusa_heads = 5;
    int max_seq_len = 512;
    uint64_t rng_seed = 0;

    // Throws std::invalid_argument on inconsistent dimensions.
    void validate() const;
};

// End-of-generation marker. Decoding truncates at the first occurrence.
inline constexpr int kSentinelToken = 0;

}  // namespace medk
