#pragma once

#include <optional>
#include <string>
#include <vector>

#include "medk/common.hpp"
#include "medk/model.hpp"
#include "medk/tree.hpp"

namespace medk {

enum class Scheme { greedy, typical, rejection };

Scheme scheme_from_string(const std::string& s);
std::string scheme_to_string(Scheme s);

struct DecodeConfig {
    Scheme scheme = Scheme::greedy;
    double temperature = 0.0;  // typical/rejection fall back to greedy at T <= 0
    double epsilon = 0.09;     // hard acceptance threshold
    double delta = 0.3;        // entropy-dependent threshold (sqrt(epsilon) by default)
    TreeSpec tree;
    int max_new_tokens = 64;
    uint64_t rng_seed = 0;
    bool collect_trace = false;
    bool collect_step_records = false;
    bool measure_overhead = true;  // time a vanilla decode of the same length
};

struct DecodeMetrics {
    long steps = 0;
    long tokens_generated = 0;
    double acceleration_rate = 1.0;   // tokens per verification step
    double mean_step_latency = 0.0;   // seconds
    double vanilla_step_latency = 0.0;
    double overhead = 1.0;            // medusa step latency / vanilla step latency
    double speedup = 1.0;             // acceleration_rate / overhead
};

struct TraceRow {
    long step;
    int accepted_len;     // committed tokens this step (incl. the step-0 token)
    int candidate_count;  // leaves of the candidate tree
    std::string chosen_path;  // rank path of the deepest accepted node, "root" if none
};

// The candidate tree of one verification step, with the unconditional step-0
// token spliced in as the single root child (slot 0). Tree node j of the
// TreeSpec lives at slot j+1.
struct AugTree {
    MaskSpec mask;                          // includes slot 0
    std::vector<std::vector<int>> paths;    // rank path per slot; empty for slot 0
    int spec_nodes = 0;
    int leaves = 0;
};

AugTree augment_with_root(const TreeSpec& tree);

// Per-step snapshot used to re-evaluate acceptance offline.
struct StepRecord {
    std::vector<int> tokens;          // per slot
    std::vector<VectorXd> scores0;    // raw backbone scores per slot
    std::vector<int> depth, parent;   // augmented structure
};

struct CandidateSet {
    int step0 = 0;
    std::vector<int> tokens;  // per slot, slot 0 = step0
};

// Tokens for one step: the step-0 token from p^(0) (argmax under greedy,
// a temperature sample otherwise) and one token per tree node, the rank-i_k
// entry of head k's sorted distribution.
CandidateSet generate_candidates(const LogitsBundle& bundle_at_last, const AugTree& aug,
                                 Scheme scheme, double temperature, Rng& rng);

// Longest root path whose tokens all equal the backbone argmax at their
// parent position. Slot 0 is always accepted. Returns accepted slots in path
// order.
std::vector<int> verify_greedy(const LogitsBundle& outputs, const std::vector<int>& tokens,
                               const AugTree& aug);

// Typical acceptance: a non-first token passes iff its temperature-scaled
// backbone probability at the parent position exceeds
// min(epsilon, delta * exp(-H)). Longest accepted prefix over all candidates,
// ties broken by node order.
std::vector<int> verify_typical(const LogitsBundle& outputs, const std::vector<int>& tokens,
                                const AugTree& aug, double temperature, double epsilon,
                                double delta);

double typical_threshold(const VectorXd& raw_scores, double temperature, double epsilon,
                         double delta);
bool typical_passes(const VectorXd& raw_scores, int token, double temperature, double epsilon,
                    double delta);

// Same walk as verify_typical against a recorded step.
int typical_accept_length(const StepRecord& rec, double temperature, double epsilon, double delta);

// Sequential speculative acceptance along one sampled chain. drafts[k] was
// sampled from draft_dists[k]; backbone distributions come from the chain
// outputs (slot k is the parent of draft k). On rejection the corrected token
// is drawn from the normalized residual max(0, p - q).
struct RejectionResult {
    int accepted_drafts = 0;
    std::optional<int> corrected;
};

RejectionResult verify_rejection(const LogitsBundle& outputs, const std::vector<int>& drafts,
                                 const std::vector<VectorXd>& draft_dists, double temperature,
                                 Rng& rng);

struct DecodeResult {
    std::vector<int> tokens;  // generated continuation (prompt excluded)
    DecodeMetrics metrics;
    std::vector<TraceRow> trace;
    std::vector<StepRecord> step_records;
};

// The full loop: prefill, then candidates -> tree pass -> verify -> commit
// until max_new_tokens or the sentinel. Logits from each tree pass seed the
// next step's candidates.
DecodeResult decode(const Model& model, const std::vector<int>& prompt, const DecodeConfig& cfg);

struct BenchRow {
    std::string tree;  // label of the candidate tree used
    int prompt_id;
    long tokens, steps;
    double acceleration_rate, overhead, speedup;
    bool matches_baseline;  // greedy scheme: medusa text == vanilla text
};

std::vector<BenchRow> bench(const Model& model, const std::vector<std::vector<int>>& prompts,
                            const DecodeConfig& cfg);

std::string bench_to_csv(const std::vector<BenchRow>& rows);
std::string trace_to_csv(const std::vector<TraceRow>& rows);

}  // namespace medk
