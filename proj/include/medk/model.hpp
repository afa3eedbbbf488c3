#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "medk/common.hpp"
#include "medk/config.hpp"
#include "medk/tree.hpp"

namespace medk {

// Pre-norm decoder backbone (RMSNorm, rotary positions, gated SiLU MLP) plus
// one residual feed-forward decoding head per lookahead offset:
//   p^(k) = softmax(W2^(k) applied to SiLU(W1^(k) h) + h).

struct LayerWeights {
    VectorXd attn_norm;  // d
    MatrixXd wq, wk, wv, wo;  // d x d
    VectorXd mlp_norm;   // d
    MatrixXd w_gate, w_up;    // d x i
    MatrixXd w_down;          // i x d
};

struct HeadWeights {
    MatrixXd w1;  // d x d, zero at init so the head starts as the LM head
    MatrixXd w2;  // d x V, initialized to a copy of the LM head
};

struct Weights {
    MatrixXd embed;    // V x d
    std::vector<LayerWeights> layers;
    VectorXd final_norm;  // d
    MatrixXd lm_head;  // d x V
    std::vector<HeadWeights> heads;
};

struct Model {
    ModelConfig cfg;
    Weights w;
};

// Gradients share the weight layout.
using Gradients = Weights;

Model init_model(const ModelConfig& cfg);

Weights zeros_like(const Model& model);

// Visits every tensor in a fixed order (also the checkpoint order).
// Norm vectors are visited as d x 1 matrices.
using TensorVisitor = std::function<void(const std::string& name, Eigen::Ref<MatrixXd>)>;
void for_each_tensor(Weights& w, const TensorVisitor& fn);
void for_each_tensor_pair(Weights& a, Weights& b,
                          const std::function<void(const std::string&, Eigen::Ref<MatrixXd>,
                                                   Eigen::Ref<MatrixXd>)>& fn);

inline bool is_head_tensor(const std::string& name) { return name.rfind("heads.", 0) == 0; }

// FNV-1a over all tensor bytes in visit order.
uint64_t weights_checksum(const Model& model);

bool weights_finite(const Model& model);

// --- inference ---

struct KvCache {
    int committed = 0;
    std::vector<MatrixXd> k, v;  // per layer: max_seq_len x d, rotary already applied
    // Scratch layout of the most recent tree pass, used to validate commits.
    std::vector<int> scratch_depth, scratch_parent;
};

// Probability predictions for a set of query positions. Entry p of scores /
// probs is a (K+1) x V matrix: row 0 is the LM head, row k is Medusa head k.
struct LogitsBundle {
    std::vector<MatrixXd> scores;
    std::vector<MatrixXd> probs;

    int positions() const { return static_cast<int>(scores.size()); }
};

KvCache make_cache(const Model& model);

// Causal pass over a prompt. Returns the bundle for the final position only;
// the cache comes back with committed == tokens.size().
std::pair<LogitsBundle, KvCache> forward_prefill(const Model& model,
                                                 const std::vector<int>& tokens);

// One tree-attention pass. Token r sits at rotary position
// committed - 1 + depth[r] and attends to every committed position plus its
// own ancestors (and itself). K/V land in scratch slots after the committed
// prefix; nothing is committed. Returns one bundle entry per tree token.
LogitsBundle forward_tree(const Model& model, KvCache& cache,
                          const std::vector<int>& tree_tokens, const MaskSpec& mask);

// Moves the K/V rows of one root-to-node path of the last tree pass into the
// committed prefix. Throws if the slots do not form such a path.
void commit_accepted(KvCache& cache, const std::vector<int>& accepted_scratch_slots);

// p^(k) for a single hidden-state row; k in 1..K.
VectorXd head_forward(const Model& model, const VectorXd& h, int k);

// p^(0) for a single hidden-state row.
VectorXd lm_forward(const Model& model, const VectorXd& h);

// Plain autoregressive sampling (temperature <= 0 means greedy). Stops after
// max_new tokens or right after emitting the sentinel. The emitted sentinel
// is included in the returned sequence.
std::vector<int> vanilla_generate(const Model& model, const std::vector<int>& prompt,
                                  double temperature, int max_new, Rng& rng);

// Post-final-norm hidden state of every position (the rows the LM head and
// the decoding heads consume). S x d.
MatrixXd final_hidden_states(const Model& model, const std::vector<int>& tokens);

// --- training-time forward/backward (full sequences, cached activations) ---

struct SeqTrace;

// Runs the causal pass over one sequence keeping every activation needed for
// the backward sweep. scores(k) is the S x V raw score matrix of head k
// (k = 0 is the LM head).
struct TrainForward {
    std::shared_ptr<SeqTrace> trace;
    std::vector<MatrixXd> scores;  // K+1 entries, each S x V
};

TrainForward forward_train(const Model& model, const std::vector<int>& tokens);

// Accumulates parameter gradients given dL/dscores per head. heads_only
// restricts the sweep to the Medusa heads (frozen backbone).
void backward_train(const Model& model, const TrainForward& fwd,
                    const std::vector<MatrixXd>& dscores, bool heads_only, Gradients& grads);

}  // namespace medk
