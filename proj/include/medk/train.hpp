#pragma once

#include <optional>
#include <string>
#include <vector>

#include "medk/common.hpp"
#include "medk/model.hpp"

namespace medk {

enum class Lambda0Schedule { constant, sine_ramp };

struct TrainConfig {
    double lambda_base = 0.8;       // lambda_k = lambda_base^k
    double lambda0 = 0.2;           // weight of the head loss inside the joint loss
    double lr_backbone = 1e-3;
    double lr_heads_multiplier = 4.0;
    int stage1_steps = 200;         // heads only, frozen backbone
    int stage2_steps = 200;         // joint
    int warmup_steps = 40;          // linear warmup, then cosine decay (per stage)
    int batch_size = 8;
    int seq_len = 32;
    uint64_t rng_seed = 0;
    Lambda0Schedule lambda0_schedule = Lambda0Schedule::constant;

    void validate() const;
};

enum class TrainMode { medusa1, medusa2, selfdistill };

struct Batch {
    Eigen::MatrixXi tokens;  // batch_size x seq_len
    // target_mask(b, t): may position t be used as a prediction target?
    Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic> target_mask;

    int batch() const { return static_cast<int>(tokens.rows()); }
    int seq() const { return static_cast<int>(tokens.cols()); }

    static Batch full(Eigen::MatrixXi tokens);  // all-ones mask
    void validate(int vocab_size) const;
};

struct LossResult {
    double loss = 0.0;
    double loss_lm = 0.0;      // cross-entropy (or KL) term
    double loss_medusa = 0.0;  // lambda_k-weighted head term
    std::vector<double> per_head;  // unweighted mean loss per head (1..K)
    Gradients grads;
};

// Eq-1 style loss: sum_k lambda_base^k * mean(-log p_t^(k)(y_{t+k+1})).
// Backbone gradients stay exactly zero.
LossResult loss_medusa1(const Model& model, const Batch& batch, double lambda_base);

// Joint loss: next-token cross-entropy plus lambda0 times the head loss,
// with gradients for every parameter (single fused backward pass).
LossResult loss_medusa2(const Model& model, const Batch& batch, double lambda0,
                        double lambda_base);

// Same shape as loss_medusa1 but with backbone gradients included. Used to
// validate the joint loss by linearity; not a training mode by itself.
LossResult loss_medusa_unfrozen(const Model& model, const Batch& batch, double lambda_base);

// Next-token cross-entropy alone, full gradients.
LossResult loss_lm_only(const Model& model, const Batch& batch);

// Teacher p^(0) rows for every sequence of the batch (S x V each).
std::vector<MatrixXd> teacher_probs(const Model& teacher, const Batch& batch);

// KL(teacher || student) over next-token positions, full gradients.
LossResult loss_distill(const Model& model, const std::vector<MatrixXd>& teacher, const Batch& batch);

// Joint self-distillation loss: KL term in place of the cross-entropy term.
LossResult loss_distill_joint(const Model& model, const std::vector<MatrixXd>& teacher,
                              const Batch& batch, double lambda0, double lambda_base);

// --- optimizer ---

struct AdamState {
    std::vector<MatrixXd> m, v;
    long t = 0;
};

AdamState make_adam_state(const Model& model);

// One Adam update (beta 0.9/0.999, eps 1e-8, no weight decay). Head tensors
// use lr_heads, everything else lr_backbone; heads_only skips the backbone.
void adam_step(Model& model, const Gradients& grads, AdamState& state, double lr_backbone,
               double lr_heads, bool heads_only);

// Linear warmup to peak, cosine decay to zero afterwards.
double lr_at(int step, int total_steps, int warmup_steps, double peak);

// --- training loop ---

struct CurveRow {
    int step;
    double loss, loss_lm, loss_medusa, lr_backbone, lr_heads;
};

// Stage 1 trains heads on the frozen backbone; stage 2 trains jointly
// (medusa2) or against a frozen pre-stage-2 teacher (selfdistill). Mode
// medusa1 runs stage 1 only. Aborts with DivergenceError on non-finite loss.
std::vector<CurveRow> train(Model& model, const std::vector<int>& corpus_tokens,
                            const TrainConfig& cfg, TrainMode mode);

// Samples autoregressively from the model at the given temperature to build
// a corpus that matches its own output distribution. Returns one line per
// (prompt, continuation) pair; deterministic given the seed.
std::vector<std::string> generate_self_distill_corpus(const Model& model,
                                                      const std::vector<std::string>& seed_prompts,
                                                      double temperature, int total_tokens,
                                                      uint64_t seed);

// --- byte-level corpus handling ---

std::vector<int> encode_text(const std::string& text);       // byte value + 1
std::string decode_text(const std::vector<int>& tokens);     // stops at the sentinel

// Joins documents with a sentinel separator (and a trailing sentinel).
std::vector<int> corpus_stream(const std::vector<std::string>& lines);

// Deterministic batch of random windows from a token stream.
Batch sample_batch(const std::vector<int>& stream, int batch_size, int seq_len, Rng& rng);

std::string curve_to_csv(const std::vector<CurveRow>& curve);

// Fraction of positions where head k's top-1 prediction hits the token
// k+1 positions ahead.
double head_top1_accuracy(const Model& model, const std::vector<std::vector<int>>& seqs, int k);

}  // namespace medk
