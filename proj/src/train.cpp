#include "medk/train.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace medk {

void TrainConfig::validate() const {
    if (!(lambda_base > 0.0 && lambda_base <= 1.0))
        throw std::invalid_argument("lambda_base must be in (0, 1]");
    if (lambda0 < 0.0) throw std::invalid_argument("lambda0 must be >= 0");
    if (lr_backbone <= 0.0 || lr_heads_multiplier <= 0.0)
        throw std::invalid_argument("learning rates must be positive");
    if (stage1_steps < 0 || stage2_steps < 0 || warmup_steps < 0)
        throw std::invalid_argument("step counts must be non-negative");
    if (batch_size < 1 || seq_len < 2) throw std::invalid_argument("bad batch shape");
}

Batch Batch::full(Eigen::MatrixXi tokens) {
    Batch b;
    b.target_mask.setOnes(tokens.rows(), tokens.cols());
    b.tokens = std::move(tokens);
    return b;
}

void Batch::validate(int vocab_size) const {
    if (tokens.rows() != target_mask.rows() || tokens.cols() != target_mask.cols())
        throw std::invalid_argument("batch mask shape mismatch");
    for (int b = 0; b < tokens.rows(); ++b)
        for (int t = 0; t < tokens.cols(); ++t)
            if (tokens(b, t) < 0 || tokens(b, t) >= vocab_size)
                throw DataError("batch token id outside vocab");
}

namespace {

std::vector<int> row_tokens(const Batch& batch, int b) {
    std::vector<int> out(batch.seq());
    for (int t = 0; t < batch.seq(); ++t) out[t] = batch.tokens(b, t);
    return out;
}

// Shared core for the cross-entropy losses. head_coeff[k] scales head k's
// dscores contribution (0 entries skip the head entirely); head 0 is the LM
// head with offset 1, head k predicts k+1 positions ahead.
struct CeSpec {
    std::vector<double> head_coeff;  // size K+1
    bool heads_only = false;
};

LossResult ce_loss(const Model& model, const Batch& batch, const CeSpec& spec,
                   const std::vector<MatrixXd>* teacher) {
    const int kk = model.cfg.num_medusa_heads;
    const int s = batch.seq();
    batch.validate(model.cfg.vocab_size);

    // Forward everything first so per-head means are over the whole batch.
    std::vector<TrainForward> fwds;
    fwds.reserve(batch.batch());
    for (int b = 0; b < batch.batch(); ++b) fwds.push_back(forward_train(model, row_tokens(batch, b)));

    std::vector<long> counts(kk + 1, 0);
    for (int b = 0; b < batch.batch(); ++b)
        for (int k = 0; k <= kk; ++k)
            for (int t = 0; t + k + 1 <= s - 1; ++t)
                if (batch.target_mask(b, t + k + 1)) ++counts[k];
    for (int k = 0; k <= kk; ++k)
        if (spec.head_coeff[k] != 0.0 && counts[k] == 0)
            throw DataError("batch shorter than K+2 tokens (no supervised positions)");

    LossResult res;
    res.per_head.assign(kk, 0.0);
    res.grads = zeros_like(model);
    double loss_lm = 0.0;
    std::vector<double> head_raw(kk + 1, 0.0);

    for (int b = 0; b < batch.batch(); ++b) {
        auto& fwd = fwds[b];
        std::vector<MatrixXd> dscores(kk + 1);
        for (int k = 0; k <= kk; ++k) {
            if (spec.head_coeff[k] == 0.0) continue;
            dscores[k] = MatrixXd::Zero(s, model.cfg.vocab_size);
            for (int t = 0; t + k + 1 <= s - 1; ++t) {
                if (!batch.target_mask(b, t + k + 1)) continue;
                VectorXd p = softmax(fwd.scores[k].row(t).transpose());
                double inv_n = 1.0 / static_cast<double>(counts[k]);
                if (k == 0 && teacher) {
                    const VectorXd q = (*teacher)[b].row(t).transpose();
                    if (q.size() != p.size()) throw DataError("teacher/student vocab mismatch");
                    // KL(q || p) with 0 log 0 = 0
                    double kl = 0.0;
                    for (int i = 0; i < q.size(); ++i)
                        if (q[i] > 0.0) kl += q[i] * (std::log(q[i]) - std::log(std::max(p[i], 1e-300)));
                    head_raw[0] += kl * inv_n;
                    dscores[0].row(t) += (p - q).transpose() * inv_n;
                } else {
                    int y = batch.tokens(b, t + k + 1);
                    head_raw[k] += -std::log(std::max(p[y], 1e-300)) * inv_n;
                    p[y] -= 1.0;
                    dscores[k].row(t) += p.transpose() * inv_n;
                }
            }
            dscores[k] *= spec.head_coeff[k];
        }
        backward_train(model, fwd, dscores, spec.heads_only, res.grads);
    }

    loss_lm = spec.head_coeff[0] != 0.0 ? head_raw[0] : 0.0;
    for (int k = 1; k <= kk; ++k) res.per_head[k - 1] = head_raw[k];
    res.loss_lm = loss_lm;
    return res;  // loss / loss_medusa are assembled by the callers
}

}  // namespace

LossResult loss_medusa1(const Model& model, const Batch& batch, double lambda_base) {
    const int kk = model.cfg.num_medusa_heads;
    CeSpec spec;
    spec.heads_only = true;
    spec.head_coeff.assign(kk + 1, 0.0);
    double lam = 1.0;
    for (int k = 1; k <= kk; ++k) {
        lam *= lambda_base;
        spec.head_coeff[k] = lam;
    }
    LossResult res = ce_loss(model, batch, spec, nullptr);
    double total = 0.0;
    lam = 1.0;
    for (int k = 1; k <= kk; ++k) {
        lam *= lambda_base;
        total += lam * res.per_head[k - 1];
    }
    res.loss = total;
    res.loss_medusa = total;
    res.loss_lm = 0.0;
    return res;
}

LossResult loss_medusa_unfrozen(const Model& model, const Batch& batch, double lambda_base) {
    const int kk = model.cfg.num_medusa_heads;
    CeSpec spec;
    spec.heads_only = false;
    spec.head_coeff.assign(kk + 1, 0.0);
    double lam = 1.0;
    for (int k = 1; k <= kk; ++k) {
        lam *= lambda_base;
        spec.head_coeff[k] = lam;
    }
    LossResult res = ce_loss(model, batch, spec, nullptr);
    double total = 0.0;
    lam = 1.0;
    for (int k = 1; k <= kk; ++k) {
        lam *= lambda_base;
        total += lam * res.per_head[k - 1];
    }
    res.loss = total;
    res.loss_medusa = total;
    res.loss_lm = 0.0;
    return res;
}

LossResult loss_lm_only(const Model& model, const Batch& batch) {
    const int kk = model.cfg.num_medusa_heads;
    CeSpec spec;
    spec.head_coeff.assign(kk + 1, 0.0);
    spec.head_coeff[0] = 1.0;
    LossResult res = ce_loss(model, batch, spec, nullptr);
    res.loss = res.loss_lm;
    res.loss_medusa = 0.0;
    return res;
}

LossResult loss_medusa2(const Model& model, const Batch& batch, double lambda0,
                        double lambda_base) {
    const int kk = model.cfg.num_medusa_heads;
    CeSpec spec;
    spec.head_coeff.assign(kk + 1, 0.0);
    spec.head_coeff[0] = 1.0;
    double lam = 1.0;
    for (int k = 1; k <= kk; ++k) {
        lam *= lambda_base;
        spec.head_coeff[k] = lambda0 * lam;
    }
    LossResult res = ce_loss(model, batch, spec, nullptr);
    double medusa = 0.0;
    lam = 1.0;
    for (int k = 1; k <= kk; ++k) {
        lam *= lambda_base;
        medusa += lam * res.per_head[k - 1];
    }
    res.loss_medusa = medusa;
    res.loss = res.loss_lm + lambda0 * medusa;
    return res;
}

std::vector<MatrixXd> teacher_probs(const Model& teacher, const Batch& batch) {
    std::vector<MatrixXd> out;
    out.reserve(batch.batch());
    for (int b = 0; b < batch.batch(); ++b) {
        TrainForward fwd = forward_train(teacher, row_tokens(batch, b));
        MatrixXd p(batch.seq(), teacher.cfg.vocab_size);
        for (int t = 0; t < batch.seq(); ++t)
            p.row(t) = softmax(fwd.scores[0].row(t).transpose()).transpose();
        out.push_back(std::move(p));
    }
    return out;
}

LossResult loss_distill(const Model& model, const std::vector<MatrixXd>& teacher,
                        const Batch& batch) {
    const int kk = model.cfg.num_medusa_heads;
    CeSpec spec;
    spec.head_coeff.assign(kk + 1, 0.0);
    spec.head_coeff[0] = 1.0;
    LossResult res = ce_loss(model, batch, spec, &teacher);
    res.loss = res.loss_lm;
    res.loss_medusa = 0.0;
    return res;
}

LossResult loss_distill_joint(const Model& model, const std::vector<MatrixXd>& teacher,
                              const Batch& batch, double lambda0, double lambda_base) {
    const int kk = model.cfg.num_medusa_heads;
    CeSpec spec;
    spec.head_coeff.assign(kk + 1, 0.0);
    spec.head_coeff[0] = 1.0;
    double lam = 1.0;
    for (int k = 1; k <= kk; ++k) {
        lam *= lambda_base;
        spec.head_coeff[k] = lambda0 * lam;
    }
    LossResult res = ce_loss(model, batch, spec, &teacher);
    double medusa = 0.0;
    lam = 1.0;
    for (int k = 1; k <= kk; ++k) {
        lam *= lambda_base;
        medusa += lam * res.per_head[k - 1];
    }
    res.loss_medusa = medusa;
    res.loss = res.loss_lm + lambda0 * medusa;
    return res;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

AdamState make_adam_state(const Model& model) {
    AdamState st;
    auto& w = const_cast<Weights&>(model.w);
    for_each_tensor(w, [&](const std::string&, Eigen::Ref<MatrixXd> t) {
        st.m.push_back(MatrixXd::Zero(t.rows(), t.cols()));
        st.v.push_back(MatrixXd::Zero(t.rows(), t.cols()));
    });
    return st;
}

void adam_step(Model& model, const Gradients& grads, AdamState& state, double lr_backbone,
               double lr_heads, bool heads_only) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    state.t += 1;
    double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
    size_t idx = 0;
    auto& g = const_cast<Gradients&>(grads);
    for_each_tensor_pair(model.w, g,
                         [&](const std::string& name, Eigen::Ref<MatrixXd> param,
                             Eigen::Ref<MatrixXd> grad) {
                             size_t i = idx++;
                             bool head = is_head_tensor(name);
                             if (heads_only && !head) return;
                             double lr = head ? lr_heads : lr_backbone;
                             auto& m = state.m[i];
                             auto& v = state.v[i];
                             m = b1 * m + (1.0 - b1) * grad;
                             v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
                             MatrixXd mhat = m / c1;
                             MatrixXd vhat = v / c2;
                             param -= lr * mhat.cwiseQuotient((vhat.cwiseSqrt().array() + eps).matrix());
                         });
}

double lr_at(int step, int total_steps, int warmup_steps, double peak) {
    if (total_steps <= 0) return peak;
    int warmup = std::min(warmup_steps, total_steps);
    if (step < warmup) return peak * static_cast<double>(step + 1) / warmup;
    if (total_steps == warmup) return peak;
    double progress = static_cast<double>(step - warmup) / (total_steps - warmup);
    return peak * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

std::vector<CurveRow> train(Model& model, const std::vector<int>& corpus_tokens,
                            const TrainConfig& cfg, TrainMode mode) {
    cfg.validate();
    if (corpus_tokens.empty()) throw DataError("empty training corpus");
    if (cfg.seq_len <= model.cfg.num_medusa_heads + 1)
        throw std::invalid_argument("seq_len must exceed num_medusa_heads + 1");
    Rng rng(cfg.rng_seed);
    std::vector<CurveRow> curve;
    double lr_heads_peak = cfg.lr_backbone * cfg.lr_heads_multiplier;

    auto guard = [](double loss) {
        if (!std::isfinite(loss)) throw DivergenceError("training loss became non-finite");
    };

    // Stage 1: heads on the frozen backbone.
    {
        AdamState st = make_adam_state(model);
        for (int step = 0; step < cfg.stage1_steps; ++step) {
            Batch batch = sample_batch(corpus_tokens, cfg.batch_size, cfg.seq_len, rng);
            LossResult res = loss_medusa1(model, batch, cfg.lambda_base);
            guard(res.loss);
            double lr = lr_at(step, cfg.stage1_steps, cfg.warmup_steps, lr_heads_peak);
            adam_step(model, res.grads, st, 0.0, lr, /*heads_only=*/true);
            curve.push_back({step, res.loss, 0.0, res.loss_medusa, 0.0, lr});
        }
    }
    if (mode == TrainMode::medusa1) return curve;

    // Stage 2: joint training (optionally against a frozen teacher).
    std::optional<Model> teacher;
    if (mode == TrainMode::selfdistill) teacher = model;
    AdamState st = make_adam_state(model);
    for (int step = 0; step < cfg.stage2_steps; ++step) {
        Batch batch = sample_batch(corpus_tokens, cfg.batch_size, cfg.seq_len, rng);
        double lambda0 = cfg.lambda0;
        if (cfg.lambda0_schedule == Lambda0Schedule::sine_ramp)
            lambda0 = cfg.lambda0 * std::sin(0.5 * M_PI * static_cast<double>(step + 1) /
                                             static_cast<double>(cfg.stage2_steps));
        LossResult res;
        if (teacher) {
            auto tp = teacher_probs(*teacher, batch);
            res = loss_distill_joint(model, tp, batch, lambda0, cfg.lambda_base);
        } else {
            res = loss_medusa2(model, batch, lambda0, cfg.lambda_base);
        }
        guard(res.loss);
        double lr_b = lr_at(step, cfg.stage2_steps, cfg.warmup_steps, cfg.lr_backbone);
        double lr_h = lr_at(step, cfg.stage2_steps, cfg.warmup_steps, lr_heads_peak);
        adam_step(model, res.grads, st, lr_b, lr_h, /*heads_only=*/false);
        curve.push_back({cfg.stage1_steps + step, res.loss, res.loss_lm, res.loss_medusa, lr_b, lr_h});
    }
    return curve;
}

std::vector<std::string> generate_self_distill_corpus(const Model& model,
                                                      const std::vector<std::string>& seed_prompts,
                                                      double temperature, int total_tokens,
                                                      uint64_t seed) {
    if (seed_prompts.empty()) throw DataError("self-distillation needs seed prompts");
    if (!weights_finite(model)) throw DataError("model weights are not finite");
    Rng rng(seed);
    std::vector<std::string> lines;
    int produced = 0;
    size_t next_prompt = 0;
    int per_sample = std::max(16, model.cfg.max_seq_len / 2);
    while (produced < total_tokens) {
        const std::string& prompt = seed_prompts[next_prompt];
        next_prompt = (next_prompt + 1) % seed_prompts.size();
        std::vector<int> ids = encode_text(prompt);
        if (ids.empty()) continue;
        int room = model.cfg.max_seq_len - static_cast<int>(ids.size()) - 1;
        int budget = std::min({per_sample, room, total_tokens - produced});
        if (budget <= 0) break;
        std::vector<int> gen = vanilla_generate(model, ids, temperature, budget, rng);
        produced += static_cast<int>(gen.size());
        lines.push_back(prompt + decode_text(gen));
    }
    return lines;
}

// ---------------------------------------------------------------------------
// corpus plumbing
// ---------------------------------------------------------------------------

std::vector<int> encode_text(const std::string& text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(static_cast<int>(c) + 1);
    return out;
}

std::string decode_text(const std::vector<int>& tokens) {
    std::string out;
    for (int t : tokens) {
        if (t == kSentinelToken) break;
        if (t < 1 || t > 256) continue;  // ids beyond the byte range render as nothing
        out.push_back(static_cast<char>(t - 1));
    }
    return out;
}

std::vector<int> corpus_stream(const std::vector<std::string>& lines) {
    std::vector<int> stream;
    for (const auto& line : lines) {
        auto ids = encode_text(line);
        stream.insert(stream.end(), ids.begin(), ids.end());
        stream.push_back(kSentinelToken);
    }
    return stream;
}

Batch sample_batch(const std::vector<int>& stream, int batch_size, int seq_len, Rng& rng) {
    if (static_cast<int>(stream.size()) < seq_len)
        throw DataError("corpus shorter than one training window");
    Eigen::MatrixXi tokens(batch_size, seq_len);
    uint64_t range = stream.size() - seq_len + 1;
    for (int b = 0; b < batch_size; ++b) {
        auto start = static_cast<size_t>(rng.bounded(range));
        for (int t = 0; t < seq_len; ++t) tokens(b, t) = stream[start + t];
    }
    return Batch::full(std::move(tokens));
}

std::string curve_to_csv(const std::vector<CurveRow>& curve) {
    std::ostringstream out;
    out << "step,loss,loss_lm,loss_medusa,lr_backbone,lr_heads\n";
    out.precision(12);
    for (const auto& r : curve)
        out << r.step << "," << r.loss << "," << r.loss_lm << "," << r.loss_medusa << ","
            << r.lr_backbone << "," << r.lr_heads << "\n";
    return out.str();
}

double head_top1_accuracy(const Model& model, const std::vector<std::vector<int>>& seqs, int k) {
    long hits = 0, total = 0;
    for (const auto& seq : seqs) {
        int s = static_cast<int>(seq.size());
        if (s < k + 2) continue;
        TrainForward fwd = forward_train(model, seq);
        for (int t = 0; t + k + 1 <= s - 1; ++t) {
            int pred = argmax_token(fwd.scores[k].row(t).transpose());
            if (pred == seq[t + k + 1]) ++hits;
            ++total;
        }
    }
    if (total == 0) throw DataError("no supervised positions for accuracy eval");
    return static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace medk
