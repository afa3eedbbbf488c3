#include "medk/model.hpp"

#include <memory>

namespace medk {

void ModelConfig::validate() const {
    if (vocab_size < 2) throw std::invalid_argument("vocab_size must be >= 2");
    if (num_medusa_heads < 1) throw std::invalid_argument("need at least one Medusa head");
    if (hidden_dim < 1 || num_layers < 1 || num_attn_heads < 1 || intermediate_dim < 1)
        throw std::invalid_argument("model dimensions must be positive");
    if (hidden_dim % num_attn_heads != 0)
        throw std::invalid_argument("hidden_dim must be divisible by num_attn_heads");
    if (num_attn_heads * head_dim != hidden_dim)
        throw std::invalid_argument("num_attn_heads * head_dim must equal hidden_dim");
    if (head_dim % 2 != 0) throw std::invalid_argument("head_dim must be even (rotary pairs)");
    if (max_seq_len < 2) throw std::invalid_argument("max_seq_len must be >= 2");
}

namespace {

constexpr double kRopeBase = 10000.0;
constexpr double kNormEps = 1e-6;

void fill_normal(MatrixXd& m, Rng& rng, double stddev) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = stddev * rng.normal();
}

// Rotates one row in place. Pairs are split halves: (j, j + hd/2).
using RowRef = Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>>;
void rope_row(RowRef row, int pos, bool inverse) {
    int hd = static_cast<int>(row.size());
    int half = hd / 2;
    for (int j = 0; j < half; ++j) {
        double theta = pos * std::pow(kRopeBase, -2.0 * j / hd);
        double c = std::cos(theta);
        double s = inverse ? -std::sin(theta) : std::sin(theta);
        double a = row[j], b = row[j + half];
        row[j] = a * c - b * s;
        row[j + half] = a * s + b * c;
    }
}

// y = x_hat .* w per row, x_hat = x / rms(x). Returns x_hat and 1/rms.
void rmsnorm_rows(const MatrixXd& x, const VectorXd& w, MatrixXd& x_hat, VectorXd& inv,
                  MatrixXd& y) {
    Eigen::Index s = x.rows(), d = x.cols();
    x_hat.resize(s, d);
    y.resize(s, d);
    inv.resize(s);
    for (Eigen::Index r = 0; r < s; ++r) {
        double ms = x.row(r).squaredNorm() / static_cast<double>(d);
        inv[r] = 1.0 / std::sqrt(ms + kNormEps);
        x_hat.row(r) = x.row(r) * inv[r];
        y.row(r) = x_hat.row(r).cwiseProduct(w.transpose());
    }
}

// dL/dx for y = (x * inv) .* w given dL/dy; also accumulates dL/dw.
void rmsnorm_backward(const MatrixXd& x_hat, const VectorXd& inv, const VectorXd& w,
                      const MatrixXd& dy, MatrixXd& dx, VectorXd& dw) {
    Eigen::Index s = x_hat.rows(), d = x_hat.cols();
    dx.resize(s, d);
    for (Eigen::Index r = 0; r < s; ++r) {
        Eigen::RowVectorXd dxhat = dy.row(r).cwiseProduct(w.transpose());
        double dot = dxhat.cwiseProduct(x_hat.row(r)).sum();
        dx.row(r) = inv[r] * (dxhat - x_hat.row(r) * (dot / static_cast<double>(d)));
        dw += dy.row(r).cwiseProduct(x_hat.row(r)).transpose();
    }
}

}  // namespace

Model init_model(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    Rng rng(cfg.rng_seed);
    int d = cfg.hidden_dim, V = cfg.vocab_size, i = cfg.intermediate_dim;
    double sd = 1.0 / std::sqrt(static_cast<double>(d));
    double si = 1.0 / std::sqrt(static_cast<double>(i));

    m.w.embed.resize(V, d);
    fill_normal(m.w.embed, rng, 1.0);
    m.w.layers.resize(cfg.num_layers);
    for (auto& layer : m.w.layers) {
        layer.attn_norm = VectorXd::Ones(d);
        layer.wq.resize(d, d);
        layer.wk.resize(d, d);
        layer.wv.resize(d, d);
        layer.wo.resize(d, d);
        fill_normal(layer.wq, rng, sd);
        fill_normal(layer.wk, rng, sd);
        fill_normal(layer.wv, rng, sd);
        fill_normal(layer.wo, rng, sd);
        layer.mlp_norm = VectorXd::Ones(d);
        layer.w_gate.resize(d, i);
        layer.w_up.resize(d, i);
        layer.w_down.resize(i, d);
        fill_normal(layer.w_gate, rng, sd);
        fill_normal(layer.w_up, rng, sd);
        fill_normal(layer.w_down, rng, si);
    }
    m.w.final_norm = VectorXd::Ones(d);
    m.w.lm_head.resize(d, V);
    fill_normal(m.w.lm_head, rng, sd);

    // Fresh heads reproduce the LM head exactly: W1 = 0 makes the SiLU branch
    // vanish, and W2 starts as a copy of the LM head.
    m.w.heads.resize(cfg.num_medusa_heads);
    for (auto& h : m.w.heads) {
        h.w1 = MatrixXd::Zero(d, d);
        h.w2 = m.w.lm_head;
    }
    return m;
}

Weights zeros_like(const Model& model) {
    Weights g;
    g.embed = MatrixXd::Zero(model.w.embed.rows(), model.w.embed.cols());
    g.layers.resize(model.w.layers.size());
    for (size_t l = 0; l < model.w.layers.size(); ++l) {
        const auto& src = model.w.layers[l];
        auto& dst = g.layers[l];
        dst.attn_norm = VectorXd::Zero(src.attn_norm.size());
        dst.wq = MatrixXd::Zero(src.wq.rows(), src.wq.cols());
        dst.wk = MatrixXd::Zero(src.wk.rows(), src.wk.cols());
        dst.wv = MatrixXd::Zero(src.wv.rows(), src.wv.cols());
        dst.wo = MatrixXd::Zero(src.wo.rows(), src.wo.cols());
        dst.mlp_norm = VectorXd::Zero(src.mlp_norm.size());
        dst.w_gate = MatrixXd::Zero(src.w_gate.rows(), src.w_gate.cols());
        dst.w_up = MatrixXd::Zero(src.w_up.rows(), src.w_up.cols());
        dst.w_down = MatrixXd::Zero(src.w_down.rows(), src.w_down.cols());
    }
    g.final_norm = VectorXd::Zero(model.w.final_norm.size());
    g.lm_head = MatrixXd::Zero(model.w.lm_head.rows(), model.w.lm_head.cols());
    g.heads.resize(model.w.heads.size());
    for (size_t k = 0; k < model.w.heads.size(); ++k) {
        g.heads[k].w1 = MatrixXd::Zero(model.w.heads[k].w1.rows(), model.w.heads[k].w1.cols());
        g.heads[k].w2 = MatrixXd::Zero(model.w.heads[k].w2.rows(), model.w.heads[k].w2.cols());
    }
    return g;
}

void for_each_tensor(Weights& w, const TensorVisitor& fn) {
    fn("embed", w.embed);
    for (size_t l = 0; l < w.layers.size(); ++l) {
        auto& layer = w.layers[l];
        std::string p = "layers." + std::to_string(l) + ".";
        fn(p + "attn_norm", layer.attn_norm);
        fn(p + "wq", layer.wq);
        fn(p + "wk", layer.wk);
        fn(p + "wv", layer.wv);
        fn(p + "wo", layer.wo);
        fn(p + "mlp_norm", layer.mlp_norm);
        fn(p + "w_gate", layer.w_gate);
        fn(p + "w_up", layer.w_up);
        fn(p + "w_down", layer.w_down);
    }
    fn("final_norm", w.final_norm);
    fn("lm_head", w.lm_head);
    for (size_t k = 0; k < w.heads.size(); ++k) {
        std::string p = "heads." + std::to_string(k + 1) + ".";
        fn(p + "w1", w.heads[k].w1);
        fn(p + "w2", w.heads[k].w2);
    }
}

void for_each_tensor_pair(Weights& a, Weights& b,
                          const std::function<void(const std::string&, Eigen::Ref<MatrixXd>,
                                                   Eigen::Ref<MatrixXd>)>& fn) {
    std::vector<std::pair<std::string, MatrixXd*>> lhs;
    // Collect references from b in the same visit order, then walk a.
    std::vector<Eigen::Ref<MatrixXd>> rhs;
    std::vector<std::string> names;
    for_each_tensor(b, [&](const std::string& name, Eigen::Ref<MatrixXd> t) {
        names.push_back(name);
        rhs.push_back(t);
    });
    size_t i = 0;
    for_each_tensor(a, [&](const std::string& name, Eigen::Ref<MatrixXd> t) {
        fn(name, t, rhs[i]);
        ++i;
    });
    (void)names;
}

uint64_t weights_checksum(const Model& model) {
    uint64_t h = 1469598103934665603ULL;
    auto& w = const_cast<Weights&>(model.w);
    for_each_tensor(w, [&](const std::string& name, Eigen::Ref<MatrixXd> t) {
        h = fnv1a64(name.data(), name.size(), h);
        for (Eigen::Index r = 0; r < t.rows(); ++r)
            for (Eigen::Index c = 0; c < t.cols(); ++c) {
                double v = t(r, c);
                h = fnv1a64(&v, sizeof(v), h);
            }
    });
    return h;
}

bool weights_finite(const Model& model) {
    bool ok = true;
    auto& w = const_cast<Weights&>(model.w);
    for_each_tensor(w, [&](const std::string&, Eigen::Ref<MatrixXd> t) {
        if (!t.allFinite()) ok = false;
    });
    return ok;
}

// ---------------------------------------------------------------------------
// inference
// ---------------------------------------------------------------------------

KvCache make_cache(const Model& model) {
    KvCache cache;
    cache.k.assign(model.cfg.num_layers, MatrixXd::Zero(model.cfg.max_seq_len, model.cfg.hidden_dim));
    cache.v.assign(model.cfg.num_layers, MatrixXd::Zero(model.cfg.max_seq_len, model.cfg.hidden_dim));
    return cache;
}

namespace {

// Shared masked pass. tokens[r] is processed at rotary position pos[r] and may
// attend to committed cache entries plus earlier pass tokens j with allow(r, j)
// (allow(r, r) must hold). K/V are written to cache rows committed + r.
LogitsBundle run_masked(const Model& model, KvCache& cache, const std::vector<int>& tokens,
                        const std::vector<int>& pos,
                        const std::function<bool(int, int)>& allow, bool last_only) {
    const auto& cfg = model.cfg;
    int t_new = static_cast<int>(tokens.size());
    int n = cache.committed;
    if (t_new == 0) throw std::invalid_argument("empty token buffer");
    if (n + t_new > cfg.max_seq_len) throw std::invalid_argument("max_seq_len exceeded");
    for (int tok : tokens)
        if (tok < 0 || tok >= cfg.vocab_size) throw DataError("token id out of vocab range");

    int d = cfg.hidden_dim, hd = cfg.head_dim, nh = cfg.num_attn_heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    MatrixXd x(t_new, d);
    for (int r = 0; r < t_new; ++r) x.row(r) = model.w.embed.row(tokens[r]);

    MatrixXd x_hat, normed, q, k, v;
    VectorXd inv;
    for (int l = 0; l < cfg.num_layers; ++l) {
        const auto& lw = model.w.layers[l];
        rmsnorm_rows(x, lw.attn_norm, x_hat, inv, normed);
        q.noalias() = normed * lw.wq;
        k.noalias() = normed * lw.wk;
        v.noalias() = normed * lw.wv;
        for (int r = 0; r < t_new; ++r) {
            for (int h = 0; h < nh; ++h) {
                rope_row(q.block(r, h * hd, 1, hd).row(0), pos[r], false);
                rope_row(k.block(r, h * hd, 1, hd).row(0), pos[r], false);
            }
            cache.k[l].row(n + r) = k.row(r);
            cache.v[l].row(n + r) = v.row(r);
        }

        MatrixXd attn_out = MatrixXd::Zero(t_new, d);
        std::vector<int> keys;
        for (int r = 0; r < t_new; ++r) {
            keys.clear();
            for (int c = 0; c < n; ++c) keys.push_back(c);
            for (int j = 0; j < t_new; ++j)
                if (allow(r, j)) keys.push_back(n + j);
            for (int h = 0; h < nh; ++h) {
                VectorXd scores(keys.size());
                for (size_t m = 0; m < keys.size(); ++m) {
                    scores[m] = q.block(r, h * hd, 1, hd)
                                    .row(0)
                                    .dot(cache.k[l].block(keys[m], h * hd, 1, hd).row(0)) *
                                scale;
                }
                VectorXd p = softmax(scores);
                for (size_t m = 0; m < keys.size(); ++m)
                    attn_out.block(r, h * hd, 1, hd) +=
                        p[m] * cache.v[l].block(keys[m], h * hd, 1, hd);
            }
        }
        x.noalias() += attn_out * lw.wo;

        rmsnorm_rows(x, lw.mlp_norm, x_hat, inv, normed);
        MatrixXd gate = normed * lw.w_gate;
        MatrixXd up = normed * lw.w_up;
        MatrixXd act = gate.unaryExpr([](double g) { return silu(g); }).cwiseProduct(up);
        x.noalias() += act * lw.w_down;
    }

    rmsnorm_rows(x, model.w.final_norm, x_hat, inv, normed);

    LogitsBundle bundle;
    int first = last_only ? t_new - 1 : 0;
    int kk = cfg.num_medusa_heads;
    for (int r = first; r < t_new; ++r) {
        MatrixXd scores(kk + 1, cfg.vocab_size);
        VectorXd f = normed.row(r).transpose();
        scores.row(0) = (f.transpose() * model.w.lm_head).row(0);
        for (int h = 1; h <= kk; ++h) {
            const auto& head = model.w.heads[h - 1];
            VectorXd z = (f.transpose() * head.w1).transpose();
            VectorXd hid = z.unaryExpr([](double a) { return silu(a); }) + f;
            scores.row(h) = (hid.transpose() * head.w2).row(0);
        }
        MatrixXd probs(kk + 1, cfg.vocab_size);
        for (int h = 0; h <= kk; ++h) probs.row(h) = softmax(scores.row(h).transpose()).transpose();
        bundle.scores.push_back(std::move(scores));
        bundle.probs.push_back(std::move(probs));
    }
    return bundle;
}

}  // namespace

std::pair<LogitsBundle, KvCache> forward_prefill(const Model& model,
                                                 const std::vector<int>& tokens) {
    if (tokens.empty()) throw std::invalid_argument("prefill needs at least one token");
    KvCache cache = make_cache(model);
    std::vector<int> pos(tokens.size());
    for (size_t i = 0; i < tokens.size(); ++i) pos[i] = static_cast<int>(i);
    LogitsBundle bundle = run_masked(model, cache, tokens, pos,
                                     [](int r, int j) { return j <= r; }, /*last_only=*/true);
    cache.committed = static_cast<int>(tokens.size());
    cache.scratch_depth.clear();
    cache.scratch_parent.clear();
    return {std::move(bundle), std::move(cache)};
}

LogitsBundle forward_tree(const Model& model, KvCache& cache, const std::vector<int>& tree_tokens,
                          const MaskSpec& mask) {
    if (cache.committed < 1) throw std::invalid_argument("tree pass requires a committed prefix");
    if (mask.size() != static_cast<int>(tree_tokens.size()))
        throw std::invalid_argument("mask dimensions do not match tree tokens");
    std::vector<int> pos(tree_tokens.size());
    for (size_t i = 0; i < tree_tokens.size(); ++i)
        pos[i] = cache.committed - 1 + mask.depth[i];
    LogitsBundle bundle = run_masked(
        model, cache, tree_tokens, pos,
        [&mask](int r, int j) { return mask.ancestor[r][j]; }, /*last_only=*/false);
    cache.scratch_depth = mask.depth;
    cache.scratch_parent = mask.parent;
    return bundle;
}

void commit_accepted(KvCache& cache, const std::vector<int>& accepted_scratch_slots) {
    int scratch = static_cast<int>(cache.scratch_depth.size());
    if (accepted_scratch_slots.empty())
        throw std::invalid_argument("accepted slots must form a non-empty root path");
    for (size_t i = 0; i < accepted_scratch_slots.size(); ++i) {
        int s = accepted_scratch_slots[i];
        if (s < 0 || s >= scratch) throw std::invalid_argument("accepted slot out of range");
        int expected_parent = i == 0 ? -1 : accepted_scratch_slots[i - 1];
        if (i == 0 && cache.scratch_depth[s] != 1)
            throw std::invalid_argument("accepted path must start at a depth-1 node");
        if (cache.scratch_parent[s] != expected_parent)
            throw std::invalid_argument("accepted slots are not a root-to-node path");
    }
    int n = cache.committed;
    for (size_t l = 0; l < cache.k.size(); ++l) {
        for (size_t i = 0; i < accepted_scratch_slots.size(); ++i) {
            int src = n + accepted_scratch_slots[i];
            int dst = n + static_cast<int>(i);
            if (src != dst) {
                cache.k[l].row(dst) = cache.k[l].row(src);
                cache.v[l].row(dst) = cache.v[l].row(src);
            }
        }
    }
    cache.committed += static_cast<int>(accepted_scratch_slots.size());
    cache.scratch_depth.clear();
    cache.scratch_parent.clear();
}

VectorXd head_forward(const Model& model, const VectorXd& h, int k) {
    if (k < 1 || k > model.cfg.num_medusa_heads)
        throw std::out_of_range("medusa head index out of range");
    if (h.size() != model.cfg.hidden_dim) throw std::invalid_argument("hidden state size mismatch");
    const auto& head = model.w.heads[k - 1];
    VectorXd z = (h.transpose() * head.w1).transpose();
    VectorXd hid = z.unaryExpr([](double a) { return silu(a); }) + h;
    return softmax((hid.transpose() * head.w2).transpose());
}

VectorXd lm_forward(const Model& model, const VectorXd& h) {
    if (h.size() != model.cfg.hidden_dim) throw std::invalid_argument("hidden state size mismatch");
    return softmax((h.transpose() * model.w.lm_head).transpose());
}

std::vector<int> vanilla_generate(const Model& model, const std::vector<int>& prompt,
                                  double temperature, int max_new, Rng& rng) {
    std::vector<int> out;
    if (max_new <= 0) return out;
    auto [bundle, cache] = forward_prefill(model, prompt);
    MaskSpec step = chain_mask(1);
    while (static_cast<int>(out.size()) < max_new) {
        VectorXd p = probs_from_scores(bundle.scores.back().row(0).transpose(), temperature);
        int tok = temperature <= 0.0 ? argmax_token(bundle.probs.back().row(0).transpose())
                                     : rng.categorical(p);
        out.push_back(tok);
        if (tok == kSentinelToken) break;
        if (static_cast<int>(out.size()) == max_new) break;
        if (cache.committed + 1 > model.cfg.max_seq_len) break;
        bundle = forward_tree(model, cache, {tok}, step);
        commit_accepted(cache, {0});
    }
    return out;
}

// ---------------------------------------------------------------------------
// training forward/backward
// ---------------------------------------------------------------------------

struct SeqTrace {
    std::vector<int> tokens;
    MatrixXd x0;
    struct LayerTrace {
        MatrixXd x_in;
        MatrixXd a_hat, a;  // attention norm
        VectorXd a_inv;
        MatrixXd q, k, v;            // post-rope q/k
        std::vector<MatrixXd> p;     // per-head S x S attention
        MatrixXd attn_concat;        // heads concatenated, pre-wo
        MatrixXd x_mid;
        MatrixXd m_hat, m;  // mlp norm
        VectorXd m_inv;
        MatrixXd gate, up, act;  // act = silu(gate) .* up
    };
    std::vector<LayerTrace> layers;
    MatrixXd x_last;
    MatrixXd f_hat, f;  // final norm
    VectorXd f_inv;
    std::vector<MatrixXd> z, hid;  // per medusa head
};

TrainForward forward_train(const Model& model, const std::vector<int>& tokens) {
    const auto& cfg = model.cfg;
    int s = static_cast<int>(tokens.size());
    if (s < 2) throw std::invalid_argument("training sequence too short");
    if (s > cfg.max_seq_len) throw std::invalid_argument("max_seq_len exceeded");
    for (int tok : tokens)
        if (tok < 0 || tok >= cfg.vocab_size) throw DataError("token id out of vocab range");

    int d = cfg.hidden_dim, hd = cfg.head_dim, nh = cfg.num_attn_heads, kk = cfg.num_medusa_heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    auto trace = std::make_shared<SeqTrace>();
    trace->tokens = tokens;
    trace->x0.resize(s, d);
    for (int r = 0; r < s; ++r) trace->x0.row(r) = model.w.embed.row(tokens[r]);

    MatrixXd x = trace->x0;
    trace->layers.resize(cfg.num_layers);
    for (int l = 0; l < cfg.num_layers; ++l) {
        const auto& lw = model.w.layers[l];
        auto& tl = trace->layers[l];
        tl.x_in = x;
        rmsnorm_rows(x, lw.attn_norm, tl.a_hat, tl.a_inv, tl.a);
        tl.q.noalias() = tl.a * lw.wq;
        tl.k.noalias() = tl.a * lw.wk;
        tl.v.noalias() = tl.a * lw.wv;
        for (int r = 0; r < s; ++r) {
            for (int h = 0; h < nh; ++h) {
                rope_row(tl.q.block(r, h * hd, 1, hd).row(0), r, false);
                rope_row(tl.k.block(r, h * hd, 1, hd).row(0), r, false);
            }
        }
        tl.p.resize(nh);
        tl.attn_concat = MatrixXd::Zero(s, d);
        for (int h = 0; h < nh; ++h) {
            MatrixXd sc = tl.q.middleCols(h * hd, hd) * tl.k.middleCols(h * hd, hd).transpose() *
                          scale;
            MatrixXd p = MatrixXd::Zero(s, s);
            for (int r = 0; r < s; ++r) {
                VectorXd row = sc.row(r).head(r + 1).transpose();
                p.row(r).head(r + 1) = softmax(row).transpose();
            }
            tl.p[h] = p;
            tl.attn_concat.middleCols(h * hd, hd) = p * tl.v.middleCols(h * hd, hd);
        }
        x.noalias() += tl.attn_concat * lw.wo;
        tl.x_mid = x;
        rmsnorm_rows(x, lw.mlp_norm, tl.m_hat, tl.m_inv, tl.m);
        tl.gate.noalias() = tl.m * lw.w_gate;
        tl.up.noalias() = tl.m * lw.w_up;
        tl.act = tl.gate.unaryExpr([](double g) { return silu(g); }).cwiseProduct(tl.up);
        x.noalias() += tl.act * lw.w_down;
    }
    trace->x_last = x;
    rmsnorm_rows(x, model.w.final_norm, trace->f_hat, trace->f_inv, trace->f);

    TrainForward out;
    out.scores.resize(kk + 1);
    out.scores[0].noalias() = trace->f * model.w.lm_head;
    trace->z.resize(kk);
    trace->hid.resize(kk);
    for (int k = 1; k <= kk; ++k) {
        const auto& head = model.w.heads[k - 1];
        trace->z[k - 1].noalias() = trace->f * head.w1;
        trace->hid[k - 1] =
            trace->z[k - 1].unaryExpr([](double a) { return silu(a); }) + trace->f;
        out.scores[k].noalias() = trace->hid[k - 1] * head.w2;
    }
    out.trace = trace;
    return out;
}

void backward_train(const Model& model, const TrainForward& fwd,
                    const std::vector<MatrixXd>& dscores, bool heads_only, Gradients& grads) {
    const auto& cfg = model.cfg;
    const SeqTrace& tr = *fwd.trace;
    int s = static_cast<int>(tr.tokens.size());
    int d = cfg.hidden_dim, hd = cfg.head_dim, nh = cfg.num_attn_heads, kk = cfg.num_medusa_heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    if (static_cast<int>(dscores.size()) != kk + 1)
        throw std::invalid_argument("dscores must have one entry per head");

    // Heads and LM head; dF collects the gradient wrt the final normed hidden.
    MatrixXd df = MatrixXd::Zero(s, d);
    for (int k = 1; k <= kk; ++k) {
        if (dscores[k].size() == 0) continue;
        const auto& head = model.w.heads[k - 1];
        auto& gh = grads.heads[k - 1];
        MatrixXd dhid = dscores[k] * head.w2.transpose();
        gh.w2.noalias() += tr.hid[k - 1].transpose() * dscores[k];
        MatrixXd dz = dhid.cwiseProduct(tr.z[k - 1].unaryExpr([](double a) { return silu_grad(a); }));
        gh.w1.noalias() += tr.f.transpose() * dz;
        if (!heads_only) df += dhid + dz * head.w1.transpose();
    }
    if (heads_only) return;

    if (dscores[0].size() != 0) {
        grads.lm_head.noalias() += tr.f.transpose() * dscores[0];
        df.noalias() += dscores[0] * model.w.lm_head.transpose();
    }

    MatrixXd dx;
    rmsnorm_backward(tr.f_hat, tr.f_inv, model.w.final_norm, df, dx, grads.final_norm);

    for (int l = cfg.num_layers - 1; l >= 0; --l) {
        const auto& lw = model.w.layers[l];
        const auto& tl = tr.layers[l];
        auto& gl = grads.layers[l];

        // MLP block: x_out = x_mid + act * w_down
        MatrixXd dact = dx * lw.w_down.transpose();
        gl.w_down.noalias() += tl.act.transpose() * dx;
        MatrixXd silu_g = tl.gate.unaryExpr([](double g) { return silu(g); });
        MatrixXd dgate =
            dact.cwiseProduct(tl.up).cwiseProduct(
                tl.gate.unaryExpr([](double g) { return silu_grad(g); }));
        MatrixXd dup = dact.cwiseProduct(silu_g);
        gl.w_gate.noalias() += tl.m.transpose() * dgate;
        gl.w_up.noalias() += tl.m.transpose() * dup;
        MatrixXd dm = dgate * lw.w_gate.transpose() + dup * lw.w_up.transpose();
        MatrixXd dx_mid;
        rmsnorm_backward(tl.m_hat, tl.m_inv, lw.mlp_norm, dm, dx_mid, gl.mlp_norm);
        dx_mid += dx;  // residual

        // Attention block: x_mid = x_in + attn_concat * wo
        MatrixXd dconcat = dx_mid * lw.wo.transpose();
        gl.wo.noalias() += tl.attn_concat.transpose() * dx_mid;
        MatrixXd dq = MatrixXd::Zero(s, d), dk = MatrixXd::Zero(s, d), dv = MatrixXd::Zero(s, d);
        for (int h = 0; h < nh; ++h) {
            const MatrixXd& p = tl.p[h];
            MatrixXd do_h = dconcat.middleCols(h * hd, hd);
            MatrixXd dp = do_h * tl.v.middleCols(h * hd, hd).transpose();
            dv.middleCols(h * hd, hd).noalias() += p.transpose() * do_h;
            // softmax backward per row; masked cells have p == 0 so they drop out
            MatrixXd dsc(s, s);
            for (int r = 0; r < s; ++r) {
                double dot = dp.row(r).cwiseProduct(p.row(r)).sum();
                dsc.row(r) = p.row(r).cwiseProduct((dp.row(r).array() - dot).matrix());
            }
            dq.middleCols(h * hd, hd).noalias() += dsc * tl.k.middleCols(h * hd, hd) * scale;
            dk.middleCols(h * hd, hd).noalias() +=
                dsc.transpose() * tl.q.middleCols(h * hd, hd) * scale;
        }
        for (int r = 0; r < s; ++r) {
            for (int h = 0; h < nh; ++h) {
                rope_row(dq.block(r, h * hd, 1, hd).row(0), r, true);
                rope_row(dk.block(r, h * hd, 1, hd).row(0), r, true);
            }
        }
        gl.wq.noalias() += tl.a.transpose() * dq;
        gl.wk.noalias() += tl.a.transpose() * dk;
        gl.wv.noalias() += tl.a.transpose() * dv;
        MatrixXd da = dq * lw.wq.transpose() + dk * lw.wk.transpose() + dv * lw.wv.transpose();
        MatrixXd dx_in;
        rmsnorm_backward(tl.a_hat, tl.a_inv, lw.attn_norm, da, dx_in, gl.attn_norm);
        dx = dx_in + dx_mid;  // residual
    }

    for (int r = 0; r < s; ++r) grads.embed.row(tr.tokens[r]) += dx.row(r);
}

MatrixXd final_hidden_states(const Model& model, const std::vector<int>& tokens) {
    return forward_train(model, tokens).trace->f;
}

}  // namespace medk
