#include "medk/decode.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>

namespace medk {

Scheme scheme_from_string(const std::string& s) {
    if (s == "greedy") return Scheme::greedy;
    if (s == "typical") return Scheme::typical;
    if (s == "rejection") return Scheme::rejection;
    throw std::invalid_argument("unknown scheme: " + s);
}

std::string scheme_to_string(Scheme s) {
    switch (s) {
        case Scheme::greedy: return "greedy";
        case Scheme::typical: return "typical";
        case Scheme::rejection: return "rejection";
    }
    return "?";
}

AugTree augment_with_root(const TreeSpec& tree) {
    MaskSpec spec_mask = build_mask(tree);
    int n = tree.size();
    AugTree aug;
    aug.spec_nodes = n;
    aug.leaves = n == 0 ? 1 : tree.leaf_count();
    aug.mask.depth.assign(n + 1, 0);
    aug.mask.parent.assign(n + 1, 0);
    aug.mask.ancestor.assign(n + 1, std::vector<bool>(n + 1, false));
    aug.paths.resize(n + 1);
    aug.mask.depth[0] = 1;
    aug.mask.parent[0] = -1;
    aug.mask.ancestor[0][0] = true;
    for (int j = 0; j < n; ++j) {
        aug.mask.depth[j + 1] = spec_mask.depth[j] + 1;
        aug.mask.parent[j + 1] = spec_mask.parent[j] < 0 ? 0 : spec_mask.parent[j] + 1;
        aug.mask.ancestor[j + 1][0] = true;
        aug.mask.ancestor[j + 1][j + 1] = true;
        for (int c = 0; c < n; ++c)
            if (spec_mask.ancestor[j][c]) aug.mask.ancestor[j + 1][c + 1] = true;
        aug.paths[j + 1] = tree.paths[j];
    }
    return aug;
}

CandidateSet generate_candidates(const LogitsBundle& bundle_at_last, const AugTree& aug,
                                 Scheme scheme, double temperature, Rng& rng) {
    const MatrixXd& scores = bundle_at_last.scores.back();
    const MatrixXd& probs = bundle_at_last.probs.back();
    int heads_avail = static_cast<int>(scores.rows()) - 1;

    CandidateSet cs;
    if (scheme == Scheme::greedy || temperature <= 0.0) {
        cs.step0 = argmax_token(probs.row(0).transpose());
    } else {
        cs.step0 = rng.categorical(probs_from_scores(scores.row(0).transpose(), temperature));
    }
    cs.tokens.assign(aug.paths.size(), cs.step0);

    // Rank lists are shared per head; ordering is temperature-invariant.
    int max_rank_needed = 0;
    int max_depth = 0;
    for (const auto& p : aug.paths) {
        for (int r : p) max_rank_needed = std::max(max_rank_needed, r);
        max_depth = std::max(max_depth, static_cast<int>(p.size()));
    }
    if (max_depth > heads_avail) throw std::invalid_argument("tree depth exceeds head count");
    std::vector<std::vector<int>> ranks(max_depth + 1);
    for (int k = 1; k <= max_depth; ++k)
        ranks[k] = ranked_tokens(probs.row(k).transpose(), max_rank_needed);

    for (size_t slot = 1; slot < aug.paths.size(); ++slot) {
        const auto& path = aug.paths[slot];
        int k = static_cast<int>(path.size());
        int rank = path.back();
        if (rank > static_cast<int>(ranks[k].size()))
            throw std::invalid_argument("tree rank exceeds vocab size");
        cs.tokens[slot] = ranks[k][rank - 1];
    }
    return cs;
}

namespace {

// Walks the augmented tree accepting slot 0 unconditionally and every further
// node whose parent was accepted and whose token satisfies `passes`. Returns
// the root path to the deepest accepted node (first in node order on ties).
template <typename Predicate>
std::vector<int> accept_walk(const AugTree& aug, Predicate&& passes) {
    int n = static_cast<int>(aug.mask.depth.size());
    std::vector<bool> ok(n, false);
    ok[0] = true;
    int best = 0;
    for (int j = 1; j < n; ++j) {
        int parent = aug.mask.parent[j];
        if (!ok[parent]) continue;
        if (!passes(parent, j)) continue;
        ok[j] = true;
        if (aug.mask.depth[j] > aug.mask.depth[best]) best = j;
    }
    std::vector<int> path;
    for (int j = best; j >= 0; j = aug.mask.parent[j]) path.push_back(j);
    std::reverse(path.begin(), path.end());
    return path;
}

}  // namespace

std::vector<int> verify_greedy(const LogitsBundle& outputs, const std::vector<int>& tokens,
                               const AugTree& aug) {
    return accept_walk(aug, [&](int parent, int j) {
        return tokens[j] == argmax_token(outputs.probs[parent].row(0).transpose());
    });
}

double typical_threshold(const VectorXd& raw_scores, double temperature, double epsilon,
                         double delta) {
    VectorXd p = probs_from_scores(raw_scores, temperature);
    return std::min(epsilon, delta * std::exp(-entropy(p)));
}

bool typical_passes(const VectorXd& raw_scores, int token, double temperature, double epsilon,
                    double delta) {
    VectorXd p = probs_from_scores(raw_scores, temperature);
    return p[token] > std::min(epsilon, delta * std::exp(-entropy(p)));
}

std::vector<int> verify_typical(const LogitsBundle& outputs, const std::vector<int>& tokens,
                                const AugTree& aug, double temperature, double epsilon,
                                double delta) {
    return accept_walk(aug, [&](int parent, int j) {
        return typical_passes(outputs.scores[parent].row(0).transpose(), tokens[j], temperature,
                              epsilon, delta);
    });
}

int typical_accept_length(const StepRecord& rec, double temperature, double epsilon,
                          double delta) {
    int n = static_cast<int>(rec.tokens.size());
    std::vector<bool> ok(n, false);
    ok[0] = true;
    int best_depth = 1;
    for (int j = 1; j < n; ++j) {
        int parent = rec.parent[j];
        if (!ok[parent]) continue;
        if (!typical_passes(rec.scores0[parent], rec.tokens[j], temperature, epsilon, delta))
            continue;
        ok[j] = true;
        best_depth = std::max(best_depth, rec.depth[j]);
    }
    return best_depth;
}

RejectionResult verify_rejection(const LogitsBundle& outputs, const std::vector<int>& drafts,
                                 const std::vector<VectorXd>& draft_dists, double temperature,
                                 Rng& rng) {
    RejectionResult res;
    for (size_t k = 0; k < drafts.size(); ++k) {
        // Backbone distribution at the draft's parent (slot k of the chain).
        VectorXd p = probs_from_scores(outputs.scores[k].row(0).transpose(), temperature);
        const VectorXd& q = draft_dists[k];
        int x = drafts[k];
        double ratio = q[x] > 0.0 ? p[x] / q[x] : 0.0;
        if (rng.uniform() < std::min(1.0, ratio)) {
            res.accepted_drafts += 1;
            continue;
        }
        VectorXd residual = (p - q).cwiseMax(0.0);
        double mass = residual.sum();
        if (mass <= 0.0) {
            res.corrected = rng.categorical(p);  // p == q up to rounding
        } else {
            res.corrected = rng.categorical(VectorXd(residual / mass));
        }
        return res;
    }
    return res;
}

namespace {

std::string path_string(const std::vector<int>& ranks) {
    if (ranks.empty()) return "root";
    std::string out;
    for (size_t i = 0; i < ranks.size(); ++i) {
        if (i) out.push_back('-');
        out += std::to_string(ranks[i]);
    }
    return out;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

DecodeResult decode(const Model& model, const std::vector<int>& prompt, const DecodeConfig& cfg) {
    if (prompt.empty()) throw std::invalid_argument("prompt must be non-empty");
    if (cfg.tree.size() == 0) throw std::invalid_argument("decode needs a candidate tree");
    if (cfg.tree.depth() > model.cfg.num_medusa_heads)
        throw std::invalid_argument("tree depth exceeds model head count");

    // typical/rejection at T <= 0 degenerate to greedy verification
    Scheme scheme = cfg.scheme;
    if (scheme != Scheme::greedy && cfg.temperature <= 0.0) scheme = Scheme::greedy;

    AugTree aug;
    if (scheme == Scheme::rejection) {
        // One sampled path: a chain as deep as the configured tree.
        std::vector<std::vector<int>> chain;
        std::vector<int> p;
        for (int k = 1; k <= cfg.tree.depth(); ++k) {
            p.push_back(1);
            chain.push_back(p);
        }
        aug = augment_with_root(TreeSpec::from_paths(std::move(chain)));
    } else {
        aug = augment_with_root(cfg.tree);
    }
    int slots = static_cast<int>(aug.mask.depth.size());

    DecodeResult out;
    Rng rng(cfg.rng_seed);
    auto [bundle, cache] = forward_prefill(model, prompt);

    std::optional<int> forced_step0;
    auto t_loop = std::chrono::steady_clock::now();
    while (static_cast<long>(out.tokens.size()) < cfg.max_new_tokens) {
        if (cache.committed + slots > model.cfg.max_seq_len) break;

        // (1) candidates from the previous pass's logits
        CandidateSet cs;
        std::vector<VectorXd> draft_dists;
        if (scheme == Scheme::rejection) {
            const MatrixXd& scores = bundle.scores.back();
            cs.tokens.assign(slots, 0);
            cs.step0 = forced_step0 ? *forced_step0
                                    : rng.categorical(probs_from_scores(scores.row(0).transpose(),
                                                                        cfg.temperature));
            cs.tokens[0] = cs.step0;
            for (int k = 1; k < slots; ++k) {
                VectorXd q = probs_from_scores(scores.row(k).transpose(), cfg.temperature);
                cs.tokens[k] = rng.categorical(q);
                draft_dists.push_back(std::move(q));
            }
        } else {
            cs = generate_candidates(bundle, aug, scheme, cfg.temperature, rng);
            if (forced_step0) {
                cs.step0 = *forced_step0;
                cs.tokens[0] = cs.step0;
            }
        }
        forced_step0.reset();

        // (2) one tree-attention pass verifies every candidate
        LogitsBundle outputs = forward_tree(model, cache, cs.tokens, aug.mask);

        if (cfg.collect_step_records) {
            StepRecord rec;
            rec.tokens = cs.tokens;
            rec.depth = aug.mask.depth;
            rec.parent = aug.mask.parent;
            for (int j = 0; j < slots; ++j) rec.scores0.push_back(outputs.scores[j].row(0).transpose());
            out.step_records.push_back(std::move(rec));
        }

        // (3) accept the longest valid prefix
        std::vector<int> path;
        if (scheme == Scheme::greedy) {
            path = verify_greedy(outputs, cs.tokens, aug);
        } else if (scheme == Scheme::typical) {
            path = verify_typical(outputs, cs.tokens, aug, cfg.temperature, cfg.epsilon, cfg.delta);
        } else {
            std::vector<int> drafts(cs.tokens.begin() + 1, cs.tokens.end());
            RejectionResult rr = verify_rejection(outputs, drafts, draft_dists, cfg.temperature, rng);
            path.resize(rr.accepted_drafts + 1);
            for (int j = 0; j <= rr.accepted_drafts; ++j) path[j] = j;
            forced_step0 = rr.corrected;
        }

        commit_accepted(cache, path);
        out.metrics.steps += 1;

        bool stop = false;
        int appended = 0;
        for (int slot : path) {
            out.tokens.push_back(cs.tokens[slot]);
            ++appended;
            if (cs.tokens[slot] == kSentinelToken ||
                static_cast<long>(out.tokens.size()) >= cfg.max_new_tokens) {
                stop = true;
                break;
            }
        }
        if (cfg.collect_trace) {
            out.trace.push_back({out.metrics.steps, appended, aug.leaves,
                                 path_string(aug.paths[path.back()])});
        }
        if (stop) break;

        // reuse the verified logits at the deepest accepted node for step (1)
        LogitsBundle next;
        next.scores.push_back(outputs.scores[path.back()]);
        next.probs.push_back(outputs.probs[path.back()]);
        bundle = std::move(next);
    }
    double loop_seconds = seconds_since(t_loop);

    out.metrics.tokens_generated = static_cast<long>(out.tokens.size());
    if (out.metrics.steps > 0) {
        out.metrics.acceleration_rate =
            static_cast<double>(out.metrics.tokens_generated) / out.metrics.steps;
        out.metrics.mean_step_latency = loop_seconds / static_cast<double>(out.metrics.steps);
    }

    if (cfg.measure_overhead && out.metrics.tokens_generated > 0) {
        Rng vrng(cfg.rng_seed);
        auto t0 = std::chrono::steady_clock::now();
        std::vector<int> vten = vanilla_generate(
            model, prompt, scheme == Scheme::greedy ? 0.0 : cfg.temperature,
            static_cast<int>(out.metrics.tokens_generated), vrng);
        double vseconds = seconds_since(t0);
        long vsteps = static_cast<long>(vten.size());
        if (vsteps > 0 && vseconds > 0.0 && out.metrics.mean_step_latency > 0.0) {
            out.metrics.vanilla_step_latency = vseconds / static_cast<double>(vsteps);
            out.metrics.overhead = out.metrics.mean_step_latency / out.metrics.vanilla_step_latency;
            out.metrics.speedup = out.metrics.acceleration_rate / out.metrics.overhead;
        }
    }
    return out;
}

std::vector<BenchRow> bench(const Model& model, const std::vector<std::vector<int>>& prompts,
                            const DecodeConfig& cfg) {
    std::vector<BenchRow> rows;
    for (size_t i = 0; i < prompts.size(); ++i) {
        DecodeConfig c = cfg;
        c.measure_overhead = true;
        DecodeResult r = decode(model, prompts[i], c);
        bool match = true;
        if (cfg.scheme == Scheme::greedy || cfg.temperature <= 0.0) {
            Rng vrng(cfg.rng_seed);
            std::vector<int> v = vanilla_generate(model, prompts[i], 0.0,
                                                  static_cast<int>(r.metrics.tokens_generated), vrng);
            match = v == r.tokens;
        }
        rows.push_back({std::to_string(cfg.tree.size()) + "n", static_cast<int>(i),
                        r.metrics.tokens_generated, r.metrics.steps, r.metrics.acceleration_rate,
                        r.metrics.overhead, r.metrics.speedup, match});
    }
    return rows;
}

std::string bench_to_csv(const std::vector<BenchRow>& rows) {
    std::ostringstream out;
    out << "tree,prompt,tokens,steps,acceleration_rate,overhead,speedup,matches_baseline\n";
    out.precision(12);
    for (const auto& r : rows)
        out << r.tree << "," << r.prompt_id << "," << r.tokens << "," << r.steps << ","
            << r.acceleration_rate << "," << r.overhead << "," << r.speedup << ","
            << (r.matches_baseline ? 1 : 0) << "\n";
    return out.str();
}

std::string trace_to_csv(const std::vector<TraceRow>& rows) {
    std::ostringstream out;
    out << "step,accepted_len,candidate_count,chosen_path\n";
    for (const auto& r : rows)
        out << r.step << "," << r.accepted_len << "," << r.candidate_count << "," << r.chosen_path
            << "\n";
    return out.str();
}

}  // namespace medk
