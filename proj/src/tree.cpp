#include "medk/tree.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "medk/model.hpp"

namespace medk {

namespace {

// Canonical node order: breadth-first, then lexicographic by ranks.
bool path_less(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size()) return a.size() < b.size();
    return a < b;
}

}  // namespace

int TreeSpec::depth() const {
    size_t d = 0;
    for (const auto& p : paths) d = std::max(d, p.size());
    return static_cast<int>(d);
}

int TreeSpec::leaf_count() const {
    std::set<std::vector<int>> inner;
    for (const auto& p : paths)
        if (p.size() > 1) inner.insert(std::vector<int>(p.begin(), p.end() - 1));
    int leaves = 0;
    for (const auto& p : paths)
        if (!inner.count(p)) ++leaves;
    return leaves;
}

int TreeSpec::find(const std::vector<int>& path) const {
    auto it = std::lower_bound(paths.begin(), paths.end(), path, path_less);
    if (it != paths.end() && *it == path) return static_cast<int>(it - paths.begin());
    return -1;
}

std::vector<int> TreeSpec::parents() const {
    std::vector<int> out(paths.size());
    for (size_t i = 0; i < paths.size(); ++i) {
        if (paths[i].size() == 1) {
            out[i] = -1;
        } else {
            std::vector<int> parent(paths[i].begin(), paths[i].end() - 1);
            out[i] = find(parent);
        }
    }
    return out;
}

TreeSpec TreeSpec::from_paths(std::vector<std::vector<int>> paths) {
    std::sort(paths.begin(), paths.end(), path_less);
    TreeSpec t;
    t.paths = std::move(paths);
    for (size_t i = 0; i < t.paths.size(); ++i) {
        const auto& p = t.paths[i];
        if (p.empty()) throw DataError("tree node with empty rank path");
        for (int r : p)
            if (r < 1) throw DataError("tree ranks are 1-based");
        if (i > 0 && t.paths[i - 1] == p) throw DataError("duplicate tree node");
        if (p.size() > 1) {
            std::vector<int> parent(p.begin(), p.end() - 1);
            if (t.find(parent) < 0) throw DataError("tree is not prefix-closed");
        }
    }
    return t;
}

void AccuracyTable::validate() const {
    for (int k = 0; k < a.rows(); ++k) {
        double row_sum = 0.0;
        for (int i = 0; i < a.cols(); ++i) {
            if (a(k, i) < 0.0) throw DataError("accuracy entries must be non-negative");
            row_sum += a(k, i);
        }
        if (row_sum > 1.0 + 1e-9) throw DataError("accuracy row sums must not exceed 1");
    }
}

TreeSpec dense_tree(const std::vector<int>& s) {
    if (s.empty()) throw std::invalid_argument("dense_tree needs at least one branching factor");
    for (int v : s)
        if (v < 1) throw std::invalid_argument("branching factors must be >= 1");
    std::vector<std::vector<int>> paths;
    std::vector<std::vector<int>> level = {{}};
    for (int k = 0; k < static_cast<int>(s.size()); ++k) {
        std::vector<std::vector<int>> next;
        for (const auto& prefix : level) {
            for (int r = 1; r <= s[k]; ++r) {
                std::vector<int> p = prefix;
                p.push_back(r);
                paths.push_back(p);
                next.push_back(std::move(p));
            }
        }
        level = std::move(next);
    }
    return TreeSpec::from_paths(std::move(paths));
}

namespace {

double path_product(const std::vector<int>& path, const AccuracyTable& acc) {
    if (static_cast<int>(path.size()) > acc.num_heads())
        throw std::out_of_range("tree deeper than calibrated heads");
    double v = 1.0;
    for (size_t j = 0; j < path.size(); ++j) {
        if (path[j] > acc.max_rank()) throw std::out_of_range("rank outside calibrated range");
        v *= acc.at(static_cast<int>(j) + 1, path[j]);
    }
    return v;
}

}  // namespace

double expected_accept_length(const TreeSpec& tree, const AccuracyTable& acc) {
    double total = 0.0;
    for (const auto& p : tree.paths) total += path_product(p, acc);
    return total;
}

TreeSpec greedy_sparse_tree(const AccuracyTable& acc, int budget) {
    if (budget < 1) throw std::invalid_argument("budget must be >= 1");
    acc.validate();
    int kmax = acc.num_heads(), smax = acc.max_rank();
    // Total candidate pool: sum over depth of smax^depth.
    double pool = 0.0, level = 1.0;
    for (int k = 0; k < kmax; ++k) {
        level *= smax;
        pool += level;
        if (pool > 1e15) break;
    }
    if (static_cast<double>(budget) > pool)
        throw std::invalid_argument("budget exceeds total candidate pool");

    struct Candidate {
        double value;
        std::vector<int> path;
    };
    auto better = [](const Candidate& a, const Candidate& b) {
        if (a.value != b.value) return a.value > b.value;
        return path_less(a.path, b.path);
    };
    std::vector<Candidate> frontier;
    auto push = [&](std::vector<int> path) {
        frontier.push_back({path_product(path, acc), std::move(path)});
        std::push_heap(frontier.begin(), frontier.end(),
                       [&](const Candidate& a, const Candidate& b) { return better(b, a); });
    };
    for (int r = 1; r <= smax; ++r) push({r});

    std::vector<std::vector<int>> chosen;
    while (static_cast<int>(chosen.size()) < budget) {
        std::pop_heap(frontier.begin(), frontier.end(),
                      [&](const Candidate& a, const Candidate& b) { return better(b, a); });
        Candidate best = std::move(frontier.back());
        frontier.pop_back();
        if (static_cast<int>(best.path.size()) < kmax) {
            for (int r = 1; r <= smax; ++r) {
                std::vector<int> child = best.path;
                child.push_back(r);
                push(std::move(child));
            }
        }
        chosen.push_back(std::move(best.path));
    }
    return TreeSpec::from_paths(std::move(chosen));
}

MaskSpec build_mask(const TreeSpec& tree) {
    int n = tree.size();
    MaskSpec mask;
    mask.depth.resize(n);
    mask.parent = tree.parents();
    mask.ancestor.assign(n, std::vector<bool>(n, false));
    for (int i = 0; i < n; ++i) {
        mask.depth[i] = static_cast<int>(tree.paths[i].size());
        mask.ancestor[i][i] = true;
        int p = mask.parent[i];
        if (p >= 0) {
            // ancestors of the parent are already transitively closed
            for (int c = 0; c < n; ++c)
                if (mask.ancestor[p][c]) mask.ancestor[i][c] = true;
        }
    }
    return mask;
}

MaskSpec chain_mask(int len) {
    MaskSpec mask;
    mask.depth.resize(len);
    mask.parent.resize(len);
    mask.ancestor.assign(len, std::vector<bool>(len, false));
    for (int i = 0; i < len; ++i) {
        mask.depth[i] = i + 1;
        mask.parent[i] = i - 1;
        for (int j = 0; j <= i; ++j) mask.ancestor[i][j] = true;
    }
    return mask;
}

AccuracyTable calibrate(const Model& model, const std::vector<std::vector<int>>& corpus,
                        int s_max) {
    int kk = model.cfg.num_medusa_heads;
    if (s_max < 1) throw std::invalid_argument("s_max must be >= 1");
    Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(kk, s_max);
    std::vector<long> totals(kk, 0);
    for (const auto& seq : corpus) {
        int s = static_cast<int>(seq.size());
        if (s < 2) continue;
        TrainForward fwd = forward_train(model, seq);
        for (int k = 1; k <= kk; ++k) {
            for (int t = 0; t + k + 1 <= s - 1; ++t) {
                int target = seq[t + k + 1];
                auto ranks = ranked_tokens(fwd.scores[k].row(t).transpose(), s_max);
                ++totals[k - 1];
                for (int i = 0; i < static_cast<int>(ranks.size()); ++i) {
                    if (ranks[i] == target) {
                        counts(k - 1, i) += 1.0;
                        break;
                    }
                }
            }
        }
    }
    for (int k = 0; k < kk; ++k)
        if (totals[k] == 0) throw DataError("calibration corpus too short for head depth");
    AccuracyTable acc;
    acc.a = counts;
    for (int k = 0; k < kk; ++k) acc.a.row(k) /= static_cast<double>(totals[k]);
    acc.validate();
    return acc;
}

std::string tree_to_json(const TreeSpec& tree) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& p : tree.paths) j.push_back(p);
    return j.dump();
}

TreeSpec tree_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("invalid tree json: ") + e.what());
    }
    if (!j.is_array()) throw DataError("tree json must be an array of rank paths");
    std::vector<std::vector<int>> paths;
    for (const auto& item : j) {
        if (!item.is_array()) throw DataError("tree json must be an array of rank paths");
        std::vector<int> p;
        for (const auto& r : item) {
            if (!r.is_number_integer()) throw DataError("tree ranks must be integers");
            p.push_back(r.get<int>());
        }
        paths.push_back(std::move(p));
    }
    return TreeSpec::from_paths(std::move(paths));
}

std::string accuracy_to_csv(const AccuracyTable& acc) {
    std::ostringstream out;
    out << "head,rank,accuracy\n";
    out.precision(17);
    for (int k = 1; k <= acc.num_heads(); ++k)
        for (int i = 1; i <= acc.max_rank(); ++i)
            out << k << "," << i << "," << acc.at(k, i) << "\n";
    return out.str();
}

AccuracyTable accuracy_from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line.rfind("head,rank,accuracy", 0) != 0)
        throw DataError("accuracy csv missing header");
    std::map<std::pair<int, int>, double> cells;
    int kmax = 0, imax = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string f1, f2, f3;
        if (!std::getline(row, f1, ',') || !std::getline(row, f2, ',') || !std::getline(row, f3))
            throw DataError("malformed accuracy csv row: " + line);
        int k, i;
        double v;
        try {
            k = std::stoi(f1);
            i = std::stoi(f2);
            v = std::stod(f3);
        } catch (const std::exception&) {
            throw DataError("malformed accuracy csv row: " + line);
        }
        if (k < 1 || i < 1) throw DataError("accuracy csv heads/ranks are 1-based");
        cells[{k, i}] = v;
        kmax = std::max(kmax, k);
        imax = std::max(imax, i);
    }
    if (kmax == 0) throw DataError("accuracy csv has no rows");
    AccuracyTable acc;
    acc.a = Eigen::MatrixXd::Zero(kmax, imax);
    for (const auto& [ki, v] : cells) acc.a(ki.first - 1, ki.second - 1) = v;
    acc.validate();
    return acc;
}

}  // namespace medk
