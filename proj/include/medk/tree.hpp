#pragma once

#include <string>
#include <vector>

#include "medk/common.hpp"

namespace medk {

struct Model;

// Candidate tree: a prefix-closed set of rank paths. A path (i1,...,ik) names
// the candidate built from the rank-i1 prediction of head 1, then rank-i2 of
// head 2, and so on. Ranks are 1-based. Nodes are kept in canonical order:
// breadth-first, then lexicographic by ranks.
struct TreeSpec {
    std::vector<std::vector<int>> paths;

    int size() const { return static_cast<int>(paths.size()); }
    int depth() const;
    int leaf_count() const;

    // Index of the node with the given path, or -1.
    int find(const std::vector<int>& path) const;

    // Parent node index per node (-1 for depth-1 nodes).
    std::vector<int> parents() const;

    // Canonicalizes order and validates prefix closure / uniqueness / ranks.
    static TreeSpec from_paths(std::vector<std::vector<int>> paths);
};

// Per-head, per-rank marginal accuracies a[k][i]: probability that the
// ground-truth token k+1 positions ahead is exactly the rank-i prediction of
// head k. Rows sum to at most 1.
struct AccuracyTable {
    MatrixXd a;  // num_heads x max_rank

    int num_heads() const { return static_cast<int>(a.rows()); }
    int max_rank() const { return static_cast<int>(a.cols()); }
    double at(int head, int rank) const { return a(head - 1, rank - 1); }  // 1-based

    void validate() const;
};

// Attention structure of a candidate tree: ancestor[r][c] is true iff node c
// is an ancestor of node r or c == r.
struct MaskSpec {
    std::vector<std::vector<bool>> ancestor;
    std::vector<int> depth;   // depth-1 nodes hang off the virtual root
    std::vector<int> parent;  // -1 for depth-1 nodes

    int size() const { return static_cast<int>(depth.size()); }
};

// Full Cartesian tree over per-level branching factors s = (s1,...,sK).
// Node count is sum over k of prod_{i<=k} s_i.
TreeSpec dense_tree(const std::vector<int>& s);

// Sum of path products over all nodes, assuming per-head independence.
double expected_accept_length(const TreeSpec& tree, const AccuracyTable& acc);

// Grows a prefix-closed tree of exactly `budget` nodes by repeatedly adding
// the frontier node with the largest path product. Ties break toward the
// shallower node, then the lexicographically smaller rank path. Optimal
// because a child's product never exceeds its parent's.
TreeSpec greedy_sparse_tree(const AccuracyTable& acc, int budget);

MaskSpec build_mask(const TreeSpec& tree);

// A single chain of `len` nodes (degenerate tree = plain causal order).
MaskSpec chain_mask(int len);

// Empirical accuracy table measured on a token corpus: rank of the ground
// truth among each head's sorted predictions, counted up to s_max.
AccuracyTable calibrate(const Model& model, const std::vector<std::vector<int>>& corpus,
                        int s_max);

// --- file formats ---

// JSON array of rank-path arrays, e.g. [[1],[2],[1,1],[1,2]].
std::string tree_to_json(const TreeSpec& tree);
TreeSpec tree_from_json(const std::string& text);

// CSV "head,rank,accuracy" with a header line.
std::string accuracy_to_csv(const AccuracyTable& acc);
AccuracyTable accuracy_from_csv(const std::string& text);

}  // namespace medk
