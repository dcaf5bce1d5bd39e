#pragma once

// Medical ontology tree and graph-attention code embeddings.
//
// Node indices are contiguous: leaves occupy [0, num_leaves()) in file order,
// interior nodes (root included) follow in file order.

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mipo/autodiff.hpp"

namespace mipo::ontology {

using NodeIndex = std::size_t;

enum class OntologyErrorKind { kMalformedLine, kMultipleParents, kOrphan, kCycle, kMissingRoot, kMultipleRoots, kNotALeaf, kNoTypingAncestor, kBadLevel };

class OntologyError : public std::runtime_error {
  public:
    OntologyError(OntologyErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    OntologyErrorKind kind() const { return kind_; }

  private:
    OntologyErrorKind kind_;
};

struct Entry {
    std::string id;
    std::string parent;  // "-" for the root
    std::string label;
};

struct Node {
    std::string id;
    std::string label;
    std::optional<NodeIndex> parent;
    std::size_t level = 0;  // edges to the root
};

class OntologyGraph {
  public:
    static constexpr const char* kRootParent = "-";

    // Validates the parent links and assigns indices. Throws OntologyError.
    static OntologyGraph from_entries(std::vector<Entry> entries);
    static OntologyGraph parse(std::istream& in);
    static OntologyGraph load(const std::string& path);

    // Writes the entries back in their original order.
    void save(std::ostream& out) const;
    void save(const std::string& path) const;

    std::size_t num_leaves() const { return num_leaves_; }
    std::size_t num_ancestors() const { return nodes_.size() - num_leaves_; }
    std::size_t num_nodes() const { return nodes_.size(); }
    NodeIndex root() const { return root_; }
    const Node& node(NodeIndex i) const { return nodes_.at(i); }
    bool is_leaf(NodeIndex i) const { return i < num_leaves_; }
    std::optional<NodeIndex> index_of(const std::string& id) const;
    // Deepest leaf level.
    std::size_t depth() const { return depth_; }

    // [leaf, parent, ..., root].
    std::span<const NodeIndex> ancestors_of(NodeIndex leaf) const;
    // Ancestor of `leaf` whose level equals `level` (the leaf itself when
    // `level` is the leaf's own level).
    NodeIndex ancestor_at_level(NodeIndex leaf, std::size_t level) const;

    // Interior children of the root, in index order; their count is m.
    const std::vector<NodeIndex>& typing_level_nodes() const { return typing_nodes_; }
    std::size_t num_categories() const { return typing_nodes_.size(); }
    std::size_t typing_category(NodeIndex leaf) const;

  private:
    void require_leaf(NodeIndex leaf, const char* op) const;

    std::vector<Entry> entries_;
    std::vector<Node> nodes_;
    std::vector<std::vector<NodeIndex>> paths_;  // per leaf
    std::vector<std::optional<std::size_t>> category_;  // per leaf
    std::vector<NodeIndex> typing_nodes_;
    std::unordered_map<std::string, NodeIndex> by_id_;
    std::size_t num_leaves_ = 0;
    std::size_t depth_ = 0;
    NodeIndex root_ = 0;
};

// W_alpha maps the concatenated [child; ancestor] pair (2d) to the attention
// hidden width; w_alpha reduces it to a scalar score.
struct AttentionParams {
    ad::Tensor W;  // [hidden x 2d]
    ad::Tensor b;  // [hidden]
    ad::Tensor w;  // [hidden]
};

struct OntologyEmbedding {
    ad::Tensor basic;  // E: [num_nodes x d]
    AttentionParams attention;

    std::size_t dim() const { return basic.dim(1); }

    // E ~ U(-0.1, 0.1); attention weights ~ U(-a, a) with a = 1/sqrt(fan_in).
    static OntologyEmbedding init(const OntologyGraph& graph, std::size_t d, std::size_t hidden,
                                  std::mt19937_64& rng);
};

// w^T tanh(W [child; ancestor] + b) for one pair of d-vectors.
ad::Tensor compatibility(const ad::Tensor& child, const ad::Tensor& ancestor, const AttentionParams& params);

// Softmax of the compatibility scores over ancestors_of(leaf), as
// (node, weight) pairs in leaf-to-root order.
std::vector<std::pair<NodeIndex, double>> attention_weights(const OntologyGraph& graph, NodeIndex leaf,
                                                            const OntologyEmbedding& emb);

// Attention matrix [num_leaves x max_path] aligned with ancestors_of(); slots
// past a leaf's path length are 0. Differentiable.
ad::Tensor attention_matrix(const OntologyGraph& graph, const OntologyEmbedding& emb);

// G: [num_leaves x d], row i = sum over ancestors_of(i) of alpha_ij * E_j.
ad::Tensor compute_G(const OntologyGraph& graph, const OntologyEmbedding& emb);

}  // namespace mipo::ontology
