#include "mipo/ontology.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace mipo::ontology {

namespace {
std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
        if (tab == std::string::npos) break;
        start = tab + 1;
    }
    return fields;
}
}  // namespace

OntologyGraph OntologyGraph::from_entries(std::vector<Entry> entries) {
    OntologyGraph g;
    std::unordered_map<std::string, std::size_t> position;
    std::vector<std::size_t> roots;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const Entry& e = entries[i];
        if (e.id.empty() || e.parent.empty()) {
            throw OntologyError(OntologyErrorKind::kMalformedLine, "entry " + std::to_string(i + 1) + " has an empty id or parent");
        }
        auto [it, inserted] = position.emplace(e.id, i);
        if (!inserted) {
            throw OntologyError(OntologyErrorKind::kMultipleParents,
                                "node '" + e.id + "' has multiple parents ('" + entries[it->second].parent + "' and '" +
                                    e.parent + "')");
        }
        if (e.parent == kRootParent) roots.push_back(i);
    }
    if (roots.empty()) throw OntologyError(OntologyErrorKind::kMissingRoot, "ontology has no root (parent '-')");
    if (roots.size() > 1) {
        throw OntologyError(OntologyErrorKind::kMultipleRoots,
                            "ontology has several roots: '" + entries[roots[0]].id + "' and '" + entries[roots[1]].id + "'");
    }

    std::vector<std::optional<std::size_t>> parent_pos(entries.size());
    std::vector<std::size_t> child_count(entries.size(), 0);
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (i == roots[0]) continue;
        auto it = position.find(entries[i].parent);
        if (it == position.end()) {
            throw OntologyError(OntologyErrorKind::kOrphan,
                                "node '" + entries[i].id + "' names unknown parent '" + entries[i].parent + "'");
        }
        parent_pos[i] = it->second;
        ++child_count[it->second];
    }

    // Every node must reach the root within |entries| steps.
    std::vector<std::optional<std::size_t>> level(entries.size());
    level[roots[0]] = 0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        std::vector<std::size_t> chain;
        std::size_t cur = i;
        while (!level[cur]) {
            chain.push_back(cur);
            if (chain.size() > entries.size()) {
                throw OntologyError(OntologyErrorKind::kCycle, "cycle through node '" + entries[i].id + "'");
            }
            cur = *parent_pos[cur];
        }
        std::size_t lv = *level[cur];
        for (auto it = chain.rbegin(); it != chain.rend(); ++it) level[*it] = ++lv;
    }

    if (child_count[roots[0]] == 0) {
        throw OntologyError(OntologyErrorKind::kMalformedLine, "ontology root has no children");
    }

    std::vector<NodeIndex> index_of_pos(entries.size());
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < entries.size(); ++i)
        if (child_count[i] == 0) order.push_back(i);
    g.num_leaves_ = order.size();
    for (std::size_t i = 0; i < entries.size(); ++i)
        if (child_count[i] != 0) order.push_back(i);
    for (std::size_t k = 0; k < order.size(); ++k) index_of_pos[order[k]] = k;

    g.nodes_.resize(entries.size());
    for (std::size_t k = 0; k < order.size(); ++k) {
        const std::size_t pos = order[k];
        Node& n = g.nodes_[k];
        n.id = entries[pos].id;
        n.label = entries[pos].label;
        n.level = *level[pos];
        if (parent_pos[pos]) n.parent = index_of_pos[*parent_pos[pos]];
        g.by_id_.emplace(n.id, k);
    }
    g.root_ = index_of_pos[roots[0]];

    for (NodeIndex k = g.num_leaves_; k < g.nodes_.size(); ++k)
        if (g.nodes_[k].parent == g.root_) g.typing_nodes_.push_back(k);

    g.paths_.resize(g.num_leaves_);
    g.category_.resize(g.num_leaves_);
    for (NodeIndex leaf = 0; leaf < g.num_leaves_; ++leaf) {
        auto& path = g.paths_[leaf];
        for (std::optional<NodeIndex> cur = leaf; cur; cur = g.nodes_[*cur].parent) path.push_back(*cur);
        g.depth_ = std::max(g.depth_, g.nodes_[leaf].level);
        if (path.size() >= 3) {
            const NodeIndex cat = path[path.size() - 2];
            auto it = std::find(g.typing_nodes_.begin(), g.typing_nodes_.end(), cat);
            g.category_[leaf] = static_cast<std::size_t>(it - g.typing_nodes_.begin());
        }
    }
    g.entries_ = std::move(entries);
    return g;
}

OntologyGraph OntologyGraph::parse(std::istream& in) {
    std::vector<Entry> entries;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto fields = split_tabs(line);
        if (fields.size() != 3) {
            throw OntologyError(OntologyErrorKind::kMalformedLine,
                                "line " + std::to_string(lineno) + ": expected 3 tab-separated fields, got " +
                                    std::to_string(fields.size()));
        }
        entries.push_back({std::move(fields[0]), std::move(fields[1]), std::move(fields[2])});
    }
    return from_entries(std::move(entries));
}

OntologyGraph OntologyGraph::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open ontology file '" + path + "'");
    return parse(in);
}

void OntologyGraph::save(std::ostream& out) const {
    for (const Entry& e : entries_) out << e.id << '\t' << e.parent << '\t' << e.label << '\n';
}

void OntologyGraph::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write ontology file '" + path + "'");
    save(out);
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

std::optional<NodeIndex> OntologyGraph::index_of(const std::string& id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) return std::nullopt;
    return it->second;
}

void OntologyGraph::require_leaf(NodeIndex leaf, const char* op) const {
    if (leaf >= num_leaves_) {
        throw OntologyError(OntologyErrorKind::kNotALeaf,
                            std::string(op) + ": node index " + std::to_string(leaf) + " is not a leaf");
    }
}

std::span<const NodeIndex> OntologyGraph::ancestors_of(NodeIndex leaf) const {
    require_leaf(leaf, "ancestors_of");
    return paths_[leaf];
}

NodeIndex OntologyGraph::ancestor_at_level(NodeIndex leaf, std::size_t level) const {
    require_leaf(leaf, "ancestor_at_level");
    const std::size_t own = nodes_[leaf].level;
    if (level > own) {
        throw OntologyError(OntologyErrorKind::kBadLevel, "level " + std::to_string(level) + " is below leaf '" +
                                                               nodes_[leaf].id + "' at level " + std::to_string(own));
    }
    return paths_[leaf][own - level];
}

std::size_t OntologyGraph::typing_category(NodeIndex leaf) const {
    require_leaf(leaf, "typing_category");
    if (!category_[leaf]) {
        throw OntologyError(OntologyErrorKind::kNoTypingAncestor,
                            "leaf '" + nodes_[leaf].id + "' has no category node between it and the root");
    }
    return *category_[leaf];
}

// --- embeddings -------------------------------------------------------------

OntologyEmbedding OntologyEmbedding::init(const OntologyGraph& graph, std::size_t d, std::size_t hidden,
                                          std::mt19937_64& rng) {
    OntologyEmbedding emb;
    emb.basic = ad::Tensor::uniform({graph.num_nodes(), d}, -0.1, 0.1, rng, true);
    const double a = 1.0 / std::sqrt(static_cast<double>(2 * d));
    const double b = 1.0 / std::sqrt(static_cast<double>(hidden));
    emb.attention.W = ad::Tensor::uniform({hidden, 2 * d}, -a, a, rng, true);
    emb.attention.b = ad::Tensor::zeros({hidden}, true);
    emb.attention.w = ad::Tensor::uniform({hidden}, -b, b, rng, true);
    return emb;
}

namespace {
// Scores for rows of `pairs` ([k x 2d]) as a [k x 1] column.
ad::Tensor score_pairs(const ad::Tensor& pairs, const AttentionParams& p) {
    const std::size_t hidden = p.W.dim(0);
    ad::Tensor h = ad::tanh(ad::add(ad::matmul(pairs, ad::transpose(p.W)), p.b));
    return ad::matmul(h, ad::reshape(p.w, {hidden, 1}));
}

struct PathLayout {
    std::size_t width = 0;
    std::vector<std::int64_t> slots;  // [leaves x width], -1 past the path end
    ad::Mask mask;
};

PathLayout layout_paths(const OntologyGraph& graph) {
    PathLayout lay;
    for (NodeIndex leaf = 0; leaf < graph.num_leaves(); ++leaf)
        lay.width = std::max(lay.width, graph.ancestors_of(leaf).size());
    lay.slots.assign(graph.num_leaves() * lay.width, -1);
    lay.mask.assign(lay.slots.size(), 0);
    for (NodeIndex leaf = 0; leaf < graph.num_leaves(); ++leaf) {
        auto path = graph.ancestors_of(leaf);
        for (std::size_t l = 0; l < path.size(); ++l) {
            lay.slots[leaf * lay.width + l] = static_cast<std::int64_t>(path[l]);
            lay.mask[leaf * lay.width + l] = 1;
        }
    }
    return lay;
}
}  // namespace

ad::Tensor compatibility(const ad::Tensor& child, const ad::Tensor& ancestor, const AttentionParams& params) {
    if (child.size() != ancestor.size()) {
        throw ad::ShapeError("compatibility: embedding sizes differ: " + ad::to_string(child.shape()) + " vs " +
                             ad::to_string(ancestor.shape()));
    }
    if (params.W.dim(1) != 2 * child.size()) {
        throw ad::ShapeError("compatibility: W_alpha " + ad::to_string(params.W.shape()) + " does not accept 2 x " +
                             std::to_string(child.size()) + " inputs");
    }
    const std::size_t d = child.size();
    ad::Tensor pair = ad::concat_last_axis({ad::reshape(child, {1, d}), ad::reshape(ancestor, {1, d})});
    return ad::reshape(score_pairs(pair, params), {1});
}

ad::Tensor attention_matrix(const OntologyGraph& graph, const OntologyEmbedding& emb) {
    const PathLayout lay = layout_paths(graph);
    std::vector<std::int64_t> child_idx;
    std::vector<std::int64_t> anc_idx;
    // Every (leaf, path slot) pair including padding; padded slots reuse row 0
    // and are masked out of the softmax.
    for (NodeIndex leaf = 0; leaf < graph.num_leaves(); ++leaf)
        for (std::size_t l = 0; l < lay.width; ++l) {
            child_idx.push_back(static_cast<std::int64_t>(leaf));
            const std::int64_t slot = lay.slots[leaf * lay.width + l];
            anc_idx.push_back(slot < 0 ? 0 : slot);
        }
    ad::Tensor pairs = ad::concat_last_axis({ad::gather_rows(emb.basic, child_idx), ad::gather_rows(emb.basic, anc_idx)});
    ad::Tensor scores = ad::reshape(score_pairs(pairs, emb.attention), {graph.num_leaves(), lay.width});
    return ad::masked_softmax(scores, lay.mask);
}

std::vector<std::pair<NodeIndex, double>> attention_weights(const OntologyGraph& graph, NodeIndex leaf,
                                                            const OntologyEmbedding& emb) {
    auto path = graph.ancestors_of(leaf);
    std::vector<ad::Tensor> scores;
    ad::Tensor child = ad::gather_rows(emb.basic, std::vector<std::int64_t>{static_cast<std::int64_t>(leaf)});
    for (NodeIndex k : path) {
        ad::Tensor anc = ad::gather_rows(emb.basic, std::vector<std::int64_t>{static_cast<std::int64_t>(k)});
        scores.push_back(compatibility(child, anc, emb.attention));
    }
    ad::Tensor alpha = ad::softmax(ad::concat_last_axis(scores), 0);
    std::vector<std::pair<NodeIndex, double>> out;
    for (std::size_t l = 0; l < path.size(); ++l) out.emplace_back(path[l], alpha[l]);
    return out;
}

ad::Tensor compute_G(const OntologyGraph& graph, const OntologyEmbedding& emb) {
    if (emb.basic.dim(0) != graph.num_nodes()) {
        throw ad::ShapeError("compute_G: E has " + std::to_string(emb.basic.dim(0)) + " rows, ontology has " +
                             std::to_string(graph.num_nodes()) + " nodes");
    }
    const PathLayout lay = layout_paths(graph);
    return ad::weighted_gather(emb.basic, lay.slots, attention_matrix(graph, emb));
}

}  // namespace mipo::ontology
