#include "mipo/ehrdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <unordered_set>

#include "json.hpp"

namespace mipo::ehr {

using nlohmann::json;
using ontology::OntologyGraph;

std::size_t Cohort::total_codes() const {
    std::size_t n = 0;
    for (const auto& j : journeys)
        for (const auto& v : j.visits) n += v.size();
    return n;
}

std::size_t Cohort::max_visits() const {
    std::size_t n = 0;
    for (const auto& j : journeys) n = std::max(n, j.visits.size());
    return n;
}

std::size_t Cohort::max_codes() const {
    std::size_t n = 0;
    for (const auto& j : journeys)
        for (const auto& v : j.visits) n = std::max(n, v.size());
    return n;
}

void validate(const Cohort& cohort, const OntologyGraph& graph) {
    std::unordered_set<std::string> ids;
    for (const auto& j : cohort.journeys) {
        if (!ids.insert(j.patient_id).second) throw DataError("duplicate patient_id '" + j.patient_id + "'");
        if (j.visits.size() < 2) {
            throw DataError("patient '" + j.patient_id + "' has " + std::to_string(j.visits.size()) +
                            " visit(s); at least two are required");
        }
        for (std::size_t t = 0; t < j.visits.size(); ++t) {
            const Visit& v = j.visits[t];
            if (v.empty()) throw DataError("patient '" + j.patient_id + "' visit " + std::to_string(t) + " is empty");
            std::unordered_set<NodeIndex> seen;
            for (NodeIndex c : v) {
                if (!graph.is_leaf(c)) {
                    throw DataError("patient '" + j.patient_id + "' visit " + std::to_string(t) + ": node " +
                                    std::to_string(c) + " is not an ontology leaf");
                }
                if (!seen.insert(c).second) {
                    throw DataError("patient '" + j.patient_id + "' visit " + std::to_string(t) + " repeats code '" +
                                    graph.node(c).id + "'");
                }
            }
        }
    }
}

Cohort read_cohort(std::istream& in, const OntologyGraph& graph) {
    Cohort cohort;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        const std::string where = "cohort line " + std::to_string(lineno);
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::parse_error& e) {
            throw DataError(where + ": " + e.what());
        }
        if (!rec.is_object() || !rec.contains("patient_id") || !rec["patient_id"].is_string() ||
            !rec.contains("visits") || !rec["visits"].is_array()) {
            throw DataError(where + ": expected {\"patient_id\": str, \"visits\": [[...], ...]}");
        }
        PatientJourney j;
        j.patient_id = rec["patient_id"].get<std::string>();
        for (const auto& visit : rec["visits"]) {
            if (!visit.is_array()) throw DataError(where + ": each visit must be an array of code ids");
            Visit v;
            for (const auto& code : visit) {
                if (!code.is_string()) throw DataError(where + ": code ids must be strings");
                const auto id = code.get<std::string>();
                auto idx = graph.index_of(id);
                if (!idx || !graph.is_leaf(*idx)) throw DataError(where + ": '" + id + "' is not an ontology leaf");
                v.push_back(*idx);
            }
            j.visits.push_back(std::move(v));
        }
        cohort.journeys.push_back(std::move(j));
    }
    validate(cohort, graph);
    return cohort;
}

Cohort read_cohort(const std::string& path, const OntologyGraph& graph) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open cohort file '" + path + "'");
    return read_cohort(in, graph);
}

void write_cohort(std::ostream& out, const Cohort& cohort, const OntologyGraph& graph) {
    for (const auto& j : cohort.journeys) {
        json visits = json::array();
        for (const auto& v : j.visits) {
            json codes = json::array();
            for (NodeIndex c : v) codes.push_back(graph.node(c).id);
            visits.push_back(std::move(codes));
        }
        json rec = {{"patient_id", j.patient_id}, {"visits", std::move(visits)}};
        out << rec.dump() << '\n';
    }
}

void write_cohort(const std::string& path, const Cohort& cohort, const OntologyGraph& graph) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write cohort file '" + path + "'");
    write_cohort(out, cohort, graph);
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

// --- synthetic generation ---------------------------------------------------

OntologyGraph generate_ontology(const OntologySpec& spec) {
    if (spec.categories < 1 || spec.branching < 1) throw DataError("ontology needs at least one category and branching >= 1");
    if (spec.depth < 2) throw DataError("ontology depth must be >= 2, got " + std::to_string(spec.depth));
    std::vector<ontology::Entry> entries;
    entries.push_back({"root", OntologyGraph::kRootParent, "root"});
    std::vector<std::string> frontier;
    char buf[32];
    for (std::size_t c = 0; c < spec.categories; ++c) {
        std::snprintf(buf, sizeof buf, "CAT%02zu", c + 1);
        entries.push_back({buf, "root", std::string("category ") + buf});
        frontier.emplace_back(buf);
    }
    for (std::size_t level = 2; level <= spec.depth; ++level) {
        std::vector<std::string> next;
        const char* kind = level == spec.depth ? "code " : "group ";
        for (const auto& parent : frontier)
            for (std::size_t k = 0; k < spec.branching; ++k) {
                std::string id = parent + "." + std::to_string(k + 1);
                entries.push_back({id, parent, kind + id});
                next.push_back(std::move(id));
            }
        frontier = std::move(next);
    }
    return OntologyGraph::from_entries(std::move(entries));
}

std::pair<OntologyGraph, Cohort> generate_cohort(const SynthConfig& cfg) {
    if (cfg.patients < 1) throw DataError("patients must be >= 1");
    if (cfg.mean_visits < 2.0) throw DataError("mean_visits must be >= 2");
    if (cfg.max_visits < 2) throw DataError("max_visits must be >= 2");
    if (cfg.min_codes < 1 || cfg.min_codes > cfg.max_codes) throw DataError("need 1 <= min_codes <= max_codes");
    if (!(cfg.transition_noise >= 0.0 && cfg.transition_noise <= 1.0)) throw DataError("transition_noise must lie in [0, 1]");

    OntologyGraph graph = generate_ontology(cfg.ontology);
    const std::size_t m = graph.num_categories();
    const std::size_t leaves = graph.num_leaves();
    if (cfg.min_codes > leaves) throw DataError("min_codes exceeds the number of ontology leaves");

    std::mt19937_64 rng(cfg.seed);

    // Category transition table: two successors per category.
    std::vector<std::vector<std::size_t>> successors(m);
    std::vector<std::discrete_distribution<std::size_t>> step(m);
    std::uniform_int_distribution<std::size_t> any_category(0, m - 1);
    std::uniform_real_distribution<double> major(0.6, 0.9);
    for (std::size_t c = 0; c < m; ++c) {
        const std::size_t first = any_category(rng);
        std::size_t second = any_category(rng);
        if (m > 1)
            while (second == first) second = any_category(rng);
        successors[c] = {first, second};
        const double w = major(rng);
        step[c] = std::discrete_distribution<std::size_t>({w, 1.0 - w});
    }

    // Skewed leaf preference inside each category.
    std::vector<std::vector<NodeIndex>> members(m);
    for (NodeIndex leaf = 0; leaf < leaves; ++leaf) members[graph.typing_category(leaf)].push_back(leaf);
    std::vector<std::discrete_distribution<std::size_t>> pick(m);
    for (std::size_t c = 0; c < m; ++c) {
        std::shuffle(members[c].begin(), members[c].end(), rng);
        std::vector<double> w(members[c].size());
        for (std::size_t r = 0; r < w.size(); ++r) w[r] = 1.0 / static_cast<double>(r + 1);
        pick[c] = std::discrete_distribution<std::size_t>(w.begin(), w.end());
    }

    std::poisson_distribution<int> extra_visits(cfg.mean_visits > 2.0 ? cfg.mean_visits - 2.0 : 1.0);  // only sampled when mean > 2
    std::uniform_int_distribution<std::size_t> code_count(cfg.min_codes, cfg.max_codes);
    std::uniform_int_distribution<NodeIndex> any_leaf(0, leaves - 1);
    std::bernoulli_distribution noisy(cfg.transition_noise);
    std::bernoulli_distribution two_active(0.5);

    Cohort cohort;
    char buf[32];
    for (std::size_t p = 0; p < cfg.patients; ++p) {
        PatientJourney j;
        std::snprintf(buf, sizeof buf, "P%06zu", p + 1);
        j.patient_id = buf;
        const int extra = cfg.mean_visits > 2.0 ? extra_visits(rng) : 0;
        const std::size_t visits = std::min<std::size_t>(cfg.max_visits, 2 + static_cast<std::size_t>(extra));

        std::vector<std::size_t> active{any_category(rng)};
        if (m > 1 && two_active(rng)) {
            std::size_t other = any_category(rng);
            while (other == active[0]) other = any_category(rng);
            active.push_back(other);
        }
        for (std::size_t t = 0; t < visits; ++t) {
            const std::size_t want = std::min(code_count(rng), leaves);
            std::uniform_int_distribution<std::size_t> which_active(0, active.size() - 1);
            Visit v;
            std::unordered_set<NodeIndex> seen;
            for (std::size_t attempt = 0; v.size() < want && attempt < 100 * want; ++attempt) {
                NodeIndex code;
                if (noisy(rng)) {
                    code = any_leaf(rng);
                } else {
                    const std::size_t c = active[which_active(rng)];
                    code = members[c][pick[c](rng)];
                }
                if (seen.insert(code).second) v.push_back(code);
            }
            j.visits.push_back(std::move(v));

            std::vector<std::size_t> next;
            for (std::size_t c : active) {
                const std::size_t s = successors[c][step[c](rng)];
                if (std::find(next.begin(), next.end(), s) == next.end()) next.push_back(s);
            }
            active = std::move(next);
        }
        cohort.journeys.push_back(std::move(j));
    }
    return {std::move(graph), std::move(cohort)};
}

// --- targets ------------------------------------------------------------------

std::size_t Grouping::group(NodeIndex leaf) const {
    if (leaf >= group_of_leaf.size()) {
        throw DataError("code index " + std::to_string(leaf) + " is not in the label grouping");
    }
    return group_of_leaf[leaf];
}

Grouping build_grouped_labels(const OntologyGraph& graph, std::size_t level) {
    if (level < 1 || level > graph.depth()) {
        throw ontology::OntologyError(ontology::OntologyErrorKind::kBadLevel,
                                      "grouping level " + std::to_string(level) + " outside [1, " +
                                          std::to_string(graph.depth()) + "]");
    }
    std::vector<NodeIndex> target(graph.num_leaves());
    for (NodeIndex leaf = 0; leaf < graph.num_leaves(); ++leaf) {
        const std::size_t own = graph.node(leaf).level;
        target[leaf] = own < level ? leaf : graph.ancestor_at_level(leaf, level);
    }
    Grouping g;
    g.level = level;
    g.group_nodes = target;
    std::sort(g.group_nodes.begin(), g.group_nodes.end());
    g.group_nodes.erase(std::unique(g.group_nodes.begin(), g.group_nodes.end()), g.group_nodes.end());
    g.group_of_leaf.resize(graph.num_leaves());
    for (NodeIndex leaf = 0; leaf < graph.num_leaves(); ++leaf) {
        auto it = std::lower_bound(g.group_nodes.begin(), g.group_nodes.end(), target[leaf]);
        g.group_of_leaf[leaf] = static_cast<std::size_t>(it - g.group_nodes.begin());
    }
    return g;
}

std::size_t Batch::valid_steps() const {
    std::size_t n = 0;
    for (std::size_t b = 0; b < batch_size; ++b)
        for (std::size_t t = 0; t < steps(); ++t) n += step_valid(b, t);
    return n;
}

std::size_t Batch::valid_typing_codes() const {
    std::size_t n = 0;
    for (std::size_t b = 0; b < batch_size; ++b)
        for (std::size_t t = 0; t < steps(); ++t) {
            if (!step_valid(b, t)) continue;
            for (std::size_t i = 0; i < max_codes; ++i) n += code_mask[code_offset(b, t) + i] != 0;
        }
    return n;
}

std::vector<Batch> make_batches(const Cohort& cohort, const OntologyGraph& graph, const Grouping& grouping,
                                std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed) {
    if (batch_size < 1) throw DataError("batch_size must be >= 1");
    std::vector<std::size_t> order(cohort.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (shuffle_seed) {
        std::mt19937_64 rng(*shuffle_seed);
        std::shuffle(order.begin(), order.end(), rng);
    }
    const std::size_t m = graph.num_categories();
    const std::size_t labels = grouping.num_groups();

    std::vector<Batch> batches;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t count = std::min(batch_size, order.size() - start);
        Batch batch;
        batch.batch_size = count;
        batch.num_labels = labels;
        batch.num_categories = m;
        for (std::size_t k = 0; k < count; ++k) {
            const auto& j = cohort.journeys[order[start + k]];
            if (j.visits.size() < 2) throw DataError("patient '" + j.patient_id + "' has fewer than two visits");
            batch.max_visits = std::max(batch.max_visits, j.visits.size());
            for (const auto& v : j.visits) batch.max_codes = std::max(batch.max_codes, v.size());
        }
        const std::size_t T = batch.max_visits, n = batch.max_codes;
        batch.codes.assign(count * T * n, -1);
        batch.code_mask.assign(count * T * n, 0);
        batch.visit_mask.assign(count * T, 0);
        batch.next_visit_targets.assign(count * (T - 1) * labels, 0.0);
        batch.typing_targets.assign(count * (T - 1) * n * m, 0.0);
        for (std::size_t b = 0; b < count; ++b) {
            const auto& j = cohort.journeys[order[start + b]];
            batch.patient_ids.push_back(j.patient_id);
            for (std::size_t t = 0; t < j.visits.size(); ++t) {
                batch.visit_mask[b * T + t] = 1;
                const Visit& v = j.visits[t];
                for (std::size_t i = 0; i < v.size(); ++i) {
                    const NodeIndex code = v[i];
                    const std::size_t at = batch.code_offset(b, t) + i;
                    batch.codes[at] = static_cast<std::int64_t>(code);
                    batch.code_mask[at] = 1;
                    if (t + 1 < j.visits.size()) {
                        batch.typing_targets[((b * (T - 1) + t) * n + i) * m + graph.typing_category(code)] = 1.0;
                    }
                    if (t > 0) batch.next_visit_targets[(b * (T - 1) + (t - 1)) * labels + grouping.group(code)] = 1.0;
                }
            }
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

CohortSplit split(const Cohort& cohort, const SplitFractions& f, std::uint64_t seed) {
    if (f.train < 0.0 || f.valid < 0.0 || f.test < 0.0 || std::abs(f.train + f.valid + f.test - 1.0) > 1e-9) {
        throw DataError("split fractions must be nonnegative and sum to 1");
    }
    const std::size_t n = cohort.size();
    const auto n_train = static_cast<std::size_t>(std::llround(f.train * static_cast<double>(n)));
    const auto n_valid = static_cast<std::size_t>(std::llround(f.valid * static_cast<double>(n)));
    if (n_train + n_valid > n) throw DataError("split sizes exceed the cohort size");
    const std::size_t n_test = n - n_train - n_valid;
    auto check = [](double frac, std::size_t size, const char* name) {
        if (frac > 0.0 && size == 0) throw DataError(std::string("split '") + name + "' would be empty");
    };
    check(f.train, n_train, "train");
    check(f.valid, n_valid, "valid");
    check(f.test, n_test, "test");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    CohortSplit out;
    for (std::size_t k = 0; k < n; ++k) {
        Cohort& dst = k < n_train ? out.train : (k < n_train + n_valid ? out.valid : out.test);
        dst.journeys.push_back(cohort.journeys[order[k]]);
    }
    return out;
}

}  // namespace mipo::ehr
