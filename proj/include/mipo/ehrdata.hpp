#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mipo/autodiff.hpp"
#include "mipo/ontology.hpp"

namespace mipo::ehr {

using ontology::NodeIndex;
using Visit = std::vector<NodeIndex>;  // leaf indices, unique within a visit

class DataError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct PatientJourney {
    std::string patient_id;
    std::vector<Visit> visits;  // temporal order, at least two
};

struct Cohort {
    std::vector<PatientJourney> journeys;

    std::size_t size() const { return journeys.size(); }
    bool empty() const { return journeys.empty(); }
    std::size_t total_codes() const;
    std::size_t max_visits() const;
    std::size_t max_codes() const;
};

// Throws DataError if a journey has fewer than two visits, an empty visit, a
// repeated code within a visit, or a code that is not a leaf of `graph`.
void validate(const Cohort& cohort, const ontology::OntologyGraph& graph);

// JSON lines: {"patient_id": str, "visits": [[code_id, ...], ...]}.
Cohort read_cohort(std::istream& in, const ontology::OntologyGraph& graph);
Cohort read_cohort(const std::string& path, const ontology::OntologyGraph& graph);
void write_cohort(std::ostream& out, const Cohort& cohort, const ontology::OntologyGraph& graph);
void write_cohort(const std::string& path, const Cohort& cohort, const ontology::OntologyGraph& graph);

// --- synthetic generation ---------------------------------------------------

struct OntologySpec {
    std::size_t categories = 18;
    std::size_t branching = 3;
    std::size_t depth = 3;  // leaf level; categories sit at level 1
};

struct SynthConfig {
    std::size_t patients = 2000;
    double mean_visits = 2.66;
    std::size_t min_codes = 2;
    std::size_t max_codes = 8;
    std::size_t max_visits = 20;
    OntologySpec ontology;
    double transition_noise = 0.2;
    std::uint64_t seed = 42;
};

// Balanced tree: root, `categories` level-1 nodes, then `branching` children
// per node down to `depth`.
ontology::OntologyGraph generate_ontology(const OntologySpec& spec);

// Each patient carries 1-2 active categories that advance through a sparse,
// seeded category transition table from visit to visit. Codes are drawn from
// the active categories' leaves (skewed within each category), except that
// each code is replaced by a uniformly random leaf with probability
// `transition_noise`. Visit counts are 2 + Poisson(mean_visits - 2), capped
// at max_visits.
std::pair<ontology::OntologyGraph, Cohort> generate_cohort(const SynthConfig& config);

// --- targets ------------------------------------------------------------------

struct Grouping {
    std::size_t level = 0;
    std::vector<std::size_t> group_of_leaf;
    std::vector<NodeIndex> group_nodes;  // group index -> ontology node

    std::size_t num_groups() const { return group_nodes.size(); }
    std::size_t group(NodeIndex leaf) const;
};

// Maps every leaf to its ancestor at `level` (1 <= level <= graph.depth()).
// A leaf shallower than `level` forms its own group.
Grouping build_grouped_labels(const ontology::OntologyGraph& graph, std::size_t level);

// Padded arrays for one mini-batch. Step t (0 <= t < T-1) encodes visit t and
// predicts visit t+1; it is valid iff visit t+1 exists.
struct Batch {
    std::size_t batch_size = 0;
    std::size_t max_visits = 0;  // T_max
    std::size_t max_codes = 0;   // n_max
    std::size_t num_labels = 0;
    std::size_t num_categories = 0;
    std::vector<std::string> patient_ids;
    std::vector<std::int64_t> codes;          // [B x T x n], -1 = pad
    ad::Mask code_mask;                        // [B x T x n]
    ad::Mask visit_mask;                       // [B x T]
    std::vector<double> next_visit_targets;    // [B x (T-1) x labels]
    std::vector<double> typing_targets;        // [B x (T-1) x n x m]

    std::size_t steps() const { return max_visits - 1; }
    std::size_t code_offset(std::size_t b, std::size_t t) const { return (b * max_visits + t) * max_codes; }
    bool step_valid(std::size_t b, std::size_t t) const { return visit_mask[b * max_visits + t + 1] != 0; }
    std::size_t valid_steps() const;
    std::size_t valid_typing_codes() const;
};

std::vector<Batch> make_batches(const Cohort& cohort, const ontology::OntologyGraph& graph, const Grouping& grouping,
                                std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed);

struct SplitFractions {
    double train = 0.8;
    double valid = 0.1;
    double test = 0.1;
};

struct CohortSplit {
    Cohort train;
    Cohort valid;
    Cohort test;
};

// Patient-level split of a seeded shuffle; sizes are round(f * n) for train
// and valid with the remainder going to test.
CohortSplit split(const Cohort& cohort, const SplitFractions& fractions, std::uint64_t seed);

}  // namespace mipo::ehr
