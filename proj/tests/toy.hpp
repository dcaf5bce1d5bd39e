#pragma once

// Small ontology, cohort and model shared by the model, training and
// acceptance tests.

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "mipo/ehrdata.hpp"
#include "mipo/model.hpp"
#include "mipo/ontology.hpp"

namespace mipo::testing {

inline model::ModelConfig config_for(const ontology::OntologyGraph& g, const ehr::Grouping& grp, std::size_t d,
                                     std::size_t heads, std::size_t max_visits = 8) {
    model::ModelConfig c;
    c.d = d;
    c.heads = heads;
    c.categories = g.num_categories();
    c.labels = grp.num_groups();
    c.num_codes = g.num_leaves();
    c.num_nodes = g.num_nodes();
    c.dropout = 0.0;
    c.max_visits = max_visits;
    return c;
}

// Random journeys over the leaves of `g`.
inline ehr::Cohort random_cohort(const ontology::OntologyGraph& g, std::size_t patients, std::size_t min_visits,
                                 std::size_t max_visits, std::size_t max_codes, std::mt19937_64& rng) {
    ehr::Cohort c;
    std::uniform_int_distribution<std::size_t> nv(min_visits, max_visits), nc(1, max_codes);
    for (std::size_t p = 0; p < patients; ++p) {
        ehr::PatientJourney j;
        j.patient_id = "p" + std::to_string(p);
        const std::size_t visits = nv(rng);
        for (std::size_t t = 0; t < visits; ++t) {
            std::vector<ontology::NodeIndex> leaves(g.num_leaves());
            for (std::size_t i = 0; i < leaves.size(); ++i) leaves[i] = i;
            std::shuffle(leaves.begin(), leaves.end(), rng);
            leaves.resize(std::min(nc(rng), leaves.size()));
            j.visits.push_back(leaves);
        }
        c.journeys.push_back(std::move(j));
    }
    return c;
}

// Randomizes every parameter, zero-initialized biases included, so no term
// of a gradient check is trivially zero.
inline void jitter(model::MipoModel& m, std::uint64_t seed, double scale = 0.5) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-scale, scale);
    for (auto& [name, t] : m.named_parameters())
        for (double& v : t.mutable_data()) v += u(rng);
}

}  // namespace mipo::testing
