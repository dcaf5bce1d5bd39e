#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mipo/autodiff.hpp"
#include "mipo/ehrdata.hpp"
#include "mipo/model.hpp"
#include "mipo/ontology.hpp"

namespace mipo::training {

class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct LossWeights {
    double next = 1.0;    // lambda_P
    double typing = 1.0;  // lambda_V
};

enum class OptimizerKind { kAdam, kSgd };
const char* to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;
    std::uint64_t seed = 42;
    OptimizerKind optimizer = OptimizerKind::kAdam;
    std::size_t early_stop_patience = 5;
    LossWeights loss_weights;

    void validate() const;
};

// --- losses -----------------------------------------------------------------

// Mean over valid steps of the binary cross-entropy summed across labels:
// -(1/steps) sum_t [y_t . log p_t + (1 - y_t) . log(1 - p_t)], logs clamped.
// Throws std::invalid_argument when the batch has no valid step.
ad::Tensor loss_sequential(const std::vector<ad::Tensor>& next_visit_probs, const ehr::Batch& batch);

// Same form per code slot over the m typing categories, averaged over the
// real code slots of valid steps.
ad::Tensor loss_typing(const std::vector<std::vector<ad::Tensor>>& typing_probs, const ehr::Batch& batch);

ad::Tensor loss_total(const ad::Tensor& next_loss, const ad::Tensor& typing_loss, const LossWeights& weights);

// --- ranking metrics ----------------------------------------------------------

inline constexpr std::array<std::size_t, 6> kCutoffs{5, 10, 15, 20, 25, 30};

// Indices of the k highest scores, ties broken by ascending index.
std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k);

// hits / min(k, |positives|). nullopt when `positives` is empty, in which
// case the step is left out of every average.
std::optional<double> prec_at_k(std::span<const double> scores, std::span<const std::size_t> positives, std::size_t k);
// hits / |positives|.
std::optional<double> acc_at_k(std::span<const double> scores, std::span<const std::size_t> positives, std::size_t k);

struct RankMetrics {
    std::array<double, kCutoffs.size()> prec{};
    std::array<double, kCutoffs.size()> acc{};
    std::size_t samples = 0;

    double prec_at(std::size_t k) const;
    double acc_at(std::size_t k) const;
};

// Running sums over (patient, step) pairs.
class RankAccumulator {
  public:
    void add(std::span<const double> scores, std::span<const std::size_t> positives);
    RankMetrics result() const;

  private:
    std::array<double, kCutoffs.size()> prec_sum_{};
    std::array<double, kCutoffs.size()> acc_sum_{};
    std::size_t samples_ = 0;
};

// Ranks labels by how often they occur in the training visits.
class FrequencyBaseline {
  public:
    static FrequencyBaseline fit(const ehr::Cohort& train, const ehr::Grouping& grouping);
    std::span<const double> scores() const { return scores_; }

  private:
    std::vector<double> scores_;
};

struct Evaluation {
    RankMetrics ranking;
    double loss_next = 0.0;
    double loss_typing = 0.0;
    double loss_total = 0.0;
};

// Eval-mode pass over `cohort` in file order. Losses are means over batches of
// `batch_size` patients.
Evaluation evaluate(const model::MipoModel& model, const ontology::OntologyGraph& graph, const ehr::Grouping& grouping,
                    const ehr::Cohort& cohort, std::size_t batch_size, const LossWeights& weights = {});

RankMetrics evaluate_baseline(const FrequencyBaseline& baseline, const ehr::Grouping& grouping, const ehr::Cohort& cohort);

// --- optimization -------------------------------------------------------------

class Optimizer {
  public:
    Optimizer(OptimizerKind kind, std::vector<ad::Tensor> params, double learning_rate, double beta1 = 0.9,
              double beta2 = 0.999, double eps = 1e-8);
    // Applies one update from the parameters' accumulated gradients.
    void step();
    std::size_t steps_taken() const { return t_; }

  private:
    OptimizerKind kind_;
    std::vector<ad::Tensor> params_;
    double lr_, beta1_, beta2_, eps_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

struct EpochReport {
    std::size_t epoch = 0;
    double train_loss_next = 0.0;
    double train_loss_typing = 0.0;
    double train_loss_total = 0.0;
    Evaluation valid;
    double wall_seconds = 0.0;
};

struct TrainResult {
    model::MipoModel best;
    std::vector<EpochReport> history;
    std::size_t best_epoch = 0;  // 0 when no epoch ran
};

using EpochCallback = std::function<void(const EpochReport&)>;

// Shuffle, batch, forward, weighted loss, backward, optimizer step; keeps the
// parameters with the best validation Acc@20 and stops after
// `early_stop_patience` epochs without improvement.
TrainResult train(const model::MipoModel& initial, const ontology::OntologyGraph& graph, const ehr::Grouping& grouping,
                  const ehr::Cohort& train_cohort, const ehr::Cohort& valid_cohort, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

}  // namespace mipo::training
