#include "mipo/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mipo::training {

using ad::Tensor;

const char* to_string(OptimizerKind k) { return k == OptimizerKind::kAdam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& s) {
    if (s == "adam") return OptimizerKind::kAdam;
    if (s == "sgd") return OptimizerKind::kSgd;
    throw std::invalid_argument("unknown optimizer '" + s + "' (expected adam or sgd)");
}

void TrainConfig::validate() const {
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be positive");
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("train config: learning_rate must be >= 0");
    if (!(loss_weights.next >= 0.0) || !(loss_weights.typing >= 0.0)) {
        throw std::invalid_argument("train config: loss weights must be >= 0");
    }
}

// --- losses -----------------------------------------------------------------

namespace {
// y . log p + (1 - y) . log(1 - p), masked, summed.
Tensor masked_bce_sum(const Tensor& probs, std::vector<double> targets, std::vector<double> mask) {
    const ad::Shape& shape = probs.shape();
    Tensor y(shape, targets);
    for (double& t : targets) t = 1.0 - t;
    Tensor not_y(shape, std::move(targets));
    Tensor not_p = ad::add_scalar(ad::scale(probs, -1.0), 1.0);
    Tensor term = ad::add(ad::mul(y, ad::log_clamped(probs)), ad::mul(not_y, ad::log_clamped(not_p)));
    return ad::sum(ad::mul(term, Tensor(shape, std::move(mask))));
}
}  // namespace

Tensor loss_sequential(const std::vector<Tensor>& probs, const ehr::Batch& batch) {
    if (probs.size() != batch.batch_size) throw std::invalid_argument("loss_sequential: one probability matrix per patient expected");
    const std::size_t valid = batch.valid_steps();
    if (valid == 0) throw std::invalid_argument("loss_sequential: batch has no valid prediction step");
    const std::size_t S = batch.steps(), L = batch.num_labels;
    Tensor total;
    for (std::size_t b = 0; b < batch.batch_size; ++b) {
        if (probs[b].shape() != ad::Shape{S, L}) {
            throw ad::ShapeError("loss_sequential: expected " + ad::to_string({S, L}) + " probabilities, got " +
                                 ad::to_string(probs[b].shape()));
        }
        const auto first = batch.next_visit_targets.begin() + static_cast<std::ptrdiff_t>(b * S * L);
        std::vector<double> targets(first, first + static_cast<std::ptrdiff_t>(S * L));
        std::vector<double> mask(S * L, 0.0);
        for (std::size_t t = 0; t < S; ++t)
            if (batch.step_valid(b, t)) std::fill_n(mask.begin() + t * L, L, 1.0);
        Tensor part = masked_bce_sum(probs[b], std::move(targets), std::move(mask));
        total = total.defined() ? ad::add(total, part) : part;
    }
    return ad::scale(total, -1.0 / static_cast<double>(valid));
}

Tensor loss_typing(const std::vector<std::vector<Tensor>>& probs, const ehr::Batch& batch) {
    if (probs.size() != batch.batch_size) throw std::invalid_argument("loss_typing: one entry per patient expected");
    const std::size_t valid = batch.valid_typing_codes();
    if (valid == 0) throw std::invalid_argument("loss_typing: batch has no valid code slot");
    const std::size_t S = batch.steps(), n = batch.max_codes, m = batch.num_categories;
    Tensor total;
    for (std::size_t b = 0; b < batch.batch_size; ++b) {
        for (std::size_t t = 0; t < S; ++t) {
            if (!batch.step_valid(b, t)) continue;
            const Tensor& p = probs[b].at(t);
            if (!p.defined() || p.shape() != ad::Shape{n, m}) {
                throw ad::ShapeError("loss_typing: expected " + ad::to_string({n, m}) + " probabilities at step " +
                                     std::to_string(t));
            }
            const auto first = batch.typing_targets.begin() + static_cast<std::ptrdiff_t>((b * S + t) * n * m);
            std::vector<double> targets(first, first + static_cast<std::ptrdiff_t>(n * m));
            std::vector<double> mask(n * m, 0.0);
            const std::size_t off = batch.code_offset(b, t);
            for (std::size_t i = 0; i < n; ++i)
                if (batch.code_mask[off + i]) std::fill_n(mask.begin() + i * m, m, 1.0);
            Tensor part = masked_bce_sum(p, std::move(targets), std::move(mask));
            total = total.defined() ? ad::add(total, part) : part;
        }
    }
    return ad::scale(total, -1.0 / static_cast<double>(valid));
}

Tensor loss_total(const Tensor& next_loss, const Tensor& typing_loss, const LossWeights& w) {
    return ad::add(ad::scale(next_loss, w.next), ad::scale(typing_loss, w.typing));
}

// --- ranking metrics ----------------------------------------------------------

std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    k = std::min(k, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
    idx.resize(k);
    return idx;
}

namespace {
std::size_t hits(std::span<const double> scores, std::span<const std::size_t> positives, std::size_t k) {
    auto top = top_k(scores, k);
    std::size_t h = 0;
    for (std::size_t label : top) h += std::find(positives.begin(), positives.end(), label) != positives.end();
    return h;
}
}  // namespace

std::optional<double> prec_at_k(std::span<const double> scores, std::span<const std::size_t> positives, std::size_t k) {
    if (k < 1) throw std::invalid_argument("prec_at_k: k must be >= 1");
    if (positives.empty()) return std::nullopt;
    return static_cast<double>(hits(scores, positives, k)) / static_cast<double>(std::min(k, positives.size()));
}

std::optional<double> acc_at_k(std::span<const double> scores, std::span<const std::size_t> positives, std::size_t k) {
    if (k < 1) throw std::invalid_argument("acc_at_k: k must be >= 1");
    if (positives.empty()) return std::nullopt;
    return static_cast<double>(hits(scores, positives, k)) / static_cast<double>(positives.size());
}

namespace {
std::size_t cutoff_slot(std::size_t k) {
    auto it = std::find(kCutoffs.begin(), kCutoffs.end(), k);
    if (it == kCutoffs.end()) throw std::invalid_argument("no metric recorded for k = " + std::to_string(k));
    return static_cast<std::size_t>(it - kCutoffs.begin());
}
}  // namespace

double RankMetrics::prec_at(std::size_t k) const { return prec[cutoff_slot(k)]; }
double RankMetrics::acc_at(std::size_t k) const { return acc[cutoff_slot(k)]; }

void RankAccumulator::add(std::span<const double> scores, std::span<const std::size_t> positives) {
    if (positives.empty()) return;
    // One sort serves every cutoff.
    const auto order = top_k(scores, kCutoffs.back());
    std::size_t h = 0, pos = 0;
    for (std::size_t slot = 0; slot < kCutoffs.size(); ++slot) {
        const std::size_t k = kCutoffs[slot];
        for (; pos < std::min(k, order.size()); ++pos)
            h += std::find(positives.begin(), positives.end(), order[pos]) != positives.end();
        prec_sum_[slot] += static_cast<double>(h) / static_cast<double>(std::min(k, positives.size()));
        acc_sum_[slot] += static_cast<double>(h) / static_cast<double>(positives.size());
    }
    ++samples_;
}

RankMetrics RankAccumulator::result() const {
    RankMetrics r;
    r.samples = samples_;
    if (samples_ == 0) return r;
    for (std::size_t s = 0; s < kCutoffs.size(); ++s) {
        r.prec[s] = prec_sum_[s] / static_cast<double>(samples_);
        r.acc[s] = acc_sum_[s] / static_cast<double>(samples_);
    }
    return r;
}

FrequencyBaseline FrequencyBaseline::fit(const ehr::Cohort& train, const ehr::Grouping& grouping) {
    if (train.empty()) throw std::invalid_argument("frequency baseline: empty training cohort");
    FrequencyBaseline fb;
    fb.scores_.assign(grouping.num_groups(), 0.0);
    double total = 0.0;
    for (const auto& j : train.journeys)
        for (const auto& v : j.visits) {
            std::vector<std::size_t> groups;
            for (auto code : v) groups.push_back(grouping.group(code));
            std::sort(groups.begin(), groups.end());
            groups.erase(std::unique(groups.begin(), groups.end()), groups.end());
            for (auto g : groups) fb.scores_[g] += 1.0;
            total += 1.0;
        }
    for (double& s : fb.scores_) s /= total;
    return fb;
}

namespace {
std::vector<std::size_t> positives_of(const ehr::Batch& batch, std::size_t b, std::size_t t) {
    std::vector<std::size_t> out;
    const std::size_t L = batch.num_labels;
    const std::size_t base = (b * batch.steps() + t) * L;
    for (std::size_t l = 0; l < L; ++l)
        if (batch.next_visit_targets[base + l] != 0.0) out.push_back(l);
    return out;
}
}  // namespace

Evaluation evaluate(const model::MipoModel& model, const ontology::OntologyGraph& graph, const ehr::Grouping& grouping,
                    const ehr::Cohort& cohort, std::size_t batch_size, const LossWeights& weights) {
    if (cohort.empty()) throw std::invalid_argument("evaluate: empty cohort");
    Evaluation ev;
    RankAccumulator acc;
    const auto batches = ehr::make_batches(cohort, graph, grouping, batch_size, std::nullopt);
    for (const auto& batch : batches) {
        auto out = model::forward(batch, model, graph, model::Mode::kEval);
        const double lp = loss_sequential(out.next_visit_probs, batch).item();
        const double lv = loss_typing(out.typing_probs, batch).item();
        ev.loss_next += lp;
        ev.loss_typing += lv;
        ev.loss_total += weights.next * lp + weights.typing * lv;
        for (std::size_t b = 0; b < batch.batch_size; ++b) {
            const Tensor& probs = out.next_visit_probs[b];
            const std::size_t L = batch.num_labels;
            for (std::size_t t = 0; t < batch.steps(); ++t) {
                if (!batch.step_valid(b, t)) continue;
                acc.add(probs.data().subspan(t * L, L), positives_of(batch, b, t));
            }
        }
    }
    const double nb = static_cast<double>(batches.size());
    ev.loss_next /= nb;
    ev.loss_typing /= nb;
    ev.loss_total /= nb;
    ev.ranking = acc.result();
    return ev;
}

RankMetrics evaluate_baseline(const FrequencyBaseline& baseline, const ehr::Grouping& grouping, const ehr::Cohort& cohort) {
    RankAccumulator acc;
    for (const auto& j : cohort.journeys)
        for (std::size_t t = 1; t < j.visits.size(); ++t) {
            std::vector<std::size_t> positives;
            for (auto code : j.visits[t]) positives.push_back(grouping.group(code));
            std::sort(positives.begin(), positives.end());
            positives.erase(std::unique(positives.begin(), positives.end()), positives.end());
            acc.add(baseline.scores(), positives);
        }
    return acc.result();
}

// --- optimization -------------------------------------------------------------

Optimizer::Optimizer(OptimizerKind kind, std::vector<Tensor> params, double lr, double beta1, double beta2, double eps)
    : kind_(kind), params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (kind_ == OptimizerKind::kAdam) {
        for (const auto& p : params_) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }
}

void Optimizer::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        if (!p.has_grad()) continue;
        auto g = p.grad();
        auto x = p.mutable_data();
        if (kind_ == OptimizerKind::kSgd) {
            for (std::size_t j = 0; j < x.size(); ++j) x[j] -= lr_ * g[j];
            continue;
        }
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < x.size(); ++j) {
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
            x[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
        }
    }
}

// --- training loop ------------------------------------------------------------

TrainResult train(const model::MipoModel& initial, const ontology::OntologyGraph& graph, const ehr::Grouping& grouping,
                  const ehr::Cohort& train_cohort, const ehr::Cohort& valid_cohort, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
    config.validate();
    if (train_cohort.empty() || valid_cohort.empty()) throw std::invalid_argument("train: train and valid cohorts must be nonempty");

    model::MipoModel current = initial.clone();
    TrainResult result{initial.clone(), {}, 0};
    if (config.epochs == 0) return result;

    std::vector<Tensor> params;
    for (auto& [name, t] : current.named_parameters()) params.push_back(t);
    Optimizer optimizer(config.optimizer, params, config.learning_rate);
    std::mt19937_64 dropout_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

    double best_acc = -1.0;
    std::size_t stale = 0;
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        const auto batches = ehr::make_batches(train_cohort, graph, grouping, config.batch_size, config.seed + epoch);
        EpochReport report;
        report.epoch = epoch;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            const auto& batch = batches[bi];
            current.zero_grad();
            ad::Tape tape;
            Tensor lp, lv, total;
            {
                ad::TapeScope scope(tape);
                auto out = model::forward(batch, current, graph, model::Mode::kTrain, &dropout_rng);
                lp = loss_sequential(out.next_visit_probs, batch);
                lv = loss_typing(out.typing_probs, batch);
                total = loss_total(lp, lv, config.loss_weights);
            }
            if (!std::isfinite(total.item())) {
                std::ostringstream msg;
                msg << "non-finite loss at epoch " << epoch << ", batch " << bi + 1 << " (L_P=" << lp.item()
                    << ", L_V=" << lv.item() << ")";
                throw NumericError(msg.str());
            }
            tape.backward(total);
            optimizer.step();
            report.train_loss_next += lp.item();
            report.train_loss_typing += lv.item();
            report.train_loss_total += total.item();
        }
        const double nb = static_cast<double>(batches.size());
        report.train_loss_next /= nb;
        report.train_loss_typing /= nb;
        report.train_loss_total /= nb;
        report.valid = evaluate(current, graph, grouping, valid_cohort, config.batch_size, config.loss_weights);
        report.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

        const double acc20 = report.valid.ranking.acc_at(20);
        if (acc20 > best_acc) {
            best_acc = acc20;
            result.best = current.clone();
            result.best_epoch = epoch;
            stale = 0;
        } else {
            ++stale;
        }
        result.history.push_back(report);
        if (on_epoch) on_epoch(report);
        if (config.early_stop_patience > 0 && stale >= config.early_stop_patience) break;
    }
    current.zero_grad();
    return result;
}

}  // namespace mipo::training
