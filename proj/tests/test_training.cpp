#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cstring>
#include <numeric>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "gradcheck.hpp"
#include "mipo/training.hpp"
#include "toy.hpp"

using namespace mipo;
using ad::Tensor;
using model::MipoModel;

namespace {

ontology::OntologyGraph two_category_graph() {
    std::istringstream in("root\t-\tr\nA\troot\ta\nB\troot\tb\nx\tA\tx\ny\tB\ty\nz\tA\tz\n");
    return ontology::OntologyGraph::parse(in);
}

// Direct double loop over patients, steps and labels.
double brute_sequential(const std::vector<Tensor>& probs, const ehr::Batch& b) {
    const std::size_t S = b.steps(), L = b.num_labels;
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t p = 0; p < b.batch_size; ++p)
        for (std::size_t t = 0; t < S; ++t) {
            if (!b.visit_mask[p * b.max_visits + t + 1]) continue;
            ++steps;
            for (std::size_t l = 0; l < L; ++l) {
                const double y = b.next_visit_targets[(p * S + t) * L + l];
                const double q = probs[p].at(t, l);
                total += y * std::log(std::max(q, 1e-8)) + (1 - y) * std::log(std::max(1 - q, 1e-8));
            }
        }
    return -total / static_cast<double>(steps);
}

double brute_typing(const std::vector<std::vector<Tensor>>& probs, const ehr::Batch& b) {
    const std::size_t S = b.steps(), n = b.max_codes, m = b.num_categories;
    double total = 0.0;
    std::size_t codes = 0;
    for (std::size_t p = 0; p < b.batch_size; ++p)
        for (std::size_t t = 0; t < S; ++t) {
            if (!b.visit_mask[p * b.max_visits + t + 1]) continue;
            for (std::size_t i = 0; i < n; ++i) {
                if (!b.code_mask[(p * b.max_visits + t) * n + i]) continue;
                ++codes;
                for (std::size_t k = 0; k < m; ++k) {
                    const double y = b.typing_targets[((p * S + t) * n + i) * m + k];
                    const double q = probs[p][t].at(i, k);
                    total += y * std::log(std::max(q, 1e-8)) + (1 - y) * std::log(std::max(1 - q, 1e-8));
                }
            }
        }
    return -total / static_cast<double>(codes);
}

Tensor random_distribution_rows(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    return ad::softmax(Tensor::uniform({rows, cols}, -3, 3, rng), 1);
}

struct RandomProbs {
    std::vector<Tensor> next;
    std::vector<std::vector<Tensor>> typing;
};

RandomProbs random_probs(const ehr::Batch& b, std::mt19937_64& rng) {
    RandomProbs r;
    for (std::size_t p = 0; p < b.batch_size; ++p) {
        r.next.push_back(random_distribution_rows(b.steps(), b.num_labels, rng));
        std::vector<Tensor> steps;
        for (std::size_t t = 0; t < b.steps(); ++t)
            steps.push_back(b.step_valid(p, t) ? random_distribution_rows(b.max_codes, b.num_categories, rng) : Tensor());
        r.typing.push_back(std::move(steps));
    }
    return r;
}

// Position of `label` in a descending ordering with ties by index, counted
// independently of top_k.
bool in_top_k(std::span<const double> s, std::size_t label, std::size_t k) {
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < s.size(); ++j)
        if (s[j] > s[label] || (s[j] == s[label] && j < label)) ++ahead;
    return ahead < k;
}

struct Fixture {
    ontology::OntologyGraph graph;
    ehr::Grouping grouping;
    ehr::CohortSplit split;
};

Fixture synthetic(std::size_t patients, std::uint64_t seed = 42) {
    ehr::SynthConfig cfg;
    cfg.patients = patients;
    cfg.seed = seed;
    auto [g, cohort] = ehr::generate_cohort(cfg);
    auto grp = ehr::build_grouped_labels(g, 2);
    auto s = ehr::split(cohort, {}, seed);
    return {std::move(g), std::move(grp), std::move(s)};
}

model::ModelConfig default_model_config(const Fixture& f) {
    model::ModelConfig c;
    c.categories = f.graph.num_categories();
    c.labels = f.grouping.num_groups();
    c.num_codes = f.graph.num_leaves();
    c.num_nodes = f.graph.num_nodes();
    c.max_visits = 20;
    return c;
}

}  // namespace

// --- losses -------------------------------------------------------------------------

TEST(Loss, UniformTwoLabelClosedForm) {
    auto g = two_category_graph();
    auto grp = ehr::build_grouped_labels(g, 1);
    ehr::Cohort c{{{"p", {{*g.index_of("x")}, {*g.index_of("y")}}}}};
    auto batch = ehr::make_batches(c, g, grp, 1, std::nullopt).at(0);
    Tensor uniform({1, 2}, {0.5, 0.5});
    EXPECT_NEAR(training::loss_sequential({uniform}, batch).item(), 2 * std::log(2.0), 1e-15);
    EXPECT_NEAR(training::loss_typing({{uniform}}, batch).item(), 2 * std::log(2.0), 1e-15);
    EXPECT_NEAR(2 * std::log(2.0), 1.3863, 1e-4);
}

TEST(Loss, PerfectPredictionIsZero) {
    auto g = two_category_graph();
    auto grp = ehr::build_grouped_labels(g, 1);
    ehr::Cohort c{{{"p", {{*g.index_of("x")}, {*g.index_of("y")}}}}};
    auto batch = ehr::make_batches(c, g, grp, 1, std::nullopt).at(0);
    Tensor exact({1, 2}, {batch.next_visit_targets[0], batch.next_visit_targets[1]});
    EXPECT_EQ(training::loss_sequential({exact}, batch).item(), 0.0);
    // Near the target the loss is small and positive.
    Tensor close({1, 2}, {exact[0] == 1 ? 1 - 1e-6 : 1e-6, exact[1] == 1 ? 1 - 1e-6 : 1e-6});
    const double l = training::loss_sequential({close}, batch).item();
    EXPECT_GT(l, 0.0);
    EXPECT_LT(l, 1e-5);
}

TEST(Loss, MatchesDirectSummation) {
    auto g = ehr::generate_ontology({.categories = 4, .branching = 2, .depth = 2});
    auto grp = ehr::build_grouped_labels(g, 2);
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 10; ++trial) {
        auto c = mipo::testing::random_cohort(g, 3, 2, 4, 4, rng);
        auto batch = ehr::make_batches(c, g, grp, 3, std::nullopt).at(0);
        auto probs = random_probs(batch, rng);
        EXPECT_NEAR(training::loss_sequential(probs.next, batch).item(), brute_sequential(probs.next, batch), 1e-12);
        EXPECT_NEAR(training::loss_typing(probs.typing, batch).item(), brute_typing(probs.typing, batch), 1e-12);
    }
}

TEST(Loss, DoublingTheBatchKeepsTheMean) {
    auto g = ehr::generate_ontology({.categories = 4, .branching = 2, .depth = 2});
    auto grp = ehr::build_grouped_labels(g, 2);
    std::mt19937_64 rng(2);
    auto c = mipo::testing::random_cohort(g, 3, 2, 4, 4, rng);
    ehr::Cohort twice = c;
    for (const auto& j : c.journeys) twice.journeys.push_back(j);
    auto b1 = ehr::make_batches(c, g, grp, 3, std::nullopt).at(0);
    auto b2 = ehr::make_batches(twice, g, grp, 6, std::nullopt).at(0);
    auto probs = random_probs(b1, rng);
    auto doubled = probs;
    doubled.next.insert(doubled.next.end(), probs.next.begin(), probs.next.end());
    doubled.typing.insert(doubled.typing.end(), probs.typing.begin(), probs.typing.end());
    EXPECT_NEAR(training::loss_typing(probs.typing, b1).item(), training::loss_typing(doubled.typing, b2).item(), 1e-12);
    EXPECT_NEAR(training::loss_sequential(probs.next, b1).item(), training::loss_sequential(doubled.next, b2).item(), 1e-12);
}

TEST(Loss, NonNegativeAndFiniteUnderClamping) {
    auto g = ehr::generate_ontology({.categories = 4, .branching = 2, .depth = 2});
    auto grp = ehr::build_grouped_labels(g, 2);
    std::mt19937_64 rng(3);
    auto c = mipo::testing::random_cohort(g, 2, 2, 3, 3, rng);
    auto batch = ehr::make_batches(c, g, grp, 2, std::nullopt).at(0);
    // One-hot rows on the wrong labels drive every log term to the clamp.
    std::vector<Tensor> wrong;
    for (std::size_t p = 0; p < 2; ++p) {
        std::vector<double> v(batch.steps() * batch.num_labels, 0.0);
        for (std::size_t t = 0; t < batch.steps(); ++t)
            for (std::size_t l = 0; l < batch.num_labels; ++l)
                if (batch.next_visit_targets[(p * batch.steps() + t) * batch.num_labels + l] == 0.0) {
                    v[t * batch.num_labels + l] = 1.0;
                    break;
                }
        wrong.emplace_back(ad::Shape{batch.steps(), batch.num_labels}, v);
    }
    const double l = training::loss_sequential(wrong, batch).item();
    EXPECT_TRUE(std::isfinite(l));
    EXPECT_GT(l, 0.0);
}

TEST(Loss, NoValidStepIsAnError) {
    ehr::Batch empty;
    empty.batch_size = 1;
    empty.max_visits = 2;
    empty.max_codes = 1;
    empty.num_labels = 1;
    empty.num_categories = 1;
    empty.visit_mask = {1, 0};
    empty.code_mask = {1, 0};
    EXPECT_THROW(training::loss_sequential({Tensor::zeros({1, 1})}, empty), std::invalid_argument);
    EXPECT_THROW(training::loss_typing({{Tensor()}}, empty), std::invalid_argument);
}

TEST(Loss, WeightedTotal) {
    Tensor lp = Tensor::scalar(0.5), lv = Tensor::scalar(0.25);
    EXPECT_EQ(training::loss_total(lp, lv, {1, 1}).item(), 0.75);
    EXPECT_EQ(training::loss_total(lp, lv, {1, 0}).item(), lp.item());
}

TEST(Loss, TotalGradientIsSumOfComponents) {
    auto g = ehr::generate_ontology({.categories = 3, .branching = 2, .depth = 2});
    auto grp = ehr::build_grouped_labels(g, 2);
    MipoModel m(mipo::testing::config_for(g, grp, 4, 2), 1);
    mipo::testing::jitter(m, 1, 0.3);
    std::mt19937_64 rng(4);
    auto c = mipo::testing::random_cohort(g, 2, 2, 3, 3, rng);
    auto batch = ehr::make_batches(c, g, grp, 2, std::nullopt).at(0);
    auto grads = [&](int which) {
        m.zero_grad();
        ad::Tape tape;
        Tensor loss;
        {
            ad::TapeScope scope(tape);
            auto out = model::forward(batch, m, g, model::Mode::kEval);
            Tensor lp = training::loss_sequential(out.next_visit_probs, batch);
            Tensor lv = training::loss_typing(out.typing_probs, batch);
            loss = which == 0 ? training::loss_total(lp, lv, {1, 1}) : which == 1 ? lp : lv;
        }
        tape.backward(loss);
        std::vector<double> all;
        for (const auto& [name, t] : m.named_parameters()) all.insert(all.end(), t.grad().begin(), t.grad().end());
        return all;
    };
    auto total = grads(0), lp = grads(1), lv = grads(2);
    for (std::size_t i = 0; i < total.size(); ++i) EXPECT_NEAR(total[i], lp[i] + lv[i], 1e-12 * (1 + std::abs(total[i])));

    auto loss = [&] {
        auto out = model::forward(batch, m, g, model::Mode::kEval);
        return training::loss_total(training::loss_sequential(out.next_visit_probs, batch),
                                    training::loss_typing(out.typing_probs, batch), {1.0, 0.7});
    };
    auto res = mipo::testing::grad_check(m.named_parameters(), loss, 1e-4);
    EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
}

// --- metrics -------------------------------------------------------------------------

TEST(Metrics, WorkedExamples) {
    const std::vector<double> s{0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05};
    const std::vector<std::size_t> three{0, 3, 9};  // two of them in the top 5
    EXPECT_DOUBLE_EQ(*training::prec_at_k(s, three, 5), 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(*training::acc_at_k(s, three, 5), 2.0 / 3.0);
    const std::vector<std::size_t> first{0, 1};
    EXPECT_EQ(*training::prec_at_k(s, first, 5), 1.0);
    const std::vector<std::size_t> ten{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    EXPECT_EQ(*training::acc_at_k(s, ten, 5), 0.5);
    EXPECT_EQ(*training::prec_at_k(s, ten, 5), 1.0);
    EXPECT_FALSE(training::prec_at_k(s, {}, 5).has_value());
    EXPECT_THROW(training::acc_at_k(s, three, 0), std::invalid_argument);
}

TEST(Metrics, TiesBreakByAscendingIndex) {
    const std::vector<double> s{0.5, 0.7, 0.5, 0.7};
    EXPECT_EQ(training::top_k(s, 3), (std::vector<std::size_t>{1, 3, 0}));
}

TEST(Metrics, MatchExhaustiveOracle) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t L = 1 + rng() % 60;
        std::vector<double> s(L);
        // Coarse values force ties.
        for (double& v : s) v = static_cast<double>(rng() % 8);
        std::vector<std::size_t> labels(L);
        std::iota(labels.begin(), labels.end(), 0);
        std::shuffle(labels.begin(), labels.end(), rng);
        labels.resize(1 + rng() % L);
        for (std::size_t k : training::kCutoffs) {
            std::size_t hits = 0;
            for (std::size_t l : labels) hits += in_top_k(s, l, k);
            const double prec = static_cast<double>(hits) / static_cast<double>(std::min(k, labels.size()));
            const double acc = static_cast<double>(hits) / static_cast<double>(labels.size());
            EXPECT_EQ(*training::prec_at_k(s, labels, k), prec);
            EXPECT_EQ(*training::acc_at_k(s, labels, k), acc);
            EXPECT_LE(acc, prec);
        }
    }
}

TEST(Metrics, AccumulatorAveragesPerStep) {
    std::mt19937_64 rng(6);
    training::RankAccumulator accum;
    std::array<double, 6> prec{}, acc{};
    for (int i = 0; i < 50; ++i) {
        std::vector<double> s(40);
        for (double& v : s) v = std::uniform_real_distribution<>(0, 1)(rng);
        std::vector<std::size_t> pos;
        for (std::size_t l = 0; l < 40; ++l)
            if (rng() % 5 == 0) pos.push_back(l);
        accum.add(s, pos);
        if (pos.empty()) continue;
        for (std::size_t c = 0; c < 6; ++c) {
            prec[c] += *training::prec_at_k(s, pos, training::kCutoffs[c]);
            acc[c] += *training::acc_at_k(s, pos, training::kCutoffs[c]);
        }
    }
    auto r = accum.result();
    for (std::size_t c = 0; c < 6; ++c) {
        EXPECT_NEAR(r.prec[c], prec[c] / static_cast<double>(r.samples), 1e-12);
        EXPECT_NEAR(r.acc[c], acc[c] / static_cast<double>(r.samples), 1e-12);
        EXPECT_LE(r.acc[c], r.prec[c]);
    }
}

TEST(Metrics, ShiftingLogitsKeepsRanking) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor v = Tensor::uniform({1, 4}, -1, 1, rng);
        Tensor W = Tensor::uniform({12, 4}, -1, 1, rng), b = Tensor::uniform({12}, -1, 1, rng);
        Tensor shifted = ad::add_scalar(b, 37.5);
        Tensor p1 = model::predict_next(v, W, b), p2 = model::predict_next(v, W, shifted);
        for (std::size_t k : training::kCutoffs) EXPECT_EQ(training::top_k(p1.data(), k), training::top_k(p2.data(), k));
    }
}

TEST(Metrics, EvaluationIgnoresBatchPartitioning) {
    auto f = synthetic(60);
    auto cfg = default_model_config(f);
    cfg.d = 8;
    cfg.heads = 2;
    MipoModel m(cfg, 3);
    auto a = training::evaluate(m, f.graph, f.grouping, f.split.train, 1);
    auto b = training::evaluate(m, f.graph, f.grouping, f.split.train, 7);
    EXPECT_EQ(a.ranking.samples, b.ranking.samples);
    for (std::size_t c = 0; c < 6; ++c) {
        EXPECT_NEAR(a.ranking.prec[c], b.ranking.prec[c], 1e-12);
        EXPECT_NEAR(a.ranking.acc[c], b.ranking.acc[c], 1e-12);
    }
}

// --- baseline -------------------------------------------------------------------------

TEST(Baseline, DominantLabelRanksFirst) {
    auto g = two_category_graph();
    auto grp = ehr::build_grouped_labels(g, 1);
    const auto x = *g.index_of("x"), y = *g.index_of("y"), z = *g.index_of("z");
    ehr::Cohort train{{{"a", {{x}, {z}, {x, y}}}, {"b", {{y}, {x}}}}};
    auto fb = training::FrequencyBaseline::fit(train, grp);
    EXPECT_EQ(training::top_k(fb.scores(), 1).at(0), grp.group(x));
    EXPECT_DOUBLE_EQ(fb.scores()[grp.group(x)], 4.0 / 5.0);
    auto r = training::evaluate_baseline(fb, grp, train);
    EXPECT_EQ(r.samples, 3u);
    EXPECT_EQ(r.acc_at(5), 1.0);
}

// --- optimizer and loop ------------------------------------------------------------------

TEST(Optimizer, ZeroLearningRateLeavesBitsUnchanged) {
    std::mt19937_64 rng(8);
    Tensor p = Tensor::uniform({3, 3}, -1, 1, rng, true);
    std::vector<double> before(p.data().begin(), p.data().end());
    for (auto kind : {training::OptimizerKind::kAdam, training::OptimizerKind::kSgd}) {
        training::Optimizer opt(kind, {p}, 0.0);
        for (int step = 0; step < 3; ++step) {
            for (double& g : p.mutable_grad()) g = std::uniform_real_distribution<>(-5, 5)(rng);
            opt.step();
        }
        for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(std::memcmp(&before[i], &p.data()[i], sizeof(double)), 0);
    }
}

TEST(Optimizer, AdamFirstStepMovesByLearningRate) {
    Tensor p({2}, {1.0, -1.0}, true);
    training::Optimizer opt(training::OptimizerKind::kAdam, {p}, 0.01);
    p.mutable_grad()[0] = 3.0;
    p.mutable_grad()[1] = -0.2;
    opt.step();
    // With bias correction the first update is lr * g / (|g| + eps').
    EXPECT_NEAR(p[0], 1.0 - 0.01, 1e-9);
    EXPECT_NEAR(p[1], -1.0 + 0.01, 1e-9);
}

TEST(Train, ZeroEpochsReturnsInitialParameters) {
    auto f = synthetic(30);
    auto cfg = default_model_config(f);
    cfg.d = 8;
    cfg.heads = 2;
    MipoModel m(cfg, 4);
    training::TrainConfig tc;
    tc.epochs = 0;
    auto r = training::train(m, f.graph, f.grouping, f.split.train, f.split.valid, tc);
    EXPECT_TRUE(r.history.empty());
    EXPECT_EQ(r.best_epoch, 0u);
    auto pa = m.named_parameters(), pb = r.best.named_parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
        EXPECT_TRUE(std::equal(pa[i].second.data().begin(), pa[i].second.data().end(), pb[i].second.data().begin()));
}

TEST(Train, OneEpochLowersTrainingLoss) {
    auto f = synthetic(400);
    MipoModel m(default_model_config(f), 42);
    const double before = training::evaluate(m, f.graph, f.grouping, f.split.train, 32).loss_total;
    training::TrainConfig tc;
    tc.epochs = 1;
    auto r = training::train(m, f.graph, f.grouping, f.split.train, f.split.valid, tc);
    ASSERT_EQ(r.history.size(), 1u);
    const double after = training::evaluate(r.best, f.graph, f.grouping, f.split.train, 32).loss_total;
    EXPECT_LT(after, before);
    EXPECT_LT(r.history[0].train_loss_total, before);
}

TEST(Train, EqualSeedsGiveIdenticalLosses) {
    auto f = synthetic(100);
    auto cfg = default_model_config(f);
    cfg.d = 8;
    cfg.heads = 2;
    MipoModel m(cfg, 5);
    training::TrainConfig tc;
    tc.epochs = 2;
    auto a = training::train(m, f.graph, f.grouping, f.split.train, f.split.valid, tc);
    auto b = training::train(m, f.graph, f.grouping, f.split.train, f.split.valid, tc);
    ASSERT_EQ(a.history.size(), b.history.size());
    for (std::size_t e = 0; e < a.history.size(); ++e) {
        EXPECT_EQ(a.history[e].train_loss_total, b.history[e].train_loss_total);
        EXPECT_EQ(a.history[e].valid.ranking.acc, b.history[e].valid.ranking.acc);
    }
    std::ostringstream ca, cb;
    model::save_checkpoint(ca, a.best);
    model::save_checkpoint(cb, b.best);
    EXPECT_EQ(ca.str(), cb.str());
}

TEST(Train, EarlyStoppingHonorsPatience) {
    auto f = synthetic(60);
    auto cfg = default_model_config(f);
    cfg.d = 8;
    cfg.heads = 2;
    MipoModel m(cfg, 6);
    training::TrainConfig tc;
    tc.epochs = 10;
    tc.learning_rate = 0.0;  // validation accuracy never improves after epoch 1
    tc.early_stop_patience = 2;
    std::size_t callbacks = 0;
    auto r = training::train(m, f.graph, f.grouping, f.split.train, f.split.valid, tc,
                             [&](const training::EpochReport&) { ++callbacks; });
    EXPECT_EQ(r.history.size(), 3u);
    EXPECT_EQ(callbacks, 3u);
    EXPECT_EQ(r.best_epoch, 1u);
}

TEST(Train, NonFiniteLossNamesTheStep) {
    auto f = synthetic(30);
    auto cfg = default_model_config(f);
    cfg.d = 8;
    cfg.heads = 2;
    MipoModel m(cfg, 7);
    m.params().next_bias.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
    training::TrainConfig tc;
    tc.epochs = 1;
    try {
        training::train(m, f.graph, f.grouping, f.split.train, f.split.valid, tc);
        FAIL();
    } catch (const training::NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("epoch 1, batch 1"), std::string::npos) << e.what();
    }
}

TEST(Train, ConfigValidation) {
    training::TrainConfig tc;
    tc.batch_size = 0;
    EXPECT_THROW(tc.validate(), std::invalid_argument);
    tc = {};
    tc.loss_weights.typing = -1;
    EXPECT_THROW(tc.validate(), std::invalid_argument);
    EXPECT_THROW(training::parse_optimizer("rmsprop"), std::invalid_argument);
}
