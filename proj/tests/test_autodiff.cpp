#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "mipo/autodiff.hpp"

using namespace mipo;
using ad::Tensor;
using mipo::testing::grad_check;

namespace {
Tensor random_tensor(ad::Shape shape, std::mt19937_64& rng, bool grad = true) {
    return Tensor::uniform(std::move(shape), -1.0, 1.0, rng, grad);
}
}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    Tensor I({2, 2}, {1, 0, 0, 1});
    Tensor M({2, 2}, {0.3, -1.5, 2.0, 7.25});
    Tensor out = ad::matmul(I, M);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(out[i], M[i]);
}

TEST(Matmul, HandArithmetic) {
    Tensor out = ad::matmul(Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2, 1}, {5, 6}));
    ASSERT_EQ(out.shape(), (ad::Shape{2, 1}));
    EXPECT_EQ(out[0], 17.0);
    EXPECT_EQ(out[1], 39.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    try {
        ad::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
        FAIL() << "expected ShapeError";
    } catch (const ad::ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("by [2x3]"), std::string::npos) << msg;
    }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
    std::mt19937_64 rng(1);
    Tensor A = random_tensor({3, 4}, rng);
    Tensor B = random_tensor({4, 2}, rng);
    auto res = grad_check({{"A", A}}, [&] { return ad::sum(ad::matmul(A, B)); }, 1e-5);
    EXPECT_LT(res.max_rel_err, 1e-6) << res.worst;
}

TEST(Softmax, UniformForEqualInputs) {
    Tensor y = ad::softmax(Tensor({3}, {0, 0, 0}), 0);
    for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
    Tensor y = ad::softmax(Tensor({2}, {1000, 0}), 0);
    EXPECT_EQ(y[0], 1.0);
    EXPECT_GE(y[1], 0.0);
    EXPECT_LT(y[1], 1e-300);
    EXPECT_TRUE(std::isfinite(y[1]));
}

TEST(Softmax, SingletonIsOne) { EXPECT_EQ(ad::softmax(Tensor({1}, {-42.0}), 0)[0], 1.0); }

TEST(Softmax, AxisOutOfRangeIsAnError) { EXPECT_THROW(ad::softmax(Tensor::zeros({2, 3}), 2), ad::ShapeError); }

TEST(Softmax, SlicesSumToOneAlongEitherAxis) {
    std::mt19937_64 rng(3);
    for (int seed = 0; seed < 20; ++seed) {
        Tensor x = Tensor::uniform({3, 4, 5}, -20, 20, rng);
        for (std::size_t axis = 0; axis < 3; ++axis) {
            Tensor y = ad::softmax(x, axis);
            const auto& s = x.shape();
            std::size_t inner = 1;
            for (std::size_t i = axis + 1; i < 3; ++i) inner *= s[i];
            std::size_t outer = x.size() / (s[axis] * inner);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    double total = 0.0;
                    for (std::size_t j = 0; j < s[axis]; ++j) {
                        const double v = y[o * s[axis] * inner + j * inner + in];
                        EXPECT_GE(v, 0.0);
                        total += v;
                    }
                    EXPECT_NEAR(total, 1.0, 1e-12);
                }
        }
    }
}

TEST(MaskedSoftmax, MaskedEntriesAreZeroAndEmptyRowsVanish) {
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor y = ad::masked_softmax(x, ad::Mask{1, 0, 1, 0, 0, 0});
    EXPECT_EQ(y[1], 0.0);
    EXPECT_NEAR(y[0] + y[2], 1.0, 1e-15);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(y[3 + c], 0.0);
}

TEST(Elementwise, ReluAtNegativeHasZeroValueAndGradient) {
    Tensor x = Tensor::scalar(-2.0).set_requires_grad(true);
    ad::Tape tape;
    Tensor y;
    {
        ad::TapeScope scope(tape);
        y = ad::relu(x);
    }
    tape.backward(y);
    EXPECT_EQ(y.item(), 0.0);
    EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Elementwise, TanhAtZero) {
    Tensor x = Tensor::scalar(0.0).set_requires_grad(true);
    ad::Tape tape;
    Tensor y;
    {
        ad::TapeScope scope(tape);
        y = ad::tanh(x);
    }
    tape.backward(y);
    EXPECT_EQ(y.item(), 0.0);
    EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Elementwise, LogClampedAtZeroIsFinite) {
    Tensor y = ad::log_clamped(Tensor::scalar(0.0));
    EXPECT_EQ(y.item(), std::log(1e-8));
}

TEST(Elementwise, BroadcastRules) {
    Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor row = ad::add(a, Tensor({3}, {10, 20, 30}));
    EXPECT_EQ(row[4], 25.0);
    Tensor s = ad::mul(a, Tensor::scalar(2.0));
    EXPECT_EQ(s[5], 12.0);
    EXPECT_THROW(ad::add(a, Tensor::zeros({2})), ad::ShapeError);
    EXPECT_THROW(ad::add(a, Tensor::zeros({3, 2})), ad::ShapeError);
}

TEST(Backward, SumGivesOnes) {
    std::mt19937_64 rng(5);
    Tensor x = random_tensor({2, 3}, rng);
    ad::Tape tape;
    Tensor loss;
    {
        ad::TapeScope scope(tape);
        loss = ad::sum(x);
    }
    tape.backward(loss);
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SumOfSquaresGivesTwiceInput) {
    std::mt19937_64 rng(6);
    Tensor x = random_tensor({4}, rng);
    ad::Tape tape;
    Tensor loss;
    {
        ad::TapeScope scope(tape);
        loss = ad::sum(ad::mul(x, x));
    }
    tape.backward(loss);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * x[i]);
}

TEST(Backward, RepeatedCallsAccumulate) {
    Tensor x({2}, {1.5, -0.5}, true);
    ad::Tape tape;
    Tensor loss;
    {
        ad::TapeScope scope(tape);
        loss = ad::sum(ad::mul(x, x));
    }
    tape.backward(loss);
    tape.backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], -2.0);
}

TEST(Backward, NonScalarLossIsRejected) {
    Tensor x({2}, {1, 2}, true);
    ad::Tape tape;
    Tensor y;
    {
        ad::TapeScope scope(tape);
        y = ad::scale(x, 2.0);
    }
    EXPECT_THROW(tape.backward(y), ad::ShapeError);
}

TEST(Backward, LossFromAnotherTapeIsRejected) {
    Tensor x({2}, {1, 2}, true);
    ad::Tape a, b;
    Tensor loss;
    {
        ad::TapeScope scope(a);
        loss = ad::sum(x);
    }
    EXPECT_THROW(b.backward(loss), std::logic_error);
}

TEST(Backward, DoesNotMutateForwardValues) {
    std::mt19937_64 rng(8);
    Tensor x = random_tensor({3, 3}, rng);
    Tensor w = random_tensor({3, 2}, rng);
    ad::Tape tape;
    Tensor h, loss;
    {
        ad::TapeScope scope(tape);
        h = ad::tanh(ad::matmul(x, w));
        loss = ad::sum(ad::softmax(h, 1));
    }
    std::vector<double> before(h.data().begin(), h.data().end());
    std::vector<double> xb(x.data().begin(), x.data().end());
    tape.backward(loss);
    EXPECT_TRUE(std::equal(before.begin(), before.end(), h.data().begin()));
    EXPECT_TRUE(std::equal(xb.begin(), xb.end(), x.data().begin()));
}

TEST(Backward, RecordsInExecutionOrder) {
    Tensor x({2}, {1, 2}, true);
    ad::Tape tape;
    {
        ad::TapeScope scope(tape);
        ad::sum(ad::tanh(ad::scale(x, 3.0)));
    }
    ASSERT_EQ(tape.size(), 3u);
    EXPECT_STREQ(tape.records()[0].name, "scale");
    EXPECT_STREQ(tape.records()[1].name, "tanh");
    EXPECT_STREQ(tape.records()[2].name, "sum");
    // Each record's inputs come from earlier records or leaves.
    for (std::size_t i = 0; i < tape.size(); ++i)
        for (const auto& in : tape.records()[i].inputs)
            for (std::size_t j = i; j < tape.size(); ++j) EXPECT_NE(in, tape.records()[j].output);
}

TEST(Backward, WithoutTapeNothingIsRecorded) {
    Tensor x({2}, {1, 2}, true);
    Tensor y = ad::scale(x, 2.0);
    EXPECT_FALSE(y.requires_grad());
}

// Every primitive against central differences, 20 seeds each.
class PrimitiveGradients : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradients, MatchFiniteDifferences) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(GetParam()) + 100);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({3, 4}, rng);
    Tensor v = random_tensor({4}, rng);
    Tensor s = random_tensor({1}, rng);
    Tensor m = random_tensor({4, 2}, rng);
    Tensor gain = random_tensor({4}, rng);
    Tensor bias = random_tensor({4}, rng);
    Tensor pos = Tensor::uniform({3, 4}, 0.05, 1.0, rng, true);
    Tensor weights = random_tensor({2, 3}, rng);
    // Per-element probes keep every output component in the check.
    Tensor probe = random_tensor({3, 4}, rng, false);
    auto dot = [&](const Tensor& t) { return ad::sum(ad::mul(t, probe)); };
    const std::vector<std::int64_t> gather_idx{2, -1, 0};
    const std::vector<std::int64_t> bag_idx{0, 2, -1, 1, 1, 2};
    const ad::Mask mask{1, 0, 1, 1, 1, 1, 0, 0, 0, 1, 1, 1};

    const std::vector<std::pair<const char*, std::function<Tensor()>>> cases = {
        {"add", [&] { return dot(ad::add(a, b)); }},
        {"add_trailing", [&] { return dot(ad::add(a, v)); }},
        {"sub_scalar", [&] { return dot(ad::sub(a, s)); }},
        {"mul", [&] { return dot(ad::mul(a, b)); }},
        {"mul_trailing", [&] { return dot(ad::mul(a, v)); }},
        {"scale", [&] { return dot(ad::scale(a, -1.7)); }},
        {"add_scalar", [&] { return dot(ad::add_scalar(a, 0.3)); }},
        {"tanh", [&] { return dot(ad::tanh(a)); }},
        {"relu", [&] { return dot(ad::relu(a)); }},
        {"sigmoid", [&] { return dot(ad::sigmoid(a)); }},
        {"gelu", [&] { return dot(ad::gelu(a)); }},
        {"log_clamped", [&] { return dot(ad::log_clamped(pos)); }},
        {"softmax0", [&] { return dot(ad::softmax(a, 0)); }},
        {"softmax1", [&] { return dot(ad::softmax(a, 1)); }},
        {"masked_softmax", [&] { return dot(ad::masked_softmax(a, mask)); }},
        {"layer_norm", [&] { return dot(ad::layer_norm(a, gain, bias)); }},
        {"matmul_transpose", [&] { return ad::sum(ad::mul(ad::matmul(a, m), ad::transpose(ad::matmul(ad::transpose(m), ad::transpose(b))))); }},
        {"concat", [&] { return ad::sum(ad::mul(ad::concat_last_axis({a, ad::slice_cols(b, 1, 2)}), ad::concat_last_axis({probe, ad::slice_cols(probe, 0, 2)}))); }},
        {"concat_rows", [&] { return ad::sum(ad::mul(ad::concat_rows({ad::slice_rows(a, 0, 2), ad::slice_rows(b, 2, 1)}), probe)); }},
        {"reshape", [&] { return ad::sum(ad::mul(ad::reshape(a, {4, 3}), ad::reshape(probe, {4, 3}))); }},
        {"gather_rows", [&] { return ad::sum(ad::mul(ad::gather_rows(a, gather_idx), probe)); }},
        {"weighted_gather", [&] { return ad::sum(ad::mul(ad::weighted_gather(a, bag_idx, weights), ad::slice_rows(probe, 0, 2))); }},
        {"mean", [&] { return ad::mean(ad::mul(a, a)); }},
    };
    std::vector<std::pair<std::string, Tensor>> params = {{"a", a}, {"b", b}, {"v", v}, {"s", s}, {"m", m},
                                                          {"gain", gain}, {"bias", bias}, {"pos", pos}, {"weights", weights}};
    for (const auto& [name, fn] : cases) {
        auto res = grad_check(params, fn, 1e-4);
        EXPECT_LT(res.max_rel_err, 1e-4) << name << ": " << res.worst;
    }
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGradients, ::testing::Range(0, 20));

TEST(Dropout, ZeroRateIsIdentityAndSeededMaskIsReproducible) {
    std::mt19937_64 rng(1);
    Tensor x = Tensor::uniform({4, 4}, -1, 1, rng);
    std::mt19937_64 r0(9);
    EXPECT_TRUE(ad::dropout(x, 0.0, r0).same(x));
    std::mt19937_64 r1(9), r2(9);
    Tensor y1 = ad::dropout(x, 0.5, r1), y2 = ad::dropout(x, 0.5, r2);
    for (std::size_t i = 0; i < x.size(); ++i) {
        EXPECT_EQ(y1[i], y2[i]);
        EXPECT_TRUE(y1[i] == 0.0 || y1[i] == 2.0 * x[i]);
    }
}

TEST(Tensor, ShapeAndDataMustAgree) {
    EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ad::ShapeError);
    EXPECT_THROW(Tensor::zeros({0, 2}), ad::ShapeError);
}
