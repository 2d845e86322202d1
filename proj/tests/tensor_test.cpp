#include <gtest/gtest.h>

#include <cmath>

#include "petapter/gradcheck.hpp"
#include "petapter/optim.hpp"
#include "petapter/parameters.hpp"
#include "petapter/rng.hpp"
#include "petapter/tensor.hpp"

namespace pt = petapter;
using pt::Tensor;

namespace {

Tensor<double> random_param(pt::ParameterRegistry<double>& reg, const std::string& name,
                            pt::Shape shape, pt::SplitMix64& rng, double stddev = 0.5) {
    return reg.add(name, pt::gaussian_tensor<double>(std::move(shape), rng, stddev), true);
}

} // namespace

TEST(MatmulTest, IdentityPassesThrough) {
    auto eye = Tensor<float>::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto b = Tensor<float>::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
    auto c = pt::matmul(eye, b);
    EXPECT_EQ(c.values(), b.values());
}

TEST(MatmulTest, HandComputedProduct) {
    auto a = Tensor<float>::from_data({2, 2}, {1, 2, 3, 4});
    auto b = Tensor<float>::from_data({2, 1}, {5, 6});
    auto c = pt::matmul(a, b);
    ASSERT_EQ(c.shape(), (pt::Shape{2, 1}));
    EXPECT_FLOAT_EQ(c.values()[0], 17.0f);
    EXPECT_FLOAT_EQ(c.values()[1], 39.0f);
}

TEST(MatmulTest, ZeroAnnihilates) {
    auto a = Tensor<float>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    auto z = Tensor<float>::zeros({3, 4});
    auto c = pt::matmul(a, z);
    for (float v : c.values()) {
        EXPECT_EQ(v, 0.0f);
    }
}

TEST(MatmulTest, ShapeMismatchNamesBothShapes) {
    auto a = Tensor<float>::zeros({2, 3});
    auto b = Tensor<float>::zeros({4, 2});
    try {
        pt::matmul(a, b);
        FAIL() << "expected DimensionError";
    } catch (const pt::DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[4x2]"), std::string::npos) << msg;
    }
}

TEST(GeluTest, KnownValues) {
    auto x = Tensor<double>::from_data({3}, {0.0, 10.0, 1.0});
    auto y = pt::gelu(x);
    EXPECT_DOUBLE_EQ(y.values()[0], 0.0);
    EXPECT_NEAR(y.values()[1], 10.0, 1e-6);
    EXPECT_NEAR(y.values()[2], 0.841345, 1e-5);
}

TEST(LayerNormTest, ConstantRowGoesToZero) {
    auto x = Tensor<double>::from_data({1, 4}, {3.0, 3.0, 3.0, 3.0});
    auto gamma = Tensor<double>::full({4}, 1.0);
    auto beta = Tensor<double>::zeros({4});
    auto y = pt::layer_norm(x, gamma, beta);
    for (double v : y.values()) {
        EXPECT_NEAR(v, 0.0, 1e-9);
    }
}

TEST(LayerNormTest, UnitVariancePreserved) {
    auto x = Tensor<double>::from_data({1, 2}, {1.0, -1.0});
    auto gamma = Tensor<double>::full({2}, 1.0);
    auto beta = Tensor<double>::zeros({2});
    auto y = pt::layer_norm(x, gamma, beta);
    EXPECT_NEAR(y.values()[0], 1.0, 1e-4);
    EXPECT_NEAR(y.values()[1], -1.0, 1e-4);
}

TEST(LayerNormTest, ZeroGammaYieldsBeta) {
    auto x = Tensor<double>::from_data({2, 3}, {1, -4, 2, 0, 9, 3});
    auto gamma = Tensor<double>::zeros({3});
    auto beta = Tensor<double>::full({3}, 0.25);
    auto y = pt::layer_norm(x, gamma, beta);
    for (double v : y.values()) {
        EXPECT_DOUBLE_EQ(v, 0.25);
    }
}

TEST(BackwardTest, RequiresScalar) {
    auto x = Tensor<double>::from_data({2}, {1.0, 2.0}).set_requires_grad(true);
    auto y = pt::scale(x, 2.0);
    EXPECT_THROW(y.backward(), pt::ContractError);
}

TEST(BackwardTest, AccumulatesAcrossCalls) {
    auto x = Tensor<double>::from_data({3}, {1.0, -2.0, 0.5}).set_requires_grad(true);
    auto loss = pt::sum_all(pt::mul(x, x));
    loss.backward();
    const std::vector<double> once = x.grad();
    loss.backward();
    for (std::size_t i = 0; i < once.size(); ++i) {
        EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * once[i]);
        EXPECT_DOUBLE_EQ(once[i], 2.0 * x.values()[i]);
    }
}

TEST(BackwardTest, SharedOperandAccumulatesBothPaths) {
    // f = sum(x*x) + sum(x) -> df/dx = 2x + 1
    auto x = Tensor<double>::from_data({2}, {3.0, -1.0}).set_requires_grad(true);
    auto loss = pt::add(pt::sum_all(pt::mul(x, x)), pt::sum_all(x));
    loss.backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], -1.0);
}

TEST(NoGradTest, InferenceRecordsNothing) {
    auto x = Tensor<double>::from_data({2}, {1.0, 2.0}).set_requires_grad(true);
    pt::NoGradGuard guard;
    auto y = pt::sum_all(pt::mul(x, x));
    EXPECT_FALSE(y.requires_grad());
}

TEST(GradCheckTest, QuadraticIsExact) {
    pt::ParameterRegistry<double> reg;
    pt::SplitMix64 rng(1);
    auto theta = random_param(reg, "theta", {8}, rng);
    const double err = pt::grad_check([&] { return pt::sum_all(pt::mul(theta, theta)); }, reg);
    EXPECT_LT(err, 1e-9);
}

TEST(GradCheckTest, FrozenParameterIsExcluded) {
    pt::ParameterRegistry<double> reg;
    pt::SplitMix64 rng(2);
    auto theta = random_param(reg, "theta", {4}, rng);
    auto frozen = reg.add("frozen", pt::gaussian_tensor<double>({4}, rng, 0.5), false);
    // The loss ignores the frozen tensor entirely; grad_check must not probe it.
    const double err = pt::grad_check([&] { return pt::sum_all(pt::mul(theta, theta)); }, reg);
    EXPECT_LT(err, 1e-9);
    EXPECT_FALSE(frozen.has_grad());
}

TEST(GradCheckTest, NonFiniteLossRaisesNumericError) {
    pt::ParameterRegistry<double> reg;
    auto theta = reg.add("theta", Tensor<double>::full({1}, 1e300), true);
    EXPECT_THROW(pt::grad_check([&] { return pt::mul(theta, theta); }, reg), pt::NumericError);
}

// Composite gradients for every differentiable op, checked against central
// finite differences on random small tensors in f64.
TEST(GradCheckTest, AllOpsBelow1em6) {
    pt::ParameterRegistry<double> reg;
    pt::SplitMix64 rng(3);
    auto a = random_param(reg, "a", {3, 4}, rng);
    auto b = random_param(reg, "b", {4, 2}, rng);
    auto w = random_param(reg, "w", {5, 4}, rng);
    auto bias = random_param(reg, "bias", {5}, rng);
    auto gamma = random_param(reg, "gamma", {5}, rng);
    auto beta = random_param(reg, "beta", {5}, rng);
    auto cscale = random_param(reg, "cscale", {5}, rng);
    auto q = random_param(reg, "q", {3, 4}, rng);
    auto k = random_param(reg, "k", {3, 4}, rng);
    auto v = random_param(reg, "v", {3, 4}, rng);

    auto loss_fn = [&] {
        auto mm = pt::matmul(a, b);                       // [3x2]
        auto lin = pt::linear(a, w, bias);                // [3x5]
        auto ln = pt::layer_norm(lin, gamma, beta);       // [3x5]
        auto act = pt::gelu(ln);
        auto scaled = pt::col_scale(act, cscale);
        auto th = pt::tanh_act(mm);
        auto probs = pt::attention_probs(q, k, 2, {1, 1, 0});
        auto mixed = pt::attention_mix(probs, v);
        auto rows = pt::take_rows(mixed, {2, 0});
        auto cols = pt::take_cols(scaled, {4, 1, 1});
        auto gs = pt::gather_sum(cols, {{0, 2, 1}, {1, 1, 0}});
        auto ce = pt::cross_entropy(gs, 1);
        return pt::add(pt::add(pt::sum_all(rows), pt::sum_all(cols)),
                       pt::add(pt::add(pt::sum_all(th), ce), pt::scale(pt::sum_all(gs), 0.5)));
    };
    const double err = pt::grad_check(loss_fn, reg);
    EXPECT_LT(err, 1e-6);
}

TEST(ForwardTest, DeterministicForIdenticalInputs) {
    pt::SplitMix64 rng(7);
    auto x = pt::gaussian_tensor<float>({4, 8}, rng, 1.0);
    auto w = pt::gaussian_tensor<float>({8, 8}, rng, 1.0);
    auto y1 = pt::matmul(x, w);
    auto y2 = pt::matmul(x, w);
    EXPECT_EQ(y1.values(), y2.values());
}

TEST(ForwardTest, FiniteOnFiniteInputs) {
    pt::SplitMix64 rng(11);
    auto x = pt::gaussian_tensor<double>({6, 8}, rng, 3.0);
    auto gamma = Tensor<double>::full({8}, 1.0);
    auto beta = Tensor<double>::zeros({8});
    auto y = pt::gelu(pt::layer_norm(x, gamma, beta));
    auto probs = pt::attention_probs(y, y, 4, {1, 1, 1, 1, 1, 1});
    EXPECT_TRUE(pt::all_finite(y));
    EXPECT_TRUE(pt::all_finite(probs));
}

TEST(AttentionTest, RowsAreDistributions) {
    pt::SplitMix64 rng(13);
    auto q = pt::gaussian_tensor<double>({5, 8}, rng, 1.0);
    auto k = pt::gaussian_tensor<double>({5, 8}, rng, 1.0);
    auto probs = pt::attention_probs(q, k, 2, {1, 1, 1, 0, 1});
    const std::size_t heads = 2, n = 5;
    for (std::size_t hh = 0; hh < heads; ++hh) {
        for (std::size_t i = 0; i < n; ++i) {
            double sum = 0;
            for (std::size_t j = 0; j < n; ++j) {
                const double p = probs.values()[(hh * n + i) * n + j];
                EXPECT_GE(p, 0.0);
                sum += p;
            }
            EXPECT_NEAR(sum, 1.0, 1e-5);
            EXPECT_EQ(probs.values()[(hh * n + i) * n + 3], 0.0); // masked key
        }
    }
}

TEST(AdamTest, ZeroGradientLeavesParametersUnchanged) {
    pt::ParameterRegistry<float> reg;
    auto theta = reg.add("theta", Tensor<float>::from_data({3}, {1, 2, 3}), true);
    theta.grad(); // allocate zero grads
    pt::Adam<float> adam({0.1, 0.9, 0.999, 1e-8});
    adam.step(reg);
    EXPECT_EQ(theta.values(), (std::vector<float>{1, 2, 3}));
}

TEST(AdamTest, FirstStepMovesByLearningRate) {
    pt::ParameterRegistry<double> reg;
    auto theta = reg.add("theta", Tensor<double>::zeros({1}), true);
    theta.grad()[0] = 1.0;
    pt::Adam<double> adam({0.1, 0.9, 0.999, 1e-8});
    adam.step(reg);
    // Bias-corrected first step has magnitude ~lr.
    EXPECT_NEAR(theta.values()[0], -0.1, 1e-8);
    // Gradient was consumed.
    EXPECT_DOUBLE_EQ(theta.grad()[0], 0.0);
}

TEST(AdamTest, NonTrainableIsBitIdentical) {
    pt::ParameterRegistry<float> reg;
    auto frozen = reg.add("frozen", Tensor<float>::from_data({2}, {1.5f, -2.5f}), false);
    auto theta = reg.add("theta", Tensor<float>::from_data({1}, {1.0f}), true);
    const std::vector<float> before = frozen.values();
    pt::Adam<float> adam({0.1, 0.9, 0.999, 1e-8});
    for (int i = 0; i < 10; ++i) {
        theta.grad()[0] = 0.3f;
        adam.step(reg);
    }
    EXPECT_EQ(frozen.values(), before);
    EXPECT_FALSE(adam.has_moments("frozen"));
    EXPECT_NE(theta.values()[0], 1.0f);
}

TEST(AdamTest, MissingGradIsContractError) {
    pt::ParameterRegistry<float> reg;
    reg.add("theta", Tensor<float>::zeros({2}), true);
    pt::Adam<float> adam;
    EXPECT_THROW(adam.step(reg), pt::ContractError);
}

TEST(RegistryTest, DuplicateNameRejected) {
    pt::ParameterRegistry<float> reg;
    reg.add("w", Tensor<float>::zeros({2}), true);
    EXPECT_THROW(reg.add("w", Tensor<float>::zeros({2}), true), pt::ContractError);
}

TEST(RegistryTest, CountsTrainableScalars) {
    pt::ParameterRegistry<float> reg;
    reg.add("a", Tensor<float>::zeros({2, 3}), true);
    reg.add("b", Tensor<float>::zeros({4}), false);
    EXPECT_EQ(reg.total_scalars(), 10u);
    EXPECT_EQ(reg.trainable_scalars(), 6u);
}
