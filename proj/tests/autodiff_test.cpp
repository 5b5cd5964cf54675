#include <gtest/gtest.h>

#include <cmath>

#include "setpose/autodiff.hpp"
#include "setpose/gradcheck.hpp"
#include "setpose/nn.hpp"
#include "setpose/optim.hpp"

using namespace setpose;
using Tf = ad::Tensor<float>;
using Td = ad::Tensor<double>;

TEST(Autodiff, ReluForwardBackward) {
    auto x = Tf::parameter(1, 2, {-1.f, 2.f});
    auto y = ad::relu(x);
    EXPECT_EQ(y.value(), (std::vector<float>{0.f, 2.f}));
    ad::backward(ad::sum(y));
    EXPECT_EQ(x.grad(), (std::vector<float>{0.f, 1.f}));
}

TEST(Autodiff, SoftmaxOfZeros) {
    auto y = ad::softmax(Tf::constant(1, 2, {0.f, 0.f}));
    EXPECT_FLOAT_EQ(y(0, 0), 0.5f);
    EXPECT_FLOAT_EQ(y(0, 1), 0.5f);
}

TEST(Autodiff, SoftmaxRowsSumToOne) {
    RngStream rng(3, "softmax");
    for (int t = 0; t < 50; ++t) {
        const std::size_t r = 1 + rng.below(5), c = 1 + rng.below(30);
        std::vector<float> v(r * c);
        for (auto& x : v) x = float(rng.uniform(-20, 20));
        auto y = ad::softmax(Tf::constant(r, c, v));
        for (std::size_t i = 0; i < r; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < c; ++j) s += y(i, j);
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(Autodiff, ScalarGradients) {
    auto x = Td::parameter(1, 1, {3.0});
    ad::backward(ad::square(x));
    EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);

    auto a = Td::parameter(1, 1, {2.0});
    auto b = Td::parameter(1, 1, {5.0});
    ad::backward(a * b);
    EXPECT_DOUBLE_EQ(a.grad()[0], 5.0);
    EXPECT_DOUBLE_EQ(b.grad()[0], 2.0);
}

TEST(Autodiff, MatmulFloatMatchesFiniteDifferences) {
    RngStream rng(11, "matmul");
    std::vector<float> av(6), bv(3);
    for (auto& x : av) x = float(rng.uniform(-1, 1));
    for (auto& x : bv) x = float(rng.uniform(-1, 1));
    auto a = Tf::parameter(2, 3, av);
    auto b = Tf::parameter(3, 1, bv);
    auto y = ad::matmul(a, b);
    ASSERT_EQ(y.rows(), 2u);
    ASSERT_EQ(y.cols(), 1u);
    ad::backward(ad::sum(ad::mul(y, Tf::constant(2, 1, {0.7f, -1.3f}))));
    auto f = [&](const std::vector<float>& A, const std::vector<float>& B) {
        double s = 0;
        const double w[2] = {0.7, -1.3};
        for (int i = 0; i < 2; ++i)
            for (int k = 0; k < 3; ++k) s += w[i] * A[i * 3 + k] * B[k];
        return s;
    };
    const float h = 1e-2f;
    for (std::size_t i = 0; i < 6; ++i) {
        auto p = av, m = av;
        p[i] += h;
        m[i] -= h;
        const double num = (f(p, bv) - f(m, bv)) / (2 * h);
        EXPECT_LT(std::abs(num - a.grad()[i]) / std::max({std::abs(num), 1e-6}), 1e-3);
    }
    for (std::size_t i = 0; i < 3; ++i) {
        auto p = bv, m = bv;
        p[i] += h;
        m[i] -= h;
        const double num = (f(av, p) - f(av, m)) / (2 * h);
        EXPECT_LT(std::abs(num - b.grad()[i]) / std::max({std::abs(num), 1e-6}), 1e-3);
    }
}

TEST(Autodiff, BackwardNeedsScalar) {
    auto x = Td::parameter(2, 1, {1.0, 2.0});
    EXPECT_THROW(ad::backward(x * x), NotScalar);
}

TEST(Autodiff, ShapeMismatchIsReported) {
    EXPECT_THROW(ad::matmul(Td::zeros(2, 3), Td::zeros(2, 3)), ShapeMismatch);
    EXPECT_THROW(ad::add(Td::zeros(2, 3), Td::zeros(3, 2)), ShapeMismatch);
    EXPECT_THROW(ad::concat<double>({Td::zeros(2, 3), Td::zeros(2, 2)}, 0), ShapeMismatch);
}

TEST(Autodiff, GradientsAccumulateAcrossUses) {
    auto x = Td::parameter(1, 1, {2.0});
    ad::backward(x * x * x + x);  // 3x^2 + 1
    EXPECT_DOUBLE_EQ(x.grad()[0], 13.0);
}

TEST(Autodiff, NoGradGuardRecordsNothing) {
    auto x = Td::parameter(1, 1, {2.0});
    ad::NoGradGuard g;
    auto y = ad::square(x);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.node()->parents.empty());
}

TEST(Autodiff, DropoutEvalIsIdentity) {
    RngStream rng(5, "dropout");
    std::vector<float> v(200);
    for (auto& x : v) x = float(rng.normal());
    auto x = Tf::constant(10, 20, v);
    auto y = ad::dropout(x, 0.5, false, rng);
    EXPECT_EQ(y.value(), v);
}

TEST(Autodiff, DropoutTrainScalesSurvivors) {
    RngStream rng(5, "dropout");
    auto x = Tf::full(100, 100, 1.f);
    auto y = ad::dropout(x, 0.5, true, rng);
    std::size_t kept = 0;
    for (float v : y.value()) {
        EXPECT_TRUE(v == 0.f || v == 2.f);
        kept += v != 0.f;
    }
    EXPECT_NEAR(double(kept) / 1e4, 0.5, 0.03);
    RngStream a(9, "m"), b(9, "m");
    EXPECT_EQ(ad::dropout(x, 0.3, true, a).value(), ad::dropout(x, 0.3, true, b).value());
}

TEST(Autodiff, AttentionRowsSumToOne) {
    RngStream rng(2, "attn");
    auto r = [&](std::size_t n, std::size_t d) {
        std::vector<float> v(n * d);
        for (auto& x : v) x = float(rng.normal());
        return Tf::constant(n, d, v);
    };
    ad::AttentionMaps<float> maps;
    auto out = ad::multi_head_attention(r(2 * 5, 8), r(2 * 7, 8), r(2 * 7, 8), 2, 2, &maps);
    EXPECT_EQ(out.rows(), 10u);
    EXPECT_EQ(out.cols(), 8u);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t h = 0; h < 2; ++h)
            for (std::size_t q = 0; q < 5; ++q) {
                double s = 0;
                for (std::size_t k = 0; k < 7; ++k) s += maps.at(b, h, q, k);
                EXPECT_NEAR(s, 1.0, 1e-6);
            }
}

TEST(Autodiff, ChainedMlpMatchesFiniteDifferences) {
    RngStream rng(4, "mlp");
    nn::ParamStore<double> store;
    nn::Mlp<double> mlp(store, "m", {4, 8, 8, 3}, rng, 0.0);
    std::vector<Td> inputs;
    for (const auto& [_, p] : store.entries()) inputs.push_back(Td::constant(p.rows(), p.cols(), p.value()));
    auto x = gradcheck::detail::rand_tensor(rng, 5, 4);
    gradcheck::Fn f = [x](const std::vector<Td>& in) {
        auto h = x;
        for (std::size_t l = 0; l < in.size(); l += 2) {
            h = ad::linear(h, in[l], in[l + 1]);
            if (l + 2 < in.size()) h = ad::sigmoid(h);  // smooth stand-in for ReLU
        }
        return ad::l2sq(h);
    };
    EXPECT_LT(gradcheck::max_relative_error(f, inputs), 1e-4);
}

TEST(Autodiff, EveryOpPassesFiniteDifferences) {
    for (const auto& rep : gradcheck::run(gradcheck::op_cases(), 20, 1234))
        EXPECT_TRUE(rep.passed()) << rep.name << " max rel error " << rep.max_rel_error;
}

TEST(Optim, ClipScalesLargeGradients) {
    nn::ParamStore<double> store;
    auto w = store.add("w", 1, 2, {0.0, 0.0});
    w.mutable_grad() = {6.0, 8.0};  // norm 10
    EXPECT_DOUBLE_EQ(optim::clip_grad_norm(store, 0.1), 10.0);
    EXPECT_NEAR(w.grad()[0], 0.06, 1e-15);
    EXPECT_NEAR(w.grad()[1], 0.08, 1e-15);
}

TEST(Optim, ClipLeavesSmallGradients) {
    nn::ParamStore<double> store;
    auto w = store.add("w", 1, 2, {0.0, 0.0});
    w.mutable_grad() = {0.03, 0.04};  // norm 0.05
    optim::clip_grad_norm(store, 0.1);
    EXPECT_DOUBLE_EQ(w.grad()[0], 0.03);
    EXPECT_DOUBLE_EQ(w.grad()[1], 0.04);
}

TEST(Optim, QuadraticBowlDecreases) {
    nn::ParamStore<double> store;
    auto w = store.add("w", 1, 2, {1.0, 1.0});
    optim::OptimizerState<double> st;
    st.config.lr = 1e-2;
    double prev = 1e300;
    for (int i = 0; i < 100; ++i) {
        store.zero_grad();
        auto loss = ad::l2sq(w);
        const double v = loss.item();
        EXPECT_LT(v, prev) << "step " << i;
        prev = v;
        ad::backward(loss);
        optim::clip_and_step(st, store);
    }
    EXPECT_EQ(st.step, 100u);
}

TEST(Optim, FirstStepMovesByLearningRate) {
    nn::ParamStore<double> store;
    auto w = store.add("w", 1, 1, {1.0});
    w.mutable_grad() = {0.05};
    optim::OptimizerState<double> st;
    st.config.lr = 1e-3;
    st.config.weight_decay = 0.0;
    optim::clip_and_step(st, store);
    // Adam's first bias-corrected step is lr * sign(g).
    EXPECT_NEAR(w.value()[0], 1.0 - 1e-3, 1e-9);
}
