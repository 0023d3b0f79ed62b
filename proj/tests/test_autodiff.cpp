#include <gtest/gtest.h>

#include <cmath>

#include "aff/attention.hpp"
#include "aff/autodiff.hpp"
#include "aff/fusion.hpp"
#include "aff/gradcheck.hpp"
#include "aff/optim.hpp"
#include "oracles.hpp"

using aff::BranchScale;
using aff::CheckResult;
using aff::CheckScope;
using aff::CheckUnit;
using aff::Mode;
using aff::OptimKind;
using aff::Optimizer;
using aff::Parameter;
using aff::Rng;
using aff::Schedule;
using aff::Shape;
using aff::Tape;
using aff::Tensor;
using aff::Var;

namespace {

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    EXPECT_EQ(a.shape(), b.shape());
    double m = 0;
    for (std::int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST(TapeForward, SingleReluNodeMatchesKernel) {
    Rng rng(1);
    Tensor<double> x = Tensor<double>::uniform({1, 2, 3, 3}, rng);
    Tape<double> t;
    Var<double> xv = t.input(x);
    Var<double> out = t.relu(xv);
    Tensor<double> direct = aff::relu(x);
    EXPECT_EQ(max_abs_diff(t.value(out), direct), 0.0);
}

TEST(TapeForward, DiamondIsOneMulNodeWithDoubleFanIn) {
    Tensor<double> x = Tensor<double>::full({1, 1, 1, 1}, 3.0);
    Tape<double> t;
    Var<double> xv = t.input(x);
    Var<double> z = t.mul(xv, xv);
    EXPECT_EQ(t.node_count(), 2);
    ASSERT_EQ(t.node(z.idx).parents.size(), 2u);
    EXPECT_EQ(t.node(z.idx).parents[0], xv.idx);
    EXPECT_EQ(t.node(z.idx).parents[1], xv.idx);
}

TEST(TapeForward, MsCamMatchesHandComposedKernels) {
    Rng rng(2);
    auto cam = aff::MsCam<double>::make(8, 4, rng);
    auto clone = cam;  // value-type deep copy, independent running stats
    Tensor<double> x = Tensor<double>::uniform({2, 8, 5, 5}, rng);

    Tape<double> t;
    Var<double> xv = t.input(x);
    Var<double> m = cam.weight_map(t, xv, Mode::train);

    auto branch = [&](aff::BottleneckBranch<double>& b, const Tensor<double>& in) {
        Tensor<double> h = in;
        if (b.scale == BranchScale::global) h = aff::global_avg_pool(h);
        h = b.pw1.forward_plain(h);
        h = b.bn1.forward_plain(h, Mode::train);
        h = aff::relu(h);
        h = b.pw2.forward_plain(h);
        return b.bn2.forward_plain(h, Mode::train);
    };
    Tensor<double> local = branch(clone.branches[0], x);
    Tensor<double> global = branch(clone.branches[1], x);
    Tensor<double> hand = aff::sigmoid(aff::broadcast_add(local, global));

    EXPECT_LT(max_abs_diff(t.value(m), hand), 1e-12);
}

TEST(TapeBackward, IdentityChainGradIsOne) {
    Rng rng(3);
    Tensor<double> x = Tensor<double>::uniform({1, 2, 3, 3}, rng);
    Tape<double> t;
    Var<double> xv = t.input(x);
    Var<double> z = t.affine(xv, 1.0, 0.0);  // z = x
    t.backward(z);
    const Tensor<double>& g = t.grad(xv);
    for (std::int64_t i = 0; i < g.size(); ++i) EXPECT_DOUBLE_EQ(g[i], 1.0);
}

TEST(TapeBackward, ProductRuleOnDiamond) {
    Tensor<double> x = Tensor<double>::full({1, 1, 1, 1}, 3.0);
    Tape<double> t;
    Var<double> xv = t.input(x);
    Var<double> z = t.mul(xv, xv);
    t.backward(z);
    EXPECT_DOUBLE_EQ(t.grad(xv)[0], 6.0);
}

TEST(TapeBackward, FanOutGradEqualsSumOfBranchGrads) {
    Rng rng(4);
    Tensor<double> x = Tensor<double>::uniform({1, 2, 2, 2}, rng);
    Tensor<double> a = Tensor<double>::uniform({1, 2, 2, 2}, rng);
    Tensor<double> b = Tensor<double>::uniform({1, 2, 2, 2}, rng);
    Tape<double> t;
    Var<double> xv = t.input(x);
    Var<double> av = t.constant(a);
    Var<double> bv = t.constant(b);
    Var<double> z = t.add(t.mul(xv, av), t.mul(xv, bv));
    t.backward(z);
    const Tensor<double>& g = t.grad(xv);
    for (std::int64_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], a[i] + b[i], 1e-15);
}

TEST(TapeBackward, BackwardOnEmptyTapeIsStateError) {
    Tape<double> t;
    EXPECT_THROW(t.backward(Var<double>{0}), aff::StateError);
}

TEST(TapeBackward, GradBeforeBackwardIsStateError) {
    Tape<double> t;
    Var<double> x = t.input(Tensor<double>::full({1, 1, 1, 1}, 1.0));
    EXPECT_THROW(t.grad(x), aff::StateError);
}

TEST(TapeBackward, SeedShapeMismatchIsDimensionError) {
    Tape<double> t;
    Var<double> x = t.input(Tensor<double>::full({1, 1, 2, 2}, 1.0));
    EXPECT_THROW(t.backward(x, Tensor<double>(Shape{1, 1, 1, 1})), aff::DimensionError);
}

TEST(TapeBackward, KernelErrorCarriesNodePath) {
    Tape<double> t;
    Var<double> x = t.input(Tensor<double>::zeros({1, 2, 4, 4}));
    Var<double> w = t.constant(Tensor<double>::zeros({3, 3, 1, 1}));
    try {
        t.conv2d(x, w, Var<double>{}, 1, 0, "stem_conv");
        FAIL() << "expected DimensionError";
    } catch (const aff::DimensionError& e) {
        EXPECT_NE(std::string(e.what()).find("[stem_conv]"), std::string::npos) << e.what();
    }
}

TEST(GradCheck, EveryPrimitiveOpUnderTolerance) {
    Rng rng(5);
    auto units = aff::build_check_suite<double>(CheckScope::ops, rng);
    ASSERT_FALSE(units.empty());
    for (auto& u : units) {
        CheckResult<double> r = aff::grad_check(u, rng);
        EXPECT_TRUE(r.pass) << u.name << " rel err " << r.max_rel_err;
        EXPECT_LT(r.max_rel_err, 1e-4) << u.name;
    }
}

TEST(GradCheck, LinearSubgraphNearRoundoff) {
    Rng rng(6);
    auto unit = aff::make_linear_unit<double>();
    CheckResult<double> r = aff::grad_check(unit, rng);
    // Linear graph: zero truncation error, so what remains is cancellation in
    // the central difference, of order eps/step per unit value.
    EXPECT_LT(r.max_rel_err, 1e-8);
}

TEST(GradCheck, SigmoidDerivativeAtZeroIsQuarter) {
    Tape<double> t;
    Var<double> x = t.input(Tensor<double>::zeros({1, 1, 1, 1}));
    Var<double> s = t.sigmoid(x);
    t.backward(s);
    EXPECT_NEAR(t.grad(x)[0], 0.25, 1e-15);

    // and the finite-difference harness agrees
    Rng rng(7);
    auto unit = aff::detail::input_unit<double>(
        "sigmoid_at_zero", {1, 1, 1, 1},
        [](Tape<double>& tp, Var<double> v) { return tp.sigmoid(v); });
    CheckResult<double> r = aff::grad_check(unit, rng);
    EXPECT_TRUE(r.pass);
}

TEST(GradCheck, AffBlockEndToEnd) {
    Rng rng(8);
    auto fm = std::make_shared<aff::FusionModule<double>>(
        aff::FusionModule<double>::make(aff::FusionKind::aff, 4, 2, rng));
    struct St {
        Tensor<double> x, y;
    };
    auto st = std::make_shared<St>();
    st->x = Tensor<double>::uniform({2, 4, 3, 3}, rng);
    st->y = Tensor<double>::uniform({2, 4, 3, 3}, rng);
    CheckUnit<double> u;
    u.name = "aff_block";
    u.state = st;
    u.inputs = {&st->x, &st->y};
    fm->collect(u.params, "aff");
    aff::detail::randomize_params(u.params, rng);
    u.build = [st, fm](Tape<double>& t, std::vector<Var<double>>& iv) {
        Var<double> x = t.input(st->x, true, "x");
        Var<double> y = t.input(st->y, true, "y");
        iv.push_back(x);
        iv.push_back(y);
        return fm->fuse(t, x, y, Mode::train);
    };
    CheckResult<double> r = aff::grad_check(u, rng);
    EXPECT_TRUE(r.pass) << "rel err " << r.max_rel_err;
    EXPECT_LT(r.max_rel_err, 1e-4);
}

TEST(GradCheck, CorruptedBackwardRuleIsFlagged) {
    Rng rng(9);
    auto unit = aff::make_fault_unit<double>();
    CheckResult<double> r = aff::grad_check(unit, rng);
    EXPECT_FALSE(r.pass);
    EXPECT_GT(r.max_rel_err, 1e-4);
    EXPECT_EQ(r.name, "fault_injection");
}

TEST(Optimizer, ZeroGradZeroDecayIsFixedPoint) {
    Rng rng(10);
    Parameter<double> p(Tensor<double>::uniform({3, 2, 1, 1}, rng), "p");
    const Tensor<double> before = p.value;
    Optimizer<double> opt(OptimKind::nesterov_sgd, {&p}, 0.1, 0.9, 0.0);
    p.zero_grad();
    opt.step();
    for (std::int64_t i = 0; i < p.value.size(); ++i) EXPECT_EQ(p.value[i], before[i]);
}

TEST(Optimizer, PlainGradientStep) {
    Parameter<double> p(Tensor<double>::zeros({1, 1, 1, 1}), "p");
    Optimizer<double> opt(OptimKind::nesterov_sgd, {&p}, 0.1, 0.0, 0.0);
    p.grad[0] = 1.0;
    opt.step();
    EXPECT_DOUBLE_EQ(p.value[0], -0.1);
}

TEST(Optimizer, StepScheduleMilestones) {
    Parameter<double> p(Tensor<double>::zeros({1, 1, 1, 1}), "p");
    Optimizer<double> opt(OptimKind::nesterov_sgd, {&p}, 0.2, 0.9, 0.0,
                          Schedule::step({300, 350}, 0.1));
    opt.set_epoch(299);
    EXPECT_NEAR(opt.lr(), 0.2, 1e-12);
    opt.set_epoch(300);
    EXPECT_NEAR(opt.lr(), 0.02, 1e-12);
    opt.set_epoch(350);
    EXPECT_NEAR(opt.lr(), 0.002, 1e-12);
}

TEST(Optimizer, ZeroLrLeavesParamsBitIdentical) {
    Rng rng(11);
    Parameter<double> a(Tensor<double>::uniform({2, 3, 3, 3}, rng), "a");
    Parameter<double> b(Tensor<double>::uniform({4, 1, 1, 1}, rng), "b");
    const Tensor<double> a0 = a.value, b0 = b.value;
    Optimizer<double> opt(OptimKind::nesterov_sgd, {&a, &b}, 0.0, 0.9, 1e-4);
    a.grad = Tensor<double>::uniform(a.grad.shape(), rng);
    b.grad = Tensor<double>::uniform(b.grad.shape(), rng);
    opt.step();
    for (std::int64_t i = 0; i < a.value.size(); ++i) EXPECT_EQ(a.value[i], a0[i]);
    for (std::int64_t i = 0; i < b.value.size(); ++i) EXPECT_EQ(b.value[i], b0[i]);
}

TEST(Optimizer, NegativeLrRejected) {
    Parameter<double> p(Tensor<double>::zeros({1, 1, 1, 1}), "p");
    EXPECT_THROW(Optimizer<double>(OptimKind::nesterov_sgd, {&p}, -0.1, 0.9, 0.0),
                 aff::ConfigError);
}

TEST(Optimizer, NesterovMatchesRecurrenceOracle) {
    Rng rng(12);
    Parameter<double> p(Tensor<double>::uniform({2, 2, 1, 1}, rng), "p");
    const double lr = 0.05, m = 0.9, wd = 1e-3;
    Optimizer<double> opt(OptimKind::nesterov_sgd, {&p}, lr, m, wd);

    Tensor<double> w = p.value;
    Tensor<double> v = Tensor<double>::zeros(w.shape());
    for (int step = 0; step < 4; ++step) {
        Tensor<double> g = Tensor<double>::uniform(w.shape(), rng);
        p.zero_grad();
        for (std::int64_t i = 0; i < g.size(); ++i) p.grad[i] = g[i];
        opt.step();
        for (std::int64_t i = 0; i < w.size(); ++i) {
            const double d = g[i] + wd * w[i];
            v[i] = m * v[i] + d;
            w[i] -= lr * (d + m * v[i]);
        }
        for (std::int64_t i = 0; i < w.size(); ++i) EXPECT_NEAR(p.value[i], w[i], 1e-15);
    }
}

TEST(Optimizer, DecayExemptParamSkipsWeightDecay) {
    Parameter<double> p(Tensor<double>::full({1, 1, 1, 1}, 2.0), "bn.gamma");
    p.decay_exempt = true;
    Optimizer<double> opt(OptimKind::nesterov_sgd, {&p}, 0.1, 0.0, 0.5);
    p.zero_grad();
    opt.step();
    EXPECT_DOUBLE_EQ(p.value[0], 2.0);

    Parameter<double> q(Tensor<double>::full({1, 1, 1, 1}, 2.0), "conv.kernel");
    Optimizer<double> opt2(OptimKind::nesterov_sgd, {&q}, 0.1, 0.0, 0.5);
    q.zero_grad();
    opt2.step();
    EXPECT_LT(q.value[0], 2.0);  // decayed
}

TEST(Optimizer, AdagradStepMagnitudeNonIncreasing) {
    Parameter<double> p(Tensor<double>::zeros({1, 1, 1, 1}), "p");
    Optimizer<double> opt(OptimKind::adagrad, {&p}, 0.1, 0.0, 0.0);
    double prev_step = std::numeric_limits<double>::infinity();
    double prev_acc = 0.0;
    for (int k = 1; k <= 20; ++k) {
        const double before = p.value[0];
        p.grad[0] = 1.0;
        opt.step();
        const double mag = std::abs(p.value[0] - before);
        EXPECT_LE(mag, prev_step);
        EXPECT_GE(opt.accumulator(0)[0], prev_acc);  // monotone accumulator
        // closed form: after k unit gradients a = k
        EXPECT_NEAR(opt.accumulator(0)[0], double(k), 1e-12);
        EXPECT_NEAR(mag, 0.1 / (std::sqrt(double(k)) + 1e-7), 1e-12);
        prev_step = mag;
        prev_acc = opt.accumulator(0)[0];
    }
}

TEST(Optimizer, PolyAndCosineScheduleShapes) {
    Parameter<double> p(Tensor<double>::zeros({1, 1, 1, 1}), "p");
    Optimizer<double> poly(OptimKind::adagrad, {&p}, 1.0, 0.0, 0.0, Schedule::poly(0.9, 100));
    poly.set_epoch(0);
    EXPECT_DOUBLE_EQ(poly.lr(), 1.0);
    poly.set_epoch(100);
    EXPECT_DOUBLE_EQ(poly.lr(), 0.0);
    poly.set_epoch(50);
    EXPECT_NEAR(poly.lr(), std::pow(0.5, 0.9), 1e-12);

    Optimizer<double> cos(OptimKind::nesterov_sgd, {&p}, 1.0, 0.0, 0.0, Schedule::cosine(100));
    cos.set_epoch(0);
    EXPECT_DOUBLE_EQ(cos.lr(), 1.0);
    cos.set_epoch(50);
    EXPECT_NEAR(cos.lr(), 0.5, 1e-12);
    cos.set_epoch(100);
    EXPECT_NEAR(cos.lr(), 0.0, 1e-12);
}

TEST(Parameter, BindingTwiceAccumulatesOnce) {
    // the same Parameter pulled into the tape twice shares one node, so its
    // gradient is not double counted
    Parameter<double> p(Tensor<double>::full({1, 1, 1, 1}, 1.5), "p");
    Tape<double> t;
    Var<double> a = t.param(p);
    Var<double> b = t.param(p);
    EXPECT_EQ(a.idx, b.idx);
    Var<double> z = t.mul(a, b);  // z = p^2
    p.zero_grad();
    t.backward(z);
    EXPECT_DOUBLE_EQ(p.grad[0], 3.0);  // 2p
}

TEST(SoftmaxCeNode, GradientMatchesProbMinusOneHot) {
    Rng rng(13);
    Tensor<double> logits = Tensor<double>::uniform({2, 3, 1, 1}, rng);
    std::vector<int> labels{1, 2};
    Tape<double> t;
    Var<double> lv = t.input(logits);
    Var<double> loss = t.softmax_cross_entropy(lv, labels);
    t.backward(loss);
    const Tensor<double>& g = t.grad(lv);
    for (int n = 0; n < 2; ++n) {
        double denom = 0;
        for (int k = 0; k < 3; ++k) denom += std::exp(logits.at(n, k, 0, 0));
        for (int k = 0; k < 3; ++k) {
            double pk = std::exp(logits.at(n, k, 0, 0)) / denom;
            double expect = (pk - (k == labels[std::size_t(n)] ? 1.0 : 0.0)) / 2.0;
            EXPECT_NEAR(g.at(n, k, 0, 0), expect, 1e-12);
        }
    }
}
