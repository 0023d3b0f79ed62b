#include <gtest/gtest.h>

#include <chrono>
#include <cmath>

#include "aff/analysis.hpp"
#include "aff/gradcheck.hpp"
#include "aff/network.hpp"
#include "baseline_ref.hpp"
#include "oracles.hpp"

using aff::ClassifierNet;
using aff::FpnNet;
using aff::FusionKind;
using aff::InceptionBlock;
using aff::Mode;
using aff::NetworkSpec;
using aff::ResBlock;
using aff::Rng;
using aff::Scenario;
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

template <typename Block>
Tensor<double> run_block(Block& b, const Tensor<double>& x, Mode mode) {
    Tape<double> t;
    Var<double> xv = t.input(x);
    return t.value(b.forward(t, xv, mode, "block"));
}

Tensor<double> run_fuse(aff::FusionModule<double>& f, const Tensor<double>& x,
                        const Tensor<double>& y, Mode mode) {
    Tape<double> t;
    Var<double> xv = t.input(x), yv = t.input(y);
    return t.value(f.fuse(t, xv, yv, mode, "fuse"));
}

// Identity-passing kernel: out channel co copies in channel co at the center.
void set_delta(aff::Conv2dLayer<double>& l) {
    const Shape s = l.kernel.value.shape();
    ASSERT_EQ(s.n, s.c);
    l.kernel.value = Tensor<double>::zeros(s);
    for (int co = 0; co < s.n; ++co) l.kernel.value.at(co, co, s.h / 2, s.w / 2) = 1.0;
}

void zero_conv_and_beta(std::vector<aff::Parameter<double>*>& ps) {
    for (auto* p : ps) {
        if (p->name.find("gamma") != std::string::npos) continue;
        p->value = Tensor<double>::zeros(p->value.shape());
    }
}

NetworkSpec small_spec(Scenario sc, FusionKind kind, int b = 1, int base = 8, int classes = 4) {
    NetworkSpec spec;
    spec.scenario = sc;
    spec.b = b;
    spec.base_channels = base;
    spec.fusion = kind;
    spec.ratio = 4;
    spec.num_classes = classes;
    return spec;
}

}  // namespace

// ---- residual blocks ----

TEST(ResBlockBuilder, AddFusionMatchesHandComposedBasicBlock) {
    for (Mode mode : {Mode::train, Mode::eval}) {
        Rng rng(11);
        auto block = ResBlock<double>::make(4, 4, 1, FusionKind::add, 4, rng);
        auto clone = block;
        Rng drng(12);
        Tensor<double> x = Tensor<double>::uniform({2, 4, 5, 5}, drng, -1.0, 1.0);

        Tensor<double> out = run_block(block, x, mode);

        Tensor<double> y = clone.bn1.forward_plain(clone.conv1.forward_plain(x), mode);
        y = clone.bn2.forward_plain(clone.conv2.forward_plain(aff::relu(y)), mode);
        Tensor<double> expected = aff::relu(aff::broadcast_add(x, y));
        EXPECT_LT(max_abs_diff(out, expected), 1e-12);
    }
}

TEST(ResBlockBuilder, StridedProjectionMatchesHandComposedShortcut) {
    Rng rng(13);
    auto block = ResBlock<double>::make(4, 8, 2, FusionKind::add, 4, rng);
    ASSERT_TRUE(block.has_proj);
    auto clone = block;
    Tensor<double> x = Tensor<double>::uniform({1, 4, 6, 6}, rng, -1.0, 1.0);

    Tensor<double> out = run_block(block, x, Mode::train);

    Tensor<double> y = clone.bn1.forward_plain(clone.conv1.forward_plain(x), Mode::train);
    y = clone.bn2.forward_plain(clone.conv2.forward_plain(aff::relu(y)), Mode::train);
    Tensor<double> sc = clone.proj_bn.forward_plain(clone.proj.forward_plain(x), Mode::train);
    Tensor<double> expected = aff::relu(aff::broadcast_add(sc, y));
    EXPECT_EQ(out.shape(), (Shape{1, 8, 3, 3}));
    EXPECT_LT(max_abs_diff(out, expected), 1e-12);
}

TEST(ResBlockBuilder, ZeroResidualBranchReducesToReluOfInput) {
    // stride 1, matching channels: identity shortcut, silent residual.
    for (Mode mode : {Mode::train, Mode::eval}) {
        Rng rng(14);
        auto block = ResBlock<double>::make(8, 8, 1, FusionKind::add, 4, rng);
        ASSERT_FALSE(block.has_proj);
        std::vector<aff::Parameter<double>*> ps;
        block.collect(ps, "block");
        zero_conv_and_beta(ps);
        Tensor<double> x = Tensor<double>::uniform({2, 8, 4, 4}, rng, -1.0, 1.0);
        Tensor<double> out = run_block(block, x, mode);
        Tensor<double> expected = aff::relu(x);
        for (std::int64_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], expected[i]);
    }
}

TEST(ResBlockBuilder, FreshAffBlockAveragesShortcutAndResidual) {
    // Untrained attention emits exactly 0.5, so the fused value is the exact
    // arithmetic mean of the two paths before the trailing ReLU.
    Rng rng(15);
    auto block = ResBlock<double>::make(4, 4, 1, FusionKind::aff, 4, rng);
    auto clone = block;
    Tensor<double> x = Tensor<double>::uniform({2, 4, 4, 4}, rng, -1.0, 1.0);

    Tensor<double> out = run_block(block, x, Mode::train);

    Tensor<double> y = clone.bn1.forward_plain(clone.conv1.forward_plain(x), Mode::train);
    y = clone.bn2.forward_plain(clone.conv2.forward_plain(aff::relu(y)), Mode::train);
    for (std::int64_t i = 0; i < out.size(); ++i) {
        const double mean = (x[i] + y[i]) / 2.0;
        EXPECT_EQ(out[i], mean > 0.0 ? mean : 0.0);
    }
}

TEST(ResBlockBuilder, InvalidStrideRejected) {
    Rng rng(16);
    EXPECT_THROW(ResBlock<double>::make(4, 4, 3, FusionKind::add, 4, rng), aff::ConfigError);
    EXPECT_THROW(ResBlock<double>::make(4, 4, 0, FusionKind::add, 4, rng), aff::ConfigError);
}

TEST(ResBlockBuilder, ProbeCapturesAttentionMapAtFusionSite) {
    Rng rng(17);
    auto block = ResBlock<double>::make(4, 4, 1, FusionKind::aff, 4, rng);
    Tensor<double> x = Tensor<double>::uniform({1, 4, 3, 3}, rng, -1.0, 1.0);
    Tape<double> t;
    Var<double> xv = t.input(x);
    aff::WeightProbe<double> probe;
    block.forward(t, xv, Mode::eval, "stage1.block1", &probe);
    ASSERT_EQ(probe.maps.size(), 1u);
    EXPECT_EQ(probe.maps[0].first, "stage1.block1.fuse");
    for (std::int64_t i = 0; i < probe.maps[0].second.size(); ++i) {
        EXPECT_GT(probe.maps[0].second[i], 0.0);
        EXPECT_LT(probe.maps[0].second[i], 1.0);
    }
}

// ---- inception blocks ----

TEST(InceptionBlockBuilder, DeltaKernelBranchesCollapseEverySoftSelection) {
    // Both branches reduce to BN(identity), so X == Y at the fusion site and
    // any convex soft selection must return that common value.
    for (FusionKind kind :
         {FusionKind::soft_select_highway, FusionKind::aff, FusionKind::iaff,
          FusionKind::half_aff, FusionKind::concat_aff, FusionKind::recursive_aff}) {
        Rng rng(21);
        auto block = InceptionBlock<double>::make(4, 4, 1, kind, 4, rng);
        set_delta(block.br3);
        set_delta(block.br5);
        std::vector<aff::Parameter<double>*> fuse_ps;
        block.fusion.collect(fuse_ps, "fuse");
        aff::detail::randomize_params(fuse_ps, rng);
        auto clone = block;

        Tensor<double> x = Tensor<double>::uniform({2, 4, 4, 4}, rng, -1.0, 1.0);
        Tensor<double> out = run_block(block, x, Mode::train);

        Tensor<double> h =
            aff::relu(clone.bn1.forward_plain(clone.conv1.forward_plain(x), Mode::train));
        Tensor<double> a =
            aff::relu(clone.bn3.forward_plain(clone.br3.forward_plain(h), Mode::train));
        Tensor<double> c =
            aff::relu(clone.bn5.forward_plain(clone.br5.forward_plain(h), Mode::train));
        for (std::int64_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], c[i]);
        Tensor<double> expected = aff::relu(aff::broadcast_add(x, a));
        EXPECT_LT(max_abs_diff(out, expected), 1e-12)
            << "kind=" << aff::fusion_kind_name(kind);
    }
}

TEST(InceptionBlockBuilder, AddFusionEqualsBranchSumComposition) {
    Rng rng(22);
    auto block = InceptionBlock<double>::make(3, 8, 2, FusionKind::add, 4, rng);
    ASSERT_TRUE(block.has_proj);
    auto clone = block;
    Tensor<double> x = Tensor<double>::uniform({2, 3, 6, 6}, rng, -1.0, 1.0);

    Tensor<double> out = run_block(block, x, Mode::train);

    Tensor<double> h =
        aff::relu(clone.bn1.forward_plain(clone.conv1.forward_plain(x), Mode::train));
    Tensor<double> a = aff::relu(clone.bn3.forward_plain(clone.br3.forward_plain(h), Mode::train));
    Tensor<double> c = aff::relu(clone.bn5.forward_plain(clone.br5.forward_plain(h), Mode::train));
    Tensor<double> sc = clone.proj_bn.forward_plain(clone.proj.forward_plain(x), Mode::train);
    Tensor<double> expected = aff::relu(aff::broadcast_add(sc, aff::broadcast_add(a, c)));
    EXPECT_EQ(out.shape(), (Shape{2, 8, 3, 3}));
    EXPECT_LT(max_abs_diff(out, expected), 1e-12);
}

TEST(InceptionBlockBuilder, AffFusionMatchesComposedBranchesAndFuseOracle) {
    Rng rng(23);
    auto block = InceptionBlock<double>::make(4, 4, 1, FusionKind::aff, 4, rng);
    std::vector<aff::Parameter<double>*> fuse_ps;
    block.fusion.collect(fuse_ps, "fuse");
    aff::detail::randomize_params(fuse_ps, rng);
    auto clone = block;
    Tensor<double> x = Tensor<double>::uniform({2, 4, 5, 5}, rng, -1.0, 1.0);

    Tensor<double> out = run_block(block, x, Mode::train);

    Tensor<double> h =
        aff::relu(clone.bn1.forward_plain(clone.conv1.forward_plain(x), Mode::train));
    Tensor<double> a = aff::relu(clone.bn3.forward_plain(clone.br3.forward_plain(h), Mode::train));
    Tensor<double> c = aff::relu(clone.bn5.forward_plain(clone.br5.forward_plain(h), Mode::train));
    Tensor<double> z = run_fuse(clone.fusion, a, c, Mode::train);
    Tensor<double> expected = aff::relu(aff::broadcast_add(x, z));
    EXPECT_LT(max_abs_diff(out, expected), 1e-12);
}

TEST(InceptionBlockBuilder, IndivisibleChannelsRejected) {
    Rng rng(24);
    EXPECT_THROW(InceptionBlock<double>::make(6, 6, 1, FusionKind::aff, 4, rng),
                 aff::ConfigError);
}

// ---- pyramid segmenter ----

TEST(FpnBuilder, SingleStageDegenerateEqualsBackboneHeadComposition) {
    NetworkSpec spec = small_spec(Scenario::long_skip, FusionKind::aff, 1, 8, 3);
    spec.stages = 1;  // no top-down path at all
    Rng rng(31);
    auto net = FpnNet<double>::build(spec, rng);
    EXPECT_TRUE(net.laterals.empty());
    auto clone = net;
    Tensor<double> x = Tensor<double>::uniform({2, 3, 5, 5}, rng, -1.0, 1.0);

    Tape<double> t;
    Var<double> xv = t.input(x);
    Tensor<double> out = t.value(net.forward(t, xv, Mode::eval));

    Tensor<double> h =
        aff::relu(clone.stem_bn.forward_plain(clone.stem.forward_plain(x), Mode::eval));
    auto& b = clone.blocks[0];
    Tensor<double> y = b.bn1.forward_plain(b.conv1.forward_plain(h), Mode::eval);
    y = b.bn2.forward_plain(b.conv2.forward_plain(aff::relu(y)), Mode::eval);
    Tensor<double> expected =
        clone.head.forward_plain(aff::relu(aff::broadcast_add(h, y)));
    EXPECT_EQ(out.shape(), (Shape{2, 3, 5, 5}));
    EXPECT_LT(max_abs_diff(out, expected), 1e-12);
}

TEST(FpnBuilder, AddFusionMatchesLateralSumComposition) {
    NetworkSpec spec = small_spec(Scenario::long_skip, FusionKind::add, 1, 4, 2);
    spec.stages = 2;
    Rng rng(32);
    auto net = FpnNet<double>::build(spec, rng);
    Rng brng(32);
    baseline::PlainFpn<double> ref(spec, brng);
    Tensor<double> x = Tensor<double>::uniform({2, 3, 4, 4}, rng, -1.0, 1.0);

    Tape<double> t;
    Var<double> xv = t.input(x);
    Tensor<double> out = t.value(net.forward(t, xv, Mode::eval));
    EXPECT_LT(max_abs_diff(out, ref.forward(x, Mode::eval)), 1e-12);
}

TEST(FpnBuilder, ZeroInputYieldsBiasOnlyConstantLogitMaps) {
    NetworkSpec spec = small_spec(Scenario::long_skip, FusionKind::aff, 1, 4, 3);
    Rng rng(33);
    auto net = FpnNet<double>::build(spec, rng);
    // Give the head bias distinct values so the constant maps are visible.
    for (std::int64_t k = 0; k < net.head.bias.value.size(); ++k)
        net.head.bias.value[k] = 0.3 * double(k) - 0.4;

    Tensor<double> x = Tensor<double>::zeros({1, 3, 8, 8});
    Tape<double> t;
    Var<double> xv = t.input(x);
    Tensor<double> out = t.value(net.forward(t, xv, Mode::eval));
    const Shape s = out.shape();
    EXPECT_EQ(s, (Shape{1, 3, 8, 8}));
    for (int k = 0; k < s.c; ++k)
        for (int yy = 0; yy < s.h; ++yy)
            for (int xx = 0; xx < s.w; ++xx)
                EXPECT_EQ(out.at(0, k, yy, xx), net.head.bias.value[k]);
}

TEST(FpnBuilder, IndivisibleInputAndWrongScenarioRejected) {
    NetworkSpec spec = small_spec(Scenario::long_skip, FusionKind::add, 1, 4, 2);
    Rng rng(34);
    auto net = FpnNet<double>::build(spec, rng);
    Tensor<double> bad = Tensor<double>::zeros({1, 3, 6, 6});  // 6 % 4 != 0
    Tape<double> t;
    Var<double> xv = t.input(bad);
    EXPECT_THROW(net.forward(t, xv, Mode::eval), aff::ConfigError);

    NetworkSpec wrong = small_spec(Scenario::short_skip, FusionKind::add);
    EXPECT_THROW(FpnNet<double>::build(wrong, rng), aff::ConfigError);
    NetworkSpec other = small_spec(Scenario::long_skip, FusionKind::add);
    EXPECT_THROW(ClassifierNet<double>::build(other, rng), aff::ConfigError);
}

// ---- classifier plumbing ----

TEST(ForwardClassify, ZeroHeadGivesUniformSoftmax) {
    NetworkSpec spec = small_spec(Scenario::short_skip, FusionKind::add, 1, 4, 2);
    Rng rng(41);
    auto net = ClassifierNet<double>::build(spec, rng);
    net.head.weight.value = Tensor<double>::zeros(net.head.weight.value.shape());
    net.head.bias.value = Tensor<double>::zeros(net.head.bias.value.shape());

    Tensor<double> batch = Tensor<double>::uniform({3, 3, 6, 6}, rng, 0.0, 1.0);
    Tensor<double> logits = aff::forward_classify(net, batch);
    EXPECT_EQ(logits.shape(), (Shape{3, 2, 1, 1}));
    for (std::int64_t i = 0; i < logits.size(); ++i) EXPECT_EQ(logits[i], 0.0);
    for (int n = 0; n < 3; ++n) {
        const double e0 = std::exp(logits.at(n, 0, 0, 0)), e1 = std::exp(logits.at(n, 1, 0, 0));
        EXPECT_DOUBLE_EQ(e0 / (e0 + e1), 0.5);
    }
}

TEST(ForwardClassify, EvalModePermutesLogitsWithBatchOrder) {
    NetworkSpec spec = small_spec(Scenario::short_skip, FusionKind::aff, 1, 8, 5);
    Rng rng(42);
    auto net = ClassifierNet<double>::build(spec, rng);
    for (auto* p : net.parameters())
        if (p->name.find("pw2") != std::string::npos)
            p->value = Tensor<double>::uniform(p->value.shape(), rng, -0.5, 0.5);

    Tensor<double> batch = Tensor<double>::uniform({3, 3, 8, 8}, rng, 0.0, 1.0);
    const int perm[3] = {2, 0, 1};
    Tensor<double> shuffled({3, 3, 8, 8});
    for (int n = 0; n < 3; ++n)
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x)
                    shuffled.at(n, c, y, x) = batch.at(perm[n], c, y, x);

    Tensor<double> base = aff::forward_classify(net, batch);
    Tensor<double> moved = aff::forward_classify(net, shuffled);
    for (int n = 0; n < 3; ++n)
        for (int k = 0; k < 5; ++k)
            EXPECT_EQ(moved.at(n, k, 0, 0), base.at(perm[n], k, 0, 0));
}

TEST(ForwardClassify, WrongChannelCountIsDimensionError) {
    NetworkSpec spec = small_spec(Scenario::short_skip, FusionKind::add, 1, 4, 2);
    Rng rng(43);
    auto net = ClassifierNet<double>::build(spec, rng);
    Tensor<double> bad = Tensor<double>::zeros({1, 4, 6, 6});
    EXPECT_THROW(aff::forward_classify(net, bad), aff::DimensionError);
}

TEST(ForwardClassify, AddHostParamCountMatchesClosedForm) {
    for (int b : {1, 3}) {
        NetworkSpec spec;  // defaults: 16/32/64 channels, 10 classes
        spec.scenario = Scenario::short_skip;
        spec.b = b;
        spec.fusion = FusionKind::add;
        Rng rng(44);
        auto net = ClassifierNet<double>::build(spec, rng);
        EXPECT_EQ(net.param_count(), oracle::resnet_add_params_ref(b, spec.num_classes));
    }
}

// ---- block inventory ----

TEST(CountBlocks, ShortSkipSiteArithmetic) {
    NetworkSpec spec = small_spec(Scenario::short_skip, FusionKind::aff, 1);
    EXPECT_EQ(aff::count_fusion_sites(spec), 3);
    spec.b = 4;
    EXPECT_EQ(aff::count_fusion_sites(spec), 12);
    int active = 0;
    for (const auto& bi : aff::count_blocks(spec)) {
        EXPECT_TRUE(bi.fusion_site);
        active += bi.strategy_applies;
        EXPECT_EQ(bi.attention_active, bi.strategy_applies);
    }
    EXPECT_EQ(active, 12);
}

TEST(CountBlocks, LastTwoStagesPolicyActivates2bSites) {
    NetworkSpec spec = small_spec(Scenario::short_skip, FusionKind::aff, 3);
    spec.policy = aff::ReplacePolicy::last_two_stages;
    int active = 0;
    for (const auto& bi : aff::count_blocks(spec)) {
        active += bi.strategy_applies;
        if (bi.stage == 1) EXPECT_FALSE(bi.strategy_applies);
    }
    EXPECT_EQ(active, 2 * spec.b);
}

TEST(CountBlocks, AddFusionIsNeverAttentionActive) {
    NetworkSpec spec = small_spec(Scenario::short_skip, FusionKind::add, 2);
    for (const auto& bi : aff::count_blocks(spec)) {
        EXPECT_TRUE(bi.strategy_applies);
        EXPECT_FALSE(bi.attention_active);
    }
}

TEST(CountBlocks, LongSkipSitesAreTopDownMerges) {
    NetworkSpec spec = small_spec(Scenario::long_skip, FusionKind::aff, 2, 16, 4);
    const auto blocks = aff::count_blocks(spec);
    int backbone = 0, merges = 0;
    for (const auto& bi : blocks) {
        if (bi.name.rfind("topdown.", 0) == 0) {
            ++merges;
            EXPECT_TRUE(bi.fusion_site);
            EXPECT_EQ(bi.out_channels, spec.top_channels());
            EXPECT_EQ(bi.in_channels, spec.stage_channels(bi.stage - 1));
        } else {
            ++backbone;
            EXPECT_FALSE(bi.fusion_site);
        }
    }
    EXPECT_EQ(backbone, 6);
    EXPECT_EQ(merges, 2);
    EXPECT_EQ(aff::count_fusion_sites(spec), 2);
}

// ---- whole-net invariants ----

TEST(NetworkInvariants, AddFusionReproducesHandBuiltShortSkipHost) {
    NetworkSpec spec = small_spec(Scenario::short_skip, FusionKind::add, 2, 8, 4);
    Rng r1(51), r2(51);
    auto net = ClassifierNet<double>::build(spec, r1);
    baseline::PlainClassifier<double> ref(spec, r2);

    auto np = net.parameters();
    auto rp = ref.parameters();
    ASSERT_EQ(np.size(), rp.size());
    for (std::size_t i = 0; i < np.size(); ++i) {
        ASSERT_EQ(np[i]->value.size(), rp[i]->value.size()) << np[i]->name;
        for (std::int64_t j = 0; j < np[i]->value.size(); ++j)
            ASSERT_EQ(np[i]->value[j], rp[i]->value[j]) << np[i]->name;
    }

    Rng drng(52);
    Tensor<double> x = Tensor<double>::uniform({2, 3, 8, 8}, drng, 0.0, 1.0);
    Tensor<double> got = aff::forward_classify(net, x);
    EXPECT_LT(max_abs_diff(got, ref.forward(x, Mode::eval)), 1e-12);
}

TEST(NetworkInvariants, AddFusionReproducesHandBuiltSameLayerHost) {
    NetworkSpec spec = small_spec(Scenario::same_layer, FusionKind::add, 1, 4, 3);
    Rng r1(53), r2(53);
    auto net = ClassifierNet<double>::build(spec, r1);
    baseline::PlainClassifier<double> ref(spec, r2);

    auto np = net.parameters();
    auto rp = ref.parameters();
    ASSERT_EQ(np.size(), rp.size());
    for (std::size_t i = 0; i < np.size(); ++i)
        for (std::int64_t j = 0; j < np[i]->value.size(); ++j)
            ASSERT_EQ(np[i]->value[j], rp[i]->value[j]) << np[i]->name;

    Rng drng(54);
    Tensor<double> x = Tensor<double>::uniform({2, 3, 6, 6}, drng, 0.0, 1.0);
    Tensor<double> got = aff::forward_classify(net, x);
    EXPECT_LT(max_abs_diff(got, ref.forward(x, Mode::eval)), 1e-12);
}

TEST(NetworkInvariants, AddFusionReproducesHandBuiltPyramidHost) {
    NetworkSpec spec = small_spec(Scenario::long_skip, FusionKind::add, 1, 4, 2);
    Rng r1(55), r2(55);
    auto net = FpnNet<double>::build(spec, r1);
    baseline::PlainFpn<double> ref(spec, r2);

    auto np = net.parameters();
    auto rp = ref.parameters();
    ASSERT_EQ(np.size(), rp.size());
    for (std::size_t i = 0; i < np.size(); ++i)
        for (std::int64_t j = 0; j < np[i]->value.size(); ++j)
            ASSERT_EQ(np[i]->value[j], rp[i]->value[j]) << np[i]->name;

    Rng drng(56);
    Tensor<double> x = Tensor<double>::uniform({1, 3, 8, 8}, drng, 0.0, 1.0);
    Tape<double> t;
    Var<double> xv = t.input(x);
    Tensor<double> got = t.value(net.forward(t, xv, Mode::eval));
    EXPECT_LT(max_abs_diff(got, ref.forward(x, Mode::eval)), 1e-12);
}

TEST(NetworkInvariants, BlockGraphsPassGradientCheckUnderBudget) {
    const auto start = std::chrono::steady_clock::now();
    Rng rng(57);
    auto units = aff::make_block_units<double>(rng);
    ASSERT_FALSE(units.empty());
    for (auto& u : units) {
        auto res = aff::grad_check(u, rng);
        EXPECT_TRUE(res.pass) << u.name << " max rel err " << res.max_rel_err;
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    EXPECT_LT(secs, 60.0);
}

TEST(NetworkInvariants, ParamCountIsPureFunctionOfSpec) {
    NetworkSpec spec = small_spec(Scenario::short_skip, FusionKind::iaff, 2, 16, 10);
    Rng r1(58), r2(977);
    auto a = ClassifierNet<double>::build(spec, r1);
    auto b = ClassifierNet<double>::build(spec, r2);
    EXPECT_EQ(a.param_count(), b.param_count());
    EXPECT_EQ(aff::count_params(spec).total, a.param_count());

    NetworkSpec fspec = small_spec(Scenario::long_skip, FusionKind::aff, 1, 8, 4);
    Rng r3(1), r4(2);
    auto fa = FpnNet<double>::build(fspec, r3);
    auto fb = FpnNet<double>::build(fspec, r4);
    EXPECT_EQ(fa.param_count(), fb.param_count());
    EXPECT_EQ(aff::count_params(fspec).total, fa.param_count());
}

TEST(NetworkInvariants, IaffHalfDepthBudgetSitsNearHalfOfAddFullDepth) {
    // Analytic counts: plain-add closed form plus two attention generators per
    // fused block for the iAFF host.
    for (int classes : {10, 20}) {
        NetworkSpec iaff;
        iaff.scenario = Scenario::short_skip;
        iaff.b = 2;
        iaff.fusion = FusionKind::iaff;
        iaff.num_classes = classes;
        NetworkSpec add = iaff;
        add.b = 4;
        add.fusion = FusionKind::add;

        Rng r1(59), r2(60);
        auto inet = ClassifierNet<double>::build(iaff, r1);
        auto anet = ClassifierNet<double>::build(add, r2);

        std::int64_t attn = 0;
        for (int width : {16, 32, 64})
            attn += iaff.b * 2 * oracle::mscam_params_ref(width, iaff.ratio);
        EXPECT_EQ(inet.param_count(), oracle::resnet_add_params_ref(2, classes) + attn);
        EXPECT_EQ(anet.param_count(), oracle::resnet_add_params_ref(4, classes));

        const double ratio =
            double(inet.param_count()) / double(anet.param_count());
        EXPECT_GE(ratio, 0.49);
        EXPECT_LE(ratio, 0.59);
    }
}

TEST(NetworkInvariants, PolicyControlsWhichBlocksCarryAttention) {
    NetworkSpec spec = small_spec(Scenario::short_skip, FusionKind::aff, 1, 8, 4);
    spec.policy = aff::ReplacePolicy::last_two_stages;
    Rng rng(61);
    auto net = ClassifierNet<double>::build(spec, rng);
    Tensor<double> x = Tensor<double>::uniform({1, 3, 8, 8}, rng, 0.0, 1.0);

    Tape<double> t;
    Var<double> xv = t.input(x);
    aff::WeightProbe<double> probe;
    net.forward(t, xv, Mode::eval, &probe);
    ASSERT_EQ(probe.maps.size(), 2u);  // stage 2 and stage 3 only
    EXPECT_EQ(probe.maps[0].first, "stage2.block1.fuse");
    EXPECT_EQ(probe.maps[1].first, "stage3.block1.fuse");
}

TEST(NetworkInvariants, SpecValidationRejectsBadFields) {
    NetworkSpec spec;
    spec.b = 0;
    EXPECT_THROW(spec.validate(), aff::ConfigError);
    spec = NetworkSpec{};
    spec.stages = 4;
    EXPECT_THROW(spec.validate(), aff::ConfigError);
    spec = NetworkSpec{};
    spec.num_classes = 1;
    EXPECT_THROW(spec.validate(), aff::ConfigError);
}
