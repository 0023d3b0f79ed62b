#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "aff/fusion.hpp"

namespace aff {

// Where the fusion under study sits: parallel same-layer branches, a residual
// short skip, or the long skip across a top-down pyramid.
enum class Scenario { same_layer, short_skip, long_skip };

inline const char* scenario_name(Scenario s) {
    switch (s) {
        case Scenario::same_layer: return "same_layer";
        case Scenario::short_skip: return "short_skip";
        case Scenario::long_skip: return "long_skip";
    }
    return "?";
}

inline Scenario parse_scenario(const std::string& s) {
    if (s == "same_layer") return Scenario::same_layer;
    if (s == "short_skip") return Scenario::short_skip;
    if (s == "long_skip") return Scenario::long_skip;
    throw ConfigError("unknown scenario '" + s + "'");
}

enum class ReplacePolicy { all_blocks, last_two_stages };

inline const char* policy_name(ReplacePolicy p) {
    return p == ReplacePolicy::all_blocks ? "all_blocks" : "last_two_stages";
}

inline ReplacePolicy parse_policy(const std::string& s) {
    if (s == "all_blocks") return ReplacePolicy::all_blocks;
    if (s == "last_two_stages") return ReplacePolicy::last_two_stages;
    throw ConfigError("unknown replacement policy '" + s + "'");
}

struct NetworkSpec {
    Scenario scenario = Scenario::short_skip;
    int b = 1; // blocks per stage
    int in_channels = 3;
    int base_channels = 16;
    std::array<int, 3> stage_mult{1, 2, 4};
    int stages = 3; // 1..3; <3 mainly for degenerate pyramid tests
    FusionKind fusion = FusionKind::add;
    int ratio = 4;
    int num_classes = 10;
    ReplacePolicy policy = ReplacePolicy::all_blocks;

    int stage_channels(int i) const { return base_channels * stage_mult[static_cast<std::size_t>(i)]; }
    int top_channels() const { return stage_channels(stages - 1); }

    void validate() const {
        if (b < 1) throw ConfigError("depth factor b must be >= 1");
        if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
        if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
        if (stages < 1 || stages > 3) throw ConfigError("stages must be in [1,3]");
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
        if (ratio < 1) throw ConfigError("reduction ratio must be >= 1");
        for (int m : stage_mult)
            if (m < 1) throw ConfigError("stage multipliers must be >= 1");
    }
};

struct BlockInfo {
    std::string name;
    int stage = 0; // 1-based
    int in_channels = 0, out_channels = 0, stride = 1;
    bool fusion_site = false;      // strategy can plug in here
    bool strategy_applies = false; // replacement policy verdict
    bool attention_active = false; // strategy applies and is attentional
};

namespace detail {

// Per-stage block layout shared by the builders and the inventory.
inline std::vector<BlockInfo> backbone_plan(const NetworkSpec& spec) {
    std::vector<BlockInfo> plan;
    int prev = spec.base_channels;
    for (int s = 0; s < spec.stages; ++s) {
        const int c = spec.stage_channels(s);
        for (int i = 0; i < spec.b; ++i) {
            BlockInfo bi;
            bi.stage = s + 1;
            bi.name = "stage" + std::to_string(s + 1) + ".block" + std::to_string(i + 1);
            bi.in_channels = (i == 0) ? prev : c;
            bi.out_channels = c;
            bi.stride = (i == 0 && s > 0) ? 2 : 1;
            plan.push_back(bi);
        }
        prev = c;
    }
    return plan;
}

inline bool policy_applies(ReplacePolicy p, int stage, int total_stages) {
    if (p == ReplacePolicy::all_blocks) return true;
    return stage > total_stages - 2; // last two stages
}

} // namespace detail

// Inventory of blocks and fusion sites. Backbone blocks are the fusion sites
// for same_layer / short_skip; for long_skip the sites are the top-down
// merges and backbone blocks stay plain residual adds.
inline std::vector<BlockInfo> count_blocks(const NetworkSpec& spec) {
    spec.validate();
    std::vector<BlockInfo> out = detail::backbone_plan(spec);
    const bool block_sites = spec.scenario != Scenario::long_skip;
    for (auto& bi : out) {
        bi.fusion_site = block_sites;
        bi.strategy_applies =
            block_sites && detail::policy_applies(spec.policy, bi.stage, spec.stages);
        bi.attention_active = bi.strategy_applies && fusion_is_attentional(spec.fusion);
    }
    if (spec.scenario == Scenario::long_skip) {
        for (int s = spec.stages - 1; s >= 1; --s) { // lateral stage index, 1-based
            BlockInfo bi;
            bi.stage = s;
            bi.name = "topdown.merge" + std::to_string(s);
            bi.in_channels = spec.stage_channels(s - 1);
            bi.out_channels = spec.top_channels();
            bi.fusion_site = true;
            bi.strategy_applies = detail::policy_applies(spec.policy, s, spec.stages);
            bi.attention_active = bi.strategy_applies && fusion_is_attentional(spec.fusion);
            out.push_back(bi);
        }
    }
    return out;
}

inline int count_fusion_sites(const NetworkSpec& spec) {
    int n = 0;
    for (const auto& bi : count_blocks(spec))
        if (bi.fusion_site) ++n;
    return n;
}

// Attention maps captured at fusion sites during a forward pass.
template <std::floating_point T>
struct WeightProbe {
    std::vector<std::pair<std::string, Tensor<T>>> maps;
};

// Basic residual block: Y = BN(conv3x3(ReLU(BN(conv3x3(x))))), X = shortcut
// (identity or 1x1 projection + BN), out = ReLU(fuse(X, Y)).
template <std::floating_point T>
struct ResBlock {
    Conv2dLayer<T> conv1, conv2;
    BatchNormLayer<T> bn1, bn2;
    bool has_proj = false;
    Conv2dLayer<T> proj;
    BatchNormLayer<T> proj_bn;
    FusionModule<T> fusion;

    static ResBlock make(int in_c, int out_c, int stride, FusionKind kind, int ratio, Rng& rng) {
        if (stride != 1 && stride != 2)
            throw ConfigError("resblock stride must be 1 or 2, got " + std::to_string(stride));
        ResBlock b;
        b.conv1 = Conv2dLayer<T>::make(in_c, out_c, 3, stride, 1, rng);
        b.bn1 = BatchNormLayer<T>::make(out_c);
        b.conv2 = Conv2dLayer<T>::make(out_c, out_c, 3, 1, 1, rng);
        b.bn2 = BatchNormLayer<T>::make(out_c);
        b.has_proj = (stride != 1 || in_c != out_c);
        if (b.has_proj) {
            b.proj = Conv2dLayer<T>::make(in_c, out_c, 1, stride, 0, rng);
            b.proj_bn = BatchNormLayer<T>::make(out_c);
        }
        b.fusion = FusionModule<T>::make(kind, out_c, ratio, rng);
        return b;
    }

    Var<T> forward(Tape<T>& t, Var<T> x, Mode mode, const std::string& name,
                   WeightProbe<T>* probe = nullptr) {
        typename Tape<T>::Scope scope(t, name);
        Var<T> h = conv1.forward(t, x, "conv1");
        h = bn1.forward(t, h, mode, "bn1");
        h = t.relu(h, "relu1");
        h = conv2.forward(t, h, "conv2");
        h = bn2.forward(t, h, mode, "bn2");
        Var<T> sc = x;
        if (has_proj) {
            sc = proj.forward(t, x, "proj");
            sc = proj_bn.forward(t, sc, mode, "proj_bn");
        }
        Var<T> m{};
        Var<T> z = fusion.fuse(t, sc, h, mode, "fuse", &m);
        if (probe && m.valid()) probe->maps.emplace_back(name + ".fuse", t.value(m));
        return t.relu(z, "relu2");
    }

    void collect(std::vector<Parameter<T>*>& out, const std::string& prefix) {
        conv1.collect(out, prefix + ".conv1");
        bn1.collect(out, prefix + ".bn1");
        conv2.collect(out, prefix + ".conv2");
        bn2.collect(out, prefix + ".bn2");
        if (has_proj) {
            proj.collect(out, prefix + ".proj");
            proj_bn.collect(out, prefix + ".proj_bn");
        }
        fusion.collect(out, prefix + ".fuse");
    }

    void collect_state(std::vector<std::pair<std::string, std::vector<T>*>>& out,
                       const std::string& prefix) {
        bn1.collect_state(out, prefix + ".bn1");
        bn2.collect_state(out, prefix + ".bn2");
        if (has_proj) proj_bn.collect_state(out, prefix + ".proj_bn");
        fusion.collect_state(out, prefix + ".fuse");
    }
};

// Residual block whose second conv is replaced by parallel 3x3 / 5x5 branches
// (each conv+BN+ReLU); the branch outputs are the fusion operands (X = 3x3,
// Y = 5x5), and a plain residual add wraps the fused result.
template <std::floating_point T>
struct InceptionBlock {
    Conv2dLayer<T> conv1;
    BatchNormLayer<T> bn1;
    Conv2dLayer<T> br3, br5;
    BatchNormLayer<T> bn3, bn5;
    bool has_proj = false;
    Conv2dLayer<T> proj;
    BatchNormLayer<T> proj_bn;
    FusionModule<T> fusion;

    static InceptionBlock make(int in_c, int out_c, int stride, FusionKind kind, int ratio,
                               Rng& rng) {
        if (stride != 1 && stride != 2)
            throw ConfigError("inception block stride must be 1 or 2");
        if (out_c % ratio != 0)
            throw ConfigError("inception block channels (" + std::to_string(out_c) +
                              ") must be divisible by r (" + std::to_string(ratio) + ")");
        InceptionBlock b;
        b.conv1 = Conv2dLayer<T>::make(in_c, out_c, 3, stride, 1, rng);
        b.bn1 = BatchNormLayer<T>::make(out_c);
        b.br3 = Conv2dLayer<T>::make(out_c, out_c, 3, 1, 1, rng);
        b.bn3 = BatchNormLayer<T>::make(out_c);
        b.br5 = Conv2dLayer<T>::make(out_c, out_c, 5, 1, 2, rng);
        b.bn5 = BatchNormLayer<T>::make(out_c);
        b.has_proj = (stride != 1 || in_c != out_c);
        if (b.has_proj) {
            b.proj = Conv2dLayer<T>::make(in_c, out_c, 1, stride, 0, rng);
            b.proj_bn = BatchNormLayer<T>::make(out_c);
        }
        b.fusion = FusionModule<T>::make(kind, out_c, ratio, rng);
        return b;
    }

    Var<T> forward(Tape<T>& t, Var<T> x, Mode mode, const std::string& name,
                   WeightProbe<T>* probe = nullptr) {
        typename Tape<T>::Scope scope(t, name);
        Var<T> h = conv1.forward(t, x, "conv1");
        h = bn1.forward(t, h, mode, "bn1");
        h = t.relu(h, "relu1");
        Var<T> a = t.relu(bn3.forward(t, br3.forward(t, h, "br3"), mode, "bn3"), "relu3");
        Var<T> c = t.relu(bn5.forward(t, br5.forward(t, h, "br5"), mode, "bn5"), "relu5");
        Var<T> m{};
        Var<T> z = fusion.fuse(t, a, c, mode, "fuse", &m);
        if (probe && m.valid()) probe->maps.emplace_back(name + ".fuse", t.value(m));
        Var<T> sc = x;
        if (has_proj) {
            sc = proj.forward(t, x, "proj");
            sc = proj_bn.forward(t, sc, mode, "proj_bn");
        }
        return t.relu(t.add(sc, z, "residual"), "relu2");
    }

    void collect(std::vector<Parameter<T>*>& out, const std::string& prefix) {
        conv1.collect(out, prefix + ".conv1");
        bn1.collect(out, prefix + ".bn1");
        br3.collect(out, prefix + ".br3");
        bn3.collect(out, prefix + ".bn3");
        br5.collect(out, prefix + ".br5");
        bn5.collect(out, prefix + ".bn5");
        if (has_proj) {
            proj.collect(out, prefix + ".proj");
            proj_bn.collect(out, prefix + ".proj_bn");
        }
        fusion.collect(out, prefix + ".fuse");
    }

    void collect_state(std::vector<std::pair<std::string, std::vector<T>*>>& out,
                       const std::string& prefix) {
        bn1.collect_state(out, prefix + ".bn1");
        bn3.collect_state(out, prefix + ".bn3");
        bn5.collect_state(out, prefix + ".bn5");
        if (has_proj) proj_bn.collect_state(out, prefix + ".proj_bn");
        fusion.collect_state(out, prefix + ".fuse");
    }
};

template <std::floating_point T>
ResBlock<T> build_resblock(const NetworkSpec& spec, int in_c, int out_c, int stride, Rng& rng) {
    return ResBlock<T>::make(in_c, out_c, stride, spec.fusion, spec.ratio, rng);
}

template <std::floating_point T>
InceptionBlock<T> build_inception_block(const NetworkSpec& spec, int c, Rng& rng) {
    return InceptionBlock<T>::make(c, c, 1, spec.fusion, spec.ratio, rng);
}

// Classifier host: stem conv -> 3 stages of blocks -> GAP -> FC logits.
// Covers same_layer (inception blocks) and short_skip (res blocks).
template <std::floating_point T>
class ClassifierNet {
  public:
    NetworkSpec spec;
    Conv2dLayer<T> stem;
    BatchNormLayer<T> stem_bn;
    std::vector<ResBlock<T>> res_blocks;
    std::vector<InceptionBlock<T>> inc_blocks;
    FullyConnectedLayer<T> head;

    static ClassifierNet build(const NetworkSpec& spec, Rng& rng) {
        spec.validate();
        if (spec.scenario == Scenario::long_skip)
            throw ConfigError("long_skip scenario builds a segmenter, not a classifier");
        ClassifierNet net;
        net.spec = spec;
        net.stem = Conv2dLayer<T>::make(spec.in_channels, spec.base_channels, 3, 1, 1, rng);
        net.stem_bn = BatchNormLayer<T>::make(spec.base_channels);
        for (const BlockInfo& bi : detail::backbone_plan(spec)) {
            const bool on = detail::policy_applies(spec.policy, bi.stage, spec.stages);
            const FusionKind kind = on ? spec.fusion : FusionKind::add;
            if (spec.scenario == Scenario::short_skip)
                net.res_blocks.push_back(ResBlock<T>::make(bi.in_channels, bi.out_channels,
                                                           bi.stride, kind, spec.ratio, rng));
            else
                net.inc_blocks.push_back(InceptionBlock<T>::make(
                    bi.in_channels, bi.out_channels, bi.stride, kind, spec.ratio, rng));
        }
        net.head = FullyConnectedLayer<T>::make(spec.top_channels(), spec.num_classes, rng);
        return net;
    }

    // Logits, shape N x num_classes x 1 x 1.
    Var<T> forward(Tape<T>& t, Var<T> x, Mode mode, WeightProbe<T>* probe = nullptr) {
        check_input(t.value(x).shape());
        Var<T> h = stem.forward(t, x, "stem");
        h = stem_bn.forward(t, h, mode, "stem_bn");
        h = t.relu(h, "stem_relu");
        const auto plan = detail::backbone_plan(spec);
        for (std::size_t i = 0; i < plan.size(); ++i) {
            if (spec.scenario == Scenario::short_skip)
                h = res_blocks[i].forward(t, h, mode, plan[i].name, probe);
            else
                h = inc_blocks[i].forward(t, h, mode, plan[i].name, probe);
        }
        h = t.global_avg_pool(h, "gap");
        return head.forward(t, h, "head");
    }

    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        stem.collect(out, "stem");
        stem_bn.collect(out, "stem_bn");
        const auto plan = detail::backbone_plan(spec);
        for (std::size_t i = 0; i < plan.size(); ++i) {
            if (spec.scenario == Scenario::short_skip)
                res_blocks[i].collect(out, plan[i].name);
            else
                inc_blocks[i].collect(out, plan[i].name);
        }
        head.collect(out, "head");
        return out;
    }

    std::vector<std::pair<std::string, std::vector<T>*>> state() {
        std::vector<std::pair<std::string, std::vector<T>*>> out;
        stem_bn.collect_state(out, "stem_bn");
        const auto plan = detail::backbone_plan(spec);
        for (std::size_t i = 0; i < plan.size(); ++i) {
            if (spec.scenario == Scenario::short_skip)
                res_blocks[i].collect_state(out, plan[i].name);
            else
                inc_blocks[i].collect_state(out, plan[i].name);
        }
        return out;
    }

    std::int64_t param_count() {
        std::int64_t n = 0;
        for (auto* p : parameters()) n += p->count();
        return n;
    }

  private:
    void check_input(const Shape& s) const {
        if (s.c != spec.in_channels)
            throw DimensionError("classifier expects " + std::to_string(spec.in_channels) +
                                 " input channels, got " + s.str());
    }
};

// Segmentation host: residual bottom-up backbone, top-down path with 2x
// upsampling (higher level) fused against 1x1-projected laterals, and a 1x1
// per-pixel logit head at the finest level.
template <std::floating_point T>
class FpnNet {
  public:
    NetworkSpec spec;
    Conv2dLayer<T> stem;
    BatchNormLayer<T> stem_bn;
    std::vector<ResBlock<T>> blocks;
    std::vector<Conv2dLayer<T>> laterals;   // index = lateral stage - 1
    std::vector<FusionModule<T>> merges;    // same indexing
    Conv2dLayer<T> head;

    static FpnNet build(const NetworkSpec& spec, Rng& rng) {
        spec.validate();
        if (spec.scenario != Scenario::long_skip)
            throw ConfigError("segmenter requires the long_skip scenario");
        FpnNet net;
        net.spec = spec;
        net.stem = Conv2dLayer<T>::make(spec.in_channels, spec.base_channels, 3, 1, 1, rng);
        net.stem_bn = BatchNormLayer<T>::make(spec.base_channels);
        for (const BlockInfo& bi : detail::backbone_plan(spec))
            net.blocks.push_back(ResBlock<T>::make(bi.in_channels, bi.out_channels, bi.stride,
                                                   FusionKind::add, spec.ratio, rng));
        const int top = spec.top_channels();
        for (int s = 1; s < spec.stages; ++s) {
            net.laterals.push_back(
                Conv2dLayer<T>::make(spec.stage_channels(s - 1), top, 1, 1, 0, rng));
            const bool on = detail::policy_applies(spec.policy, s, spec.stages);
            net.merges.push_back(FusionModule<T>::make(on ? spec.fusion : FusionKind::add, top,
                                                       spec.ratio, rng));
        }
        net.head = Conv2dLayer<T>::make(top, spec.num_classes, 1, 1, 0, rng, InitKind::kaiming,
                                        /*with_bias=*/true);
        return net;
    }

    // Per-pixel logits, N x num_classes x H x W at input resolution.
    Var<T> forward(Tape<T>& t, Var<T> x, Mode mode, WeightProbe<T>* probe = nullptr) {
        check_input(t.value(x).shape());
        Var<T> h = stem.forward(t, x, "stem");
        h = stem_bn.forward(t, h, mode, "stem_bn");
        h = t.relu(h, "stem_relu");
        const auto plan = detail::backbone_plan(spec);
        std::vector<Var<T>> stage_out(static_cast<std::size_t>(spec.stages));
        for (std::size_t i = 0; i < plan.size(); ++i) {
            h = blocks[i].forward(t, h, mode, plan[i].name, nullptr);
            stage_out[static_cast<std::size_t>(plan[i].stage - 1)] = h;
        }
        Var<T> p = stage_out.back();
        for (int s = spec.stages - 1; s >= 1; --s) {
            const std::string name = "topdown.merge" + std::to_string(s);
            typename Tape<T>::Scope scope(t, name);
            Var<T> up = t.upsample2x(p, "up");
            Var<T> lat = laterals[static_cast<std::size_t>(s - 1)].forward(
                t, stage_out[static_cast<std::size_t>(s - 1)], "lateral");
            Var<T> m{};
            p = merges[static_cast<std::size_t>(s - 1)].fuse(t, lat, up, mode, "fuse", &m);
            if (probe && m.valid()) probe->maps.emplace_back(name + ".fuse", t.value(m));
        }
        return head.forward(t, p, "head");
    }

    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        stem.collect(out, "stem");
        stem_bn.collect(out, "stem_bn");
        const auto plan = detail::backbone_plan(spec);
        for (std::size_t i = 0; i < plan.size(); ++i) blocks[i].collect(out, plan[i].name);
        for (int s = 1; s < spec.stages; ++s) {
            const std::string name = "topdown.merge" + std::to_string(s);
            laterals[static_cast<std::size_t>(s - 1)].collect(out, name + ".lateral");
            merges[static_cast<std::size_t>(s - 1)].collect(out, name + ".fuse");
        }
        head.collect(out, "head");
        return out;
    }

    std::vector<std::pair<std::string, std::vector<T>*>> state() {
        std::vector<std::pair<std::string, std::vector<T>*>> out;
        stem_bn.collect_state(out, "stem_bn");
        const auto plan = detail::backbone_plan(spec);
        for (std::size_t i = 0; i < plan.size(); ++i) blocks[i].collect_state(out, plan[i].name);
        for (int s = 1; s < spec.stages; ++s)
            merges[static_cast<std::size_t>(s - 1)].collect_state(
                out, "topdown.merge" + std::to_string(s) + ".fuse");
        return out;
    }

    std::int64_t param_count() {
        std::int64_t n = 0;
        for (auto* p : parameters()) n += p->count();
        return n;
    }

  private:
    void check_input(const Shape& s) const {
        if (s.c != spec.in_channels)
            throw DimensionError("segmenter expects " + std::to_string(spec.in_channels) +
                                 " input channels, got " + s.str());
        const int div = 1 << (spec.stages - 1);
        if (s.h % div != 0 || s.w % div != 0)
            throw ConfigError("input spatial size must be divisible by " + std::to_string(div) +
                              ", got " + s.str());
    }
};

template <std::floating_point T>
ClassifierNet<T> build_classifier(const NetworkSpec& spec, Rng& rng) {
    return ClassifierNet<T>::build(spec, rng);
}

template <std::floating_point T>
FpnNet<T> build_fpn_segmenter(const NetworkSpec& spec, Rng& rng) {
    return FpnNet<T>::build(spec, rng);
}

// One-shot inference returning logits as a plain tensor (N x K x 1 x 1).
template <std::floating_point T>
Tensor<T> forward_classify(ClassifierNet<T>& net, const Tensor<T>& batch, Mode mode = Mode::eval) {
    Tape<T> t;
    Var<T> x = t.input(batch, /*requires_grad=*/false, "batch");
    return t.value(net.forward(t, x, mode));
}

} // namespace aff
