#pragma once

#include <string>
#include <vector>

#include "aff/layers.hpp"

namespace aff {

// Context scale of one attention branch: `local` keeps the spatial grid,
// `global` pools it to 1x1 before the bottleneck.
enum class BranchScale { local, global };

inline const char* branch_scale_name(BranchScale s) {
    return s == BranchScale::local ? "local" : "global";
}

// Point-wise conv bottleneck: C -> C/r -> C with BN+ReLU in the middle and a
// trailing BN. The closing conv starts at zero so an untrained branch emits an
// exactly-zero context.
template <std::floating_point T>
struct BottleneckBranch {
    BranchScale scale = BranchScale::local;
    Conv2dLayer<T> pw1, pw2;
    BatchNormLayer<T> bn1, bn2;

    static BottleneckBranch make(int channels, int ratio, BranchScale scale, Rng& rng) {
        if (channels <= 0) throw ConfigError("bottleneck channels must be positive");
        if (ratio <= 0) throw ConfigError("bottleneck ratio must be positive");
        if (channels % ratio != 0)
            throw ConfigError("attention channels " + std::to_string(channels) +
                              " must be divisible by reduction ratio " + std::to_string(ratio));
        const int inner = channels / ratio;
        BottleneckBranch b;
        b.scale = scale;
        b.pw1 = Conv2dLayer<T>::make(channels, inner, 1, 1, 0, rng, InitKind::kaiming);
        b.bn1 = BatchNormLayer<T>::make(inner);
        b.pw2 = Conv2dLayer<T>::make(inner, channels, 1, 1, 0, rng, InitKind::zeros);
        b.bn2 = BatchNormLayer<T>::make(channels);
        return b;
    }

    // N x C x H x W in; out is N x C x H x W (local) or N x C x 1 x 1 (global).
    Var<T> forward(Tape<T>& t, Var<T> x, Mode mode, const std::string& name) {
        typename Tape<T>::Scope scope(t, name);
        Var<T> h = x;
        if (scale == BranchScale::global) h = t.global_avg_pool(h, "pool");
        h = pw1.forward(t, h, "pw1");
        h = bn1.forward(t, h, mode, "bn1");
        h = t.relu(h, "relu");
        h = pw2.forward(t, h, "pw2");
        h = bn2.forward(t, h, mode, "bn2");
        return h;
    }

    void collect(std::vector<Parameter<T>*>& out, const std::string& prefix) {
        pw1.collect(out, prefix + ".pw1");
        bn1.collect(out, prefix + ".bn1");
        pw2.collect(out, prefix + ".pw2");
        bn2.collect(out, prefix + ".bn2");
    }

    void collect_state(std::vector<std::pair<std::string, std::vector<T>*>>& out,
                       const std::string& prefix) {
        bn1.collect_state(out, prefix + ".bn1");
        bn2.collect_state(out, prefix + ".bn2");
    }

    std::int64_t param_count() const {
        return pw1.kernel.count() + pw2.kernel.count() + 2 * bn1.gamma.count() +
               2 * bn2.gamma.count();
    }
};

// Multi-scale channel attention: M(X) = sigmoid(sum of branch contexts).
// Default configuration is one local and one global branch; the branch scales
// can be overridden for ablations, and a single-branch form is supported.
// All two-branch configurations have identical parameter counts because
// pooling is parameter-free.
template <std::floating_point T>
struct MsCam {
    std::vector<BottleneckBranch<T>> branches;
    int channels_ = 0;
    int ratio_ = 4;

    static MsCam make(int channels, int ratio, Rng& rng,
                      BranchScale s1 = BranchScale::local,
                      BranchScale s2 = BranchScale::global) {
        MsCam m;
        m.channels_ = channels;
        m.ratio_ = ratio;
        m.branches.push_back(BottleneckBranch<T>::make(channels, ratio, s1, rng));
        m.branches.push_back(BottleneckBranch<T>::make(channels, ratio, s2, rng));
        return m;
    }

    static MsCam make_single(int channels, int ratio, Rng& rng,
                             BranchScale s = BranchScale::global) {
        MsCam m;
        m.channels_ = channels;
        m.ratio_ = ratio;
        m.branches.push_back(BottleneckBranch<T>::make(channels, ratio, s, rng));
        return m;
    }

    int channels() const { return channels_; }

    std::vector<Var<T>> contexts(Tape<T>& t, Var<T> x, Mode mode, const std::string& name) {
        std::vector<Var<T>> out;
        out.reserve(branches.size());
        for (std::size_t i = 0; i < branches.size(); ++i)
            out.push_back(branches[i].forward(t, x, mode, name + ".br" + std::to_string(i + 1)));
        return out;
    }

    // Pre-sigmoid attention logits: broadcast sum of all branch contexts.
    Var<T> logits(Tape<T>& t, Var<T> x, Mode mode, const std::string& name = "mscam") {
        std::vector<Var<T>> ctx = contexts(t, x, mode, name);
        Var<T> s = ctx[0];
        for (std::size_t i = 1; i < ctx.size(); ++i) s = t.add(s, ctx[i], name + ".ctx_sum");
        return s;
    }

    Var<T> weight_map(Tape<T>& t, Var<T> x, Mode mode, const std::string& name = "mscam") {
        return t.sigmoid(logits(t, x, mode, name), name + ".sigmoid");
    }

    // X' = X (*) M(X)
    Var<T> refine(Tape<T>& t, Var<T> x, Mode mode, const std::string& name = "mscam") {
        return t.mul(x, weight_map(t, x, mode, name), name + ".refine");
    }

    void collect(std::vector<Parameter<T>*>& out, const std::string& prefix) {
        const std::size_t from = out.size();
        for (std::size_t i = 0; i < branches.size(); ++i)
            branches[i].collect(out, prefix + ".br" + std::to_string(i + 1));
        mark_attention(out, from);
    }

    void collect_state(std::vector<std::pair<std::string, std::vector<T>*>>& out,
                       const std::string& prefix) {
        for (std::size_t i = 0; i < branches.size(); ++i)
            branches[i].collect_state(out, prefix + ".br" + std::to_string(i + 1));
    }

    std::int64_t param_count() const {
        std::int64_t n = 0;
        for (const auto& b : branches) n += b.param_count();
        return n;
    }
};

} // namespace aff
