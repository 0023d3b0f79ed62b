#pragma once

#include <string>
#include <vector>

#include "aff/attention.hpp"

namespace aff {

// Fusion formulations. The first two are attention-free baselines; the rest
// generate channel-attention weights and differ in which inputs feed the
// weight generator and how the weights are applied.
enum class FusionKind {
    add,                 // X + Y
    concat,              // PWConv+BN over channel-concat (per-pixel linear map)
    refine_ms_senet,     // X + M(Y) (*) Y
    modulate_ms_gau,     // M(Y) (*) X + Y
    soft_select_highway, // M(X) (*) X + (1-M(X)) (*) Y
    modulate_ms_sa,      // M(X+Y) (*) X + Y
    aff,                 // M(X+Y) (*) X + (1-M(X+Y)) (*) Y
    iaff,                // aff with the initial X+Y replaced by a first aff stage
    half_aff,            // aff with a single-context-branch weight generator
    concat_aff,          // aff with contexts merged by concat + projection
    recursive_aff,       // aff with contexts merged by nested sigmoid weighting
};

inline const char* fusion_kind_name(FusionKind k) {
    switch (k) {
        case FusionKind::add: return "add";
        case FusionKind::concat: return "concat";
        case FusionKind::refine_ms_senet: return "refine_ms_senet";
        case FusionKind::modulate_ms_gau: return "modulate_ms_gau";
        case FusionKind::soft_select_highway: return "soft_select_highway";
        case FusionKind::modulate_ms_sa: return "modulate_ms_sa";
        case FusionKind::aff: return "aff";
        case FusionKind::iaff: return "iaff";
        case FusionKind::half_aff: return "half_aff";
        case FusionKind::concat_aff: return "concat_aff";
        case FusionKind::recursive_aff: return "recursive_aff";
    }
    return "?";
}

inline const std::vector<FusionKind>& all_fusion_kinds() {
    static const std::vector<FusionKind> kinds = {
        FusionKind::add,        FusionKind::concat,
        FusionKind::refine_ms_senet, FusionKind::modulate_ms_gau,
        FusionKind::soft_select_highway, FusionKind::modulate_ms_sa,
        FusionKind::aff,        FusionKind::iaff,
        FusionKind::half_aff,   FusionKind::concat_aff,
        FusionKind::recursive_aff,
    };
    return kinds;
}

inline FusionKind parse_fusion_kind(const std::string& s) {
    for (FusionKind k : all_fusion_kinds())
        if (s == fusion_kind_name(k)) return k;
    throw ConfigError("unknown fusion kind '" + s + "'");
}

inline bool fusion_is_attentional(FusionKind k) {
    return k != FusionKind::add && k != FusionKind::concat;
}

// Soft-selection kinds apply M to X and 1-M to Y, so the applied weights sum
// to one elementwise.
inline bool fusion_is_soft_select(FusionKind k) {
    switch (k) {
        case FusionKind::soft_select_highway:
        case FusionKind::aff:
        case FusionKind::iaff:
        case FusionKind::half_aff:
        case FusionKind::concat_aff:
        case FusionKind::recursive_aff: return true;
        default: return false;
    }
}

enum class IntegrateMode { sum, aff_stage };

template <std::floating_point T>
struct FusionModule {
    FusionKind kind = FusionKind::add;
    int channels = 0;
    std::vector<MsCam<T>> cams;  // 0, 1 or 2 weight generators
    Conv2dLayer<T> proj;         // 2C->C merge (concat, concat_aff)
    BatchNormLayer<T> proj_bn;   // concat only
    bool has_proj = false;
    bool has_proj_bn = false;

    static FusionModule make(FusionKind kind, int channels, int ratio, Rng& rng,
                             BranchScale s1 = BranchScale::local,
                             BranchScale s2 = BranchScale::global) {
        FusionModule f;
        f.kind = kind;
        f.channels = channels;
        switch (kind) {
            case FusionKind::add:
                break;
            case FusionKind::concat:
                f.proj = Conv2dLayer<T>::make(2 * channels, channels, 1, 1, 0, rng);
                f.proj_bn = BatchNormLayer<T>::make(channels);
                f.has_proj = f.has_proj_bn = true;
                break;
            case FusionKind::half_aff:
                // Single context branch; global scale keeps the SE-style form.
                f.cams.push_back(MsCam<T>::make_single(channels, ratio, rng, BranchScale::global));
                break;
            case FusionKind::iaff:
                f.cams.push_back(MsCam<T>::make(channels, ratio, rng, s1, s2));
                f.cams.push_back(MsCam<T>::make(channels, ratio, rng, s1, s2));
                break;
            case FusionKind::concat_aff:
                f.cams.push_back(MsCam<T>::make(channels, ratio, rng, s1, s2));
                f.proj = Conv2dLayer<T>::make(2 * channels, channels, 1, 1, 0, rng);
                f.proj.kernel.attention = true;
                f.has_proj = true;
                break;
            default:
                f.cams.push_back(MsCam<T>::make(channels, ratio, rng, s1, s2));
                break;
        }
        return f;
    }

    // The attention map M that multiplies X (for refine_ms_senet it multiplies
    // Y, the only weighted operand). Unsupported for attention-free kinds.
    Var<T> weight_map(Tape<T>& t, Var<T> x, Var<T> y, Mode mode,
                      const std::string& name = "fusion") {
        if (!fusion_is_attentional(kind))
            throw UnsupportedError(std::string("fusion kind '") + fusion_kind_name(kind) +
                                   "' has no attention weights");
        check_inputs(t, x, y);
        typename Tape<T>::Scope scope(t, name);
        switch (kind) {
            case FusionKind::refine_ms_senet:
            case FusionKind::modulate_ms_gau:
                return cams[0].weight_map(t, y, mode, "cam1");
            case FusionKind::soft_select_highway:
                return cams[0].weight_map(t, x, mode, "cam1");
            case FusionKind::modulate_ms_sa:
            case FusionKind::aff:
            case FusionKind::half_aff:
                return cams[0].weight_map(t, t.add(x, y, "integrate"), mode, "cam1");
            case FusionKind::iaff: {
                Var<T> m1 = cams[0].weight_map(t, t.add(x, y, "integrate"), mode, "cam1");
                Var<T> u = soft_select(t, m1, x, y, "stage1");
                return cams[1].weight_map(t, u, mode, "cam2");
            }
            case FusionKind::concat_aff: {
                Var<T> u = t.add(x, y, "integrate");
                std::vector<Var<T>> ctx = cams[0].contexts(t, u, mode, "cam1");
                const Shape us = t.value(u).shape();
                for (auto& c : ctx) {
                    const Shape cs = t.value(c).shape();
                    if (cs.h != us.h || cs.w != us.w) c = t.tile_spatial(c, us.h, us.w, "tile");
                }
                Var<T> cat = t.concat_channels(ctx[0], ctx[1], "ctx_cat");
                return t.sigmoid(proj.forward(t, cat, "proj"), "sigmoid");
            }
            case FusionKind::recursive_aff: {
                // Nested sigmoids: the inner map weighs the two contexts, the
                // outer squashes their blend. The inner blend order (local
                // weighted by M_in, global by 1-M_in) is a judgment call; the
                // reverse wiring is algebraically symmetric.
                Var<T> u = t.add(x, y, "integrate");
                std::vector<Var<T>> ctx = cams[0].contexts(t, u, mode, "cam1");
                Var<T> inner = t.sigmoid(t.add(ctx[0], ctx[1], "ctx_sum"), "inner_sigmoid");
                Var<T> blend = t.add(t.mul(ctx[0], inner, "wl"),
                                     t.mul(ctx[1], t.one_minus(inner, "inv"), "wg"), "blend");
                return t.sigmoid(blend, "outer_sigmoid");
            }
            default:
                throw UnsupportedError("unhandled fusion kind");
        }
    }

    // Z = fuse(X, Y). `m_applied` (optional) receives the attention map var
    // for attentional kinds, for weight inspection without a second pass.
    Var<T> fuse(Tape<T>& t, Var<T> x, Var<T> y, Mode mode,
                const std::string& name = "fusion", Var<T>* m_applied = nullptr) {
        check_inputs(t, x, y);
        if (kind == FusionKind::add) return t.add(x, y, name);
        if (kind == FusionKind::concat) {
            typename Tape<T>::Scope scope(t, name);
            Var<T> cat = t.concat_channels(x, y, "cat");
            Var<T> h = proj.forward(t, cat, "proj");
            return proj_bn.forward(t, h, mode, "proj_bn");
        }
        Var<T> m = weight_map(t, x, y, mode, name);
        if (m_applied) *m_applied = m;
        typename Tape<T>::Scope scope(t, name);
        switch (kind) {
            case FusionKind::refine_ms_senet:
                return t.add(x, t.mul(y, m, "my"), "out");
            case FusionKind::modulate_ms_gau:
            case FusionKind::modulate_ms_sa:
                return t.add(t.mul(x, m, "mx"), y, "out");
            default:
                return soft_select(t, m, x, y, "select");
        }
    }

    // X (+) Y for Eq-style initial integration: plain sum, or the first AFF
    // stage (uses the first weight generator).
    Var<T> initial_integrate(Tape<T>& t, Var<T> x, Var<T> y, IntegrateMode im, Mode mode,
                             const std::string& name = "integrate") {
        check_inputs(t, x, y);
        if (im == IntegrateMode::sum) return t.add(x, y, name);
        if (cams.empty())
            throw UnsupportedError("aff_stage integration needs an attention stage");
        typename Tape<T>::Scope scope(t, name);
        Var<T> m = cams[0].weight_map(t, t.add(x, y, "sum"), mode, "cam1");
        return soft_select(t, m, x, y, "stage1");
    }

    void collect(std::vector<Parameter<T>*>& out, const std::string& prefix) {
        for (std::size_t i = 0; i < cams.size(); ++i)
            cams[i].collect(out, prefix + ".cam" + std::to_string(i + 1));
        if (has_proj) proj.collect(out, prefix + ".proj");
        if (has_proj_bn) proj_bn.collect(out, prefix + ".proj_bn");
    }

    void collect_state(std::vector<std::pair<std::string, std::vector<T>*>>& out,
                       const std::string& prefix) {
        for (std::size_t i = 0; i < cams.size(); ++i)
            cams[i].collect_state(out, prefix + ".cam" + std::to_string(i + 1));
        if (has_proj_bn) proj_bn.collect_state(out, prefix + ".proj_bn");
    }

    std::int64_t param_count() const {
        std::int64_t n = 0;
        for (const auto& c : cams) n += c.param_count();
        if (has_proj) n += proj.kernel.count();
        if (has_proj_bn) n += 2 * proj_bn.gamma.count();
        return n;
    }

  private:
    static Var<T> soft_select(Tape<T>& t, Var<T> m, Var<T> x, Var<T> y,
                              const std::string& name) {
        return t.add(t.mul(x, m, name + ".mx"),
                     t.mul(y, t.one_minus(m, name + ".inv"), name + ".my"), name + ".out");
    }

    void check_inputs(Tape<T>& t, Var<T> x, Var<T> y) const {
        const Shape& a = t.value(x).shape();
        const Shape& b = t.value(y).shape();
        if (!(a == b))
            throw DimensionError("fusion inputs must match: " + a.str() + " vs " + b.str());
        if (a.c != channels)
            throw DimensionError("fusion module built for " + std::to_string(channels) +
                                 " channels, got " + a.str());
    }
};

} // namespace aff
