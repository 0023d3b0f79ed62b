#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "aff/network.hpp"

namespace aff {

enum class CheckScope { ops, attention, fusion, blocks, all };

inline const char* check_scope_name(CheckScope s) {
    switch (s) {
        case CheckScope::ops: return "ops";
        case CheckScope::attention: return "attention";
        case CheckScope::fusion: return "fusion";
        case CheckScope::blocks: return "blocks";
        case CheckScope::all: return "all";
    }
    return "?";
}

inline CheckScope parse_check_scope(const std::string& s) {
    if (s == "ops") return CheckScope::ops;
    if (s == "attention") return CheckScope::attention;
    if (s == "fusion") return CheckScope::fusion;
    if (s == "blocks") return CheckScope::blocks;
    if (s == "all") return CheckScope::all;
    throw ConfigError("unknown gradcheck scope '" + s + "'");
}

// One checkable subgraph. `build` must be a pure function of the inputs and the
// params' values (BN running-stat updates are fine: they never feed back into
// the same forward). The harness perturbs every element of every input and
// parameter.
template <std::floating_point T>
struct CheckUnit {
    std::string name;
    std::vector<Tensor<T>*> inputs;
    std::vector<Parameter<T>*> params;
    std::function<Var<T>(Tape<T>&, std::vector<Var<T>>&)> build;
    std::function<void(Rng&)> randomize; // optional per-trial input refresh
    std::shared_ptr<void> state;         // owns whatever the closures reference
};

template <std::floating_point T>
struct CheckResult {
    std::string name;
    T max_rel_err = T(0);
    bool pass = false;
};

// Central finite differences against reverse-mode gradients, scalarized by a
// random projection of the output. Relative error |a-b|/max(|a|,|b|,1e-5):
// the floor plays the role of an absolute tolerance for near-zero components,
// where the FD cancellation noise (~eps*|f|/step) would otherwise be graded
// as if it were gradient error.
//
// Components that grade near the tolerance are re-measured at step/4 and the
// better-converged estimate kept. Batch norm over a pooled 1x1 grid (or over
// upsample-duplicated values) normalizes only a handful of values per
// channel, and its curvature spikes like 1/bn_eps when two of them nearly
// coincide; the O(step^2) truncation error then lands right at the tolerance
// even though the analytic gradient is exact. Refining the step shrinks
// truncation 16x, while a wrong backward disagrees with the refined estimate
// just as much as with the first one (FD converges to the true derivative).
template <std::floating_point T>
CheckResult<T> grad_check(CheckUnit<T>& unit, Rng& rng, int n_trials = 1, T step = T(1e-5),
                          T tol = T(1e-4)) {
    CheckResult<T> res;
    res.name = unit.name;
    for (int trial = 0; trial < n_trials; ++trial) {
        if (unit.randomize) unit.randomize(rng);
        for (auto* p : unit.params) p->zero_grad();

        Tape<T> tape;
        std::vector<Var<T>> ivars;
        Var<T> out = unit.build(tape, ivars);
        if (ivars.size() != unit.inputs.size())
            throw StateError("check unit '" + unit.name + "' reported " +
                             std::to_string(ivars.size()) + " input vars for " +
                             std::to_string(unit.inputs.size()) + " inputs");
        const Tensor<T> weights = Tensor<T>::uniform(tape.value(out).shape(), rng, T(-1), T(1));
        tape.backward(out, weights);

        std::vector<Tensor<T>> analytic;
        for (Var<T> v : ivars) analytic.push_back(tape.grad(v));
        for (auto* p : unit.params) analytic.push_back(p->grad);

        auto project = [&]() -> T {
            Tape<T> t2;
            std::vector<Var<T>> iv;
            Var<T> o = unit.build(t2, iv);
            const Tensor<T>& ov = t2.value(o);
            T s = 0;
            for (std::int64_t i = 0; i < ov.size(); ++i) s += ov[i] * weights[i];
            return s;
        };

        auto central_diff = [&](Tensor<T>& tgt, std::int64_t j, T h) -> T {
            const T saved = tgt[j];
            tgt[j] = saved + h;
            const T up = project();
            tgt[j] = saved - h;
            const T down = project();
            tgt[j] = saved;
            return (up - down) / (2 * h);
        };
        auto rel_err = [](T an, T fd) -> T {
            const T denom = std::max({std::abs(an), std::abs(fd), T(1e-5)});
            return std::abs(an - fd) / denom;
        };

        std::vector<Tensor<T>*> targets = unit.inputs;
        for (auto* p : unit.params) targets.push_back(&p->value);
        for (std::size_t ti = 0; ti < targets.size(); ++ti) {
            Tensor<T>& tgt = *targets[ti];
            for (std::int64_t j = 0; j < tgt.size(); ++j) {
                const T an = analytic[ti][j];
                T rel = rel_err(an, central_diff(tgt, j, step));
                if (rel >= tol / 2) rel = std::min(rel, rel_err(an, central_diff(tgt, j, step / 4)));
                res.max_rel_err = std::max(res.max_rel_err, rel);
            }
        }
    }
    res.pass = res.max_rel_err < tol;
    return res;
}

namespace detail {

// Push elements with |v| < min_mag away from zero so kinked ops (ReLU) do not
// straddle the kink within the finite-difference step.
template <std::floating_point T>
void nudge_from_zero(Tensor<T>& t, T min_mag) {
    for (std::int64_t i = 0; i < t.size(); ++i)
        if (std::abs(t[i]) < min_mag) t[i] += (t[i] >= 0 ? min_mag : -min_mag);
}

template <std::floating_point T>
void randomize_params(const std::vector<Parameter<T>*>& params, Rng& rng, T scale = T(0.6)) {
    for (auto* p : params) p->value = Tensor<T>::uniform(p->value.shape(), rng, -scale, scale);
}

template <std::floating_point T>
CheckUnit<T> input_unit(std::string name, Shape shape,
                        std::function<Var<T>(Tape<T>&, Var<T>)> f, T min_mag = T(0)) {
    struct St {
        Tensor<T> x;
    };
    auto st = std::make_shared<St>();
    st->x = Tensor<T>::zeros(shape);
    CheckUnit<T> u;
    u.name = std::move(name);
    u.state = st;
    u.inputs = {&st->x};
    u.build = [st, f](Tape<T>& t, std::vector<Var<T>>& iv) {
        Var<T> x = t.input(st->x, true, "x");
        iv.push_back(x);
        return f(t, x);
    };
    u.randomize = [st, min_mag](Rng& r) {
        st->x = Tensor<T>::uniform(st->x.shape(), r, T(-1), T(1));
        if (min_mag > 0) nudge_from_zero(st->x, min_mag);
    };
    return u;
}

template <std::floating_point T>
CheckUnit<T> pair_unit(std::string name, Shape sx, Shape sy,
                       std::function<Var<T>(Tape<T>&, Var<T>, Var<T>)> f) {
    struct St {
        Tensor<T> x, y;
    };
    auto st = std::make_shared<St>();
    st->x = Tensor<T>::zeros(sx);
    st->y = Tensor<T>::zeros(sy);
    CheckUnit<T> u;
    u.name = std::move(name);
    u.state = st;
    u.inputs = {&st->x, &st->y};
    u.build = [st, f](Tape<T>& t, std::vector<Var<T>>& iv) {
        Var<T> x = t.input(st->x, true, "x");
        Var<T> y = t.input(st->y, true, "y");
        iv.push_back(x);
        iv.push_back(y);
        return f(t, x, y);
    };
    u.randomize = [st](Rng& r) {
        st->x = Tensor<T>::uniform(st->x.shape(), r, T(-1), T(1));
        st->y = Tensor<T>::uniform(st->y.shape(), r, T(-1), T(1));
    };
    return u;
}

} // namespace detail

// Plain convolution chain — linear in every input, so FD matches to roundoff.
template <std::floating_point T>
CheckUnit<T> make_linear_unit() {
    return detail::pair_unit<T>("linear_conv", {1, 2, 3, 3}, {2, 2, 3, 3},
                                [](Tape<T>& t, Var<T> x, Var<T> w) {
                                    return t.conv2d(x, w, Var<T>{}, 1, 1, "conv");
                                });
}

// Negative control: forward doubles, but the hand-written vjp claims a factor
// of three, so finite differences must flag it.
template <std::floating_point T>
CheckUnit<T> make_fault_unit() {
    return detail::input_unit<T>("fault_injection", {1, 2, 3, 3}, [](Tape<T>& t, Var<T> x) {
        return t.apply(
            x,
            [](const Tensor<T>& v) {
                Tensor<T> o(v.shape());
                for (std::int64_t i = 0; i < v.size(); ++i) o[i] = 2 * v[i];
                return o;
            },
            [](const Tensor<T>&, const Tensor<T>& g) {
                Tensor<T> o(g.shape());
                for (std::int64_t i = 0; i < g.size(); ++i) o[i] = 3 * g[i];
                return o;
            },
            "bad_scale");
    });
}

template <std::floating_point T>
std::vector<CheckUnit<T>> make_op_units(Rng& rng) {
    using detail::input_unit;
    using detail::pair_unit;
    std::vector<CheckUnit<T>> units;
    const Shape s{1, 2, 3, 3};

    units.push_back(pair_unit<T>("conv2d_1x1", s, {3, 2, 1, 1}, [](Tape<T>& t, Var<T> x, Var<T> w) {
        return t.conv2d(x, w, Var<T>{}, 1, 0, "conv");
    }));
    units.push_back(pair_unit<T>("conv2d_3x3_pad1", s, {2, 2, 3, 3},
                                 [](Tape<T>& t, Var<T> x, Var<T> w) {
                                     return t.conv2d(x, w, Var<T>{}, 1, 1, "conv");
                                 }));
    units.push_back(pair_unit<T>("conv2d_3x3_stride2", s, {2, 2, 3, 3},
                                 [](Tape<T>& t, Var<T> x, Var<T> w) {
                                     return t.conv2d(x, w, Var<T>{}, 2, 1, "conv");
                                 }));
    units.push_back(pair_unit<T>("conv2d_5x5_pad2", s, {2, 2, 5, 5},
                                 [](Tape<T>& t, Var<T> x, Var<T> w) {
                                     return t.conv2d(x, w, Var<T>{}, 1, 2, "conv");
                                 }));

    {
        // Conv with bias: bias enters as a third checked input.
        struct St {
            Tensor<T> x{Shape{1, 2, 3, 3}}, w{Shape{2, 2, 1, 1}}, b{Shape{2, 1, 1, 1}};
        };
        auto st = std::make_shared<St>();
        CheckUnit<T> u;
        u.name = "conv2d_bias";
        u.state = st;
        u.inputs = {&st->x, &st->w, &st->b};
        u.build = [st](Tape<T>& t, std::vector<Var<T>>& iv) {
            Var<T> x = t.input(st->x, true, "x");
            Var<T> w = t.input(st->w, true, "w");
            Var<T> b = t.input(st->b, true, "b");
            iv = {x, w, b};
            return t.conv2d(x, w, b, 1, 0, "conv");
        };
        u.randomize = [st](Rng& r) {
            st->x = Tensor<T>::uniform(st->x.shape(), r, T(-1), T(1));
            st->w = Tensor<T>::uniform(st->w.shape(), r, T(-1), T(1));
            st->b = Tensor<T>::uniform(st->b.shape(), r, T(-1), T(1));
        };
        units.push_back(std::move(u));
    }

    for (Mode mode : {Mode::train, Mode::eval}) {
        struct St {
            Tensor<T> x{Shape{1, 2, 3, 3}}, g{Shape{2, 1, 1, 1}}, b{Shape{2, 1, 1, 1}};
            std::vector<T> rm, rv;
        };
        auto st = std::make_shared<St>();
        st->rm = {T(0.2), T(-0.4)};
        st->rv = {T(1.3), T(0.7)};
        CheckUnit<T> u;
        u.name = mode == Mode::train ? "batch_norm_train" : "batch_norm_eval";
        u.state = st;
        u.inputs = {&st->x, &st->g, &st->b};
        u.build = [st, mode](Tape<T>& t, std::vector<Var<T>>& iv) {
            Var<T> x = t.input(st->x, true, "x");
            Var<T> g = t.input(st->g, true, "gamma");
            Var<T> b = t.input(st->b, true, "beta");
            iv = {x, g, b};
            return t.batch_norm(x, g, b, st->rm, st->rv, T(1e-5), T(0.9), mode, "bn");
        };
        u.randomize = [st](Rng& r) {
            st->x = Tensor<T>::uniform(st->x.shape(), r, T(-1), T(1));
            st->g = Tensor<T>::uniform(st->g.shape(), r, T(0.5), T(1.5));
            st->b = Tensor<T>::uniform(st->b.shape(), r, T(-0.5), T(0.5));
        };
        units.push_back(std::move(u));
    }

    units.push_back(input_unit<T>("relu", s,
                                  [](Tape<T>& t, Var<T> x) { return t.relu(x, "relu"); },
                                  T(0.05)));
    units.push_back(
        input_unit<T>("sigmoid", s, [](Tape<T>& t, Var<T> x) { return t.sigmoid(x, "sig"); }));
    units.push_back(input_unit<T>(
        "global_avg_pool", s, [](Tape<T>& t, Var<T> x) { return t.global_avg_pool(x, "gap"); }));
    units.push_back(pair_unit<T>(
        "add", s, s, [](Tape<T>& t, Var<T> x, Var<T> y) { return t.add(x, y, "add"); }));
    units.push_back(pair_unit<T>("add_broadcast", s, {1, 2, 1, 1}, [](Tape<T>& t, Var<T> x,
                                                                      Var<T> y) {
        return t.add(x, y, "add");
    }));
    units.push_back(pair_unit<T>(
        "mul", s, s, [](Tape<T>& t, Var<T> x, Var<T> y) { return t.mul(x, y, "mul"); }));
    units.push_back(pair_unit<T>("mul_broadcast", s, {1, 2, 1, 1}, [](Tape<T>& t, Var<T> x,
                                                                      Var<T> y) {
        return t.mul(x, y, "mul");
    }));
    units.push_back(pair_unit<T>("concat_channels", s, {1, 3, 3, 3},
                                 [](Tape<T>& t, Var<T> x, Var<T> y) {
                                     return t.concat_channels(x, y, "cat");
                                 }));
    units.push_back(input_unit<T>(
        "upsample2x", s, [](Tape<T>& t, Var<T> x) { return t.upsample2x(x, "up"); }));
    units.push_back(input_unit<T>("tile_spatial", {1, 2, 1, 1}, [](Tape<T>& t, Var<T> x) {
        return t.tile_spatial(x, 3, 3, "tile");
    }));
    units.push_back(pair_unit<T>("fully_connected", {2, 3, 1, 1}, {4, 3, 1, 1},
                                 [](Tape<T>& t, Var<T> x, Var<T> w) {
                                     return t.fully_connected(x, w, Var<T>{}, "fc");
                                 }));
    units.push_back(input_unit<T>("affine", s, [](Tape<T>& t, Var<T> x) {
        return t.affine(x, T(2.5), T(-0.3), "affine");
    }));
    units.push_back(input_unit<T>(
        "one_minus", s, [](Tape<T>& t, Var<T> x) { return t.one_minus(x, "om"); }));
    units.push_back(input_unit<T>("softmax_cross_entropy", {1, 3, 2, 2},
                                  [](Tape<T>& t, Var<T> x) {
                                      return t.softmax_cross_entropy(x, {0, 2, 1, 0}, "ce");
                                  }));
    (void)rng;
    return units;
}

namespace detail {

template <std::floating_point T>
CheckUnit<T> attention_unit(std::string name, MsCam<T> cam, Shape in, Rng& rng) {
    struct St {
        MsCam<T> cam;
        Tensor<T> x;
    };
    auto st = std::make_shared<St>();
    st->cam = std::move(cam);
    st->x = Tensor<T>::zeros(in);
    CheckUnit<T> u;
    u.name = std::move(name);
    u.state = st;
    u.inputs = {&st->x};
    st->cam.collect(u.params, "cam");
    randomize_params(u.params, rng);
    u.build = [st](Tape<T>& t, std::vector<Var<T>>& iv) {
        Var<T> x = t.input(st->x, true, "x");
        iv.push_back(x);
        return st->cam.refine(t, x, Mode::train, "cam");
    };
    u.randomize = [st](Rng& r) {
        st->x = Tensor<T>::uniform(st->x.shape(), r, T(-1), T(1));
    };
    return u;
}

template <std::floating_point T>
CheckUnit<T> fusion_unit(FusionKind kind, int channels, int ratio, Shape in, Rng& rng) {
    struct St {
        FusionModule<T> mod;
        Tensor<T> x, y;
    };
    auto st = std::make_shared<St>();
    st->mod = FusionModule<T>::make(kind, channels, ratio, rng);
    st->x = Tensor<T>::zeros(in);
    st->y = Tensor<T>::zeros(in);
    CheckUnit<T> u;
    u.name = std::string("fuse_") + fusion_kind_name(kind);
    u.state = st;
    u.inputs = {&st->x, &st->y};
    st->mod.collect(u.params, "fuse");
    randomize_params(u.params, rng);
    u.build = [st](Tape<T>& t, std::vector<Var<T>>& iv) {
        Var<T> x = t.input(st->x, true, "x");
        Var<T> y = t.input(st->y, true, "y");
        iv = {x, y};
        return st->mod.fuse(t, x, y, Mode::train, "fuse");
    };
    u.randomize = [st](Rng& r) {
        st->x = Tensor<T>::uniform(st->x.shape(), r, T(-1), T(1));
        st->y = Tensor<T>::uniform(st->y.shape(), r, T(-1), T(1));
    };
    return u;
}

template <std::floating_point T>
CheckUnit<T> resblock_unit(std::string name, int in_c, int out_c, int stride, FusionKind kind,
                           Shape in, Rng& rng) {
    struct St {
        ResBlock<T> block;
        Tensor<T> x;
    };
    auto st = std::make_shared<St>();
    st->block = ResBlock<T>::make(in_c, out_c, stride, kind, 4, rng);
    st->x = Tensor<T>::zeros(in);
    CheckUnit<T> u;
    u.name = std::move(name);
    u.state = st;
    u.inputs = {&st->x};
    st->block.collect(u.params, "block");
    randomize_params(u.params, rng, T(0.4));
    u.build = [st](Tape<T>& t, std::vector<Var<T>>& iv) {
        Var<T> x = t.input(st->x, true, "x");
        iv.push_back(x);
        return st->block.forward(t, x, Mode::train, "block");
    };
    u.randomize = [st](Rng& r) {
        st->x = Tensor<T>::uniform(st->x.shape(), r, T(-1), T(1));
    };
    return u;
}

} // namespace detail

template <std::floating_point T>
std::vector<CheckUnit<T>> make_attention_units(Rng& rng) {
    const Shape in{2, 4, 3, 3};
    std::vector<CheckUnit<T>> units;
    units.push_back(detail::attention_unit<T>(
        "mscam_local_global", MsCam<T>::make(4, 4, rng), in, rng));
    units.push_back(detail::attention_unit<T>(
        "mscam_global_global",
        MsCam<T>::make(4, 4, rng, BranchScale::global, BranchScale::global), in, rng));
    units.push_back(detail::attention_unit<T>(
        "mscam_local_local", MsCam<T>::make(4, 4, rng, BranchScale::local, BranchScale::local),
        in, rng));
    units.push_back(detail::attention_unit<T>(
        "mscam_single_global", MsCam<T>::make_single(4, 4, rng, BranchScale::global), in, rng));
    units.push_back(detail::attention_unit<T>(
        "mscam_single_local", MsCam<T>::make_single(4, 4, rng, BranchScale::local), in, rng));
    return units;
}

template <std::floating_point T>
std::vector<CheckUnit<T>> make_fusion_units(Rng& rng) {
    std::vector<CheckUnit<T>> units;
    for (FusionKind k : all_fusion_kinds())
        units.push_back(detail::fusion_unit<T>(k, 4, 4, Shape{2, 4, 3, 3}, rng));
    return units;
}

template <std::floating_point T>
std::vector<CheckUnit<T>> make_block_units(Rng& rng) {
    std::vector<CheckUnit<T>> units;
    units.push_back(detail::resblock_unit<T>("resblock_add", 4, 4, 1, FusionKind::add,
                                             Shape{2, 4, 4, 4}, rng));
    units.push_back(detail::resblock_unit<T>("resblock_aff", 4, 4, 1, FusionKind::aff,
                                             Shape{2, 4, 4, 4}, rng));
    units.push_back(detail::resblock_unit<T>("resblock_aff_proj", 4, 8, 2, FusionKind::aff,
                                             Shape{2, 4, 6, 6}, rng));
    units.push_back(detail::resblock_unit<T>("resblock_iaff", 4, 4, 1, FusionKind::iaff,
                                             Shape{2, 4, 4, 4}, rng));

    {
        struct St {
            InceptionBlock<T> block;
            Tensor<T> x;
        };
        auto st = std::make_shared<St>();
        st->block = InceptionBlock<T>::make(4, 4, 1, FusionKind::aff, 4, rng);
        st->x = Tensor<T>::zeros(Shape{2, 4, 5, 5});
        CheckUnit<T> u;
        u.name = "inception_aff";
        u.state = st;
        u.inputs = {&st->x};
        st->block.collect(u.params, "block");
        detail::randomize_params(u.params, rng, T(0.4));
        u.build = [st](Tape<T>& t, std::vector<Var<T>>& iv) {
            Var<T> x = t.input(st->x, true, "x");
            iv.push_back(x);
            return st->block.forward(t, x, Mode::train, "block");
        };
        u.randomize = [st](Rng& r) {
            st->x = Tensor<T>::uniform(st->x.shape(), r, T(-1), T(1));
        };
        units.push_back(std::move(u));
    }

    {
        // Tiny two-level pyramid: exercises upsample + lateral + merge fusion.
        NetworkSpec spec;
        spec.scenario = Scenario::long_skip;
        spec.b = 1;
        spec.base_channels = 4;
        spec.stages = 2;
        spec.fusion = FusionKind::aff;
        spec.num_classes = 2;
        struct St {
            FpnNet<T> net;
            Tensor<T> x;
            St(const NetworkSpec& sp, Rng& r) : net(FpnNet<T>::build(sp, r)) {}
        };
        auto st = std::make_shared<St>(spec, rng);
        st->x = Tensor<T>::zeros(Shape{2, 3, 4, 4});
        CheckUnit<T> u;
        u.name = "fpn_merge_aff";
        u.state = st;
        u.inputs = {&st->x};
        u.params = st->net.parameters();
        u.build = [st](Tape<T>& t, std::vector<Var<T>>& iv) {
            Var<T> x = t.input(st->x, true, "x");
            iv.push_back(x);
            return st->net.forward(t, x, Mode::train);
        };
        u.randomize = [st](Rng& r) {
            st->x = Tensor<T>::uniform(st->x.shape(), r, T(-1), T(1));
        };
        units.push_back(std::move(u));
    }
    return units;
}

template <std::floating_point T>
std::vector<CheckUnit<T>> build_check_suite(CheckScope scope, Rng& rng) {
    std::vector<CheckUnit<T>> units;
    auto append = [&](std::vector<CheckUnit<T>> more) {
        for (auto& u : more) units.push_back(std::move(u));
    };
    if (scope == CheckScope::ops || scope == CheckScope::all) append(make_op_units<T>(rng));
    if (scope == CheckScope::attention || scope == CheckScope::all)
        append(make_attention_units<T>(rng));
    if (scope == CheckScope::fusion || scope == CheckScope::all) append(make_fusion_units<T>(rng));
    if (scope == CheckScope::blocks || scope == CheckScope::all) append(make_block_units<T>(rng));
    return units;
}

} // namespace aff
