#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "aff/kernels.hpp"
#include "aff/tensor.hpp"

namespace aff {

// A learnable tensor. Gradients accumulate additively across backward passes
// until zero_grad(); the optimizer owns the value update.
template <std::floating_point T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = true;
    bool decay_exempt = false; // BN gamma/beta and biases skip weight decay
    bool attention = false;    // lives inside an attention module (cost accounting)

    Parameter() = default;
    explicit Parameter(Tensor<T> v, std::string n = "")
        : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() { std::fill(grad.data(), grad.data() + grad.size(), T(0)); }
    std::int64_t count() const { return value.size(); }
};

template <std::floating_point T>
class Tape;

// Handle to a tape node.
template <std::floating_point T>
struct Var {
    int idx = -1;
    bool valid() const { return idx >= 0; }
};

// Define-by-run reverse-mode tape over the tensor kernels. Forward values are
// computed eagerly as ops are recorded; backward walks nodes in exact reverse
// order and accumulates gradients additively at fan-out.
template <std::floating_point T>
class Tape {
public:
    struct Node {
        Tensor<T> value;
        std::vector<int> parents;
        std::function<void(Tape&, int)> backward; // null for leaves
        Parameter<T>* bound = nullptr;
        bool requires_grad = false;
        std::string name;
    };

    // ---- leaves ----

    Var<T> input(Tensor<T> v, bool requires_grad = true, std::string name = "input") {
        return push(std::move(v), {}, nullptr, requires_grad, std::move(name));
    }

    Var<T> constant(Tensor<T> v, std::string name = "const") {
        return push(std::move(v), {}, nullptr, false, std::move(name));
    }

    // Binding the same Parameter twice returns the same node, so fan-out
    // gradients accumulate in one place.
    Var<T> param(Parameter<T>& p) {
        if (auto it = bound_.find(&p); it != bound_.end()) return Var<T>{it->second};
        Var<T> v = push(p.value, {}, nullptr, p.trainable, p.name.empty() ? "param" : p.name);
        nodes_[v.idx].bound = &p;
        bound_[&p] = v.idx;
        return v;
    }

    // ---- introspection ----

    int node_count() const { return static_cast<int>(nodes_.size()); }

    const Node& node(int idx) const { return nodes_.at(idx); }

    const Tensor<T>& value(Var<T> v) const {
        check_var(v);
        return nodes_[v.idx].value;
    }

    // Gradient of the last backward() output w.r.t. this node. A node the
    // output does not depend on has an all-zero gradient.
    const Tensor<T>& grad(Var<T> v) const {
        check_var(v);
        if (!ran_backward_) throw StateError("grad requested before backward");
        if (grads_[v.idx].empty()) {
            zero_grad_cache_ = Tensor<T>(nodes_[v.idx].value.shape());
            return zero_grad_cache_;
        }
        return grads_[v.idx];
    }

    // ---- operators ----

    Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias, int stride, int padding,
                  std::string name = "conv2d") {
        const Tensor<T>& xv = value(x);
        const Tensor<T>& wv = value(w);
        const T* bptr = bias.valid() ? value(bias).data() : nullptr;
        Tensor<T> out = wrap(name, [&] { return aff::conv2d(xv, wv, bptr, stride, padding); });
        std::vector<int> parents{x.idx, w.idx};
        if (bias.valid()) parents.push_back(bias.idx);
        return push(std::move(out), std::move(parents),
                    [stride, padding](Tape& t, int self) {
                        const Node& nd = t.nodes_[self];
                        const Tensor<T>& gout = t.grads_[self];
                        const int px = nd.parents[0], pw = nd.parents[1];
                        const Tensor<T>& xv = t.nodes_[px].value;
                        const Tensor<T>& wv = t.nodes_[pw].value;
                        if (t.wants(px))
                            conv2d_backward_input(t.grad_buffer(px), wv, gout, stride, padding);
                        if (t.wants(pw))
                            conv2d_backward_kernel(t.grad_buffer(pw), xv, gout, stride, padding);
                        if (nd.parents.size() > 2 && t.wants(nd.parents[2])) {
                            Tensor<T>& gb = t.grad_buffer(nd.parents[2]);
                            const Shape gs = gout.shape();
                            const std::int64_t plane = std::int64_t(gs.h) * gs.w;
                            for (int n = 0; n < gs.n; ++n)
                                for (int co = 0; co < gs.c; ++co) {
                                    const T* gp = gout.data() + gout.index(n, co, 0, 0);
                                    T acc = 0;
                                    for (std::int64_t i = 0; i < plane; ++i) acc += gp[i];
                                    gb[co] += acc;
                                }
                        }
                    },
                    any_grad({x, w, bias}), std::move(name));
    }

    // Train mode normalizes with batch statistics (and differentiates through
    // them); eval mode treats running statistics as constants.
    Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, std::vector<T>& running_mean,
                      std::vector<T>& running_var, T eps, T momentum, Mode mode,
                      std::string name = "batch_norm") {
        const Tensor<T>& xv = value(x);
        auto saved = std::make_shared<BatchNormSaved<T>>();
        std::span<const T> g(value(gamma).data(), static_cast<std::size_t>(value(gamma).size()));
        std::span<const T> b(value(beta).data(), static_cast<std::size_t>(value(beta).size()));
        Tensor<T> out = wrap(name, [&] {
            return batch_norm_forward<T>(xv, g, b, running_mean, running_var, eps, momentum, mode,
                                         saved.get());
        });
        const bool train = mode == Mode::train;
        return push(std::move(out), {x.idx, gamma.idx, beta.idx},
                    [saved, train](Tape& t, int self) {
                        const Node& nd = t.nodes_[self];
                        const Tensor<T>& gout = t.grads_[self];
                        const int px = nd.parents[0], pg = nd.parents[1], pb = nd.parents[2];
                        const Tensor<T>& xv = t.nodes_[px].value;
                        const Tensor<T>& gammav = t.nodes_[pg].value;
                        const Shape s = xv.shape();
                        const std::int64_t plane = std::int64_t(s.h) * s.w;
                        const std::int64_t m = std::int64_t(s.n) * plane;
                        for (int c = 0; c < s.c; ++c) {
                            const T mu = saved->mean[c], is = saved->inv_std[c];
                            T sum_g = 0, sum_gx = 0;
                            for (int n = 0; n < s.n; ++n) {
                                const T* gp = gout.data() + gout.index(n, c, 0, 0);
                                const T* xp = xv.data() + xv.index(n, c, 0, 0);
                                for (std::int64_t i = 0; i < plane; ++i) {
                                    sum_g += gp[i];
                                    sum_gx += gp[i] * (xp[i] - mu) * is;
                                }
                            }
                            if (t.wants(pg)) t.grad_buffer(pg)[c] += sum_gx;
                            if (t.wants(pb)) t.grad_buffer(pb)[c] += sum_g;
                            if (!t.wants(px)) continue;
                            Tensor<T>& gx = t.grad_buffer(px);
                            const T gamma_c = gammav[c];
                            if (train) {
                                const T k = gamma_c * is / T(m);
                                for (int n = 0; n < s.n; ++n) {
                                    const T* gp = gout.data() + gout.index(n, c, 0, 0);
                                    const T* xp = xv.data() + xv.index(n, c, 0, 0);
                                    T* op = gx.data() + gx.index(n, c, 0, 0);
                                    for (std::int64_t i = 0; i < plane; ++i) {
                                        const T xhat = (xp[i] - mu) * is;
                                        op[i] += k * (T(m) * gp[i] - sum_g - xhat * sum_gx);
                                    }
                                }
                            } else {
                                const T k = gamma_c * is;
                                for (int n = 0; n < s.n; ++n) {
                                    const T* gp = gout.data() + gout.index(n, c, 0, 0);
                                    T* op = gx.data() + gx.index(n, c, 0, 0);
                                    for (std::int64_t i = 0; i < plane; ++i) op[i] += k * gp[i];
                                }
                            }
                        }
                    },
                    any_grad({x, gamma, beta}), std::move(name));
    }

    Var<T> relu(Var<T> x, std::string name = "relu") {
        Tensor<T> out = aff::relu(value(x));
        return push(std::move(out), {x.idx},
                    [](Tape& t, int self) {
                        const Node& nd = t.nodes_[self];
                        const int px = nd.parents[0];
                        if (!t.wants(px)) return;
                        const Tensor<T>& gout = t.grads_[self];
                        const Tensor<T>& xv = t.nodes_[px].value;
                        Tensor<T>& gx = t.grad_buffer(px);
                        for (std::int64_t i = 0; i < gout.size(); ++i)
                            if (xv[i] > T(0)) gx[i] += gout[i];
                    },
                    any_grad({x}), std::move(name));
    }

    Var<T> sigmoid(Var<T> x, std::string name = "sigmoid") {
        Tensor<T> out = aff::sigmoid(value(x));
        return push(std::move(out), {x.idx},
                    [](Tape& t, int self) {
                        const Node& nd = t.nodes_[self];
                        const int px = nd.parents[0];
                        if (!t.wants(px)) return;
                        const Tensor<T>& gout = t.grads_[self];
                        const Tensor<T>& y = nd.value;
                        Tensor<T>& gx = t.grad_buffer(px);
                        for (std::int64_t i = 0; i < gout.size(); ++i)
                            gx[i] += gout[i] * y[i] * (T(1) - y[i]);
                    },
                    any_grad({x}), std::move(name));
    }

    Var<T> global_avg_pool(Var<T> x, std::string name = "gap") {
        Tensor<T> out = wrap(name, [&] { return aff::global_avg_pool(value(x)); });
        return push(std::move(out), {x.idx},
                    [](Tape& t, int self) {
                        const Node& nd = t.nodes_[self];
                        const int px = nd.parents[0];
                        if (!t.wants(px)) return;
                        const Tensor<T>& gout = t.grads_[self];
                        Tensor<T>& gx = t.grad_buffer(px);
                        const Shape s = gx.shape();
                        const std::int64_t plane = std::int64_t(s.h) * s.w;
                        for (int n = 0; n < s.n; ++n)
                            for (int c = 0; c < s.c; ++c) {
                                const T g = gout.at(n, c, 0, 0) / T(plane);
                                T* op = gx.data() + gx.index(n, c, 0, 0);
                                for (std::int64_t i = 0; i < plane; ++i) op[i] += g;
                            }
                    },
                    any_grad({x}), std::move(name));
    }

    // Broadcasting addition: shapes equal, or either side N x C x 1 x 1.
    Var<T> add(Var<T> x, Var<T> y, std::string name = "add") {
        Tensor<T> out = wrap(name, [&] { return broadcast_add(value(x), value(y)); });
        return push(std::move(out), {x.idx, y.idx},
                    [](Tape& t, int self) {
                        const Node& nd = t.nodes_[self];
                        const Tensor<T>& gout = t.grads_[self];
                        for (int pi : nd.parents) {
                            if (!t.wants(pi)) continue;
                            Tensor<T>& g = t.grad_buffer(pi);
                            if (g.shape() == gout.shape()) {
                                for (std::int64_t i = 0; i < g.size(); ++i) g[i] += gout[i];
                            } else {
                                accumulate_spatial_sum(g, gout);
                            }
                        }
                    },
                    any_grad({x, y}), std::move(name));
    }

    // Hadamard product; either operand may be N x C x 1 x 1.
    Var<T> mul(Var<T> x, Var<T> y, std::string name = "mul") {
        Tensor<T> out = wrap(name, [&] { return elementwise_mul(value(x), value(y)); });
        return push(std::move(out), {x.idx, y.idx},
                    [](Tape& t, int self) {
                        const Node& nd = t.nodes_[self];
                        const Tensor<T>& gout = t.grads_[self];
                        const int px = nd.parents[0], py = nd.parents[1];
                        mul_backward_side(t, px, t.nodes_[py].value, gout);
                        mul_backward_side(t, py, t.nodes_[px].value, gout);
                    },
                    any_grad({x, y}), std::move(name));
    }

    Var<T> concat_channels(Var<T> x, Var<T> y, std::string name = "concat") {
        Tensor<T> out = wrap(name, [&] { return aff::concat_channels(value(x), value(y)); });
        const int cx = value(x).shape().c;
        return push(std::move(out), {x.idx, y.idx},
                    [cx](Tape& t, int self) {
                        const Node& nd = t.nodes_[self];
                        const Tensor<T>& gout = t.grads_[self];
                        const Shape gs = gout.shape();
                        const std::int64_t plane = std::int64_t(gs.h) * gs.w;
                        const int px = nd.parents[0], py = nd.parents[1];
                        if (t.wants(px)) {
                            Tensor<T>& gx = t.grad_buffer(px);
                            for (int n = 0; n < gs.n; ++n)
                                for (int c = 0; c < cx; ++c) {
                                    const T* gp = gout.data() + gout.index(n, c, 0, 0);
                                    T* op = gx.data() + gx.index(n, c, 0, 0);
                                    for (std::int64_t i = 0; i < plane; ++i) op[i] += gp[i];
                                }
                        }
                        if (t.wants(py)) {
                            Tensor<T>& gy = t.grad_buffer(py);
                            for (int n = 0; n < gs.n; ++n)
                                for (int c = cx; c < gs.c; ++c) {
                                    const T* gp = gout.data() + gout.index(n, c, 0, 0);
                                    T* op = gy.data() + gy.index(n, c - cx, 0, 0);
                                    for (std::int64_t i = 0; i < plane; ++i) op[i] += gp[i];
                                }
                        }
                    },
                    any_grad({x, y}), std::move(name));
    }

    Var<T> upsample2x(Var<T> x, std::string name = "upsample2x") {
        Tensor<T> out = nearest_upsample2x(value(x));
        return push(std::move(out), {x.idx},
                    [](Tape& t, int self) {
                        const Node& nd = t.nodes_[self];
                        const int px = nd.parents[0];
                        if (!t.wants(px)) return;
                        const Tensor<T>& gout = t.grads_[self];
                        Tensor<T>& gx = t.grad_buffer(px);
                        const Shape s = gx.shape();
                        for (int n = 0; n < s.n; ++n)
                            for (int c = 0; c < s.c; ++c)
                                for (int y = 0; y < s.h; ++y) {
                                    const T* r0 = gout.data() + gout.index(n, c, 2 * y, 0);
                                    const T* r1 = gout.data() + gout.index(n, c, 2 * y + 1, 0);
                                    T* op = gx.data() + gx.index(n, c, y, 0);
                                    for (int xi = 0; xi < s.w; ++xi)
                                        op[xi] += r0[2 * xi] + r0[2 * xi + 1] + r1[2 * xi] +
                                                  r1[2 * xi + 1];
                                }
                    },
                    any_grad({x}), std::move(name));
    }

    Var<T> tile_spatial(Var<T> x, int h, int w, std::string name = "tile") {
        Tensor<T> out = wrap(name, [&] { return aff::tile_spatial(value(x), h, w); });
        return push(std::move(out), {x.idx},
                    [](Tape& t, int self) {
                        const Node& nd = t.nodes_[self];
                        const int px = nd.parents[0];
                        if (!t.wants(px)) return;
                        accumulate_spatial_sum(t.grad_buffer(px), t.grads_[self]);
                    },
                    any_grad({x}), std::move(name));
    }

    Var<T> fully_connected(Var<T> x, Var<T> w, Var<T> bias, std::string name = "fc") {
        const T* bptr = bias.valid() ? value(bias).data() : nullptr;
        Tensor<T> out = wrap(name, [&] { return aff::fully_connected(value(x), value(w), bptr); });
        std::vector<int> parents{x.idx, w.idx};
        if (bias.valid()) parents.push_back(bias.idx);
        return push(std::move(out), std::move(parents),
                    [](Tape& t, int self) {
                        const Node& nd = t.nodes_[self];
                        const Tensor<T>& gout = t.grads_[self];
                        const int px = nd.parents[0], pw = nd.parents[1];
                        const Tensor<T>& xv = t.nodes_[px].value;
                        const Tensor<T>& wv = t.nodes_[pw].value;
                        const int N = xv.shape().n, ci_n = xv.shape().c, co_n = wv.shape().n;
                        if (t.wants(px)) {
                            Tensor<T>& gx = t.grad_buffer(px);
                            for (int n = 0; n < N; ++n)
                                for (int co = 0; co < co_n; ++co) {
                                    const T g = gout.at(n, co, 0, 0);
                                    const T* wp = wv.data() + wv.index(co, 0, 0, 0);
                                    T* op = gx.data() + gx.index(n, 0, 0, 0);
                                    for (int ci = 0; ci < ci_n; ++ci) op[ci] += g * wp[ci];
                                }
                        }
                        if (t.wants(pw)) {
                            Tensor<T>& gw = t.grad_buffer(pw);
                            for (int n = 0; n < N; ++n)
                                for (int co = 0; co < co_n; ++co) {
                                    const T g = gout.at(n, co, 0, 0);
                                    const T* xp = xv.data() + xv.index(n, 0, 0, 0);
                                    T* op = gw.data() + gw.index(co, 0, 0, 0);
                                    for (int ci = 0; ci < ci_n; ++ci) op[ci] += g * xp[ci];
                                }
                        }
                        if (nd.parents.size() > 2 && t.wants(nd.parents[2])) {
                            Tensor<T>& gb = t.grad_buffer(nd.parents[2]);
                            for (int n = 0; n < N; ++n)
                                for (int co = 0; co < co_n; ++co) gb[co] += gout.at(n, co, 0, 0);
                        }
                    },
                    any_grad({x, w, bias}), std::move(name));
    }

    // out = scale * x + shift, elementwise with scalar coefficients.
    Var<T> affine(Var<T> x, T scale, T shift, std::string name = "affine") {
        const Tensor<T>& xv = value(x);
        Tensor<T> out(xv.shape());
        for (std::int64_t i = 0; i < xv.size(); ++i) out[i] = scale * xv[i] + shift;
        return push(std::move(out), {x.idx},
                    [scale](Tape& t, int self) {
                        const Node& nd = t.nodes_[self];
                        const int px = nd.parents[0];
                        if (!t.wants(px)) return;
                        const Tensor<T>& gout = t.grads_[self];
                        Tensor<T>& gx = t.grad_buffer(px);
                        for (std::int64_t i = 0; i < gout.size(); ++i) gx[i] += scale * gout[i];
                    },
                    any_grad({x}), std::move(name));
    }

    Var<T> one_minus(Var<T> x, std::string name = "one_minus") {
        return affine(x, T(-1), T(1), std::move(name));
    }

    // Custom unary op: caller supplies forward and vjp (x, upstream) -> dx.
    // Extension point for one-off transforms and test fixtures.
    Var<T> apply(Var<T> x, std::function<Tensor<T>(const Tensor<T>&)> fwd,
                 std::function<Tensor<T>(const Tensor<T>&, const Tensor<T>&)> vjp,
                 std::string name = "apply") {
        Tensor<T> out = wrap(name, [&] { return fwd(value(x)); });
        Tensor<T> saved = value(x);
        return push(std::move(out), {x.idx},
                    [vjp = std::move(vjp), saved = std::move(saved)](Tape& t, int self) {
                        const Node& nd = t.nodes_[self];
                        const int px = nd.parents[0];
                        if (!t.wants(px)) return;
                        Tensor<T> gx = vjp(saved, t.grads_[self]);
                        Tensor<T>& acc = t.grad_buffer(px);
                        if (!(gx.shape() == acc.shape()))
                            throw DimensionError("custom vjp shape " + gx.shape().str() +
                                                 " does not match input " + acc.shape().str());
                        for (std::int64_t i = 0; i < gx.size(); ++i) acc[i] += gx[i];
                    },
                    any_grad({x}), std::move(name));
    }

    // Scalar-valued loss node, shape 1x1x1x1.
    Var<T> softmax_cross_entropy(Var<T> logits, std::vector<int> labels,
                                 std::string name = "softmax_ce") {
        auto probs = std::make_shared<Tensor<T>>();
        std::span<const int> lspan(labels.data(), labels.size());
        T loss = wrap(name, [&] { return aff::softmax_cross_entropy(value(logits), lspan, probs.get()); });
        Tensor<T> out({1, 1, 1, 1});
        out[0] = loss;
        auto labels_ptr = std::make_shared<std::vector<int>>(std::move(labels));
        return push(std::move(out), {logits.idx},
                    [probs, labels_ptr](Tape& t, int self) {
                        const Node& nd = t.nodes_[self];
                        const int px = nd.parents[0];
                        if (!t.wants(px)) return;
                        const T g = t.grads_[self][0];
                        Tensor<T>& gx = t.grad_buffer(px);
                        const Shape s = gx.shape();
                        const std::int64_t plane = std::int64_t(s.h) * s.w;
                        const T inv = g / T(std::int64_t(s.n) * plane);
                        std::int64_t li = 0;
                        for (int n = 0; n < s.n; ++n)
                            for (int y = 0; y < s.h; ++y)
                                for (int x = 0; x < s.w; ++x, ++li) {
                                    const std::int64_t base = gx.index(n, 0, y, x);
                                    const int label = (*labels_ptr)[static_cast<std::size_t>(li)];
                                    for (int k = 0; k < s.c; ++k) {
                                        T p = (*probs)[base + k * plane];
                                        if (k == label) p -= T(1);
                                        gx[base + k * plane] += inv * p;
                                    }
                                }
                    },
                    any_grad({logits}), std::move(name));
    }

    // ---- backward ----

    void backward(Var<T> out) {
        check_var(out);
        backward(out, Tensor<T>::full(nodes_[out.idx].value.shape(), T(1)));
    }

    void backward(Var<T> out, Tensor<T> seed) {
        if (nodes_.empty()) throw StateError("backward on an empty tape (no forward recorded)");
        check_var(out);
        if (!(seed.shape() == nodes_[out.idx].value.shape()))
            throw DimensionError("backward seed shape " + seed.shape().str() +
                                 " != output shape " + nodes_[out.idx].value.shape().str());
        grads_.assign(nodes_.size(), Tensor<T>{});
        ran_backward_ = true;
        grads_[out.idx] = std::move(seed);
        for (int i = out.idx; i >= 0; --i) {
            if (grads_[i].empty() || !nodes_[i].backward) continue;
            nodes_[i].backward(*this, i);
        }
        for (const auto& [p, idx] : bound_) {
            if (!p->trainable || grads_[idx].empty()) continue;
            for (std::int64_t i = 0; i < p->grad.size(); ++i) p->grad[i] += grads_[idx][i];
        }
    }

    // Error-path prefix for ops recorded while the guard is alive.
    class Scope {
    public:
        Scope(Tape& t, const std::string& s) : tape_(t), saved_(t.scope_) {
            tape_.scope_ = saved_.empty() ? s : saved_ + "." + s;
        }
        ~Scope() { tape_.scope_ = saved_; }

    private:
        Tape& tape_;
        std::string saved_;
    };

    bool wants(int idx) const { return nodes_[idx].requires_grad; }

    Tensor<T>& grad_buffer(int idx) {
        if (grads_[idx].empty()) grads_[idx] = Tensor<T>(nodes_[idx].value.shape());
        return grads_[idx];
    }

private:
    Var<T> push(Tensor<T> value, std::vector<int> parents, std::function<void(Tape&, int)> back,
                bool requires_grad, std::string name) {
        Node nd;
        nd.value = std::move(value);
        nd.parents = std::move(parents);
        nd.backward = std::move(back);
        nd.requires_grad = requires_grad;
        nd.name = scope_.empty() ? std::move(name) : scope_ + "." + name;
        nodes_.push_back(std::move(nd));
        return Var<T>{static_cast<int>(nodes_.size()) - 1};
    }

    bool any_grad(std::initializer_list<Var<T>> vars) const {
        for (Var<T> v : vars)
            if (v.valid() && nodes_[v.idx].requires_grad) return true;
        return false;
    }

    void check_var(Var<T> v) const {
        if (!v.valid() || v.idx >= static_cast<int>(nodes_.size()))
            throw StateError("invalid tape handle");
    }

    // Re-throws kernel shape errors with the current node path attached.
    template <typename Fn>
    auto wrap(const std::string& name, Fn&& fn) -> decltype(fn()) {
        try {
            return fn();
        } catch (const DimensionError& e) {
            const std::string path = scope_.empty() ? name : scope_ + "." + name;
            throw DimensionError("[" + path + "] " + e.what());
        }
    }

    static void accumulate_spatial_sum(Tensor<T>& reduced, const Tensor<T>& full) {
        const Shape fs = full.shape();
        const std::int64_t plane = std::int64_t(fs.h) * fs.w;
        for (int n = 0; n < fs.n; ++n)
            for (int c = 0; c < fs.c; ++c) {
                const T* gp = full.data() + full.index(n, c, 0, 0);
                T acc = 0;
                for (std::int64_t i = 0; i < plane; ++i) acc += gp[i];
                reduced.at(n, c, 0, 0) += acc;
            }
    }

    // d(x*y)/dx accumulated into the grad of `target`, given the other operand's value.
    static void mul_backward_side(Tape& t, int target, const Tensor<T>& other,
                                  const Tensor<T>& gout) {
        if (!t.wants(target)) return;
        Tensor<T>& g = t.grad_buffer(target);
        const Shape gs = gout.shape();
        const std::int64_t plane = std::int64_t(gs.h) * gs.w;
        const bool target_reduced = !(g.shape() == gs);
        const bool other_reduced = !(other.shape() == gs);
        for (int n = 0; n < gs.n; ++n)
            for (int c = 0; c < gs.c; ++c) {
                const T* gp = gout.data() + gout.index(n, c, 0, 0);
                if (target_reduced) {
                    const T* op = other.data() + other.index(n, c, 0, 0);
                    T acc = 0;
                    for (std::int64_t i = 0; i < plane; ++i)
                        acc += gp[i] * (other_reduced ? op[0] : op[i]);
                    g.at(n, c, 0, 0) += acc;
                } else if (other_reduced) {
                    const T ov = other.at(n, c, 0, 0);
                    T* tp = g.data() + g.index(n, c, 0, 0);
                    for (std::int64_t i = 0; i < plane; ++i) tp[i] += gp[i] * ov;
                } else {
                    const T* op = other.data() + other.index(n, c, 0, 0);
                    T* tp = g.data() + g.index(n, c, 0, 0);
                    for (std::int64_t i = 0; i < plane; ++i) tp[i] += gp[i] * op[i];
                }
            }
    }

    static void conv2d_backward_input(Tensor<T>& gx, const Tensor<T>& w, const Tensor<T>& gout,
                                      int stride, int padding) {
        const Shape xs = gx.shape(), ws = w.shape(), gs = gout.shape();
        const int k = ws.h;
        for (int n = 0; n < xs.n; ++n)
            for (int co = 0; co < ws.n; ++co) {
                const T* gp = gout.data() + gout.index(n, co, 0, 0);
                for (int ci = 0; ci < xs.c; ++ci) {
                    T* xp = gx.data() + gx.index(n, ci, 0, 0);
                    const T* wp = w.data() + w.index(co, ci, 0, 0);
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            const T wv = wp[ky * k + kx];
                            if (wv == T(0)) continue;
                            const int lo = padding - kx;
                            const int ox0 = lo > 0 ? (lo + stride - 1) / stride : 0;
                            const int hi = xs.w - 1 + padding - kx;
                            if (hi < 0) continue;
                            const int ox1 = std::min(gs.w - 1, hi / stride);
                            const int shift = kx - padding;
                            for (int oy = 0; oy < gs.h; ++oy) {
                                const int iy = oy * stride + ky - padding;
                                if (iy < 0 || iy >= xs.h) continue;
                                T* xrow = xp + std::int64_t(iy) * xs.w;
                                const T* grow = gp + std::int64_t(oy) * gs.w;
                                if (stride == 1) {
                                    for (int ox = ox0; ox <= ox1; ++ox)
                                        xrow[ox + shift] += wv * grow[ox];
                                } else {
                                    for (int ox = ox0; ox <= ox1; ++ox)
                                        xrow[ox * stride + shift] += wv * grow[ox];
                                }
                            }
                        }
                }
            }
    }

    static void conv2d_backward_kernel(Tensor<T>& gw, const Tensor<T>& x, const Tensor<T>& gout,
                                       int stride, int padding) {
        const Shape xs = x.shape(), ws = gw.shape(), gs = gout.shape();
        const int k = ws.h;
        for (int n = 0; n < xs.n; ++n)
            for (int co = 0; co < ws.n; ++co) {
                const T* gp = gout.data() + gout.index(n, co, 0, 0);
                for (int ci = 0; ci < xs.c; ++ci) {
                    const T* xp = x.data() + x.index(n, ci, 0, 0);
                    T* wp = gw.data() + gw.index(co, ci, 0, 0);
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            const int lo = padding - kx;
                            const int ox0 = lo > 0 ? (lo + stride - 1) / stride : 0;
                            const int hi = xs.w - 1 + padding - kx;
                            if (hi < 0) continue;
                            const int ox1 = std::min(gs.w - 1, hi / stride);
                            const int shift = kx - padding;
                            T acc = 0;
                            for (int oy = 0; oy < gs.h; ++oy) {
                                const int iy = oy * stride + ky - padding;
                                if (iy < 0 || iy >= xs.h) continue;
                                const T* xrow = xp + std::int64_t(iy) * xs.w;
                                const T* grow = gp + std::int64_t(oy) * gs.w;
                                if (stride == 1) {
                                    for (int ox = ox0; ox <= ox1; ++ox)
                                        acc += xrow[ox + shift] * grow[ox];
                                } else {
                                    for (int ox = ox0; ox <= ox1; ++ox)
                                        acc += xrow[ox * stride + shift] * grow[ox];
                                }
                            }
                            wp[ky * k + kx] += acc;
                        }
                }
            }
    }

    std::vector<Node> nodes_;
    std::vector<Tensor<T>> grads_;
    std::unordered_map<Parameter<T>*, int> bound_;
    std::string scope_;
    bool ran_backward_ = false;
    mutable Tensor<T> zero_grad_cache_;
};

} // namespace aff
