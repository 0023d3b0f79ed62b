#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "aff/tensor.hpp"

namespace aff {

// ------------------------------------------------------------------
// convolution
// ------------------------------------------------------------------

template <std::floating_point T>
struct ConvParams {
    Tensor<T> kernel; // C_out x C_in x k x k
    int stride = 1;
    int padding = 0;
    std::optional<std::vector<T>> bias; // per output channel

    int k() const { return kernel.shape().h; }
    int out_channels() const { return kernel.shape().n; }
    int in_channels() const { return kernel.shape().c; }

    void validate() const {
        const int kk = k();
        if (kernel.shape().h != kernel.shape().w)
            throw ConfigError("conv kernel must be square, got " + kernel.shape().str());
        if (kk != 1 && kk != 3 && kk != 5)
            throw ConfigError("conv kernel size must be 1, 3 or 5, got " + std::to_string(kk));
        if (stride < 1) throw ConfigError("conv stride must be positive");
        if (padding < 0) throw ConfigError("conv padding must be non-negative");
        if (bias && static_cast<int>(bias->size()) != out_channels())
            throw DimensionError("conv bias length " + std::to_string(bias->size()) +
                                 " != C_out " + std::to_string(out_channels()));
    }
};

inline int conv_out_extent(int in, int k, int stride, int padding) {
    return (in + 2 * padding - k) / stride + 1;
}

// Direct cross-correlation. Inner loop runs over contiguous output/input rows
// so the compiler can vectorize the stride-1 case.
template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const T* bias, int stride, int padding) {
    const Shape xs = x.shape(), ws = w.shape();
    if (xs.c != ws.c)
        throw DimensionError("conv2d channel mismatch: input " + xs.str() + " vs kernel " +
                             ws.str());
    if (ws.h != ws.w) throw DimensionError("conv2d kernel not square: " + ws.str());
    const int k = ws.h;
    const int ho = conv_out_extent(xs.h, k, stride, padding);
    const int wo = conv_out_extent(xs.w, k, stride, padding);
    if (ho < 1 || wo < 1)
        throw DimensionError("conv2d output collapses: input " + xs.str() + ", kernel " +
                             ws.str() + ", stride " + std::to_string(stride) + ", padding " +
                             std::to_string(padding));

    Tensor<T> out({xs.n, ws.n, ho, wo});
    const std::int64_t out_plane = std::int64_t(ho) * wo;

    for (int n = 0; n < xs.n; ++n) {
        for (int co = 0; co < ws.n; ++co) {
            T* outp = out.data() + out.index(n, co, 0, 0);
            if (bias) {
                const T b = bias[co];
                for (std::int64_t i = 0; i < out_plane; ++i) outp[i] = b;
            }
            for (int ci = 0; ci < xs.c; ++ci) {
                const T* xp = x.data() + x.index(n, ci, 0, 0);
                const T* wp = w.data() + w.index(co, ci, 0, 0);
                for (int ky = 0; ky < k; ++ky) {
                    for (int kx = 0; kx < k; ++kx) {
                        const T wv = wp[ky * k + kx];
                        if (wv == T(0)) continue;
                        const int lo = padding - kx;
                        const int ox0 = lo > 0 ? (lo + stride - 1) / stride : 0;
                        const int hi = xs.w - 1 + padding - kx;
                        if (hi < 0) continue;
                        const int ox1 = std::min(wo - 1, hi / stride);
                        for (int oy = 0; oy < ho; ++oy) {
                            const int iy = oy * stride + ky - padding;
                            if (iy < 0 || iy >= xs.h) continue;
                            const T* xrow = xp + std::int64_t(iy) * xs.w;
                            T* orow = outp + std::int64_t(oy) * wo;
                            const int shift = kx - padding;
                            if (stride == 1) {
                                for (int ox = ox0; ox <= ox1; ++ox)
                                    orow[ox] += wv * xrow[ox + shift];
                            } else {
                                for (int ox = ox0; ox <= ox1; ++ox)
                                    orow[ox] += wv * xrow[ox * stride + shift];
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p) {
    p.validate();
    return conv2d(x, p.kernel, p.bias ? p.bias->data() : nullptr, p.stride, p.padding);
}

// ------------------------------------------------------------------
// batch normalization
// ------------------------------------------------------------------

template <std::floating_point T>
struct BatchNormState {
    std::vector<T> gamma, beta;
    std::vector<T> running_mean, running_var;
    T eps = T(1e-5);
    T momentum = T(0.9); // fraction of the old running value kept per update
    Mode mode = Mode::train;

    static BatchNormState identity(int channels) {
        BatchNormState s;
        s.gamma.assign(channels, T(1));
        s.beta.assign(channels, T(0));
        s.running_mean.assign(channels, T(0));
        s.running_var.assign(channels, T(1));
        return s;
    }
};

// Saved forward values the backward pass needs.
template <std::floating_point T>
struct BatchNormSaved {
    std::vector<T> mean, inv_std;
};

template <std::floating_point T>
Tensor<T> batch_norm_forward(const Tensor<T>& x, std::span<const T> gamma, std::span<const T> beta,
                             std::vector<T>& running_mean, std::vector<T>& running_var, T eps,
                             T momentum, Mode mode, BatchNormSaved<T>* saved = nullptr) {
    const Shape s = x.shape();
    if (static_cast<int>(gamma.size()) != s.c || static_cast<int>(beta.size()) != s.c)
        throw DimensionError("batch_norm channel mismatch: input " + s.str() + " vs gamma length " +
                             std::to_string(gamma.size()));
    const std::int64_t plane = std::int64_t(s.h) * s.w;
    const std::int64_t m = std::int64_t(s.n) * plane;
    if (mode == Mode::train && m < 2)
        throw DimensionError("batch_norm train mode needs N*H*W >= 2, got " + std::to_string(m));

    Tensor<T> out(s);
    std::vector<T> mean(s.c), inv_std(s.c);
    if (mode == Mode::train) {
        for (int c = 0; c < s.c; ++c) {
            T sum = 0;
            for (int n = 0; n < s.n; ++n) {
                const T* xp = x.data() + x.index(n, c, 0, 0);
                for (std::int64_t i = 0; i < plane; ++i) sum += xp[i];
            }
            const T mu = sum / T(m);
            T var_sum = 0;
            for (int n = 0; n < s.n; ++n) {
                const T* xp = x.data() + x.index(n, c, 0, 0);
                for (std::int64_t i = 0; i < plane; ++i) {
                    const T d = xp[i] - mu;
                    var_sum += d * d;
                }
            }
            const T var = var_sum / T(m);
            mean[c] = mu;
            inv_std[c] = T(1) / std::sqrt(var + eps);
            running_mean[c] = momentum * running_mean[c] + (T(1) - momentum) * mu;
            running_var[c] = momentum * running_var[c] + (T(1) - momentum) * var;
        }
    } else {
        for (int c = 0; c < s.c; ++c) {
            mean[c] = running_mean[c];
            inv_std[c] = T(1) / std::sqrt(running_var[c] + eps);
        }
    }
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            const T mu = mean[c], is = inv_std[c], g = gamma[c], b = beta[c];
            const T* xp = x.data() + x.index(n, c, 0, 0);
            T* op = out.data() + out.index(n, c, 0, 0);
            for (std::int64_t i = 0; i < plane; ++i) op[i] = g * (xp[i] - mu) * is + b;
        }
    }
    if (saved) {
        saved->mean = std::move(mean);
        saved->inv_std = std::move(inv_std);
    }
    return out;
}

template <std::floating_point T>
Tensor<T> batch_norm(const Tensor<T>& x, BatchNormState<T>& state) {
    return batch_norm_forward<T>(x, state.gamma, state.beta, state.running_mean,
                                 state.running_var, state.eps, state.momentum, state.mode);
}

// ------------------------------------------------------------------
// elementwise and pooling
// ------------------------------------------------------------------

enum class Activation { relu, sigmoid };

template <std::floating_point T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::int64_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    return out;
}

template <std::floating_point T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::int64_t i = 0; i < x.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-x[i]));
    return out;
}

template <std::floating_point T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
    return kind == Activation::relu ? relu(x) : sigmoid(x);
}

template <std::floating_point T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    const Shape s = x.shape();
    if (s.h < 1 || s.w < 1)
        throw DimensionError("global_avg_pool needs H,W >= 1, got " + s.str());
    Tensor<T> out({s.n, s.c, 1, 1});
    const std::int64_t plane = std::int64_t(s.h) * s.w;
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            const T* xp = x.data() + x.index(n, c, 0, 0);
            T sum = 0;
            for (std::int64_t i = 0; i < plane; ++i) sum += xp[i];
            out.at(n, c, 0, 0) = sum / T(plane);
        }
    }
    return out;
}

namespace detail {

inline bool is_spatial_scalar(const Shape& s) { return s.h == 1 && s.w == 1; }

// For x (+|*) y where shapes are equal or exactly one side is N x C x 1 x 1,
// returns (full, reduced, swapped). Throws on anything else.
template <std::floating_point T>
std::pair<const Tensor<T>*, const Tensor<T>*> broadcast_operands(const Tensor<T>& x,
                                                                 const Tensor<T>& y,
                                                                 const char* op, bool* swapped) {
    *swapped = false;
    if (x.shape() == y.shape()) return {&x, &y};
    const Shape xs = x.shape(), ys = y.shape();
    if (xs.n == ys.n && xs.c == ys.c) {
        if (is_spatial_scalar(ys)) return {&x, &y};
        if (is_spatial_scalar(xs)) {
            *swapped = true;
            return {&y, &x};
        }
    }
    throw DimensionError(std::string(op) + " incompatible shapes: " + xs.str() + " vs " +
                         ys.str());
}

} // namespace detail

// y may be N x C x 1 x 1 (replicated over spatial positions) or match x exactly.
template <std::floating_point T>
Tensor<T> broadcast_add(const Tensor<T>& x, const Tensor<T>& y) {
    bool swapped = false;
    auto [full, small] = detail::broadcast_operands(x, y, "broadcast_add", &swapped);
    const Shape fs = full->shape();
    Tensor<T> out(fs);
    if (full->shape() == small->shape()) {
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] = (*full)[i] + (*small)[i];
        return out;
    }
    const std::int64_t plane = std::int64_t(fs.h) * fs.w;
    for (int n = 0; n < fs.n; ++n)
        for (int c = 0; c < fs.c; ++c) {
            const T add = small->at(n, c, 0, 0);
            const T* xp = full->data() + full->index(n, c, 0, 0);
            T* op = out.data() + out.index(n, c, 0, 0);
            for (std::int64_t i = 0; i < plane; ++i) op[i] = xp[i] + add;
        }
    return out;
}

// Hadamard product; either operand may be N x C x 1 x 1 against a full map.
template <std::floating_point T>
Tensor<T> elementwise_mul(const Tensor<T>& x, const Tensor<T>& y) {
    bool swapped = false;
    auto [full, small] = detail::broadcast_operands(x, y, "elementwise_mul", &swapped);
    const Shape fs = full->shape();
    Tensor<T> out(fs);
    if (full->shape() == small->shape()) {
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] = (*full)[i] * (*small)[i];
        return out;
    }
    const std::int64_t plane = std::int64_t(fs.h) * fs.w;
    for (int n = 0; n < fs.n; ++n)
        for (int c = 0; c < fs.c; ++c) {
            const T mul = small->at(n, c, 0, 0);
            const T* xp = full->data() + full->index(n, c, 0, 0);
            T* op = out.data() + out.index(n, c, 0, 0);
            for (std::int64_t i = 0; i < plane; ++i) op[i] = xp[i] * mul;
        }
    return out;
}

template <std::floating_point T>
Tensor<T> concat_channels(const Tensor<T>& x, const Tensor<T>& y) {
    const Shape xs = x.shape(), ys = y.shape();
    if (xs.n != ys.n || xs.h != ys.h || xs.w != ys.w)
        throw DimensionError("concat_channels spatial mismatch: " + xs.str() + " vs " + ys.str());
    Tensor<T> out({xs.n, xs.c + ys.c, xs.h, xs.w});
    const std::int64_t plane = std::int64_t(xs.h) * xs.w;
    for (int n = 0; n < xs.n; ++n) {
        for (int c = 0; c < xs.c; ++c)
            std::copy_n(x.data() + x.index(n, c, 0, 0), plane,
                        out.data() + out.index(n, c, 0, 0));
        for (int c = 0; c < ys.c; ++c)
            std::copy_n(y.data() + y.index(n, c, 0, 0), plane,
                        out.data() + out.index(n, xs.c + c, 0, 0));
    }
    return out;
}

// Channel slice [c0, c1) as its own tensor.
template <std::floating_point T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1) {
    const Shape s = x.shape();
    if (c0 < 0 || c1 > s.c || c0 > c1)
        throw DimensionError("slice_channels [" + std::to_string(c0) + "," + std::to_string(c1) +
                             ") out of range for " + s.str());
    Tensor<T> out({s.n, c1 - c0, s.h, s.w});
    const std::int64_t plane = std::int64_t(s.h) * s.w;
    for (int n = 0; n < s.n; ++n)
        for (int c = c0; c < c1; ++c)
            std::copy_n(x.data() + x.index(n, c, 0, 0), plane,
                        out.data() + out.index(n, c - c0, 0, 0));
    return out;
}

template <std::floating_point T>
Tensor<T> nearest_upsample2x(const Tensor<T>& x) {
    const Shape s = x.shape();
    Tensor<T> out({s.n, s.c, 2 * s.h, 2 * s.w});
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < s.h; ++y) {
                const T* xrow = x.data() + x.index(n, c, y, 0);
                T* r0 = out.data() + out.index(n, c, 2 * y, 0);
                T* r1 = out.data() + out.index(n, c, 2 * y + 1, 0);
                for (int xi = 0; xi < s.w; ++xi) {
                    const T v = xrow[xi];
                    r0[2 * xi] = v;
                    r0[2 * xi + 1] = v;
                    r1[2 * xi] = v;
                    r1[2 * xi + 1] = v;
                }
            }
    return out;
}

// Replicate an N x C x 1 x 1 tensor over an H x W grid.
template <std::floating_point T>
Tensor<T> tile_spatial(const Tensor<T>& x, int h, int w) {
    const Shape s = x.shape();
    if (s.h != 1 || s.w != 1)
        throw DimensionError("tile_spatial expects N x C x 1 x 1 input, got " + s.str());
    Tensor<T> out({s.n, s.c, h, w});
    const std::int64_t plane = std::int64_t(h) * w;
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const T v = x.at(n, c, 0, 0);
            T* op = out.data() + out.index(n, c, 0, 0);
            for (std::int64_t i = 0; i < plane; ++i) op[i] = v;
        }
    return out;
}

// ------------------------------------------------------------------
// fully connected
// ------------------------------------------------------------------

// x: N x C_in x 1 x 1, w: C_out x C_in x 1 x 1. Matrix-vector product per batch element.
template <std::floating_point T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& w, const T* bias) {
    const Shape xs = x.shape(), ws = w.shape();
    if (xs.h != 1 || xs.w != 1)
        throw DimensionError("fully_connected input must be N x C x 1 x 1, got " + xs.str());
    if (ws.c != xs.c)
        throw DimensionError("fully_connected dims mismatch: input " + xs.str() + " vs weight " +
                             ws.str());
    Tensor<T> out({xs.n, ws.n, 1, 1});
    for (int n = 0; n < xs.n; ++n) {
        const T* xp = x.data() + x.index(n, 0, 0, 0);
        for (int co = 0; co < ws.n; ++co) {
            const T* wp = w.data() + w.index(co, 0, 0, 0);
            T acc = bias ? bias[co] : T(0);
            for (int ci = 0; ci < xs.c; ++ci) acc += wp[ci] * xp[ci];
            out.at(n, co, 0, 0) = acc;
        }
    }
    return out;
}

// ------------------------------------------------------------------
// loss
// ------------------------------------------------------------------

// Mean negative log softmax probability of the true class over every spatial
// position (N x K x 1 x 1 for classification, N x K x H x W per-pixel).
// Labels are row-major over (n, y, x). Stabilized by max subtraction.
template <std::floating_point T>
T softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels,
                        Tensor<T>* probs_out = nullptr) {
    const Shape s = logits.shape();
    const std::int64_t positions = std::int64_t(s.n) * s.h * s.w;
    if (static_cast<std::int64_t>(labels.size()) != positions)
        throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                             " labels for " + std::to_string(positions) + " positions");
    if (positions == 0) throw InputError("softmax_cross_entropy: empty input");
    if (probs_out) *probs_out = Tensor<T>(s);

    const std::int64_t plane = std::int64_t(s.h) * s.w;
    T loss = 0;
    std::int64_t li = 0;
    for (int n = 0; n < s.n; ++n) {
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x, ++li) {
                const int label = labels[static_cast<std::size_t>(li)];
                if (label < 0 || label >= s.c)
                    throw InputError("label " + std::to_string(label) + " out of range [0," +
                                     std::to_string(s.c) + ") at position " + std::to_string(li));
                const std::int64_t base = logits.index(n, 0, y, x);
                T mx = logits[base];
                for (int k = 1; k < s.c; ++k) mx = std::max(mx, logits[base + k * plane]);
                T denom = 0;
                for (int k = 0; k < s.c; ++k) denom += std::exp(logits[base + k * plane] - mx);
                const T log_denom = std::log(denom);
                loss += -(logits[base + std::int64_t(label) * plane] - mx - log_denom);
                if (probs_out)
                    for (int k = 0; k < s.c; ++k)
                        (*probs_out)[base + k * plane] =
                            std::exp(logits[base + k * plane] - mx - log_denom);
            }
    }
    return loss / T(positions);
}

} // namespace aff
