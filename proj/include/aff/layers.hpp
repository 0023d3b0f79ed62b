#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "aff/autodiff.hpp"

namespace aff {

enum class InitKind { kaiming, zeros };

// Kaiming-normal, fan-out: std = sqrt(2 / (C_out * k * k)).
template <std::floating_point T>
Tensor<T> kaiming_normal(Shape s, Rng& rng) {
    const T fan_out = T(s.n) * s.h * s.w;
    return Tensor<T>::normal(s, rng, std::sqrt(T(2) / fan_out));
}

template <std::floating_point T>
struct Conv2dLayer {
    Parameter<T> kernel;
    Parameter<T> bias; // shape C_out x 1 x 1 x 1 when present
    bool has_bias = false;
    int stride = 1;
    int padding = 0;

    static Conv2dLayer make(int c_in, int c_out, int k, int stride, int padding, Rng& rng,
                            InitKind init = InitKind::kaiming, bool with_bias = false) {
        if (k != 1 && k != 3 && k != 5)
            throw ConfigError("conv kernel size must be 1, 3 or 5, got " + std::to_string(k));
        Conv2dLayer l;
        Shape ks{c_out, c_in, k, k};
        l.kernel = Parameter<T>(init == InitKind::kaiming ? kaiming_normal<T>(ks, rng)
                                                          : Tensor<T>::zeros(ks));
        l.stride = stride;
        l.padding = padding;
        l.has_bias = with_bias;
        if (with_bias) {
            l.bias = Parameter<T>(Tensor<T>::zeros({c_out, 1, 1, 1}));
            l.bias.decay_exempt = true;
        }
        return l;
    }

    Var<T> forward(Tape<T>& t, Var<T> x, const std::string& name = "conv") const {
        Var<T> w = t.param(const_cast<Parameter<T>&>(kernel));
        Var<T> b = has_bias ? t.param(const_cast<Parameter<T>&>(bias)) : Var<T>{};
        return t.conv2d(x, w, b, stride, padding, name);
    }

    Tensor<T> forward_plain(const Tensor<T>& x) const {
        return conv2d(x, kernel.value, has_bias ? bias.value.data() : nullptr, stride, padding);
    }

    void collect(std::vector<Parameter<T>*>& out, const std::string& prefix) {
        kernel.name = prefix + ".kernel";
        out.push_back(&kernel);
        if (has_bias) {
            bias.name = prefix + ".bias";
            out.push_back(&bias);
        }
    }
};

template <std::floating_point T>
struct BatchNormLayer {
    Parameter<T> gamma, beta;
    std::vector<T> running_mean, running_var;
    T eps = T(1e-5);
    T momentum = T(0.9);

    static BatchNormLayer make(int channels) {
        BatchNormLayer l;
        l.gamma = Parameter<T>(Tensor<T>::full({channels, 1, 1, 1}, T(1)));
        l.beta = Parameter<T>(Tensor<T>::zeros({channels, 1, 1, 1}));
        l.gamma.decay_exempt = true;
        l.beta.decay_exempt = true;
        l.running_mean.assign(channels, T(0));
        l.running_var.assign(channels, T(1));
        return l;
    }

    int channels() const { return gamma.value.shape().n; }

    Var<T> forward(Tape<T>& t, Var<T> x, Mode mode, const std::string& name = "bn") {
        Var<T> g = t.param(gamma);
        Var<T> b = t.param(beta);
        return t.batch_norm(x, g, b, running_mean, running_var, eps, momentum, mode, name);
    }

    Tensor<T> forward_plain(const Tensor<T>& x, Mode mode) {
        std::span<const T> g(gamma.value.data(), static_cast<std::size_t>(gamma.value.size()));
        std::span<const T> b(beta.value.data(), static_cast<std::size_t>(beta.value.size()));
        return batch_norm_forward<T>(x, g, b, running_mean, running_var, eps, momentum, mode);
    }

    void collect(std::vector<Parameter<T>*>& out, const std::string& prefix) {
        gamma.name = prefix + ".gamma";
        beta.name = prefix + ".beta";
        out.push_back(&gamma);
        out.push_back(&beta);
    }

    // Running statistics are serialized with checkpoints but are not parameters.
    void collect_state(std::vector<std::pair<std::string, std::vector<T>*>>& out,
                       const std::string& prefix) {
        out.emplace_back(prefix + ".running_mean", &running_mean);
        out.emplace_back(prefix + ".running_var", &running_var);
    }
};

template <std::floating_point T>
struct FullyConnectedLayer {
    Parameter<T> weight; // C_out x C_in x 1 x 1
    Parameter<T> bias;   // C_out x 1 x 1 x 1
    bool has_bias = true;

    static FullyConnectedLayer make(int c_in, int c_out, Rng& rng,
                                    InitKind init = InitKind::kaiming, bool with_bias = true) {
        FullyConnectedLayer l;
        Shape ws{c_out, c_in, 1, 1};
        l.weight = Parameter<T>(init == InitKind::kaiming ? kaiming_normal<T>(ws, rng)
                                                          : Tensor<T>::zeros(ws));
        l.has_bias = with_bias;
        if (with_bias) {
            l.bias = Parameter<T>(Tensor<T>::zeros({c_out, 1, 1, 1}));
            l.bias.decay_exempt = true;
        }
        return l;
    }

    Var<T> forward(Tape<T>& t, Var<T> x, const std::string& name = "fc") const {
        Var<T> w = t.param(const_cast<Parameter<T>&>(weight));
        Var<T> b = has_bias ? t.param(const_cast<Parameter<T>&>(bias)) : Var<T>{};
        return t.fully_connected(x, w, b, name);
    }

    Tensor<T> forward_plain(const Tensor<T>& x) const {
        return fully_connected(x, weight.value, has_bias ? bias.value.data() : nullptr);
    }

    void collect(std::vector<Parameter<T>*>& out, const std::string& prefix) {
        weight.name = prefix + ".weight";
        out.push_back(&weight);
        if (has_bias) {
            bias.name = prefix + ".bias";
            out.push_back(&bias);
        }
    }
};

// Marks every parameter collected from `items` as attention-owned.
template <std::floating_point T>
void mark_attention(std::vector<Parameter<T>*>& params, std::size_t from) {
    for (std::size_t i = from; i < params.size(); ++i) params[i]->attention = true;
}

} // namespace aff
