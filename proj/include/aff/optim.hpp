#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "aff/autodiff.hpp"

namespace aff {

enum class OptimKind { nesterov_sgd, adagrad };

inline const char* optim_kind_name(OptimKind k) {
    return k == OptimKind::nesterov_sgd ? "nesterov_sgd" : "adagrad";
}

inline OptimKind parse_optim_kind(const std::string& s) {
    if (s == "nesterov_sgd") return OptimKind::nesterov_sgd;
    if (s == "adagrad") return OptimKind::adagrad;
    throw ConfigError("unknown optimizer '" + s + "'");
}

enum class ScheduleKind { constant, step, poly, cosine };

inline const char* schedule_kind_name(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::constant: return "constant";
        case ScheduleKind::step: return "step";
        case ScheduleKind::poly: return "poly";
        case ScheduleKind::cosine: return "cosine";
    }
    return "?";
}

inline ScheduleKind parse_schedule_kind(const std::string& s) {
    if (s == "constant") return ScheduleKind::constant;
    if (s == "step") return ScheduleKind::step;
    if (s == "poly") return ScheduleKind::poly;
    if (s == "cosine") return ScheduleKind::cosine;
    throw ConfigError("unknown schedule '" + s + "'");
}

// Per-epoch multiplier on the base learning rate.
struct Schedule {
    ScheduleKind kind = ScheduleKind::constant;
    std::vector<int> milestones; // step
    double gamma = 0.1;          // step
    double power = 0.9;          // poly
    int total_epochs = 1;        // poly, cosine

    static Schedule constant() { return {}; }

    static Schedule step(std::vector<int> milestones, double gamma) {
        if (gamma <= 0) throw ConfigError("step schedule gamma must be positive");
        Schedule s;
        s.kind = ScheduleKind::step;
        s.milestones = std::move(milestones);
        std::sort(s.milestones.begin(), s.milestones.end());
        s.gamma = gamma;
        return s;
    }

    static Schedule poly(double power, int total_epochs) {
        if (total_epochs < 1) throw ConfigError("poly schedule needs total epochs >= 1");
        Schedule s;
        s.kind = ScheduleKind::poly;
        s.power = power;
        s.total_epochs = total_epochs;
        return s;
    }

    static Schedule cosine(int total_epochs) {
        if (total_epochs < 1) throw ConfigError("cosine schedule needs total epochs >= 1");
        Schedule s;
        s.kind = ScheduleKind::cosine;
        s.total_epochs = total_epochs;
        return s;
    }

    double multiplier(int epoch) const {
        switch (kind) {
            case ScheduleKind::constant: return 1.0;
            case ScheduleKind::step: {
                double m = 1.0;
                for (int mi : milestones)
                    if (epoch >= mi) m *= gamma;
                return m;
            }
            case ScheduleKind::poly: {
                const double frac = std::min(1.0, static_cast<double>(epoch) / total_epochs);
                return std::pow(1.0 - frac, power);
            }
            case ScheduleKind::cosine:
                return 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, static_cast<double>(epoch) / total_epochs)));
        }
        return 1.0;
    }
};

// Nesterov SGD:  v <- m*v + g + wd*p;  p <- p - lr*(g + wd*p + m*v)
// AdaGrad:       a <- a + g^2;         p <- p - lr*g/(sqrt(a) + 1e-7)
// where g includes weight decay when configured and the parameter is not
// decay-exempt. Base lr may be zero (no-op updates); negative is rejected.
template <std::floating_point T>
class Optimizer {
  public:
    Optimizer(OptimKind kind, std::vector<Parameter<T>*> params, T lr, T momentum,
              T weight_decay, Schedule schedule = Schedule::constant())
        : kind_(kind), params_(std::move(params)), base_lr_(lr), momentum_(momentum),
          weight_decay_(weight_decay), schedule_(std::move(schedule)) {
        if (lr < T(0)) throw ConfigError("learning rate must be non-negative");
        if (weight_decay < T(0)) throw ConfigError("weight decay must be non-negative");
        accum_.reserve(params_.size());
        for (auto* p : params_) accum_.push_back(Tensor<T>::zeros(p->value.shape()));
    }

    void set_epoch(int e) { epoch_ = e; }
    int epoch() const { return epoch_; }
    T lr() const { return base_lr_ * static_cast<T>(schedule_.multiplier(epoch_)); }
    const std::vector<Parameter<T>*>& params() const { return params_; }
    const Tensor<T>& accumulator(std::size_t i) const { return accum_[i]; }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    void step() {
        const T cur_lr = lr();
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Parameter<T>& p = *params_[i];
            if (!p.trainable) continue;
            if (p.grad.shape().numel() != p.value.shape().numel())
                throw StateError("parameter '" + p.name + "' has no gradient");
            const T wd = p.decay_exempt ? T(0) : weight_decay_;
            T* w = p.value.data();
            const T* g = p.grad.data();
            T* a = accum_[i].data();
            const std::int64_t n = p.value.size();
            if (kind_ == OptimKind::nesterov_sgd) {
                for (std::int64_t j = 0; j < n; ++j) {
                    const T d = g[j] + wd * w[j];
                    a[j] = momentum_ * a[j] + d;
                    w[j] -= cur_lr * (d + momentum_ * a[j]);
                }
            } else {
                for (std::int64_t j = 0; j < n; ++j) {
                    const T d = g[j] + wd * w[j];
                    a[j] += d * d;
                    w[j] -= cur_lr * d / (std::sqrt(a[j]) + T(1e-7));
                }
            }
        }
    }

  private:
    OptimKind kind_;
    std::vector<Parameter<T>*> params_;
    T base_lr_, momentum_, weight_decay_;
    Schedule schedule_;
    std::vector<Tensor<T>> accum_;
    int epoch_ = 0;
};

} // namespace aff
