#pragma once

#include <cmath>
#include <map>
#include <string>

#include "memtrace/diffcore/network.hpp"
#include "memtrace/errors.hpp"

namespace memtrace::diffcore {

enum class OptimizerKind { sgd_momentum, adam };

struct ScheduleConfig {
    double base_lr = 3e-4;
    int t_max = 1;
};

// Half-cosine annealing, stepped per epoch, no restarts:
// lr(t) = eta * (1 + cos(pi * t / t_max)) / 2
inline double cosine_lr(int t, const ScheduleConfig& cfg) {
    if (cfg.base_lr <= 0 || cfg.t_max < 1) throw ConfigError("invalid schedule config");
    if (t < 0 || t > cfg.t_max) throw RangeError("cosine_lr: epoch out of range");
    if (t == cfg.t_max) return 0.0;
    if (t == 0) return cfg.base_lr;
    return cfg.base_lr * (1.0 + std::cos(M_PI * static_cast<double>(t) / cfg.t_max)) / 2.0;
}

template <typename T>
struct OptimizerStateT {
    OptimizerKind kind = OptimizerKind::sgd_momentum;
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
    long step = 0;
    std::map<std::string, TensorT<T>> velocity;  // sgd
    std::map<std::string, TensorT<T>> m1, m2;    // adam
};

using OptimizerState = OptimizerStateT<float>;

// Coupled L2: g' = g + lambda * w, then v <- m*v + g', w <- w - lr*v.
template <typename T>
void sgd_momentum_step(OptimizerStateT<T>& opt, ModelStateT<T>& model,
                       const GradMap<T>& grads, double lr) {
    for (const auto& [name, g] : grads) {
        auto& w = model.params.at(name);
        if (w.numel() != g.numel()) throw InputError("sgd step: shape mismatch for " + name);
        auto it = opt.velocity.find(name);
        if (it == opt.velocity.end())
            it = opt.velocity.emplace(name, TensorT<T>(w.shape)).first;
        auto& v = it->second;
        for (size_t i = 0; i < w.numel(); ++i) {
            T ge = g.data[i] + static_cast<T>(opt.weight_decay) * w.data[i];
            v.data[i] = static_cast<T>(opt.momentum) * v.data[i] + ge;
            w.data[i] -= static_cast<T>(lr) * v.data[i];
        }
    }
    ++opt.step;
}

// Bias-corrected Adam on g' = g + lambda * w.
template <typename T>
void adam_step(OptimizerStateT<T>& opt, ModelStateT<T>& model, const GradMap<T>& grads,
               double lr) {
    const long t = opt.step + 1;
    const double bc1 = 1.0 - std::pow(opt.beta1, t);
    const double bc2 = 1.0 - std::pow(opt.beta2, t);
    for (const auto& [name, g] : grads) {
        auto& w = model.params.at(name);
        if (w.numel() != g.numel()) throw InputError("adam step: shape mismatch for " + name);
        auto it1 = opt.m1.find(name);
        if (it1 == opt.m1.end()) it1 = opt.m1.emplace(name, TensorT<T>(w.shape)).first;
        auto it2 = opt.m2.find(name);
        if (it2 == opt.m2.end()) it2 = opt.m2.emplace(name, TensorT<T>(w.shape)).first;
        auto& m = it1->second;
        auto& v = it2->second;
        for (size_t i = 0; i < w.numel(); ++i) {
            double ge = g.data[i] + opt.weight_decay * w.data[i];
            m.data[i] = static_cast<T>(opt.beta1 * m.data[i] + (1 - opt.beta1) * ge);
            v.data[i] = static_cast<T>(opt.beta2 * v.data[i] + (1 - opt.beta2) * ge * ge);
            double mhat = m.data[i] / bc1;
            double vhat = v.data[i] / bc2;
            w.data[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + opt.eps));
        }
    }
    ++opt.step;
}

template <typename T>
void optimizer_step(OptimizerStateT<T>& opt, ModelStateT<T>& model,
                    const GradMap<T>& grads, double lr) {
    if (opt.kind == OptimizerKind::sgd_momentum)
        sgd_momentum_step(opt, model, grads, lr);
    else
        adam_step(opt, model, grads, lr);
}

}  // namespace memtrace::diffcore
