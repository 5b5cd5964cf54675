#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "setpose/autodiff.hpp"
#include "setpose/nn.hpp"

namespace setpose::optim {

struct AdamWConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
    double clip_norm = 0.1;  // <= 0 disables clipping
};

template <typename T>
struct OptimizerState {
    AdamWConfig config;
    std::uint64_t step = 0;
    std::vector<std::vector<T>> first_moment;
    std::vector<std::vector<T>> second_moment;

    void init(const nn::ParamStore<T>& params) {
        first_moment.clear();
        second_moment.clear();
        for (const auto& [_, p] : params.entries()) {
            first_moment.emplace_back(p.size(), T(0));
            second_moment.emplace_back(p.size(), T(0));
        }
    }
};

/// L2 norm of all parameter gradients taken jointly.
template <typename T>
double global_grad_norm(const nn::ParamStore<T>& params) {
    double s = 0.0;
    for (const auto& [_, p] : params.entries())
        for (T g : p.grad()) s += double(g) * double(g);
    return std::sqrt(s);
}

/// Scales every gradient by min(1, max_norm / global norm); returns the
/// norm before clipping.
template <typename T>
double clip_grad_norm(nn::ParamStore<T>& params, double max_norm) {
    const double norm = global_grad_norm(params);
    if (max_norm > 0.0 && norm > max_norm) {
        const T s = T(max_norm / norm);
        for (auto& [_, p] : params.entries()) {
            auto t = p;
            for (auto& g : t.mutable_grad()) g *= s;
        }
    }
    return norm;
}

/// Global-norm clipping followed by one AdamW update with decoupled weight
/// decay. Returns the gradient norm before clipping.
template <typename T>
double clip_and_step(OptimizerState<T>& state, nn::ParamStore<T>& params) {
    if (state.first_moment.size() != params.size()) state.init(params);
    const double norm = clip_grad_norm(params, state.config.clip_norm);
    const auto& c = state.config;
    ++state.step;
    const double bc1 = 1.0 - std::pow(c.beta1, double(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, double(state.step));
    std::size_t k = 0;
    for (const auto& [name, p] : params.entries()) {
        auto t = p;
        auto& w = t.mutable_value();
        const auto& g = t.grad();
        auto& m = state.first_moment[k];
        auto& v = state.second_moment[k];
        if (m.size() != w.size()) throw ShapeMismatch("optimizer state shape differs for " + name);
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g.empty() ? 0.0 : double(g[i]);
            m[i] = T(c.beta1 * m[i] + (1.0 - c.beta1) * gi);
            v[i] = T(c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi);
            double wi = double(w[i]) * (1.0 - c.lr * c.weight_decay);
            wi -= c.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.eps);
            w[i] = T(wi);
        }
        ++k;
    }
    return norm;
}

}  // namespace setpose::optim
