#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "setpose/autodiff.hpp"
#include "setpose/errors.hpp"
#include "setpose/rng.hpp"

namespace setpose::nn {

using ad::Tensor;

/// Named trainable tensors in registration order. The order fixes both the
/// checkpoint layout and the optimizer's summation order.
template <typename T>
class ParamStore {
public:
    Tensor<T> add(const std::string& name, std::size_t rows, std::size_t cols, std::vector<T> init) {
        for (const auto& [n, _] : entries_)
            if (n == name) throw InvalidArgument("duplicate parameter name '" + name + "'");
        entries_.emplace_back(name, Tensor<T>::parameter(rows, cols, std::move(init)));
        return entries_.back().second;
    }

    Tensor<T> add_uniform(const std::string& name, std::size_t rows, std::size_t cols, double bound,
                          RngStream& rng) {
        std::vector<T> v(rows * cols);
        for (auto& x : v) x = T(rng.uniform(-bound, bound));
        return add(name, rows, cols, std::move(v));
    }

    const Tensor<T>& get(const std::string& name) const {
        for (const auto& [n, t] : entries_)
            if (n == name) return t;
        throw InvalidArgument("no parameter named '" + name + "'");
    }

    const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : entries_) n += t.size();
        return n;
    }

    void zero_grad() {
        for (auto& [_, t] : entries_) t.zero_grad();
    }

private:
    std::vector<std::pair<std::string, Tensor<T>>> entries_;
};

/// Fully connected layer, weights [in, out], initialized uniform in
/// +-sqrt(1/fan_in).
template <typename T>
struct Linear {
    Tensor<T> W, b;

    Linear() = default;
    Linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, RngStream& rng) {
        const double bound = std::sqrt(1.0 / double(in));
        W = store.add_uniform(name + ".weight", in, out, bound, rng);
        b = store.add_uniform(name + ".bias", 1, out, bound, rng);
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return ad::linear(x, W, b); }
    std::size_t in_features() const { return W.rows(); }
    std::size_t out_features() const { return W.cols(); }
};

template <typename T>
struct LayerNorm {
    Tensor<T> gamma, beta;

    LayerNorm() = default;
    LayerNorm(ParamStore<T>& store, const std::string& name, std::size_t width) {
        gamma = store.add(name + ".gamma", 1, width, std::vector<T>(width, T(1)));
        beta = store.add(name + ".beta", 1, width, std::vector<T>(width, T(0)));
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return ad::layer_norm(x, gamma, beta); }
};

/// Linear layers with ReLU between them and optional dropout after each
/// hidden activation.
template <typename T>
struct Mlp {
    std::vector<Linear<T>> layers;
    double dropout = 0.0;

    Mlp() = default;
    Mlp(ParamStore<T>& store, const std::string& name, const std::vector<std::size_t>& widths, RngStream& rng,
        double dropout_p = 0.0)
        : dropout(dropout_p) {
        if (widths.size() < 2) throw InvalidArgument("mlp needs at least input and output widths");
        for (std::size_t i = 0; i + 1 < widths.size(); ++i)
            layers.emplace_back(store, name + "." + std::to_string(i), widths[i], widths[i + 1], rng);
    }

    Tensor<T> operator()(const Tensor<T>& x, bool train = false, RngStream* rng = nullptr) const {
        Tensor<T> h = x;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            h = layers[i](h);
            if (i + 1 < layers.size()) {
                h = ad::relu(h);
                if (train && dropout > 0.0) {
                    if (!rng) throw InvalidArgument("dropout in training mode needs an rng stream");
                    h = ad::dropout(h, dropout, true, *rng);
                }
            }
        }
        return h;
    }
};

}  // namespace setpose::nn
