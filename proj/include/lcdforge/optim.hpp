#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcdforge/tensor.hpp"

namespace lcd {

/// Adam with bias correction over a Params set. Moment buffers are keyed by
/// parameter index; the step counter increases by exactly one per update.
template <typename T>
struct AdamState {
    T lr = T(2e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    int64_t step = 0;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;

    explicit AdamState(T lr_ = T(2e-4)) : lr(lr_) {}
};

template <typename T>
void adam_step(Params<T>& params, AdamState<T>& state) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params.tensors[i].data().size(), T(0));
            state.v[i].assign(params.tensors[i].data().size(), T(0));
        }
    }
    if (state.m.size() != params.size())
        throw std::invalid_argument("adam_step: state tracks " + std::to_string(state.m.size()) + " params, got " +
                                    std::to_string(params.size()));
    state.step += 1;
    const T bc1 = T(1) - std::pow(state.beta1, static_cast<T>(state.step));
    const T bc2 = T(1) - std::pow(state.beta2, static_cast<T>(state.step));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& t = params.tensors[i];
        if (t.grad().size() != t.data().size())
            throw std::runtime_error("adam_step: parameter '" + params.names[i] + "' has no gradient");
        if (state.m[i].size() != t.data().size())
            throw std::invalid_argument("adam_step: moment shape mismatch for '" + params.names[i] + "'");
        auto& m = state.m[i];
        auto& v = state.v[i];
        auto& d = t.data();
        const auto& g = t.grad();
        for (size_t j = 0; j < d.size(); ++j) {
            m[j] = state.beta1 * m[j] + (T(1) - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (T(1) - state.beta2) * g[j] * g[j];
            const T mhat = m[j] / bc1;
            const T vhat = v[j] / bc2;
            d[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

/// shadow' = decay * shadow + (1 - decay) * params, elementwise.
template <typename T>
void ema_update(const Params<T>& params, Params<T>& shadow, T decay) {
    if (!(decay >= T(0) && decay < T(1))) throw std::invalid_argument("ema_update: decay must be in [0,1)");
    if (shadow.size() != params.size())
        throw std::invalid_argument("ema_update: shadow tracks " + std::to_string(shadow.size()) + " params, got " +
                                    std::to_string(params.size()));
    for (size_t i = 0; i < params.size(); ++i) {
        if (shadow.tensors[i].shape() != params.tensors[i].shape())
            throw std::invalid_argument("ema_update: shape mismatch for '" + params.names[i] + "': " +
                                        shape_str(shadow.tensors[i].shape()) + " vs " +
                                        shape_str(params.tensors[i].shape()));
        auto& s = shadow.tensors[i].data();
        const auto& p = params.tensors[i].data();
        for (size_t j = 0; j < s.size(); ++j) s[j] = decay * s[j] + (T(1) - decay) * p[j];
    }
}

template <typename T>
Params<T> clone_params(const Params<T>& params) {
    Params<T> out;
    for (size_t i = 0; i < params.size(); ++i)
        out.add(params.names[i], Tensor<T>::from(params.tensors[i].shape(), params.tensors[i].data()));
    return out;
}

}  // namespace lcd
