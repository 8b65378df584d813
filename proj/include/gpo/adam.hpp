#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "gpo/tensor.hpp"

namespace gpo {

template <typename T>
struct AdamState {
    T learning_rate = T(3e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    std::size_t t = 0;
    std::vector<Tensor<T>> m;
    std::vector<Tensor<T>> v;

    static AdamState init(const std::vector<Tensor<T>>& params, T lr = T(3e-4)) {
        AdamState s;
        s.learning_rate = lr;
        s.m.reserve(params.size());
        s.v.reserve(params.size());
        for (const auto& p : params) {
            s.m.emplace_back(p.shape, T(0));
            s.v.emplace_back(p.shape, T(0));
        }
        return s;
    }
};

// Standard Adam with bias correction. Parameters, gradients, and moment
// accumulators must agree element-for-element.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& state) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw DimensionError("adam_step: parameter/gradient/state counts differ");
    for (std::size_t i = 0; i < params.size(); ++i)
        if (!params[i].same_shape(grads[i]) || !params[i].same_shape(state.m[i]))
            throw DimensionError("adam_step: shape mismatch at parameter " + std::to_string(i) + ": " +
                                 shape_str(params[i].shape) + " vs " + shape_str(grads[i].shape));
    state.t += 1;
    const T bc1 = T(1) - std::pow(state.beta1, static_cast<T>(state.t));
    const T bc2 = T(1) - std::pow(state.beta2, static_cast<T>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        T* p = params[i].data.data();
        const T* g = grads[i].data.data();
        T* m = state.m[i].data.data();
        T* v = state.v[i].data.data();
        const std::size_t n = params[i].numel();
        for (std::size_t j = 0; j < n; ++j) {
            m[j] = state.beta1 * m[j] + (T(1) - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (T(1) - state.beta2) * g[j] * g[j];
            const T mhat = m[j] / bc1;
            const T vhat = v[j] / bc2;
            p[j] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

}  // namespace gpo
