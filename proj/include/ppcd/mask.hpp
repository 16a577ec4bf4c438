#pragma once

#include <vector>

#include "ppcd/layers.hpp"
#include "ppcd/tape.hpp"

namespace ppcd {

// Learnable per-channel gate: m_i = sigmoid(delta * w_i). Once the fraction
// of gates at or below `pivot` exceeds `alpha`, the whole vector snaps to
// {0,1}, freezes, and stops receiving gradient.
template <typename T>
struct MaskStateT {
    TensorT<T> W;  // [n]
    T delta = T(1000);
    T pivot = T(0.005);
    T alpha = T(0.7);
    bool frozen = false;
    TensorT<T> m_star;   // [n], meaningful only when frozen
    T frozen_reg = T(0); // regularizer value captured at freeze time

    MaskStateT() = default;
    MaskStateT(int n, T delta_, T alpha_, T pivot_ = T(0.005))
        : W(TensorT<T>::full({n}, T(0.01))),
          delta(delta_),
          pivot(pivot_),
          alpha(alpha_),
          m_star({n}) {
        if (n <= 0) fail("mask layer needs at least one channel");
        if (delta <= T(0)) fail("mask delta must be positive");
        if (!(pivot > T(0) && pivot < T(1))) fail("mask pivot must lie in (0,1)");
        if (!(alpha > T(0) && alpha < T(1))) fail("mask alpha must lie in (0,1)");
    }

    int n() const { return W.dim(0); }

    // Host-side gate values (current sigmoid or frozen binary).
    TensorT<T> values_host() const {
        if (frozen) return m_star;
        TensorT<T> m({n()});
        for (int i = 0; i < n(); ++i) m[i] = T(1) / (T(1) + std::exp(-delta * W[i]));
        return m;
    }

    double zero_fraction() const {
        int c = 0;
        TensorT<T> m = values_host();
        for (int i = 0; i < n(); ++i)
            if (frozen ? m[i] == T(0) : m[i] <= pivot) ++c;
        return static_cast<double>(c) / n();
    }

    void collect_params(const std::string& prefix, ParamListT<T>& params) {
        params.push_back({prefix + ".W", &W});
    }
};

using MaskState = MaskStateT<float>;

template <typename T>
VarT<T> mask_values(CtxT<T>& ctx, MaskStateT<T>& state) {
    if (state.frozen) return ctx.constant(state.m_star);
    return ops::sigmoid(ops::scalar_mul(ctx.param(state.W), state.delta));
}

template <typename T>
VarT<T> mask_forward(CtxT<T>& ctx, VarT<T> x, MaskStateT<T>& state) {
    const Shape& xs = x.value().shape();
    if (xs.size() != 4 || xs[1] != state.n())
        fail("mask layer of width " + std::to_string(state.n()) + " applied to " + shape_str(xs));
    VarT<T> m = ops::reshape(mask_values(ctx, state), {1, state.n(), 1, 1});
    return ops::mul(x, m);
}

// sum_i |w_i + 1|
template <typename T>
VarT<T> mask_regularizer(CtxT<T>& ctx, MaskStateT<T>& state) {
    if (state.frozen) fail("regularizer queried on a frozen mask; use its freeze-time constant");
    return ops::sum_all(ops::abs_op(ops::scalar_add(ctx.param(state.W), T(1))));
}

// Post-step check. Returns true when this call froze the mask.
template <typename T>
bool binarize_check(MaskStateT<T>& state) {
    if (state.frozen) return false;
    int n = state.n();
    TensorT<T> m = state.values_host();
    int c = 0;
    for (int i = 0; i < n; ++i)
        if (m[i] <= state.pivot) ++c;
    double ratio = static_cast<double>(c) / n;
    if (ratio <= static_cast<double>(state.alpha)) return false;
    for (int i = 0; i < n; ++i) state.m_star[i] = m[i] <= state.pivot ? T(0) : T(1);
    state.frozen = true;
    T reg = T(0);
    for (int i = 0; i < n; ++i) reg += std::abs(state.W[i] + T(1));
    state.frozen_reg = reg;
    return true;
}

template <typename T>
std::vector<int> active_channels(const MaskStateT<T>& state) {
    if (!state.frozen) fail("cannot enumerate surviving channels before binarization");
    std::vector<int> idx;
    for (int i = 0; i < state.n(); ++i)
        if (state.m_star[i] == T(1)) idx.push_back(i);
    return idx;
}

// The transition layer is a plain 1x1 convolution; identity-initialized when
// square so an untrained student matches its unmasked twin exactly.
template <typename T>
Conv2dT<T> make_transition(int cin, int cout) {
    Conv2dT<T> conv(cin, cout, 1);
    if (cin == cout)
        for (int i = 0; i < cin; ++i) conv.weight.at4(i, i, 0, 0) = T(1);
    return conv;
}

}  // namespace ppcd
