#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "ppcd/layers.hpp"

namespace ppcd {

// Stepped learning rate: divide the base by `factor` at each listed epoch.
template <typename T>
T lr_at_epoch(T base_lr, const std::vector<int>& drop_epochs, T factor, int epoch, int epochs) {
    if (epoch < 0 || epoch >= epochs)
        fail("epoch " + std::to_string(epoch) + " outside the schedule of " +
             std::to_string(epochs) + " epochs");
    for (size_t k = 0; k + 1 < drop_epochs.size(); ++k)
        if (drop_epochs[k] > drop_epochs[k + 1]) fail("drop epochs must be sorted ascending");
    T lr = base_lr;
    for (int d : drop_epochs)
        if (d <= epoch) lr /= factor;
    return lr;
}

// Adam with bias correction. State is keyed by parameter name so a parameter
// set may shrink mid-run (frozen masks drop out) without disturbing the rest.
template <typename T>
struct AdamT {
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);

    struct Slot {
        TensorT<T> m, v;
        int64_t t = 0;
    };
    std::unordered_map<std::string, Slot> slots;
    int64_t step_count = 0;

    void step(const ParamListT<T>& params, const std::vector<TensorT<T>>& grads, T lr) {
        if (params.size() != grads.size())
            fail("optimizer got " + std::to_string(grads.size()) + " gradients for " +
                 std::to_string(params.size()) + " parameters");
        ++step_count;
        for (size_t i = 0; i < params.size(); ++i) {
            TensorT<T>& p = *params[i].tensor;
            const TensorT<T>& g = grads[i];
            if (!g.same_shape(p))
                fail("gradient shape " + shape_str(g.shape()) + " does not match parameter " +
                     params[i].name + " " + shape_str(p.shape()));
            if (!g.all_finite()) fail("non-finite gradient for parameter " + params[i].name);
            Slot& s = slots[params[i].name];
            if (s.m.size() == 0) {
                s.m = TensorT<T>(p.shape());
                s.v = TensorT<T>(p.shape());
            } else if (!s.m.same_shape(p)) {
                fail("optimizer state shape mismatch for parameter " + params[i].name);
            }
            ++s.t;
            T bc1 = T(1) - std::pow(beta1, static_cast<T>(s.t));
            T bc2 = T(1) - std::pow(beta2, static_cast<T>(s.t));
            for (int64_t j = 0; j < p.size(); ++j) {
                s.m[j] = beta1 * s.m[j] + (T(1) - beta1) * g[j];
                s.v[j] = beta2 * s.v[j] + (T(1) - beta2) * g[j] * g[j];
                T mhat = s.m[j] / bc1;
                T vhat = s.v[j] / bc2;
                p[j] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }
};

using Adam = AdamT<float>;

}  // namespace ppcd
