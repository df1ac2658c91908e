#include "dwp/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace dwp {

template <typename T>
void adam_step(ParamSet<T>& params, const ParamSet<T>& grads, AdamState<T>& state, const ParamFilter& trainable) {
    if (!congruent(params, grads)) throw std::invalid_argument("adam_step: gradients are not congruent to parameters");
    for (const auto& g : grads) {
        if (!all_finite(g.value.values())) throw NonFiniteError("adam_step: non-finite gradient for '" + g.name + "'");
    }
    if (state.m.empty() && !params.empty()) {
        state.m = params.like();
        state.v = params.like();
    } else if (!congruent(params, state.m)) {
        throw std::invalid_argument("adam_step: optimizer state is not congruent to parameters");
    }
    ++state.step;
    const auto& o = state.options;
    const T b1 = static_cast<T>(o.beta1), b2 = static_cast<T>(o.beta2);
    const T c1 = static_cast<T>(1.0 - std::pow(o.beta1, static_cast<double>(state.step)));
    const T c2 = static_cast<T>(1.0 - std::pow(o.beta2, static_cast<double>(state.step)));
    const T lr = static_cast<T>(o.lr), eps = static_cast<T>(o.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params.entry(i);
        if (trainable && !trainable(p.name)) continue;
        const auto& g = grads.entry(i).value;
        auto& m = state.m.entry(i).value;
        auto& v = state.v.entry(i).value;
        for (std::size_t j = 0; j < g.size(); ++j) {
            m[j] = b1 * m[j] + (T(1) - b1) * g[j];
            v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
            const T mhat = m[j] / c1;
            const T vhat = v[j] / c2;
            p.value[j] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

template void adam_step(ParamSet<float>&, const ParamSet<float>&, AdamState<float>&, const ParamFilter&);
template void adam_step(ParamSet<double>&, const ParamSet<double>&, AdamState<double>&, const ParamFilter&);

}  // namespace dwp
