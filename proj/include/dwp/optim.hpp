#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "dwp/tensor.hpp"

namespace dwp {

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Moment accumulators are created lazily on the first step, congruent to the parameters.
template <typename T>
struct AdamState {
    AdamOptions options;
    ParamSet<T> m;
    ParamSet<T> v;
    std::int64_t step = 0;

    AdamState() = default;
    explicit AdamState(AdamOptions opts) : options(opts) {}
};

/// Predicate selecting which parameters the step may change. Empty means all.
using ParamFilter = std::function<bool(const std::string&)>;

/// One bias-corrected Adam update of `params` in place. Throws NonFiniteError naming the
/// offending parameter (before touching anything) if a gradient is NaN/Inf.
template <typename T>
void adam_step(ParamSet<T>& params, const ParamSet<T>& grads, AdamState<T>& state, const ParamFilter& trainable = {});

}  // namespace dwp
