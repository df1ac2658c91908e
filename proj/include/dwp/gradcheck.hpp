#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "dwp/tensor.hpp"

namespace dwp {

/// Loss at `params`; writes the analytic gradient into `grad` when it is non-null.
using LossWithGrad = std::function<double(const ParamSet<double>& params, ParamSet<double>* grad)>;

struct GradCheckResult {
    bool ok = false;
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    std::size_t coords_checked = 0;
    std::string message;  // non-empty when a probe was non-finite
};

struct GradCheckOptions {
    double epsilon = 1e-6;
    std::size_t max_coords = 200;  // random subsample above this many scalars
    std::uint64_t seed = 0;
    /// Denominator floor: error is |a - n| / max(|a|, |n|, floor).
    double floor = 1e-7;
};

/// Central-difference check of the analytic gradient. `ok` is false only for non-finite probes;
/// callers compare max_rel_error against their own threshold.
GradCheckResult finite_diff_check(const LossWithGrad& loss_fn, const ParamSet<double>& params,
                                  const GradCheckOptions& options = {});

}  // namespace dwp
