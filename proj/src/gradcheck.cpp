#include "dwp/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dwp/random.hpp"

namespace dwp {

GradCheckResult finite_diff_check(const LossWithGrad& loss_fn, const ParamSet<double>& params,
                                  const GradCheckOptions& options) {
    GradCheckResult result;
    ParamSet<double> grad = params.like();
    const double base = loss_fn(params, &grad);
    if (!std::isfinite(base)) {
        result.message = "non-finite loss at the unperturbed point";
        return result;
    }

    // (entry, element) pairs, optionally subsampled.
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t e = 0; e < params.size(); ++e) {
        for (std::size_t j = 0; j < params.entry(e).value.size(); ++j) coords.emplace_back(e, j);
    }
    if (coords.size() > options.max_coords) {
        Rng rng(options.seed);
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(options.max_coords);
        std::sort(coords.begin(), coords.end());
    }

    ParamSet<double> probe = params;
    for (const auto& [e, j] : coords) {
        auto& v = probe.entry(e).value[j];
        const double orig = v;
        v = orig + options.epsilon;
        const double up = loss_fn(probe, nullptr);
        v = orig - options.epsilon;
        const double down = loss_fn(probe, nullptr);
        v = orig;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            result.message = "non-finite loss probing " + params.entry(e).name + "[" + std::to_string(j) + "]";
            return result;
        }
        const double numeric = (up - down) / (2.0 * options.epsilon);
        const double analytic = grad.entry(e).value[j];
        const double denom = std::max({std::abs(numeric), std::abs(analytic), options.floor});
        const double rel = std::abs(numeric - analytic) / denom;
        if (rel > result.max_rel_error || result.coords_checked == 0) {
            result.max_rel_error = std::max(result.max_rel_error, rel);
            if (rel >= result.max_rel_error) {
                result.worst_param = params.entry(e).name;
                result.worst_index = j;
            }
        }
        ++result.coords_checked;
    }
    result.ok = true;
    return result;
}

}  // namespace dwp
