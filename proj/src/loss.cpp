#include "dwp/loss.hpp"

#include <cmath>
#include <stdexcept>

namespace dwp {

template <typename T>
BceDiceValue<T> bce_dice_loss(const Tensor<T>& logits, const Tensor<T>& mask, T lambda_dice, Tensor<T>* grad_logits) {
    if (logits.shape() != mask.shape()) {
        throw std::invalid_argument("bce_dice_loss: logits " + shape_string(logits.shape()) + " vs mask " +
                                    shape_string(mask.shape()));
    }
    const std::size_t n = logits.size();
    const T eps = static_cast<T>(kDiceSmoothing);
    // Accumulate in double regardless of T so reductions have a fixed order and precision.
    double bce = 0.0, inter = 0.0, sum_p = 0.0, sum_g = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = logits[i], g = mask[i];
        bce += std::max(x, 0.0) - x * g + std::log1p(std::exp(-std::abs(x)));
        const double p = sigmoid(x);
        inter += p * g;
        sum_p += p;
        sum_g += g;
    }
    bce /= static_cast<double>(n);
    const double denom = sum_p + sum_g + eps;
    const double soft_dice = (2.0 * inter + eps) / denom;
    BceDiceValue<T> v{static_cast<T>(bce + lambda_dice * (1.0 - soft_dice)), static_cast<T>(bce),
                      static_cast<T>(soft_dice)};
    if (grad_logits) {
        if (grad_logits->shape() != logits.shape()) *grad_logits = Tensor<T>(logits.shape());
        const double inv_n = 1.0 / static_cast<double>(n);
        const double num = 2.0 * inter + eps;
        for (std::size_t i = 0; i < n; ++i) {
            const double p = sigmoid(static_cast<double>(logits[i]));
            const double g = mask[i];
            // d softDice / d p_i
            const double dd = (2.0 * g * denom - num) / (denom * denom);
            (*grad_logits)[i] = static_cast<T>((p - g) * inv_n - lambda_dice * dd * p * (1.0 - p));
        }
    }
    return v;
}

template BceDiceValue<float> bce_dice_loss(const Tensor<float>&, const Tensor<float>&, float, Tensor<float>*);
template BceDiceValue<double> bce_dice_loss(const Tensor<double>&, const Tensor<double>&, double, Tensor<double>*);

namespace {

struct Counts {
    std::size_t inter = 0, a = 0, b = 0;
};

Counts overlap(std::span<const float> prob, std::span<const std::uint8_t> mask, double threshold) {
    if (prob.size() != mask.size()) throw std::invalid_argument("metric: prediction and mask sizes differ");
    Counts c;
    for (std::size_t i = 0; i < prob.size(); ++i) {
        const bool a = prob[i] > threshold;
        const bool b = mask[i] != 0;
        c.a += a;
        c.b += b;
        c.inter += a && b;
    }
    return c;
}

}  // namespace

double dice_metric(std::span<const float> prob, std::span<const std::uint8_t> mask, double threshold) {
    const Counts c = overlap(prob, mask, threshold);
    if (c.a + c.b == 0) return 1.0;
    return 2.0 * static_cast<double>(c.inter) / static_cast<double>(c.a + c.b);
}

double iou_metric(std::span<const float> prob, std::span<const std::uint8_t> mask, double threshold) {
    const Counts c = overlap(prob, mask, threshold);
    const std::size_t uni = c.a + c.b - c.inter;
    if (uni == 0) return 1.0;
    return static_cast<double>(c.inter) / static_cast<double>(uni);
}

}  // namespace dwp
