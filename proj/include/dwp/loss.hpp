#pragma once

#include <cstdint>
#include <span>

#include "dwp/tensor.hpp"

namespace dwp {

inline constexpr double kDiceSmoothing = 1.0;

template <typename T>
struct BceDiceValue {
    T total;
    T bce;        // mean binary cross-entropy over voxels
    T soft_dice;  // (2 sum p g + eps) / (sum p + sum g + eps)
};

/// BCE(mean) + lambda_dice * (1 - softDice), p = sigmoid(logits). When `grad_logits` is non-null it
/// receives d(total)/d(logits) (overwritten, same shape as logits).
template <typename T>
BceDiceValue<T> bce_dice_loss(const Tensor<T>& logits, const Tensor<T>& mask, T lambda_dice,
                              Tensor<T>* grad_logits = nullptr);

template <typename T>
T sigmoid(T x) {
    return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

/// Hard-thresholded overlap: 2|A n B| / (|A| + |B|). Two empty sets score 1.
double dice_metric(std::span<const float> prob, std::span<const std::uint8_t> mask, double threshold = 0.5);

/// Hard-thresholded overlap: |A n B| / |A u B|. Two empty sets score 1.
double iou_metric(std::span<const float> prob, std::span<const std::uint8_t> mask, double threshold = 0.5);

}  // namespace dwp
