#pragma once

#include <functional>
#include <set>
#include <string>
#include <vector>

#include "dwp/optim.hpp"
#include "dwp/random.hpp"
#include "dwp/unet.hpp"
#include "dwp/volume.hpp"

namespace dwp {

struct TrainOptions {
    int epochs = 150;
    double lr = 1e-3;
    double lambda_dice = 1.0;
};

struct TrainResult {
    ParamSet<float> params;
    std::vector<double> epoch_losses;  // mean training loss per epoch
};

/// Called after each epoch (1-based) with the current parameters.
using EpochCallback = std::function<void(int epoch, const ParamSet<float>& params)>;

/// Adam on bce_dice_loss, batch size one volume, shuffled order per epoch. Tensors named in `freeze`
/// are returned bit-identical to `init`. Unknown names in `freeze` are rejected.
TrainResult train_plain(const UNetConfig& cfg, const std::vector<const Volume*>& train, const ParamSet<float>& init,
                        const std::set<std::string>& freeze, const TrainOptions& options, Rng& rng,
                        const EpochCallback& on_epoch = {});

/// sigmoid(logits) for one volume.
std::vector<float> predict_probabilities(const UNetConfig& cfg, const ParamSet<float>& params, const Volume& v);

struct EvalResult {
    double dice = 0.0;
    double iou = 0.0;
};

/// Mean per-volume Dice and IoU at threshold 0.5.
EvalResult evaluate(const UNetConfig& cfg, const ParamSet<float>& params, const std::vector<const Volume*>& test);

/// Per-volume metrics for externally produced probability maps.
EvalResult evaluate_probabilities(const std::vector<std::vector<float>>& probs, const std::vector<const Volume*>& test);

}  // namespace dwp
