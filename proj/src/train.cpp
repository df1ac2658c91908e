#include "dwp/train.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "dwp/loss.hpp"

namespace dwp {

TrainResult train_plain(const UNetConfig& cfg, const std::vector<const Volume*>& train, const ParamSet<float>& init,
                        const std::set<std::string>& freeze, const TrainOptions& options, Rng& rng,
                        const EpochCallback& on_epoch) {
    check_unet_params(cfg, init);
    for (const auto& name : freeze) {
        if (!init.contains(name)) throw std::invalid_argument("train_plain: unknown freeze name '" + name + "'");
    }
    if (train.empty()) throw std::invalid_argument("train_plain: empty training set");
    if (options.epochs < 0) throw std::invalid_argument("train_plain: negative epoch count");

    TrainResult result{init, {}};
    auto& params = result.params;
    AdamState<float> adam(AdamOptions{options.lr});
    const auto trainable = [&freeze](const std::string& n) { return freeze.count(n) == 0; };
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= options.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        for (std::size_t idx : order) {
            const Volume& v = *train[idx];
            const Tensor<float> input = volume_input<float>(v);
            const Tensor<float> mask = volume_mask<float>(v);
            UNetTape<float> tape;
            const Tensor<float> logits = unet_forward(cfg, params, input, &tape);
            Tensor<float> glogits(logits.shape());
            const auto loss = bce_dice_loss(logits, mask, static_cast<float>(options.lambda_dice), &glogits);
            if (!std::isfinite(loss.total)) {
                throw NonFiniteError("train_plain: non-finite loss at epoch " + std::to_string(epoch) + " on volume '" +
                                     v.id + "'");
            }
            total += loss.total;
            ParamSet<float> grads = params.like();
            unet_backward(cfg, params, tape, glogits, grads, trainable);
            adam_step(params, grads, adam, trainable);
        }
        result.epoch_losses.push_back(total / static_cast<double>(train.size()));
        if (on_epoch) on_epoch(epoch, params);
    }
    return result;
}

std::vector<float> predict_probabilities(const UNetConfig& cfg, const ParamSet<float>& params, const Volume& v) {
    const Tensor<float> logits = unet_forward(cfg, params, volume_input<float>(v));
    std::vector<float> p(logits.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = sigmoid(logits[i]);
    return p;
}

EvalResult evaluate_probabilities(const std::vector<std::vector<float>>& probs, const std::vector<const Volume*>& test) {
    if (probs.size() != test.size() || test.empty()) throw std::invalid_argument("evaluate: prediction/test size mismatch");
    EvalResult r;
    for (std::size_t i = 0; i < test.size(); ++i) {
        r.dice += dice_metric(probs[i], test[i]->mask);
        r.iou += iou_metric(probs[i], test[i]->mask);
    }
    r.dice /= static_cast<double>(test.size());
    r.iou /= static_cast<double>(test.size());
    return r;
}

EvalResult evaluate(const UNetConfig& cfg, const ParamSet<float>& params, const std::vector<const Volume*>& test) {
    std::vector<std::vector<float>> probs;
    probs.reserve(test.size());
    for (const Volume* v : test) probs.push_back(predict_probabilities(cfg, params, *v));
    return evaluate_probabilities(probs, test);
}

}  // namespace dwp
