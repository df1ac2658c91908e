#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "dwp/checkpoint.hpp"
#include "dwp/gradcheck.hpp"
#include "dwp/loss.hpp"
#include "dwp/train.hpp"
#include "oracles.hpp"

using namespace dwp;

namespace {

// 27 * Cin * Cout + Cout per conv.
std::size_t conv_params(std::size_t cin, std::size_t cout) { return 27 * cin * cout + cout; }

std::vector<Volume> target_volumes(int n, Dims dims = {16, 16, 16}) {
    std::vector<Volume> out;
    for (int i = 0; i < n; ++i) out.push_back(gen_volume(Domain::target, dims, 100 + i, "t" + std::to_string(i)));
    return out;
}

std::vector<const Volume*> ptrs(const std::vector<Volume>& v) {
    std::vector<const Volume*> out;
    for (const auto& x : v) out.push_back(&x);
    return out;
}

}  // namespace

TEST(UNet, ParamCountTwoLevelsBaseFour) {
    const std::size_t hand = conv_params(1, 4) + conv_params(4, 4)    // enc0
                             + conv_params(4, 8) + conv_params(8, 8)  // enc1
                             + conv_params(8, 4) + conv_params(8, 4) + conv_params(4, 4)  // dec0: up, conv0, conv1
                             + conv_params(4, 1);                                          // out
    EXPECT_EQ(hand, 5437u);
    const UNetConfig cfg{2, 4, 1};
    Rng rng(1);
    EXPECT_EQ(param_count(build_unet<float>(cfg, rng)), hand);
    EXPECT_EQ(unet_param_count(cfg), hand);
}

TEST(UNet, ParamCountDeskConfig) {
    const std::size_t hand = conv_params(1, 8) + conv_params(8, 8) + conv_params(8, 16) + conv_params(16, 16) +
                             conv_params(16, 32) + conv_params(32, 32) + conv_params(32, 16) + conv_params(32, 16) +
                             conv_params(16, 16) + conv_params(16, 8) + conv_params(16, 8) + conv_params(8, 8) +
                             conv_params(8, 1);
    EXPECT_EQ(hand, 97385u);
    Rng rng(1);
    EXPECT_EQ(param_count(build_unet<float>(UNetConfig{}, rng)), hand);
}

TEST(UNet, ParamCountSmallCases) {
    ParamSet<float> p;
    EXPECT_EQ(param_count(p), 0u);
    p.add("c.weight", Tensor<float>({2, 1, 3, 3, 3}));
    p.add("c.bias", Tensor<float>({2}));
    EXPECT_EQ(param_count(p), 56u);
}

TEST(UNet, HeInitIsSeededAndBiasFree) {
    const UNetConfig cfg{2, 4, 1};
    Rng a(5), b(5);
    const auto pa = build_unet<float>(cfg, a);
    EXPECT_EQ(pa, build_unet<float>(cfg, b));
    for (const auto& e : pa) {
        if (e.name.ends_with(".bias")) {
            for (float v : e.value.values()) EXPECT_EQ(v, 0.0f);
        }
    }
}

TEST(UNet, CheckpointRoundTripAndMismatchReport) {
    const UNetConfig cfg{2, 4, 1};
    Rng rng(6);
    const auto p = build_unet<float>(cfg, rng);
    const auto path = std::filesystem::temp_directory_path() / "dwp_segnet_rt.ckpt";
    write_checkpoint(p, path);
    EXPECT_EQ(unet_from_checkpoint(cfg, path), p);

    try {
        unet_from_checkpoint(UNetConfig{2, 8, 1}, path);
        FAIL() << "mismatched config accepted";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("enc0.conv0.weight"), std::string::npos) << e.what();
    }
    ParamSet<float> partial;
    for (const auto& e : p) {
        if (e.name != "out.bias") partial.add(e.name, e.value);
    }
    try {
        check_unet_params(cfg, partial);
        FAIL() << "missing tensor accepted";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("out.bias"), std::string::npos) << e.what();
    }
}

TEST(UNet, ForwardShapeAndZeroWeights) {
    const UNetConfig cfg{};
    Rng rng(2);
    const auto x = normal_tensor<float>({2, 1, 32, 32, 32}, rng);
    const auto p = build_unet<float>(cfg, rng);
    const auto y = unet_forward(cfg, p, x);
    EXPECT_EQ(y.shape(), (Shape{2, 1, 32, 32, 32}));
    EXPECT_TRUE(all_finite<float>(y.values()));

    const auto zero = p.like(0.0f);
    const auto y0 = unet_forward(cfg, zero, x);
    for (float v : y0.values()) EXPECT_EQ(v, 0.0f);
}

TEST(UNet, IndivisibleDimsAreRejected) {
    const UNetConfig cfg{3, 4, 1};
    Rng rng(2);
    const auto p = build_unet<float>(cfg, rng);
    try {
        unet_forward(cfg, p, Tensor<float>({1, 1, 16, 18, 16}));
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("4"), std::string::npos) << e.what();
    }
}

TEST(UNet, FirstLayerWeightProbeChangesLogits) {
    const UNetConfig cfg{2, 4, 1};
    Rng rng(8);
    const auto x = normal_tensor<double>({1, 1, 8, 8, 8}, rng);
    auto p = build_unet<double>(cfg, rng);
    const auto y0 = unet_forward(cfg, p, x);
    p.at("enc0.conv0.weight")[13] += 0.1;
    const auto y1 = unet_forward(cfg, p, x);
    double diff = 0;
    for (std::size_t i = 0; i < y0.size(); ++i) diff = std::max(diff, std::abs(y1[i] - y0[i]));
    EXPECT_GT(diff, 1e-8);
}

TEST(UNet, BceDiceGradientPassesFiniteDifferences) {
    const UNetConfig cfg{2, 2, 1};
    Rng rng(21);
    const auto x = normal_tensor<double>({1, 1, 4, 4, 4}, rng);
    Tensor<double> mask({1, 1, 4, 4, 4});
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (i % 7 == 0 || i % 5 == 1) ? 1.0 : 0.0;
    auto params = build_unet<double>(cfg, rng);
    for (auto& e : params) {
        if (e.name.ends_with(".bias")) fill_normal(e.value.values(), rng);
    }
    const LossWithGrad fn = [&](const ParamSet<double>& p, ParamSet<double>* grad) {
        UNetTape<double> tape;
        const auto logits = unet_forward(cfg, p, x, &tape);
        Tensor<double> gl;
        const auto loss = bce_dice_loss(logits, mask, 1.0, grad ? &gl : nullptr);
        if (grad) {
            *grad = p.like();
            unet_backward(cfg, p, tape, gl, *grad);
        }
        return loss.total;
    };
    GradCheckOptions opts;
    opts.max_coords = 400;
    opts.epsilon = 1e-4;
    const auto r = finite_diff_check(fn, params, opts);
    EXPECT_TRUE(r.ok) << r.message;
    EXPECT_LE(r.max_rel_error, 1e-3) << r.worst_param << "[" << r.worst_index << "]";
}

TEST(Loss, PerfectPredictionIsNearZero) {
    Tensor<double> mask({1, 1, 4, 4, 4});
    for (std::size_t i = 0; i < mask.size(); i += 3) mask[i] = 1.0;
    Tensor<double> logits(mask.shape());
    for (std::size_t i = 0; i < mask.size(); ++i) logits[i] = mask[i] > 0 ? 40.0 : -40.0;
    EXPECT_LE(bce_dice_loss(logits, mask, 1.0).total, 1e-6);
}

TEST(Loss, ZeroLogitsHandComputed) {
    // 8 voxels, 3 foreground: sum p g = 1.5, sum p = 4, sum g = 3, softDice = (3 + 1) / (7 + 1).
    Tensor<double> mask({1, 1, 2, 2, 2});
    mask[0] = mask[3] = mask[6] = 1.0;
    const Tensor<double> logits(mask.shape());
    const auto v = bce_dice_loss(logits, mask, 1.0);
    EXPECT_EQ(v.bce, std::log(2.0));
    EXPECT_DOUBLE_EQ(v.soft_dice, 0.5);
    EXPECT_DOUBLE_EQ(v.total, std::log(2.0) + 0.5);
}

TEST(Loss, DiceWeightIsLinear) {
    Rng rng(4);
    const auto logits = normal_tensor<double>({1, 1, 4, 4, 4}, rng);
    Tensor<double> mask(logits.shape());
    for (std::size_t i = 0; i < mask.size(); i += 2) mask[i] = 1.0;
    const auto a = bce_dice_loss(logits, mask, 1.0);
    const auto b = bce_dice_loss(logits, mask, 2.0);
    EXPECT_NEAR(b.total - b.bce, 2.0 * (a.total - a.bce), 1e-12);
}

TEST(Loss, ExtremeLogitsStayFinite) {
    Tensor<float> logits({1, 1, 2, 2, 2});
    Tensor<float> mask(logits.shape());
    logits[0] = 1e4f;
    logits[1] = -1e4f;
    mask[1] = 1.0f;
    Tensor<float> g;
    const auto v = bce_dice_loss(logits, mask, 1.0f, &g);
    EXPECT_TRUE(std::isfinite(v.total));
    EXPECT_TRUE(all_finite<float>(g.values()));
}

TEST(Metrics, HandComputedCases) {
    std::vector<float> p(64, 0.0f);
    std::vector<std::uint8_t> g(64, 0);
    for (std::size_t i = 0; i < 8; ++i) {
        p[i] = 1.0f;
        g[i] = 1;
    }
    EXPECT_EQ(dice_metric(p, g), 1.0);
    EXPECT_EQ(iou_metric(p, g), 1.0);

    std::vector<std::uint8_t> other(64, 0);
    for (std::size_t i = 32; i < 40; ++i) other[i] = 1;
    EXPECT_EQ(dice_metric(p, other), 0.0);
    EXPECT_EQ(iou_metric(p, other), 0.0);

    // A = 2x2x2 cube, B = its 4-voxel half.
    std::vector<float> a(64, 0.0f);
    std::vector<std::uint8_t> b(64, 0);
    for (int z = 0; z < 2; ++z)
        for (int y = 0; y < 2; ++y)
            for (int x = 0; x < 2; ++x) {
                a[z * 16 + y * 4 + x] = 0.9f;
                if (z == 0) b[z * 16 + y * 4 + x] = 1;
            }
    EXPECT_DOUBLE_EQ(dice_metric(a, b), 2.0 * 4 / (8 + 4));
    EXPECT_NEAR(dice_metric(a, b), 0.667, 5e-4);
    EXPECT_DOUBLE_EQ(iou_metric(a, b), 0.5);
}

TEST(Metrics, EmptyPairScoresOneAndThresholdIsStrict) {
    const std::vector<float> p(10, 0.5f);
    const std::vector<std::uint8_t> g(10, 0);
    EXPECT_EQ(dice_metric(p, g), 1.0);
    EXPECT_EQ(iou_metric(p, g), 1.0);
}

TEST(Metrics, RandomPairsAgreeWithCountingAndIouNeverExceedsDice) {
    Rng rng(77);
    std::bernoulli_distribution coin(0.3);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<float> p(50);
        std::vector<std::uint8_t> g(50), pm(50);
        for (std::size_t i = 0; i < p.size(); ++i) {
            p[i] = coin(rng) ? 0.9f : 0.1f;
            g[i] = coin(rng);
            pm[i] = p[i] > 0.5f;
        }
        const double d = dice_metric(p, g), u = iou_metric(p, g);
        EXPECT_LE(u, d + 1e-15);
        double inter, na, nb;
        oracle::overlap_counts(p, g, inter, na, nb);
        if (na + nb > 0) {
            EXPECT_DOUBLE_EQ(d, 2 * inter / (na + nb));
            EXPECT_DOUBLE_EQ(u, inter / (na + nb - inter));
        }
        // Symmetry under swapping prediction and mask.
        const std::vector<float> gf(g.begin(), g.end());
        EXPECT_DOUBLE_EQ(dice_metric(gf, pm), d);
        EXPECT_DOUBLE_EQ(iou_metric(gf, pm), u);
    }
}

TEST(TrainPlain, FullFreezeIsIdentity) {
    const UNetConfig cfg{2, 4, 1};
    const auto vols = target_volumes(2);
    Rng init(1), rng(2);
    const auto p0 = build_unet<float>(cfg, init);
    const auto names = p0.names();
    const auto r = train_plain(cfg, ptrs(vols), p0, {names.begin(), names.end()}, {2, 1e-2, 1.0}, rng);
    EXPECT_EQ(r.params, p0);
}

TEST(TrainPlain, ZeroLearningRateIsIdentity) {
    const UNetConfig cfg{2, 4, 1};
    const auto vols = target_volumes(2);
    Rng init(1), rng(2);
    const auto p0 = build_unet<float>(cfg, init);
    EXPECT_EQ(train_plain(cfg, ptrs(vols), p0, {}, {1, 0.0, 1.0}, rng).params, p0);
}

TEST(TrainPlain, FrozenTensorsStayBitIdentical) {
    const UNetConfig cfg{2, 4, 1};
    const auto vols = target_volumes(3);
    Rng init(1), rng(2);
    const auto p0 = build_unet<float>(cfg, init);
    const std::set<std::string> freeze{"enc1.conv0.weight", "enc1.conv0.bias", "dec0.up.weight"};
    const auto r = train_plain(cfg, ptrs(vols), p0, freeze, {3, 1e-2, 1.0}, rng);
    for (const auto& e : r.params) {
        if (freeze.count(e.name)) {
            EXPECT_EQ(e.value, p0.at(e.name)) << e.name;
        }
    }
    EXPECT_NE(r.params.at("enc0.conv0.weight"), p0.at("enc0.conv0.weight"));
}

TEST(TrainPlain, UnknownFreezeNameIsRejected) {
    const UNetConfig cfg{2, 4, 1};
    const auto vols = target_volumes(1);
    Rng init(1), rng(2);
    const auto p0 = build_unet<float>(cfg, init);
    EXPECT_THROW(train_plain(cfg, ptrs(vols), p0, {"enc9.conv0.weight"}, {1, 1e-3, 1.0}, rng), std::invalid_argument);
}

TEST(TrainPlain, FiftyEpochsReduceTrainingLoss) {
    const UNetConfig cfg{2, 4, 1};
    const auto vols = target_volumes(5);
    Rng init(3), rng(4);
    const auto p0 = build_unet<float>(cfg, init);
    const auto r = train_plain(cfg, ptrs(vols), p0, {}, {50, 1e-3, 1.0}, rng);
    ASSERT_EQ(r.epoch_losses.size(), 50u);
    EXPECT_LT(r.epoch_losses.back(), r.epoch_losses.front());
}

TEST(TrainPlain, SameSeedIsDeterministic) {
    const UNetConfig cfg{2, 4, 1};
    const auto vols = target_volumes(2);
    Rng init(3);
    const auto p0 = build_unet<float>(cfg, init);
    Rng a(9), b(9);
    EXPECT_EQ(train_plain(cfg, ptrs(vols), p0, {}, {2, 1e-3, 1.0}, a).params,
              train_plain(cfg, ptrs(vols), p0, {}, {2, 1e-3, 1.0}, b).params);
}

TEST(Evaluate, PerfectProbabilitiesScoreOne) {
    const auto vols = target_volumes(2);
    std::vector<std::vector<float>> probs;
    for (const auto& v : vols) probs.emplace_back(v.mask.begin(), v.mask.end());
    const auto r = evaluate_probabilities(probs, ptrs(vols));
    EXPECT_EQ(r.dice, 1.0);
    EXPECT_EQ(r.iou, 1.0);
}
