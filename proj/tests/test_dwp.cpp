#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "dwp/gradcheck.hpp"
#include "dwp/vae.hpp"
#include "linear_gaussian.hpp"

using namespace dwp;

namespace {

const double kLog2Pi = std::log(2 * M_PI);

// Noisy scaled copies of three fixed templates, a stand-in for harvested filters.
KernelGroup template_group(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::array<std::array<float, 27>, 3> templates{};
    for (auto& t : templates) fill_normal(std::span<float>(t), rng);
    std::normal_distribution<float> noise(0.0f, 0.05f), scale(0.0f, 0.3f);
    KernelGroup g{kSharedGroup, {}};
    for (std::size_t i = 0; i < n; ++i) {
        KernelSlice s;
        const auto& t = templates[i % 3];
        const float a = scale(rng);
        for (std::size_t j = 0; j < 27; ++j) s.values[j] = a * t[j] + noise(rng);
        s.layer_name = "l";
        g.slices.push_back(s);
    }
    return g;
}

VAEConfig small_config(int epochs) {
    VAEConfig c;
    c.encoder_hidden = {32};
    c.decoder_hidden = {32};
    c.epochs = epochs;
    c.lr = 3e-3;
    c.batch_size = 64;
    return c;
}

std::vector<double> per_element_std(const std::vector<KernelSlice>& ks) {
    std::vector<double> mean(27, 0.0), var(27, 0.0);
    for (const auto& k : ks)
        for (int j = 0; j < 27; ++j) mean[j] += k.values[j];
    for (auto& m : mean) m /= static_cast<double>(ks.size());
    for (const auto& k : ks)
        for (int j = 0; j < 27; ++j) var[j] += (k.values[j] - mean[j]) * (k.values[j] - mean[j]);
    for (auto& v : var) v = std::sqrt(v / static_cast<double>(ks.size() - 1));
    return var;
}

}  // namespace

TEST(VaeDensities, StandardNormalAtOrigin) {
    const oracle::LinearGaussian lg;
    const auto prior = lg.prior();
    const std::vector<double> w(27, 0.0), noise(4, 0.0);
    const auto t = log_terms_with_noise<double>(prior, w, noise);
    for (double z : t.z_hat) EXPECT_EQ(z, 0.0);
    EXPECT_NEAR(t.log_p_z, -3.6758, 5e-5);
    EXPECT_DOUBLE_EQ(t.log_p_z, -2.0 * kLog2Pi);
}

TEST(VaeDensities, EncoderAtItsMeanWithUnitScale) {
    const oracle::LinearGaussian lg;
    auto prior = lg.prior();
    prior.psi.at("enc.log_sigma.bias").fill(0.0);
    Rng rng(3);
    std::vector<double> w(27);
    fill_normal(std::span<double>(w), rng);
    const std::vector<double> noise(4, 0.0);
    const auto t = log_terms_with_noise<double>(prior, w, noise);
    EXPECT_NEAR(t.log_r, -2.0 * kLog2Pi, 1e-12);
}

TEST(VaeDensities, LinearGaussianDecoderMatchesDirectPdf) {
    const oracle::LinearGaussian lg;
    const auto prior = lg.prior();
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> w(27), noise(4);
        fill_normal(std::span<double>(w), rng);
        fill_normal(std::span<double>(noise), rng);
        const auto t = log_terms_with_noise<double>(prior, w, noise);
        const Eigen::Map<const Eigen::VectorXd> wv(w.data(), 27), zv(t.z_hat.data(), 4);
        EXPECT_NEAR(t.log_p_w_given_z, lg.log_p_w_given_z(wv, zv), 1e-10);
        // z_hat follows the exact posterior.
        const Eigen::VectorXd mz = lg.post_gain * wv;
        for (int j = 0; j < 4; ++j) EXPECT_NEAR(t.z_hat[j], mz(j) + lg.post_sigma(j) * noise[j], 1e-12);
    }
}

TEST(VaeDensities, LogPdfMatchesDirectSummation) {
    Rng rng(7);
    std::uniform_real_distribution<double> ls(-3.0, 2.0);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> x(27), mu(27), log_sigma(27);
        fill_normal(std::span<double>(x), rng);
        fill_normal(std::span<double>(mu), rng);
        for (auto& v : log_sigma) v = ls(rng);
        double direct = 0.0;
        for (int i = 0; i < 27; ++i) {
            const double s2 = std::exp(2 * log_sigma[i]);
            direct += (x[i] - mu[i]) * (x[i] - mu[i]) / s2 + std::log(2 * M_PI * s2);
        }
        direct *= -0.5;
        const double got = gaussian_log_pdf<double>(x, mu, log_sigma);
        EXPECT_LE(std::abs(got - direct), 1e-12 * std::max(1.0, std::abs(direct)));
    }
}

TEST(VaeNetworks, SigmaStaysWithinClamp) {
    VAEConfig cfg;
    Rng rng(11);
    auto prior = init_vae<double>(cfg, "shared", rng);
    for (auto* ps : {&prior.psi, &prior.phi}) {
        for (auto& e : *ps) {
            if (e.name.find("log_sigma") != std::string::npos) {
                for (auto& v : e.value.values()) v *= 1e4;
            }
        }
    }
    std::normal_distribution<double> wide(0.0, 50.0);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> w(27), z(4);
        for (auto& v : w) v = wide(rng);
        for (auto& v : z) v = wide(rng);
        for (const auto& g : {encode<double>(prior, w), decode<double>(prior, z)}) {
            for (double s : g.sigma) {
                EXPECT_GE(s, 1e-4 * (1 - 1e-12));
                EXPECT_LE(s, 1e2 * (1 + 1e-12));
            }
        }
        std::vector<double> noise(4);
        fill_normal(std::span<double>(noise), rng);
        const auto t = log_terms_with_noise<double>(prior, w, noise);
        EXPECT_TRUE(std::isfinite(t.log_r) && std::isfinite(t.log_p_z) && std::isfinite(t.log_p_w_given_z));
    }
}

TEST(VaeNetworks, ShapesAndDimensionChecks) {
    Rng rng(12);
    const auto prior = init_vae<float>(VAEConfig{}, "shared", rng);
    std::vector<float> w(27, 0.1f);
    const auto e = encode<float>(prior, w);
    ASSERT_EQ(e.mu.size(), 4u);
    const auto d = decode<float>(prior, e.mu);
    ASSERT_EQ(d.mu.size(), 27u);
    for (float v : d.mu) EXPECT_TRUE(std::isfinite(v));
    const std::vector<float> zero(4, 0.0f);
    EXPECT_EQ(decode<float>(prior, zero).mu, decode<float>(prior, zero).mu);
    EXPECT_THROW(encode<float>(prior, std::vector<float>(26)), std::invalid_argument);
    EXPECT_THROW(decode<float>(prior, std::vector<float>(5)), std::invalid_argument);
}

TEST(VaeNetworks, ConfigValidation) {
    VAEConfig c;
    c.latent_dim = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = VAEConfig{};
    c.encoder_hidden = {2};
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(VaeNetworks, BackwardPassesFiniteDifferences) {
    for (auto variance : {DecoderVariance::learned_per_element, DecoderVariance::global_scalar}) {
        VAEConfig cfg;
        cfg.encoder_hidden = {6};
        cfg.decoder_hidden = {5, 7};
        cfg.latent_dim = 3;
        cfg.decoder_variance = variance;
        Rng rng(13);
        const auto base = init_vae<double>(cfg, "shared", rng);
        const auto w = normal_tensor<double>({4, 27}, rng);
        const auto z = normal_tensor<double>({4, 3}, rng);
        const auto cm = normal_tensor<double>({4, 27}, rng), cs = normal_tensor<double>({4, 27}, rng);
        const auto em = normal_tensor<double>({4, 3}, rng), es = normal_tensor<double>({4, 3}, rng);
        // Joint set: psi and phi tensors with a linear readout of every head.
        ParamSet<double> joint;
        for (const auto& e : base.psi) joint.add(e.name, e.value);
        for (const auto& e : base.phi) joint.add(e.name, e.value);
        const LossWithGrad fn = [&](const ParamSet<double>& p, ParamSet<double>* grad) {
            VAEPrior<double> v = base;
            for (auto& e : v.psi) e.value = p.at(e.name);
            for (auto& e : v.phi) e.value = p.at(e.name);
            MlpTape<double> et, dt;
            const auto enc = encode_batch(v, w, &et);
            const auto dec = decode_batch(v, z, &dt);
            double f = 0;
            for (std::size_t i = 0; i < enc.mu.size(); ++i) f += em[i] * enc.mu[i] + es[i] * enc.log_sigma[i];
            for (std::size_t i = 0; i < dec.mu.size(); ++i) f += cm[i] * dec.mu[i] + cs[i] * dec.log_sigma[i];
            if (grad) {
                ParamSet<double> gpsi = v.psi.like(), gphi = v.phi.like();
                encode_backward<double>(v, et, em, es, &gpsi, nullptr);
                decode_backward<double>(v, dt, cm, cs, &gphi, nullptr);
                *grad = p.like();
                for (const auto& e : gpsi) grad->at(e.name) = e.value;
                for (const auto& e : gphi) grad->at(e.name) = e.value;
            }
            return f;
        };
        GradCheckOptions opts;
        opts.max_coords = 300;
        opts.epsilon = 1e-5;
        const auto r = finite_diff_check(fn, joint, opts);
        EXPECT_TRUE(r.ok) << r.message;
        EXPECT_LE(r.max_rel_error, 1e-6) << r.worst_param << "[" << r.worst_index << "]";
    }
}

TEST(TrainVae, DegenerateDatasetIsReconstructed) {
    Rng krng(21);
    KernelSlice k;
    fill_normal(std::span<float>(k.values), krng);
    for (auto& v : k.values) v *= 0.3f;
    KernelGroup g{kSharedGroup, std::vector<KernelSlice>(512, k)};
    Rng rng(22);
    const auto r = train_vae(g, small_config(60), rng);
    Rng srng(23);
    const auto samples = sample_kernels(r.prior, 64, srng);
    std::array<double, 27> mean{};
    for (const auto& s : samples)
        for (int j = 0; j < 27; ++j) mean[j] += s.values[j] / 64.0;
    for (int j = 0; j < 27; ++j) EXPECT_LE(std::abs(mean[j] - k.values[j]), 0.1) << j;
}

TEST(TrainVae, BoundImprovesAndSamplesMatchDataSpread) {
    const auto g = template_group(1500, 31);
    Rng rng(32);
    const auto r = train_vae(g, small_config(40), rng);
    ASSERT_EQ(r.epoch_bounds.size(), 40u);
    EXPECT_GT(r.epoch_bounds.back(), r.epoch_bounds.front());
    for (double b : r.epoch_bounds) EXPECT_TRUE(std::isfinite(b));

    Rng srng(33);
    const auto samples = sample_kernels(r.prior, 2000, srng);
    const auto data_std = per_element_std(g.slices);
    const auto sample_std = per_element_std(samples);
    for (int j = 0; j < 27; ++j) {
        EXPECT_LE(sample_std[j], 3.0 * data_std[j]) << j;
        EXPECT_GE(sample_std[j], data_std[j] / 3.0) << j;
    }
}

TEST(TrainVae, SeededRunsAreIdentical) {
    const auto g = template_group(200, 41);
    Rng a(42), b(42);
    const auto ra = train_vae(g, small_config(3), a);
    const auto rb = train_vae(g, small_config(3), b);
    EXPECT_EQ(ra.prior.psi, rb.prior.psi);
    EXPECT_EQ(ra.prior.phi, rb.prior.phi);
    EXPECT_EQ(ra.epoch_bounds, rb.epoch_bounds);
}

TEST(TrainVae, SmallGroupsClampTheBatchAndEmptyGroupsFail) {
    const auto g = template_group(10, 51);
    Rng rng(52);
    auto cfg = small_config(2);
    cfg.batch_size = 128;
    EXPECT_NO_THROW(train_vae(g, cfg, rng));
    EXPECT_THROW(train_vae(KernelGroup{kSharedGroup, {}}, cfg, rng), std::invalid_argument);
}

TEST(SampleKernels, SeededAndFinite) {
    Rng rng(61);
    const auto prior = init_vae<float>(VAEConfig{}, "enc0.conv0", rng);
    Rng a(62), b(62);
    const auto sa = sample_kernels(prior, 64, a);
    const auto sb = sample_kernels(prior, 64, b);
    ASSERT_EQ(sa.size(), 64u);
    for (std::size_t i = 0; i < sa.size(); ++i) {
        EXPECT_EQ(sa[i].values, sb[i].values);
        for (float v : sa[i].values) EXPECT_TRUE(std::isfinite(v));
        EXPECT_EQ(sa[i].layer_name, "enc0.conv0");
    }
}

TEST(PriorBank, RoundTripAndLookup) {
    Rng rng(71);
    PriorBank<float> bank{GroupingMode::per_layer, {}};
    auto cfg = small_config(1);
    bank.priors.push_back(init_vae<float>(cfg, "enc0.conv0", rng));
    cfg.decoder_variance = DecoderVariance::global_scalar;
    cfg.latent_dim = 2;
    bank.priors.push_back(init_vae<float>(cfg, "enc0.conv1", rng));
    const auto path = std::filesystem::temp_directory_path() / "dwp_bank.bin";
    write_prior_bank(bank, path);
    const auto back = read_prior_bank(path);
    EXPECT_EQ(back.mode, GroupingMode::per_layer);
    ASSERT_EQ(back.priors.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(back.priors[i].psi, bank.priors[i].psi);
        EXPECT_EQ(back.priors[i].phi, bank.priors[i].phi);
        EXPECT_EQ(back.priors[i].config, bank.priors[i].config);
        EXPECT_EQ(back.priors[i].group_key, bank.priors[i].group_key);
    }
    EXPECT_EQ(back.index_for_layer("enc0.conv1"), 1u);
    EXPECT_THROW(back.for_layer("dec0.up"), std::out_of_range);

    PriorBank<float> shared{GroupingMode::shared, {init_vae<float>(VAEConfig{}, kSharedGroup, rng)}};
    EXPECT_EQ(&shared.for_layer("anything"), &shared.priors[0]);
}

TEST(PriorBank, SidecarConfigMustMatchTensors) {
    Rng rng(72);
    PriorBank<float> bank{GroupingMode::shared, {init_vae<float>(small_config(1), kSharedGroup, rng)}};
    const auto path = std::filesystem::temp_directory_path() / "dwp_bank_bad.bin";
    write_prior_bank(bank, path);
    const auto sidecar = path.string() + ".json";
    nlohmann::json j;
    std::ifstream(sidecar) >> j;
    j["priors"][0]["config"]["latent_dim"] = 5;
    std::ofstream(sidecar) << j.dump();
    EXPECT_ANY_THROW(read_prior_bank(path));
}
