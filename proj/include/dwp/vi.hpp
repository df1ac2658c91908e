#pragma once

#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "dwp/train.hpp"
#include "dwp/vae.hpp"

namespace dwp {

/// Fully factorized Gaussian over every network scalar: w ~ N(mu, exp(log_sigma)^2).
template <typename T>
struct VariationalPosterior {
    ParamSet<T> mu;
    ParamSet<T> log_sigma;

    /// Congruent maps with finite log-scales.
    void validate() const;
    bool operator==(const VariationalPosterior&) const = default;
};

inline constexpr double kInitLogSigma = -5.0;

/// He-normal means (zero for biases), log_sigma = -5 everywhere.
template <typename T>
VariationalPosterior<T> init_posterior(const UNetConfig& cfg, Rng& rng);

/// Posterior around fixed means with a constant log-scale.
template <typename T>
VariationalPosterior<T> posterior_around(const ParamSet<T>& mu, T log_sigma);

template <typename To, typename From>
VariationalPosterior<To> posterior_cast(const VariationalPosterior<From>& q) {
    return {paramset_cast<To>(q.mu), paramset_cast<To>(q.log_sigma)};
}

template <typename T>
struct WeightSample {
    ParamSet<T> w_hat;
    ParamSet<T> noise;  // standard normal draws, w_hat = mu + exp(log_sigma) * noise
};

template <typename T>
WeightSample<T> sample_weights(const VariationalPosterior<T>& q, Rng& rng);

template <typename T>
WeightSample<T> sample_weights_with_noise(const VariationalPosterior<T>& q, const ParamSet<T>& noise);

enum class PriorMode { dwp, std_normal };
const char* to_string(PriorMode m);
PriorMode parse_prior_mode(const std::string& s);

/// Multiplier on the negated segmentation loss. dataset_size uses N (number of training volumes);
/// dataset_voxels uses N times the voxels per volume, so that the mean per-voxel cross-entropy is
/// promoted to a summed Bernoulli log-likelihood.
enum class LikelihoodScale { dataset_size, dataset_voxels };
const char* to_string(LikelihoodScale s);
LikelihoodScale parse_likelihood_scale(const std::string& s);

struct VITrainConfig {
    int epochs = 150;
    double lr_theta = 1e-3;
    double lr_psi = 1e-3;
    int mc_samples = 1;
    LikelihoodScale likelihood_scale = LikelihoodScale::dataset_voxels;
    PriorMode prior_mode = PriorMode::dwp;
    double lambda_dice = 1.0;

    void validate() const;
    bool operator==(const VITrainConfig&) const = default;
};

/// Where each 3x3x3 kernel tensor's slices sit in the per-prior slice matrices.
struct SliceLayout {
    struct Entry {
        std::string tensor;      // "<layer>.weight"
        std::size_t prior = 0;   // index into PriorBank::priors
        std::size_t first_row = 0;
        std::size_t rows = 0;    // Cout * Cin
    };
    std::vector<Entry> entries;
    std::vector<std::size_t> rows_per_prior;
};

/// Maps every kernel tensor of `params` to its prior. Throws std::invalid_argument naming the
/// first conv layer without a prior.
template <typename T, typename P>
SliceLayout slice_layout(const ParamSet<T>& params, const PriorBank<P>& bank);

/// Latent noise per prior, [rows_per_prior, latent_dim]. Empty in std_normal mode.
template <typename T>
struct LatentNoise {
    std::vector<Tensor<T>> per_prior;
};

template <typename T>
LatentNoise<T> draw_latent_noise(const SliceLayout& layout, const PriorBank<T>& bank, Rng& rng);

/// Components of the prior bound, summed over all scalars/slices.
template <typename T>
struct BoundBreakdown {
    T neg_log_q = 0;    // -log q(w_hat), all scalars
    T neg_log_r = 0;    // -log r(z_hat | w_hat), DWP slices
    T log_p_z = 0;      // log N(z_hat; 0, I), DWP slices
    T log_p_w = 0;      // log p(w_hat | z_hat), DWP slices
    T log_std = 0;      // log N(w; 0, 1) for scalars under the standard-normal prior
    T total() const { return neg_log_q + neg_log_r + log_p_z + log_p_w + log_std; }
};

/// Gradients of an objective w.r.t. the variational parameters and the encoders.
template <typename T>
struct VIGrads {
    ParamSet<T> mu;
    ParamSet<T> log_sigma;
    std::vector<ParamSet<T>> psi;  // per prior in the bank
};

template <typename T>
VIGrads<T> zero_grads(const VariationalPosterior<T>& q, const PriorBank<T>& bank, PriorMode mode);

/// Prior bound for a fixed weight sample and fixed latent noise, batched per prior.
/// If `grads` is non-null the total derivative (noise held fixed) is accumulated into it;
/// decoder parameters receive no gradient.
template <typename T>
BoundBreakdown<T> prior_bound_fixed(const VariationalPosterior<T>& q, const WeightSample<T>& s,
                                    const PriorBank<T>& bank, PriorMode mode, const LatentNoise<T>& zeta,
                                    VIGrads<T>* grads = nullptr);

/// Same value as prior_bound_fixed, evaluated one slice and one scalar at a time.
template <typename T>
BoundBreakdown<T> prior_bound_per_slice(const VariationalPosterior<T>& q, const WeightSample<T>& s,
                                        const PriorBank<T>& bank, PriorMode mode, const LatentNoise<T>& zeta);

/// Draws the latent noise from `rng` and returns the scalar prior bound estimate at w_hat.
template <typename T>
T prior_bound_term(const VariationalPosterior<T>& q, const WeightSample<T>& s, const PriorBank<T>& bank,
                   PriorMode mode, Rng& rng);

/// Log-likelihood estimate of a weight setting; accumulates d/dw into `grad_w` when non-null.
template <typename T>
using DataTerm = std::function<T(const ParamSet<T>& w, ParamSet<T>* grad_w)>;

template <typename T>
struct ObjectiveNoise {
    ParamSet<T> weights;
    LatentNoise<T> latent;
};

template <typename T>
ObjectiveNoise<T> draw_objective_noise(const VariationalPosterior<T>& q, const PriorBank<T>& bank, PriorMode mode,
                                       Rng& rng);

template <typename T>
struct ObjectiveValue {
    T data = 0;
    BoundBreakdown<T> prior;
    T total() const { return data + prior.total(); }
};

/// data(w_hat) + prior bound, with w_hat and z_hat determined by `noise`. Gradients are total
/// derivatives w.r.t. (mu, log_sigma, psi) with the noise held fixed.
template <typename T>
ObjectiveValue<T> vi_objective(const VariationalPosterior<T>& q, const PriorBank<T>& bank, PriorMode mode,
                               const DataTerm<T>& data, const ObjectiveNoise<T>& noise, VIGrads<T>* grads = nullptr);

struct DWPTrainResult {
    VariationalPosterior<float> posterior;
    PriorBank<float> priors;                // encoders after joint training; decoders untouched
    std::vector<double> epoch_objective;    // mean per-step objective per epoch
    std::vector<double> epoch_data;
    std::vector<double> epoch_prior;
};

/// Stochastic variational inference on the target volumes, one volume per step. The data term is
/// -scale * bce_dice_loss(w_hat) with the scale set by vcfg.likelihood_scale. Adam ascends on
/// (mu, log_sigma) with lr_theta and on the encoders with lr_psi. When `init` is null the posterior
/// starts from init_posterior(cfg, rng).
DWPTrainResult train_dwp(const std::vector<const Volume*>& train, const UNetConfig& cfg, const PriorBank<float>& priors,
                         const VITrainConfig& vcfg, Rng& rng, const VariationalPosterior<float>* init = nullptr);

enum class PredictMode { mean, mc_average };
const char* to_string(PredictMode m);
PredictMode parse_predict_mode(const std::string& s);

/// Probability grid for one volume: forward at w = mu, or the mean of sigmoid outputs over
/// `samples` weight draws.
std::vector<float> predict(const UNetConfig& cfg, const VariationalPosterior<float>& q, const Volume& v,
                           PredictMode mode = PredictMode::mean, int samples = 1, Rng* rng = nullptr);

/// <dir>/posterior_mu.ckpt, <dir>/posterior_log_sigma.ckpt and <dir>/manifest.json.
void write_posterior(const VariationalPosterior<float>& q, const std::filesystem::path& dir,
                     const nlohmann::json& manifest);
VariationalPosterior<float> read_posterior(const std::filesystem::path& dir);

}  // namespace dwp
