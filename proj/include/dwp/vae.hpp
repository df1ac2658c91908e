#pragma once

#include <cmath>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dwp/harvest.hpp"
#include "dwp/random.hpp"
#include "dwp/tensor.hpp"

namespace dwp {

inline constexpr std::size_t kSliceSize = 27;
inline const double kMinLogSigma = std::log(1e-4);
inline const double kMaxLogSigma = std::log(1e2);

/// Decoder log-scale: a learned vector over the 27 kernel elements, or one learned scalar. Neither
/// depends on z.
enum class DecoderVariance { learned_per_element, global_scalar };
const char* to_string(DecoderVariance v);
DecoderVariance parse_decoder_variance(const std::string& s);

struct VAEConfig {
    int latent_dim = 4;
    std::vector<int> encoder_hidden{64, 64};
    std::vector<int> decoder_hidden{64, 64};
    DecoderVariance decoder_variance = DecoderVariance::learned_per_element;
    int epochs = 50;
    double lr = 1e-3;
    int batch_size = 128;

    void validate() const;
    bool operator==(const VAEConfig&) const = default;
};

/// Gaussian encoder r_psi(z|w) and Gaussian decoder p_phi(w|z) over flattened 3x3x3 slices, with a
/// standard normal latent prior. Encoder tensors live in `psi` ("enc.*"), decoder in `phi` ("dec.*").
template <typename T>
struct VAEPrior {
    ParamSet<T> psi;
    ParamSet<T> phi;
    VAEConfig config;
    std::string group_key;
};

template <typename T>
VAEPrior<T> init_vae(const VAEConfig& cfg, std::string group_key, Rng& rng);

template <typename To, typename From>
VAEPrior<To> prior_cast(const VAEPrior<From>& p) {
    return {paramset_cast<To>(p.psi), paramset_cast<To>(p.phi), p.config, p.group_key};
}

/// Row-batched Gaussian head outputs; log_sigma is already clamped to [ln 1e-4, ln 1e2].
template <typename T>
struct GaussianBatch {
    Tensor<T> mu;         // [B, dim]
    Tensor<T> log_sigma;  // [B, dim]
};

/// Intermediate activations of one network pass, for backward.
template <typename T>
struct MlpTape {
    std::vector<Tensor<T>> layer_inputs;  // input of each hidden layer and of the heads
    Tensor<T> raw_log_sigma;              // pre-clamp head output
};

template <typename T>
GaussianBatch<T> encode_batch(const VAEPrior<T>& prior, const Tensor<T>& w, MlpTape<T>* tape = nullptr);

template <typename T>
GaussianBatch<T> decode_batch(const VAEPrior<T>& prior, const Tensor<T>& z, MlpTape<T>* tape = nullptr);

/// Backward through encode_batch. g_mu/g_log_sigma are gradients w.r.t. the clamped outputs;
/// results accumulate into the non-null outputs.
template <typename T>
void encode_backward(const VAEPrior<T>& prior, const MlpTape<T>& tape, const Tensor<T>& g_mu,
                     const Tensor<T>& g_log_sigma, ParamSet<T>* g_psi, Tensor<T>* g_w);

template <typename T>
void decode_backward(const VAEPrior<T>& prior, const MlpTape<T>& tape, const Tensor<T>& g_mu,
                     const Tensor<T>& g_log_sigma, ParamSet<T>* g_phi, Tensor<T>* g_z);

template <typename T>
struct GaussianVec {
    std::vector<T> mu;
    std::vector<T> sigma;
};

/// Single-slice conveniences. Throw std::invalid_argument on dimension mismatch.
template <typename T>
GaussianVec<T> encode(const VAEPrior<T>& prior, std::span<const T> w);
template <typename T>
GaussianVec<T> decode(const VAEPrior<T>& prior, std::span<const T> z);

/// Sum over elements of the diagonal Gaussian log-density.
template <typename T>
T gaussian_log_pdf(std::span<const T> x, std::span<const T> mu, std::span<const T> log_sigma);

template <typename T>
struct LogTerms {
    std::vector<T> z_hat;
    T log_r;             // log r_psi(z_hat | w_hat)
    T log_p_z;           // log N(z_hat; 0, I)
    T log_p_w_given_z;   // log p_phi(w_hat | z_hat)
};

/// z_hat = mu_z + sigma_z * noise with (mu_z, sigma_z) = encode(w_hat), then the three log-densities.
template <typename T>
LogTerms<T> log_terms_with_noise(const VAEPrior<T>& prior, std::span<const T> w_hat, std::span<const T> noise);

template <typename T>
LogTerms<T> log_terms(const VAEPrior<T>& prior, std::span<const T> w_hat, Rng& rng);

struct VAETrainResult {
    VAEPrior<float> prior;
    std::vector<double> epoch_bounds;  // mean per-slice evidence lower bound per epoch
};

/// Maximises E_r[log p(w|z)] - KL(r(z|w) || N(0,I)) with Adam over shuffled minibatches.
VAETrainResult train_vae(const KernelGroup& group, const VAEConfig& cfg, Rng& rng);

/// z ~ N(0, I), kernel = mu_w(z).
template <typename T>
std::vector<KernelSlice> sample_kernels(const VAEPrior<T>& prior, std::size_t n, Rng& rng);

/// All priors of one grouping. Shared mode holds a single prior keyed "shared".
template <typename T>
struct PriorBank {
    GroupingMode mode = GroupingMode::shared;
    std::vector<VAEPrior<T>> priors;

    /// Prior responsible for a layer; throws std::out_of_range if it is unmapped.
    const VAEPrior<T>& for_layer(const std::string& layer_name) const;
    std::size_t index_for_layer(const std::string& layer_name) const;
};

/// One CKPT1 file with tensors "<group>/<enc|dec>.*" and a "<path>.json" sidecar carrying the
/// grouping, each group key and its VAEConfig.
void write_prior_bank(const PriorBank<float>& bank, const std::filesystem::path& path);
PriorBank<float> read_prior_bank(const std::filesystem::path& path);

template <typename To, typename From>
PriorBank<To> bank_cast(const PriorBank<From>& b) {
    PriorBank<To> out{b.mode, {}};
    for (const auto& p : b.priors) out.priors.push_back(prior_cast<To>(p));
    return out;
}

}  // namespace dwp
