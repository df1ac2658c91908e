#include "dwp/vi.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dwp/checkpoint.hpp"
#include "dwp/harvest.hpp"
#include "dwp/loss.hpp"
#include "dwp/optim.hpp"

namespace dwp {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;

template <typename T>
void scale_into(ParamSet<T>& g, T s) {
    for (auto& e : g) {
        for (auto& v : e.value.values()) v *= s;
    }
}

// d/dw of an objective at w_hat = mu + sigma * noise, routed to mu and log_sigma.
template <typename T>
void chain_to_theta(const VariationalPosterior<T>& q, const ParamSet<T>& noise, const ParamSet<T>& g_w, VIGrads<T>& g) {
    for (std::size_t t = 0; t < q.mu.size(); ++t) {
        const auto& name = q.mu.entry(t).name;
        const auto& gw = g_w.at(name);
        const auto& eps = noise.at(name);
        const auto& ls = q.log_sigma.at(name);
        auto& gm = g.mu.at(name);
        auto& gl = g.log_sigma.at(name);
        for (std::size_t i = 0; i < gw.size(); ++i) {
            gm[i] += gw[i];
            gl[i] += gw[i] * std::exp(ls[i]) * eps[i];
        }
    }
}

}  // namespace

template <typename T>
void VariationalPosterior<T>::validate() const {
    if (!congruent(mu, log_sigma)) throw std::invalid_argument("VariationalPosterior: mu and log_sigma are not congruent");
    for (const auto& e : log_sigma) require_finite(e.value, "log_sigma of " + e.name);
}

template <typename T>
VariationalPosterior<T> init_posterior(const UNetConfig& cfg, Rng& rng) {
    return posterior_around(build_unet<T>(cfg, rng), static_cast<T>(kInitLogSigma));
}

template <typename T>
VariationalPosterior<T> posterior_around(const ParamSet<T>& mu, T log_sigma) {
    return {mu, mu.like(log_sigma)};
}

template <typename T>
WeightSample<T> sample_weights_with_noise(const VariationalPosterior<T>& q, const ParamSet<T>& noise) {
    if (!congruent(q.mu, noise)) throw std::invalid_argument("sample_weights: noise is not congruent to the posterior");
    WeightSample<T> s{q.mu, noise};
    for (std::size_t t = 0; t < q.mu.size(); ++t) {
        auto& w = s.w_hat.entry(t).value;
        const auto& ls = q.log_sigma.entry(t).value;
        const auto& eps = noise.entry(t).value;
        for (std::size_t i = 0; i < w.size(); ++i) w[i] += std::exp(ls[i]) * eps[i];
    }
    return s;
}

template <typename T>
WeightSample<T> sample_weights(const VariationalPosterior<T>& q, Rng& rng) {
    ParamSet<T> noise;
    for (const auto& e : q.mu) noise.add(e.name, normal_tensor<T>(e.value.shape(), rng));
    return sample_weights_with_noise(q, noise);
}

const char* to_string(PriorMode m) { return m == PriorMode::dwp ? "dwp" : "std_normal"; }

PriorMode parse_prior_mode(const std::string& s) {
    if (s == "dwp") return PriorMode::dwp;
    if (s == "std_normal") return PriorMode::std_normal;
    throw std::invalid_argument("unknown prior_mode '" + s + "' (expected dwp|std_normal)");
}

const char* to_string(LikelihoodScale s) {
    return s == LikelihoodScale::dataset_size ? "dataset_size" : "dataset_voxels";
}

LikelihoodScale parse_likelihood_scale(const std::string& s) {
    if (s == "dataset_size") return LikelihoodScale::dataset_size;
    if (s == "dataset_voxels") return LikelihoodScale::dataset_voxels;
    throw std::invalid_argument("unknown likelihood_scale '" + s + "' (expected dataset_size|dataset_voxels)");
}

void VITrainConfig::validate() const {
    if (epochs < 0) throw std::invalid_argument("VITrainConfig: epochs must be >= 0");
    if (mc_samples < 1) throw std::invalid_argument("VITrainConfig: mc_samples must be >= 1");
    if (!(lr_theta >= 0.0) || !(lr_psi >= 0.0)) throw std::invalid_argument("VITrainConfig: learning rates must be >= 0");
    if (!(lambda_dice >= 0.0)) throw std::invalid_argument("VITrainConfig: lambda_dice must be >= 0");
}

template <typename T, typename P>
SliceLayout slice_layout(const ParamSet<T>& params, const PriorBank<P>& bank) {
    SliceLayout layout;
    layout.rows_per_prior.assign(bank.priors.size(), 0);
    for (const auto& e : params) {
        if (!is_kernel_tensor(e.value)) continue;
        const std::string layer = layer_of(e.name);
        std::size_t idx = 0;
        try {
            idx = bank.index_for_layer(layer);
        } catch (const std::out_of_range&) {
            throw std::invalid_argument("conv layer '" + layer + "' has no prior in the " + to_string(bank.mode) + " bank");
        }
        const std::size_t rows = e.value.dim(0) * e.value.dim(1);
        layout.entries.push_back({e.name, idx, layout.rows_per_prior[idx], rows});
        layout.rows_per_prior[idx] += rows;
    }
    return layout;
}

template <typename T>
LatentNoise<T> draw_latent_noise(const SliceLayout& layout, const PriorBank<T>& bank, Rng& rng) {
    LatentNoise<T> out;
    for (std::size_t j = 0; j < bank.priors.size(); ++j) {
        out.per_prior.push_back(
            normal_tensor<T>({layout.rows_per_prior[j], static_cast<std::size_t>(bank.priors[j].config.latent_dim)}, rng));
    }
    return out;
}

template <typename T>
VIGrads<T> zero_grads(const VariationalPosterior<T>& q, const PriorBank<T>& bank, PriorMode mode) {
    VIGrads<T> g{q.mu.like(), q.log_sigma.like(), {}};
    if (mode == PriorMode::dwp) {
        for (const auto& p : bank.priors) g.psi.push_back(p.psi.like());
    }
    return g;
}

namespace {

template <typename T>
void check_noise(const SliceLayout& layout, const PriorBank<T>& bank, const LatentNoise<T>& zeta) {
    if (zeta.per_prior.size() != bank.priors.size()) throw std::invalid_argument("latent noise: one tensor per prior expected");
    for (std::size_t j = 0; j < bank.priors.size(); ++j) {
        const Shape want{layout.rows_per_prior[j], static_cast<std::size_t>(bank.priors[j].config.latent_dim)};
        if (zeta.per_prior[j].shape() != want) {
            throw std::invalid_argument("latent noise for prior '" + bank.priors[j].group_key + "' has shape " +
                                        shape_string(zeta.per_prior[j].shape()) + ", expected " + shape_string(want));
        }
    }
}

// Whether a tensor is scored by the kernel prior (as opposed to the standard normal).
template <typename T>
bool uses_kernel_prior(PriorMode mode, const Tensor<T>& t) {
    return mode == PriorMode::dwp && is_kernel_tensor(t);
}

}  // namespace

template <typename T>
BoundBreakdown<T> prior_bound_fixed(const VariationalPosterior<T>& q, const WeightSample<T>& s,
                                    const PriorBank<T>& bank, PriorMode mode, const LatentNoise<T>& zeta,
                                    VIGrads<T>* grads) {
    const T c = static_cast<T>(kHalfLog2Pi);
    BoundBreakdown<T> out;
    ParamSet<T> g_w;
    if (grads) g_w = s.w_hat.like();

    for (std::size_t t = 0; t < q.mu.size(); ++t) {
        const auto& name = q.mu.entry(t).name;
        const auto& mu = q.mu.entry(t).value;
        const auto& ls = q.log_sigma.at(name);
        const auto& w = s.w_hat.at(name);
        const bool kernel_prior = uses_kernel_prior(mode, w);
        T* gw = grads ? g_w.at(name).data() : nullptr;
        T* gm = grads ? grads->mu.at(name).data() : nullptr;
        T* gl = grads ? grads->log_sigma.at(name).data() : nullptr;
        double nlq = 0.0, lstd = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const T inv_s = std::exp(-ls[i]);
            const T e = (w[i] - mu[i]) * inv_s;
            nlq += T(0.5) * e * e + ls[i] + c;
            if (!kernel_prior) lstd += T(-0.5) * w[i] * w[i] - c;
            if (grads) {
                gw[i] += e * inv_s - (kernel_prior ? T(0) : w[i]);
                gm[i] -= e * inv_s;
                gl[i] += T(1) - e * e;
            }
        }
        out.neg_log_q += static_cast<T>(nlq);
        out.log_std += static_cast<T>(lstd);
    }

    if (mode == PriorMode::dwp) {
        const SliceLayout layout = slice_layout(q.mu, bank);
        check_noise(layout, bank, zeta);
        if (grads && grads->psi.size() != bank.priors.size()) throw std::invalid_argument("VIGrads: psi count mismatch");
        for (std::size_t j = 0; j < bank.priors.size(); ++j) {
            const std::size_t rows = layout.rows_per_prior[j];
            if (rows == 0) continue;
            const auto& prior = bank.priors[j];
            const std::size_t d = static_cast<std::size_t>(prior.config.latent_dim);
            Tensor<T> x({rows, kSliceSize});
            for (const auto& e : layout.entries) {
                if (e.prior != j) continue;
                const auto& w = s.w_hat.at(e.tensor);
                std::copy(w.data(), w.data() + w.size(), x.data() + e.first_row * kSliceSize);
            }
            MlpTape<T> etape, dtape;
            const auto enc = encode_batch(prior, x, &etape);
            const auto& zeta_j = zeta.per_prior[j];
            Tensor<T> z({rows, d});
            double nlr = 0.0, lpz = 0.0, lpw = 0.0;
            for (std::size_t i = 0; i < z.size(); ++i) {
                const T sz = std::exp(enc.log_sigma[i]);
                z[i] = enc.mu[i] + sz * zeta_j[i];
                const T e = (z[i] - enc.mu[i]) / sz;
                nlr += T(0.5) * e * e + enc.log_sigma[i] + c;
                lpz += T(-0.5) * z[i] * z[i] - c;
            }
            const auto dec = decode_batch(prior, z, &dtape);
            Tensor<T> g_muw, g_lsw;
            if (grads) {
                g_muw = Tensor<T>(x.shape());
                g_lsw = Tensor<T>(x.shape());
            }
            for (std::size_t i = 0; i < x.size(); ++i) {
                const T inv_s = std::exp(-dec.log_sigma[i]);
                const T e = (x[i] - dec.mu[i]) * inv_s;
                lpw += T(-0.5) * e * e - dec.log_sigma[i] - c;
                if (grads) {
                    g_muw[i] = e * inv_s;
                    g_lsw[i] = e * e - T(1);
                }
            }
            out.neg_log_r += static_cast<T>(nlr);
            out.log_p_z += static_cast<T>(lpz);
            out.log_p_w += static_cast<T>(lpw);
            if (!grads) continue;
            // Direct dependence of log p(w|z) on w is the negative of its dependence on mu_w.
            Tensor<T> g_x(x.shape());
            for (std::size_t i = 0; i < x.size(); ++i) g_x[i] = -g_muw[i];
            Tensor<T> g_z({rows, d});
            decode_backward(prior, dtape, g_muw, g_lsw, static_cast<ParamSet<T>*>(nullptr), &g_z);
            Tensor<T> g_muz({rows, d}), g_lsz({rows, d});
            for (std::size_t i = 0; i < z.size(); ++i) {
                const T gz = g_z[i] - z[i];
                g_muz[i] = gz;
                g_lsz[i] = gz * std::exp(enc.log_sigma[i]) * zeta_j[i] + T(1);
            }
            encode_backward(prior, etape, g_muz, g_lsz, &grads->psi[j], &g_x);
            for (const auto& e : layout.entries) {
                if (e.prior != j) continue;
                auto& gw = g_w.at(e.tensor);
                const T* src = g_x.data() + e.first_row * kSliceSize;
                for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += src[i];
            }
        }
    }

    if (grads) chain_to_theta(q, s.noise, g_w, *grads);
    return out;
}

template <typename T>
BoundBreakdown<T> prior_bound_per_slice(const VariationalPosterior<T>& q, const WeightSample<T>& s,
                                        const PriorBank<T>& bank, PriorMode mode, const LatentNoise<T>& zeta) {
    BoundBreakdown<T> out;
    for (std::size_t t = 0; t < q.mu.size(); ++t) {
        const auto& name = q.mu.entry(t).name;
        const auto& mu = q.mu.entry(t).value;
        const auto& ls = q.log_sigma.at(name);
        const auto& w = s.w_hat.at(name);
        const bool kernel_prior = uses_kernel_prior(mode, w);
        for (std::size_t i = 0; i < w.size(); ++i) {
            const std::span<const T> wi(&w[i], 1), mi(&mu[i], 1), li(&ls[i], 1);
            out.neg_log_q -= gaussian_log_pdf<T>(wi, mi, li);
            if (!kernel_prior) {
                const T zero = T(0);
                out.log_std += gaussian_log_pdf<T>(wi, std::span<const T>(&zero, 1), std::span<const T>(&zero, 1));
            }
        }
    }
    if (mode != PriorMode::dwp) return out;
    const SliceLayout layout = slice_layout(q.mu, bank);
    check_noise(layout, bank, zeta);
    for (const auto& e : layout.entries) {
        const auto& prior = bank.priors[e.prior];
        const auto& w = s.w_hat.at(e.tensor);
        const std::size_t d = static_cast<std::size_t>(prior.config.latent_dim);
        for (std::size_t r = 0; r < e.rows; ++r) {
            const std::span<const T> slice(w.data() + r * kSliceSize, kSliceSize);
            const std::span<const T> noise(zeta.per_prior[e.prior].data() + (e.first_row + r) * d, d);
            const auto lt = log_terms_with_noise(prior, slice, noise);
            out.neg_log_r -= lt.log_r;
            out.log_p_z += lt.log_p_z;
            out.log_p_w += lt.log_p_w_given_z;
        }
    }
    return out;
}

template <typename T>
T prior_bound_term(const VariationalPosterior<T>& q, const WeightSample<T>& s, const PriorBank<T>& bank,
                   PriorMode mode, Rng& rng) {
    LatentNoise<T> zeta;
    if (mode == PriorMode::dwp) zeta = draw_latent_noise(slice_layout(q.mu, bank), bank, rng);
    return prior_bound_fixed(q, s, bank, mode, zeta).total();
}

template <typename T>
ObjectiveNoise<T> draw_objective_noise(const VariationalPosterior<T>& q, const PriorBank<T>& bank, PriorMode mode,
                                       Rng& rng) {
    ObjectiveNoise<T> n;
    for (const auto& e : q.mu) n.weights.add(e.name, normal_tensor<T>(e.value.shape(), rng));
    if (mode == PriorMode::dwp) n.latent = draw_latent_noise(slice_layout(q.mu, bank), bank, rng);
    return n;
}

template <typename T>
ObjectiveValue<T> vi_objective(const VariationalPosterior<T>& q, const PriorBank<T>& bank, PriorMode mode,
                               const DataTerm<T>& data, const ObjectiveNoise<T>& noise, VIGrads<T>* grads) {
    const WeightSample<T> s = sample_weights_with_noise(q, noise.weights);
    ObjectiveValue<T> out;
    if (grads) {
        ParamSet<T> g_w = s.w_hat.like();
        out.data = data(s.w_hat, &g_w);
        chain_to_theta(q, s.noise, g_w, *grads);
    } else {
        out.data = data(s.w_hat, nullptr);
    }
    out.prior = prior_bound_fixed(q, s, bank, mode, noise.latent, grads);
    return out;
}

DWPTrainResult train_dwp(const std::vector<const Volume*>& train, const UNetConfig& cfg, const PriorBank<float>& priors,
                         const VITrainConfig& vcfg, Rng& rng, const VariationalPosterior<float>* init) {
    vcfg.validate();
    if (train.empty()) throw std::invalid_argument("train_dwp: empty training set");
    if (vcfg.prior_mode == PriorMode::dwp && priors.priors.empty()) throw std::invalid_argument("train_dwp: no priors");

    DWPTrainResult result{init ? *init : init_posterior<float>(cfg, rng), priors, {}, {}, {}};
    auto& q = result.posterior;
    auto& bank = result.priors;
    check_unet_params(cfg, q.mu);
    q.validate();
    if (vcfg.prior_mode == PriorMode::dwp) slice_layout(q.mu, bank);

    AdamState<float> adam_mu(AdamOptions{vcfg.lr_theta}), adam_ls(AdamOptions{vcfg.lr_theta});
    std::vector<AdamState<float>> adam_psi(bank.priors.size(), AdamState<float>(AdamOptions{vcfg.lr_psi}));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    const double n = static_cast<double>(train.size());
    const float inv_k = 1.0f / static_cast<float>(vcfg.mc_samples);
    std::size_t step = 0;

    for (int epoch = 1; epoch <= vcfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double sum_obj = 0.0, sum_data = 0.0, sum_prior = 0.0;
        for (std::size_t idx : order) {
            ++step;
            const Volume& v = *train[idx];
            const Tensor<float> input = volume_input<float>(v);
            const Tensor<float> mask = volume_mask<float>(v);
            const double scale_d =
                vcfg.likelihood_scale == LikelihoodScale::dataset_voxels ? n * static_cast<double>(mask.size()) : n;
            const float scale = static_cast<float>(scale_d);
            const DataTerm<float> data = [&](const ParamSet<float>& w, ParamSet<float>* g_w) {
                UNetTape<float> tape;
                const Tensor<float> logits = unet_forward(cfg, w, input, &tape);
                Tensor<float> glogits(logits.shape());
                const auto loss = bce_dice_loss(logits, mask, static_cast<float>(vcfg.lambda_dice), g_w ? &glogits : nullptr);
                if (g_w) {
                    for (auto& g : glogits.values()) g *= -scale;
                    unet_backward(cfg, w, tape, glogits, *g_w);
                }
                return static_cast<float>(-scale_d * loss.total);
            };

            VIGrads<float> grads = zero_grads(q, bank, vcfg.prior_mode);
            double obj = 0.0, d_term = 0.0, p_term = 0.0;
            for (int k = 0; k < vcfg.mc_samples; ++k) {
                const auto noise = draw_objective_noise(q, bank, vcfg.prior_mode, rng);
                const auto val = vi_objective(q, bank, vcfg.prior_mode, data, noise, &grads);
                const double total = static_cast<double>(val.data) + static_cast<double>(val.prior.total());
                if (!std::isfinite(total)) {
                    std::ostringstream msg;
                    msg << "train_dwp: non-finite objective at step " << step << " (epoch " << epoch << ", volume '"
                        << v.id << "'): data=" << val.data << " -log q=" << val.prior.neg_log_q
                        << " -log r=" << val.prior.neg_log_r << " log p(z)=" << val.prior.log_p_z
                        << " log p(w|z)=" << val.prior.log_p_w << " log N(w)=" << val.prior.log_std;
                    throw NonFiniteError(msg.str());
                }
                obj += total;
                d_term += val.data;
                p_term += val.prior.total();
            }
            // Adam minimizes, so hand it the negated ascent direction.
            scale_into(grads.mu, -inv_k);
            scale_into(grads.log_sigma, -inv_k);
            adam_step(q.mu, grads.mu, adam_mu);
            adam_step(q.log_sigma, grads.log_sigma, adam_ls);
            for (std::size_t j = 0; j < grads.psi.size(); ++j) {
                scale_into(grads.psi[j], -inv_k);
                adam_step(bank.priors[j].psi, grads.psi[j], adam_psi[j]);
            }
            sum_obj += obj / vcfg.mc_samples;
            sum_data += d_term / vcfg.mc_samples;
            sum_prior += p_term / vcfg.mc_samples;
        }
        result.epoch_objective.push_back(sum_obj / n);
        result.epoch_data.push_back(sum_data / n);
        result.epoch_prior.push_back(sum_prior / n);
    }
    return result;
}

const char* to_string(PredictMode m) { return m == PredictMode::mean ? "mean" : "mc_average"; }

PredictMode parse_predict_mode(const std::string& s) {
    if (s == "mean") return PredictMode::mean;
    if (s == "mc_average") return PredictMode::mc_average;
    throw std::invalid_argument("unknown predict mode '" + s + "' (expected mean|mc_average)");
}

std::vector<float> predict(const UNetConfig& cfg, const VariationalPosterior<float>& q, const Volume& v,
                           PredictMode mode, int samples, Rng* rng) {
    if (mode == PredictMode::mean) return predict_probabilities(cfg, q.mu, v);
    if (samples < 1) throw std::invalid_argument("predict: mc_average needs at least one sample");
    if (!rng) throw std::invalid_argument("predict: mc_average needs a random stream");
    std::vector<double> acc(v.intensities.size(), 0.0);
    for (int k = 0; k < samples; ++k) {
        const auto s = sample_weights(q, *rng);
        const auto p = predict_probabilities(cfg, s.w_hat, v);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p[i];
    }
    std::vector<float> out(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / samples);
    return out;
}

void write_posterior(const VariationalPosterior<float>& q, const std::filesystem::path& dir,
                     const nlohmann::json& manifest) {
    q.validate();
    write_checkpoint(q.mu, dir / "posterior_mu.ckpt");
    write_checkpoint(q.log_sigma, dir / "posterior_log_sigma.ckpt");
    std::ofstream out(dir / "manifest.json");
    if (!out) throw FormatError(FormatErrc::io_error, "cannot write '" + (dir / "manifest.json").string() + "'");
    out << manifest.dump(2) << "\n";
}

VariationalPosterior<float> read_posterior(const std::filesystem::path& dir) {
    VariationalPosterior<float> q{read_checkpoint(dir / "posterior_mu.ckpt"), read_checkpoint(dir / "posterior_log_sigma.ckpt")};
    try {
        q.validate();
    } catch (const std::exception& e) {
        throw FormatError(FormatErrc::bad_payload, "posterior '" + dir.string() + "': " + e.what());
    }
    return q;
}

#define DWP_INSTANTIATE_VI(T)                                                                                         \
    template struct VariationalPosterior<T>;                                                                          \
    template VariationalPosterior<T> init_posterior(const UNetConfig&, Rng&);                                         \
    template VariationalPosterior<T> posterior_around(const ParamSet<T>&, T);                                         \
    template WeightSample<T> sample_weights(const VariationalPosterior<T>&, Rng&);                                    \
    template WeightSample<T> sample_weights_with_noise(const VariationalPosterior<T>&, const ParamSet<T>&);           \
    template SliceLayout slice_layout(const ParamSet<T>&, const PriorBank<T>&);                                       \
    template LatentNoise<T> draw_latent_noise(const SliceLayout&, const PriorBank<T>&, Rng&);                         \
    template VIGrads<T> zero_grads(const VariationalPosterior<T>&, const PriorBank<T>&, PriorMode);                   \
    template BoundBreakdown<T> prior_bound_fixed(const VariationalPosterior<T>&, const WeightSample<T>&,              \
                                                 const PriorBank<T>&, PriorMode, const LatentNoise<T>&, VIGrads<T>*); \
    template BoundBreakdown<T> prior_bound_per_slice(const VariationalPosterior<T>&, const WeightSample<T>&,          \
                                                     const PriorBank<T>&, PriorMode, const LatentNoise<T>&);          \
    template T prior_bound_term(const VariationalPosterior<T>&, const WeightSample<T>&, const PriorBank<T>&,          \
                                PriorMode, Rng&);                                                                     \
    template ObjectiveNoise<T> draw_objective_noise(const VariationalPosterior<T>&, const PriorBank<T>&, PriorMode,   \
                                                    Rng&);                                                            \
    template ObjectiveValue<T> vi_objective(const VariationalPosterior<T>&, const PriorBank<T>&, PriorMode,           \
                                            const DataTerm<T>&, const ObjectiveNoise<T>&, VIGrads<T>*);

DWP_INSTANTIATE_VI(float)
DWP_INSTANTIATE_VI(double)

}  // namespace dwp
