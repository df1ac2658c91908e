#include "dwp/vae.hpp"

#include <algorithm>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <stdexcept>

#include "dwp/checkpoint.hpp"
#include "dwp/ops.hpp"
#include "dwp/optim.hpp"
#include "dwp/unet.hpp"

namespace dwp {

const char* to_string(DecoderVariance v) {
    return v == DecoderVariance::learned_per_element ? "learned_per_element" : "global_scalar";
}

DecoderVariance parse_decoder_variance(const std::string& s) {
    if (s == "learned_per_element") return DecoderVariance::learned_per_element;
    if (s == "global_scalar") return DecoderVariance::global_scalar;
    throw std::invalid_argument("unknown decoder_variance '" + s + "' (expected learned_per_element|global_scalar)");
}

void VAEConfig::validate() const {
    if (latent_dim < 1) throw std::invalid_argument("VAEConfig: latent_dim must be >= 1");
    for (const auto* widths : {&encoder_hidden, &decoder_hidden}) {
        for (int w : *widths) {
            if (w < latent_dim) {
                throw std::invalid_argument("VAEConfig: hidden width " + std::to_string(w) + " is below latent_dim " +
                                            std::to_string(latent_dim));
            }
        }
    }
    if (epochs < 0) throw std::invalid_argument("VAEConfig: epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("VAEConfig: batch_size must be >= 1");
    if (!(lr >= 0.0)) throw std::invalid_argument("VAEConfig: lr must be >= 0");
}

namespace {

struct NetLayout {
    std::string prefix;
    std::size_t in_dim, out_dim;
    const std::vector<int>* hidden;
    std::size_t free_log_sigma;  // 0: log-scale is a head on the last hidden layer; else a free vector of this size
};

NetLayout encoder_layout(const VAEConfig& c) {
    return {"enc", kSliceSize, static_cast<std::size_t>(c.latent_dim), &c.encoder_hidden, 0};
}

NetLayout decoder_layout(const VAEConfig& c) {
    return {"dec", static_cast<std::size_t>(c.latent_dim), kSliceSize, &c.decoder_hidden,
            c.decoder_variance == DecoderVariance::global_scalar ? std::size_t{1} : kSliceSize};
}

std::string fc(const NetLayout& n, std::size_t i) { return n.prefix + ".fc" + std::to_string(i); }

template <typename T>
void init_net(ParamSet<T>& p, const NetLayout& n, Rng& rng) {
    std::size_t prev = n.in_dim;
    for (std::size_t i = 0; i < n.hidden->size(); ++i) {
        const auto width = static_cast<std::size_t>((*n.hidden)[i]);
        p.add(fc(n, i) + ".weight", normal_tensor<T>({width, prev}, rng, static_cast<T>(std::sqrt(2.0 / prev))));
        p.add(fc(n, i) + ".bias", Tensor<T>({width}));
        prev = width;
    }
    p.add(n.prefix + ".mu.weight", normal_tensor<T>({n.out_dim, prev}, rng, static_cast<T>(std::sqrt(1.0 / prev))));
    p.add(n.prefix + ".mu.bias", Tensor<T>({n.out_dim}));
    if (n.free_log_sigma) {
        p.add(n.prefix + ".log_sigma", Tensor<T>({n.free_log_sigma}));
    } else {
        p.add(n.prefix + ".log_sigma.weight",
              normal_tensor<T>({n.out_dim, prev}, rng, static_cast<T>(0.1 * std::sqrt(1.0 / prev))));
        p.add(n.prefix + ".log_sigma.bias", Tensor<T>({n.out_dim}));
    }
}

template <typename T>
GaussianBatch<T> net_forward(const ParamSet<T>& p, const NetLayout& n, const Tensor<T>& x, MlpTape<T>* tape) {
    if (x.rank() != 2 || x.dim(1) != n.in_dim) {
        throw std::invalid_argument(n.prefix + ": expected input [B," + std::to_string(n.in_dim) + "], got " +
                                    shape_string(x.shape()));
    }
    MlpTape<T> local;
    MlpTape<T>& t = tape ? *tape : local;
    t.layer_inputs.clear();
    Tensor<T> h = x;
    for (std::size_t i = 0; i < n.hidden->size(); ++i) {
        Tensor<T> next = linear(h, p.at(fc(n, i) + ".weight"), p.at(fc(n, i) + ".bias"));
        leaky_relu_inplace(next, static_cast<T>(kLeakySlope));
        t.layer_inputs.push_back(std::move(h));
        h = std::move(next);
    }
    GaussianBatch<T> out;
    out.mu = linear(h, p.at(n.prefix + ".mu.weight"), p.at(n.prefix + ".mu.bias"));
    if (n.free_log_sigma) {
        const auto& ls = p.at(n.prefix + ".log_sigma");
        t.raw_log_sigma = Tensor<T>(out.mu.shape());
        for (std::size_t i = 0; i < t.raw_log_sigma.size(); ++i) t.raw_log_sigma[i] = ls[i % n.free_log_sigma];
    } else {
        t.raw_log_sigma = linear(h, p.at(n.prefix + ".log_sigma.weight"), p.at(n.prefix + ".log_sigma.bias"));
    }
    t.layer_inputs.push_back(std::move(h));
    out.log_sigma = t.raw_log_sigma;
    const T lo = static_cast<T>(kMinLogSigma), hi = static_cast<T>(kMaxLogSigma);
    for (auto& v : out.log_sigma.values()) v = std::clamp(v, lo, hi);
    return out;
}

template <typename T>
void net_backward(const ParamSet<T>& p, const NetLayout& n, const MlpTape<T>& t, const Tensor<T>& g_mu,
                  const Tensor<T>& g_log_sigma, ParamSet<T>* gp, Tensor<T>* gx) {
    const T lo = static_cast<T>(kMinLogSigma), hi = static_cast<T>(kMaxLogSigma);
    Tensor<T> g_raw = g_log_sigma;
    for (std::size_t i = 0; i < g_raw.size(); ++i) {
        const T r = t.raw_log_sigma[i];
        if (r < lo || r > hi) g_raw[i] = T(0);
    }
    const Tensor<T>& head_in = t.layer_inputs.back();
    Tensor<T> gh(head_in.shape());
    auto gptr = [&](const std::string& name) { return gp ? &gp->at(name) : nullptr; };
    linear_backward(head_in, p.at(n.prefix + ".mu.weight"), g_mu, &gh, gptr(n.prefix + ".mu.weight"),
                    gptr(n.prefix + ".mu.bias"));
    if (n.free_log_sigma) {
        if (gp) {
            auto& g = gp->at(n.prefix + ".log_sigma");
            for (std::size_t i = 0; i < g_raw.size(); ++i) g[i % n.free_log_sigma] += g_raw[i];
        }
    } else {
        linear_backward(head_in, p.at(n.prefix + ".log_sigma.weight"), g_raw, &gh, gptr(n.prefix + ".log_sigma.weight"),
                        gptr(n.prefix + ".log_sigma.bias"));
    }
    for (std::size_t i = n.hidden->size(); i-- > 0;) {
        leaky_relu_backward_inplace(t.layer_inputs[i + 1], gh, static_cast<T>(kLeakySlope));
        const bool want_input = i > 0 || gx != nullptr;
        Tensor<T> gprev;
        if (want_input) gprev = Tensor<T>(t.layer_inputs[i].shape());
        linear_backward(t.layer_inputs[i], p.at(fc(n, i) + ".weight"), gh, want_input ? &gprev : nullptr,
                        gptr(fc(n, i) + ".weight"), gptr(fc(n, i) + ".bias"));
        gh = std::move(gprev);
    }
    if (gx) {
        for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += gh[i];
    }
}

constexpr double kHalfLog2Pi = 0.91893853320467274178;

}  // namespace

template <typename T>
VAEPrior<T> init_vae(const VAEConfig& cfg, std::string group_key, Rng& rng) {
    cfg.validate();
    VAEPrior<T> p;
    p.config = cfg;
    p.group_key = std::move(group_key);
    init_net(p.psi, encoder_layout(cfg), rng);
    init_net(p.phi, decoder_layout(cfg), rng);
    return p;
}

template <typename T>
GaussianBatch<T> encode_batch(const VAEPrior<T>& prior, const Tensor<T>& w, MlpTape<T>* tape) {
    return net_forward(prior.psi, encoder_layout(prior.config), w, tape);
}

template <typename T>
GaussianBatch<T> decode_batch(const VAEPrior<T>& prior, const Tensor<T>& z, MlpTape<T>* tape) {
    return net_forward(prior.phi, decoder_layout(prior.config), z, tape);
}

template <typename T>
void encode_backward(const VAEPrior<T>& prior, const MlpTape<T>& tape, const Tensor<T>& g_mu,
                     const Tensor<T>& g_log_sigma, ParamSet<T>* g_psi, Tensor<T>* g_w) {
    net_backward(prior.psi, encoder_layout(prior.config), tape, g_mu, g_log_sigma, g_psi, g_w);
}

template <typename T>
void decode_backward(const VAEPrior<T>& prior, const MlpTape<T>& tape, const Tensor<T>& g_mu,
                     const Tensor<T>& g_log_sigma, ParamSet<T>* g_phi, Tensor<T>* g_z) {
    net_backward(prior.phi, decoder_layout(prior.config), tape, g_mu, g_log_sigma, g_phi, g_z);
}

template <typename T>
GaussianVec<T> encode(const VAEPrior<T>& prior, std::span<const T> w) {
    if (w.size() != kSliceSize) {
        throw std::invalid_argument("encode: expected a 27-vector, got " + std::to_string(w.size()) + " values");
    }
    const auto g = encode_batch(prior, Tensor<T>({1, kSliceSize}, std::vector<T>(w.begin(), w.end())));
    GaussianVec<T> out{std::vector<T>(g.mu.values().begin(), g.mu.values().end()), {}};
    for (T ls : g.log_sigma.values()) out.sigma.push_back(std::exp(ls));
    return out;
}

template <typename T>
GaussianVec<T> decode(const VAEPrior<T>& prior, std::span<const T> z) {
    const auto d = static_cast<std::size_t>(prior.config.latent_dim);
    if (z.size() != d) {
        throw std::invalid_argument("decode: expected a " + std::to_string(d) + "-vector, got " + std::to_string(z.size()) +
                                    " values");
    }
    const auto g = decode_batch(prior, Tensor<T>({1, d}, std::vector<T>(z.begin(), z.end())));
    GaussianVec<T> out{std::vector<T>(g.mu.values().begin(), g.mu.values().end()), {}};
    for (T ls : g.log_sigma.values()) out.sigma.push_back(std::exp(ls));
    return out;
}

template <typename T>
T gaussian_log_pdf(std::span<const T> x, std::span<const T> mu, std::span<const T> log_sigma) {
    if (x.size() != mu.size() || x.size() != log_sigma.size()) throw std::invalid_argument("gaussian_log_pdf: size mismatch");
    T s = T(0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T e = (x[i] - mu[i]) * std::exp(-log_sigma[i]);
        s += T(-0.5) * e * e - log_sigma[i] - static_cast<T>(kHalfLog2Pi);
    }
    return s;
}

template <typename T>
LogTerms<T> log_terms_with_noise(const VAEPrior<T>& prior, std::span<const T> w_hat, std::span<const T> noise) {
    const auto d = static_cast<std::size_t>(prior.config.latent_dim);
    if (noise.size() != d) throw std::invalid_argument("log_terms: noise must have latent_dim entries");
    if (w_hat.size() != kSliceSize) throw std::invalid_argument("log_terms: expected a 27-vector");
    const auto enc = encode_batch(prior, Tensor<T>({1, kSliceSize}, std::vector<T>(w_hat.begin(), w_hat.end())));
    LogTerms<T> out;
    out.z_hat.resize(d);
    for (std::size_t k = 0; k < d; ++k) out.z_hat[k] = enc.mu[k] + std::exp(enc.log_sigma[k]) * noise[k];
    out.log_r = gaussian_log_pdf<T>(out.z_hat, enc.mu.values(), enc.log_sigma.values());
    const std::vector<T> zeros(d, T(0));
    out.log_p_z = gaussian_log_pdf<T>(out.z_hat, zeros, zeros);
    const auto dec = decode_batch(prior, Tensor<T>({1, d}, out.z_hat));
    out.log_p_w_given_z = gaussian_log_pdf<T>(w_hat, dec.mu.values(), dec.log_sigma.values());
    return out;
}

template <typename T>
LogTerms<T> log_terms(const VAEPrior<T>& prior, std::span<const T> w_hat, Rng& rng) {
    std::vector<T> noise(static_cast<std::size_t>(prior.config.latent_dim));
    fill_normal(std::span<T>(noise), rng);
    return log_terms_with_noise<T>(prior, w_hat, noise);
}

VAETrainResult train_vae(const KernelGroup& group, const VAEConfig& cfg, Rng& rng) {
    cfg.validate();
    if (group.slices.empty()) throw std::invalid_argument("train_vae: group '" + group.key + "' is empty");
    VAETrainResult result{init_vae<float>(cfg, group.key, rng), {}};
    auto& prior = result.prior;
    const std::size_t n = group.slices.size();
    const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), n);
    const auto d = static_cast<std::size_t>(cfg.latent_dim);

    AdamState<float> adam_psi(AdamOptions{cfg.lr}), adam_phi(AdamOptions{cfg.lr});
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double bound_sum = 0.0;
        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t b = std::min(batch, n - start);
            Tensor<float> x({b, kSliceSize});
            for (std::size_t r = 0; r < b; ++r) {
                const auto& s = group.slices[order[start + r]].values;
                std::copy(s.begin(), s.end(), x.data() + r * kSliceSize);
            }
            MlpTape<float> etape, dtape;
            const auto enc = encode_batch(prior, x, &etape);
            const Tensor<float> eps = normal_tensor<float>({b, d}, rng);
            Tensor<float> z({b, d});
            for (std::size_t i = 0; i < z.size(); ++i) z[i] = enc.mu[i] + std::exp(enc.log_sigma[i]) * eps[i];
            const auto dec = decode_batch(prior, z, &dtape);

            // Gradients of the mean negative bound.
            const float scale = -1.0f / static_cast<float>(b);
            Tensor<float> g_mu_w({b, kSliceSize}), g_ls_w({b, kSliceSize});
            double bound = 0.0;
            for (std::size_t i = 0; i < x.size(); ++i) {
                const float inv_s = std::exp(-dec.log_sigma[i]);
                const float e = (x[i] - dec.mu[i]) * inv_s;
                bound += -0.5 * e * e - dec.log_sigma[i] - kHalfLog2Pi;
                g_mu_w[i] = scale * e * inv_s;
                g_ls_w[i] = scale * (e * e - 1.0f);
            }
            ParamSet<float> g_phi = prior.phi.like(), g_psi = prior.psi.like();
            Tensor<float> g_z({b, d});
            decode_backward(prior, dtape, g_mu_w, g_ls_w, &g_phi, &g_z);
            Tensor<float> g_mu_z({b, d}), g_ls_z({b, d});
            for (std::size_t i = 0; i < z.size(); ++i) {
                const float mu = enc.mu[i], ls = enc.log_sigma[i], s2 = std::exp(2.0f * ls);
                bound -= 0.5 * (mu * mu + s2 - 1.0) - ls;
                // z = mu + sigma * eps; KL gradient d/dmu = mu, d/dlog_sigma = sigma^2 - 1.
                g_mu_z[i] = g_z[i] - scale * mu;
                g_ls_z[i] = g_z[i] * std::exp(ls) * eps[i] - scale * (s2 - 1.0f);
            }
            encode_backward(prior, etape, g_mu_z, g_ls_z, &g_psi, static_cast<Tensor<float>*>(nullptr));
            adam_step(prior.phi, g_phi, adam_phi);
            adam_step(prior.psi, g_psi, adam_psi);
            bound_sum += bound;
        }
        result.epoch_bounds.push_back(bound_sum / static_cast<double>(n));
    }
    return result;
}

template <typename T>
std::vector<KernelSlice> sample_kernels(const VAEPrior<T>& prior, std::size_t n, Rng& rng) {
    std::vector<KernelSlice> out;
    if (n == 0) return out;
    const auto d = static_cast<std::size_t>(prior.config.latent_dim);
    const Tensor<T> z = normal_tensor<T>({n, d}, rng);
    const auto dec = decode_batch(prior, z);
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < kSliceSize; ++j) out[i].values[j] = static_cast<float>(dec.mu[i * kSliceSize + j]);
        out[i].layer_name = prior.group_key;
    }
    return out;
}

template <typename T>
std::size_t PriorBank<T>::index_for_layer(const std::string& layer_name) const {
    const std::string key = group_key_for(mode, layer_name);
    for (std::size_t i = 0; i < priors.size(); ++i) {
        if (priors[i].group_key == key) return i;
    }
    throw std::out_of_range("no prior for layer '" + layer_name + "' (group '" + key + "')");
}

template <typename T>
const VAEPrior<T>& PriorBank<T>::for_layer(const std::string& layer_name) const {
    return priors[index_for_layer(layer_name)];
}

namespace {

nlohmann::json vae_config_json(const VAEConfig& c) {
    return {{"latent_dim", c.latent_dim},   {"encoder_hidden", c.encoder_hidden},
            {"decoder_hidden", c.decoder_hidden}, {"decoder_variance", to_string(c.decoder_variance)},
            {"epochs", c.epochs},           {"lr", c.lr},
            {"batch_size", c.batch_size}};
}

VAEConfig vae_config_from(const nlohmann::json& j) {
    VAEConfig c;
    c.latent_dim = j.at("latent_dim").get<int>();
    c.encoder_hidden = j.at("encoder_hidden").get<std::vector<int>>();
    c.decoder_hidden = j.at("decoder_hidden").get<std::vector<int>>();
    c.decoder_variance = parse_decoder_variance(j.at("decoder_variance").get<std::string>());
    c.epochs = j.at("epochs").get<int>();
    c.lr = j.at("lr").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.validate();
    return c;
}

std::filesystem::path sidecar(const std::filesystem::path& p) { return p.string() + ".json"; }

}  // namespace

void write_prior_bank(const PriorBank<float>& bank, const std::filesystem::path& path) {
    ParamSet<float> all;
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& p : bank.priors) {
        for (const auto& e : p.psi) all.add(p.group_key + "/" + e.name, e.value);
        for (const auto& e : p.phi) all.add(p.group_key + "/" + e.name, e.value);
        groups.push_back({{"group_key", p.group_key}, {"config", vae_config_json(p.config)}});
    }
    write_checkpoint(all, path);
    const nlohmann::json side = {{"grouping", to_string(bank.mode)}, {"priors", groups}};
    std::ofstream out(sidecar(path));
    if (!out) throw FormatError(FormatErrc::io_error, "cannot write '" + sidecar(path).string() + "'");
    out << side.dump(2) << "\n";
}

PriorBank<float> read_prior_bank(const std::filesystem::path& path) {
    const ParamSet<float> all = read_checkpoint(path);
    std::ifstream in(sidecar(path));
    if (!in) throw FormatError(FormatErrc::io_error, "cannot open prior sidecar '" + sidecar(path).string() + "'");
    PriorBank<float> bank;
    try {
        const auto side = nlohmann::json::parse(in);
        bank.mode = parse_grouping(side.at("grouping").get<std::string>());
        for (const auto& g : side.at("priors")) {
            VAEPrior<float> p;
            p.group_key = g.at("group_key").get<std::string>();
            p.config = vae_config_from(g.at("config"));
            bank.priors.push_back(std::move(p));
        }
    } catch (const FormatError&) {
        throw;
    } catch (const std::exception& e) {
        throw FormatError(FormatErrc::bad_header, "prior sidecar '" + sidecar(path).string() + "': " + e.what());
    }
    std::size_t used = 0;
    for (auto& p : bank.priors) {
        // Layout from a throwaway init gives the expected names and shapes.
        Rng rng(0);
        const VAEPrior<float> shape = init_vae<float>(p.config, p.group_key, rng);
        for (const auto* src : {&shape.psi, &shape.phi}) {
            ParamSet<float>& dst = src == &shape.psi ? p.psi : p.phi;
            for (const auto& e : *src) {
                const std::string full = p.group_key + "/" + e.name;
                if (!all.contains(full) || all.at(full).shape() != e.value.shape()) {
                    throw FormatError(FormatErrc::bad_payload, "prior '" + path.string() + "': missing or mis-shaped " + full);
                }
                dst.add(e.name, all.at(full));
                ++used;
            }
        }
    }
    if (used != all.size()) throw FormatError(FormatErrc::bad_payload, "prior '" + path.string() + "': unexpected tensors");
    return bank;
}

#define DWP_INSTANTIATE_VAE(T)                                                                                      \
    template VAEPrior<T> init_vae(const VAEConfig&, std::string, Rng&);                                            \
    template GaussianBatch<T> encode_batch(const VAEPrior<T>&, const Tensor<T>&, MlpTape<T>*);                      \
    template GaussianBatch<T> decode_batch(const VAEPrior<T>&, const Tensor<T>&, MlpTape<T>*);                      \
    template void encode_backward(const VAEPrior<T>&, const MlpTape<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                  ParamSet<T>*, Tensor<T>*);                                                        \
    template void decode_backward(const VAEPrior<T>&, const MlpTape<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                  ParamSet<T>*, Tensor<T>*);                                                        \
    template GaussianVec<T> encode(const VAEPrior<T>&, std::span<const T>);                                         \
    template GaussianVec<T> decode(const VAEPrior<T>&, std::span<const T>);                                         \
    template T gaussian_log_pdf(std::span<const T>, std::span<const T>, std::span<const T>);                        \
    template LogTerms<T> log_terms_with_noise(const VAEPrior<T>&, std::span<const T>, std::span<const T>);          \
    template LogTerms<T> log_terms(const VAEPrior<T>&, std::span<const T>, Rng&);                                   \
    template std::vector<KernelSlice> sample_kernels(const VAEPrior<T>&, std::size_t, Rng&);                        \
    template struct PriorBank<T>;

DWP_INSTANTIATE_VAE(float)
DWP_INSTANTIATE_VAE(double)

}  // namespace dwp
