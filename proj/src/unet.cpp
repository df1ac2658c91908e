#include "dwp/unet.hpp"

#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include "dwp/checkpoint.hpp"

namespace dwp {

void UNetConfig::validate() const {
    if (levels < 2) throw std::invalid_argument("UNetConfig: levels must be >= 2, got " + std::to_string(levels));
    if (levels > 8) throw std::invalid_argument("UNetConfig: levels must be <= 8, got " + std::to_string(levels));
    if (base_channels < 2) {
        throw std::invalid_argument("UNetConfig: base_channels must be >= 2, got " + std::to_string(base_channels));
    }
    if (in_channels < 1) throw std::invalid_argument("UNetConfig: in_channels must be >= 1");
}

std::vector<ConvLayerSpec> unet_conv_layers(const UNetConfig& cfg) {
    cfg.validate();
    std::vector<ConvLayerSpec> layers;
    std::size_t prev = static_cast<std::size_t>(cfg.in_channels);
    for (int l = 0; l < cfg.levels; ++l) {
        const std::size_t c = cfg.channels(l);
        const std::string p = "enc" + std::to_string(l);
        layers.push_back({p + ".conv0", prev, c});
        layers.push_back({p + ".conv1", c, c});
        prev = c;
    }
    for (int l = cfg.levels - 2; l >= 0; --l) {
        const std::size_t c = cfg.channels(l);
        const std::string p = "dec" + std::to_string(l);
        layers.push_back({p + ".up", cfg.channels(l + 1), c});
        layers.push_back({p + ".conv0", 2 * c, c});
        layers.push_back({p + ".conv1", c, c});
    }
    layers.push_back({"out", cfg.channels(0), 1});
    return layers;
}

std::size_t unet_param_count(const UNetConfig& cfg) {
    std::size_t n = 0;
    for (const auto& l : unet_conv_layers(cfg)) n += l.in_channels * l.out_channels * 27 + l.out_channels;
    return n;
}

template <typename T>
ParamSet<T> build_unet(const UNetConfig& cfg, Rng& rng) {
    ParamSet<T> p;
    for (const auto& l : unet_conv_layers(cfg)) {
        const T stddev = static_cast<T>(std::sqrt(2.0 / static_cast<double>(l.in_channels * 27)));
        p.add(l.name + ".weight", normal_tensor<T>({l.out_channels, l.in_channels, kKernel, kKernel, kKernel}, rng, stddev));
        p.add(l.name + ".bias", Tensor<T>({l.out_channels}));
    }
    return p;
}

template <typename T>
void check_unet_params(const UNetConfig& cfg, const ParamSet<T>& params) {
    std::vector<std::string> problems;
    std::set<std::string> expected;
    for (const auto& l : unet_conv_layers(cfg)) {
        const std::pair<std::string, Shape> want[2] = {
            {l.name + ".weight", {l.out_channels, l.in_channels, kKernel, kKernel, kKernel}},
            {l.name + ".bias", {l.out_channels}}};
        for (const auto& [name, shape] : want) {
            expected.insert(name);
            if (!params.contains(name)) {
                problems.push_back("missing " + name);
            } else if (params.at(name).shape() != shape) {
                problems.push_back("mismatched " + name + " (have " + shape_string(params.at(name).shape()) + ", need " +
                                   shape_string(shape) + ")");
            }
        }
    }
    for (const auto& e : params) {
        if (!expected.count(e.name)) problems.push_back("unexpected " + e.name);
    }
    if (!problems.empty()) {
        std::ostringstream os;
        os << "parameters do not match UNetConfig(levels=" << cfg.levels << ", base_channels=" << cfg.base_channels
           << ", in_channels=" << cfg.in_channels << "):";
        for (const auto& p : problems) os << "\n  " << p;
        throw std::invalid_argument(os.str());
    }
    // Iteration order must be canonical.
    std::size_t i = 0;
    for (const auto& l : unet_conv_layers(cfg)) {
        if (params.entry(i).name != l.name + ".weight" || params.entry(i + 1).name != l.name + ".bias") {
            throw std::invalid_argument("parameters are not in canonical U-Net order at '" + params.entry(i).name + "'");
        }
        i += 2;
    }
}

ParamSet<float> unet_from_checkpoint(const UNetConfig& cfg, const std::filesystem::path& path) {
    ParamSet<float> p = read_checkpoint(path);
    check_unet_params(cfg, p);
    return p;
}

namespace {

template <typename T>
Tensor<T> conv_act(const ParamSet<T>& p, const std::string& name, const Tensor<T>& x, bool activate = true) {
    Tensor<T> y = conv3d(x, p.at(name + ".weight"), 1, &p.at(name + ".bias"));
    if (activate) leaky_relu_inplace(y, static_cast<T>(kLeakySlope));
    return y;
}

// Backward through (conv -> leaky relu). `grad` holds dL/d(activation output) on entry.
template <typename T>
Tensor<T> conv_act_backward(const ParamSet<T>& p, const std::string& name, const Tensor<T>& x, const Tensor<T>& y,
                            Tensor<T>& grad, ParamSet<T>& grads, const std::function<bool(const std::string&)>& need,
                            bool need_input_grad, bool activated = true) {
    if (activated) leaky_relu_backward_inplace(y, grad, static_cast<T>(kLeakySlope));
    const std::string wname = name + ".weight";
    Tensor<T>* gk = (!need || need(wname)) ? &grads.at(wname) : nullptr;
    Tensor<T>* gb = (!need || need(name + ".bias")) ? &grads.at(name + ".bias") : nullptr;
    Tensor<T> gx;
    if (need_input_grad) gx = Tensor<T>(x.shape());
    conv3d_backward(x, p.at(wname), 1, grad, need_input_grad ? &gx : nullptr, gk, gb);
    return gx;
}

template <typename T>
void require_divisible(const UNetConfig& cfg, const Tensor<T>& input) {
    if (input.rank() != 5) throw std::invalid_argument("unet_forward: input must be [N,C,D,H,W], got " + shape_string(input.shape()));
    if (input.dim(1) != static_cast<std::size_t>(cfg.in_channels)) {
        throw std::invalid_argument("unet_forward: input has " + std::to_string(input.dim(1)) + " channels, network expects " +
                                    std::to_string(cfg.in_channels));
    }
    const std::size_t div = cfg.divisor();
    for (int a = 2; a < 5; ++a) {
        if (input.dim(a) % div != 0) {
            throw std::invalid_argument("unet_forward: spatial extents must be divisible by " + std::to_string(div) +
                                        " for " + std::to_string(cfg.levels) + " levels, got " + shape_string(input.shape()));
        }
    }
}

}  // namespace

template <typename T>
Tensor<T> unet_forward(const UNetConfig& cfg, const ParamSet<T>& p, const Tensor<T>& input, UNetTape<T>* tape) {
    cfg.validate();
    require_divisible(cfg, input);
    UNetTape<T> local;
    UNetTape<T>& t = tape ? *tape : local;
    const auto L = static_cast<std::size_t>(cfg.levels);
    t.enc.assign(L, {});
    t.dec.assign(L - 1, {});

    Tensor<T> x = input;
    for (std::size_t l = 0; l < L; ++l) {
        auto& e = t.enc[l];
        const std::string pre = "enc" + std::to_string(l);
        e.in = std::move(x);
        e.a0 = conv_act(p, pre + ".conv0", e.in);
        e.a1 = conv_act(p, pre + ".conv1", e.a0);
        if (l + 1 < L) {
            e.pool = max_pool2(e.a1);
            x = e.pool.output;
        }
    }
    Tensor<T> h = t.enc[L - 1].a1;
    for (std::size_t li = L - 1; li-- > 0;) {
        auto& d = t.dec[li];
        const std::string pre = "dec" + std::to_string(li);
        d.up_in = upsample2(h);
        d.u = conv_act(p, pre + ".up", d.up_in);
        d.cat = concat_channels(t.enc[li].a1, d.u);
        d.b0 = conv_act(p, pre + ".conv0", d.cat);
        d.b1 = conv_act(p, pre + ".conv1", d.b0);
        h = d.b1;
    }
    return conv_act(p, "out", h, false);
}

template <typename T>
void unet_backward(const UNetConfig& cfg, const ParamSet<T>& p, const UNetTape<T>& t, const Tensor<T>& grad_logits,
                   ParamSet<T>& grads, const std::function<bool(const std::string&)>& need) {
    const auto L = static_cast<std::size_t>(cfg.levels);
    if (t.enc.size() != L || t.dec.size() != L - 1) throw std::invalid_argument("unet_backward: tape does not match config");

    const Tensor<T>& h0 = t.dec[0].b1;
    Tensor<T> g = grad_logits;
    Tensor<T> gh = conv_act_backward(p, "out", h0, Tensor<T>{}, g, grads, need, true, false);

    std::vector<Tensor<T>> skip_grad(L);
    for (std::size_t l = 0; l + 1 < L; ++l) {
        const auto& d = t.dec[l];
        const std::string pre = "dec" + std::to_string(l);
        Tensor<T> gb0 = conv_act_backward(p, pre + ".conv1", d.b0, d.b1, gh, grads, need, true);
        Tensor<T> gcat = conv_act_backward(p, pre + ".conv0", d.cat, d.b0, gb0, grads, need, true);
        auto [gskip, gu] = split_channels(gcat, cfg.channels(static_cast<int>(l)));
        skip_grad[l] = std::move(gskip);
        Tensor<T> gup = conv_act_backward(p, pre + ".up", d.up_in, d.u, gu, grads, need, true);
        gh = upsample2_backward(gup);
    }
    // gh is now the gradient on the bottleneck output enc[L-1].a1.
    Tensor<T> ga1 = std::move(gh);
    for (std::size_t l = L; l-- > 0;) {
        const auto& e = t.enc[l];
        const std::string pre = "enc" + std::to_string(l);
        if (l + 1 < L) {
            // ga1 holds the gradient w.r.t. the pooled output of this level on entry.
            Tensor<T> gpool = max_pool2_backward(e.pool, e.a1.shape(), ga1);
            auto& s = skip_grad[l];
            for (std::size_t i = 0; i < gpool.size(); ++i) gpool[i] += s[i];
            ga1 = std::move(gpool);
        }
        Tensor<T> ga0 = conv_act_backward(p, pre + ".conv1", e.a0, e.a1, ga1, grads, need, true);
        ga1 = conv_act_backward(p, pre + ".conv0", e.in, e.a0, ga0, grads, need, l > 0);
    }
}

#define DWP_INSTANTIATE_UNET(T)                                                                                    \
    template ParamSet<T> build_unet(const UNetConfig&, Rng&);                                                      \
    template void check_unet_params(const UNetConfig&, const ParamSet<T>&);                                        \
    template Tensor<T> unet_forward(const UNetConfig&, const ParamSet<T>&, const Tensor<T>&, UNetTape<T>*);        \
    template void unet_backward(const UNetConfig&, const ParamSet<T>&, const UNetTape<T>&, const Tensor<T>&,       \
                                ParamSet<T>&, const std::function<bool(const std::string&)>&);

DWP_INSTANTIATE_UNET(float)
DWP_INSTANTIATE_UNET(double)

}  // namespace dwp
