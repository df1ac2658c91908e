#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dwp/ops.hpp"
#include "dwp/random.hpp"
#include "dwp/tensor.hpp"

namespace dwp {

inline constexpr double kLeakySlope = 0.01;
inline constexpr std::size_t kKernel = 3;

/// Encoder channels double per level; the decoder mirrors it with skip concatenation.
struct UNetConfig {
    int levels = 3;
    int base_channels = 8;
    int in_channels = 1;

    void validate() const;
    std::size_t channels(int level) const { return static_cast<std::size_t>(base_channels) << level; }
    /// Spatial extents must be divisible by this.
    std::size_t divisor() const { return std::size_t{1} << (levels - 1); }
    bool operator==(const UNetConfig&) const = default;
};

struct ConvLayerSpec {
    std::string name;  // prefix of "<name>.weight" / "<name>.bias"
    std::size_t in_channels;
    std::size_t out_channels;
};

/// Conv layers in parameter order: enc0..enc{L-1} (conv0, conv1), then dec{L-2}..dec0 (up, conv0,
/// conv1), then the 1-channel output conv "out". Every conv is 3x3x3 with a bias.
std::vector<ConvLayerSpec> unet_conv_layers(const UNetConfig& cfg);

/// Closed form over the layer list: sum of Cin*Cout*27 + Cout.
std::size_t unet_param_count(const UNetConfig& cfg);

/// He-normal kernels (std sqrt(2 / fan_in)), zero biases.
template <typename T>
ParamSet<T> build_unet(const UNetConfig& cfg, Rng& rng);

/// Throws std::invalid_argument listing missing, unexpected and mis-shaped tensors.
template <typename T>
void check_unet_params(const UNetConfig& cfg, const ParamSet<T>& params);

/// Reads a CKPT1 file and validates it against `cfg`.
ParamSet<float> unet_from_checkpoint(const UNetConfig& cfg, const std::filesystem::path& path);

/// Activations recorded by the forward pass for the backward pass.
template <typename T>
struct UNetTape {
    struct Encoder {
        Tensor<T> in, a0, a1;
        PoolResult<T> pool;
    };
    struct Decoder {
        Tensor<T> up_in, u, cat, b0, b1;
    };
    std::vector<Encoder> enc;
    std::vector<Decoder> dec;  // indexed by level
};

/// Logits [N,1,D,H,W] for input [N,Cin,D,H,W].
template <typename T>
Tensor<T> unet_forward(const UNetConfig& cfg, const ParamSet<T>& params, const Tensor<T>& input,
                       UNetTape<T>* tape = nullptr);

/// Accumulates parameter gradients into `grads` (congruent to params). Kernel gradients are skipped
/// for tensors rejected by `need_weight_grad`, which saves work when layers are frozen.
template <typename T>
void unet_backward(const UNetConfig& cfg, const ParamSet<T>& params, const UNetTape<T>& tape,
                   const Tensor<T>& grad_logits, ParamSet<T>& grads,
                   const std::function<bool(const std::string&)>& need_weight_grad = {});

}  // namespace dwp
