#pragma once

#include <cstdint>
#include <vector>

#include "dwp/tensor.hpp"

namespace dwp {

// Volumetric tensors are laid out as [N, C, D, H, W].

/// Stride-1 3D convolution (cross-correlation) with symmetric zero padding.
/// input [N,Cin,D,H,W], kernels [Cout,Cin,k,k,k], optional bias [Cout].
/// Output spatial extent is D + 2*padding - k + 1 per axis.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernels, int padding, const Tensor<T>* bias = nullptr);

/// Accumulates (+=) gradients of conv3d into whichever outputs are non-null.
/// Outputs must already have the right shape.
template <typename T>
void conv3d_backward(const Tensor<T>& input, const Tensor<T>& kernels, int padding, const Tensor<T>& grad_out,
                     Tensor<T>* grad_input, Tensor<T>* grad_kernels, Tensor<T>* grad_bias);

template <typename T>
void leaky_relu_inplace(Tensor<T>& x, T slope);

/// grad *= slope where the forward output was not positive.
template <typename T>
void leaky_relu_backward_inplace(const Tensor<T>& output, Tensor<T>& grad, T slope);

template <typename T>
struct PoolResult {
    Tensor<T> output;
    std::vector<std::uint32_t> argmax;  // flat input index per output element
};

/// 2x2x2 max pooling, stride 2. Spatial extents must be even.
template <typename T>
PoolResult<T> max_pool2(const Tensor<T>& input);

template <typename T>
Tensor<T> max_pool2_backward(const PoolResult<T>& pooled, const Shape& input_shape, const Tensor<T>& grad_out);

/// Nearest-neighbour upsampling by 2 on every spatial axis.
template <typename T>
Tensor<T> upsample2(const Tensor<T>& input);

template <typename T>
Tensor<T> upsample2_backward(const Tensor<T>& grad_out);

/// Channel concatenation [a, b] along axis 1.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

/// Splits a channel-concatenated gradient back into parts of `a_channels` and the remainder.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& grad, std::size_t a_channels);

/// Fully connected layer on a row batch: x [B,in], weight [out,in], bias [out] -> [B,out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// Accumulates gradients of `linear` into the non-null outputs.
template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out, Tensor<T>* grad_x,
                     Tensor<T>* grad_weight, Tensor<T>* grad_bias);

}  // namespace dwp
