#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

#include "dwp/tensor.hpp"

namespace dwp {

using Rng = std::mt19937_64;

/// Independent stream derived from (master seed, key). Same inputs give the same stream.
Rng substream(std::uint64_t master_seed, std::string_view key);

/// Derived 64-bit seed, for handing to code that wants an integer rather than an engine.
std::uint64_t derive_seed(std::uint64_t master_seed, std::string_view key);

template <typename T>
void fill_normal(std::span<T> out, Rng& rng) {
    std::normal_distribution<T> normal(T(0), T(1));
    for (auto& x : out) x = normal(rng);
}

template <typename T>
Tensor<T> normal_tensor(const Shape& shape, Rng& rng, T stddev = T(1)) {
    Tensor<T> t(shape);
    fill_normal(t.values(), rng);
    if (stddev != T(1)) {
        for (auto& x : t.values()) x *= stddev;
    }
    return t;
}

template <typename T>
struct ReparamSample {
    Tensor<T> sample;
    Tensor<T> noise;
};

/// sample = mu + exp(log_sigma) * noise, noise ~ N(0, 1). The noise is returned so that
/// callers can route gradients to mu and log_sigma.
template <typename T>
ReparamSample<T> reparam_sample(const Tensor<T>& mu, const Tensor<T>& log_sigma, Rng& rng) {
    if (mu.shape() != log_sigma.shape()) {
        throw std::invalid_argument("reparam_sample: mu " + shape_string(mu.shape()) + " vs log_sigma " +
                                    shape_string(log_sigma.shape()));
    }
    ReparamSample<T> out{mu, normal_tensor<T>(mu.shape(), rng)};
    for (std::size_t i = 0; i < mu.size(); ++i) out.sample[i] = mu[i] + std::exp(log_sigma[i]) * out.noise[i];
    return out;
}

}  // namespace dwp
