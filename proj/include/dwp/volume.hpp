#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dwp/random.hpp"
#include "dwp/tensor.hpp"

namespace dwp {

enum class Domain { source, target };

const char* to_string(Domain d);
Domain parse_domain(const std::string& s);

using Dims = std::array<std::size_t, 3>;  // (D, H, W)

/// One intensity grid in [0,1] plus its binary lesion mask, both C-order over (D, H, W).
struct Volume {
    Dims dims{};
    std::vector<float> intensities;
    std::vector<std::uint8_t> mask;
    Domain domain = Domain::source;
    std::string id;

    std::size_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
    double foreground_fraction() const;

    /// Throws std::invalid_argument if sizes disagree, intensities leave [0,1], or the mask is not 0/1.
    void validate() const;

    bool operator==(const Volume&) const = default;
};

/// Synthetic phantom. Source: 3-8 small bright ellipsoids on a smooth noise field.
/// Target: 1-2 large, dimmer blobs under a different global gamma. Both domains draw lesion
/// interiors from the same texture process.
Volume gen_volume(Domain domain, Dims dims, Rng& rng, std::string id = {});

/// Convenience: seeded by the substream (master_seed, id).
Volume gen_volume(Domain domain, Dims dims, std::uint64_t master_seed, const std::string& id);

/// MVOL1 container; see README for the byte layout.
void write_volume(const Volume& v, const std::filesystem::path& path);
Volume read_volume(const std::filesystem::path& path);

/// [1, 1, D, H, W] intensity tensor and matching 0/1 mask tensor.
template <typename T>
Tensor<T> volume_input(const Volume& v);
template <typename T>
Tensor<T> volume_mask(const Volume& v);

}  // namespace dwp
