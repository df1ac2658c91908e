#pragma once

#include <filesystem>

#include "dwp/io_error.hpp"
#include "dwp/tensor.hpp"

namespace dwp {

/// CKPT1 named-tensor container: "CKPT1\n", a JSON manifest line
/// [{"name":..,"shape":[..],"offset":..}, ...] with byte offsets into the payload, "\n", then the
/// concatenated little-endian float32 blobs in manifest order.
void write_checkpoint(const ParamSet<float>& params, const std::filesystem::path& path);
ParamSet<float> read_checkpoint(const std::filesystem::path& path);

}  // namespace dwp
