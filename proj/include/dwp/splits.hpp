#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace dwp {

struct SplitSpec {
    std::vector<std::string> train_ids;
    std::vector<std::string> test_ids;
    std::uint64_t seed = 0;

    bool operator==(const SplitSpec&) const = default;
};

/// Seeded sampling without replacement from `pool`. The test set depends only on (pool, test_size,
/// seed), so it is shared across train sizes, and smaller train sets are prefixes of larger ones.
/// `train_size` must be one of 5, 10, 15, 20.
SplitSpec make_splits(const std::vector<std::string>& pool, int train_size, int test_size, std::uint64_t seed);

void to_json(nlohmann::json& j, const SplitSpec& s);
void from_json(const nlohmann::json& j, SplitSpec& s);

}  // namespace dwp
