#include "dwp/splits.hpp"

#include <algorithm>
#include <nlohmann/json.hpp>
#include <stdexcept>

#include "dwp/random.hpp"

namespace dwp {

SplitSpec make_splits(const std::vector<std::string>& pool, int train_size, int test_size, std::uint64_t seed) {
    if (train_size != 5 && train_size != 10 && train_size != 15 && train_size != 20) {
        throw std::invalid_argument("make_splits: train size must be one of 5, 10, 15, 20; got " +
                                    std::to_string(train_size));
    }
    if (test_size <= 0) throw std::invalid_argument("make_splits: test size must be positive");
    const std::size_t need = static_cast<std::size_t>(train_size + test_size);
    if (pool.size() < need) {
        throw std::invalid_argument("make_splits: pool of " + std::to_string(pool.size()) + " is smaller than train " +
                                    std::to_string(train_size) + " + test " + std::to_string(test_size));
    }
    std::vector<std::string> order = pool;
    std::sort(order.begin(), order.end());
    if (std::adjacent_find(order.begin(), order.end()) != order.end()) {
        throw std::invalid_argument("make_splits: pool ids must be unique");
    }
    Rng rng = substream(seed, "splits");
    std::shuffle(order.begin(), order.end(), rng);

    SplitSpec s;
    s.seed = seed;
    s.test_ids.assign(order.begin(), order.begin() + test_size);
    s.train_ids.assign(order.begin() + test_size, order.begin() + static_cast<long>(need));
    return s;
}

void to_json(nlohmann::json& j, const SplitSpec& s) {
    j = nlohmann::json{{"seed", s.seed}, {"train_ids", s.train_ids}, {"test_ids", s.test_ids}};
}

void from_json(const nlohmann::json& j, SplitSpec& s) {
    j.at("seed").get_to(s.seed);
    j.at("train_ids").get_to(s.train_ids);
    j.at("test_ids").get_to(s.test_ids);
}

}  // namespace dwp
