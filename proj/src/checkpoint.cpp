#include "dwp/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include "binary_io.hpp"

namespace dwp {

void write_checkpoint(const ParamSet<float>& params, const std::filesystem::path& path) {
    nlohmann::json manifest = nlohmann::json::array();
    std::string payload;
    for (const auto& e : params) {
        manifest.push_back({{"name", e.name}, {"shape", e.value.shape()}, {"offset", payload.size()}});
        detail::append_f32_le(payload, e.value.values());
    }
    detail::write_file(path, "CKPT1\n" + manifest.dump() + "\n" + payload);
}

ParamSet<float> read_checkpoint(const std::filesystem::path& path) {
    const std::string data = detail::read_file(path);
    const std::string what = "checkpoint '" + path.string() + "'";
    std::size_t offset = 0;
    const std::string line = detail::split_header(data, "CKPT1\n", what, offset);
    struct Item {
        std::string name;
        Shape shape;
        std::size_t offset;
    };
    std::vector<Item> items;
    try {
        const auto manifest = nlohmann::json::parse(line);
        if (!manifest.is_array()) throw std::invalid_argument("manifest must be a JSON array");
        for (const auto& m : manifest) {
            Item it{m.at("name").get<std::string>(), m.at("shape").get<Shape>(), m.at("offset").get<std::size_t>()};
            for (auto e : it.shape) {
                if (e == 0) throw std::invalid_argument("tensor '" + it.name + "' has a zero extent");
            }
            items.push_back(std::move(it));
        }
    } catch (const std::exception& e) {
        throw FormatError(FormatErrc::bad_header, what + ": " + e.what());
    }
    const std::size_t payload = data.size() - offset;
    std::size_t expected = 0;
    for (const auto& it : items) {
        if (it.offset != expected) {
            throw FormatError(FormatErrc::bad_header, what + ": tensor '" + it.name + "' has offset " +
                                                          std::to_string(it.offset) + ", expected " +
                                                          std::to_string(expected));
        }
        expected += num_elements(it.shape) * 4;
    }
    if (payload != expected) {
        throw FormatError(FormatErrc::payload_size_mismatch,
                          what + ": manifest needs " + std::to_string(expected) + " bytes, found " + std::to_string(payload));
    }
    ParamSet<float> params;
    for (const auto& it : items) {
        Tensor<float> t(it.shape);
        detail::read_f32_le(data.data() + offset + it.offset, t.values());
        try {
            params.add(it.name, std::move(t));
        } catch (const std::invalid_argument& e) {
            throw FormatError(FormatErrc::bad_header, what + ": " + e.what());
        }
    }
    return params;
}

}  // namespace dwp
