#pragma once

// Little-endian blob helpers shared by the on-disk formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "dwp/io_error.hpp"

namespace dwp::detail {

inline void append_f32_le(std::string& out, std::span<const float> values) {
    static_assert(sizeof(float) == 4);
    const std::size_t start = out.size();
    out.resize(start + values.size() * 4);
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(out.data() + start, values.data(), values.size() * 4);
    } else {
        for (std::size_t i = 0; i < values.size(); ++i) {
            std::uint32_t bits = std::bit_cast<std::uint32_t>(values[i]);
            for (int b = 0; b < 4; ++b) out[start + 4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
        }
    }
}

inline void read_f32_le(const char* src, std::span<float> out) {
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(out.data(), src, out.size() * 4);
    } else {
        for (std::size_t i = 0; i < out.size(); ++i) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b) bits |= std::uint32_t(static_cast<unsigned char>(src[4 * i + b])) << (8 * b);
            out[i] = std::bit_cast<float>(bits);
        }
    }
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(FormatErrc::io_error, "cannot open '" + path.string() + "' for reading");
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return data;
}

inline void write_file(const std::filesystem::path& path, const std::string& data) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatErrc::io_error, "cannot open '" + path.string() + "' for writing");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw FormatError(FormatErrc::io_error, "write failed for '" + path.string() + "'");
}

/// Splits "MAGIC\n{json}\n<payload>" and returns the JSON line; `payload_offset` receives the
/// index of the first payload byte.
inline std::string split_header(const std::string& data, const std::string& magic, const std::string& what,
                                std::size_t& payload_offset) {
    if (data.size() < magic.size()) {
        if (magic.compare(0, data.size(), data) == 0) {
            throw FormatError(FormatErrc::truncated, what + ": file ends inside the magic");
        }
        throw FormatError(FormatErrc::bad_magic, what + ": expected magic " + magic.substr(0, magic.size() - 1));
    }
    if (data.compare(0, magic.size(), magic) != 0) {
        throw FormatError(FormatErrc::bad_magic, what + ": expected magic " + magic.substr(0, magic.size() - 1));
    }
    const auto nl = data.find('\n', magic.size());
    if (nl == std::string::npos) throw FormatError(FormatErrc::truncated, what + ": file ends inside the header line");
    payload_offset = nl + 1;
    return data.substr(magic.size(), nl - magic.size());
}

}  // namespace dwp::detail
