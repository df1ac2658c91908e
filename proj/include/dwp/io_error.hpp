#pragma once

#include <stdexcept>
#include <string>

namespace dwp {

enum class FormatErrc {
    io_error,
    bad_magic,
    truncated,
    bad_header,
    payload_size_mismatch,
    bad_payload,
};

const char* to_string(FormatErrc code);

/// Failure reading or writing one of the on-disk formats (MVOL1, CKPT1, KDS1, PGM).
class FormatError : public std::runtime_error {
 public:
    FormatError(FormatErrc code, const std::string& detail)
        : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}
    FormatErrc code() const { return code_; }

 private:
    FormatErrc code_;
};

}  // namespace dwp
