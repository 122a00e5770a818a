#pragma once

#include <stdexcept>
#include <string>

namespace urltran {

// Every failure the library reports deliberately carries one of these codes so
// callers (the CLI in particular) can map it to an exit status without string
// matching.
enum class ErrorCode {
    invalid_argument,        // bad parameter or violated precondition
    parse,                   // unreadable input text (TSV, JSON, vocab file)
    format,                  // structurally valid input with impossible content
    schema_mismatch,         // checkpoint/config disagrees with expectations
    io,                      // file missing or unreadable/unwritable
    malformed_url,           // URL lacks a usable host
    empty_dataset,           // operation needs at least one record
    no_homoglyph_available,  // no confusable character in the host
    not_splittable,          // host has no dictionary-word segmentation
    nothing_to_permute,      // fewer than two query parameters
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] void raise(ErrorCode code, const std::string& message);

}  // namespace urltran
