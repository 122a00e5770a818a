#include "urltran/error.hpp"

namespace urltran {

const char* error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::invalid_argument: return "invalid-argument";
        case ErrorCode::parse: return "parse";
        case ErrorCode::format: return "format";
        case ErrorCode::schema_mismatch: return "schema-mismatch";
        case ErrorCode::io: return "io";
        case ErrorCode::malformed_url: return "malformed-url";
        case ErrorCode::empty_dataset: return "empty-dataset";
        case ErrorCode::no_homoglyph_available: return "no-homoglyph-available";
        case ErrorCode::not_splittable: return "not-splittable";
        case ErrorCode::nothing_to_permute: return "nothing-to-permute";
    }
    return "unknown";
}

void raise(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

}  // namespace urltran
