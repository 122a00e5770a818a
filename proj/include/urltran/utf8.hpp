#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace urltran {

// One decoded unit of a byte string. Invalid UTF-8 bytes come back one at a
// time with valid=false so callers can splice around them without corrupting
// the original bytes.
struct Utf8Scalar {
    size_t offset = 0;  // byte offset into the source
    size_t length = 0;  // byte length of this unit
    char32_t value = 0; // code point (or the raw byte when valid=false)
    bool valid = true;
};

inline std::vector<Utf8Scalar> scan_utf8(std::string_view text) {
    std::vector<Utf8Scalar> out;
    size_t i = 0;
    const size_t n = text.size();
    while (i < n) {
        unsigned char b0 = static_cast<unsigned char>(text[i]);
        size_t len = 0;
        char32_t cp = 0;
        if (b0 < 0x80) {
            len = 1;
            cp = b0;
        } else if ((b0 & 0xE0) == 0xC0) {
            len = 2;
            cp = b0 & 0x1F;
        } else if ((b0 & 0xF0) == 0xE0) {
            len = 3;
            cp = b0 & 0x0F;
        } else if ((b0 & 0xF8) == 0xF0) {
            len = 4;
            cp = b0 & 0x07;
        }
        bool ok = len > 0 && i + len <= n;
        if (ok) {
            for (size_t k = 1; k < len; ++k) {
                unsigned char bk = static_cast<unsigned char>(text[i + k]);
                if ((bk & 0xC0) != 0x80) {
                    ok = false;
                    break;
                }
                cp = (cp << 6) | (bk & 0x3F);
            }
        }
        if (ok) {
            // Reject overlong forms, surrogates, and out-of-range values.
            if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) ||
                (len == 4 && cp < 0x10000) || cp > 0x10FFFF ||
                (cp >= 0xD800 && cp <= 0xDFFF)) {
                ok = false;
            }
        }
        if (!ok) {
            out.push_back({i, 1, b0, false});
            i += 1;
        } else {
            out.push_back({i, len, cp, true});
            i += len;
        }
    }
    return out;
}

inline std::string encode_utf8(char32_t cp) {
    std::string out;
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
    return out;
}

}  // namespace urltran
