#include "urltran/adversary.hpp"

#include <algorithm>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "urltran/error.hpp"
#include "urltran/rng.hpp"
#include "urltran/utf8.hpp"

namespace urltran {

namespace {

using json = nlohmann::ordered_json;

bool is_latin_or_cyrillic_letter(char32_t cp) {
    if ((cp >= U'A' && cp <= U'Z') || (cp >= U'a' && cp <= U'z')) return true;
    // Latin-1 Supplement letters through Latin Extended-B, minus the two
    // arithmetic signs parked in the middle of Latin-1.
    if (cp >= 0xC0 && cp <= 0x24F && cp != 0xD7 && cp != 0xF7) return true;
    // Cyrillic plus Cyrillic Supplement.
    if (cp >= 0x400 && cp <= 0x52F) return true;
    return false;
}

char32_t single_scalar(const std::string& text, const std::string& path,
                       const char* role) {
    std::vector<Utf8Scalar> units = scan_utf8(text);
    if (units.size() != 1 || !units[0].valid)
        raise(ErrorCode::format,
              path + ": homoglyph " + role + " \"" + text + "\" is not a single character");
    return units[0].value;
}

std::string ascii_lower_copy(std::string_view text) {
    std::string out(text);
    for (char& c : out)
        if (c >= 'A' && c <= 'Z') c += 'a' - 'A';
    return out;
}

bool is_ascii_letter_word(std::string_view word) {
    for (char c : word)
        if (!((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'))) return false;
    return !word.empty();
}

}  // namespace

HomoglyphTable HomoglyphTable::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) raise(ErrorCode::io, "cannot open homoglyph table \"" + path + "\"");
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        raise(ErrorCode::parse, path + ": " + e.what());
    }

    HomoglyphTable table;
    try {
        if (doc.at("format").get<std::string>() != "urltran-homoglyphs")
            raise(ErrorCode::schema_mismatch, path + ": not a homoglyph table");
        for (const auto& [key, values] : doc.at("map").items()) {
            char32_t from = single_scalar(key, path, "key");
            if (!values.is_array() || values.empty())
                raise(ErrorCode::format, path + ": entry \"" + key +
                                             "\" must map to a non-empty array");
            std::vector<char32_t> options;
            for (const auto& value : values) {
                char32_t to = single_scalar(value.get<std::string>(), path, "value");
                if (to == from)
                    raise(ErrorCode::format,
                          path + ": \"" + key + "\" maps to itself");
                if (!is_latin_or_cyrillic_letter(to))
                    raise(ErrorCode::format, path + ": replacement for \"" + key +
                                                 "\" is outside the Latin/Cyrillic letters");
                options.push_back(to);
            }
            if (!table.entries.emplace(from, std::move(options)).second)
                raise(ErrorCode::format, path + ": duplicate key \"" + key + "\"");
        }
    } catch (const json::exception& e) {
        raise(ErrorCode::schema_mismatch, path + ": " + e.what());
    }
    if (table.entries.empty()) raise(ErrorCode::format, path + ": empty homoglyph table");
    return table;
}

WordDictionary WordDictionary::from_words(const std::vector<std::string>& list) {
    WordDictionary dict;
    for (const std::string& word : list) {
        if (word.empty()) continue;
        if (!is_ascii_letter_word(word))
            raise(ErrorCode::invalid_argument,
                  "dictionary word \"" + word + "\" contains a non-letter character");
        std::string lowered = ascii_lower_copy(word);
        dict.max_length = std::max(dict.max_length, lowered.size());
        dict.words.insert(std::move(lowered));
    }
    if (dict.words.empty())
        raise(ErrorCode::invalid_argument, "word dictionary is empty");
    return dict;
}

WordDictionary WordDictionary::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) raise(ErrorCode::io, "cannot open word list \"" + path + "\"");
    std::vector<std::string> list;
    std::string line;
    size_t line_number = 0;
    while (std::getline(in, line)) {
        ++line_number;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (!is_ascii_letter_word(line))
            raise(ErrorCode::format, path + ":" + std::to_string(line_number) +
                                         ": word \"" + line + "\" contains a non-letter character");
        list.push_back(line);
    }
    if (list.empty()) raise(ErrorCode::format, path + ": empty word list");
    return from_words(list);
}

bool WordDictionary::contains(std::string_view word) const {
    if (word.empty() || word.size() > max_length) return false;
    return words.count(ascii_lower_copy(word)) > 0;
}

SplitParts compound_split(std::string_view text, const WordDictionary& dict) {
    const size_t n = text.size();
    if (n == 0) raise(ErrorCode::invalid_argument, "cannot split an empty domain");

    // parts_from[i]: fewest words covering text[i..n), picking the longest
    // first word on ties (which cascades the longest-first preference down
    // the whole segmentation). word_len[i]: that first word's length.
    constexpr int64_t kUnreachable = std::numeric_limits<int64_t>::max();
    std::vector<int64_t> parts_from(n + 1, kUnreachable);
    std::vector<size_t> word_len(n + 1, 0);
    parts_from[n] = 0;
    for (size_t i = n; i-- > 0;) {
        size_t longest = std::min(dict.max_length, n - i);
        for (size_t len = longest; len >= 1; --len) {
            if (parts_from[i + len] == kUnreachable) continue;
            if (!dict.contains(text.substr(i, len))) continue;
            if (parts_from[i + len] + 1 < parts_from[i]) {
                parts_from[i] = parts_from[i + len] + 1;
                word_len[i] = len;
            }
            // equal counts keep the earlier (longer) candidate
        }
    }

    SplitParts result;
    if (parts_from[0] == kUnreachable) return result;
    result.splittable = true;
    size_t pos = 0;
    while (pos < n) {
        size_t len = word_len[pos];
        result.parts.emplace_back(text.substr(pos, len));
        pos += len;
    }
    return result;
}

UrlRecord homoglyph_attack(const UrlRecord& record, const HomoglyphTable& table,
                           uint64_t seed) {
    UrlParts parts = parse_url(record.url);
    HostSpan span = registrable_label_span(parts.host);
    std::string label = parts.host.substr(span.offset, span.length);

    std::vector<Utf8Scalar> units = scan_utf8(label);
    std::vector<size_t> candidates;
    for (size_t i = 0; i < units.size(); ++i)
        if (units[i].valid && table.find(units[i].value)) candidates.push_back(i);
    if (candidates.empty())
        raise(ErrorCode::no_homoglyph_available,
              "no confusable character in host \"" + parts.host + "\"");

    Rng rng(seed);
    const Utf8Scalar& target = units[candidates[rng.below(candidates.size())]];
    const std::vector<char32_t>& options = *table.find(target.value);
    char32_t replacement = options[rng.below(options.size())];

    std::string new_label = label.substr(0, target.offset) + encode_utf8(replacement) +
                            label.substr(target.offset + target.length);
    parts.host = parts.host.substr(0, span.offset) + new_label +
                 parts.host.substr(span.offset + span.length);

    UrlRecord out;
    out.url = parts.reassemble();
    out.label = Label::phish;
    out.origin = Origin::homoglyph;
    return out;
}

UrlRecord compound_attack(const UrlRecord& record, const WordDictionary& dict) {
    UrlParts parts = parse_url(record.url);
    HostSpan span = registrable_label_span(parts.host);
    std::string label = parts.host.substr(span.offset, span.length);

    SplitParts split = compound_split(label, dict);
    if (!split.splittable)
        raise(ErrorCode::not_splittable,
              "host label \"" + label + "\" has no dictionary segmentation");
    if (split.parts.size() < 2)
        raise(ErrorCode::not_splittable,
              "host label \"" + label + "\" is a single word; hyphenation is a no-op");

    std::string hyphenated;
    for (size_t i = 0; i < split.parts.size(); ++i) {
        if (i > 0) hyphenated += '-';
        hyphenated += split.parts[i];
    }
    parts.host = parts.host.substr(0, span.offset) + hyphenated +
                 parts.host.substr(span.offset + span.length);

    UrlRecord out;
    out.url = parts.reassemble();
    out.label = Label::phish;
    out.origin = Origin::compound;
    return out;
}

UrlRecord reorder_params(const UrlRecord& record, uint64_t seed) {
    UrlParts parts = parse_url(record.url);
    if (parts.query.size() < 2)
        raise(ErrorCode::nothing_to_permute,
              "need at least two query pairs, found " +
                  std::to_string(parts.query.size()));

    // Uniform over non-identity permutations by rejecting the identity draw.
    Rng rng(seed);
    std::vector<size_t> order(parts.query.size());
    bool identity = true;
    do {
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        identity = true;
        for (size_t i = 0; i < order.size(); ++i)
            if (order[i] != i) {
                identity = false;
                break;
            }
    } while (identity);

    std::vector<QueryPair> reordered;
    reordered.reserve(parts.query.size());
    for (size_t idx : order) reordered.push_back(parts.query[idx]);
    parts.query = std::move(reordered);

    UrlRecord out;
    out.url = parts.reassemble();
    out.label = record.label;
    out.origin = Origin::reorder;
    return out;
}

Dataset build_adversarial_dataset(const Dataset& data, const HomoglyphTable& table,
                                  const WordDictionary& dict, uint64_t seed,
                                  AugmentStats* stats) {
    AugmentStats local;
    local.total = static_cast<int64_t>(data.records.size());

    Dataset out;
    out.split_tag = data.split_tag;
    for (size_t i = 0; i < data.records.size(); ++i) {
        const UrlRecord& record = data.records[i];
        out.records.push_back(record);

        Rng rng(mix_seed(seed, i));
        if (rng.uniform() >= 0.5) continue;
        ++local.considered;
        uint64_t attack = rng.below(3);
        ++local.chosen[attack];
        uint64_t attack_seed = rng.bits();
        try {
            UrlRecord perturbed;
            switch (attack) {
                case 0: perturbed = homoglyph_attack(record, table, attack_seed); break;
                case 1: perturbed = compound_attack(record, dict); break;
                default: perturbed = reorder_params(record, attack_seed); break;
            }
            out.records.push_back(std::move(perturbed));
            ++local.succeeded[attack];
            ++local.perturbed;
        } catch (const Error& e) {
            switch (e.code()) {
                case ErrorCode::no_homoglyph_available:
                case ErrorCode::not_splittable:
                case ErrorCode::nothing_to_permute:
                case ErrorCode::malformed_url:
                    ++local.failed;
                    break;
                default:
                    throw;
            }
        }
    }
    if (stats) *stats = local;
    return out;
}

}  // namespace urltran
