#include "urltran/tokenize.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "urltran/error.hpp"
#include "urltran/utf8.hpp"

namespace urltran {

namespace {

using json = nlohmann::ordered_json;

const std::array<const char*, Vocabulary::kNumSpecials> kSpecialPieces = {
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

bool is_special_piece(const std::string& piece) {
    for (const char* s : kSpecialPieces)
        if (piece == s) return true;
    return false;
}

std::string ascii_lower(std::string_view text) {
    std::string out(text);
    for (char& c : out)
        if (c >= 'A' && c <= 'Z') c += 'a' - 'A';
    return out;
}

bool is_ascii_punct(char32_t cp) {
    return (cp >= 33 && cp <= 47) || (cp >= 58 && cp <= 64) ||
           (cp >= 91 && cp <= 96) || (cp >= 123 && cp <= 126);
}

bool is_separator(char32_t cp) {
    return cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || cp < 0x20 ||
           cp == 0x7F;
}

// Pieces may hold arbitrary bytes; JSON strings may not. Map byte b to code
// point U+00b (latin-1) in both directions.
std::string latin1_escape(const std::string& bytes) {
    std::string out;
    for (unsigned char b : bytes) out += encode_utf8(b);
    return out;
}

std::string latin1_unescape(const std::string& text) {
    std::string out;
    for (const Utf8Scalar& unit : scan_utf8(text)) {
        if (!unit.valid || unit.value > 0xFF)
            raise(ErrorCode::format, "vocabulary piece escape out of byte range");
        out.push_back(static_cast<char>(unit.value));
    }
    return out;
}

uint64_t pair_key(int32_t left, int32_t right) {
    return (static_cast<uint64_t>(static_cast<uint32_t>(left)) << 32) |
           static_cast<uint32_t>(right);
}

// Replaces non-overlapping (left, right) occurrences with merged, scanning
// left to right. In place.
void apply_merge(std::vector<int32_t>& symbols, int32_t left, int32_t right,
                 int32_t merged) {
    size_t write = 0;
    size_t read = 0;
    const size_t n = symbols.size();
    while (read < n) {
        if (read + 1 < n && symbols[read] == left && symbols[read + 1] == right) {
            symbols[write++] = merged;
            read += 2;
        } else {
            symbols[write++] = symbols[read++];
        }
    }
    symbols.resize(write);
}

std::vector<int32_t> base_symbols(const Vocabulary& vocab, std::string_view text) {
    std::vector<int32_t> symbols;
    if (vocab.kind == VocabKind::byte_bpe) {
        symbols.reserve(text.size());
        for (unsigned char b : text)
            symbols.push_back(Vocabulary::kNumSpecials + static_cast<int32_t>(b));
    } else {
        for (const Utf8Scalar& unit : scan_utf8(text)) {
            int32_t id = vocab.find_piece(
                std::string_view(text.data() + unit.offset, unit.length));
            symbols.push_back(id >= 0 ? id : Vocabulary::kUnk);
        }
    }
    return symbols;
}

std::vector<int32_t> bpe_content(const Vocabulary& vocab, std::string_view text) {
    std::vector<int32_t> symbols = base_symbols(vocab, text);
    for (const auto& rule : vocab.merge_rules) {
        if (symbols.size() < 2) break;
        apply_merge(symbols, rule[0], rule[1], rule[2]);
    }
    return symbols;
}

// Splits text the way the reference uncased tokenizer does: whitespace and
// control characters separate words, and each ASCII punctuation character
// becomes a word of its own.
std::vector<std::string> basic_words(std::string_view text) {
    std::vector<std::string> words;
    std::string current;
    for (const Utf8Scalar& unit : scan_utf8(text)) {
        if (unit.valid && is_separator(unit.value)) {
            if (!current.empty()) words.push_back(std::move(current));
            current.clear();
            continue;
        }
        if (unit.valid && is_ascii_punct(unit.value)) {
            if (!current.empty()) words.push_back(std::move(current));
            current.clear();
            words.emplace_back(text.substr(unit.offset, unit.length));
            continue;
        }
        current.append(text.substr(unit.offset, unit.length));
    }
    if (!current.empty()) words.push_back(std::move(current));
    return words;
}

constexpr size_t kMaxWordpieceChars = 100;

std::vector<int32_t> wordpiece_content(const Vocabulary& vocab, std::string_view text) {
    std::vector<int32_t> content;
    for (const std::string& word : basic_words(text)) {
        std::vector<Utf8Scalar> units = scan_utf8(word);
        if (units.size() > kMaxWordpieceChars) {
            content.push_back(Vocabulary::kUnk);
            continue;
        }
        // Greedy longest match over scalar boundaries; continuations carry ##.
        std::vector<int32_t> pieces;
        size_t start = 0;
        bool bad = false;
        while (start < units.size()) {
            int32_t match = -1;
            size_t match_end = start;
            for (size_t end = units.size(); end > start; --end) {
                size_t from = units[start].offset;
                size_t to = units[end - 1].offset + units[end - 1].length;
                std::string candidate = start > 0 ? "##" : "";
                candidate += word.substr(from, to - from);
                int32_t id = vocab.find_piece(candidate);
                if (id >= 0) {
                    match = id;
                    match_end = end;
                    break;
                }
            }
            if (match < 0) {
                bad = true;
                break;
            }
            pieces.push_back(match);
            start = match_end;
        }
        if (bad) {
            content.push_back(Vocabulary::kUnk);
        } else {
            content.insert(content.end(), pieces.begin(), pieces.end());
        }
    }
    return content;
}

}  // namespace

const char* vocab_kind_name(VocabKind kind) {
    switch (kind) {
        case VocabKind::byte_bpe: return "byte_bpe";
        case VocabKind::char_bpe: return "char_bpe";
        case VocabKind::wordpiece: return "wordpiece";
    }
    return "byte_bpe";
}

VocabKind vocab_kind_from_name(std::string_view name) {
    if (name == "byte_bpe") return VocabKind::byte_bpe;
    if (name == "char_bpe") return VocabKind::char_bpe;
    if (name == "wordpiece") return VocabKind::wordpiece;
    raise(ErrorCode::parse, "unknown vocabulary kind \"" + std::string(name) + "\"");
}

int32_t Vocabulary::find_piece(std::string_view piece) const {
    auto it = piece_ids.find(std::string(piece));
    return it == piece_ids.end() ? -1 : it->second;
}

void Vocabulary::finalize() {
    piece_ids.clear();
    for (size_t i = 0; i < pieces.size(); ++i) {
        auto [it, inserted] = piece_ids.try_emplace(pieces[i], static_cast<int32_t>(i));
        if (!inserted)
            raise(ErrorCode::format, "duplicate vocabulary piece \"" + pieces[i] + "\"");
    }
    merge_rules.clear();
    merge_rules.reserve(merges.size());
    for (const auto& [left, right] : merges) {
        auto l = piece_ids.find(left);
        auto r = piece_ids.find(right);
        auto m = piece_ids.find(left + right);
        if (l == piece_ids.end() || r == piece_ids.end() || m == piece_ids.end())
            raise(ErrorCode::format, "merge references unknown piece \"" + left + right + "\"");
        merge_rules.push_back({l->second, r->second, m->second});
    }
}

Vocabulary train_bpe(const std::vector<std::string>& corpus, int32_t vocab_size,
                     VocabKind kind) {
    if (kind == VocabKind::wordpiece)
        raise(ErrorCode::invalid_argument,
              "wordpiece vocabularies are loaded from a file, not trained");

    Vocabulary vocab;
    vocab.kind = kind;
    for (const char* s : kSpecialPieces) vocab.pieces.emplace_back(s);

    // Base alphabet: all 256 bytes, or the corpus's unique scalars in byte
    // order (invalid UTF-8 bytes become single-byte pieces).
    if (kind == VocabKind::byte_bpe) {
        for (int b = 0; b < 256; ++b) vocab.pieces.push_back(std::string(1, static_cast<char>(b)));
    } else {
        std::set<std::string> alphabet;
        for (const std::string& url : corpus)
            for (const Utf8Scalar& unit : scan_utf8(url))
                alphabet.insert(url.substr(unit.offset, unit.length));
        for (const std::string& piece : alphabet) vocab.pieces.push_back(piece);
    }

    if (vocab_size < vocab.size())
        raise(ErrorCode::invalid_argument,
              "vocab_size " + std::to_string(vocab_size) + " is below the " +
                  std::to_string(vocab.size()) + " specials and base symbols");

    std::unordered_map<std::string, int32_t> ids;
    for (size_t i = 0; i < vocab.pieces.size(); ++i)
        ids.emplace(vocab.pieces[i], static_cast<int32_t>(i));

    std::vector<std::vector<int32_t>> sequences;
    sequences.reserve(corpus.size());
    for (const std::string& url : corpus) {
        std::vector<int32_t> symbols;
        if (kind == VocabKind::byte_bpe) {
            symbols.reserve(url.size());
            for (unsigned char b : url)
                symbols.push_back(Vocabulary::kNumSpecials + static_cast<int32_t>(b));
        } else {
            for (const Utf8Scalar& unit : scan_utf8(url))
                symbols.push_back(ids.at(url.substr(unit.offset, unit.length)));
        }
        sequences.push_back(std::move(symbols));
    }

    std::unordered_map<uint64_t, int64_t> counts;
    while (vocab.size() < vocab_size) {
        counts.clear();
        for (const auto& symbols : sequences)
            for (size_t i = 0; i + 1 < symbols.size(); ++i)
                ++counts[pair_key(symbols[i], symbols[i + 1])];

        // Most frequent pair; ties go to the lexicographically smallest
        // (left, right) piece strings. Pairs whose concatenation collides
        // with a special token are never merged.
        int32_t best_left = -1, best_right = -1;
        int64_t best_count = 0;
        for (const auto& [key, count] : counts) {
            if (count < 2) continue;
            int32_t left = static_cast<int32_t>(key >> 32);
            int32_t right = static_cast<int32_t>(key & 0xFFFFFFFF);
            if (is_special_piece(vocab.pieces[left] + vocab.pieces[right])) continue;
            if (count > best_count) {
                best_left = left;
                best_right = right;
                best_count = count;
            } else if (count == best_count) {
                const std::string& bl = vocab.pieces[best_left];
                const std::string& br = vocab.pieces[best_right];
                const std::string& cl = vocab.pieces[left];
                const std::string& cr = vocab.pieces[right];
                if (cl < bl || (cl == bl && cr < br)) {
                    best_left = left;
                    best_right = right;
                }
            }
        }
        if (best_count < 2) break;

        std::string merged_piece = vocab.pieces[best_left] + vocab.pieces[best_right];
        int32_t merged_id;
        auto it = ids.find(merged_piece);
        if (it != ids.end()) {
            merged_id = it->second;  // piece already exists; reuse its id
        } else {
            merged_id = vocab.size();
            vocab.pieces.push_back(merged_piece);
            ids.emplace(merged_piece, merged_id);
        }
        vocab.merges.emplace_back(vocab.pieces[best_left], vocab.pieces[best_right]);
        for (auto& symbols : sequences) apply_merge(symbols, best_left, best_right, merged_id);
    }

    vocab.finalize();
    return vocab;
}

Vocabulary load_wordpiece_vocab(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) raise(ErrorCode::io, "cannot open vocabulary \"" + path + "\"");

    std::vector<std::string> file_pieces;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        file_pieces.push_back(line);
    }

    Vocabulary vocab;
    vocab.kind = VocabKind::wordpiece;
    vocab.lowercase = true;
    for (const char* s : kSpecialPieces) vocab.pieces.emplace_back(s);

    std::array<bool, Vocabulary::kNumSpecials> seen{};
    for (std::string& piece : file_pieces) {
        bool special = false;
        for (int32_t s = 0; s < Vocabulary::kNumSpecials; ++s) {
            if (piece == kSpecialPieces[s]) {
                seen[s] = true;
                special = true;
                break;
            }
        }
        if (!special) vocab.pieces.push_back(std::move(piece));
    }
    for (int32_t s = 0; s < Vocabulary::kNumSpecials; ++s)
        if (!seen[s])
            raise(ErrorCode::format,
                  path + ": missing special token " + std::string(kSpecialPieces[s]));

    vocab.finalize();
    return vocab;
}

void save_vocabulary(const Vocabulary& vocab, const std::string& path) {
    json manifest;
    manifest["format"] = "urltran-vocabulary";
    manifest["kind"] = vocab_kind_name(vocab.kind);
    manifest["lowercase"] = vocab.lowercase;
    json pieces = json::array();
    for (const std::string& piece : vocab.pieces) pieces.push_back(latin1_escape(piece));
    manifest["pieces"] = std::move(pieces);
    json merges = json::array();
    for (const auto& [left, right] : vocab.merges)
        merges.push_back(json::array({latin1_escape(left), latin1_escape(right)}));
    manifest["merges"] = std::move(merges);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) raise(ErrorCode::io, "cannot write vocabulary \"" + path + "\"");
    out << manifest.dump(2) << '\n';
    if (!out) raise(ErrorCode::io, "write failed for \"" + path + "\"");
}

Vocabulary load_vocabulary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) raise(ErrorCode::io, "cannot open vocabulary \"" + path + "\"");
    json manifest;
    try {
        in >> manifest;
    } catch (const json::exception& e) {
        raise(ErrorCode::parse, path + ": " + e.what());
    }

    Vocabulary vocab;
    try {
        if (manifest.at("format").get<std::string>() != "urltran-vocabulary")
            raise(ErrorCode::schema_mismatch, path + ": not a vocabulary manifest");
        vocab.kind = vocab_kind_from_name(manifest.at("kind").get<std::string>());
        vocab.lowercase = manifest.at("lowercase").get<bool>();
        for (const auto& piece : manifest.at("pieces"))
            vocab.pieces.push_back(latin1_unescape(piece.get<std::string>()));
        for (const auto& merge : manifest.at("merges")) {
            if (!merge.is_array() || merge.size() != 2)
                raise(ErrorCode::format, path + ": merge entries must be [left, right]");
            vocab.merges.emplace_back(latin1_unescape(merge[0].get<std::string>()),
                                      latin1_unescape(merge[1].get<std::string>()));
        }
    } catch (const json::exception& e) {
        raise(ErrorCode::schema_mismatch, path + ": " + e.what());
    }

    for (int32_t s = 0; s < Vocabulary::kNumSpecials; ++s) {
        if (vocab.size() <= s || vocab.pieces[s] != kSpecialPieces[s])
            raise(ErrorCode::format, path + ": special tokens must head the piece list");
    }
    vocab.finalize();
    return vocab;
}

int32_t TokenSequence::attended_length() const {
    int32_t n = 0;
    for (uint8_t m : attention_mask) n += m;
    return n;
}

TokenSequence encode(const Vocabulary& vocab, std::string_view url, int32_t max_len) {
    if (max_len < 3)
        raise(ErrorCode::invalid_argument, "max_len must be at least 3 to fit CLS and SEP");

    std::string lowered;
    std::string_view text = url;
    if (vocab.lowercase) {
        lowered = ascii_lower(url);
        text = lowered;
    }

    std::vector<int32_t> content = vocab.kind == VocabKind::wordpiece
                                       ? wordpiece_content(vocab, text)
                                       : bpe_content(vocab, text);

    const size_t budget = static_cast<size_t>(max_len) - 2;
    if (content.size() > budget) content.resize(budget);  // keep the head

    TokenSequence seq;
    seq.ids.reserve(max_len);
    seq.ids.push_back(Vocabulary::kCls);
    seq.ids.insert(seq.ids.end(), content.begin(), content.end());
    seq.ids.push_back(Vocabulary::kSep);
    seq.attention_mask.assign(seq.ids.size(), 1);
    seq.ids.resize(max_len, Vocabulary::kPad);
    seq.attention_mask.resize(max_len, 0);
    return seq;
}

std::string decode(const Vocabulary& vocab, const std::vector<int32_t>& ids) {
    std::string out;
    for (int32_t id : ids) {
        if (id < 0 || id >= vocab.size())
            raise(ErrorCode::invalid_argument, "token id " + std::to_string(id) +
                                                   " outside vocabulary of size " +
                                                   std::to_string(vocab.size()));
        if (vocab.is_special(id)) continue;
        const std::string& piece = vocab.pieces[id];
        if (vocab.kind == VocabKind::wordpiece && piece.rfind("##", 0) == 0) {
            out += piece.substr(2);
        } else {
            out += piece;
        }
    }
    return out;
}

}  // namespace urltran
