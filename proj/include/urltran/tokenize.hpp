#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace urltran {

enum class VocabKind : int32_t { byte_bpe = 0, char_bpe, wordpiece };

const char* vocab_kind_name(VocabKind kind);
VocabKind vocab_kind_from_name(std::string_view name);

// Marker in TokenSequence::mlm_labels for positions that do not contribute to
// the masked-token loss.
inline constexpr int32_t kMlmIgnore = -1;

struct Vocabulary {
    VocabKind kind = VocabKind::byte_bpe;
    std::vector<std::string> pieces;  // index == token id
    std::vector<std::pair<std::string, std::string>> merges;  // BPE kinds only
    bool lowercase = false;  // applied before tokenization when set

    // Special tokens sit at fixed ids in every vocabulary.
    static constexpr int32_t kPad = 0;
    static constexpr int32_t kUnk = 1;
    static constexpr int32_t kCls = 2;
    static constexpr int32_t kSep = 3;
    static constexpr int32_t kMask = 4;
    static constexpr int32_t kNumSpecials = 5;

    int32_t size() const { return static_cast<int32_t>(pieces.size()); }
    bool is_special(int32_t id) const { return id >= 0 && id < kNumSpecials; }

    // -1 when the piece is not in the vocabulary.
    int32_t find_piece(std::string_view piece) const;

    // Derived lookup structures; call after pieces/merges change.
    void finalize();

    // Lookup caches built by finalize(); not serialized.
    std::unordered_map<std::string, int32_t> piece_ids;
    std::vector<std::array<int32_t, 3>> merge_rules;  // left id, right id, result id
};

// Learns a BPE vocabulary by greedy most-frequent pair merging. vocab_size is
// the total piece budget including specials and base symbols; merging stops
// early when no adjacent pair occurs at least twice.
Vocabulary train_bpe(const std::vector<std::string>& corpus, int32_t vocab_size,
                     VocabKind kind);

// Reads a wordpiece vocabulary in the one-piece-per-line format. Special
// tokens ([PAD] [UNK] [CLS] [SEP] [MASK]) are remapped to the fixed ids above
// regardless of their position in the file; they must all be present.
Vocabulary load_wordpiece_vocab(const std::string& path);

// JSON manifest round-trip (kind, pieces, merges, lowercase). Byte values that
// are not valid UTF-8 are escaped per byte so any piece survives the trip.
void save_vocabulary(const Vocabulary& vocab, const std::string& path);
Vocabulary load_vocabulary(const std::string& path);

struct TokenSequence {
    std::vector<int32_t> ids;             // length max_len
    std::vector<uint8_t> attention_mask;  // 1 = real token, 0 = padding
    std::vector<int32_t> mlm_labels;      // empty unless masking was applied

    int32_t attended_length() const;
};

// CLS + content (head-truncated to fit) + SEP, padded to max_len.
// max_len must be at least 3 so the frame always fits.
TokenSequence encode(const Vocabulary& vocab, std::string_view url, int32_t max_len);

// Concatenates piece strings, dropping specials and the wordpiece ##
// continuation marker. Inverse of encode for BPE kinds when nothing was
// truncated.
std::string decode(const Vocabulary& vocab, const std::vector<int32_t>& ids);

}  // namespace urltran
