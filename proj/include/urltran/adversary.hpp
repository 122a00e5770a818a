#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "urltran/corpus.hpp"

namespace urltran {

// Visually-confusable replacements keyed by the character they imitate.
// Every replacement is a single Latin or Cyrillic letter distinct from its
// key; the loader enforces that.
struct HomoglyphTable {
    std::map<char32_t, std::vector<char32_t>> entries;

    static HomoglyphTable load(const std::string& path);

    const std::vector<char32_t>* find(char32_t cp) const {
        auto it = entries.find(cp);
        return it == entries.end() ? nullptr : &it->second;
    }
};

// Lowercased word list; membership checks are case-insensitive (ASCII).
struct WordDictionary {
    std::unordered_set<std::string> words;
    size_t max_length = 0;

    static WordDictionary load(const std::string& path);
    static WordDictionary from_words(const std::vector<std::string>& list);

    bool contains(std::string_view word) const;
};

struct SplitParts {
    bool splittable = false;
    std::vector<std::string> parts;  // original casing, concatenation == input
};

// Segments text into dictionary words (one part counts). Among valid
// segmentations the fewest parts win; ties prefer the longer word at the
// earliest position where the candidates differ.
SplitParts compound_split(std::string_view text, const WordDictionary& dict);

// Replaces one uniformly chosen confusable character of the registrable host
// label with a uniformly chosen replacement. Result is labeled phish.
UrlRecord homoglyph_attack(const UrlRecord& record, const HomoglyphTable& table,
                           uint64_t seed);

// Hyphenates the registrable host label at dictionary-word boundaries.
// Result is labeled phish.
UrlRecord compound_attack(const UrlRecord& record, const WordDictionary& dict);

// Applies a uniformly random non-identity permutation to the query pairs.
// Everything outside the query — and the record's label — stays unchanged.
UrlRecord reorder_params(const UrlRecord& record, uint64_t seed);

struct AugmentStats {
    int64_t total = 0;       // input records
    int64_t considered = 0;  // records that drew the augment coin
    int64_t perturbed = 0;   // perturbed copies emitted
    int64_t failed = 0;      // chosen attack was not applicable
    std::array<int64_t, 3> chosen{};     // homoglyph, compound, reorder
    std::array<int64_t, 3> succeeded{};
};

// For each record: keep the original; with probability 1/2 additionally try
// one attack chosen uniformly from the three, emitting the perturbed copy
// when it applies. Output size is therefore within [n, 2n].
Dataset build_adversarial_dataset(const Dataset& data, const HomoglyphTable& table,
                                  const WordDictionary& dict, uint64_t seed,
                                  AugmentStats* stats = nullptr);

}  // namespace urltran
