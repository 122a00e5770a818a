#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <functional>
#include <set>
#include <string>
#include <vector>

#include "test_support.hpp"
#include "urltran/error.hpp"
#include "urltran/rng.hpp"
#include "urltran/tokenize.hpp"

using namespace urltran;
namespace ts = test_support;

namespace {

bool raises(ErrorCode code, const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code() == code;
    }
    return false;
}

// Piece strings between CLS and SEP of an encoded sequence.
std::vector<std::string> content_pieces(const Vocabulary& vocab, const TokenSequence& seq) {
    std::vector<std::string> pieces;
    for (int32_t i = 1; i < seq.attended_length() - 1; ++i)
        pieces.push_back(vocab.pieces[static_cast<size_t>(seq.ids[i])]);
    return pieces;
}

std::filesystem::path fixture_vocab_path() {
    return ts::source_dir() / "tests" / "data" / "wordpiece_vocab.txt";
}

}  // namespace

TEST_CASE("trained vocabularies reserve the special ids") {
    Vocabulary vocab = train_bpe({"abc"}, 262, VocabKind::byte_bpe);
    REQUIRE(vocab.size() >= Vocabulary::kNumSpecials);
    CHECK(vocab.pieces[0] == "[PAD]");
    CHECK(vocab.pieces[1] == "[UNK]");
    CHECK(vocab.pieces[2] == "[CLS]");
    CHECK(vocab.pieces[3] == "[SEP]");
    CHECK(vocab.pieces[4] == "[MASK]");
    CHECK(vocab.find_piece("[MASK]") == Vocabulary::kMask);
    CHECK(vocab.find_piece("no-such-piece") == -1);
}

TEST_CASE("byte bpe learns the hand-counted merges") {
    // "aaaa" has three overlapping (a,a) pairs; one merge fits in the budget.
    Vocabulary one = train_bpe({"aaaa"}, 5 + 256 + 1, VocabKind::byte_bpe);
    REQUIRE(one.merges.size() == 1);
    CHECK(one.merges[0] == std::make_pair(std::string("a"), std::string("a")));
    CHECK(one.find_piece("aa") >= 0);

    // ["abab","abab"]: (a,b) occurs 4 times vs (b,a) twice, so (a,b) merges
    // first; afterwards (ab,ab) occurs twice and merges second.
    Vocabulary two = train_bpe({"abab", "abab"}, 5 + 256 + 2, VocabKind::byte_bpe);
    REQUIRE(two.merges.size() == 2);
    CHECK(two.merges[0] == std::make_pair(std::string("a"), std::string("b")));
    CHECK(two.merges[1] == std::make_pair(std::string("ab"), std::string("ab")));

    CHECK(raises(ErrorCode::invalid_argument,
                 [] { train_bpe({"abab"}, 3, VocabKind::byte_bpe); }));
}

TEST_CASE("bpe merging stops when no pair repeats") {
    // Every adjacent pair in "abcdef" occurs once, so a generous budget
    // learns nothing.
    Vocabulary vocab = train_bpe({"abcdef"}, 5 + 256 + 50, VocabKind::byte_bpe);
    CHECK(vocab.merges.empty());
    CHECK(vocab.size() == 261);
}

TEST_CASE("equal-frequency pairs merge in lexicographic order") {
    // (x,y) and (b,a) both occur twice; (b,a) sorts first.
    Vocabulary vocab = train_bpe({"xy", "xy", "ba", "ba"}, 5 + 256 + 1, VocabKind::byte_bpe);
    REQUIRE(vocab.merges.size() == 1);
    CHECK(vocab.merges[0] == std::make_pair(std::string("b"), std::string("a")));
}

TEST_CASE("training twice gives identical merge lists") {
    std::vector<std::string> corpus = {"http://a.com/p?x=1", "http://b.com/p?x=2",
                                       "https://c.net/login", "https://d.net/login"};
    Vocabulary a = train_bpe(corpus, 300, VocabKind::byte_bpe);
    Vocabulary b = train_bpe(corpus, 300, VocabKind::byte_bpe);
    CHECK(a.pieces == b.pieces);
    CHECK(a.merges == b.merges);
}

TEST_CASE("merged pieces never collide with a special token string") {
    std::vector<std::string> corpus(50, "[PAD][PAD]");
    Vocabulary vocab = train_bpe(corpus, 5 + 256 + 30, VocabKind::byte_bpe);
    std::set<std::string> seen;
    for (const auto& piece : vocab.pieces) CHECK(seen.insert(piece).second);
}

TEST_CASE("char bpe builds its alphabet from the corpus and falls back to UNK") {
    Vocabulary vocab = train_bpe({"ab"}, 8, VocabKind::char_bpe);
    CHECK(vocab.size() == 7);  // five specials + a + b
    CHECK(vocab.merges.empty());

    TokenSequence seq = encode(vocab, "ab", 5);
    REQUIRE(seq.ids.size() == 5);
    CHECK(seq.ids[0] == Vocabulary::kCls);
    CHECK(seq.ids[1] == vocab.find_piece("a"));
    CHECK(seq.ids[2] == vocab.find_piece("b"));
    CHECK(seq.ids[3] == Vocabulary::kSep);
    CHECK(seq.ids[4] == Vocabulary::kPad);
    CHECK(seq.attention_mask == std::vector<uint8_t>{1, 1, 1, 1, 0});

    TokenSequence unk = encode(vocab, "az", 5);
    CHECK(unk.ids[2] == Vocabulary::kUnk);  // z was never seen in training
}

TEST_CASE("char bpe alphabet covers multi-byte characters") {
    Vocabulary vocab = train_bpe({"κλκλ"}, 16, VocabKind::char_bpe);
    CHECK(vocab.find_piece("κ") >= Vocabulary::kNumSpecials);
    TokenSequence seq = encode(vocab, "κλ", 6);
    CHECK(decode(vocab, seq.ids) == "κλ");
}

TEST_CASE("encoding an empty url leaves just the frame") {
    Vocabulary vocab = train_bpe({"ab"}, 262, VocabKind::byte_bpe);
    TokenSequence seq = encode(vocab, "", 6);
    CHECK(seq.ids == std::vector<int32_t>{Vocabulary::kCls, Vocabulary::kSep,
                                          Vocabulary::kPad, Vocabulary::kPad,
                                          Vocabulary::kPad, Vocabulary::kPad});
    CHECK(seq.attention_mask == std::vector<uint8_t>{1, 1, 0, 0, 0, 0});
    CHECK(seq.attended_length() == 2);
    CHECK(seq.mlm_labels.empty());
}

TEST_CASE("encode validates max_len") {
    Vocabulary vocab = train_bpe({"ab"}, 262, VocabKind::byte_bpe);
    CHECK(raises(ErrorCode::invalid_argument, [&] { encode(vocab, "ab", 2); }));
    CHECK_NOTHROW(encode(vocab, "ab", 3));
}

TEST_CASE("long content is truncated from the tail, keeping the head") {
    Vocabulary vocab = train_bpe({"x"}, 261, VocabKind::byte_bpe);
    TokenSequence seq = encode(vocab, "abcdefgh", 6);
    REQUIRE(seq.ids.size() == 6);
    CHECK(seq.ids[0] == Vocabulary::kCls);
    CHECK(decode(vocab, seq.ids) == "abcd");  // head survives, tail dropped
    CHECK(seq.ids[5] == Vocabulary::kSep);
    CHECK(seq.attended_length() == 6);
}

TEST_CASE("byte bpe encode then decode is the identity when nothing truncates") {
    std::vector<std::string> corpus = {"http://a.com/p?x=1", "https://b.net/q?y=2",
                                       "http://login.c.org/session"};
    Vocabulary vocab = train_bpe(corpus, 280, VocabKind::byte_bpe);
    CHECK(decode(vocab, encode(vocab, "http://a.com", 64).ids) == "http://a.com");

    // Fuzz with URL-shaped strings plus arbitrary bytes; byte-level BPE has
    // no UNK so every byte must survive.
    Rng rng(123);
    const std::string alphabet =
        "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
        ":/?#[]@!$&'()*+,;=-._~%\x80\xff\xc3\xa9 ";
    for (int trial = 0; trial < 500; ++trial) {
        size_t len = 1 + rng.below(40);
        std::string url;
        for (size_t i = 0; i < len; ++i)
            url += alphabet[static_cast<size_t>(rng.below(alphabet.size()))];
        TokenSequence seq = encode(vocab, url, 64);
        for (int32_t id : seq.ids) {
            REQUIRE(id >= 0);
            REQUIRE(id < vocab.size());
        }
        CAPTURE(url);
        CHECK(decode(vocab, seq.ids) == url);
    }
}

TEST_CASE("attention masks are a prefix of ones at exactly max_len length") {
    Vocabulary vocab = train_bpe({"abcabc"}, 270, VocabKind::byte_bpe);
    Rng rng(9);
    for (int trial = 0; trial < 200; ++trial) {
        size_t len = rng.below(30);
        std::string url;
        for (size_t i = 0; i < len; ++i)
            url += static_cast<char>('a' + rng.below(26));
        int32_t max_len = static_cast<int32_t>(3 + rng.below(20));
        TokenSequence seq = encode(vocab, url, max_len);
        REQUIRE(seq.ids.size() == static_cast<size_t>(max_len));
        REQUIRE(seq.attention_mask.size() == static_cast<size_t>(max_len));
        bool in_padding = false;
        for (uint8_t bit : seq.attention_mask) {
            if (bit == 0) in_padding = true;
            if (in_padding) CHECK(bit == 0);
        }
        CHECK(seq.ids[0] == Vocabulary::kCls);
        CHECK(seq.ids[static_cast<size_t>(seq.attended_length() - 1)] == Vocabulary::kSep);
    }
}

TEST_CASE("wordpiece vocabulary loads with specials pinned to the low ids") {
    auto dir = ts::scratch_dir("tok_wordpiece");
    // Specials scattered through the file must still land on ids 0..4.
    ts::write_file(dir / "vocab.txt",
                   "[PAD]\n[UNK]\nbank\n##of\n[CLS]\n[SEP]\n[MASK]\n");
    Vocabulary vocab = load_wordpiece_vocab((dir / "vocab.txt").string());
    CHECK(vocab.kind == VocabKind::wordpiece);
    CHECK(vocab.lowercase);
    CHECK(vocab.size() == 7);
    CHECK(vocab.pieces[4] == "[MASK]");
    CHECK(vocab.find_piece("bank") == 5);
    CHECK(vocab.find_piece("##of") == 6);

    TokenSequence seq = encode(vocab, "bankof", 8);
    CHECK(content_pieces(vocab, seq) == std::vector<std::string>{"bank", "##of"});
}

TEST_CASE("wordpiece loader rejects duplicates, gaps, and empty files") {
    auto dir = ts::scratch_dir("tok_wordpiece_errors");
    ts::write_file(dir / "dup.txt", "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nbank\nbank\n");
    CHECK(raises(ErrorCode::format, [&] { load_wordpiece_vocab((dir / "dup.txt").string()); }));

    ts::write_file(dir / "missing.txt", "[PAD]\n[UNK]\nbank\n");
    CHECK(raises(ErrorCode::format,
                 [&] { load_wordpiece_vocab((dir / "missing.txt").string()); }));

    ts::write_file(dir / "empty.txt", "");
    CHECK(raises(ErrorCode::format,
                 [&] { load_wordpiece_vocab((dir / "empty.txt").string()); }));

    CHECK(raises(ErrorCode::io, [&] { load_wordpiece_vocab((dir / "nope.txt").string()); }));
}

TEST_CASE("wordpiece encoding reproduces the reference bank-login example") {
    Vocabulary vocab = load_wordpiece_vocab(fixture_vocab_path().string());
    TokenSequence seq = encode(
        vocab, "secure.bankofamerica.com/login/sign-in/signOnV2Screen.go", 32);
    const std::vector<std::string> expected = {
        "secure", ".",   "bank", "##of", "##ame", "##rica", ".",     "com",
        "/",      "log", "##in", "/",    "sign",  "-",      "in",    "/",
        "sign",   "##on", "##v", "##2",  "##screen", ".",   "go"};
    CHECK(content_pieces(vocab, seq) == expected);
}

TEST_CASE("wordpiece maps unmatchable and overlong words to UNK") {
    Vocabulary vocab = load_wordpiece_vocab(fixture_vocab_path().string());
    // The fixture has no piece covering a non-ASCII character.
    TokenSequence unk = encode(vocab, "π", 5);
    CHECK(unk.ids[1] == Vocabulary::kUnk);

    // Words longer than 100 characters collapse to a single UNK.
    std::string longword(101, 'a');
    TokenSequence collapsed = encode(vocab, longword, 8);
    CHECK(content_pieces(vocab, collapsed) == std::vector<std::string>{"[UNK]"});
}

TEST_CASE("every wordpiece match is the longest available at its position") {
    Vocabulary vocab = load_wordpiece_vocab(fixture_vocab_path().string());
    Rng rng(77);
    const std::string letters = "abcdefghijklmnopqrstuvwxyz0123456789";
    for (int trial = 0; trial < 300; ++trial) {
        size_t len = 1 + rng.below(12);
        std::string word;
        for (size_t i = 0; i < len; ++i)
            word += letters[static_cast<size_t>(rng.below(letters.size()))];
        TokenSequence seq = encode(vocab, word, 32);
        CAPTURE(word);

        size_t at = 0;  // byte offset into word
        for (const std::string& piece : content_pieces(vocab, seq)) {
            std::string body = at > 0 ? piece.substr(2) : piece;
            REQUIRE(word.compare(at, body.size(), body) == 0);
            // No longer piece may match here, or greedy matching is broken.
            for (size_t longer = body.size() + 1; at + longer <= word.size(); ++longer) {
                std::string candidate = at > 0 ? "##" : "";
                candidate += word.substr(at, longer);
                CHECK(vocab.find_piece(candidate) == -1);
            }
            at += body.size();
        }
        CHECK(at == word.size());  // single-character fallbacks prevent UNK
    }
}

TEST_CASE("decode strips specials and continuation markers") {
    auto dir = ts::scratch_dir("tok_decode");
    ts::write_file(dir / "vocab.txt", "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nbank\n##of\n");
    Vocabulary vocab = load_wordpiece_vocab((dir / "vocab.txt").string());

    std::vector<int32_t> ids = {Vocabulary::kCls, vocab.find_piece("bank"),
                                vocab.find_piece("##of"), Vocabulary::kSep};
    CHECK(decode(vocab, ids) == "bankof");
    CHECK(decode(vocab, {Vocabulary::kCls, Vocabulary::kSep}) == "");
    CHECK(raises(ErrorCode::invalid_argument, [&] { decode(vocab, {vocab.size()}); }));
    CHECK(raises(ErrorCode::invalid_argument, [&] { decode(vocab, {-1}); }));
}

TEST_CASE("vocabulary manifests round-trip through json") {
    auto dir = ts::scratch_dir("tok_manifest");

    // Byte-level pieces may hold arbitrary bytes, including invalid UTF-8.
    Vocabulary vocab = train_bpe({"\x80\xff\x80\xff", "ab ab"}, 266, VocabKind::byte_bpe);
    REQUIRE_FALSE(vocab.merges.empty());
    save_vocabulary(vocab, (dir / "vocab.json").string());
    Vocabulary back = load_vocabulary((dir / "vocab.json").string());
    CHECK(back.kind == vocab.kind);
    CHECK(back.pieces == vocab.pieces);
    CHECK(back.merges == vocab.merges);
    CHECK(back.lowercase == vocab.lowercase);

    // The reloaded vocabulary must behave identically, not just compare equal.
    std::string url = "ab \x80\xff";
    CHECK(encode(back, url, 16).ids == encode(vocab, url, 16).ids);

    CHECK(raises(ErrorCode::io, [&] { load_vocabulary((dir / "nope.json").string()); }));
    ts::write_file(dir / "broken.json", "{ not json");
    CHECK(raises(ErrorCode::parse, [&] { load_vocabulary((dir / "broken.json").string()); }));
}

TEST_CASE("vocab kind names round-trip") {
    for (VocabKind kind : {VocabKind::byte_bpe, VocabKind::char_bpe, VocabKind::wordpiece}) {
        CHECK(vocab_kind_from_name(vocab_kind_name(kind)) == kind);
    }
    CHECK(raises(ErrorCode::parse, [] { vocab_kind_from_name("sentencepiece"); }));
}
