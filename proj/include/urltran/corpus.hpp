#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace urltran {

enum class Label : int32_t { benign = 0, phish = 1 };

// How a record entered the dataset: straight from the corpus, or emitted by
// one of the perturbation passes.
enum class Origin : int32_t { original = 0, homoglyph, compound, reorder };

const char* origin_name(Origin origin);
Origin origin_from_name(std::string_view name);

struct UrlRecord {
    std::string url;
    Label label = Label::benign;
    Origin origin = Origin::original;
};

enum class SplitTag : int32_t { unsplit = 0, train, valid, test };

struct Dataset {
    std::vector<UrlRecord> records;
    SplitTag split_tag = SplitTag::unsplit;

    size_t size() const { return records.size(); }
    int64_t count_label(Label label) const;
};

// One key[=value] unit of a query string. has_value distinguishes `?flag`
// from `?flag=` so reassembly is byte-exact.
struct QueryPair {
    std::string key;
    std::string value;
    bool has_value = false;
};

// Structural view of a URL. Parsing is deliberately permissive — corpus URLs
// are frequently ill-formed and the only hard requirement is a non-empty host
// plus byte-exact reassembly.
struct UrlParts {
    std::optional<std::string> scheme;  // text before "://", absent if none
    std::string host;                   // authority up to the first / ? #
    std::string path;                   // includes the leading /, may be empty
    bool has_query = false;             // a '?' was present (even if empty)
    std::vector<QueryPair> query;
    std::optional<std::string> fragment;  // text after '#', absent if no '#'

    std::string reassemble() const;
};

UrlParts parse_url(std::string_view url);

// Byte range [offset, offset+length) of the registrable label inside a host
// string: the label left of the final dot-separated one, or the whole host
// when there is only one label. Skips any userinfo@ prefix and :port suffix.
struct HostSpan {
    size_t offset = 0;
    size_t length = 0;
};
HostSpan registrable_label_span(const std::string& host);

// TSV: url<TAB>label per line, optional third origin column. Label column is
// "0"/"1". Written files include the origin column only when some record has
// a non-original origin.
Dataset load_dataset(const std::string& path);
void save_dataset(const Dataset& dataset, const std::string& path);

// Keeps every phish record and at most ratio benign records per phish,
// sampled without replacement. Needs a positive ratio and at least one phish
// record.
Dataset downsample_benign(const Dataset& dataset, uint64_t ratio, uint64_t seed);

struct SplitFractions {
    double train = 0.8;
    double valid = 0.1;
    double test = 0.1;
};

struct DatasetSplits {
    Dataset train;
    Dataset valid;
    Dataset test;
};

// Random partition by URL: records sharing an exact URL string always land in
// the same split. Fractions must be positive and sum to 1.
DatasetSplits split_dataset(const Dataset& dataset, const SplitFractions& fractions,
                            uint64_t seed);

}  // namespace urltran
