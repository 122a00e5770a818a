#include "urltran/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "urltran/error.hpp"
#include "urltran/rng.hpp"

namespace urltran {

namespace {

std::vector<std::string_view> split_on(std::string_view text, char sep) {
    std::vector<std::string_view> out;
    size_t start = 0;
    while (true) {
        size_t pos = text.find(sep, start);
        if (pos == std::string_view::npos) {
            out.push_back(text.substr(start));
            return out;
        }
        out.push_back(text.substr(start, pos - start));
        start = pos + 1;
    }
}

}  // namespace

const char* origin_name(Origin origin) {
    switch (origin) {
        case Origin::original: return "original";
        case Origin::homoglyph: return "homoglyph";
        case Origin::compound: return "compound";
        case Origin::reorder: return "reorder";
    }
    return "original";
}

Origin origin_from_name(std::string_view name) {
    if (name == "original") return Origin::original;
    if (name == "homoglyph") return Origin::homoglyph;
    if (name == "compound") return Origin::compound;
    if (name == "reorder") return Origin::reorder;
    raise(ErrorCode::parse, "unknown origin \"" + std::string(name) + "\"");
}

int64_t Dataset::count_label(Label label) const {
    int64_t n = 0;
    for (const auto& r : records)
        if (r.label == label) ++n;
    return n;
}

UrlParts parse_url(std::string_view url) {
    UrlParts parts;
    std::string_view rest = url;

    size_t scheme_end = rest.find("://");
    if (scheme_end != std::string_view::npos) {
        parts.scheme = std::string(rest.substr(0, scheme_end));
        rest = rest.substr(scheme_end + 3);
    }

    size_t host_end = rest.find_first_of("/?#");
    parts.host = std::string(rest.substr(0, host_end));
    if (parts.host.empty())
        raise(ErrorCode::malformed_url, "no host in \"" + std::string(url) + "\"");
    if (host_end == std::string_view::npos) return parts;
    rest = rest.substr(host_end);

    if (rest.front() == '/') {
        size_t path_end = rest.find_first_of("?#");
        parts.path = std::string(rest.substr(0, path_end));
        if (path_end == std::string_view::npos) return parts;
        rest = rest.substr(path_end);
    }

    if (rest.front() == '?') {
        parts.has_query = true;
        size_t query_end = rest.find('#');
        std::string_view query_text = rest.substr(1, query_end == std::string_view::npos
                                                         ? std::string_view::npos
                                                         : query_end - 1);
        if (!query_text.empty()) {
            for (std::string_view unit : split_on(query_text, '&')) {
                QueryPair pair;
                size_t eq = unit.find('=');
                if (eq == std::string_view::npos) {
                    pair.key = std::string(unit);
                } else {
                    pair.key = std::string(unit.substr(0, eq));
                    pair.value = std::string(unit.substr(eq + 1));
                    pair.has_value = true;
                }
                parts.query.push_back(std::move(pair));
            }
        }
        if (query_end == std::string_view::npos) return parts;
        rest = rest.substr(query_end);
    }

    // rest.front() == '#'
    parts.fragment = std::string(rest.substr(1));
    return parts;
}

std::string UrlParts::reassemble() const {
    std::string out;
    if (scheme) {
        out += *scheme;
        out += "://";
    }
    out += host;
    out += path;
    if (has_query) {
        out += '?';
        for (size_t i = 0; i < query.size(); ++i) {
            if (i > 0) out += '&';
            out += query[i].key;
            if (query[i].has_value) {
                out += '=';
                out += query[i].value;
            }
        }
    }
    if (fragment) {
        out += '#';
        out += *fragment;
    }
    return out;
}

HostSpan registrable_label_span(const std::string& host) {
    size_t start = 0;
    size_t end = host.size();

    size_t at = host.rfind('@');
    if (at != std::string::npos) start = at + 1;

    // Port: the last ':' after any bracketed IPv6 literal, followed only by
    // digits (or nothing).
    size_t port_search_from = start;
    if (start < end && host[start] == '[') {
        size_t close = host.find(']', start);
        if (close != std::string::npos) port_search_from = close;
    }
    size_t colon = host.rfind(':');
    if (colon != std::string::npos && colon >= port_search_from) {
        bool digits_only = true;
        for (size_t i = colon + 1; i < end; ++i) {
            if (host[i] < '0' || host[i] > '9') {
                digits_only = false;
                break;
            }
        }
        if (digits_only) end = colon;
    }

    // Dot-separated labels of the core host; the registrable one sits just
    // left of the final label, or is the whole core when there is no dot.
    std::vector<std::pair<size_t, size_t>> labels;  // offset, length
    size_t label_start = start;
    for (size_t i = start; i <= end; ++i) {
        if (i == end || host[i] == '.') {
            labels.emplace_back(label_start, i - label_start);
            label_start = i + 1;
        }
    }
    const auto& chosen = labels.size() >= 2 ? labels[labels.size() - 2] : labels[0];
    return HostSpan{chosen.first, chosen.second};
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) raise(ErrorCode::io, "cannot open dataset \"" + path + "\"");
    std::stringstream buffer;
    buffer << in.rdbuf();
    std::string text = buffer.str();

    Dataset dataset;
    size_t line_no = 0;
    size_t pos = 0;
    while (pos <= text.size()) {
        size_t eol = text.find('\n', pos);
        std::string_view line(text.data() + pos,
                              (eol == std::string::npos ? text.size() : eol) - pos);
        pos = eol == std::string::npos ? text.size() + 1 : eol + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) continue;

        auto fields = split_on(line, '\t');
        if (fields.size() != 2 && fields.size() != 3)
            raise(ErrorCode::parse, path + ":" + std::to_string(line_no) +
                                        ": expected 2 or 3 tab-separated fields, got " +
                                        std::to_string(fields.size()));
        if (fields[0].empty())
            raise(ErrorCode::parse, path + ":" + std::to_string(line_no) + ": empty url");

        UrlRecord record;
        record.url = std::string(fields[0]);
        if (fields[1] == "0") {
            record.label = Label::benign;
        } else if (fields[1] == "1") {
            record.label = Label::phish;
        } else {
            raise(ErrorCode::parse, path + ":" + std::to_string(line_no) +
                                        ": label must be 0 or 1, got \"" +
                                        std::string(fields[1]) + "\"");
        }
        if (fields.size() == 3) {
            try {
                record.origin = origin_from_name(fields[2]);
            } catch (const Error&) {
                raise(ErrorCode::parse, path + ":" + std::to_string(line_no) +
                                            ": unknown origin \"" + std::string(fields[2]) +
                                            "\"");
            }
        }
        dataset.records.push_back(std::move(record));
    }
    if (dataset.records.empty())
        raise(ErrorCode::empty_dataset, "no records in \"" + path + "\"");
    return dataset;
}

void save_dataset(const Dataset& dataset, const std::string& path) {
    bool any_perturbed = std::any_of(
        dataset.records.begin(), dataset.records.end(),
        [](const UrlRecord& r) { return r.origin != Origin::original; });

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) raise(ErrorCode::io, "cannot write dataset \"" + path + "\"");
    for (const auto& record : dataset.records) {
        out << record.url << '\t' << static_cast<int32_t>(record.label);
        if (any_perturbed) out << '\t' << origin_name(record.origin);
        out << '\n';
    }
    if (!out) raise(ErrorCode::io, "write failed for \"" + path + "\"");
}

Dataset downsample_benign(const Dataset& dataset, uint64_t ratio, uint64_t seed) {
    if (ratio == 0)
        raise(ErrorCode::invalid_argument, "downsample ratio must be positive");
    int64_t phish = dataset.count_label(Label::phish);
    if (phish == 0)
        raise(ErrorCode::invalid_argument,
              "downsampling needs at least one phish record to set the cap");
    uint64_t cap = ratio * static_cast<uint64_t>(phish);

    std::vector<size_t> benign_indices;
    for (size_t i = 0; i < dataset.records.size(); ++i)
        if (dataset.records[i].label == Label::benign) benign_indices.push_back(i);

    std::vector<bool> keep(dataset.records.size(), true);
    if (benign_indices.size() > cap) {
        Rng rng(seed);
        rng.shuffle(benign_indices);
        for (size_t i = cap; i < benign_indices.size(); ++i)
            keep[benign_indices[i]] = false;
    }

    Dataset out;
    out.split_tag = dataset.split_tag;
    for (size_t i = 0; i < dataset.records.size(); ++i)
        if (keep[i]) out.records.push_back(dataset.records[i]);
    return out;
}

DatasetSplits split_dataset(const Dataset& dataset, const SplitFractions& fractions,
                            uint64_t seed) {
    if (dataset.records.empty())
        raise(ErrorCode::empty_dataset, "split_dataset: no records");
    double fracs[3] = {fractions.train, fractions.valid, fractions.test};
    double sum = 0.0;
    for (double f : fracs) {
        if (!(f > 0.0)) raise(ErrorCode::invalid_argument, "split fractions must be positive");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        raise(ErrorCode::invalid_argument, "split fractions must sum to 1");

    // Group records by exact URL so duplicates never straddle splits.
    std::vector<std::vector<size_t>> groups;
    std::unordered_map<std::string_view, size_t> group_of;
    for (size_t i = 0; i < dataset.records.size(); ++i) {
        std::string_view url = dataset.records[i].url;
        auto [it, inserted] = group_of.try_emplace(url, groups.size());
        if (inserted) groups.emplace_back();
        groups[it->second].push_back(i);
    }

    std::vector<size_t> order(groups.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);

    // Largest-remainder apportionment of group counts.
    size_t total = groups.size();
    size_t counts[3];
    double remainders[3];
    size_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
        double target = fracs[i] * static_cast<double>(total);
        counts[i] = static_cast<size_t>(std::floor(target));
        remainders[i] = target - std::floor(target);
        assigned += counts[i];
    }
    while (assigned < total) {
        int best = 0;
        for (int i = 1; i < 3; ++i)
            if (remainders[i] > remainders[best]) best = i;
        ++counts[best];
        remainders[best] = -1.0;
        ++assigned;
    }

    DatasetSplits splits;
    Dataset* outputs[3] = {&splits.train, &splits.valid, &splits.test};
    SplitTag tags[3] = {SplitTag::train, SplitTag::valid, SplitTag::test};
    size_t cursor = 0;
    for (int part = 0; part < 3; ++part) {
        std::vector<size_t> indices;
        for (size_t g = 0; g < counts[part]; ++g, ++cursor)
            for (size_t idx : groups[order[cursor]]) indices.push_back(idx);
        std::sort(indices.begin(), indices.end());
        outputs[part]->split_tag = tags[part];
        for (size_t idx : indices) outputs[part]->records.push_back(dataset.records[idx]);
    }
    return splits;
}

}  // namespace urltran
