#include "urltran/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "urltran/error.hpp"

namespace urltran {

namespace {

using json = nlohmann::ordered_json;

std::string format_double(double value) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    return buf;
}

}  // namespace

template <typename S>
std::vector<ScoredPrediction> score_dataset(const ModelParams<S>& params,
                                            const Vocabulary& vocab,
                                            const Dataset& dataset, int32_t batch_size,
                                            int32_t max_len) {
    if (batch_size < 1) raise(ErrorCode::invalid_argument, "batch_size must be positive");
    if (dataset.records.empty()) raise(ErrorCode::empty_dataset, "score: no records");
    if (vocab.size() != params.config.vocab_size)
        raise(ErrorCode::schema_mismatch,
              "vocabulary has " + std::to_string(vocab.size()) +
                  " pieces but the model expects " +
                  std::to_string(params.config.vocab_size));
    if (max_len == 0) max_len = params.config.max_positions;
    if (max_len < 3 || max_len > params.config.max_positions)
        raise(ErrorCode::invalid_argument, "max_len outside [3, max_positions]");

    std::vector<ScoredPrediction> out;
    out.reserve(dataset.records.size());
    const size_t n = dataset.records.size();
    for (size_t begin = 0; begin < n; begin += batch_size) {
        size_t end = std::min(n, begin + static_cast<size_t>(batch_size));
        std::vector<TokenSequence> batch;
        batch.reserve(end - begin);
        for (size_t i = begin; i < end; ++i)
            batch.push_back(encode(vocab, dataset.records[i].url, max_len));
        ForwardOptions options;
        options.want_mlm = false;
        BatchOutput<S> result = forward(params, batch, options);
        for (size_t i = begin; i < end; ++i) {
            double l0 = static_cast<double>(result.logits[(i - begin) * 2]);
            double l1 = static_cast<double>(result.logits[(i - begin) * 2 + 1]);
            out.push_back({dataset.records[i].url, dataset.records[i].label,
                           1.0 / (1.0 + std::exp(l0 - l1))});
        }
    }
    return out;
}

RocCurve roc_curve(const std::vector<ScoredPrediction>& predictions) {
    RocCurve curve;
    for (const ScoredPrediction& p : predictions) {
        if (!std::isfinite(p.score))
            raise(ErrorCode::invalid_argument, "non-finite score for \"" + p.url + "\"");
        (p.label == Label::phish ? curve.positives : curve.negatives)++;
    }
    if (curve.positives == 0 || curve.negatives == 0)
        raise(ErrorCode::invalid_argument,
              std::string("roc needs both classes; no ") +
                  (curve.positives == 0 ? "phish" : "benign") + " predictions");

    std::vector<std::pair<double, Label>> sorted;
    sorted.reserve(predictions.size());
    for (const ScoredPrediction& p : predictions) sorted.emplace_back(p.score, p.label);
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });

    curve.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
    int64_t tp = 0, fp = 0;
    size_t i = 0;
    while (i < sorted.size()) {
        double score = sorted[i].first;
        // One point per distinct score: everything scoring >= it is positive.
        while (i < sorted.size() && sorted[i].first == score) {
            (sorted[i].second == Label::phish ? tp : fp)++;
            ++i;
        }
        curve.points.push_back({static_cast<double>(fp) / static_cast<double>(curve.negatives),
                                static_cast<double>(tp) / static_cast<double>(curve.positives),
                                score});
    }
    return curve;
}

double tpr_at_fpr(const RocCurve& curve, double max_fpr) {
    if (!(max_fpr >= 0.0 && max_fpr <= 1.0))
        raise(ErrorCode::invalid_argument, "fpr ceiling must be in [0, 1]");
    if (curve.points.empty()) raise(ErrorCode::invalid_argument, "empty roc curve");
    double best = 0.0;
    for (const RocPoint& p : curve.points)
        if (p.fpr <= max_fpr) best = std::max(best, p.tpr);
    return best;
}

double auroc(const RocCurve& curve) {
    if (curve.points.size() < 2) raise(ErrorCode::invalid_argument, "roc curve too short");
    double area = 0.0;
    for (size_t i = 1; i < curve.points.size(); ++i) {
        const RocPoint& a = curve.points[i - 1];
        const RocPoint& b = curve.points[i];
        area += (b.fpr - a.fpr) * (a.tpr + b.tpr) * 0.5;
    }
    return area;
}

ThresholdMetrics threshold_metrics(const std::vector<ScoredPrediction>& predictions,
                                   double threshold) {
    if (predictions.empty()) raise(ErrorCode::empty_dataset, "no predictions");
    ThresholdMetrics m;
    for (const ScoredPrediction& p : predictions) {
        bool predicted_phish = p.score >= threshold;
        bool is_phish = p.label == Label::phish;
        if (predicted_phish && is_phish) ++m.tp;
        else if (predicted_phish && !is_phish) ++m.fp;
        else if (!predicted_phish && is_phish) ++m.fn;
        else ++m.tn;
    }
    const double n = static_cast<double>(predictions.size());
    m.accuracy = static_cast<double>(m.tp + m.tn) / n;
    if (m.tp + m.fp > 0) {
        m.precision = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
        m.precision_defined = true;
    }
    if (m.tp + m.fn > 0) {
        m.recall = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
        m.recall_defined = true;
    }
    if (m.precision_defined && m.recall_defined && m.precision + m.recall > 0.0) {
        m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
        m.f1_defined = true;
    }
    return m;
}

void save_predictions(const std::vector<ScoredPrediction>& predictions,
                      const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) raise(ErrorCode::io, "cannot write predictions \"" + path + "\"");
    for (const ScoredPrediction& p : predictions)
        out << p.url << '\t' << static_cast<int32_t>(p.label) << '\t'
            << format_double(p.score) << '\n';
    if (!out) raise(ErrorCode::io, "write failed for \"" + path + "\"");
}

std::vector<ScoredPrediction> load_predictions(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) raise(ErrorCode::io, "cannot open predictions \"" + path + "\"");

    std::vector<ScoredPrediction> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        size_t tab1 = line.find('\t');
        size_t tab2 = tab1 == std::string::npos ? std::string::npos
                                                : line.find('\t', tab1 + 1);
        if (tab1 == std::string::npos || tab2 == std::string::npos ||
            line.find('\t', tab2 + 1) != std::string::npos)
            raise(ErrorCode::parse, path + ":" + std::to_string(line_no) +
                                        ": expected url<TAB>label<TAB>score");
        ScoredPrediction p;
        p.url = line.substr(0, tab1);
        if (p.url.empty())
            raise(ErrorCode::parse, path + ":" + std::to_string(line_no) + ": empty url");
        std::string label = line.substr(tab1 + 1, tab2 - tab1 - 1);
        if (label == "0") p.label = Label::benign;
        else if (label == "1") p.label = Label::phish;
        else
            raise(ErrorCode::parse, path + ":" + std::to_string(line_no) +
                                        ": label must be 0 or 1, got \"" + label + "\"");
        std::string score = line.substr(tab2 + 1);
        try {
            size_t used = 0;
            p.score = std::stod(score, &used);
            if (used != score.size()) throw std::invalid_argument(score);
        } catch (const std::exception&) {
            raise(ErrorCode::parse, path + ":" + std::to_string(line_no) +
                                        ": bad score \"" + score + "\"");
        }
        out.push_back(std::move(p));
    }
    return out;
}

void write_roc_report(const RocCurve& curve, const std::vector<double>& fpr_targets,
                      const std::string& path) {
    json doc;
    doc["auroc"] = auroc(curve);
    doc["positives"] = curve.positives;
    doc["negatives"] = curve.negatives;
    json targets = json::object();
    for (double target : fpr_targets) {
        char key[32];
        std::snprintf(key, sizeof(key), "%g", target);
        targets[key] = tpr_at_fpr(curve, target);
    }
    doc["tpr_at_fpr"] = std::move(targets);
    json points = json::array();
    for (const RocPoint& p : curve.points) {
        json entry;
        entry["fpr"] = p.fpr;
        entry["tpr"] = p.tpr;
        if (std::isfinite(p.threshold)) entry["threshold"] = p.threshold;
        else entry["threshold"] = "inf";
        points.push_back(std::move(entry));
    }
    doc["points"] = std::move(points);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) raise(ErrorCode::io, "cannot write roc report \"" + path + "\"");
    out << doc.dump(2) << '\n';
    if (!out) raise(ErrorCode::io, "write failed for \"" + path + "\"");
}

std::string render_roc_svg(const RocCurve& curve) {
    // Log-scaled fpr axis from 1e-6 up to 1; points below the floor clamp to
    // the left edge.
    constexpr double kLeft = 70, kRight = 560, kTop = 40, kBottom = 420;
    constexpr double kFloor = 1e-6;
    auto x_of = [&](double fpr) {
        double clamped = std::max(fpr, kFloor);
        double t = (std::log10(clamped) - std::log10(kFloor)) / (0.0 - std::log10(kFloor));
        return kLeft + t * (kRight - kLeft);
    };
    auto y_of = [&](double tpr) { return kBottom - tpr * (kBottom - kTop); };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"620\" height=\"480\" "
           "viewBox=\"0 0 620 480\">\n";
    svg << "<rect width=\"620\" height=\"480\" fill=\"white\"/>\n";
    // gridlines per decade
    for (int d = -6; d <= 0; ++d) {
        double x = x_of(std::pow(10.0, d));
        svg << "<line x1=\"" << x << "\" y1=\"" << kTop << "\" x2=\"" << x << "\" y2=\""
            << kBottom << "\" stroke=\"#ddd\"/>\n";
        svg << "<text x=\"" << x << "\" y=\"" << kBottom + 20
            << "\" font-size=\"11\" text-anchor=\"middle\" font-family=\"sans-serif\">1e"
            << d << "</text>\n";
    }
    for (int i = 0; i <= 10; i += 2) {
        double y = y_of(i / 10.0);
        svg << "<line x1=\"" << kLeft << "\" y1=\"" << y << "\" x2=\"" << kRight
            << "\" y2=\"" << y << "\" stroke=\"#ddd\"/>\n";
        svg << "<text x=\"" << kLeft - 8 << "\" y=\"" << y + 4
            << "\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">"
            << format_double(i / 10.0).substr(0, 3) << "</text>\n";
    }
    svg << "<polyline fill=\"none\" stroke=\"#0057b8\" stroke-width=\"2\" points=\"";
    for (const RocPoint& p : curve.points) svg << x_of(p.fpr) << ',' << y_of(p.tpr) << ' ';
    svg << "\"/>\n";
    svg << "<text x=\"" << (kLeft + kRight) / 2 << "\" y=\"" << kBottom + 40
        << "\" font-size=\"13\" text-anchor=\"middle\" font-family=\"sans-serif\">"
           "false positive rate (log)</text>\n";
    svg << "<text x=\"18\" y=\"" << (kTop + kBottom) / 2
        << "\" font-size=\"13\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "transform=\"rotate(-90 18 "
        << (kTop + kBottom) / 2 << ")\">true positive rate</text>\n";
    char area[64];
    std::snprintf(area, sizeof(area), "auroc = %.6f", auroc(curve));
    svg << "<text x=\"" << kRight - 8 << "\" y=\"" << kTop + 16
        << "\" font-size=\"13\" text-anchor=\"end\" font-family=\"sans-serif\">" << area
        << "</text>\n";
    svg << "</svg>\n";
    return svg.str();
}

template std::vector<ScoredPrediction> score_dataset(const ModelParams<float>&,
                                                     const Vocabulary&, const Dataset&,
                                                     int32_t, int32_t);
template std::vector<ScoredPrediction> score_dataset(const ModelParams<double>&,
                                                     const Vocabulary&, const Dataset&,
                                                     int32_t, int32_t);

}  // namespace urltran
