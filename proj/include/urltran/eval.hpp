#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "urltran/corpus.hpp"
#include "urltran/encoder.hpp"
#include "urltran/tokenize.hpp"

namespace urltran {

struct ScoredPrediction {
    std::string url;
    Label label = Label::benign;
    double score = 0.0;  // model probability that the URL is phishing
};

// Scores every record in dataset order. max_len of 0 uses the model's
// max_positions.
template <typename S>
std::vector<ScoredPrediction> score_dataset(const ModelParams<S>& params,
                                            const Vocabulary& vocab,
                                            const Dataset& dataset, int32_t batch_size,
                                            int32_t max_len = 0);

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
    double threshold = 0.0;
};

// Tie-collapsed ROC curve: one point per distinct score, starting at
// (0, 0, +inf) and ending at (1, 1, min score). fpr and tpr are
// non-decreasing along the curve.
struct RocCurve {
    std::vector<RocPoint> points;
    int64_t positives = 0;
    int64_t negatives = 0;
};

// Needs at least one positive and one negative.
RocCurve roc_curve(const std::vector<ScoredPrediction>& predictions);

// Highest tpr whose operating point keeps fpr <= max_fpr (conservative step
// rule: never interpolates past the constraint).
double tpr_at_fpr(const RocCurve& curve, double max_fpr);

// Trapezoidal area; with tie collapsing this equals the pairwise
// probability-of-correct-ranking statistic with ties counted half.
double auroc(const RocCurve& curve);

struct ThresholdMetrics {
    int64_t tp = 0, fp = 0, tn = 0, fn = 0;
    double accuracy = 0.0;
    double precision = 0.0;  // valid only when precision_defined
    double recall = 0.0;
    double f1 = 0.0;
    bool precision_defined = false;
    bool recall_defined = false;
    bool f1_defined = false;
};

// Counts with phish predicted when score >= threshold.
ThresholdMetrics threshold_metrics(const std::vector<ScoredPrediction>& predictions,
                                   double threshold);

// TSV: url<TAB>label<TAB>score.
void save_predictions(const std::vector<ScoredPrediction>& predictions,
                      const std::string& path);
std::vector<ScoredPrediction> load_predictions(const std::string& path);

// JSON report: area, class counts, the full curve, and tpr at each requested
// fpr ceiling.
void write_roc_report(const RocCurve& curve, const std::vector<double>& fpr_targets,
                      const std::string& path);

// Self-contained SVG of the curve with a log-scaled fpr axis, so the low-fpr
// region is actually visible.
std::string render_roc_svg(const RocCurve& curve);

}  // namespace urltran
