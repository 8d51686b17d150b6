#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "kohscan/corpus/manifest.hpp"
#include "kohscan/model/bundle.hpp"

namespace kohscan::metrics {

inline constexpr double kDefaultThreshold = 0.5;

struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t tn = 0;
    std::uint64_t fn = 0;

    std::uint64_t total() const { return tp + fp + tn + fn; }
    bool operator==(const ConfusionCounts&) const = default;
};

/// Labels are 1 (fungus) or 0; score >= threshold predicts fungus.
ConfusionCounts confusion(std::span<const int> labels, std::span<const double> scores,
                          double threshold = kDefaultThreshold);

/// A metric whose denominator is zero is nullopt ("undefined"), never 0.
struct MetricSet {
    std::optional<double> accuracy;
    std::optional<double> sensitivity;
    std::optional<double> precision;
    std::optional<double> specificity;
    std::optional<double> f1;

    bool operator==(const MetricSet&) const = default;
};

MetricSet derive_metrics(const ConfusionCounts& c);

/// 2PR / (P + R); undefined when P + R == 0.
std::optional<double> f1_score(double precision, double sensitivity);

struct RocPoint {
    double threshold = 0.0;
    double fpr = 0.0;
    double tpr = 0.0;

    bool operator==(const RocPoint&) const = default;
};

/// Points ordered by decreasing threshold, from (0,0) to (1,1): a +inf
/// sentinel, then one point per distinct score (the lowest reaches (1,1)).
struct RocCurve {
    std::vector<RocPoint> points;
};

/// Throws PreconditionError unless both classes are present.
RocCurve roc(std::span<const int> labels, std::span<const double> scores);

/// Trapezoidal area under the curve. Equals the Mann-Whitney statistic with ties counted as 1/2.
double auc(const RocCurve& curve);

struct EvalReport {
    ConfusionCounts counts;
    MetricSet metrics;
    double auc = 0.0;
    std::size_t n_test = 0;
    /// Mean inference time per patch (timing; excluded from determinism checks).
    double latency_ms = 0.0;
    double threshold = kDefaultThreshold;
    std::string split = "test";
    RocCurve roc;
    std::vector<std::string> patch_ids;
    std::vector<int> labels;
    std::vector<double> scores;
};

/// Report from precomputed scores (latency left at 0).
EvalReport evaluate_scores(std::span<const int> labels, std::span<const double> scores,
                           double threshold = kDefaultThreshold);

/// Scores every patch of `split` once, in manifest order.
EvalReport evaluate(const model::ModelBundle& bundle, const corpus::Manifest& manifest, corpus::Split split,
                    double threshold = kDefaultThreshold, int workers = 1, std::size_t batch_size = 32);

/// Accuracy equals (tp+tn)/n, each metric its formula over the counts, f1 its
/// formula over the report's own precision and sensitivity, auc in [0,1].
/// Returns an empty list when consistent, otherwise one line per violation.
std::vector<std::string> consistency_errors(const EvalReport& r);

nlohmann::json to_json(const ConfusionCounts& c);
nlohmann::json to_json(const MetricSet& m);
nlohmann::json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);

/// Two columns "fpr tpr" with a header line, one row per curve point.
std::string roc_text(const RocCurve& curve);
/// Renders the curve with the diagonal, axes and "AUC = x.xxxx" legend.
void write_roc_png(const RocCurve& curve, const std::string& title, const std::filesystem::path& path);

/// Average reader performance for manual KOH examination (reference constants).
struct ClinicianBaseline {
    static constexpr double accuracy = 0.728;
    static constexpr double sensitivity = 0.61;
    static constexpr double precision = 0.963;
    static constexpr double specificity = 0.95;
    static constexpr double f1 = 0.7469;
    static constexpr double auc = 0.87;
};

/// A reference model row; shown for comparison, never asserted against local runs.
struct ReferenceRow {
    const char* name;
    double accuracy;
    double sensitivity;
    double precision;
    double specificity;
    double f1;
    double auc;
    std::uint64_t parameters;
    double ms_per_patch;
};

/// Parameter counts are attached to the architecture they actually belong to.
inline constexpr ReferenceRow kReferenceVgg16{"VGG16 (reference)", 0.9598, 0.9598, 0.9603, 0.9753, 0.9599, 0.9930,
                                              138'357'544, 3.6207};
inline constexpr ReferenceRow kReferenceInceptionV3{"InceptionV3 (reference)", 0.9590, 0.9550, 0.9558, 0.9750, 0.9550,
                                                    0.9917, 23'851'784, 3.5842};

/// Fixed-width table: one row per report, then the reference rows and the clinician row.
std::string compare_table(std::span<const std::pair<std::string, EvalReport>> reports);

}  // namespace kohscan::metrics
