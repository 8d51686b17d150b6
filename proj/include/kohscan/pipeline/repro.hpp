#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "kohscan/corpus/manifest.hpp"
#include "kohscan/metrics/metrics.hpp"
#include "kohscan/train/train.hpp"
#include "kohscan/util/error.hpp"

namespace kohscan::pipeline {

/// A failure inside one pipeline stage; what() is prefixed with the stage name.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& message, bool precondition)
        : Error(stage + ": " + message), stage_(std::move(stage)), precondition_(precondition) {}
    const std::string& stage() const { return stage_; }
    /// True when the cause was a PreconditionError (bad configuration or input).
    bool precondition() const { return precondition_; }

private:
    std::string stage_;
    bool precondition_;
};

struct ReproConfig {
    std::uint64_t seed = 7;
    std::filesystem::path out_dir = "repro_out";
    int slides_per_class = 100;
    int epochs = 12;
    int batch_size = 32;
    double learning_rate = 1e-3;
    int bn_recalibration_batches = 16;
    int input_size = 224;
    bool flips = false;
    double test_fraction = 0.20;
    double val_fraction = 0.15;
    int workers = 1;

    // Acceptance gates.
    double min_auc = 0.95;
    double min_accuracy = 0.90;
    std::size_t min_patches = 2000;
    int max_epochs = 15;
};

nlohmann::json to_json(const ReproConfig& c);

struct Gate {
    std::string name;
    bool passed = false;
    std::string detail;
};

/// Whole-slide scans of the held-out slides (informational, not gated).
struct SlideLevel {
    int fungus_slides = 0;
    int fungus_detected = 0;
    /// Detected fungus slides whose top-scoring tile overlaps a drawn filament.
    int top_tile_on_filament = 0;
    int keratin_slides = 0;
    int keratin_cleared = 0;
};

struct ReproSummary {
    corpus::ManifestStats corpus;
    train::TrainReport training;
    metrics::EvalReport evaluation;
    SlideLevel slides;
    std::vector<Gate> gates;
    std::string table;

    bool passed() const;
    /// Deterministic content only (no timing), as written to summary.json.
    nlohmann::json to_json(const ReproConfig& config) const;
    /// Human-readable summary, as written to summary.txt.
    std::string text() const;
};

/// synth -> split -> train -> evaluate -> slide scans -> summary. Artifacts are
/// written under out_dir: corpus/, manifest.jsonl, model.kohscan,
/// train_report.json, eval_report.json, roc.tsv, roc.png, summary.json,
/// summary.txt and timing.json. Stage failures raise StageError.
ReproSummary run_repro(const ReproConfig& config);

}  // namespace kohscan::pipeline
