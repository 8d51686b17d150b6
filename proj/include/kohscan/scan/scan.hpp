#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kohscan/image/image.hpp"
#include "kohscan/model/bundle.hpp"

namespace kohscan::scan {

enum class Verdict { fungus_detected, no_fungus, indeterminate };
std::string to_string(Verdict v);
Verdict parse_verdict(const std::string& s);

struct ScanParams {
    int size_px = 500;
    int stride_px = 500;
    /// Tiles whose field-mask content fraction is below this are not scored.
    double min_content = 0.5;
    double threshold = 0.5;
    /// Slide-level rule: fungus_detected iff at least this many tiles score >= threshold.
    int min_positive_patches = 1;
    /// Threads for tile cropping and preprocessing; inference runs on the calling thread.
    int workers = 1;
    std::size_t batch_size = 32;

    void validate() const;
    bool operator==(const ScanParams&) const = default;
};

struct ScanResult {
    std::string image_id;
    int image_width = 0;
    int image_height = 0;
    ScanParams params;
    int rows = 0;
    int cols = 0;
    /// Row-major fungus probabilities; nullopt where the tile was not retained.
    std::vector<std::optional<double>> grid;
    int retained_tiles = 0;
    int positive_patch_count = 0;
    Verdict verdict = Verdict::indeterminate;
    /// Timing (excluded from equality and determinism checks).
    double mean_latency_ms = 0.0;
    double wall_ms = 0.0;

    const std::optional<double>& at(int row, int col) const {
        return grid[static_cast<std::size_t>(row) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(col)];
    }
};

/// Verdict for a count of positive tiles out of `retained`.
Verdict decide(int positive, int retained, int min_positive_patches);

/// Tiles `image`, scores every retained tile once and applies the slide rule.
/// Throws PreconditionError when the image is smaller than the patch.
ScanResult scan_image(const model::ModelBundle& bundle, const image::Image& image, const std::string& image_id,
                      const ScanParams& params);

/// Decodes the file and scans it; image_id defaults to the file stem.
ScanResult scan_image(const model::ModelBundle& bundle, const std::filesystem::path& path, const ScanParams& params);

/// Timing fields live under "timing" so callers can drop them for comparison.
nlohmann::json to_json(const ScanResult& r, bool include_timing = true);
ScanResult scan_result_from_json(const nlohmann::json& j);

struct OverlayOptions {
    /// Tile colour opacity at score 1; a tile with score s is blended at alpha * s.
    double alpha = 0.45;
    /// Outline tiles at or above the threshold.
    bool outline_positive = true;
};

/// Gray slide (as RGB) with per-tile heat colours, plus a legend strip appended
/// below the slide. Throws PreconditionError when the result does not match
/// the image geometry.
image::Image render_overlay(const ScanResult& result, const image::Image& slide, const OverlayOptions& options = {});
void render_overlay(const ScanResult& result, const std::filesystem::path& image_path,
                    const std::filesystem::path& out_path, const OverlayOptions& options = {});

/// Height of the legend strip for a slide of the given width.
int legend_height(int width);

struct Classification {
    double fungus_probability = 0.0;
    /// "fungus" when the probability reaches the threshold, else "keratin".
    std::string label;
    double threshold = 0.5;
    double latency_ms = 0.0;
};

/// Scores a single patch image (any size; resized to the model input).
Classification classify(const model::ModelBundle& bundle, const image::Image& patch, double threshold = 0.5);
nlohmann::json to_json(const Classification& c, bool include_timing = true);

struct BenchmarkResult {
    std::size_t n_patches = 0;
    std::size_t batch_size = 0;
    double mean_ms = 0.0;
    double p95_ms = 0.0;
    std::string backbone;
    std::string hardware;
};

/// Times inference on random patches (model input size), excluding one
/// warm-up batch. Per-patch time of a batch is its wall time / batch size.
BenchmarkResult benchmark(const model::ModelBundle& bundle, std::size_t n_patches, std::size_t batch_size,
                          std::uint64_t seed = 0);
nlohmann::json to_json(const BenchmarkResult& b);

/// CPU model, logical cores and active kernel ISA.
std::string hardware_descriptor();

}  // namespace kohscan::scan
