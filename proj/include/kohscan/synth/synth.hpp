#pragma once

// Procedural KOH-slide stand-ins: septate filaments (positive class) and
// amorphous keratin blobs (negative class) on a noisy, vignetted field.
//
// Randomness comes from kohscan::Rng (mt19937_64 with portable
// distributions); slide i draws from Rng(Rng::derive(seed, i)), so serial
// and parallel generation agree.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <json.hpp>

#include "kohscan/corpus/manifest.hpp"
#include "kohscan/image/image.hpp"
#include "kohscan/util/rng.hpp"

namespace kohscan::synth {

struct Point {
    double x = 0.0;
    double y = 0.0;

    bool operator==(const Point&) const = default;
};

struct Range {
    double lo = 0.0;
    double hi = 0.0;

    double sample(Rng& rng) const { return lo == hi ? lo : rng.uniform(lo, hi); }
    bool operator==(const Range&) const = default;
};

struct IntRange {
    int lo = 0;
    int hi = 0;

    int sample(Rng& rng) const { return rng.integer(lo, hi); }
    bool operator==(const IntRange&) const = default;
};

struct FilamentConfig {
    IntRange count{4, 7};
    Range width_px{5.0, 8.0};
    Range length_px{600.0, 1400.0};
    /// Standard deviation of the heading change per 8 px step, radians.
    double curvature = 0.07;
    double septum_spacing_px = 32.0;
    /// Chance that a filament grows one side branch.
    double branch_probability = 0.6;

    bool operator==(const FilamentConfig&) const = default;
};

struct BlobConfig {
    IntRange count{10, 18};
    Range radius_px{25.0, 70.0};

    bool operator==(const BlobConfig&) const = default;
};

struct SynthConfig {
    int n_slides_per_class = 100;
    int width_px = 3000;
    int height_px = 2000;
    FilamentConfig filament;
    BlobConfig blob;
    /// Blob count range on fungus-positive slides (keratin is present there too).
    IntRange blobs_on_positive{3, 8};
    double noise_sigma = 6.0;
    bool vignette = true;
    std::uint64_t seed = 7;
    int patch_size_px = corpus::kDefaultPatchSize;
    int stride_px = corpus::kDefaultPatchSize;
    double min_content = 0.5;
    /// A patch whose filament centreline runs less than this far inside both
    /// the patch and the illuminated field is ambiguous and left out.
    double min_filament_px = 40.0;
    int png_compression = 1;

    /// Throws PreconditionError for empty or non-positive ranges.
    void validate() const;

    /// Native 6000x4000 capture size.
    static SynthConfig full_size();

    bool operator==(const SynthConfig&) const = default;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

/// Absorbance plane in [0,1]; layers combine as transmissions,
/// a = 1 - (1 - a) * (1 - layer), so drawing order does not matter.
struct Canvas {
    int width = 0;
    int height = 0;
    std::vector<float> absorb;

    Canvas(int w, int h) : width(w), height(h), absorb(static_cast<std::size_t>(w) * h, 0.0f) {}
    float at(int x, int y) const { return absorb[static_cast<std::size_t>(y) * width + x]; }
    void add(int x, int y, double a);
};

struct HyphaParams {
    double width_px = 6.0;
    double length_px = 800.0;
    double curvature = 0.07;
    double septum_spacing_px = 32.0;
    double branch_probability = 0.0;
    /// Peak absorbance of the tube wall.
    double strength = 0.5;
    /// Start point is drawn uniformly from this disk (radius 0 = exactly the centre).
    Point region_center;
    double region_radius = 0.0;
};

struct HyphaGeometry {
    double width_px = 0.0;
    /// Trunk first, then branches. Each has at least two points.
    std::vector<std::vector<Point>> polylines;
    std::vector<Point> septa;
};

/// Random-walk tube with transverse septa and an optional branch.
/// Throws PreconditionError for non-positive width or length.
HyphaGeometry draw_hypha(Canvas& canvas, const HyphaParams& params, Rng& rng);

struct KeratinParams {
    int count = 1;
    Range radius_px{25.0, 70.0};
    double strength = 0.4;
    Point region_center;
    double region_radius = 0.0;
};

struct BlobGeometry {
    Point center;
    double radius = 0.0;
    /// Closed star-shaped outline (last vertex joins the first).
    std::vector<Point> outline;
};

/// Irregular textured blobs; the outline radius varies by at most 6%.
std::vector<BlobGeometry> draw_keratin(Canvas& canvas, const KeratinParams& params, Rng& rng);

struct Rect {
    double x0, y0, x1, y1;
};

/// Liang-Barsky test: does segment ab meet the closed rectangle?
bool segment_intersects(Point a, Point b, const Rect& r);
bool intersects(const HyphaGeometry& h, const Rect& r);
bool intersects(const BlobGeometry& b, const Rect& r);

struct Field {
    bool enabled = false;
    Point center;
    double radius = 0.0;

    /// Pixel (x, y) lies in the field when its centre is within the disk.
    bool contains(int x, int y) const;
};

struct SlideGeometry {
    std::string image_id;
    corpus::SlideClass slide_class = corpus::SlideClass::unlabeled;
    int width = 0;
    int height = 0;
    Field field;
    std::vector<HyphaGeometry> hyphae;
    std::vector<BlobGeometry> blobs;
};

nlohmann::json to_json(const SlideGeometry& g);
SlideGeometry slide_geometry_from_json(const nlohmann::json& j);

/// fungus if a filament centreline meets the patch, else keratin if a blob
/// outline meets it or its centre lies inside, else unlabeled.
corpus::Label label_patch(const SlideGeometry& g, const Rect& patch);

/// Centreline length lying inside both the patch and the field.
double visible_filament_length(const SlideGeometry& g, const Rect& patch);

struct RenderedSlide {
    image::Image pixels;
    SlideGeometry geometry;
};

/// Renders slide `index` (0-based; the first n_slides_per_class are fungus-positive).
RenderedSlide render_slide(const SynthConfig& config, int index);

/// Labelled, in-field patches of a rendered slide in row-major order.
/// Fungus patches with less than min_filament_px of visible filament are skipped.
std::vector<corpus::PatchRecord> label_grid(const SynthConfig& config, const SlideGeometry& g);

/// Writes slides/<id>.png, manifest.jsonl and geometry.json under out_dir.
/// Returns the manifest (root = out_dir).
corpus::Manifest generate_corpus(const SynthConfig& config, const std::filesystem::path& out_dir, int workers = 1);

}  // namespace kohscan::synth
