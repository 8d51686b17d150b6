#include "kohscan/scan/scan.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <thread>

#include "kohscan/corpus/preprocess.hpp"
#include "kohscan/corpus/tiling.hpp"
#include "kohscan/image/draw.hpp"
#include "kohscan/model/model.hpp"
#include "kohscan/simd/kernels.hpp"
#include "kohscan/util/error.hpp"
#include "kohscan/util/parallel.hpp"
#include "kohscan/util/rng.hpp"

namespace kohscan::scan {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

json params_json(const ScanParams& p) {
    return json{{"size_px", p.size_px},
                {"stride_px", p.stride_px},
                {"min_content", p.min_content},
                {"threshold", p.threshold},
                {"min_positive_patches", p.min_positive_patches}};
}

}  // namespace

std::string to_string(Verdict v) {
    switch (v) {
        case Verdict::fungus_detected: return "fungus_detected";
        case Verdict::no_fungus: return "no_fungus";
        case Verdict::indeterminate: return "indeterminate";
    }
    return "indeterminate";
}

Verdict parse_verdict(const std::string& s) {
    if (s == "fungus_detected") return Verdict::fungus_detected;
    if (s == "no_fungus") return Verdict::no_fungus;
    if (s == "indeterminate") return Verdict::indeterminate;
    throw FormatError("unknown verdict '" + s + "'");
}

void ScanParams::validate() const {
    if (size_px < 1) throw PreconditionError("patch size must be positive");
    if (stride_px < 1) throw PreconditionError("stride must be positive");
    if (!(min_content >= 0.0 && min_content <= 1.0)) throw PreconditionError("min_content must lie in [0,1]");
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw PreconditionError("threshold must lie in [0,1]");
    if (min_positive_patches < 1) throw PreconditionError("min_positive_patches must be at least 1");
    if (workers < 1) throw PreconditionError("workers must be at least 1");
    if (batch_size < 1) throw PreconditionError("batch_size must be at least 1");
}

Verdict decide(int positive, int retained, int min_positive_patches) {
    if (retained == 0) return Verdict::indeterminate;
    return positive >= min_positive_patches ? Verdict::fungus_detected : Verdict::no_fungus;
}

ScanResult scan_image(const model::ModelBundle& bundle, const image::Image& image, const std::string& image_id,
                      const ScanParams& params) {
    params.validate();
    const auto t0 = Clock::now();
    if (image.width < params.size_px || image.height < params.size_px) {
        throw PreconditionError("image " + image_id + " (" + std::to_string(image.width) + "x" +
                                std::to_string(image.height) + ") is smaller than the " +
                                std::to_string(params.size_px) + " px patch");
    }
    const image::Image gray = image.channels == 1 ? image : image::to_gray(image);

    ScanResult r;
    r.image_id = image_id;
    r.image_width = image.width;
    r.image_height = image.height;
    r.params = params;
    r.rows = corpus::grid_positions(image.height, params.size_px, params.stride_px);
    r.cols = corpus::grid_positions(image.width, params.size_px, params.stride_px);
    r.grid.assign(static_cast<std::size_t>(r.rows) * static_cast<std::size_t>(r.cols), std::nullopt);

    corpus::SlideImage slide;
    slide.image_id = image_id;
    slide.width_px = image.width;
    slide.height_px = image.height;
    corpus::TileParams tp;
    tp.size_px = params.size_px;
    tp.stride_px = params.stride_px;
    tp.min_content = params.min_content;
    const auto tiles = corpus::tile(slide, gray, tp);
    r.retained_tiles = static_cast<int>(tiles.size());

    const auto& shape = bundle.model.spec().input_shape;
    const int in_h = static_cast<int>(shape[0]);
    const int in_w = static_cast<int>(shape[1]);
    std::vector<std::vector<float>> planes(tiles.size());
    parallel_for(tiles.size(), params.workers, [&](std::size_t i) {
        planes[i] = corpus::preprocess_plane(image::crop(gray, tiles[i].x, tiles[i].y, params.size_px, params.size_px),
                                             in_h, in_w);
    });

    double infer_ms = 0.0;
    for (std::size_t b = 0; b < tiles.size(); b += params.batch_size) {
        const std::size_t e = std::min(tiles.size(), b + params.batch_size);
        nn::Tensor batch({e - b, shape[0], shape[1], shape[2]});
        for (std::size_t i = b; i < e; ++i) corpus::fill_sample(planes[i], batch, i - b);
        const auto ti = Clock::now();
        const auto scores = model::fungus_scores(bundle.model, batch);
        infer_ms += ms_since(ti);
        for (std::size_t i = b; i < e; ++i) {
            const int row = tiles[i].y / params.stride_px;
            const int col = tiles[i].x / params.stride_px;
            r.grid[static_cast<std::size_t>(row) * static_cast<std::size_t>(r.cols) + static_cast<std::size_t>(col)] =
                scores[i - b];
            if (scores[i - b] >= params.threshold) ++r.positive_patch_count;
        }
    }
    r.verdict = decide(r.positive_patch_count, r.retained_tiles, params.min_positive_patches);
    r.mean_latency_ms = tiles.empty() ? 0.0 : infer_ms / static_cast<double>(tiles.size());
    r.wall_ms = ms_since(t0);
    return r;
}

ScanResult scan_image(const model::ModelBundle& bundle, const std::filesystem::path& path, const ScanParams& params) {
    const auto t0 = Clock::now();
    ScanResult r = scan_image(bundle, image::read(path), path.stem().string(), params);
    r.wall_ms = ms_since(t0);
    return r;
}

json to_json(const ScanResult& r, bool include_timing) {
    json grid = json::array();
    for (int row = 0; row < r.rows; ++row) {
        json line = json::array();
        for (int col = 0; col < r.cols; ++col) {
            const auto& v = r.at(row, col);
            line.push_back(v ? json(*v) : json(nullptr));
        }
        grid.push_back(std::move(line));
    }
    json j{{"image_id", r.image_id},
           {"image_width", r.image_width},
           {"image_height", r.image_height},
           {"tiling", params_json(r.params)},
           {"rows", r.rows},
           {"cols", r.cols},
           {"grid", std::move(grid)},
           {"retained_tiles", r.retained_tiles},
           {"positive_patch_count", r.positive_patch_count},
           {"verdict", to_string(r.verdict)}};
    if (include_timing) j["timing"] = json{{"mean_latency_ms", r.mean_latency_ms}, {"wall_ms", r.wall_ms}};
    return j;
}

ScanResult scan_result_from_json(const json& j) {
    try {
        ScanResult r;
        r.image_id = j.at("image_id").get<std::string>();
        r.image_width = j.at("image_width").get<int>();
        r.image_height = j.at("image_height").get<int>();
        const json& t = j.at("tiling");
        r.params.size_px = t.at("size_px").get<int>();
        r.params.stride_px = t.at("stride_px").get<int>();
        r.params.min_content = t.at("min_content").get<double>();
        r.params.threshold = t.at("threshold").get<double>();
        r.params.min_positive_patches = t.at("min_positive_patches").get<int>();
        r.rows = j.at("rows").get<int>();
        r.cols = j.at("cols").get<int>();
        const json& g = j.at("grid");
        if (g.size() != static_cast<std::size_t>(r.rows)) throw FormatError("scan grid has the wrong number of rows");
        for (const auto& line : g) {
            if (line.size() != static_cast<std::size_t>(r.cols)) throw FormatError("scan grid row has the wrong length");
            for (const auto& v : line) r.grid.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
        }
        r.retained_tiles = j.at("retained_tiles").get<int>();
        r.positive_patch_count = j.at("positive_patch_count").get<int>();
        r.verdict = parse_verdict(j.at("verdict").get<std::string>());
        if (j.contains("timing")) {
            r.mean_latency_ms = j["timing"].value("mean_latency_ms", 0.0);
            r.wall_ms = j["timing"].value("wall_ms", 0.0);
        }
        return r;
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed scan result: ") + e.what());
    }
}

int legend_height(int width) { return 16 + 10 * std::max(1, width / 1000); }

image::Image render_overlay(const ScanResult& result, const image::Image& slide, const OverlayOptions& options) {
    if (slide.width != result.image_width || slide.height != result.image_height) {
        throw PreconditionError("overlay: image is " + std::to_string(slide.width) + "x" + std::to_string(slide.height) +
                                " but the scan covered " + std::to_string(result.image_width) + "x" +
                                std::to_string(result.image_height));
    }
    const auto& p = result.params;
    if (result.rows != corpus::grid_positions(slide.height, p.size_px, p.stride_px) ||
        result.cols != corpus::grid_positions(slide.width, p.size_px, p.stride_px) ||
        result.grid.size() != static_cast<std::size_t>(result.rows) * static_cast<std::size_t>(result.cols)) {
        throw PreconditionError("overlay: scan grid does not match the image tiling");
    }
    if (!(options.alpha >= 0.0 && options.alpha <= 1.0)) throw PreconditionError("overlay alpha must lie in [0,1]");

    const image::Image rgb = image::to_rgb(slide.channels == 1 ? slide : image::to_gray(slide));
    const int legend = legend_height(slide.width);
    image::Image out(slide.width, slide.height + legend, 3, 255);
    std::copy(rgb.pixels.begin(), rgb.pixels.end(), out.pixels.begin());

    for (int row = 0; row < result.rows; ++row) {
        for (int col = 0; col < result.cols; ++col) {
            const auto& s = result.at(row, col);
            if (!s || *s <= 0.0 || options.alpha == 0.0) continue;
            image::blend_rect(out, col * p.stride_px, row * p.stride_px, p.size_px, p.size_px, image::heat_color(*s),
                              options.alpha * *s);
        }
    }
    if (options.outline_positive && options.alpha > 0.0) {
        const int t = std::max(2, p.size_px / 100);
        const image::Rgb red{220, 30, 30};
        for (int row = 0; row < result.rows; ++row) {
            for (int col = 0; col < result.cols; ++col) {
                const auto& s = result.at(row, col);
                if (!s || *s < p.threshold || *s <= 0.0) continue;
                const int x = col * p.stride_px, y = row * p.stride_px, n = p.size_px;
                image::fill_rect(out, x, y, n, t, red);
                image::fill_rect(out, x, y + n - t, n, t, red);
                image::fill_rect(out, x, y, t, n, red);
                image::fill_rect(out, x + n - t, y, t, n, red);
            }
        }
    }

    // Legend: colour ramp from 0 to 1, then the threshold and verdict.
    const int scale = std::max(1, slide.width / 1000);
    const int y0 = slide.height + 8;
    const int ramp_w = std::min(slide.width / 3, 200 * scale);
    const int ramp_h = 7 * scale;
    for (int i = 0; i < ramp_w; ++i) {
        image::fill_rect(out, 8 + i, y0, 1, ramp_h, image::heat_color(static_cast<double>(i) / std::max(1, ramp_w - 1)));
    }
    char text[96];
    std::snprintf(text, sizeof text, "0-1  THRESHOLD %.2f  %s", p.threshold, to_string(result.verdict).c_str());
    std::string label = text;
    std::transform(label.begin(), label.end(), label.begin(), [](unsigned char c) { return std::toupper(c); });
    image::draw_text(out, 16 + ramp_w, y0, label, {0, 0, 0}, scale);
    return out;
}

void render_overlay(const ScanResult& result, const std::filesystem::path& image_path,
                    const std::filesystem::path& out_path, const OverlayOptions& options) {
    image::write_png(out_path, render_overlay(result, image::read(image_path), options));
}

Classification classify(const model::ModelBundle& bundle, const image::Image& patch, double threshold) {
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw PreconditionError("threshold must lie in [0,1]");
    if (patch.empty()) throw PreconditionError("empty patch image");
    const auto& shape = bundle.model.spec().input_shape;
    nn::Tensor batch({1, shape[0], shape[1], shape[2]});
    corpus::fill_sample(corpus::preprocess_plane(patch.channels == 1 ? patch : image::to_gray(patch),
                                                 static_cast<int>(shape[0]), static_cast<int>(shape[1])),
                        batch, 0);
    const auto t0 = Clock::now();
    const double p = model::fungus_scores(bundle.model, batch)[0];
    Classification c;
    c.latency_ms = ms_since(t0);
    c.fungus_probability = p;
    c.threshold = threshold;
    c.label = p >= threshold ? "fungus" : "keratin";
    return c;
}

json to_json(const Classification& c, bool include_timing) {
    json j{{"fungus_probability", c.fungus_probability}, {"label", c.label}, {"threshold", c.threshold}};
    if (include_timing) j["latency_ms"] = c.latency_ms;
    return j;
}

BenchmarkResult benchmark(const model::ModelBundle& bundle, std::size_t n_patches, std::size_t batch_size,
                          std::uint64_t seed) {
    if (n_patches < 100) throw PreconditionError("benchmark needs at least 100 patches (got " + std::to_string(n_patches) + ")");
    if (batch_size < 1) throw PreconditionError("batch_size must be at least 1");
    const auto& shape = bundle.model.spec().input_shape;
    Rng rng(seed);
    auto make = [&](std::size_t n) {
        nn::Tensor t({n, shape[0], shape[1], shape[2]});
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform();
        return t;
    };
    model::fungus_scores(bundle.model, make(std::min(batch_size, n_patches)));  // warm-up, not timed

    std::vector<double> per_patch;
    per_patch.reserve(n_patches);
    for (std::size_t done = 0; done < n_patches;) {
        const std::size_t n = std::min(batch_size, n_patches - done);
        const nn::Tensor batch = make(n);
        const auto t0 = Clock::now();
        model::fungus_scores(bundle.model, batch);
        const double each = ms_since(t0) / static_cast<double>(n);
        per_patch.insert(per_patch.end(), n, each);
        done += n;
    }
    BenchmarkResult r;
    r.n_patches = n_patches;
    r.batch_size = batch_size;
    r.mean_ms = std::accumulate(per_patch.begin(), per_patch.end(), 0.0) / static_cast<double>(per_patch.size());
    std::sort(per_patch.begin(), per_patch.end());
    const std::size_t k = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(per_patch.size()))) - 1;
    r.p95_ms = per_patch[k];
    r.backbone = model::to_string(bundle.model.spec().backbone);
    r.hardware = hardware_descriptor();
    return r;
}

json to_json(const BenchmarkResult& b) {
    return json{{"n_patches", b.n_patches}, {"batch_size", b.batch_size}, {"mean_ms", b.mean_ms},
                {"p95_ms", b.p95_ms},         {"backbone", b.backbone},     {"hardware", b.hardware}};
}

std::string hardware_descriptor() {
    std::string cpu = "unknown cpu";
    std::ifstream in("/proc/cpuinfo");
    for (std::string line; std::getline(in, line);) {
        if (line.rfind("model name", 0) == 0) {
            const auto colon = line.find(':');
            if (colon != std::string::npos) cpu = line.substr(colon + 2);
            break;
        }
    }
    return cpu + ", " + std::to_string(std::max(1u, std::thread::hardware_concurrency())) + " logical cores, " +
           std::string(simd::isa_name(simd::kernels().isa)) + " kernels";
}

}  // namespace kohscan::scan
