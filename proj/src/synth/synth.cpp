#include "kohscan/synth/synth.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <numbers>
#include <thread>

#include "kohscan/corpus/tiling.hpp"
#include "kohscan/util/error.hpp"
#include "kohscan/util/log.hpp"

namespace kohscan::synth {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kStepPx = 8.0;
constexpr int kOutlineVertices = 36;
constexpr double kMaxModulation = 0.06;

void check_range(const Range& r, const char* name) {
    if (!(r.lo > 0.0) || !(r.hi >= r.lo)) throw PreconditionError(std::string(name) + " range must be positive and non-empty");
}

void check_range(const IntRange& r, const char* name, bool allow_zero) {
    if (r.lo < (allow_zero ? 0 : 1) || r.hi < r.lo) {
        throw PreconditionError(std::string(name) + " range must be non-empty and " + (allow_zero ? "non-negative" : "positive"));
    }
}

Point sample_disk(const Point& c, double radius, Rng& rng) {
    if (radius <= 0.0) return c;
    const double r = radius * std::sqrt(rng.uniform());
    const double t = rng.uniform(0.0, kTwoPi);
    return {c.x + r * std::cos(t), c.y + r * std::sin(t)};
}

std::vector<Point> random_walk(Point start, double heading, double length, double curvature, Rng& rng) {
    const int steps = std::max(1, static_cast<int>(std::ceil(length / kStepPx)));
    std::vector<Point> pts{start};
    pts.reserve(static_cast<std::size_t>(steps) + 1);
    Point p = start;
    for (int i = 0; i < steps; ++i) {
        heading += curvature * rng.normal();
        p = {p.x + kStepPx * std::cos(heading), p.y + kStepPx * std::sin(heading)};
        pts.push_back(p);
    }
    return pts;
}

double segment_distance(double px, double py, const Point& a, const Point& b) {
    const double dx = b.x - a.x;
    const double dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0.0 ? ((px - a.x) * dx + (py - a.y) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double ex = px - (a.x + t * dx);
    const double ey = py - (a.y + t * dy);
    return std::sqrt(ex * ex + ey * ey);
}

struct Box {
    int x0, y0, x1, y1;  // half-open
    bool empty() const { return x1 <= x0 || y1 <= y0; }
};

Box clip_box(double minx, double miny, double maxx, double maxy, double pad, const Canvas& c) {
    return Box{std::max(0, static_cast<int>(std::floor(minx - pad))), std::max(0, static_cast<int>(std::floor(miny - pad))),
               std::min(c.width, static_cast<int>(std::ceil(maxx + pad)) + 1),
               std::min(c.height, static_cast<int>(std::ceil(maxy + pad)) + 1)};
}

// Septa at jittered arc-length spacing along a polyline; returns (point, unit tangent) pairs.
void place_septa(const std::vector<Point>& line, double spacing, Rng& rng, std::vector<Point>& points,
                 std::vector<Point>& tangents) {
    double next = spacing * rng.uniform(0.3, 1.0);
    double walked = 0.0;
    for (std::size_t i = 1; i < line.size(); ++i) {
        const double dx = line[i].x - line[i - 1].x;
        const double dy = line[i].y - line[i - 1].y;
        const double len = std::hypot(dx, dy);
        if (len == 0.0) continue;
        while (next <= walked + len) {
            const double t = (next - walked) / len;
            points.push_back({line[i - 1].x + t * dx, line[i - 1].y + t * dy});
            tangents.push_back({dx / len, dy / len});
            next += spacing * rng.uniform(0.8, 1.2);
        }
        walked += len;
    }
}

}  // namespace

void Canvas::add(int x, int y, double a) {
    float& v = absorb[static_cast<std::size_t>(y) * width + x];
    v = static_cast<float>(1.0 - (1.0 - v) * (1.0 - std::clamp(a, 0.0, 1.0)));
}

void SynthConfig::validate() const {
    if (n_slides_per_class < 1) throw PreconditionError("n_slides_per_class must be at least 1");
    if (width_px <= 0 || height_px <= 0) throw PreconditionError("slide size must be positive");
    check_range(filament.count, "filament count", false);
    check_range(filament.width_px, "filament width");
    check_range(filament.length_px, "filament length");
    if (!(filament.curvature >= 0.0)) throw PreconditionError("filament curvature must be non-negative");
    if (!(filament.septum_spacing_px > 0.0)) throw PreconditionError("septum spacing must be positive");
    if (!(filament.branch_probability >= 0.0 && filament.branch_probability <= 1.0)) {
        throw PreconditionError("branch probability must lie in [0,1]");
    }
    check_range(blob.count, "blob count", false);
    check_range(blob.radius_px, "blob radius");
    check_range(blobs_on_positive, "positive-slide blob count", true);
    if (!(noise_sigma >= 0.0)) throw PreconditionError("noise_sigma must be non-negative");
    if (patch_size_px <= 0 || stride_px <= 0) throw PreconditionError("patch size and stride must be positive");
    if (patch_size_px > std::min(width_px, height_px)) throw PreconditionError("patch larger than the slide");
    if (!(min_content >= 0.0 && min_content <= 1.0)) throw PreconditionError("min_content must lie in [0,1]");
    if (!(min_filament_px >= 0.0)) throw PreconditionError("min_filament_px must be non-negative");
    if (png_compression < 0 || png_compression > 9) throw PreconditionError("png_compression must lie in 0..9");
}

SynthConfig SynthConfig::full_size() {
    SynthConfig c;
    c.width_px = 6000;
    c.height_px = 4000;
    return c;
}

void to_json(json& j, const SynthConfig& c) {
    j = json{{"n_slides_per_class", c.n_slides_per_class},
             {"width_px", c.width_px},
             {"height_px", c.height_px},
             {"filament",
              {{"count", {c.filament.count.lo, c.filament.count.hi}},
               {"width_px", {c.filament.width_px.lo, c.filament.width_px.hi}},
               {"length_px", {c.filament.length_px.lo, c.filament.length_px.hi}},
               {"curvature", c.filament.curvature},
               {"septum_spacing_px", c.filament.septum_spacing_px},
               {"branch_probability", c.filament.branch_probability}}},
             {"blob",
              {{"count", {c.blob.count.lo, c.blob.count.hi}},
               {"radius_px", {c.blob.radius_px.lo, c.blob.radius_px.hi}}}},
             {"blobs_on_positive", {c.blobs_on_positive.lo, c.blobs_on_positive.hi}},
             {"noise_sigma", c.noise_sigma},
             {"vignette", c.vignette},
             {"seed", c.seed},
             {"patch_size_px", c.patch_size_px},
             {"stride_px", c.stride_px},
             {"min_content", c.min_content},
             {"min_filament_px", c.min_filament_px},
             {"png_compression", c.png_compression}};
}

void from_json(const json& j, SynthConfig& c) {
    c = SynthConfig{};
    const auto range = [](const json& v, Range& r) { r = Range{v.at(0).get<double>(), v.at(1).get<double>()}; };
    const auto irange = [](const json& v, IntRange& r) { r = IntRange{v.at(0).get<int>(), v.at(1).get<int>()}; };
    c.n_slides_per_class = j.value("n_slides_per_class", c.n_slides_per_class);
    c.width_px = j.value("width_px", c.width_px);
    c.height_px = j.value("height_px", c.height_px);
    if (j.contains("filament")) {
        const auto& f = j.at("filament");
        if (f.contains("count")) irange(f.at("count"), c.filament.count);
        if (f.contains("width_px")) range(f.at("width_px"), c.filament.width_px);
        if (f.contains("length_px")) range(f.at("length_px"), c.filament.length_px);
        c.filament.curvature = f.value("curvature", c.filament.curvature);
        c.filament.septum_spacing_px = f.value("septum_spacing_px", c.filament.septum_spacing_px);
        c.filament.branch_probability = f.value("branch_probability", c.filament.branch_probability);
    }
    if (j.contains("blob")) {
        const auto& b = j.at("blob");
        if (b.contains("count")) irange(b.at("count"), c.blob.count);
        if (b.contains("radius_px")) range(b.at("radius_px"), c.blob.radius_px);
    }
    if (j.contains("blobs_on_positive")) irange(j.at("blobs_on_positive"), c.blobs_on_positive);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.vignette = j.value("vignette", c.vignette);
    c.seed = j.value("seed", c.seed);
    c.patch_size_px = j.value("patch_size_px", c.patch_size_px);
    c.stride_px = j.value("stride_px", c.stride_px);
    c.min_content = j.value("min_content", c.min_content);
    c.min_filament_px = j.value("min_filament_px", c.min_filament_px);
    c.png_compression = j.value("png_compression", c.png_compression);
}

HyphaGeometry draw_hypha(Canvas& canvas, const HyphaParams& params, Rng& rng) {
    if (!(params.width_px > 0.0)) throw PreconditionError("hypha width must be positive");
    if (!(params.length_px > 0.0)) throw PreconditionError("hypha length must be positive");
    if (!(params.septum_spacing_px > 0.0)) throw PreconditionError("septum spacing must be positive");
    if (canvas.width <= 0 || canvas.height <= 0) throw PreconditionError("empty canvas");

    HyphaGeometry geo;
    geo.width_px = params.width_px;
    const Point start = sample_disk(params.region_center, params.region_radius, rng);
    const double heading = rng.uniform(0.0, kTwoPi);
    geo.polylines.push_back(random_walk(start, heading, params.length_px, params.curvature, rng));
    const auto& trunk = geo.polylines.front();
    if (params.branch_probability > 0.0 && rng.uniform() < params.branch_probability && trunk.size() >= 5) {
        const std::size_t lo = trunk.size() / 4;
        const std::size_t hi = 3 * trunk.size() / 4;
        const std::size_t k = lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
        const std::size_t k2 = std::min(k + 1, trunk.size() - 1);
        const double base = std::atan2(trunk[k2].y - trunk[k - 1].y, trunk[k2].x - trunk[k - 1].x);
        const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
        const double angle = base + side * rng.uniform(0.5, 1.0);
        const double length = params.length_px * rng.uniform(0.3, 0.6);
        Point origin = trunk[k];
        geo.polylines.push_back(random_walk(origin, angle, length, params.curvature, rng));
    }

    std::vector<Point> tangents;
    for (const auto& line : geo.polylines) place_septa(line, params.septum_spacing_px, rng, geo.septa, tangents);

    // Distance field over the union bounding box, then one composite per pixel.
    const double half = params.width_px / 2.0;
    double minx = std::numeric_limits<double>::infinity(), miny = minx;
    double maxx = -minx, maxy = -minx;
    for (const auto& line : geo.polylines) {
        for (const auto& p : line) {
            minx = std::min(minx, p.x);
            miny = std::min(miny, p.y);
            maxx = std::max(maxx, p.x);
            maxy = std::max(maxy, p.y);
        }
    }
    const Box box = clip_box(minx, miny, maxx, maxy, half + 2.0, canvas);
    if (box.empty()) return geo;
    const int bw = box.x1 - box.x0;
    const int bh = box.y1 - box.y0;
    std::vector<float> dist(static_cast<std::size_t>(bw) * bh, std::numeric_limits<float>::infinity());
    std::vector<std::uint8_t> septum(dist.size(), 0);
    const auto local = [&](int x, int y) { return static_cast<std::size_t>(y - box.y0) * bw + (x - box.x0); };
    for (const auto& line : geo.polylines) {
        for (std::size_t i = 1; i < line.size(); ++i) {
            const Point& a = line[i - 1];
            const Point& b = line[i];
            const Box sb = clip_box(std::min(a.x, b.x), std::min(a.y, b.y), std::max(a.x, b.x), std::max(a.y, b.y),
                                    half + 1.0, canvas);
            for (int y = sb.y0; y < sb.y1; ++y) {
                for (int x = sb.x0; x < sb.x1; ++x) {
                    const double d = segment_distance(x + 0.5, y + 0.5, a, b);
                    float& slot = dist[local(x, y)];
                    slot = std::min(slot, static_cast<float>(d));
                }
            }
        }
    }
    for (std::size_t s = 0; s < geo.septa.size(); ++s) {
        const Point& c = geo.septa[s];
        const Point n{-tangents[s].y, tangents[s].x};
        const Point a{c.x - n.x * half, c.y - n.y * half};
        const Point b{c.x + n.x * half, c.y + n.y * half};
        const Box sb = clip_box(std::min(a.x, b.x), std::min(a.y, b.y), std::max(a.x, b.x), std::max(a.y, b.y), 1.5,
                                canvas);
        for (int y = sb.y0; y < sb.y1; ++y) {
            for (int x = sb.x0; x < sb.x1; ++x) {
                if (segment_distance(x + 0.5, y + 0.5, a, b) <= 0.9) septum[local(x, y)] = 1;
            }
        }
    }
    for (int y = box.y0; y < box.y1; ++y) {
        for (int x = box.x0; x < box.x1; ++x) {
            const std::size_t i = local(x, y);
            const double d = dist[i];
            if (!(d <= half)) continue;
            const double u = d / half;
            double a = params.strength * (0.35 + 0.65 * u * u * u);
            if (septum[i]) a = std::max(a, std::min(1.0, params.strength * 1.3));
            canvas.add(x, y, a);
        }
    }
    return geo;
}

std::vector<BlobGeometry> draw_keratin(Canvas& canvas, const KeratinParams& params, Rng& rng) {
    if (params.count < 0) throw PreconditionError("blob count must be non-negative");
    if (params.count > 0) check_range(params.radius_px, "blob radius");
    std::vector<BlobGeometry> out;
    for (int b = 0; b < params.count; ++b) {
        BlobGeometry g;
        g.center = sample_disk(params.region_center, params.region_radius, rng);
        g.radius = params.radius_px.sample(rng);
        double amp[4];
        double phase[4];
        for (int k = 0; k < 4; ++k) {
            amp[k] = rng.uniform(-kMaxModulation / 4, kMaxModulation / 4);
            phase[k] = rng.uniform(0.0, kTwoPi);
        }
        std::vector<double> radii(kOutlineVertices);
        for (int v = 0; v < kOutlineVertices; ++v) {
            const double t = kTwoPi * v / kOutlineVertices;
            double m = 0.0;
            for (int k = 0; k < 4; ++k) m += amp[k] * std::cos((k + 2) * t + phase[k]);
            radii[static_cast<std::size_t>(v)] = g.radius * (1.0 + m);
            g.outline.push_back({g.center.x + radii[static_cast<std::size_t>(v)] * std::cos(t),
                                 g.center.y + radii[static_cast<std::size_t>(v)] * std::sin(t)});
        }
        // Mottled interior: three oriented gratings.
        double fx[3], fy[3], ph[3];
        for (int k = 0; k < 3; ++k) {
            const double f = rng.uniform(0.05, 0.25);
            const double o = rng.uniform(0.0, kTwoPi);
            fx[k] = f * std::cos(o);
            fy[k] = f * std::sin(o);
            ph[k] = rng.uniform(0.0, kTwoPi);
        }
        const double rmax = *std::max_element(radii.begin(), radii.end());
        const Box box = clip_box(g.center.x - rmax, g.center.y - rmax, g.center.x + rmax, g.center.y + rmax, 1.0, canvas);
        for (int y = box.y0; y < box.y1; ++y) {
            for (int x = box.x0; x < box.x1; ++x) {
                const double dx = x + 0.5 - g.center.x;
                const double dy = y + 0.5 - g.center.y;
                const double d = std::hypot(dx, dy);
                if (d > rmax) continue;
                double t = std::atan2(dy, dx);
                if (t < 0) t += kTwoPi;
                const double pos = t / kTwoPi * kOutlineVertices;
                const int v0 = static_cast<int>(pos) % kOutlineVertices;
                const int v1 = (v0 + 1) % kOutlineVertices;
                const double f = pos - std::floor(pos);
                const double r = (1.0 - f) * radii[static_cast<std::size_t>(v0)] + f * radii[static_cast<std::size_t>(v1)];
                const double alpha = std::clamp((r - d) / 1.5, 0.0, 1.0);
                if (alpha <= 0.0) continue;
                double tex = 0.0;
                for (int k = 0; k < 3; ++k) tex += std::sin(fx[k] * x + fy[k] * y + ph[k]);
                canvas.add(x, y, params.strength * alpha * (0.75 + 0.25 * tex / 3.0));
            }
        }
        out.push_back(std::move(g));
    }
    return out;
}

bool segment_intersects(Point a, Point b, const Rect& r) {
    double t0 = 0.0;
    double t1 = 1.0;
    const double dx = b.x - a.x;
    const double dy = b.y - a.y;
    const double p[4] = {-dx, dx, -dy, dy};
    const double q[4] = {a.x - r.x0, r.x1 - a.x, a.y - r.y0, r.y1 - a.y};
    for (int i = 0; i < 4; ++i) {
        if (p[i] == 0.0) {
            if (q[i] < 0.0) return false;
            continue;
        }
        const double t = q[i] / p[i];
        if (p[i] < 0.0) {
            if (t > t1) return false;
            t0 = std::max(t0, t);
        } else {
            if (t < t0) return false;
            t1 = std::min(t1, t);
        }
    }
    return t0 <= t1;
}

bool intersects(const HyphaGeometry& h, const Rect& r) {
    for (const auto& line : h.polylines) {
        for (std::size_t i = 1; i < line.size(); ++i) {
            if (segment_intersects(line[i - 1], line[i], r)) return true;
        }
    }
    return false;
}

bool intersects(const BlobGeometry& b, const Rect& r) {
    if (b.center.x >= r.x0 && b.center.x <= r.x1 && b.center.y >= r.y0 && b.center.y <= r.y1) return true;
    const std::size_t n = b.outline.size();
    for (std::size_t i = 0; i < n; ++i) {
        if (segment_intersects(b.outline[i], b.outline[(i + 1) % n], r)) return true;
    }
    return false;
}

bool Field::contains(int x, int y) const {
    if (!enabled) return true;
    const double dx = x + 0.5 - center.x;
    const double dy = y + 0.5 - center.y;
    return dx * dx + dy * dy <= radius * radius;
}

namespace {

json points_json(const std::vector<Point>& pts) {
    json a = json::array();
    for (const auto& p : pts) a.push_back({p.x, p.y});
    return a;
}

std::vector<Point> points_from(const json& a) {
    std::vector<Point> out;
    for (const auto& p : a) out.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    return out;
}

}  // namespace

json to_json(const SlideGeometry& g) {
    json hyphae = json::array();
    for (const auto& h : g.hyphae) {
        json lines = json::array();
        for (const auto& l : h.polylines) lines.push_back(points_json(l));
        hyphae.push_back({{"width_px", h.width_px}, {"polylines", lines}, {"septa", points_json(h.septa)}});
    }
    json blobs = json::array();
    for (const auto& b : g.blobs) {
        blobs.push_back({{"center", {b.center.x, b.center.y}}, {"radius", b.radius}, {"outline", points_json(b.outline)}});
    }
    return json{{"image_id", g.image_id},
                {"slide_class", corpus::to_string(g.slide_class)},
                {"width_px", g.width},
                {"height_px", g.height},
                {"field", {{"enabled", g.field.enabled}, {"center", {g.field.center.x, g.field.center.y}}, {"radius", g.field.radius}}},
                {"hyphae", hyphae},
                {"blobs", blobs}};
}

SlideGeometry slide_geometry_from_json(const json& j) {
    SlideGeometry g;
    g.image_id = j.at("image_id").get<std::string>();
    g.slide_class = corpus::parse_slide_class(j.at("slide_class").get<std::string>());
    g.width = j.at("width_px").get<int>();
    g.height = j.at("height_px").get<int>();
    const auto& f = j.at("field");
    g.field.enabled = f.at("enabled").get<bool>();
    g.field.center = {f.at("center").at(0).get<double>(), f.at("center").at(1).get<double>()};
    g.field.radius = f.at("radius").get<double>();
    for (const auto& h : j.at("hyphae")) {
        HyphaGeometry hg;
        hg.width_px = h.at("width_px").get<double>();
        for (const auto& l : h.at("polylines")) hg.polylines.push_back(points_from(l));
        hg.septa = points_from(h.at("septa"));
        g.hyphae.push_back(std::move(hg));
    }
    for (const auto& b : j.at("blobs")) {
        BlobGeometry bg;
        bg.center = {b.at("center").at(0).get<double>(), b.at("center").at(1).get<double>()};
        bg.radius = b.at("radius").get<double>();
        bg.outline = points_from(b.at("outline"));
        g.blobs.push_back(std::move(bg));
    }
    return g;
}

corpus::Label label_patch(const SlideGeometry& g, const Rect& patch) {
    for (const auto& h : g.hyphae) {
        if (intersects(h, patch)) return corpus::Label::fungus;
    }
    for (const auto& b : g.blobs) {
        if (intersects(b, patch)) return corpus::Label::keratin;
    }
    return corpus::Label::unlabeled;
}

double visible_filament_length(const SlideGeometry& g, const Rect& patch) {
    const double r2 = g.field.radius * g.field.radius;
    const auto in_field = [&](double x, double y) {
        if (!g.field.enabled) return true;
        const double dx = x - g.field.center.x;
        const double dy = y - g.field.center.y;
        return dx * dx + dy * dy <= r2;
    };
    double total = 0.0;
    for (const auto& h : g.hyphae) {
        for (const auto& line : h.polylines) {
            for (std::size_t i = 1; i < line.size(); ++i) {
                const Point& a = line[i - 1];
                const Point& b = line[i];
                if (!segment_intersects(a, b, patch)) continue;
                const double len = std::hypot(b.x - a.x, b.y - a.y);
                const int n = std::max(1, static_cast<int>(std::ceil(len * 4.0)));
                for (int k = 0; k < n; ++k) {
                    const double t = (k + 0.5) / n;
                    const double x = a.x + t * (b.x - a.x);
                    const double y = a.y + t * (b.y - a.y);
                    if (x >= patch.x0 && x <= patch.x1 && y >= patch.y0 && y <= patch.y1 && in_field(x, y)) {
                        total += len / n;
                    }
                }
            }
        }
    }
    return total;
}

namespace {

std::string slide_id(bool positive, int number) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%04d", positive ? "fungus" : "keratin", number);
    return buf;
}

}  // namespace

RenderedSlide render_slide(const SynthConfig& config, int index) {
    config.validate();
    if (index < 0 || index >= 2 * config.n_slides_per_class) throw PreconditionError("slide index out of range");
    Rng rng(Rng::derive(config.seed, static_cast<std::uint64_t>(index)));
    const bool positive = index < config.n_slides_per_class;
    const int w = config.width_px;
    const int h = config.height_px;

    RenderedSlide out;
    SlideGeometry& g = out.geometry;
    g.image_id = slide_id(positive, positive ? index : index - config.n_slides_per_class);
    g.slide_class = positive ? corpus::SlideClass::fungus_positive : corpus::SlideClass::keratin_only;
    g.width = w;
    g.height = h;
    g.field.enabled = config.vignette;
    g.field.center = {w / 2.0 + rng.uniform(-0.03, 0.03) * w, h / 2.0 + rng.uniform(-0.03, 0.03) * h};
    g.field.radius = rng.uniform(0.55, 0.68) * std::min(w, h);

    const double background = rng.uniform(150.0, 215.0);
    const double hypha_strength = rng.uniform(0.30, 0.55);
    const double keratin_strength = rng.uniform(0.20, 0.50);
    const Point region_center = config.vignette ? g.field.center : Point{w / 2.0, h / 2.0};
    const double region_radius = config.vignette ? 0.9 * g.field.radius : 0.5 * std::min(w, h);

    Canvas canvas(w, h);
    if (positive) {
        const int n = config.filament.count.sample(rng);
        for (int i = 0; i < n; ++i) {
            HyphaParams hp;
            hp.width_px = config.filament.width_px.sample(rng);
            hp.length_px = config.filament.length_px.sample(rng);
            hp.curvature = config.filament.curvature;
            hp.septum_spacing_px = config.filament.septum_spacing_px;
            hp.branch_probability = config.filament.branch_probability;
            hp.strength = hypha_strength * rng.uniform(0.85, 1.15);
            hp.region_center = region_center;
            hp.region_radius = region_radius;
            g.hyphae.push_back(draw_hypha(canvas, hp, rng));
        }
    }
    KeratinParams kp;
    kp.count = positive ? config.blobs_on_positive.sample(rng) : config.blob.count.sample(rng);
    kp.radius_px = config.blob.radius_px;
    kp.strength = keratin_strength;
    kp.region_center = region_center;
    kp.region_radius = region_radius;
    g.blobs = draw_keratin(canvas, kp, rng);

    // Unlabelled debris on every slide.
    KeratinParams debris;
    debris.count = rng.integer(5, 25);
    debris.radius_px = Range{2.0, 6.0};
    debris.strength = rng.uniform(0.2, 0.6);
    debris.region_center = region_center;
    debris.region_radius = region_radius;
    draw_keratin(canvas, debris, rng);

    const double wx = rng.uniform(0.001, 0.004);
    const double wy = rng.uniform(0.001, 0.004);
    const double px = rng.uniform(0.0, kTwoPi);
    const double py = rng.uniform(0.0, kTwoPi);
    // Sensor noise from a per-slide table of normal draws, four 16-bit picks per engine call.
    std::vector<double> noise(1u << 16);
    for (auto& v : noise) v = config.noise_sigma * rng.normal();
    std::uint64_t bits = 0;
    int left = 0;
    image::Image img(w, h, 1);
    std::vector<double> sx(static_cast<std::size_t>(w));
    for (int x = 0; x < w; ++x) sx[static_cast<std::size_t>(x)] = 0.04 * std::sin(wx * x + px);
    for (int y = 0; y < h; ++y) {
        const double sy = std::sin(wy * y + py);
        for (int x = 0; x < w; ++x) {
            double illum = 1.0 + sx[static_cast<std::size_t>(x)] * sy;
            if (g.field.enabled) {
                const double dx = x + 0.5 - g.field.center.x;
                const double dy = y + 0.5 - g.field.center.y;
                const double r2 = (dx * dx + dy * dy) / (g.field.radius * g.field.radius);
                illum = r2 <= 1.0 ? illum - 0.12 * r2 : 0.08;
            }
            double v = background * illum * (1.0 - canvas.at(x, y));
            if (config.noise_sigma > 0.0) {
                if (left == 0) {
                    bits = rng.next_u64();
                    left = 4;
                }
                v += noise[bits & 0xFFFF];
                bits >>= 16;
                --left;
            }
            img.at(x, y) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
    }
    out.pixels = std::move(img);
    return out;
}

std::vector<corpus::PatchRecord> label_grid(const SynthConfig& config, const SlideGeometry& g) {
    std::vector<corpus::PatchRecord> out;
    const int s = config.patch_size_px;
    const int nx = corpus::grid_positions(g.width, s, config.stride_px);
    const int ny = corpus::grid_positions(g.height, s, config.stride_px);
    for (int j = 0; j < ny; ++j) {
        for (int i = 0; i < nx; ++i) {
            const int x = i * config.stride_px;
            const int y = j * config.stride_px;
            std::size_t inside = 0;
            if (g.field.enabled) {
                for (int yy = y; yy < y + s; ++yy) {
                    for (int xx = x; xx < x + s; ++xx) inside += g.field.contains(xx, yy) ? 1 : 0;
                }
            } else {
                inside = static_cast<std::size_t>(s) * s;
            }
            const double content = static_cast<double>(inside) / (static_cast<double>(s) * s);
            if (content < config.min_content) continue;
            const Rect rect{double(x), double(y), double(x + s), double(y + s)};
            const corpus::Label label = label_patch(g, rect);
            if (label == corpus::Label::unlabeled) continue;
            if (label == corpus::Label::fungus && visible_filament_length(g, rect) < config.min_filament_px) continue;
            corpus::PatchRecord p;
            p.patch_id = corpus::patch_id_for(g.image_id, x, y);
            p.image_id = g.image_id;
            p.x = x;
            p.y = y;
            p.size_px = s;
            p.label = label;
            p.content_fraction = content;
            out.push_back(std::move(p));
        }
    }
    return out;
}

corpus::Manifest generate_corpus(const SynthConfig& config, const fs::path& out_dir, int workers) {
    config.validate();
    std::error_code ec;
    fs::create_directories(out_dir / "slides", ec);
    if (ec || !fs::is_directory(out_dir / "slides")) {
        throw Error("cannot create output directory " + (out_dir / "slides").string() + ": " + ec.message());
    }
    const int total = 2 * config.n_slides_per_class;
    std::vector<SlideGeometry> geometry(static_cast<std::size_t>(total));
    std::vector<std::vector<corpus::PatchRecord>> patches(static_cast<std::size_t>(total));

    std::atomic<int> next{0};
    std::exception_ptr failure;
    std::mutex mutex;
    auto run = [&] {
        for (;;) {
            const int i = next.fetch_add(1);
            if (i >= total) return;
            try {
                RenderedSlide slide = render_slide(config, i);
                const fs::path path = out_dir / "slides" / (slide.geometry.image_id + ".png");
                image::write_png(path, slide.pixels, config.png_compression);
                patches[static_cast<std::size_t>(i)] = label_grid(config, slide.geometry);
                geometry[static_cast<std::size_t>(i)] = std::move(slide.geometry);
            } catch (...) {
                std::lock_guard lock(mutex);
                if (!failure) failure = std::current_exception();
                next.store(total);
                return;
            }
        }
    };
    const int n_threads = std::clamp(workers, 1, total);
    if (n_threads == 1) {
        run();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(run);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);

    corpus::Manifest m;
    m.root = out_dir;
    json slides = json::array();
    for (int i = 0; i < total; ++i) {
        const auto& g = geometry[static_cast<std::size_t>(i)];
        m.slides.push_back(corpus::SlideImage{g.image_id, "slides/" + g.image_id + ".png", g.width, g.height,
                                              g.image_id, g.slide_class});
        for (auto& p : patches[static_cast<std::size_t>(i)]) m.patches.push_back(std::move(p));
        slides.push_back(to_json(g));
    }
    m.canonicalize();
    m.refresh_stats();
    corpus::write_manifest(m, out_dir / "manifest.jsonl");
    {
        std::ofstream out(out_dir / "geometry.json", std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + (out_dir / "geometry.json").string());
        out << json{{"config", config}, {"slides", slides}}.dump() << '\n';
    }
    log::info("synth: " + std::to_string(total) + " slides, " + std::to_string(m.stats.fungus) + " fungus and " +
              std::to_string(m.stats.keratin) + " keratin patches");
    return m;
}

}  // namespace kohscan::synth
