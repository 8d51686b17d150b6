#include "kohscan/corpus/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "kohscan/image/image.hpp"
#include "kohscan/util/error.hpp"
#include "kohscan/util/log.hpp"

namespace kohscan::corpus {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(SlideClass c) {
    switch (c) {
        case SlideClass::fungus_positive: return "fungus_positive";
        case SlideClass::keratin_only: return "keratin_only";
        case SlideClass::unlabeled: return "unlabeled";
    }
    return "?";
}

std::string to_string(Label l) {
    switch (l) {
        case Label::fungus: return "fungus";
        case Label::keratin: return "keratin";
        case Label::unlabeled: return "unlabeled";
    }
    return "?";
}

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
        case Split::unassigned: return "unassigned";
    }
    return "?";
}

SlideClass parse_slide_class(const std::string& s) {
    if (s == "fungus_positive") return SlideClass::fungus_positive;
    if (s == "keratin_only") return SlideClass::keratin_only;
    if (s == "unlabeled") return SlideClass::unlabeled;
    throw FormatError("unknown slide_class '" + s + "'");
}

Label parse_label(const std::string& s) {
    if (s == "fungus") return Label::fungus;
    if (s == "keratin") return Label::keratin;
    if (s == "unlabeled" || s.empty()) return Label::unlabeled;
    throw FormatError("unknown label '" + s + "'");
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    if (s == "unassigned") return Split::unassigned;
    throw FormatError("unknown split '" + s + "'");
}

const SlideImage* Manifest::find_slide(const std::string& image_id) const {
    for (const auto& s : slides) {
        if (s.image_id == image_id) return &s;
    }
    return nullptr;
}

fs::path Manifest::resolve(const SlideImage& slide) const {
    fs::path p(slide.path);
    if (p.is_absolute() || root.empty()) return p;
    return root / p;
}

ManifestStats compute_stats(const Manifest& m) {
    ManifestStats s;
    s.slides = m.slides.size();
    s.total = m.patches.size();
    for (const auto& p : m.patches) {
        switch (p.label) {
            case Label::fungus: ++s.fungus; break;
            case Label::keratin: ++s.keratin; break;
            case Label::unlabeled: ++s.unlabeled; break;
        }
        switch (p.split) {
            case Split::train: ++s.train; break;
            case Split::val: ++s.val; break;
            case Split::test: ++s.test; break;
            case Split::unassigned: ++s.unassigned; break;
        }
    }
    return s;
}

void Manifest::refresh_stats() { stats = compute_stats(*this); }

void Manifest::canonicalize() {
    std::sort(slides.begin(), slides.end(),
              [](const SlideImage& a, const SlideImage& b) { return a.image_id < b.image_id; });
    std::sort(patches.begin(), patches.end(),
              [](const PatchRecord& a, const PatchRecord& b) { return a.patch_id < b.patch_id; });
}

std::vector<const PatchRecord*> Manifest::patches_in(Split split) const {
    std::vector<const PatchRecord*> out;
    for (const auto& p : patches) {
        if (p.split == split) out.push_back(&p);
    }
    return out;
}

void Manifest::validate() const {
    std::map<std::string, const SlideImage*> by_id;
    for (const auto& s : slides) {
        if (s.image_id.empty()) throw FormatError("slide with empty image_id");
        if (!by_id.emplace(s.image_id, &s).second) throw FormatError("duplicate image_id " + s.image_id);
        if (s.width_px <= 0 || s.height_px <= 0) {
            throw FormatError("slide " + s.image_id + " has non-positive dimensions");
        }
    }
    std::set<std::string> ids;
    for (const auto& p : patches) {
        if (p.patch_id.empty()) throw FormatError("patch with empty patch_id");
        if (!ids.insert(p.patch_id).second) throw FormatError("duplicate patch_id " + p.patch_id);
        auto it = by_id.find(p.image_id);
        if (it == by_id.end()) {
            throw FormatError("patch " + p.patch_id + " references unknown image_id " + p.image_id);
        }
        const SlideImage& s = *it->second;
        if (p.size_px <= 0) throw FormatError("patch " + p.patch_id + " has non-positive size_px");
        if (p.x < 0 || p.y < 0 || p.x > s.width_px - p.size_px || p.y > s.height_px - p.size_px) {
            throw FormatError("patch " + p.patch_id + " at (" + std::to_string(p.x) + "," + std::to_string(p.y) +
                              ") size " + std::to_string(p.size_px) + " exceeds slide " + s.image_id + " bounds " +
                              std::to_string(s.width_px) + "x" + std::to_string(s.height_px));
        }
        if (!(p.content_fraction >= 0.0 && p.content_fraction <= 1.0)) {
            throw FormatError("patch " + p.patch_id + " content_fraction outside [0,1]");
        }
    }
    if (stats != compute_stats(*this)) throw FormatError("manifest stats do not match records");
}

json to_json(const SlideImage& s) {
    return json{{"kind", "slide"},          {"image_id", s.image_id}, {"path", s.path},
                {"width_px", s.width_px},   {"height_px", s.height_px}, {"case_id", s.case_id},
                {"slide_class", to_string(s.slide_class)}};
}

json to_json(const PatchRecord& p) {
    return json{{"kind", "patch"},
                {"patch_id", p.patch_id},
                {"image_id", p.image_id},
                {"x", p.x},
                {"y", p.y},
                {"size_px", p.size_px},
                {"label", to_string(p.label)},
                {"split", to_string(p.split)},
                {"content_fraction", p.content_fraction}};
}

json to_json(const ManifestStats& s) {
    return json{{"slides", s.slides},   {"fungus", s.fungus}, {"keratin", s.keratin},
                {"unlabeled", s.unlabeled}, {"total", s.total},   {"train", s.train},
                {"val", s.val},         {"test", s.test},     {"unassigned", s.unassigned}};
}

namespace {

struct RowContext {
    const std::string& origin;
    std::size_t line;

    [[noreturn]] void fail(const std::string& what) const {
        throw FormatError(origin + ":" + std::to_string(line) + ": " + what);
    }

    std::string string_field(const json& row, const char* key, const std::string* fallback = nullptr) const {
        auto it = row.find(key);
        if (it == row.end()) {
            if (fallback) return *fallback;
            fail(std::string("missing field '") + key + "'");
        }
        if (!it->is_string()) fail(std::string("field '") + key + "' must be a string");
        return it->get<std::string>();
    }

    int int_field(const json& row, const char* key, const int* fallback = nullptr) const {
        auto it = row.find(key);
        if (it == row.end()) {
            if (fallback) return *fallback;
            fail(std::string("missing field '") + key + "'");
        }
        if (!it->is_number_integer()) fail(std::string("field '") + key + "' must be an integer");
        const auto v = it->get<long long>();
        if (v < -(1LL << 31) || v >= (1LL << 31)) fail(std::string("field '") + key + "' out of range");
        return static_cast<int>(v);
    }

    double real_field(const json& row, const char* key, double fallback) const {
        auto it = row.find(key);
        if (it == row.end()) return fallback;
        if (!it->is_number()) fail(std::string("field '") + key + "' must be a number");
        return it->get<double>();
    }
};

}  // namespace

Manifest parse_manifest(const std::string& text, const std::string& origin) {
    Manifest m;
    std::set<std::string> slide_ids;
    std::set<std::string> patch_ids;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    const std::string empty;
    const std::string unlabeled = "unlabeled";
    const std::string unassigned = "unassigned";
    const int zero = 0;
    const int default_size = kDefaultPatchSize;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        RowContext ctx{origin, line_no};
        json row;
        try {
            row = json::parse(line);
        } catch (const json::parse_error& e) {
            ctx.fail(std::string("malformed JSON (") + e.what() + ")");
        }
        if (!row.is_object()) ctx.fail("record is not a JSON object");
        const std::string kind = ctx.string_field(row, "kind");
        try {
            if (kind == "slide") {
                SlideImage s;
                s.image_id = ctx.string_field(row, "image_id");
                if (s.image_id.empty()) ctx.fail("empty image_id");
                s.path = ctx.string_field(row, "path");
                s.width_px = ctx.int_field(row, "width_px", &zero);
                s.height_px = ctx.int_field(row, "height_px", &zero);
                s.case_id = ctx.string_field(row, "case_id", &empty);
                s.slide_class = parse_slide_class(ctx.string_field(row, "slide_class", &unlabeled));
                if (!slide_ids.insert(s.image_id).second) ctx.fail("duplicate image_id " + s.image_id);
                m.slides.push_back(std::move(s));
            } else if (kind == "patch") {
                PatchRecord p;
                p.patch_id = ctx.string_field(row, "patch_id");
                if (p.patch_id.empty()) ctx.fail("empty patch_id");
                p.image_id = ctx.string_field(row, "image_id");
                p.x = ctx.int_field(row, "x");
                p.y = ctx.int_field(row, "y");
                p.size_px = ctx.int_field(row, "size_px", &default_size);
                p.label = parse_label(ctx.string_field(row, "label", &unlabeled));
                p.split = parse_split(ctx.string_field(row, "split", &unassigned));
                p.content_fraction = ctx.real_field(row, "content_fraction", 1.0);
                if (!(p.content_fraction >= 0.0 && p.content_fraction <= 1.0)) {
                    ctx.fail("content_fraction outside [0,1]");
                }
                if (!patch_ids.insert(p.patch_id).second) ctx.fail("duplicate patch_id " + p.patch_id);
                m.patches.push_back(std::move(p));
            } else {
                ctx.fail("unknown record kind '" + kind + "'");
            }
        } catch (const FormatError& e) {
            const std::string msg = e.what();
            if (msg.rfind(origin + ":", 0) == 0) throw;
            ctx.fail(msg);
        }
    }
    m.refresh_stats();
    return m;
}

Manifest read_manifest(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open manifest " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    Manifest m = parse_manifest(ss.str(), path.string());
    m.root = path.has_parent_path() ? path.parent_path() : fs::path(".");
    return m;
}

namespace {

std::string relative_path(const Manifest& m, const SlideImage& s, const fs::path& output_dir) {
    fs::path p(s.path);
    if (p.is_absolute()) return p.generic_string();
    const fs::path resolved = fs::absolute(m.resolve(s)).lexically_normal();
    const fs::path base = fs::absolute(output_dir.empty() ? fs::path(".") : output_dir).lexically_normal();
    fs::path rel = resolved.lexically_relative(base);
    if (rel.empty()) return resolved.generic_string();
    return rel.generic_string();
}

}  // namespace

std::string format_manifest(const Manifest& manifest, const fs::path& output_dir) {
    Manifest m = manifest;
    m.canonicalize();
    std::string out;
    for (const auto& s : m.slides) {
        SlideImage copy = s;
        copy.path = relative_path(m, s, output_dir);
        out += to_json(copy).dump();
        out += '\n';
    }
    for (const auto& p : m.patches) {
        out += to_json(p).dump();
        out += '\n';
    }
    return out;
}

void write_manifest(const Manifest& manifest, const fs::path& path) {
    const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
    std::error_code ec;
    fs::create_directories(dir, ec);
    const std::string text = format_manifest(manifest, dir);
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write manifest " + path.string());
        out << text;
        if (!out) throw Error("failed writing manifest " + path.string());
    }
    fs::rename(tmp, path);
}

Manifest ingest(const fs::path& image_dir, const fs::path& annotations) {
    Manifest m = read_manifest(annotations);
    m.root = image_dir;
    for (auto& s : m.slides) {
        const fs::path p = m.resolve(s);
        if (!fs::is_regular_file(p)) throw FormatError("missing image file " + p.string());
        image::Dimensions d;
        try {
            d = image::read_dimensions(p);
        } catch (const Error& e) {
            throw FormatError("image " + p.string() + " is not decodable: " + e.what());
        }
        if (s.width_px == 0 && s.height_px == 0) {
            s.width_px = d.width;
            s.height_px = d.height;
        } else if (s.width_px != d.width || s.height_px != d.height) {
            throw FormatError("slide " + s.image_id + " declares " + std::to_string(s.width_px) + "x" +
                              std::to_string(s.height_px) + " but " + p.string() + " is " + std::to_string(d.width) +
                              "x" + std::to_string(d.height));
        }
    }
    m.canonicalize();
    m.refresh_stats();
    m.validate();
    return m;
}

std::size_t export_patches(const Manifest& manifest, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    std::map<std::string, std::vector<const PatchRecord*>> by_slide;
    for (const auto& p : manifest.patches) {
        if (p.label != Label::unlabeled) by_slide[p.image_id].push_back(&p);
    }
    std::size_t written = 0;
    for (const auto& [image_id, patches] : by_slide) {
        const SlideImage* s = manifest.find_slide(image_id);
        if (!s) throw FormatError("patch references unknown image_id " + image_id);
        image::Image slide = image::read(manifest.resolve(*s));
        if (slide.channels != 1) slide = image::to_gray(slide);
        for (const PatchRecord* p : patches) {
            image::write_png(out_dir / (p->patch_id + ".png"), image::crop(slide, p->x, p->y, p->size_px, p->size_px));
            ++written;
        }
    }
    return written;
}

}  // namespace kohscan::corpus
