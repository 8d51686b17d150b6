// kohscan: command-line entry point.
//
// Every subcommand accepts --config FILE: UTF-8 text with one "key = value"
// per line, '#' comments and blank lines ignored. Keys are the subcommand's
// long flag names without the leading dashes ('_' and '-' are equivalent).
// Flags given on the command line override the file.
//
// Exit codes: 0 success, 1 acceptance gate failed, 2 usage error,
// 3 invalid input or precondition, 4 any other failure.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <pthread.h>
#include <set>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "kohscan/corpus/splits.hpp"
#include "kohscan/corpus/tiling.hpp"
#include "kohscan/metrics/metrics.hpp"
#include "kohscan/pipeline/repro.hpp"
#include "kohscan/scan/scan.hpp"
#include "kohscan/serve/serve.hpp"
#include "kohscan/synth/synth.hpp"
#include "kohscan/train/train.hpp"
#include "kohscan/util/error.hpp"
#include "kohscan/util/log.hpp"
#include "kohscan/util/parallel.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kohscan;

namespace {

enum Exit { kOk = 0, kGateFailed = 1, kUsage = 2, kInvalid = 3, kFailure = 4 };

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Common {
    std::string config;
    std::uint64_t seed = 7;
    int workers = 1;
    bool quiet = false;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "Flat key = value file; explicit flags win");
    sub->add_option("--seed", c.seed, "Random seed")->capture_default_str();
    sub->add_option("--workers", c.workers, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_flag("--quiet", c.quiet, "Only warnings and errors on stderr");
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// Fills options that were not given on the command line from the config file.
void apply_config(CLI::App* sub, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot read config file " + path);
    std::string line;
    int lineno = 0;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        const std::string where = path + ":" + std::to_string(lineno);
        if (eq == std::string::npos) throw UsageError(where + ": expected key = value");
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
        std::replace(key.begin(), key.end(), '_', '-');
        if (key == "config") throw UsageError(where + ": config files cannot include other config files");
        if (!seen.insert(key).second) throw UsageError(where + ": duplicate key " + key);
        CLI::Option* opt = sub->get_option_no_throw("--" + key);
        if (opt == nullptr) throw UsageError(where + ": unknown key " + key + " for " + sub->get_name());
        if (opt->count() > 0) continue;
        try {
            opt->add_result(value);
            opt->run_callback();
        } catch (const CLI::Error& e) {
            throw UsageError(where + ": " + key + ": " + e.what());
        }
    }
}

template <typename T>
const T& need(const std::optional<T>& v, const char* flag) {
    if (!v) throw UsageError(std::string("missing required option ") + flag);
    return *v;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    if (!out.flush()) throw Error("cannot write " + path.string());
}

json read_json(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PreconditionError("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void print_stats(const corpus::ManifestStats& s) {
    std::printf("slides %zu  patches %zu (fungus %zu, keratin %zu, unlabeled %zu)  train %zu  val %zu  test %zu\n",
                s.slides, s.total, s.fungus, s.keratin, s.unlabeled, s.train, s.val, s.test);
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
    Common common;
    std::optional<std::string> out;
    int per_class = 100;
    bool full_size = false;
    std::optional<int> width;
    std::optional<int> height;
    int png_compression = 1;
};

void add_synth(CLI::App& app, SynthArgs& a) {
    auto* s = app.add_subcommand("synth", "Render a labelled synthetic slide corpus");
    add_common(s, a.common);
    s->add_option("--out", a.out, "Output directory");
    s->add_option("--per-class", a.per_class, "Slides per class")->capture_default_str();
    s->add_flag("--full-size", a.full_size, "Render at the native 6000x4000 size");
    s->add_option("--width", a.width, "Slide width in pixels");
    s->add_option("--height", a.height, "Slide height in pixels");
    s->add_option("--png-compression", a.png_compression, "zlib level 0-9")->capture_default_str();
}

int run_synth(const SynthArgs& a) {
    synth::SynthConfig c = a.full_size ? synth::SynthConfig::full_size() : synth::SynthConfig{};
    c.n_slides_per_class = a.per_class;
    c.seed = a.common.seed;
    if (a.width) c.width_px = *a.width;
    if (a.height) c.height_px = *a.height;
    c.png_compression = a.png_compression;
    c.validate();
    const corpus::Manifest m = synth::generate_corpus(c, need(a.out, "--out"), a.common.workers);
    print_stats(m.stats);
    return kOk;
}

// ---------------------------------------------------------------- ingest

struct IngestArgs {
    Common common;
    std::optional<std::string> images;
    std::optional<std::string> annotations;
    std::optional<std::string> out;
};

void add_ingest(CLI::App& app, IngestArgs& a) {
    auto* s = app.add_subcommand("ingest", "Build a validated manifest from slide images and annotations");
    add_common(s, a.common);
    s->add_option("--images", a.images, "Directory holding the slide images");
    s->add_option("--annotations", a.annotations, "Annotation file (manifest lines)");
    s->add_option("--out", a.out, "Output manifest");
}

int run_ingest(const IngestArgs& a) {
    const corpus::Manifest m = corpus::ingest(need(a.images, "--images"), need(a.annotations, "--annotations"));
    corpus::write_manifest(m, need(a.out, "--out"));
    print_stats(m.stats);
    return kOk;
}

// ---------------------------------------------------------------- tile

struct TileArgs {
    Common common;
    std::optional<std::string> manifest;
    std::optional<std::string> out;
    int size = corpus::kDefaultPatchSize;
    int stride = corpus::kDefaultPatchSize;
    double min_content = 0.5;
    std::optional<int> mask_threshold;
};

void add_tile(CLI::App& app, TileArgs& a) {
    auto* s = app.add_subcommand("tile", "Grid-tile every slide of a manifest");
    add_common(s, a.common);
    s->add_option("--manifest", a.manifest, "Input manifest");
    s->add_option("--out", a.out, "Output manifest (default: rewrite the input)");
    s->add_option("--size", a.size, "Patch side in pixels")->capture_default_str();
    s->add_option("--stride", a.stride, "Grid stride in pixels")->capture_default_str();
    s->add_option("--min-content", a.min_content, "Minimum field fraction of a kept tile")->capture_default_str();
    s->add_option("--mask-threshold", a.mask_threshold, "Field mask intensity threshold (default Otsu)");
}

// Grid tiles replace the patch list. A grid tile whose id matches an existing
// labelled patch keeps that label; labelled patches off the grid are kept.
int run_tile(const TileArgs& a) {
    corpus::Manifest m = corpus::read_manifest(need(a.manifest, "--manifest"));
    corpus::TileParams p;
    p.size_px = a.size;
    p.stride_px = a.stride;
    p.min_content = a.min_content;
    p.mask_threshold = a.mask_threshold;

    std::vector<std::vector<corpus::PatchRecord>> per_slide(m.slides.size());
    kohscan::parallel_for(m.slides.size(), a.common.workers,
                          [&](std::size_t i) { per_slide[i] = corpus::tile(m.slides[i], m.resolve(m.slides[i]), p); });

    std::map<std::string, corpus::PatchRecord> existing;
    for (const auto& r : m.patches) existing.emplace(r.patch_id, r);
    std::vector<corpus::PatchRecord> patches;
    for (auto& tiles : per_slide) {
        for (auto& t : tiles) {
            const auto it = existing.find(t.patch_id);
            if (it != existing.end()) {
                t.label = it->second.label;
                t.split = it->second.split;
                existing.erase(it);
            }
            patches.push_back(std::move(t));
        }
    }
    for (auto& [id, r] : existing) {
        if (r.label != corpus::Label::unlabeled) patches.push_back(r);
    }
    m.patches = std::move(patches);
    m.canonicalize();
    m.refresh_stats();
    m.validate();
    corpus::write_manifest(m, a.out ? fs::path(*a.out) : fs::path(*a.manifest));
    print_stats(m.stats);
    return kOk;
}

// ---------------------------------------------------------------- split

struct SplitArgs {
    Common common;
    std::optional<std::string> manifest;
    std::optional<std::string> out;
    double test = 0.20;
    double val = 0.15;
    std::string group_by = "image";
};

void add_split(CLI::App& app, SplitArgs& a) {
    auto* s = app.add_subcommand("split", "Assign train/val/test splits");
    add_common(s, a.common);
    s->add_option("--manifest", a.manifest, "Input manifest");
    s->add_option("--out", a.out, "Output manifest (default: rewrite the input)");
    s->add_option("--test", a.test, "Test fraction of all patches")->capture_default_str();
    s->add_option("--val", a.val, "Validation fraction of all patches")->capture_default_str();
    s->add_option("--group-by", a.group_by, "image (whole slides per split) or none")->capture_default_str();
}

int run_split(const SplitArgs& a) {
    const corpus::Manifest m = corpus::read_manifest(need(a.manifest, "--manifest"));
    corpus::SplitSpec spec;
    spec.test_fraction = a.test;
    spec.val_fraction = a.val;
    spec.seed = a.common.seed;
    spec.grouping = corpus::parse_grouping(a.group_by);
    const corpus::Manifest out = corpus::assign_splits(m, spec);
    corpus::write_manifest(out, a.out ? fs::path(*a.out) : fs::path(*a.manifest));
    print_stats(out.stats);
    return kOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
    Common common;
    std::optional<std::string> manifest;
    std::optional<std::string> out;
    std::string arch = "tiny";
    int input_size = 224;
    int epochs = 200;
    int batch = 32;
    double lr = 1e-4;
    std::string optimizer = "adam";
    std::string selection = "final";
    int bn_recalibration = 0;
    bool flips = false;
    std::optional<int> early_stop;
    int checkpoint_every = 0;
    std::string checkpoint_dir;
    std::string resume;
    std::string pretrained_from;
};

void add_train(CLI::App& app, TrainArgs& a) {
    auto* s = app.add_subcommand("train", "Train a classifier on a split manifest");
    add_common(s, a.common);
    s->add_option("--manifest", a.manifest, "Split manifest");
    s->add_option("--out", a.out, "Output bundle; the report goes to <out>.report.json");
    s->add_option("--arch", a.arch, "tiny, vgg16 or inceptionv3")->capture_default_str();
    s->add_option("--input-size", a.input_size, "Model input side in pixels")->capture_default_str();
    s->add_option("--epochs", a.epochs)->capture_default_str();
    s->add_option("--batch", a.batch)->capture_default_str();
    s->add_option("--lr", a.lr, "Learning rate")->capture_default_str();
    s->add_option("--optimizer", a.optimizer, "adam or sgd")->capture_default_str();
    s->add_option("--selection", a.selection, "final or best (validation accuracy)")->capture_default_str();
    s->add_option("--bn-recalibration", a.bn_recalibration, "Batches for post-epoch statistics (0 = off)")
        ->capture_default_str();
    s->add_flag("--flips", a.flips, "Random flips of training patches");
    s->add_option("--early-stop", a.early_stop, "Patience in epochs");
    s->add_option("--checkpoint-every", a.checkpoint_every, "Checkpoint interval in epochs")->capture_default_str();
    s->add_option("--checkpoint-dir", a.checkpoint_dir);
    s->add_option("--resume", a.resume, "Checkpoint to continue from");
    s->add_option("--pretrained-from", a.pretrained_from, "Bundle whose backbone weights seed the model");
}

int run_train(const TrainArgs& a) {
    const fs::path out = need(a.out, "--out");
    model::ArchitectureSpec spec;
    spec.backbone = model::parse_backbone(a.arch);
    if (a.input_size < 1) throw PreconditionError("--input-size must be positive");
    const auto side = static_cast<std::size_t>(a.input_size);
    spec.input_shape = {side, side, 3};
    if (!a.pretrained_from.empty()) {
        spec.pretrained_backbone = true;
        spec.backbone_weights = a.pretrained_from;
    }
    train::TrainConfig c;
    c.epochs = a.epochs;
    c.batch_size = a.batch;
    c.learning_rate = a.lr;
    c.optimizer = train::parse_optimizer(a.optimizer);
    c.selection = train::parse_selection(a.selection);
    c.bn_recalibration_batches = a.bn_recalibration;
    c.flips = a.flips;
    c.early_stop_patience = a.early_stop;
    c.checkpoint_every = a.checkpoint_every;
    c.checkpoint_dir = a.checkpoint_dir;
    c.resume_from = a.resume;
    c.seed = a.common.seed;
    c.workers = a.common.workers;
    spec.validate();
    c.validate();

    const corpus::Manifest m = corpus::read_manifest(need(a.manifest, "--manifest"));
    train::TrainResult r = train::train(spec, m, c);
    r.report.checkpoint = out.string();
    model::save(r.bundle, out);
    write_text(out.string() + ".report.json", train::to_json(r.report).dump(2) + "\n");
    const auto& last = r.report.epochs.back();
    std::printf("epochs %zu  best %d  final val_accuracy %.4f  wall %.1fs\n", r.report.epochs.size(), r.report.best_epoch,
                last.val_accuracy, r.report.wall_seconds);
    return kOk;
}

// ---------------------------------------------------------------- evaluate

struct EvaluateArgs {
    Common common;
    std::optional<std::string> bundle;
    std::optional<std::string> manifest;
    std::optional<std::string> out;
    std::string split = "test";
    double threshold = metrics::kDefaultThreshold;
    int batch = 32;
};

void add_evaluate(CLI::App& app, EvaluateArgs& a) {
    auto* s = app.add_subcommand("evaluate", "Score a split; writes the report, ROC table and ROC plot");
    add_common(s, a.common);
    s->add_option("--bundle", a.bundle, "Model bundle");
    s->add_option("--manifest", a.manifest, "Split manifest");
    s->add_option("--out", a.out, "Report path; <out>.roc.tsv and <out>.roc.png go beside it");
    s->add_option("--split", a.split, "train, val or test")->capture_default_str();
    s->add_option("--threshold", a.threshold)->capture_default_str();
    s->add_option("--batch", a.batch, "Inference batch size")->capture_default_str();
}

int run_evaluate(const EvaluateArgs& a) {
    const fs::path out = need(a.out, "--out");
    const model::ModelBundle b = model::load(need(a.bundle, "--bundle"));
    const corpus::Manifest m = corpus::read_manifest(need(a.manifest, "--manifest"));
    if (a.batch < 1) throw PreconditionError("--batch must be positive");
    const metrics::EvalReport r = metrics::evaluate(b, m, corpus::parse_split(a.split), a.threshold,
                                                    a.common.workers, static_cast<std::size_t>(a.batch));
    write_text(out, metrics::to_json(r).dump(2) + "\n");
    write_text(out.string() + ".roc.tsv", metrics::roc_text(r.roc));
    metrics::write_roc_png(r.roc, model::to_string(b.model.spec().backbone) + ", " + a.split + " split",
                           out.string() + ".roc.png");
    const std::pair<std::string, metrics::EvalReport> row{out.stem().string(), r};
    std::cout << metrics::compare_table(std::span(&row, 1));
    return kOk;
}

// ---------------------------------------------------------------- compare

struct CompareArgs {
    Common common;
    std::vector<std::string> reports;
};

void add_compare(CLI::App& app, CompareArgs& a) {
    auto* s = app.add_subcommand("compare", "Tabulate reports next to the reference and clinician rows");
    add_common(s, a.common);
    s->add_option("--report", a.reports, "Evaluation report (repeatable)")->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
}

int run_compare(const CompareArgs& a) {
    std::vector<std::pair<std::string, metrics::EvalReport>> rows;
    for (const auto& path : a.reports) {
        rows.emplace_back(fs::path(path).stem().string(), metrics::eval_report_from_json(read_json(path)));
    }
    std::cout << metrics::compare_table(rows);
    return kOk;
}

// ---------------------------------------------------------------- scan

struct ScanArgs {
    Common common;
    std::optional<std::string> bundle;
    std::optional<std::string> image;
    std::string overlay;
    std::string report;
    std::string image_id;
    double threshold = 0.5;
    int min_positive = 1;
    int size = corpus::kDefaultPatchSize;
    int stride = corpus::kDefaultPatchSize;
    double min_content = 0.5;
    int batch = 32;
};

void add_scan(CLI::App& app, ScanArgs& a) {
    auto* s = app.add_subcommand("scan", "Whole-slide verdict with per-tile scores");
    add_common(s, a.common);
    s->add_option("--bundle", a.bundle, "Model bundle");
    s->add_option("--image", a.image, "Slide image");
    s->add_option("--threshold", a.threshold)->capture_default_str();
    s->add_option("--min-positive", a.min_positive, "Positive tiles needed for fungus_detected")
        ->capture_default_str();
    s->add_option("--size", a.size, "Tile side in pixels")->capture_default_str();
    s->add_option("--stride", a.stride, "Tile stride in pixels")->capture_default_str();
    s->add_option("--min-content", a.min_content, "Minimum field fraction of a scored tile")->capture_default_str();
    s->add_option("--batch", a.batch, "Inference batch size")->capture_default_str();
    s->add_option("--image-id", a.image_id, "Identifier in the report (default: file stem)");
    s->add_option("--overlay", a.overlay, "Write a heat-map overlay PNG");
    s->add_option("--report", a.report, "Write the result JSON here instead of stdout");
}

int run_scan(const ScanArgs& a) {
    const model::ModelBundle b = model::load(need(a.bundle, "--bundle"));
    const fs::path path = need(a.image, "--image");
    scan::ScanParams p;
    p.size_px = a.size;
    p.stride_px = a.stride;
    p.min_content = a.min_content;
    p.threshold = a.threshold;
    p.min_positive_patches = a.min_positive;
    p.workers = a.common.workers;
    if (a.batch < 1) throw PreconditionError("--batch must be positive");
    p.batch_size = static_cast<std::size_t>(a.batch);
    p.validate();
    const image::Image slide = image::read(path);
    const scan::ScanResult r =
        scan::scan_image(b, slide, a.image_id.empty() ? path.stem().string() : a.image_id, p);
    const std::string doc = scan::to_json(r).dump(2) + "\n";
    if (a.report.empty()) {
        std::cout << doc;
    } else {
        write_text(a.report, doc);
        std::printf("%s  %d/%d tiles positive\n", scan::to_string(r.verdict).c_str(), r.positive_patch_count,
                    r.retained_tiles);
    }
    if (!a.overlay.empty()) image::write_png(a.overlay, scan::render_overlay(r, slide));
    return kOk;
}

// ---------------------------------------------------------------- classify

struct ClassifyArgs {
    Common common;
    std::optional<std::string> bundle;
    std::optional<std::string> image;
    double threshold = 0.5;
};

void add_classify(CLI::App& app, ClassifyArgs& a) {
    auto* s = app.add_subcommand("classify", "Fungus probability of a single patch image");
    add_common(s, a.common);
    s->add_option("--bundle", a.bundle, "Model bundle");
    s->add_option("--image", a.image, "Patch image");
    s->add_option("--threshold", a.threshold)->capture_default_str();
}

int run_classify(const ClassifyArgs& a) {
    const model::ModelBundle b = model::load(need(a.bundle, "--bundle"));
    const auto c = scan::classify(b, image::read(need(a.image, "--image")), a.threshold);
    std::cout << scan::to_json(c).dump(2) << "\n";
    return kOk;
}

// ---------------------------------------------------------------- benchmark

struct BenchmarkArgs {
    Common common;
    std::optional<std::string> bundle;
    std::string arch;
    int input_size = 224;
    int n = 200;
    int batch = 32;
    std::string out;
};

void add_benchmark(CLI::App& app, BenchmarkArgs& a) {
    auto* s = app.add_subcommand("benchmark", "Per-patch inference latency");
    add_common(s, a.common);
    s->add_option("--bundle", a.bundle, "Model bundle");
    s->add_option("--arch", a.arch, "Benchmark a freshly initialised backbone instead of a bundle");
    s->add_option("--input-size", a.input_size, "Input side for --arch")->capture_default_str();
    s->add_option("--n", a.n, "Patches to time (at least 100)")->capture_default_str();
    s->add_option("--batch", a.batch)->capture_default_str();
    s->add_option("--out", a.out, "Also write the result JSON here");
}

int run_benchmark(const BenchmarkArgs& a) {
    if (a.n < 1 || a.batch < 1) throw PreconditionError("--n and --batch must be positive");
    std::optional<model::ModelBundle> b;
    if (!a.arch.empty()) {
        if (a.bundle) throw UsageError("--bundle and --arch are exclusive");
        model::ArchitectureSpec spec;
        spec.backbone = model::parse_backbone(a.arch);
        const auto side = static_cast<std::size_t>(a.input_size);
        spec.input_shape = {side, side, 3};
        b.emplace(model::build(spec, a.common.seed));
    } else {
        b.emplace(model::load(need(a.bundle, "--bundle")));
    }
    const auto r = scan::benchmark(*b, static_cast<std::size_t>(a.n), static_cast<std::size_t>(a.batch), a.common.seed);
    const std::string doc = scan::to_json(r).dump(2) + "\n";
    if (!a.out.empty()) write_text(a.out, doc);
    std::cout << doc;
    return kOk;
}

// ---------------------------------------------------------------- serve

struct ServeArgs {
    Common common;
    std::optional<std::string> bundle;
    std::string host = "127.0.0.1";
    int port = 8080;
    int max_payload_mb = 64;
    int queue = 16;
    int threads = 8;
    double threshold = 0.5;
    int min_positive = 1;
};

void add_serve(CLI::App& app, ServeArgs& a) {
    auto* s = app.add_subcommand("serve", "HTTP service over one model bundle");
    add_common(s, a.common);
    s->add_option("--bundle", a.bundle, "Model bundle");
    s->add_option("--host", a.host)->capture_default_str();
    s->add_option("--port", a.port, "0 picks a free port")->capture_default_str();
    s->add_option("--max-payload-mb", a.max_payload_mb)->capture_default_str();
    s->add_option("--queue", a.queue, "Requests allowed to wait for inference")->capture_default_str();
    s->add_option("--threads", a.threads, "HTTP handler threads")->capture_default_str();
    s->add_option("--threshold", a.threshold, "Default decision threshold")->capture_default_str();
    s->add_option("--min-positive", a.min_positive, "Default slide rule")->capture_default_str();
}

int run_serve(const ServeArgs& a) {
    serve::ServeConfig c;
    c.host = a.host;
    c.port = a.port;
    if (a.max_payload_mb < 1) throw PreconditionError("--max-payload-mb must be positive");
    c.max_payload_bytes = static_cast<std::size_t>(a.max_payload_mb) << 20;
    c.inference_workers = a.common.workers;
    c.queue_capacity = a.queue;
    c.http_threads = a.threads;
    c.scan.threshold = a.threshold;
    c.scan.min_positive_patches = a.min_positive;
    serve::Service service(model::load(need(a.bundle, "--bundle")), c);

    // SIGINT/SIGTERM are taken synchronously by a watcher thread, which stops the server.
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);
    service.bind();
    std::printf("listening on http://%s:%d\n", c.host.c_str(), service.port());
    std::fflush(stdout);
    std::thread watcher([&] {
        int sig = 0;
        sigwait(&signals, &sig);
        log::info("shutting down");
        service.stop();
    });
    service.run();
    // run() can also end without a signal (socket failure); wake the watcher.
    pthread_kill(watcher.native_handle(), SIGTERM);
    watcher.join();
    return kOk;
}

// ---------------------------------------------------------------- repro

struct ReproArgs {
    Common common;
    pipeline::ReproConfig c;
    std::string out = "repro_out";
};

void add_repro(CLI::App& app, ReproArgs& a) {
    auto* s = app.add_subcommand("repro", "Synthetic end-to-end run with acceptance gates");
    add_common(s, a.common);
    auto& c = a.c;
    s->add_option("--out", a.out, "Output directory")->capture_default_str();
    s->add_option("--per-class", c.slides_per_class, "Slides per class")->capture_default_str();
    s->add_option("--epochs", c.epochs)->capture_default_str();
    s->add_option("--batch", c.batch_size)->capture_default_str();
    s->add_option("--lr", c.learning_rate)->capture_default_str();
    s->add_option("--bn-recalibration", c.bn_recalibration_batches)->capture_default_str();
    s->add_option("--input-size", c.input_size)->capture_default_str();
    s->add_flag("--flips", c.flips);
    s->add_option("--test", c.test_fraction)->capture_default_str();
    s->add_option("--val", c.val_fraction)->capture_default_str();
    s->add_option("--min-auc", c.min_auc)->capture_default_str();
    s->add_option("--min-accuracy", c.min_accuracy)->capture_default_str();
    s->add_option("--min-patches", c.min_patches)->capture_default_str();
    s->add_option("--max-epochs", c.max_epochs)->capture_default_str();
}

int run_repro(ReproArgs& a) {
    a.c.seed = a.common.seed;
    a.c.workers = a.common.workers;
    a.c.out_dir = a.out;
    const pipeline::ReproSummary s = pipeline::run_repro(a.c);
    std::cout << s.text();
    return s.passed() ? kOk : kGateFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kohscan: fungal filament detection in KOH microscopy slides"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    SynthArgs synth_args;
    IngestArgs ingest_args;
    TileArgs tile_args;
    SplitArgs split_args;
    TrainArgs train_args;
    EvaluateArgs evaluate_args;
    CompareArgs compare_args;
    ScanArgs scan_args;
    ClassifyArgs classify_args;
    BenchmarkArgs benchmark_args;
    ServeArgs serve_args;
    ReproArgs repro_args;
    add_synth(app, synth_args);
    add_ingest(app, ingest_args);
    add_tile(app, tile_args);
    add_split(app, split_args);
    add_train(app, train_args);
    add_evaluate(app, evaluate_args);
    add_compare(app, compare_args);
    add_scan(app, scan_args);
    add_classify(app, classify_args);
    add_benchmark(app, benchmark_args);
    add_serve(app, serve_args);
    add_repro(app, repro_args);

    const std::map<std::string, std::pair<Common*, std::function<int()>>> commands{
        {"synth", {&synth_args.common, [&] { return run_synth(synth_args); }}},
        {"ingest", {&ingest_args.common, [&] { return run_ingest(ingest_args); }}},
        {"tile", {&tile_args.common, [&] { return run_tile(tile_args); }}},
        {"split", {&split_args.common, [&] { return run_split(split_args); }}},
        {"train", {&train_args.common, [&] { return run_train(train_args); }}},
        {"evaluate", {&evaluate_args.common, [&] { return run_evaluate(evaluate_args); }}},
        {"compare", {&compare_args.common, [&] { return run_compare(compare_args); }}},
        {"scan", {&scan_args.common, [&] { return run_scan(scan_args); }}},
        {"classify", {&classify_args.common, [&] { return run_classify(classify_args); }}},
        {"benchmark", {&benchmark_args.common, [&] { return run_benchmark(benchmark_args); }}},
        {"serve", {&serve_args.common, [&] { return run_serve(serve_args); }}},
        {"repro", {&repro_args.common, [&] { return run_repro(repro_args); }}},
    };

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    CLI::App* sub = app.get_subcommands().front();
    const auto& [common, run] = commands.at(sub->get_name());
    try {
        if (!common->config.empty()) apply_config(sub, common->config);
        log::set_quiet(common->quiet);
        return run();
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\nRun '%s %s --help' for the options.\n", e.what(), argv[0],
                     sub->get_name().c_str());
        return kUsage;
    } catch (const pipeline::StageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return e.precondition() ? kInvalid : kFailure;
    } catch (const PreconditionError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kInvalid;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kInvalid;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kFailure;
    }
}
