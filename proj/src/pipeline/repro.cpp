#include "kohscan/pipeline/repro.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "kohscan/corpus/splits.hpp"
#include "kohscan/scan/scan.hpp"
#include "kohscan/synth/synth.hpp"
#include "kohscan/util/log.hpp"

namespace kohscan::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename Fn>
auto stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const PreconditionError& e) {
        throw StageError(name, e.what(), true);
    } catch (const std::exception& e) {
        throw StageError(name, e.what(), false);
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    if (!out.flush()) throw Error("cannot write " + path.string());
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json("undefined"); }

std::string fixed(double v, const char* fmt) {
    char buf[64];
    std::snprintf(buf, sizeof buf, fmt, v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

json to_json(const ReproConfig& c) {
    return {{"seed", c.seed},
            {"slides_per_class", c.slides_per_class},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"bn_recalibration_batches", c.bn_recalibration_batches},
            {"input_size", c.input_size},
            {"flips", c.flips},
            {"test_fraction", c.test_fraction},
            {"val_fraction", c.val_fraction},
            {"gates",
             {{"min_auc", c.min_auc},
              {"min_accuracy", c.min_accuracy},
              {"min_patches", c.min_patches},
              {"max_epochs", c.max_epochs}}}};
}

bool ReproSummary::passed() const {
    for (const auto& g : gates) {
        if (!g.passed) return false;
    }
    return !gates.empty();
}

json ReproSummary::to_json(const ReproConfig& config) const {
    const auto& r = evaluation;
    json history = json::array();
    for (const auto& e : training.epochs) {
        history.push_back({{"epoch", e.epoch},
                           {"train_loss", e.train_loss},
                           {"train_accuracy", e.train_accuracy},
                           {"val_loss", e.val_loss},
                           {"val_accuracy", e.val_accuracy}});
    }
    json gate_list = json::array();
    for (const auto& g : gates) gate_list.push_back({{"name", g.name}, {"passed", g.passed}, {"detail", g.detail}});
    return {{"config", pipeline::to_json(config)},
            {"corpus", corpus::to_json(corpus)},
            {"training",
             {{"config_hash", training.config_hash},
              {"n_train", training.n_train},
              {"n_val", training.n_val},
              {"best_epoch", training.best_epoch},
              {"selection", train::to_string(training.selection)},
              {"early_stopped", training.early_stopped},
              {"history", history}}},
            {"evaluation",
             {{"split", r.split},
              {"n_test", r.n_test},
              {"threshold", r.threshold},
              {"counts", metrics::to_json(r.counts)},
              {"accuracy", optional_json(r.metrics.accuracy)},
              {"sensitivity", optional_json(r.metrics.sensitivity)},
              {"precision", optional_json(r.metrics.precision)},
              {"specificity", optional_json(r.metrics.specificity)},
              {"f1", optional_json(r.metrics.f1)},
              {"auc", r.auc}}},
            {"slide_level",
             {{"fungus_slides", slides.fungus_slides},
              {"fungus_detected", slides.fungus_detected},
              {"top_tile_on_filament", slides.top_tile_on_filament},
              {"keratin_slides", slides.keratin_slides},
              {"keratin_cleared", slides.keratin_cleared}}},
            {"gates", gate_list},
            {"passed", passed()}};
}

std::string ReproSummary::text() const {
    std::string out = table;
    out += "\nheld-out slides: " + std::to_string(slides.fungus_detected) + "/" + std::to_string(slides.fungus_slides) +
           " fungus slides detected (" + std::to_string(slides.top_tile_on_filament) +
           " with the top tile on a filament), " + std::to_string(slides.keratin_cleared) + "/" +
           std::to_string(slides.keratin_slides) + " keratin slides cleared\n\n";
    for (const auto& g : gates) out += std::string(g.passed ? "PASS  " : "FAIL  ") + g.name + "  " + g.detail + "\n";
    out += passed() ? "all gates passed\n" : "gates failed\n";
    return out;
}

ReproSummary run_repro(const ReproConfig& config) {
    const fs::path out = config.out_dir;

    // Every stage's settings are checked before any work starts.
    synth::SynthConfig sc;
    sc.n_slides_per_class = config.slides_per_class;
    sc.seed = config.seed;
    stage("synth", [&] { sc.validate(); });

    corpus::SplitSpec split;
    split.test_fraction = config.test_fraction;
    split.val_fraction = config.val_fraction;
    split.seed = config.seed;
    split.grouping = corpus::Grouping::by_image;
    stage("split", [&] { split.validate(); });

    model::ArchitectureSpec spec;
    spec.backbone = model::Backbone::tiny;
    const auto side = static_cast<std::size_t>(config.input_size);
    spec.input_shape = {side, side, 3};
    train::TrainConfig tc;
    tc.epochs = config.epochs;
    tc.batch_size = config.batch_size;
    tc.learning_rate = config.learning_rate;
    tc.seed = config.seed;
    tc.flips = config.flips;
    tc.selection = train::Selection::best_val_accuracy;
    tc.bn_recalibration_batches = config.bn_recalibration_batches;
    tc.workers = config.workers;
    stage("train", [&] {
        if (config.input_size < 32) throw PreconditionError("input_size must be at least 32");
        spec.validate();
        tc.validate();
    });

    stage("setup", [&] {
        std::error_code ec;
        fs::create_directories(out, ec);
        if (!fs::is_directory(out)) throw Error("cannot create " + out.string() + ": " + ec.message());
    });

    json timing;
    ReproSummary summary;

    auto t0 = std::chrono::steady_clock::now();
    log::info("synth: rendering " + std::to_string(2 * config.slides_per_class) + " slides");
    const corpus::Manifest raw =
        stage("synth", [&] { return synth::generate_corpus(sc, out / "corpus", config.workers); });
    timing["synth_seconds"] = seconds_since(t0);

    const corpus::Manifest manifest = stage("split", [&] {
        corpus::Manifest m = corpus::assign_splits(raw, split);
        corpus::write_manifest(m, out / "manifest.jsonl");
        return corpus::read_manifest(out / "manifest.jsonl");
    });
    summary.corpus = manifest.stats;
    log::info("split: " + std::to_string(manifest.stats.train) + " train, " + std::to_string(manifest.stats.val) +
              " val, " + std::to_string(manifest.stats.test) + " test patches");

    t0 = std::chrono::steady_clock::now();
    train::TrainResult trained = stage("train", [&] {
        train::TrainResult r = train::train(spec, manifest, tc);
        r.report.checkpoint = "model.kohscan";
        model::save(r.bundle, out / "model.kohscan");
        write_text(out / "train_report.json", train::to_json(r.report).dump(2) + "\n");
        return r;
    });
    summary.training = trained.report;
    timing["train_seconds"] = seconds_since(t0);

    t0 = std::chrono::steady_clock::now();
    summary.evaluation = stage("evaluate", [&] {
        metrics::EvalReport r = metrics::evaluate(trained.bundle, manifest, corpus::Split::test,
                                                  metrics::kDefaultThreshold, config.workers);
        write_text(out / "eval_report.json", metrics::to_json(r).dump(2) + "\n");
        write_text(out / "roc.tsv", metrics::roc_text(r.roc));
        metrics::write_roc_png(r.roc, "Tiny model, held-out synthetic patches", out / "roc.png");
        return r;
    });
    timing["evaluate_seconds"] = seconds_since(t0);
    timing["latency_ms_per_patch"] = summary.evaluation.latency_ms;

    t0 = std::chrono::steady_clock::now();
    summary.slides = stage("scan", [&] {
        std::ifstream in(out / "corpus" / "geometry.json", std::ios::binary);
        if (!in) throw Error("cannot read geometry.json");
        const json geo = json::parse(in);
        std::map<std::string, synth::SlideGeometry> geometry;
        for (const auto& g : geo.at("slides")) {
            auto sg = synth::slide_geometry_from_json(g);
            geometry.emplace(sg.image_id, std::move(sg));
        }
        std::set<std::string> test_slides;
        for (const auto* p : manifest.patches_in(corpus::Split::test)) test_slides.insert(p->image_id);

        scan::ScanParams params;
        params.size_px = sc.patch_size_px;
        params.stride_px = sc.stride_px;
        params.min_content = sc.min_content;
        params.workers = config.workers;
        SlideLevel s;
        for (const auto& id : test_slides) {
            const corpus::SlideImage* slide = manifest.find_slide(id);
            const scan::ScanResult r = scan::scan_image(trained.bundle, image::read(manifest.resolve(*slide)), id, params);
            const bool detected = r.verdict == scan::Verdict::fungus_detected;
            if (slide->slide_class == corpus::SlideClass::fungus_positive) {
                ++s.fungus_slides;
                if (!detected) continue;
                ++s.fungus_detected;
                int best = -1;
                for (std::size_t i = 0; i < r.grid.size(); ++i) {
                    if (r.grid[i] && (best < 0 || *r.grid[i] > *r.grid[static_cast<std::size_t>(best)])) {
                        best = static_cast<int>(i);
                    }
                }
                const double x0 = (best % r.cols) * params.stride_px, y0 = (best / r.cols) * params.stride_px;
                const synth::Rect rect{x0, y0, x0 + params.size_px, y0 + params.size_px};
                for (const auto& h : geometry.at(id).hyphae) {
                    if (synth::intersects(h, rect)) {
                        ++s.top_tile_on_filament;
                        break;
                    }
                }
            } else if (slide->slide_class == corpus::SlideClass::keratin_only) {
                ++s.keratin_slides;
                if (r.verdict == scan::Verdict::no_fungus) ++s.keratin_cleared;
            }
        }
        return s;
    });
    timing["scan_seconds"] = seconds_since(t0);

    stage("summary", [&] {
        const auto& r = summary.evaluation;
        const double acc = r.metrics.accuracy.value_or(0.0);
        const auto errors = metrics::consistency_errors(r);
        std::string consistency = errors.empty() ? "metrics agree with the confusion counts" : errors.front();
        const int ran = static_cast<int>(summary.training.epochs.size());
        summary.gates = {
            {"auc", r.auc >= config.min_auc, fixed(r.auc, "%.4f") + " >= " + fixed(config.min_auc, "%.2f")},
            {"accuracy", acc >= config.min_accuracy,
             fixed(acc, "%.4f") + " >= " + fixed(config.min_accuracy, "%.2f")},
            {"consistency", errors.empty(), consistency},
            {"patches", manifest.stats.total >= config.min_patches,
             std::to_string(manifest.stats.total) + " >= " + std::to_string(config.min_patches)},
            {"epochs", ran <= config.max_epochs, std::to_string(ran) + " <= " + std::to_string(config.max_epochs)},
        };
        const std::pair<std::string, metrics::EvalReport> row{"Tiny (synthetic)", r};
        summary.table = metrics::compare_table(std::span(&row, 1));
        write_text(out / "summary.json", summary.to_json(config).dump(2) + "\n");
        write_text(out / "summary.txt", summary.text());
        timing["train_wall_seconds"] = summary.training.wall_seconds;
        write_text(out / "timing.json", timing.dump(2) + "\n");
    });
    return summary;
}

}  // namespace kohscan::pipeline
