// Acceptance run: one PASS/FAIL line per criterion, exit status 0 iff all pass.
//
//   kohscan_acceptance [--work DIR] [--only N[,N...]] [--reuse]
//
// Criteria 8-10 drive the kohscan binary (two full repro runs, then CLI versus
// HTTP service on the trained bundle); they take several minutes on one core.
// --reuse keeps repro outputs already present in the work directory.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "kohscan/corpus/dataset.hpp"
#include "kohscan/corpus/splits.hpp"
#include "kohscan/corpus/tiling.hpp"
#include "kohscan/image/image.hpp"
#include "kohscan/metrics/metrics.hpp"
#include "kohscan/model/bundle.hpp"
#include "kohscan/scan/scan.hpp"
#include "kohscan/serve/serve.hpp"
#include "kohscan/train/train.hpp"
#include "kohscan/util/log.hpp"
#include "kohscan/util/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kohscan;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string("\"") + KOHSCAN_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// ---------------------------------------------------------------- 1

Outcome reference_constants() {
    using metrics::kReferenceInceptionV3;
    using metrics::kReferenceVgg16;
    const std::string table = metrics::compare_table({});
    bool ok = kReferenceVgg16.accuracy == 0.9598 && kReferenceVgg16.auc == 0.9930 &&
              kReferenceInceptionV3.accuracy == 0.9590 && kReferenceInceptionV3.auc == 0.9917;
    for (const char* s : {"VGG16 (reference)", "InceptionV3 (reference)", "Clinician average", "95.98", "0.9930",
                          "95.90", "0.9917"}) {
        ok = ok && table.find(s) != std::string::npos;
    }
    return {ok, "reference rows shown in compare output only; paper-scale training not attempted"};
}

// ---------------------------------------------------------------- 2

double pairwise_auc(const std::vector<int>& y, const std::vector<double>& s) {
    double wins = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] != 1) continue;
        for (std::size_t j = 0; j < y.size(); ++j) {
            if (y[j] != 0) continue;
            ++pairs;
            wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
        }
    }
    return wins / static_cast<double>(pairs);
}

Outcome metric_oracles() {
    const auto t0 = Clock::now();
    Rng rng(20240601);
    double worst = 0.0;
    std::size_t count_mismatches = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 2 + rng.below(199);
        std::vector<int> y(n);
        std::vector<double> s(n);
        const bool coarse = trial % 2 == 0;  // coarse scores force ties
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = static_cast<int>(rng.below(2));
            s[i] = coarse ? static_cast<double>(rng.below(11)) / 10.0 : rng.uniform();
        }
        y[0] = 1;
        y[1] = 0;
        worst = std::max(worst, std::abs(metrics::auc(metrics::roc(y, s)) - pairwise_auc(y, s)));

        const double thr = rng.uniform();
        metrics::ConfusionCounts naive;
        for (std::size_t i = 0; i < n; ++i) {
            const bool pred = s[i] >= thr;
            if (y[i] == 1) (pred ? naive.tp : naive.fn)++;
            else (pred ? naive.fp : naive.tn)++;
        }
        if (!(metrics::confusion(y, s, thr) == naive)) ++count_mismatches;
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-9 && count_mismatches == 0 && secs < 30.0,
            "max |auc - pairwise| " + fmt("%.3g", worst) + ", confusion mismatches " + std::to_string(count_mismatches) +
                ", " + fmt("%.2f", secs) + " s"};
}

// ---------------------------------------------------------------- 3

Outcome clinician_f1() {
    const auto f1 = metrics::f1_score(0.963, 0.61);
    const double pct = f1 ? 100.0 * *f1 : -1.0;
    return {std::abs(pct - 74.69) <= 0.01, "F1 " + fmt("%.4f", pct) + " (74.69 +/- 0.01)"};
}

// ---------------------------------------------------------------- 4

Outcome split_arithmetic() {
    Rng rng(4);
    corpus::Manifest m;
    for (int i = 0; i < 457; ++i) {
        corpus::SlideImage s;
        s.image_id = "img" + std::to_string(i);
        s.path = s.image_id + ".png";
        s.width_px = 6000;
        s.height_px = 4000;
        m.slides.push_back(s);
    }
    std::map<std::string, std::size_t> group;
    for (int i = 0; i < 9215; ++i) {
        corpus::PatchRecord p;
        p.image_id = "img" + std::to_string(rng.below(457));
        p.patch_id = "p" + std::to_string(100000 + i);
        p.label = rng.uniform() < 0.46 ? corpus::Label::fungus : corpus::Label::keratin;
        ++group[p.image_id];
        m.patches.push_back(p);
    }
    m.refresh_stats();
    std::size_t largest = 0;
    for (const auto& [id, n] : group) largest = std::max(largest, n);

    corpus::SplitSpec spec;
    spec.test_fraction = 0.20;
    spec.seed = 9;
    spec.grouping = corpus::Grouping::iid;
    const auto iid = corpus::assign_splits(m, spec);
    spec.grouping = corpus::Grouping::by_image;
    const auto grouped = corpus::assign_splits(m, spec);
    const long off = std::labs(static_cast<long>(grouped.stats.test) - 1843L);
    return {iid.stats.test == 1843 && off <= static_cast<long>(largest),
            "iid test " + std::to_string(iid.stats.test) + ", grouped test " + std::to_string(grouped.stats.test) +
                " (largest group " + std::to_string(largest) + ")"};
}

// ---------------------------------------------------------------- 5

Outcome tiling_closed_form() {
    const auto t0 = Clock::now();
    Rng rng(5);
    corpus::TileParams p;
    p.min_content = 0.0;
    int mismatches = 0;
    for (int i = 0; i < 200; ++i) {
        const int size = rng.integer(20, 400);
        const int w = rng.integer(size, 2500), h = rng.integer(size, 2500);
        const int stride = rng.integer(25, 600);
        p.size_px = size;
        p.stride_px = stride;
        const image::Image img(w, h, 1, 200);
        const corpus::SlideImage slide{"s", "s.png", w, h, "", corpus::SlideClass::unlabeled};
        const std::size_t expect =
            static_cast<std::size_t>((w - size) / stride + 1) * static_cast<std::size_t>((h - size) / stride + 1);
        if (corpus::tile(slide, img, p).size() != expect) ++mismatches;
    }
    p.size_px = 500;
    p.stride_px = 500;
    const image::Image full(6000, 4000, 1, 200);
    const corpus::SlideImage slide{"full", "full.png", 6000, 4000, "", corpus::SlideClass::unlabeled};
    const std::size_t n_full = corpus::tile(slide, full, p).size();
    const double secs = seconds_since(t0);
    return {mismatches == 0 && n_full == 96 && secs < 10.0, std::to_string(mismatches) +
                                                                " mismatches in 200 triples, 6000x4000 gives " +
                                                                std::to_string(n_full) + ", " + fmt("%.2f", secs) + " s"};
}

// ---------------------------------------------------------------- 6

Outcome architecture_gates() {
    const auto t0 = Clock::now();
    bool ok = true;
    std::string detail;
    Rng rng(6);
    for (auto [b, stock] : {std::pair{model::Backbone::vgg16, std::size_t{138'357'544}},
                            std::pair{model::Backbone::inceptionv3, std::size_t{23'851'784}}}) {
        model::ArchitectureSpec spec;
        spec.backbone = b;
        const model::Model m = model::build(spec, 1);
        nn::Tensor x({2, 224, 224, 3});
        for (auto& v : x.values()) v = rng.uniform();
        const nn::Tensor probs = model::predict_batch(m, x);
        bool rows = probs.shape() == nn::Shape{2, 2};
        for (std::size_t r = 0; rows && r < 2; ++r) rows = std::abs(probs[2 * r] + probs[2 * r + 1] - 1.0) <= 1e-6;

        std::size_t summed = 0;
        for (const auto& node : model::build_network(spec, model::Top::stock).summary()) summed += node.parameters;
        const std::size_t closed = model::stock_parameter_count(b);
        ok = ok && rows && summed == stock && closed == stock;
        detail += model::to_string(b) + (rows ? " rows ok" : " rows BAD") + " stock " + std::to_string(summed) + "; ";
    }
    const double secs = seconds_since(t0);
    ok = ok && secs < 120.0;
    return {ok, detail + fmt("%.1f", secs) + " s"};
}

// ---------------------------------------------------------------- 7

Outcome gradient_correctness() {
    const auto t0 = Clock::now();
    model::ArchitectureSpec spec;
    spec.input_shape = {32, 32, 3};
    Rng rng(7);
    double worst = 0.0;
    std::size_t skipped = 0, checked = 0;
    for (int b = 0; b < 10; ++b) {
        model::Model m = model::build(spec, 700 + b);
        nn::Tensor x({2, 32, 32, 3});
        for (auto& v : x.values()) v = rng.uniform();
        std::vector<int> y;
        for (int i = 0; i < 2; ++i) y.push_back(static_cast<int>(rng.below(2)));
        const auto g = train::gradient_check(m, x, y);
        worst = std::max(worst, g.max_relative_error);
        skipped += g.skipped_kinks;
        checked += g.checked;
    }
    const double secs = seconds_since(t0);
    return {worst < 1e-3 && secs < 60.0 && skipped <= checked / 100,
            "max relative error " + fmt("%.3g", worst) + " over " + std::to_string(checked) + " coordinates (" +
                std::to_string(skipped) + " skipped at kinks), " + fmt("%.1f", secs) + " s"};
}

// ---------------------------------------------------------------- 8, 9

struct ReproRuns {
    int exit_a = -1;
    int exit_b = -1;
    double seconds_a = 0.0;
    fs::path dir_a, dir_b;
};

ReproRuns run_repros(const fs::path& work, bool reuse) {
    ReproRuns r;
    r.dir_a = work / "repro_a";
    r.dir_b = work / "repro_b";
    if (reuse && fs::exists(r.dir_a / "summary.json") && fs::exists(r.dir_b / "summary.json")) {
        const json t = json::parse(slurp(r.dir_a / "timing.json"));
        r.seconds_a = t.at("synth_seconds").get<double>() + t.at("train_seconds").get<double>() +
                      t.at("evaluate_seconds").get<double>() + t.at("scan_seconds").get<double>();
        const bool pass_a = json::parse(slurp(r.dir_a / "summary.json")).at("passed").get<bool>();
        const bool pass_b = json::parse(slurp(r.dir_b / "summary.json")).at("passed").get<bool>();
        r.exit_a = pass_a ? 0 : 1;
        r.exit_b = pass_b ? 0 : 1;
        return r;
    }
    fs::remove_all(r.dir_a);
    fs::remove_all(r.dir_b);
    auto t0 = Clock::now();
    r.exit_a = run_cli("repro --seed 7 --out \"" + r.dir_a.string() + "\"", work / "repro_a.log");
    r.seconds_a = seconds_since(t0);
    r.exit_b = run_cli("repro --seed 7 --out \"" + r.dir_b.string() + "\"", work / "repro_b.log");
    return r;
}

Outcome end_to_end(const ReproRuns& r) {
    if (!fs::exists(r.dir_a / "summary.json")) {
        return {false, "repro exited " + std::to_string(r.exit_a) + " without a summary (see repro_a.log)"};
    }
    const json s = json::parse(slurp(r.dir_a / "summary.json"));
    const json& e = s.at("evaluation");
    const double auc = e.at("auc").get<double>();
    const double acc = e.at("accuracy").is_number() ? e.at("accuracy").get<double>() : 0.0;
    const auto patches = s.at("corpus").at("total").get<std::size_t>();
    const auto epochs = s.at("training").at("history").size();

    // Independent recheck of the stored report against its own counts.
    const auto report = metrics::eval_report_from_json(json::parse(slurp(r.dir_a / "eval_report.json")));
    const auto errors = metrics::consistency_errors(report);
    const double recomputed = pairwise_auc(report.labels, report.scores);

    const bool ok = r.exit_a == 0 && auc >= 0.95 && acc >= 0.90 && errors.empty() &&
                    std::abs(recomputed - auc) <= 1e-9 && patches >= 2000 && epochs <= 15 && r.seconds_a <= 600.0;
    const auto& sl = s.at("slide_level");
    return {ok, "auc " + fmt("%.4f", auc) + ", accuracy " + fmt("%.4f", acc) + ", " + std::to_string(patches) +
                    " patches, " + std::to_string(epochs) + " epochs, consistency " +
                    (errors.empty() ? "ok" : errors.front()) + ", exit " + std::to_string(r.exit_a) + ", " +
                    fmt("%.0f", r.seconds_a) + " s; held-out slides: fungus " +
                    std::to_string(sl.at("fungus_detected").get<int>()) + "/" +
                    std::to_string(sl.at("fungus_slides").get<int>()) + " detected, keratin " +
                    std::to_string(sl.at("keratin_cleared").get<int>()) + "/" +
                    std::to_string(sl.at("keratin_slides").get<int>()) + " cleared"};
}

Outcome determinism(const ReproRuns& r, const fs::path& work) {
    const std::string ta = slurp(r.dir_a / "summary.txt"), tb = slurp(r.dir_b / "summary.txt");
    const std::string ja = slurp(r.dir_a / "summary.json"), jb = slurp(r.dir_b / "summary.json");
    const bool tables = !ta.empty() && ta == tb && !ja.empty() && ja == jb;
    const bool bundles = slurp(r.dir_a / "model.kohscan") == slurp(r.dir_b / "model.kohscan");

    bool round_trip = false;
    std::size_t n = 0;
    if (fs::exists(r.dir_a / "model.kohscan")) {
        const model::ModelBundle original = model::load(r.dir_a / "model.kohscan");
        model::save(original, work / "round_trip.kohscan");
        const model::ModelBundle reloaded = model::load(work / "round_trip.kohscan");
        const corpus::Manifest m = corpus::read_manifest(r.dir_a / "manifest.jsonl");
        const auto test = m.patches_in(corpus::Split::test);
        const auto& shape = original.model.spec().input_shape;
        const auto set = corpus::load_patches(m, test, static_cast<int>(shape[0]), static_cast<int>(shape[1]));
        std::vector<std::size_t> idx(set.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        const nn::Tensor batch = corpus::make_batch(set, idx, shape[2]);
        const auto a = model::fungus_scores(original.model, batch);
        const auto b = model::fungus_scores(reloaded.model, batch);
        n = a.size();
        round_trip = n > 0 && std::memcmp(a.data(), b.data(), n * sizeof(double)) == 0;
    }
    return {tables && bundles && round_trip && r.exit_b == r.exit_a,
            std::string("summary tables ") + (tables ? "identical" : "DIFFER") + ", bundles " +
                (bundles ? "identical" : "DIFFER") + ", save/load predictions on " + std::to_string(n) +
                " patches " + (round_trip ? "bit-identical" : "DIFFER")};
}

// ---------------------------------------------------------------- 10

json without(json j, std::initializer_list<const char*> keys) {
    for (const char* k : keys) j.erase(k);
    return j;
}

Outcome service_equivalence(const fs::path& dir, const fs::path& work) {
    const auto t0 = Clock::now();
    const fs::path bundle_path = dir / "model.kohscan";
    if (!fs::exists(bundle_path)) return {false, "no trained bundle"};
    const corpus::Manifest m = corpus::read_manifest(dir / "manifest.jsonl");

    // One held-out slide of each class and one patch cut from the fungus slide.
    std::vector<fs::path> slides;
    for (auto cls : {corpus::SlideClass::fungus_positive, corpus::SlideClass::keratin_only}) {
        for (const auto* p : m.patches_in(corpus::Split::test)) {
            const auto* s = m.find_slide(p->image_id);
            if (s->slide_class == cls) {
                slides.push_back(m.resolve(*s));
                break;
            }
        }
    }
    if (slides.size() != 2) return {false, "test split lacks a slide of each class"};
    const auto* fp = m.patches_in(corpus::Split::test).front();
    const image::Image patch = image::crop(image::read(m.resolve(*m.find_slide(fp->image_id))), fp->x, fp->y,
                                           fp->size_px, fp->size_px);
    const fs::path patch_path = work / "patch.png";
    image::write_png(patch_path, patch);

    serve::ServeConfig c;
    c.port = 0;
    serve::Service service(model::load(bundle_path), c);
    service.bind();
    std::thread server([&] { service.run(); });
    httplib::Client client("127.0.0.1", service.port());
    client.set_read_timeout(120, 0);

    int compared = 0, equal = 0;
    std::string note;
    for (std::size_t i = 0; i < slides.size(); ++i) {
        const fs::path report = work / ("cli_scan_" + std::to_string(i) + ".json");
        const int code = run_cli("scan --bundle \"" + bundle_path.string() + "\" --image \"" + slides[i].string() +
                                     "\" --threshold 0.5 --min-positive 1 --report \"" + report.string() + "\"",
                                 work / "cli_scan.log");
        const std::string bytes = slurp(slides[i]);
        httplib::MultipartFormDataItems items{{"image", bytes, slides[i].filename().string(), "image/png"}};
        auto res = client.Post("/scan", items);
        ++compared;
        if (code != 0 || !res || res->status != 200) {
            note += " scan request failed;";
            continue;
        }
        const json cli = without(json::parse(slurp(report)), {"timing"});
        const json http = without(json::parse(res->body), {"timing"});
        if (cli == http) ++equal;
        else note += " scan " + slides[i].stem().string() + " differs;";
    }
    {
        const int code = run_cli("classify --bundle \"" + bundle_path.string() + "\" --image \"" +
                                     patch_path.string() + "\" --threshold 0.5",
                                 work / "cli_classify.json");
        auto res = client.Post("/classify", slurp(patch_path), "image/png");
        ++compared;
        if (code == 0 && res && res->status == 200) {
            const json cli = without(json::parse(slurp(work / "cli_classify.json")), {"latency_ms"});
            const json http = without(json::parse(res->body), {"latency_ms"});
            if (cli == http) ++equal;
            else note += " classify differs;";
        } else {
            note += " classify request failed;";
        }
    }
    service.stop();
    server.join();
    const double secs = seconds_since(t0);
    return {equal == compared && secs < 60.0, std::to_string(equal) + "/" + std::to_string(compared) +
                                                  " responses equal the CLI output," + note + " " + fmt("%.1f", secs) +
                                                  " s"};
}

}  // namespace

int main(int argc, char** argv) {
    fs::path work = fs::temp_directory_path() / "kohscan_acceptance";
    std::set<int> only;
    bool reuse = false;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--work" && i + 1 < argc) {
            work = argv[++i];
        } else if (a == "--reuse") {
            reuse = true;
        } else if (a == "--only" && i + 1 < argc) {
            std::stringstream s(argv[++i]);
            std::string tok;
            while (std::getline(s, tok, ',')) only.insert(std::stoi(tok));
        } else {
            std::fprintf(stderr, "usage: %s [--work DIR] [--only N[,N...]] [--reuse]\n", argv[0]);
            return 2;
        }
    }
    fs::create_directories(work);
    log::set_quiet(true);
    const auto wanted = [&](int n) { return only.empty() || only.count(n) > 0; };

    int failed = 0;
    const auto report = [&](int n, const char* name, const std::function<Outcome()>& fn) {
        if (!wanted(n)) return;
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        if (!o.pass) ++failed;
        std::printf("%s [%2d] %s: %s\n", o.pass ? "PASS" : "FAIL", n, name, o.detail.c_str());
        std::fflush(stdout);
    };

    report(1, "paper-scale results as reference constants", reference_constants);
    report(2, "metric oracles", metric_oracles);
    report(3, "clinician F1", clinician_f1);
    report(4, "split arithmetic", split_arithmetic);
    report(5, "tiling closed form", tiling_closed_form);
    report(6, "architecture shape gates", architecture_gates);
    report(7, "gradient correctness", gradient_correctness);
    if (wanted(8) || wanted(9) || wanted(10)) {
        const ReproRuns runs = run_repros(work, reuse);
        report(8, "synthetic end-to-end", [&] { return end_to_end(runs); });
        report(9, "determinism", [&] { return determinism(runs, work); });
        report(10, "service equivalence", [&] { return service_equivalence(runs.dir_a, work); });
    }
    std::printf("%s\n", failed == 0 ? "all criteria passed" : (std::to_string(failed) + " criteria failed").c_str());
    return failed == 0 ? 0 : 1;
}
