#include "kohscan/metrics/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "kohscan/corpus/dataset.hpp"
#include "kohscan/image/draw.hpp"
#include "kohscan/util/error.hpp"

namespace kohscan::metrics {

using nlohmann::json;

namespace {

void check_inputs(std::span<const int> labels, std::span<const double> scores) {
    if (labels.size() != scores.size()) {
        throw PreconditionError("labels and scores differ in length (" + std::to_string(labels.size()) + " vs " +
                                std::to_string(scores.size()) + ")");
    }
    if (labels.empty()) throw PreconditionError("no samples to evaluate");
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw PreconditionError("labels must be 0 or 1");
        if (!(scores[i] >= 0.0 && scores[i] <= 1.0)) {
            throw PreconditionError("score " + std::to_string(scores[i]) + " at index " + std::to_string(i) +
                                    " lies outside [0,1]");
        }
    }
}

std::optional<double> ratio(std::uint64_t num, std::uint64_t den) {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
}

json opt(const std::optional<double>& v) { return v ? json(*v) : json("undefined"); }

std::optional<double> opt_from(const json& j) {
    if (j.is_string()) return std::nullopt;
    return j.get<double>();
}

// The +inf sentinel threshold is stored as null.
json threshold_json(double t) { return std::isinf(t) ? json(nullptr) : json(t); }

double threshold_from(const json& j) {
    return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

std::string pct(const std::optional<double>& v) {
    if (!v) return "undef";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * *v);
    return buf;
}

std::string num(double v, const char* fmt) {
    char buf[32];
    std::snprintf(buf, sizeof buf, fmt, v);
    return buf;
}

}  // namespace

ConfusionCounts confusion(std::span<const int> labels, std::span<const double> scores, double threshold) {
    check_inputs(labels, scores);
    ConfusionCounts c;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const bool predicted = scores[i] >= threshold;
        if (labels[i] == 1) {
            (predicted ? c.tp : c.fn)++;
        } else {
            (predicted ? c.fp : c.tn)++;
        }
    }
    return c;
}

std::optional<double> f1_score(double precision, double sensitivity) {
    if (precision + sensitivity == 0.0) return std::nullopt;
    return 2.0 * precision * sensitivity / (precision + sensitivity);
}

MetricSet derive_metrics(const ConfusionCounts& c) {
    MetricSet m;
    m.accuracy = ratio(c.tp + c.tn, c.total());
    m.sensitivity = ratio(c.tp, c.tp + c.fn);
    m.precision = ratio(c.tp, c.tp + c.fp);
    m.specificity = ratio(c.tn, c.tn + c.fp);
    if (m.precision && m.sensitivity) m.f1 = f1_score(*m.precision, *m.sensitivity);
    return m;
}

RocCurve roc(std::span<const int> labels, std::span<const double> scores) {
    check_inputs(labels, scores);
    const std::size_t pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    const std::size_t neg = labels.size() - pos;
    if (pos == 0 || neg == 0) throw PreconditionError("ROC curve needs both classes present");
    std::vector<std::size_t> order(labels.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    RocCurve c;
    c.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < order.size();) {
        const double s = scores[order[i]];
        while (i < order.size() && scores[order[i]] == s) {
            (labels[order[i]] == 1 ? tp : fp)++;
            ++i;
        }
        c.points.push_back({s, static_cast<double>(fp) / static_cast<double>(neg),
                            static_cast<double>(tp) / static_cast<double>(pos)});
    }
    return c;
}

double auc(const RocCurve& curve) {
    const auto& p = curve.points;
    if (p.size() < 2 || p.front().fpr != 0.0 || p.front().tpr != 0.0 || p.back().fpr != 1.0 || p.back().tpr != 1.0) {
        throw PreconditionError("ROC curve must run from (0,0) to (1,1)");
    }
    double area = 0.0;
    for (std::size_t i = 1; i < p.size(); ++i) {
        if (p[i].fpr < p[i - 1].fpr || p[i].tpr < p[i - 1].tpr) throw PreconditionError("ROC curve is not monotone");
        area += (p[i].fpr - p[i - 1].fpr) * (p[i].tpr + p[i - 1].tpr) / 2.0;
    }
    return area;
}

EvalReport evaluate_scores(std::span<const int> labels, std::span<const double> scores, double threshold) {
    EvalReport r;
    r.counts = confusion(labels, scores, threshold);
    r.metrics = derive_metrics(r.counts);
    r.roc = roc(labels, scores);
    r.auc = auc(r.roc);
    r.n_test = labels.size();
    r.threshold = threshold;
    r.labels.assign(labels.begin(), labels.end());
    r.scores.assign(scores.begin(), scores.end());
    return r;
}

EvalReport evaluate(const model::ModelBundle& bundle, const corpus::Manifest& manifest, corpus::Split split,
                    double threshold, int workers, std::size_t batch_size) {
    if (batch_size == 0) throw PreconditionError("batch_size must be positive");
    const auto records = manifest.patches_in(split);
    if (records.empty()) throw PreconditionError(corpus::to_string(split) + " split is empty");
    for (const auto* p : records) {
        if (p->label == corpus::Label::unlabeled) throw PreconditionError("patch " + p->patch_id + " is not labeled");
    }
    const auto& shape = bundle.model.spec().input_shape;
    const corpus::PatchSet set =
        corpus::load_patches(manifest, records, static_cast<int>(shape[0]), static_cast<int>(shape[1]), workers);

    std::vector<double> scores;
    scores.reserve(set.size());
    double seconds = 0.0;
    std::vector<std::size_t> idx;
    for (std::size_t b = 0; b < set.size(); b += batch_size) {
        const std::size_t e = std::min(set.size(), b + batch_size);
        idx.resize(e - b);
        std::iota(idx.begin(), idx.end(), b);
        const nn::Tensor batch = corpus::make_batch(set, idx, shape[2]);
        const auto t0 = std::chrono::steady_clock::now();
        const auto s = model::fungus_scores(bundle.model, batch);
        seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        scores.insert(scores.end(), s.begin(), s.end());
    }
    EvalReport r = evaluate_scores(set.labels, scores, threshold);
    r.split = corpus::to_string(split);
    r.patch_ids = set.patch_ids;
    r.latency_ms = 1000.0 * seconds / static_cast<double>(set.size());
    return r;
}

std::vector<std::string> consistency_errors(const EvalReport& r) {
    std::vector<std::string> errors;
    const auto& c = r.counts;
    if (c.total() != r.n_test) errors.push_back("counts do not sum to n_test");
    const MetricSet again = derive_metrics(c);
    const auto check = [&](const char* name, const std::optional<double>& got, const std::optional<double>& want) {
        if (got.has_value() != want.has_value() || (got && *got != *want)) {
            errors.push_back(std::string(name) + " differs from its formula over the counts");
        }
    };
    check("accuracy", r.metrics.accuracy, again.accuracy);
    check("sensitivity", r.metrics.sensitivity, again.sensitivity);
    check("precision", r.metrics.precision, again.precision);
    check("specificity", r.metrics.specificity, again.specificity);
    check("f1", r.metrics.f1, again.f1);
    if (r.metrics.accuracy && r.n_test > 0 &&
        *r.metrics.accuracy != static_cast<double>(c.tp + c.tn) / static_cast<double>(r.n_test)) {
        errors.push_back("accuracy differs from (tp+tn)/n");
    }
    if (r.metrics.f1 && r.metrics.precision && r.metrics.sensitivity) {
        const auto f = f1_score(*r.metrics.precision, *r.metrics.sensitivity);
        if (!f || std::abs(*f - *r.metrics.f1) > 1e-12) errors.push_back("f1 differs from 2PR/(P+R)");
    }
    if (!(r.auc >= 0.0 && r.auc <= 1.0)) errors.push_back("auc outside [0,1]");
    if (!r.roc.points.empty() && std::abs(auc(r.roc) - r.auc) > 1e-12) errors.push_back("auc differs from its curve");
    return errors;
}

json to_json(const ConfusionCounts& c) { return json{{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}}; }

json to_json(const MetricSet& m) {
    return json{{"accuracy", opt(m.accuracy)},
                {"sensitivity", opt(m.sensitivity)},
                {"precision", opt(m.precision)},
                {"specificity", opt(m.specificity)},
                {"f1", opt(m.f1)}};
}

json to_json(const EvalReport& r) {
    json roc = json::array();
    for (const auto& p : r.roc.points) roc.push_back({{"threshold", threshold_json(p.threshold)}, {"fpr", p.fpr}, {"tpr", p.tpr}});
    json j = to_json(r.metrics);
    j["counts"] = to_json(r.counts);
    j["auc"] = r.auc;
    j["n_test"] = r.n_test;
    j["latency_ms"] = r.latency_ms;
    j["threshold"] = r.threshold;
    j["split"] = r.split;
    j["roc"] = roc;
    json patches = json::array();
    for (std::size_t i = 0; i < r.scores.size(); ++i) {
        patches.push_back({{"patch_id", i < r.patch_ids.size() ? r.patch_ids[i] : std::string()},
                           {"label", r.labels[i]},
                           {"score", r.scores[i]}});
    }
    j["patches"] = patches;
    return j;
}

EvalReport eval_report_from_json(const json& j) {
    try {
        EvalReport r;
        const auto& c = j.at("counts");
        r.counts = ConfusionCounts{c.at("tp").get<std::uint64_t>(), c.at("fp").get<std::uint64_t>(),
                                   c.at("tn").get<std::uint64_t>(), c.at("fn").get<std::uint64_t>()};
        r.metrics.accuracy = opt_from(j.at("accuracy"));
        r.metrics.sensitivity = opt_from(j.at("sensitivity"));
        r.metrics.precision = opt_from(j.at("precision"));
        r.metrics.specificity = opt_from(j.at("specificity"));
        r.metrics.f1 = opt_from(j.at("f1"));
        r.auc = j.at("auc").get<double>();
        r.n_test = j.at("n_test").get<std::size_t>();
        r.latency_ms = j.value("latency_ms", 0.0);
        r.threshold = j.at("threshold").get<double>();
        r.split = j.value("split", std::string("test"));
        for (const auto& p : j.value("roc", json::array())) {
            r.roc.points.push_back({threshold_from(p.at("threshold")), p.at("fpr").get<double>(), p.at("tpr").get<double>()});
        }
        for (const auto& p : j.value("patches", json::array())) {
            r.patch_ids.push_back(p.at("patch_id").get<std::string>());
            r.labels.push_back(p.at("label").get<int>());
            r.scores.push_back(p.at("score").get<double>());
        }
        return r;
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed evaluation report: ") + e.what());
    }
}

std::string roc_text(const RocCurve& curve) {
    std::ostringstream os;
    os << "fpr\ttpr\n";
    os.precision(17);
    for (const auto& p : curve.points) os << p.fpr << '\t' << p.tpr << '\n';
    return os.str();
}

void write_roc_png(const RocCurve& curve, const std::string& title, const std::filesystem::path& path) {
    constexpr int kSize = 520, kLeft = 60, kTop = 40, kPlot = 420;
    image::Image img(kSize, kSize, 3, 255);
    const image::Rgb black{0, 0, 0}, grey{170, 170, 170}, blue{30, 80, 200};
    const auto px = [&](double fpr) { return kLeft + static_cast<int>(std::lround(fpr * kPlot)); };
    const auto py = [&](double tpr) { return kTop + kPlot - static_cast<int>(std::lround(tpr * kPlot)); };
    for (int i = 1; i < 5; ++i) {
        const double t = i / 5.0;
        image::draw_line(img, px(t), py(0), px(t), py(1), {235, 235, 235});
        image::draw_line(img, px(0), py(t), px(1), py(t), {235, 235, 235});
    }
    image::draw_line(img, px(0), py(0), px(1), py(1), grey);
    image::draw_line(img, px(0), py(0), px(1), py(0), black, 2);
    image::draw_line(img, px(0), py(0), px(0), py(1), black, 2);
    for (std::size_t i = 1; i < curve.points.size(); ++i) {
        const auto& a = curve.points[i - 1];
        const auto& b = curve.points[i];
        image::draw_line(img, px(a.fpr), py(a.tpr), px(b.fpr), py(b.tpr), blue, 2);
    }
    for (int i = 0; i <= 5; ++i) {
        const std::string label = num(i / 5.0, "%.1f");
        image::draw_text(img, px(i / 5.0) - image::text_width(label) / 2, py(0) + 8, label, black);
        image::draw_text(img, px(0) - image::text_width(label) - 6, py(i / 5.0) - 3, label, black);
    }
    image::draw_text(img, kLeft + kPlot / 2 - image::text_width("FALSE POSITIVE RATE") / 2, kTop + kPlot + 24,
                     "FALSE POSITIVE RATE", black);
    image::draw_text(img, 4, kTop - 14, "TRUE POSITIVE RATE", black);
    image::draw_text(img, kLeft, 10, title, black, 2);
    const std::string legend = "AUC = " + num(auc(curve), "%.4f");
    const int lx = px(1) - image::text_width(legend, 2) - 10;
    image::fill_rect(img, lx - 26, py(0) - 36, 18, 4, blue);
    image::draw_text(img, lx, py(0) - 41, legend, black, 2);
    image::write_png(path, img, 6);
}

std::string compare_table(std::span<const std::pair<std::string, EvalReport>> reports) {
    std::vector<std::vector<std::string>> rows;
    rows.push_back({"Model", "Accuracy", "Sensitivity", "Precision", "Specificity", "F1", "AUC"});
    for (const auto& [name, r] : reports) {
        rows.push_back({name, pct(r.metrics.accuracy), pct(r.metrics.sensitivity), pct(r.metrics.precision),
                        pct(r.metrics.specificity), r.metrics.f1 ? num(100.0 * *r.metrics.f1, "%.2f") : "undef",
                        num(r.auc, "%.4f")});
    }
    for (const auto& ref : {kReferenceInceptionV3, kReferenceVgg16}) {
        rows.push_back({ref.name, pct(ref.accuracy), pct(ref.sensitivity), pct(ref.precision), pct(ref.specificity),
                        num(100.0 * ref.f1, "%.2f"), num(ref.auc, "%.4f")});
    }
    using C = ClinicianBaseline;
    rows.push_back({"Clinician average", pct(C::accuracy), pct(C::sensitivity), pct(C::precision), pct(C::specificity),
                    num(100.0 * C::f1, "%.2f"), num(C::auc, "%.2f")});

    std::vector<std::size_t> width(rows.front().size(), 0);
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
    }
    std::string out;
    const auto emit = [&](const std::vector<std::string>& row) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i == 0) {
                out += row[i] + std::string(width[i] - row[i].size(), ' ');
            } else {
                out += "  " + std::string(width[i] - row[i].size(), ' ') + row[i];
            }
        }
        out += '\n';
    };
    emit(rows.front());
    std::size_t total = 0;
    for (auto w : width) total += w + 2;
    out += std::string(total - 2, '-') + '\n';
    for (std::size_t i = 1; i < rows.size(); ++i) emit(rows[i]);
    return out;
}

}  // namespace kohscan::metrics
