#include <algorithm>
#include <cmath>
#include <limits>

#include "doctest.h"
#include "kohscan/corpus/splits.hpp"
#include "kohscan/image/image.hpp"
#include "kohscan/metrics/metrics.hpp"
#include "kohscan/model/bundle.hpp"
#include "kohscan/synth/synth.hpp"
#include "kohscan/util/error.hpp"
#include "kohscan/util/rng.hpp"
#include "support.hpp"

using namespace kohscan;
using namespace kohscan::metrics;
using kohscan::testing::TempDir;

namespace {

// Mann-Whitney statistic by enumerating every positive/negative pair.
double pairwise_auc(const std::vector<int>& labels, const std::vector<double>& scores) {
    double wins = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < labels.size(); ++j) {
            if (labels[j] != 0) continue;
            ++pairs;
            if (scores[i] > scores[j]) wins += 1.0;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    }
    return wins / static_cast<double>(pairs);
}

struct Instance {
    std::vector<int> labels;
    std::vector<double> scores;
};

// Both classes present; scores quantised so that ties occur.
Instance random_instance(Rng& rng) {
    Instance in;
    const std::size_t n = 2 + rng.below(199);
    const double levels = rng.uniform() < 0.5 ? 10.0 : 1e6;
    for (std::size_t i = 0; i < n; ++i) {
        in.labels.push_back(rng.uniform() < 0.4 ? 1 : 0);
        in.scores.push_back(std::floor(rng.uniform() * levels) / levels);
    }
    in.labels[0] = 1;
    in.labels[1] = 0;
    return in;
}

}  // namespace

TEST_CASE("confusion hand case and perfect scores") {
    const std::vector<int> l{1, 1, 0, 0};
    const std::vector<double> s{0.9, 0.3, 0.2, 0.6};
    CHECK(confusion(l, s, 0.5) == ConfusionCounts{1, 1, 1, 1});
    const std::vector<double> perfect{1.0, 1.0, 0.0, 0.0};
    const auto c = confusion(l, perfect);
    CHECK(c.fn == 0);
    CHECK(c.fp == 0);
}

TEST_CASE("confusion rejects bad input") {
    const std::vector<int> l{1, 0};
    const std::vector<double> s{0.5};
    CHECK_THROWS_AS(confusion(l, s), PreconditionError);
    CHECK_THROWS_AS(confusion({}, {}), PreconditionError);
    const std::vector<double> out{0.5, 1.5};
    CHECK_THROWS_AS(confusion(l, out), PreconditionError);
}

TEST_CASE("confusion matches a naive recount on 1000 random instances") {
    Rng rng(31);
    for (int trial = 0; trial < 1000; ++trial) {
        const Instance in = random_instance(rng);
        const double t = rng.uniform();
        std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
        for (std::size_t i = 0; i < in.labels.size(); ++i) {
            if (in.labels[i] == 1 && in.scores[i] >= t) ++tp;
            if (in.labels[i] == 0 && in.scores[i] >= t) ++fp;
            if (in.labels[i] == 0 && in.scores[i] < t) ++tn;
            if (in.labels[i] == 1 && in.scores[i] < t) ++fn;
        }
        const auto c = confusion(in.labels, in.scores, t);
        REQUIRE(c == ConfusionCounts{tp, fp, tn, fn});
        REQUIRE(c.total() == in.labels.size());
    }
}

TEST_CASE("derived metrics") {
    SUBCASE("perfect classifier") {
        const auto m = derive_metrics({50, 0, 50, 0});
        for (const auto& v : {m.accuracy, m.sensitivity, m.precision, m.specificity, m.f1}) {
            REQUIRE(v.has_value());
            CHECK(*v == 1.0);
        }
    }
    SUBCASE("random counts against the formulas") {
        Rng rng(8);
        for (int i = 0; i < 500; ++i) {
            const ConfusionCounts c{1 + rng.below(100), 1 + rng.below(100), 1 + rng.below(100), 1 + rng.below(100)};
            const auto m = derive_metrics(c);
            const double tp = c.tp, fp = c.fp, tn = c.tn, fn = c.fn;
            const double p = tp / (tp + fp), r = tp / (tp + fn);
            CHECK(std::abs(*m.accuracy - (tp + tn) / (tp + fp + tn + fn)) <= 1e-12);
            CHECK(std::abs(*m.sensitivity - r) <= 1e-12);
            CHECK(std::abs(*m.precision - p) <= 1e-12);
            CHECK(std::abs(*m.specificity - tn / (tn + fp)) <= 1e-12);
            CHECK(std::abs(*m.f1 - 2 * p * r / (p + r)) <= 1e-12);
        }
    }
    SUBCASE("zero denominators are undefined, not zero") {
        const auto neg_only = derive_metrics({0, 3, 7, 0});
        CHECK_FALSE(neg_only.sensitivity.has_value());
        CHECK_FALSE(neg_only.f1.has_value());
        CHECK(*neg_only.precision == 0.0);
        const auto none_predicted = derive_metrics({0, 0, 5, 5});
        CHECK_FALSE(none_predicted.precision.has_value());
        CHECK(*none_predicted.sensitivity == 0.0);
        CHECK_FALSE(derive_metrics({}).accuracy.has_value());
        CHECK(to_json(neg_only).at("sensitivity") == "undefined");
    }
}

TEST_CASE("clinician F1 from its precision and sensitivity") {
    const auto f = f1_score(0.963, 0.61);
    REQUIRE(f.has_value());
    CHECK(std::abs(100.0 * *f - 74.69) <= 0.01);
    CHECK(std::abs(*f - ClinicianBaseline::f1) <= 1e-4);
    CHECK_FALSE(f1_score(0.0, 0.0).has_value());
}

TEST_CASE("roc curve shape") {
    SUBCASE("four-sample example") {
        const std::vector<int> l{0, 0, 1, 1};
        const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
        const auto c = roc(l, s);
        CHECK(std::abs(auc(c) - 0.75) <= 1e-12);
        CHECK(std::abs(pairwise_auc(l, s) - 0.75) <= 1e-12);
        REQUIRE(c.points.size() == 5);
        CHECK(std::isinf(c.points.front().threshold));
        CHECK(c.points[1] == RocPoint{0.8, 0.0, 0.5});
        CHECK(c.points.back() == RocPoint{0.1, 1.0, 1.0});
    }
    SUBCASE("perfect separation passes through (0,1)") {
        const std::vector<int> l{0, 1, 0, 1};
        const std::vector<double> s{0.2, 0.9, 0.1, 0.7};
        const auto c = roc(l, s);
        CHECK(std::find(c.points.begin(), c.points.end(), RocPoint{0.7, 0.0, 1.0}) != c.points.end());
        CHECK(auc(c) == 1.0);
    }
    SUBCASE("equal scores give the diagonal") {
        const std::vector<int> l{0, 1, 1, 0, 1};
        const std::vector<double> s(5, 0.5);
        const auto c = roc(l, s);
        REQUIRE(c.points.size() == 2);
        CHECK(c.points[0].fpr == 0.0);
        CHECK(c.points[1].tpr == 1.0);
        CHECK(auc(c) == 0.5);
    }
    SUBCASE("single class") {
        const std::vector<int> l{1, 1};
        const std::vector<double> s{0.1, 0.2};
        CHECK_THROWS_AS(roc(l, s), PreconditionError);
    }
    SUBCASE("invalid curve") {
        RocCurve bad;
        bad.points = {{1.0, 0.0, 0.0}, {0.5, 0.6, 0.4}, {0.2, 0.5, 1.0}, {0.0, 1.0, 1.0}};
        CHECK_THROWS_AS(auc(bad), PreconditionError);
        bad.points = {{1.0, 0.0, 0.0}, {0.5, 0.6, 0.4}};
        CHECK_THROWS_AS(auc(bad), PreconditionError);
    }
}

TEST_CASE("auc equals the pairwise oracle on 1000 random instances") {
    Rng rng(77);
    for (int trial = 0; trial < 1000; ++trial) {
        const Instance in = random_instance(rng);
        const auto c = roc(in.labels, in.scores);
        for (std::size_t i = 1; i < c.points.size(); ++i) {
            REQUIRE(c.points[i].fpr >= c.points[i - 1].fpr);
            REQUIRE(c.points[i].tpr >= c.points[i - 1].tpr);
            REQUIRE(c.points[i].threshold < c.points[i - 1].threshold);
        }
        REQUIRE(std::abs(auc(c) - pairwise_auc(in.labels, in.scores)) <= 1e-9);
    }
}

TEST_CASE("auc invariances") {
    Rng rng(12);
    for (int trial = 0; trial < 200; ++trial) {
        Instance in = random_instance(rng);
        const double base = auc(roc(in.labels, in.scores));

        std::vector<double> squashed;
        for (double s : in.scores) squashed.push_back(std::pow(s, 3.0) * 0.5 + 0.1);
        CHECK(std::abs(auc(roc(in.labels, squashed)) - base) <= 1e-12);

        std::vector<int> swapped;
        for (int l : in.labels) swapped.push_back(1 - l);
        CHECK(std::abs(auc(roc(swapped, in.scores)) - (1.0 - base)) <= 1e-12);
    }
}

TEST_CASE("report from scores") {
    Rng rng(4);
    const Instance in = random_instance(rng);
    const EvalReport r = evaluate_scores(in.labels, in.scores);
    CHECK(consistency_errors(r).empty());
    CHECK(r.n_test == in.labels.size());

    SUBCASE("threshold 0 predicts every sample positive") {
        const EvalReport all = evaluate_scores(in.labels, in.scores, 0.0);
        CHECK(*all.metrics.sensitivity == 1.0);
        CHECK(all.counts.tn == 0);
    }
    SUBCASE("json round trip") {
        const EvalReport back = eval_report_from_json(nlohmann::json::parse(to_json(r).dump()));
        CHECK(back.counts == r.counts);
        CHECK(back.metrics == r.metrics);
        CHECK(back.auc == r.auc);
        CHECK(back.scores == r.scores);
        REQUIRE(back.roc.points.size() == r.roc.points.size());
        CHECK(std::isinf(back.roc.points.front().threshold));
        CHECK(to_json(r).at("roc").at(0).at("threshold").is_null());
        CHECK(consistency_errors(back).empty());
    }
    SUBCASE("tampering is detected") {
        EvalReport bad = r;
        bad.metrics.accuracy = *bad.metrics.accuracy + 0.01;
        CHECK_FALSE(consistency_errors(bad).empty());
        bad = r;
        bad.counts.tp += 1;
        CHECK_FALSE(consistency_errors(bad).empty());
    }
}

TEST_CASE("roc outputs") {
    TempDir dir("roc");
    const std::vector<int> l{0, 0, 1, 1};
    const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
    const auto c = roc(l, s);
    const std::string text = roc_text(c);
    CHECK(text.rfind("fpr\ttpr\n", 0) == 0);
    CHECK(std::count(text.begin(), text.end(), '\n') == 6);
    write_roc_png(c, "TINY", dir / "roc.png");
    const auto img = image::read(dir / "roc.png");
    CHECK(img.width == 520);
    CHECK(img.channels == 3);
}

TEST_CASE("compare table lists local, reference and clinician rows") {
    Rng rng(2);
    const Instance in = random_instance(rng);
    const std::vector<std::pair<std::string, EvalReport>> reports{{"tiny", evaluate_scores(in.labels, in.scores)}};
    const std::string t = compare_table(reports);
    CHECK(t.find("tiny") != std::string::npos);
    CHECK(t.find("95.98%") != std::string::npos);
    CHECK(t.find("0.9917") != std::string::npos);
    CHECK(t.find("72.80%") != std::string::npos);
    CHECK(t.find("74.69") != std::string::npos);
}

TEST_CASE("evaluate scores each test patch once") {
    TempDir dir("eval");
    synth::SynthConfig c;
    c.n_slides_per_class = 3;
    c.width_px = 1200;
    c.height_px = 900;
    corpus::SplitSpec split;
    split.grouping = corpus::Grouping::iid;
    split.test_fraction = 0.5;
    split.val_fraction = 0.1;
    const corpus::Manifest m = corpus::assign_splits(synth::generate_corpus(c, dir.path()), split);

    model::ArchitectureSpec spec;
    spec.input_shape = {32, 32, 3};
    const model::ModelBundle bundle(model::build(spec, 3));
    const EvalReport r = evaluate(bundle, m, corpus::Split::test, 0.5, 2, 7);
    CHECK(r.n_test == m.stats.test);
    CHECK(r.patch_ids.size() == r.n_test);
    CHECK(consistency_errors(r).empty());
    CHECK(r.latency_ms > 0.0);

    // Scores do not depend on batching or worker count.
    const EvalReport again = evaluate(bundle, m, corpus::Split::test, 0.5, 1, 32);
    CHECK(again.scores == r.scores);

    std::filesystem::remove(dir / ("slides/" + m.patches_in(corpus::Split::test).front()->image_id + ".png"));
    CHECK_THROWS_AS(evaluate(bundle, m, corpus::Split::test), FormatError);
}
