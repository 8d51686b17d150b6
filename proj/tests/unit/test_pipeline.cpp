#include "doctest.h"
#include "kohscan/pipeline/repro.hpp"
#include "kohscan/util/log.hpp"
#include "support.hpp"

using namespace kohscan;
using kohscan::testing::slurp;
using kohscan::testing::TempDir;

namespace {

pipeline::ReproConfig small(const std::filesystem::path& out) {
    pipeline::ReproConfig c;
    c.out_dir = out;
    c.slides_per_class = 5;
    c.input_size = 32;
    c.epochs = 2;
    c.bn_recalibration_batches = 2;
    c.test_fraction = 0.3;
    c.val_fraction = 0.2;
    return c;
}

}  // namespace

TEST_CASE("small repro writes every artifact and reports its gates") {
    log::set_quiet(true);
    TempDir dir("pipeline");
    const auto a = pipeline::run_repro(small(dir / "a"));
    const auto b = pipeline::run_repro(small(dir / "b"));
    log::set_quiet(false);

    for (const char* f : {"corpus/manifest.jsonl", "corpus/geometry.json", "manifest.jsonl", "model.kohscan",
                          "train_report.json", "eval_report.json", "roc.tsv", "roc.png", "summary.json",
                          "summary.txt", "timing.json"}) {
        INFO(f);
        CHECK(std::filesystem::exists(dir / "a" / f));
    }
    REQUIRE(a.gates.size() == 5);
    // 10 small slides cannot reach the 2000-patch gate.
    CHECK_FALSE(a.passed());
    CHECK(a.gates[3].name == "patches");
    CHECK_FALSE(a.gates[3].passed);
    CHECK(a.gates[2].passed);
    CHECK(a.training.epochs.size() == 2);
    CHECK(a.slides.fungus_slides + a.slides.keratin_slides > 0);
    CHECK(a.text().find("Clinician average") != std::string::npos);
    CHECK(a.text().find("FAIL  patches") != std::string::npos);

    CHECK(slurp(dir / "a" / "summary.txt") == slurp(dir / "b" / "summary.txt"));
    CHECK(slurp(dir / "a" / "summary.json") == slurp(dir / "b" / "summary.json"));
    CHECK(b.evaluation.scores == a.evaluation.scores);
}

TEST_CASE("stage errors carry the stage name") {
    TempDir dir("pipeline_err");
    auto c = small(dir / "x");
    c.epochs = 0;
    try {
        pipeline::run_repro(c);
        FAIL("expected a StageError");
    } catch (const pipeline::StageError& e) {
        CHECK(e.stage() == "train");
        CHECK(e.precondition());
    }
    c = small(dir / "x");
    c.test_fraction = 1.5;
    CHECK_THROWS_WITH_AS(pipeline::run_repro(c), doctest::Contains("split:"), pipeline::StageError);
    c = small(dir / "x");
    c.slides_per_class = 0;
    CHECK_THROWS_WITH_AS(pipeline::run_repro(c), doctest::Contains("synth:"), pipeline::StageError);
    CHECK_FALSE(std::filesystem::exists(dir / "x"));
}
