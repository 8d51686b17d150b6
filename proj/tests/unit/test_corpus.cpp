#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "doctest.h"
#include "kohscan/corpus/dataset.hpp"
#include "kohscan/corpus/manifest.hpp"
#include "kohscan/corpus/preprocess.hpp"
#include "kohscan/corpus/splits.hpp"
#include "kohscan/corpus/tiling.hpp"
#include "kohscan/util/error.hpp"
#include "kohscan/util/log.hpp"
#include "support.hpp"

using namespace kohscan;
using namespace kohscan::corpus;
using kohscan::testing::TempDir;

namespace {

struct CaptureLog {
    std::vector<std::string> warnings;
    log::Sink previous;
    CaptureLog() {
        previous = log::set_sink([this](std::string_view level, std::string_view msg) {
            if (level == "warn") warnings.emplace_back(msg);
        });
    }
    ~CaptureLog() { log::set_sink(previous); }
};

Manifest synthetic_manifest(std::size_t n_images, std::size_t per_image, Rng& rng) {
    Manifest m;
    for (std::size_t i = 0; i < n_images; ++i) {
        SlideImage s;
        s.image_id = "img" + std::to_string(i);
        s.path = s.image_id + ".png";
        s.width_px = 6000;
        s.height_px = 4000;
        m.slides.push_back(s);
        for (std::size_t k = 0; k < per_image; ++k) {
            PatchRecord p;
            p.image_id = s.image_id;
            p.patch_id = s.image_id + "_p" + std::to_string(k);
            p.label = rng.uniform() < 0.46 ? Label::fungus : Label::keratin;
            m.patches.push_back(p);
        }
    }
    m.refresh_stats();
    return m;
}

image::Image gradient_image(int w, int h) {
    image::Image img(w, h, 1);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) img.at(x, y) = static_cast<std::uint8_t>((x * 7 + y * 3) % 256);
    }
    return img;
}

}  // namespace

TEST_CASE("enum names round-trip") {
    for (auto c : {SlideClass::fungus_positive, SlideClass::keratin_only, SlideClass::unlabeled}) {
        CHECK(parse_slide_class(to_string(c)) == c);
    }
    for (auto l : {Label::fungus, Label::keratin, Label::unlabeled}) CHECK(parse_label(to_string(l)) == l);
    for (auto s : {Split::train, Split::val, Split::test, Split::unassigned}) CHECK(parse_split(to_string(s)) == s);
    CHECK_THROWS_AS(parse_label("mold"), FormatError);
}

TEST_CASE("empty annotation file gives an empty manifest") {
    const Manifest m = parse_manifest("", "empty.jsonl");
    CHECK(m.slides.empty());
    CHECK(m.patches.empty());
    CHECK(m.stats == ManifestStats{});
    CHECK_NOTHROW(m.validate());
}

TEST_CASE("malformed rows report their line number") {
    const std::string slide = R"({"kind":"slide","image_id":"a","path":"a.png","width_px":600,"height_px":600})";
    SUBCASE("bad json") {
        const std::string text = slide + "\n\n{not json\n";
        try {
            parse_manifest(text, "ann.jsonl");
            FAIL("expected error");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("ann.jsonl:3:") != std::string::npos);
        }
    }
    SUBCASE("missing field") {
        const std::string text = slide + "\n" + R"({"kind":"patch","patch_id":"p","image_id":"a","x":0})";
        try {
            parse_manifest(text, "ann.jsonl");
            FAIL("expected error");
        } catch (const FormatError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("ann.jsonl:2:") != std::string::npos);
            CHECK(msg.find("'y'") != std::string::npos);
        }
    }
    SUBCASE("wrong type") {
        const std::string text = R"({"kind":"slide","image_id":"a","path":"a.png","width_px":"600"})";
        CHECK_THROWS_WITH_AS(parse_manifest(text, "m"), doctest::Contains("m:1:"), FormatError);
    }
    SUBCASE("unknown kind") {
        CHECK_THROWS_WITH_AS(parse_manifest(R"({"kind":"tile"})", "m"), doctest::Contains("unknown record kind"),
                             FormatError);
    }
    SUBCASE("bad label") {
        const std::string text = slide + "\n" +
                                 R"({"kind":"patch","patch_id":"p","image_id":"a","x":0,"y":0,"label":"mold"})";
        CHECK_THROWS_WITH_AS(parse_manifest(text, "m"), doctest::Contains("m:2:"), FormatError);
    }
}

TEST_CASE("duplicate ids are fatal") {
    const std::string slide = R"({"kind":"slide","image_id":"a","path":"a.png","width_px":600,"height_px":600})";
    const std::string patch = R"({"kind":"patch","patch_id":"p1","image_id":"a","x":0,"y":0,"label":"fungus"})";
    CHECK_THROWS_WITH_AS(parse_manifest(slide + "\n" + patch + "\n" + patch, "m"),
                         doctest::Contains("duplicate patch_id p1"), FormatError);
    CHECK_THROWS_WITH_AS(parse_manifest(slide + "\n" + slide, "m"), doctest::Contains("duplicate image_id a"),
                         FormatError);
}

TEST_CASE("validate enforces patch bounds and references") {
    Manifest m;
    m.slides.push_back(SlideImage{"a", "a.png", 600, 500, "c", SlideClass::fungus_positive});
    PatchRecord p{"p1", "a", 100, 0, 500, Label::fungus, Split::unassigned, 1.0};
    m.patches.push_back(p);
    m.refresh_stats();
    CHECK_NOTHROW(m.validate());
    m.patches[0].x = 101;
    CHECK_THROWS_WITH_AS(m.validate(), doctest::Contains("p1"), FormatError);
    m.patches[0].x = 0;
    m.patches[0].image_id = "b";
    CHECK_THROWS_WITH_AS(m.validate(), doctest::Contains("unknown image_id b"), FormatError);
    m.patches[0].image_id = "a";
    m.stats.fungus = 7;
    CHECK_THROWS_AS(m.validate(), FormatError);
}

TEST_CASE("ingest validates files and is idempotent") {
    TempDir dir("ingest");
    std::filesystem::create_directories(dir / "images");
    image::write_png(dir / "images/s1.png", gradient_image(640, 520));
    image::write_png(dir / "images/s2.png", gradient_image(520, 700));
    const std::string ann =
        R"({"kind":"slide","image_id":"s2","path":"s2.png","case_id":"c2","slide_class":"keratin_only"})"
        "\n"
        R"({"kind":"slide","image_id":"s1","path":"s1.png","case_id":"c1","slide_class":"fungus_positive"})"
        "\n"
        R"({"kind":"patch","patch_id":"s1_b","image_id":"s1","x":140,"y":20,"label":"fungus"})"
        "\n"
        R"({"kind":"patch","patch_id":"s1_a","image_id":"s1","x":0,"y":0,"label":"keratin"})"
        "\n"
        R"({"kind":"patch","patch_id":"s2_a","image_id":"s2","x":10,"y":200,"label":"keratin"})"
        "\n";
    kohscan::testing::spit(dir / "ann.jsonl", ann);

    const Manifest m = ingest(dir / "images", dir / "ann.jsonl");
    CHECK(m.stats.slides == 2);
    CHECK(m.stats.fungus == 1);
    CHECK(m.stats.keratin == 2);
    CHECK(m.stats.total == 3);
    REQUIRE(m.find_slide("s1"));
    CHECK(m.find_slide("s1")->width_px == 640);
    CHECK(m.find_slide("s2")->height_px == 700);
    CHECK(m.patches.front().patch_id == "s1_a");

    std::filesystem::create_directories(dir / "out");
    write_manifest(m, dir / "out/manifest.jsonl");
    const std::string first = kohscan::testing::slurp(dir / "out/manifest.jsonl");
    CHECK(first.find("\"path\":\"../images/s1.png\"") != std::string::npos);

    const Manifest again = ingest(dir / "out", dir / "out/manifest.jsonl");
    write_manifest(again, dir / "out/manifest2.jsonl");
    CHECK(kohscan::testing::slurp(dir / "out/manifest2.jsonl") == first);

    const Manifest reread = read_manifest(dir / "out/manifest.jsonl");
    CHECK(reread.patches == m.patches);
    CHECK(reread.stats == m.stats);
    CHECK(std::filesystem::equivalent(reread.resolve(*reread.find_slide("s2")), dir / "images/s2.png"));
}

TEST_CASE("ingest errors") {
    TempDir dir("ingest_err");
    image::write_png(dir / "s1.png", gradient_image(600, 600));
    SUBCASE("missing image names the path") {
        kohscan::testing::spit(dir / "ann.jsonl", R"({"kind":"slide","image_id":"x","path":"nope.png"})");
        CHECK_THROWS_WITH_AS(ingest(dir.path(), dir / "ann.jsonl"), doctest::Contains("nope.png"), FormatError);
    }
    SUBCASE("undecodable image") {
        kohscan::testing::spit(dir / "junk.png", "this is not an image");
        kohscan::testing::spit(dir / "ann.jsonl", R"({"kind":"slide","image_id":"x","path":"junk.png"})");
        CHECK_THROWS_AS(ingest(dir.path(), dir / "ann.jsonl"), FormatError);
    }
    SUBCASE("out-of-bounds patch rejected") {
        kohscan::testing::spit(dir / "ann.jsonl",
                               R"({"kind":"slide","image_id":"x","path":"s1.png"})"
                               "\n"
                               R"({"kind":"patch","patch_id":"p","image_id":"x","x":200,"y":0,"label":"fungus"})");
        CHECK_THROWS_WITH_AS(ingest(dir.path(), dir / "ann.jsonl"), doctest::Contains("patch p"), FormatError);
    }
    SUBCASE("declared size disagrees with file") {
        kohscan::testing::spit(dir / "ann.jsonl",
                               R"({"kind":"slide","image_id":"x","path":"s1.png","width_px":700,"height_px":600})");
        CHECK_THROWS_AS(ingest(dir.path(), dir / "ann.jsonl"), FormatError);
    }
}

TEST_CASE("export_patches writes labelled crops") {
    TempDir dir("export");
    const auto img = gradient_image(600, 600);
    image::write_png(dir / "s.png", img);
    Manifest m;
    m.root = dir.path();
    m.slides.push_back(SlideImage{"s", "s.png", 600, 600, "", SlideClass::fungus_positive});
    m.patches.push_back(PatchRecord{"s_1", "s", 50, 70, 500, Label::fungus, Split::unassigned, 1.0});
    m.patches.push_back(PatchRecord{"s_2", "s", 0, 0, 500, Label::unlabeled, Split::unassigned, 1.0});
    m.refresh_stats();
    CHECK(export_patches(m, dir / "patches") == 1);
    const auto crop = image::read(dir / "patches/s_1.png");
    CHECK(crop == image::crop(img, 50, 70, 500, 500));
}

TEST_CASE("tiling grid examples") {
    const SlideImage slide{"big", "big.png", 6000, 4000, "", SlideClass::unlabeled};
    const image::Image white(6000, 4000, 1, 255);
    const auto coarse = tile(slide, white, TileParams{500, 500, 0.0, {}});
    CHECK(coarse.size() == 96);
    CHECK(grid_positions(6000, 500, 500) == 12);
    CHECK(grid_positions(4000, 500, 500) == 8);
    const auto fine = tile(slide, white, TileParams{500, 250, 0.0, {}});
    CHECK(fine.size() == 345);

    // Row-major with in-bounds coordinates; ids sort in the same order.
    for (std::size_t i = 0; i < coarse.size(); ++i) {
        CHECK(coarse[i].x == static_cast<int>(i % 12) * 500);
        CHECK(coarse[i].y == static_cast<int>(i / 12) * 500);
        CHECK(coarse[i].content_fraction == 1.0);
        CHECK(coarse[i].label == Label::unlabeled);
        if (i > 0) CHECK(coarse[i - 1].patch_id < coarse[i].patch_id);
    }
}

TEST_CASE("tiling count matches the closed form for random sizes") {
    Rng rng(41);
    for (int trial = 0; trial < 200; ++trial) {
        const int s = rng.integer(4, 40);
        const int w = rng.integer(s, 300);
        const int h = rng.integer(s, 300);
        const int stride = rng.integer(1, 60);
        const image::Image img(w, h, 1, 128);
        const auto patches = tile(SlideImage{"r", "", w, h, "", SlideClass::unlabeled}, img, TileParams{s, stride, 0.0, {}});
        const std::size_t expect = static_cast<std::size_t>((w - s) / stride + 1) * static_cast<std::size_t>((h - s) / stride + 1);
        REQUIRE(patches.size() == expect);
        for (const auto& p : patches) {
            CHECK(p.x + s <= w);
            CHECK(p.y + s <= h);
        }
    }
}

TEST_CASE("all-black slide keeps no patches at min_content 0.5") {
    const image::Image black(2000, 1500, 1, 0);
    CHECK(tile(SlideImage{"b", "", 2000, 1500, "", SlideClass::unlabeled}, black, TileParams{500, 500, 0.5, {}}).empty());
}

TEST_CASE("slide smaller than the patch warns and returns nothing") {
    CaptureLog capture;
    const image::Image small(300, 800, 1, 200);
    const auto patches = tile(SlideImage{"s", "", 300, 800, "", SlideClass::unlabeled}, small, TileParams{});
    CHECK(patches.empty());
    REQUIRE(capture.warnings.size() == 1);
    CHECK(capture.warnings[0].find("smaller") != std::string::npos);
    CHECK_THROWS_AS(tile(SlideImage{}, small, TileParams{500, 0, 0.0, {}}), PreconditionError);
    CHECK_THROWS_AS(tile(SlideImage{}, small, TileParams{500, 500, 1.5, {}}), PreconditionError);
}

TEST_CASE("content_fraction") {
    const image::Image patch(500, 500, 1, 90);
    CHECK(content_fraction(patch, image::Mask(500, 500, true)) == 1.0);
    CHECK(content_fraction(patch, image::Mask(500, 500, false)) == 0.0);

    image::Mask half(500, 500);
    for (int y = 0; y < 500; ++y) {
        for (int x = 0; x < 250; ++x) half.set(x, y, true);
    }
    CHECK(std::abs(content_fraction(patch, half) - 0.5) <= 1.0 / 500);

    CHECK_THROWS_AS(content_fraction(patch, image::Mask(499, 500)), PreconditionError);
}

TEST_CASE("content_fraction matches a pixel count under random masks") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const int w = rng.integer(1, 60);
        const int h = rng.integer(1, 60);
        image::Mask m(w, h);
        std::size_t inside = 0;
        for (auto& b : m.bits) {
            b = rng.uniform() < 0.3 ? 1 : 0;
            inside += b;
        }
        CHECK(content_fraction(image::Image(w, h, 1), m) == doctest::Approx(double(inside) / (w * h)).epsilon(1e-15));
        const MaskIntegral integral(m);
        CHECK(integral.count(0, 0, w, h) == inside);
    }
}

TEST_CASE("field mask finds the illuminated disk") {
    const int w = 400;
    const int h = 300;
    const double cx = 200;
    const double cy = 150;
    const double r = 120;
    image::Image img(w, h, 1, 10);
    std::size_t disk = 0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (std::hypot(x - cx, y - cy) <= r) {
                img.at(x, y) = 200;
                ++disk;
            }
        }
    }
    // Dark specks inside the field (debris) and a bright speck outside.
    for (int y = 140; y < 160; ++y) {
        for (int x = 190; x < 210; ++x) img.at(x, y) = 5;
    }
    img.at(5, 5) = 250;
    const auto mask = field_mask(img);
    std::size_t inside = 0;
    for (auto b : mask.bits) inside += b;
    CHECK(inside == disk);
    CHECK(mask.at(200, 150));
    CHECK_FALSE(mask.at(5, 5));

    const MaskIntegral integral(mask);
    CHECK(integral.fraction(180, 130, 40, 40) == 1.0);
    CHECK(integral.fraction(0, 0, 40, 40) == 0.0);

    CHECK(otsu_threshold(img) >= 10);
    CHECK(otsu_threshold(img) < 200);
}

TEST_CASE("field mask edge cases") {
    CHECK(field_mask(image::Image(10, 10, 1, 0)).bits == std::vector<std::uint8_t>(100, 0));
    CHECK(field_mask(image::Image(10, 10, 1, 77)).bits == std::vector<std::uint8_t>(100, 1));
    image::Image img(10, 10, 1, 50);
    img.at(3, 3) = 100;
    CHECK(field_mask(img, 60).bits[33] == 1);
    CHECK(field_mask(img, 60).bits[0] == 0);
}

TEST_CASE("split arithmetic for a 9,215-patch corpus") {
    Rng rng(5);
    const Manifest m = synthetic_manifest(457, 0, rng);
    Manifest big = m;
    for (std::size_t i = 0; i < 9215; ++i) {
        PatchRecord p;
        p.image_id = "img" + std::to_string(rng.below(457));
        p.patch_id = "p" + std::to_string(100000 + i);
        p.label = i < 4234 ? Label::fungus : Label::keratin;
        big.patches.push_back(p);
    }
    big.refresh_stats();
    CHECK(big.stats.fungus == 4234);
    CHECK(big.stats.keratin == 4981);
    CHECK(big.stats.total == 9215);

    CHECK(split_target(0.20, 9215) == 1843);
    CHECK(split_target(0.15, 9215) == 1382);

    SplitSpec spec;
    spec.grouping = Grouping::iid;
    spec.seed = 11;
    const Manifest iid = assign_splits(big, spec);
    CHECK(iid.stats.test == 1843);
    CHECK(iid.stats.val == 1382);
    CHECK(iid.stats.train == 9215 - 1843 - 1382);

    spec.grouping = Grouping::by_image;
    const Manifest grouped = assign_splits(big, spec);
    std::map<std::string, std::size_t> group_size;
    for (const auto& p : big.patches) ++group_size[p.image_id];
    std::size_t largest = 0;
    for (const auto& [id, n] : group_size) largest = std::max(largest, n);
    CHECK(std::abs(static_cast<long>(grouped.stats.test) - 1843L) <= static_cast<long>(largest));
    CHECK(std::abs(static_cast<long>(grouped.stats.val) - 1382L) <= static_cast<long>(largest));
}

TEST_CASE("splits are deterministic and independent of input order") {
    Rng rng(9);
    Manifest m = synthetic_manifest(1, 10, rng);
    SplitSpec spec;
    spec.grouping = Grouping::iid;
    spec.seed = 123;
    const Manifest a = assign_splits(m, spec);
    const Manifest b = assign_splits(m, spec);
    CHECK(a.patches == b.patches);
    CHECK(a.stats.test == 2);
    std::reverse(m.patches.begin(), m.patches.end());
    CHECK(assign_splits(m, spec).patches == a.patches);
}

TEST_CASE("by_image grouping keeps each slide in one split") {
    Rng rng(2);
    const Manifest m = synthetic_manifest(3, 7, rng);
    const Manifest s = assign_splits(m, SplitSpec{0.2, 0.15, 4, Grouping::by_image});
    std::map<std::string, std::set<Split>> seen;
    for (const auto& p : s.patches) seen[p.image_id].insert(p.split);
    CHECK(seen.size() == 3);
    for (const auto& [id, splits] : seen) CHECK(splits.size() == 1);
}

TEST_CASE("split partition property over random manifests") {
    Rng rng(77);
    for (int trial = 0; trial < 50; ++trial) {
        const Manifest m = synthetic_manifest(static_cast<std::size_t>(rng.integer(1, 20)),
                                              static_cast<std::size_t>(rng.integer(1, 15)), rng);
        const double tf = rng.uniform(0.05, 0.5);
        const double vf = rng.uniform(0.05, 0.9 - tf);
        for (auto g : {Grouping::iid, Grouping::by_image}) {
            const Manifest s = assign_splits(m, SplitSpec{tf, vf, rng.next_u64(), g});
            REQUIRE(s.patches.size() == m.patches.size());
            CHECK(s.stats.train + s.stats.val + s.stats.test == s.stats.total);
            CHECK(s.stats.unassigned == 0);
            std::set<std::string> ids;
            for (const auto& p : s.patches) ids.insert(p.patch_id);
            CHECK(ids.size() == m.patches.size());
            if (g == Grouping::iid) {
                CHECK(s.stats.test == split_target(tf, m.patches.size()));
            } else {
                std::map<std::string, std::set<Split>> seen;
                for (const auto& p : s.patches) seen[p.image_id].insert(p.split);
                for (const auto& [id, splits] : seen) CHECK(splits.size() == 1);
            }
        }
    }
}

TEST_CASE("split preconditions") {
    Rng rng(1);
    Manifest m = synthetic_manifest(2, 3, rng);
    CHECK_THROWS_AS(assign_splits(m, SplitSpec{0.0, 0.15, 0, Grouping::iid}), PreconditionError);
    CHECK_THROWS_AS(assign_splits(m, SplitSpec{0.6, 0.4, 0, Grouping::iid}), PreconditionError);
    m.patches[4].label = Label::unlabeled;
    CHECK_THROWS_WITH_AS(assign_splits(m, SplitSpec{}), doctest::Contains(m.patches[4].patch_id.c_str()),
                         PreconditionError);
    CHECK(parse_grouping("image") == Grouping::by_image);
    CHECK(parse_grouping("none") == Grouping::iid);
}

TEST_CASE("preprocess output contract") {
    image::Image checker(500, 500, 1);
    for (int y = 0; y < 500; ++y) {
        for (int x = 0; x < 500; ++x) checker.at(x, y) = ((x / 25 + y / 25) % 2) ? 255 : 0;
    }
    const auto t = preprocess(checker);
    CHECK(t.shape() == nn::Shape{224, 224, 3});
    for (std::size_t i = 0; i < t.size(); i += 3) {
        CHECK(t.data()[i] == t.data()[i + 1]);
        CHECK(t.data()[i] == t.data()[i + 2]);
    }

    const auto ones = preprocess(image::Image(500, 500, 1, 255));
    CHECK(std::all_of(ones.values().begin(), ones.values().end(), [](double v) { return v == 1.0; }));
}

TEST_CASE("preprocess values stay in range for random patches") {
    Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        image::Image img(rng.integer(10, 600), rng.integer(10, 600), 1);
        for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.below(256));
        const auto plane = preprocess_plane(img, 64, 48);
        CHECK(plane.size() == 64u * 48u);
        CHECK(std::all_of(plane.begin(), plane.end(), [](float v) { return v >= 0.0f && v <= 1.0f; }));
    }
}

TEST_CASE("bilinear resize matches exact cases") {
    image::Image img(8, 6, 1);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(i * 5);
    // Same size: identity.
    const auto same = preprocess_plane(img, 6, 8);
    for (std::size_t i = 0; i < same.size(); ++i) CHECK(same[i] == static_cast<float>(img.pixels[i] / 255.0));
    // Exact halving samples between pixel pairs: the 2x2 block mean.
    const auto half = preprocess_plane(img, 3, 4);
    for (int y = 0; y < 3; ++y) {
        for (int x = 0; x < 4; ++x) {
            const double mean = (img.at(2 * x, 2 * y) + img.at(2 * x + 1, 2 * y) + img.at(2 * x, 2 * y + 1) +
                                 img.at(2 * x + 1, 2 * y + 1)) /
                                4.0 / 255.0;
            CHECK(half[static_cast<std::size_t>(y * 4 + x)] == doctest::Approx(mean).epsilon(1e-6));
        }
    }
}

TEST_CASE("colour patches are converted with a warning") {
    CaptureLog capture;
    image::Image rgb(20, 20, 3, 0);
    for (int y = 0; y < 20; ++y) {
        for (int x = 0; x < 20; ++x) rgb.at(x, y, 0) = 255;
    }
    const auto t = preprocess(rgb, 20, 20);
    CHECK(capture.warnings.size() == 1);
    CHECK(t.data()[0] == doctest::Approx(std::round(0.299 * 255) / 255.0).epsilon(1e-6));
}

TEST_CASE("load_patches crops, orders and reports missing files") {
    TempDir dir("load");
    const auto img = gradient_image(120, 100);
    image::write_png(dir / "a.png", img);
    Manifest m;
    m.root = dir.path();
    m.slides.push_back(SlideImage{"a", "a.png", 120, 100, "", SlideClass::fungus_positive});
    m.slides.push_back(SlideImage{"b", "b.png", 120, 100, "", SlideClass::keratin_only});
    m.patches.push_back(PatchRecord{"a_1", "a", 10, 20, 50, Label::fungus, Split::test, 1.0});
    m.patches.push_back(PatchRecord{"a_0", "a", 0, 0, 50, Label::keratin, Split::test, 1.0});
    m.patches.push_back(PatchRecord{"b_0", "b", 0, 0, 50, Label::keratin, Split::test, 1.0});
    m.refresh_stats();

    std::vector<const PatchRecord*> first{&m.patches[0], &m.patches[1]};
    for (int workers : {1, 3}) {
        const PatchSet set = load_patches(m, first, 25, 25, workers);
        REQUIRE(set.size() == 2);
        CHECK(set.labels == std::vector<int>{1, 0});
        CHECK(set.patch_ids == std::vector<std::string>{"a_1", "a_0"});
        CHECK(set.planes[0] == preprocess_plane(image::crop(img, 10, 20, 50, 50), 25, 25));
    }

    const auto all = m.patches_in(Split::test);
    CHECK_THROWS_WITH_AS(load_patches(m, all, 25, 25), doctest::Contains("b.png"), FormatError);

    const PatchSet set = load_patches(m, first, 25, 25);
    const std::vector<std::size_t> idx{1, 0};
    const std::vector<Flip> flips{Flip{true, false}, Flip{}};
    const auto batch = make_batch(set, idx, 3, flips);
    CHECK(batch.shape() == nn::Shape{2, 25, 25, 3});
    CHECK(batch.data()[0] == set.planes[1][24]);
    CHECK(batch.data()[25 * 25 * 3] == set.planes[0][0]);
}
