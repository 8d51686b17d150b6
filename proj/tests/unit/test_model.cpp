#include <cmath>
#include <numeric>

#include "doctest.h"
#include "kohscan/model/bundle.hpp"
#include "kohscan/model/model.hpp"
#include "kohscan/util/error.hpp"
#include "support.hpp"

using namespace kohscan;
using namespace kohscan::model;
using kohscan::testing::TempDir;

namespace {

nn::Tensor random_batch(std::size_t n, const nn::Shape& sample, Rng& rng) {
    nn::Shape shape{n};
    shape.insert(shape.end(), sample.begin(), sample.end());
    nn::Tensor t(shape);
    for (auto& v : t.values()) v = rng.uniform();
    return t;
}

void check_rows_are_distributions(const nn::Tensor& probs) {
    for (std::size_t r = 0; r < probs.dim(0); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < probs.dim(1); ++c) {
            const double v = probs[r * probs.dim(1) + c];
            CHECK(std::isfinite(v));
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            s += v;
        }
        CHECK(std::abs(s - 1.0) <= 1e-6);
    }
}

ArchitectureSpec tiny_spec() {
    ArchitectureSpec s;
    s.backbone = Backbone::tiny;
    return s;
}

// (fan_in + 1) * fan_out for a dense layer or (k*k*cin + 1) * cout for a conv.
std::size_t affine(std::size_t fan_in, std::size_t fan_out) { return (fan_in + 1) * fan_out; }

}  // namespace

TEST_CASE("spec validation") {
    ArchitectureSpec s;
    CHECK_NOTHROW(s.validate());
    s.head_widths = {};
    CHECK_THROWS_AS(s.validate(), PreconditionError);
    s = ArchitectureSpec{};
    s.n_classes = 1;
    CHECK_THROWS_AS(s.validate(), PreconditionError);
    s = ArchitectureSpec{};
    s.backbone = Backbone::vgg16;
    s.input_shape = {112, 112, 3};
    CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("224"), PreconditionError);
    s.backbone = Backbone::tiny;
    CHECK_NOTHROW(s.validate());
    CHECK_THROWS_AS(parse_backbone("resnet50"), PreconditionError);
    CHECK(parse_backbone("inceptionv3") == Backbone::inceptionv3);

    nlohmann::json j = tiny_spec();
    CHECK(j.get<ArchitectureSpec>() == tiny_spec());
}

TEST_CASE("stock parameter counts") {
    CHECK(stock_parameter_count(Backbone::vgg16) == 138'357'544);
    CHECK(stock_parameter_count(Backbone::inceptionv3) == 23'851'784);
    ArchitectureSpec s;
    s.backbone = Backbone::inceptionv3;
    CHECK(build_network(s, Top::stock).trainable_parameter_count() == 23'817'352);
}

TEST_CASE("tiny parameter count equals the per-layer closed form") {
    const ArchitectureSpec s = tiny_spec();
    const auto& w = s.tiny_widths;
    // Bias-free conv, then batch norm with a learned offset and two running statistics.
    std::size_t expect = 0, frozen = 0, cin = 3;
    for (auto c : w) {
        expect += 3 * 3 * cin * c + c;
        frozen += 2 * c;
        cin = c;
    }
    std::size_t prev = w[2];
    for (auto h : s.head_widths) {
        expect += affine(prev, h);
        prev = h;
    }
    expect += affine(prev, s.n_classes);
    const Model m = build(s, 1);
    CHECK(trainable_parameter_count(m) == expect);
    CHECK(parameter_count(m) == expect + frozen);
    CHECK(trainable_parameter_count(m) <= 10'000);
}

TEST_CASE("head structure of the vgg16 and inceptionv3 backbones") {
    for (auto b : {Backbone::vgg16, Backbone::inceptionv3}) {
        ArchitectureSpec s;
        s.backbone = b;
        const nn::Network net = build_network(s);
        const auto info = net.summary();
        const int start = head_start(net);
        REQUIRE(start > 0);
        const auto& feat = info[static_cast<std::size_t>(start) - 1];
        CHECK(feat.name == "features");
        CHECK(feat.kind == (b == Backbone::vgg16 ? "flatten" : "global_avgpool"));
        std::vector<std::string> kinds;
        std::vector<std::size_t> widths;
        for (std::size_t i = static_cast<std::size_t>(start); i < info.size(); ++i) {
            kinds.push_back(info[i].kind);
            if (info[i].kind == "dense") widths.push_back(info[i].output_shape[0]);
        }
        CHECK(kinds == std::vector<std::string>{"dense", "relu", "dense", "relu", "dense", "softmax"});
        CHECK(widths == std::vector<std::size_t>{64, 32, 2});

        std::size_t head = 0;
        for (std::size_t i = static_cast<std::size_t>(start); i < info.size(); ++i) head += info[i].parameters;
        const std::size_t fan = feat.output_shape[0];
        CHECK(head == affine(fan, 64) + affine(64, 32) + affine(32, 2));
        if (b == Backbone::vgg16) {
            CHECK(fan == 7 * 7 * 512);
            CHECK(head == 1'607'842);
        } else {
            CHECK(fan == 2048);
        }
    }
}

TEST_CASE("vgg16 with the custom head emits distributions") {
    ArchitectureSpec s;
    s.backbone = Backbone::vgg16;
    const Model m = build(s, 3);
    Rng rng(4);
    const auto probs = predict_batch(m, random_batch(4, s.input_shape, rng));
    CHECK(probs.shape() == nn::Shape{4, 2});
    check_rows_are_distributions(probs);
}

TEST_CASE("tiny model on a zero batch stays finite") {
    const Model m = build(tiny_spec(), 5);
    const auto probs = predict_batch(m, nn::Tensor({1, 224, 224, 3}));
    check_rows_are_distributions(probs);
}

TEST_CASE("predictions are deterministic and batch-permutation equivariant") {
    ArchitectureSpec s = tiny_spec();
    s.input_shape = {48, 40, 3};
    const Model m = build(s, 6);
    Rng rng(7);
    nn::Tensor batch = random_batch(5, s.input_shape, rng);
    const std::size_t stride = 48 * 40 * 3;
    std::copy(batch.data(), batch.data() + stride, batch.data() + 3 * stride);
    const auto probs = predict_batch(m, batch);
    check_rows_are_distributions(probs);
    CHECK(probs[0] == probs[6]);
    CHECK(probs[1] == probs[7]);
    CHECK(predict_batch(m, batch) == probs);

    const std::vector<std::size_t> perm{4, 2, 0, 1, 3};
    nn::Tensor permuted(batch.shape());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        std::copy(batch.data() + perm[i] * stride, batch.data() + (perm[i] + 1) * stride, permuted.data() + i * stride);
    }
    const auto pp = predict_batch(m, permuted);
    for (std::size_t i = 0; i < perm.size(); ++i) {
        CHECK(pp[2 * i] == probs[2 * perm[i]]);
        CHECK(pp[2 * i + 1] == probs[2 * perm[i] + 1]);
    }
}

TEST_CASE("random batches give distributions") {
    ArchitectureSpec s = tiny_spec();
    s.input_shape = {32, 32, 3};
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        const Model m = build(s, rng.next_u64());
        nn::Tensor batch = random_batch(3, s.input_shape, rng);
        for (auto& v : batch.values()) v = rng.uniform(-50.0, 50.0);
        check_rows_are_distributions(predict_batch(m, batch));
    }
}

TEST_CASE("wrong batch shape names the expected shape") {
    const Model m = build(tiny_spec(), 1);
    CHECK_THROWS_WITH_AS(predict_batch(m, nn::Tensor({2, 100, 100, 3})), doctest::Contains("(N, 224, 224, 3)"),
                         PreconditionError);
}

TEST_CASE("tiny golden output") {
    ArchitectureSpec s = tiny_spec();
    s.input_shape = {32, 32, 3};
    const Model m = build(s, 2024);
    nn::Tensor x({1, 32, 32, 3});
    for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] = static_cast<double>((i * 37) % 101) / 100.0;
    const auto p = predict_batch(m, x);
    // Frozen from the reference implementation.
    CHECK(std::abs(p[1] - 0.493790406463) <= 1e-5);
    CHECK(std::abs(p[0] + p[1] - 1.0) <= 1e-12);
}

TEST_CASE("bundle round trip preserves predictions bit for bit") {
    TempDir dir("bundle");
    ArchitectureSpec s = tiny_spec();
    s.input_shape = {40, 40, 3};
    ModelBundle b(build(s, 9));
    b.fingerprint = TrainingFingerprint{9, "abc", 3};
    save(b, dir / "m.kohscan");
    const ModelBundle back = load(dir / "m.kohscan");
    CHECK(back.model.spec() == s);
    CHECK(back.fingerprint == b.fingerprint);
    CHECK(back.format_version == kBundleFormatVersion);
    CHECK(parameter_count(back.model) == parameter_count(b.model));
    Rng rng(10);
    const auto batch = random_batch(3, s.input_shape, rng);
    CHECK(predict_batch(back.model, batch) == predict_batch(b.model, batch));
    CHECK(serialize(back) == serialize(b));
    CHECK(metadata(back)["parameter_count"] == parameter_count(b.model));
}

TEST_CASE("corrupt and future bundles are rejected") {
    ArchitectureSpec s = tiny_spec();
    s.input_shape = {24, 24, 3};
    const std::string bytes = serialize(ModelBundle(build(s, 1)));

    std::string flipped = bytes;
    flipped[bytes.size() / 2] = static_cast<char>(flipped[bytes.size() / 2] ^ 0x40);
    CHECK_THROWS_AS(deserialize(flipped), IntegrityError);
    CHECK_THROWS_AS(deserialize(bytes.substr(0, bytes.size() - 9)), IntegrityError);
    CHECK_THROWS_AS(deserialize("not a bundle"), IntegrityError);

    std::string future = bytes;
    future[8] = 2;
    CHECK_THROWS_AS(deserialize(future), VersionError);
}

TEST_CASE("pretrained backbone weights are copied from a bundle") {
    TempDir dir("pretrained");
    ArchitectureSpec s = tiny_spec();
    s.input_shape = {32, 32, 3};
    const Model source = build(s, 11);
    save(ModelBundle(build(s, 11)), dir / "src.kohscan");

    ArchitectureSpec t = s;
    t.head_widths = {16};
    t.pretrained_backbone = true;
    t.backbone_weights = (dir / "src.kohscan").string();
    const Model m = build(t, 12);
    const auto names = m.network().param_names();
    const auto src_names = source.network().param_names();
    const auto params = m.network().all_params();
    const auto src_params = source.network().all_params();
    std::size_t same = 0;
    for (std::size_t i = 0; i < names.size(); ++i) {
        for (std::size_t j = 0; j < src_names.size(); ++j) {
            if (names[i] == src_names[j] && names[i].rfind("head", 0) != 0 && names[i].rfind("logits", 0) != 0) {
                CHECK(params[i]->value == src_params[j]->value);
                ++same;
            }
        }
    }
    // Three conv kernels plus offset, mean and variance of each batch norm.
    CHECK(same == 12);

    t.backbone = Backbone::vgg16;
    t.input_shape = {224, 224, 3};
    CHECK_THROWS_AS(build(t, 1), PreconditionError);
}
