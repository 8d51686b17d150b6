#include "kohscan/model/architecture.hpp"

#include "kohscan/util/error.hpp"

namespace kohscan::model {
namespace {

using nn::Network;
using nn::Padding;

class NetBuilder {
public:
    explicit NetBuilder(Network& net) : net_(net) {}

    int conv(int in, std::size_t filters, std::size_t kh, std::size_t kw, std::size_t stride, Padding pad,
             bool bias, const std::string& name) {
        const std::size_t c = net_.node_shape(in).back();
        return net_.add(name, std::make_unique<nn::Conv2D>(c, filters, kh, kw, stride, stride, pad, bias), in);
    }

    int relu(int in, const std::string& name) { return net_.add(name, std::make_unique<nn::Relu>(), in); }

    // Convolution without bias, offset-only batch norm, rectifier.
    int conv_bn(int in, std::size_t filters, std::size_t kh, std::size_t kw, std::size_t stride = 1,
                Padding pad = Padding::same) {
        const int id = ++bn_counter_;
        const std::string suffix = id == 1 ? "" : "_" + std::to_string(id - 1);
        int x = conv(in, filters, kh, kw, stride, pad, false, "conv2d" + suffix);
        x = net_.add("batch_normalization" + suffix, std::make_unique<nn::BatchNorm>(filters), x);
        return relu(x, "activation" + suffix);
    }

    int max_pool(int in, std::size_t size, std::size_t stride, Padding pad, const std::string& name) {
        return net_.add(name, std::make_unique<nn::MaxPool2D>(size, stride, pad), in);
    }

    int avg_pool(int in, std::size_t size, std::size_t stride, Padding pad, const std::string& name) {
        return net_.add(name, std::make_unique<nn::AvgPool2D>(size, stride, pad), in);
    }

    int concat(std::vector<int> in, const std::string& name) {
        return net_.add(name, std::make_unique<nn::Concat>(), std::move(in));
    }

    int dense(int in, std::size_t units, const std::string& name) {
        return net_.add(name, std::make_unique<nn::Dense>(net_.node_shape(in).front(), units), in);
    }

    int pool_name_counter() { return ++pool_counter_; }

private:
    Network& net_;
    int bn_counter_ = 0;
    int pool_counter_ = 0;
};

int vgg16_features(Network& net) {
    NetBuilder b(net);
    const std::size_t widths[5] = {64, 128, 256, 512, 512};
    const int convs[5] = {2, 2, 3, 3, 3};
    int x = Network::kInput;
    for (int block = 0; block < 5; ++block) {
        const std::string prefix = "block" + std::to_string(block + 1);
        for (int i = 0; i < convs[block]; ++i) {
            const std::string name = prefix + "_conv" + std::to_string(i + 1);
            x = b.conv(x, widths[block], 3, 3, 1, Padding::same, true, name);
            x = b.relu(x, name + "_relu");
        }
        x = b.max_pool(x, 2, 2, Padding::valid, prefix + "_pool");
    }
    return x;
}

// Canonical InceptionV3 feature extractor (stem, mixed0..mixed10).
int inceptionv3_features(Network& net) {
    NetBuilder b(net);
    auto pool_name = [&](const char* kind) { return std::string(kind) + "_" + std::to_string(b.pool_name_counter()); };

    int x = b.conv_bn(Network::kInput, 32, 3, 3, 2, Padding::valid);
    x = b.conv_bn(x, 32, 3, 3, 1, Padding::valid);
    x = b.conv_bn(x, 64, 3, 3);
    x = b.max_pool(x, 3, 2, Padding::valid, pool_name("max_pooling2d"));
    x = b.conv_bn(x, 80, 1, 1, 1, Padding::valid);
    x = b.conv_bn(x, 192, 3, 3, 1, Padding::valid);
    x = b.max_pool(x, 3, 2, Padding::valid, pool_name("max_pooling2d"));

    // mixed0..2: 35x35 grid (25x25 at 224 input)
    for (int i = 0; i < 3; ++i) {
        const int b1 = b.conv_bn(x, 64, 1, 1);
        int b5 = b.conv_bn(x, 48, 1, 1);
        b5 = b.conv_bn(b5, 64, 5, 5);
        int b3 = b.conv_bn(x, 64, 1, 1);
        b3 = b.conv_bn(b3, 96, 3, 3);
        b3 = b.conv_bn(b3, 96, 3, 3);
        int bp = b.avg_pool(x, 3, 1, Padding::same, pool_name("average_pooling2d"));
        bp = b.conv_bn(bp, i == 0 ? 32 : 64, 1, 1);
        x = b.concat({b1, b5, b3, bp}, "mixed" + std::to_string(i));
    }

    // mixed3: grid reduction
    {
        const int b3 = b.conv_bn(x, 384, 3, 3, 2, Padding::valid);
        int bd = b.conv_bn(x, 64, 1, 1);
        bd = b.conv_bn(bd, 96, 3, 3);
        bd = b.conv_bn(bd, 96, 3, 3, 2, Padding::valid);
        const int bp = b.max_pool(x, 3, 2, Padding::valid, pool_name("max_pooling2d"));
        x = b.concat({b3, bd, bp}, "mixed3");
    }

    // mixed4..7: factorised 7x7
    const std::size_t mid[4] = {128, 160, 160, 192};
    for (int i = 0; i < 4; ++i) {
        const std::size_t c = mid[i];
        const int b1 = b.conv_bn(x, 192, 1, 1);
        int b7 = b.conv_bn(x, c, 1, 1);
        b7 = b.conv_bn(b7, c, 1, 7);
        b7 = b.conv_bn(b7, 192, 7, 1);
        int bd = b.conv_bn(x, c, 1, 1);
        bd = b.conv_bn(bd, c, 7, 1);
        bd = b.conv_bn(bd, c, 1, 7);
        bd = b.conv_bn(bd, c, 7, 1);
        bd = b.conv_bn(bd, 192, 1, 7);
        int bp = b.avg_pool(x, 3, 1, Padding::same, pool_name("average_pooling2d"));
        bp = b.conv_bn(bp, 192, 1, 1);
        x = b.concat({b1, b7, bd, bp}, "mixed" + std::to_string(4 + i));
    }

    // mixed8: grid reduction
    {
        int b3 = b.conv_bn(x, 192, 1, 1);
        b3 = b.conv_bn(b3, 320, 3, 3, 2, Padding::valid);
        int b7 = b.conv_bn(x, 192, 1, 1);
        b7 = b.conv_bn(b7, 192, 1, 7);
        b7 = b.conv_bn(b7, 192, 7, 1);
        b7 = b.conv_bn(b7, 192, 3, 3, 2, Padding::valid);
        const int bp = b.max_pool(x, 3, 2, Padding::valid, pool_name("max_pooling2d"));
        x = b.concat({b3, b7, bp}, "mixed8");
    }

    // mixed9..10: expanded filter banks
    for (int i = 0; i < 2; ++i) {
        const int b1 = b.conv_bn(x, 320, 1, 1);
        const int b3 = b.conv_bn(x, 384, 1, 1);
        const int b3a = b.conv_bn(b3, 384, 1, 3);
        const int b3b = b.conv_bn(b3, 384, 3, 1);
        const int b3c = b.concat({b3a, b3b}, "mixed9_" + std::to_string(i));
        int bd = b.conv_bn(x, 448, 1, 1);
        bd = b.conv_bn(bd, 384, 3, 3);
        const int bda = b.conv_bn(bd, 384, 1, 3);
        const int bdb = b.conv_bn(bd, 384, 3, 1);
        const int bdc = b.concat({bda, bdb}, "concatenate" + (i == 0 ? std::string() : "_" + std::to_string(i)));
        int bp = b.avg_pool(x, 3, 1, Padding::same, pool_name("average_pooling2d"));
        bp = b.conv_bn(bp, 192, 1, 1);
        x = b.concat({b1, b3c, bdc, bp}, "mixed" + std::to_string(9 + i));
    }
    return x;
}

// Three conv blocks: strided 3x3 conv + relu + 2x2 max pool, then two more
// (3x3 conv + relu + 2x2 max pool).
int tiny_features(Network& net, const std::vector<std::size_t>& widths) {
    NetBuilder b(net);
    int x = Network::kInput;
    for (std::size_t i = 0; i < 3; ++i) {
        const std::string prefix = "block" + std::to_string(i + 1);
        x = b.conv(x, widths[i], 3, 3, i == 0 ? 2 : 1, Padding::same, false, prefix + "_conv");
        x = net.add(prefix + "_bn", std::make_unique<nn::BatchNorm>(widths[i], 1e-3, 0.9), x);
        x = b.relu(x, prefix + "_relu");
        x = b.max_pool(x, 2, 2, Padding::valid, prefix + "_pool");
    }
    return x;
}

}  // namespace

std::string to_string(Backbone b) {
    switch (b) {
        case Backbone::vgg16:
            return "vgg16";
        case Backbone::inceptionv3:
            return "inceptionv3";
        case Backbone::tiny:
            return "tiny";
    }
    return "unknown";
}

Backbone parse_backbone(const std::string& name) {
    if (name == "vgg16") return Backbone::vgg16;
    if (name == "inceptionv3") return Backbone::inceptionv3;
    if (name == "tiny") return Backbone::tiny;
    throw PreconditionError("unknown backbone '" + name + "' (expected vgg16, inceptionv3 or tiny)");
}

void ArchitectureSpec::validate() const {
    if (head_widths.empty()) throw PreconditionError("head_widths must not be empty");
    for (auto w : head_widths) {
        if (w == 0) throw PreconditionError("head widths must be positive");
    }
    if (n_classes < 2) throw PreconditionError("n_classes must be at least 2");
    if (input_shape.size() != 3 || input_shape[2] != 3) {
        throw PreconditionError("input_shape must be (height, width, 3)");
    }
    if (backbone != Backbone::tiny && (input_shape[0] != 224 || input_shape[1] != 224)) {
        throw PreconditionError(to_string(backbone) + " input_shape is fixed at (224, 224, 3)");
    }
    if (backbone == Backbone::tiny) {
        if (tiny_widths.size() != 3) throw PreconditionError("tiny backbone needs exactly three block widths");
        for (auto w : tiny_widths) {
            if (w == 0) throw PreconditionError("tiny block widths must be positive");
        }
        if (input_shape[0] < 16 || input_shape[1] < 16) throw PreconditionError("tiny input must be at least 16x16");
    }
    if (pretrained_backbone && backbone_weights.empty()) {
        throw PreconditionError("pretrained_backbone requires backbone_weights (a bundle with the same backbone)");
    }
}

void to_json(nlohmann::json& j, const ArchitectureSpec& s) {
    j = nlohmann::json{{"backbone", to_string(s.backbone)},
                       {"head_widths", s.head_widths},
                       {"n_classes", s.n_classes},
                       {"input_shape", s.input_shape},
                       {"pretrained_backbone", s.pretrained_backbone},
                       {"backbone_weights", s.backbone_weights},
                       {"tiny_widths", s.tiny_widths}};
}

void from_json(const nlohmann::json& j, ArchitectureSpec& s) {
    s.backbone = parse_backbone(j.at("backbone").get<std::string>());
    s.head_widths = j.at("head_widths").get<std::vector<std::size_t>>();
    s.n_classes = j.at("n_classes").get<std::size_t>();
    s.input_shape = j.at("input_shape").get<std::vector<std::size_t>>();
    s.pretrained_backbone = j.value("pretrained_backbone", false);
    s.backbone_weights = j.value("backbone_weights", std::string());
    s.tiny_widths = j.value("tiny_widths", std::vector<std::size_t>{8, 16, 28});
}

nn::Network build_network(const ArchitectureSpec& spec, Top top) {
    spec.validate();
    nn::Shape input = spec.input_shape;
    if (top == Top::stock && spec.backbone == Backbone::inceptionv3) input = {299, 299, 3};
    Network net(input);

    int x = 0;
    switch (spec.backbone) {
        case Backbone::vgg16:
            x = vgg16_features(net);
            break;
        case Backbone::inceptionv3:
            x = inceptionv3_features(net);
            break;
        case Backbone::tiny:
            x = tiny_features(net, spec.tiny_widths);
            break;
    }

    NetBuilder b(net);
    if (spec.backbone == Backbone::vgg16) {
        x = net.add("features", std::make_unique<nn::Flatten>(), x);
    } else if (spec.backbone == Backbone::tiny) {
        // A hypha fills a few percent of a patch; max pooling keeps that local evidence.
        x = net.add("features", std::make_unique<nn::GlobalMaxPool>(), x);
    } else {
        x = net.add("features", std::make_unique<nn::GlobalAvgPool>(), x);
    }

    if (top == Top::stock) {
        if (spec.backbone == Backbone::vgg16) {
            x = b.relu(b.dense(x, 4096, "fc1"), "fc1_relu");
            x = b.relu(b.dense(x, 4096, "fc2"), "fc2_relu");
        }
        if (spec.backbone == Backbone::tiny) throw PreconditionError("the tiny backbone has no stock classifier");
        x = b.dense(x, 1000, "predictions");
    } else {
        for (std::size_t i = 0; i < spec.head_widths.size(); ++i) {
            const std::string name = "head_dense" + std::to_string(i + 1);
            x = b.relu(b.dense(x, spec.head_widths[i], name), name + "_relu");
        }
        x = b.dense(x, spec.n_classes, "logits");
    }
    net.add("softmax", std::make_unique<nn::Softmax>(), x);
    return net;
}

std::size_t stock_parameter_count(Backbone backbone) {
    ArchitectureSpec spec;
    spec.backbone = backbone;
    return build_network(spec, Top::stock).parameter_count();
}

int head_start(const nn::Network& net) {
    const auto info = net.summary();
    for (std::size_t i = 0; i < info.size(); ++i) {
        if (info[i].name == "features") return static_cast<int>(i) + 1;
    }
    throw PreconditionError("network has no feature node");
}

}  // namespace kohscan::model
