#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kohscan/nn/network.hpp"

namespace kohscan::model {

enum class Backbone { vgg16, inceptionv3, tiny };

std::string to_string(Backbone b);
Backbone parse_backbone(const std::string& name);

/// Classifier top attached to a backbone.
enum class Top {
    /// dense-64 -> dense-32 -> n_classes softmax (widths from head_widths).
    custom_head,
    /// The backbone's original ImageNet classifier (parameter-count comparison only).
    stock,
};

struct ArchitectureSpec {
    Backbone backbone = Backbone::tiny;
    std::vector<std::size_t> head_widths{64, 32};
    std::size_t n_classes = 2;
    /// (height, width, channels)
    std::vector<std::size_t> input_shape{224, 224, 3};
    bool pretrained_backbone = false;
    /// Bundle whose backbone weights seed this model when pretrained_backbone is set.
    std::string backbone_weights;
    /// Convolution widths of the tiny backbone's three blocks (ignored for the others).
    std::vector<std::size_t> tiny_widths{8, 16, 28};

    /// Throws PreconditionError when an invariant does not hold.
    void validate() const;

    bool operator==(const ArchitectureSpec&) const = default;
};

void to_json(nlohmann::json& j, const ArchitectureSpec& spec);
void from_json(const nlohmann::json& j, ArchitectureSpec& spec);

/// Builds the layer graph. Parameters are left unallocated; call
/// Network::initialize to draw weights.
nn::Network build_network(const ArchitectureSpec& spec, Top top = Top::custom_head);

/// Total scalar count (trainable plus normalisation running statistics) of the
/// stock ImageNet configuration of a backbone, computed without allocating.
std::size_t stock_parameter_count(Backbone backbone);

/// Node id where the classifier head begins (first node after the backbone
/// feature map is flattened or pooled).
int head_start(const nn::Network& net);

}  // namespace kohscan::model
