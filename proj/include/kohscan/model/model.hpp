#pragma once

#include <cstdint>
#include <vector>

#include "kohscan/model/architecture.hpp"

namespace kohscan::model {

/// Class index of the positive (fungus) output; index 0 is keratin.
inline constexpr std::size_t kFungusClass = 1;

/// A built, initialised network together with the spec it was built from.
/// Inference is const and safe to call concurrently.
class Model {
public:
    Model(ArchitectureSpec spec, nn::Network network);

    const ArchitectureSpec& spec() const { return spec_; }
    nn::Network& network() { return network_; }
    const nn::Network& network() const { return network_; }

private:
    ArchitectureSpec spec_;
    nn::Network network_;
};

/// Builds and initialises a model. Weights are drawn from `seed`; with
/// pretrained_backbone the backbone layers are then copied from the bundle
/// named in spec.backbone_weights.
Model build(const ArchitectureSpec& spec, std::uint64_t seed = 0);

std::size_t parameter_count(const Model& model);
std::size_t trainable_parameter_count(const Model& model);

/// (N, H, W, 3) preprocessed batch -> (N, n_classes) probabilities.
nn::Tensor predict_batch(const Model& model, const nn::Tensor& batch);

/// Fungus-class probability per sample.
std::vector<double> fungus_scores(const Model& model, const nn::Tensor& batch);

}  // namespace kohscan::model
