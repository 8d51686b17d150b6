#include "kohscan/model/model.hpp"

#include <map>

#include "kohscan/model/bundle.hpp"
#include "kohscan/util/error.hpp"
#include "kohscan/util/log.hpp"

namespace kohscan::model {

Model::Model(ArchitectureSpec spec, nn::Network network) : spec_(std::move(spec)), network_(std::move(network)) {}

namespace {

void copy_backbone(Model& target, const Model& source) {
    if (source.spec().backbone != target.spec().backbone) {
        throw PreconditionError("backbone weights come from a " + to_string(source.spec().backbone) +
                                " bundle, expected " + to_string(target.spec().backbone));
    }
    const auto cut = static_cast<std::size_t>(head_start(target.network()));
    const auto names = source.network().param_names();
    const auto params = source.network().all_params();
    std::map<std::string, const nn::Param*> by_name;
    for (std::size_t i = 0; i < names.size(); ++i) by_name[names[i]] = params[i];

    const auto info = target.network().summary();
    std::size_t copied = 0;
    for (std::size_t node = 1; node < cut; ++node) {
        auto* layer = const_cast<nn::Layer*>(target.network().layer(static_cast<int>(node)));
        for (auto& p : layer->params()) {
            auto it = by_name.find(info[node].name + "/" + p.name);
            if (it == by_name.end() || it->second->shape != p.shape) {
                throw PreconditionError("backbone weights missing or mismatched for " + info[node].name + "/" + p.name);
            }
            p.value = it->second->value;
            ++copied;
        }
    }
    log::info("initialised " + std::to_string(copied) + " backbone tensors from pretrained weights");
}

}  // namespace

Model build(const ArchitectureSpec& spec, std::uint64_t seed) {
    nn::Network net = build_network(spec);
    Rng rng(seed);
    net.initialize(rng);
    Model m(spec, std::move(net));
    if (spec.pretrained_backbone) {
        const ModelBundle source = load(spec.backbone_weights);
        copy_backbone(m, source.model);
    }
    return m;
}

std::size_t parameter_count(const Model& model) { return model.network().parameter_count(); }

std::size_t trainable_parameter_count(const Model& model) { return model.network().trainable_parameter_count(); }

nn::Tensor predict_batch(const Model& model, const nn::Tensor& batch) { return model.network().predict(batch); }

std::vector<double> fungus_scores(const Model& model, const nn::Tensor& batch) {
    const nn::Tensor probs = predict_batch(model, batch);
    const std::size_t n = probs.dim(0), k = probs.dim(1);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = probs[i * k + kFungusClass];
    return out;
}

}  // namespace kohscan::model
