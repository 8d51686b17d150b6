#include "kohscan/nn/network.hpp"

#include "kohscan/simd/kernels.hpp"
#include "kohscan/util/error.hpp"

namespace kohscan::nn {

Network::Network(Shape input_sample_shape) {
    nodes_.push_back(Node{"input", nullptr, {}, std::move(input_sample_shape)});
}

int Network::add(std::string name, std::unique_ptr<Layer> layer, std::vector<int> inputs) {
    if (!layer) throw PreconditionError("null layer");
    if (inputs.empty()) throw PreconditionError("layer " + name + " has no inputs");
    std::vector<Shape> in_shapes;
    for (int i : inputs) {
        if (i < 0 || i >= static_cast<int>(nodes_.size())) {
            throw PreconditionError("layer " + name + " references unknown node " + std::to_string(i));
        }
        in_shapes.push_back(nodes_[static_cast<std::size_t>(i)].sample_shape);
    }
    Shape out = layer->output_shape(in_shapes);
    nodes_.push_back(Node{std::move(name), std::move(layer), std::move(inputs), std::move(out)});
    initialized_ = false;
    return output();
}

void Network::initialize(Rng& rng) {
    for (auto& node : nodes_) {
        if (node.layer) node.layer->initialize(rng);
    }
    initialized_ = true;
}

void Network::check_batch(const Tensor& batch) const {
    const Shape& expected = input_shape();
    bool ok = batch.rank() == expected.size() + 1;
    for (std::size_t i = 0; ok && i < expected.size(); ++i) ok = batch.dim(i + 1) == expected[i];
    if (!ok) {
        Shape want{0};
        want.insert(want.end(), expected.begin(), expected.end());
        std::string w = to_string(want);
        w.replace(1, 1, "N");
        throw PreconditionError("batch shape " + to_string(batch.shape()) + " does not match expected " + w);
    }
    if (!initialized_) throw PreconditionError("network parameters not initialised");
}

Tensor Network::predict(const Tensor& batch) const {
    check_batch(batch);
    const std::size_t n = nodes_.size();
    std::vector<int> remaining(n, 0);
    for (const auto& node : nodes_) {
        for (int i : node.inputs) ++remaining[static_cast<std::size_t>(i)];
    }
    std::vector<Tensor> outputs(n);
    std::vector<const Tensor*> in;
    for (std::size_t id = 1; id < n; ++id) {
        const Node& node = nodes_[id];
        in.clear();
        for (int i : node.inputs) in.push_back(i == kInput ? &batch : &outputs[static_cast<std::size_t>(i)]);
        node.layer->forward(in, outputs[id], Mode::inference, nullptr);
        for (int i : node.inputs) {
            if (--remaining[static_cast<std::size_t>(i)] == 0 && i != kInput) outputs[static_cast<std::size_t>(i)] = Tensor();
        }
    }
    return std::move(outputs.back());
}

const Tensor& Network::forward(const Tensor& batch, Tape& tape, Mode mode) const {
    check_batch(batch);
    const std::size_t n = nodes_.size();
    tape.outputs.assign(n, Tensor());
    tape.layers.assign(n, LayerTape());
    tape.outputs[0] = batch;
    std::vector<const Tensor*> in;
    for (std::size_t id = 1; id < n; ++id) {
        const Node& node = nodes_[id];
        in.clear();
        for (int i : node.inputs) in.push_back(&tape.outputs[static_cast<std::size_t>(i)]);
        node.layer->forward(in, tape.outputs[id], mode, &tape.layers[id]);
    }
    return tape.outputs.back();
}

int Network::logits_node() const {
    const Node& last = nodes_.back();
    if (!last.layer || last.layer->kind() != "softmax") {
        throw PreconditionError("network output is not a softmax layer");
    }
    return last.inputs.front();
}

void Network::backward(const Tape& tape, const Tensor& dlogits) {
    const int start = logits_node();
    if (tape.outputs.size() != nodes_.size()) throw PreconditionError("tape does not belong to this network");
    if (dlogits.shape() != tape.outputs[static_cast<std::size_t>(start)].shape()) {
        throw PreconditionError("logit gradient shape mismatch");
    }
    std::vector<Tensor> grads(nodes_.size());
    grads[static_cast<std::size_t>(start)] = dlogits;
    const auto& kt = simd::kernels();

    std::vector<const Tensor*> in;
    std::vector<Tensor> din_store;
    std::vector<Tensor*> din;
    for (int id = start; id >= 1; --id) {
        const auto uid = static_cast<std::size_t>(id);
        if (grads[uid].empty()) continue;
        Node& node = nodes_[uid];
        in.clear();
        din_store.clear();
        din.clear();
        for (int i : node.inputs) {
            in.push_back(&tape.outputs[static_cast<std::size_t>(i)]);
            din_store.emplace_back(i == kInput ? Shape{} : tape.outputs[static_cast<std::size_t>(i)].shape());
        }
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
            din.push_back(node.inputs[k] == kInput ? nullptr : &din_store[k]);
        }
        node.layer->backward(in, tape.outputs[uid], grads[uid], din, tape.layers[uid]);
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
            const auto src = static_cast<std::size_t>(node.inputs[k]);
            if (node.inputs[k] == kInput) continue;
            if (grads[src].empty()) {
                grads[src] = std::move(din_store[k]);
            } else {
                kt.axpy(grads[src].size(), 1.0, din_store[k].data(), grads[src].data());
            }
        }
        grads[uid] = Tensor();
    }
}

void Network::commit_state(const Tape& tape) {
    for (std::size_t id = 1; id < nodes_.size(); ++id) nodes_[id].layer->update_state(tape.layers[id]);
}

void Network::average_state(const Tape& tape, std::size_t seen) {
    for (std::size_t id = 1; id < nodes_.size(); ++id) nodes_[id].layer->average_state(tape.layers[id], seen);
}

void Network::zero_grad() {
    for (auto* p : trainable_params()) p->grad.fill(0.0);
}

std::vector<Param*> Network::trainable_params() {
    std::vector<Param*> out;
    for (auto& node : nodes_) {
        if (!node.layer) continue;
        for (auto& p : node.layer->params()) {
            if (p.trainable) out.push_back(&p);
        }
    }
    return out;
}

std::vector<Param*> Network::all_params() {
    std::vector<Param*> out;
    for (auto& node : nodes_) {
        if (!node.layer) continue;
        for (auto& p : node.layer->params()) out.push_back(&p);
    }
    return out;
}

std::vector<const Param*> Network::all_params() const {
    std::vector<const Param*> out;
    for (const auto& node : nodes_) {
        if (!node.layer) continue;
        for (const auto& p : node.layer->params()) out.push_back(&p);
    }
    return out;
}

std::vector<std::string> Network::param_names() const {
    std::vector<std::string> out;
    for (const auto& node : nodes_) {
        if (!node.layer) continue;
        for (const auto& p : node.layer->params()) out.push_back(node.name + "/" + p.name);
    }
    return out;
}

std::size_t Network::parameter_count() const {
    std::size_t n = 0;
    for (const auto& node : nodes_) {
        if (node.layer) n += node.layer->parameter_count();
    }
    return n;
}

std::size_t Network::trainable_parameter_count() const {
    std::size_t n = 0;
    for (const auto& node : nodes_) {
        if (node.layer) n += node.layer->trainable_parameter_count();
    }
    return n;
}

std::vector<Network::NodeInfo> Network::summary() const {
    std::vector<NodeInfo> out;
    for (const auto& node : nodes_) {
        out.push_back(NodeInfo{node.name, node.layer ? std::string(node.layer->kind()) : "input", node.inputs,
                               node.sample_shape, node.layer ? node.layer->parameter_count() : 0});
    }
    return out;
}

}  // namespace kohscan::nn
