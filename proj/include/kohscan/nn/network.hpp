#pragma once

#include <memory>
#include <string>
#include <vector>

#include "kohscan/nn/layers.hpp"

namespace kohscan::nn {

/// Directed acyclic graph of layers, appended in topological order.
/// Node 0 is the input; the last node is the output.
///
/// Inference (`predict`) is const and keeps no state in the network, so one
/// instance can serve concurrent callers. Training passes record activations
/// in a caller-owned Tape.
class Network {
public:
    explicit Network(Shape input_sample_shape);

    Network(Network&&) noexcept = default;
    Network& operator=(Network&&) noexcept = default;

    static constexpr int kInput = 0;

    /// Appends a node and returns its id; validates shapes immediately.
    int add(std::string name, std::unique_ptr<Layer> layer, std::vector<int> inputs);
    int add(std::string name, std::unique_ptr<Layer> layer, int input) {
        return add(std::move(name), std::move(layer), std::vector<int>{input});
    }

    int output() const { return static_cast<int>(nodes_.size()) - 1; }
    std::size_t node_count() const { return nodes_.size(); }

    const Shape& input_shape() const { return nodes_.front().sample_shape; }
    const Shape& output_shape() const { return nodes_.back().sample_shape; }
    const Shape& node_shape(int node) const { return nodes_.at(static_cast<std::size_t>(node)).sample_shape; }

    /// Allocates parameters and draws initial values in node order.
    void initialize(Rng& rng);
    bool initialized() const { return initialized_; }

    /// Inference forward pass over a batch (N, input_shape...).
    Tensor predict(const Tensor& batch) const;

    struct Tape {
        std::vector<Tensor> outputs;
        std::vector<LayerTape> layers;
    };

    /// Forward pass that records every activation. Mode::training uses batch
    /// statistics in normalisation layers; Mode::inference uses running ones.
    const Tensor& forward(const Tensor& batch, Tape& tape, Mode mode) const;

    /// Id of the node feeding the final softmax (the logits).
    int logits_node() const;

    /// Back-propagates d(loss)/d(logits) through every node below the final
    /// softmax, accumulating into parameter gradients.
    void backward(const Tape& tape, const Tensor& dlogits);

    /// Commits running-statistic updates recorded by a training forward pass.
    void commit_state(const Tape& tape);
    /// Running statistics become the mean over training-mode passes; call with
    /// seen = 0, 1, 2, ... for consecutive batches.
    void average_state(const Tape& tape, std::size_t seen);

    void zero_grad();

    std::vector<Param*> trainable_params();
    std::vector<Param*> all_params();
    std::vector<const Param*> all_params() const;

    /// Qualified parameter names ("node/param"), matching all_params() order.
    std::vector<std::string> param_names() const;

    std::size_t parameter_count() const;
    std::size_t trainable_parameter_count() const;

    struct NodeInfo {
        std::string name;
        std::string kind;
        std::vector<int> inputs;
        Shape output_shape;
        std::size_t parameters;
    };
    std::vector<NodeInfo> summary() const;

    const Layer* layer(int node) const { return nodes_.at(static_cast<std::size_t>(node)).layer.get(); }

private:
    struct Node {
        std::string name;
        std::unique_ptr<Layer> layer;
        std::vector<int> inputs;
        Shape sample_shape;
    };

    void check_batch(const Tensor& batch) const;

    std::vector<Node> nodes_;
    bool initialized_ = false;
};

}  // namespace kohscan::nn
