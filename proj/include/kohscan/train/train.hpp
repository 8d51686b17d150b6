#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "kohscan/corpus/dataset.hpp"
#include "kohscan/corpus/manifest.hpp"
#include "kohscan/model/bundle.hpp"

namespace kohscan::train {

enum class Optimizer { adaptive_moment, plain_sgd };
std::string to_string(Optimizer o);
Optimizer parse_optimizer(const std::string& s);

/// Which weights the returned bundle carries.
enum class Selection { final_epoch, best_val_accuracy };
std::string to_string(Selection s);
Selection parse_selection(const std::string& s);

struct TrainConfig {
    int epochs = 200;
    int batch_size = 32;
    double learning_rate = 1e-4;
    Optimizer optimizer = Optimizer::adaptive_moment;
    std::uint64_t seed = 0;
    /// Write a resumable checkpoint every k epochs (0 = never). Needs checkpoint_dir.
    int checkpoint_every = 0;
    std::filesystem::path checkpoint_dir;
    std::optional<int> early_stop_patience;
    /// Random horizontal/vertical flips of training samples.
    bool flips = false;
    Selection selection = Selection::final_epoch;
    /// After each epoch, normalisation running statistics are recomputed as the
    /// mean over this many training batches (0 keeps the moving averages).
    int bn_recalibration_batches = 0;
    /// Threads for patch decoding and preprocessing. The optimisation itself is
    /// always single-threaded, so results do not depend on this value.
    int workers = 1;
    /// Continue from a checkpoint written by an earlier run with the same config.
    std::filesystem::path resume_from;

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);

/// Hash of everything that determines the training trajectory (excludes
/// epochs, workers, checkpointing and resume settings).
std::string config_hash(const TrainConfig& c, const model::ArchitectureSpec& spec, const corpus::Manifest& manifest);

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;

    bool operator==(const EpochStats&) const = default;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    double wall_seconds = 0.0;
    /// 1-based epoch with the highest val accuracy (earliest on ties).
    int best_epoch = 0;
    Selection selection = Selection::final_epoch;
    bool early_stopped = false;
    /// Last checkpoint written, or the output bundle when set by the caller.
    std::string checkpoint;
    std::size_t n_train = 0;
    std::size_t n_val = 0;
    std::string config_hash;
};

nlohmann::json to_json(const TrainReport& r);
TrainReport report_from_json(const nlohmann::json& j);

struct TrainResult {
    model::ModelBundle bundle;
    TrainReport report;
};

/// Trains a freshly built model (or resumes one) on the manifest's train
/// split, validating on its val split after every epoch.
TrainResult train(const model::ArchitectureSpec& spec, const corpus::Manifest& manifest, const TrainConfig& config);

/// Same, with patches already loaded (planes sized to spec.input_shape).
TrainResult train(const model::ArchitectureSpec& spec, const corpus::PatchSet& train_set,
                  const corpus::PatchSet& val_set, const TrainConfig& config, const std::string& hash);

/// Mean categorical cross-entropy of softmax(logits) against integer labels.
double cross_entropy(const nn::Tensor& logits, std::span<const int> labels);

/// Loss and d(loss)/d(logits) from one training-mode forward pass; also
/// accumulates parameter gradients (after zeroing them).
double loss_and_gradients(model::Model& model, const nn::Tensor& batch, std::span<const int> labels);

/// One plain gradient-descent step w -= lr * grad on every trainable parameter.
void sgd_step(model::Model& model, double learning_rate);

inline constexpr std::size_t kGradientCheckMaxParams = 10'000;

struct GradientCheck {
    double max_relative_error = 0.0;
    std::string worst_parameter;
    std::size_t checked = 0;
    /// Parameters whose every probe crossed a ReLU or pooling switch point.
    std::size_t skipped_kinks = 0;
};

/// Central finite differences of the inference-mode loss against the analytic
/// gradient, parameter by parameter. A probe that changes any ReLU sign or
/// pooling choice is retried with a step 10x smaller (down to epsilon/1000).
/// Refuses models with more than 10k trainable parameters and epsilon outside
/// [1e-6, 1e-3].
GradientCheck gradient_check(model::Model& model, const nn::Tensor& batch, std::span<const int> labels,
                             double epsilon = 1e-4);

}  // namespace kohscan::train
