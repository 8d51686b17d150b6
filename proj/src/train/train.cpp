#include "kohscan/train/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "kohscan/simd/kernels.hpp"
#include "kohscan/util/error.hpp"
#include "kohscan/util/log.hpp"

namespace kohscan::train {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-7;
constexpr std::size_t kEvalBatch = 64;

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

json epoch_json(const EpochStats& e) {
    return json{{"epoch", e.epoch},
                {"train_loss", e.train_loss},
                {"train_accuracy", e.train_accuracy},
                {"val_loss", e.val_loss},
                {"val_accuracy", e.val_accuracy}};
}

EpochStats epoch_from(const json& j) {
    return EpochStats{j.at("epoch").get<int>(), j.at("train_loss").get<double>(), j.at("train_accuracy").get<double>(),
                      j.at("val_loss").get<double>(), j.at("val_accuracy").get<double>()};
}

// Binary rule matches the metrics threshold of 0.5 (ties go to fungus).
std::size_t predicted_class(const double* probs, std::size_t k) {
    if (k == 2) return probs[model::kFungusClass] >= 0.5 ? model::kFungusClass : 1 - model::kFungusClass;
    return static_cast<std::size_t>(std::max_element(probs, probs + k) - probs);
}

struct Pass {
    double loss = 0.0;
    std::size_t correct = 0;
};

// Forward, loss and (optionally) backward for one batch. Gradients are zeroed first.
Pass run_batch(model::Model& m, const nn::Tensor& batch, std::span<const int> labels, nn::Mode mode, bool backward) {
    nn::Network& net = m.network();
    const std::size_t n = batch.dim(0);
    if (labels.size() != n) throw PreconditionError("label count does not match the batch");
    nn::Network::Tape tape;
    const nn::Tensor& probs = net.forward(batch, tape, mode);
    const nn::Tensor& logits = tape.outputs[static_cast<std::size_t>(net.logits_node())];
    const std::size_t k = probs.dim(1);
    Pass out;
    out.loss = cross_entropy(logits, labels);
    for (std::size_t i = 0; i < n; ++i) {
        if (predicted_class(probs.data() + i * k, k) == static_cast<std::size_t>(labels[i])) ++out.correct;
    }
    if (backward) {
        nn::Tensor d(logits.shape());
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < k; ++c) {
                d[i * k + c] = (probs[i * k + c] - (static_cast<std::size_t>(labels[i]) == c ? 1.0 : 0.0)) /
                               static_cast<double>(n);
            }
        }
        net.zero_grad();
        net.backward(tape, d);
        if (mode == nn::Mode::training) net.commit_state(tape);
    }
    return out;
}

void check_labels(const corpus::PatchSet& set, const char* split) {
    for (std::size_t i = 0; i < set.size(); ++i) {
        if (set.labels[i] != 0 && set.labels[i] != 1) {
            throw PreconditionError(std::string(split) + " patch " + set.patch_ids[i] + " is not labeled");
        }
    }
}

Pass evaluate_set(const model::Model& m, const corpus::PatchSet& set, std::size_t channels) {
    Pass total;
    std::vector<std::size_t> idx;
    for (std::size_t b = 0; b < set.size(); b += kEvalBatch) {
        const std::size_t e = std::min(set.size(), b + kEvalBatch);
        idx.resize(e - b);
        std::iota(idx.begin(), idx.end(), b);
        const nn::Tensor batch = corpus::make_batch(set, idx, channels);
        nn::Network::Tape tape;
        const nn::Tensor& probs = m.network().forward(batch, tape, nn::Mode::inference);
        const nn::Tensor& logits = tape.outputs[static_cast<std::size_t>(m.network().logits_node())];
        const std::span<const int> labels(set.labels.data() + b, e - b);
        total.loss += cross_entropy(logits, labels) * static_cast<double>(e - b);
        const std::size_t k = probs.dim(1);
        for (std::size_t i = 0; i < e - b; ++i) {
            if (predicted_class(probs.data() + i * k, k) == static_cast<std::size_t>(labels[i])) ++total.correct;
        }
    }
    return total;
}

std::vector<nn::Tensor> snapshot(const model::Model& m) {
    std::vector<nn::Tensor> out;
    for (const auto* p : m.network().all_params()) out.push_back(p->value);
    return out;
}

void restore(model::Model& m, const std::vector<nn::Tensor>& values) {
    auto params = m.network().all_params();
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

struct OptimizerState {
    std::vector<nn::Tensor> m;
    std::vector<nn::Tensor> v;
    std::uint64_t step = 0;
};

void optimizer_step(model::Model& model, const TrainConfig& c, OptimizerState& s) {
    auto params = model.network().trainable_params();
    const auto& k = simd::kernels();
    ++s.step;
    if (c.optimizer == Optimizer::plain_sgd) {
        for (auto* p : params) k.axpy(p->value.size(), -c.learning_rate, p->grad.data(), p->value.data());
        return;
    }
    if (s.m.empty()) {
        for (auto* p : params) {
            s.m.emplace_back(p->shape);
            s.v.emplace_back(p->shape);
        }
    }
    const double t = static_cast<double>(s.step);
    const double step_size = c.learning_rate * std::sqrt(1.0 - std::pow(kBeta2, t)) / (1.0 - std::pow(kBeta1, t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        k.adam(params[i]->value.size(), params[i]->value.data(), params[i]->grad.data(), s.m[i].data(), s.v[i].data(),
               step_size, kBeta1, kBeta2, kAdamEps);
    }
}

void check_finite_weights(const model::Model& m, int epoch) {
    for (const auto* p : m.network().all_params()) {
        for (double v : p->value.values()) {
            if (!std::isfinite(v)) {
                throw NumericError("non-finite weight in " + p->name + " after epoch " + std::to_string(epoch));
            }
        }
    }
}

json history_json(const std::vector<EpochStats>& h) {
    json a = json::array();
    for (const auto& e : h) a.push_back(epoch_json(e));
    return a;
}

}  // namespace

std::string to_string(Optimizer o) { return o == Optimizer::adaptive_moment ? "adaptive_moment" : "plain_sgd"; }

Optimizer parse_optimizer(const std::string& s) {
    if (s == "adaptive_moment" || s == "adam") return Optimizer::adaptive_moment;
    if (s == "plain_sgd" || s == "sgd") return Optimizer::plain_sgd;
    throw PreconditionError("unknown optimizer '" + s + "' (expected adaptive_moment or plain_sgd)");
}

std::string to_string(Selection s) { return s == Selection::final_epoch ? "final_epoch" : "best_val_accuracy"; }

Selection parse_selection(const std::string& s) {
    if (s == "final_epoch" || s == "final") return Selection::final_epoch;
    if (s == "best_val_accuracy" || s == "best") return Selection::best_val_accuracy;
    throw PreconditionError("unknown selection '" + s + "' (expected final_epoch or best_val_accuracy)");
}

void TrainConfig::validate() const {
    if (epochs < 1) throw PreconditionError("epochs must be at least 1 (got " + std::to_string(epochs) + ")");
    if (batch_size < 1) throw PreconditionError("batch_size must be at least 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw PreconditionError("learning_rate must be positive");
    if (checkpoint_every < 0) throw PreconditionError("checkpoint_every must be non-negative");
    if (checkpoint_every > 0 && checkpoint_dir.empty()) throw PreconditionError("checkpoint_every needs a checkpoint directory");
    if (early_stop_patience && *early_stop_patience < 1) throw PreconditionError("early_stop_patience must be at least 1");
    if (workers < 1) throw PreconditionError("workers must be at least 1");
    if (bn_recalibration_batches < 0) throw PreconditionError("bn_recalibration_batches must be non-negative");
}

json to_json(const TrainConfig& c) {
    return json{{"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"learning_rate", c.learning_rate},
                {"optimizer", to_string(c.optimizer)},
                {"loss", "categorical_cross_entropy"},
                {"seed", c.seed},
                {"checkpoint_every", c.checkpoint_every},
                {"early_stop_patience", c.early_stop_patience ? json(*c.early_stop_patience) : json(nullptr)},
                {"flips", c.flips},
                {"selection", to_string(c.selection)},
                {"bn_recalibration_batches", c.bn_recalibration_batches},
                {"workers", c.workers}};
}

std::string config_hash(const TrainConfig& c, const model::ArchitectureSpec& spec, const corpus::Manifest& manifest) {
    json j{{"batch_size", c.batch_size},
           {"learning_rate", c.learning_rate},
           {"optimizer", to_string(c.optimizer)},
           {"seed", c.seed},
           {"flips", c.flips},
           {"early_stop_patience", c.early_stop_patience ? json(*c.early_stop_patience) : json(nullptr)},
           {"selection", to_string(c.selection)},
           {"bn_recalibration_batches", c.bn_recalibration_batches},
           {"spec", spec}};
    std::string text = j.dump();
    std::vector<const corpus::PatchRecord*> sorted;
    for (const auto& p : manifest.patches) sorted.push_back(&p);
    std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->patch_id < b->patch_id; });
    for (const auto* p : sorted) {
        text += '\n' + p->patch_id + ' ' + p->image_id + ' ' + std::to_string(p->x) + ' ' + std::to_string(p->y) + ' ' +
                std::to_string(p->size_px) + ' ' + corpus::to_string(p->label) + ' ' + corpus::to_string(p->split);
    }
    return hex64(fnv1a64(text));
}

json to_json(const TrainReport& r) {
    return json{{"epochs", history_json(r.epochs)},
                {"completed_epochs", r.epochs.size()},
                {"wall_seconds", r.wall_seconds},
                {"best_epoch", r.best_epoch},
                {"selection", to_string(r.selection)},
                {"early_stopped", r.early_stopped},
                {"checkpoint", r.checkpoint},
                {"n_train", r.n_train},
                {"n_val", r.n_val},
                {"config_hash", r.config_hash}};
}

TrainReport report_from_json(const json& j) {
    TrainReport r;
    for (const auto& e : j.at("epochs")) r.epochs.push_back(epoch_from(e));
    r.wall_seconds = j.at("wall_seconds").get<double>();
    r.best_epoch = j.at("best_epoch").get<int>();
    r.selection = parse_selection(j.at("selection").get<std::string>());
    r.early_stopped = j.at("early_stopped").get<bool>();
    r.checkpoint = j.at("checkpoint").get<std::string>();
    r.n_train = j.at("n_train").get<std::size_t>();
    r.n_val = j.at("n_val").get<std::size_t>();
    r.config_hash = j.at("config_hash").get<std::string>();
    return r;
}

double cross_entropy(const nn::Tensor& logits, std::span<const int> labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size() || labels.empty()) {
        throw PreconditionError("cross_entropy needs (N, K) logits and N labels");
    }
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* z = logits.data() + i * k;
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) throw PreconditionError("label out of range");
        const double zmax = *std::max_element(z, z + k);
        double s = 0.0;
        for (std::size_t c = 0; c < k; ++c) s += std::exp(z[c] - zmax);
        total += zmax + std::log(s) - z[labels[i]];
    }
    return total / static_cast<double>(n);
}

double loss_and_gradients(model::Model& model, const nn::Tensor& batch, std::span<const int> labels) {
    return run_batch(model, batch, labels, nn::Mode::training, true).loss;
}

void sgd_step(model::Model& model, double learning_rate) {
    const auto& k = simd::kernels();
    for (auto* p : model.network().trainable_params()) k.axpy(p->value.size(), -learning_rate, p->grad.data(), p->value.data());
}

TrainResult train(const model::ArchitectureSpec& spec, const corpus::Manifest& manifest, const TrainConfig& config) {
    config.validate();
    spec.validate();
    const auto train_records = manifest.patches_in(corpus::Split::train);
    const auto val_records = manifest.patches_in(corpus::Split::val);
    if (train_records.empty()) throw PreconditionError("train split is empty");
    if (val_records.empty()) throw PreconditionError("val split is empty");
    for (const auto* list : {&train_records, &val_records}) {
        for (const auto* p : *list) {
            if (p->label == corpus::Label::unlabeled) throw PreconditionError("patch " + p->patch_id + " is not labeled");
        }
    }
    const int h = static_cast<int>(spec.input_shape[0]);
    const int w = static_cast<int>(spec.input_shape[1]);
    const corpus::PatchSet train_set = corpus::load_patches(manifest, train_records, h, w, config.workers);
    const corpus::PatchSet val_set = corpus::load_patches(manifest, val_records, h, w, config.workers);
    return train(spec, train_set, val_set, config, config_hash(config, spec, manifest));
}

TrainResult train(const model::ArchitectureSpec& spec, const corpus::PatchSet& train_set,
                  const corpus::PatchSet& val_set, const TrainConfig& config, const std::string& hash) {
    config.validate();
    if (train_set.size() == 0) throw PreconditionError("train split is empty");
    if (val_set.size() == 0) throw PreconditionError("val split is empty");
    check_labels(train_set, "train");
    check_labels(val_set, "val");
    for (const auto* set : {&train_set, &val_set}) {
        if (set->height != static_cast<int>(spec.input_shape[0]) || set->width != static_cast<int>(spec.input_shape[1])) {
            throw PreconditionError("patch planes do not match the model input size");
        }
    }
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t channels = spec.input_shape[2];

    std::optional<model::Model> model_opt;
    OptimizerState opt;
    TrainReport report;
    report.selection = config.selection;
    report.n_train = train_set.size();
    report.n_val = val_set.size();
    report.config_hash = hash;
    int start_epoch = 0;
    double best_acc = -1.0;
    int stale = 0;
    double prior_seconds = 0.0;
    std::vector<nn::Tensor> best_weights;

    if (!config.resume_from.empty()) {
        model::ModelBundle ck = model::load(config.resume_from);
        if (!ck.checkpoint) throw PreconditionError(config.resume_from.string() + " is not a training checkpoint");
        if (!(ck.model.spec() == spec)) throw PreconditionError("checkpoint architecture differs from the requested one");
        const json& meta = ck.checkpoint->meta;
        if (meta.at("config_hash").get<std::string>() != hash) {
            throw PreconditionError("checkpoint was written with a different config or manifest");
        }
        start_epoch = meta.at("epoch").get<int>();
        if (start_epoch >= config.epochs) throw PreconditionError("checkpoint is already at or past the requested epochs");
        opt.step = meta.at("step").get<std::uint64_t>();
        for (const auto& e : meta.at("history")) report.epochs.push_back(epoch_from(e));
        report.best_epoch = meta.at("best_epoch").get<int>();
        best_acc = meta.at("best_val_accuracy").get<double>();
        stale = meta.at("stale_epochs").get<int>();
        prior_seconds = meta.at("wall_seconds").get<double>();
        model_opt.emplace(std::move(ck.model));
        const auto names = model_opt->network().param_names();
        const auto all = model_opt->network().all_params();
        auto find = [&](const std::string& key) -> const nn::Tensor* {
            for (const auto& [n, t] : ck.checkpoint->tensors) {
                if (n == key) return &t;
            }
            return nullptr;
        };
        for (std::size_t i = 0; i < all.size(); ++i) {
            if (all[i]->trainable && config.optimizer == Optimizer::adaptive_moment && opt.step > 0) {
                const nn::Tensor* m = find("adam_m/" + names[i]);
                const nn::Tensor* v = find("adam_v/" + names[i]);
                if (!m || !v) throw FormatError("checkpoint lacks optimizer state for " + names[i]);
                opt.m.push_back(*m);
                opt.v.push_back(*v);
            }
            if (config.selection == Selection::best_val_accuracy) {
                const nn::Tensor* b = find("best/" + names[i]);
                if (!b) throw FormatError("checkpoint lacks best weights for " + names[i]);
                best_weights.push_back(*b);
            }
        }
        log::info("resuming from " + config.resume_from.string() + " at epoch " + std::to_string(start_epoch));
    } else {
        model_opt.emplace(model::build(spec, config.seed));
    }
    model::Model& model = *model_opt;

    auto write_checkpoint = [&](int epoch, double seconds) {
        // Borrow the model for serialisation; it is moved back below.
        model::ModelBundle b(std::move(model));
        b.fingerprint = model::TrainingFingerprint{config.seed, hash, static_cast<std::size_t>(epoch)};
        model::CheckpointState st;
        st.meta = json{{"epoch", epoch},
                       {"step", opt.step},
                       {"config_hash", hash},
                       {"history", history_json(report.epochs)},
                       {"best_epoch", report.best_epoch},
                       {"best_val_accuracy", best_acc},
                       {"stale_epochs", stale},
                       {"wall_seconds", seconds},
                       {"optimizer", to_string(config.optimizer)}};
        const auto names = b.model.network().param_names();
        const auto all = b.model.network().all_params();
        std::size_t ti = 0;
        for (std::size_t i = 0; i < all.size(); ++i) {
            if (all[i]->trainable && !opt.m.empty()) {
                st.tensors.emplace_back("adam_m/" + names[i], opt.m[ti]);
                st.tensors.emplace_back("adam_v/" + names[i], opt.v[ti]);
                ++ti;
            }
            if (config.selection == Selection::best_val_accuracy) st.tensors.emplace_back("best/" + names[i], best_weights[i]);
        }
        b.checkpoint = std::move(st);
        char name[64];
        std::snprintf(name, sizeof name, "checkpoint_epoch_%04d.kohscan", epoch);
        fs::create_directories(config.checkpoint_dir);
        const fs::path path = config.checkpoint_dir / name;
        try {
            model::save(b, path);
        } catch (...) {
            model = std::move(b.model);
            throw;
        }
        model = std::move(b.model);
        report.checkpoint = path.string();
    };

    std::vector<std::size_t> order(train_set.size());
    std::vector<corpus::Flip> flips;
    std::vector<int> labels;
    for (int epoch = start_epoch + 1; epoch <= config.epochs; ++epoch) {
        // Per-epoch stream: resuming needs no saved generator state.
        Rng rng(Rng::derive(config.seed, 0x7472000000000000ULL + static_cast<std::uint64_t>(epoch)));
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        const std::size_t bs = static_cast<std::size_t>(config.batch_size);
        int step_in_epoch = 0;
        for (std::size_t b = 0; b < order.size(); b += bs) {
            const std::size_t e = std::min(order.size(), b + bs);
            const std::span<const std::size_t> idx(order.data() + b, e - b);
            flips.clear();
            if (config.flips) {
                for (std::size_t i = 0; i < idx.size(); ++i) flips.push_back({rng.uniform() < 0.5, rng.uniform() < 0.5});
            }
            labels.clear();
            for (auto i : idx) labels.push_back(train_set.labels[i]);
            const nn::Tensor batch = corpus::make_batch(train_set, idx, channels, flips);
            const Pass p = run_batch(model, batch, labels, nn::Mode::training, true);
            ++step_in_epoch;
            if (!std::isfinite(p.loss)) {
                throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(step_in_epoch) + " (learning rate " +
                                   std::to_string(config.learning_rate) + ")");
            }
            optimizer_step(model, config, opt);
            loss_sum += p.loss * static_cast<double>(idx.size());
            correct += p.correct;
        }
        check_finite_weights(model, epoch);
        if (config.bn_recalibration_batches > 0) {
            Rng crng(Rng::derive(config.seed, 0x6263000000000000ULL + static_cast<std::uint64_t>(epoch)));
            std::vector<std::size_t> pick(train_set.size());
            std::iota(pick.begin(), pick.end(), 0);
            crng.shuffle(pick);
            std::size_t seen = 0;
            for (std::size_t b = 0; b < pick.size() && seen < static_cast<std::size_t>(config.bn_recalibration_batches);
                 b += bs, ++seen) {
                const std::span<const std::size_t> idx(pick.data() + b, std::min(pick.size(), b + bs) - b);
                nn::Network::Tape tape;
                model.network().forward(corpus::make_batch(train_set, idx, channels), tape, nn::Mode::training);
                model.network().average_state(tape, seen);
            }
        }
        const Pass v = evaluate_set(model, val_set, channels);
        EpochStats st;
        st.epoch = epoch;
        st.train_loss = loss_sum / static_cast<double>(order.size());
        st.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
        st.val_loss = v.loss / static_cast<double>(val_set.size());
        st.val_accuracy = static_cast<double>(v.correct) / static_cast<double>(val_set.size());
        if (!std::isfinite(st.val_loss)) throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
        report.epochs.push_back(st);
        if (st.val_accuracy > best_acc) {
            best_acc = st.val_accuracy;
            report.best_epoch = epoch;
            stale = 0;
            if (config.selection == Selection::best_val_accuracy) best_weights = snapshot(model);
        } else {
            ++stale;
        }
        char line[160];
        std::snprintf(line, sizeof line, "epoch %d/%d  loss %.4f  acc %.4f  val_loss %.4f  val_acc %.4f", epoch,
                      config.epochs, st.train_loss, st.train_accuracy, st.val_loss, st.val_accuracy);
        log::info(line);
        const double seconds =
            prior_seconds + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool stop = config.early_stop_patience && stale >= *config.early_stop_patience;
        if (config.checkpoint_every > 0 && (epoch % config.checkpoint_every == 0 || epoch == config.epochs || stop)) {
            write_checkpoint(epoch, seconds);
        }
        if (stop) {
            report.early_stopped = true;
            log::info("early stop: no val accuracy gain for " + std::to_string(stale) + " epochs");
            break;
        }
    }
    if (config.selection == Selection::best_val_accuracy) restore(model, best_weights);

    report.wall_seconds = prior_seconds + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    model::ModelBundle bundle(std::move(model));
    bundle.fingerprint = model::TrainingFingerprint{config.seed, hash, report.epochs.size()};
    return TrainResult{std::move(bundle), std::move(report)};
}

GradientCheck gradient_check(model::Model& model, const nn::Tensor& batch, std::span<const int> labels, double epsilon) {
    if (!(epsilon >= 1e-6 && epsilon <= 1e-3)) throw PreconditionError("gradient check epsilon must lie in [1e-6, 1e-3]");
    const std::size_t n_params = model::trainable_parameter_count(model);
    if (n_params > kGradientCheckMaxParams) {
        throw PreconditionError("gradient check refused: " + std::to_string(n_params) + " trainable parameters exceeds " +
                                std::to_string(kGradientCheckMaxParams));
    }
    run_batch(model, batch, labels, nn::Mode::inference, true);
    auto params = model.network().trainable_params();
    const auto names = model.network().param_names();
    std::vector<std::string> trainable_names;
    {
        const auto all = model.network().all_params();
        for (std::size_t i = 0; i < all.size(); ++i) {
            if (all[i]->trainable) trainable_names.push_back(names[i]);
        }
    }
    std::vector<nn::Tensor> analytic;
    for (auto* p : params) analytic.push_back(p->grad);

    // The loss is smooth wherever the ReLU signs and pooling choices stay fixed;
    // a difference is only trusted when both probes share the base pattern.
    const nn::Network& net = model.network();
    auto probe = [&](std::vector<std::uint32_t>& pattern) {
        nn::Network::Tape tape;
        net.forward(batch, tape, nn::Mode::inference);
        pattern.clear();
        for (std::size_t id = 1; id < net.node_count(); ++id) {
            const std::string_view kind = net.layer(static_cast<int>(id))->kind();
            if (kind == "relu") {
                for (double v : tape.outputs[id].values()) pattern.push_back(v > 0.0);
            } else if (kind == "maxpool2d" || kind == "global_maxpool") {
                pattern.insert(pattern.end(), tape.layers[id].index.begin(), tape.layers[id].index.end());
            }
        }
        return cross_entropy(tape.outputs[static_cast<std::size_t>(net.logits_node())], labels);
    };
    std::vector<std::uint32_t> base, up_pattern, down_pattern;
    probe(base);

    GradientCheck out;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        nn::Tensor& w = params[pi]->value;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double orig = w[i];
            std::optional<double> numeric;
            for (double h = epsilon; h >= epsilon * 1e-3; h /= 10.0) {
                w[i] = orig + h;
                const double up = probe(up_pattern);
                w[i] = orig - h;
                const double down = probe(down_pattern);
                w[i] = orig;
                if (up_pattern == base && down_pattern == base) {
                    numeric = (up - down) / (2.0 * h);
                    break;
                }
            }
            if (!numeric) {
                ++out.skipped_kinks;
                continue;
            }
            const double a = analytic[pi][i];
            const double denom = std::max({std::abs(a), std::abs(*numeric), 1e-8});
            const double rel = std::abs(a - *numeric) / denom;
            if (rel > out.max_relative_error) {
                out.max_relative_error = rel;
                out.worst_parameter = trainable_names[pi] + "[" + std::to_string(i) + "]";
            }
            ++out.checked;
        }
    }
    return out;
}

}  // namespace kohscan::train
