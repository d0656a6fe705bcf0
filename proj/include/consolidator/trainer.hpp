#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "consolidator/vit.hpp"

namespace consolidator {

/// Gaussian-cluster image classification task. Class c has a fixed mean
/// image; samples add isotropic noise of scale noise_sigma.
struct SynthTaskSpec {
    std::uint64_t seed = 0;
    std::size_t classes = 10;
    std::size_t train_samples = 500;
    std::size_t test_samples = 200;
    std::size_t image_size = 16;
    std::size_t channels = 3;
    double noise_sigma = 0.5;
};

template <typename T>
struct Dataset {
    Tensor<T> images;  ///< N x C x H x W
    std::vector<std::size_t> labels;

    std::size_t size() const { return labels.size(); }
    /// Copies the samples at `indices` into a batch.
    Dataset batch(std::span<const std::size_t> indices) const;
};

template <typename T>
std::pair<Dataset<T>, Dataset<T>> make_synth_dataset(const SynthTaskSpec& spec);

struct TrainConfig {
    double lr = 1e-2;
    double momentum = 0.9;
    double weight_decay = 0.0;
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    double droppath_p = 0.0;
    std::uint64_t seed = 0;
    /// Linear probing baseline: only the head is updated.
    bool head_only = false;

    void validate() const;
};

struct EpochMetrics {
    std::size_t epoch = 0;  ///< 0 is the state before any update
    double loss = 0.0;      ///< eval-mode mean cross-entropy over the train split
    double accuracy = 0.0;  ///< test split
    double seconds = 0.0;
    std::uint64_t frozen_fingerprint = 0;
};

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
template <typename T>
std::pair<double, Tensor<T>> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels);

/// Plain SGD with heavy-ball momentum: v = mu v + (g + wd w); w -= lr v.
class SgdMomentum {
public:
    SgdMomentum(double lr, double momentum, double weight_decay)
        : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

    template <typename T>
    void step(std::span<T> params, std::span<const T> grads, std::span<T> velocity) const {
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double g = static_cast<double>(grads[i]) + weight_decay_ * params[i];
            velocity[i] = static_cast<T>(momentum_ * velocity[i] + g);
            params[i] = static_cast<T>(params[i] - lr_ * velocity[i]);
        }
    }

private:
    double lr_, momentum_, weight_decay_;
};

template <typename T>
double evaluate_loss(const ViTModel<T>& model, const Dataset<T>& data, std::size_t batch_size = 64);

template <typename T>
double evaluate_accuracy(const ViTModel<T>& model, const Dataset<T>& data, std::size_t batch_size = 64);

/// Fingerprint over every frozen tensor of the model.
template <typename T>
std::uint64_t frozen_fingerprint(const ViTModel<T>& model);

/// Whether a tensor of this kind is updated by the given configuration.
bool is_updated(ParamKind kind, bool trainable, const TrainConfig& cfg);

/// Trains in place. Returns one record for epoch 0 plus one per epoch.
/// Throws std::runtime_error when the loss stops being finite.
template <typename T>
std::vector<EpochMetrics> train(ViTModel<T>& model, const Dataset<T>& train_set, const Dataset<T>& test_set,
                                const TrainConfig& cfg,
                                const std::function<void(const EpochMetrics&)>& on_epoch = {});

struct GradcheckReport {
    double max_rel_error = 0.0;
    std::string worst;  ///< "name[index]"
    std::size_t coordinates = 0;
    std::map<std::string, std::size_t> per_kind;
    std::size_t frozen_checked = 0;
    bool frozen_all_zero = true;
};

/// Central differences against the analytic gradient, with droppath masks
/// pinned to one draw for both passes. Samples `per_kind` coordinates from
/// each trainable tensor kind and the same number of frozen coordinates.
/// The loss differences are taken on a long double copy of the model; the
/// analytic gradient under test is the double one.
GradcheckReport finite_diff_gradcheck(ViTModel<double>& model, const Tensor<double>& images,
                                      std::span<const std::size_t> labels, double eps = 1e-5,
                                      std::size_t per_kind = 48, std::uint64_t seed = 0);

}  // namespace consolidator
