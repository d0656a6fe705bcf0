#include "consolidator/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>
#include <set>

namespace consolidator {

template <typename T>
Dataset<T> Dataset<T>::batch(std::span<const std::size_t> indices) const {
    Shape shape = images.shape();
    const std::size_t stride = images.numel() / shape[0];
    shape[0] = indices.size();
    Dataset<T> out;
    out.images = Tensor<T>(shape);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::copy_n(images.data().begin() + static_cast<std::ptrdiff_t>(indices[i] * stride), stride,
                    out.images.data().begin() + static_cast<std::ptrdiff_t>(i * stride));
        out.labels.push_back(labels[indices[i]]);
    }
    return out;
}

template <typename T>
std::pair<Dataset<T>, Dataset<T>> make_synth_dataset(const SynthTaskSpec& spec) {
    if (spec.classes < 2) throw std::invalid_argument("synthetic task needs at least 2 classes");
    if (spec.train_samples == 0 || spec.test_samples == 0) throw std::invalid_argument("empty split");
    Rng rng(spec.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t pixels = spec.channels * spec.image_size * spec.image_size;
    std::vector<double> means(spec.classes * pixels);
    for (auto& m : means) m = normal(rng);

    auto make_split = [&](std::size_t n) {
        Dataset<T> d;
        d.images = Tensor<T>({n, spec.channels, spec.image_size, spec.image_size});
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = i % spec.classes;
            d.labels.push_back(c);
            for (std::size_t p = 0; p < pixels; ++p) {
                d.images[i * pixels + p] = static_cast<T>(means[c * pixels + p] + spec.noise_sigma * normal(rng));
            }
        }
        return d;
    };
    Dataset<T> train_split = make_split(spec.train_samples);
    Dataset<T> test_split = make_split(spec.test_samples);
    return {std::move(train_split), std::move(test_split)};
}

void TrainConfig::validate() const {
    auto finite = [](double v) { return std::isfinite(v); };
    if (!finite(lr) || lr < 0.0) throw std::invalid_argument("learning rate must be finite and >= 0");
    if (!finite(momentum) || !finite(weight_decay)) throw std::invalid_argument("non-finite hyperparameter");
    if (!(droppath_p >= 0.0 && droppath_p <= 1.0)) throw std::invalid_argument("droppath must lie in [0, 1]");
    if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
}

template <typename T>
std::pair<double, Tensor<T>> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels) {
    if (logits.rank() != 2 || logits.extent(0) != labels.size()) {
        throw DimensionError("logits " + shape_to_string(logits.shape()) + " vs " + std::to_string(labels.size()) +
                             " labels");
    }
    const std::size_t B = logits.extent(0);
    const Tensor<T> probs = softmax_rows(logits);
    Tensor<T> grad(logits.shape());
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        auto row = logits.row(b);
        if (labels[b] >= row.size()) throw IndexError("label " + std::to_string(labels[b]) + " out of range");
        const double mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (auto v : row) sum += std::exp(static_cast<double>(v) - mx);
        loss += mx + std::log(sum) - row[labels[b]];
        auto g = grad.row(b);
        auto p = probs.row(b);
        for (std::size_t k = 0; k < g.size(); ++k) {
            g[k] = static_cast<T>((static_cast<double>(p[k]) - (k == labels[b] ? 1.0 : 0.0)) / double(B));
        }
    }
    return {loss / double(B), std::move(grad)};
}

template <typename T>
double evaluate_loss(const ViTModel<T>& model, const Dataset<T>& data, std::size_t batch_size) {
    double total = 0.0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        idx.resize(std::min(batch_size, data.size() - start));
        std::iota(idx.begin(), idx.end(), start);
        const Dataset<T> b = data.batch(idx);
        total += cross_entropy(vit_forward(model, b.images), b.labels).first * double(idx.size());
    }
    return total / double(data.size());
}

template <typename T>
double evaluate_accuracy(const ViTModel<T>& model, const Dataset<T>& data, std::size_t batch_size) {
    std::size_t correct = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        idx.resize(std::min(batch_size, data.size() - start));
        std::iota(idx.begin(), idx.end(), start);
        const Dataset<T> b = data.batch(idx);
        const Tensor<T> logits = vit_forward(model, b.images);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            auto row = logits.row(i);
            const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
            correct += pred == b.labels[i];
        }
    }
    return double(correct) / double(data.size());
}

template <typename T>
std::uint64_t frozen_fingerprint(const ViTModel<T>& model) {
    Checkpoint frozen;
    for_each_parameter(model, [&](const std::string& name, const Tensor<T>& t, ParamKind, bool trainable) {
        if (!trainable) frozen.add(name, t);
    });
    return fingerprint(frozen, {});
}

bool is_updated(ParamKind kind, bool trainable, const TrainConfig& cfg) {
    return cfg.head_only ? kind == ParamKind::Head : trainable;
}

namespace {

template <typename T>
struct Slot {
    std::string name;
    Tensor<T>* value;
    Tensor<T>* grad;
    Tensor<T>* velocity;
    ParamKind kind;
    bool trainable;
};

template <typename T>
std::vector<Slot<T>> make_slots(ViTModel<T>& model, ViTModel<T>& grad, ViTModel<T>* velocity) {
    std::vector<Slot<T>> slots;
    for_each_parameter(model, [&](const std::string& name, Tensor<T>& t, ParamKind kind, bool trainable) {
        slots.push_back({name, &t, nullptr, nullptr, kind, trainable});
    });
    std::size_t i = 0;
    for_each_parameter(grad, [&](const std::string&, Tensor<T>& t, ParamKind, bool) { slots[i++].grad = &t; });
    if (velocity) {
        i = 0;
        for_each_parameter(*velocity, [&](const std::string&, Tensor<T>& t, ParamKind, bool) {
            slots[i++].velocity = &t;
        });
    }
    return slots;
}

long double wide_cross_entropy(const Tensor<long double>& logits, std::span<const std::size_t> labels) {
    long double loss = 0;
    for (std::size_t b = 0; b < logits.extent(0); ++b) {
        auto row = logits.row(b);
        const long double mx = *std::max_element(row.begin(), row.end());
        long double sum = 0;
        for (auto v : row) sum += std::exp(v - mx);
        loss += mx + std::log(sum) - row[labels[b]];
    }
    return loss / static_cast<long double>(logits.extent(0));
}

}  // namespace

template <typename T>
std::vector<EpochMetrics> train(ViTModel<T>& model, const Dataset<T>& train_set, const Dataset<T>& test_set,
                                const TrainConfig& cfg, const std::function<void(const EpochMetrics&)>& on_epoch) {
    cfg.validate();
    for (auto* layer : model.layers()) layer->droppath_p = cfg.droppath_p;
    model.config.droppath_p = cfg.droppath_p;
    if (cfg.droppath_p == 1.0 && !cfg.head_only && !model.layers().empty()) {
        std::clog << "warning: droppath p = 1 drops every consolidator path; branch gradients are identically zero\n";
    }
    Rng rng(cfg.seed);
    ViTModel<T> grad = zeros_like(model);
    ViTModel<T> velocity = zeros_like(model);
    auto slots = make_slots(model, grad, &velocity);
    std::erase_if(slots, [&](const Slot<T>& s) { return !is_updated(s.kind, s.trainable, cfg); });
    const SgdMomentum opt(cfg.lr, cfg.momentum, cfg.weight_decay);

    std::vector<EpochMetrics> history;
    auto record = [&](std::size_t epoch, double seconds) {
        EpochMetrics m;
        m.epoch = epoch;
        m.loss = evaluate_loss(model, train_set);
        m.accuracy = evaluate_accuracy(model, test_set);
        m.seconds = seconds;
        m.frozen_fingerprint = frozen_fingerprint(model);
        if (!std::isfinite(m.loss)) {
            throw std::runtime_error("training diverged: loss is not finite after epoch " + std::to_string(epoch));
        }
        history.push_back(m);
        if (on_epoch) on_epoch(m);
    };
    record(0, 0.0);

    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, order.size() - first);
            const Dataset<T> batch = train_set.batch(std::span<const std::size_t>(order).subspan(first, n));
            const DropMasks masks = draw_drop_masks(model, n, rng);
            ForwardCache<T> cache;
            const Tensor<T> logits = vit_forward(model, batch.images, &masks, &cache);
            const auto [loss, dlogits] = cross_entropy(logits, batch.labels);
            if (!std::isfinite(loss)) {
                throw std::runtime_error("training diverged: non-finite loss in epoch " + std::to_string(epoch));
            }
            for (auto& s : slots) s.grad->fill(T(0));
            if (cfg.head_only) {
                accumulate_weight_grad(grad.head_weight, cache.cls_norm, dlogits);
                accumulate_bias_grad(grad.head_bias, dlogits);
            } else {
                vit_backward(model, cache, dlogits, grad);
            }
            for (auto& s : slots) opt.step<T>(s.value->data(), s.grad->data(), s.velocity->data());
        }
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        record(epoch, seconds);
    }
    return history;
}

GradcheckReport finite_diff_gradcheck(ViTModel<double>& model, const Tensor<double>& images,
                                      std::span<const std::size_t> labels, double eps, std::size_t per_kind,
                                      std::uint64_t seed) {
    Rng rng(seed);
    const DropMasks masks = draw_drop_masks(model, images.extent(0), rng);
    // Numeric side runs in extended precision on a copy.
    ViTModel<long double> wide = model_cast<long double>(model);
    const Tensor<long double> wide_images = tensor_cast<long double>(images);
    std::vector<Tensor<long double>*> wide_tensors;
    for_each_parameter(wide, [&](const std::string&, Tensor<long double>& t, ParamKind, bool) {
        wide_tensors.push_back(&t);
    });
    auto loss_at = [&]() { return wide_cross_entropy(vit_forward(wide, wide_images, &masks, nullptr), labels); };

    ViTModel<double> grad = zeros_like(model);
    ForwardCache<double> cache;
    const auto [loss0, dlogits] = cross_entropy(vit_forward(model, images, &masks, &cache), labels);
    (void)loss0;
    vit_backward(model, cache, dlogits, grad);
    auto slots = make_slots<double>(model, grad, nullptr);

    GradcheckReport report;
    const std::array<ParamKind, 5> kinds = {ParamKind::BranchWeight, ParamKind::BranchBias, ParamKind::BaseBias,
                                            ParamKind::LayerNorm, ParamKind::Head};
    auto sample_coords = [&](auto&& accept) {
        std::vector<std::pair<std::size_t, std::size_t>> all;
        for (std::size_t s = 0; s < slots.size(); ++s) {
            if (!accept(slots[s])) continue;
            for (std::size_t i = 0; i < slots[s].value->numel(); ++i) all.emplace_back(s, i);
        }
        std::shuffle(all.begin(), all.end(), rng);
        all.resize(std::min(all.size(), per_kind));
        return all;
    };

    for (auto kind : kinds) {
        const auto coords = sample_coords([&](const Slot<double>& s) { return s.kind == kind && s.trainable; });
        for (const auto& [s, i] : coords) {
            long double& theta = (*wide_tensors[s])[i];
            const long double saved = theta;
            theta = saved + eps;
            const long double up = loss_at();
            theta = saved - eps;
            const long double down = loss_at();
            theta = saved;
            const double numeric = static_cast<double>((up - down) / (2.0L * eps));
            const double analytic = (*slots[s].grad)[i];
            const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
            const double rel = std::abs(numeric - analytic) / denom;
            if (rel > report.max_rel_error || report.worst.empty()) {
                report.max_rel_error = std::max(report.max_rel_error, rel);
                if (rel >= report.max_rel_error) report.worst = slots[s].name + "[" + std::to_string(i) + "]";
            }
            ++report.coordinates;
            ++report.per_kind[param_kind_name(kind)];
        }
    }
    const auto frozen = sample_coords([](const Slot<double>& s) { return !s.trainable; });
    for (const auto& [s, i] : frozen) {
        ++report.frozen_checked;
        if ((*slots[s].grad)[i] != 0.0) report.frozen_all_zero = false;
    }
    return report;
}

#define CONSOLIDATOR_INSTANTIATE(T)                                                                               \
    template struct Dataset<T>;                                                                                   \
    template std::pair<Dataset<T>, Dataset<T>> make_synth_dataset<T>(const SynthTaskSpec&);                       \
    template std::pair<double, Tensor<T>> cross_entropy(const Tensor<T>&, std::span<const std::size_t>);          \
    template double evaluate_loss(const ViTModel<T>&, const Dataset<T>&, std::size_t);                            \
    template double evaluate_accuracy(const ViTModel<T>&, const Dataset<T>&, std::size_t);                        \
    template std::uint64_t frozen_fingerprint(const ViTModel<T>&);                                                \
    template std::vector<EpochMetrics> train(ViTModel<T>&, const Dataset<T>&, const Dataset<T>&, const TrainConfig&, \
                                             const std::function<void(const EpochMetrics&)>&);

CONSOLIDATOR_INSTANTIATE(float)
CONSOLIDATOR_INSTANTIATE(double)

#undef CONSOLIDATOR_INSTANTIATE

}  // namespace consolidator
