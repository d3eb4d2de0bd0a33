#include "rnp/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>

#include "rnp/engine.hpp"
#include "rnp/rng.hpp"

namespace rnp {

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train.momentum must lie in [0,1)");
    if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
}

void augment_image(std::span<const float> image, int channels, int height, int width, Rng& rng,
                   std::span<float> out) {
    constexpr int pad = 4;
    const bool flip = rng.below(2) == 1;
    const int oy = static_cast<int>(rng.below(2 * pad + 1)) - pad;
    const int ox = static_cast<int>(rng.below(2 * pad + 1)) - pad;
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    for (int c = 0; c < channels; ++c) {
        for (int y = 0; y < height; ++y) {
            const int sy = y + oy;
            for (int x = 0; x < width; ++x) {
                const int fx = flip ? width - 1 - x : x;
                const int sx = fx + ox;
                float v = 0.0f;
                if (sy >= 0 && sy < height && sx >= 0 && sx < width) v = image[c * plane + static_cast<std::size_t>(sy) * width + sx];
                out[c * plane + static_cast<std::size_t>(y) * width + x] = v;
            }
        }
    }
}

TrainResult train(const ModelSpec& spec, const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    data.validate();
    if (data.num_classes != spec.num_classes) throw ConfigError("dataset class count does not match model");
    if (data.size() == 0) throw ConfigError("empty training set");

    TrainResult result;
    result.params = build_model(spec, cfg.seed);
    ParameterStore& params = result.params;
    std::vector<std::vector<float>> velocity(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
        if (is_trainable(params[i].role)) velocity[i].assign(params[i].value.size(), 0.0f);

    Engine<float> engine(spec);
    EngineGrads<float> grads;
    const std::size_t n = data.size();
    const std::size_t per = data.image_size();
    std::vector<float> buffer(per * cfg.batch_size);
    std::vector<int> labels;
    std::vector<std::size_t> order(n);
    bool started = false;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double lr = cfg.lr;
        for (int m : cfg.milestones)
            if (epoch >= m) lr *= cfg.lr_decay;
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng(mix_seed(cfg.seed, 1, epoch));
        shuffle_rng.shuffle(std::span<std::size_t>(order));
        Rng aug_rng(mix_seed(cfg.seed, 2, epoch));

        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t count = std::min<std::size_t>(cfg.batch_size, n - start);
            labels.resize(count);
            for (std::size_t j = 0; j < count; ++j) {
                const std::size_t i = order[start + j];
                const auto src = data.images.values().subspan(i * per, per);
                auto dst = std::span<float>(buffer).subspan(j * per, per);
                if (cfg.augment)
                    augment_image(src, data.channels(), data.height(), data.width(), aug_rng, dst);
                else
                    std::copy(src.begin(), src.end(), dst.begin());
                labels[j] = data.labels[i];
            }
            const auto views = view_params(params);
            engine.forward(views, std::span<const float>(buffer).first(count * per), static_cast<int>(count),
                           Mode::Train);
            const double loss = engine.cross_entropy(labels);
            if (!std::isfinite(loss)) throw NumericError("training diverged at epoch " + std::to_string(epoch));
            loss_sum += loss * count;
            const auto logits = engine.logits();
            for (std::size_t j = 0; j < count; ++j) {
                const auto row = logits.subspan(j * spec.num_classes, spec.num_classes);
                if (std::max_element(row.begin(), row.end()) - row.begin() == labels[j]) ++correct;
            }
            engine.backward(views, nullptr, BackwardRequest{true, false, false}, grads);
            update_running_stats(engine, params);
            for (std::size_t t = 0; t < params.size(); ++t) {
                if (!is_trainable(params[t].role)) continue;
                auto v = params[t].value.values();
                auto& buf = velocity[t];
                const auto& g = grads.params[t];
                for (std::size_t k = 0; k < v.size(); ++k) {
                    if (!std::isfinite(g[k]))
                        throw NumericError("non-finite gradient for '" + params[t].name + "' at epoch " +
                                           std::to_string(epoch));
                    const float d = g[k] + static_cast<float>(cfg.weight_decay) * v[k];
                    buf[k] = started ? static_cast<float>(cfg.momentum) * buf[k] + d : d;
                    v[k] -= static_cast<float>(lr) * buf[k];
                }
            }
            started = true;
        }
        result.history.push_back({epoch, loss_sum / n, static_cast<double>(correct) / n});
    }
    return result;
}

void write_history_csv(std::span<const EpochRecord> history, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << "epoch,loss,acc\n" << std::setprecision(9);
    for (const auto& r : history) out << r.epoch << "," << r.loss << "," << r.accuracy << "\n";
}

std::vector<int> predict(const ModelSpec& spec, const ParameterStore& params, const Tensor& images,
                         const UnitMask* mask) {
    const std::size_t n = images.empty() ? 0 : static_cast<std::size_t>(images.dim(0));
    std::vector<int> out(n);
    if (n == 0) return out;
    constexpr std::size_t chunk = 250;
    Engine<float> engine(spec);
    const auto views = view_params(params);
    std::optional<MaskInput<float>> mi;
    if (mask) {
        mask->check_layout(spec);
        mi = MaskInput<float>{mask->granularity(), mask->values()};
    }
    const int K = spec.num_classes;
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t count = std::min(chunk, n - start);
        engine.forward(views, sample_span(images, start, count), static_cast<int>(count), Mode::Eval,
                       mi ? &*mi : nullptr);
        const auto logits = engine.logits();
        for (std::size_t j = 0; j < count; ++j) {
            const auto row = logits.subspan(j * K, K);
            out[start + j] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        }
    }
    return out;
}

double accuracy_of(std::span<const int> predictions, std::span<const int> labels) {
    if (labels.empty()) throw ConfigError("accuracy of an empty dataset");
    if (predictions.size() != labels.size()) throw ShapeError("prediction/label count mismatch");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

double accuracy(const ModelSpec& spec, const ParameterStore& params, const Dataset& data, const UnitMask* mask) {
    if (data.size() == 0) throw ConfigError("accuracy of an empty dataset");
    return accuracy_of(predict(spec, params, data.images, mask), data.labels);
}

Metrics attack_metrics(const ModelSpec& spec, const ParameterStore& params, const Dataset& clean_test,
                       const Dataset& asr_test) {
    return {accuracy(spec, params, clean_test), accuracy(spec, params, asr_test)};
}

}  // namespace rnp
