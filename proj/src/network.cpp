#include "rnp/network.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "rnp/engine.hpp"
#include "rnp/rng.hpp"

namespace rnp {

void check_batch(const ModelSpec& spec, const Batch& batch) {
    const auto& s = batch.images.shape();
    if (s.size() != 4 || s[1] != spec.in_channels || s[2] != spec.height || s[3] != spec.width)
        throw ShapeError("batch images " + shape_string(s) + " do not match model input " +
                         std::to_string(spec.in_channels) + "x" + std::to_string(spec.height) + "x" +
                         std::to_string(spec.width));
    if (static_cast<int>(batch.labels.size()) != s[0]) throw ShapeError("label count does not match image count");
    for (int y : batch.labels)
        if (y < 0 || y >= spec.num_classes) throw ConfigError("label out of range: " + std::to_string(y));
}

namespace {

void check_images(const ModelSpec& spec, const Tensor& images) {
    const auto& s = images.shape();
    if (s.size() != 4 || s[1] != spec.in_channels || s[2] != spec.height || s[3] != spec.width)
        throw ShapeError("images " + shape_string(s) + " do not match model input");
}

}  // namespace

Tensor forward(const ModelSpec& spec, const ParameterStore& params, const Tensor& images, Mode mode,
               const UnitMask* mask, ParameterStore* updated_stats) {
    check_store(spec, params);
    check_images(spec, images);
    if (mask) mask->check_layout(spec);
    Engine<float> engine(spec);
    const MaskInput<float> mi{mask ? mask->granularity() : Granularity::Filter,
                              mask ? mask->values() : std::span<const float>{}};
    engine.forward(view_params(params), images.values(), images.dim(0), mode, mask ? &mi : nullptr);
    if (updated_stats && mode == Mode::Train) {
        *updated_stats = params;
        update_running_stats(engine, *updated_stats);
    }
    const auto logits = engine.logits();
    return Tensor({images.dim(0), spec.num_classes}, std::vector<float>(logits.begin(), logits.end()));
}

LossGrads loss_and_grads(const ModelSpec& spec, const ParameterStore& params, const Batch& batch, Mode mode,
                         GradTarget wrt, const UnitMask* mask, std::span<const int> layer_subset) {
    check_store(spec, params);
    if (batch.labels.empty()) throw ShapeError("empty batch");
    check_batch(spec, batch);
    if (wrt == GradTarget::Mask && mask == nullptr) throw ConfigError("mask gradient requested without a mask");
    if (mask) mask->check_layout(spec);
    for (int l : layer_subset)
        if (l < 0 || l >= spec.layer_count()) throw ConfigError("layer subset names unknown layer " + std::to_string(l));

    Engine<float> engine(spec);
    const MaskInput<float> mi{mask ? mask->granularity() : Granularity::Filter,
                              mask ? mask->values() : std::span<const float>{}};
    const auto views = view_params(params);
    engine.forward(views, batch.images.values(), batch.images.dim(0), mode, mask ? &mi : nullptr);
    LossGrads out;
    out.loss = engine.cross_entropy(batch.labels);
    EngineGrads<float> grads;
    BackwardRequest req;
    req.params = wrt == GradTarget::Parameters;
    req.mask = wrt == GradTarget::Mask;
    engine.backward(views, mask ? &mi : nullptr, req, grads);
    if (req.params) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!is_trainable(params[i].role)) continue;
            out.param_grads.add(params[i].name, params[i].role, Tensor(params[i].value.shape(), grads.params[i]));
        }
    } else {
        out.mask_grads = grads.mask;
        if (!layer_subset.empty()) {
            for (int l = 0; l < spec.layer_count(); ++l) {
                if (std::find(layer_subset.begin(), layer_subset.end(), l) != layer_subset.end()) continue;
                const auto& off = mask->layer_offsets();
                std::fill(out.mask_grads.begin() + off[l], out.mask_grads.begin() + off[l + 1], 0.0f);
            }
        }
    }
    return out;
}

std::vector<float> sgd_step(std::span<const float> values, std::span<const float> grads, double lr,
                            double weight_decay, Direction direction, std::string_view name) {
    std::vector<float> out(values.begin(), values.end());
    sgd_apply(out, grads, lr, weight_decay, direction, name);
    return out;
}

ParameterStore sgd_step(const ParameterStore& params, const ParameterStore& grads, double lr, double weight_decay,
                        Direction direction) {
    ParameterStore out = params;
    for (auto& e : out) {
        if (!grads.contains(e.name)) continue;
        sgd_apply(e.value.values(), grads.get(e.name).values(), lr, weight_decay, direction, e.name);
    }
    return out;
}

ParameterStore apply_filter_mask(const ModelSpec& spec, const ParameterStore& params, const UnitMask& mask) {
    if (mask.granularity() != Granularity::Filter) throw ShapeError("apply_filter_mask needs a filter mask");
    mask.check_layout(spec);
    check_store(spec, params);
    ParameterStore out = params;
    for (int l = 0; l < spec.layer_count(); ++l) {
        auto w = out[ModelSpec::kernel_index(l)].value.values();
        auto b = out[ModelSpec::bias_index(l)].value.values();
        const auto m = mask.layer(l);
        const std::size_t per_filter = w.size() / m.size();
        for (std::size_t o = 0; o < m.size(); ++o) {
            for (std::size_t k = 0; k < per_filter; ++k) w[o * per_filter + k] *= m[o];
            b[o] *= m[o];
        }
    }
    return out;
}

namespace {

struct CheckCase {
    std::string label;
    Mode mode;
    const UnitMask* mask;
    bool wrt_mask;
};

double rel_err(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6}); }

}  // namespace

GradientCheckReport gradient_check(const ModelSpec& spec, std::uint64_t seed, double tolerance,
                                   bool corrupt_backward) {
    if (!(tolerance > 0.0)) throw ConfigError("tolerance must be positive");
    Rng rng(seed);
    ParameterStore store = build_model(spec, seed);
    for (auto& e : store) {
        for (float& v : e.value.values()) {
            switch (e.role) {
                case Role::ConvBias:
                case Role::BnShift:
                case Role::BnRunningMean:
                case Role::FcBias: v = static_cast<float>(0.2 * rng.normal()); break;
                case Role::BnScale:
                case Role::BnRunningVar: v = static_cast<float>(0.5 + rng.uniform()); break;
                default: break;
            }
        }
    }
    const int batch = 2;
    const std::size_t per_image = static_cast<std::size_t>(spec.in_channels) * spec.height * spec.width;
    std::vector<double> images(per_image * batch);
    for (double& v : images) v = rng.uniform();
    std::vector<int> labels(batch);
    for (int& y : labels) y = static_cast<int>(rng.below(spec.num_classes));

    UnitMask filter_mask = UnitMask::ones(spec, Granularity::Filter);
    for (float& v : filter_mask.values()) v = static_cast<float>(0.3 + 0.7 * rng.uniform());
    UnitMask neuron_mask = UnitMask::ones(spec, Granularity::Neuron);
    for (float& v : neuron_mask.values()) v = static_cast<float>(0.3 + 0.7 * rng.uniform());

    const std::vector<CheckCase> cases = {
        {"params/train", Mode::Train, nullptr, false},
        {"params/eval", Mode::Eval, nullptr, false},
        {"params/train+filter-mask", Mode::Train, &filter_mask, false},
        {"filter-mask/eval", Mode::Eval, &filter_mask, true},
        {"filter-mask/train", Mode::Train, &filter_mask, true},
        {"neuron-mask/eval", Mode::Eval, &neuron_mask, true},
    };

    GradientCheckReport report;
    Engine<double> engine(spec);
    engine.set_corrupt_backward(corrupt_backward);
    const double h = 1e-5;
    for (const auto& cs : cases) {
        PackedParams<double> packed = PackedParams<double>::from_store(store);
        std::vector<double> mvals;
        if (cs.mask) mvals.assign(cs.mask->values().begin(), cs.mask->values().end());
        auto loss_at = [&]() {
            MaskInput<double> mi{cs.mask ? cs.mask->granularity() : Granularity::Filter, mvals};
            engine.forward(packed.views(), images, batch, cs.mode, cs.mask ? &mi : nullptr);
            return engine.cross_entropy(labels);
        };
        loss_at();
        EngineGrads<double> grads;
        {
            MaskInput<double> mi{cs.mask ? cs.mask->granularity() : Granularity::Filter, mvals};
            BackwardRequest req;
            req.params = !cs.wrt_mask;
            req.mask = cs.wrt_mask;
            engine.backward(packed.views(), cs.mask ? &mi : nullptr, req, grads);
        }
        auto probe = [&](double& slot, double analytic, const std::string& name) {
            const double saved = slot;
            slot = saved + h;
            const double up = loss_at();
            slot = saved - h;
            const double down = loss_at();
            slot = saved;
            const double numeric = (up - down) / (2 * h);
            const double err = rel_err(analytic, numeric);
            ++report.checked;
            if (err > report.max_rel_err) {
                report.max_rel_err = err;
                report.worst = cs.label + " " + name;
            }
        };
        if (cs.wrt_mask) {
            for (std::size_t i = 0; i < mvals.size(); ++i) probe(mvals[i], grads.mask[i], "mask[" + std::to_string(i) + "]");
        } else {
            for (std::size_t t = 0; t < store.size(); ++t) {
                if (!is_trainable(store[t].role)) continue;
                for (std::size_t i = 0; i < packed.tensors[t].size(); ++i)
                    probe(packed.tensors[t][i], grads.params[t][i], store[t].name + "[" + std::to_string(i) + "]");
            }
        }
    }
    report.pass = report.max_rel_err <= tolerance;
    return report;
}

Tensor emit_feature_maps(const ModelSpec& spec, const ParameterStore& params, const Tensor& image, int layer) {
    if (layer < 0 || layer >= spec.layer_count())
        throw ConfigError("unknown layer " + std::to_string(layer) + " (model has " +
                          std::to_string(spec.layer_count()) + " conv blocks)");
    const auto& s = image.shape();
    if (s.size() != 3 || s[0] != spec.in_channels || s[1] != spec.height || s[2] != spec.width)
        throw ShapeError("feature map input must be a single [C,H,W] image");
    check_store(spec, params);
    Engine<float> engine(spec);
    engine.forward(view_params(params), image.values(), 1, Mode::Eval);
    const int h = spec.layer_height(layer), w = spec.layer_width(layer);
    const int channels = spec.layer_out_channels(layer);
    const auto act = engine.activation(layer);
    Tensor map({h, w});
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (std::size_t p = 0; p < plane; ++p) {
        double acc = 0.0;
        for (int c = 0; c < channels; ++c) acc += act[c * plane + p];
        map[p] = static_cast<float>(acc / channels);
    }
    return map;
}

void write_feature_map_csv(const Tensor& map, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << std::setprecision(9);
    const int h = map.dim(0), w = map.dim(1);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) out << (x ? "," : "") << map[static_cast<std::size_t>(y) * w + x];
        out << "\n";
    }
}

Tensor softmax(const Tensor& logits) {
    const int rows = logits.dim(0), cols = logits.dim(1);
    Tensor out(logits.shape());
    for (int r = 0; r < rows; ++r) {
        const float* row = logits.data() + static_cast<std::size_t>(r) * cols;
        const float mx = *std::max_element(row, row + cols);
        double sum = 0.0;
        for (int k = 0; k < cols; ++k) sum += std::exp(static_cast<double>(row[k] - mx));
        for (int k = 0; k < cols; ++k)
            out[static_cast<std::size_t>(r) * cols + k] = static_cast<float>(std::exp(static_cast<double>(row[k] - mx)) / sum);
    }
    return out;
}

}  // namespace rnp
