#include "rnp/engine.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace rnp {

ParamViews<float> view_params(const ParameterStore& params) {
    ParamViews<float> out;
    out.reserve(params.size());
    for (const auto& e : params) out.emplace_back(e.value.values());
    return out;
}

template <typename T>
PackedParams<T> PackedParams<T>::from_store(const ParameterStore& params) {
    PackedParams<T> p;
    for (const auto& e : params) p.tensors.emplace_back(e.value.values().begin(), e.value.values().end());
    return p;
}

template <typename T>
ParamViews<T> PackedParams<T>::views() const {
    ParamViews<T> out;
    for (const auto& t : tensors) out.emplace_back(t);
    return out;
}

template struct PackedParams<float>;
template struct PackedParams<double>;

namespace {

template <typename T>
void require_finite(std::span<const T> values, const std::string& where) {
    for (T v : values)
        if (!std::isfinite(v)) throw NumericError("non-finite activation in " + where);
}

}  // namespace

template <typename T>
Engine<T>::Engine(const ModelSpec& spec) : spec_(spec), layers_(spec.convs.size()) {
    spec_.validate();
}

template <typename T>
std::size_t Engine<T>::batch_elements(int layer) const {
    return layers_[layer].out.per_channel();
}

template <typename T>
void Engine<T>::resize(int batch) {
    batch_ = batch;
    std::size_t max_out = 0, max_cols = 0, max_in = 0;
    for (int l = 0; l < spec_.layer_count(); ++l) {
        Layer& L = layers_[l];
        const int h = spec_.layer_height(l), w = spec_.layer_width(l);
        const int ci = spec_.layer_in_channels(l), co = spec_.layer_out_channels(l);
        L.conv = {ci, co, batch, h, w};
        L.out = {co, batch, h, w};
        if (l == 0) L.input.resize(static_cast<std::size_t>(ci) * batch * h * w);
        L.cols.resize(static_cast<std::size_t>(L.conv.patch()) * L.conv.columns());
        L.z.resize(L.out.size());
        L.xhat.resize(L.out.size());
        L.y.resize(L.out.size());
        if (spec_.convs[l].max_pool) {
            L.pooled.resize(L.out.size() / 4);
            L.argmax.resize(L.out.size() / 4);
        }
        L.mean.resize(co);
        L.var.resize(co);
        L.w_eff.resize(spec_.layer_weight_count(l));
        L.b_eff.resize(co);
        max_out = std::max(max_out, L.out.size());
        max_cols = std::max(max_cols, L.cols.size());
        max_in = std::max(max_in, static_cast<std::size_t>(ci) * batch * h * w);
    }
    gap_.resize(static_cast<std::size_t>(spec_.fc_in()) * batch);
    logits_.resize(static_cast<std::size_t>(spec_.num_classes) * batch);
    dlogits_.resize(logits_.size());
    dy_.resize(max_out);
    dz_.resize(max_out);
    dcols_.resize(max_cols);
    dx_.resize(max_in);
}

template <typename T>
const T* Engine<T>::layer_input(int l) const {
    return l == 0 ? layers_[0].input.data() : layers_[l - 1].pooled.data();
}

template <typename T>
void Engine<T>::forward(const ParamViews<T>& params, std::span<const T> images, int batch, Mode mode,
                        const MaskInput<T>* mask) {
    if (batch < 1) throw ShapeError("empty batch");
    const std::size_t per_image = static_cast<std::size_t>(spec_.in_channels) * spec_.height * spec_.width;
    if (images.size() != per_image * batch)
        throw ShapeError("batch holds " + std::to_string(images.size()) + " values, expected " +
                         std::to_string(per_image * batch));
    if (params.size() != spec_.fc_bias_index() + 1) throw ShapeError("parameter count does not match model");
    resize(batch);
    mode_ = mode;
    const bool training = mode == Mode::Train;

    kernels::nchw_to_cbhw(images.data(), layers_[0].input.data(),
                          PlaneShape{spec_.in_channels, batch, spec_.height, spec_.width});

    for (int l = 0; l < spec_.layer_count(); ++l) {
        Layer& L = layers_[l];
        const auto w = params[ModelSpec::kernel_index(l)];
        const auto b = params[ModelSpec::bias_index(l)];
        const int co = L.conv.out_channels;
        const std::size_t per_filter = static_cast<std::size_t>(L.conv.patch());
        if (mask == nullptr) {
            std::copy(w.begin(), w.end(), L.w_eff.begin());
            std::copy(b.begin(), b.end(), L.b_eff.begin());
        } else if (mask->granularity == Granularity::Filter) {
            const T* m = mask->values.data() + spec_.filter_offset(l);
            for (int o = 0; o < co; ++o) {
                for (std::size_t k = 0; k < per_filter; ++k) L.w_eff[o * per_filter + k] = w[o * per_filter + k] * m[o];
                L.b_eff[o] = b[o] * m[o];
            }
        } else {
            const T* m = mask->values.data() + spec_.conv_weight_offset(l);
            for (std::size_t i = 0; i < L.w_eff.size(); ++i) L.w_eff[i] = w[i] * m[i];
            std::copy(b.begin(), b.end(), L.b_eff.begin());
        }

        kernels::im2col(layer_input(l), L.conv, L.cols.data());
        kernels::conv_forward(L.w_eff.data(), L.b_eff.data(), L.cols.data(), L.conv, L.z.data());
        if (!training) {
            const auto rm = params[ModelSpec::bn_mean_index(l)];
            const auto rv = params[ModelSpec::bn_var_index(l)];
            std::copy(rm.begin(), rm.end(), L.mean.begin());
            std::copy(rv.begin(), rv.end(), L.var.begin());
        }
        kernels::batchnorm_relu_forward(L.z.data(), co, L.out.per_channel(),
                                        params[ModelSpec::bn_scale_index(l)].data(),
                                        params[ModelSpec::bn_shift_index(l)].data(), training, L.mean.data(),
                                        L.var.data(), bn_eps, L.xhat.data(), L.y.data());
        require_finite<T>(L.y, "conv" + std::to_string(l));
        if (spec_.convs[l].max_pool) kernels::maxpool2_forward(L.y.data(), L.out, L.pooled.data(), L.argmax.data());
    }

    const Layer& last = layers_.back();
    kernels::global_avgpool_forward(last.y.data(), last.out, gap_.data());
    const int K = spec_.num_classes, C = spec_.fc_in();
    const auto fw = params[spec_.fc_weight_index()];
    const auto fb = params[spec_.fc_bias_index()];
    for (int bi = 0; bi < batch; ++bi) {
        for (int k = 0; k < K; ++k) {
            T acc = fb[k];
            for (int c = 0; c < C; ++c) acc += fw[k * C + c] * gap_[static_cast<std::size_t>(c) * batch + bi];
            logits_[static_cast<std::size_t>(bi) * K + k] = acc;
        }
    }
    require_finite<T>(logits_, "fc");
}

template <typename T>
double Engine<T>::cross_entropy(std::span<const int> labels) {
    if (static_cast<int>(labels.size()) != batch_) throw ShapeError("label count does not match batch");
    const int K = spec_.num_classes;
    double total = 0.0;
    for (int b = 0; b < batch_; ++b) {
        if (labels[b] < 0 || labels[b] >= K) throw ConfigError("label out of range: " + std::to_string(labels[b]));
        const T* row = logits_.data() + static_cast<std::size_t>(b) * K;
        T* drow = dlogits_.data() + static_cast<std::size_t>(b) * K;
        const T mx = *std::max_element(row, row + K);
        double sum = 0.0;
        for (int k = 0; k < K; ++k) sum += std::exp(static_cast<double>(row[k] - mx));
        const double log_z = std::log(sum) + mx;
        total += log_z - row[labels[b]];
        for (int k = 0; k < K; ++k) {
            const double p = std::exp(static_cast<double>(row[k]) - log_z);
            drow[k] = static_cast<T>((p - (k == labels[b] ? 1.0 : 0.0)) / batch_);
        }
    }
    return total / batch_;
}

template <typename T>
void Engine<T>::set_logit_grad(std::span<const T> grad) {
    if (grad.size() != dlogits_.size()) throw ShapeError("logit gradient size mismatch");
    std::copy(grad.begin(), grad.end(), dlogits_.begin());
}

template <typename T>
void Engine<T>::backward(const ParamViews<T>& params, const MaskInput<T>* mask, const BackwardRequest& request,
                         EngineGrads<T>& out) {
    const int B = batch_, K = spec_.num_classes, C = spec_.fc_in();
    const bool training = mode_ == Mode::Train;
    if (request.mask && mask == nullptr) throw ConfigError("mask gradient requested without a mask");

    if (request.params) {
        out.params.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            const bool running = (i < spec_.fc_weight_index()) &&
                                 (i % ModelSpec::params_per_conv == 4 || i % ModelSpec::params_per_conv == 5);
            if (running)
                out.params[i].clear();
            else
                out.params[i].assign(params[i].size(), T(0));
        }
    }
    if (request.mask) out.mask.assign(mask->values.size(), T(0));

    // fully-connected
    const auto fw = params[spec_.fc_weight_index()];
    if (request.params) {
        auto& gw = out.params[spec_.fc_weight_index()];
        auto& gb = out.params[spec_.fc_bias_index()];
        for (int k = 0; k < K; ++k) {
            for (int b = 0; b < B; ++b) gb[k] += dlogits_[static_cast<std::size_t>(b) * K + k];
            for (int c = 0; c < C; ++c) {
                T acc = 0;
                for (int b = 0; b < B; ++b)
                    acc += dlogits_[static_cast<std::size_t>(b) * K + k] * gap_[static_cast<std::size_t>(c) * B + b];
                gw[k * C + c] = acc;
            }
        }
    }
    std::vector<T> dgap(static_cast<std::size_t>(C) * B, T(0));
    for (int c = 0; c < C; ++c)
        for (int b = 0; b < B; ++b) {
            T acc = 0;
            for (int k = 0; k < K; ++k) acc += fw[k * C + c] * dlogits_[static_cast<std::size_t>(b) * K + k];
            dgap[static_cast<std::size_t>(c) * B + b] = acc;
        }
    kernels::global_avgpool_backward(dgap.data(), layers_.back().out, dy_.data());

    std::vector<T> dgamma, dbeta;
    for (int l = spec_.layer_count() - 1; l >= 0; --l) {
        Layer& L = layers_[l];
        const int co = L.conv.out_channels;
        const std::size_t n = L.out.per_channel();
        dgamma.assign(co, T(0));
        dbeta.assign(co, T(0));
        kernels::batchnorm_relu_backward(dy_.data(), L.y.data(), L.xhat.data(), co, n,
                                         params[ModelSpec::bn_scale_index(l)].data(), L.var.data(), bn_eps, training,
                                         dz_.data(), dgamma.data(), dbeta.data());
        if (corrupt_backward_ && l == spec_.layer_count() - 1)
            for (std::size_t i = 0; i < L.out.size(); ++i) dz_[i] *= T(1.05);

        const bool need_weights = request.params || request.mask;
        if (need_weights) {
            dw_eff_.resize(L.w_eff.size());
            db_eff_.resize(co);
            kernels::conv_backward_params(dz_.data(), L.cols.data(), L.conv, dw_eff_.data(), db_eff_.data());
            const auto w = params[ModelSpec::kernel_index(l)];
            const auto b = params[ModelSpec::bias_index(l)];
            const std::size_t per_filter = L.conv.patch();
            if (request.params) {
                auto& gw = out.params[ModelSpec::kernel_index(l)];
                auto& gb = out.params[ModelSpec::bias_index(l)];
                if (mask == nullptr) {
                    std::copy(dw_eff_.begin(), dw_eff_.end(), gw.begin());
                    std::copy(db_eff_.begin(), db_eff_.end(), gb.begin());
                } else if (mask->granularity == Granularity::Filter) {
                    const T* m = mask->values.data() + spec_.filter_offset(l);
                    for (int o = 0; o < co; ++o) {
                        for (std::size_t k = 0; k < per_filter; ++k)
                            gw[o * per_filter + k] = dw_eff_[o * per_filter + k] * m[o];
                        gb[o] = db_eff_[o] * m[o];
                    }
                } else {
                    const T* m = mask->values.data() + spec_.conv_weight_offset(l);
                    for (std::size_t i = 0; i < gw.size(); ++i) gw[i] = dw_eff_[i] * m[i];
                    std::copy(db_eff_.begin(), db_eff_.end(), gb.begin());
                }
                std::copy(dgamma.begin(), dgamma.end(), out.params[ModelSpec::bn_scale_index(l)].begin());
                std::copy(dbeta.begin(), dbeta.end(), out.params[ModelSpec::bn_shift_index(l)].begin());
            }
            if (request.mask) {
                if (mask->granularity == Granularity::Filter) {
                    T* gm = out.mask.data() + spec_.filter_offset(l);
                    for (int o = 0; o < co; ++o) {
                        T acc = db_eff_[o] * b[o];
                        for (std::size_t k = 0; k < per_filter; ++k)
                            acc += dw_eff_[o * per_filter + k] * w[o * per_filter + k];
                        gm[o] = acc;
                    }
                } else {
                    T* gm = out.mask.data() + spec_.conv_weight_offset(l);
                    for (std::size_t i = 0; i < dw_eff_.size(); ++i) gm[i] = dw_eff_[i] * w[i];
                }
            }
        }

        if (l == 0 && !request.input) break;
        kernels::conv_backward_input(L.w_eff.data(), dz_.data(), L.conv, dcols_.data());
        kernels::col2im(dcols_.data(), L.conv, dx_.data());
        if (l == 0) {
            out.input.resize(static_cast<std::size_t>(spec_.in_channels) * B * spec_.height * spec_.width);
            kernels::cbhw_to_nchw(dx_.data(), out.input.data(),
                                  PlaneShape{spec_.in_channels, B, spec_.height, spec_.width});
        } else {
            const Layer& prev = layers_[l - 1];
            kernels::maxpool2_backward(dx_.data(), prev.argmax.data(), prev.out, dy_.data());
        }
    }
}

template class Engine<float>;
template class Engine<double>;

void sgd_apply(std::span<float> values, std::span<const float> grads, double lr, double weight_decay,
               Direction direction, std::string_view name) {
    if (values.size() != grads.size())
        throw ShapeError("gradient for '" + std::string(name) + "' has the wrong size");
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    for (float g : grads)
        if (!std::isfinite(g)) throw NumericError("non-finite gradient for '" + std::string(name) + "'");
    const float a = static_cast<float>(lr);
    const float d = static_cast<float>(lr * weight_decay);
    if (direction == Direction::Descend) {
        for (std::size_t i = 0; i < values.size(); ++i) values[i] -= a * grads[i] + d * values[i];
    } else {
        for (std::size_t i = 0; i < values.size(); ++i) values[i] += a * grads[i] - d * values[i];
    }
}

void update_running_stats(const Engine<float>& engine, ParameterStore& params, double momentum) {
    const ModelSpec& spec = engine.spec();
    for (int l = 0; l < spec.layer_count(); ++l) {
        const double n = static_cast<double>(engine.batch_elements(l));
        const double unbias = n > 1 ? n / (n - 1) : 1.0;
        auto rm = params[ModelSpec::bn_mean_index(l)].value.values();
        auto rv = params[ModelSpec::bn_var_index(l)].value.values();
        const auto mean = engine.batch_mean(l);
        const auto var = engine.batch_var(l);
        for (std::size_t c = 0; c < rm.size(); ++c) {
            rm[c] = static_cast<float>((1.0 - momentum) * rm[c] + momentum * mean[c]);
            rv[c] = static_cast<float>((1.0 - momentum) * rv[c] + momentum * var[c] * unbias);
        }
    }
}

std::span<const float> sample_span(const Tensor& images, std::size_t from, std::size_t count) {
    const std::size_t per = images.size() / static_cast<std::size_t>(images.dim(0));
    return images.values().subspan(from * per, count * per);
}

}  // namespace rnp
