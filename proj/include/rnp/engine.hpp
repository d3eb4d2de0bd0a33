#pragma once

// Reusable forward/backward workspace for one ModelSpec. The public
// functions in network.hpp are thin wrappers; loops that take thousands of
// steps (training, unlearning, mask optimization) drive an Engine directly to
// avoid reallocating activations each batch.

#include <cstdint>
#include <span>
#include <vector>

#include "rnp/kernels.hpp"
#include "rnp/mask.hpp"
#include "rnp/network.hpp"

namespace rnp {

template <typename T>
using ParamViews = std::vector<std::span<const T>>;

ParamViews<float> view_params(const ParameterStore& params);

// Owning copy of a store in another precision.
template <typename T>
struct PackedParams {
    std::vector<std::vector<T>> tensors;

    static PackedParams from_store(const ParameterStore& params);
    ParamViews<T> views() const;
};

template <typename T>
struct MaskInput {
    Granularity granularity;
    std::span<const T> values;
};

template <typename T>
struct EngineGrads {
    std::vector<std::vector<T>> params;  // indexed like the store; empty for non-trainable
    std::vector<T> mask;
    std::vector<T> input;  // NCHW
};

struct BackwardRequest {
    bool params = false;
    bool mask = false;
    bool input = false;
};

template <typename T>
class Engine {
public:
    static constexpr T bn_eps = T(1e-5);

    explicit Engine(const ModelSpec& spec);

    const ModelSpec& spec() const { return spec_; }

    // images: NCHW, `batch` samples.
    void forward(const ParamViews<T>& params, std::span<const T> images, int batch, Mode mode,
                 const MaskInput<T>* mask = nullptr);

    int batch() const { return batch_; }
    // [B, K] row-major.
    std::span<const T> logits() const { return logits_; }

    // Mean cross-entropy of the last forward; seeds the backward pass.
    double cross_entropy(std::span<const int> labels);
    // Seeds the backward pass with an explicit d(loss)/d(logits).
    void set_logit_grad(std::span<const T> grad);

    void backward(const ParamViews<T>& params, const MaskInput<T>* mask, const BackwardRequest& request,
                  EngineGrads<T>& out);

    // Valid after a train-mode forward: biased batch statistics.
    std::span<const T> batch_mean(int layer) const { return layers_[layer].mean; }
    std::span<const T> batch_var(int layer) const { return layers_[layer].var; }
    std::size_t batch_elements(int layer) const;

    // Post-relu (pre-pool) activation of a block, channel-major [C, B, H, W].
    std::span<const T> activation(int layer) const { return layers_[layer].y; }

    void set_corrupt_backward(bool on) { corrupt_backward_ = on; }

private:
    struct Layer {
        ConvShape conv{};
        PlaneShape out{};
        std::vector<T> input;  // [Cin, B, H, W] (layer 0 only; others read the previous pool)
        std::vector<T> cols;
        std::vector<T> z;
        std::vector<T> xhat;
        std::vector<T> y;
        std::vector<T> pooled;
        std::vector<std::uint32_t> argmax;
        std::vector<T> mean;
        std::vector<T> var;
        std::vector<T> w_eff;
        std::vector<T> b_eff;
    };

    void resize(int batch);
    const T* layer_input(int l) const;

    ModelSpec spec_;
    int batch_ = 0;
    int capacity_ = 0;
    Mode mode_ = Mode::Eval;
    bool corrupt_backward_ = false;
    std::vector<Layer> layers_;
    std::vector<T> gap_;     // [C, B]
    std::vector<T> logits_;  // [B, K]
    std::vector<T> dlogits_;
    // backward scratch
    std::vector<T> dy_, dz_, dcols_, dx_;
    std::vector<T> dw_eff_, db_eff_;
};

extern template class Engine<float>;
extern template class Engine<double>;

// In-place SGD update shared by the training loops.
void sgd_apply(std::span<float> values, std::span<const float> grads, double lr, double weight_decay,
               Direction direction, std::string_view name);

// Advances running statistics from the engine's last train-mode forward.
void update_running_stats(const Engine<float>& engine, ParameterStore& params, double momentum = 0.1);

// Copies the [from, from+count) samples of an NCHW image tensor.
std::span<const float> sample_span(const Tensor& images, std::size_t from, std::size_t count);

}  // namespace rnp
