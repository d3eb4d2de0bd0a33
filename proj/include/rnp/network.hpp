#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rnp/mask.hpp"
#include "rnp/model.hpp"

namespace rnp {

enum class Mode { Train, Eval };

struct Batch {
    Tensor images;            // [B, C, H, W], values in [0, 1]
    std::vector<int> labels;  // [B], each in [0, K)
};

// Throws ShapeError/ConfigError on a batch that does not fit spec.
void check_batch(const ModelSpec& spec, const Batch& batch);

// Logits [B, K]. The mask, when given, scales each conv unit's kernel (and
// bias, at filter granularity) before the convolution. Train mode normalizes
// with batch statistics; if updated_stats is non-null it receives a copy of
// params with running statistics advanced by momentum 0.1.
Tensor forward(const ModelSpec& spec, const ParameterStore& params, const Tensor& images, Mode mode,
               const UnitMask* mask = nullptr, ParameterStore* updated_stats = nullptr);

enum class GradTarget { Parameters, Mask };

struct LossGrads {
    double loss = 0.0;
    // Trainable tensors only, same names and shapes as in the store.
    ParameterStore param_grads;
    // Same layout as the mask; zero outside the requested layers.
    std::vector<float> mask_grads;
};

// Mean cross-entropy over the batch and its gradient w.r.t. the parameters
// or the mask. layer_subset restricts mask gradients to the listed conv
// layers (empty = all layers).
LossGrads loss_and_grads(const ModelSpec& spec, const ParameterStore& params, const Batch& batch, Mode mode,
                         GradTarget wrt, const UnitMask* mask = nullptr, std::span<const int> layer_subset = {});

enum class Direction { Descend, Ascend };

// Plain SGD. Descend: v - lr*(g + wd*v). Ascend: v + lr*g - lr*wd*v.
std::vector<float> sgd_step(std::span<const float> values, std::span<const float> grads, double lr,
                            double weight_decay, Direction direction, std::string_view name = "values");
// Steps every tensor of params that has a same-named entry in grads.
ParameterStore sgd_step(const ParameterStore& params, const ParameterStore& grads, double lr, double weight_decay,
                        Direction direction);

// Bakes a filter mask into the kernels and biases of a copy of params.
ParameterStore apply_filter_mask(const ModelSpec& spec, const ParameterStore& params, const UnitMask& mask);

struct GradientCheckReport {
    double max_rel_err = 0.0;
    bool pass = false;
    std::string worst;  // variable with the largest error
    int checked = 0;
};

// Compares analytic gradients (64-bit) against central differences for
// every trainable tensor in both batchnorm modes and for both mask
// granularities on a small random model. corrupt_backward is a test hook
// that perturbs the analytic backward pass.
GradientCheckReport gradient_check(const ModelSpec& spec, std::uint64_t seed, double tolerance,
                                   bool corrupt_backward = false);

// Channel-mean of the post-relu activations of conv block `layer` for a
// single [C, H, W] image (eval mode). Returns [H_l, W_l].
Tensor emit_feature_maps(const ModelSpec& spec, const ParameterStore& params, const Tensor& image, int layer);
void write_feature_map_csv(const Tensor& map, const std::filesystem::path& path);

// Row-wise softmax of a [B, K] logit tensor.
Tensor softmax(const Tensor& logits);

}  // namespace rnp
