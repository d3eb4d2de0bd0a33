#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "rnp/tensor.hpp"

namespace rnp {

enum class Role {
    ConvKernel,
    ConvBias,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
    FcWeight,
    FcBias,
};

std::string_view to_string(Role role);
Role role_from_string(std::string_view text);
bool is_trainable(Role role);

struct ParamEntry {
    std::string name;
    Role role;
    Tensor value;

    friend bool operator==(const ParamEntry&, const ParamEntry&) = default;
};

// Ordered, uniquely named collection of model tensors.
class ParameterStore {
public:
    void add(std::string name, Role role, Tensor value);

    std::size_t size() const { return entries_.size(); }
    const ParamEntry& operator[](std::size_t i) const { return entries_[i]; }
    ParamEntry& operator[](std::size_t i) { return entries_[i]; }

    const Tensor& get(std::string_view name) const;
    Tensor& get(std::string_view name);
    bool contains(std::string_view name) const;

    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }

    std::size_t parameter_count() const;

    friend bool operator==(const ParameterStore&, const ParameterStore&) = default;

private:
    std::vector<ParamEntry> entries_;
};

struct ConvLayerSpec {
    int out_channels = 0;
    bool max_pool = false;  // 2x2/2 max pool after the activation

    friend bool operator==(const ConvLayerSpec&, const ConvLayerSpec&) = default;
};

struct FilterRef {
    int layer;
    int channel;
};

// A stack of conv(3x3, pad 1) -> batchnorm -> relu [-> maxpool] blocks,
// followed by global average pooling and one fully-connected layer.
struct ModelSpec {
    int num_classes = 10;
    int in_channels = 3;
    int height = 32;
    int width = 32;
    std::vector<ConvLayerSpec> convs;

    static constexpr int kernel_size = 3;
    static constexpr int params_per_conv = 6;

    static ModelSpec small_conv_net(int num_classes = 10);
    // Two blocks (2->3 with max pool, 3->4) on 2x6x6 inputs, K=3.
    static ModelSpec tiny();

    void validate() const;

    int layer_count() const { return static_cast<int>(convs.size()); }
    int layer_in_channels(int layer) const;
    int layer_out_channels(int layer) const { return convs.at(layer).out_channels; }
    // Spatial extent of the layer's input (= its pre-pool output).
    int layer_height(int layer) const;
    int layer_width(int layer) const;
    int fc_in() const { return convs.back().out_channels; }

    int filter_count() const;
    int filter_offset(int layer) const;
    std::vector<FilterRef> filter_registry() const;

    std::size_t layer_weight_count(int layer) const;
    std::size_t conv_weight_count() const;
    std::size_t conv_weight_offset(int layer) const;

    // Store index of each tensor; layout is fixed by build_model.
    static std::size_t kernel_index(int layer) { return params_per_conv * layer; }
    static std::size_t bias_index(int layer) { return params_per_conv * layer + 1; }
    static std::size_t bn_scale_index(int layer) { return params_per_conv * layer + 2; }
    static std::size_t bn_shift_index(int layer) { return params_per_conv * layer + 3; }
    static std::size_t bn_mean_index(int layer) { return params_per_conv * layer + 4; }
    static std::size_t bn_var_index(int layer) { return params_per_conv * layer + 5; }
    std::size_t fc_weight_index() const { return params_per_conv * convs.size(); }
    std::size_t fc_bias_index() const { return params_per_conv * convs.size() + 1; }

    std::string describe() const;

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

// Fan-in scaled normal kernels, zero biases/shifts, unit scales and variances.
ParameterStore build_model(const ModelSpec& spec, std::uint64_t seed);

// Throws ShapeError unless every tensor matches the spec layout.
void check_store(const ModelSpec& spec, const ParameterStore& params);

}  // namespace rnp
