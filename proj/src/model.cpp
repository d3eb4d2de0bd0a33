#include "rnp/model.hpp"

#include <cmath>

#include "rnp/rng.hpp"

namespace rnp {

namespace {

constexpr std::string_view role_names[] = {
    "conv-kernel", "conv-bias", "bn-scale", "bn-shift",
    "bn-running-mean", "bn-running-var", "fc-weight", "fc-bias",
};

}  // namespace

std::string_view to_string(Role role) { return role_names[static_cast<int>(role)]; }

Role role_from_string(std::string_view text) {
    for (int i = 0; i < 8; ++i)
        if (role_names[i] == text) return static_cast<Role>(i);
    throw FormatError("unknown tensor role '" + std::string(text) + "'");
}

bool is_trainable(Role role) { return role != Role::BnRunningMean && role != Role::BnRunningVar; }

void ParameterStore::add(std::string name, Role role, Tensor value) {
    if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    entries_.push_back({std::move(name), role, std::move(value)});
}

bool ParameterStore::contains(std::string_view name) const {
    for (const auto& e : entries_)
        if (e.name == name) return true;
    return false;
}

const Tensor& ParameterStore::get(std::string_view name) const {
    for (const auto& e : entries_)
        if (e.name == name) return e.value;
    throw ConfigError("no parameter named '" + std::string(name) + "'");
}

Tensor& ParameterStore::get(std::string_view name) {
    return const_cast<Tensor&>(std::as_const(*this).get(name));
}

std::size_t ParameterStore::parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
}

ModelSpec ModelSpec::small_conv_net(int num_classes) {
    ModelSpec spec;
    spec.num_classes = num_classes;
    spec.convs = {{16, true}, {32, true}, {64, false}};
    return spec;
}

ModelSpec ModelSpec::tiny() {
    ModelSpec spec;
    spec.num_classes = 3;
    spec.in_channels = 2;
    spec.height = 6;
    spec.width = 6;
    spec.convs = {{3, true}, {4, false}};
    return spec;
}

void ModelSpec::validate() const {
    if (num_classes < 2) throw ConfigError("model needs at least 2 classes");
    if (in_channels < 1 || height < 1 || width < 1) throw ConfigError("model input shape must be positive");
    if (convs.empty()) throw ConfigError("model needs at least one conv layer");
    int h = height, w = width;
    for (std::size_t l = 0; l < convs.size(); ++l) {
        if (convs[l].out_channels < 1)
            throw ConfigError("conv layer " + std::to_string(l) + " has zero width");
        if (convs[l].max_pool) {
            if (l + 1 == convs.size()) throw ConfigError("last conv layer feeds global pooling, not max pooling");
            if (h % 2 || w % 2) throw ConfigError("max pool on odd extent at layer " + std::to_string(l));
            h /= 2;
            w /= 2;
        }
    }
}

int ModelSpec::layer_in_channels(int layer) const {
    return layer == 0 ? in_channels : convs.at(layer - 1).out_channels;
}

int ModelSpec::layer_height(int layer) const {
    int h = height;
    for (int l = 0; l < layer; ++l)
        if (convs[l].max_pool) h /= 2;
    return h;
}

int ModelSpec::layer_width(int layer) const {
    int w = width;
    for (int l = 0; l < layer; ++l)
        if (convs[l].max_pool) w /= 2;
    return w;
}

int ModelSpec::filter_count() const { return filter_offset(layer_count()); }

int ModelSpec::filter_offset(int layer) const {
    int n = 0;
    for (int l = 0; l < layer; ++l) n += convs.at(l).out_channels;
    return n;
}

std::vector<FilterRef> ModelSpec::filter_registry() const {
    std::vector<FilterRef> out;
    for (int l = 0; l < layer_count(); ++l)
        for (int c = 0; c < convs[l].out_channels; ++c) out.push_back({l, c});
    return out;
}

std::size_t ModelSpec::layer_weight_count(int layer) const {
    return static_cast<std::size_t>(layer_out_channels(layer)) * layer_in_channels(layer) * kernel_size * kernel_size;
}

std::size_t ModelSpec::conv_weight_count() const { return conv_weight_offset(layer_count()); }

std::size_t ModelSpec::conv_weight_offset(int layer) const {
    std::size_t n = 0;
    for (int l = 0; l < layer; ++l) n += layer_weight_count(l);
    return n;
}

std::string ModelSpec::describe() const {
    std::string out = "convnet in=" + std::to_string(in_channels) + "x" + std::to_string(height) + "x" +
                      std::to_string(width) + " convs=";
    for (std::size_t l = 0; l < convs.size(); ++l) {
        if (l) out += ",";
        out += std::to_string(convs[l].out_channels) + (convs[l].max_pool ? "p" : "");
    }
    return out + " gap fc=" + std::to_string(num_classes);
}

ParameterStore build_model(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    ParameterStore store;
    auto normal_tensor = [&rng](std::vector<int> shape, double stddev) {
        Tensor t(std::move(shape));
        for (float& v : t.values()) v = static_cast<float>(rng.normal() * stddev);
        return t;
    };
    for (int l = 0; l < spec.layer_count(); ++l) {
        const int co = spec.layer_out_channels(l);
        const int ci = spec.layer_in_channels(l);
        const std::string idx = std::to_string(l);
        const double fan_in = ci * ModelSpec::kernel_size * ModelSpec::kernel_size;
        store.add("conv" + idx + ".weight", Role::ConvKernel,
                  normal_tensor({co, ci, ModelSpec::kernel_size, ModelSpec::kernel_size}, std::sqrt(2.0 / fan_in)));
        store.add("conv" + idx + ".bias", Role::ConvBias, Tensor({co}, 0.0f));
        store.add("bn" + idx + ".weight", Role::BnScale, Tensor({co}, 1.0f));
        store.add("bn" + idx + ".bias", Role::BnShift, Tensor({co}, 0.0f));
        store.add("bn" + idx + ".running_mean", Role::BnRunningMean, Tensor({co}, 0.0f));
        store.add("bn" + idx + ".running_var", Role::BnRunningVar, Tensor({co}, 1.0f));
    }
    store.add("fc.weight", Role::FcWeight,
              normal_tensor({spec.num_classes, spec.fc_in()}, std::sqrt(1.0 / spec.fc_in())));
    store.add("fc.bias", Role::FcBias, Tensor({spec.num_classes}, 0.0f));
    return store;
}

void check_store(const ModelSpec& spec, const ParameterStore& params) {
    const ParameterStore expected = build_model(spec, 0);
    if (params.size() != expected.size())
        throw ShapeError("store has " + std::to_string(params.size()) + " tensors, model expects " +
                         std::to_string(expected.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& got = params[i];
        const auto& want = expected[i];
        if (got.name != want.name || got.role != want.role || got.value.shape() != want.value.shape())
            throw ShapeError("tensor " + std::to_string(i) + " ('" + got.name + "' " + shape_string(got.value.shape()) +
                             ") does not match model ('" + want.name + "' " + shape_string(want.value.shape()) + ")");
        if (got.role == Role::BnRunningVar)
            for (float v : got.value.values())
                if (!(v > 0.0f)) throw NumericError("non-positive running variance in '" + got.name + "'");
    }
}

}  // namespace rnp
