#include "rnp/mask.hpp"

#include <algorithm>

namespace rnp {

std::string_view to_string(Granularity g) {
    return g == Granularity::Filter ? "filter" : "neuron";
}

Granularity granularity_from_string(std::string_view text) {
    if (text == "filter") return Granularity::Filter;
    if (text == "neuron") return Granularity::Neuron;
    throw ConfigError("unknown mask granularity '" + std::string(text) + "'");
}

UnitMask::UnitMask(Granularity granularity, std::vector<std::size_t> layer_offsets,
                   std::vector<float> values)
    : granularity_(granularity), layer_offsets_(std::move(layer_offsets)), values_(std::move(values)) {
    if (layer_offsets_.size() < 2 || layer_offsets_.front() != 0 ||
        layer_offsets_.back() != values_.size() ||
        !std::is_sorted(layer_offsets_.begin(), layer_offsets_.end())) {
        throw ShapeError("inconsistent mask layer map");
    }
}

UnitMask UnitMask::ones(const ModelSpec& spec, Granularity granularity) {
    std::vector<std::size_t> offsets{0};
    for (int l = 0; l < spec.layer_count(); ++l) {
        const std::size_t width = granularity == Granularity::Filter
                                      ? static_cast<std::size_t>(spec.layer_out_channels(l))
                                      : spec.layer_weight_count(l);
        offsets.push_back(offsets.back() + width);
    }
    std::vector<float> values(offsets.back(), 1.0f);
    return UnitMask(granularity, std::move(offsets), std::move(values));
}

std::span<float> UnitMask::layer(int l) {
    return std::span<float>(values_).subspan(layer_offsets_.at(l), layer_offsets_.at(l + 1) - layer_offsets_[l]);
}

std::span<const float> UnitMask::layer(int l) const {
    return std::span<const float>(values_).subspan(layer_offsets_.at(l),
                                                   layer_offsets_.at(l + 1) - layer_offsets_[l]);
}

void UnitMask::clip_unit_interval() {
    for (float& v : values_) v = std::clamp(v, 0.0f, 1.0f);
}

bool UnitMask::within_unit_interval() const {
    return std::all_of(values_.begin(), values_.end(), [](float v) { return v >= 0.0f && v <= 1.0f; });
}

void UnitMask::check_layout(const ModelSpec& spec) const {
    const UnitMask expected = ones(spec, granularity_);
    if (expected.layer_offsets_ != layer_offsets_) {
        throw ShapeError(std::string("mask layout does not match model (") + std::string(to_string(granularity_)) +
                         " granularity, " + std::to_string(values_.size()) + " values, expected " +
                         std::to_string(expected.values_.size()) + ")");
    }
}

}  // namespace rnp
