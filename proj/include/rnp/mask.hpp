#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "rnp/model.hpp"

namespace rnp {

enum class Granularity { Filter, Neuron };

std::string_view to_string(Granularity g);
Granularity granularity_from_string(std::string_view text);

// Multiplicative mask over conv units. Filter granularity holds one value per
// registry entry; neuron granularity one value per conv kernel weight. Values
// are laid out layer by layer in registry order.
class UnitMask {
public:
    UnitMask() = default;
    UnitMask(Granularity granularity, std::vector<std::size_t> layer_offsets, std::vector<float> values);

    static UnitMask ones(const ModelSpec& spec, Granularity granularity);

    Granularity granularity() const { return granularity_; }
    std::size_t size() const { return values_.size(); }
    int layer_count() const { return static_cast<int>(layer_offsets_.size()) - 1; }
    const std::vector<std::size_t>& layer_offsets() const { return layer_offsets_; }

    std::span<float> values() { return values_; }
    std::span<const float> values() const { return values_; }
    std::span<float> layer(int l);
    std::span<const float> layer(int l) const;

    void clip_unit_interval();
    bool within_unit_interval() const;

    // Throws ShapeError if the layout does not belong to spec.
    void check_layout(const ModelSpec& spec) const;

    friend bool operator==(const UnitMask&, const UnitMask&) = default;

private:
    Granularity granularity_ = Granularity::Filter;
    std::vector<std::size_t> layer_offsets_;
    std::vector<float> values_;
};

}  // namespace rnp
