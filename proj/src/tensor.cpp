#include "rnp/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>

namespace rnp {

std::size_t shape_volume(std::span<const int> shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_string(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_string(std::span<const int> shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

Tensor::Tensor(std::vector<int> shape, float fill)
    : shape_(std::move(shape)), values_(shape_volume(shape_), fill) {}

Tensor::Tensor(std::vector<int> shape, std::vector<float> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != shape_volume(shape_)) {
        throw ShapeError("tensor of shape " + shape_string(shape_) + " given " +
                         std::to_string(values_.size()) + " values");
    }
}

bool Tensor::all_finite() const {
    for (float v : values_)
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace rnp
