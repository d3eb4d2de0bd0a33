#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rnp {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor or layout shapes disagree.
class ShapeError : public Error {
public:
    using Error::Error;
};

// NaN/Inf produced by a computation.
class NumericError : public Error {
public:
    using Error::Error;
};

// Malformed file on disk.
class FormatError : public Error {
public:
    using Error::Error;
};

// Invalid configuration or argument.
class ConfigError : public Error {
public:
    using Error::Error;
};

std::size_t shape_volume(std::span<const int> shape);
std::string shape_string(std::span<const int> shape);

// Dense row-major float tensor.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, float fill = 0.0f);
    Tensor(std::vector<int> shape, std::vector<float> values);

    const std::vector<int>& shape() const { return shape_; }
    int dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }

    std::span<float> values() { return values_; }
    std::span<const float> values() const { return values_; }
    float* data() { return values_.data(); }
    const float* data() const { return values_.data(); }

    float& operator[](std::size_t i) { return values_[i]; }
    float operator[](std::size_t i) const { return values_[i]; }

    bool all_finite() const;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    std::vector<int> shape_;
    std::vector<float> values_;
};

}  // namespace rnp
