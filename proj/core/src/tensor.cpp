#include "fedsda/tensor.hpp"

#include "fedsda/error.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <string>

namespace fedsda::nn {

std::size_t shape_size(const Shape& shape) noexcept {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_size(shape), fill) {}

Tensor::Tensor(Shape s, std::span<const double> values) : shape(std::move(s)), data(values.begin(), values.end()) {
    if (shape_size(shape) != data.size()) {
        throw ValidationError("tensor: shape " + shape_string(shape) + " does not match " +
                              std::to_string(data.size()) + " values");
    }
}

bool Tensor::all_finite() const noexcept {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

void require_finite(std::span<const double> values, std::string_view what) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw ValidationError(std::string(what) + ": non-finite value at index " + std::to_string(i));
        }
    }
}

std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

} // namespace fedsda::nn
