#pragma once

#include <cstddef>
#include <new>
#include <span>
#include <string_view>
#include <vector>

namespace fedsda::nn {

using Shape = std::vector<std::size_t>;

// Eigen picks its vectorized loop peeling from the runtime address of the data, which
// changes summation order. Cache-line aligned storage keeps results bit-reproducible.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t shape_size(const Shape& shape) noexcept;

/// Dense row-major tensor of doubles. Rank 0 (empty shape) is a scalar.
struct Tensor {
    Shape shape;
    Buffer data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0);
    Tensor(Shape s, std::span<const double> values);
    Tensor(Shape s, const std::vector<double>& values) : Tensor(std::move(s), std::span<const double>(values)) {}

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    std::size_t size() const noexcept { return data.size(); }
    std::size_t rank() const noexcept { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }

    double& operator[](std::size_t i) noexcept { return data[i]; }
    double operator[](std::size_t i) const noexcept { return data[i]; }

    double& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

    bool same_shape(const Tensor& o) const noexcept { return shape == o.shape; }
    bool all_finite() const noexcept;
    std::vector<double> values() const { return {data.begin(), data.end()}; }

    bool operator==(const Tensor&) const = default;
};

/// Throws ValidationError naming `what` when any value is NaN or infinite.
void require_finite(std::span<const double> values, std::string_view what);

std::string shape_string(const Shape& shape);

} // namespace fedsda::nn
