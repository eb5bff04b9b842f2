#pragma once

#include "fedsda/error.hpp"
#include "fedsda/image.hpp"

#include <Eigen/Core>

#include <array>
#include <optional>
#include <cstddef>
#include <span>
#include <vector>

namespace fedsda::stain {

/// Number of stains (hematoxylin, eosin).
inline constexpr std::size_t kStains = 2;
/// Pixels whose OD channel sum is below this are treated as background in the basis fit.
inline constexpr double kBackgroundOd = 0.15;

using StainBasis = Eigen::Matrix<double, 3, 2>;
using OdMatrix = Eigen::Matrix<double, 3, Eigen::Dynamic>;

/// 3x2 non-negative chromatic basis with unit-norm columns in canonical order
/// (hematoxylin-like column first).
struct StainMatrix {
    StainBasis w = StainBasis::Zero();

    /// Row-major flattening (w11, w12, w21, w22, w31, w32).
    std::array<double, 6> flatten() const;
    static StainMatrix from_flat(std::span<const double> row_major);

    /// Clamps negatives to zero and rescales each column to unit norm. Throws if a
    /// column is entirely non-positive. Does not reorder columns.
    static StainMatrix project(const StainBasis& raw);

    /// Unit-norm H&E optical-density reference, H = (0.65, 0.70, 0.29), E = (0.07, 0.99, 0.11).
    static StainMatrix reference_he();

    /// Swaps columns into canonical order. Returns true when a swap happened.
    bool canonicalize();
    bool is_canonical() const;

    bool is_valid(double tol = 1e-9) const;
    void validate(double tol = 1e-9) const;

    bool operator==(const StainMatrix& o) const { return w == o.w; }
};

/// Per-pixel stain concentrations, 2 x N, N = width * height.
struct DensityMap {
    std::size_t width = 0;
    std::size_t height = 0;
    Eigen::Matrix<double, 2, Eigen::Dynamic> h;

    std::size_t cols() const noexcept { return static_cast<std::size_t>(h.cols()); }
    void validate() const;

    bool operator==(const DensityMap& o) const { return width == o.width && height == o.height && h == o.h; }
};

class DegenerateImageError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// od = -log(clamp(x, 1, I0) / I0), one column per pixel.
OdMatrix to_optical_density(const RgbImage& img);

struct SeparationOptions {
    double lambda = 0.01;
    std::size_t max_iters = 200;
    double tol = 1e-6;                   ///< relative objective change for convergence
    double background_od = kBackgroundOd;
    std::size_t w_inner_steps = 50;      ///< projected-gradient steps per w-step
    /// Starting basis. When unset, runs from the H&E reference and from a data-derived
    /// basis are both carried out and the one with the lower objective is returned.
    std::optional<StainMatrix> initial_w;

    void validate() const;
};

struct SeparationResult {
    StainMatrix w;
    DensityMap h;
    std::vector<double> objective; ///< after initialization, then after every outer iteration
    std::size_t iterations = 0;
    bool converged = false;
    std::size_t foreground_pixels = 0;
};

/// 0.5 * ||od - w h||_F^2 + lambda * ||h||_1
double objective(const OdMatrix& od, const StainBasis& w, const Eigen::Matrix<double, 2, Eigen::Dynamic>& h, double lambda);

/// Sparse non-negative factorization of an image's optical density by alternating
/// minimization: per-pixel non-negative lasso solved exactly for h (two variables), projected
/// gradient plus column renormalization for w (accepted only when the objective does
/// not increase).
SeparationResult separate(const RgbImage& img, const SeparationOptions& opts = {});
SeparationResult separate_od(const OdMatrix& od, std::size_t width, std::size_t height, const SeparationOptions& opts = {});

/// x = clamp(round(I0 * exp(-w h)), 0, 255).
RgbImage reconstruct(const StainMatrix& w, const DensityMap& h, double I0 = 255.0);

} // namespace fedsda::stain
