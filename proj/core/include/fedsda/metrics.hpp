#pragma once

#include "fedsda/image.hpp"
#include "fedsda/stain.hpp"

#include <Eigen/Core>

#include <cstddef>
#include <span>

namespace fedsda::metrics {

/// Mean and unbiased covariance of a sample set.
struct GaussianSummary {
    std::size_t dim = 0;
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
    std::size_t n = 0;

    void validate() const;
};

/// samples: one row per observation.
GaussianSummary summarize(const Eigen::MatrixXd& samples);
/// Flattens each 3x2 matrix row-major to a 6-vector. Needs at least two matrices.
GaussianSummary summarize_stain_set(std::span<const stain::StainMatrix> matrices);

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).
///
/// The trace term is evaluated as Tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}) with both square
/// roots taken from symmetric eigendecompositions, eigenvalues clipped at zero.
double frechet_distance(const GaussianSummary& a, const GaussianSummary& b);

/// Convenience: FD between two stain-matrix sets.
double stain_set_fd(std::span<const stain::StainMatrix> a, std::span<const stain::StainMatrix> b);

/// Mean over RGB channels of the 1-Wasserstein distance between the two images'
/// intensity distributions, intensities scaled to [0, 1]. Image sizes may differ.
double wasserstein_1d(const RgbImage& a, const RgbImage& b);

// SSIM constants.
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;
inline constexpr double kSsimRange = 255.0;
inline constexpr double kSsimSigma = 1.5;
inline constexpr std::size_t kSsimWindow = 11;

/// Mean SSIM over every fully-contained 11x11 Gaussian window and the three channels.
/// Images must share dimensions and be at least 11x11.
double ssim(const RgbImage& a, const RgbImage& b);

} // namespace fedsda::metrics
