#include "support.hpp"

#include "fedsda/error.hpp"
#include "fedsda/metrics.hpp"

#include <doctest.h>

#include <Eigen/QR>

#include <array>
#include <cmath>

using namespace fedsda;
using namespace fedsda::metrics;

namespace {

GaussianSummary random_summary(std::size_t dim, Rng& rng) {
    Eigen::MatrixXd x(3 * dim, dim);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = standard_normal(rng);
    Eigen::MatrixXd mix(dim, dim);
    for (Eigen::Index i = 0; i < mix.size(); ++i) mix.data()[i] = standard_normal(rng);
    x = x * mix;
    x.rowwise() += Eigen::RowVectorXd::Constant(static_cast<Eigen::Index>(dim), standard_normal(rng));
    return summarize(x);
}

GaussianSummary one_dim(double mean, double var) {
    GaussianSummary s;
    s.dim = 1;
    s.n = 100;
    s.mean = Eigen::VectorXd::Constant(1, mean);
    s.cov = Eigen::MatrixXd::Constant(1, 1, var);
    return s;
}

// Area between the two empirical CDFs of one channel, integrated bin by bin over [0, 1].
double cdf_area(const RgbImage& a, const RgbImage& b, std::size_t c) {
    std::array<double, 256> ha{}, hb{};
    for (std::size_t i = 0; i < a.pixel_count(); ++i) ha[a.pixels[i * 3 + c]] += 1.0;
    for (std::size_t i = 0; i < b.pixel_count(); ++i) hb[b.pixels[i * 3 + c]] += 1.0;
    double fa = 0.0, fb = 0.0, area = 0.0;
    for (std::size_t k = 0; k < 255; ++k) {
        fa += ha[k] / static_cast<double>(a.pixel_count());
        fb += hb[k] / static_cast<double>(b.pixel_count());
        area += std::abs(fa - fb) / 255.0;
    }
    return area;
}

double wd_oracle(const RgbImage& a, const RgbImage& b) {
    return (cdf_area(a, b, 0) + cdf_area(a, b, 1) + cdf_area(a, b, 2)) / 3.0;
}

RgbImage checkerboard(std::size_t n) {
    RgbImage img(n, n);
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x)
            for (std::size_t c = 0; c < 3; ++c) img.at(x, y, c) = ((x + y) % 2 == 0) ? 230 : 20;
    return img;
}

} // namespace

TEST_SUITE("frechet distance") {

TEST_CASE("distance to itself is zero") {
    Rng rng(1);
    for (std::size_t dim : {1u, 3u, 6u}) {
        const auto s = random_summary(dim, rng);
        CHECK(std::abs(frechet_distance(s, s)) < 1e-8);
    }
}

TEST_CASE("one-dimensional closed form") {
    CHECK(frechet_distance(one_dim(0, 1), one_dim(3, 1)) == doctest::Approx(9.0).epsilon(1e-12));
    // (mu diff)^2 + (sigma diff)^2
    CHECK(frechet_distance(one_dim(1, 4), one_dim(-1, 9)) == doctest::Approx(4.0 + 1.0).epsilon(1e-12));
}

TEST_CASE("symmetric and non-negative") {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const auto a = random_summary(6, rng), b = random_summary(6, rng);
        const double ab = frechet_distance(a, b), ba = frechet_distance(b, a);
        CHECK(ab >= 0.0);
        CHECK(std::abs(ab - ba) <= 1e-10 * std::max(1.0, ab));
    }
}

TEST_CASE("invariant under a shared rotation") {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const auto a = random_summary(6, rng), b = random_summary(6, rng);
        Eigen::MatrixXd m(6, 6);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = standard_normal(rng);
        const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(m).householderQ();
        auto ra = a, rb = b;
        ra.mean = q * a.mean;
        rb.mean = q * b.mean;
        ra.cov = q * a.cov * q.transpose();
        rb.cov = q * b.cov * q.transpose();
        ra.cov = 0.5 * (ra.cov + ra.cov.transpose()).eval();
        rb.cov = 0.5 * (rb.cov + rb.cov.transpose()).eval();
        const double d = frechet_distance(a, b);
        CHECK(std::abs(frechet_distance(ra, rb) - d) <= 1e-8 * std::max(1.0, d));
    }
}

TEST_CASE("dimension mismatch is rejected") {
    Rng rng(4);
    CHECK_THROWS_AS(frechet_distance(random_summary(2, rng), random_summary(3, rng)), ValidationError);
}

} // TEST_SUITE

TEST_SUITE("stain set summary") {

TEST_CASE("identical matrices have zero covariance") {
    const std::vector<stain::StainMatrix> same(5, stain::StainMatrix::reference_he());
    const auto s = summarize_stain_set(same);
    CHECK(s.dim == 6);
    CHECK(s.n == 5);
    CHECK(s.cov.cwiseAbs().maxCoeff() < 1e-15);
    CHECK(stain_set_fd(same, same) == doctest::Approx(0.0).scale(1.0));
}

TEST_CASE("mean of two matrices is their midpoint") {
    stain::StainMatrix a, b;
    a.w << 1, 0, 0, 1, 0, 0;
    b.w << 0, 0, 1, 0, 0, 1;
    const std::vector<stain::StainMatrix> pair{a, b};
    const auto s = summarize_stain_set(pair);
    const auto fa = a.flatten(), fb = b.flatten();
    for (std::size_t i = 0; i < 6; ++i) CHECK(s.mean[static_cast<Eigen::Index>(i)] == 0.5 * (fa[i] + fb[i]));
}

TEST_CASE("matches a two-pass computation") {
    Rng rng(5);
    std::vector<stain::StainMatrix> set;
    for (int i = 0; i < 50; ++i) {
        stain::StainBasis raw;
        for (Eigen::Index k = 0; k < 6; ++k) raw.data()[k] = std::uniform_real_distribution<double>(0.1, 1.1)(rng);
        auto w = stain::StainMatrix::project(raw);
        w.canonicalize();
        set.push_back(w);
    }
    const auto s = summarize_stain_set(set);
    std::array<double, 6> mean{};
    for (const auto& w : set) {
        const auto f = w.flatten();
        for (std::size_t i = 0; i < 6; ++i) mean[i] += f[i] / 50.0;
    }
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(std::abs(s.mean[static_cast<Eigen::Index>(i)] - mean[i]) < 1e-12);
        for (std::size_t j = 0; j < 6; ++j) {
            double acc = 0.0;
            for (const auto& w : set) {
                const auto f = w.flatten();
                acc += (f[i] - mean[i]) * (f[j] - mean[j]);
            }
            CHECK(std::abs(s.cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - acc / 49.0) < 1e-12);
        }
    }
}

TEST_CASE("fewer than two matrices is an error") {
    const std::vector<stain::StainMatrix> one{stain::StainMatrix::reference_he()};
    CHECK_THROWS_AS(summarize_stain_set(one), ValidationError);
    CHECK_THROWS_AS(summarize_stain_set(std::span<const stain::StainMatrix>{}), ValidationError);
}

} // TEST_SUITE

TEST_SUITE("wasserstein") {

TEST_CASE("identical images and endpoint masses") {
    Rng rng(6);
    const auto x = test::random_image(20, 10, rng);
    CHECK(wasserstein_1d(x, x) == 0.0);
    CHECK(wasserstein_1d(RgbImage(8, 8, 0), RgbImage(8, 8, 255)) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("agrees with the CDF area, including different sizes") {
    Rng rng(7);
    for (auto [wa, ha, wb, hb] : {std::array<std::size_t, 4>{16, 16, 16, 16}, {13, 7, 9, 11}, {1, 1, 30, 20}}) {
        const auto a = test::random_image(wa, ha, rng), b = test::random_image(wb, hb, rng);
        CHECK(std::abs(wasserstein_1d(a, b) - wd_oracle(a, b)) < 1e-9);
    }
}

TEST_CASE("symmetry and triangle inequality") {
    Rng rng(8);
    for (int trial = 0; trial < 25; ++trial) {
        const auto a = test::random_image(9, 9, rng), b = test::random_image(12, 5, rng), c = test::random_image(7, 7, rng);
        const double ab = wasserstein_1d(a, b), bc = wasserstein_1d(b, c), ac = wasserstein_1d(a, c);
        CHECK(std::abs(ab - wasserstein_1d(b, a)) < 1e-15);
        CHECK(ac <= ab + bc + 1e-12);
    }
}

} // TEST_SUITE

TEST_SUITE("ssim") {

TEST_CASE("an image is perfectly similar to itself") {
    Rng rng(9);
    const auto x = test::random_image(32, 24, rng);
    CHECK(ssim(x, x) == 1.0);
    CHECK(ssim(RgbImage(16, 16, 0), RgbImage(16, 16, 0)) == 1.0);
}

TEST_CASE("inverting a checkerboard gives negative similarity") {
    const auto x = checkerboard(32);
    RgbImage inv = x;
    for (auto& v : inv.pixels) v = static_cast<std::uint8_t>(255 - v);
    const double s = ssim(x, inv);
    CHECK(s < 0.0);
    CHECK(s >= -1.0);
}

TEST_CASE("values stay in range and fall with noise") {
    Rng rng(10);
    const auto x = test::random_image(24, 24, rng);
    auto noisy = x;
    for (auto& v : noisy.pixels) v = static_cast<std::uint8_t>(std::clamp(int(v) + int(rng() % 21) - 10, 0, 255));
    const auto other = test::random_image(24, 24, rng);
    const double near = ssim(x, noisy), far = ssim(x, other);
    CHECK(near < 1.0);
    CHECK(far < near);
    CHECK(far >= -1.0);
}

TEST_CASE("shape requirements") {
    Rng rng(11);
    CHECK_THROWS_AS(ssim(test::random_image(16, 16, rng), test::random_image(16, 15, rng)), ValidationError);
    CHECK_THROWS_AS(ssim(test::random_image(10, 16, rng), test::random_image(10, 16, rng)), ValidationError);
}

} // TEST_SUITE
