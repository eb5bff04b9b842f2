#include "support.hpp"

#include "fedsda/metrics.hpp"
#include "fedsda/stain.hpp"
#include "fedsda/synth.hpp"

#include <doctest.h>

#include <string>

using namespace fedsda;
using namespace fedsda::stain;

namespace {

double cosine(const Eigen::Vector3d& a, const Eigen::Vector3d& b) { return a.dot(b) / (a.norm() * b.norm()); }

io::SyntheticImage oracle_image(std::uint64_t seed, std::size_t client = 0) {
    const auto spec = io::SyntheticSpec::two_client_default();
    Rng rng(seed);
    const auto w = io::draw_stain_matrix(spec.cluster_means[client], spec.cluster_std, rng);
    return io::synthesize_image(w, 64, 64, spec.smoothness, 255.0, rng);
}

} // namespace

TEST_CASE("optical density of reference pixels") {
    RgbImage img(3, 1);
    for (std::size_t c = 0; c < 3; ++c) {
        img.at(0, 0, c) = 255;
        img.at(1, 0, c) = 94;
        img.at(2, 0, c) = 0;
    }
    const auto od = to_optical_density(img);
    for (int c = 0; c < 3; ++c) {
        CHECK(od(c, 0) == 0.0);
        CHECK(od(c, 1) == doctest::Approx(-std::log(94.0 / 255.0)).epsilon(1e-15));
        CHECK(od(c, 1) == doctest::Approx(0.9979).epsilon(1e-4));
        CHECK(od(c, 2) == doctest::Approx(std::log(255.0)).epsilon(1e-15));
        CHECK(od(c, 2) == doctest::Approx(5.5413).epsilon(1e-4));
    }
}

TEST_CASE("stain matrix helpers") {
    const auto ref = StainMatrix::reference_he();
    CHECK(ref.is_valid());
    CHECK(ref.w.col(0).norm() == doctest::Approx(1.0).epsilon(1e-15));

    StainBasis raw;
    raw << 0.1, 2.0, -0.5, 1.0, 0.3, 0.0;
    auto w = StainMatrix::project(raw);
    CHECK((w.w.array() >= 0.0).all());
    CHECK(w.w.col(0).norm() == doctest::Approx(1.0));
    CHECK(w.w.col(1).norm() == doctest::Approx(1.0));
    CHECK_FALSE(w.is_canonical());
    CHECK(w.canonicalize());
    CHECK(w.is_canonical());
    CHECK_FALSE(w.canonicalize());

    raw.col(1).setConstant(-1.0);
    CHECK_THROWS_AS(StainMatrix::project(raw), ValidationError);

    const auto flat = ref.flatten();
    CHECK(flat[0] == ref.w(0, 0));
    CHECK(flat[1] == ref.w(0, 1));
    CHECK(flat[5] == ref.w(2, 1));
    CHECK(StainMatrix::from_flat(flat) == ref);
}

TEST_CASE("canonical order breaks red-channel ties on green") {
    StainMatrix w;
    w.w << 0.6, 0.6, 0.3, 0.7, std::sqrt(0.55), std::sqrt(0.15);
    CHECK_FALSE(w.is_canonical());
    CHECK(w.canonicalize());
    CHECK(w.w(1, 0) == 0.7);
}

TEST_CASE("separation recovers the generating stain matrix") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        CAPTURE(seed);
        const auto truth = oracle_image(seed, seed % 2);
        const auto res = separate(truth.image);
        res.w.validate();
        res.h.validate();
        for (int c = 0; c < 2; ++c) CHECK(cosine(res.w.w.col(c), truth.w.w.col(c)) > 0.99);

        const OdMatrix od = to_optical_density(truth.image);
        const double od_err = (od - res.w.w * res.h.h).cwiseAbs().mean();
        CHECK(od_err < 0.02);
        CHECK(metrics::ssim(truth.image, reconstruct(res.w, res.h)) >= 0.99);
    }
}

TEST_CASE("objective never increases and is reported per iteration") {
    const auto truth = oracle_image(7);
    const auto res = separate(truth.image);
    REQUIRE(res.objective.size() == res.iterations + 1);
    for (std::size_t i = 1; i < res.objective.size(); ++i) CHECK(res.objective[i] <= res.objective[i - 1] * (1 + 1e-12));
    SeparationOptions opts;
    CHECK(res.objective.back() ==
          doctest::Approx(objective(to_optical_density(truth.image), res.w.w, res.h.h, opts.lambda)).epsilon(1e-12));
}

TEST_CASE("fixed starting basis also descends") {
    const auto truth = oracle_image(8);
    SeparationOptions opts;
    opts.initial_w = StainMatrix::reference_he();
    opts.max_iters = 30;
    const auto res = separate(truth.image, opts);
    CHECK(res.iterations <= 30);
    for (std::size_t i = 1; i < res.objective.size(); ++i) CHECK(res.objective[i] <= res.objective[i - 1] * (1 + 1e-12));
}

TEST_CASE("single-stain image leaves the second density row empty") {
    const auto spec = io::SyntheticSpec::two_client_default();
    Rng rng(9);
    const auto w = io::draw_stain_matrix(spec.cluster_means[0], 0.0, rng);
    const auto img = io::synthesize_single_stain_image(w, 64, 64, spec.smoothness, 255.0, rng);
    const auto exact = separate_od(img.od, 64, 64);
    CHECK(exact.h.h.row(0).sum() > 0.0);
    CHECK(exact.h.h.row(1).sum() < 1e-3 * exact.h.h.row(0).sum());
    // 8-bit rounding on dark pixels leaves OD residuals above lambda, some of which land on
    // the second column.
    const auto res = separate(img.image);
    CHECK(res.h.h.row(1).sum() < 5e-3 * res.h.h.row(0).sum());
}

TEST_CASE("blank images are rejected with the threshold named") {
    RgbImage white(16, 16, 255);
    try {
        separate(white);
        FAIL("expected DegenerateImageError");
    } catch (const DegenerateImageError& e) {
        CHECK(std::string(e.what()).find("0.15") != std::string::npos);
    }
}

TEST_CASE("separation option validation") {
    const auto truth = oracle_image(10);
    SeparationOptions opts;
    opts.lambda = -1.0;
    CHECK_THROWS_AS(separate(truth.image, opts), ValidationError);
    opts = {};
    opts.max_iters = 0;
    CHECK_THROWS_AS(separate(truth.image, opts), ValidationError);
}

TEST_CASE("separation is deterministic and non-negative") {
    const auto truth = oracle_image(11);
    const auto a = separate(truth.image);
    const auto b = separate(truth.image);
    CHECK(a.w == b.w);
    CHECK(a.h == b.h);
    CHECK((a.h.h.array() >= 0.0).all());
    CHECK((a.w.w.array() >= 0.0).all());
}

TEST_CASE("reconstruction") {
    DensityMap zero{4, 3, Eigen::Matrix<double, 2, Eigen::Dynamic>::Zero(2, 12)};
    const auto white = reconstruct(StainMatrix::reference_he(), zero);
    CHECK(white.width == 4);
    for (auto v : white.pixels) CHECK(v == 255);

    DensityMap bad{4, 4, Eigen::Matrix<double, 2, Eigen::Dynamic>::Zero(2, 12)};
    CHECK_THROWS_AS(reconstruct(StainMatrix::reference_he(), bad), ValidationError);
}

TEST_CASE("reconstruction depends only on the product w h") {
    const auto truth = oracle_image(12);
    const auto& w = truth.w;
    const auto& h = truth.h;
    // Scale columns of w by D, rows of h by D^-1, then re-normalize columns (which undoes D).
    const Eigen::Vector2d d(2.5, 0.4);
    StainBasis wd = w.w * d.asDiagonal();
    DensityMap hd = h;
    hd.h = d.cwiseInverse().asDiagonal() * h.h;
    const Eigen::Vector2d norms = wd.colwise().norm();
    StainMatrix wn;
    wn.w = wd * norms.cwiseInverse().asDiagonal();
    hd.h = norms.asDiagonal() * hd.h;
    CHECK((wn.w * hd.h - w.w * h.h).cwiseAbs().maxCoeff() < 1e-12);
    const auto a = reconstruct(wn, hd), b = reconstruct(w, h);
    std::size_t differing = 0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        CHECK(std::abs(int(a.pixels[i]) - int(b.pixels[i])) <= 1);
        differing += a.pixels[i] != b.pixels[i];
    }
    // Only values sitting exactly on a rounding boundary may flip.
    CHECK(differing <= a.pixels.size() / 1000);
}
