#include "fedsda/metrics.hpp"

#include "fedsda/error.hpp"

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <sstream>

namespace fedsda::metrics {

void GaussianSummary::validate() const {
    if (dim == 0 || static_cast<std::size_t>(mean.size()) != dim || static_cast<std::size_t>(cov.rows()) != dim ||
        static_cast<std::size_t>(cov.cols()) != dim)
        throw ValidationError("gaussian summary: inconsistent dimensions");
    if (n < 2) throw ValidationError("gaussian summary: need at least 2 samples");
    if (!mean.allFinite() || !cov.allFinite()) throw ValidationError("gaussian summary: non-finite statistics");
    if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, cov.cwiseAbs().maxCoeff()))
        throw ValidationError("gaussian summary: covariance is not symmetric");
}

GaussianSummary summarize(const Eigen::MatrixXd& samples) {
    const auto n = static_cast<std::size_t>(samples.rows());
    if (n < 2) throw ValidationError("summarize: need at least 2 samples, got " + std::to_string(n));
    const auto d = samples.cols();
    // Welford update, one pass.
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
    Eigen::MatrixXd m2 = Eigen::MatrixXd::Zero(d, d);
    for (Eigen::Index i = 0; i < samples.rows(); ++i) {
        const Eigen::VectorXd x = samples.row(i).transpose();
        const Eigen::VectorXd delta = x - mean;
        mean += delta / static_cast<double>(i + 1);
        m2 += delta * (x - mean).transpose();
    }
    GaussianSummary s;
    s.dim = static_cast<std::size_t>(d);
    s.mean = std::move(mean);
    s.cov = m2 / static_cast<double>(n - 1);
    s.cov = 0.5 * (s.cov + s.cov.transpose()).eval();
    s.n = n;
    return s;
}

GaussianSummary summarize_stain_set(std::span<const stain::StainMatrix> matrices) {
    if (matrices.size() < 2) throw ValidationError("summarize_stain_set: need at least 2 matrices, got " + std::to_string(matrices.size()));
    Eigen::MatrixXd x(static_cast<Eigen::Index>(matrices.size()), 6);
    for (std::size_t i = 0; i < matrices.size(); ++i) {
        const auto f = matrices[i].flatten();
        for (int j = 0; j < 6; ++j) x(static_cast<Eigen::Index>(i), j) = f[static_cast<std::size_t>(j)];
    }
    return summarize(x);
}

namespace {

struct PsdRoot {
    Eigen::MatrixXd root;
    double cond;
};

PsdRoot psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
    const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
    const Eigen::VectorXd ev = es.eigenvalues();
    const double hi = ev.cwiseAbs().maxCoeff();
    const double lo = ev.cwiseMax(0.0).minCoeff();
    const double cond = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
    if (es.info() != Eigen::Success || !ev.allFinite()) {
        std::ostringstream msg;
        msg << "matrix square root of " << what << " failed (condition number " << cond << ")";
        throw StageError("frechet-distance", msg.str());
    }
    const Eigen::VectorXd r = ev.cwiseMax(0.0).cwiseSqrt();
    return {es.eigenvectors() * r.asDiagonal() * es.eigenvectors().transpose(), cond};
}

} // namespace

double frechet_distance(const GaussianSummary& a, const GaussianSummary& b) {
    a.validate();
    b.validate();
    if (a.dim != b.dim) throw ValidationError("frechet_distance: dimension mismatch");
    const auto ra = psd_sqrt(a.cov, "first covariance");
    const Eigen::MatrixXd inner = ra.root * b.cov * ra.root;
    const auto rb = psd_sqrt(inner, "covariance product");
    const double tr_sqrt = rb.root.trace();
    if (!std::isfinite(tr_sqrt)) {
        std::ostringstream msg;
        msg << "non-finite trace of covariance product root (condition number " << rb.cond << ")";
        throw StageError("frechet-distance", msg.str());
    }
    const double fd = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    return std::max(0.0, fd);
}

double stain_set_fd(std::span<const stain::StainMatrix> a, std::span<const stain::StainMatrix> b) {
    return frechet_distance(summarize_stain_set(a), summarize_stain_set(b));
}

double wasserstein_1d(const RgbImage& a, const RgbImage& b) {
    a.validate();
    b.validate();
    double total = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
        std::array<double, 256> ha{}, hb{};
        for (std::size_t i = 0; i < a.pixel_count(); ++i) ha[a.pixels[i * 3 + c]] += 1.0;
        for (std::size_t i = 0; i < b.pixel_count(); ++i) hb[b.pixels[i * 3 + c]] += 1.0;
        const double na = static_cast<double>(a.pixel_count()), nb = static_cast<double>(b.pixel_count());
        // Both CDFs are step functions on the grid k/255; integrate |Fa - Fb| exactly.
        double ca = 0.0, cb = 0.0, area = 0.0;
        for (std::size_t k = 0; k < 255; ++k) {
            ca += ha[k];
            cb += hb[k];
            area += std::abs(ca / na - cb / nb);
        }
        total += area / 255.0;
    }
    return total / 3.0;
}

double ssim(const RgbImage& a, const RgbImage& b) {
    a.validate();
    b.validate();
    if (a.width != b.width || a.height != b.height) throw ValidationError("ssim: image dimensions differ");
    constexpr std::size_t win = kSsimWindow;
    if (a.width < win || a.height < win) throw ValidationError("ssim: images must be at least 11x11");

    std::array<double, win> g{};
    double gs = 0.0;
    for (std::size_t i = 0; i < win; ++i) {
        const double d = static_cast<double>(i) - static_cast<double>(win / 2);
        g[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
        gs += g[i];
    }
    for (auto& v : g) v /= gs;

    const std::size_t W = a.width, H = a.height, ow = W - win + 1, oh = H - win + 1;
    const double C1 = (kSsimK1 * kSsimRange) * (kSsimK1 * kSsimRange);
    const double C2 = (kSsimK2 * kSsimRange) * (kSsimK2 * kSsimRange);

    // Valid-mode separable Gaussian filter of a W x H plane.
    auto filter = [&](const std::vector<double>& src) {
        std::vector<double> tmp(ow * H), out(ow * oh);
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                double s = 0.0;
                for (std::size_t k = 0; k < win; ++k) s += g[k] * src[y * W + x + k];
                tmp[y * ow + x] = s;
            }
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                double s = 0.0;
                for (std::size_t k = 0; k < win; ++k) s += g[k] * tmp[(y + k) * ow + x];
                out[y * ow + x] = s;
            }
        return out;
    };

    double total = 0.0;
    std::vector<double> xa(W * H), xb(W * H), xaa(W * H), xbb(W * H), xab(W * H);
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < W * H; ++i) {
            xa[i] = a.pixels[i * 3 + c];
            xb[i] = b.pixels[i * 3 + c];
            xaa[i] = xa[i] * xa[i];
            xbb[i] = xb[i] * xb[i];
            xab[i] = xa[i] * xb[i];
        }
        const auto ma = filter(xa), mb = filter(xb), saa = filter(xaa), sbb = filter(xbb), sab = filter(xab);
        double chan = 0.0;
        for (std::size_t i = 0; i < ow * oh; ++i) {
            const double va = saa[i] - ma[i] * ma[i];
            const double vb = sbb[i] - mb[i] * mb[i];
            const double cov = sab[i] - ma[i] * mb[i];
            const double num = (2.0 * ma[i] * mb[i] + C1) * (2.0 * cov + C2);
            const double den = (ma[i] * ma[i] + mb[i] * mb[i] + C1) * (va + vb + C2);
            chan += num / den;
        }
        total += chan / static_cast<double>(ow * oh);
    }
    return total / 3.0;
}

} // namespace fedsda::metrics
