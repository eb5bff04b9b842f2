#include "fedsda/synth.hpp"

#include "fedsda/config.hpp"
#include "fedsda/png_io.hpp"
#include "fedsda/stain_csv.hpp"

#include <cmath>
#include <numbers>

namespace fedsda::io {

using stain::StainMatrix;

SyntheticSpec SyntheticSpec::two_client_default() {
    SyntheticSpec s;
    s.clients = 2;
    s.cluster_means = default_means(2);
    return s;
}

std::vector<std::array<double, 6>> SyntheticSpec::default_means(std::size_t k) {
    // Row-major 3x2: (H_r, E_r, H_g, E_g, H_b, E_b).
    constexpr std::array<double, 6> a{0.65, 0.07, 0.70, 0.99, 0.29, 0.11};
    constexpr std::array<double, 6> b{0.82, 0.30, 0.50, 0.88, 0.27, 0.37};
    std::vector<std::array<double, 6>> out;
    for (std::size_t i = 0; i < k; ++i) {
        const double t = k == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(k - 1);
        std::array<double, 6> m{};
        for (std::size_t j = 0; j < 6; ++j) m[j] = (1.0 - t) * a[j] + t * b[j];
        out.push_back(m);
    }
    return out;
}

void SyntheticSpec::validate() const {
    if (clients == 0) throw ValidationError("synthetic spec: need at least one client");
    if (cluster_means.size() != clients) throw ValidationError("synthetic spec: one cluster mean per client required");
    if (!(cluster_std >= 0.0)) throw ValidationError("synthetic spec: cluster_std must be >= 0");
    if (width == 0 || height == 0) throw ValidationError("synthetic spec: image dimensions must be positive");
    if (!(smoothness > 0.0)) throw ValidationError("synthetic spec: smoothness must be positive");
    if (!(I0 > 0.0)) throw ValidationError("synthetic spec: I0 must be positive");
    for (const auto& m : cluster_means) {
        auto sm = StainMatrix::project(StainMatrix::from_flat(m).w);
        if (!sm.is_canonical()) throw ValidationError("synthetic spec: cluster mean is not in canonical (H, E) order");
    }
}

StainMatrix draw_stain_matrix(const std::array<double, 6>& mean, double stddev, Rng& rng) {
    std::array<double, 6> v = mean;
    for (auto& x : v) x += stddev * standard_normal(rng);
    StainMatrix m = StainMatrix::project(StainMatrix::from_flat(v).w);
    m.canonicalize();
    return m;
}

std::vector<StainMatrix> draw_stain_matrices(const SyntheticSpec& spec, std::size_t client_index, std::size_t count, Rng& rng) {
    const auto& mean = spec.cluster_means.at(client_index);
    std::vector<StainMatrix> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(draw_stain_matrix(mean, spec.cluster_std, rng));
    return out;
}

namespace {

struct Blob {
    double x, y, r, a;
};

// Sum of Gaussian blobs covering roughly `coverage` of the image area.
std::vector<double> blob_field(std::size_t w, std::size_t h, double radius, double coverage, double amp_lo, double amp_hi, Rng& rng) {
    std::uniform_real_distribution<double> ux(0.0, static_cast<double>(w));
    std::uniform_real_distribution<double> uy(0.0, static_cast<double>(h));
    std::uniform_real_distribution<double> ua(amp_lo, amp_hi);
    std::uniform_real_distribution<double> ur(0.7, 1.3);
    const double area = static_cast<double>(w * h);
    const auto count = std::max<std::size_t>(2, static_cast<std::size_t>(std::round(coverage * area / (std::numbers::pi * radius * radius))));
    std::vector<Blob> blobs(count);
    for (auto& b : blobs) {
        b.x = ux(rng);
        b.y = uy(rng);
        b.r = radius * ur(rng);
        b.a = ua(rng);
    }
    std::vector<double> field(w * h, 0.0);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double s = 0.0;
            for (const auto& b : blobs) {
                const double dx = static_cast<double>(x) - b.x, dy = static_cast<double>(y) - b.y;
                s += b.a * std::exp(-(dx * dx + dy * dy) / (2.0 * b.r * b.r));
            }
            field[y * w + x] = s;
        }
    return field;
}

SyntheticImage render(const StainMatrix& w, std::size_t width, std::size_t height, double I0, stain::DensityMap dm) {
    SyntheticImage out;
    out.w = w;
    out.od = w.w * dm.h;
    out.h = std::move(dm);
    out.image = RgbImage(width, height);
    out.image.I0 = I0;
    for (Eigen::Index p = 0; p < out.od.cols(); ++p)
        for (Eigen::Index c = 0; c < 3; ++c) {
            const double v = std::round(I0 * std::exp(-out.od(c, p)));
            out.image.pixels[static_cast<std::size_t>(p * 3 + c)] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
        }
    return out;
}

} // namespace

SyntheticImage synthesize_image(const StainMatrix& w, std::size_t width, std::size_t height, double smoothness, double I0, Rng& rng) {
    // Hematoxylin: compact nuclei; eosin: broad cytoplasm with gaps for background.
    const auto hem = blob_field(width, height, 0.6 * smoothness, 0.5, 0.8, 1.6, rng);
    const auto eos = blob_field(width, height, 1.6 * smoothness, 0.9, 0.4, 0.9, rng);
    stain::DensityMap dm;
    dm.width = width;
    dm.height = height;
    dm.h.resize(2, static_cast<Eigen::Index>(width * height));
    for (std::size_t i = 0; i < width * height; ++i) {
        const double hh = 1.3 * std::max(0.0, hem[i] - 0.35);
        // Nuclei displace cytoplasm, so dense hematoxylin leaves no eosin behind.
        dm.h(0, static_cast<Eigen::Index>(i)) = hh;
        dm.h(1, static_cast<Eigen::Index>(i)) = 0.9 * std::max(0.0, eos[i] - 0.30) * std::max(0.0, 1.0 - hh / 0.5);
    }
    return render(w, width, height, I0, std::move(dm));
}

SyntheticImage synthesize_single_stain_image(const StainMatrix& w, std::size_t width, std::size_t height, double smoothness, double I0, Rng& rng) {
    const auto hem = blob_field(width, height, smoothness, 0.8, 0.6, 1.4, rng);
    stain::DensityMap dm;
    dm.width = width;
    dm.height = height;
    dm.h = Eigen::Matrix<double, 2, Eigen::Dynamic>::Zero(2, static_cast<Eigen::Index>(width * height));
    for (std::size_t i = 0; i < width * height; ++i) dm.h(0, static_cast<Eigen::Index>(i)) = 1.2 * std::max(0.0, hem[i] - 0.2);
    return render(w, width, height, I0, std::move(dm));
}

SyntheticCorpus generate_corpus(const SyntheticSpec& spec, std::uint64_t seed) {
    spec.validate();
    SyntheticCorpus corpus;
    for (std::size_t k = 0; k < spec.clients; ++k) {
        Rng rng(derive_seed(seed, {0x5f, k + 1}));
        std::vector<SyntheticImage> images;
        images.reserve(spec.images_per_client);
        for (std::size_t i = 0; i < spec.images_per_client; ++i) {
            const auto w = draw_stain_matrix(spec.cluster_means[k], spec.cluster_std, rng);
            images.push_back(synthesize_image(w, spec.width, spec.height, spec.smoothness, spec.I0, rng));
        }
        corpus.clients.push_back(std::move(images));
    }
    return corpus;
}

FederationManifest generate_synthetic_federation(const SyntheticSpec& spec, std::uint64_t seed, const std::filesystem::path& out_dir) {
    const auto corpus = generate_corpus(spec, seed);
    FederationManifest manifest;
    manifest.width = spec.width;
    manifest.height = spec.height;
    manifest.seed = seed;
    std::filesystem::create_directories(out_dir);
    for (std::size_t k = 0; k < corpus.clients.size(); ++k) {
        const std::string name = "client_" + std::to_string(k + 1);
        const auto dir = out_dir / name;
        std::filesystem::create_directories(dir);
        std::vector<StainRecord> truth;
        for (std::size_t i = 0; i < corpus.clients[k].size(); ++i) {
            char fname[32];
            std::snprintf(fname, sizeof fname, "img_%04zu.png", i);
            write_png(dir / fname, corpus.clients[k][i].image);
            truth.push_back({fname, corpus.clients[k][i].w});
        }
        write_stain_csv(dir / "ground_truth.csv", truth);
        manifest.clients.push_back({static_cast<int>(k + 1), std::filesystem::path(name), std::nullopt});
    }
    write_manifest(out_dir / "manifest.json", manifest);
    return manifest;
}

} // namespace fedsda::io
