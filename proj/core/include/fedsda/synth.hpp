#pragma once

#include "fedsda/image.hpp"
#include "fedsda/rng.hpp"
#include "fedsda/stain.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace fedsda::io {

struct FederationManifest;

/// Desk-scale stand-in for a multi-site H&E corpus: every client has its own stain
/// cluster; images are rendered from smooth random density fields.
struct SyntheticSpec {
    std::size_t clients = 2;
    /// Per-client cluster centre, row-major 3x2 (w11, w12, w21, w22, w31, w32).
    std::vector<std::array<double, 6>> cluster_means;
    double cluster_std = 0.02;
    std::size_t images_per_client = 20;
    std::size_t width = 64;
    std::size_t height = 64;
    double smoothness = 6.0; ///< blob radius in pixels
    double I0 = 255.0;

    /// Two well-separated H&E clusters.
    static SyntheticSpec two_client_default();
    /// Means for `k` clients spread between the two default clusters.
    static std::vector<std::array<double, 6>> default_means(std::size_t k);

    void validate() const;
};

/// Draws one stain matrix around `mean`: Gaussian jitter, projection onto the valid set,
/// canonical column order.
stain::StainMatrix draw_stain_matrix(const std::array<double, 6>& mean, double stddev, Rng& rng);

std::vector<stain::StainMatrix> draw_stain_matrices(const SyntheticSpec& spec, std::size_t client_index,
                                                    std::size_t count, Rng& rng);

struct SyntheticImage {
    RgbImage image;
    stain::StainMatrix w;
    stain::DensityMap h;
    stain::OdMatrix od; ///< exact w*h before 8-bit quantization
};

/// Smooth non-negative density fields (nucleus-like hematoxylin blobs over broad eosin
/// regions with background gaps) rendered as x = I0 exp(-w h).
SyntheticImage synthesize_image(const stain::StainMatrix& w, std::size_t width, std::size_t height,
                                double smoothness, double I0, Rng& rng);

/// Image with every pixel stained by column 1 of `w` only.
SyntheticImage synthesize_single_stain_image(const stain::StainMatrix& w, std::size_t width, std::size_t height,
                                             double smoothness, double I0, Rng& rng);

/// In-memory synthetic corpus: images[k] and truth[k] for client k+1.
struct SyntheticCorpus {
    std::vector<std::vector<SyntheticImage>> clients;
};
SyntheticCorpus generate_corpus(const SyntheticSpec& spec, std::uint64_t seed);

/// Writes client_<k>/img_<i>.png plus client_<k>/ground_truth.csv for every client and a
/// manifest.json at the root. Returns the manifest that was written.
FederationManifest generate_synthetic_federation(const SyntheticSpec& spec, std::uint64_t seed,
                                                 const std::filesystem::path& out_dir);

} // namespace fedsda::io
