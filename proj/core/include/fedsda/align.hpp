#pragma once

#include "fedsda/diffusion.hpp"
#include "fedsda/image.hpp"
#include "fedsda/rng.hpp"
#include "fedsda/stain.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace fedsda::align {

/// Shuffled split of [0, n) into K blocks whose sizes differ by at most one; the first
/// n mod K blocks get the extra index. Indices inside a block are sorted.
std::vector<std::vector<std::size_t>> make_partition(std::size_t n_images, std::size_t K, std::uint64_t seed);

/// Supplies the stain matrix for one image: (target condition, image index, image stream).
using StainSource = std::function<stain::StainMatrix(int condition, std::size_t image_index, Rng& rng)>;

/// Draws from the conditional diffusion model.
StainSource diffusion_source(const diffusion::DiffusionModel& model);

struct AlignOptions {
    std::size_t K = 2;
    int client_id = 1;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    stain::SeparationOptions separation;
};

struct AlignmentPlan {
    int client_id = 1;
    std::vector<std::vector<std::size_t>> partition;
    std::vector<stain::StainMatrix> sampled_w; ///< one per image, input order
    std::uint64_t seed = 0;
};

struct AlignedImage {
    RgbImage image;
    int target_condition = 1;
    bool passed_through = false; ///< separation failed, image left untouched
    double ssim = 1.0;           ///< against the input image
};

struct AlignResult {
    AlignmentPlan plan;
    std::vector<AlignedImage> images;
};

/// Re-renders image idx of block j from its own density map and a stain matrix drawn
/// for condition j. Each image uses the stream derive_seed(seed, {client_id, idx}).
AlignResult align_client(std::span<const RgbImage> images, const StainSource& source, const AlignOptions& opts);

struct ManifestRow {
    std::string src;
    std::string dst;
    int target_condition = 1;
    double ssim = 1.0;
};

/// src,dst,target_condition,ssim
void write_alignment_manifest(std::ostream& out, std::span<const ManifestRow> rows);
void write_alignment_manifest(const std::filesystem::path& path, std::span<const ManifestRow> rows);

/// <stem>__c<j>.png
std::string aligned_filename(const std::filesystem::path& src, int condition);

} // namespace fedsda::align
