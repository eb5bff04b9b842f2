#include "fedsda/align.hpp"

#include "fedsda/error.hpp"
#include "fedsda/metrics.hpp"
#include "fedsda/parallel.hpp"
#include "fedsda/stain_csv.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <optional>
#include <ostream>

namespace fedsda::align {

std::vector<std::vector<std::size_t>> make_partition(std::size_t n_images, std::size_t K, std::uint64_t seed) {
    if (n_images < 1) throw ValidationError("partition: need at least one image");
    if (K < 1) throw ValidationError("partition: K must be >= 1");
    std::vector<std::size_t> order(n_images);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, {0x9a27}));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> blocks(K);
    for (std::size_t i = 0; i < n_images; ++i) blocks[i % K].push_back(order[i]);
    for (auto& b : blocks) std::sort(b.begin(), b.end());
    return blocks;
}

StainSource diffusion_source(const diffusion::DiffusionModel& model) {
    return [&model](int condition, std::size_t, Rng& rng) { return diffusion::sample(model, condition, rng); };
}

AlignResult align_client(std::span<const RgbImage> images, const StainSource& source, const AlignOptions& opts) {
    if (images.empty()) throw ValidationError("align: no images");
    if (opts.K < 1) throw ValidationError("align: K must be >= 1");
    if (!source) throw ValidationError("align: no stain source");
    opts.separation.validate();

    AlignResult result;
    result.plan.client_id = opts.client_id;
    result.plan.seed = opts.seed;
    result.plan.partition = make_partition(images.size(), opts.K, derive_seed(opts.seed, {static_cast<std::uint64_t>(opts.client_id)}));
    std::vector<int> target(images.size());
    for (std::size_t j = 0; j < result.plan.partition.size(); ++j)
        for (auto idx : result.plan.partition[j]) target[idx] = static_cast<int>(j + 1);

    result.images.resize(images.size());
    std::vector<std::optional<stain::StainMatrix>> used(images.size());
    parallel_for(images.size(), opts.threads, [&](std::size_t idx) {
        auto& out = result.images[idx];
        out.target_condition = target[idx];
        stain::SeparationResult sep;
        try {
            sep = stain::separate(images[idx], opts.separation);
        } catch (const std::exception& e) {
            spdlog::warn("align: client {} image {} left unchanged: {}", opts.client_id, idx, e.what());
            out.image = images[idx];
            out.passed_through = true;
            out.ssim = 1.0;
            return;
        }
        Rng rng(derive_seed(opts.seed, {static_cast<std::uint64_t>(opts.client_id), idx}));
        const auto w = source(target[idx], idx, rng);
        w.validate();
        used[idx] = w;
        out.image = stain::reconstruct(w, sep.h, images[idx].I0);
        out.image.I0 = images[idx].I0;
        out.ssim = images[idx].width >= metrics::kSsimWindow && images[idx].height >= metrics::kSsimWindow
                       ? metrics::ssim(images[idx], out.image)
                       : 1.0;
    });
    for (std::size_t i = 0; i < used.size(); ++i)
        result.plan.sampled_w.push_back(used[i] ? *used[i] : stain::StainMatrix{});
    return result;
}

void write_alignment_manifest(std::ostream& out, std::span<const ManifestRow> rows) {
    out << "src,dst,target_condition,ssim\n";
    for (const auto& r : rows) {
        if (r.src.find(',') != std::string::npos || r.dst.find(',') != std::string::npos)
            throw ValidationError("alignment manifest: file names must not contain commas");
        out << r.src << ',' << r.dst << ',' << r.target_condition << ',' << io::format_double(r.ssim) << '\n';
    }
}

void write_alignment_manifest(const std::filesystem::path& path, std::span<const ManifestRow> rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw StageError("align", "cannot open " + path.string());
    write_alignment_manifest(out, rows);
}

std::string aligned_filename(const std::filesystem::path& src, int condition) {
    return src.stem().string() + "__c" + std::to_string(condition) + ".png";
}

} // namespace fedsda::align
