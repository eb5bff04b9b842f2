#include "fedsda/pipeline.hpp"

#include "fedsda/align.hpp"
#include "fedsda/error.hpp"
#include "fedsda/metrics.hpp"
#include "fedsda/parallel.hpp"
#include "fedsda/png_io.hpp"
#include "fedsda/stain_csv.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <fstream>
#include <optional>
#include <ostream>

namespace fedsda::io {

namespace fs = std::filesystem;

namespace {

template <class Fn>
auto stage(const char* name, Fn&& fn) -> decltype(fn()) {
    spdlog::info("stage {}", name);
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const ValidationError& e) {
        throw StageError(name, e.what());
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}

struct ClientData {
    std::vector<fs::path> files;
    std::vector<RgbImage> images;
    std::vector<std::optional<stain::StainMatrix>> w; // separated, empty on failure
};

std::vector<std::optional<stain::StainMatrix>> separate_all(const std::vector<RgbImage>& images, const stain::SeparationOptions& opts,
                                                            std::size_t threads, int client_id) {
    std::vector<std::optional<stain::StainMatrix>> out(images.size());
    parallel_for(images.size(), threads, [&](std::size_t i) {
        try {
            out[i] = stain::separate(images[i], opts).w;
        } catch (const ValidationError& e) {
            spdlog::warn("client {} image {}: separation failed: {}", client_id, i, e.what());
        }
    });
    return out;
}

std::vector<stain::StainMatrix> present(const std::vector<std::optional<stain::StainMatrix>>& ws) {
    std::vector<stain::StainMatrix> out;
    for (const auto& w : ws)
        if (w) out.push_back(*w);
    return out;
}

double pair_fd(const std::vector<stain::StainMatrix>& a, const std::vector<stain::StainMatrix>& b) {
    if (a.size() < 2 || b.size() < 2) throw ValidationError("need at least two stain matrices per client for FD");
    return metrics::stain_set_fd(a, b);
}

} // namespace

PipelineSummary run_pipeline(const FederationManifest& manifest, const fs::path& manifest_dir, const RunConfig& cfg_in,
                             const fs::path& out_dir) {
    manifest.validate_on_disk(manifest_dir);
    const auto m = manifest.resolved(manifest_dir);
    RunConfig cfg = cfg_in;
    cfg.fed.clients = m.clients.size();
    cfg.validate();
    const std::size_t K = m.clients.size();
    const std::size_t threads = cfg.fed.threads;
    fs::create_directories(out_dir);

    std::vector<ClientData> data(K);
    PipelineSummary summary;
    summary.seed = cfg.fed.seed;
    summary.clients = K;
    summary.client_reports.resize(K);

    stage("separate", [&] {
        fs::create_directories(out_dir / "stains");
        for (std::size_t k = 0; k < K; ++k) {
            auto& d = data[k];
            d.files = list_png_files(m.clients[k].images);
            for (const auto& f : d.files) d.images.push_back(read_png(f));
            d.w = separate_all(d.images, cfg.separation, threads, static_cast<int>(k + 1));
            std::vector<StainRecord> rows;
            for (std::size_t i = 0; i < d.files.size(); ++i)
                if (d.w[i]) rows.push_back({d.files[i].filename().string(), *d.w[i]});
            write_stain_csv(out_dir / "stains" / ("client_" + std::to_string(k + 1) + ".csv"), rows);
            auto& rep = summary.client_reports[k];
            rep.client_id = static_cast<int>(k + 1);
            rep.images = d.files.size();
            rep.separation_failures = d.files.size() - rows.size();
        }
    });

    const auto model = stage("train", [&] {
        std::vector<fed::ClientShard> shards(K);
        for (std::size_t k = 0; k < K; ++k) {
            shards[k].client_id = static_cast<int>(k + 1);
            if (m.clients[k].stains) {
                for (const auto& r : read_stain_csv(*m.clients[k].stains))
                    shards[k].samples.push_back(diffusion::to_sample(r.w, shards[k].client_id));
            } else {
                for (const auto& w : present(data[k].w)) shards[k].samples.push_back(diffusion::to_sample(w, shards[k].client_id));
            }
        }
        auto result = fed::run_federated_training(cfg.fed, shards, cfg.arch(K));
        diffusion::save_diffusion_model(out_dir / "model.fsda", result.model);
        fed::write_round_log_csv(out_dir / "round_log.csv", result.logs);
        const auto& last = result.logs.back();
        for (std::size_t k = 0; k < K; ++k) {
            summary.client_reports[k].final_loss = last.client_loss[k];
            summary.client_reports[k].final_fd = k < last.fd.size() ? last.fd[k] : 0.0;
        }
        return result.model;
    });

    std::vector<std::vector<RgbImage>> aligned(K);
    stage("align", [&] {
        const auto source = align::diffusion_source(model);
        for (std::size_t k = 0; k < K; ++k) {
            align::AlignOptions opts;
            opts.K = K;
            opts.client_id = static_cast<int>(k + 1);
            opts.seed = cfg.fed.seed;
            opts.threads = threads;
            opts.separation = cfg.separation;
            const auto res = align::align_client(data[k].images, source, opts);
            const fs::path dir = out_dir / "aligned" / ("client_" + std::to_string(k + 1));
            fs::create_directories(dir);
            std::vector<align::ManifestRow> rows;
            auto& rep = summary.client_reports[k];
            double ssim_sum = 0.0, wd_sum = 0.0;
            for (std::size_t i = 0; i < res.images.size(); ++i) {
                const auto& a = res.images[i];
                const auto name = align::aligned_filename(data[k].files[i], a.target_condition);
                write_png(dir / name, a.image);
                rows.push_back({data[k].files[i].filename().string(), name, a.target_condition, a.ssim});
                rep.passed_through += a.passed_through ? 1 : 0;
                ssim_sum += a.ssim;
                wd_sum += metrics::wasserstein_1d(data[k].images[i], a.image);
                aligned[k].push_back(a.image);
            }
            align::write_alignment_manifest(dir / "manifest.csv", rows);
            rep.mean_ssim = ssim_sum / static_cast<double>(res.images.size());
            rep.mean_wd = wd_sum / static_cast<double>(res.images.size());
        }
    });

    stage("metrics", [&] {
        std::vector<std::vector<stain::StainMatrix>> before(K), after(K);
        for (std::size_t k = 0; k < K; ++k) {
            before[k] = present(data[k].w);
            after[k] = present(separate_all(aligned[k], cfg.separation, threads, static_cast<int>(k + 1)));
        }
        double bsum = 0.0, asum = 0.0;
        for (std::size_t a = 0; a < K; ++a)
            for (std::size_t b = a + 1; b < K; ++b) {
                PairFd p{static_cast<int>(a + 1), static_cast<int>(b + 1), pair_fd(before[a], before[b]), pair_fd(after[a], after[b])};
                bsum += p.before;
                asum += p.after;
                summary.pairs.push_back(p);
            }
        if (!summary.pairs.empty()) {
            summary.fd_before_mean = bsum / static_cast<double>(summary.pairs.size());
            summary.fd_after_mean = asum / static_cast<double>(summary.pairs.size());
        }
        std::size_t n = 0;
        for (const auto& r : summary.client_reports) {
            summary.mean_ssim += r.mean_ssim * static_cast<double>(r.images);
            summary.mean_wd += r.mean_wd * static_cast<double>(r.images);
            n += r.images;
        }
        summary.mean_ssim /= static_cast<double>(n);
        summary.mean_wd /= static_cast<double>(n);

        std::ofstream js(out_dir / "summary.json", std::ios::trunc);
        if (!js) throw StageError("metrics", "cannot write summary.json");
        write_summary_json(js, summary);
        std::ofstream cs(out_dir / "summary.csv", std::ios::trunc);
        if (!cs) throw StageError("metrics", "cannot write summary.csv");
        write_summary_csv(cs, summary);
    });
    return summary;
}

void write_summary_json(std::ostream& out, const PipelineSummary& s) {
    using nlohmann::json;
    json pairs_before = json::array(), pairs_after = json::array(), clients = json::array();
    for (const auto& p : s.pairs) {
        pairs_before.push_back({{"a", p.a}, {"b", p.b}, {"fd", p.before}});
        pairs_after.push_back({{"a", p.a}, {"b", p.b}, {"fd", p.after}});
    }
    for (const auto& r : s.client_reports)
        clients.push_back({{"client_id", r.client_id},
                           {"images", r.images},
                           {"separation_failures", r.separation_failures},
                           {"passed_through", r.passed_through},
                           {"mean_ssim", r.mean_ssim},
                           {"mean_wd", r.mean_wd},
                           {"final_loss", r.final_loss},
                           {"final_fd", r.final_fd}});
    json j{{"seed", s.seed},
           {"clients", s.clients},
           {"before", {{"fd_pairs", pairs_before}, {"fd_mean", s.fd_before_mean}}},
           {"after", {{"fd_pairs", pairs_after}, {"fd_mean", s.fd_after_mean}, {"ssim_mean", s.mean_ssim}, {"wd_mean", s.mean_wd}}},
           {"per_client", clients}};
    out << j.dump(2) << '\n';
}

void write_summary_csv(std::ostream& out, const PipelineSummary& s) {
    out << "metric,client_a,client_b,value\n";
    for (const auto& p : s.pairs) {
        out << "fd_before," << p.a << ',' << p.b << ',' << format_double(p.before) << '\n';
        out << "fd_after," << p.a << ',' << p.b << ',' << format_double(p.after) << '\n';
    }
    for (const auto& r : s.client_reports) {
        out << "ssim," << r.client_id << ",," << format_double(r.mean_ssim) << '\n';
        out << "wd," << r.client_id << ",," << format_double(r.mean_wd) << '\n';
        out << "train_fd," << r.client_id << ",," << format_double(r.final_fd) << '\n';
        out << "train_loss," << r.client_id << ",," << format_double(r.final_loss) << '\n';
    }
    out << "fd_before_mean,,," << format_double(s.fd_before_mean) << '\n';
    out << "fd_after_mean,,," << format_double(s.fd_after_mean) << '\n';
    out << "ssim_mean,,," << format_double(s.mean_ssim) << '\n';
    out << "wd_mean,,," << format_double(s.mean_wd) << '\n';
}

} // namespace fedsda::io
