#pragma once

#include "fedsda/config.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

namespace fedsda::io {

struct PairFd {
    int a = 1;
    int b = 2;
    double before = 0.0;
    double after = 0.0;
};

struct ClientReport {
    int client_id = 1;
    std::size_t images = 0;
    std::size_t separation_failures = 0; ///< before alignment
    std::size_t passed_through = 0;      ///< left unchanged by alignment
    double mean_ssim = 0.0;              ///< original vs aligned
    double mean_wd = 0.0;                ///< original vs aligned
    double final_loss = 0.0;
    double final_fd = 0.0;               ///< generated | c vs the client's own stain matrices
};

struct PipelineSummary {
    std::uint64_t seed = 0;
    std::size_t clients = 0;
    std::vector<PairFd> pairs; ///< every client pair a < b
    double fd_before_mean = 0.0;
    double fd_after_mean = 0.0;
    double mean_ssim = 0.0;
    double mean_wd = 0.0;
    std::vector<ClientReport> client_reports;
};

/// separate all -> federated diffusion training -> align all -> metrics. Writes under
/// out_dir: stains/client_<k>.csv, model.fsda, round_log.csv, aligned/client_<k>/*.png
/// with a manifest.csv each, summary.json and summary.csv. A failing stage raises
/// StageError named after the stage; artifacts of finished stages stay on disk.
PipelineSummary run_pipeline(const FederationManifest& manifest, const std::filesystem::path& manifest_dir,
                             const RunConfig& cfg, const std::filesystem::path& out_dir);

void write_summary_json(std::ostream& out, const PipelineSummary& s);
void write_summary_csv(std::ostream& out, const PipelineSummary& s);

} // namespace fedsda::io
