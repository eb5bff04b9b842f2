#pragma once

#include "fedsda/denoiser.hpp"
#include "fedsda/fedsim.hpp"
#include "fedsda/stain.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace fedsda::io {

struct ClientEntry {
    int client_id = 1;
    std::filesystem::path images;               ///< relative paths resolve against the manifest's directory
    std::optional<std::filesystem::path> stains; ///< precomputed stain CSV

    bool operator==(const ClientEntry&) const = default;
};

struct FederationManifest {
    std::vector<ClientEntry> clients;
    std::size_t width = 0;
    std::size_t height = 0;
    std::uint64_t seed = 0;

    /// Client ids dense 1..K in order.
    void validate() const;
    /// validate() plus: every image directory exists and holds at least one PNG.
    void validate_on_disk(const std::filesystem::path& base) const;
    /// Copy with relative paths made absolute against `base`.
    FederationManifest resolved(const std::filesystem::path& base) const;

    bool operator==(const FederationManifest&) const = default;
};

void write_manifest(std::ostream& out, const FederationManifest& m);
void write_manifest(const std::filesystem::path& path, const FederationManifest& m);
FederationManifest read_manifest(std::istream& in);
FederationManifest read_manifest(const std::filesystem::path& path);

/// Everything a training or pipeline run needs besides the data itself.
struct RunConfig {
    fed::FedConfig fed;
    nn::Backbone backbone = nn::Backbone::transformer;
    std::size_t hidden_size = 32;
    std::size_t num_heads = 8;
    std::size_t timesteps = 1000;
    stain::SeparationOptions separation;
    /// Precomputed stain CSV per client, index k for client k+1.
    std::vector<std::filesystem::path> client_stains;
    std::optional<std::filesystem::path> manifest;
    std::filesystem::path model_out = "model.fsda";
    std::filesystem::path round_log = "round_log.csv";
    bool seed_given = false; ///< the parsed config named a seed explicitly

    nn::DenoiserArch arch(std::size_t conditions) const;
    void validate() const;
};

/// Accepts either a JSON object or `key = value` lines (`#` starts a comment). Keys:
/// clients, rounds, local_epochs, batch_size, lr, weight_decay, seed, threads,
/// eval_samples, backbone, hidden_size, num_heads, timesteps, lambda, max_iters, tol,
/// manifest, model, round_log, and client.<k>.stains (JSON: "client_stains": [..]).
/// Relative paths resolve against `base`.
RunConfig parse_run_config(std::istream& in, const std::filesystem::path& base = {});
RunConfig load_run_config(const std::filesystem::path& path);

} // namespace fedsda::io
