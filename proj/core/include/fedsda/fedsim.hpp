#pragma once

#include "fedsda/diffusion.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

namespace fedsda::fed {

struct FedConfig {
    std::size_t clients = 2;        ///< K
    std::size_t rounds = 3;         ///< R
    std::size_t local_epochs = 300; ///< E
    std::size_t batch_size = 256;   ///< B, capped at the shard size
    double lr = 2e-4;
    double weight_decay = 3e-2;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    /// Draws per condition for the post-aggregation FD in each RoundLog; 0 skips it.
    std::size_t eval_samples = 500;

    void validate() const;
};

struct ClientShard {
    int client_id = 1;
    std::vector<diffusion::StainSample> samples;

    std::size_t size() const noexcept { return samples.size(); }
    void validate() const;
};

struct RoundLog {
    std::size_t round = 0;
    std::vector<double> client_loss; ///< mean loss over each client's last local epoch
    std::vector<double> fd;          ///< FD(generated | c, shard c) after aggregation; empty when skipped
    double seconds = 0.0;
};

/// sum_k (n_k / n) theta_k.
nn::ModelState aggregate(std::span<const nn::ModelState> states, std::span<const std::size_t> sizes);

struct LocalUpdate {
    nn::ModelState state;
    double loss = 0.0;
};

/// E local epochs from `global` on one shard with fresh optimizer moments. Every random
/// choice comes from `stream_seed`, so the result depends only on the arguments.
LocalUpdate train_client(const diffusion::DiffusionModel& global, const ClientShard& shard, const FedConfig& cfg,
                         std::uint64_t stream_seed);

/// Stream used by client `client_id` in round `round` (both 1-based).
std::uint64_t client_stream(std::uint64_t seed, int client_id, std::size_t round);

/// Federation-wide standardization from per-client moments.
diffusion::Standardization pooled_standardization(std::span<const ClientShard> shards);

/// Global model before round 1: fresh weights seeded from cfg.seed, K conditions, and the
/// pooled standardization.
diffusion::DiffusionModel initial_model(const FedConfig& cfg, std::span<const ClientShard> shards, const nn::DenoiserArch& arch);

struct FederatedResult {
    diffusion::DiffusionModel model;
    std::vector<RoundLog> logs;
};

using RoundCallback = std::function<void(const RoundLog&, const diffusion::DiffusionModel&)>;

/// Full-participation FedAvg of the conditional denoiser over R rounds.
FederatedResult run_federated_training(const FedConfig& cfg, std::span<const ClientShard> shards, const nn::DenoiserArch& arch,
                                       const RoundCallback& on_round = {});

/// round,client,loss,fd,seconds
void write_round_log_csv(std::ostream& out, std::span<const RoundLog> logs);
void write_round_log_csv(const std::filesystem::path& path, std::span<const RoundLog> logs);

} // namespace fedsda::fed
