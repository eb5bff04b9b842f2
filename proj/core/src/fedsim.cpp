#include "fedsda/fedsim.hpp"

#include "fedsda/error.hpp"
#include "fedsda/metrics.hpp"
#include "fedsda/parallel.hpp"
#include "fedsda/stain_csv.hpp"

#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>

namespace fedsda::fed {

using diffusion::DiffusionModel;

void FedConfig::validate() const {
    if (clients < 1) throw ValidationError("fed config: K must be >= 1");
    if (rounds < 1) throw ValidationError("fed config: R must be >= 1");
    if (local_epochs < 1) throw ValidationError("fed config: E must be >= 1");
    if (batch_size < 1) throw ValidationError("fed config: B must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("fed config: learning rate must be positive");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ValidationError("fed config: weight decay must be >= 0");
    if (threads < 1) throw ValidationError("fed config: threads must be >= 1");
}

void ClientShard::validate() const {
    if (client_id < 1) throw ValidationError("client shard: client ids start at 1");
    if (samples.empty()) throw ValidationError("client shard " + std::to_string(client_id) + " is empty");
    for (const auto& s : samples)
        if (s.client_id != client_id)
            throw ValidationError("client shard " + std::to_string(client_id) + " holds a sample of client " + std::to_string(s.client_id));
}

nn::ModelState aggregate(std::span<const nn::ModelState> states, std::span<const std::size_t> sizes) {
    if (states.empty()) throw ValidationError("aggregate: no client states");
    if (states.size() != sizes.size()) throw ValidationError("aggregate: one size per state required");
    std::size_t total = 0;
    for (std::size_t k = 0; k < states.size(); ++k) {
        if (sizes[k] == 0) throw ValidationError("aggregate: client sizes must be positive");
        if (!(states[k].arch == states[0].arch) || states[k].params.size() != states[0].params.size())
            throw ValidationError("aggregate: client states have different shapes");
        total += sizes[k];
    }
    nn::ModelState out{states[0].arch, std::vector<double>(states[0].params.size(), 0.0)};
    for (std::size_t k = 0; k < states.size(); ++k) {
        const double coef = static_cast<double>(sizes[k]) / static_cast<double>(total);
        const auto& p = states[k].params;
        for (std::size_t i = 0; i < p.size(); ++i) out.params[i] += coef * p[i];
    }
    return out;
}

std::uint64_t client_stream(std::uint64_t seed, int client_id, std::size_t round) {
    return derive_seed(seed, {static_cast<std::uint64_t>(client_id), round});
}

LocalUpdate train_client(const DiffusionModel& global, const ClientShard& shard, const FedConfig& cfg, std::uint64_t stream_seed) {
    cfg.validate();
    shard.validate();
    DiffusionModel local = global;
    auto opt = nn::OptimState::for_params(local.state.params.size(), nn::AdamWConfig{cfg.lr, cfg.weight_decay});
    Rng rng(stream_seed);

    const std::size_t n = shard.size();
    const std::size_t b = std::min(cfg.batch_size, n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<diffusion::StainSample> batch;
    batch.reserve(b);

    double epoch_loss = 0.0;
    for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        double weighted = 0.0;
        for (std::size_t start = 0; start < n; start += b) {
            const std::size_t end = std::min(n, start + b);
            batch.clear();
            for (std::size_t i = start; i < end; ++i) batch.push_back(shard.samples[order[i]]);
            weighted += diffusion::training_step(batch, local, opt, rng) * static_cast<double>(end - start);
        }
        epoch_loss = weighted / static_cast<double>(n);
    }
    return {std::move(local.state), epoch_loss};
}

diffusion::Standardization pooled_standardization(std::span<const ClientShard> shards) {
    diffusion::MomentAccumulator total;
    for (const auto& shard : shards) {
        diffusion::MomentAccumulator local;
        for (const auto& s : shard.samples) local.add(s.vec);
        total.merge(local);
    }
    return total.finalize();
}

DiffusionModel initial_model(const FedConfig& cfg, std::span<const ClientShard> shards, const nn::DenoiserArch& arch) {
    nn::DenoiserArch a = arch;
    a.num_conditions = cfg.clients;
    auto model = DiffusionModel::create(a, derive_seed(cfg.seed, {0x1417}));
    model.norm = pooled_standardization(shards);
    return model;
}

namespace {

std::vector<stain::StainMatrix> shard_matrices(const ClientShard& shard) {
    std::vector<stain::StainMatrix> out;
    out.reserve(shard.size());
    for (const auto& s : shard.samples) out.push_back(stain::StainMatrix::from_flat(s.vec));
    return out;
}

} // namespace

FederatedResult run_federated_training(const FedConfig& cfg, std::span<const ClientShard> shards, const nn::DenoiserArch& arch,
                                       const RoundCallback& on_round) {
    cfg.validate();
    if (shards.empty()) throw ValidationError("federated training: no client shards");
    if (shards.size() != cfg.clients)
        throw ValidationError("federated training: K = " + std::to_string(cfg.clients) + " but " + std::to_string(shards.size()) + " shards given");
    std::set<int> ids;
    for (const auto& s : shards) {
        s.validate();
        if (s.client_id > static_cast<int>(cfg.clients) || !ids.insert(s.client_id).second)
            throw ValidationError("federated training: client ids must be distinct and within [1, K]");
    }
    for (const auto& s : shards)
        if (cfg.batch_size > s.size())
            spdlog::warn("client {}: batch size {} exceeds shard size {}, using {}", s.client_id, cfg.batch_size, s.size(), s.size());

    FederatedResult result;
    result.model = initial_model(cfg, shards, arch);
    spdlog::info("denoiser: {} backbone, {} parameters", nn::to_string(arch.backbone), result.model.state.params.size());

    std::vector<std::size_t> sizes;
    for (const auto& s : shards) sizes.push_back(s.size());
    std::vector<std::vector<stain::StainMatrix>> reference;
    if (cfg.eval_samples >= 2)
        for (const auto& s : shards) reference.push_back(s.size() >= 2 ? shard_matrices(s) : std::vector<stain::StainMatrix>{});

    for (std::size_t r = 1; r <= cfg.rounds; ++r) {
        const auto start = std::chrono::steady_clock::now();
        std::vector<LocalUpdate> updates(shards.size());
        parallel_for(shards.size(), cfg.threads, [&](std::size_t k) {
            updates[k] = train_client(result.model, shards[k], cfg, client_stream(cfg.seed, shards[k].client_id, r));
        });

        RoundLog log;
        log.round = r;
        std::vector<nn::ModelState> states;
        for (auto& u : updates) {
            log.client_loss.push_back(u.loss);
            states.push_back(std::move(u.state));
        }
        result.model.state = aggregate(states, sizes);
        result.model.trained = true;

        if (cfg.eval_samples >= 2) {
            log.fd.resize(shards.size(), std::numeric_limits<double>::quiet_NaN());
            parallel_for(shards.size(), cfg.threads, [&](std::size_t k) {
                if (reference[k].empty()) return;
                const auto gen = diffusion::sample_many(result.model, shards[k].client_id, cfg.eval_samples,
                                                        derive_seed(cfg.seed, {0xe7a1, r}));
                log.fd[k] = metrics::stain_set_fd(gen, reference[k]);
            });
        }
        log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

        std::string fds;
        for (double f : log.fd) fds += fmt::format(" {:.4f}", f);
        spdlog::info("round {}/{}: {:.1f}s, fd{}", r, cfg.rounds, log.seconds, fds.empty() ? " skipped" : fds);
        if (on_round) on_round(log, result.model);
        result.logs.push_back(std::move(log));
    }
    return result;
}

void write_round_log_csv(std::ostream& out, std::span<const RoundLog> logs) {
    out << "round,client,loss,fd,seconds\n";
    for (const auto& log : logs)
        for (std::size_t k = 0; k < log.client_loss.size(); ++k) {
            const double fd = k < log.fd.size() ? log.fd[k] : std::numeric_limits<double>::quiet_NaN();
            out << log.round << ',' << (k + 1) << ',' << io::format_double(log.client_loss[k]) << ','
                << (std::isfinite(fd) ? io::format_double(fd) : std::string("nan")) << ',' << io::format_double(log.seconds) << '\n';
        }
}

void write_round_log_csv(const std::filesystem::path& path, std::span<const RoundLog> logs) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw StageError("round-log", "cannot open " + path.string());
    write_round_log_csv(out, logs);
}

} // namespace fedsda::fed
