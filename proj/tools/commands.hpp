#pragma once

#include "fedsda/config.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace fedsda::cli {

// Flags shared by every subcommand. Unset values fall back to the config file, then to
// built-in defaults.
struct GlobalOptions {
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;
    std::optional<std::filesystem::path> config;
};

io::RunConfig effective_config(const GlobalOptions& g);

struct SynthArgs {
    std::filesystem::path out;
    std::size_t clients = 2;
    std::size_t images = 20;
    std::size_t width = 64;
    std::size_t height = 64;
    double cluster_std = 0.02;
    double smoothness = 6.0;
};
void run_synth(const GlobalOptions& g, const SynthArgs& a);

struct SeparateArgs {
    std::filesystem::path input;
    std::filesystem::path out;
    std::optional<double> lambda;
    std::optional<std::size_t> max_iters;
    std::optional<double> tol;
    bool density = false;
};
void run_separate(const GlobalOptions& g, const SeparateArgs& a);

struct TrainArgs {
    std::vector<std::filesystem::path> stains;
    std::optional<std::filesystem::path> manifest;
    std::optional<std::filesystem::path> out;
    std::optional<std::filesystem::path> round_log;
    std::optional<std::size_t> rounds;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> batch_size;
    std::optional<double> lr;
    std::optional<std::string> backbone;
    std::optional<std::size_t> eval_samples;
};
void run_train(const GlobalOptions& g, const TrainArgs& a);

struct SampleArgs {
    std::filesystem::path model;
    int condition = 1;
    std::size_t count = 1;
    std::optional<std::filesystem::path> out;
};
void run_sample(const GlobalOptions& g, const SampleArgs& a);

struct AlignArgs {
    std::filesystem::path model;
    int client_id = 1;
    std::filesystem::path input;
    std::filesystem::path out;
    std::optional<std::size_t> k;
};
void run_align(const GlobalOptions& g, const AlignArgs& a);

struct AmpnormArgs {
    std::vector<std::filesystem::path> inputs;
    std::filesystem::path out;
    double v = 0.1;
    std::size_t batch = 8;
};
void run_ampnorm(const GlobalOptions& g, const AmpnormArgs& a);

struct EvalArgs {
    std::string mode;
    std::filesystem::path a;
    std::filesystem::path b;
    bool report = false;
    std::optional<std::filesystem::path> out;
};
void run_eval(const GlobalOptions& g, const EvalArgs& a);

struct PipelineArgs {
    std::filesystem::path manifest;
    std::filesystem::path out;
};
void run_pipeline_cmd(const GlobalOptions& g, const PipelineArgs& a);

} // namespace fedsda::cli
