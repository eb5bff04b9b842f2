#include "fedsda/ampnorm.hpp"
#include "fedsda/diffusion.hpp"
#include "fedsda/metrics.hpp"
#include "fedsda/runtime.hpp"
#include "fedsda/stain.hpp"
#include "fedsda/synth.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace fedsda;

namespace {

io::SyntheticImage sample_image(std::size_t size, std::uint64_t seed) {
    const auto spec = io::SyntheticSpec::two_client_default();
    Rng rng(seed);
    const auto w = io::draw_stain_matrix(spec.cluster_means[0], spec.cluster_std, rng);
    return io::synthesize_image(w, size, size, spec.smoothness, 255.0, rng);
}

void BM_Separate(benchmark::State& state) {
    const auto img = sample_image(static_cast<std::size_t>(state.range(0)), 1).image;
    for (auto _ : state) benchmark::DoNotOptimize(stain::separate(img));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(img.pixel_count()));
}
BENCHMARK(BM_Separate)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_TrainingStep(benchmark::State& state) {
    nn::DenoiserArch arch;
    arch.backbone = state.range(1) ? nn::Backbone::mlp : nn::Backbone::transformer;
    arch.num_conditions = 2;
    auto model = diffusion::DiffusionModel::create(arch, 3);
    const auto spec = io::SyntheticSpec::two_client_default();
    Rng rng(4);
    std::vector<diffusion::StainSample> batch;
    for (const auto& w : io::draw_stain_matrices(spec, 0, static_cast<std::size_t>(state.range(0)), rng))
        batch.push_back(diffusion::to_sample(w, 1));
    auto opt = nn::OptimState::for_params(model.state.params.size(), nn::AdamWConfig{});
    for (auto _ : state) benchmark::DoNotOptimize(diffusion::training_step(batch, model, opt, rng));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_TrainingStep)->Args({256, 0})->Args({256, 1})->Unit(benchmark::kMicrosecond);

void BM_Sample(benchmark::State& state) {
    nn::DenoiserArch arch;
    arch.num_conditions = 2;
    auto model = diffusion::DiffusionModel::create(arch, 5);
    model.trained = true;
    for (auto _ : state) benchmark::DoNotOptimize(diffusion::sample_many(model, 1, static_cast<std::size_t>(state.range(0)), 6));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Sample)->Arg(100)->Unit(benchmark::kMillisecond);

void BM_FftRoundTrip(benchmark::State& state) {
    const auto img = sample_image(static_cast<std::size_t>(state.range(0)), 7).image;
    for (auto _ : state) {
        const auto s = ampnorm::fft_decompose(img);
        benchmark::DoNotOptimize(ampnorm::fft_reconstruct(s.amplitude, s.phase, img.width, img.height));
    }
}
BENCHMARK(BM_FftRoundTrip)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

void BM_Ssim(benchmark::State& state) {
    const auto a = sample_image(static_cast<std::size_t>(state.range(0)), 8).image;
    const auto b = sample_image(static_cast<std::size_t>(state.range(0)), 9).image;
    for (auto _ : state) benchmark::DoNotOptimize(metrics::ssim(a, b));
}
BENCHMARK(BM_Ssim)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

void BM_Wasserstein(benchmark::State& state) {
    const auto a = sample_image(256, 10).image, b = sample_image(256, 11).image;
    for (auto _ : state) benchmark::DoNotOptimize(metrics::wasserstein_1d(a, b));
}
BENCHMARK(BM_Wasserstein)->Unit(benchmark::kMicrosecond);

void BM_FrechetDistance(benchmark::State& state) {
    const auto spec = io::SyntheticSpec::two_client_default();
    Rng rng(12);
    const auto a = io::draw_stain_matrices(spec, 0, 1000, rng), b = io::draw_stain_matrices(spec, 1, 1000, rng);
    for (auto _ : state) benchmark::DoNotOptimize(metrics::stain_set_fd(a, b));
}
BENCHMARK(BM_FrechetDistance)->Unit(benchmark::kMicrosecond);

} // namespace

int main(int argc, char** argv) {
    tune_allocator();
    benchmark::Initialize(&argc, argv);
    if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
    benchmark::RunSpecifiedBenchmarks();
    benchmark::Shutdown();
    return 0;
}
