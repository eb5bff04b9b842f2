#pragma once

#include "fedsda/denoiser.hpp"
#include "fedsda/optim.hpp"
#include "fedsda/rng.hpp"
#include "fedsda/stain.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace fedsda::diffusion {

/// Length of a flattened 3x2 stain matrix.
inline constexpr std::size_t kStainDim = 6;
using StainVector = std::array<double, kStainDim>;

/// beta_t, alpha_t = 1 - beta_t and alpha_bar_t = prod_{s<=t} alpha_s, indexed by t in [1, T].
class VarianceSchedule {
public:
    /// Linear beta from beta_1 to beta_T.
    static VarianceSchedule linear(std::size_t T = 1000, double beta_1 = 1e-4, double beta_T = 0.02);
    static VarianceSchedule from_betas(std::vector<double> betas);

    std::size_t T() const noexcept { return beta_.size(); }
    double beta(int t) const { return beta_[index(t)]; }
    double alpha(int t) const { return alpha_[index(t)]; }
    double alpha_bar(int t) const { return alpha_bar_[index(t)]; }
    const std::vector<double>& betas() const noexcept { return beta_; }

    bool operator==(const VarianceSchedule&) const = default;

private:
    std::size_t index(int t) const;

    std::vector<double> beta_, alpha_, alpha_bar_;
};

struct StainSample {
    StainVector vec{}; ///< row-major flattening of a canonical StainMatrix
    int client_id = 1;
};

StainSample to_sample(const stain::StainMatrix& w, int client_id);

/// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise.
std::vector<double> forward_sample(const VarianceSchedule& sched, std::span<const double> x0, int t,
                                   std::span<const double> noise);

/// Per-coordinate affine map into the unit-variance regime the model is trained in.
struct Standardization {
    StainVector mean{};
    StainVector stddev{1, 1, 1, 1, 1, 1};

    StainVector apply(const StainVector& v) const;
    StainVector invert(const StainVector& z) const;

    bool operator==(const Standardization&) const = default;
};

/// First and second moments a client can share without revealing its samples.
struct MomentAccumulator {
    std::size_t n = 0;
    StainVector sum{};
    StainVector sum_sq{};

    void add(const StainVector& v);
    void merge(const MomentAccumulator& other);
    /// Standard deviations below `min_std` are raised to it (point-mass data).
    Standardization finalize(double min_std = 1e-3) const;
};

struct DiffusionModel {
    nn::ModelState state;
    VarianceSchedule schedule;
    Standardization norm;
    bool trained = false;

    /// Fresh network plus a linear schedule sized from the architecture.
    static DiffusionModel create(const nn::DenoiserArch& arch, std::uint64_t seed);
    void validate() const;
};

/// One optimizer step on the denoising objective. Draws t ~ U{1..T} and unit Gaussian
/// noise for each sample (in batch order) from `rng`; returns the mean over samples
/// of ||eps - eps_theta(w_t, t, c)||^2 measured before the update.
double training_step(std::span<const StainSample> batch, DiffusionModel& model, nn::OptimState& opt, Rng& rng);

/// Same loss without touching the model.
double evaluate_loss(std::span<const StainSample> batch, const DiffusionModel& model, Rng& rng);

struct SampleOptions {
    bool allow_untrained = false;
    std::size_t max_tries = 10; ///< reverse chains per output before giving up on a zero column
};

/// Ancestral sampling with sigma_t^2 = beta_t and no noise at t = 1, then
/// de-standardization and projection to a valid canonical StainMatrix.
stain::StainMatrix sample(const DiffusionModel& model, int condition, Rng& rng, const SampleOptions& opts = {});

/// `count` draws, run as one batched reverse chain. Draw i uses its own stream
/// derive_seed(seed, {condition, i}).
std::vector<stain::StainMatrix> sample_many(const DiffusionModel& model, int condition, std::size_t count,
                                            std::uint64_t seed, const SampleOptions& opts = {});

void save_diffusion_model(const std::filesystem::path& path, const DiffusionModel& model);
DiffusionModel load_diffusion_model(const std::filesystem::path& path);

} // namespace fedsda::diffusion
