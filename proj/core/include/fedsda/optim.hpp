#pragma once

#include "fedsda/denoiser.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace fedsda::nn {

struct AdamWConfig {
    double lr = 2e-4;
    double weight_decay = 3e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// AdamW moments for a flat parameter vector.
struct OptimState {
    AdamWConfig config;
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t step = 0;

    static OptimState for_params(std::size_t n, const AdamWConfig& cfg = {});
};

/// One AdamW update with decoupled weight decay: p <- p*(1 - lr*wd) - lr*mhat/(sqrt(vhat)+eps).
/// The step counter is incremented before bias correction.
void adamw_step(std::span<double> params, std::span<const double> grads, OptimState& opt);
void adamw_step(ModelState& state, std::span<const double> grads, OptimState& opt);

} // namespace fedsda::nn
