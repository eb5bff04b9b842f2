#include "fedsda/optim.hpp"

#include "fedsda/error.hpp"

#include <cmath>
#include <string>

namespace fedsda::nn {

OptimState OptimState::for_params(std::size_t n, const AdamWConfig& cfg) {
    return OptimState{cfg, std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0};
}

void adamw_step(std::span<double> params, std::span<const double> grads, OptimState& opt) {
    if (params.size() != grads.size() || opt.m.size() != params.size() || opt.v.size() != params.size()) {
        throw ValidationError("adamw: shape mismatch (params " + std::to_string(params.size()) + ", grads " +
                              std::to_string(grads.size()) + ", moments " + std::to_string(opt.m.size()) + ")");
    }
    const auto& c = opt.config;
    ++opt.step;
    const double t = static_cast<double>(opt.step);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    const double decay = 1.0 - c.lr * c.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        opt.m[i] = c.beta1 * opt.m[i] + (1.0 - c.beta1) * g;
        opt.v[i] = c.beta2 * opt.v[i] + (1.0 - c.beta2) * g * g;
        const double mhat = opt.m[i] / bc1;
        const double vhat = opt.v[i] / bc2;
        params[i] = params[i] * decay - c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
}

void adamw_step(ModelState& state, std::span<const double> grads, OptimState& opt) {
    adamw_step(std::span<double>(state.params), grads, opt);
}

} // namespace fedsda::nn
