#include "fedsda/diffusion.hpp"

#include "fedsda/error.hpp"
#include "fedsda/model_io.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

namespace fedsda::diffusion {

using nn::Shape;
using nn::Tensor;

VarianceSchedule VarianceSchedule::linear(std::size_t T, double beta_1, double beta_T) {
    if (T == 0) throw ValidationError("schedule: T must be positive");
    std::vector<double> b(T);
    for (std::size_t i = 0; i < T; ++i) {
        const double f = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
        b[i] = beta_1 + (beta_T - beta_1) * f;
    }
    return from_betas(std::move(b));
}

VarianceSchedule VarianceSchedule::from_betas(std::vector<double> betas) {
    if (betas.empty()) throw ValidationError("schedule: no betas");
    VarianceSchedule s;
    s.beta_ = std::move(betas);
    s.alpha_.resize(s.beta_.size());
    s.alpha_bar_.resize(s.beta_.size());
    double prod = 1.0;
    for (std::size_t i = 0; i < s.beta_.size(); ++i) {
        const double b = s.beta_[i];
        if (!(b > 0.0 && b < 1.0)) throw ValidationError("schedule: beta_" + std::to_string(i + 1) + " = " + std::to_string(b) + " outside (0, 1)");
        s.alpha_[i] = 1.0 - b;
        prod *= s.alpha_[i];
        s.alpha_bar_[i] = prod;
    }
    return s;
}

std::size_t VarianceSchedule::index(int t) const {
    if (t < 1 || static_cast<std::size_t>(t) > beta_.size())
        throw ValidationError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(beta_.size()) + "]");
    return static_cast<std::size_t>(t - 1);
}

StainSample to_sample(const stain::StainMatrix& w, int client_id) {
    StainSample s;
    s.vec = w.flatten();
    s.client_id = client_id;
    return s;
}

std::vector<double> forward_sample(const VarianceSchedule& sched, std::span<const double> x0, int t, std::span<const double> noise) {
    if (x0.size() != noise.size()) throw ValidationError("forward_sample: x0 and noise lengths differ");
    const double ab = sched.alpha_bar(t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    std::vector<double> out(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * noise[i];
    return out;
}

StainVector Standardization::apply(const StainVector& v) const {
    StainVector z;
    for (std::size_t i = 0; i < kStainDim; ++i) z[i] = (v[i] - mean[i]) / stddev[i];
    return z;
}

StainVector Standardization::invert(const StainVector& z) const {
    StainVector v;
    for (std::size_t i = 0; i < kStainDim; ++i) v[i] = z[i] * stddev[i] + mean[i];
    return v;
}

void MomentAccumulator::add(const StainVector& v) {
    ++n;
    for (std::size_t i = 0; i < kStainDim; ++i) {
        sum[i] += v[i];
        sum_sq[i] += v[i] * v[i];
    }
}

void MomentAccumulator::merge(const MomentAccumulator& other) {
    n += other.n;
    for (std::size_t i = 0; i < kStainDim; ++i) {
        sum[i] += other.sum[i];
        sum_sq[i] += other.sum_sq[i];
    }
}

Standardization MomentAccumulator::finalize(double min_std) const {
    if (n == 0) throw ValidationError("standardization: no samples");
    Standardization s;
    const double nn = static_cast<double>(n);
    for (std::size_t i = 0; i < kStainDim; ++i) {
        s.mean[i] = sum[i] / nn;
        const double var = std::max(0.0, sum_sq[i] / nn - s.mean[i] * s.mean[i]);
        s.stddev[i] = std::max(min_std, std::sqrt(var));
    }
    return s;
}

DiffusionModel DiffusionModel::create(const nn::DenoiserArch& arch, std::uint64_t seed) {
    arch.validate();
    if (arch.num_scalar_tokens != kStainDim)
        throw ValidationError("diffusion: the denoiser must take " + std::to_string(kStainDim) + " scalar tokens");
    DiffusionModel m;
    m.state = nn::ModelState::initialize(arch, seed);
    m.schedule = VarianceSchedule::linear(arch.num_timesteps);
    return m;
}

void DiffusionModel::validate() const {
    state.arch.validate();
    state.validate();
    if (state.arch.num_scalar_tokens != kStainDim) throw ValidationError("diffusion: model does not operate on stain vectors");
    if (schedule.T() != state.arch.num_timesteps)
        throw ValidationError("diffusion: schedule length " + std::to_string(schedule.T()) + " does not match T = " +
                              std::to_string(state.arch.num_timesteps));
    for (double s : norm.stddev)
        if (!(s > 0.0) || !std::isfinite(s)) throw ValidationError("diffusion: standardization scale must be positive");
}

namespace {

struct NoisedBatch {
    Tensor x, noise;
    std::vector<int> t, c;
};

NoisedBatch make_noised_batch(std::span<const StainSample> batch, const DiffusionModel& model, Rng& rng) {
    if (batch.empty()) throw ValidationError("training step: empty batch");
    const std::size_t B = batch.size();
    NoisedBatch nb{Tensor(Shape{B, kStainDim}), Tensor(Shape{B, kStainDim}), std::vector<int>(B), std::vector<int>(B)};
    std::uniform_int_distribution<int> tdist(1, static_cast<int>(model.schedule.T()));
    for (std::size_t i = 0; i < B; ++i) {
        nn::require_finite(batch[i].vec, "stain sample");
        const auto z = model.norm.apply(batch[i].vec);
        const int t = tdist(rng);
        const double ab = model.schedule.alpha_bar(t);
        const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
        for (std::size_t j = 0; j < kStainDim; ++j) {
            const double e = standard_normal(rng);
            nb.noise.at(i, j) = e;
            nb.x.at(i, j) = a * z[j] + b * e;
        }
        nb.t[i] = t;
        nb.c[i] = batch[i].client_id;
    }
    return nb;
}

} // namespace

double training_step(std::span<const StainSample> batch, DiffusionModel& model, nn::OptimState& opt, Rng& rng) {
    const auto nb = make_noised_batch(batch, model, rng);
    nn::Graph g;
    nn::DenoiserGraph net(g, model.state);
    nn::Var loss = nn::squared_error(net.forward(nb.x, nb.t, nb.c), g.constant(nb.noise));
    g.backward(loss);
    const double value = g.value(loss)[0];
    if (!std::isfinite(value)) throw StageError("train", "loss became non-finite");
    nn::adamw_step(model.state, net.gradients(), opt);
    return value;
}

double evaluate_loss(std::span<const StainSample> batch, const DiffusionModel& model, Rng& rng) {
    const auto nb = make_noised_batch(batch, model, rng);
    const Tensor pred = nn::predict_noise(model.state, nb.x, nb.t, nb.c);
    double total = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) total += (pred[i] - nb.noise[i]) * (pred[i] - nb.noise[i]);
    return total / static_cast<double>(batch.size());
}

namespace {

// Runs the reverse chain for every row, each drawing from its own stream, and returns
// de-standardized vectors.
std::vector<StainVector> reverse_chain(const DiffusionModel& model, int condition, std::span<Rng*> streams) {
    const std::size_t n = streams.size();
    const auto& S = model.schedule;
    Tensor x(Shape{n, kStainDim});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < kStainDim; ++j) x.at(i, j) = standard_normal(*streams[i]);
    const std::vector<int> c(n, condition);
    std::vector<int> tv(n);
    for (int t = static_cast<int>(S.T()); t >= 1; --t) {
        std::fill(tv.begin(), tv.end(), t);
        const Tensor eps = nn::predict_noise(model.state, x, tv, c);
        const double beta = S.beta(t), alpha = S.alpha(t), ab = S.alpha_bar(t);
        const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
        const double coef = beta / std::sqrt(1.0 - ab);
        const double sigma = std::sqrt(beta);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < kStainDim; ++j) {
                double v = inv_sqrt_alpha * (x.at(i, j) - coef * eps.at(i, j));
                if (t > 1) v += sigma * standard_normal(*streams[i]);
                x.at(i, j) = v;
            }
        if (!x.all_finite()) throw StageError("sample", "reverse chain diverged at t = " + std::to_string(t));
    }
    std::vector<StainVector> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        StainVector z;
        for (std::size_t j = 0; j < kStainDim; ++j) z[j] = x.at(i, j);
        out[i] = model.norm.invert(z);
    }
    return out;
}

// Clamp, renormalize, canonicalize. Empty optional when a column has no positive mass.
std::optional<stain::StainMatrix> to_valid(const StainVector& v) {
    stain::StainBasis raw;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 2; ++c) raw(r, c) = std::max(0.0, v[static_cast<std::size_t>(r * 2 + c)]);
    if (raw.col(0).norm() == 0.0 || raw.col(1).norm() == 0.0) return std::nullopt;
    auto w = stain::StainMatrix::project(raw);
    w.canonicalize();
    return w;
}

void check_sampling(const DiffusionModel& model, int condition, const SampleOptions& opts) {
    model.validate();
    if (condition < 1 || static_cast<std::size_t>(condition) > model.state.arch.num_conditions)
        throw ValidationError("sample: condition " + std::to_string(condition) + " outside [1, " +
                              std::to_string(model.state.arch.num_conditions) + "]");
    if (!model.trained && !opts.allow_untrained) throw ValidationError("sample: model is untrained");
    if (opts.max_tries == 0) throw ValidationError("sample: max_tries must be positive");
}

std::vector<stain::StainMatrix> sample_streams(const DiffusionModel& model, int condition, std::span<Rng*> streams,
                                               const SampleOptions& opts) {
    check_sampling(model, condition, opts);
    std::vector<std::optional<stain::StainMatrix>> out(streams.size());
    std::vector<std::size_t> pending(streams.size());
    for (std::size_t i = 0; i < pending.size(); ++i) pending[i] = i;
    for (std::size_t attempt = 0; attempt < opts.max_tries && !pending.empty(); ++attempt) {
        std::vector<Rng*> active;
        for (auto i : pending) active.push_back(streams[i]);
        const auto vecs = reverse_chain(model, condition, active);
        std::vector<std::size_t> still;
        for (std::size_t k = 0; k < pending.size(); ++k) {
            out[pending[k]] = to_valid(vecs[k]);
            if (!out[pending[k]]) still.push_back(pending[k]);
        }
        pending = std::move(still);
    }
    if (!pending.empty())
        throw StageError("sample", std::to_string(pending.size()) + " draw(s) still had an all-zero column after " +
                                       std::to_string(opts.max_tries) + " tries");
    std::vector<stain::StainMatrix> result;
    result.reserve(out.size());
    for (auto& w : out) result.push_back(*w);
    return result;
}

} // namespace

stain::StainMatrix sample(const DiffusionModel& model, int condition, Rng& rng, const SampleOptions& opts) {
    Rng* streams[] = {&rng};
    return sample_streams(model, condition, streams, opts).front();
}

std::vector<stain::StainMatrix> sample_many(const DiffusionModel& model, int condition, std::size_t count,
                                            std::uint64_t seed, const SampleOptions& opts) {
    std::vector<Rng> rngs;
    rngs.reserve(count);
    for (std::size_t i = 0; i < count; ++i) rngs.emplace_back(derive_seed(seed, {static_cast<std::uint64_t>(condition), i}));
    std::vector<Rng*> streams;
    for (auto& r : rngs) streams.push_back(&r);
    if (count == 0) {
        check_sampling(model, condition, opts);
        return {};
    }
    return sample_streams(model, condition, streams, opts);
}

void save_diffusion_model(const std::filesystem::path& path, const DiffusionModel& model) {
    model.validate();
    std::vector<nn::NamedTensor> aux;
    aux.push_back({"schedule.beta", Tensor(Shape{model.schedule.T()}, model.schedule.betas())});
    aux.push_back({"standardize.mean", Tensor(Shape{kStainDim}, std::vector<double>(model.norm.mean.begin(), model.norm.mean.end()))});
    aux.push_back({"standardize.std", Tensor(Shape{kStainDim}, std::vector<double>(model.norm.stddev.begin(), model.norm.stddev.end()))});
    aux.push_back({"trained", Tensor::scalar(model.trained ? 1.0 : 0.0)});
    nn::save_model(path, model.state, aux);
}

DiffusionModel load_diffusion_model(const std::filesystem::path& path) {
    auto file = nn::load_model(path);
    auto need = [&](const char* name, std::size_t len) -> const Tensor& {
        const Tensor* t = file.find_aux(name);
        if (!t) throw ValidationError("model file " + path.string() + " lacks '" + name + "'");
        if (t->size() != len) throw ValidationError("model file " + path.string() + ": '" + name + "' has the wrong size");
        return *t;
    };
    DiffusionModel m;
    m.state = std::move(file.state);
    m.schedule = VarianceSchedule::from_betas(need("schedule.beta", m.state.arch.num_timesteps).values());
    const auto& mean = need("standardize.mean", kStainDim);
    const auto& sd = need("standardize.std", kStainDim);
    std::copy(mean.data.begin(), mean.data.end(), m.norm.mean.begin());
    std::copy(sd.data.begin(), sd.data.end(), m.norm.stddev.begin());
    m.trained = need("trained", 1)[0] != 0.0;
    m.validate();
    return m;
}

} // namespace fedsda::diffusion
