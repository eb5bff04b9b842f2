#pragma once

#include "fedsda/autodiff.hpp"
#include "fedsda/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace fedsda::nn {

enum class Backbone : std::uint32_t {
    transformer = 1,
    mlp = 2,
};

std::string to_string(Backbone b);
Backbone backbone_from_string(const std::string& s);

/// Shape of the noise-prediction network eps(w_t, t, c).
///
/// Transformer layout, per sample: tokens [t, c, w_1 .. w_P], one pre-norm block
/// (MHSA + 2x feed-forward), final norm, per-position scalar readout of the w tokens.
/// The timestep token is a sinusoidal code passed through a small MLP; the condition
/// token is a learned table row. The MLP backbone concatenates (w_t, sinusoid(t),
/// cond embedding) and applies one hidden layer of width `hidden_size`.
struct DenoiserArch {
    Backbone backbone = Backbone::transformer;
    std::size_t hidden_size = 32;
    std::size_t num_heads = 8;
    std::size_t num_scalar_tokens = 6; ///< 3 * r stain-matrix entries
    std::size_t num_conditions = 2;    ///< K clients
    std::size_t num_timesteps = 1000;  ///< T

    std::size_t num_tokens() const noexcept { return num_scalar_tokens + 2; }
    std::size_t param_count() const;
    void validate() const;

    bool operator==(const DenoiserArch&) const = default;
};

struct ParamSpec {
    enum class Init { normal, zeros, ones };
    std::string name;
    Shape shape;
    Init init;
    std::size_t offset; ///< into the flat parameter vector
};

/// Declared parameter tensors in canonical order.
std::vector<ParamSpec> parameter_layout(const DenoiserArch& arch);

/// Architecture plus a flat parameter vector in parameter_layout() order.
struct ModelState {
    DenoiserArch arch;
    std::vector<double> params;

    /// Truncated-normal(0.02) weights, zero biases and readout, unit norm gains.
    static ModelState initialize(const DenoiserArch& arch, std::uint64_t seed);

    Tensor tensor(const std::string& name) const;
    void set_tensor(const std::string& name, const Tensor& t);
    /// Throws ValidationError unless params.size() matches the architecture.
    void validate() const;

    bool operator==(const ModelState&) const = default;
};

/// Sinusoidal timestep code of width `dim`, shape [t.size(), dim].
Tensor timestep_features(std::span<const int> t, std::size_t dim);

/// Binds a ModelState into a graph as trainable leaves and builds batched forward passes.
class DenoiserGraph {
public:
    DenoiserGraph(Graph& graph, const ModelState& state);

    /// x: [batch, num_scalar_tokens] noisy standardized stain vectors; t in [1, T]; c in [1, K].
    /// Returns predicted noise, [batch, num_scalar_tokens].
    Var forward(const Tensor& x, std::span<const int> t, std::span<const int> c);

    /// Flattened gradient for every parameter, parameter_layout() order.
    std::vector<double> gradients() const;

    std::span<const Var> params() const noexcept { return params_; }

private:
    Var forward_transformer(Var x, std::span<const int> t, std::span<const std::size_t> c_idx, std::size_t batch);
    Var forward_mlp(Var x, std::span<const int> t, std::span<const std::size_t> c_idx, std::size_t batch);
    Var param(const char* name) const;

    Graph* graph_;
    DenoiserArch arch_;
    std::vector<ParamSpec> layout_;
    std::vector<Var> params_;
};

/// Single-sample convenience: predicted noise for one flattened w_t.
std::vector<double> forward_denoiser(const ModelState& state, std::span<const double> w_t, int t, int c);

/// Batched inference without keeping gradients around.
Tensor predict_noise(const ModelState& state, const Tensor& x, std::span<const int> t, std::span<const int> c);

} // namespace fedsda::nn
