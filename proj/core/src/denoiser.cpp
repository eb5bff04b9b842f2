#include "fedsda/denoiser.hpp"

#include "fedsda/error.hpp"
#include "fedsda/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace fedsda::nn {

std::string to_string(Backbone b) {
    switch (b) {
    case Backbone::transformer: return "transformer";
    case Backbone::mlp: return "mlp";
    }
    return "unknown";
}

Backbone backbone_from_string(const std::string& s) {
    if (s == "transformer") return Backbone::transformer;
    if (s == "mlp") return Backbone::mlp;
    throw ValidationError("unknown backbone '" + s + "' (expected transformer or mlp)");
}

void DenoiserArch::validate() const {
    if (hidden_size == 0 || hidden_size % 2 != 0) throw ValidationError("denoiser: hidden_size must be a positive even number");
    if (num_scalar_tokens == 0) throw ValidationError("denoiser: num_scalar_tokens must be positive");
    if (num_conditions == 0) throw ValidationError("denoiser: num_conditions must be positive");
    if (num_timesteps == 0) throw ValidationError("denoiser: num_timesteps must be positive");
    if (backbone == Backbone::transformer) {
        if (num_heads == 0 || hidden_size % num_heads != 0)
            throw ValidationError("denoiser: hidden_size must be divisible by num_heads");
    } else if (backbone != Backbone::mlp) {
        throw ValidationError("denoiser: unknown backbone");
    }
}

std::vector<ParamSpec> parameter_layout(const DenoiserArch& arch) {
    arch.validate();
    using I = ParamSpec::Init;
    const std::size_t D = arch.hidden_size, P = arch.num_scalar_tokens, C = arch.num_conditions, L = arch.num_tokens();
    std::vector<ParamSpec> specs;
    auto add = [&](std::string name, Shape shape, I init) { specs.push_back({std::move(name), std::move(shape), init, 0}); };

    if (arch.backbone == Backbone::transformer) {
        add("tok_w", {P, D}, I::normal);
        add("tok_b", {P, D}, I::zeros);
        add("time_w1", {D, 2 * D}, I::normal);
        add("time_b1", {2 * D}, I::zeros);
        add("time_w2", {2 * D, D}, I::normal);
        add("time_b2", {D}, I::zeros);
        add("cond_emb", {C, D}, I::normal);
        add("pos_emb", {L, D}, I::normal);
        add("ln1_g", {D}, I::ones);
        add("ln1_b", {D}, I::zeros);
        add("qkv_w", {D, 3 * D}, I::normal);
        add("qkv_b", {3 * D}, I::zeros);
        add("proj_w", {D, D}, I::normal);
        add("proj_b", {D}, I::zeros);
        add("ln2_g", {D}, I::ones);
        add("ln2_b", {D}, I::zeros);
        add("ffn_w1", {D, 2 * D}, I::normal);
        add("ffn_b1", {2 * D}, I::zeros);
        add("ffn_w2", {2 * D, D}, I::normal);
        add("ffn_b2", {D}, I::zeros);
        add("lnf_g", {D}, I::ones);
        add("lnf_b", {D}, I::zeros);
        add("head_w", {P, D}, I::zeros);
        add("head_b", {P}, I::zeros);
    } else {
        add("cond_emb", {C, D}, I::normal);
        add("mlp_w1", {P + 2 * D, D}, I::normal);
        add("mlp_b1", {D}, I::zeros);
        add("mlp_w2", {D, P}, I::zeros);
        add("mlp_b2", {P}, I::zeros);
    }
    std::size_t offset = 0;
    for (auto& s : specs) {
        s.offset = offset;
        offset += shape_size(s.shape);
    }
    return specs;
}

std::size_t DenoiserArch::param_count() const {
    const auto layout = parameter_layout(*this);
    return layout.back().offset + shape_size(layout.back().shape);
}

ModelState ModelState::initialize(const DenoiserArch& arch, std::uint64_t seed) {
    ModelState s{arch, std::vector<double>(arch.param_count(), 0.0)};
    Rng rng(seed);
    for (const auto& spec : parameter_layout(arch)) {
        const std::size_t n = shape_size(spec.shape);
        for (std::size_t i = 0; i < n; ++i) {
            double v = 0.0;
            switch (spec.init) {
            case ParamSpec::Init::zeros: v = 0.0; break;
            case ParamSpec::Init::ones: v = 1.0; break;
            case ParamSpec::Init::normal: {
                double z;
                do { z = standard_normal(rng); } while (std::abs(z) > 2.0);
                v = 0.02 * z;
                break;
            }
            }
            s.params[spec.offset + i] = v;
        }
    }
    return s;
}

void ModelState::validate() const {
    if (params.size() != arch.param_count()) {
        throw ValidationError("model state: " + std::to_string(params.size()) + " parameters, architecture declares " +
                              std::to_string(arch.param_count()));
    }
}

Tensor ModelState::tensor(const std::string& name) const {
    for (const auto& spec : parameter_layout(arch)) {
        if (spec.name != name) continue;
        const auto first = params.begin() + static_cast<std::ptrdiff_t>(spec.offset);
        return Tensor(spec.shape, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(shape_size(spec.shape))));
    }
    throw ValidationError("model state: no parameter named '" + name + "'");
}

void ModelState::set_tensor(const std::string& name, const Tensor& t) {
    for (const auto& spec : parameter_layout(arch)) {
        if (spec.name != name) continue;
        if (t.shape != spec.shape) throw ValidationError("model state: shape mismatch for '" + name + "'");
        std::copy(t.data.begin(), t.data.end(), params.begin() + static_cast<std::ptrdiff_t>(spec.offset));
        return;
    }
    throw ValidationError("model state: no parameter named '" + name + "'");
}

Tensor timestep_features(std::span<const int> t, std::size_t dim) {
    const std::size_t half = dim / 2;
    Tensor out(Shape{t.size(), dim});
    for (std::size_t i = 0; i < t.size(); ++i) {
        for (std::size_t k = 0; k < half; ++k) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
            const double a = static_cast<double>(t[i]) * freq;
            out.data[i * dim + k] = std::sin(a);
            out.data[i * dim + half + k] = std::cos(a);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

DenoiserGraph::DenoiserGraph(Graph& graph, const ModelState& state)
    : graph_(&graph), arch_(state.arch), layout_(parameter_layout(state.arch)) {
    state.validate();
    params_.reserve(layout_.size());
    for (const auto& spec : layout_) {
        const auto first = state.params.begin() + static_cast<std::ptrdiff_t>(spec.offset);
        params_.push_back(graph.parameter(
            Tensor(spec.shape, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(shape_size(spec.shape))))));
    }
}

Var DenoiserGraph::param(const char* name) const {
    for (std::size_t i = 0; i < layout_.size(); ++i)
        if (layout_[i].name == name) return params_[i];
    throw ValidationError(std::string("denoiser: missing parameter ") + name);
}

Var DenoiserGraph::forward(const Tensor& x, std::span<const int> t, std::span<const int> c) {
    if (x.rank() != 2 || x.shape[1] != arch_.num_scalar_tokens)
        throw ValidationError("denoiser: input must be [batch, " + std::to_string(arch_.num_scalar_tokens) + "], got " + shape_string(x.shape));
    const std::size_t batch = x.shape[0];
    if (t.size() != batch || c.size() != batch) throw ValidationError("denoiser: t and c must have one entry per sample");
    std::vector<std::size_t> c_idx(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        if (t[i] < 1 || static_cast<std::size_t>(t[i]) > arch_.num_timesteps)
            throw ValidationError("denoiser: timestep " + std::to_string(t[i]) + " outside [1, " + std::to_string(arch_.num_timesteps) + "]");
        if (c[i] < 1 || static_cast<std::size_t>(c[i]) > arch_.num_conditions)
            throw ValidationError("denoiser: condition " + std::to_string(c[i]) + " outside [1, " + std::to_string(arch_.num_conditions) + "]");
        c_idx[i] = static_cast<std::size_t>(c[i] - 1);
    }
    Var xv = graph_->constant(x);
    return arch_.backbone == Backbone::transformer ? forward_transformer(xv, t, c_idx, batch) : forward_mlp(xv, t, c_idx, batch);
}

Var DenoiserGraph::forward_transformer(Var x, std::span<const int> t, std::span<const std::size_t> c_idx, std::size_t batch) {
    Graph& g = *graph_;
    const std::size_t D = arch_.hidden_size, P = arch_.num_scalar_tokens, L = arch_.num_tokens();

    Var scalar = scalar_tokens(x, param("tok_w"), param("tok_b"));
    Var tfeat = g.constant(timestep_features(t, D));
    Var ttok = linear(silu(linear(tfeat, param("time_w1"), param("time_b1"))), param("time_w2"), param("time_b2"));
    Var ctok = gather_rows(param("cond_emb"), c_idx);

    const Var parts[] = {ttok, ctok, scalar};
    const std::size_t counts[] = {1, 1, P};
    Var h = add_positional(concat_tokens(parts, counts, batch), param("pos_emb"));

    Var a = layer_norm(h, param("ln1_g"), param("ln1_b"));
    a = self_attention(linear(a, param("qkv_w"), param("qkv_b")), L, arch_.num_heads);
    h = add(h, linear(a, param("proj_w"), param("proj_b")));

    Var f = layer_norm(h, param("ln2_g"), param("ln2_b"));
    f = linear(silu(linear(f, param("ffn_w1"), param("ffn_b1"))), param("ffn_w2"), param("ffn_b2"));
    h = add(h, f);

    h = layer_norm(h, param("lnf_g"), param("lnf_b"));
    return token_readout(h, L, 2, param("head_w"), param("head_b"));
}

Var DenoiserGraph::forward_mlp(Var x, std::span<const int> t, std::span<const std::size_t> c_idx, std::size_t) {
    Graph& g = *graph_;
    Var tfeat = g.constant(timestep_features(t, arch_.hidden_size));
    Var cemb = gather_rows(param("cond_emb"), c_idx);
    const Var parts[] = {x, tfeat, cemb};
    Var h = silu(linear(concat_cols(parts), param("mlp_w1"), param("mlp_b1")));
    return linear(h, param("mlp_w2"), param("mlp_b2"));
}

std::vector<double> DenoiserGraph::gradients() const {
    std::vector<double> flat(layout_.back().offset + shape_size(layout_.back().shape), 0.0);
    for (std::size_t i = 0; i < layout_.size(); ++i) {
        const Tensor gt = graph_->grad(params_[i]);
        std::copy(gt.data.begin(), gt.data.end(), flat.begin() + static_cast<std::ptrdiff_t>(layout_[i].offset));
    }
    return flat;
}

Tensor predict_noise(const ModelState& state, const Tensor& x, std::span<const int> t, std::span<const int> c) {
    Graph g;
    DenoiserGraph net(g, state);
    return g.value(net.forward(x, t, c));
}

std::vector<double> forward_denoiser(const ModelState& state, std::span<const double> w_t, int t, int c) {
    if (w_t.size() != state.arch.num_scalar_tokens)
        throw ValidationError("denoiser: expected " + std::to_string(state.arch.num_scalar_tokens) + " inputs, got " + std::to_string(w_t.size()));
    require_finite(w_t, "denoiser input");
    const Tensor x(Shape{1, w_t.size()}, std::vector<double>(w_t.begin(), w_t.end()));
    const int ts[] = {t};
    const int cs[] = {c};
    return predict_noise(state, x, ts, cs).values();
}

} // namespace fedsda::nn
