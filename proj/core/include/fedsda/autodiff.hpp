#pragma once

#include "fedsda/tensor.hpp"

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace fedsda::nn {

class Graph;

/// Handle to a node in a Graph. Cheap to copy; only valid while its graph lives.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;
};

/// Tape for reverse-mode differentiation. Nodes are appended in evaluation order,
/// so reverse insertion order is a valid topological order for backward().
///
/// Not thread-safe; one graph per training task.
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t self)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Leaf without gradient. Values must be finite.
    Var constant(Tensor value);
    /// Leaf that accumulates a gradient. Values must be finite.
    Var parameter(Tensor value);

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    const Tensor& value(std::size_t id) const { return nodes_[id].value; }

    /// Gradient of the last backward() target w.r.t. `v`; zeros if `v` was unreachable.
    Tensor grad(Var v) const;

    /// Seeds d(loss)/d(loss) = 1 and propagates. `loss` must hold a single value.
    void backward(Var loss);

    void zero_grad();

    std::size_t size() const noexcept { return nodes_.size(); }

    // Op-author interface.
    Var push(Tensor value, bool requires_grad, BackwardFn backward);
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    /// Mutable gradient buffer for node `id`, allocated as zeros on first use.
    Tensor& grad_buffer(std::size_t id);
    const Tensor& upstream(std::size_t self) const { return nodes_[self].grad; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
};

// Elementwise.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var square(Var a);
Var silu(Var a);
/// Sum of every element, rank-0 result.
Var sum(Var a);

// Dense layers on rank-2 tensors.
Var matmul(Var a, Var b);
/// x[n,k] * w[k,m] + b[m]
Var linear(Var x, Var w, Var b);
/// Normalizes each row of x[n,d] then applies gamma[d], beta[d].
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
/// Horizontal concatenation of rank-2 tensors sharing a row count.
Var concat_cols(std::span<const Var> parts);

// Token plumbing. A sequence batch is stored as [batch * tokens, hidden].

/// Multi-head self-attention core. qkv is [batch*tokens, 3*hidden] laid out as (q | k | v);
/// returns softmax(q k^T / sqrt(d_head)) v per head, heads concatenated: [batch*tokens, hidden].
Var self_attention(Var qkv, std::size_t tokens, std::size_t heads);
/// Attention probabilities [batch, heads, tokens, tokens] computed by the same routine the op uses.
Tensor attention_probabilities(const Tensor& qkv, std::size_t tokens, std::size_t heads);

/// Scalar-to-vector tokenization: out[b*P + p, :] = x[b,p] * w[p,:] + bias[p,:].
Var scalar_tokens(Var x, Var w, Var bias);
/// Row lookup table[idx[i], :] for each i.
Var gather_rows(Var table, std::span<const std::size_t> idx);
/// Interleaves per-sample token groups: each part is [batch*count_i, hidden]; output is
/// [batch*sum(count_i), hidden] with sample b's tokens contiguous, parts in the given order.
Var concat_tokens(std::span<const Var> parts, std::span<const std::size_t> counts, std::size_t batch);
/// x[batch*tokens, d] + pos[tokens, d] broadcast over the batch.
Var add_positional(Var x, Var pos);
/// Per-position scalar readout of tokens [offset, offset+P) of every sample:
/// out[b,p] = dot(z[b*tokens + offset + p, :], w[p,:]) + bias[p].
Var token_readout(Var z, std::size_t tokens, std::size_t offset, Var w, Var bias);

/// Mean over rows of the row-wise sum of squared differences; rank-0 result.
Var squared_error(Var pred, Var target);

} // namespace fedsda::nn
