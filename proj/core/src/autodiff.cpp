#include "fedsda/autodiff.hpp"

#include "fedsda/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace fedsda::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::RowVectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::RowVectorXd>;

ConstMatMap as_mat(const Tensor& t) {
    return ConstMatMap(t.data.data(), static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
}
MatMap as_mat(Tensor& t) {
    return MatMap(t.data.data(), static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
}
ConstVecMap as_vec(const Tensor& t) { return ConstVecMap(t.data.data(), static_cast<Eigen::Index>(t.size())); }
VecMap as_vec(Tensor& t) { return VecMap(t.data.data(), static_cast<Eigen::Index>(t.size())); }

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
    throw ValidationError(std::string(op) + ": " + detail);
}

void require_rank2(const char* op, const Tensor& t, const char* name) {
    if (t.rank() != 2) shape_error(op, std::string(name) + " must be rank 2, got " + shape_string(t.shape));
}

Graph& graph_of(Var a) {
    if (a.graph == nullptr) throw ValidationError("autodiff: variable is not attached to a graph");
    return *a.graph;
}

Graph& graph_of(Var a, Var b) {
    if (a.graph != b.graph) throw ValidationError("autodiff: operands belong to different graphs");
    return graph_of(a);
}

bool any_grad(Graph& g, std::initializer_list<Var> vs) {
    for (auto v : vs)
        if (g.requires_grad(v.id)) return true;
    return false;
}


} // namespace

// ---------------------------------------------------------------------------
// Graph

Var Graph::constant(Tensor value) {
    require_finite(value.data, "graph constant");
    return push(std::move(value), false, nullptr);
}

Var Graph::parameter(Tensor value) {
    require_finite(value.data, "graph parameter");
    return push(std::move(value), true, nullptr);
}

Var Graph::push(Tensor value, bool requires_grad, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, std::move(backward)});
    return Var{this, nodes_.size() - 1};
}

Tensor& Graph::grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.data.empty() && !n.value.data.empty()) n.grad = Tensor(n.value.shape, 0.0);
    return n.grad;
}

Tensor Graph::grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.data.empty()) return Tensor(n.value.shape, 0.0);
    return n.grad;
}

void Graph::zero_grad() {
    for (auto& n : nodes_) n.grad = Tensor{};
}

void Graph::backward(Var loss) {
    if (loss.graph != this) throw ValidationError("backward: loss belongs to another graph");
    if (value(loss).size() != 1) {
        throw ValidationError("backward: loss must be scalar, got shape " + shape_string(value(loss).shape));
    }
    zero_grad();
    grad_buffer(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad || !n.backward || n.grad.data.empty()) continue;
        n.backward(*this, i);
    }
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(Var a, Var b) {
    Graph& g = graph_of(a, b);
    const Tensor& x = g.value(a);
    const Tensor& y = g.value(b);
    if (!x.same_shape(y)) shape_error("add", shape_string(x.shape) + " vs " + shape_string(y.shape));
    Tensor out = x;
    as_vec(out) += as_vec(y);
    return g.push(std::move(out), any_grad(g, {a, b}), [a, b](Graph& g, std::size_t self) {
        const Tensor& up = g.upstream(self);
        if (g.requires_grad(a.id)) as_vec(g.grad_buffer(a.id)) += as_vec(up);
        if (g.requires_grad(b.id)) as_vec(g.grad_buffer(b.id)) += as_vec(up);
    });
}

Var sub(Var a, Var b) {
    Graph& g = graph_of(a, b);
    const Tensor& x = g.value(a);
    const Tensor& y = g.value(b);
    if (!x.same_shape(y)) shape_error("sub", shape_string(x.shape) + " vs " + shape_string(y.shape));
    Tensor out = x;
    as_vec(out) -= as_vec(y);
    return g.push(std::move(out), any_grad(g, {a, b}), [a, b](Graph& g, std::size_t self) {
        const Tensor& up = g.upstream(self);
        if (g.requires_grad(a.id)) as_vec(g.grad_buffer(a.id)) += as_vec(up);
        if (g.requires_grad(b.id)) as_vec(g.grad_buffer(b.id)) -= as_vec(up);
    });
}

Var mul(Var a, Var b) {
    Graph& g = graph_of(a, b);
    const Tensor& x = g.value(a);
    const Tensor& y = g.value(b);
    if (!x.same_shape(y)) shape_error("mul", shape_string(x.shape) + " vs " + shape_string(y.shape));
    Tensor out = x;
    as_vec(out).array() *= as_vec(y).array();
    return g.push(std::move(out), any_grad(g, {a, b}), [a, b](Graph& g, std::size_t self) {
        const Tensor& up = g.upstream(self);
        if (g.requires_grad(a.id))
            as_vec(g.grad_buffer(a.id)).array() += as_vec(up).array() * as_vec(g.value(b)).array();
        if (g.requires_grad(b.id))
            as_vec(g.grad_buffer(b.id)).array() += as_vec(up).array() * as_vec(g.value(a)).array();
    });
}

Var scale(Var a, double s) {
    Graph& g = graph_of(a);
    Tensor out = g.value(a);
    as_vec(out) *= s;
    return g.push(std::move(out), g.requires_grad(a.id), [a, s](Graph& g, std::size_t self) {
        as_vec(g.grad_buffer(a.id)) += s * as_vec(g.upstream(self));
    });
}

Var square(Var a) {
    Graph& g = graph_of(a);
    Tensor out = g.value(a);
    as_vec(out).array() = as_vec(out).array().square();
    return g.push(std::move(out), g.requires_grad(a.id), [a](Graph& g, std::size_t self) {
        as_vec(g.grad_buffer(a.id)).array() += 2.0 * as_vec(g.value(a)).array() * as_vec(g.upstream(self)).array();
    });
}

Var silu(Var a) {
    Graph& g = graph_of(a);
    const Tensor& x = g.value(a);
    Tensor out(x.shape);
    as_vec(out).array() = as_vec(x).array() / (1.0 + (-as_vec(x).array()).exp());
    return g.push(std::move(out), g.requires_grad(a.id), [a](Graph& g, std::size_t self) {
        const auto x = as_vec(g.value(a)).array();
        const Eigen::ArrayXXd s = (1.0 / (1.0 + (-x).exp())).eval();
        as_vec(g.grad_buffer(a.id)).array() += as_vec(g.upstream(self)).array() * s * (1.0 + x * (1.0 - s));
    });
}

Var sum(Var a) {
    Graph& g = graph_of(a);
    const double total = as_vec(g.value(a)).sum();
    return g.push(Tensor::scalar(total), g.requires_grad(a.id), [a](Graph& g, std::size_t self) {
        as_vec(g.grad_buffer(a.id)).array() += g.upstream(self)[0];
    });
}

// ---------------------------------------------------------------------------
// Dense layers

Var matmul(Var a, Var b) {
    Graph& g = graph_of(a, b);
    const Tensor& x = g.value(a);
    const Tensor& w = g.value(b);
    require_rank2("matmul", x, "lhs");
    require_rank2("matmul", w, "rhs");
    if (x.shape[1] != w.shape[0]) shape_error("matmul", shape_string(x.shape) + " x " + shape_string(w.shape));
    Tensor out(Shape{x.shape[0], w.shape[1]});
    as_mat(out).noalias() = as_mat(x) * as_mat(w);
    return g.push(std::move(out), any_grad(g, {a, b}), [a, b](Graph& g, std::size_t self) {
        const Tensor& up = g.upstream(self);
        if (g.requires_grad(a.id)) as_mat(g.grad_buffer(a.id)).noalias() += as_mat(up) * as_mat(g.value(b)).transpose();
        if (g.requires_grad(b.id)) as_mat(g.grad_buffer(b.id)).noalias() += as_mat(g.value(a)).transpose() * as_mat(up);
    });
}

Var linear(Var xv, Var wv, Var bv) {
    Graph& g = graph_of(xv, wv);
    graph_of(xv, bv);
    const Tensor& x = g.value(xv);
    const Tensor& w = g.value(wv);
    const Tensor& b = g.value(bv);
    require_rank2("linear", x, "input");
    require_rank2("linear", w, "weight");
    if (x.shape[1] != w.shape[0]) shape_error("linear", shape_string(x.shape) + " x " + shape_string(w.shape));
    if (b.size() != w.shape[1]) shape_error("linear", "bias has " + std::to_string(b.size()) + " values, expected " + std::to_string(w.shape[1]));
    Tensor out(Shape{x.shape[0], w.shape[1]});
    auto o = as_mat(out);
    o.noalias() = as_mat(x) * as_mat(w);
    o.rowwise() += as_vec(b);
    return g.push(std::move(out), any_grad(g, {xv, wv, bv}), [xv, wv, bv](Graph& g, std::size_t self) {
        const Tensor& up = g.upstream(self);
        if (g.requires_grad(xv.id)) as_mat(g.grad_buffer(xv.id)).noalias() += as_mat(up) * as_mat(g.value(wv)).transpose();
        if (g.requires_grad(wv.id)) as_mat(g.grad_buffer(wv.id)).noalias() += as_mat(g.value(xv)).transpose() * as_mat(up);
        if (g.requires_grad(bv.id)) as_vec(g.grad_buffer(bv.id)) += as_mat(up).colwise().sum();
    });
}

Var layer_norm(Var xv, Var gv, Var bv, double eps) {
    Graph& g = graph_of(xv, gv);
    graph_of(xv, bv);
    const Tensor& x = g.value(xv);
    require_rank2("layer_norm", x, "input");
    const std::size_t n = x.shape[0];
    const std::size_t d = x.shape[1];
    if (g.value(gv).size() != d || g.value(bv).size() != d) shape_error("layer_norm", "gain/bias width must be " + std::to_string(d));

    Tensor xhat(x.shape);
    std::vector<double> rstd(n);
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = &x.data[r * d];
        double mean = 0.0;
        for (std::size_t c = 0; c < d; ++c) mean += row[c];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
        var /= static_cast<double>(d);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < d; ++c) xhat.data[r * d + c] = (row[c] - mean) * rstd[r];
    }
    Tensor out = xhat;
    {
        auto o = as_mat(out);
        o.array().rowwise() *= as_vec(g.value(gv)).array();
        o.rowwise() += as_vec(g.value(bv));
    }
    return g.push(std::move(out), any_grad(g, {xv, gv, bv}),
                  [xv, gv, bv, xhat = std::move(xhat), rstd = std::move(rstd)](Graph& g, std::size_t self) {
        const Tensor& up = g.upstream(self);
        const std::size_t n = xhat.shape[0];
        const std::size_t d = xhat.shape[1];
        if (g.requires_grad(gv.id)) as_vec(g.grad_buffer(gv.id)) += (as_mat(up).array() * as_mat(xhat).array()).colwise().sum().matrix();
        if (g.requires_grad(bv.id)) as_vec(g.grad_buffer(bv.id)) += as_mat(up).colwise().sum();
        if (!g.requires_grad(xv.id)) return;
        const Tensor& gamma = g.value(gv);
        Tensor& gx = g.grad_buffer(xv.id);
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < n; ++r) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                dxhat[c] = up.data[r * d + c] * gamma[c];
                mean_d += dxhat[c];
                mean_dx += dxhat[c] * xhat.data[r * d + c];
            }
            mean_d /= static_cast<double>(d);
            mean_dx /= static_cast<double>(d);
            for (std::size_t c = 0; c < d; ++c)
                gx.data[r * d + c] += rstd[r] * (dxhat[c] - mean_d - xhat.data[r * d + c] * mean_dx);
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ValidationError("concat_cols: no inputs");
    Graph& g = graph_of(parts[0]);
    const std::size_t n = g.value(parts[0]).shape.at(0);
    std::size_t total = 0;
    bool rg = false;
    for (auto p : parts) {
        graph_of(parts[0], p);
        const Tensor& t = g.value(p);
        require_rank2("concat_cols", t, "part");
        if (t.shape[0] != n) shape_error("concat_cols", "row counts differ");
        total += t.shape[1];
        rg = rg || g.requires_grad(p.id);
    }
    Tensor out(Shape{n, total});
    std::size_t off = 0;
    for (auto p : parts) {
        const Tensor& t = g.value(p);
        as_mat(out).middleCols(static_cast<Eigen::Index>(off), static_cast<Eigen::Index>(t.shape[1])) = as_mat(t);
        off += t.shape[1];
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    return g.push(std::move(out), rg, [ps = std::move(ps)](Graph& g, std::size_t self) {
        const Tensor& up = g.upstream(self);
        std::size_t off = 0;
        for (auto p : ps) {
            const auto k = g.value(p).shape[1];
            if (g.requires_grad(p.id))
                as_mat(g.grad_buffer(p.id)) += as_mat(up).middleCols(static_cast<Eigen::Index>(off), static_cast<Eigen::Index>(k));
            off += k;
        }
    });
}

// ---------------------------------------------------------------------------
// Attention

namespace {

struct AttentionDims {
    std::size_t batch, tokens, heads, hidden, head_dim;
};

AttentionDims attention_dims(const Tensor& qkv, std::size_t tokens, std::size_t heads) {
    require_rank2("self_attention", qkv, "qkv");
    if (tokens == 0 || heads == 0) shape_error("self_attention", "tokens and heads must be positive");
    if (qkv.shape[0] % tokens != 0) shape_error("self_attention", "row count is not a multiple of tokens");
    if (qkv.shape[1] % 3 != 0) shape_error("self_attention", "qkv width must be 3*hidden");
    const std::size_t hidden = qkv.shape[1] / 3;
    if (hidden % heads != 0) shape_error("self_attention", "hidden size must be divisible by heads");
    return {qkv.shape[0] / tokens, tokens, heads, hidden, hidden / heads};
}

using StridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using StridedMutMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

// Column block [col, col + cols) of a row-major matrix with row pitch `pitch`.
StridedMap block_of(const double* base, std::size_t rows, std::size_t cols, std::size_t col, std::size_t pitch) {
    return StridedMap(base + col, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols), Eigen::OuterStride<>(static_cast<Eigen::Index>(pitch)));
}
StridedMutMap block_of(double* base, std::size_t rows, std::size_t cols, std::size_t col, std::size_t pitch) {
    return StridedMutMap(base + col, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols), Eigen::OuterStride<>(static_cast<Eigen::Index>(pitch)));
}

template <int Lc, int Dc>
void attention_forward_impl(const Tensor& qkv, const AttentionDims& a, Buffer& probs, Tensor* out) {
    using Sq = Eigen::Matrix<double, Lc, Lc, Lc == 1 ? Eigen::ColMajor : Eigen::RowMajor>;
    using Blk = Eigen::Matrix<double, Lc, Dc, Dc == 1 ? Eigen::ColMajor : Eigen::RowMajor>;
    const std::size_t L = a.tokens, D = a.hidden, dh = a.head_dim, W = 3 * D;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    probs.resize(a.batch * a.heads * L * L);
    Sq S(L, L);
    Blk Q(L, dh), K(L, dh), V(L, dh);
    for (std::size_t b = 0; b < a.batch; ++b) {
        const double* base = &qkv.data[b * L * W];
        for (std::size_t h = 0; h < a.heads; ++h) {
            Q = block_of(base, L, dh, h * dh, W);
            K = block_of(base, L, dh, D + h * dh, W);
            S.noalias() = Q.lazyProduct(K.transpose());
            // Fixed-size rowwise reductions vectorize badly; plain loops are faster here.
            for (Eigen::Index r = 0; r < S.rows(); ++r) {
                double m = S(r, 0);
                for (Eigen::Index c = 1; c < S.cols(); ++c) m = std::max(m, S(r, c));
                for (Eigen::Index c = 0; c < S.cols(); ++c) S(r, c) = (S(r, c) - m) * inv;
            }
            S = S.array().exp();
            for (Eigen::Index r = 0; r < S.rows(); ++r) {
                double z = 0.0;
                for (Eigen::Index c = 0; c < S.cols(); ++c) z += S(r, c);
                for (Eigen::Index c = 0; c < S.cols(); ++c) S(r, c) /= z;
            }
            MatMap(&probs[((b * a.heads) + h) * L * L], static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(L)) = S;
            if (out == nullptr) continue;
            V = block_of(base, L, dh, 2 * D + h * dh, W);
            block_of(&out->data[b * L * D], L, dh, h * dh, D) += S.lazyProduct(V);
        }
    }
}

template <int Lc, int Dc>
void attention_backward_impl(const Tensor& qkv, const Tensor& up, const AttentionDims& a, const Buffer& probs, Tensor& gq) {
    using Sq = Eigen::Matrix<double, Lc, Lc, Lc == 1 ? Eigen::ColMajor : Eigen::RowMajor>;
    using Blk = Eigen::Matrix<double, Lc, Dc, Dc == 1 ? Eigen::ColMajor : Eigen::RowMajor>;
    const std::size_t L = a.tokens, D = a.hidden, dh = a.head_dim, W = 3 * D;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    Sq P(L, L), dP(L, L), dS(L, L);
    Blk Q(L, dh), K(L, dh), V(L, dh), dO(L, dh);
    for (std::size_t b = 0; b < a.batch; ++b) {
        const double* base = &qkv.data[b * L * W];
        double* gbase = &gq.data[b * L * W];
        for (std::size_t h = 0; h < a.heads; ++h) {
            P = ConstMatMap(&probs[((b * a.heads) + h) * L * L], static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(L));
            Q = block_of(base, L, dh, h * dh, W);
            K = block_of(base, L, dh, D + h * dh, W);
            V = block_of(base, L, dh, 2 * D + h * dh, W);
            dO = block_of(&up.data[b * L * D], L, dh, h * dh, D);
            block_of(gbase, L, dh, 2 * D + h * dh, W) += P.transpose().lazyProduct(dO);
            dP.noalias() = dO.lazyProduct(V.transpose());
            for (Eigen::Index r = 0; r < P.rows(); ++r) {
                double dot = 0.0;
                for (Eigen::Index c = 0; c < P.cols(); ++c) dot += dP(r, c) * P(r, c);
                for (Eigen::Index c = 0; c < P.cols(); ++c) dS(r, c) = P(r, c) * (dP(r, c) - dot) * inv;
            }
            block_of(gbase, L, dh, h * dh, W) += dS.lazyProduct(K);
            block_of(gbase, L, dh, D + h * dh, W) += dS.transpose().lazyProduct(Q);
        }
    }
}

// probs: [batch, heads, tokens, tokens]
void attention_forward(const Tensor& qkv, const AttentionDims& a, Buffer& probs, Tensor* out) {
    if (a.tokens == 8 && a.head_dim == 4) attention_forward_impl<8, 4>(qkv, a, probs, out);
    else attention_forward_impl<Eigen::Dynamic, Eigen::Dynamic>(qkv, a, probs, out);
}

void attention_backward(const Tensor& qkv, const Tensor& up, const AttentionDims& a, const Buffer& probs, Tensor& gq) {
    if (a.tokens == 8 && a.head_dim == 4) attention_backward_impl<8, 4>(qkv, up, a, probs, gq);
    else attention_backward_impl<Eigen::Dynamic, Eigen::Dynamic>(qkv, up, a, probs, gq);
}

} // namespace

Tensor attention_probabilities(const Tensor& qkv, std::size_t tokens, std::size_t heads) {
    const auto a = attention_dims(qkv, tokens, heads);
    Buffer probs;
    attention_forward(qkv, a, probs, nullptr);
    return Tensor(Shape{a.batch, a.heads, a.tokens, a.tokens}, std::move(probs));
}

Var self_attention(Var qkvv, std::size_t tokens, std::size_t heads) {
    Graph& g = graph_of(qkvv);
    const Tensor& qkv = g.value(qkvv);
    const auto a = attention_dims(qkv, tokens, heads);
    Tensor out(Shape{a.batch * a.tokens, a.hidden});
    Buffer probs;
    attention_forward(qkv, a, probs, &out);
    return g.push(std::move(out), g.requires_grad(qkvv.id), [qkvv, a, probs = std::move(probs)](Graph& g, std::size_t self) {
        attention_backward(g.value(qkvv), g.upstream(self), a, probs, g.grad_buffer(qkvv.id));
    });
}

// ---------------------------------------------------------------------------
// Token plumbing

Var scalar_tokens(Var xv, Var wv, Var bv) {
    Graph& g = graph_of(xv, wv);
    graph_of(xv, bv);
    const Tensor& x = g.value(xv);
    const Tensor& w = g.value(wv);
    const Tensor& bias = g.value(bv);
    require_rank2("scalar_tokens", x, "values");
    require_rank2("scalar_tokens", w, "weight");
    if (w.shape[0] != x.shape[1] || !bias.same_shape(w)) shape_error("scalar_tokens", "weight/bias must be [positions, hidden]");
    const std::size_t B = x.shape[0], P = x.shape[1], D = w.shape[1];
    Tensor out(Shape{B * P, D});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < P; ++p) {
            const double xv_ = x.data[b * P + p];
            double* o = &out.data[(b * P + p) * D];
            for (std::size_t d = 0; d < D; ++d) o[d] = xv_ * w.data[p * D + d] + bias.data[p * D + d];
        }
    return g.push(std::move(out), any_grad(g, {xv, wv, bv}), [xv, wv, bv](Graph& g, std::size_t self) {
        const Tensor& up = g.upstream(self);
        const Tensor& x = g.value(xv);
        const Tensor& w = g.value(wv);
        const std::size_t B = x.shape[0], P = x.shape[1], D = w.shape[1];
        const bool gx = g.requires_grad(xv.id), gw = g.requires_grad(wv.id), gb = g.requires_grad(bv.id);
        Tensor* dx = gx ? &g.grad_buffer(xv.id) : nullptr;
        Tensor* dw = gw ? &g.grad_buffer(wv.id) : nullptr;
        Tensor* db = gb ? &g.grad_buffer(bv.id) : nullptr;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t p = 0; p < P; ++p) {
                const double* u = &up.data[(b * P + p) * D];
                const double xi = x.data[b * P + p];
                double acc = 0.0;
                for (std::size_t d = 0; d < D; ++d) {
                    acc += u[d] * w.data[p * D + d];
                    if (dw) dw->data[p * D + d] += u[d] * xi;
                    if (db) db->data[p * D + d] += u[d];
                }
                if (dx) dx->data[b * P + p] += acc;
            }
    });
}

Var gather_rows(Var tv, std::span<const std::size_t> idx) {
    Graph& g = graph_of(tv);
    const Tensor& table = g.value(tv);
    require_rank2("gather_rows", table, "table");
    const std::size_t D = table.shape[1];
    Tensor out(Shape{idx.size(), D});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= table.shape[0]) shape_error("gather_rows", "index " + std::to_string(idx[i]) + " out of range");
        std::copy_n(&table.data[idx[i] * D], D, &out.data[i * D]);
    }
    std::vector<std::size_t> ids(idx.begin(), idx.end());
    return g.push(std::move(out), g.requires_grad(tv.id), [tv, ids = std::move(ids)](Graph& g, std::size_t self) {
        const Tensor& up = g.upstream(self);
        Tensor& gt = g.grad_buffer(tv.id);
        const std::size_t D = gt.shape[1];
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t d = 0; d < D; ++d) gt.data[ids[i] * D + d] += up.data[i * D + d];
    });
}

Var concat_tokens(std::span<const Var> parts, std::span<const std::size_t> counts, std::size_t batch) {
    if (parts.empty() || parts.size() != counts.size()) throw ValidationError("concat_tokens: parts/counts mismatch");
    Graph& g = graph_of(parts[0]);
    const std::size_t D = g.value(parts[0]).shape.at(1);
    std::size_t L = 0;
    bool rg = false;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        graph_of(parts[0], parts[i]);
        const Tensor& t = g.value(parts[i]);
        require_rank2("concat_tokens", t, "part");
        if (t.shape[1] != D || t.shape[0] != batch * counts[i]) shape_error("concat_tokens", "part " + std::to_string(i) + " has shape " + shape_string(t.shape));
        L += counts[i];
        rg = rg || g.requires_grad(parts[i].id);
    }
    Tensor out(Shape{batch * L, D});
    for (std::size_t b = 0; b < batch; ++b) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            const Tensor& t = g.value(parts[i]);
            std::copy_n(&t.data[b * counts[i] * D], counts[i] * D, &out.data[(b * L + off) * D]);
            off += counts[i];
        }
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    std::vector<std::size_t> cs(counts.begin(), counts.end());
    return g.push(std::move(out), rg, [ps = std::move(ps), cs = std::move(cs), batch, L, D](Graph& g, std::size_t self) {
        const Tensor& up = g.upstream(self);
        std::size_t off = 0;
        for (std::size_t i = 0; i < ps.size(); ++i) {
            if (g.requires_grad(ps[i].id)) {
                Tensor& gp = g.grad_buffer(ps[i].id);
                for (std::size_t b = 0; b < batch; ++b) {
                    const double* src = &up.data[(b * L + off) * D];
                    double* dst = &gp.data[b * cs[i] * D];
                    for (std::size_t k = 0; k < cs[i] * D; ++k) dst[k] += src[k];
                }
            }
            off += cs[i];
        }
    });
}

Var add_positional(Var xv, Var pv) {
    Graph& g = graph_of(xv, pv);
    const Tensor& x = g.value(xv);
    const Tensor& pos = g.value(pv);
    require_rank2("add_positional", x, "input");
    require_rank2("add_positional", pos, "positions");
    const std::size_t L = pos.shape[0], D = pos.shape[1];
    if (x.shape[1] != D || x.shape[0] % L != 0) shape_error("add_positional", shape_string(x.shape) + " vs " + shape_string(pos.shape));
    Tensor out = x;
    for (std::size_t r = 0; r < x.shape[0]; ++r)
        for (std::size_t d = 0; d < D; ++d) out.data[r * D + d] += pos.data[(r % L) * D + d];
    return g.push(std::move(out), any_grad(g, {xv, pv}), [xv, pv, L, D](Graph& g, std::size_t self) {
        const Tensor& up = g.upstream(self);
        if (g.requires_grad(xv.id)) as_vec(g.grad_buffer(xv.id)) += as_vec(up);
        if (g.requires_grad(pv.id)) {
            Tensor& gp = g.grad_buffer(pv.id);
            const std::size_t rows = up.size() / D;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t d = 0; d < D; ++d) gp.data[(r % L) * D + d] += up.data[r * D + d];
        }
    });
}

Var token_readout(Var zv, std::size_t tokens, std::size_t offset, Var wv, Var bv) {
    Graph& g = graph_of(zv, wv);
    graph_of(zv, bv);
    const Tensor& z = g.value(zv);
    const Tensor& w = g.value(wv);
    const Tensor& bias = g.value(bv);
    require_rank2("token_readout", z, "input");
    require_rank2("token_readout", w, "weight");
    const std::size_t P = w.shape[0], D = w.shape[1];
    if (z.shape[1] != D || tokens == 0 || z.shape[0] % tokens != 0 || offset + P > tokens || bias.size() != P)
        shape_error("token_readout", "incompatible shapes " + shape_string(z.shape) + ", " + shape_string(w.shape));
    const std::size_t B = z.shape[0] / tokens;
    Tensor out(Shape{B, P});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < P; ++p) {
            const double* row = &z.data[(b * tokens + offset + p) * D];
            double s = bias.data[p];
            for (std::size_t d = 0; d < D; ++d) s += row[d] * w.data[p * D + d];
            out.data[b * P + p] = s;
        }
    return g.push(std::move(out), any_grad(g, {zv, wv, bv}), [zv, wv, bv, tokens, offset, B, P, D](Graph& g, std::size_t self) {
        const Tensor& up = g.upstream(self);
        const Tensor& z = g.value(zv);
        const Tensor& w = g.value(wv);
        Tensor* dz = g.requires_grad(zv.id) ? &g.grad_buffer(zv.id) : nullptr;
        Tensor* dw = g.requires_grad(wv.id) ? &g.grad_buffer(wv.id) : nullptr;
        Tensor* db = g.requires_grad(bv.id) ? &g.grad_buffer(bv.id) : nullptr;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t p = 0; p < P; ++p) {
                const double u = up.data[b * P + p];
                const std::size_t r = (b * tokens + offset + p) * D;
                for (std::size_t d = 0; d < D; ++d) {
                    if (dz) dz->data[r + d] += u * w.data[p * D + d];
                    if (dw) dw->data[p * D + d] += u * z.data[r + d];
                }
                if (db) db->data[p] += u;
            }
    });
}

Var squared_error(Var pv, Var tv) {
    Graph& g = graph_of(pv, tv);
    const Tensor& p = g.value(pv);
    const Tensor& t = g.value(tv);
    if (!p.same_shape(t) || p.rank() != 2) shape_error("squared_error", shape_string(p.shape) + " vs " + shape_string(t.shape));
    const double rows = static_cast<double>(p.shape[0]);
    const double loss = (as_vec(p) - as_vec(t)).squaredNorm() / rows;
    return g.push(Tensor::scalar(loss), any_grad(g, {pv, tv}), [pv, tv, rows](Graph& g, std::size_t self) {
        const double u = g.upstream(self)[0] * 2.0 / rows;
        const auto diff = (as_vec(g.value(pv)) - as_vec(g.value(tv))).eval();
        if (g.requires_grad(pv.id)) as_vec(g.grad_buffer(pv.id)) += u * diff;
        if (g.requires_grad(tv.id)) as_vec(g.grad_buffer(tv.id)) -= u * diff;
    });
}

} // namespace fedsda::nn
