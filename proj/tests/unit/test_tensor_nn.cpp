#include "support.hpp"

#include "fedsda/autodiff.hpp"
#include "fedsda/denoiser.hpp"
#include "fedsda/error.hpp"
#include "fedsda/model_io.hpp"
#include "fedsda/optim.hpp"

#include <doctest.h>

#include <cstring>
#include <sstream>

using namespace fedsda;
using namespace fedsda::nn;
using test::check_gradients;
using test::random_tensor;

namespace {

// Contracts an op's output with a fixed random tensor so every output entry matters.
Var weighted_sum(Graph& g, Var out, std::uint64_t seed) {
    Rng rng(seed);
    return sum(mul(out, g.constant(random_tensor(g.value(out).shape, rng))));
}

constexpr double kTol = 1e-4;

} // namespace

TEST_SUITE("autodiff") {

TEST_CASE("tensor construction checks sizes") {
    CHECK(Tensor(Shape{2, 3}).size() == 6);
    CHECK(Tensor::scalar(4.0).rank() == 0);
    CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>(3)), ValidationError);
}

TEST_CASE("non-finite leaves are rejected") {
    Graph g;
    Tensor t(Shape{2}, 1.0);
    t[1] = std::nan("");
    CHECK_THROWS_AS(g.constant(t), ValidationError);
    CHECK_THROWS_AS(require_finite(t.data, "x"), ValidationError);
}

TEST_CASE("shape mismatches throw") {
    Graph g;
    auto a = g.constant(Tensor(Shape{2, 3}));
    auto b = g.constant(Tensor(Shape{3, 2}));
    CHECK_THROWS_AS(add(a, b), ValidationError);
    CHECK_THROWS_AS(matmul(a, a), ValidationError);
    CHECK_THROWS_AS(g.backward(a), ValidationError);
}

TEST_CASE("unreachable parameters get zero gradients") {
    Graph g;
    auto a = g.parameter(Tensor(Shape{2}, 1.0));
    auto b = g.parameter(Tensor(Shape{2}, 2.0));
    g.backward(sum(square(a)));
    CHECK(g.grad(b).values() == std::vector<double>{0.0, 0.0});
    CHECK(g.grad(a).values() == std::vector<double>{2.0, 2.0});
}

TEST_CASE("simple closed-form gradients") {
    Graph g;
    const Tensor init(Shape{4}, std::vector<double>{0.5, -1.0, 2.0, 3.5});
    auto p = g.parameter(init);
    g.backward(sum(p));
    CHECK(g.grad(p).values() == std::vector<double>(4, 1.0));
    g.zero_grad();
    g.backward(scale(sum(square(p)), 0.5));
    CHECK(g.grad(p).data == init.data);
}

TEST_CASE("elementwise gradients") {
    Rng rng(1);
    const auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
    CHECK(check_gradients({a, b}, [](Graph& g, const auto& v) { return weighted_sum(g, add(v[0], v[1]), 7); }).max_rel_error < kTol);
    CHECK(check_gradients({a, b}, [](Graph& g, const auto& v) { return weighted_sum(g, sub(v[0], v[1]), 7); }).max_rel_error < kTol);
    CHECK(check_gradients({a, b}, [](Graph& g, const auto& v) { return weighted_sum(g, mul(v[0], v[1]), 7); }).max_rel_error < kTol);
    CHECK(check_gradients({a}, [](Graph& g, const auto& v) { return weighted_sum(g, scale(v[0], -1.7), 7); }).max_rel_error < kTol);
    CHECK(check_gradients({a}, [](Graph& g, const auto& v) { return weighted_sum(g, square(v[0]), 7); }).max_rel_error < kTol);
    CHECK(check_gradients({a}, [](Graph& g, const auto& v) { return weighted_sum(g, silu(v[0]), 7); }).max_rel_error < kTol);
    CHECK(check_gradients({a}, [](Graph&, const auto& v) { return sum(v[0]); }).max_rel_error < kTol);
}

TEST_CASE("dense layer gradients") {
    Rng rng(2);
    const auto x = random_tensor({5, 4}, rng), w = random_tensor({4, 3}, rng), b = random_tensor({3}, rng);
    CHECK(check_gradients({x, w}, [](Graph& g, const auto& v) { return weighted_sum(g, matmul(v[0], v[1]), 3); }).max_rel_error < kTol);
    CHECK(check_gradients({x, w, b}, [](Graph& g, const auto& v) { return weighted_sum(g, linear(v[0], v[1], v[2]), 3); }).max_rel_error <
          kTol);
    const auto gamma = random_tensor({4}, rng), beta = random_tensor({4}, rng);
    CHECK(check_gradients({x, gamma, beta}, [](Graph& g, const auto& v) { return weighted_sum(g, layer_norm(v[0], v[1], v[2]), 3); })
              .max_rel_error < kTol);
    const auto y = random_tensor({5, 2}, rng);
    CHECK(check_gradients({x, y}, [](Graph& g, const auto& v) {
              const Var parts[] = {v[0], v[1]};
              return weighted_sum(g, concat_cols(parts), 3);
          }).max_rel_error < kTol);
}

TEST_CASE("attention gradients") {
    Rng rng(3);
    SUBCASE("fixed-size path") {
        const auto qkv = random_tensor({3 * 8, 3 * 32}, rng);
        CHECK(check_gradients({qkv}, [](Graph& g, const auto& v) { return weighted_sum(g, self_attention(v[0], 8, 8), 5); })
                  .max_rel_error < kTol);
    }
    SUBCASE("general path") {
        const auto qkv = random_tensor({2 * 5, 3 * 6}, rng);
        CHECK(check_gradients({qkv}, [](Graph& g, const auto& v) { return weighted_sum(g, self_attention(v[0], 5, 2), 5); })
                  .max_rel_error < kTol);
    }
}

TEST_CASE("attention rows are distributions") {
    Rng rng(4);
    const auto qkv = random_tensor({2 * 5, 3 * 6}, rng, 3.0);
    const auto p = attention_probabilities(qkv, 5, 3);
    REQUIRE(p.shape == Shape{2, 3, 5, 5});
    for (std::size_t row = 0; row < 2 * 3 * 5; ++row) {
        double s = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
            CHECK(p[row * 5 + j] >= 0.0);
            s += p[row * 5 + j];
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("token plumbing gradients") {
    Rng rng(5);
    const std::size_t B = 3, P = 4, D = 5, L = 6;
    const auto x = random_tensor({B, P}, rng), w = random_tensor({P, D}, rng), bias = random_tensor({P, D}, rng);
    CHECK(check_gradients({x, w, bias}, [](Graph& g, const auto& v) { return weighted_sum(g, scalar_tokens(v[0], v[1], v[2]), 9); })
              .max_rel_error < kTol);

    const auto table = random_tensor({3, D}, rng);
    const std::vector<std::size_t> idx{2, 0, 2, 1};
    CHECK(check_gradients({table}, [&](Graph& g, const auto& v) { return weighted_sum(g, gather_rows(v[0], idx), 9); }).max_rel_error <
          kTol);

    const auto p1 = random_tensor({B * 1, D}, rng), p2 = random_tensor({B * 2, D}, rng);
    CHECK(check_gradients({p1, p2}, [&](Graph& g, const auto& v) {
              const Var parts[] = {v[0], v[1]};
              const std::size_t counts[] = {1, 2};
              return weighted_sum(g, concat_tokens(parts, counts, B), 9);
          }).max_rel_error < kTol);

    const auto z = random_tensor({B * L, D}, rng), pos = random_tensor({L, D}, rng);
    CHECK(check_gradients({z, pos}, [&](Graph& g, const auto& v) { return weighted_sum(g, add_positional(v[0], v[1]), 9); }).max_rel_error <
          kTol);

    const auto rw = random_tensor({P, D}, rng), rb = random_tensor({P}, rng);
    CHECK(check_gradients({z, rw, rb}, [&](Graph& g, const auto& v) { return weighted_sum(g, token_readout(v[0], L, 2, v[1], v[2]), 9); })
              .max_rel_error < kTol);

    const auto pred = random_tensor({B, P}, rng), target = random_tensor({B, P}, rng);
    CHECK(check_gradients({pred, target}, [](Graph&, const auto& v) { return squared_error(v[0], v[1]); }).max_rel_error < kTol);
}

TEST_CASE("concat_tokens keeps each sample's tokens together") {
    Graph g;
    const auto a = g.constant(Tensor(Shape{2, 1}, std::vector<double>{1, 2}));
    const auto b = g.constant(Tensor(Shape{4, 1}, std::vector<double>{10, 11, 20, 21}));
    const Var parts[] = {a, b};
    const std::size_t counts[] = {1, 2};
    CHECK(g.value(concat_tokens(parts, counts, 2)).values() == std::vector<double>{1, 10, 11, 2, 20, 21});
}

TEST_CASE("squared_error is the per-row sum averaged over rows") {
    Graph g;
    const auto p = g.constant(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3, 4}));
    const auto t = g.constant(Tensor(Shape{2, 2}, std::vector<double>{0, 0, 3, 2}));
    CHECK(g.value(squared_error(p, t))[0] == doctest::Approx((1.0 + 4.0 + 0.0 + 4.0) / 2.0));
}

} // TEST_SUITE

TEST_SUITE("denoiser") {

namespace {

ModelState perturbed_state(const DenoiserArch& arch, std::uint64_t seed) {
    auto s = ModelState::initialize(arch, seed);
    Rng rng(seed + 1);
    for (auto& p : s.params) p += 0.2 * standard_normal(rng);
    return s;
}

double full_check(const DenoiserArch& arch) {
    const auto state = perturbed_state(arch, 11);
    Rng rng(12);
    const auto x = random_tensor({2, arch.num_scalar_tokens}, rng);
    const auto target = random_tensor({2, arch.num_scalar_tokens}, rng);
    const std::vector<int> t{3, static_cast<int>(arch.num_timesteps)};
    const std::vector<int> c{1, static_cast<int>(arch.num_conditions)};

    Graph g;
    DenoiserGraph net(g, state);
    g.backward(squared_error(net.forward(x, t, c), g.constant(target)));
    const auto analytic = net.gradients();

    auto loss_at = [&](const ModelState& s) {
        const auto pred = predict_noise(s, x, t, c);
        double total = 0.0;
        for (std::size_t i = 0; i < pred.size(); ++i) total += (pred[i] - target[i]) * (pred[i] - target[i]);
        return total / 2.0;
    };
    constexpr double h = 1e-5;
    auto probe = state;
    double worst = 0.0;
    for (std::size_t i = 0; i < probe.params.size(); ++i) {
        const double orig = probe.params[i];
        probe.params[i] = orig + h;
        const double up = loss_at(probe);
        probe.params[i] = orig - h;
        const double down = loss_at(probe);
        probe.params[i] = orig;
        const double numeric = (up - down) / (2 * h);
        // The key bias has an exactly zero gradient (softmax shift invariance), where the
        // difference quotient is pure rounding noise, hence the larger floor.
        worst = std::max(worst, std::abs(numeric - analytic[i]) / std::max({std::abs(numeric), std::abs(analytic[i]), 1e-4}));
    }
    return worst;
}

} // namespace

TEST_CASE("default transformer lands near the 13.2K budget") {
    DenoiserArch arch;
    const auto n = arch.param_count();
    CHECK(n >= 11200);
    CHECK(n <= 15200);
    std::size_t declared = 0;
    for (const auto& p : parameter_layout(arch)) declared += shape_size(p.shape);
    CHECK(declared == n);
    CHECK(ModelState::initialize(arch, 0).params.size() == n);
}

TEST_CASE("architecture validation") {
    DenoiserArch a;
    a.num_heads = 5;
    CHECK_THROWS_AS(a.validate(), ValidationError);
    a = {};
    a.num_conditions = 0;
    CHECK_THROWS_AS(a.validate(), ValidationError);
    CHECK_THROWS_AS(backbone_from_string("cnn"), ValidationError);
    CHECK(backbone_from_string(to_string(Backbone::mlp)) == Backbone::mlp);
}

TEST_CASE("zero readout predicts zero noise") {
    DenoiserArch arch;
    const auto s = ModelState::initialize(arch, 3);
    const std::vector<double> w{0.3, -1.0, 2.0, 0.1, 0.0, 5.0};
    for (double v : forward_denoiser(s, w, 17, 2)) CHECK(v == 0.0);
}

TEST_CASE("forward is deterministic and batch-independent") {
    DenoiserArch arch;
    const auto s = perturbed_state(arch, 4);
    const std::vector<double> w{0.3, -1.0, 2.0, 0.1, 0.0, 5.0};
    const auto a = forward_denoiser(s, w, 500, 1);
    CHECK(a == forward_denoiser(s, w, 500, 1));
    CHECK(a.size() == 6);

    Tensor x(Shape{2, 6});
    for (std::size_t j = 0; j < 6; ++j) {
        x.at(0, j) = 1.0;
        x.at(1, j) = w[j];
    }
    const std::vector<int> t{10, 500}, c{2, 1};
    const auto batched = predict_noise(s, x, t, c);
    for (std::size_t j = 0; j < 6; ++j) CHECK(batched.at(1, j) == doctest::Approx(a[j]).epsilon(1e-12));
}

TEST_CASE("forward rejects bad timesteps and conditions") {
    DenoiserArch arch;
    const auto s = ModelState::initialize(arch, 3);
    const std::vector<double> w(6, 0.1);
    CHECK_THROWS_AS(forward_denoiser(s, w, 0, 1), ValidationError);
    CHECK_THROWS_AS(forward_denoiser(s, w, 1001, 1), ValidationError);
    CHECK_THROWS_AS(forward_denoiser(s, w, 1, 3), ValidationError);
    CHECK_THROWS_AS(forward_denoiser(s, std::vector<double>(5, 0.1), 1, 1), ValidationError);
}

TEST_CASE("full transformer gradient matches finite differences") {
    CHECK(full_check(DenoiserArch{}) < kTol);
}

TEST_CASE("full MLP gradient matches finite differences") {
    DenoiserArch arch;
    arch.backbone = Backbone::mlp;
    CHECK(full_check(arch) < kTol);
}

TEST_CASE("named tensors round-trip through the flat vector") {
    DenoiserArch arch;
    auto s = ModelState::initialize(arch, 9);
    auto t = s.tensor("qkv_w");
    t[0] = 42.0;
    s.set_tensor("qkv_w", t);
    CHECK(s.tensor("qkv_w")[0] == 42.0);
    CHECK_THROWS_AS(s.tensor("nope"), ValidationError);
    CHECK_THROWS_AS(s.set_tensor("qkv_b", t), ValidationError);
}

} // TEST_SUITE

TEST_SUITE("optimizer") {

TEST_CASE("zero gradient without decay leaves parameters alone") {
    std::vector<double> p{1.0, -2.0, 3.0};
    const auto before = p;
    auto opt = OptimState::for_params(3, AdamWConfig{1e-2, 0.0});
    const std::vector<double> g(3, 0.0);
    for (int i = 0; i < 5; ++i) adamw_step(p, g, opt);
    CHECK(p == before);
    CHECK(opt.step == 5);
}

TEST_CASE("decay is decoupled from the gradient") {
    const double lr = 1e-2, wd = 0.5;
    std::vector<double> p{1.0, -2.0, 3.0};
    const auto before = p;
    auto opt = OptimState::for_params(3, AdamWConfig{lr, wd});
    const std::vector<double> g(3, 0.0);
    for (int i = 0; i < 3; ++i) adamw_step(p, g, opt);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i] == doctest::Approx(before[i] * std::pow(1 - lr * wd, 3)).epsilon(1e-14));
}

TEST_CASE("first step follows the bias-corrected closed form") {
    AdamWConfig cfg{1e-3, 0.1, 0.9, 0.999, 1e-8};
    std::vector<double> p{0.5, -0.5};
    const std::vector<double> g{2.0, -0.25};
    auto opt = OptimState::for_params(2, cfg);
    adamw_step(p, g, opt);
    for (std::size_t i = 0; i < 2; ++i) {
        const double orig = i == 0 ? 0.5 : -0.5;
        // m_hat = g, v_hat = g^2 after one step
        const double expect = orig * (1 - cfg.lr * cfg.weight_decay) - cfg.lr * g[i] / (std::abs(g[i]) + cfg.eps);
        CHECK(p[i] == doctest::Approx(expect).epsilon(1e-14));
    }
}

TEST_CASE("AdamW descends a quadratic") {
    const std::vector<double> target{1.0, -2.0, 0.5};
    std::vector<double> p(3, 0.0);
    auto f = [&] {
        double acc = 0.0;
        for (std::size_t i = 0; i < 3; ++i) acc += (p[i] - target[i]) * (p[i] - target[i]);
        return acc;
    };
    auto opt = OptimState::for_params(3, AdamWConfig{1e-2, 3e-2});
    std::vector<double> history{f()};
    for (int step = 0; step < 10; ++step) {
        std::vector<double> g(3);
        for (std::size_t i = 0; i < 3; ++i) g[i] = 2.0 * (p[i] - target[i]);
        adamw_step(p, g, opt);
        history.push_back(f());
    }
    for (std::size_t k = 2; k < history.size(); ++k) CHECK(history[k] < history[k - 1]);
}

TEST_CASE("mismatched buffers are rejected") {
    std::vector<double> p(3, 0.0);
    auto opt = OptimState::for_params(2);
    CHECK_THROWS_AS(adamw_step(p, std::vector<double>(3, 0.0), opt), ValidationError);
}

} // TEST_SUITE

TEST_SUITE("model_io") {

TEST_CASE("model files round-trip bit-exactly") {
    DenoiserArch arch;
    arch.num_conditions = 3;
    auto s = ModelState::initialize(arch, 21);
    Rng rng(2);
    for (auto& p : s.params) p += standard_normal(rng) * 1e-3;
    const NamedTensor aux[] = {{"extra", Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3, 0.1})}};
    std::stringstream buf;
    write_model(buf, s, aux);
    const auto back = read_model(buf);
    CHECK(back.state == s);
    REQUIRE(back.aux.size() == 1);
    CHECK(back.aux[0] == aux[0]);
    CHECK(back.find_aux("extra") != nullptr);
    CHECK(back.find_aux("missing") == nullptr);
}

TEST_CASE("header layout is little-endian FSDA v1") {
    DenoiserArch arch;
    arch.backbone = Backbone::mlp;
    std::stringstream buf;
    write_model(buf, ModelState::initialize(arch, 1));
    const std::string bytes = buf.str();
    REQUIRE(bytes.size() > 8 + 24);
    CHECK(bytes.substr(0, 4) == "FSDA");
    std::uint32_t version = 0, backbone = 0;
    std::memcpy(&version, bytes.data() + 4, 4);
    std::memcpy(&backbone, bytes.data() + 8, 4);
    CHECK(version == kModelFormatVersion);
    CHECK(backbone == static_cast<std::uint32_t>(Backbone::mlp));
}

TEST_CASE("corrupt model files are rejected") {
    std::stringstream buf;
    write_model(buf, ModelState::initialize(DenoiserArch{}, 1));
    std::string bytes = buf.str();
    {
        std::stringstream trunc(bytes.substr(0, bytes.size() / 2));
        CHECK_THROWS_AS(read_model(trunc), ValidationError);
    }
    bytes[0] = 'X';
    std::stringstream bad(bytes);
    CHECK_THROWS_AS(read_model(bad), ValidationError);
}

} // TEST_SUITE
