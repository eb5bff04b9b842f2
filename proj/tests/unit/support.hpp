#pragma once

#include "fedsda/autodiff.hpp"
#include "fedsda/image.hpp"
#include "fedsda/rng.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

namespace fedsda::test {

inline nn::Tensor random_tensor(nn::Shape shape, Rng& rng, double scale = 1.0) {
    nn::Tensor t(std::move(shape));
    for (auto& v : t.data) v = scale * standard_normal(rng);
    return t;
}

inline RgbImage random_image(std::size_t w, std::size_t h, Rng& rng) {
    RgbImage img(w, h);
    std::uniform_int_distribution<int> d(0, 255);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(d(rng));
    return img;
}

// Builds a scalar loss from one graph leaf per input tensor.
using LossBuilder = std::function<nn::Var(nn::Graph&, const std::vector<nn::Var>&)>;

struct GradCheck {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

// Central differences against the tape. Relative error |a - n| / max(|a|, |n|, floor);
// the floor keeps entries whose true gradient is ~0 from dividing rounding noise by zero.
inline GradCheck check_gradients(const std::vector<nn::Tensor>& inputs, const LossBuilder& build, double step = 1e-5,
                                 double floor = 1e-6) {
    auto loss_at = [&](const std::vector<nn::Tensor>& xs) {
        nn::Graph g;
        std::vector<nn::Var> vars;
        for (const auto& x : xs) vars.push_back(g.constant(x));
        return g.value(build(g, vars))[0];
    };
    nn::Graph g;
    std::vector<nn::Var> vars;
    for (const auto& x : inputs) vars.push_back(g.parameter(x));
    g.backward(build(g, vars));

    GradCheck out;
    auto xs = inputs;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const auto analytic = g.grad(vars[i]);
        for (std::size_t j = 0; j < inputs[i].size(); ++j) {
            const double orig = xs[i][j];
            xs[i][j] = orig + step;
            const double up = loss_at(xs);
            xs[i][j] = orig - step;
            const double down = loss_at(xs);
            xs[i][j] = orig;
            const double numeric = (up - down) / (2.0 * step);
            const double denom = std::max({std::abs(analytic[j]), std::abs(numeric), floor});
            out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic[j] - numeric) / denom);
            ++out.checked;
        }
    }
    return out;
}

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("fedsda_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

} // namespace fedsda::test
