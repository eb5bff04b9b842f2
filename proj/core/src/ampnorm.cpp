#include "fedsda/ampnorm.hpp"

#include "fedsda/error.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <memory>
#include <mutex>

namespace fedsda::ampnorm {

namespace {

// FFTW's planner is not thread-safe; execution of distinct plans is.
std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
}

struct FftwFree {
    void operator()(void* p) const noexcept { fftw_free(p); }
};
template <class T>
using FftwBuffer = std::unique_ptr<T[], FftwFree>;

template <class T>
FftwBuffer<T> fftw_buffer(std::size_t n) {
    auto* p = static_cast<T*>(fftw_malloc(sizeof(T) * n));
    if (!p) throw StageError("fft", "allocation failed");
    return FftwBuffer<T>(p);
}

struct Plan {
    fftw_plan p = nullptr;
    ~Plan() {
        if (p) {
            std::lock_guard lock(planner_mutex());
            fftw_destroy_plan(p);
        }
    }
};

} // namespace

Spectrum fft_decompose(const RgbImage& img) {
    img.validate();
    const std::size_t W = img.width, H = img.height, N = W * H, Wh = W / 2 + 1;
    auto in = fftw_buffer<double>(N);
    auto out = fftw_buffer<fftw_complex>(H * Wh);
    Plan plan;
    {
        std::lock_guard lock(planner_mutex());
        plan.p = fftw_plan_dft_r2c_2d(static_cast<int>(H), static_cast<int>(W), in.get(), out.get(), FFTW_ESTIMATE);
    }
    if (!plan.p) throw StageError("fft", "could not plan a forward transform");

    Spectrum s;
    s.width = W;
    s.height = H;
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < N; ++i) in[i] = img.pixels[i * 3 + c];
        fftw_execute(plan.p);
        auto& amp = s.amplitude[c];
        auto& ph = s.phase[c];
        amp.assign(N, 0.0);
        ph.assign(N, 0.0);
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                std::complex<double> z;
                if (x < Wh) {
                    z = {out[y * Wh + x][0], out[y * Wh + x][1]};
                } else {
                    // Hermitian symmetry of a real input: F(y, x) = conj(F(-y, -x)).
                    const std::size_t yy = (H - y) % H, xx = W - x;
                    z = {out[yy * Wh + xx][0], -out[yy * Wh + xx][1]};
                }
                amp[y * W + x] = std::abs(z);
                ph[y * W + x] = std::arg(z);
            }
    }
    return s;
}

Planes fft_reconstruct(const Planes& amplitude, const Planes& phase, std::size_t width, std::size_t height) {
    const std::size_t W = width, H = height, N = W * H, Wh = W / 2 + 1;
    if (N == 0) throw ValidationError("fft: empty spectrum");
    for (std::size_t c = 0; c < 3; ++c)
        if (amplitude[c].size() != N || phase[c].size() != N) throw ValidationError("fft: spectrum does not match dimensions");
    auto in = fftw_buffer<fftw_complex>(H * Wh);
    auto out = fftw_buffer<double>(N);
    Plan plan;
    {
        std::lock_guard lock(planner_mutex());
        plan.p = fftw_plan_dft_c2r_2d(static_cast<int>(H), static_cast<int>(W), in.get(), out.get(), FFTW_ESTIMATE);
    }
    if (!plan.p) throw StageError("fft", "could not plan an inverse transform");

    Planes planes;
    const double scale = 1.0 / static_cast<double>(N);
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < Wh; ++x) {
                const auto z = std::polar(amplitude[c][y * W + x], phase[c][y * W + x]);
                in[y * Wh + x][0] = z.real();
                in[y * Wh + x][1] = z.imag();
            }
        fftw_execute(plan.p);
        planes[c].resize(N);
        for (std::size_t i = 0; i < N; ++i) planes[c][i] = out[i] * scale;
    }
    return planes;
}

RgbImage quantize(const Planes& planes, std::size_t width, std::size_t height) {
    RgbImage img(width, height);
    for (std::size_t c = 0; c < 3; ++c) {
        if (planes[c].size() != width * height) throw ValidationError("quantize: plane does not match dimensions");
        for (std::size_t i = 0; i < width * height; ++i)
            img.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::round(planes[c][i]), 0.0, 255.0));
    }
    return img;
}

void AmplitudeState::validate() const {
    if (width == 0 || height == 0) throw ValidationError("amplitude state: empty dimensions");
    for (const auto& p : avg_amplitude)
        if (p.size() != width * height) throw ValidationError("amplitude state: plane does not match dimensions");
    if (!(decay > 0.0 && decay <= 1.0)) throw ValidationError("amplitude state: v must lie in (0, 1]");
    if (batch_size < 1) throw ValidationError("amplitude state: batch size must be >= 1");
}

AmplitudeState client_amplitude(std::span<const RgbImage> images, std::size_t batch_size, double decay) {
    if (images.empty()) throw ValidationError("client amplitude: no images");
    if (!(decay > 0.0 && decay <= 1.0)) throw ValidationError("client amplitude: v must lie in (0, 1]");
    if (batch_size < 1) throw ValidationError("client amplitude: batch size must be >= 1");
    AmplitudeState st;
    st.width = images[0].width;
    st.height = images[0].height;
    st.decay = decay;
    st.batch_size = batch_size;
    const std::size_t N = st.width * st.height;
    for (auto& p : st.avg_amplitude) p.assign(N, 0.0);
    for (const auto& img : images)
        if (img.width != st.width || img.height != st.height)
            throw ValidationError("client amplitude: images have mixed sizes (" + std::to_string(img.width) + "x" +
                                  std::to_string(img.height) + " vs " + std::to_string(st.width) + "x" + std::to_string(st.height) + ")");

    const double w = decay / static_cast<double>(batch_size);
    Planes batch_sum;
    for (std::size_t start = 0; start < images.size(); start += batch_size) {
        for (auto& p : batch_sum) p.assign(N, 0.0);
        const std::size_t end = std::min(images.size(), start + batch_size);
        for (std::size_t i = start; i < end; ++i) {
            const auto s = fft_decompose(images[i]);
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t j = 0; j < N; ++j) batch_sum[c][j] += s.amplitude[c][j];
        }
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t j = 0; j < N; ++j) st.avg_amplitude[c][j] = (1.0 - decay) * st.avg_amplitude[c][j] + w * batch_sum[c][j];
    }
    return st;
}

Planes mean_amplitude(std::span<const AmplitudeState> states) {
    if (states.empty()) throw ValidationError("mean amplitude: no client states");
    for (const auto& s : states) {
        s.validate();
        if (s.width != states[0].width || s.height != states[0].height)
            throw ValidationError("mean amplitude: client states have different shapes");
    }
    const std::size_t N = states[0].width * states[0].height;
    Planes mean;
    for (std::size_t c = 0; c < 3; ++c) {
        mean[c].assign(N, 0.0);
        for (const auto& s : states)
            for (std::size_t j = 0; j < N; ++j) mean[c][j] += s.avg_amplitude[c][j];
        for (auto& v : mean[c]) v /= static_cast<double>(states.size());
    }
    return mean;
}

Planes normalize_planes(const Planes& amplitude, const RgbImage& img) {
    const auto s = fft_decompose(img);
    for (std::size_t c = 0; c < 3; ++c)
        if (amplitude[c].size() != img.width * img.height) throw ValidationError("amp-norm: amplitude does not match image size");
    return fft_reconstruct(amplitude, s.phase, img.width, img.height);
}

std::vector<std::vector<RgbImage>> normalize_corpus(std::span<const AmplitudeState> states, std::span<const std::vector<RgbImage>> corpora) {
    const auto mean = mean_amplitude(states);
    std::vector<std::vector<RgbImage>> out(corpora.size());
    for (std::size_t k = 0; k < corpora.size(); ++k)
        for (const auto& img : corpora[k]) {
            if (img.width != states[0].width || img.height != states[0].height)
                throw ValidationError("amp-norm: image size differs from the federation amplitude");
            auto q = quantize(normalize_planes(mean, img), img.width, img.height);
            q.I0 = img.I0;
            out[k].push_back(std::move(q));
        }
    return out;
}

} // namespace fedsda::ampnorm
