#pragma once

#include "fedsda/image.hpp"

#include <array>
#include <cstddef>
#include <span>
#include <vector>

namespace fedsda::ampnorm {

/// One row-major height x width plane per RGB channel.
using Planes = std::array<std::vector<double>, 3>;

/// Full (unshifted) 2-D DFT spectrum of each channel, unnormalized forward transform.
struct Spectrum {
    std::size_t width = 0;
    std::size_t height = 0;
    Planes amplitude;
    Planes phase;
};

Spectrum fft_decompose(const RgbImage& img);

/// Inverse transform of amplitude * exp(i phase), scaled by 1/N. Only the non-redundant
/// half of the spectrum is read, so the input is assumed Hermitian-symmetric.
Planes fft_reconstruct(const Planes& amplitude, const Planes& phase, std::size_t width, std::size_t height);

/// Round and clamp to [0, 255].
RgbImage quantize(const Planes& planes, std::size_t width, std::size_t height);

struct AmplitudeState {
    std::size_t width = 0;
    std::size_t height = 0;
    Planes avg_amplitude;
    double decay = 0.1;      ///< v
    std::size_t batch_size = 1;

    void validate() const;
};

/// Per batch of B consecutive images: A <- (1 - v) A + (v / B) sum_batch |F(x)|, A = 0
/// initially. A trailing partial batch is still divided by B.
AmplitudeState client_amplitude(std::span<const RgbImage> images, std::size_t batch_size, double decay);

/// (1/K) sum_k A_k.
Planes mean_amplitude(std::span<const AmplitudeState> states);

/// Image with amplitude `amplitude` and the phase of `img`, before quantization.
Planes normalize_planes(const Planes& amplitude, const RgbImage& img);

/// Every image of every client re-rendered with the federation mean amplitude.
std::vector<std::vector<RgbImage>> normalize_corpus(std::span<const AmplitudeState> states,
                                                    std::span<const std::vector<RgbImage>> corpora);

} // namespace fedsda::ampnorm
