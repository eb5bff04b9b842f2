#pragma once

#include "fedsda/denoiser.hpp"
#include "fedsda/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace fedsda::nn {

/// Binary model file, all integers and floats little-endian:
///
///   "FSDA"                       4 bytes magic
///   u32 version                  currently 1
///   u32 x 6 arch descriptor      backbone, hidden, heads, scalar tokens, conditions, timesteps
///   u32 n, then n parameters     in parameter_layout() order
///   u32 m, then m aux tensors    free-form metadata (schedule, data moments, ...)
///
/// Each tensor is: u32 name length, name bytes, u32 rank, u64 dims[rank], f64 payload.
inline constexpr std::uint32_t kModelFormatVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor tensor;

    bool operator==(const NamedTensor&) const = default;
};

struct ModelFile {
    ModelState state;
    std::vector<NamedTensor> aux;

    const Tensor* find_aux(const std::string& name) const;
};

void write_model(std::ostream& out, const ModelState& state, std::span<const NamedTensor> aux = {});
ModelFile read_model(std::istream& in);

void save_model(const std::filesystem::path& path, const ModelState& state, std::span<const NamedTensor> aux = {});
ModelFile load_model(const std::filesystem::path& path);

} // namespace fedsda::nn
