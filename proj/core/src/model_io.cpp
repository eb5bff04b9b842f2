#include "fedsda/model_io.hpp"

#include "fedsda/error.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace fedsda::nn {

namespace {

constexpr std::array<char, 4> kMagic{'F', 'S', 'D', 'A'};
constexpr std::uint32_t kMaxNameLength = 4096;
constexpr std::uint32_t kMaxRank = 8;

template <class U>
void put_le(std::ostream& out, U v) {
    static_assert(std::is_unsigned_v<U>);
    std::array<char, sizeof(U)> buf{};
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
    out.write(buf.data(), buf.size());
}

template <class U>
U get_le(std::istream& in) {
    std::array<unsigned char, sizeof(U)> buf{};
    in.read(reinterpret_cast<char*>(buf.data()), buf.size());
    if (!in) throw ValidationError("model file: unexpected end of data");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
    return v;
}

void put_f64(std::ostream& out, double d) { put_le(out, std::bit_cast<std::uint64_t>(d)); }
double get_f64(std::istream& in) { return std::bit_cast<double>(get_le<std::uint64_t>(in)); }

void put_u32(std::ostream& out, std::size_t v) {
    if (v > 0xFFFFFFFFu) throw ValidationError("model file: value does not fit in u32");
    put_le(out, static_cast<std::uint32_t>(v));
}

void write_tensor(std::ostream& out, const std::string& name, const Tensor& t) {
    put_u32(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, t.rank());
    for (auto d : t.shape) put_le(out, static_cast<std::uint64_t>(d));
    for (double v : t.data) put_f64(out, v);
}

NamedTensor read_tensor(std::istream& in) {
    NamedTensor nt;
    const auto len = get_le<std::uint32_t>(in);
    if (len > kMaxNameLength) throw ValidationError("model file: tensor name too long");
    nt.name.resize(len);
    in.read(nt.name.data(), len);
    if (!in) throw ValidationError("model file: truncated tensor name");
    const auto rank = get_le<std::uint32_t>(in);
    if (rank > kMaxRank) throw ValidationError("model file: tensor '" + nt.name + "' has rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get_le<std::uint64_t>(in));
    const std::size_t n = shape_size(shape);
    if (n > (std::size_t{1} << 32)) throw ValidationError("model file: tensor '" + nt.name + "' is implausibly large");
    std::vector<double> data(n);
    for (auto& v : data) v = get_f64(in);
    nt.tensor = Tensor(std::move(shape), std::move(data));
    return nt;
}

} // namespace

const Tensor* ModelFile::find_aux(const std::string& name) const {
    for (const auto& a : aux)
        if (a.name == name) return &a.tensor;
    return nullptr;
}

void write_model(std::ostream& out, const ModelState& state, std::span<const NamedTensor> aux) {
    state.validate();
    out.write(kMagic.data(), kMagic.size());
    put_le(out, kModelFormatVersion);
    const auto& a = state.arch;
    put_u32(out, static_cast<std::uint32_t>(a.backbone));
    put_u32(out, a.hidden_size);
    put_u32(out, a.num_heads);
    put_u32(out, a.num_scalar_tokens);
    put_u32(out, a.num_conditions);
    put_u32(out, a.num_timesteps);
    const auto layout = parameter_layout(a);
    put_u32(out, layout.size());
    for (const auto& spec : layout) write_tensor(out, spec.name, state.tensor(spec.name));
    put_u32(out, aux.size());
    for (const auto& t : aux) write_tensor(out, t.name, t.tensor);
    if (!out) throw StageError("model-io", "write failed");
}

ModelFile read_model(std::istream& in) {
    std::array<char, 4> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != kMagic) throw ValidationError("model file: bad magic (expected FSDA)");
    const auto version = get_le<std::uint32_t>(in);
    if (version != kModelFormatVersion) throw ValidationError("model file: unsupported version " + std::to_string(version));

    DenoiserArch arch;
    arch.backbone = static_cast<Backbone>(get_le<std::uint32_t>(in));
    arch.hidden_size = get_le<std::uint32_t>(in);
    arch.num_heads = get_le<std::uint32_t>(in);
    arch.num_scalar_tokens = get_le<std::uint32_t>(in);
    arch.num_conditions = get_le<std::uint32_t>(in);
    arch.num_timesteps = get_le<std::uint32_t>(in);
    arch.validate();

    ModelFile file;
    file.state.arch = arch;
    file.state.params.assign(arch.param_count(), 0.0);
    const auto layout = parameter_layout(arch);
    const auto n = get_le<std::uint32_t>(in);
    if (n != layout.size()) throw ValidationError("model file: expected " + std::to_string(layout.size()) + " parameters, found " + std::to_string(n));
    for (const auto& spec : layout) {
        auto nt = read_tensor(in);
        if (nt.name != spec.name) throw ValidationError("model file: expected parameter '" + spec.name + "', found '" + nt.name + "'");
        file.state.set_tensor(spec.name, nt.tensor);
    }
    const auto m = get_le<std::uint32_t>(in);
    for (std::uint32_t i = 0; i < m; ++i) file.aux.push_back(read_tensor(in));
    return file;
}

void save_model(const std::filesystem::path& path, const ModelState& state, std::span<const NamedTensor> aux) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw StageError("model-io", "cannot open " + path.string() + " for writing");
    write_model(out, state, aux);
}

ModelFile load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("model file: cannot open " + path.string());
    return read_model(in);
}

} // namespace fedsda::nn
