#pragma once

#include "fedsda/stain.hpp"

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace fedsda::io {

/// One row of the stain interchange CSV:
///   image,w11,w21,w31,w12,w22,w32
/// i.e. column 1 (hematoxylin) then column 2 (eosin), values printed with 17
/// significant digits so load(save(x)) == x.
struct StainRecord {
    std::string image;
    stain::StainMatrix w;

    bool operator==(const StainRecord&) const = default;
};

inline constexpr const char* kStainCsvHeader = "image,w11,w21,w31,w12,w22,w32";

void write_stain_csv(std::ostream& out, std::span<const StainRecord> rows);
void write_stain_csv(const std::filesystem::path& path, std::span<const StainRecord> rows);
std::vector<StainRecord> read_stain_csv(std::istream& in);
std::vector<StainRecord> read_stain_csv(const std::filesystem::path& path);

std::string format_double(double v);

} // namespace fedsda::io
