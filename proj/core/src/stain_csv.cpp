#include "fedsda/stain_csv.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace fedsda::io {

std::string format_double(double v) {
    char buf[40];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
    if (ec != std::errc{}) throw StageError("csv", "number formatting failed");
    return std::string(buf, ptr);
}

void write_stain_csv(std::ostream& out, std::span<const StainRecord> rows) {
    out << kStainCsvHeader << '\n';
    for (const auto& r : rows) {
        if (r.image.find_first_of(",\n\"") != std::string::npos) throw ValidationError("stain csv: image name contains a delimiter: " + r.image);
        out << r.image;
        for (int c = 0; c < 2; ++c)
            for (int row = 0; row < 3; ++row) out << ',' << format_double(r.w.w(row, c));
        out << '\n';
    }
}

void write_stain_csv(const std::filesystem::path& path, std::span<const StainRecord> rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw StageError("csv", "cannot open " + path.string() + " for writing");
    write_stain_csv(out, rows);
    if (!out) throw StageError("csv", "write failed for " + path.string());
}

std::vector<StainRecord> read_stain_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("stain csv: empty input");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kStainCsvHeader) throw ValidationError("stain csv: unexpected header '" + line + "'");
    std::vector<StainRecord> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ',')) fields.push_back(f);
        if (fields.size() != 7) throw ValidationError("stain csv: line " + std::to_string(lineno) + " has " + std::to_string(fields.size()) + " fields");
        StainRecord r;
        r.image = fields[0];
        for (int c = 0; c < 2; ++c)
            for (int row = 0; row < 3; ++row) {
                const auto& s = fields[static_cast<std::size_t>(1 + c * 3 + row)];
                double v = 0.0;
                auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
                if (ec != std::errc{} || ptr != s.data() + s.size())
                    throw ValidationError("stain csv: line " + std::to_string(lineno) + ": bad number '" + s + "'");
                r.w.w(row, c) = v;
            }
        rows.push_back(std::move(r));
    }
    return rows;
}

std::vector<StainRecord> read_stain_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("stain csv: cannot open " + path.string());
    return read_stain_csv(in);
}

} // namespace fedsda::io
