#include "fedsda/config.hpp"

#include "fedsda/error.hpp"
#include "fedsda/png_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

namespace fedsda::io {

using nlohmann::json;
namespace fs = std::filesystem;

void FederationManifest::validate() const {
    if (clients.empty()) throw ValidationError("manifest: no clients");
    for (std::size_t k = 0; k < clients.size(); ++k) {
        if (clients[k].client_id != static_cast<int>(k + 1))
            throw ValidationError("manifest: client ids must be 1..K in order, entry " + std::to_string(k + 1) + " has id " +
                                  std::to_string(clients[k].client_id));
        if (clients[k].images.empty()) throw ValidationError("manifest: client " + std::to_string(k + 1) + " has no image directory");
    }
}

FederationManifest FederationManifest::resolved(const fs::path& base) const {
    FederationManifest m = *this;
    for (auto& c : m.clients) {
        if (c.images.is_relative()) c.images = base / c.images;
        if (c.stains && c.stains->is_relative()) c.stains = base / *c.stains;
    }
    return m;
}

void FederationManifest::validate_on_disk(const fs::path& base) const {
    validate();
    for (const auto& c : resolved(base).clients) {
        if (!fs::is_directory(c.images)) throw ValidationError("manifest: image directory " + c.images.string() + " does not exist");
        if (list_png_files(c.images).empty()) throw ValidationError("manifest: image directory " + c.images.string() + " holds no PNG files");
        if (c.stains && !fs::is_regular_file(*c.stains)) throw ValidationError("manifest: stain file " + c.stains->string() + " does not exist");
    }
}

void write_manifest(std::ostream& out, const FederationManifest& m) {
    m.validate();
    json j;
    j["image_size"] = {m.width, m.height};
    j["seed"] = m.seed;
    j["clients"] = json::array();
    for (const auto& c : m.clients) {
        json e{{"client_id", c.client_id}, {"images", c.images.generic_string()}};
        if (c.stains) e["stains"] = c.stains->generic_string();
        j["clients"].push_back(std::move(e));
    }
    out << j.dump(2) << '\n';
}

void write_manifest(const fs::path& path, const FederationManifest& m) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw StageError("manifest", "cannot open " + path.string() + " for writing");
    write_manifest(out, m);
}

FederationManifest read_manifest(std::istream& in) {
    FederationManifest m;
    try {
        const json j = json::parse(in);
        const auto& size = j.at("image_size");
        if (!size.is_array() || size.size() != 2) throw ValidationError("manifest: image_size must be [width, height]");
        m.width = size[0].get<std::size_t>();
        m.height = size[1].get<std::size_t>();
        m.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& e : j.at("clients")) {
            ClientEntry c;
            c.client_id = e.at("client_id").get<int>();
            c.images = e.at("images").get<std::string>();
            if (e.contains("stains")) c.stains = fs::path(e.at("stains").get<std::string>());
            m.clients.push_back(std::move(c));
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("manifest: ") + e.what());
    }
    m.validate();
    return m;
}

FederationManifest read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("manifest: cannot open " + path.string());
    return read_manifest(in);
}

// ---------------------------------------------------------------------------

nn::DenoiserArch RunConfig::arch(std::size_t conditions) const {
    nn::DenoiserArch a;
    a.backbone = backbone;
    a.hidden_size = hidden_size;
    a.num_heads = num_heads;
    a.num_conditions = conditions;
    a.num_timesteps = timesteps;
    return a;
}

void RunConfig::validate() const {
    fed.validate();
    arch(fed.clients).validate();
    separation.validate();
    if (!client_stains.empty() && client_stains.size() != fed.clients)
        throw ValidationError("config: " + std::to_string(client_stains.size()) + " client stain files for K = " + std::to_string(fed.clients));
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const json& v, const std::string& key) {
    if (v.is_number()) {
        if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned()))
                throw ValidationError("config: " + key + " must be a non-negative integer");
        }
        return v.get<T>();
    }
    if (!v.is_string()) throw ValidationError("config: " + key + " must be a number");
    const auto s = v.get<std::string>();
    T out{};
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc{} || ptr != s.data() + s.size()) throw ValidationError("config: bad value '" + s + "' for " + key);
    return out;
}

std::string parse_string(const json& v, const std::string& key) {
    if (!v.is_string()) throw ValidationError("config: " + key + " must be a string");
    return v.get<std::string>();
}

fs::path parse_path(const json& v, const std::string& key, const fs::path& base) {
    fs::path p = parse_string(v, key);
    return p.is_relative() && !base.empty() ? base / p : p;
}

RunConfig config_from_json(const json& obj, const fs::path& base) {
    RunConfig c;
    std::map<std::size_t, fs::path> stains;
    bool clients_given = false;
    for (const auto& [key, v] : obj.items()) {
        if (key == "clients" || key == "K") {
            c.fed.clients = parse_number<std::size_t>(v, key);
            clients_given = true;
        }
        else if (key == "rounds" || key == "R") c.fed.rounds = parse_number<std::size_t>(v, key);
        else if (key == "local_epochs" || key == "E") c.fed.local_epochs = parse_number<std::size_t>(v, key);
        else if (key == "batch_size" || key == "B") c.fed.batch_size = parse_number<std::size_t>(v, key);
        else if (key == "lr" || key == "eta") c.fed.lr = parse_number<double>(v, key);
        else if (key == "weight_decay") c.fed.weight_decay = parse_number<double>(v, key);
        else if (key == "seed") {
            c.fed.seed = parse_number<std::uint64_t>(v, key);
            c.seed_given = true;
        }
        else if (key == "threads") c.fed.threads = parse_number<std::size_t>(v, key);
        else if (key == "eval_samples") c.fed.eval_samples = parse_number<std::size_t>(v, key);
        else if (key == "backbone") c.backbone = nn::backbone_from_string(parse_string(v, key));
        else if (key == "hidden_size") c.hidden_size = parse_number<std::size_t>(v, key);
        else if (key == "num_heads") c.num_heads = parse_number<std::size_t>(v, key);
        else if (key == "timesteps" || key == "T") c.timesteps = parse_number<std::size_t>(v, key);
        else if (key == "lambda") c.separation.lambda = parse_number<double>(v, key);
        else if (key == "max_iters") c.separation.max_iters = parse_number<std::size_t>(v, key);
        else if (key == "tol") c.separation.tol = parse_number<double>(v, key);
        else if (key == "manifest") c.manifest = parse_path(v, key, base);
        else if (key == "model") c.model_out = parse_path(v, key, base);
        else if (key == "round_log") c.round_log = parse_path(v, key, base);
        else if (key == "client_stains") {
            if (!v.is_array()) throw ValidationError("config: client_stains must be an array");
            for (std::size_t i = 0; i < v.size(); ++i) stains[i + 1] = parse_path(v[i], key, base);
        } else if (key.starts_with("client.") && key.ends_with(".stains")) {
            const auto idx = key.substr(7, key.size() - 7 - 7);
            const auto k = parse_number<std::size_t>(json(idx), key);
            if (k < 1) throw ValidationError("config: client indices start at 1");
            stains[k] = parse_path(v, key, base);
        } else {
            throw ValidationError("config: unknown key '" + key + "'");
        }
    }
    for (const auto& [k, p] : stains) {
        if (k != c.client_stains.size() + 1) throw ValidationError("config: client stain files must be numbered 1..K without gaps");
        c.client_stains.push_back(p);
    }
    if (!clients_given && !c.client_stains.empty()) c.fed.clients = c.client_stains.size();
    c.validate();
    return c;
}

} // namespace

RunConfig parse_run_config(std::istream& in, const fs::path& base) {
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
        try {
            const json j = json::parse(text);
            return config_from_json(j, base);
        } catch (const json::exception& e) {
            throw ValidationError(std::string("config: ") + e.what());
        }
    }
    json obj = json::object();
    std::istringstream lines(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(lines, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ValidationError("config: line " + std::to_string(lineno) + " is not key = value");
        const auto key = trim(line.substr(0, eq));
        if (obj.contains(key)) throw ValidationError("config: duplicate key '" + key + "'");
        obj[key] = trim(line.substr(eq + 1));
    }
    return config_from_json(obj, base);
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("config: cannot open " + path.string());
    return parse_run_config(in, path.parent_path());
}

} // namespace fedsda::io
