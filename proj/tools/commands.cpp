#include "commands.hpp"

#include "fedsda/align.hpp"
#include "fedsda/ampnorm.hpp"
#include "fedsda/error.hpp"
#include "fedsda/fedsim.hpp"
#include "fedsda/metrics.hpp"
#include "fedsda/parallel.hpp"
#include "fedsda/pipeline.hpp"
#include "fedsda/png_io.hpp"
#include "fedsda/stain_csv.hpp"
#include "fedsda/synth.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>

namespace fedsda::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// Density maps are stored as 16-bit PNGs holding round(h * kDensityScale).
constexpr double kDensityScale = 10000.0;

io::RunConfig effective_config(const GlobalOptions& g) {
    io::RunConfig cfg = g.config ? io::load_run_config(*g.config) : io::RunConfig{};
    if (g.seed) cfg.fed.seed = *g.seed;
    if (g.threads) cfg.fed.threads = *g.threads;
    cfg.validate();
    return cfg;
}

namespace {

std::vector<RgbImage> read_images(const std::vector<fs::path>& files) {
    std::vector<RgbImage> out;
    out.reserve(files.size());
    for (const auto& f : files) out.push_back(io::read_png(f));
    return out;
}

std::vector<fs::path> require_pngs(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw ValidationError(dir.string() + " is not a directory");
    auto files = io::list_png_files(dir);
    if (files.empty()) throw ValidationError(dir.string() + " holds no PNG files");
    return files;
}

struct Separated {
    std::vector<io::StainRecord> rows;
    std::vector<std::optional<stain::SeparationResult>> results;
};

Separated separate_dir(const std::vector<fs::path>& files, const stain::SeparationOptions& opts, std::size_t threads) {
    const auto images = read_images(files);
    Separated s;
    s.results.resize(images.size());
    parallel_for(images.size(), threads, [&](std::size_t i) {
        try {
            s.results[i] = stain::separate(images[i], opts);
        } catch (const ValidationError& e) {
            spdlog::warn("{}: separation failed: {}", files[i].filename().string(), e.what());
        }
    });
    for (std::size_t i = 0; i < files.size(); ++i)
        if (s.results[i]) s.rows.push_back({files[i].filename().string(), s.results[i]->w});
    if (s.rows.empty()) throw StageError("separate", "no image could be separated");
    return s;
}

void write_density(const fs::path& dir, const fs::path& src, const stain::DensityMap& h) {
    static constexpr const char* kNames[2] = {"hematoxylin", "eosin"};
    for (int r = 0; r < 2; ++r) {
        std::vector<std::uint16_t> px(h.cols());
        for (std::size_t i = 0; i < px.size(); ++i)
            px[i] = static_cast<std::uint16_t>(std::clamp(std::round(h.h(r, static_cast<Eigen::Index>(i)) * kDensityScale), 0.0, 65535.0));
        io::write_png_gray16(dir / (src.stem().string() + "_" + kNames[r] + ".png"), h.width, h.height, px);
    }
}

// Opens `path` for writing, or hands back stdout when no path is given.
class Output {
public:
    explicit Output(const std::optional<fs::path>& path) {
        if (path) {
            if (path->has_parent_path()) fs::create_directories(path->parent_path());
            file_.open(*path, std::ios::trunc);
            if (!file_) throw StageError("output", "cannot open " + path->string() + " for writing");
        }
    }
    std::ostream& stream() { return file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout; }

private:
    std::ofstream file_;
};

} // namespace

void run_synth(const GlobalOptions& g, const SynthArgs& a) {
    const auto cfg = effective_config(g);
    io::SyntheticSpec spec;
    spec.clients = a.clients;
    spec.cluster_means = io::SyntheticSpec::default_means(a.clients);
    spec.images_per_client = a.images;
    spec.width = a.width;
    spec.height = a.height;
    spec.cluster_std = a.cluster_std;
    spec.smoothness = a.smoothness;
    spec.validate();
    const auto m = io::generate_synthetic_federation(spec, cfg.fed.seed, a.out);
    spdlog::info("wrote {} clients x {} images to {}", m.clients.size(), a.images, a.out.string());
}

void run_separate(const GlobalOptions& g, const SeparateArgs& a) {
    const auto cfg = effective_config(g);
    auto opts = cfg.separation;
    if (a.lambda) opts.lambda = *a.lambda;
    if (a.max_iters) opts.max_iters = *a.max_iters;
    if (a.tol) opts.tol = *a.tol;
    opts.validate();
    const auto files = require_pngs(a.input);
    const auto sep = separate_dir(files, opts, cfg.fed.threads);
    fs::create_directories(a.out);
    io::write_stain_csv(a.out / "stains.csv", sep.rows);
    if (a.density) {
        fs::create_directories(a.out / "density");
        for (std::size_t i = 0; i < files.size(); ++i)
            if (sep.results[i]) write_density(a.out / "density", files[i], sep.results[i]->h);
    }
    spdlog::info("separated {}/{} images", sep.rows.size(), files.size());
}

void run_train(const GlobalOptions& g, const TrainArgs& a) {
    auto cfg = effective_config(g);
    if (a.rounds) cfg.fed.rounds = *a.rounds;
    if (a.epochs) cfg.fed.local_epochs = *a.epochs;
    if (a.batch_size) cfg.fed.batch_size = *a.batch_size;
    if (a.lr) cfg.fed.lr = *a.lr;
    if (a.eval_samples) cfg.fed.eval_samples = *a.eval_samples;
    if (a.backbone) cfg.backbone = nn::backbone_from_string(*a.backbone);
    if (a.out) cfg.model_out = *a.out;
    if (a.round_log) cfg.round_log = *a.round_log;

    std::vector<fed::ClientShard> shards;
    auto add_records = [&](const std::vector<io::StainRecord>& rows) {
        fed::ClientShard s;
        s.client_id = static_cast<int>(shards.size() + 1);
        for (const auto& r : rows) s.samples.push_back(diffusion::to_sample(r.w, s.client_id));
        shards.push_back(std::move(s));
    };
    const auto stain_files = !a.stains.empty() ? a.stains : cfg.client_stains;
    const auto manifest_path = a.manifest ? a.manifest : cfg.manifest;
    if (!stain_files.empty()) {
        for (const auto& f : stain_files) add_records(io::read_stain_csv(f));
    } else if (manifest_path) {
        const auto base = manifest_path->parent_path();
        const auto manifest = io::read_manifest(*manifest_path);
        manifest.validate_on_disk(base);
        for (const auto& c : manifest.resolved(base).clients) {
            if (c.stains) add_records(io::read_stain_csv(*c.stains));
            else add_records(separate_dir(require_pngs(c.images), cfg.separation, cfg.fed.threads).rows);
        }
    } else {
        throw ValidationError("train-diffusion: no training data (give --stains, --manifest, or set them in the config)");
    }
    cfg.fed.clients = shards.size();
    cfg.validate();

    const auto result = fed::run_federated_training(cfg.fed, shards, cfg.arch(shards.size()));
    if (cfg.model_out.has_parent_path()) fs::create_directories(cfg.model_out.parent_path());
    diffusion::save_diffusion_model(cfg.model_out, result.model);
    if (cfg.round_log.has_parent_path()) fs::create_directories(cfg.round_log.parent_path());
    fed::write_round_log_csv(cfg.round_log, result.logs);
    spdlog::info("saved {} ({} parameters)", cfg.model_out.string(), result.model.state.params.size());
}

void run_sample(const GlobalOptions& g, const SampleArgs& a) {
    const auto cfg = effective_config(g);
    if (a.count == 0) throw ValidationError("sample: --count must be positive");
    const auto model = diffusion::load_diffusion_model(a.model);
    const auto ws = diffusion::sample_many(model, a.condition, a.count, cfg.fed.seed);
    std::vector<io::StainRecord> rows;
    for (std::size_t i = 0; i < ws.size(); ++i) rows.push_back({"sample_" + std::to_string(i + 1), ws[i]});
    Output out(a.out);
    io::write_stain_csv(out.stream(), rows);
}

void run_align(const GlobalOptions& g, const AlignArgs& a) {
    const auto cfg = effective_config(g);
    const auto model = diffusion::load_diffusion_model(a.model);
    const std::size_t conditions = model.state.arch.num_conditions;
    const std::size_t K = a.k.value_or(conditions);
    if (K == 0 || K > conditions)
        throw ValidationError("align: --k " + std::to_string(K) + " outside [1, " + std::to_string(conditions) + "] for this model");
    if (a.client_id < 1) throw ValidationError("align: --client-id must be >= 1");
    const auto files = require_pngs(a.input);
    const auto images = read_images(files);

    align::AlignOptions opts;
    opts.K = K;
    opts.client_id = a.client_id;
    opts.seed = cfg.fed.seed;
    opts.threads = cfg.fed.threads;
    opts.separation = cfg.separation;
    const auto res = align::align_client(images, align::diffusion_source(model), opts);

    fs::create_directories(a.out);
    std::vector<align::ManifestRow> rows;
    std::size_t passed = 0;
    for (std::size_t i = 0; i < res.images.size(); ++i) {
        const auto& img = res.images[i];
        const auto name = align::aligned_filename(files[i], img.target_condition);
        io::write_png(a.out / name, img.image);
        rows.push_back({files[i].filename().string(), name, img.target_condition, img.ssim});
        passed += img.passed_through ? 1 : 0;
    }
    align::write_alignment_manifest(a.out / "manifest.csv", rows);
    spdlog::info("aligned {} images ({} passed through unchanged)", rows.size(), passed);
}

void run_ampnorm(const GlobalOptions& g, const AmpnormArgs& a) {
    const auto cfg = effective_config(g);
    if (a.inputs.empty()) throw ValidationError("ampnorm: no input directories");
    std::vector<std::vector<fs::path>> files;
    std::vector<std::vector<RgbImage>> corpora;
    for (const auto& dir : a.inputs) {
        files.push_back(require_pngs(dir));
        corpora.push_back(read_images(files.back()));
    }
    std::vector<ampnorm::AmplitudeState> states(corpora.size());
    parallel_for(corpora.size(), cfg.fed.threads, [&](std::size_t k) { states[k] = ampnorm::client_amplitude(corpora[k], a.batch, a.v); });
    const auto normalized = ampnorm::normalize_corpus(states, corpora);
    for (std::size_t k = 0; k < normalized.size(); ++k) {
        const auto dir = a.out / ("client_" + std::to_string(k + 1));
        fs::create_directories(dir);
        for (std::size_t i = 0; i < normalized[k].size(); ++i) io::write_png(dir / files[k][i].filename(), normalized[k][i]);
    }
    spdlog::info("normalized {} clients into {}", normalized.size(), a.out.string());
}

namespace {

std::vector<std::pair<fs::path, fs::path>> image_pairs(const fs::path& a, const fs::path& b) {
    if (fs::is_directory(a) != fs::is_directory(b)) throw ValidationError("eval: --a and --b must both be images or both be directories");
    if (!fs::is_directory(a)) return {{a, b}};
    const auto fa = require_pngs(a), fb = require_pngs(b);
    if (fa.size() != fb.size())
        throw ValidationError("eval: " + std::to_string(fa.size()) + " images in " + a.string() + " but " + std::to_string(fb.size()) + " in " + b.string());
    std::vector<std::pair<fs::path, fs::path>> out;
    for (std::size_t i = 0; i < fa.size(); ++i) out.emplace_back(fa[i], fb[i]);
    return out;
}

} // namespace

void run_eval(const GlobalOptions& g, const EvalArgs& a) {
    const auto cfg = effective_config(g);
    Output out(a.out);
    auto& os = out.stream();
    if (a.mode == "fd") {
        const auto ra = io::read_stain_csv(a.a), rb = io::read_stain_csv(a.b);
        std::vector<stain::StainMatrix> wa, wb;
        for (const auto& r : ra) wa.push_back(r.w);
        for (const auto& r : rb) wb.push_back(r.w);
        if (wa.size() < 2 || wb.size() < 2) throw ValidationError("eval fd: each CSV needs at least two stain matrices");
        const double fd = metrics::stain_set_fd(wa, wb);
        if (a.report) {
            os << "a,b,fd\n" << a.a.generic_string() << ',' << a.b.generic_string() << ',' << io::format_double(fd) << '\n';
        } else {
            os << json{{"mode", "fd"}, {"a", a.a.generic_string()}, {"b", a.b.generic_string()}, {"n_a", wa.size()}, {"n_b", wb.size()}, {"value", fd}}.dump()
               << '\n';
        }
        return;
    }
    if (a.mode != "wd" && a.mode != "ssim") throw ValidationError("eval: unknown mode '" + a.mode + "' (expected fd, wd or ssim)");
    const auto pairs = image_pairs(a.a, a.b);
    std::vector<double> values(pairs.size());
    parallel_for(pairs.size(), cfg.fed.threads, [&](std::size_t i) {
        const auto x = io::read_png(pairs[i].first), y = io::read_png(pairs[i].second);
        values[i] = a.mode == "wd" ? metrics::wasserstein_1d(x, y) : metrics::ssim(x, y);
    });
    if (a.report) {
        os << "a,b," << a.mode << '\n';
        for (std::size_t i = 0; i < pairs.size(); ++i)
            os << pairs[i].first.filename().generic_string() << ',' << pairs[i].second.filename().generic_string() << ','
               << io::format_double(values[i]) << '\n';
        return;
    }
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    os << json{{"mode", a.mode}, {"a", a.a.generic_string()}, {"b", a.b.generic_string()}, {"pairs", pairs.size()}, {"value", mean}}.dump() << '\n';
}

void run_pipeline_cmd(const GlobalOptions& g, const PipelineArgs& a) {
    auto cfg = effective_config(g);
    const auto manifest = io::read_manifest(a.manifest);
    // Without an explicit seed the manifest's seed drives the run.
    if (!g.seed && !cfg.seed_given) cfg.fed.seed = manifest.seed;
    const auto summary = io::run_pipeline(manifest, a.manifest.parent_path(), cfg, a.out);
    spdlog::info("FD before {:.6g}, after {:.6g}; SSIM {:.4f}; WD {:.4f}", summary.fd_before_mean, summary.fd_after_mean, summary.mean_ssim,
                 summary.mean_wd);
}

} // namespace fedsda::cli
