#include "support.hpp"

#include "fedsda/config.hpp"
#include "fedsda/error.hpp"
#include "fedsda/pipeline.hpp"
#include "fedsda/png_io.hpp"
#include "fedsda/stain_csv.hpp"
#include "fedsda/synth.hpp"

#include <doctest.h>

#include <Eigen/LU>

#include <fstream>
#include <sstream>

using namespace fedsda;
using namespace fedsda::io;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

RunConfig quick_config(std::size_t rounds = 1) {
    RunConfig cfg;
    cfg.fed.rounds = rounds;
    cfg.fed.local_epochs = 40;
    cfg.fed.batch_size = 16;
    cfg.fed.lr = 2e-3;
    cfg.fed.eval_samples = 50;
    cfg.fed.seed = 4;
    cfg.fed.threads = 4;
    cfg.timesteps = 200;
    return cfg;
}

SyntheticSpec small_spec(std::size_t clients, std::size_t images) {
    auto spec = SyntheticSpec::two_client_default();
    spec.clients = clients;
    spec.cluster_means = SyntheticSpec::default_means(clients);
    spec.images_per_client = images;
    spec.width = 48;
    spec.height = 48;
    return spec;
}

} // namespace

TEST_SUITE("stain csv") {

TEST_CASE("round trip is exact") {
    Rng rng(1);
    const auto spec = SyntheticSpec::two_client_default();
    std::vector<StainRecord> rows;
    for (int i = 0; i < 10; ++i) rows.push_back({"img_" + std::to_string(i) + ".png", draw_stain_matrix(spec.cluster_means[i % 2], 0.05, rng)});
    std::stringstream buf;
    write_stain_csv(buf, rows);
    std::string header;
    std::getline(std::istringstream(buf.str()), header);
    CHECK(header == "image,w11,w21,w31,w12,w22,w32");
    CHECK(read_stain_csv(buf) == rows);

    test::TempDir dir("csv");
    write_stain_csv(dir.path() / "s.csv", rows);
    CHECK(read_stain_csv(dir.path() / "s.csv") == rows);
}

TEST_CASE("columns are written hematoxylin first") {
    const StainRecord r{"a.png", stain::StainMatrix::reference_he()};
    std::stringstream buf;
    write_stain_csv(buf, std::span(&r, 1));
    const auto& w = r.w.w;
    const std::string expect = "a.png," + format_double(w(0, 0)) + "," + format_double(w(1, 0)) + "," + format_double(w(2, 0)) + "," +
                               format_double(w(0, 1)) + "," + format_double(w(1, 1)) + "," + format_double(w(2, 1));
    std::string header, line;
    std::getline(buf, header);
    std::getline(buf, line);
    CHECK(line == expect);
}

TEST_CASE("malformed files are rejected") {
    std::istringstream bad_header("image,a,b\n");
    CHECK_THROWS_AS(read_stain_csv(bad_header), ValidationError);
    std::istringstream short_row("image,w11,w21,w31,w12,w22,w32\nx.png,1,0,0\n");
    CHECK_THROWS_AS(read_stain_csv(short_row), ValidationError);
    std::istringstream junk("image,w11,w21,w31,w12,w22,w32\nx.png,a,0,0,0,1,0\n");
    CHECK_THROWS_AS(read_stain_csv(junk), ValidationError);
}

} // TEST_SUITE

TEST_SUITE("png") {

TEST_CASE("rgb and gray16 round trips") {
    test::TempDir dir("png");
    Rng rng(2);
    const auto img = test::random_image(13, 7, rng);
    write_png(dir.path() / "a.png", img);
    CHECK(read_png(dir.path() / "a.png") == img);

    std::vector<std::uint16_t> vals(15);
    for (auto& v : vals) v = static_cast<std::uint16_t>(rng());
    write_png_gray16(dir.path() / "g.png", 5, 3, vals);
    std::size_t w = 0, h = 0;
    CHECK(read_png_gray16(dir.path() / "g.png", w, h) == vals);
    CHECK(w == 5);
    CHECK(h == 3);
}

TEST_CASE("listing is sorted and png-only") {
    test::TempDir dir("list");
    const RgbImage img(2, 2, 9);
    for (const char* n : {"b.png", "a.png", "c.png"}) write_png(dir.path() / n, img);
    std::ofstream(dir.path() / "notes.txt") << "x";
    const auto files = list_png_files(dir.path());
    REQUIRE(files.size() == 3);
    CHECK(files[0].filename() == "a.png");
    CHECK(files[2].filename() == "c.png");
}

TEST_CASE("unreadable files raise") {
    test::TempDir dir("bad");
    std::ofstream(dir.path() / "x.png") << "not a png";
    CHECK_THROWS(read_png(dir.path() / "x.png"));
    CHECK_THROWS(read_png(dir.path() / "missing.png"));
}

} // TEST_SUITE

TEST_SUITE("manifest and config") {

TEST_CASE("manifest round trip") {
    FederationManifest m;
    m.width = 64;
    m.height = 32;
    m.seed = 12345678901234ULL;
    m.clients = {{1, "client_1", std::nullopt}, {2, "/abs/client_2", fs::path("c2.csv")}};
    std::stringstream buf;
    write_manifest(buf, m);
    CHECK(read_manifest(buf) == m);

    const auto r = m.resolved("/base");
    CHECK(r.clients[0].images == fs::path("/base/client_1"));
    CHECK(r.clients[1].images == fs::path("/abs/client_2"));
    CHECK(*r.clients[1].stains == fs::path("/base/c2.csv"));
}

TEST_CASE("manifest ids must be dense") {
    FederationManifest m;
    m.clients = {{1, "a", std::nullopt}, {3, "b", std::nullopt}};
    CHECK_THROWS_AS(m.validate(), ValidationError);
    m.clients = {};
    CHECK_THROWS_AS(m.validate(), ValidationError);
    m.clients = {{1, "nowhere", std::nullopt}};
    CHECK_THROWS_AS(m.validate_on_disk("/nonexistent_dir_for_fedsda"), ValidationError);
}

TEST_CASE("json and key-value configs agree") {
    std::istringstream js(R"({"clients": 3, "rounds": 4, "local_epochs": 7, "batch_size": 32, "lr": 0.0005,
                              "seed": 99, "backbone": "mlp", "lambda": 0.02, "client_stains": ["a.csv", "b.csv", "c.csv"]})");
    std::istringstream kv("# federation\nclients = 3\nrounds=4\nE = 7\nbatch_size = 32\nlr = 0.0005\nseed = 99  # fixed\n"
                          "backbone = mlp\nlambda = 0.02\nclient.1.stains = a.csv\nclient.3.stains = c.csv\nclient.2.stains = b.csv\n");
    const auto a = parse_run_config(js, "/cfg"), b = parse_run_config(kv, "/cfg");
    for (const auto* c : {&a, &b}) {
        CHECK(c->fed.clients == 3);
        CHECK(c->fed.rounds == 4);
        CHECK(c->fed.local_epochs == 7);
        CHECK(c->fed.batch_size == 32);
        CHECK(c->fed.lr == 0.0005);
        CHECK(c->fed.seed == 99);
        CHECK(c->seed_given);
        CHECK(c->backbone == nn::Backbone::mlp);
        CHECK(c->separation.lambda == 0.02);
        REQUIRE(c->client_stains.size() == 3);
        CHECK(c->client_stains[1] == fs::path("/cfg/b.csv"));
    }
}

TEST_CASE("bad configs are validation errors") {
    for (const char* text : {"rounds = two\n", "nonsense = 1\n", "rounds = 1\nrounds = 2\n", "just a line\n", "{\"rounds\": -1}",
                             "{\"rounds\": ", "lr = -1\n", "client.2.stains = x.csv\n", "backbone = rnn\n"}) {
        CAPTURE(text);
        std::istringstream in(text);
        CHECK_THROWS_AS(parse_run_config(in), ValidationError);
    }
    std::istringstream empty("");
    CHECK_FALSE(parse_run_config(empty).seed_given);
}

} // TEST_SUITE

TEST_SUITE("synthetic federation") {

TEST_CASE("zero cluster spread gives one matrix per client") {
    auto spec = small_spec(2, 5);
    spec.cluster_std = 0.0;
    const auto corpus = generate_corpus(spec, 3);
    for (const auto& client : corpus.clients)
        for (const auto& s : client) CHECK(s.w == client[0].w);
    CHECK_FALSE(corpus.clients[0][0].w == corpus.clients[1][0].w);
}

TEST_CASE("optical density lies in the span of the true stains") {
    const auto corpus = generate_corpus(small_spec(2, 4), 5);
    for (const auto& client : corpus.clients)
        for (const auto& s : client) {
            const Eigen::Matrix<double, 3, 2> w = s.w.w;
            const Eigen::Matrix3d proj = w * (w.transpose() * w).inverse() * w.transpose();
            const Eigen::MatrixXd resid = s.od - proj * s.od;
            CHECK(resid.cwiseAbs().maxCoeff() < 1e-6);
            CHECK((s.h.h.array() >= 0.0).all());
        }
}

TEST_CASE("files on disk are deterministic") {
    test::TempDir a("syn_a"), b("syn_b");
    const auto spec = small_spec(2, 3);
    const auto ma = generate_synthetic_federation(spec, 8, a.path());
    const auto mb = generate_synthetic_federation(spec, 8, b.path());
    CHECK(ma == mb);
    CHECK(read_manifest(a.path() / "manifest.json") == ma);
    for (int k = 1; k <= 2; ++k) {
        const auto dir = "client_" + std::to_string(k);
        const auto fa = list_png_files(a.path() / dir);
        REQUIRE(fa.size() == 3);
        for (const auto& f : fa) CHECK(slurp(f) == slurp(b.path() / dir / f.filename()));
        const auto truth = read_stain_csv(a.path() / dir / "ground_truth.csv");
        REQUIRE(truth.size() == 3);
        CHECK(truth[0].image == fa[0].filename().string());
    }
}

} // TEST_SUITE

TEST_SUITE("pipeline") {

TEST_CASE("two clients end to end, twice") {
    test::TempDir data("pipe_data"), out_a("pipe_a"), out_b("pipe_b");
    const auto manifest = generate_synthetic_federation(small_spec(2, 10), 6, data.path());
    const auto cfg = quick_config(2);
    const auto s = run_pipeline(manifest, data.path(), cfg, out_a.path());
    MESSAGE("FD before ", s.fd_before_mean, " after ", s.fd_after_mean, " ssim ", s.mean_ssim);
    CHECK(s.fd_after_mean < s.fd_before_mean);
    REQUIRE(s.pairs.size() == 1);
    for (const char* f : {"stains/client_1.csv", "stains/client_2.csv", "model.fsda", "round_log.csv", "summary.json", "summary.csv",
                          "aligned/client_1/manifest.csv", "aligned/client_2/manifest.csv"})
        CHECK(fs::exists(out_a.path() / f));
    CHECK(list_png_files(out_a.path() / "aligned" / "client_2").size() == 10);

    run_pipeline(manifest, data.path(), cfg, out_b.path());
    CHECK(slurp(out_a.path() / "summary.json") == slurp(out_b.path() / "summary.json"));
    CHECK(slurp(out_a.path() / "summary.csv") == slurp(out_b.path() / "summary.csv"));
}

TEST_CASE("single client alignment is a faithful re-render") {
    test::TempDir data("pipe1_data"), out("pipe1_out");
    const auto manifest = generate_synthetic_federation(small_spec(1, 10), 7, data.path());
    const auto s = run_pipeline(manifest, data.path(), quick_config(), out.path());
    MESSAGE("K=1 ssim ", s.mean_ssim);
    CHECK(s.pairs.empty());
    CHECK(s.mean_ssim >= 0.95);
}

TEST_CASE("a failing stage names itself and keeps earlier outputs") {
    test::TempDir data("pipe_fail"), out("pipe_fail_out");
    auto manifest = generate_synthetic_federation(small_spec(2, 4), 9, data.path());
    std::ofstream(data.path() / "empty.csv") << kStainCsvHeader << '\n';
    manifest.clients[1].stains = fs::path("empty.csv");
    try {
        run_pipeline(manifest, data.path(), quick_config(), out.path());
        FAIL("expected StageError");
    } catch (const StageError& e) {
        CHECK(e.stage() == "train");
    }
    CHECK(fs::exists(out.path() / "stains" / "client_1.csv"));
    CHECK(fs::exists(out.path() / "stains" / "client_2.csv"));
    CHECK_FALSE(fs::exists(out.path() / "summary.json"));
}

TEST_CASE("invalid manifests fail before any stage") {
    test::TempDir out("pipe_bad");
    FederationManifest m;
    m.clients = {{1, "missing_dir", std::nullopt}};
    CHECK_THROWS_AS(run_pipeline(m, out.path(), quick_config(), out.path() / "o"), ValidationError);
    CHECK_FALSE(fs::exists(out.path() / "o"));
}

} // TEST_SUITE
