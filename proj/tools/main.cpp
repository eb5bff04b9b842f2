#include "commands.hpp"

#include "fedsda/error.hpp"
#include "fedsda/runtime.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <functional>
#include <iostream>

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitStage = 3;

int report(const char* kind, const std::exception& e, int code) {
    spdlog::error("{}: {}", kind, e.what());
    return code;
}

} // namespace

int main(int argc, char** argv) {
    using namespace fedsda::cli;
    fedsda::tune_allocator();
    spdlog::set_default_logger(spdlog::stderr_color_mt("fedsda"));

    CLI::App app{"Federated stain distribution alignment toolkit"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalOptions g;
    std::string log_level = "info";
    app.add_option("--seed", g.seed, "Master seed");
    app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
    app.add_option("--config", g.config, "Run configuration (JSON or key = value)")->check(CLI::ExistingFile);
    app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

    std::function<void()> action;

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Generate a synthetic multi-client H&E federation");
    s->add_option("--out", synth.out, "Output directory")->required();
    s->add_option("--clients", synth.clients, "Number of clients")->check(CLI::PositiveNumber);
    s->add_option("--images", synth.images, "Images per client")->check(CLI::PositiveNumber);
    s->add_option("--width", synth.width, "Image width")->check(CLI::PositiveNumber);
    s->add_option("--height", synth.height, "Image height")->check(CLI::PositiveNumber);
    s->add_option("--cluster-std", synth.cluster_std, "Per-client stain jitter");
    s->add_option("--smoothness", synth.smoothness, "Density blob radius in pixels");
    s->callback([&] { action = [&] { run_synth(g, synth); }; });

    SeparateArgs sep;
    auto* sp = app.add_subcommand("separate", "Estimate per-image stain matrices");
    sp->add_option("--input", sep.input, "Directory of PNG images")->required();
    sp->add_option("--out", sep.out, "Output directory")->required();
    sp->add_option("--lambda", sep.lambda, "Sparsity weight on densities");
    sp->add_option("--max-iters", sep.max_iters, "Outer iterations");
    sp->add_option("--tol", sep.tol, "Relative objective tolerance");
    sp->add_flag("--density", sep.density, "Also write 16-bit density maps");
    sp->callback([&] { action = [&] { run_separate(g, sep); }; });

    TrainArgs train;
    auto* tr = app.add_subcommand("train-diffusion", "Federated training of the conditional stain diffusion model");
    tr->add_option("--stains", train.stains, "Stain CSV per client, in client order");
    tr->add_option("--manifest", train.manifest, "Federation manifest");
    tr->add_option("--out", train.out, "Model file");
    tr->add_option("--round-log", train.round_log, "Round log CSV");
    tr->add_option("--rounds", train.rounds, "Communication rounds");
    tr->add_option("--epochs", train.epochs, "Local epochs per round");
    tr->add_option("--batch-size", train.batch_size, "Local batch size");
    tr->add_option("--lr", train.lr, "Learning rate");
    tr->add_option("--backbone", train.backbone, "transformer or mlp");
    tr->add_option("--eval-samples", train.eval_samples, "Draws per condition for the per-round FD (0 skips)");
    tr->callback([&] { action = [&] { run_train(g, train); }; });

    SampleArgs sample;
    auto* sa = app.add_subcommand("sample", "Draw stain matrices from a trained model");
    sa->add_option("--model", sample.model, "Model file")->required()->check(CLI::ExistingFile);
    sa->add_option("--condition", sample.condition, "Condition (client id)")->required();
    sa->add_option("--count", sample.count, "Number of draws")->required();
    sa->add_option("--out", sample.out, "CSV file (default stdout)");
    sa->callback([&] { action = [&] { run_sample(g, sample); }; });

    AlignArgs al;
    auto* ap = app.add_subcommand("align", "Re-render a client's images with generated stain matrices");
    ap->add_option("--model", al.model, "Model file")->required()->check(CLI::ExistingFile);
    ap->add_option("--client-id", al.client_id, "This client's id")->required();
    ap->add_option("--input", al.input, "Directory of PNG images")->required();
    ap->add_option("--out", al.out, "Output directory")->required();
    ap->add_option("--k", al.k, "Number of target conditions (default: all the model knows)");
    ap->callback([&] { action = [&] { run_align(g, al); }; });

    AmpnormArgs amp;
    auto* am = app.add_subcommand("ampnorm", "Fourier amplitude normalization baseline");
    am->add_option("--inputs", amp.inputs, "Client image directories")->required()->delimiter(',');
    am->add_option("--out", amp.out, "Output directory")->required();
    am->add_option("--v", amp.v, "EMA decay in (0, 1]");
    am->add_option("--batch", amp.batch, "Batch size")->check(CLI::PositiveNumber);
    am->callback([&] { action = [&] { run_ampnorm(g, amp); }; });

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "FD between stain CSVs, or WD / SSIM between images");
    e->add_option("--mode", ev.mode, "fd, wd or ssim")->required()->check(CLI::IsMember({"fd", "wd", "ssim"}));
    e->add_option("--a", ev.a, "First stain CSV, image, or image directory")->required();
    e->add_option("--b", ev.b, "Second stain CSV, image, or image directory")->required();
    e->add_flag("--report", ev.report, "Emit per-pair CSV instead of one JSON object");
    e->add_option("--out", ev.out, "Output file (default stdout)");
    e->callback([&] { action = [&] { run_eval(g, ev); }; });

    PipelineArgs pipe;
    auto* p = app.add_subcommand("pipeline", "separate -> train -> align -> metrics");
    p->add_option("--manifest", pipe.manifest, "Federation manifest")->required()->check(CLI::ExistingFile);
    p->add_option("--out", pipe.out, "Output directory")->required();
    p->callback([&] { action = [&] { run_pipeline_cmd(g, pipe); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : kExitValidation;
    }
    spdlog::set_level(spdlog::level::from_str(log_level));

    try {
        action();
    } catch (const fedsda::ValidationError& err) {
        return report("invalid input", err, kExitValidation);
    } catch (const fedsda::StageError& err) {
        return report("stage failed", err, kExitStage);
    } catch (const std::exception& err) {
        return report("failed", err, kExitStage);
    }
    return 0;
}
