// Command-line frontend: one subcommand per pipeline stage plus dataset
// conversion and the brute-force reference computations.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

#include "hsidiff/pipeline.hpp"

namespace {

using namespace hsidiff;

struct CommonArgs {
    std::string config;
    std::string run_dir;
    std::vector<std::string> overrides;
    bool force = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config, "run configuration document (JSON)");
    cmd->add_option("--run-dir", args.run_dir,
                    "run root (default $HSIDIFF_RUN_ROOT, then ./run)");
    cmd->add_option("--set", args.overrides, "config override, key.path=value (repeatable)");
    cmd->add_flag("--force", args.force, "remove a stale stage lock before running");
}

RunContext make_context(const CommonArgs& args) {
    RunContext ctx;
    ctx.cfg = load_run_config(args.config, args.overrides);
    if (!args.run_dir.empty()) {
        ctx.root = args.run_dir;
    } else {
        const char* env = std::getenv("HSIDIFF_RUN_ROOT");
        ctx.root = (env && *env) ? env : "./run";
    }
    ctx.log = &std::cout;
    return ctx;
}

std::vector<uint64_t> seeds_or_default(const RunContext& ctx, const std::vector<uint64_t>& seeds) {
    return seeds.empty() ? ctx.seeds() : seeds;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"hsidiff: diffusion-feature hyperspectral classification"};
    app.require_subcommand(1);

    // convert
    std::string cv_kind, cv_input, cv_output, cv_format = "text", cv_interleave = "bip";
    size_t cv_height = 0, cv_width = 0, cv_bands = 0, cv_classes = 0;
    CLI::App* convert = app.add_subcommand("convert", "ingest dataset exports into cube/labels");
    convert->add_option("--kind", cv_kind, "cube or labels")->required();
    convert->add_option("--input", cv_input, "delimited-text or raw export")->required();
    convert->add_option("--output", cv_output, "output header path (.hdr)")->required();
    convert->add_option("--height", cv_height)->required();
    convert->add_option("--width", cv_width)->required();
    convert->add_option("--bands", cv_bands, "cube band count");
    convert->add_option("--classes", cv_classes, "label class count");
    convert->add_option("--format", cv_format, "text, f32le, f64le, u16le or u8");
    convert->add_option("--interleave", cv_interleave, "raw cube layout: bip or bsq");

    // pipeline stages
    CommonArgs pt_args;
    bool pt_resume = false;
    size_t pt_sample_after = 0;
    CLI::App* cmd_pretrain = app.add_subcommand("pretrain", "fit the denoiser on random crops");
    add_common(cmd_pretrain, pt_args);
    cmd_pretrain->add_flag("--resume", pt_resume, "continue from the latest checkpoint");
    cmd_pretrain->add_option("--sample-after", pt_sample_after,
                             "draw this many unconditional samples after training");

    CommonArgs ex_args;
    CLI::App* cmd_extract = app.add_subcommand("extract", "build multi-timestep feature banks");
    add_common(cmd_extract, ex_args);

    CommonArgs pu_args;
    std::vector<uint64_t> pu_seeds;
    CLI::App* cmd_purify = app.add_subcommand("purify", "score and select feature channels");
    add_common(cmd_purify, pu_args);
    cmd_purify->add_option("--seed", pu_seeds, "split seed (repeatable; default: config seeds)");

    CommonArgs tr_args;
    std::vector<uint64_t> tr_seeds;
    std::string tr_mode;
    CLI::App* cmd_train = app.add_subcommand("train", "train the fusion classifier ensemble");
    add_common(cmd_train, tr_args);
    cmd_train->add_option("--seed", tr_seeds, "split seed (repeatable; default: config seeds)");
    cmd_train->add_option("--mode", tr_mode, "fusion mode override for this run");

    CommonArgs pr_args;
    std::vector<uint64_t> pr_seeds;
    std::string pr_mode;
    CLI::App* cmd_predict = app.add_subcommand("predict", "classify every labeled pixel");
    add_common(cmd_predict, pr_args);
    cmd_predict->add_option("--seed", pr_seeds, "split seed (repeatable; default: config seeds)");
    cmd_predict->add_option("--mode", pr_mode, "fusion mode override for this run");

    CommonArgs rp_args;
    CLI::App* cmd_report = app.add_subcommand("report", "average seeds into a final table");
    add_common(cmd_report, rp_args);

    CommonArgs sw_args;
    std::string sw_ablation;
    std::vector<std::string> sw_grid;
    CLI::App* cmd_sweep = app.add_subcommand("sweep", "ablations and config grids");
    add_common(cmd_sweep, sw_args);
    cmd_sweep->add_option("--ablation", sw_ablation, "named ablation (fusion)");
    cmd_sweep->add_option("--grid", sw_grid, "grid axis key.path=v1,v2 (repeatable)");

    // oracle: brute-force references on serialized artifacts
    CLI::App* oracle = app.add_subcommand("oracle", "independent reference computations");
    oracle->require_subcommand(1);

    std::string os_input;
    double os_alpha = 0.5, os_beta = 0.5;
    size_t os_topk = 0;
    CLI::App* o_scores = oracle->add_subcommand(
        "scores", "naive channel scores from a serialized class-mean matrix");
    o_scores->add_option("--input", os_input, "JSON document {m,C,d,M}")->required();
    o_scores->add_option("--alpha", os_alpha);
    o_scores->add_option("--beta", os_beta);
    o_scores->add_option("--top-k", os_topk, "also report the naive top-K selection");

    std::vector<double> ofd_point;
    CLI::App* o_fd = oracle->add_subcommand(
        "fd", "central-difference gradient of the squared norm at a point");
    o_fd->add_option("--at", ofd_point, "coordinates (repeatable)")->required();

    uint64_t osc_seed = 0;
    size_t osc_size = 64, osc_bands = 16, osc_classes = 4;
    double osc_sep = 6.0;
    std::string osc_out;
    CLI::App* o_scene = oracle->add_subcommand("scene", "generate a synthetic labeled scene");
    o_scene->add_option("--seed", osc_seed);
    o_scene->add_option("--size", osc_size);
    o_scene->add_option("--bands", osc_bands);
    o_scene->add_option("--classes", osc_classes);
    o_scene->add_option("--separability", osc_sep);
    o_scene->add_option("--out", osc_out, "directory for cube.hdr and labels.hdr")->required();

    std::string onm_cube, onm_labels;
    double onm_fraction = 0.1;
    uint64_t onm_seed = 0;
    CLI::App* o_nm = oracle->add_subcommand(
        "nearest-mean", "baseline accuracy of a nearest-class-mean classifier");
    o_nm->add_option("--cube", onm_cube)->required();
    o_nm->add_option("--labels", onm_labels)->required();
    o_nm->add_option("--fraction", onm_fraction, "training fraction per class");
    o_nm->add_option("--seed", onm_seed, "split seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (convert->parsed()) {
            if (cv_kind == "cube") {
                check_config(cv_bands > 0, "convert: --bands is required for cubes");
                convert_cube(cv_input, cv_output, cv_height, cv_width, cv_bands, cv_format,
                             cv_interleave);
            } else if (cv_kind == "labels") {
                check_config(cv_classes > 0, "convert: --classes is required for labels");
                convert_labels(cv_input, cv_output, cv_height, cv_width, cv_classes, cv_format);
            } else {
                throw ConfigError("convert: --kind must be cube or labels");
            }
            std::cout << "wrote " << cv_output << "\n";
        } else if (cmd_pretrain->parsed()) {
            RunContext ctx = make_context(pt_args);
            stage_pretrain(ctx, pt_resume, pt_sample_after, pt_args.force);
        } else if (cmd_extract->parsed()) {
            RunContext ctx = make_context(ex_args);
            stage_extract(ctx, ex_args.force);
        } else if (cmd_purify->parsed()) {
            RunContext ctx = make_context(pu_args);
            for (uint64_t seed : seeds_or_default(ctx, pu_seeds))
                stage_purify(ctx, seed, pu_args.force);
        } else if (cmd_train->parsed()) {
            RunContext ctx = make_context(tr_args);
            for (uint64_t seed : seeds_or_default(ctx, tr_seeds))
                stage_train(ctx, seed, tr_mode, tr_args.force);
        } else if (cmd_predict->parsed()) {
            RunContext ctx = make_context(pr_args);
            for (uint64_t seed : seeds_or_default(ctx, pr_seeds))
                stage_predict(ctx, seed, pr_mode, pr_args.force);
        } else if (cmd_report->parsed()) {
            RunContext ctx = make_context(rp_args);
            stage_report(ctx, rp_args.force);
        } else if (cmd_sweep->parsed()) {
            RunContext ctx = make_context(sw_args);
            if (!sw_ablation.empty()) {
                check_config(sw_ablation == "fusion",
                             "sweep: the only named ablation is 'fusion'");
                sweep_fusion_ablation(ctx, sw_args.force);
            } else {
                sweep_grid(ctx, sw_grid);
            }
        } else if (o_scores->parsed()) {
            nlohmann::json doc = nlohmann::json::parse(read_text(os_input));
            size_t m = doc.at("m").get<size_t>(), C = doc.at("C").get<size_t>(),
                   d = doc.at("d").get<size_t>();
            std::vector<double> M = doc.at("M").get<std::vector<double>>();
            oracle::NaiveScores s = oracle::naive_scores(M, m, C, d, os_alpha, os_beta);
            nlohmann::json out{{"tau_class", s.tau_class}, {"tau_t", s.tau_t}, {"tau", s.tau}};
            if (os_topk > 0) out["topk"] = oracle::naive_topk(s.tau, os_topk);
            std::cout << out.dump(2) << "\n";
        } else if (o_fd->parsed()) {
            auto f = [](const std::vector<double>& p) {
                double s = 0;
                for (double v : p) s += v * v;
                return s;
            };
            std::vector<double> g = oracle::fd_grad(f, ofd_point);
            nlohmann::json out{{"function", "squared_norm"}, {"at", ofd_point}, {"gradient", g}};
            std::cout << out.dump(2) << "\n";
        } else if (o_scene->parsed()) {
            oracle::SyntheticScene scene =
                oracle::make_scene(osc_seed, osc_size, osc_bands, osc_classes, osc_sep);
            std::filesystem::create_directories(osc_out);
            std::filesystem::path dir = osc_out;
            save_cube(dir / "cube.hdr", scene.cube);
            save_labels(dir / "labels.hdr", scene.labels);
            std::cout << "wrote " << (dir / "cube.hdr").string() << " and "
                      << (dir / "labels.hdr").string() << "\n";
        } else if (o_nm->parsed()) {
            HsiCube cube = load_cube(onm_cube);
            LabelRaster labels = load_labels(onm_labels);
            SplitResult split = split_train_test(labels, onm_fraction, onm_seed);
            double oa = oracle::nearest_mean_accuracy(cube, labels, split.train_ids,
                                                      split.test_ids);
            nlohmann::json out{{"oa", oa},
                               {"train", split.train_ids.size()},
                               {"test", split.test_ids.size()}};
            std::cout << out.dump(2) << "\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DigestError& e) {
        std::cerr << "digest mismatch: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
