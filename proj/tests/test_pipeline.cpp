#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include "hsidiff/pipeline.hpp"

using namespace hsidiff;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& leaf) {
    fs::path dir = fs::temp_directory_path() / "hsidiff_pipeline_test" / leaf;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string file_bytes(const fs::path& path) { return read_text(path); }

// Scene plus a configuration sized so the whole chain runs in seconds.
RunContext tiny_context(const fs::path& dir) {
    oracle::SyntheticScene scene = oracle::make_scene(7, 24, 6, 3, 8.0);
    save_cube(dir / "cube.hdr", scene.cube);
    save_labels(dir / "labels.hdr", scene.labels);

    RunContext ctx;
    ctx.cfg = default_run_config();
    ctx.cfg["data"]["cube"] = (dir / "cube.hdr").string();
    ctx.cfg["data"]["labels"] = (dir / "labels.hdr").string();
    ctx.cfg["patch_size"] = 8;
    ctx.cfg["pca_dims"] = 3;
    ctx.cfg["model"]["base_channels"] = 8;
    ctx.cfg["model"]["time_embed_dim"] = 16;
    ctx.cfg["model"]["groups_per_norm"] = 4;
    ctx.cfg["pretrain"]["total_steps"] = 30;
    ctx.cfg["pretrain"]["batch_size"] = 4;
    ctx.cfg["pretrain"]["T"] = 50;
    ctx.cfg["pretrain"]["num_patches"] = 64;
    ctx.cfg["extract"]["m"] = 3;
    ctx.cfg["train"]["ensemble"] = 2;
    ctx.cfg["train"]["hidden1"] = 16;
    ctx.cfg["train"]["hidden2"] = 8;
    ctx.cfg["train"]["epochs"] = 8;
    ctx.cfg["train"]["batch_size"] = 32;
    ctx.cfg["train"]["lr0"] = 1e-3;
    ctx.cfg["train"]["lr_min"] = 1e-5;
    ctx.root = dir / "run";
    return ctx;
}

int run_cli(const std::string& args) {
    std::string cmd = std::string(HSIDIFF_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST_CASE("config defaults merge file and overrides in order") {
    fs::path dir = fresh_dir("config");
    write_text_atomic(dir / "cfg.json",
                      R"({"patch_size": 12, "purify": {"alpha": 0.3}})");
    nlohmann::json cfg = load_run_config(dir / "cfg.json", {"purify.beta=0.7", "seeds=[1,2]"});
    CHECK(cfg["patch_size"] == 12);
    CHECK(cfg["purify"]["alpha"] == 0.3);
    CHECK(cfg["purify"]["beta"] == 0.7);
    CHECK(cfg["seeds"] == nlohmann::json({1, 2}));
    CHECK(cfg["split_fraction"] == 0.1); // untouched default

    // values that fail to parse as JSON stay strings
    nlohmann::json cfg2 = load_run_config({}, {"train.mode=average"});
    CHECK(cfg2["train"]["mode"] == "average");
}

TEST_CASE("config rejects unknown keys at every level") {
    fs::path dir = fresh_dir("badconfig");
    write_text_atomic(dir / "cfg.json", R"({"patchsize": 12})");
    CHECK_THROWS_AS(load_run_config(dir / "cfg.json"), ConfigError);
    write_text_atomic(dir / "cfg2.json", R"({"purify": {"gamma": 1}})");
    CHECK_THROWS_AS(load_run_config(dir / "cfg2.json"), ConfigError);
    CHECK_THROWS_AS(load_run_config({}, {"purify.gamma=1"}), ConfigError);
    CHECK_THROWS_AS(load_run_config({}, {"purify=1"}), ConfigError); // not a leaf
    CHECK_THROWS_AS(load_run_config({}, {"no_equals_sign"}), ConfigError);
}

TEST_CASE("convert cube is byte-identical on reconvert and loads back") {
    fs::path dir = fresh_dir("convert");
    write_text_atomic(dir / "cube.txt", "1.0 2.0 3.0, 4.0\n5 6 7 8\n9 10 11 12\n13 14 15 16\n");
    convert_cube(dir / "cube.txt", dir / "a.hdr", 2, 2, 4);
    convert_cube(dir / "cube.txt", dir / "b.hdr", 2, 2, 4);
    CHECK(file_bytes(dir / "a.hdr") == file_bytes(dir / "b.hdr"));
    CHECK(file_bytes(dir / "a.raw") == file_bytes(dir / "b.raw"));

    HsiCube cube = load_cube(dir / "a.hdr");
    CHECK(cube.height == 2);
    CHECK(cube.width == 2);
    CHECK(cube.bands == 4);
    CHECK(cube.data.at(0, 0, 0) == 1.0f);  // pixel-interleaved input order
    CHECK(cube.data.at(0, 1, 0) == 5.0f);
    CHECK(cube.data.at(1, 1, 3) == 16.0f);

    CHECK_THROWS_AS(convert_cube(dir / "cube.txt", dir / "c.hdr", 2, 2, 5), IoError);
}

TEST_CASE("raw exports convert to the same cube as text") {
    fs::path dir = fresh_dir("convert_raw");
    write_text_atomic(dir / "cube.txt", "1 2 3 4 5 6 7 8\n");
    convert_cube(dir / "cube.txt", dir / "text.hdr", 2, 2, 2);

    // same cube as f64le bip and as f32le bsq
    std::vector<double> bip = {1, 2, 3, 4, 5, 6, 7, 8};
    write_blob(dir / "cube.f64", bip.data(), bip.size());
    convert_cube(dir / "cube.f64", dir / "bip.hdr", 2, 2, 2, "f64le", "bip");
    CHECK(file_bytes(dir / "bip.raw") == file_bytes(dir / "text.raw"));

    std::vector<float> bsq = {1, 3, 5, 7, 2, 4, 6, 8}; // band plane after band plane
    write_blob(dir / "cube.f32", bsq.data(), bsq.size());
    convert_cube(dir / "cube.f32", dir / "bsq.hdr", 2, 2, 2, "f32le", "bsq");
    CHECK(file_bytes(dir / "bsq.raw") == file_bytes(dir / "text.raw"));

    CHECK_THROWS_AS(convert_cube(dir / "cube.f32", dir / "x.hdr", 2, 2, 2, "f16le", "bip"),
                    ConfigError);
    CHECK_THROWS_AS(convert_cube(dir / "cube.f32", dir / "x.hdr", 2, 2, 2, "f32le", "bil"),
                    ConfigError);
    CHECK_THROWS_AS(convert_cube(dir / "cube.f32", dir / "x.hdr", 2, 2, 4, "f32le", "bip"),
                    IoError); // payload too small for the declared dims

    std::vector<uint8_t> labels_u8 = {0, 1, 2, 1};
    write_blob(dir / "labels.u8", labels_u8.data(), labels_u8.size());
    convert_labels(dir / "labels.u8", dir / "labels.hdr", 2, 2, 2, "u8");
    LabelRaster lr = load_labels(dir / "labels.hdr");
    CHECK(lr.labels.at(1, 0) == 2);
    CHECK_THROWS_AS(convert_labels(dir / "labels.u8", dir / "y.hdr", 2, 2, 2, "f32le"),
                    ConfigError);
}

TEST_CASE("convert validates label range") {
    fs::path dir = fresh_dir("convert_labels");
    write_text_atomic(dir / "ok.txt", "0 1\n2 1\n");
    convert_labels(dir / "ok.txt", dir / "ok.hdr", 2, 2, 2);
    LabelRaster lr = load_labels(dir / "ok.hdr");
    CHECK(lr.labels.at(0, 1) == 1);
    CHECK(lr.labels.at(1, 0) == 2);

    write_text_atomic(dir / "bad.txt", "0 1\n2 3\n");
    CHECK_THROWS_AS(convert_labels(dir / "bad.txt", dir / "bad.hdr", 2, 2, 2), IoError);
    write_text_atomic(dir / "frac.txt", "0 1\n1.5 2\n");
    CHECK_THROWS_AS(convert_labels(dir / "frac.txt", dir / "frac.hdr", 2, 2, 2), IoError);
}

TEST_CASE("stage lock enforces one writer and releases on scope exit") {
    fs::path dir = fresh_dir("lock");
    {
        StageLock lock(dir / "stage");
        CHECK_THROWS_AS(StageLock(dir / "stage"), ConfigError);
    }
    StageLock again(dir / "stage"); // released by the destructor above
}

TEST_CASE("missing upstream manifest is a config error") {
    fs::path dir = fresh_dir("nostage");
    RunContext ctx = tiny_context(dir);
    CHECK_THROWS_AS(stage_extract(ctx), ConfigError);
    CHECK_THROWS_AS(stage_purify(ctx, 0), ConfigError);
    CHECK_THROWS_AS(stage_report(ctx), ConfigError);
}

TEST_CASE("tiny pipeline end to end with digest chain and cli exit codes") {
    fs::path dir = fresh_dir("e2e");
    RunContext ctx = tiny_context(dir);
    write_text_atomic(dir / "cfg.json", ctx.cfg.dump(2) + "\n");

    stage_pretrain(ctx);
    CHECK(fs::exists(ctx.pretrain_dir() / "manifest.json"));
    CHECK(fs::exists(ctx.pretrain_dir() / "preprocess.json"));

    stage_extract(ctx);
    FeatureBanks banks = load_banks(ctx.extract_dir() / "banks");
    CHECK(banks.samples() == 24 * 24); // every pixel of the scene is labeled
    CHECK(banks.grid.m == 3);

    stage_purify(ctx, 0);
    PurificationIndex idx = load_purification(ctx.purify_dir(0) / "index.json");
    CHECK(idx.kept.size() == banks.d); // default budget keeps all 24 channels

    stage_train(ctx, 0);
    stage_predict(ctx, 0);

    // predictions cover every labeled pixel; the map renders and parses
    auto predictions =
        read_blob<uint16_t>(ctx.predict_dir(0, "selective_guided") / "predictions.bin",
                            banks.samples());
    for (uint16_t p : predictions) CHECK((p >= 1 && p <= 3));
    std::string ppm = file_bytes(ctx.predict_dir(0, "selective_guided") / "map.ppm");
    auto [h, w, pixels] = parse_ppm(std::vector<uint8_t>(ppm.begin(), ppm.end()));
    CHECK(h == 24);
    CHECK(w == 24);

    MetricsReport report =
        nlohmann::json::parse(
            read_text(ctx.predict_dir(0, "selective_guided") / "metrics.json"))
            .get<MetricsReport>();
    CHECK(report.num_classes == 3);
    CHECK(report.oa > 1.0 / 3.0); // far better than chance even at toy scale
    CHECK(report.seeds == std::vector<uint64_t>{0});

    ctx.cfg["report"]["dataset"] = "indian_pines";
    stage_report(ctx);
    std::string table = file_bytes(ctx.report_dir() / "report.txt");
    CHECK(table.find("OA") != std::string::npos);
    CHECK(table.find("published reference") != std::string::npos);
    CHECK(table.find("not checked") != std::string::npos);

    SUBCASE("purify rerun is byte-identical") {
        std::string index_before = file_bytes(ctx.purify_dir(0) / "index.json");
        std::string split_before = file_bytes(ctx.purify_dir(0) / "split.json");
        stage_purify(ctx, 0);
        CHECK(file_bytes(ctx.purify_dir(0) / "index.json") == index_before);
        CHECK(file_bytes(ctx.purify_dir(0) / "split.json") == split_before);
    }

    SUBCASE("cli maps outcomes to exit codes") {
        std::string base = "--config " + (dir / "cfg.json").string() + " --run-dir " +
                           (ctx.root).string();
        CHECK(run_cli("purify " + base) == 0);
        CHECK(run_cli("purify " + base + " --set purify.gamma=1") == 2);
        CHECK(run_cli("definitely-not-a-subcommand") == 2);

        // corrupting the bank payload breaks the digest chain with exit 3
        fs::path run_copy = dir / "run_tampered";
        fs::copy(ctx.root, run_copy, fs::copy_options::recursive);
        std::ofstream(run_copy / "extract" / "banks" / "center.bin",
                      std::ios::binary | std::ios::app)
            << '\0';
        std::string tampered = "--config " + (dir / "cfg.json").string() + " --run-dir " +
                               run_copy.string();
        CHECK(run_cli("train " + tampered + " --force") == 3);
    }

    SUBCASE("tampered bank fails in process too") {
        fs::path run_copy = dir / "run_tampered2";
        fs::copy(ctx.root, run_copy, fs::copy_options::recursive);
        std::ofstream(run_copy / "extract" / "banks" / "center.bin",
                      std::ios::binary | std::ios::app)
            << '\0';
        RunContext bad = ctx;
        bad.root = run_copy;
        CHECK_THROWS_AS(stage_train(bad, 0, "", true), DigestError);
    }

    SUBCASE("corrupted preprocess parameters break extraction") {
        fs::path run_copy = dir / "run_tampered3";
        fs::copy(ctx.root, run_copy, fs::copy_options::recursive);
        fs::remove_all(run_copy / "extract");
        std::string doc = file_bytes(run_copy / "pretrain" / "preprocess.json");
        size_t pos = doc.find("normalize_bounds");
        REQUIRE(pos != std::string::npos);
        doc.replace(pos, 1, "N");
        write_text_atomic(run_copy / "pretrain" / "preprocess.json", doc);
        RunContext bad = ctx;
        bad.root = run_copy;
        CHECK_THROWS_AS(stage_extract(bad, true), DigestError);
    }
}

TEST_CASE("run root falls back to the environment variable") {
    fs::path dir = fresh_dir("envroot");
    RunContext ctx = tiny_context(dir);
    write_text_atomic(dir / "cfg.json", ctx.cfg.dump(2) + "\n");
    fs::path env_root = dir / "env_run";
    std::string cmd = "HSIDIFF_RUN_ROOT=" + env_root.string() + " " + HSIDIFF_CLI_PATH +
                      " pretrain --config " + (dir / "cfg.json").string() + " >/dev/null 2>&1";
    int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    CHECK(WEXITSTATUS(status) == 0);
    CHECK(fs::exists(env_root / "pretrain" / "manifest.json"));
}
