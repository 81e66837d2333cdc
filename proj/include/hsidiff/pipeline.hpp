#pragma once

// Staged run orchestration. Every stage writes an immutable artifact plus a
// manifest that freezes the effective configuration and pins the digests of
// everything it consumed; downstream stages refuse to run when a recorded
// digest no longer matches what is on disk.

#include <fcntl.h>
#include <unistd.h>

#include <json.hpp>

#include "hsidiff/diffusion.hpp"
#include "hsidiff/eval.hpp"
#include "hsidiff/featbank.hpp"
#include "hsidiff/fuse.hpp"
#include "hsidiff/hsio.hpp"
#include "hsidiff/oracle.hpp"
#include "hsidiff/purify.hpp"
#include "hsidiff/unet.hpp"

namespace hsidiff {

// ----------------------------- configuration -----------------------------

inline nlohmann::json default_run_config() {
    return nlohmann::json{
        {"data", {{"cube", ""}, {"labels", ""}}},
        {"patch_size", 16},
        {"pca_dims", 0}, // 0 derives bands/8
        {"split_fraction", 0.1},
        {"seeds", {0}},
        {"model",
         {{"base_channels", 16},
          {"stage_multipliers", {1, 2}},
          {"res_blocks", 1},
          {"time_embed_dim", 32},
          {"groups_per_norm", 8},
          {"attention_resolutions", nlohmann::json::array()},
          {"include_middle_tap", false}}},
        {"pretrain",
         {{"total_steps", 2000},
          {"batch_size", 64},
          {"learning_rate", 1e-4},
          {"T", 1000},
          {"lambda_vlb", 0.001},
          {"loss_mode", "hybrid"},
          {"seed", 0},
          {"ema_rate", 0.0},
          {"checkpoint_every", 0},
          {"num_patches", 4096}}},
        {"extract",
         {{"m", 5},
          {"noise_seed", 0},
          {"noise_policy", "shared_per_timestep"},
          {"batch_size", 16}}},
        {"purify",
         {{"alpha", 0.5}, {"beta", 0.5}, {"K", 0}, {"normalize_features", false}}},
        {"train",
         {{"mode", "selective_guided"},
          {"ensemble", 10},
          {"hidden1", 128},
          {"hidden2", 64},
          {"epochs", 100},
          {"batch_size", 64},
          {"lr0", 1e-4},
          {"lr_min", 5e-6},
          {"shared_fusion", false},
          {"manual_timestep_index", 0}}},
        {"report", {{"dataset", ""}}}};
}

inline void merge_into(nlohmann::json& base, const nlohmann::json& overlay,
                       const std::string& where) {
    for (const auto& [key, value] : overlay.items()) {
        check_config(base.contains(key), "unknown config key: " + where + key);
        if (value.is_object() && base[key].is_object())
            merge_into(base[key], value, where + key + ".");
        else
            base[key] = value;
    }
}

// "section.key=value"; the value parses as JSON when it can, else as a string.
inline std::pair<std::string, nlohmann::json> parse_override(const std::string& spec) {
    size_t eq = spec.find('=');
    check_config(eq != std::string::npos && eq > 0, "override must look like key=value: " + spec);
    std::string path = spec.substr(0, eq), raw = spec.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    return {path, value};
}

// Defaults, overlaid by the config file, overlaid by key=value overrides.
inline nlohmann::json load_run_config(const std::filesystem::path& config_path,
                                      const std::vector<std::string>& overrides = {}) {
    nlohmann::json cfg = default_run_config();
    if (!config_path.empty()) {
        nlohmann::json user = nlohmann::json::parse(read_text(config_path));
        merge_into(cfg, user, "");
    }
    for (const std::string& spec : overrides) {
        auto [path, value] = parse_override(spec);
        nlohmann::json* node = &cfg;
        size_t start = 0;
        while (true) {
            size_t dot = path.find('.', start);
            std::string key = path.substr(start, dot - start);
            check_config(node->is_object() && node->contains(key),
                         "unknown config key in override: " + path);
            node = &(*node)[key];
            if (dot == std::string::npos) break;
            start = dot + 1;
        }
        check_config(!node->is_object(), "override must target a leaf value: " + path);
        *node = value;
    }
    return cfg;
}

struct RunContext {
    nlohmann::json cfg;
    std::filesystem::path root;
    std::ostream* log = nullptr;

    std::filesystem::path cube_path() const { return cfg.at("data").at("cube").get<std::string>(); }
    std::filesystem::path labels_path() const {
        return cfg.at("data").at("labels").get<std::string>();
    }
    size_t patch_size() const { return cfg.at("patch_size").get<size_t>(); }
    double split_fraction() const { return cfg.at("split_fraction").get<double>(); }
    std::vector<uint64_t> seeds() const { return cfg.at("seeds").get<std::vector<uint64_t>>(); }

    std::filesystem::path pretrain_dir() const { return root / "pretrain"; }
    std::filesystem::path extract_dir() const { return root / "extract"; }
    std::filesystem::path purify_dir(uint64_t seed) const {
        return root / "purify" / ("seed-" + std::to_string(seed));
    }
    std::filesystem::path train_dir(uint64_t seed, const std::string& mode) const {
        return root / "train" / ("seed-" + std::to_string(seed)) / mode;
    }
    std::filesystem::path predict_dir(uint64_t seed, const std::string& mode) const {
        return root / "predict" / ("seed-" + std::to_string(seed)) / mode;
    }
    std::filesystem::path report_dir() const { return root / "report"; }

    void say(const std::string& line) const {
        if (log) (*log) << line << "\n";
    }
};

// ----------------------------- locking -----------------------------

// One writer per stage directory; a leftover lock from a crashed run must be
// removed by hand (or with --force) before the stage can run again.
class StageLock {
  public:
    explicit StageLock(const std::filesystem::path& dir, bool force = false) {
        std::filesystem::create_directories(dir);
        path_ = dir / "lock";
        if (force) std::filesystem::remove(path_);
        int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0)
            throw ConfigError("stage is locked by another writer: " + path_.string() +
                              " (remove the lock file if it is stale)");
        ::close(fd);
    }
    ~StageLock() {
        std::error_code ec;
        std::filesystem::remove(path_, ec);
    }
    StageLock(const StageLock&) = delete;
    StageLock& operator=(const StageLock&) = delete;

  private:
    std::filesystem::path path_;
};

// ----------------------------- stage manifests -----------------------------

inline void write_stage_manifest(const std::filesystem::path& dir, const std::string& stage,
                                 const nlohmann::json& cfg, const nlohmann::json& inputs,
                                 const nlohmann::json& outputs) {
    nlohmann::json j;
    j["format"] = "hsidiff stage v1";
    j["stage"] = stage;
    j["config"] = cfg;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    write_text_atomic(dir / "manifest.json", j.dump(2) + "\n");
}

inline nlohmann::json read_stage_manifest(const std::filesystem::path& dir,
                                          const std::string& stage) {
    std::filesystem::path path = dir / "manifest.json";
    if (!std::filesystem::exists(path))
        throw ConfigError("stage '" + stage + "' has not produced " + path.string() +
                          " yet; run it first");
    nlohmann::json j = nlohmann::json::parse(read_text(path));
    if (j.value("format", "") != std::string("hsidiff stage v1") ||
        j.value("stage", "") != stage)
        throw IoError("not a '" + stage + "' stage manifest: " + path.string());
    return j;
}

inline void require_digest(const std::string& what, const std::string& expected,
                           const std::string& actual) {
    if (expected != actual)
        throw DigestError(what + " digest mismatch: expected " + expected + ", found " + actual);
}

// ----------------------------- conversion -----------------------------

// Whitespace-, comma- or semicolon-separated numbers.
inline std::vector<double> read_numbers(const std::filesystem::path& path) {
    std::string text = read_text(path);
    for (char& c : text)
        if (c == ',' || c == ';') c = ' ';
    std::vector<double> out;
    std::istringstream in(text);
    double v;
    while (in >> v) out.push_back(v);
    if (!in.eof()) throw IoError("unparsable number in " + path.string());
    return out;
}

// Little-endian raw exports; count values laid out per interleave.
inline std::vector<double> read_raw_values(const std::filesystem::path& path,
                                           const std::string& format, size_t count) {
    size_t unit = format == "f32le" ? 4 : format == "f64le" ? 8 : format == "u16le" ? 2 : 1;
    if (format != "f32le" && format != "f64le" && format != "u16le" && format != "u8")
        throw ConfigError("convert: unknown raw format " + format);
    std::vector<uint8_t> bytes = read_blob<uint8_t>(path, count * unit);
    std::vector<double> out(count);
    for (size_t i = 0; i < count; ++i) {
        const uint8_t* p = bytes.data() + i * unit;
        if (format == "f32le") {
            float v;
            std::memcpy(&v, p, 4);
            out[i] = v;
        } else if (format == "f64le") {
            std::memcpy(&out[i], p, 8);
        } else if (format == "u16le") {
            uint16_t v;
            std::memcpy(&v, p, 2);
            out[i] = v;
        } else {
            out[i] = *p;
        }
    }
    return out;
}

inline std::vector<double> read_values(const std::filesystem::path& path,
                                       const std::string& format, size_t count) {
    if (format == "text") {
        std::vector<double> values = read_numbers(path);
        if (values.size() != count)
            throw IoError("convert: expected " + std::to_string(count) + " values, found " +
                          std::to_string(values.size()));
        return values;
    }
    return read_raw_values(path, format, count);
}

// Delimited text (whitespace/comma separated) or a raw little-endian dump.
// Text and bip order values pixel-interleaved row-major (all bands of pixel
// 0, then pixel 1, ...); bsq holds one full band plane after another.
inline void convert_cube(const std::filesystem::path& input,
                         const std::filesystem::path& output_hdr, size_t height, size_t width,
                         size_t bands, const std::string& format = "text",
                         const std::string& interleave = "bip") {
    check_config(height && width && bands, "convert: cube dimensions must be positive");
    check_config(interleave == "bip" || interleave == "bsq",
                 "convert: interleave must be bip or bsq");
    std::vector<double> values = read_values(input, format, height * width * bands);
    HsiCube cube;
    cube.height = height;
    cube.width = width;
    cube.bands = bands;
    cube.data = Tensor<float>({height, width, bands});
    for (size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) throw NumericError("convert: non-finite cube value");
        size_t dst = i;
        if (interleave == "bsq") {
            size_t band = i / (height * width), pixel = i % (height * width);
            dst = pixel * bands + band;
        }
        cube.data.v[dst] = static_cast<float>(values[i]);
    }
    save_cube(output_hdr, cube);
}

// height*width integer labels, 0 meaning unlabeled.
inline void convert_labels(const std::filesystem::path& input,
                           const std::filesystem::path& output_hdr, size_t height, size_t width,
                           size_t num_classes, const std::string& format = "text") {
    check_config(height && width && num_classes, "convert: label dimensions must be positive");
    check_config(format != "f32le" && format != "f64le",
                 "convert: labels must be text, u16le or u8");
    std::vector<double> values = read_values(input, format, height * width);
    LabelRaster lr;
    lr.height = height;
    lr.width = width;
    lr.num_classes = num_classes;
    lr.labels = Tensor<uint16_t>({height, width});
    for (size_t i = 0; i < values.size(); ++i) {
        double v = values[i];
        if (v != std::floor(v) || v < 0) throw IoError("convert: labels must be whole and >= 0");
        if (v > static_cast<double>(num_classes))
            throw IoError("convert: label " + std::to_string(static_cast<long long>(v)) +
                          " exceeds the declared class count " + std::to_string(num_classes));
        lr.labels.v[i] = static_cast<uint16_t>(v);
    }
    save_labels(output_hdr, lr);
}

// ----------------------------- preprocessing helpers -----------------------------

inline void to_json(nlohmann::json& j, const PcaModel& m) {
    j = nlohmann::json{{"input_bands", m.input_bands},
                       {"mean", m.mean},
                       {"components", m.components.v},
                       {"dims", m.dims()},
                       {"explained_variance", m.explained_variance},
                       {"degenerate", m.degenerate}};
}

inline void from_json(const nlohmann::json& j, PcaModel& m) {
    j.at("input_bands").get_to(m.input_bands);
    j.at("mean").get_to(m.mean);
    size_t d = j.at("dims").get<size_t>();
    m.components = Tensor<double>({d, m.input_bands});
    j.at("components").get_to(m.components.v);
    j.at("explained_variance").get_to(m.explained_variance);
    j.at("degenerate").get_to(m.degenerate);
}

struct Preprocess {
    PcaModel pca;
    std::vector<std::array<double, 2>> bounds; // percentile bounds per component
    std::vector<std::string> warnings;
};

inline void to_json(nlohmann::json& j, const Preprocess& p) {
    j = nlohmann::json{{"format", "hsidiff preprocess v1"},
                       {"pca", p.pca},
                       {"normalize_bounds", p.bounds},
                       {"warnings", p.warnings}};
}

inline void from_json(const nlohmann::json& j, Preprocess& p) {
    if (j.value("format", "") != std::string("hsidiff preprocess v1"))
        throw IoError("not a preprocess document");
    j.at("pca").get_to(p.pca);
    j.at("normalize_bounds").get_to(p.bounds);
    j.at("warnings").get_to(p.warnings);
}

// PCA projection followed by per-component percentile normalization.
inline HsiCube preprocess_cube(const HsiCube& cube, Preprocess& pre, bool fit, size_t pca_dims) {
    if (fit) {
        size_t d = pca_dims ? pca_dims : default_pca_dims(cube.bands);
        pre.pca = fit_pca(cube, d);
        if (pre.pca.degenerate)
            pre.warnings.push_back("covariance is near-singular for the requested dimensions");
        HsiCube projected = apply_pca(cube, pre.pca);
        pre.bounds.clear();
        return normalize(projected, &pre.warnings, &pre.bounds);
    }
    HsiCube projected = apply_pca(cube, pre.pca);
    std::vector<std::array<double, 2>> bounds;
    HsiCube out = normalize(projected, nullptr, &bounds);
    if (bounds.size() != pre.bounds.size())
        throw DigestError("preprocess parameters do not reproduce: band count changed");
    for (size_t b = 0; b < bounds.size(); ++b)
        if (std::abs(bounds[b][0] - pre.bounds[b][0]) > 1e-9 ||
            std::abs(bounds[b][1] - pre.bounds[b][1]) > 1e-9)
            throw DigestError("preprocess parameters do not reproduce: percentile drift");
    return out;
}

inline UNetConfig model_config_from(const nlohmann::json& model, size_t in_channels,
                                    size_t patch_size) {
    UNetConfig cfg;
    cfg.in_channels = in_channels;
    cfg.patch_size = patch_size;
    model.at("base_channels").get_to(cfg.base_channels);
    model.at("stage_multipliers").get_to(cfg.stage_multipliers);
    model.at("res_blocks").get_to(cfg.res_blocks);
    model.at("time_embed_dim").get_to(cfg.time_embed_dim);
    model.at("groups_per_norm").get_to(cfg.groups_per_norm);
    model.at("attention_resolutions").get_to(cfg.attention_resolutions);
    model.at("include_middle_tap").get_to(cfg.include_middle_tap);
    cfg.validate();
    return cfg;
}

// ----------------------------- pretrain stage -----------------------------

inline std::filesystem::path latest_checkpoint_dir(const std::filesystem::path& pretrain_dir) {
    std::filesystem::path marker = pretrain_dir / "checkpoints" / "latest";
    if (!std::filesystem::exists(marker))
        throw ConfigError("no checkpoint marker at " + marker.string());
    std::string name = read_text(marker);
    while (!name.empty() && (name.back() == '\n' || name.back() == '\r')) name.pop_back();
    return pretrain_dir / "checkpoints" / name;
}

inline void stage_pretrain(const RunContext& ctx, bool resume = false, size_t sample_after = 0,
                           bool force = false) {
    StageLock lock(ctx.pretrain_dir(), force);
    HsiCube cube = load_cube(ctx.cube_path());
    LabelRaster labels = load_labels(ctx.labels_path());
    check_config(labels.height == cube.height && labels.width == cube.width,
                 "cube and label raster dimensions differ");

    Preprocess pre;
    HsiCube normalized = preprocess_cube(cube, pre, true, ctx.cfg.at("pca_dims").get<size_t>());
    nlohmann::json pre_json = pre;
    write_text_atomic(ctx.pretrain_dir() / "preprocess.json", pre_json.dump(2) + "\n");

    PretrainConfig pc = ctx.cfg.at("pretrain").get<PretrainConfig>();
    size_t num_patches = ctx.cfg.at("pretrain").at("num_patches").get<size_t>();
    Rng patch_rng = make_rng(pc.seed, 0x70617463);
    PatchSet patches = extract_patches(normalized, nullptr, ctx.patch_size(),
                                       PatchMode::random_crops, num_patches, &patch_rng);

    UNetConfig mc = model_config_from(ctx.cfg.at("model"), normalized.bands, ctx.patch_size());
    UNet<float> model = UNet<float>::build(mc, pc.seed);
    ctx.say("pretraining " + std::to_string(model.param_count()) + " parameters for " +
            std::to_string(pc.total_steps) + " steps");

    PatchBatchSource<float> source;
    source.count = [&patches]() { return patches.size(); };
    source.get = [&patches](size_t i) { return patches.get(i).data; };

    std::filesystem::path resume_dir;
    if (resume) resume_dir = latest_checkpoint_dir(ctx.pretrain_dir());
    PretrainResult result =
        pretrain(source, model, pc, ctx.pretrain_dir() / "checkpoints", resume_dir, ctx.log);

    nlohmann::json outputs;
    nlohmann::json ck_manifest =
        nlohmann::json::parse(read_text(result.final_checkpoint / "manifest.json"));
    outputs["checkpoint"] = ck_manifest.at("param_digest");
    outputs["preprocess"] = digest_file(ctx.pretrain_dir() / "preprocess.json");

    if (sample_after > 0) {
        NoiseSchedule sched = build_cosine_schedule(pc.T);
        Rng sample_rng = make_rng(pc.seed, 0x73616d70);
        Tensor<float> samples = p_sample_loop(model, sched, sample_after, sample_rng);
        write_blob(ctx.pretrain_dir() / "samples.bin", samples.v.data(), samples.v.size());
        outputs["samples"] = digest_file(ctx.pretrain_dir() / "samples.bin");
    }

    nlohmann::json inputs;
    inputs["cube"] = digest_file(detail::payload_path(ctx.cube_path()));
    inputs["labels"] = digest_file(detail::payload_path(ctx.labels_path()));
    write_stage_manifest(ctx.pretrain_dir(), "pretrain", ctx.cfg, inputs, outputs);
    ctx.say("pretrain finished at " + result.final_checkpoint.string());
}

// ----------------------------- extract stage -----------------------------

inline void stage_extract(const RunContext& ctx, bool force = false) {
    nlohmann::json upstream = read_stage_manifest(ctx.pretrain_dir(), "pretrain");
    StageLock lock(ctx.extract_dir(), force);

    HsiCube cube = load_cube(ctx.cube_path());
    LabelRaster labels = load_labels(ctx.labels_path());
    require_digest("cube", upstream.at("inputs").at("cube").get<std::string>(),
                   digest_file(detail::payload_path(ctx.cube_path())));
    require_digest("labels", upstream.at("inputs").at("labels").get<std::string>(),
                   digest_file(detail::payload_path(ctx.labels_path())));
    require_digest("preprocess", upstream.at("outputs").at("preprocess").get<std::string>(),
                   digest_file(ctx.pretrain_dir() / "preprocess.json"));

    Preprocess pre =
        nlohmann::json::parse(read_text(ctx.pretrain_dir() / "preprocess.json")).get<Preprocess>();
    HsiCube normalized = preprocess_cube(cube, pre, false, 0);

    Checkpoint<float> ck = load_checkpoint<float>(latest_checkpoint_dir(ctx.pretrain_dir()));
    nlohmann::json ck_manifest = nlohmann::json::parse(
        read_text(latest_checkpoint_dir(ctx.pretrain_dir()) / "manifest.json"));
    require_digest("checkpoint", upstream.at("outputs").at("checkpoint").get<std::string>(),
                   ck_manifest.at("param_digest").get<std::string>());
    UNet<float> model = UNet<float>::build(ck.model_config, ck.pretrain_config.seed);
    model.set_param_values(ck.params);

    PatchSet patches =
        extract_patches(normalized, &labels, ctx.patch_size(), PatchMode::labeled_centers);
    check_config(patches.size() >= 1, "no labeled pixels to extract features for");

    const nlohmann::json& ex = ctx.cfg.at("extract");
    TimestepGrid grid = make_grid(ck.pretrain_config.T, ex.at("m").get<size_t>());
    NoiseSchedule sched = build_cosine_schedule(ck.pretrain_config.T);
    ctx.say("extracting " + std::to_string(patches.size()) + " samples at " +
            std::to_string(grid.m) + " timesteps");
    FeatureBanks banks = build_banks(
        model, sched, patches, grid, ex.at("noise_seed").get<uint64_t>(),
        noise_policy_from_string(ex.at("noise_policy").get<std::string>()),
        ex.at("batch_size").get<size_t>(), ctx.log);
    banks.checkpoint_digest = ck_manifest.at("param_digest").get<std::string>();
    save_banks(ctx.extract_dir() / "banks", banks);

    nlohmann::json bank_manifest =
        nlohmann::json::parse(read_text(ctx.extract_dir() / "banks" / "manifest.json"));
    nlohmann::json inputs;
    inputs["checkpoint"] = banks.checkpoint_digest;
    inputs["preprocess"] = upstream.at("outputs").at("preprocess");
    nlohmann::json outputs;
    outputs["center"] = bank_manifest.at("center_digest");
    outputs["global"] = bank_manifest.at("global_digest");
    write_stage_manifest(ctx.extract_dir(), "extract", ctx.cfg, inputs, outputs);
}

// ----------------------------- purify stage -----------------------------

// Labels for every bank row, via the recorded sample ids.
inline std::vector<uint16_t> bank_labels(const FeatureBanks& banks, const LabelRaster& raster) {
    std::vector<uint16_t> out;
    out.reserve(banks.samples());
    for (size_t id : banks.sample_ids) {
        check_config(id < raster.labels.size(), "bank sample id outside the raster");
        out.push_back(raster.labels.v[id]);
    }
    return out;
}

// Bank rows for a sorted list of pixel ids (both ascending).
inline std::vector<size_t> rows_for_pixels(const FeatureBanks& banks,
                                           const std::vector<size_t>& pixel_ids) {
    std::vector<size_t> rows;
    rows.reserve(pixel_ids.size());
    size_t cursor = 0;
    for (size_t id : pixel_ids) {
        while (cursor < banks.sample_ids.size() && banks.sample_ids[cursor] < id) ++cursor;
        check_config(cursor < banks.sample_ids.size() && banks.sample_ids[cursor] == id,
                     "pixel id " + std::to_string(id) + " has no bank row");
        rows.push_back(cursor);
    }
    return rows;
}

inline FeatureBanks subset_banks(const FeatureBanks& banks, const std::vector<size_t>& rows) {
    FeatureBanks out;
    out.grid = banks.grid;
    out.d = banks.d;
    out.noise_seed = banks.noise_seed;
    out.noise_policy = banks.noise_policy;
    out.checkpoint_digest = banks.checkpoint_digest;
    size_t stride = banks.grid.m * banks.d;
    out.center = Tensor<float>({rows.size(), banks.grid.m, banks.d});
    out.global_ = Tensor<float>({rows.size(), banks.grid.m, banks.d});
    for (size_t i = 0; i < rows.size(); ++i) {
        out.sample_ids.push_back(banks.sample_ids[rows[i]]);
        std::copy_n(banks.center.v.data() + rows[i] * stride, stride,
                    out.center.v.data() + i * stride);
        std::copy_n(banks.global_.v.data() + rows[i] * stride, stride,
                    out.global_.v.data() + i * stride);
    }
    return out;
}

inline void stage_purify(const RunContext& ctx, uint64_t seed, bool force = false) {
    nlohmann::json upstream = read_stage_manifest(ctx.extract_dir(), "extract");
    StageLock lock(ctx.purify_dir(seed), force);

    FeatureBanks banks = load_banks(ctx.extract_dir() / "banks");
    nlohmann::json bank_manifest =
        nlohmann::json::parse(read_text(ctx.extract_dir() / "banks" / "manifest.json"));
    require_digest("center bank", upstream.at("outputs").at("center").get<std::string>(),
                   bank_manifest.at("center_digest").get<std::string>());

    LabelRaster raster = load_labels(ctx.labels_path());
    SplitResult split = split_train_test(raster, ctx.split_fraction(), seed);
    nlohmann::json split_json;
    split_json["format"] = "hsidiff split v1";
    split_json["seed"] = seed;
    split_json["fraction"] = ctx.split_fraction();
    split_json["train_ids"] = split.train_ids;
    split_json["test_ids"] = split.test_ids;
    write_text_atomic(ctx.purify_dir(seed) / "split.json", split_json.dump() + "\n");

    const nlohmann::json& pu = ctx.cfg.at("purify");
    bool normalize_features = pu.at("normalize_features").get<bool>();
    FeatureBanks scored = banks;
    if (normalize_features) scored.center = normalize_rows(banks.center);

    std::vector<size_t> train_rows = rows_for_pixels(banks, split.train_ids);
    FeatureBanks train_banks = subset_banks(scored, train_rows);
    std::vector<uint16_t> train_labels = bank_labels(train_banks, raster);

    size_t K = pu.at("K").get<size_t>();
    if (K == 0) K = default_channel_budget(banks.d);
    PurificationIndex idx =
        fit_purification(train_banks, train_labels, raster.num_classes, pu.at("alpha").get<double>(),
                         pu.at("beta").get<double>(), K, normalize_features);
    idx.bank_digest = bank_manifest.at("center_digest").get<std::string>();
    save_purification(ctx.purify_dir(seed) / "index.json", idx);

    nlohmann::json inputs;
    inputs["center"] = bank_manifest.at("center_digest");
    nlohmann::json outputs;
    outputs["index"] = digest_file(ctx.purify_dir(seed) / "index.json");
    outputs["split"] = digest_file(ctx.purify_dir(seed) / "split.json");
    write_stage_manifest(ctx.purify_dir(seed), "purify", ctx.cfg, inputs, outputs);
    ctx.say("purified to " + std::to_string(idx.kept.size()) + " of " + std::to_string(banks.d) +
            " channels (seed " + std::to_string(seed) + ")");
}

// ----------------------------- train stage -----------------------------

struct SplitDoc {
    uint64_t seed = 0;
    double fraction = 0;
    std::vector<size_t> train_ids, test_ids;
};

inline SplitDoc read_split(const std::filesystem::path& path) {
    nlohmann::json j = nlohmann::json::parse(read_text(path));
    if (j.value("format", "") != std::string("hsidiff split v1"))
        throw IoError("not a split document: " + path.string());
    SplitDoc doc;
    j.at("seed").get_to(doc.seed);
    j.at("fraction").get_to(doc.fraction);
    j.at("train_ids").get_to(doc.train_ids);
    j.at("test_ids").get_to(doc.test_ids);
    return doc;
}

// Banks + purification index combined into classifier inputs.
struct ClassifierInputs {
    Tensor<float> center;  // purified (and optionally normalized)
    Tensor<float> global_; // untouched
    std::vector<uint16_t> labels;
    std::vector<size_t> t_values;
    std::string bank_digest, purification_digest;
    size_t num_classes = 0;
};

inline ClassifierInputs classifier_inputs(const RunContext& ctx, const FeatureBanks& banks,
                                          const PurificationIndex& idx) {
    nlohmann::json bank_manifest =
        nlohmann::json::parse(read_text(ctx.extract_dir() / "banks" / "manifest.json"));
    require_digest("purification source bank", idx.bank_digest,
                   bank_manifest.at("center_digest").get<std::string>());
    ClassifierInputs in;
    Tensor<float> center = idx.normalized ? normalize_rows(banks.center) : banks.center;
    in.center = apply_purification(center, idx.kept);
    in.global_ = banks.global_;
    LabelRaster raster = load_labels(ctx.labels_path());
    in.labels = bank_labels(banks, raster);
    in.num_classes = raster.num_classes;
    in.t_values = banks.grid.t_values;
    in.bank_digest = bank_manifest.at("center_digest").get<std::string>();
    in.purification_digest = idx.digest();
    return in;
}

inline FuseConfig fuse_config_from(const RunContext& ctx, const ClassifierInputs& in,
                                   uint64_t seed, const std::string& mode) {
    const nlohmann::json& tr = ctx.cfg.at("train");
    FuseConfig fc;
    fc.m = in.center.shape[1];
    fc.K = in.center.shape[2];
    fc.guide_dim = in.global_.shape[2];
    fc.num_classes = in.num_classes;
    fc.mode = mode;
    tr.at("ensemble").get_to(fc.ensemble);
    tr.at("hidden1").get_to(fc.hidden1);
    tr.at("hidden2").get_to(fc.hidden2);
    tr.at("epochs").get_to(fc.epochs);
    tr.at("batch_size").get_to(fc.batch_size);
    tr.at("lr0").get_to(fc.lr0);
    tr.at("lr_min").get_to(fc.lr_min);
    tr.at("shared_fusion").get_to(fc.shared_fusion);
    tr.at("manual_timestep_index").get_to(fc.manual_timestep_index);
    fc.seed = seed;
    fc.validate();
    return fc;
}

// `tag` names the output directory; it doubles as the fusion mode unless a
// manual timestep override is given (the ablation trains manual-t<i> tags).
inline void stage_train(const RunContext& ctx, uint64_t seed, std::string tag = "",
                        bool force = false, size_t manual_index_override = SIZE_MAX) {
    if (tag.empty()) tag = ctx.cfg.at("train").at("mode").get<std::string>();
    std::string fusion_mode = manual_index_override != SIZE_MAX ? "manual" : tag;
    nlohmann::json upstream = read_stage_manifest(ctx.purify_dir(seed), "purify");
    StageLock lock(ctx.train_dir(seed, tag), force);

    FeatureBanks banks = load_banks(ctx.extract_dir() / "banks");
    PurificationIndex idx = load_purification(ctx.purify_dir(seed) / "index.json");
    require_digest("purification index", upstream.at("outputs").at("index").get<std::string>(),
                   digest_file(ctx.purify_dir(seed) / "index.json"));

    ClassifierInputs in = classifier_inputs(ctx, banks, idx);
    FuseConfig fc = fuse_config_from(ctx, in, seed, fusion_mode);
    if (manual_index_override != SIZE_MAX) fc.manual_timestep_index = manual_index_override;

    SplitDoc split = read_split(ctx.purify_dir(seed) / "split.json");
    std::vector<size_t> train_rows = rows_for_pixels(banks, split.train_ids);

    ctx.say("training " + std::to_string(fc.ensemble) + " members, mode " + tag + ", seed " +
            std::to_string(seed));
    EnsembleModel<float> model =
        train_ensemble<float>(in.center, in.global_, in.labels, train_rows, fc, in.t_values,
                              ctx.log);
    model.bank_digest = in.bank_digest;
    model.purification_digest = in.purification_digest;
    save_ensemble(ctx.train_dir(seed, tag) / "ensemble", model);

    nlohmann::json ens_manifest = nlohmann::json::parse(
        read_text(ctx.train_dir(seed, tag) / "ensemble" / "manifest.json"));
    nlohmann::json inputs;
    inputs["center"] = in.bank_digest;
    inputs["index"] = upstream.at("outputs").at("index");
    nlohmann::json outputs;
    outputs["ensemble"] = ens_manifest.at("param_digest");
    write_stage_manifest(ctx.train_dir(seed, tag), "train", ctx.cfg, inputs, outputs);
}

// ----------------------------- predict stage -----------------------------

inline void stage_predict(const RunContext& ctx, uint64_t seed, std::string mode = "",
                          bool force = false) {
    if (mode.empty()) mode = ctx.cfg.at("train").at("mode").get<std::string>();
    nlohmann::json upstream = read_stage_manifest(ctx.train_dir(seed, mode), "train");
    StageLock lock(ctx.predict_dir(seed, mode), force);

    EnsembleModel<float> model = load_ensemble<float>(ctx.train_dir(seed, mode) / "ensemble");
    FeatureBanks banks = load_banks(ctx.extract_dir() / "banks");
    PurificationIndex idx = load_purification(ctx.purify_dir(seed) / "index.json");
    require_digest("ensemble bank pin", model.bank_digest,
                   nlohmann::json::parse(
                       read_text(ctx.extract_dir() / "banks" / "manifest.json"))
                       .at("center_digest")
                       .get<std::string>());
    require_digest("ensemble purification pin", model.purification_digest, idx.digest());

    ClassifierInputs in = classifier_inputs(ctx, banks, idx);
    std::vector<size_t> all_rows(banks.samples());
    for (size_t i = 0; i < all_rows.size(); ++i) all_rows[i] = i;
    ctx.say("predicting " + std::to_string(all_rows.size()) + " labeled pixels");
    std::vector<uint16_t> predicted = predict(model, in.center, in.global_, all_rows);
    write_blob(ctx.predict_dir(seed, mode) / "predictions.bin", predicted.data(),
               predicted.size());

    LabelRaster raster = load_labels(ctx.labels_path());
    Tensor<uint16_t> map = Tensor<uint16_t>::zeros({raster.height, raster.width});
    for (size_t i = 0; i < banks.sample_ids.size(); ++i)
        map.v[banks.sample_ids[i]] = predicted[i];
    std::vector<uint8_t> ppm = render_map(map, default_palette(raster.num_classes));
    write_blob(ctx.predict_dir(seed, mode) / "map.ppm", ppm.data(), ppm.size());

    SplitDoc split = read_split(ctx.purify_dir(seed) / "split.json");
    std::vector<size_t> test_rows = rows_for_pixels(banks, split.test_ids);
    std::vector<uint16_t> truth, pred;
    for (size_t row : test_rows) {
        truth.push_back(in.labels[row]);
        pred.push_back(predicted[row]);
    }
    check_config(!truth.empty(), "empty test split, nothing to evaluate");
    MetricsReport report = metrics(confusion(truth, pred, raster.num_classes));
    report.seeds = {seed};
    nlohmann::json metrics_json = report;
    write_text_atomic(ctx.predict_dir(seed, mode) / "metrics.json", metrics_json.dump(2) + "\n");

    nlohmann::json inputs;
    inputs["ensemble"] = upstream.at("outputs").at("ensemble");
    inputs["center"] = in.bank_digest;
    nlohmann::json outputs;
    outputs["predictions"] = digest_file(ctx.predict_dir(seed, mode) / "predictions.bin");
    outputs["metrics"] = digest_file(ctx.predict_dir(seed, mode) / "metrics.json");
    outputs["map"] = digest_file(ctx.predict_dir(seed, mode) / "map.ppm");
    write_stage_manifest(ctx.predict_dir(seed, mode), "predict", ctx.cfg, inputs, outputs);
    ctx.say("test OA " + format_ratio(report.oa) + ", AA " + format_ratio(report.aa) +
            (report.kappa_defined ? ", kappa " + format_ratio(report.kappa) : ""));
}

// ----------------------------- report stage -----------------------------

// Published headline numbers for the named dataset presets; they appear in
// the report for side-by-side reading and are never asserted against.
inline nlohmann::json reference_targets(const std::string& dataset) {
    if (dataset == "indian_pines")
        return {{"oa", 0.9945}, {"aa", 0.9940}, {"kappa", 0.9937}};
    if (dataset == "pavia_university") return {{"oa", 0.9995}};
    if (dataset == "houston2013") return {{"oa", 0.9829}};
    if (dataset == "whu_longkou") return {{"oa", 0.9961}};
    return nlohmann::json::object();
}

inline MetricsReport collect_mode_metrics(const RunContext& ctx, const std::string& mode) {
    std::vector<MetricsReport> runs;
    for (uint64_t seed : ctx.seeds()) {
        std::filesystem::path path = ctx.predict_dir(seed, mode) / "metrics.json";
        if (!std::filesystem::exists(path))
            throw ConfigError("missing " + path.string() + "; run predict for seed " +
                              std::to_string(seed));
        runs.push_back(nlohmann::json::parse(read_text(path)).get<MetricsReport>());
    }
    return average_runs(runs);
}

inline void stage_report(const RunContext& ctx, bool force = false) {
    std::string mode = ctx.cfg.at("train").at("mode").get<std::string>();
    StageLock lock(ctx.report_dir(), force);
    MetricsReport avg = collect_mode_metrics(ctx, mode);

    std::string dataset = ctx.cfg.at("report").at("dataset").get<std::string>();
    nlohmann::json reference = reference_targets(dataset);

    nlohmann::json doc;
    doc["mode"] = mode;
    doc["metrics"] = avg;
    doc["dataset"] = dataset;
    doc["reference"] = reference;
    write_text_atomic(ctx.report_dir() / "report.json", doc.dump(2) + "\n");

    std::string text = report_table(avg, "mode " + mode +
                                             (dataset.empty() ? "" : " on " + dataset));
    if (!reference.empty()) {
        text += "published reference:";
        for (const auto& [key, value] : reference.items())
            text += " " + key + " " + format_ratio(value.get<double>());
        text += " (reported elsewhere, not checked)\n";
    }
    write_text_atomic(ctx.report_dir() / "report.txt", text);

    nlohmann::json outputs;
    outputs["report"] = digest_file(ctx.report_dir() / "report.json");
    write_stage_manifest(ctx.report_dir(), "report", ctx.cfg, nlohmann::json::object(), outputs);
    if (ctx.log) (*ctx.log) << text;
}

// ----------------------------- sweep stage -----------------------------

// Ensure the shared stages exist, then train and evaluate every fusion mode
// per seed. The manual row sweeps all timesteps and keeps the best test OA.
inline nlohmann::json sweep_fusion_ablation(const RunContext& ctx, bool force = false) {
    if (!std::filesystem::exists(ctx.pretrain_dir() / "manifest.json")) stage_pretrain(ctx);
    if (!std::filesystem::exists(ctx.extract_dir() / "manifest.json")) stage_extract(ctx);
    FeatureBanks banks = load_banks(ctx.extract_dir() / "banks");
    size_t m = banks.grid.m;

    std::vector<std::string> modes = {"manual", "average", "selective_noguide",
                                      "selective_guided"};
    std::map<std::string, std::vector<MetricsReport>> per_mode;
    for (uint64_t seed : ctx.seeds()) {
        if (!std::filesystem::exists(ctx.purify_dir(seed) / "manifest.json"))
            stage_purify(ctx, seed, force);
        for (const std::string& mode : modes) {
            if (mode == "manual") {
                // one classifier per timestep, keep the strongest
                MetricsReport best;
                bool have = false;
                for (size_t i = 0; i < m; ++i) {
                    std::string tag = "manual-t" + std::to_string(i);
                    if (!std::filesystem::exists(ctx.predict_dir(seed, tag) / "metrics.json")) {
                        stage_train(ctx, seed, tag, force, i);
                        stage_predict(ctx, seed, tag, force);
                    }
                    MetricsReport r = nlohmann::json::parse(
                                          read_text(ctx.predict_dir(seed, tag) / "metrics.json"))
                                          .get<MetricsReport>();
                    if (!have || r.oa > best.oa) {
                        best = r;
                        have = true;
                    }
                }
                per_mode[mode].push_back(best);
            } else {
                if (!std::filesystem::exists(ctx.predict_dir(seed, mode) / "metrics.json")) {
                    stage_train(ctx, seed, mode, force);
                    stage_predict(ctx, seed, mode, force);
                }
                per_mode[mode].push_back(
                    nlohmann::json::parse(read_text(ctx.predict_dir(seed, mode) / "metrics.json"))
                        .get<MetricsReport>());
            }
        }
    }

    nlohmann::json rows = nlohmann::json::array();
    std::string text = "fusion ablation (mean over " + std::to_string(ctx.seeds().size()) +
                       " seeds)\nmode               OA      AA      kappa\n";
    for (const std::string& mode : modes) {
        MetricsReport avg = average_runs(per_mode[mode]);
        nlohmann::json row;
        row["mode"] = mode;
        row["oa"] = avg.oa;
        row["aa"] = avg.aa;
        row["kappa"] = avg.kappa_defined ? nlohmann::json(avg.kappa) : nlohmann::json(nullptr);
        rows.push_back(row);
        char line[128];
        std::snprintf(line, sizeof line, "%-18s %s  %s  %s\n", mode.c_str(),
                      format_ratio(avg.oa).c_str(), format_ratio(avg.aa).c_str(),
                      avg.kappa_defined ? format_ratio(avg.kappa).c_str() : "n/a");
        text += line;
    }
    std::filesystem::create_directories(ctx.root / "sweep");
    nlohmann::json doc;
    doc["format"] = "hsidiff ablation v1";
    doc["rows"] = rows;
    write_text_atomic(ctx.root / "sweep" / "ablation.json", doc.dump(2) + "\n");
    write_text_atomic(ctx.root / "sweep" / "ablation.txt", text);
    if (ctx.log) (*ctx.log) << text;
    return doc;
}

// Full pipeline for one configuration document in one run root.
inline MetricsReport run_everything(RunContext ctx) {
    stage_pretrain(ctx);
    stage_extract(ctx);
    for (uint64_t seed : ctx.seeds()) {
        stage_purify(ctx, seed);
        stage_train(ctx, seed);
        stage_predict(ctx, seed);
    }
    stage_report(ctx);
    return collect_mode_metrics(ctx, ctx.cfg.at("train").at("mode").get<std::string>());
}

// Cartesian grid over config overrides: each axis is "path=v1,v2,...".
// Every point runs the full pipeline in its own subdirectory.
inline nlohmann::json sweep_grid(const RunContext& ctx, const std::vector<std::string>& axes) {
    check_config(!axes.empty(), "sweep: no grid axes given");
    std::vector<std::string> keys;
    std::vector<std::vector<std::string>> values;
    for (const std::string& axis : axes) {
        size_t eq = axis.find('=');
        check_config(eq != std::string::npos, "grid axis must look like key=v1,v2: " + axis);
        keys.push_back(axis.substr(0, eq));
        std::vector<std::string> vals;
        std::string rest = axis.substr(eq + 1);
        size_t start = 0;
        while (true) {
            size_t comma = rest.find(',', start);
            vals.push_back(rest.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        check_config(!vals.empty(), "grid axis without values: " + axis);
        values.push_back(vals);
    }

    nlohmann::json rows = nlohmann::json::array();
    std::vector<size_t> cursor(keys.size(), 0);
    std::string text = "grid sweep\n";
    while (true) {
        std::vector<std::string> overrides;
        std::string tag;
        for (size_t a = 0; a < keys.size(); ++a) {
            overrides.push_back(keys[a] + "=" + values[a][cursor[a]]);
            if (!tag.empty()) tag += "_";
            std::string key_tail = keys[a].substr(keys[a].rfind('.') + 1);
            tag += key_tail + "-" + values[a][cursor[a]];
        }
        RunContext sub;
        sub.cfg = ctx.cfg;
        for (const std::string& o : overrides) {
            auto [path, value] = parse_override(o);
            nlohmann::json* node = &sub.cfg;
            size_t start = 0;
            while (true) {
                size_t dot = path.find('.', start);
                std::string key = path.substr(start, dot - start);
                check_config(node->contains(key), "unknown grid key: " + path);
                node = &(*node)[key];
                if (dot == std::string::npos) break;
                start = dot + 1;
            }
            *node = value;
        }
        sub.root = ctx.root / "sweep" / ("grid-" + tag);
        sub.log = ctx.log;
        ctx.say("grid point " + tag);
        MetricsReport avg = run_everything(sub);
        nlohmann::json row;
        row["point"] = tag;
        for (const std::string& o : overrides) row["overrides"].push_back(o);
        row["oa"] = avg.oa;
        row["aa"] = avg.aa;
        row["kappa"] = avg.kappa_defined ? nlohmann::json(avg.kappa) : nlohmann::json(nullptr);
        rows.push_back(row);
        char line[160];
        std::snprintf(line, sizeof line, "%-40s OA %s AA %s\n", tag.c_str(),
                      format_ratio(avg.oa).c_str(), format_ratio(avg.aa).c_str());
        text += line;

        size_t axis = 0;
        while (axis < keys.size() && ++cursor[axis] == values[axis].size()) {
            cursor[axis] = 0;
            ++axis;
        }
        if (axis == keys.size()) break;
    }
    std::filesystem::create_directories(ctx.root / "sweep");
    nlohmann::json doc;
    doc["format"] = "hsidiff grid sweep v1";
    doc["rows"] = rows;
    write_text_atomic(ctx.root / "sweep" / "grid.json", doc.dump(2) + "\n");
    write_text_atomic(ctx.root / "sweep" / "grid.txt", text);
    if (ctx.log) (*ctx.log) << text;
    return doc;
}

} // namespace hsidiff
