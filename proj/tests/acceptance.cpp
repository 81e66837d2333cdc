// Acceptance gate: nine release-blocking properties, one binary, one
// pass/fail line each. Progress chatter goes to stderr; the verdict lines
// and the exit status are the contract.

#include <chrono>
#include <cstdio>
#include <iostream>

#include "hsidiff/pipeline.hpp"

using namespace hsidiff;
namespace fs = std::filesystem;

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

fs::path fresh_dir(const std::string& leaf) {
    fs::path dir = fs::temp_directory_path() / "hsidiff_acceptance" / leaf;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

double rel_gap(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// ---------------------------------------------------------------- 1

void check_purification_oracle() {
    Rng rng = make_rng(20260816, 1);
    std::uniform_int_distribution<size_t> two_to_eight(2, 8), one_to_eight(1, 8);
    const double grid[3] = {0.1, 0.5, 0.9};
    size_t instances = 1200;
    for (size_t inst = 0; inst < instances; ++inst) {
        size_t m = two_to_eight(rng), C = two_to_eight(rng), d = one_to_eight(rng);
        Tensor<double> M = Tensor<double>::randn({m, C, d}, rng, 2.0);
        double alpha = grid[inst % 3], beta = grid[(inst / 3) % 3];

        oracle::NaiveScores naive = oracle::naive_scores(M.v, m, C, d, alpha, beta);
        std::vector<double> tc = class_score(M, alpha);
        std::vector<double> tt = timestep_score(M, beta);
        for (size_t k = 0; k < d; ++k) {
            require(rel_gap(tc[k], naive.tau_class[k]) < 1e-12,
                    "class score deviates from the reference at instance " +
                        std::to_string(inst));
            require(rel_gap(tt[k], naive.tau_t[k]) < 1e-12,
                    "timestep score deviates from the reference at instance " +
                        std::to_string(inst));
        }
        std::vector<double> tau(d);
        for (size_t k = 0; k < d; ++k) tau[k] = tc[k] + tt[k];
        size_t K = 1 + inst % d;
        require(select_topk(tau, K) == oracle::naive_topk(naive.tau, K),
                "top-K selection deviates from the reference at instance " +
                    std::to_string(inst));
    }
}

// ---------------------------------------------------------------- 2

void check_forward_noising_moments() {
    NoiseSchedule sched = build_cosine_schedule(1000);
    Rng rng = make_rng(20260816, 2);
    std::uniform_int_distribution<size_t> pick_t(1, 1000);
    const size_t draws = 10000;
    for (size_t pair = 0; pair < 5; ++pair) {
        size_t t = pick_t(rng);
        Tensor<double> x0 = Tensor<double>::randn({1, 2, 3, 3}, rng);
        size_t n = x0.size();
        std::vector<double> sum(n, 0), sumsq(n, 0);
        for (size_t draw = 0; draw < draws; ++draw) {
            Tensor<double> eps = Tensor<double>::randn(x0.shape, rng);
            Tensor<double> xt = q_sample(x0, t, eps, sched);
            for (size_t i = 0; i < n; ++i) {
                sum[i] += xt.v[i];
                sumsq[i] += xt.v[i] * xt.v[i];
            }
        }
        double ab = sched.alpha_bar_at(t);
        double mean_sigma = std::sqrt((1.0 - ab) / draws);
        for (size_t i = 0; i < n; ++i) {
            double mean = sum[i] / draws;
            double expect = std::sqrt(ab) * x0.v[i];
            require(std::abs(mean - expect) < 4 * mean_sigma,
                    "empirical mean off at t=" + std::to_string(t) + ": " + num(mean) +
                        " vs " + num(expect));
            double var = (sumsq[i] - sum[i] * sum[i] / draws) / (draws - 1);
            require(std::abs(var - (1.0 - ab)) < 0.05 * (1.0 - ab),
                    "empirical variance off at t=" + std::to_string(t) + ": " + num(var) +
                        " vs " + num(1.0 - ab));
        }
    }
}

// ---------------------------------------------------------------- 3

void check_schedule_contract() {
    const size_t T = 1000;
    NoiseSchedule sched = build_cosine_schedule(T);
    for (size_t t = 2; t <= T; ++t)
        require(sched.alpha_bar_at(t) < sched.alpha_bar_at(t - 1),
                "signal level is not strictly decreasing at t=" + std::to_string(t));
    require(sched.alpha_bar_at(1) > 0.99,
            "signal level at t=1 is " + num(sched.alpha_bar_at(1)));
    require(sched.alpha_bar_at(T) < 0.01,
            "signal level at t=T is " + num(sched.alpha_bar_at(T)));

    // independent closed form: squared cosine ramp with the standard offset
    const double s = 0.008, pi = std::acos(-1.0);
    auto f = [&](double t) {
        double c = std::cos((t / T + s) / (1 + s) * pi / 2);
        return c * c;
    };
    double expected = f(500.0) / f(0.0);
    require(std::abs(sched.alpha_bar_at(500) - expected) < 1e-10,
            "midpoint signal level " + num(sched.alpha_bar_at(500)) + " vs closed form " +
                num(expected));
}

// ---------------------------------------------------------------- 4

size_t fd_check_params(const std::vector<std::pair<std::string, Var<double>*>>& params,
                       const std::function<double()>& loss_fn, size_t per_tensor) {
    size_t checked = 0;
    for (auto& [name, var] : params) {
        auto& vals = var->mutable_val().v;
        size_t stride = std::max<size_t>(1, vals.size() / per_tensor);
        for (size_t j = 0; j < vals.size(); j += stride) {
            double keep = vals[j], h = 1e-5;
            vals[j] = keep + h;
            double hi = loss_fn();
            vals[j] = keep - h;
            double lo = loss_fn();
            vals[j] = keep;
            double fd = (hi - lo) / (2 * h);
            double an = var->grad().v[j];
            require(rel_gap(fd, an) < 1e-4, "gradient mismatch in " + name + "[" +
                                                std::to_string(j) + "]: analytic " + num(an) +
                                                " vs finite difference " + num(fd));
            ++checked;
        }
    }
    return checked;
}

void check_gradient_fidelity() {
    // fusion plus classifier, guided selective mode
    FuseConfig cfg;
    cfg.m = 2;
    cfg.K = 4;
    cfg.guide_dim = 3;
    cfg.num_classes = 2;
    cfg.hidden1 = 5;
    cfg.hidden2 = 4;
    cfg.mode = "selective_guided";
    cfg.seed = 21;
    Member<double> member = make_member<double>(cfg, 0, nullptr);
    size_t member_params = 0;
    for (auto& [name, var] : member.params) member_params += var.val().size();
    require(member_params <= 5000,
            "fusion instance has " + std::to_string(member_params) + " parameters");

    Rng rng = make_rng(20260816, 4);
    Tensor<double> c = Tensor<double>::randn({3, 2, 4}, rng);
    Tensor<double> g = Tensor<double>::randn({3, 2, 3}, rng);
    std::vector<size_t> y = {0, 1, 0};
    auto fusion_loss = [&]() {
        Var<double> vg = Var<double>::constant(g);
        Var<double> logits = member_forward(member, cfg, Var<double>::constant(c), &vg, true);
        return cross_entropy(logits, y).val().v[0];
    };
    {
        Var<double> vg = Var<double>::constant(g);
        Var<double> logits = member_forward(member, cfg, Var<double>::constant(c), &vg, true);
        Var<double> loss = cross_entropy(logits, y);
        for (auto& [name, var] : member.params) var.zero_grad();
        backward(loss);
    }
    std::vector<std::pair<std::string, Var<double>*>> fusion_params;
    for (auto& [name, var] : member.params) fusion_params.push_back({name, &var});
    size_t checked = fd_check_params(fusion_params, fusion_loss, 3);
    require(checked >= 30, "too few fusion coordinates checked");

    // miniature denoiser under the full training loss (stop-gradient disabled
    // so the whole objective is differentiable for the comparison)
    UNetConfig mc;
    mc.in_channels = 1;
    mc.base_channels = 2;
    mc.stage_multipliers = {1, 2};
    mc.res_blocks = 1;
    mc.time_embed_dim = 8;
    mc.groups_per_norm = 2;
    mc.patch_size = 8;
    mc.validate();
    UNet<double> net = UNet<double>::build(mc, 5);
    require(net.param_count() <= 5000,
            "denoiser instance has " + std::to_string(net.param_count()) + " parameters");

    NoiseSchedule sched = build_cosine_schedule(40);
    Rng data_rng = make_rng(20260816, 5);
    Tensor<double> x0 = Tensor<double>::randn({2, 1, 8, 8}, data_rng, 0.6);
    LossOptions opt;
    opt.mode = LossMode::hybrid;
    opt.lambda_vlb = 0.001;
    opt.vlb_detach_mean = false;
    auto denoiser_loss_var = [&]() {
        Rng r = make_rng(11, 3);
        return training_loss<double>(
                   [&](const Var<double>& xt, const std::vector<size_t>& tvec) {
                       auto out = net.forward(xt, tvec);
                       return std::make_pair(out.eps, out.logvar_frac);
                   },
                   x0, sched, r, opt)
            .total;
    };
    auto denoiser_loss = [&]() { return denoiser_loss_var().val().v[0]; };
    {
        Var<double> loss = denoiser_loss_var();
        for (auto& var : net.param_list()) var.zero_grad();
        backward(loss);
    }
    std::vector<std::pair<std::string, Var<double>*>> net_params;
    for (auto& [name, var] : net.params()) net_params.push_back({name, &var});
    checked = fd_check_params(net_params, denoiser_loss, 2);
    require(checked >= 40, "too few denoiser coordinates checked");
}

// ---------------------------------------------------------------- 5

void check_weight_laws() {
    Rng rng = make_rng(20260816, 6);
    size_t n = 4, m = 3, K = 5;
    Tensor<double> logits = Tensor<double>::randn({n, m, K}, rng);
    Tensor<double> w = softmax_axis1(Var<double>::constant(logits)).val();
    for (size_t i = 0; i < n; ++i)
        for (size_t k = 0; k < K; ++k) {
            double sum = 0;
            for (size_t j = 0; j < m; ++j) sum += w.at(i, j, k);
            require(std::abs(sum - 1.0) < 1e-5, "weights do not sum to one");
        }

    // shift invariance, bitwise for an exactly representable shift
    Tensor<double> quantized = logits;
    for (double& v : quantized.v) v = std::round(v * 4) / 4;
    Tensor<double> shifted = quantized;
    for (double& v : shifted.v) v += 2.0;
    Tensor<double> w1 = softmax_axis1(Var<double>::constant(quantized)).val();
    Tensor<double> w2 = softmax_axis1(Var<double>::constant(shifted)).val();
    for (size_t i = 0; i < w1.size(); ++i)
        require(w1.v[i] == w2.v[i], "weights are not shift invariant");

    // equal logits give exactly uniform weights
    Tensor<double> equal = Tensor<double>::full({n, m, K}, 0.7);
    Tensor<double> wu = softmax_axis1(Var<double>::constant(equal)).val();
    for (double v : wu.v)
        require(v == 1.0 / m, "equal logits do not give exactly uniform weights");

    // one-hot limit reproduces single-timestep selection exactly
    Tensor<double> c = Tensor<double>::randn({n, m, K}, rng);
    size_t j_star = 1;
    Tensor<double> hard = Tensor<double>::full({n, m, K}, -800.0);
    for (size_t i = 0; i < n; ++i)
        for (size_t k = 0; k < K; ++k) hard.at(i, j_star, k) = 800.0;
    Var<double> vc = Var<double>::constant(c);
    Tensor<double> fused =
        fuse(softmax_axis1(Var<double>::constant(hard)), vc).val();
    Tensor<double> sliced = slice_axis1(vc, j_star).val();
    for (size_t i = 0; i < fused.size(); ++i)
        require(fused.v[i] == sliced.v[i], "one-hot weights do not reproduce slicing");

    // zeroed gates make selective fusion equal average fusion, bitwise
    FuseConfig cfg;
    cfg.m = m;
    cfg.K = K;
    cfg.guide_dim = 3;
    cfg.num_classes = 2;
    cfg.hidden1 = 6;
    cfg.hidden2 = 4;
    cfg.mode = "selective_guided";
    cfg.seed = 9;
    Member<float> member = make_member<float>(cfg, 0, nullptr);
    for (auto& [name, var] : member.params)
        if (name.find("fusion.gate") != std::string::npos)
            for (auto& v : var.mutable_val().v) v = 0;
    Rng frng = make_rng(20260816, 7);
    Tensor<float> cf = Tensor<float>::randn({n, m, K}, frng);
    Tensor<float> gf = Tensor<float>::randn({n, m, 3}, frng);
    Var<float> vgf = Var<float>::constant(gf);
    Tensor<float> selective =
        member_forward(member, cfg, Var<float>::constant(cf), &vgf, false).val();
    FuseConfig avg_cfg = cfg;
    avg_cfg.mode = "average";
    Tensor<float> averaged =
        member_forward<float>(member, avg_cfg, Var<float>::constant(cf), nullptr, false).val();
    for (size_t i = 0; i < selective.size(); ++i)
        require(selective.v[i] == averaged.v[i],
                "uniform selective weights do not reproduce average fusion bitwise");
}

// ---------------------------------------------------------------- 6 and 7

struct ToyResults {
    bool ready = false;
    double nearest_mean = 0;
    std::map<std::string, double> mean_oa; // per fusion mode
};
ToyResults g_toy;

RunContext toy_context(const fs::path& dir) {
    oracle::SyntheticScene scene = oracle::make_scene(3, 64, 16, 4, 6.0);
    save_cube(dir / "cube.hdr", scene.cube);
    save_labels(dir / "labels.hdr", scene.labels);

    RunContext ctx;
    ctx.cfg = default_run_config();
    ctx.cfg["data"]["cube"] = (dir / "cube.hdr").string();
    ctx.cfg["data"]["labels"] = (dir / "labels.hdr").string();
    ctx.cfg["patch_size"] = 16;
    ctx.cfg["pca_dims"] = 4;
    ctx.cfg["seeds"] = {0, 1, 2, 3, 4};
    ctx.cfg["pretrain"]["total_steps"] = 2000;
    ctx.cfg["pretrain"]["batch_size"] = 16;
    ctx.cfg["pretrain"]["T"] = 200;
    ctx.cfg["pretrain"]["num_patches"] = 2048;
    ctx.cfg["extract"]["m"] = 5;
    ctx.cfg["train"]["ensemble"] = 5;
    ctx.cfg["train"]["epochs"] = 50;
    ctx.root = dir / "run";
    ctx.log = &std::cerr;
    return ctx;
}

void check_toy_pipeline() {
    fs::path dir = fresh_dir("toy");
    RunContext ctx = toy_context(dir);

    HsiCube cube = load_cube(ctx.cube_path());
    LabelRaster labels = load_labels(ctx.labels_path());
    SplitResult split = split_train_test(labels, 0.1, 0);
    g_toy.nearest_mean =
        oracle::nearest_mean_accuracy(cube, labels, split.train_ids, split.test_ids);
    require(g_toy.nearest_mean >= 0.99, "nearest-mean baseline scored only " +
                                            num(g_toy.nearest_mean) +
                                            "; the scene is not separable enough");

    nlohmann::json ablation = sweep_fusion_ablation(ctx);
    for (const auto& row : ablation.at("rows"))
        g_toy.mean_oa[row.at("mode").get<std::string>()] = row.at("oa").get<double>();
    g_toy.ready = true;

    double oa = g_toy.mean_oa.at("selective_guided");
    require(oa >= 0.90, "5-seed mean OA " + num(oa) + " is below 0.90 (nearest-mean " +
                            num(g_toy.nearest_mean) + ")");
}

std::string check_ablation_direction() {
    require(g_toy.ready, "toy pipeline artifacts unavailable (stage 6 failed)");
    double guided = g_toy.mean_oa.at("selective_guided");
    double noguide = g_toy.mean_oa.at("selective_noguide");
    double manual = g_toy.mean_oa.at("manual");
    double average = g_toy.mean_oa.at("average");
    require(guided >= noguide - 0.005, "guidance hurts: guided " + num(guided) +
                                           " vs unguided " + num(noguide));
    require(guided >= manual - 0.005, "selective fusion loses to the best single timestep: " +
                                          num(guided) + " vs " + num(manual));
    return "guided " + num(guided) + ", unguided " + num(noguide) + ", best-single " +
           num(manual) + ", average " + num(average);
}

// ---------------------------------------------------------------- 8

void check_metrics_cases() {
    MetricsReport r = metrics(confusion({1, 1, 2, 2}, {1, 2, 2, 2}, 2));
    require(r.oa == 0.75, "hand case OA " + num(r.oa));
    require(r.aa == 0.75, "hand case AA " + num(r.aa));
    require(r.kappa_defined && r.kappa == 0.5, "hand case kappa " + num(r.kappa));

    MetricsReport perfect = metrics(confusion({1, 2, 3}, {1, 2, 3}, 3));
    require(perfect.oa == 1.0 && perfect.kappa == 1.0, "perfect confusion is not kappa 1");

    MetricsReport degenerate = metrics(confusion({1, 1}, {1, 1}, 2));
    require(!degenerate.kappa_defined, "single-class agreement must leave kappa undefined");

    // class histogram of the classic 145x145 16-class benchmark raster:
    // a 10% stratified split must come out 1024 train / 9225 test
    const size_t sizes[16] = {46, 1428, 830, 237, 483, 730, 28, 478,
                              20, 972, 2455, 593, 205, 1265, 386, 93};
    LabelRaster lr;
    lr.height = 1;
    lr.width = 10249;
    lr.num_classes = 16;
    lr.labels = Tensor<uint16_t>::zeros({lr.height, lr.width});
    size_t cursor = 0;
    for (size_t cls = 0; cls < 16; ++cls)
        for (size_t i = 0; i < sizes[cls]; ++i) lr.labels.v[cursor++] = uint16_t(cls + 1);
    require(cursor == 10249, "bad histogram total");
    for (uint64_t seed : {0ull, 1ull, 42ull}) {
        SplitResult split = split_train_test(lr, 0.1, seed);
        require(split.train_ids.size() == 1024,
                "train total " + std::to_string(split.train_ids.size()) + " for seed " +
                    std::to_string(seed));
        require(split.test_ids.size() == 9225,
                "test total " + std::to_string(split.test_ids.size()) + " for seed " +
                    std::to_string(seed));
    }
}

// ---------------------------------------------------------------- 9

std::map<std::string, std::string> tree_digests(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& entry : fs::recursive_directory_iterator(root))
        if (entry.is_regular_file())
            out[fs::relative(entry.path(), root).string()] = digest_file(entry.path());
    return out;
}

void check_determinism_chain() {
    fs::path dir = fresh_dir("determinism");
    oracle::SyntheticScene scene = oracle::make_scene(11, 32, 8, 3, 7.0);
    save_cube(dir / "cube.hdr", scene.cube);
    save_labels(dir / "labels.hdr", scene.labels);

    auto context_at = [&](const fs::path& root) {
        RunContext ctx;
        ctx.cfg = default_run_config();
        ctx.cfg["data"]["cube"] = (dir / "cube.hdr").string();
        ctx.cfg["data"]["labels"] = (dir / "labels.hdr").string();
        ctx.cfg["patch_size"] = 8;
        ctx.cfg["pca_dims"] = 3;
        ctx.cfg["model"]["base_channels"] = 8;
        ctx.cfg["model"]["time_embed_dim"] = 16;
        ctx.cfg["model"]["groups_per_norm"] = 4;
        ctx.cfg["pretrain"]["total_steps"] = 200;
        ctx.cfg["pretrain"]["batch_size"] = 8;
        ctx.cfg["pretrain"]["T"] = 100;
        ctx.cfg["pretrain"]["num_patches"] = 128;
        ctx.cfg["extract"]["m"] = 3;
        ctx.cfg["train"]["ensemble"] = 2;
        ctx.cfg["train"]["hidden1"] = 16;
        ctx.cfg["train"]["hidden2"] = 8;
        ctx.cfg["train"]["epochs"] = 10;
        ctx.cfg["train"]["batch_size"] = 32;
        ctx.cfg["train"]["lr0"] = 1e-3;
        ctx.cfg["train"]["lr_min"] = 1e-5;
        ctx.root = root;
        return ctx;
    };

    MetricsReport first = run_everything(context_at(dir / "run_a"));
    MetricsReport second = run_everything(context_at(dir / "run_b"));
    require(nlohmann::json(first) == nlohmann::json(second), "metrics differ between reruns");

    auto a = tree_digests(dir / "run_a");
    auto b = tree_digests(dir / "run_b");
    require(a.size() >= 15, "suspiciously few artifacts: " + std::to_string(a.size()));
    require(a.size() == b.size(), "artifact sets differ: " + std::to_string(a.size()) +
                                      " vs " + std::to_string(b.size()));
    for (const auto& [rel, digest] : a) {
        auto it = b.find(rel);
        require(it != b.end(), "artifact missing on rerun: " + rel);
        require(it->second == digest, "artifact differs between reruns: " + rel);
    }
}

// ---------------------------------------------------------------- harness

struct Criterion {
    int id;
    std::string name;
    double limit_seconds;
    std::function<std::string()> body; // returns optional detail for the line
};

} // namespace

int main() {
    std::vector<Criterion> criteria = {
        {1, "channel purification matches the brute-force reference", 30,
         [] { check_purification_oracle(); return std::string(); }},
        {2, "forward-noising moments match the closed form", 60,
         [] { check_forward_noising_moments(); return std::string(); }},
        {3, "cosine noise schedule contract", 1,
         [] { check_schedule_contract(); return std::string(); }},
        {4, "analytic gradients match finite differences", 120,
         [] { check_gradient_fidelity(); return std::string(); }},
        {5, "fusion weight laws", 30,
         [] { check_weight_laws(); return std::string(); }},
        {6, "toy end-to-end pipeline accuracy", 900,
         [] { check_toy_pipeline(); return "5-seed mean OA " +
                                              num(g_toy.mean_oa.at("selective_guided")); }},
        {7, "fusion ablation direction", 60, [] { return check_ablation_direction(); }},
        {8, "metrics hand cases and split totals", 30,
         [] { check_metrics_cases(); return std::string(); }},
        {9, "determinism chain", 600,
         [] { check_determinism_chain(); return std::string(); }},
    };

    int failures = 0;
    for (const Criterion& c : criteria) {
        auto start = std::chrono::steady_clock::now();
        std::string verdict, detail;
        try {
            detail = c.body();
            verdict = "PASS";
        } catch (const std::exception& e) {
            verdict = "FAIL";
            detail = e.what();
        }
        double elapsed =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (verdict == "PASS" && elapsed > c.limit_seconds) {
            verdict = "FAIL";
            detail = "over time budget: " + num(elapsed) + "s > " + num(c.limit_seconds) + "s" +
                     (detail.empty() ? "" : " (" + detail + ")");
        }
        if (verdict == "FAIL") ++failures;
        char line[512];
        std::snprintf(line, sizeof line, "[%s] %d %s (%.1fs)%s%s", verdict.c_str(), c.id,
                      c.name.c_str(), elapsed, detail.empty() ? "" : ": ", detail.c_str());
        std::cout << line << std::endl;
    }
    return failures;
}
