#pragma once

// Cosine noise schedule, forward diffusion, hybrid training objective with
// learned variances, the pretraining loop, checkpoint serialization, and
// ancestral sampling for diagnostics.

#include <map>

#include <json.hpp>

#include "hsidiff/autograd.hpp"
#include "hsidiff/common.hpp"
#include "hsidiff/tensor.hpp"
#include "hsidiff/unet.hpp"

namespace hsidiff {

// ----------------------------- schedule -----------------------------

struct NoiseSchedule {
    size_t T = 0;
    std::vector<double> beta;      // beta[t-1] is beta_t, t in [1, T]
    std::vector<double> alpha;     // 1 - beta_t
    std::vector<double> alpha_bar; // prod_{s<=t} alpha_s

    double beta_at(size_t t) const { return beta.at(t - 1); }
    double alpha_at(size_t t) const { return alpha.at(t - 1); }
    double alpha_bar_at(size_t t) const { return alpha_bar.at(t - 1); }
    double alpha_bar_prev(size_t t) const { return t >= 2 ? alpha_bar.at(t - 2) : 1.0; }

    // variance of q(x_{t-1} | x_t, x_0)
    double posterior_variance(size_t t) const {
        return (1.0 - alpha_bar_prev(t)) / (1.0 - alpha_bar_at(t)) * beta_at(t);
    }
    // log posterior variance with the degenerate t=1 entry replaced by t=2's
    double posterior_log_variance_clipped(size_t t) const {
        double v = t == 1 ? posterior_variance(std::min<size_t>(2, T)) : posterior_variance(t);
        return std::log(v);
    }
    // coefficients of the posterior mean: mu = c0 * x0 + ct * x_t
    double posterior_mean_coef_x0(size_t t) const {
        return std::sqrt(alpha_bar_prev(t)) * beta_at(t) / (1.0 - alpha_bar_at(t));
    }
    double posterior_mean_coef_xt(size_t t) const {
        return std::sqrt(alpha_at(t)) * (1.0 - alpha_bar_prev(t)) / (1.0 - alpha_bar_at(t));
    }
};

// Cosine schedule: alpha_bar(t) = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2),
// s = 0.008, with beta_t = 1 - alpha_bar_t/alpha_bar_{t-1} clipped to <= 0.999.
inline NoiseSchedule build_cosine_schedule(size_t T) {
    check_config(T >= 2, "schedule: T must be >= 2");
    constexpr double s = 0.008;
    auto f = [&](double t) {
        double arg = ((t / static_cast<double>(T) + s) / (1.0 + s)) * M_PI / 2.0;
        double c = std::cos(arg);
        return c * c;
    };
    NoiseSchedule sched;
    sched.T = T;
    sched.beta.resize(T);
    sched.alpha.resize(T);
    sched.alpha_bar.resize(T);
    double f0 = f(0.0);
    double prev_bar = 1.0;
    for (size_t t = 1; t <= T; ++t) {
        double bar = f(static_cast<double>(t)) / f0;
        double beta = std::min(1.0 - bar / prev_bar, 0.999);
        sched.beta[t - 1] = beta;
        sched.alpha[t - 1] = 1.0 - beta;
        // rebuild alpha_bar from the clipped betas so the product identity holds
        sched.alpha_bar[t - 1] = (t == 1 ? 1.0 : sched.alpha_bar[t - 2]) * sched.alpha[t - 1];
        prev_bar = sched.alpha_bar[t - 1];
    }
    for (size_t t = 0; t < T; ++t)
        if (!(sched.beta[t] > 0.0 && sched.beta[t] < 1.0))
            throw NumericError("schedule: beta out of (0,1) at t=" + std::to_string(t + 1));
    return sched;
}

// ----------------------------- forward process -----------------------------

// x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps, exactly.
template <class T>
inline Tensor<T> q_sample(const Tensor<T>& x0, size_t t, const Tensor<T>& eps,
                          const NoiseSchedule& sched) {
    check_config(t >= 1 && t <= sched.T, "q_sample: t out of range");
    check_config(x0.shape == eps.shape, "q_sample: eps shape mismatch");
    double ab = sched.alpha_bar_at(t);
    T c0 = static_cast<T>(std::sqrt(ab)), ce = static_cast<T>(std::sqrt(1.0 - ab));
    Tensor<T> out = x0;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = c0 * out.v[i] + ce * eps.v[i];
    return out;
}

// ----------------------------- training loss -----------------------------

struct DiffusionLossReport {
    double simple_term = 0;
    double vlb_term = 0;
    double total = 0;
};

enum class LossMode { hybrid, simple, vlb };

inline LossMode loss_mode_from_string(const std::string& s) {
    if (s == "hybrid") return LossMode::hybrid;
    if (s == "simple") return LossMode::simple;
    if (s == "vlb") return LossMode::vlb;
    throw ConfigError("unknown loss mode: " + s);
}

inline std::string to_string(LossMode m) {
    switch (m) {
        case LossMode::hybrid: return "hybrid";
        case LossMode::simple: return "simple";
        default: return "vlb";
    }
}

struct LossOptions {
    LossMode mode = LossMode::hybrid;
    double lambda_vlb = 0.001;
    // Detaching the mean network inside the KL restricts the VLB term to
    // training the variances. Gradient checks disable it: a stop-gradient is
    // invisible to finite differences by construction.
    bool vlb_detach_mean = true;
};

template <class T>
struct DiffusionLossVars {
    Var<T> total;
    DiffusionLossReport report;
};

// One training objective evaluation on a batch. The denoiser is any callable
// (Var x_t, vector<size_t> t) -> pair<Var eps_pred, Var logvar_frac>.
// Per-sample timesteps are drawn uniform [1, T] and noise is standard normal.
template <class T, class DenoiseFn>
DiffusionLossVars<T> training_loss(DenoiseFn&& model, const Tensor<T>& x0,
                                   const NoiseSchedule& sched, Rng& rng,
                                   const LossOptions& opt = {}) {
    const auto& s = x0.shape;
    check_config(s.size() == 4, "training_loss: x0 must be [N,D,H,W]");
    size_t n = s[0], per = x0.size() / n;

    std::uniform_int_distribution<size_t> tdist(1, sched.T);
    std::vector<size_t> tvec(n);
    for (auto& t : tvec) t = tdist(rng);
    Tensor<T> eps = Tensor<T>::randn(s, rng);

    // per-sample schedule constants
    Tensor<T> xt_t(s);
    for (size_t i = 0; i < n; ++i) {
        double ab = sched.alpha_bar_at(tvec[i]);
        T c0 = static_cast<T>(std::sqrt(ab)), ce = static_cast<T>(std::sqrt(1.0 - ab));
        for (size_t j = 0; j < per; ++j)
            xt_t.v[i * per + j] = c0 * x0.v[i * per + j] + ce * eps.v[i * per + j];
    }
    auto xt = Var<T>::constant(xt_t);

    auto [eps_pred, logvar_frac] = model(xt, tvec);
    check_config(eps_pred.val().shape == s, "training_loss: eps prediction shape mismatch");

    auto simple = mse(eps_pred, Var<T>::constant(eps));

    // VLB: KL(q(x_{t-1}|x_t,x0) || p_theta(x_{t-1}|x_t)) per sample, averaged.
    // Broadcast per-sample schedule scalars as constant tensors.
    Tensor<T> log_beta(s), log_beta_tilde(s), mu_q(s), coef_eps(s), inv_sqrt_alpha(s);
    for (size_t i = 0; i < n; ++i) {
        size_t t = tvec[i];
        T lb = static_cast<T>(std::log(sched.beta_at(t)));
        T lbt = static_cast<T>(sched.posterior_log_variance_clipped(t));
        double c0 = sched.posterior_mean_coef_x0(t), ct = sched.posterior_mean_coef_xt(t);
        T ce = static_cast<T>(sched.beta_at(t) / std::sqrt(1.0 - sched.alpha_bar_at(t)));
        T isa = static_cast<T>(1.0 / std::sqrt(sched.alpha_at(t)));
        for (size_t j = 0; j < per; ++j) {
            size_t idx = i * per + j;
            log_beta.v[idx] = lb;
            log_beta_tilde.v[idx] = lbt;
            mu_q.v[idx] = static_cast<T>(c0 * x0.v[idx] + ct * xt_t.v[idx]);
            coef_eps.v[idx] = ce;
            inv_sqrt_alpha.v[idx] = isa;
        }
    }

    // model mean mu_theta = (x_t - beta_t/sqrt(1-ab_t) * eps_pred) / sqrt(alpha_t)
    auto eps_for_mean = opt.vlb_detach_mean ? detach(eps_pred) : eps_pred;
    auto mu_p = mul(sub(xt, mul(eps_for_mean, Var<T>::constant(coef_eps))),
                    Var<T>::constant(inv_sqrt_alpha));

    // learned log variance: frac * log beta_t + (1 - frac) * log beta_tilde_t
    auto frac = scale(add_scalar(logvar_frac, T(1)), T(0.5));
    auto one_minus = scale(add_scalar(frac, T(-1)), T(-1));
    auto logvar_p = add(mul(frac, Var<T>::constant(log_beta)),
                        mul(one_minus, Var<T>::constant(log_beta_tilde)));

    // 0.5 * (logvar_p - logvar_q + (var_q + (mu_q - mu_p)^2)/var_p - 1)
    auto diff2 = square(sub(Var<T>::constant(mu_q), mu_p));
    auto var_q = exp_op(Var<T>::constant(log_beta_tilde));
    auto inv_var_p = exp_op(scale(logvar_p, T(-1)));
    auto kl = scale(add_scalar(add(sub(logvar_p, Var<T>::constant(log_beta_tilde)),
                                   mul(add(var_q, diff2), inv_var_p)),
                               T(-1)),
                    T(0.5));
    auto vlb = mean_all(kl);

    DiffusionLossVars<T> out;
    switch (opt.mode) {
        case LossMode::hybrid:
            out.total = add(simple, scale(vlb, static_cast<T>(opt.lambda_vlb)));
            break;
        case LossMode::simple: out.total = simple; break;
        case LossMode::vlb: out.total = vlb; break;
    }
    out.report.simple_term = static_cast<double>(simple.val().v[0]);
    out.report.vlb_term = static_cast<double>(vlb.val().v[0]);
    out.report.total = static_cast<double>(out.total.val().v[0]);
    if (!std::isfinite(out.report.total))
        throw NumericError("training loss diverged: simple=" +
                           std::to_string(out.report.simple_term) +
                           " vlb=" + std::to_string(out.report.vlb_term));
    return out;
}

// ----------------------------- checkpoints -----------------------------

struct PretrainConfig {
    size_t total_steps = 2000;
    size_t batch_size = 64;
    double learning_rate = 1e-4;
    size_t T = 1000;
    double lambda_vlb = 0.001;
    std::string loss_mode = "hybrid";
    uint64_t seed = 0;
    double ema_rate = 0.0; // 0 disables EMA
    size_t checkpoint_every = 0; // 0 means max(100, total_steps/20)

    size_t cadence() const {
        return checkpoint_every ? checkpoint_every
                                : std::max<size_t>(100, total_steps / 20);
    }
};

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
    j = nlohmann::json{{"total_steps", c.total_steps}, {"batch_size", c.batch_size},
                       {"learning_rate", c.learning_rate}, {"T", c.T},
                       {"lambda_vlb", c.lambda_vlb}, {"loss_mode", c.loss_mode},
                       {"seed", c.seed}, {"ema_rate", c.ema_rate},
                       {"checkpoint_every", c.checkpoint_every}};
}

inline void from_json(const nlohmann::json& j, PretrainConfig& c) {
    j.at("total_steps").get_to(c.total_steps);
    j.at("batch_size").get_to(c.batch_size);
    j.at("learning_rate").get_to(c.learning_rate);
    j.at("T").get_to(c.T);
    j.at("lambda_vlb").get_to(c.lambda_vlb);
    j.at("loss_mode").get_to(c.loss_mode);
    j.at("seed").get_to(c.seed);
    j.at("ema_rate").get_to(c.ema_rate);
    j.at("checkpoint_every").get_to(c.checkpoint_every);
}

// Checkpoint directory: manifest.json plus one little-endian f32 blob per
// parameter under params/, and matching Adam moments under adam_m/, adam_v/.
template <class T>
struct Checkpoint {
    UNetConfig model_config;
    PretrainConfig pretrain_config;
    size_t step = 0;
    std::vector<std::array<double, 4>> loss_curve; // step, simple, vlb, total
    std::map<std::string, Tensor<T>> params;
    std::map<std::string, Tensor<T>> adam_m, adam_v;
    size_t adam_steps = 0;
    std::string rng_state;
};

template <class T>
inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint<T>& ck) {
    namespace fs = std::filesystem;
    fs::path tmp = dir;
    tmp += ".tmp";
    fs::remove_all(tmp);
    fs::create_directories(tmp / "params");
    fs::create_directories(tmp / "adam_m");
    fs::create_directories(tmp / "adam_v");

    nlohmann::json shapes = nlohmann::json::object();
    Fnv1a64 digest;
    for (const auto& [name, t] : ck.params) {
        std::vector<float> f32(t.v.begin(), t.v.end());
        write_blob(tmp / "params" / (name + ".bin"), f32.data(), f32.size());
        shapes[name] = t.shape;
        digest.update(f32.data(), f32.size() * sizeof(float));
    }
    for (const auto& [name, t] : ck.adam_m) {
        std::vector<float> f32(t.v.begin(), t.v.end());
        write_blob(tmp / "adam_m" / (name + ".bin"), f32.data(), f32.size());
    }
    for (const auto& [name, t] : ck.adam_v) {
        std::vector<float> f32(t.v.begin(), t.v.end());
        write_blob(tmp / "adam_v" / (name + ".bin"), f32.data(), f32.size());
    }

    nlohmann::json j;
    j["format"] = "hsidiff checkpoint v1";
    j["model"] = ck.model_config;
    j["pretrain"] = ck.pretrain_config;
    j["step"] = ck.step;
    j["loss_curve"] = ck.loss_curve;
    j["param_shapes"] = shapes;
    j["param_digest"] = digest.hex();
    j["adam_steps"] = ck.adam_steps;
    j["rng_state"] = ck.rng_state;
    write_text_atomic(tmp / "manifest.json", j.dump(2) + "\n");

    fs::remove_all(dir);
    fs::rename(tmp, dir);
}

template <class T>
inline Checkpoint<T> load_checkpoint(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    nlohmann::json j = nlohmann::json::parse(read_text(dir / "manifest.json"));
    if (j.value("format", "") != std::string("hsidiff checkpoint v1"))
        throw IoError("not a checkpoint directory: " + dir.string());
    Checkpoint<T> ck;
    ck.model_config = j.at("model").get<UNetConfig>();
    ck.pretrain_config = j.at("pretrain").get<PretrainConfig>();
    ck.step = j.at("step").get<size_t>();
    for (const auto& row : j.at("loss_curve"))
        ck.loss_curve.push_back({row[0].get<double>(), row[1].get<double>(), row[2].get<double>(),
                                 row[3].get<double>()});
    ck.adam_steps = j.at("adam_steps").get<size_t>();
    ck.rng_state = j.at("rng_state").get<std::string>();

    Fnv1a64 digest;
    for (const auto& [name, shape_j] : j.at("param_shapes").items()) {
        std::vector<size_t> shape;
        shape_j.get_to(shape);
        size_t count = 1;
        for (size_t s : shape) count *= s;
        auto f32 = read_blob<float>(dir / "params" / (name + ".bin"), count);
        digest.update(f32.data(), f32.size() * sizeof(float));
        Tensor<T> t(shape);
        std::copy(f32.begin(), f32.end(), t.v.begin());
        ck.params.emplace(name, std::move(t));
        if (fs::exists(dir / "adam_m" / (name + ".bin"))) {
            auto m32 = read_blob<float>(dir / "adam_m" / (name + ".bin"), count);
            auto v32 = read_blob<float>(dir / "adam_v" / (name + ".bin"), count);
            Tensor<T> m(shape), vv(shape);
            std::copy(m32.begin(), m32.end(), m.v.begin());
            std::copy(v32.begin(), v32.end(), vv.v.begin());
            ck.adam_m.emplace(name, std::move(m));
            ck.adam_v.emplace(name, std::move(vv));
        }
    }
    if (digest.hex() != j.at("param_digest").get<std::string>())
        throw DigestError("checkpoint parameter digest mismatch in " + dir.string());
    return ck;
}

// ----------------------------- pretraining -----------------------------

// Anything that yields normalized [H,H,D] patches by index.
template <class T>
struct PatchBatchSource {
    std::function<size_t()> count;
    std::function<Tensor<float>(size_t)> get; // HWC float patch
};

template <class T>
inline Tensor<T> assemble_batch_nchw(const std::function<Tensor<float>(size_t)>& get,
                                     const std::vector<size_t>& ids) {
    Tensor<float> first = get(ids.at(0));
    size_t h = first.shape[0], w = first.shape[1], d = first.shape[2];
    Tensor<T> out({ids.size(), d, h, w});
    for (size_t b = 0; b < ids.size(); ++b) {
        Tensor<float> p = b == 0 ? first : get(ids[b]);
        for (size_t r = 0; r < h; ++r)
            for (size_t c = 0; c < w; ++c)
                for (size_t k = 0; k < d; ++k)
                    out.v[((b * d + k) * h + r) * w + c] =
                        static_cast<T>(p.v[(r * w + c) * d + k]);
    }
    return out;
}

struct PretrainResult {
    std::filesystem::path final_checkpoint;
    std::vector<std::array<double, 4>> loss_curve;
};

// Runs the optimizer for config.total_steps steps, checkpointing on the
// configured cadence and at the end. Resumes from resume_dir when given.
template <class T>
PretrainResult pretrain(const PatchBatchSource<T>& source, UNet<T>& model,
                        const PretrainConfig& config, const std::filesystem::path& out_dir,
                        const std::filesystem::path& resume_dir = {},
                        std::ostream* log = nullptr) {
    check_config(config.total_steps >= 1, "pretrain: total_steps must be >= 1");
    check_config(config.batch_size >= 1, "pretrain: batch_size must be >= 1");
    size_t n_patches = source.count();
    check_config(n_patches >= 1, "pretrain: empty patch source");

    NoiseSchedule sched = build_cosine_schedule(config.T);
    LossOptions lopt;
    lopt.mode = loss_mode_from_string(config.loss_mode);
    lopt.lambda_vlb = config.lambda_vlb;

    auto params = model.param_list();
    Adam<T> opt;
    opt.lr = static_cast<T>(config.learning_rate);
    opt.init(params);

    Rng rng = make_rng(config.seed, 0x7072657472);
    size_t start_step = 0;
    std::vector<std::array<double, 4>> curve;

    if (!resume_dir.empty()) {
        auto ck = load_checkpoint<T>(resume_dir);
        check_config(ck.model_config.tap_channels() == model.cfg.tap_channels() &&
                         ck.model_config.in_channels == model.cfg.in_channels,
                     "pretrain: resume checkpoint does not match the model config");
        model.set_param_values(ck.params);
        for (size_t i = 0; i < model.params().size(); ++i) {
            const auto& name = model.params()[i].first;
            if (ck.adam_m.count(name)) {
                opt.m[i] = ck.adam_m.at(name);
                opt.v[i] = ck.adam_v.at(name);
            }
        }
        opt.step_count = ck.adam_steps;
        rng_set_state(rng, ck.rng_state);
        start_step = ck.step;
        curve = ck.loss_curve;
        check_config(start_step < config.total_steps,
                     "pretrain: checkpoint already at or past total_steps");
    }

    auto write_ck = [&](size_t step) {
        Checkpoint<T> ck;
        ck.model_config = model.cfg;
        ck.pretrain_config = config;
        ck.step = step;
        ck.loss_curve = curve;
        for (const auto& [name, p] : model.params()) ck.params.emplace(name, p.val());
        for (size_t i = 0; i < model.params().size(); ++i) {
            ck.adam_m.emplace(model.params()[i].first, opt.m[i]);
            ck.adam_v.emplace(model.params()[i].first, opt.v[i]);
        }
        ck.adam_steps = opt.step_count;
        ck.rng_state = rng_state_string(rng);
        char buf[32];
        std::snprintf(buf, sizeof(buf), "step-%08zu", step);
        save_checkpoint(out_dir / buf, ck);
        write_text_atomic(out_dir / "latest", std::string(buf) + "\n");
        return out_dir / buf;
    };

    std::filesystem::create_directories(out_dir);
    std::uniform_int_distribution<size_t> pick(0, n_patches - 1);
    size_t cadence = config.cadence();
    std::filesystem::path last;

    for (size_t step = start_step + 1; step <= config.total_steps; ++step) {
        std::vector<size_t> ids(config.batch_size);
        for (auto& id : ids) id = pick(rng);
        Tensor<T> x0 = assemble_batch_nchw<T>(source.get, ids);

        auto loss = training_loss<T>(
            [&](const Var<T>& xt, const std::vector<size_t>& tvec) {
                auto o = model.forward(xt, tvec);
                return std::make_pair(o.eps, o.logvar_frac);
            },
            x0, sched, rng, lopt);

        opt.zero_grad(params);
        backward(loss.total);
        opt.step(params);

        curve.push_back({static_cast<double>(step), loss.report.simple_term,
                         loss.report.vlb_term, loss.report.total});
        if (log && (step % std::max<size_t>(1, cadence / 4) == 0 || step == 1))
            (*log) << "step " << step << "/" << config.total_steps
                   << " simple=" << loss.report.simple_term << " vlb=" << loss.report.vlb_term
                   << "\n";
        if (step % cadence == 0 && step != config.total_steps) write_ck(step);
    }
    last = write_ck(config.total_steps);

    PretrainResult res;
    res.final_checkpoint = last;
    res.loss_curve = curve;
    return res;
}

// ----------------------------- sampling -----------------------------

// Ancestral sampling from x_T to x_0 with learned variances. Diagnostic only.
template <class T>
Tensor<T> p_sample_loop(const UNet<T>& model, const NoiseSchedule& sched, size_t n, Rng& rng) {
    size_t d = model.cfg.in_channels, h = model.cfg.patch_size;
    Tensor<T> x = Tensor<T>::randn({n, d, h, h}, rng);
    for (size_t t = sched.T; t >= 1; --t) {
        std::vector<size_t> tvec(n, t);
        auto out = model.forward(Var<T>::constant(x), tvec);
        const auto& eps = out.eps.val();
        const auto& frac_raw = out.logvar_frac.val();
        double ab = sched.alpha_bar_at(t);
        double sqrt_ab = std::sqrt(ab), sqrt_1mab = std::sqrt(1.0 - ab);
        double c0 = sched.posterior_mean_coef_x0(t), ct = sched.posterior_mean_coef_xt(t);
        double log_beta = std::log(sched.beta_at(t));
        double log_beta_tilde = sched.posterior_log_variance_clipped(t);
        std::normal_distribution<double> nd;
        for (size_t i = 0; i < x.v.size(); ++i) {
            double x0_hat = (static_cast<double>(x.v[i]) - sqrt_1mab * eps.v[i]) / sqrt_ab;
            x0_hat = std::clamp(x0_hat, -1.5, 1.5);
            double mu = c0 * x0_hat + ct * static_cast<double>(x.v[i]);
            double f = (static_cast<double>(frac_raw.v[i]) + 1.0) / 2.0;
            double logvar = f * log_beta + (1.0 - f) * log_beta_tilde;
            double z = t > 1 ? nd(rng) : 0.0;
            x.v[i] = static_cast<T>(mu + std::exp(0.5 * logvar) * z);
        }
        if (!x.all_finite()) throw NumericError("sampling produced non-finite values");
    }
    return x;
}

} // namespace hsidiff
