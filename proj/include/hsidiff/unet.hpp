#pragma once

// Denoising U-Net with sinusoidal timestep conditioning, residual blocks,
// group norm, single-head self-attention in the middle block, and activation
// taps on every decoder resolution level (deepest first). Output is 2*D
// channels: predicted noise plus the log-variance interpolation fraction.

#include <map>

#include <json.hpp>

#include "hsidiff/autograd.hpp"
#include "hsidiff/common.hpp"
#include "hsidiff/tensor.hpp"

namespace hsidiff {

struct UNetConfig {
    size_t in_channels = 4;            // D
    size_t base_channels = 32;
    std::vector<size_t> stage_multipliers = {1, 2, 4};
    size_t res_blocks = 2;             // residual blocks per stage
    size_t time_embed_dim = 64;
    size_t groups_per_norm = 8;
    std::vector<size_t> attention_resolutions = {}; // middle block always attends
    size_t patch_size = 48;            // H
    bool include_middle_tap = false;
    std::string out_mode = "noise_and_logvar";

    size_t levels() const { return stage_multipliers.size(); }
    size_t channels_at(size_t level) const { return base_channels * stage_multipliers[level]; }

    // channel sum of all decoder taps
    size_t tap_channels() const {
        size_t d = 0;
        for (size_t m : stage_multipliers) d += base_channels * m;
        if (include_middle_tap) d += base_channels * stage_multipliers.back();
        return d;
    }

    void validate() const {
        check_config(in_channels >= 1, "unet: in_channels must be >= 1");
        check_config(base_channels >= 1, "unet: base_channels must be >= 1");
        check_config(!stage_multipliers.empty(), "unet: stage_multipliers must be non-empty");
        check_config(time_embed_dim >= 2 && time_embed_dim % 2 == 0,
                     "unet: time_embed_dim must be even and >= 2");
        check_config(out_mode == "noise_and_logvar", "unet: unknown out_mode " + out_mode);
        size_t down = levels() - 1;
        size_t div = size_t(1) << down;
        check_config(patch_size % div == 0, "unet: patch_size must be divisible by 2^(stages-1)");
        check_config(patch_size / div >= 2, "unet: patch too small for the stage count");
    }
};

inline void to_json(nlohmann::json& j, const UNetConfig& c) {
    j = nlohmann::json{{"in_channels", c.in_channels},
                       {"base_channels", c.base_channels},
                       {"stage_multipliers", c.stage_multipliers},
                       {"res_blocks", c.res_blocks},
                       {"time_embed_dim", c.time_embed_dim},
                       {"groups_per_norm", c.groups_per_norm},
                       {"attention_resolutions", c.attention_resolutions},
                       {"patch_size", c.patch_size},
                       {"include_middle_tap", c.include_middle_tap},
                       {"out_mode", c.out_mode}};
}

inline void from_json(const nlohmann::json& j, UNetConfig& c) {
    j.at("in_channels").get_to(c.in_channels);
    j.at("base_channels").get_to(c.base_channels);
    j.at("stage_multipliers").get_to(c.stage_multipliers);
    j.at("res_blocks").get_to(c.res_blocks);
    j.at("time_embed_dim").get_to(c.time_embed_dim);
    j.at("groups_per_norm").get_to(c.groups_per_norm);
    j.at("attention_resolutions").get_to(c.attention_resolutions);
    j.at("patch_size").get_to(c.patch_size);
    j.at("include_middle_tap").get_to(c.include_middle_tap);
    j.at("out_mode").get_to(c.out_mode);
}

// Sinusoidal embedding of per-sample timesteps into [N, dim]:
// first half sin(t * f_i), second half cos(t * f_i), f_i = 10000^(-i/half).
template <class T>
inline Tensor<T> sinusoidal_embedding(const std::vector<size_t>& t, size_t dim) {
    size_t n = t.size(), half = dim / 2;
    Tensor<T> out({n, dim});
    for (size_t i = 0; i < n; ++i)
        for (size_t k = 0; k < half; ++k) {
            double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) /
                                   static_cast<double>(half));
            double arg = static_cast<double>(t[i]) * freq;
            out.v[i * dim + k] = static_cast<T>(std::sin(arg));
            out.v[i * dim + half + k] = static_cast<T>(std::cos(arg));
        }
    return out;
}

template <class T>
struct UNetOutput {
    Var<T> eps;          // [N, D, H, W]
    Var<T> logvar_frac;  // [N, D, H, W], raw network output v
    std::vector<Var<T>> taps; // decoder stage activations, deepest first
};

template <class T>
class UNet {
public:
    UNetConfig cfg;

    static UNet build(const UNetConfig& cfg, uint64_t seed) {
        cfg.validate();
        UNet net;
        net.cfg = cfg;
        net.rng_ = make_rng(seed, 0x756e6574); // independent init stream
        net.build_params();
        return net;
    }

    // parameter registry in creation order
    std::vector<std::pair<std::string, Var<T>>>& params() { return params_; }
    const std::vector<std::pair<std::string, Var<T>>>& params() const { return params_; }

    size_t param_count() const {
        size_t n = 0;
        for (const auto& [name, p] : params_) n += p.val().size();
        return n;
    }

    Var<T> param(const std::string& name) const {
        for (const auto& [n, p] : params_)
            if (n == name) return p;
        throw IoError("unet: unknown parameter " + name);
    }

    std::vector<Var<T>> param_list() const {
        std::vector<Var<T>> out;
        for (const auto& [n, p] : params_) out.push_back(p);
        return out;
    }

    // x: [N, D, H, W]; t: one timestep per sample, 1-based.
    UNetOutput<T> forward(const Var<T>& x, const std::vector<size_t>& t) const {
        const auto& s = x.val().shape;
        check_config(s.size() == 4 && s[1] == cfg.in_channels && s[2] == cfg.patch_size &&
                         s[3] == cfg.patch_size,
                     "unet: input shape does not match the model config");
        check_config(t.size() == s[0], "unet: one timestep per sample required");
        if (!x.val().all_finite()) throw NumericError("unet: non-finite input");

        size_t L = cfg.levels();
        auto temb_sin = Var<T>::constant(sinusoidal_embedding<T>(t, cfg.time_embed_dim));
        auto temb = linear(silu(linear(temb_sin, p("time.fc1.w"), p("time.fc1.b"))),
                           p("time.fc2.w"), p("time.fc2.b"));

        auto h = conv2d(x, p("stem.w"), p("stem.b"), 1, 1);
        std::vector<Var<T>> skips(L);
        for (size_t l = 0; l < L; ++l) {
            for (size_t b = 0; b < cfg.res_blocks; ++b)
                h = res_block("enc" + std::to_string(l) + ".res" + std::to_string(b), h, temb);
            if (level_attention(l)) h = attn_block("enc" + std::to_string(l) + ".attn", h);
            skips[l] = h;
            if (l + 1 < L)
                h = conv2d(h, p("enc" + std::to_string(l) + ".down.w"),
                           p("enc" + std::to_string(l) + ".down.b"), 2, 1);
        }

        h = res_block("mid.res0", h, temb);
        h = attn_block("mid.attn", h);
        h = res_block("mid.res1", h, temb);

        UNetOutput<T> out;
        if (cfg.include_middle_tap) out.taps.push_back(h);
        for (size_t li = L; li-- > 0;) {
            h = concat_channels(h, skips[li]);
            for (size_t b = 0; b < cfg.res_blocks; ++b)
                h = res_block("dec" + std::to_string(li) + ".res" + std::to_string(b), h, temb);
            out.taps.push_back(h); // stage tap: final residual block output
            if (level_attention(li)) h = attn_block("dec" + std::to_string(li) + ".attn", h);
            if (li > 0) {
                h = upsample_nearest2x(h);
                h = conv2d(h, p("dec" + std::to_string(li) + ".up.w"),
                           p("dec" + std::to_string(li) + ".up.b"), 1, 1);
            }
        }

        h = silu(group_norm(h, cfg.groups_per_norm, p("out.gn.g"), p("out.gn.b")));
        h = conv2d(h, p("out.conv.w"), p("out.conv.b"), 1, 1);
        out.eps = slice_channels(h, 0, cfg.in_channels);
        out.logvar_frac = slice_channels(h, cfg.in_channels, 2 * cfg.in_channels);
        if (!out.eps.val().all_finite() || !out.logvar_frac.val().all_finite())
            throw NumericError("unet: non-finite activations in output head");
        return out;
    }

    // Copies fresh values into the existing parameter variables, so any
    // graphs built afterwards see the new values.
    void set_param_values(const std::map<std::string, Tensor<T>>& values) {
        for (auto& [name, var] : params_) {
            auto it = values.find(name);
            if (it == values.end()) throw IoError("unet: missing parameter value for " + name);
            check_config(it->second.shape == var.val().shape,
                         "unet: shape mismatch for parameter " + name);
            var.mutable_val() = it->second;
        }
    }

private:
    std::vector<std::pair<std::string, Var<T>>> params_;
    Rng rng_;

    Var<T> p(const std::string& name) const { return param(name); }

    bool level_attention(size_t level) const {
        size_t res = cfg.patch_size >> level;
        for (size_t r : cfg.attention_resolutions)
            if (r == res) return true;
        return false;
    }

    Var<T> add_param(const std::string& name, Tensor<T> t) {
        auto v = Var<T>::param(std::move(t));
        params_.emplace_back(name, v);
        return v;
    }

    Tensor<T> init_normal(std::vector<size_t> shape, double fan_in) {
        return Tensor<T>::randn(std::move(shape), rng_, 1.0 / std::sqrt(std::max(1.0, fan_in)));
    }

    void add_conv(const std::string& name, size_t co, size_t ci, size_t k, bool zero_init) {
        double fan_in = static_cast<double>(ci * k * k);
        add_param(name + ".w", zero_init ? Tensor<T>::zeros({co, ci, k, k})
                                         : init_normal({co, ci, k, k}, fan_in));
        add_param(name + ".b", Tensor<T>::zeros({co}));
    }

    void add_linear(const std::string& name, size_t fout, size_t fin) {
        add_param(name + ".w", init_normal({fout, fin}, static_cast<double>(fin)));
        add_param(name + ".b", Tensor<T>::zeros({fout}));
    }

    void add_norm(const std::string& name, size_t c) {
        check_config(c % cfg.groups_per_norm == 0,
                     "unet: channel count " + std::to_string(c) +
                         " not divisible by groups_per_norm at " + name);
        add_param(name + ".g", Tensor<T>::full({c}, T(1)));
        add_param(name + ".b", Tensor<T>::zeros({c}));
    }

    void add_res_block(const std::string& name, size_t ci, size_t co) {
        add_norm(name + ".gn1", ci);
        add_conv(name + ".conv1", co, ci, 3, false);
        add_linear(name + ".temb", co, cfg.time_embed_dim);
        add_norm(name + ".gn2", co);
        add_conv(name + ".conv2", co, co, 3, true);
        if (ci != co) add_conv(name + ".skip", co, ci, 1, false);
    }

    void add_attn_block(const std::string& name, size_t c) {
        add_norm(name + ".gn", c);
        add_conv(name + ".qkv", 3 * c, c, 1, false);
        add_conv(name + ".proj", c, c, 1, true);
    }

    void build_params() {
        size_t L = cfg.levels();
        add_linear("time.fc1", cfg.time_embed_dim, cfg.time_embed_dim);
        add_linear("time.fc2", cfg.time_embed_dim, cfg.time_embed_dim);
        add_conv("stem", cfg.channels_at(0), cfg.in_channels, 3, false);

        size_t c_in = cfg.channels_at(0);
        for (size_t l = 0; l < L; ++l) {
            size_t c = cfg.channels_at(l);
            for (size_t b = 0; b < cfg.res_blocks; ++b) {
                add_res_block("enc" + std::to_string(l) + ".res" + std::to_string(b), c_in, c);
                c_in = c;
            }
            if (level_attention(l)) add_attn_block("enc" + std::to_string(l) + ".attn", c);
            if (l + 1 < L) add_conv("enc" + std::to_string(l) + ".down", c, c, 3, false);
        }

        size_t c_mid = cfg.channels_at(L - 1);
        add_res_block("mid.res0", c_mid, c_mid);
        add_attn_block("mid.attn", c_mid);
        add_res_block("mid.res1", c_mid, c_mid);

        size_t c_up = c_mid;
        for (size_t li = L; li-- > 0;) {
            size_t c = cfg.channels_at(li);
            size_t ci = c_up + c; // concat with the level skip
            for (size_t b = 0; b < cfg.res_blocks; ++b) {
                add_res_block("dec" + std::to_string(li) + ".res" + std::to_string(b), ci, c);
                ci = c;
            }
            if (level_attention(li)) add_attn_block("dec" + std::to_string(li) + ".attn", c);
            if (li > 0) {
                size_t c_next = cfg.channels_at(li - 1);
                add_conv("dec" + std::to_string(li) + ".up", c_next, c, 3, false);
                c_up = c_next;
            }
        }

        add_norm("out.gn", cfg.channels_at(0));
        add_conv("out.conv", 2 * cfg.in_channels, cfg.channels_at(0), 3, true);
    }

    Var<T> res_block(const std::string& name, const Var<T>& x, const Var<T>& temb) const {
        auto h = silu(group_norm(x, cfg.groups_per_norm, p(name + ".gn1.g"), p(name + ".gn1.b")));
        h = conv2d(h, p(name + ".conv1.w"), p(name + ".conv1.b"), 1, 1);
        auto e = linear(silu(temb), p(name + ".temb.w"), p(name + ".temb.b"));
        h = add_channel_bias_batched(h, e);
        h = silu(group_norm(h, cfg.groups_per_norm, p(name + ".gn2.g"), p(name + ".gn2.b")));
        h = conv2d(h, p(name + ".conv2.w"), p(name + ".conv2.b"), 1, 1);
        bool has_skip = x.val().shape[1] != h.val().shape[1];
        auto sc = has_skip ? conv2d(x, p(name + ".skip.w"), p(name + ".skip.b"), 1, 0) : x;
        return add(h, sc);
    }

    Var<T> attn_block(const std::string& name, const Var<T>& x) const {
        const auto& s = x.val().shape;
        size_t n = s[0], c = s[1], hh = s[2], ww = s[3], hw = hh * ww;
        auto norm = group_norm(x, cfg.groups_per_norm, p(name + ".gn.g"), p(name + ".gn.b"));
        auto qkv = conv2d(norm, p(name + ".qkv.w"), p(name + ".qkv.b"), 1, 0);
        auto q = reshape(slice_channels(qkv, 0, c), {n, c, hw});
        auto k = reshape(slice_channels(qkv, c, 2 * c), {n, c, hw});
        auto v = reshape(slice_channels(qkv, 2 * c, 3 * c), {n, c, hw});
        // scores[a,b] = <q_a, k_b> / sqrt(c), softmax over b
        auto scores = scale(bmm(q, k, true, false), T(1.0 / std::sqrt(static_cast<double>(c))));
        auto attn = softmax_lastdim(scores);
        // out[:, a] = sum_b attn[a,b] * v[:, b]
        auto o = reshape(bmm(v, attn, false, true), {n, c, hh, ww});
        o = conv2d(o, p(name + ".proj.w"), p(name + ".proj.b"), 1, 0);
        return add(x, o);
    }
};

} // namespace hsidiff
