#pragma once

// Timestep grid selection and feature-bank construction: noisy patches run
// through the frozen denoiser, decoder taps upsampled to the patch size and
// concatenated deepest-first, then reduced to per-sample center and global
// vectors, one row per (sample, timestep).

#include <json.hpp>

#include "hsidiff/diffusion.hpp"
#include "hsidiff/hsio.hpp"
#include "hsidiff/unet.hpp"

namespace hsidiff {

// ----------------------------- timestep grid -----------------------------

struct TimestepGrid {
    size_t T = 0;
    size_t m = 0;
    std::vector<size_t> t_values; // strictly increasing, interior of [1, T-1]
};

inline void to_json(nlohmann::json& j, const TimestepGrid& g) {
    j = nlohmann::json{{"T", g.T}, {"m", g.m}, {"t_values", g.t_values}};
}

inline void from_json(const nlohmann::json& j, TimestepGrid& g) {
    j.at("T").get_to(g.T);
    j.at("m").get_to(g.m);
    j.at("t_values").get_to(g.t_values);
}

// t_i = round(i*T/(m+1)) for i = 1..m; endpoints 0 and T are excluded.
inline TimestepGrid make_grid(size_t T, size_t m) {
    check_config(m >= 1 && m <= T - 1, "grid: m must satisfy 1 <= m <= T-1");
    TimestepGrid g;
    g.T = T;
    g.m = m;
    for (size_t i = 1; i <= m; ++i) {
        double x = static_cast<double>(i) * static_cast<double>(T) / static_cast<double>(m + 1);
        g.t_values.push_back(static_cast<size_t>(std::llround(x)));
    }
    for (size_t i = 0; i < m; ++i) {
        check_config(g.t_values[i] >= 1 && g.t_values[i] <= T - 1,
                     "grid: timestep out of the interior range");
        if (i) check_config(g.t_values[i] > g.t_values[i - 1], "grid: timesteps must increase");
    }
    return g;
}

// ----------------------------- upsampling -----------------------------

// Bilinear resize of [N,C,h,w] to [N,C,H,W] with half-pixel centers
// (identity when the sizes already match).
template <class T>
inline Tensor<T> bilinear_upsample(const Tensor<T>& src, size_t out_h, size_t out_w) {
    const auto& s = src.shape;
    check_config(s.size() == 4, "bilinear_upsample: need [N,C,H,W]");
    size_t n = s[0], c = s[1], h = s[2], w = s[3];
    if (h == out_h && w == out_w) return src;
    Tensor<T> out({n, c, out_h, out_w});
    double sy = static_cast<double>(h) / static_cast<double>(out_h);
    double sx = static_cast<double>(w) / static_cast<double>(out_w);
    for (size_t oy = 0; oy < out_h; ++oy) {
        double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
        size_t y0 = static_cast<size_t>(fy);
        size_t y1 = std::min(y0 + 1, h - 1);
        double wy = fy - static_cast<double>(y0);
        for (size_t ox = 0; ox < out_w; ++ox) {
            double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
            size_t x0 = static_cast<size_t>(fx);
            size_t x1 = std::min(x0 + 1, w - 1);
            double wx = fx - static_cast<double>(x0);
            for (size_t i = 0; i < n * c; ++i) {
                const T* p = src.v.data() + i * h * w;
                double v00 = p[y0 * w + x0], v01 = p[y0 * w + x1];
                double v10 = p[y1 * w + x0], v11 = p[y1 * w + x1];
                double top = v00 * (1 - wx) + v01 * wx;
                double bot = v10 * (1 - wx) + v11 * wx;
                out.v[i * out_h * out_w + oy * out_w + ox] = static_cast<T>(top * (1 - wy) + bot * wy);
            }
        }
    }
    return out;
}

// Upsample every tap to (H, H) and concatenate along channels, deepest first.
template <class T>
inline Tensor<T> concat_upsampled_taps(const std::vector<Tensor<T>>& taps, size_t out_size) {
    check_config(!taps.empty(), "no taps to concatenate");
    size_t n = taps[0].shape[0];
    size_t d = 0;
    for (const auto& t : taps) d += t.shape[1];
    Tensor<T> out({n, d, out_size, out_size});
    size_t offset = 0;
    for (const auto& tap : taps) {
        Tensor<T> up = bilinear_upsample(tap, out_size, out_size);
        size_t c = up.shape[1], hw = out_size * out_size;
        for (size_t i = 0; i < n; ++i)
            std::copy_n(up.v.data() + i * c * hw, c * hw,
                        out.v.data() + (i * d + offset) * hw);
        offset += c;
    }
    return out;
}

// ----------------------------- reductions -----------------------------

// f is H x H x d (channel-last). Returns f[H/2, H/2, :].
template <class T>
inline std::vector<T> center_of(const Tensor<T>& f) {
    check_config(f.shape.size() == 3 && f.shape[0] == f.shape[1], "center_of: need [H,H,d]");
    size_t h = f.shape[0], d = f.shape[2], c = h / 2;
    std::vector<T> out(d);
    std::copy_n(f.v.data() + (c * h + c) * d, d, out.begin());
    return out;
}

// Mean over both spatial axes, accumulated in 64-bit.
template <class T>
inline std::vector<T> global_of(const Tensor<T>& f) {
    check_config(f.shape.size() == 3 && f.shape[0] == f.shape[1], "global_of: need [H,H,d]");
    size_t h = f.shape[0], d = f.shape[2];
    std::vector<double> acc(d, 0.0);
    for (size_t p = 0; p < h * h; ++p)
        for (size_t k = 0; k < d; ++k) acc[k] += static_cast<double>(f.v[p * d + k]);
    std::vector<T> out(d);
    for (size_t k = 0; k < d; ++k) out[k] = static_cast<T>(acc[k] / static_cast<double>(h * h));
    return out;
}

// ----------------------------- single extraction -----------------------------

// One sample, one timestep: noise the patch, run the frozen model, upsample
// and concatenate the decoder taps. Input and output are channel-last.
template <class T>
inline Tensor<T> extract_feature(const UNet<T>& model, const NoiseSchedule& sched,
                                 const Tensor<float>& patch_hwc, size_t t,
                                 const Tensor<T>& eps_chw) {
    size_t h = patch_hwc.shape[0], d_in = patch_hwc.shape[2];
    check_config(h == model.cfg.patch_size && d_in == model.cfg.in_channels,
                 "extract_feature: patch shape does not match the model");
    Tensor<T> x0({1, d_in, h, h});
    for (size_t r = 0; r < h; ++r)
        for (size_t c = 0; c < h; ++c)
            for (size_t k = 0; k < d_in; ++k)
                x0.v[(k * h + r) * h + c] = static_cast<T>(patch_hwc.v[(r * h + c) * d_in + k]);
    Tensor<T> eps = eps_chw.reshaped({1, d_in, h, h});
    Tensor<T> xt = q_sample(x0, t, eps, sched);

    auto out = model.forward(Var<T>::constant(xt), {t});
    std::vector<Tensor<T>> tap_vals;
    for (const auto& tap : out.taps) tap_vals.push_back(tap.val());
    Tensor<T> cat = concat_upsampled_taps(tap_vals, h); // [1, d, H, H]
    size_t d = cat.shape[1];
    Tensor<T> hwc({h, h, d});
    for (size_t r = 0; r < h; ++r)
        for (size_t c = 0; c < h; ++c)
            for (size_t k = 0; k < d; ++k) hwc.v[(r * h + c) * d + k] = cat.v[(k * h + r) * h + c];
    return hwc;
}

// ----------------------------- banks -----------------------------

enum class NoisePolicy { shared_per_timestep, per_sample };

inline NoisePolicy noise_policy_from_string(const std::string& s) {
    if (s == "shared_per_timestep") return NoisePolicy::shared_per_timestep;
    if (s == "per_sample") return NoisePolicy::per_sample;
    throw ConfigError("unknown noise policy: " + s);
}

inline std::string to_string(NoisePolicy p) {
    return p == NoisePolicy::shared_per_timestep ? "shared_per_timestep" : "per_sample";
}

struct FeatureBanks {
    std::vector<size_t> sample_ids;  // row-major pixel ids in the source raster
    TimestepGrid grid;
    size_t d = 0;
    uint64_t noise_seed = 0;
    std::string noise_policy = "shared_per_timestep";
    std::string checkpoint_digest;    // parameter digest of the source model
    Tensor<float> center;  // (samples, m, d)
    Tensor<float> global_; // (samples, m, d)

    size_t samples() const { return sample_ids.size(); }

    const float* center_row(size_t s, size_t i) const {
        return center.v.data() + (s * grid.m + i) * d;
    }
    const float* global_row(size_t s, size_t i) const {
        return global_.v.data() + (s * grid.m + i) * d;
    }
};

// Deterministic per-timestep noise stream; the per-sample policy folds the
// sample index into the stream id.
inline Rng noise_rng(uint64_t seed, size_t t, size_t sample_index, NoisePolicy policy) {
    uint64_t stream = policy == NoisePolicy::shared_per_timestep
                          ? static_cast<uint64_t>(t)
                          : (static_cast<uint64_t>(t) << 32) ^ (sample_index + 1);
    return make_rng(seed, stream);
}

// Build both banks for every patch in the set. Noise is drawn once per
// timestep and shared across samples under the default policy, so rebuilding
// with the same seed is bit-identical.
template <class T>
FeatureBanks build_banks(const UNet<T>& model, const NoiseSchedule& sched, const PatchSet& patches,
                         const TimestepGrid& grid, uint64_t noise_seed,
                         NoisePolicy policy = NoisePolicy::shared_per_timestep,
                         size_t batch_size = 16, std::ostream* log = nullptr) {
    size_t n = patches.size();
    check_config(n >= 1, "build_banks: empty patch set");
    size_t h = model.cfg.patch_size, d_in = model.cfg.in_channels;
    check_config(patches.patch_size == h && patches.padded->bands == d_in,
                 "build_banks: patch geometry does not match the model");
    size_t d = model.cfg.tap_channels(), m = grid.m;

    FeatureBanks banks;
    banks.grid = grid;
    banks.d = d;
    banks.noise_seed = noise_seed;
    banks.noise_policy = to_string(policy);
    banks.center = Tensor<float>({n, m, d});
    banks.global_ = Tensor<float>({n, m, d});
    size_t source_width = patches.padded->width - 2 * (h / 2); // refs hold unpadded coordinates
    for (size_t s = 0; s < n; ++s)
        banks.sample_ids.push_back(patches.refs[s].center_row * source_width +
                                   patches.refs[s].center_col);

    size_t per = d_in * h * h, hw = h * h;
    for (size_t gi = 0; gi < m; ++gi) {
        size_t t = grid.t_values[gi];
        T c0 = static_cast<T>(std::sqrt(sched.alpha_bar_at(t)));
        T ce = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar_at(t)));
        Tensor<T> shared_eps;
        if (policy == NoisePolicy::shared_per_timestep) {
            Rng r = noise_rng(noise_seed, t, 0, policy);
            shared_eps = Tensor<T>::randn({d_in, h, h}, r);
        }
        for (size_t start = 0; start < n; start += batch_size) {
            size_t bs = std::min(batch_size, n - start);
            Tensor<T> xt({bs, d_in, h, h});
            for (size_t b = 0; b < bs; ++b) {
                Patch p = patches.get(start + b);
                Tensor<T> eps;
                if (policy == NoisePolicy::per_sample) {
                    Rng r = noise_rng(noise_seed, t, start + b, policy);
                    eps = Tensor<T>::randn({d_in, h, h}, r);
                }
                const Tensor<T>& e = policy == NoisePolicy::per_sample ? eps : shared_eps;
                for (size_t rr = 0; rr < h; ++rr)
                    for (size_t cc = 0; cc < h; ++cc)
                        for (size_t k = 0; k < d_in; ++k) {
                            size_t idx = b * per + (k * h + rr) * h + cc;
                            xt.v[idx] = c0 * static_cast<T>(p.data.v[(rr * h + cc) * d_in + k]) +
                                        ce * e.v[(k * h + rr) * h + cc];
                        }
            }
            std::vector<size_t> tvec(bs, t);
            auto out = model.forward(Var<T>::constant(xt), tvec);
            std::vector<Tensor<T>> tap_vals;
            for (const auto& tap : out.taps) tap_vals.push_back(tap.val());
            Tensor<T> cat = concat_upsampled_taps(tap_vals, h); // [bs, d, h, h]
            size_t cidx = (h / 2) * h + h / 2;
            for (size_t b = 0; b < bs; ++b)
                for (size_t k = 0; k < d; ++k) {
                    const T* map = cat.v.data() + (b * d + k) * hw;
                    banks.center.v[((start + b) * m + gi) * d + k] =
                        static_cast<float>(map[cidx]);
                    double acc = 0;
                    for (size_t pix = 0; pix < hw; ++pix) acc += static_cast<double>(map[pix]);
                    banks.global_.v[((start + b) * m + gi) * d + k] =
                        static_cast<float>(acc / static_cast<double>(hw));
                }
        }
        if (log) (*log) << "extracted timestep " << t << " (" << (gi + 1) << "/" << m << ")\n";
    }
    return banks;
}

// ----------------------------- persistence -----------------------------

inline void save_banks(const std::filesystem::path& dir, const FeatureBanks& banks) {
    std::filesystem::create_directories(dir);
    write_blob(dir / "center.bin", banks.center.v.data(), banks.center.v.size());
    write_blob(dir / "global.bin", banks.global_.v.data(), banks.global_.v.size());
    nlohmann::json j;
    j["format"] = "hsidiff banks v1";
    j["sample_ids"] = banks.sample_ids;
    j["grid"] = banks.grid;
    j["d"] = banks.d;
    j["noise_seed"] = banks.noise_seed;
    j["noise_policy"] = banks.noise_policy;
    j["checkpoint_digest"] = banks.checkpoint_digest;
    j["center_digest"] = digest_file(dir / "center.bin");
    j["global_digest"] = digest_file(dir / "global.bin");
    write_text_atomic(dir / "manifest.json", j.dump(2) + "\n");
}

inline FeatureBanks load_banks(const std::filesystem::path& dir) {
    nlohmann::json j = nlohmann::json::parse(read_text(dir / "manifest.json"));
    if (j.value("format", "") != std::string("hsidiff banks v1"))
        throw IoError("not a bank directory: " + dir.string());
    FeatureBanks banks;
    j.at("sample_ids").get_to(banks.sample_ids);
    banks.grid = j.at("grid").get<TimestepGrid>();
    j.at("d").get_to(banks.d);
    j.at("noise_seed").get_to(banks.noise_seed);
    j.at("noise_policy").get_to(banks.noise_policy);
    j.at("checkpoint_digest").get_to(banks.checkpoint_digest);
    if (digest_file(dir / "center.bin") != j.at("center_digest").get<std::string>() ||
        digest_file(dir / "global.bin") != j.at("global_digest").get<std::string>())
        throw DigestError("bank payload digest mismatch in " + dir.string());
    size_t n = banks.sample_ids.size(), m = banks.grid.m, d = banks.d;
    banks.center = Tensor<float>({n, m, d});
    banks.center.v = read_blob<float>(dir / "center.bin", n * m * d);
    banks.global_ = Tensor<float>({n, m, d});
    banks.global_.v = read_blob<float>(dir / "global.bin", n * m * d);
    return banks;
}

} // namespace hsidiff
