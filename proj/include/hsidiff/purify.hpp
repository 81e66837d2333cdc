#pragma once

// Channel purification: score every feature channel by how it separates
// classes and how it varies across timesteps, then keep the top-K channels
// of the center bank. The global bank is never purified.

#include <json.hpp>

#include "hsidiff/featbank.hpp"

namespace hsidiff {

// ----------------------------- representative matrix -----------------------------

// M[i][j][k]: mean center feature of class j+1 at grid timestep i, channel k.
// Accumulated in 64-bit. Every class in 1..C must have at least one sample.
inline Tensor<double> rep_matrix(const FeatureBanks& banks, const std::vector<uint16_t>& labels,
                                 size_t num_classes) {
    size_t n = banks.samples(), m = banks.grid.m, d = banks.d, C = num_classes;
    check_config(labels.size() == n, "rep_matrix: one label per bank row required");
    check_config(C >= 1, "rep_matrix: need at least one class");
    std::vector<size_t> counts(C, 0);
    Tensor<double> M = Tensor<double>::zeros({m, C, d});
    for (size_t s = 0; s < n; ++s) {
        check_config(labels[s] >= 1 && labels[s] <= C, "rep_matrix: label out of range");
        size_t j = labels[s] - 1;
        ++counts[j];
        for (size_t i = 0; i < m; ++i) {
            const float* row = banks.center_row(s, i);
            double* out = M.v.data() + (i * C + j) * d;
            for (size_t k = 0; k < d; ++k) out[k] += static_cast<double>(row[k]);
        }
    }
    for (size_t j = 0; j < C; ++j)
        check_config(counts[j] > 0,
                     "rep_matrix: class " + std::to_string(j + 1) + " has no samples");
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < C; ++j)
            for (size_t k = 0; k < d; ++k)
                M.v[(i * C + j) * d + k] /= static_cast<double>(counts[j]);
    return M;
}

// ----------------------------- channel scores -----------------------------

// Class-oriented score per channel: low cross-class correlation (U) and high
// cross-class variance (V) are both good, so tau = -alpha*U + (1-alpha)*V.
inline std::vector<double> class_score(const Tensor<double>& M, double alpha) {
    size_t m = M.shape[0], C = M.shape[1], d = M.shape[2];
    check_config(C >= 2, "class_score: need at least two classes");
    std::vector<double> tau(d);
    for (size_t k = 0; k < d; ++k) {
        double u = 0, v = 0;
        for (size_t i = 0; i < m; ++i) {
            double sum = 0, sumsq = 0;
            for (size_t p = 0; p < C; ++p) {
                double x = M.v[(i * C + p) * d + k];
                sum += x;
                sumsq += x * x;
            }
            u += sum * sum - sumsq; // sum over ordered pairs p != q
            double mean = sum / static_cast<double>(C);
            for (size_t p = 0; p < C; ++p) {
                double diff = M.v[(i * C + p) * d + k] - mean;
                v += diff * diff;
            }
        }
        u /= static_cast<double>(m) * static_cast<double>(C) * static_cast<double>(C);
        v /= static_cast<double>(m) * static_cast<double>(C);
        tau[k] = -alpha * u + (1.0 - alpha) * v;
    }
    return tau;
}

// Timestep-oriented score: same statistic with timesteps and classes swapped.
inline std::vector<double> timestep_score(const Tensor<double>& M, double beta) {
    size_t m = M.shape[0], C = M.shape[1], d = M.shape[2];
    check_config(m >= 2, "timestep_score: need at least two timesteps");
    std::vector<double> tau(d);
    for (size_t k = 0; k < d; ++k) {
        double u = 0, v = 0;
        for (size_t j = 0; j < C; ++j) {
            double sum = 0, sumsq = 0;
            for (size_t p = 0; p < m; ++p) {
                double x = M.v[(p * C + j) * d + k];
                sum += x;
                sumsq += x * x;
            }
            u += sum * sum - sumsq;
            double mean = sum / static_cast<double>(m);
            for (size_t p = 0; p < m; ++p) {
                double diff = M.v[(p * C + j) * d + k] - mean;
                v += diff * diff;
            }
        }
        u /= static_cast<double>(C) * static_cast<double>(m) * static_cast<double>(m);
        v /= static_cast<double>(C) * static_cast<double>(m);
        tau[k] = -beta * u + (1.0 - beta) * v;
    }
    return tau;
}

// ----------------------------- selection -----------------------------

// Indices of the K largest scores; equal scores fall back to ascending
// channel id. The kept list itself is returned in ascending channel order.
inline std::vector<size_t> select_topk(const std::vector<double>& tau, size_t K) {
    size_t d = tau.size();
    check_config(K >= 1 && K <= d, "select_topk: K must be in [1, d]");
    std::vector<size_t> order(d);
    for (size_t k = 0; k < d; ++k) order[k] = k;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (tau[a] != tau[b]) return tau[a] > tau[b];
        return a < b;
    });
    std::vector<size_t> kept(order.begin(), order.begin() + K);
    std::sort(kept.begin(), kept.end());
    return kept;
}

// ----------------------------- purification index -----------------------------

struct PurificationIndex {
    double alpha = 0.5, beta = 0.5;
    size_t K = 0;
    bool normalized = false;   // whether rows were L2-normalized before scoring
    std::vector<size_t> kept;  // ascending channel ids
    std::vector<double> tau_class, tau_t, tau;
    std::string bank_digest;   // digest of the center payload the index was fit on

    std::string digest() const {
        Fnv1a64 h;
        for (size_t k : kept) {
            uint64_t v = k;
            h.update(&v, sizeof v);
        }
        for (double v : tau) h.update(&v, sizeof v);
        h.update(&alpha, sizeof alpha);
        h.update(&beta, sizeof beta);
        return h.hex();
    }
};

inline void to_json(nlohmann::json& j, const PurificationIndex& x) {
    j = nlohmann::json{{"format", "hsidiff purification v1"},
                       {"alpha", x.alpha},
                       {"beta", x.beta},
                       {"K", x.K},
                       {"normalized", x.normalized},
                       {"kept", x.kept},
                       {"tau_class", x.tau_class},
                       {"tau_t", x.tau_t},
                       {"tau", x.tau},
                       {"bank_digest", x.bank_digest}};
}

inline void from_json(const nlohmann::json& j, PurificationIndex& x) {
    if (j.value("format", "") != std::string("hsidiff purification v1"))
        throw IoError("not a purification index document");
    j.at("alpha").get_to(x.alpha);
    j.at("beta").get_to(x.beta);
    j.at("K").get_to(x.K);
    j.at("normalized").get_to(x.normalized);
    j.at("kept").get_to(x.kept);
    j.at("tau_class").get_to(x.tau_class);
    j.at("tau_t").get_to(x.tau_t);
    j.at("tau").get_to(x.tau);
    j.at("bank_digest").get_to(x.bank_digest);
}

inline size_t default_channel_budget(size_t d) { return std::min<size_t>(d, 256); }

// Fit scores on class means of the (optionally normalized) center bank and
// keep the best K channels.
inline PurificationIndex fit_purification(const FeatureBanks& banks,
                                          const std::vector<uint16_t>& labels, size_t num_classes,
                                          double alpha, double beta, size_t K,
                                          bool normalized = false) {
    check_config(alpha >= 0 && alpha <= 1 && beta >= 0 && beta <= 1,
                 "purification weights must lie in [0,1]");
    Tensor<double> M = rep_matrix(banks, labels, num_classes);
    PurificationIndex idx;
    idx.alpha = alpha;
    idx.beta = beta;
    idx.K = K;
    idx.normalized = normalized;
    idx.tau_class = class_score(M, alpha);
    idx.tau_t = timestep_score(M, beta);
    idx.tau.resize(banks.d);
    for (size_t k = 0; k < banks.d; ++k) idx.tau[k] = idx.tau_class[k] + idx.tau_t[k];
    idx.kept = select_topk(idx.tau, K);
    return idx;
}

// Gather kept channels from a (samples, m, d) bank into (samples, m, K).
inline Tensor<float> apply_purification(const Tensor<float>& bank,
                                        const std::vector<size_t>& kept) {
    check_config(bank.shape.size() == 3, "apply_purification: need (samples, m, d)");
    size_t n = bank.shape[0], m = bank.shape[1], d = bank.shape[2], K = kept.size();
    check_config(K >= 1, "apply_purification: empty keep list");
    for (size_t i = 0; i < K; ++i) {
        check_config(kept[i] < d, "apply_purification: channel id out of range");
        if (i) check_config(kept[i] > kept[i - 1], "apply_purification: keep list must ascend");
    }
    Tensor<float> out({n, m, K});
    for (size_t r = 0; r < n * m; ++r) {
        const float* src = bank.v.data() + r * d;
        float* dst = out.v.data() + r * K;
        for (size_t i = 0; i < K; ++i) dst[i] = src[kept[i]];
    }
    return out;
}

// L2-normalize each (sample, timestep) row across channels. Zero rows stay zero.
inline Tensor<float> normalize_rows(const Tensor<float>& bank) {
    check_config(bank.shape.size() == 3, "normalize_rows: need (samples, m, d)");
    size_t rows = bank.shape[0] * bank.shape[1], d = bank.shape[2];
    Tensor<float> out = bank;
    for (size_t r = 0; r < rows; ++r) {
        float* p = out.v.data() + r * d;
        double norm = 0;
        for (size_t k = 0; k < d; ++k) norm += static_cast<double>(p[k]) * p[k];
        norm = std::sqrt(norm);
        if (norm > 0)
            for (size_t k = 0; k < d; ++k) p[k] = static_cast<float>(p[k] / norm);
    }
    return out;
}

inline void save_purification(const std::filesystem::path& path, const PurificationIndex& idx) {
    nlohmann::json j = idx;
    write_text_atomic(path, j.dump(2) + "\n");
}

inline PurificationIndex load_purification(const std::filesystem::path& path) {
    return nlohmann::json::parse(read_text(path)).get<PurificationIndex>();
}

} // namespace hsidiff
