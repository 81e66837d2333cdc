#pragma once

// Reference implementations kept deliberately naive and separate from the
// production code paths: score recomputation via literal loops, central
// finite differences, and a synthetic labeled scene with a known-good
// nearest-mean baseline.

#include <functional>

#include "hsidiff/hsio.hpp"

namespace hsidiff::oracle {

struct NaiveScores {
    std::vector<double> tau_class, tau_t, tau;
};

// Channel scores recomputed from first principles over the raw class-mean
// array (length m*C*d, C-order). No algebraic shortcuts, 64-bit throughout.
inline NaiveScores naive_scores(const std::vector<double>& M, size_t m, size_t C, size_t d,
                                double alpha, double beta) {
    check_config(M.size() == m * C * d, "naive_scores: size mismatch");
    check_config(m >= 2 && C >= 2, "naive_scores: need m >= 2 and C >= 2");
    auto at = [&](size_t i, size_t j, size_t k) { return M[(i * C + j) * d + k]; };
    NaiveScores out;
    out.tau_class.resize(d);
    out.tau_t.resize(d);
    out.tau.resize(d);
    for (size_t k = 0; k < d; ++k) {
        double u = 0.0;
        for (size_t i = 0; i < m; ++i)
            for (size_t p = 0; p < C; ++p)
                for (size_t q = 0; q < C; ++q)
                    if (q != p) u += at(i, p, k) * at(i, q, k);
        u = u / static_cast<double>(m) / static_cast<double>(C) / static_cast<double>(C);
        double v = 0.0;
        for (size_t i = 0; i < m; ++i)
            for (size_t p = 0; p < C; ++p) {
                double mean = 0.0;
                for (size_t q = 0; q < C; ++q) mean += at(i, q, k);
                mean /= static_cast<double>(C);
                v += (at(i, p, k) - mean) * (at(i, p, k) - mean);
            }
        v = v / static_cast<double>(m) / static_cast<double>(C);
        out.tau_class[k] = -alpha * u + (1.0 - alpha) * v;

        double ut = 0.0;
        for (size_t j = 0; j < C; ++j)
            for (size_t p = 0; p < m; ++p)
                for (size_t q = 0; q < m; ++q)
                    if (q != p) ut += at(p, j, k) * at(q, j, k);
        ut = ut / static_cast<double>(C) / static_cast<double>(m) / static_cast<double>(m);
        double vt = 0.0;
        for (size_t j = 0; j < C; ++j)
            for (size_t p = 0; p < m; ++p) {
                double mean = 0.0;
                for (size_t q = 0; q < m; ++q) mean += at(q, j, k);
                mean /= static_cast<double>(m);
                vt += (at(p, j, k) - mean) * (at(p, j, k) - mean);
            }
        vt = vt / static_cast<double>(C) / static_cast<double>(m);
        out.tau_t[k] = -beta * ut + (1.0 - beta) * vt;
        out.tau[k] = out.tau_class[k] + out.tau_t[k];
    }
    return out;
}

// Top-K channel ids by score, ties to the smaller id, result ascending.
// Selection sort on a copy, nothing shared with the production path.
inline std::vector<size_t> naive_topk(std::vector<double> tau, size_t K) {
    std::vector<size_t> ids(tau.size());
    for (size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    std::vector<size_t> picked;
    for (size_t round = 0; round < K; ++round) {
        size_t best = 0;
        for (size_t i = 1; i < ids.size(); ++i)
            if (tau[ids[i]] > tau[ids[best]]) best = i;
        picked.push_back(ids[best]);
        ids.erase(ids.begin() + best);
    }
    std::sort(picked.begin(), picked.end());
    return picked;
}

// Central finite differences of f at x.
inline std::vector<double> fd_grad(const std::function<double(const std::vector<double>&)>& f,
                                   std::vector<double> x, double eps = 1e-5) {
    std::vector<double> g(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        double keep = x[i];
        x[i] = keep + eps;
        double hi = f(x);
        x[i] = keep - eps;
        double lo = f(x);
        x[i] = keep;
        g[i] = (hi - lo) / (2.0 * eps);
    }
    return g;
}

// ----------------------------- synthetic scene -----------------------------

struct SyntheticScene {
    HsiCube cube;
    LabelRaster labels;
    Tensor<double> class_means; // (C, bands)
    double noise_scale = 1.0;
    double separability = 0.0;
};

// Gaussian-bump class spectra whose closest pair of means sits exactly
// `separability * noise_scale` apart, plus white noise. Labels tile the
// scene in contiguous square blocks so every class has connected regions.
inline SyntheticScene make_scene(uint64_t seed, size_t size, size_t bands, size_t num_classes,
                                 double separability) {
    check_config(size >= 8 && bands >= 2 && num_classes >= 2, "make_scene: degenerate scene");
    check_config(separability >= 0, "make_scene: separability must be nonnegative");
    SyntheticScene scene;
    scene.noise_scale = 1.0;
    scene.separability = separability;

    Tensor<double> base = Tensor<double>::zeros({num_classes, bands});
    double width = static_cast<double>(bands) / (2.0 * static_cast<double>(num_classes));
    for (size_t j = 0; j < num_classes; ++j) {
        double mu = static_cast<double>(bands) * (static_cast<double>(j) + 0.5) /
                    static_cast<double>(num_classes);
        for (size_t b = 0; b < bands; ++b) {
            double z = (static_cast<double>(b) - mu) / width;
            base.v[j * bands + b] = std::exp(-0.5 * z * z);
        }
    }
    double min_dist = std::numeric_limits<double>::infinity();
    for (size_t a = 0; a < num_classes; ++a)
        for (size_t b = a + 1; b < num_classes; ++b) {
            double dist = 0;
            for (size_t k = 0; k < bands; ++k) {
                double diff = base.v[a * bands + k] - base.v[b * bands + k];
                dist += diff * diff;
            }
            min_dist = std::min(min_dist, std::sqrt(dist));
        }
    double scale = min_dist > 0 ? separability * scene.noise_scale / min_dist : 0.0;
    scene.class_means = Tensor<double>::zeros({num_classes, bands});
    for (size_t i = 0; i < base.v.size(); ++i) scene.class_means.v[i] = base.v[i] * scale;

    scene.labels.height = size;
    scene.labels.width = size;
    scene.labels.num_classes = static_cast<uint16_t>(num_classes);
    scene.labels.labels = Tensor<uint16_t>::zeros({size, size});
    size_t block = std::max<size_t>(4, size / 4);
    for (size_t r = 0; r < size; ++r)
        for (size_t c = 0; c < size; ++c)
            scene.labels.labels.v[r * size + c] =
                static_cast<uint16_t>((r / block + c / block) % num_classes + 1);

    scene.cube.height = size;
    scene.cube.width = size;
    scene.cube.bands = bands;
    scene.cube.data = Tensor<float>({size, size, bands});
    Rng rng = make_rng(seed, 0x7363656e);
    std::normal_distribution<double> noise(0.0, scene.noise_scale);
    for (size_t r = 0; r < size; ++r)
        for (size_t c = 0; c < size; ++c) {
            size_t j = scene.labels.labels.v[r * size + c] - 1;
            for (size_t b = 0; b < bands; ++b)
                scene.cube.data.v[(r * size + c) * bands + b] =
                    static_cast<float>(scene.class_means.v[j * bands + b] + noise(rng));
        }
    return scene;
}

// Overall accuracy of a nearest-class-mean classifier fit on the training
// pixels' raw spectra. Baseline for end-to-end sanity, not a model.
inline double nearest_mean_accuracy(const HsiCube& cube, const LabelRaster& labels,
                                    const std::vector<size_t>& train_ids,
                                    const std::vector<size_t>& test_ids) {
    size_t C = labels.num_classes, bands = cube.bands;
    Tensor<double> means = Tensor<double>::zeros({C, bands});
    std::vector<size_t> counts(C, 0);
    for (size_t id : train_ids) {
        uint16_t lab = labels.labels.v[id];
        check_config(lab >= 1, "nearest_mean: unlabeled training pixel");
        ++counts[lab - 1];
        for (size_t b = 0; b < bands; ++b)
            means.v[(lab - 1) * bands + b] += static_cast<double>(cube.data.v[id * bands + b]);
    }
    for (size_t j = 0; j < C; ++j) {
        check_config(counts[j] > 0, "nearest_mean: class without training pixels");
        for (size_t b = 0; b < bands; ++b) means.v[j * bands + b] /= static_cast<double>(counts[j]);
    }
    size_t hits = 0;
    for (size_t id : test_ids) {
        double best = std::numeric_limits<double>::infinity();
        size_t arg = 0;
        for (size_t j = 0; j < C; ++j) {
            double dist = 0;
            for (size_t b = 0; b < bands; ++b) {
                double diff = static_cast<double>(cube.data.v[id * bands + b]) -
                              means.v[j * bands + b];
                dist += diff * diff;
            }
            if (dist < best) {
                best = dist;
                arg = j;
            }
        }
        if (arg + 1 == labels.labels.v[id]) ++hits;
    }
    check_config(!test_ids.empty(), "nearest_mean: empty test set");
    return static_cast<double>(hits) / static_cast<double>(test_ids.size());
}

} // namespace hsidiff::oracle
