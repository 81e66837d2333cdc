#pragma once

// Hyperspectral cube and label raster ingestion, PCA, percentile
// normalization, mirror-padded patch extraction, and stratified splits.
//
// On-disk format: a small text header (<name>.hdr) paired with a raw
// little-endian payload (<name>.raw). Cubes are 32-bit reals in
// band-sequential order, labels are u16 with 0 meaning unlabeled.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>

#include <Eigen/Dense>

#include "hsidiff/common.hpp"
#include "hsidiff/tensor.hpp"

namespace hsidiff {

struct HsiCube {
    size_t height = 0, width = 0, bands = 0;
    Tensor<float> data; // (height, width, bands)

    float& at(size_t r, size_t c, size_t b) { return data.v[(r * width + c) * bands + b]; }
    float at(size_t r, size_t c, size_t b) const { return data.v[(r * width + c) * bands + b]; }
    size_t pixels() const { return height * width; }
};

struct LabelRaster {
    size_t height = 0, width = 0;
    size_t num_classes = 0;     // classes are 1..num_classes, 0 is unlabeled
    Tensor<uint16_t> labels;    // (height, width)

    uint16_t at(size_t r, size_t c) const { return labels.v[r * width + c]; }
};

struct PcaModel {
    size_t input_bands = 0;             // N
    std::vector<double> mean;           // N
    Tensor<double> components;          // (D, N), rows orthonormal
    std::vector<double> explained_variance; // D, non-increasing
    bool degenerate = false;            // covariance rank < D

    size_t dims() const { return components.shape.empty() ? 0 : components.shape[0]; }
};

struct Patch {
    Tensor<float> data; // (H, H, D)
    size_t center_row = 0, center_col = 0; // source cube coordinates
    std::optional<uint16_t> label;
};

// ----------------------------- header files -----------------------------

namespace detail {

inline std::map<std::string, std::string> parse_header(const std::string& text,
                                                       const std::string& magic,
                                                       const std::string& path) {
    std::istringstream ss(text);
    std::string line;
    if (!std::getline(ss, line)) throw IoError("empty header: " + path);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != magic) throw IoError("bad magic in " + path + ": '" + line + "'");
    std::map<std::string, std::string> kv;
    while (std::getline(ss, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw IoError("malformed header line in " + path + ": " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

inline size_t header_uint(const std::map<std::string, std::string>& kv, const std::string& key,
                          const std::string& path) {
    auto it = kv.find(key);
    if (it == kv.end()) throw IoError("missing header field '" + key + "' in " + path);
    try {
        long long v = std::stoll(it->second);
        if (v <= 0) throw IoError("non-positive header field '" + key + "' in " + path);
        return static_cast<size_t>(v);
    } catch (const std::invalid_argument&) {
        throw IoError("non-numeric header field '" + key + "' in " + path);
    }
}

inline void header_expect(const std::map<std::string, std::string>& kv, const std::string& key,
                          const std::string& want, const std::string& path) {
    auto it = kv.find(key);
    if (it == kv.end()) throw IoError("missing header field '" + key + "' in " + path);
    if (it->second != want)
        throw IoError("unsupported " + key + " '" + it->second + "' in " + path + " (want " +
                      want + ")");
}

inline std::filesystem::path payload_path(const std::filesystem::path& hdr) {
    std::filesystem::path p = hdr;
    p.replace_extension(".raw");
    return p;
}

} // namespace detail

inline constexpr const char* kCubeMagic = "hsidiff cube v1";
inline constexpr const char* kLabelMagic = "hsidiff labels v1";

inline void save_cube(const std::filesystem::path& hdr_path, const HsiCube& cube) {
    check_config(cube.data.size() == cube.pixels() * cube.bands, "cube data size mismatch");
    // payload is band-sequential: transpose from the in-memory pixel-interleaved order
    std::vector<float> bsq(cube.data.size());
    for (size_t b = 0; b < cube.bands; ++b)
        for (size_t p = 0; p < cube.pixels(); ++p)
            bsq[b * cube.pixels() + p] = cube.data.v[p * cube.bands + b];
    write_blob(detail::payload_path(hdr_path), bsq.data(), bsq.size());
    std::ostringstream h;
    h << kCubeMagic << "\n"
      << "width=" << cube.width << "\n"
      << "height=" << cube.height << "\n"
      << "bands=" << cube.bands << "\n"
      << "dtype=f32\nlayout=BSQ\nbyte_order=little\n";
    write_text_atomic(hdr_path, h.str());
}

inline HsiCube load_cube(const std::filesystem::path& hdr_path) {
    auto kv = detail::parse_header(read_text(hdr_path), kCubeMagic, hdr_path.string());
    HsiCube cube;
    cube.width = detail::header_uint(kv, "width", hdr_path.string());
    cube.height = detail::header_uint(kv, "height", hdr_path.string());
    cube.bands = detail::header_uint(kv, "bands", hdr_path.string());
    detail::header_expect(kv, "dtype", "f32", hdr_path.string());
    detail::header_expect(kv, "layout", "BSQ", hdr_path.string());
    detail::header_expect(kv, "byte_order", "little", hdr_path.string());
    size_t count = cube.pixels() * cube.bands;
    std::vector<float> bsq = read_blob<float>(detail::payload_path(hdr_path), count);
    cube.data = Tensor<float>({cube.height, cube.width, cube.bands});
    for (size_t b = 0; b < cube.bands; ++b)
        for (size_t p = 0; p < cube.pixels(); ++p)
            cube.data.v[p * cube.bands + b] = bsq[b * cube.pixels() + p];
    if (!cube.data.all_finite())
        throw NumericError("non-finite value in cube payload " + hdr_path.string());
    return cube;
}

inline void save_labels(const std::filesystem::path& hdr_path, const LabelRaster& lr) {
    check_config(lr.labels.size() == lr.height * lr.width, "label raster size mismatch");
    write_blob(detail::payload_path(hdr_path), lr.labels.v.data(), lr.labels.size());
    std::ostringstream h;
    h << kLabelMagic << "\n"
      << "width=" << lr.width << "\n"
      << "height=" << lr.height << "\n"
      << "bands=1\ndtype=u16\nlayout=BSQ\nbyte_order=little\n"
      << "num_classes=" << lr.num_classes << "\n";
    write_text_atomic(hdr_path, h.str());
}

inline LabelRaster load_labels(const std::filesystem::path& hdr_path) {
    auto kv = detail::parse_header(read_text(hdr_path), kLabelMagic, hdr_path.string());
    LabelRaster lr;
    lr.width = detail::header_uint(kv, "width", hdr_path.string());
    lr.height = detail::header_uint(kv, "height", hdr_path.string());
    lr.num_classes = detail::header_uint(kv, "num_classes", hdr_path.string());
    detail::header_expect(kv, "dtype", "u16", hdr_path.string());
    auto raw = read_blob<uint16_t>(detail::payload_path(hdr_path), lr.height * lr.width);
    lr.labels = Tensor<uint16_t>({lr.height, lr.width});
    lr.labels.v = std::move(raw);
    for (uint16_t v : lr.labels.v)
        if (v > lr.num_classes)
            throw IoError("label value " + std::to_string(v) + " exceeds num_classes=" +
                          std::to_string(lr.num_classes) + " in " + hdr_path.string());
    return lr;
}

// ----------------------------- PCA -----------------------------

inline size_t default_pca_dims(size_t bands) {
    return std::max<size_t>(1, static_cast<size_t>(std::llround(static_cast<double>(bands) / 8.0)));
}

inline PcaModel fit_pca(const HsiCube& cube, size_t d) {
    size_t n = cube.bands, p = cube.pixels();
    check_config(d >= 1 && d <= n, "pca dims must be in [1, bands]");
    check_config(p >= 2, "pca needs at least two pixels");

    PcaModel model;
    model.input_bands = n;
    model.mean.assign(n, 0.0);
    for (size_t i = 0; i < p; ++i)
        for (size_t b = 0; b < n; ++b) model.mean[b] += cube.data.v[i * n + b];
    for (double& m : model.mean) m /= static_cast<double>(p);

    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(n, n);
    {
        Eigen::MatrixXd x(p, n);
        for (size_t i = 0; i < p; ++i)
            for (size_t b = 0; b < n; ++b)
                x(static_cast<long>(i), static_cast<long>(b)) =
                    static_cast<double>(cube.data.v[i * n + b]) - model.mean[b];
        cov.noalias() = x.transpose() * x / static_cast<double>(p - 1);
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success) throw NumericError("pca eigendecomposition failed");

    // Eigen sorts ascending; take the top d in descending order.
    model.components = Tensor<double>({d, n});
    model.explained_variance.resize(d);
    double ev_max = std::max(0.0, es.eigenvalues()(static_cast<long>(n - 1)));
    for (size_t k = 0; k < d; ++k) {
        long src = static_cast<long>(n - 1 - k);
        double ev = es.eigenvalues()(src);
        model.explained_variance[k] = std::max(ev, 0.0);
        Eigen::VectorXd vec = es.eigenvectors().col(src);
        // deterministic sign: the largest-magnitude element is positive
        long arg = 0;
        vec.cwiseAbs().maxCoeff(&arg);
        if (vec(arg) < 0) vec = -vec;
        for (size_t b = 0; b < n; ++b) model.components.at(k, b) = vec(static_cast<long>(b));
        if (model.explained_variance[k] <= std::max(1e-12, 1e-9 * ev_max)) model.degenerate = true;
    }
    return model;
}

inline HsiCube apply_pca(const HsiCube& cube, const PcaModel& model) {
    check_config(cube.bands == model.input_bands, "pca band-count mismatch");
    size_t n = cube.bands, d = model.dims(), p = cube.pixels();
    HsiCube out;
    out.height = cube.height;
    out.width = cube.width;
    out.bands = d;
    out.data = Tensor<float>({cube.height, cube.width, d});
    for (size_t i = 0; i < p; ++i) {
        const float* src = cube.data.v.data() + i * n;
        float* dst = out.data.v.data() + i * d;
        for (size_t k = 0; k < d; ++k) {
            double acc = 0;
            const double* comp = model.components.v.data() + k * n;
            for (size_t b = 0; b < n; ++b)
                acc += (static_cast<double>(src[b]) - model.mean[b]) * comp[b];
            dst[k] = static_cast<float>(acc);
        }
    }
    return out;
}

// ----------------------------- normalization -----------------------------

// Percentile with linear interpolation over the sorted values.
inline double percentile_sorted(const std::vector<float>& sorted, double q) {
    size_t n = sorted.size();
    if (n == 1) return sorted[0];
    double idx = q / 100.0 * static_cast<double>(n - 1);
    size_t lo = static_cast<size_t>(idx);
    if (lo >= n - 1) return sorted[n - 1];
    double frac = idx - static_cast<double>(lo);
    return static_cast<double>(sorted[lo]) * (1.0 - frac) +
           static_cast<double>(sorted[lo + 1]) * frac;
}

// Per band: map the [p1, p99] range onto [-1, 1], clamp to [-1.5, 1.5].
// Constant bands map to zero and are reported through warnings. The
// percentile bounds actually used can be captured through bounds_out.
inline HsiCube normalize(const HsiCube& cube, std::vector<std::string>* warnings = nullptr,
                         std::vector<std::array<double, 2>>* bounds_out = nullptr) {
    size_t p = cube.pixels(), n = cube.bands;
    HsiCube out = cube;
    std::vector<float> band(p);
    for (size_t b = 0; b < n; ++b) {
        for (size_t i = 0; i < p; ++i) band[i] = cube.data.v[i * n + b];
        std::sort(band.begin(), band.end());
        double p1 = percentile_sorted(band, 1.0);
        double p99 = percentile_sorted(band, 99.0);
        if (bounds_out) bounds_out->push_back({p1, p99});
        double range = p99 - p1;
        if (range <= 1e-12 * std::max(1.0, std::abs(p99))) {
            for (size_t i = 0; i < p; ++i) out.data.v[i * n + b] = 0.0f;
            if (warnings)
                warnings->push_back("band " + std::to_string(b) + " is constant, normalized to 0");
            continue;
        }
        double scale = 2.0 / range;
        for (size_t i = 0; i < p; ++i) {
            double v = (static_cast<double>(cube.data.v[i * n + b]) - p1) * scale - 1.0;
            out.data.v[i * n + b] = static_cast<float>(std::clamp(v, -1.5, 1.5));
        }
    }
    return out;
}

// ----------------------------- patches -----------------------------

// Symmetric (edge-inclusive) reflection of coordinate i into [0, n).
inline size_t mirror_index(long i, size_t n) {
    long sn = static_cast<long>(n);
    if (i < 0) i = -i - 1;
    if (i >= sn) i = 2 * sn - i - 1;
    return static_cast<size_t>(i);
}

// Mirror-pad by `pad` on all four sides.
inline HsiCube mirror_pad(const HsiCube& cube, size_t pad) {
    check_config(pad <= cube.height && pad <= cube.width,
                 "mirror padding wider than the cube");
    HsiCube out;
    out.height = cube.height + 2 * pad;
    out.width = cube.width + 2 * pad;
    out.bands = cube.bands;
    out.data = Tensor<float>({out.height, out.width, out.bands});
    for (size_t r = 0; r < out.height; ++r) {
        size_t sr = mirror_index(static_cast<long>(r) - static_cast<long>(pad), cube.height);
        for (size_t c = 0; c < out.width; ++c) {
            size_t sc = mirror_index(static_cast<long>(c) - static_cast<long>(pad), cube.width);
            std::copy_n(cube.data.v.data() + (sr * cube.width + sc) * cube.bands, cube.bands,
                        out.data.v.data() + (r * out.width + c) * out.bands);
        }
    }
    return out;
}

enum class PatchMode { random_crops, labeled_centers };

struct PatchRef {
    size_t row = 0, col = 0;        // top-left in padded coordinates
    size_t center_row = 0, center_col = 0; // source cube coordinates (labeled mode)
    std::optional<uint16_t> label;
};

// Patches are materialized on demand; the padded cube is shared. This keeps
// a full labeled-pixel sweep at one cube copy instead of thousands.
struct PatchSet {
    std::shared_ptr<HsiCube> padded;
    size_t patch_size = 0;

    std::vector<PatchRef> refs;

    size_t size() const { return refs.size(); }

    Patch get(size_t i) const {
        const PatchRef& ref = refs.at(i);
        size_t h = patch_size, d = padded->bands;
        Patch patch;
        patch.data = Tensor<float>({h, h, d});
        for (size_t r = 0; r < h; ++r)
            std::copy_n(
                padded->data.v.data() + ((ref.row + r) * padded->width + ref.col) * d, h * d,
                patch.data.v.data() + r * h * d);
        patch.center_row = ref.center_row;
        patch.center_col = ref.center_col;
        patch.label = ref.label;
        return patch;
    }
};

// random_crops: `count` uniformly random in-bounds crops of the padded cube.
// labeled_centers: one patch per labeled pixel in row-major order, the pixel
// sitting at 0-based (H/2, H/2). H must be even.
inline PatchSet extract_patches(const HsiCube& cube, const LabelRaster* labels, size_t patch_size,
                                PatchMode mode, size_t count = 0, Rng* rng = nullptr) {
    check_config(patch_size >= 2 && patch_size % 2 == 0, "patch size must be even and >= 2");
    size_t pad = patch_size / 2;
    PatchSet set;
    set.patch_size = patch_size;
    set.padded = std::make_shared<HsiCube>(mirror_pad(cube, pad));
    if (mode == PatchMode::labeled_centers) {
        check_config(labels != nullptr, "labeled_centers mode needs a label raster");
        check_config(labels->height == cube.height && labels->width == cube.width,
                     "label raster does not match the cube");
        for (size_t r = 0; r < cube.height; ++r)
            for (size_t c = 0; c < cube.width; ++c) {
                uint16_t lab = labels->at(r, c);
                if (lab == 0) continue;
                // padded (r + pad, c + pad) lands on patch index (pad, pad)
                set.refs.push_back({r, c, r, c, lab});
            }
    } else {
        check_config(rng != nullptr, "random_crops mode needs an rng");
        size_t max_r = set.padded->height - patch_size;
        size_t max_c = set.padded->width - patch_size;
        std::uniform_int_distribution<size_t> dr(0, max_r), dc(0, max_c);
        for (size_t i = 0; i < count; ++i) {
            size_t r = dr(*rng), c = dc(*rng);
            set.refs.push_back({r, c, r + pad, c + pad, std::nullopt});
        }
    }
    return set;
}

// ----------------------------- splits -----------------------------

struct SplitResult {
    std::vector<size_t> train_ids; // row-major pixel ids, sorted ascending
    std::vector<size_t> test_ids;
};

// Per-class training count: fraction of the class size, rounded half toward
// zero, with a floor of one sample. Exact integer arithmetic keeps ties like
// 0.1 * 2455 = 245.5 from drifting across platforms.
inline size_t stratum_train_count(size_t class_size, double fraction) {
    long long q = 1000000;
    long long pnum = std::llround(fraction * static_cast<double>(q));
    check_config(pnum > 0 && pnum < q, "split fraction must be in (0, 1)");
    long long n = static_cast<long long>(class_size);
    long long t = (2 * pnum * n + q - 1) / (2 * q); // ceil(p*n/q - 1/2)
    return static_cast<size_t>(std::max(1ll, t));
}

inline SplitResult split_train_test(const LabelRaster& lr, double fraction, uint64_t seed) {
    check_config(fraction > 0.0 && fraction < 1.0, "split fraction must be in (0, 1)");
    check_config(lr.num_classes >= 1, "label raster declares no classes");
    std::vector<std::vector<size_t>> by_class(lr.num_classes + 1);
    for (size_t i = 0; i < lr.labels.size(); ++i) {
        uint16_t lab = lr.labels.v[i];
        if (lab > 0) by_class[lab].push_back(i);
    }
    SplitResult out;
    for (size_t j = 1; j <= lr.num_classes; ++j) {
        auto& ids = by_class[j];
        if (ids.empty())
            throw ConfigError("class " + std::to_string(j) + " has no labeled pixels");
        Rng rng = make_rng(seed, j);
        std::shuffle(ids.begin(), ids.end(), rng);
        size_t ntrain = std::min(stratum_train_count(ids.size(), fraction), ids.size());
        out.train_ids.insert(out.train_ids.end(), ids.begin(), ids.begin() + ntrain);
        out.test_ids.insert(out.test_ids.end(), ids.begin() + ntrain, ids.end());
    }
    std::sort(out.train_ids.begin(), out.train_ids.end());
    std::sort(out.test_ids.begin(), out.test_ids.end());
    return out;
}

inline std::vector<size_t> class_counts(const LabelRaster& lr) {
    std::vector<size_t> counts(lr.num_classes + 1, 0);
    for (uint16_t v : lr.labels.v) counts[v]++;
    return counts;
}

} // namespace hsidiff
