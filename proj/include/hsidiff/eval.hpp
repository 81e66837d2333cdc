#pragma once

// Confusion-matrix metrics (overall accuracy, average accuracy, Cohen's
// kappa), averaging across runs, and classification-map rendering.

#include <json.hpp>

#include "hsidiff/common.hpp"
#include "hsidiff/tensor.hpp"

namespace hsidiff {

// counts[t-1][p-1]: truth class t predicted as p. Labels are 1-based.
inline Tensor<size_t> confusion(const std::vector<uint16_t>& truth,
                                const std::vector<uint16_t>& predicted, size_t num_classes) {
    check_config(truth.size() == predicted.size(), "confusion: length mismatch");
    check_config(!truth.empty(), "confusion: empty inputs");
    Tensor<size_t> counts = Tensor<size_t>::zeros({num_classes, num_classes});
    for (size_t i = 0; i < truth.size(); ++i) {
        check_config(truth[i] >= 1 && truth[i] <= num_classes, "confusion: truth label out of range");
        check_config(predicted[i] >= 1 && predicted[i] <= num_classes,
                     "confusion: predicted label out of range");
        ++counts.at(size_t(truth[i] - 1), size_t(predicted[i] - 1));
    }
    return counts;
}

struct MetricsReport {
    size_t num_classes = 0;
    size_t total = 0;
    double oa = 0;
    double aa = 0;
    bool kappa_defined = false;
    double kappa = 0;
    std::vector<double> per_class;     // NaN where the class has no truth samples
    std::vector<size_t> empty_classes; // 1-based ids excluded from AA
    size_t runs = 1;
    std::vector<uint64_t> seeds;
};

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
    nlohmann::json per = nlohmann::json::array();
    for (double v : r.per_class)
        per.push_back(std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr));
    j = nlohmann::json{{"num_classes", r.num_classes},
                       {"total", r.total},
                       {"oa", r.oa},
                       {"aa", r.aa},
                       {"kappa_defined", r.kappa_defined},
                       {"kappa", r.kappa_defined ? nlohmann::json(r.kappa) : nlohmann::json(nullptr)},
                       {"per_class", per},
                       {"empty_classes", r.empty_classes},
                       {"runs", r.runs},
                       {"seeds", r.seeds}};
}

inline void from_json(const nlohmann::json& j, MetricsReport& r) {
    j.at("num_classes").get_to(r.num_classes);
    j.at("total").get_to(r.total);
    j.at("oa").get_to(r.oa);
    j.at("aa").get_to(r.aa);
    j.at("kappa_defined").get_to(r.kappa_defined);
    r.kappa = r.kappa_defined ? j.at("kappa").get<double>() : 0.0;
    r.per_class.clear();
    for (const auto& v : j.at("per_class"))
        r.per_class.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN()
                                          : v.get<double>());
    j.at("empty_classes").get_to(r.empty_classes);
    j.at("runs").get_to(r.runs);
    j.at("seeds").get_to(r.seeds);
}

inline MetricsReport metrics(const Tensor<size_t>& counts) {
    check_config(counts.shape.size() == 2 && counts.shape[0] == counts.shape[1],
                 "metrics: confusion matrix must be square");
    size_t C = counts.shape[0];
    MetricsReport r;
    r.num_classes = C;
    std::vector<size_t> row(C, 0), col(C, 0);
    size_t diag = 0;
    for (size_t t = 0; t < C; ++t)
        for (size_t p = 0; p < C; ++p) {
            size_t n = counts.at(t, p);
            row[t] += n;
            col[p] += n;
            r.total += n;
            if (t == p) diag += n;
        }
    check_config(r.total > 0, "metrics: empty confusion matrix");
    r.oa = static_cast<double>(diag) / static_cast<double>(r.total);

    double aa_sum = 0;
    size_t aa_count = 0;
    for (size_t t = 0; t < C; ++t) {
        if (row[t] == 0) {
            r.per_class.push_back(std::numeric_limits<double>::quiet_NaN());
            r.empty_classes.push_back(t + 1);
            continue;
        }
        double acc = static_cast<double>(counts.at(t, t)) / static_cast<double>(row[t]);
        r.per_class.push_back(acc);
        aa_sum += acc;
        ++aa_count;
    }
    check_config(aa_count > 0, "metrics: every class is empty");
    r.aa = aa_sum / static_cast<double>(aa_count);

    double pe = 0;
    for (size_t j = 0; j < C; ++j)
        pe += static_cast<double>(row[j]) * static_cast<double>(col[j]);
    pe /= static_cast<double>(r.total) * static_cast<double>(r.total);
    if (pe < 1.0) {
        r.kappa_defined = true;
        r.kappa = (r.oa - pe) / (1.0 - pe);
    }
    return r;
}

// Arithmetic mean across runs. Per-class entries average over the runs where
// they are defined; kappa averages over runs where it is defined.
inline MetricsReport average_runs(const std::vector<MetricsReport>& runs) {
    check_config(!runs.empty(), "average_runs: nothing to average");
    size_t C = runs[0].num_classes;
    for (const auto& r : runs)
        check_config(r.num_classes == C, "average_runs: class count mismatch between runs");

    MetricsReport out;
    out.num_classes = C;
    out.runs = 0;
    double kappa_sum = 0;
    size_t kappa_count = 0;
    std::vector<double> class_sum(C, 0);
    std::vector<size_t> class_count(C, 0);
    std::vector<bool> empty(C, true);
    for (const auto& r : runs) {
        out.total += r.total;
        out.oa += r.oa * static_cast<double>(r.runs);
        out.aa += r.aa * static_cast<double>(r.runs);
        out.runs += r.runs;
        out.seeds.insert(out.seeds.end(), r.seeds.begin(), r.seeds.end());
        if (r.kappa_defined) {
            kappa_sum += r.kappa * static_cast<double>(r.runs);
            kappa_count += r.runs;
        }
        for (size_t j = 0; j < C; ++j)
            if (std::isfinite(r.per_class[j])) {
                class_sum[j] += r.per_class[j];
                ++class_count[j];
                empty[j] = false;
            }
    }
    out.oa /= static_cast<double>(out.runs);
    out.aa /= static_cast<double>(out.runs);
    if (kappa_count > 0) {
        out.kappa_defined = true;
        out.kappa = kappa_sum / static_cast<double>(kappa_count);
    }
    for (size_t j = 0; j < C; ++j) {
        out.per_class.push_back(class_count[j] > 0
                                    ? class_sum[j] / static_cast<double>(class_count[j])
                                    : std::numeric_limits<double>::quiet_NaN());
        if (empty[j]) out.empty_classes.push_back(j + 1);
    }
    return out;
}

// ----------------------------- rendering -----------------------------

using Rgb = std::array<uint8_t, 3>;

// Index 0 is reserved for unlabeled pixels and is black; class colors step
// around the hue wheel by the golden-angle to stay visually distinct.
inline std::vector<Rgb> default_palette(size_t num_classes) {
    std::vector<Rgb> palette;
    palette.push_back({0, 0, 0});
    for (size_t j = 0; j < num_classes; ++j) {
        double hue = std::fmod(static_cast<double>(j) * 0.61803398875, 1.0) * 6.0;
        double s = 0.75, v = 0.95;
        double c = v * s, x = c * (1.0 - std::abs(std::fmod(hue, 2.0) - 1.0)), m = v - c;
        double rgb[3] = {0, 0, 0};
        switch (static_cast<int>(hue)) {
            case 0: rgb[0] = c; rgb[1] = x; break;
            case 1: rgb[0] = x; rgb[1] = c; break;
            case 2: rgb[1] = c; rgb[2] = x; break;
            case 3: rgb[1] = x; rgb[2] = c; break;
            case 4: rgb[0] = x; rgb[2] = c; break;
            default: rgb[0] = c; rgb[2] = x; break;
        }
        palette.push_back({static_cast<uint8_t>(std::lround((rgb[0] + m) * 255)),
                           static_cast<uint8_t>(std::lround((rgb[1] + m) * 255)),
                           static_cast<uint8_t>(std::lround((rgb[2] + m) * 255))});
    }
    return palette;
}

// Binary PPM (P6) of a label raster; labels index the palette directly.
inline std::vector<uint8_t> render_map(const Tensor<uint16_t>& labels,
                                       const std::vector<Rgb>& palette) {
    check_config(labels.shape.size() == 2, "render_map: need a 2-d raster");
    size_t h = labels.shape[0], w = labels.shape[1];
    for (uint16_t v : labels.v)
        check_config(v < palette.size(), "render_map: label exceeds the palette");
    std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    std::vector<uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + h * w * 3);
    for (uint16_t v : labels.v) {
        out.push_back(palette[v][0]);
        out.push_back(palette[v][1]);
        out.push_back(palette[v][2]);
    }
    return out;
}

// Minimal P6 parser for round-trip checks: returns height, width, pixels.
inline std::tuple<size_t, size_t, std::vector<Rgb>> parse_ppm(const std::vector<uint8_t>& bytes) {
    std::string text(bytes.begin(), bytes.end());
    size_t pos = 0;
    auto token = [&]() {
        while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
        size_t start = pos;
        while (pos < text.size() && !std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
        return text.substr(start, pos - start);
    };
    if (token() != "P6") throw IoError("not a binary PPM");
    size_t w = std::stoull(token());
    size_t h = std::stoull(token());
    if (token() != "255") throw IoError("unsupported PPM depth");
    ++pos; // single whitespace after the header
    if (bytes.size() - pos != h * w * 3) throw IoError("PPM payload size mismatch");
    std::vector<Rgb> pixels(h * w);
    for (size_t i = 0; i < h * w; ++i)
        pixels[i] = {bytes[pos + 3 * i], bytes[pos + 3 * i + 1], bytes[pos + 3 * i + 2]};
    return {h, w, pixels};
}

// ----------------------------- text report -----------------------------

inline std::string format_ratio(double v) {
    if (!std::isfinite(v)) return "n/a";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

// Per-class accuracy rows followed by the three summary metrics.
inline std::string report_table(const MetricsReport& r, const std::string& title = "") {
    std::string out;
    if (!title.empty()) out += title + "\n";
    out += "class  accuracy\n";
    for (size_t j = 0; j < r.num_classes; ++j) {
        char line[64];
        std::snprintf(line, sizeof line, "%-6zu %s\n", j + 1, format_ratio(r.per_class[j]).c_str());
        out += line;
    }
    out += "OA     " + format_ratio(r.oa) + "\n";
    out += "AA     " + format_ratio(r.aa) + "\n";
    out += "kappa  " +
           (r.kappa_defined ? format_ratio(r.kappa) : std::string("undefined")) + "\n";
    if (!r.empty_classes.empty()) {
        out += "warning: classes without test samples excluded from AA:";
        for (size_t id : r.empty_classes) out += " " + std::to_string(id);
        out += "\n";
    }
    if (r.runs > 1) {
        out += "runs   " + std::to_string(r.runs) + " (seeds";
        for (uint64_t s : r.seeds) out += " " + std::to_string(s);
        out += ")\n";
    }
    return out;
}

} // namespace hsidiff
