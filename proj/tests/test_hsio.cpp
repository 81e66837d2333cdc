#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "hsidiff/hsio.hpp"

using namespace hsidiff;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    auto dir = fs::temp_directory_path() / "hsio_test";
    fs::create_directories(dir);
    return dir;
}

HsiCube make_cube(size_t h, size_t w, size_t bands) {
    HsiCube c;
    c.height = h;
    c.width = w;
    c.bands = bands;
    c.data = Tensor<float>({h, w, bands});
    return c;
}

// Indian Pines class sizes; 10% stratified sampling must reproduce the
// published 1024/9225 split totals.
const std::vector<size_t> kIndianPinesClassTotals = {46,  1428, 830,  237, 483, 730,  28,  478,
                                                     20,  972,  2455, 593, 205, 1265, 386, 93};

LabelRaster indian_pines_like_raster() {
    LabelRaster lr;
    lr.height = 145;
    lr.width = 145;
    lr.num_classes = 16;
    lr.labels = Tensor<uint16_t>({145, 145});
    size_t pos = 0;
    for (size_t j = 0; j < kIndianPinesClassTotals.size(); ++j)
        for (size_t i = 0; i < kIndianPinesClassTotals[j]; ++i)
            lr.labels.v[pos++] = static_cast<uint16_t>(j + 1);
    return lr;
}

} // namespace

TEST_CASE("cube save load round trip") {
    auto dir = temp_dir();
    auto cube = make_cube(4, 5, 3);
    auto rng = make_rng(1, 0);
    std::normal_distribution<float> nd;
    for (auto& x : cube.data.v) x = nd(rng);
    save_cube(dir / "rt.hdr", cube);
    auto back = load_cube(dir / "rt.hdr");
    CHECK(back.height == 4);
    CHECK(back.width == 5);
    CHECK(back.bands == 3);
    for (size_t i = 0; i < cube.data.size(); ++i) CHECK(back.data.v[i] == cube.data.v[i]);
}

TEST_CASE("zero cube loads as zeros") {
    auto dir = temp_dir();
    auto cube = make_cube(4, 4, 3);
    save_cube(dir / "zero.hdr", cube);
    auto back = load_cube(dir / "zero.hdr");
    CHECK(back.bands == 3);
    for (float v : back.data.v) CHECK(v == 0.0f);
}

TEST_CASE("payload size mismatch is rejected") {
    auto dir = temp_dir();
    auto cube = make_cube(2, 5, 1);
    save_cube(dir / "bad.hdr", cube);
    // truncate the payload to 9 pixels
    std::vector<float> nine(9, 0.0f);
    write_blob(dir / "bad.raw", nine.data(), nine.size());
    CHECK_THROWS_AS(load_cube(dir / "bad.hdr"), IoError);
}

TEST_CASE("NaN payload is rejected") {
    auto dir = temp_dir();
    auto cube = make_cube(2, 2, 2);
    cube.data.v[3] = std::numeric_limits<float>::quiet_NaN();
    save_cube(dir / "nan.hdr", cube);
    CHECK_THROWS_AS(load_cube(dir / "nan.hdr"), NumericError);
}

TEST_CASE("malformed headers are rejected") {
    auto dir = temp_dir();
    write_text_atomic(dir / "wrong.hdr", "some other format\nwidth=2\n");
    CHECK_THROWS_AS(load_cube(dir / "wrong.hdr"), IoError);
    write_text_atomic(dir / "missing.hdr", std::string(kCubeMagic) + "\nwidth=2\nheight=2\n");
    CHECK_THROWS_AS(load_cube(dir / "missing.hdr"), IoError);
}

TEST_CASE("label raster round trip and range check") {
    auto dir = temp_dir();
    LabelRaster lr;
    lr.height = 3;
    lr.width = 3;
    lr.num_classes = 2;
    lr.labels = Tensor<uint16_t>({3, 3});
    lr.labels.v = {0, 1, 2, 0, 0, 1, 2, 2, 0};
    save_labels(dir / "lab.hdr", lr);
    auto back = load_labels(dir / "lab.hdr");
    CHECK(back.num_classes == 2);
    CHECK(back.labels.v == lr.labels.v);

    lr.labels.v[0] = 7; // out of declared range
    save_labels(dir / "lab2.hdr", lr);
    CHECK_THROWS_AS(load_labels(dir / "lab2.hdr"), IoError);
}

TEST_CASE("default pca dimension rule") {
    CHECK(default_pca_dims(200) == 25);
    CHECK(default_pca_dims(16) == 2);
    CHECK(default_pca_dims(3) == 1);
    CHECK(default_pca_dims(1) == 1);
}

TEST_CASE("pca on rank-2 data reconstructs within 1e-6") {
    size_t h = 20, w = 20, n = 5;
    auto cube = make_cube(h, w, n);
    auto rng = make_rng(42, 0);
    std::normal_distribution<double> nd;
    // two fixed directions in band space
    double u[5] = {1, 2, -1, 0.5, 3}, v[5] = {-2, 1, 0.5, 1, -1};
    for (size_t i = 0; i < h * w; ++i) {
        double a = nd(rng), b = nd(rng);
        for (size_t k = 0; k < n; ++k)
            cube.data.v[i * n + k] = static_cast<float>(a * u[k] + b * v[k] + 0.3);
    }
    auto model = fit_pca(cube, 2);
    CHECK(!model.degenerate);
    CHECK(model.explained_variance[0] >= model.explained_variance[1]);

    // orthonormal rows
    for (size_t a = 0; a < 2; ++a)
        for (size_t b = 0; b < 2; ++b) {
            double dot = 0;
            for (size_t k = 0; k < n; ++k) dot += model.components.at(a, k) * model.components.at(b, k);
            CHECK(std::abs(dot - (a == b ? 1.0 : 0.0)) < 1e-5);
        }

    auto proj = apply_pca(cube, model);
    REQUIRE(proj.bands == 2);
    // back-project and compare
    double num = 0, den = 0;
    for (size_t i = 0; i < h * w; ++i)
        for (size_t k = 0; k < n; ++k) {
            double rec = model.mean[k];
            for (size_t d = 0; d < 2; ++d)
                rec += static_cast<double>(proj.data.v[i * 2 + d]) * model.components.at(d, k);
            double diff = rec - static_cast<double>(cube.data.v[i * n + k]);
            num += diff * diff;
            den += static_cast<double>(cube.data.v[i * n + k]) * cube.data.v[i * n + k];
        }
    CHECK(num / den < 1e-6);

    // third component of a rank-2 cloud carries ~zero variance
    auto model3 = fit_pca(cube, 3);
    CHECK(model3.explained_variance[2] < 1e-6 * model3.explained_variance[0]);
    CHECK(model3.degenerate);
}

TEST_CASE("pca identity and centering cases") {
    auto cube = make_cube(4, 4, 3);
    auto rng = make_rng(5, 0);
    std::normal_distribution<float> nd;
    for (auto& x : cube.data.v) x = nd(rng);

    PcaModel ident;
    ident.input_bands = 3;
    ident.mean = {0, 0, 0};
    ident.components = Tensor<double>({3, 3});
    for (size_t i = 0; i < 3; ++i) ident.components.at(i, i) = 1.0;
    auto out = apply_pca(cube, ident);
    for (size_t i = 0; i < cube.data.size(); ++i)
        CHECK(out.data.v[i] == doctest::Approx(cube.data.v[i]).epsilon(1e-6));

    // projecting the mean spectrum yields zeros
    auto model = fit_pca(cube, 2);
    auto mean_cube = make_cube(1, 1, 3);
    for (size_t k = 0; k < 3; ++k) mean_cube.data.v[k] = static_cast<float>(model.mean[k]);
    auto z = apply_pca(mean_cube, model);
    for (float vv : z.data.v) CHECK(std::abs(vv) < 1e-5);

    // band-count mismatch
    auto wrong = make_cube(2, 2, 4);
    CHECK_THROWS_AS(apply_pca(wrong, model), ConfigError);
}

TEST_CASE("pca flags constant cube as degenerate") {
    auto cube = make_cube(3, 3, 4);
    for (size_t i = 0; i < 9; ++i)
        for (size_t k = 0; k < 4; ++k) cube.data.v[i * 4 + k] = static_cast<float>(k);
    auto model = fit_pca(cube, 2);
    CHECK(model.degenerate);
    for (double ev : model.explained_variance) CHECK(ev < 1e-10);
}

TEST_CASE("normalize midpoint and constant band") {
    auto cube = make_cube(2, 5, 2);
    // band 0: five 0s then five 10s; band 1: constant 3
    for (size_t i = 0; i < 10; ++i) {
        cube.data.v[i * 2 + 0] = i < 5 ? 0.0f : 10.0f;
        cube.data.v[i * 2 + 1] = 3.0f;
    }
    cube.data.v[0 * 2 + 0] = 0.0f;
    std::vector<std::string> warnings;
    auto out = normalize(cube, &warnings);
    // p1=0, p99=10 for band 0; a value of 5 maps to the midpoint 0
    HsiCube probe = cube;
    probe.data.v[4 * 2 + 0] = 5.0f;
    auto out2 = normalize(probe);
    CHECK(out2.data.v[4 * 2 + 0] == doctest::Approx(0.0).epsilon(1e-6));
    // constant band maps to zero and warns
    for (size_t i = 0; i < 10; ++i) CHECK(out.data.v[i * 2 + 1] == 0.0f);
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find("band 1") != std::string::npos);
}

TEST_CASE("normalize uniform band stays within the clamped range") {
    auto cube = make_cube(30, 30, 1);
    auto rng = make_rng(77, 0);
    std::uniform_real_distribution<float> ud(0.0f, 1.0f);
    for (auto& x : cube.data.v) x = ud(rng);
    auto out = normalize(cube);
    float mn = 1e9f, mx = -1e9f;
    for (float v : out.data.v) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    CHECK(mn >= -1.1f);
    CHECK(mx <= 1.1f);
    CHECK(mn < -0.9f); // the range is actually used
    CHECK(mx > 0.9f);
}

TEST_CASE("mirror index reflects symmetrically") {
    // n=4: [-2,-1,0,1,2,3,4,5] -> [1,0,0,1,2,3,3,2]
    std::vector<size_t> want = {1, 0, 0, 1, 2, 3, 3, 2};
    for (long i = -2; i < 6; ++i) CHECK(mirror_index(i, 4) == want[static_cast<size_t>(i + 2)]);
}

TEST_CASE("exact-fit patch equals the cube") {
    auto cube = make_cube(2, 2, 1);
    cube.data.v = {1, 2, 3, 4};
    LabelRaster lr;
    lr.height = 2;
    lr.width = 2;
    lr.num_classes = 1;
    lr.labels = Tensor<uint16_t>({2, 2});
    lr.labels.v = {0, 0, 0, 1}; // labeled pixel at (1,1)
    auto set = extract_patches(cube, &lr, 2, PatchMode::labeled_centers);
    REQUIRE(set.size() == 1);
    auto p = set.get(0);
    CHECK(p.center_row == 1);
    CHECK(p.center_col == 1);
    // center convention: patch(1,1) is the labeled pixel
    CHECK(p.data.at(1, 1, 0) == 4.0f);
    REQUIRE(p.label.has_value());
    CHECK(*p.label == 1);
}

TEST_CASE("corner pixel is centered via mirror padding") {
    size_t hsz = 8;
    auto cube = make_cube(12, 12, 2);
    auto rng = make_rng(3, 0);
    std::normal_distribution<float> nd;
    for (auto& x : cube.data.v) x = nd(rng);
    LabelRaster lr;
    lr.height = 12;
    lr.width = 12;
    lr.num_classes = 1;
    lr.labels = Tensor<uint16_t>({12, 12});
    lr.labels.v[0] = 1; // (0,0)
    auto set = extract_patches(cube, &lr, hsz, PatchMode::labeled_centers);
    REQUIRE(set.size() == 1);
    auto p = set.get(0);
    for (size_t b = 0; b < 2; ++b)
        CHECK(p.data.at(hsz / 2, hsz / 2, b) == cube.at(0, 0, b));
}

TEST_CASE("every labeled patch centers on its pixel spectrum") {
    auto cube = make_cube(9, 7, 3);
    auto rng = make_rng(4, 0);
    std::normal_distribution<float> nd;
    for (auto& x : cube.data.v) x = nd(rng);
    LabelRaster lr;
    lr.height = 9;
    lr.width = 7;
    lr.num_classes = 3;
    lr.labels = Tensor<uint16_t>({9, 7});
    std::uniform_int_distribution<int> ld(0, 3);
    for (auto& v : lr.labels.v) v = static_cast<uint16_t>(ld(rng));
    auto set = extract_patches(cube, &lr, 4, PatchMode::labeled_centers);
    size_t labeled = 0;
    for (uint16_t v : lr.labels.v)
        if (v) ++labeled;
    REQUIRE(set.size() == labeled);
    for (size_t i = 0; i < set.size(); ++i) {
        auto p = set.get(i);
        for (size_t b = 0; b < 3; ++b)
            CHECK(p.data.at(2, 2, b) == cube.at(p.center_row, p.center_col, b));
    }
}

TEST_CASE("random crops stay in bounds") {
    auto cube = make_cube(30, 30, 2);
    auto rng = make_rng(6, 0);
    auto set = extract_patches(cube, nullptr, 8, PatchMode::random_crops, 1000, &rng);
    REQUIRE(set.size() == 1000);
    size_t limit_r = set.padded->height - 8, limit_c = set.padded->width - 8;
    for (const auto& ref : set.refs) {
        CHECK(ref.row <= limit_r);
        CHECK(ref.col <= limit_c);
    }
    // patches materialize without touching out-of-range memory
    auto p = set.get(999);
    CHECK(p.data.all_finite());
}

TEST_CASE("odd patch size is rejected") {
    auto cube = make_cube(8, 8, 1);
    auto rng = make_rng(1, 0);
    CHECK_THROWS_AS(extract_patches(cube, nullptr, 5, PatchMode::random_crops, 1, &rng),
                    ConfigError);
}

TEST_CASE("stratified split reproduces published benchmark totals") {
    auto lr = indian_pines_like_raster();
    auto counts = class_counts(lr);
    size_t total_labeled = 0;
    for (size_t j = 1; j <= 16; ++j) {
        CHECK(counts[j] == kIndianPinesClassTotals[j - 1]);
        total_labeled += counts[j];
    }
    CHECK(total_labeled == 10249);

    auto split = split_train_test(lr, 0.10, 123);
    CHECK(split.train_ids.size() == 1024);
    CHECK(split.test_ids.size() == 9225);

    // per-class counts match the published table
    std::vector<size_t> want_train = {5, 143, 83, 24, 48, 73, 3, 48, 2, 97, 245, 59, 20, 126, 39, 9};
    std::vector<size_t> got_train(17, 0);
    for (size_t id : split.train_ids) got_train[lr.labels.v[id]]++;
    for (size_t j = 1; j <= 16; ++j) CHECK(got_train[j] == want_train[j - 1]);
}

TEST_CASE("split is disjoint, exhaustive, and seed-deterministic") {
    auto lr = indian_pines_like_raster();
    auto a = split_train_test(lr, 0.10, 9);
    auto b = split_train_test(lr, 0.10, 9);
    CHECK(a.train_ids == b.train_ids);
    CHECK(a.test_ids == b.test_ids);
    auto c = split_train_test(lr, 0.10, 10);
    CHECK(a.train_ids != c.train_ids);

    std::vector<size_t> all = a.train_ids;
    all.insert(all.end(), a.test_ids.begin(), a.test_ids.end());
    std::sort(all.begin(), all.end());
    CHECK(std::adjacent_find(all.begin(), all.end()) == all.end()); // disjoint
    size_t labeled = 0;
    for (uint16_t v : lr.labels.v)
        if (v) ++labeled;
    CHECK(all.size() == labeled); // exhaustive
}

TEST_CASE("split minimum one and exact half") {
    LabelRaster lr;
    lr.height = 1;
    lr.width = 12;
    lr.num_classes = 2;
    lr.labels = Tensor<uint16_t>({1, 12});
    // class 1 has 2 samples, class 2 has 10
    lr.labels.v = {1, 1, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2};
    auto s = split_train_test(lr, 0.10, 0);
    std::vector<size_t> got(3, 0);
    for (size_t id : s.train_ids) got[lr.labels.v[id]]++;
    CHECK(got[1] == 1); // minimum-1 on the 2-sample class
    CHECK(got[2] == 1);

    auto half = split_train_test(lr, 0.5, 0);
    std::vector<size_t> gh(3, 0);
    for (size_t id : half.train_ids) gh[lr.labels.v[id]]++;
    CHECK(gh[1] == 1);
    CHECK(gh[2] == 5);
}

TEST_CASE("split rejects empty classes and bad fractions") {
    LabelRaster lr;
    lr.height = 1;
    lr.width = 4;
    lr.num_classes = 3;
    lr.labels = Tensor<uint16_t>({1, 4});
    lr.labels.v = {1, 1, 2, 2}; // class 3 empty
    CHECK_THROWS_AS(split_train_test(lr, 0.1, 0), ConfigError);
    lr.num_classes = 2;
    CHECK_THROWS_AS(split_train_test(lr, 0.0, 0), ConfigError);
    CHECK_THROWS_AS(split_train_test(lr, 1.0, 0), ConfigError);
}
