#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hsidiff/diffusion.hpp"
#include "hsidiff/unet.hpp"

using namespace hsidiff;

namespace {

UNetConfig toy_config() {
    UNetConfig c;
    c.in_channels = 4;
    c.base_channels = 16;
    c.stage_multipliers = {1, 2};
    c.res_blocks = 1;
    c.time_embed_dim = 16;
    c.groups_per_norm = 8;
    c.patch_size = 16;
    return c;
}

UNetConfig mini_config() {
    UNetConfig c;
    c.in_channels = 2;
    c.base_channels = 2;
    c.stage_multipliers = {1, 2};
    c.res_blocks = 1;
    c.time_embed_dim = 4;
    c.groups_per_norm = 2;
    c.patch_size = 8;
    return c;
}

} // namespace

TEST_CASE("tap channel sums follow the stage multipliers") {
    auto c = toy_config();
    CHECK(c.tap_channels() == 48); // 16*2 + 16*1
    UNetConfig c3 = c;
    c3.stage_multipliers = {1, 2, 4};
    CHECK(c3.tap_channels() == 112); // 64 + 32 + 16
    c3.include_middle_tap = true;
    CHECK(c3.tap_channels() == 112 + 64);
}

TEST_CASE("config validation rejects incompatible patch sizes") {
    auto c = toy_config();
    c.stage_multipliers = {1, 2, 4};
    c.patch_size = 18; // not divisible by 4
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.patch_size = 48;
    CHECK_NOTHROW(c.validate());
    c.time_embed_dim = 7;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("same seed builds identical parameters") {
    auto c = toy_config();
    auto a = UNet<float>::build(c, 5);
    auto b = UNet<float>::build(c, 5);
    auto d = UNet<float>::build(c, 6);
    REQUIRE(a.params().size() == b.params().size());
    bool all_equal = true, any_diff_seed = false;
    for (size_t i = 0; i < a.params().size(); ++i) {
        const auto& [an, av] = a.params()[i];
        const auto& [bn, bv] = b.params()[i];
        CHECK(an == bn);
        if (av.val().v != bv.val().v) all_equal = false;
        if (av.val().v != d.params()[i].second.val().v) any_diff_seed = true;
    }
    CHECK(all_equal);
    CHECK(any_diff_seed);
    CHECK(a.param_count() > 0);
}

TEST_CASE("zero input with zero-initialized heads yields zero noise prediction") {
    auto c = toy_config();
    auto net = UNet<float>::build(c, 7);
    auto x = Var<float>::constant(Tensor<float>::zeros({2, 4, 16, 16}));
    auto out = net.forward(x, {3, 14});
    for (float v : out.eps.val().v) CHECK(v == 0.0f);
    for (float v : out.logvar_frac.val().v) CHECK(v == 0.0f);
}

TEST_CASE("forward is pure and shape-stable") {
    auto c = toy_config();
    auto net = UNet<float>::build(c, 8);
    auto rng = make_rng(9, 0);
    auto x = Var<float>::constant(Tensor<float>::randn({3, 4, 16, 16}, rng));
    auto out1 = net.forward(x, {1, 50, 99});
    auto out2 = net.forward(x, {1, 50, 99});
    CHECK(out1.eps.val().shape == std::vector<size_t>({3, 4, 16, 16}));
    CHECK(out1.logvar_frac.val().shape == std::vector<size_t>({3, 4, 16, 16}));
    CHECK(out1.eps.val().v == out2.eps.val().v);
    CHECK(out1.logvar_frac.val().v == out2.logvar_frac.val().v);
}

TEST_CASE("decoder taps: count, order, shapes, channel sum") {
    auto c = toy_config();
    c.stage_multipliers = {1, 2, 4};
    c.patch_size = 16;
    auto net = UNet<float>::build(c, 10);
    auto rng = make_rng(11, 0);
    auto x = Var<float>::constant(Tensor<float>::randn({2, 4, 16, 16}, rng));
    auto out = net.forward(x, {7, 7});
    REQUIRE(out.taps.size() == 3);
    // deepest first: 4x4 with 64 channels, then 8x8/32, then 16x16/16
    CHECK(out.taps[0].val().shape == std::vector<size_t>({2, 64, 4, 4}));
    CHECK(out.taps[1].val().shape == std::vector<size_t>({2, 32, 8, 8}));
    CHECK(out.taps[2].val().shape == std::vector<size_t>({2, 16, 16, 16}));
    size_t d = 0;
    for (const auto& tap : out.taps) d += tap.val().shape[1];
    CHECK(d == c.tap_channels());
}

TEST_CASE("middle tap is prepended when enabled") {
    auto c = toy_config();
    c.include_middle_tap = true;
    auto net = UNet<float>::build(c, 12);
    auto rng = make_rng(13, 0);
    auto x = Var<float>::constant(Tensor<float>::randn({1, 4, 16, 16}, rng));
    auto out = net.forward(x, {5});
    REQUIRE(out.taps.size() == 3); // middle + 2 decoder stages
    CHECK(out.taps[0].val().shape == std::vector<size_t>({1, 32, 8, 8}));
}

TEST_CASE("input validation") {
    auto c = toy_config();
    auto net = UNet<float>::build(c, 14);
    auto bad_shape = Var<float>::constant(Tensor<float>::zeros({1, 4, 8, 8}));
    CHECK_THROWS_AS(net.forward(bad_shape, {1}), ConfigError);
    auto x = Var<float>::constant(Tensor<float>::zeros({2, 4, 16, 16}));
    CHECK_THROWS_AS(net.forward(x, {1}), ConfigError); // one t per sample
    Tensor<float> nan_t = Tensor<float>::zeros({1, 4, 16, 16});
    nan_t.v[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(net.forward(Var<float>::constant(nan_t), {1}), NumericError);
}

TEST_CASE("sinusoidal embedding is deterministic and bounded") {
    auto e = sinusoidal_embedding<double>({1, 500, 999}, 16);
    REQUIRE(e.shape == std::vector<size_t>({3, 16}));
    for (double v : e.v) {
        CHECK(v <= 1.0);
        CHECK(v >= -1.0);
    }
    // distinct timesteps embed differently
    double diff = 0;
    for (size_t k = 0; k < 16; ++k) diff = std::max(diff, std::abs(e.at(0, k) - e.at(1, k)));
    CHECK(diff > 0.1);
}

TEST_CASE("miniature model gradients match finite differences") {
    auto c = mini_config();
    auto net = UNet<double>::build(c, 15);
    REQUIRE(net.param_count() <= 5000);
    auto rng = make_rng(16, 0);
    Tensor<double> xt = Tensor<double>::randn({2, 2, 8, 8}, rng, 0.5);
    Tensor<double> tgt = Tensor<double>::randn({2, 2, 8, 8}, rng, 0.5);
    std::vector<size_t> tvec = {3, 7};

    auto f = [&] {
        auto out = net.forward(Var<double>::constant(xt), tvec);
        return mse(out.eps, Var<double>::constant(tgt));
    };
    auto loss = f();
    auto params = net.param_list();
    for (auto& p : params) p.zero_grad();
    backward(loss);

    // spot-check a deterministic subset of parameters per tensor
    double h = 1e-5;
    size_t checked = 0;
    for (auto& p : params) {
        size_t n = p.mutable_val().v.size();
        size_t stride = std::max<size_t>(1, n / 3);
        for (size_t j = 0; j < n; j += stride) {
            double orig = p.mutable_val().v[j];
            p.mutable_val().v[j] = orig + h;
            double fp = f().val().v[0];
            p.mutable_val().v[j] = orig - h;
            double fm = f().val().v[0];
            p.mutable_val().v[j] = orig;
            double fd = (fp - fm) / (2 * h);
            double an = p.grad().v[j];
            CHECK(std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)}) < 1e-4);
            ++checked;
        }
    }
    CHECK(checked >= 100);
}

TEST_CASE("time conditioning changes the prediction after brief training") {
    auto c = mini_config();
    auto net = UNet<float>::build(c, 17);
    auto sched = build_cosine_schedule(50);
    auto rng = make_rng(18, 0);

    // a few optimizer steps push the model away from the zero-init fixpoint
    auto params = net.param_list();
    Adam<float> opt;
    opt.lr = 2e-3f;
    opt.init(params);
    LossOptions lopt;
    for (int step = 0; step < 40; ++step) {
        Tensor<float> x0 = Tensor<float>::randn({4, 2, 8, 8}, rng, 0.5);
        auto loss = training_loss<float>(
            [&](const Var<float>& xt, const std::vector<size_t>& tv) {
                auto o = net.forward(xt, tv);
                return std::make_pair(o.eps, o.logvar_frac);
            },
            x0, sched, rng, lopt);
        opt.zero_grad(params);
        backward(loss.total);
        opt.step(params);
    }

    Tensor<float> probe = Tensor<float>::randn({1, 2, 8, 8}, rng, 0.5);
    auto lo = net.forward(Var<float>::constant(probe), {1});
    auto hi = net.forward(Var<float>::constant(probe), {50});
    float diff = 0;
    for (size_t i = 0; i < lo.eps.val().size(); ++i)
        diff = std::max(diff, std::abs(lo.eps.val().v[i] - hi.eps.val().v[i]));
    CHECK(diff > 1e-6f);
}

TEST_CASE("attention at a configured resolution builds and runs") {
    auto c = toy_config();
    c.attention_resolutions = {8}; // the downsampled level
    auto net = UNet<float>::build(c, 19);
    auto rng = make_rng(20, 0);
    auto x = Var<float>::constant(Tensor<float>::randn({1, 4, 16, 16}, rng));
    auto out = net.forward(x, {9});
    CHECK(out.eps.val().all_finite());
    // attn parameters exist for the configured levels
    CHECK_NOTHROW(net.param("enc1.attn.qkv.w"));
    CHECK_NOTHROW(net.param("dec1.attn.qkv.w"));
    CHECK_THROWS_AS(net.param("enc0.attn.qkv.w"), IoError);
}

TEST_CASE("config json round trip") {
    auto c = toy_config();
    c.attention_resolutions = {8, 4};
    c.include_middle_tap = true;
    nlohmann::json j = c;
    auto back = j.get<UNetConfig>();
    CHECK(back.in_channels == c.in_channels);
    CHECK(back.base_channels == c.base_channels);
    CHECK(back.stage_multipliers == c.stage_multipliers);
    CHECK(back.attention_resolutions == c.attention_resolutions);
    CHECK(back.include_middle_tap == c.include_middle_tap);
    CHECK(back.patch_size == c.patch_size);
}
