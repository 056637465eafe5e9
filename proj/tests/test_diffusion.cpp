#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "valid/diffusion.hpp"
#include "valid/training.hpp"

using namespace valid;
using namespace valid::diffusion;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig cfg;
    cfg.resolution = 16;
    cfg.patch_size = 8;
    cfg.d_model = 8;
    cfg.vit_layers = 1;
    cfg.vit_heads = 2;
    cfg.d_pose = 4;
    cfg.pose_hidden = 8;
    cfg.d_seed = 8;
    cfg.cf_layers = 1;
    cfg.cf_heads = 2;
    cfg.unet_channels = {8, 16};
    cfg.unet_groups = 4;
    cfg.unet_heads = 2;
    cfg.time_sin_dim = 8;
    cfg.time_dim = 16;
    cfg.t_steps = 20;
    cfg.beta_end = 0.2;
    return cfg;
}

}  // namespace

TEST_CASE("ddpm default schedule matches an independent log-product oracle") {
    DiffusionSchedule s = make_schedule(1000, 1e-4, 0.02);
    double log_sum = 0;
    for (int t = 1; t <= 1000; ++t) log_sum += std::log(s.alpha_at(t));
    CHECK(std::abs(std::log(s.alpha_bar_at(1000)) - log_sum) < 1e-9);
    CHECK(s.alpha_bar_at(1000) > 3.5e-5);
    CHECK(s.alpha_bar_at(1000) < 4.5e-5);
}

TEST_CASE("schedule validation and edge cases") {
    DiffusionSchedule one = make_schedule(1, 0.1, 0.3);
    CHECK(one.alpha_bar_at(1) == doctest::Approx(0.9));

    CHECK_THROWS(make_schedule(0, 1e-4, 0.02));
    CHECK_THROWS(make_schedule(10, 0.0, 0.02));
    CHECK_THROWS(make_schedule(10, 1e-4, 1.0));
    CHECK_THROWS(make_schedule(10, 0.3, 0.2));
}

TEST_CASE("alpha_bar is strictly decreasing and positive for random valid schedules") {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        int t_steps = 2 + rng.uniform_int(200);
        double b0 = rng.uniform(1e-5, 0.05);
        double b1 = b0 + rng.uniform(0.0, 0.5);
        DiffusionSchedule s = make_schedule(t_steps, b0, std::min(b1, 0.999));
        for (int t = 1; t <= t_steps; ++t) {
            CHECK(s.alpha_bar_at(t) > 0.0);
            CHECK(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
            if (t > 1) CHECK(s.beta_at(t) >= s.beta_at(t - 1));
        }
    }
}

TEST_CASE("q_sample matches its closed form") {
    DiffusionSchedule s = make_schedule(50, 1e-3, 0.1);
    Rng rng(5);
    Image x0(8, 8);
    for (double& v : x0.values) v = rng.uniform();

    SUBCASE("no noise leaves only the scaled signal") {
        Tensor eps = Tensor::zeros({3, 8, 8});
        NoisyLatent z = q_sample(x0, 13, eps, s);
        Tensor x = image_to_chw(x0);
        double sa = std::sqrt(s.alpha_bar_at(13));
        for (int64_t i = 0; i < z.values.numel(); ++i)
            CHECK(z.values.data[i] == doctest::Approx(sa * (2 * x.data[i] - 1)).epsilon(1e-12));
    }

    SUBCASE("alpha_bar of one reproduces the rescaled input exactly") {
        DiffusionSchedule ident;
        ident.t_steps = 1;
        ident.beta = {0.0};
        ident.alpha = {1.0};
        ident.alpha_bar = {1.0};
        Tensor eps = Tensor::randn({3, 8, 8}, rng);
        NoisyLatent z = q_sample(x0, 1, eps, ident);
        Tensor x = image_to_chw(x0);
        for (int64_t i = 0; i < z.values.numel(); ++i)
            CHECK(z.values.data[i] == doctest::Approx(2 * x.data[i] - 1));
    }

    SUBCASE("precondition failures") {
        Tensor eps = Tensor::zeros({3, 8, 8});
        CHECK_THROWS(q_sample(x0, 0, eps, s));
        CHECK_THROWS(q_sample(x0, 51, eps, s));
        CHECK_THROWS(q_sample(x0, 5, Tensor::zeros({3, 4, 4}), s));
    }
}

TEST_CASE("q_sample forward moments match Monte Carlo estimates") {
    DiffusionSchedule s = make_schedule(100, 1e-3, 0.08);
    int t = 60;
    Image x0(4, 4);  // all zeros; rescaled signal is the constant -1
    Rng rng(777);
    const int draws = 2200;  // about 1e5 scalar samples over 48 pixels
    double sum = 0, sum2 = 0;
    int64_t n = 0;
    for (int d = 0; d < draws; ++d) {
        Tensor eps = Tensor::randn({3, 4, 4}, rng);
        NoisyLatent z = q_sample(x0, t, eps, s);
        for (double v : z.values.data) {
            sum += v;
            sum2 += v * v;
            ++n;
        }
    }
    double mean = sum / n;
    double var = sum2 / n - mean * mean;
    double expected_mean = -std::sqrt(s.alpha_bar_at(t));
    double expected_var = 1.0 - s.alpha_bar_at(t);
    CHECK(std::abs(mean - expected_mean) < 0.02 * std::abs(expected_mean));
    CHECK(std::abs(var - expected_var) < 0.02 * expected_var);
}

TEST_CASE("denoiser keeps the image shape and feels its conditioning") {
    ModelConfig cfg = tiny_cfg();
    training::ModelBundle bundle = training::init_bundle(cfg, 33);
    // the output conv starts at zero; give it weight so conditioning shows up
    Rng rng(34);
    bundle.params.get("unet.out.conv.weight") = Tensor::randn({3, 8, 3, 3}, rng, 0.1);

    Tensor z = Tensor::randn({3, 16, 16}, rng);
    Tensor cond = Tensor::randn({64, cfg.d_seed}, rng);
    Tensor out = denoise_values(z, 7, cond, bundle.params, cfg);
    REQUIRE(out.shape == z.shape);
    for (double v : out.data) CHECK(std::isfinite(v));

    Tensor zero_cond = Tensor::zeros({64, cfg.d_seed});
    Tensor out_zero = denoise_values(z, 7, zero_cond, bundle.params, cfg);
    double diff = 0;
    for (int64_t i = 0; i < out.numel(); ++i) diff += std::abs(out.data[i] - out_zero.data[i]);
    CHECK(diff > 0.0);

    Rng rng2(35);
    Tensor cond2 = Tensor::randn({64, cfg.d_seed}, rng2);
    Tensor out2 = denoise_values(z, 7, cond2, bundle.params, cfg);
    double diff2 = 0;
    for (int64_t i = 0; i < out.numel(); ++i) diff2 += std::abs(out.data[i] - out2.data[i]);
    CHECK(diff2 > 0.0);

    CHECK_THROWS(denoise_values(z, 7, Tensor::zeros({64, cfg.d_seed + 1}), bundle.params, cfg));
}

TEST_CASE("mse loss oracle") {
    Tensor a = Tensor::zeros({3, 4, 4});
    Tensor b = Tensor::full({3, 4, 4}, 1.0);
    CHECK(loss_mse(a, a) == 0.0);
    CHECK(loss_mse(a, b) == doctest::Approx(1.0));

    Rng rng(9);
    Tensor x = Tensor::randn({3, 5, 5}, rng), y = Tensor::randn({3, 5, 5}, rng);
    // independent Kahan-summed reference
    double sum = 0, comp = 0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        double d = x.data[i] - y.data[i];
        double term = d * d - comp;
        double t = sum + term;
        comp = (t - sum) - term;
        sum = t;
    }
    double ref = sum / static_cast<double>(x.numel());
    CHECK(std::abs(loss_mse(x, y) - ref) < 1e-12);
    CHECK_THROWS(loss_mse(x, Tensor::zeros({3, 4, 4})));
}

TEST_CASE("ancestral sampling is deterministic and always lands in [0,1]") {
    ModelConfig cfg = tiny_cfg();
    training::ModelBundle bundle = training::init_bundle(cfg, 55);
    Rng rng(56);
    bundle.params.get("unet.out.conv.weight") = Tensor::randn({3, 8, 3, 3}, rng, 0.05);
    DiffusionSchedule sched = make_schedule(cfg.t_steps, cfg.beta_start, cfg.beta_end);
    Tensor cond = Tensor::randn({64, cfg.d_seed}, rng);

    Image a = p_sample_loop(cond, bundle.params, cfg, sched, 123, cfg.t_steps);
    Image b = p_sample_loop(cond, bundle.params, cfg, sched, 123, cfg.t_steps);
    CHECK(a.values == b.values);
    for (double v : a.values) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK(std::isfinite(v));
    }

    // re-spaced sampling runs and stays deterministic
    Image c = p_sample_loop(cond, bundle.params, cfg, sched, 123, 5);
    Image d = p_sample_loop(cond, bundle.params, cfg, sched, 123, 5);
    CHECK(c.values == d.values);
    CHECK_THROWS(p_sample_loop(cond, bundle.params, cfg, sched, 1, cfg.t_steps + 1));
    CHECK_THROWS(p_sample_loop(cond, bundle.params, cfg, sched, 1, 0));

    std::vector<StepDiag> diag;
    p_sample_loop(cond, bundle.params, cfg, sched, 9, 4, &diag);
    CHECK(diag.size() == 4);
    CHECK(diag.front().t == cfg.t_steps);
}
