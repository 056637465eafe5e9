#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "valid/evaluation.hpp"

using namespace valid;
using namespace valid::evaluation;
namespace fs = std::filesystem;

namespace {
Image const_image(int res, double v) {
    Image img(res, res);
    std::fill(img.values.begin(), img.values.end(), v);
    return img;
}

Image random_image(int res, uint64_t seed) {
    Rng rng(seed);
    Image img(res, res);
    for (double& v : img.values) v = rng.uniform();
    return img;
}
}  // namespace

TEST_CASE("psnr identities and arithmetic") {
    Image a = random_image(16, 1);
    CHECK(psnr(a, a) == 100.0);

    Image zeros = const_image(16, 0.0);
    Image ones = const_image(16, 1.0);
    CHECK(psnr(zeros, ones) == doctest::Approx(0.0));

    Image b = const_image(16, 0.0);
    Image c = const_image(16, 0.1);  // MSE 0.01
    CHECK(psnr(b, c) == doctest::Approx(20.0));

    CHECK(psnr(a, c) == doctest::Approx(psnr(c, a)));

    Image perturbed = a;
    perturbed.values[40] = std::min(1.0, perturbed.values[40] + 0.3);
    CHECK(psnr(a, perturbed) < psnr(a, a));

    Image small = const_image(8, 0.0);
    CHECK_THROWS(psnr(a, small));
}

TEST_CASE("ssim identities, symmetry, bounds and the constant-image oracle") {
    Image a = random_image(16, 2);
    CHECK(ssim(a, a) == doctest::Approx(1.0));

    Image b = random_image(16, 3);
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)));

    for (uint64_t s = 10; s < 15; ++s) {
        double v = ssim(random_image(16, s), random_image(16, s + 100));
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
        CHECK(v < 1.0);  // different images never reach 1
    }

    // constant images: contrast and structure terms collapse to 1, leaving the
    // luminance ratio
    double mua = 0.2, mub = 0.7, c1 = 0.01 * 0.01;
    Image ca = const_image(16, mua), cb = const_image(16, mub);
    double expected = (2 * mua * mub + c1) / (mua * mua + mub * mub + c1);
    CHECK(ssim(ca, cb) == doctest::Approx(expected).epsilon(1e-12));

    Image tiny = const_image(8, 0.5);
    CHECK_THROWS(ssim(tiny, tiny));
}

TEST_CASE("sweep produces one cell per (scene, target, view-count) and is reproducible") {
    fs::path dir = fs::temp_directory_path() / "valid_eval_sweep";
    fs::remove_all(dir);
    scenes::DatasetParams dp;
    dp.n_scenes = 4;  // 3 train / 1 test
    dp.views_per_scene = 3;
    dp.resolution = 16;
    dp.seed = 9;
    scenes::SceneManifest manifest = scenes::generate_dataset(dp, dir.string());

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
    cfg.unet_channels = {8};
    cfg.unet_groups = 4;
    cfg.unet_heads = 2;
    cfg.time_sin_dim = 8;
    cfg.time_dim = 16;
    cfg.t_steps = 6;
    cfg.beta_end = 0.2;
    training::ModelBundle bundle = training::init_bundle(cfg, 11);

    SweepParams sp;
    sp.view_counts = {1, 2};
    sp.n_targets = 2;
    sp.sampler_steps = 2;
    sp.seed = 5;
    MetricsReport r = evaluate_sweep(bundle, manifest, sp);
    CHECK(r.cells.size() == 1 * 2 * 2);
    REQUIRE(r.summary.size() == 2);
    for (const auto& s : r.summary) CHECK(s.count == 2);

    MetricsReport r2 = evaluate_sweep(bundle, manifest, sp);
    REQUIRE(r2.cells.size() == r.cells.size());
    for (size_t i = 0; i < r.cells.size(); ++i) {
        CHECK(r.cells[i].psnr == r2.cells[i].psnr);
        CHECK(r.cells[i].ssim == r2.cells[i].ssim);
    }

    SweepParams bad = sp;
    bad.view_counts = {5};
    CHECK_THROWS(evaluate_sweep(bundle, manifest, bad));

    std::string csv_path = (dir / "report.csv").string();
    write_report_csv(r, csv_path);
    CHECK(fs::exists(csv_path));
    std::string table = format_report_table(r);
    CHECK(table.find("View num") != std::string::npos);
    CHECK(table.find("PSNR") != std::string::npos);
}
