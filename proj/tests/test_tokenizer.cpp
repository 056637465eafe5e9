#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "valid/scenes.hpp"
#include "valid/tokenizer.hpp"
#include "valid/training.hpp"

using namespace valid;
using namespace valid::tokenizer;

namespace {

ModelConfig small_cfg() {
    ModelConfig cfg;
    cfg.resolution = 32;
    cfg.patch_size = 8;
    cfg.d_model = 32;
    cfg.vit_layers = 2;
    cfg.vit_heads = 4;
    cfg.d_pose = 8;
    cfg.pose_hidden = 16;
    cfg.unet_channels = {8};
    cfg.unet_groups = 4;
    cfg.unet_heads = 2;
    cfg.d_seed = 8;
    return cfg;
}

Image random_image(int res, uint64_t seed) {
    Rng rng(seed);
    Image img(res, res);
    for (double& v : img.values) v = rng.uniform();
    return img;
}

geometry::RelativePose rel_of(double az_deg) {
    return geometry::relative_pose(
        geometry::CameraPose(1.0, geometry::deg_to_rad(az_deg), 1.5),
        geometry::CameraPose(1.1, 0.0, 1.5));
}

}  // namespace

TEST_CASE("patchify geometry and losslessness") {
    Image img = random_image(32, 1);
    PatchSequence p = patchify(img, 8);
    CHECK(p.n_patches == 16);
    CHECK(p.patch_dim == 192);
    CHECK_THROWS(patchify(img, 5));

    Image back = unpatchify(p, 32, 32, 8);
    CHECK(back.values == img.values);
}

TEST_CASE("encode emits one token per patch and survives zero weights") {
    ModelConfig cfg = small_cfg();
    ParamStore ps;
    Rng rng(2);
    init_vit_params(ps, cfg, rng);

    Image img = random_image(32, 3);
    Tensor tokens = encode_tokens(patchify(img, cfg.patch_size), ps, cfg);
    CHECK(tokens.rows() == cfg.n_patches());
    CHECK(tokens.cols() == cfg.d_model);

    ParamStore zeros;
    for (const auto& [name, t] : ps.tensors) zeros.add(name, Tensor::zeros(t.shape));
    Tensor z = encode_tokens(patchify(img, cfg.patch_size), zeros, cfg);
    for (double v : z.data) {
        CHECK(std::isfinite(v));
    }
}

TEST_CASE("self-attention mixes every patch into every token") {
    ModelConfig cfg = small_cfg();
    ParamStore ps;
    Rng rng(4);
    init_vit_params(ps, cfg, rng);

    Image img = random_image(32, 5);
    PatchSequence a = patchify(img, cfg.patch_size);
    PatchSequence b = a;
    b.values.at(7, 3) += 0.5;  // one patch perturbed

    Tensor ta = encode_tokens(a, ps, cfg);
    Tensor tb = encode_tokens(b, ps, cfg);
    for (int r = 0; r < ta.rows(); ++r) {
        double diff = 0;
        for (int c = 0; c < ta.cols(); ++c) diff += std::abs(ta.at(r, c) - tb.at(r, c));
        CHECK(diff > 0.0);
    }
}

TEST_CASE("pose embedding behavior") {
    ModelConfig cfg = small_cfg();
    ParamStore ps;
    Rng rng(6);
    init_pose_mlp_params(ps, cfg, rng);

    geometry::RelativePose r1 = rel_of(30), r2 = rel_of(210);
    Tensor e1 = pose_embedding(r1, ps, cfg);
    Tensor e2 = pose_embedding(r2, ps, cfg);
    CHECK(e1.cols() == cfg.d_pose);
    double diff = 0;
    for (int64_t i = 0; i < e1.numel(); ++i) diff += std::abs(e1.data[i] - e2.data[i]);
    CHECK(diff > 0.0);

    Tensor e1_again = pose_embedding(r1, ps, cfg);
    CHECK(e1.data == e1_again.data);

    ParamStore zeros;
    for (const auto& [name, t] : ps.tensors) zeros.add(name, Tensor::zeros(t.shape));
    Tensor ez = pose_embedding(r1, zeros, cfg);
    for (double v : ez.data) CHECK(v == 0.0);
}

TEST_CASE("entangle appends the same suffix to every row") {
    Rng rng(7);
    Tensor tokens = Tensor::randn({16, 32}, rng);
    Tensor pose = Tensor::randn({1, 8}, rng);
    Tensor out = entangle_tokens(tokens, pose);
    CHECK(out.rows() == 16);
    CHECK(out.cols() == 40);
    for (int r = 0; r < 16; ++r) {
        for (int c = 0; c < 32; ++c) CHECK(out.at(r, c) == tokens.at(r, c));
        for (int c = 0; c < 8; ++c) CHECK(out.at(r, 32 + c) == pose.data[c]);
    }
}

TEST_CASE("tokenize_views is per-view independent and order preserving") {
    ModelConfig cfg = small_cfg();
    ParamStore ps;
    Rng rng(8);
    init_vit_params(ps, cfg, rng);
    init_pose_mlp_params(ps, cfg, rng);

    ViewInput a{random_image(32, 10), rel_of(0)};
    ViewInput b{random_image(32, 11), rel_of(90)};
    ViewInput c{random_image(32, 12), rel_of(180)};

    auto three = tokenize_views_values({a, b, c}, ps, cfg);
    REQUIRE(three.size() == 3);
    for (const Tensor& t : three) {
        CHECK(t.rows() == cfg.n_patches());
        CHECK(t.cols() == cfg.token_width());
    }

    auto alone = tokenize_views_values({a}, ps, cfg);
    auto pair = tokenize_views_values({a, b}, ps, cfg);
    CHECK(alone[0].data == pair[0].data);

    CHECK_THROWS(tokenize_views_values({}, ps, cfg));
    ViewInput wrong{random_image(16, 13), rel_of(0)};
    CHECK_THROWS(tokenize_views_values({a, wrong}, ps, cfg));
}

TEST_CASE("raw pose concatenation flag uses the 4-vector directly") {
    ModelConfig cfg = small_cfg();
    cfg.pose_raw_concat = true;
    ParamStore ps;
    Rng rng(9);
    init_vit_params(ps, cfg, rng);
    init_pose_mlp_params(ps, cfg, rng);

    geometry::RelativePose rel = rel_of(45);
    auto out = tokenize_views_values({{random_image(32, 14), rel}}, ps, cfg);
    CHECK(out[0].cols() == cfg.d_model + 4);
    CHECK(out[0].at(0, cfg.d_model + 0) == rel.d_polar);
    CHECK(out[0].at(0, cfg.d_model + 1) == rel.sin_d_azimuth);
    CHECK(out[0].at(0, cfg.d_model + 2) == rel.cos_d_azimuth);
    CHECK(out[0].at(0, cfg.d_model + 3) == rel.d_radius);
}
