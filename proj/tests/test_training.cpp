#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "valid/training.hpp"

using namespace valid;
using namespace valid::training;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("valid_train_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

ModelConfig tiny_model() {
    ModelConfig cfg;
    cfg.resolution = 16;
    cfg.patch_size = 8;
    cfg.d_model = 16;
    cfg.vit_layers = 1;
    cfg.vit_heads = 2;
    cfg.d_pose = 8;
    cfg.pose_hidden = 16;
    cfg.d_seed = 16;
    cfg.cf_layers = 2;
    cfg.cf_heads = 2;
    cfg.unet_channels = {16, 32};
    cfg.unet_groups = 8;
    cfg.unet_heads = 4;
    cfg.time_sin_dim = 16;
    cfg.time_dim = 32;
    cfg.t_steps = 100;
    cfg.beta_end = 0.1;
    return cfg;
}

std::string make_dataset(const fs::path& dir, int n_scenes = 6, int views = 4, int res = 16,
                         uint64_t seed = 3) {
    scenes::DatasetParams params;
    params.n_scenes = n_scenes;
    params.views_per_scene = views;
    params.resolution = res;
    params.seed = seed;
    scenes::generate_dataset(params, dir.string());
    return (dir / "manifest.json").string();
}

TrainItem make_item(const ModelConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    TrainItem item;
    Image src(cfg.resolution, cfg.resolution), tgt(cfg.resolution, cfg.resolution);
    for (double& v : src.values) v = rng.uniform();
    for (double& v : tgt.values) v = rng.uniform();
    geometry::CameraPose a(1.0, 0.5, 1.5), b(1.1, 2.0, 1.5);
    item.views.push_back({src, geometry::relative_pose(a, b)});
    item.target = tgt;
    item.t = 1 + rng.uniform_int(cfg.t_steps);
    item.eps = Tensor::randn({3, cfg.resolution, cfg.resolution}, rng);
    item.ratio = 1.0;
    item.token_seed = rng.next_u64();
    return item;
}

bool tensors_equal(const Tensor& a, const Tensor& b) { return a.shape == b.shape && a.data == b.data; }

}  // namespace

TEST_CASE("trainable masks follow the two-stage protocol") {
    ModelBundle bundle = init_bundle(tiny_model(), 1);

    auto stage2 = trainable_mask(bundle, 2, false);
    CHECK(!stage2.empty());
    for (const std::string& n : stage2) {
        bool ok = n.rfind("seeds.", 0) == 0 || n.rfind("crossformer.", 0) == 0;
        CHECK(ok);
    }

    auto stage1 = trainable_mask(bundle, 1, false);
    CHECK(stage1.size() == bundle.params.tensors.size());
    for (const std::string& n : stage2) CHECK(stage1.count(n) == 1);  // stage1 ∩ stage2 == stage2

    auto stage1_attn = trainable_mask(bundle, 1, true);
    for (const std::string& n : stage1_attn) {
        bool ok = n.rfind("vit.", 0) == 0 || n.rfind("pose_mlp.", 0) == 0 ||
                  n.rfind("seeds.", 0) == 0 || n.rfind("crossformer.", 0) == 0 ||
                  (n.rfind("unet.", 0) == 0 && n.find(".attn.") != std::string::npos);
        CHECK(ok);
    }
    CHECK(stage1_attn.count("unet.conv_in.weight") == 0);
    CHECK(stage1_attn.count("unet.level0.attn.q.weight") == 1);
    for (const std::string& n : stage2) CHECK(stage1_attn.count(n) == 1);

    CHECK_THROWS(trainable_mask(bundle, 3, false));
}

TEST_CASE("bundle init is deterministic and names are unique") {
    ModelBundle a = init_bundle(tiny_model(), 9);
    ModelBundle b = init_bundle(tiny_model(), 9);
    REQUIRE(a.params.tensors.size() == b.params.tensors.size());
    for (const auto& [name, t] : a.params.tensors) CHECK(tensors_equal(t, b.params.get(name)));
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    fs::path dir = temp_dir("ckpt");
    ModelBundle bundle = init_bundle(tiny_model(), 2);
    Checkpoint ckpt;
    ckpt.stage = 1;
    ckpt.global_step = 123;
    Rng rng(5);
    ckpt.rng_state = rng.state();
    ckpt.model = bundle.config;
    ckpt.params = bundle.params;
    ckpt.opt.t = 17;
    ckpt.opt.m.emplace("seeds.tokens", Tensor::randn({64, 16}, rng));
    ckpt.opt.v.emplace("seeds.tokens", Tensor::randn({64, 16}, rng));

    std::string path = (dir / "x.ckpt").string();
    save_checkpoint(ckpt, path);
    Checkpoint back = load_checkpoint(path);
    CHECK(back.stage == 1);
    CHECK(back.global_step == 123);
    CHECK(back.rng_state == ckpt.rng_state);
    CHECK(back.opt.t == 17);
    REQUIRE(back.params.tensors.size() == ckpt.params.tensors.size());
    for (const auto& [name, t] : ckpt.params.tensors) CHECK(tensors_equal(t, back.params.get(name)));
    CHECK(tensors_equal(back.opt.m.at("seeds.tokens"), ckpt.opt.m.at("seeds.tokens")));
    CHECK(tensors_equal(back.opt.v.at("seeds.tokens"), ckpt.opt.v.at("seeds.tokens")));

    CHECK_THROWS(load_checkpoint((dir / "missing.ckpt").string()));
}

TEST_CASE("an untrained model scores unit loss against unit noise") {
    ModelConfig cfg = tiny_model();
    ModelBundle bundle = init_bundle(cfg, 3);
    AdamState opt;
    TrainConfig tc;
    tc.model = cfg;
    auto mask = trainable_mask(bundle, 1, false);
    auto sched = diffusion::make_schedule(cfg.t_steps, cfg.beta_start, cfg.beta_end);
    std::vector<TrainItem> batch = {make_item(cfg, 100), make_item(cfg, 101)};
    double loss = train_step(bundle, opt, batch, tc, mask, sched, 1);
    CHECK(std::abs(loss - 1.0) < 0.1);
}

TEST_CASE("train steps are deterministic and thread-count invariant") {
    ModelConfig cfg = tiny_model();
    auto sched = diffusion::make_schedule(cfg.t_steps, cfg.beta_start, cfg.beta_end);
    TrainConfig tc;
    tc.model = cfg;
    std::vector<TrainItem> batch = {make_item(cfg, 200), make_item(cfg, 201), make_item(cfg, 202)};

    ModelBundle b1 = init_bundle(cfg, 4);
    ModelBundle b2 = init_bundle(cfg, 4);
    AdamState o1, o2;
    auto mask = trainable_mask(b1, 1, false);
    double l1 = train_step(b1, o1, batch, tc, mask, sched, 1);
    double l2 = train_step(b2, o2, batch, tc, mask, sched, 2);
    CHECK(l1 == l2);
    for (const auto& [name, t] : b1.params.tensors) CHECK(tensors_equal(t, b2.params.get(name)));
}

TEST_CASE("stage 2 leaves frozen parameters bit-identical") {
    fs::path data = temp_dir("s2_data");
    fs::path out = temp_dir("s2_out");
    std::string manifest = make_dataset(data);

    TrainConfig s1;
    s1.stage = 1;
    s1.model = tiny_model();
    s1.dataset_path = manifest;
    s1.out_dir = (out / "s1").string();
    s1.total_steps = 8;
    s1.batch_size = 2;
    s1.seed = 7;
    s1.checkpoint_every = 0;
    StageResult r1 = run_stage(s1);

    TrainConfig s2 = s1;
    s2.stage = 2;
    s2.init_checkpoint = r1.checkpoint_path;
    s2.out_dir = (out / "s2").string();
    s2.total_steps = 12;
    s2.max_views = 3;
    StageResult r2 = run_stage(s2);

    Checkpoint before = load_checkpoint(r1.checkpoint_path);
    Checkpoint after = load_checkpoint(r2.checkpoint_path);
    ModelBundle probe{after.model, {}};
    probe.params = after.params;
    auto mask = trainable_mask(probe, 2, false);
    bool some_changed = false;
    for (const auto& [name, t] : after.params.tensors) {
        if (mask.count(name)) {
            if (!tensors_equal(t, before.params.get(name))) some_changed = true;
        } else {
            CHECK(tensors_equal(t, before.params.get(name)));
        }
    }
    CHECK(some_changed);
}

TEST_CASE("stage 2 demands a checkpoint and run_stage validates stages") {
    TrainConfig cfg;
    cfg.stage = 2;
    cfg.dataset_path = "unused.json";
    CHECK_THROWS(run_stage(cfg));
    cfg.stage = 5;
    CHECK_THROWS(run_stage(cfg));
}

TEST_CASE("interrupted runs resume to the same trajectory") {
    fs::path data = temp_dir("resume_data");
    fs::path out = temp_dir("resume_out");
    std::string manifest = make_dataset(data);

    TrainConfig base;
    base.stage = 1;
    base.model = tiny_model();
    base.dataset_path = manifest;
    base.batch_size = 2;
    base.seed = 21;
    base.checkpoint_every = 0;

    TrainConfig full = base;
    full.out_dir = (out / "full").string();
    full.total_steps = 10;
    StageResult rf = run_stage(full);

    TrainConfig head = base;
    head.out_dir = (out / "head").string();
    head.total_steps = 5;
    StageResult rh = run_stage(head);

    TrainConfig tail = base;
    tail.out_dir = (out / "tail").string();
    tail.total_steps = 10;
    tail.resume_checkpoint = rh.checkpoint_path;
    StageResult rt = run_stage(tail);

    Checkpoint a = load_checkpoint(rf.checkpoint_path);
    Checkpoint b = load_checkpoint(rt.checkpoint_path);
    for (const auto& [name, t] : a.params.tensors) CHECK(tensors_equal(t, b.params.get(name)));
}

TEST_CASE("two thousand steps halve the moving-average loss") {
    fs::path data = temp_dir("decrease_data");
    fs::path out = temp_dir("decrease_out");
    std::string manifest = make_dataset(data, 8, 4, 16, 12);

    TrainConfig cfg;
    cfg.stage = 1;
    cfg.model = tiny_model();
    cfg.dataset_path = manifest;
    cfg.out_dir = out.string();
    cfg.total_steps = 2000;
    cfg.batch_size = 2;
    cfg.seed = 13;
    cfg.lr = 4e-4;
    cfg.checkpoint_every = 0;
    StageResult r = run_stage(cfg);
    CHECK(r.final_loss_ma < 0.5 * r.initial_loss_ma);
}
