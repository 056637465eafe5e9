// valid - command-line front end for dataset generation, two-stage training,
// sampling, evaluation sweeps and the MAC benchmark.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "valid/baseline.hpp"
#include "valid/crossformer.hpp"
#include "valid/diffusion.hpp"
#include "valid/evaluation.hpp"
#include "valid/geometry.hpp"
#include "valid/scenes.hpp"
#include "valid/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace valid;

namespace {

std::string make_run_dir(const std::string& subcommand, const std::string& out_flag) {
    if (!out_flag.empty()) {
        fs::create_directories(out_flag);
        return out_flag;
    }
    const char* env = std::getenv("VALID_OUT_DIR");
    fs::path root = env && *env ? fs::path(env) : fs::path("runs");
    fs::create_directories(root);

    std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", std::gmtime(&now));
    std::string base = subcommand + "-" + stamp;
    fs::path dir = root / base;
    for (int suffix = 2; fs::exists(dir); ++suffix) dir = root / (base + "-" + std::to_string(suffix));
    fs::create_directories(dir);

    std::error_code ec;
    fs::path link = root / "latest";
    fs::remove(link, ec);
    fs::create_directory_symlink(dir.filename(), link, ec);  // best effort
    return dir.string();
}

void freeze_config(const std::string& dir, const json& resolved) {
    std::ofstream out(fs::path(dir) / "config.json");
    out << resolved.dump(1) << "\n";
}

training::ModelBundle bundle_from_checkpoint(const std::string& path) {
    training::Checkpoint ckpt = training::load_checkpoint(path);
    training::ModelBundle b;
    b.config = ckpt.model;
    b.params = std::move(ckpt.params);
    return b;
}

struct SweepFlags {
    std::vector<int> view_counts{1, 2, 3, 4};
    int targets = 8;
    int steps = 50;
    uint64_t seed = 0;
    int threads = 0;
    int max_scenes = 0;
    double ratio = 1.0;
    bool zero_cond = false;
    bool clamp_x0 = false;
    std::string split = "test";
};

evaluation::SweepParams to_params(const SweepFlags& f) {
    evaluation::SweepParams p;
    p.view_counts = f.view_counts;
    p.n_targets = f.targets;
    p.sampler_steps = f.steps;
    p.seed = f.seed;
    p.threads = f.threads;
    p.max_scenes = f.max_scenes;
    p.token_ratio = f.ratio;
    p.zero_condition = f.zero_cond;
    p.clamp_x0 = f.clamp_x0;
    p.split = f.split;
    return p;
}

int run_gen_data(const std::string& out_flag, scenes::DatasetParams params, double polar_lo_deg,
                 double polar_hi_deg, double radius, double test_frac) {
    params.sampling.polar_lo = geometry::deg_to_rad(polar_lo_deg);
    params.sampling.polar_hi = geometry::deg_to_rad(polar_hi_deg);
    params.sampling.radius = radius;
    params.test_fraction = test_frac;
    std::string dir = make_run_dir("gen-data", out_flag);

    json resolved{{"subcommand", "gen-data"}, {"scenes", params.n_scenes},
                  {"views", params.views_per_scene}, {"res", params.resolution},
                  {"seed", params.seed},           {"test_frac", test_frac},
                  {"polar_lo_deg", polar_lo_deg},  {"polar_hi_deg", polar_hi_deg},
                  {"radius", radius}};
    freeze_config(dir, resolved);

    scenes::SceneManifest m = scenes::generate_dataset(params, dir);
    std::cout << "wrote " << m.scenes.size() << " scenes x " << m.views_per_scene << " views to "
              << dir << "\n";
    return 0;
}

int run_train(training::TrainConfig cfg, const std::string& out_flag) {
    cfg.out_dir = make_run_dir("train-stage" + std::to_string(cfg.stage), out_flag);
    json resolved = cfg.to_json();
    resolved["subcommand"] = "train";
    resolved.erase("out_dir");
    freeze_config(cfg.out_dir, resolved);

    training::StageResult r = training::run_stage(cfg);
    std::cout << "stage " << cfg.stage << " done; final 100-step loss " << r.final_loss_ma << "\n"
              << "checkpoint: " << r.checkpoint_path << "\n";
    return 0;
}

int run_sample(const std::string& ckpt_path, const std::string& data_path, int scene_index,
               int n_views, int trajectory, uint64_t seed, int steps, double ratio, bool zero_cond,
               bool log_steps, bool clamp_x0, const std::string& out_flag) {
    training::ModelBundle bundle = bundle_from_checkpoint(ckpt_path);
    scenes::SceneManifest manifest = scenes::load_manifest(data_path);
    if (scene_index < 0) {
        auto test = manifest.split_indices("test");
        scene_index = test.empty() ? 0 : test.front();
    }
    if (scene_index >= static_cast<int>(manifest.scenes.size()))
        throw std::runtime_error("sample: scene index " + std::to_string(scene_index) +
                                 " out of range (" + std::to_string(manifest.scenes.size()) +
                                 " scenes)");
    const scenes::SceneEntry& entry = manifest.scenes[scene_index];

    std::string dir = make_run_dir("sample", out_flag);
    json resolved{{"subcommand", "sample"}, {"ckpt", ckpt_path},     {"data", data_path},
                  {"scene", scene_index},   {"views", n_views},      {"trajectory", trajectory},
                  {"seed", seed},           {"steps", steps},        {"ratio", ratio},
                  {"zero_cond", zero_cond}, {"log_steps", log_steps}, {"clamp_x0", clamp_x0}};
    freeze_config(dir, resolved);

    diffusion::DiffusionSchedule sched =
        diffusion::make_schedule(bundle.config.t_steps, bundle.config.beta_start, bundle.config.beta_end);
    int use_steps = std::min(steps, bundle.config.t_steps);
    int res = manifest.resolution;

    auto sources = geometry::sample_source_views(
        derive_seed(seed, {0x50c5ull, static_cast<uint64_t>(entry.spec.scene_id)}), n_views,
        manifest.sampling);
    std::vector<Image> source_images;
    for (const auto& p : sources) source_images.push_back(scenes::render(entry.spec, p, res));

    // grid: ground-truth row on top, sampled row below
    Image strip(2 * res, trajectory * res);
    std::ofstream diag_csv;
    if (log_steps) {
        diag_csv.open(fs::path(dir) / "sampling_log.csv");
        diag_csv << "frame,step,t,eps_abs_mean,z_mean,z_std\n";
    }
    for (int f = 0; f < trajectory; ++f) {
        double az = geometry::kTwoPi * f / trajectory;
        geometry::CameraPose target(manifest.sampling.source_polar, az, manifest.sampling.radius);
        Image gt = scenes::render(entry.spec, target, res);

        Tensor cond;
        if (zero_cond) {
            cond = Tensor::zeros({crossformer::kSeedCount, bundle.config.d_seed});
        } else {
            std::vector<tokenizer::ViewInput> views;
            for (int v = 0; v < n_views; ++v)
                views.push_back({source_images[v], geometry::relative_pose(sources[v], target)});
            Graph g(false);
            Binder bind(g, bundle.params);
            cond = g.val(training::condition_from_views(
                g, bind, views, bundle.config, ratio,
                derive_seed(seed, {0x70c3ull, static_cast<uint64_t>(f)}), false));
        }
        std::vector<diffusion::StepDiag> diag;
        Image sample = diffusion::p_sample_loop(cond, bundle.params, bundle.config, sched,
                                                derive_seed(seed, {0xf2a5ull, static_cast<uint64_t>(f)}),
                                                use_steps, log_steps ? &diag : nullptr, clamp_x0);
        if (log_steps)
            for (const auto& d : diag) {
                char buf[160];
                std::snprintf(buf, sizeof(buf), "%d,%d,%d,%.6f,%.6f,%.6f\n", f, d.step, d.t,
                              d.eps_abs_mean, d.z_mean, d.z_std);
                diag_csv << buf;
            }
        for (int y = 0; y < res; ++y)
            for (int x = 0; x < res; ++x)
                for (int c = 0; c < 3; ++c) {
                    strip.at(y, f * res + x, c) = gt.at(y, x, c);
                    strip.at(res + y, f * res + x, c) = sample.at(y, x, c);
                }
    }
    std::string png_path = (fs::path(dir) / "trajectory.png").string();
    save_png(strip, png_path);
    std::cout << "wrote " << png_path << "\n";
    return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data_path, const SweepFlags& flags,
             const std::string& out_flag) {
    training::ModelBundle bundle = bundle_from_checkpoint(ckpt_path);
    scenes::SceneManifest manifest = scenes::load_manifest(data_path);
    std::string dir = make_run_dir("eval", out_flag);

    json resolved{{"subcommand", "eval"},      {"ckpt", ckpt_path},
                  {"data", data_path},         {"views", flags.view_counts},
                  {"targets", flags.targets},  {"steps", flags.steps},
                  {"seed", flags.seed},        {"zero_cond", flags.zero_cond},
                  {"ratio", flags.ratio},      {"max_scenes", flags.max_scenes},
                  {"split", flags.split}};
    freeze_config(dir, resolved);

    evaluation::MetricsReport report = evaluation::evaluate_sweep(bundle, manifest, to_params(flags));
    report.checkpoint_id = ckpt_path;
    evaluation::write_report_csv(report, (fs::path(dir) / "metrics.csv").string());
    std::string table = evaluation::format_report_table(report);
    std::ofstream(fs::path(dir) / "table.txt") << table;
    std::cout << table;
    return 0;
}

int run_bench_macs(const std::string& config_path, const std::string& out_flag) {
    ModelConfig cfg;
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw std::runtime_error("bench-macs: cannot open config " + config_path);
        json j;
        in >> j;
        cfg = ModelConfig::from_json(j.contains("model") ? j.at("model") : j);
    }
    std::string dir = make_run_dir("bench-macs", out_flag);
    json resolved{{"subcommand", "bench-macs"}, {"model", cfg.to_json()}};
    freeze_config(dir, resolved);

    std::string csv_path = (fs::path(dir) / "macs.csv").string();
    std::ofstream out(csv_path);
    out << "n_views,ratio,crossformer_macs,unet_macs\n";
    for (int v = 1; v <= 8; ++v)
        for (double ratio : {0.25, 0.5, 0.75, 1.0}) {
            auto mac = crossformer::mac_count(cfg, v, ratio);
            char buf[128];
            std::snprintf(buf, sizeof(buf), "%d,%.2f,%lld,%lld\n", v, ratio,
                          static_cast<long long>(mac.crossformer_macs),
                          static_cast<long long>(mac.unet_crossattn_macs));
            out << buf;
        }
    std::cout << "wrote " << csv_path << "\n";
    return 0;
}

int run_ablate_stage2(const std::string& ckpt1, const std::string& ckpt2,
                      const std::string& data_path, const SweepFlags& flags,
                      const std::string& out_flag) {
    training::ModelBundle stage1 = bundle_from_checkpoint(ckpt1);
    training::ModelBundle stage2 = bundle_from_checkpoint(ckpt2);
    scenes::SceneManifest manifest = scenes::load_manifest(data_path);
    std::string dir = make_run_dir("ablate-stage2", out_flag);

    json resolved{{"subcommand", "ablate-stage2"}, {"ckpt_stage1", ckpt1}, {"ckpt_stage2", ckpt2},
                  {"data", data_path},             {"views", flags.view_counts},
                  {"targets", flags.targets},      {"steps", flags.steps},
                  {"seed", flags.seed}};
    freeze_config(dir, resolved);

    evaluation::MetricsReport r1 = evaluation::evaluate_sweep(stage1, manifest, to_params(flags));
    evaluation::MetricsReport r2 = evaluation::evaluate_sweep(stage2, manifest, to_params(flags));

    std::string csv_path = (fs::path(dir) / "stage2_ablation.csv").string();
    std::ofstream out(csv_path);
    out << "k,psnr_stage1_only,ssim_stage1_only,psnr_stage2,ssim_stage2\n";
    for (size_t i = 0; i < r1.summary.size(); ++i) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f,%.6f\n", r1.summary[i].k,
                      r1.summary[i].psnr_mean, r1.summary[i].ssim_mean, r2.summary[i].psnr_mean,
                      r2.summary[i].ssim_mean);
        out << buf;
    }
    std::cout << "stage-1-only checkpoint:\n"
              << evaluation::format_report_table(r1) << "stage-2 checkpoint:\n"
              << evaluation::format_report_table(r2) << "wrote " << csv_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"variable-length multi-view conditioned diffusion for novel view synthesis"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "render a procedural multi-view dataset");
    scenes::DatasetParams gen_params;
    double gen_polar_lo = 30, gen_polar_hi = 90, gen_radius = 1.5, gen_test_frac = 0.25;
    std::string gen_out;
    gen->add_option("--scenes", gen_params.n_scenes, "total scene count");
    gen->add_option("--views", gen_params.views_per_scene, "rendered views per scene");
    gen->add_option("--res", gen_params.resolution, "image resolution (16/32/64)");
    gen->add_option("--seed", gen_params.seed, "dataset seed");
    gen->add_option("--test-frac", gen_test_frac, "fraction of scenes labeled test");
    gen->add_option("--polar-lo", gen_polar_lo, "view polar band low, degrees");
    gen->add_option("--polar-hi", gen_polar_hi, "view polar band high, degrees");
    gen->add_option("--radius", gen_radius, "camera radius, scene units");
    gen->add_option("--out", gen_out, "output directory (default: timestamped run dir)");

    // train
    auto* train = app.add_subcommand("train", "run one training stage");
    training::TrainConfig tc;
    std::string train_out, train_config_path;
    double train_ratio = -1;
    train->add_option("--config", train_config_path, "json config file (flags override)");
    train->add_option("--stage", tc.stage, "1 or 2")->check(CLI::Range(1, 2));
    train->add_option("--data", tc.dataset_path, "dataset manifest.json");
    train->add_option("--init", tc.init_checkpoint, "stage-1 checkpoint for stage 2");
    train->add_option("--resume", tc.resume_checkpoint, "checkpoint to resume from");
    train->add_option("--steps", tc.total_steps, "total optimization steps");
    train->add_option("--batch", tc.batch_size, "batch size");
    train->add_option("--lr", tc.lr, "learning rate");
    train->add_option("--weight-decay", tc.weight_decay, "AdamW decoupled weight decay");
    train->add_option("--seed", tc.seed, "training seed");
    train->add_option("--max-views", tc.max_views, "stage-2 maximum source views");
    train->add_option("--ratio", train_ratio, "stage-2 token sample ratio (fixed)");
    train->add_option("--ratio-lo", tc.ratio_lo, "stage-2 ratio range low");
    train->add_option("--ratio-hi", tc.ratio_hi, "stage-2 ratio range high");
    train->add_flag("--per-view-quota", tc.per_view_quota, "sample tokens per view instead of pooled");
    train->add_flag("--attention-only", tc.attention_only,
                    "stage 1 trains only attention modules in the U-Net");
    train->add_option("--threads", tc.threads, "worker threads (0 = hardware)");
    train->add_option("--checkpoint-every", tc.checkpoint_every, "periodic checkpoint interval");
    train->add_option("--log-every", tc.log_every, "loss CSV interval");
    train->add_option("--fusion", tc.model.fusion, "crossformer | pooled | global");
    train->add_option("--res", tc.model.resolution, "model resolution (stage 1)");
    train->add_option("--t-steps", tc.model.t_steps, "diffusion timesteps (stage 1)");
    train->add_option("--out", train_out, "output directory");

    // sample
    auto* sample = app.add_subcommand("sample", "sample a target-view trajectory strip");
    std::string sample_ckpt, sample_data, sample_out;
    int sample_scene = -1, sample_views = 4, sample_traj = 12, sample_steps = 50;
    uint64_t sample_seed = 0;
    double sample_ratio = 1.0;
    bool sample_zero = false, sample_log = false, sample_clamp = false;
    sample->add_option("--ckpt", sample_ckpt, "checkpoint")->required();
    sample->add_option("--data", sample_data, "dataset manifest.json")->required();
    sample->add_option("--scene", sample_scene, "scene index (default: first test scene)");
    sample->add_option("--views", sample_views, "source view count")->check(CLI::Range(1, 4));
    sample->add_option("--trajectory", sample_traj, "frames along the orbit");
    sample->add_option("--seed", sample_seed, "sampling seed");
    sample->add_option("--steps", sample_steps, "sampler steps");
    sample->add_option("--ratio", sample_ratio, "token sample ratio at inference");
    sample->add_flag("--zero-cond", sample_zero, "mask conditioning with a 0-tensor");
    sample->add_flag("--log-steps", sample_log, "write per-step sampler diagnostics CSV");
    sample->add_flag("--clamp-x0", sample_clamp, "clamp the implied clean image during sampling");
    sample->add_option("--out", sample_out, "output directory");

    // eval
    auto* eval = app.add_subcommand("eval", "PSNR/SSIM view-count sweep");
    std::string eval_ckpt, eval_data, eval_out;
    SweepFlags eval_flags;
    eval->add_option("--ckpt", eval_ckpt, "checkpoint")->required();
    eval->add_option("--data", eval_data, "dataset manifest.json")->required();
    eval->add_option("--views", eval_flags.view_counts, "view counts, e.g. 1,2,3,4")->delimiter(',');
    eval->add_option("--targets", eval_flags.targets, "target poses per scene");
    eval->add_option("--steps", eval_flags.steps, "sampler steps");
    eval->add_option("--seed", eval_flags.seed, "evaluation seed");
    eval->add_option("--threads", eval_flags.threads, "worker threads");
    eval->add_option("--max-scenes", eval_flags.max_scenes, "cap on evaluated scenes");
    eval->add_option("--ratio", eval_flags.ratio, "token sample ratio at inference");
    eval->add_option("--split", eval_flags.split, "dataset split to score");
    eval->add_flag("--zero-cond", eval_flags.zero_cond, "mask conditioning with a 0-tensor");
    eval->add_flag("--clamp-x0", eval_flags.clamp_x0, "clamp the implied clean image during sampling");
    eval->add_option("--out", eval_out, "output directory");

    // bench-macs
    auto* bench = app.add_subcommand("bench-macs", "analytic MAC cost over views and ratios");
    std::string bench_config, bench_out;
    bench->add_option("--config", bench_config, "json model config");
    bench->add_option("--out", bench_out, "output directory");

    // ablate-stage2
    auto* ablate = app.add_subcommand("ablate-stage2", "stage-1-only vs stage-2 comparison");
    std::string ab_ckpt1, ab_ckpt2, ab_data, ab_out;
    SweepFlags ab_flags;
    ablate->add_option("--ckpt-stage1", ab_ckpt1, "stage-1-only checkpoint")->required();
    ablate->add_option("--ckpt-stage2", ab_ckpt2, "stage-2 checkpoint")->required();
    ablate->add_option("--data", ab_data, "dataset manifest.json")->required();
    ablate->add_option("--views", ab_flags.view_counts, "view counts")->delimiter(',');
    ablate->add_option("--targets", ab_flags.targets, "target poses per scene");
    ablate->add_option("--steps", ab_flags.steps, "sampler steps");
    ablate->add_option("--seed", ab_flags.seed, "evaluation seed");
    ablate->add_option("--threads", ab_flags.threads, "worker threads");
    ablate->add_option("--max-scenes", ab_flags.max_scenes, "cap on evaluated scenes");
    ablate->add_flag("--clamp-x0", ab_flags.clamp_x0, "clamp the implied clean image during sampling");
    ablate->add_option("--out", ab_out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (gen->parsed())
            return run_gen_data(gen_out, gen_params, gen_polar_lo, gen_polar_hi, gen_radius,
                                gen_test_frac);
        if (train->parsed()) {
            if (!train_config_path.empty()) {
                std::ifstream in(train_config_path);
                if (!in) throw std::runtime_error("train: cannot open config " + train_config_path);
                json j;
                in >> j;
                // file provides the base; any flag given on the command line wins
                training::TrainConfig merged = training::TrainConfig::from_json(j);
                auto given = [&](const char* name) { return train->count(name) > 0; };
                if (given("--stage")) merged.stage = tc.stage;
                if (given("--data")) merged.dataset_path = tc.dataset_path;
                if (given("--init")) merged.init_checkpoint = tc.init_checkpoint;
                if (given("--resume")) merged.resume_checkpoint = tc.resume_checkpoint;
                if (given("--steps")) merged.total_steps = tc.total_steps;
                if (given("--batch")) merged.batch_size = tc.batch_size;
                if (given("--lr")) merged.lr = tc.lr;
                if (given("--weight-decay")) merged.weight_decay = tc.weight_decay;
                if (given("--seed")) merged.seed = tc.seed;
                if (given("--max-views")) merged.max_views = tc.max_views;
                if (given("--ratio-lo")) merged.ratio_lo = tc.ratio_lo;
                if (given("--ratio-hi")) merged.ratio_hi = tc.ratio_hi;
                if (given("--threads")) merged.threads = tc.threads;
                if (given("--checkpoint-every")) merged.checkpoint_every = tc.checkpoint_every;
                if (given("--log-every")) merged.log_every = tc.log_every;
                if (given("--fusion")) merged.model.fusion = tc.model.fusion;
                if (given("--res")) merged.model.resolution = tc.model.resolution;
                if (given("--t-steps")) merged.model.t_steps = tc.model.t_steps;
                if (given("--per-view-quota")) merged.per_view_quota = tc.per_view_quota;
                if (given("--attention-only")) merged.attention_only = tc.attention_only;
                tc = merged;
            }
            if (train_ratio > 0) tc.ratio_lo = tc.ratio_hi = train_ratio;
            if (tc.dataset_path.empty())
                throw std::runtime_error("train: --data (dataset manifest) is required");
            return run_train(tc, train_out);
        }
        if (sample->parsed())
            return run_sample(sample_ckpt, sample_data, sample_scene, sample_views, sample_traj,
                              sample_seed, sample_steps, sample_ratio, sample_zero, sample_log,
                              sample_clamp, sample_out);
        if (eval->parsed()) return run_eval(eval_ckpt, eval_data, eval_flags, eval_out);
        if (bench->parsed()) return run_bench_macs(bench_config, bench_out);
        if (ablate->parsed()) return run_ablate_stage2(ab_ckpt1, ab_ckpt2, ab_data, ab_flags, ab_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
