#include "valid/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "valid/baseline.hpp"
#include "valid/crossformer.hpp"
#include "valid/geometry.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace valid::training {

namespace {
bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }
}  // namespace

ModelBundle init_bundle(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ModelBundle b;
    b.config = cfg;
    Rng rng(derive_seed(seed, {0x1417ull}));
    tokenizer::init_vit_params(b.params, cfg, rng);
    tokenizer::init_pose_mlp_params(b.params, cfg, rng);
    crossformer::init_crossformer_params(b.params, cfg, rng, derive_seed(seed, {0x5eedull}));
    diffusion::init_unet_params(b.params, cfg, rng);
    if (cfg.fusion == "global") baseline::init_global_proj(b.params, cfg, rng);
    return b;
}

std::set<std::string> trainable_mask(const ModelBundle& bundle, int stage, bool attention_only) {
    if (stage != 1 && stage != 2)
        throw std::invalid_argument("trainable_mask: stage " + std::to_string(stage) + " not in {1, 2}");
    std::set<std::string> out;
    for (const auto& [name, t] : bundle.params.tensors) {
        bool fusion_core = starts_with(name, "seeds.") || starts_with(name, "crossformer.");
        if (stage == 2) {
            if (fusion_core) out.insert(name);
            continue;
        }
        if (!attention_only) {
            out.insert(name);
            continue;
        }
        bool svt = starts_with(name, "vit.") || starts_with(name, "pose_mlp.") ||
                   starts_with(name, "baseline.");
        bool unet_attn = starts_with(name, "unet.") && name.find(".attn.") != std::string::npos;
        if (fusion_core || svt || unet_attn) out.insert(name);
    }
    return out;
}

Var condition_from_views(Graph& g, Binder& bind, const std::vector<tokenizer::ViewInput>& views,
                         const ModelConfig& cfg, double ratio, uint64_t token_seed,
                         bool per_view_quota) {
    std::vector<Var> sets = tokenizer::tokenize_views(g, bind, views, cfg);

    auto sampled_union = [&]() -> Var {
        Var u = sets.size() == 1 ? sets[0] : g.concat_rows(sets);
        if (ratio >= 1.0) return u;
        std::vector<int> idx;
        if (per_view_quota) {
            std::vector<int> sizes;
            for (Var s : sets) sizes.push_back(g.val(s).rows());
            idx = crossformer::sample_indices_per_view(sizes, ratio, token_seed);
        } else {
            idx = crossformer::sample_indices(g.val(u).rows(), ratio, token_seed);
        }
        return g.gather_rows(u, std::move(idx));
    };

    if (cfg.fusion == "crossformer") {
        return crossformer::fuse_kv(g, bind, bind("seeds.tokens"), sampled_union(), cfg);
    }
    if (cfg.fusion == "pooled") {
        // pooling fuses views independently; sampling applies inside each view
        std::vector<Var> used = sets;
        if (ratio < 1.0) {
            for (size_t i = 0; i < used.size(); ++i) {
                int rows = g.val(used[i]).rows();
                auto idx = crossformer::sample_indices(
                    rows, ratio, derive_seed(token_seed, {static_cast<uint64_t>(i)}));
                used[i] = g.gather_rows(used[i], std::move(idx));
            }
        }
        return baseline::pool_fuse(g, bind, bind("seeds.tokens"), used, cfg);
    }
    if (cfg.fusion == "global") {
        Var kv = sampled_union();
        return baseline::global_token_condition(g, bind, {kv}, cfg);
    }
    throw std::invalid_argument("condition_from_views: unknown fusion '" + cfg.fusion + "'");
}

namespace {

struct ItemResult {
    double loss = 0;
    std::map<std::string, Tensor> grads;
};

ItemResult run_item(const ModelBundle& bundle, const TrainItem& item, const TrainConfig& cfg,
                    const std::set<std::string>& mask, const diffusion::DiffusionSchedule& sched) {
    Graph g(true);
    Binder bind(g, bundle.params, &mask);
    Var cond = condition_from_views(g, bind, item.views, bundle.config, item.ratio, item.token_seed,
                                    cfg.per_view_quota);
    diffusion::NoisyLatent zt = diffusion::q_sample(item.target, item.t, item.eps, sched);
    Var eps_hat = diffusion::denoise(g, bind, g.constant(std::move(zt.values)), item.t, cond,
                                     bundle.config);
    Var loss = diffusion::mse(g, eps_hat, g.constant(item.eps));
    g.backward(loss);

    ItemResult out;
    out.loss = g.val(loss).data[0];
    for (const std::string& name : mask) {
        const Tensor* grad = bind.grad_of(name);
        if (grad) out.grads.emplace(name, *grad);
    }
    return out;
}

}  // namespace

double train_step(ModelBundle& bundle, AdamState& opt, const std::vector<TrainItem>& batch,
                  const TrainConfig& cfg, const std::set<std::string>& mask,
                  const diffusion::DiffusionSchedule& sched, int threads) {
    const int b = static_cast<int>(batch.size());
    if (b == 0) throw std::invalid_argument("train_step: empty batch");
    if (threads <= 0) threads = static_cast<int>(std::thread::hardware_concurrency());
    threads = std::max(1, std::min(threads, b));

    std::vector<ItemResult> results(b);
    if (threads == 1) {
        for (int i = 0; i < b; ++i) results[i] = run_item(bundle, batch[i], cfg, mask, sched);
    } else {
        std::vector<std::thread> pool;
        std::exception_ptr error;
        std::mutex error_mu;
        for (int w = 0; w < threads; ++w)
            pool.emplace_back([&, w]() {
                try {
                    for (int i = w; i < b; i += threads)
                        results[i] = run_item(bundle, batch[i], cfg, mask, sched);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mu);
                    if (!error) error = std::current_exception();
                }
            });
        for (auto& t : pool) t.join();
        if (error) std::rethrow_exception(error);
    }

    // fixed-order reduction keeps results independent of scheduling
    std::map<std::string, Tensor> grad_sum;
    double loss_sum = 0;
    for (int i = 0; i < b; ++i) {
        loss_sum += results[i].loss;
        for (auto& [name, grad] : results[i].grads) {
            auto it = grad_sum.find(name);
            if (it == grad_sum.end()) {
                grad_sum.emplace(name, grad);
            } else {
                Tensor& acc = it->second;
                for (int64_t j = 0; j < acc.numel(); ++j) acc.data[j] += grad.data[j];
            }
        }
    }

    opt.t += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.t));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.t));
    double inv_b = 1.0 / static_cast<double>(b);
    for (auto& [name, gsum] : grad_sum) {
        Tensor& p = bundle.params.get(name);
        Tensor& m = opt.m.try_emplace(name, Tensor::zeros(p.shape)).first->second;
        Tensor& v = opt.v.try_emplace(name, Tensor::zeros(p.shape)).first->second;
        for (int64_t j = 0; j < p.numel(); ++j) {
            double grad = gsum.data[j] * inv_b;
            m.data[j] = cfg.beta1 * m.data[j] + (1.0 - cfg.beta1) * grad;
            v.data[j] = cfg.beta2 * v.data[j] + (1.0 - cfg.beta2) * grad * grad;
            double mhat = m.data[j] / bc1;
            double vhat = v.data[j] / bc2;
            p.data[j] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * p.data[j]);
        }
    }
    return loss_sum * inv_b;
}

// ----------------------------------------------------------------- checkpoint

namespace {
constexpr char kMagic[8] = {'V', 'L', 'I', 'D', 'C', 'K', 'P', 'T'};

void put_u32(std::string& s, uint32_t v) { s.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& s, uint64_t v) { s.append(reinterpret_cast<const char*>(&v), 8); }

json tensor_dir_entry(const std::string& name, const Tensor& t, uint64_t offset) {
    return json{{"name", name}, {"shape", t.shape}, {"offset", offset}, {"count", t.numel()}};
}
}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    json header;
    header["version"] = ckpt.version;
    header["stage"] = ckpt.stage;
    header["global_step"] = ckpt.global_step;
    header["rng_state"] = ckpt.rng_state;
    header["model"] = ckpt.model.to_json();
    header["adam_t"] = ckpt.opt.t;
    header["dtype"] = "f64le";

    json dir = json::array();
    uint64_t offset = 0;
    auto add_entry = [&](const std::string& name, const Tensor& t) {
        dir.push_back(tensor_dir_entry(name, t, offset));
        offset += static_cast<uint64_t>(t.numel()) * sizeof(double);
    };
    for (const auto& [name, t] : ckpt.params.tensors) add_entry(name, t);
    for (const auto& [name, t] : ckpt.opt.m) add_entry("__adam_m." + name, t);
    for (const auto& [name, t] : ckpt.opt.v) add_entry("__adam_v." + name, t);
    header["tensors"] = std::move(dir);

    std::string head = header.dump();
    std::string blob;
    blob.reserve(16 + head.size() + offset);
    blob.append(kMagic, 8);
    put_u32(blob, ckpt.version);
    put_u64(blob, head.size());
    blob += head;

    auto append_payload = [&](const Tensor& t) {
        blob.append(reinterpret_cast<const char*>(t.data.data()), t.numel() * sizeof(double));
    };
    for (const auto& [name, t] : ckpt.params.tensors) append_payload(t);
    for (const auto& [name, t] : ckpt.opt.m) append_payload(t);
    for (const auto& [name, t] : ckpt.opt.v) append_payload(t);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("load_checkpoint: " + path + " is not a checkpoint file");
    uint32_t version = 0;
    uint64_t head_len = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&head_len), 8);
    if (!in || version != 1)
        throw std::runtime_error("load_checkpoint: unsupported version in " + path);
    std::string head(head_len, '\0');
    in.read(head.data(), static_cast<std::streamsize>(head_len));
    if (!in) throw std::runtime_error("load_checkpoint: truncated header in " + path);

    json header = json::parse(head);
    Checkpoint ckpt;
    ckpt.version = version;
    ckpt.stage = header.at("stage").get<int>();
    ckpt.global_step = header.at("global_step").get<int64_t>();
    ckpt.rng_state = header.at("rng_state").get<std::string>();
    ckpt.model = ModelConfig::from_json(header.at("model"));
    ckpt.opt.t = header.at("adam_t").get<int64_t>();

    for (const json& e : header.at("tensors")) {
        std::string name = e.at("name").get<std::string>();
        std::vector<int> shape = e.at("shape").get<std::vector<int>>();
        int64_t count = e.at("count").get<int64_t>();
        Tensor t(shape);
        if (t.numel() != count)
            throw std::runtime_error("load_checkpoint: inconsistent tensor entry " + name);
        in.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(count * sizeof(double)));
        if (!in) throw std::runtime_error("load_checkpoint: truncated payload at " + name);
        if (starts_with(name, "__adam_m."))
            ckpt.opt.m.emplace(name.substr(9), std::move(t));
        else if (starts_with(name, "__adam_v."))
            ckpt.opt.v.emplace(name.substr(9), std::move(t));
        else
            ckpt.params.tensors.emplace(name, std::move(t));
    }
    return ckpt;
}

// ------------------------------------------------------------------ run_stage

json TrainConfig::to_json() const {
    return json{{"stage", stage},
                {"lr", lr},
                {"beta1", beta1},
                {"beta2", beta2},
                {"adam_eps", adam_eps},
                {"weight_decay", weight_decay},
                {"batch_size", batch_size},
                {"total_steps", total_steps},
                {"max_views", max_views},
                {"view_count_weights", view_count_weights},
                {"ratio_lo", ratio_lo},
                {"ratio_hi", ratio_hi},
                {"per_view_quota", per_view_quota},
                {"seed", seed},
                {"dataset_path", dataset_path},
                {"init_checkpoint", init_checkpoint},
                {"resume_checkpoint", resume_checkpoint},
                {"out_dir", out_dir},
                {"checkpoint_every", checkpoint_every},
                {"log_every", log_every},
                {"threads", threads},
                {"attention_only", attention_only},
                {"model", model.to_json()}};
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    c.stage = j.value("stage", c.stage);
    c.lr = j.value("lr", c.lr);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.max_views = j.value("max_views", c.max_views);
    c.view_count_weights = j.value("view_count_weights", c.view_count_weights);
    c.ratio_lo = j.value("ratio_lo", c.ratio_lo);
    c.ratio_hi = j.value("ratio_hi", c.ratio_hi);
    c.per_view_quota = j.value("per_view_quota", c.per_view_quota);
    c.seed = j.value("seed", c.seed);
    c.dataset_path = j.value("dataset_path", c.dataset_path);
    c.init_checkpoint = j.value("init_checkpoint", c.init_checkpoint);
    c.resume_checkpoint = j.value("resume_checkpoint", c.resume_checkpoint);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.log_every = j.value("log_every", c.log_every);
    c.threads = j.value("threads", c.threads);
    c.attention_only = j.value("attention_only", c.attention_only);
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    return c;
}

namespace {

struct DatasetCache {
    const scenes::SceneManifest* manifest = nullptr;
    std::vector<int> train_scenes;
    // decoded images per scene index (train split only)
    std::map<int, std::vector<Image>> images;

    const Image& view_image(int scene, int view) const { return images.at(scene)[view]; }
};

DatasetCache load_train_cache(const scenes::SceneManifest& manifest, const std::string& manifest_dir) {
    DatasetCache cache;
    cache.manifest = &manifest;
    cache.train_scenes = manifest.split_indices("train");
    if (cache.train_scenes.empty()) throw std::runtime_error("training: dataset has no train split");
    for (int s : cache.train_scenes) {
        std::vector<Image> imgs;
        imgs.reserve(manifest.scenes[s].views.size());
        for (const auto& view : manifest.scenes[s].views)
            imgs.push_back(scenes::load_view_image(manifest_dir, view));
        cache.images.emplace(s, std::move(imgs));
    }
    return cache;
}

TrainItem draw_item(Rng& rng, const DatasetCache& cache, const TrainConfig& cfg,
                    const ModelConfig& model) {
    const auto& manifest = *cache.manifest;
    int n_views;
    if (cfg.stage == 1) {
        n_views = 1;
    } else if (!cfg.view_count_weights.empty()) {
        double total = 0;
        for (double w : cfg.view_count_weights) total += w;
        double u = rng.uniform(0.0, total);
        n_views = 1;
        for (size_t i = 0; i < cfg.view_count_weights.size(); ++i) {
            u -= cfg.view_count_weights[i];
            if (u <= 0) {
                n_views = static_cast<int>(i) + 1;
                break;
            }
        }
    } else {
        n_views = 1 + rng.uniform_int(cfg.max_views);
    }

    int scene = cache.train_scenes[rng.uniform_int(static_cast<int>(cache.train_scenes.size()))];
    const auto& entry = manifest.scenes[scene];
    int avail = static_cast<int>(entry.views.size());
    if (avail < n_views + 1)
        throw std::runtime_error("training: scene " + std::to_string(entry.spec.scene_id) + " has " +
                                 std::to_string(avail) + " views, need " + std::to_string(n_views + 1));

    std::vector<int> picked = rng.sample_without_replacement(avail, n_views + 1);
    int target_pos = rng.uniform_int(n_views + 1);
    int target_view = picked[target_pos];
    picked.erase(picked.begin() + target_pos);

    TrainItem item;
    geometry::CameraPose target_pose = entry.views[target_view].pose();
    item.target = cache.view_image(scene, target_view);
    for (int src : picked) {
        tokenizer::ViewInput vi;
        vi.image = cache.view_image(scene, src);
        vi.rel = geometry::relative_pose(entry.views[src].pose(), target_pose);
        item.views.push_back(std::move(vi));
    }
    item.t = 1 + rng.uniform_int(model.t_steps);
    item.eps = Tensor({3, manifest.resolution, manifest.resolution});
    for (double& v : item.eps.data) v = rng.normal();
    item.ratio = cfg.stage == 2 ? rng.uniform(cfg.ratio_lo, cfg.ratio_hi) : 1.0;
    item.token_seed = rng.next_u64();
    return item;
}

}  // namespace

StageResult run_stage(const TrainConfig& cfg) {
    if (cfg.stage != 1 && cfg.stage != 2)
        throw std::invalid_argument("run_stage: stage must be 1 or 2");
    if (cfg.stage == 2 && cfg.init_checkpoint.empty() && cfg.resume_checkpoint.empty())
        throw std::invalid_argument("run_stage: stage 2 requires a stage-1 checkpoint (init_checkpoint)");
    if (!(cfg.ratio_lo > 0.0 && cfg.ratio_lo <= cfg.ratio_hi && cfg.ratio_hi <= 1.0))
        throw std::invalid_argument("run_stage: sample ratio range must sit inside (0, 1]");

    scenes::SceneManifest manifest = scenes::load_manifest(cfg.dataset_path);
    std::string manifest_dir = fs::path(cfg.dataset_path).parent_path().string();

    ModelBundle bundle;
    AdamState opt;
    int64_t step0 = 0;
    Rng rng(derive_seed(cfg.seed, {0x7247ull, static_cast<uint64_t>(cfg.stage)}));

    if (!cfg.resume_checkpoint.empty()) {
        Checkpoint ckpt = load_checkpoint(cfg.resume_checkpoint);
        if (ckpt.stage != cfg.stage)
            throw std::invalid_argument("run_stage: resume checkpoint is stage " +
                                        std::to_string(ckpt.stage) + ", config says " +
                                        std::to_string(cfg.stage));
        bundle.config = ckpt.model;
        bundle.params = std::move(ckpt.params);
        opt = std::move(ckpt.opt);
        step0 = ckpt.global_step;
        rng.set_state(ckpt.rng_state);
    } else if (cfg.stage == 2) {
        Checkpoint ckpt = load_checkpoint(cfg.init_checkpoint);
        bundle.config = ckpt.model;
        bundle.params = std::move(ckpt.params);
    } else {
        bundle = init_bundle(cfg.model, cfg.seed);
    }
    if (bundle.config.resolution != manifest.resolution)
        throw std::invalid_argument("run_stage: model resolution " +
                                    std::to_string(bundle.config.resolution) +
                                    " does not match dataset resolution " +
                                    std::to_string(manifest.resolution));
    if (cfg.stage == 2 && manifest.views_per_scene < cfg.max_views + 1)
        throw std::invalid_argument("run_stage: dataset has " +
                                    std::to_string(manifest.views_per_scene) +
                                    " views per scene, stage 2 needs max_views + 1 = " +
                                    std::to_string(cfg.max_views + 1));

    DatasetCache cache = load_train_cache(manifest, manifest_dir);
    std::set<std::string> mask = trainable_mask(bundle, cfg.stage, cfg.attention_only);
    diffusion::DiffusionSchedule sched =
        diffusion::make_schedule(bundle.config.t_steps, bundle.config.beta_start, bundle.config.beta_end);

    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    std::string loss_path =
        (fs::path(cfg.out_dir) / ("loss_stage" + std::to_string(cfg.stage) + ".csv")).string();
    std::ofstream loss_csv;
    if (step0 == 0) {
        loss_csv.open(loss_path);
        loss_csv << "step,loss,lr,stage\n";
    } else {
        loss_csv.open(loss_path, std::ios::app);
    }

    auto ckpt_path = [&](const std::string& tag) {
        return (fs::path(cfg.out_dir) / ("stage" + std::to_string(cfg.stage) + "_" + tag + ".ckpt"))
            .string();
    };
    auto write_ckpt = [&](int64_t step, const std::string& tag) {
        Checkpoint ckpt;
        ckpt.stage = cfg.stage;
        ckpt.global_step = step;
        ckpt.rng_state = rng.state();
        ckpt.model = bundle.config;
        ckpt.params = bundle.params;
        ckpt.opt = opt;
        save_checkpoint(ckpt, ckpt_path(tag));
        return ckpt_path(tag);
    };

    std::deque<double> window;
    double window_sum = 0;
    double initial_ma = 0;
    bool have_initial = false;

    for (int64_t step = step0 + 1; step <= cfg.total_steps; ++step) {
        std::vector<TrainItem> batch;
        batch.reserve(cfg.batch_size);
        for (int i = 0; i < cfg.batch_size; ++i)
            batch.push_back(draw_item(rng, cache, cfg, bundle.config));
        double loss = train_step(bundle, opt, batch, cfg, mask, sched, cfg.threads);

        window.push_back(loss);
        window_sum += loss;
        if (window.size() > 100) {
            window_sum -= window.front();
            window.pop_front();
        }
        if (!have_initial && window.size() == 100) {
            initial_ma = window_sum / 100.0;
            have_initial = true;
        }
        if (step % cfg.log_every == 0 || step == cfg.total_steps) {
            char buf[96];
            std::snprintf(buf, sizeof(buf), "%lld,%.8f,%.3g,%d\n", static_cast<long long>(step), loss,
                          cfg.lr, cfg.stage);
            loss_csv << buf;
            loss_csv.flush();
        }
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.total_steps) {
            char tag[32];
            std::snprintf(tag, sizeof(tag), "step%08lld", static_cast<long long>(step));
            write_ckpt(step, tag);
        }
    }

    StageResult result;
    result.checkpoint_path = write_ckpt(cfg.total_steps, "final");
    result.final_loss_ma = window.empty() ? 0 : window_sum / static_cast<double>(window.size());
    result.initial_loss_ma = have_initial ? initial_ma : result.final_loss_ma;
    return result;
}

}  // namespace valid::training
