#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "valid/config.hpp"
#include "valid/diffusion.hpp"
#include "valid/nn.hpp"
#include "valid/scenes.hpp"
#include "valid/tokenizer.hpp"

namespace valid::training {

struct ModelBundle {
    ModelConfig config;
    ParamStore params;
};

ModelBundle init_bundle(const ModelConfig& cfg, uint64_t seed);

// Stage 1 default trains everything (from-scratch desk-scale mode); with
// attention_only set it reproduces the paper's masking: tokenizer, pose MLP,
// seeds, cross former and the U-Net attention modules. Stage 2 is the seeds
// and cross-former namespaces only.
std::set<std::string> trainable_mask(const ModelBundle& bundle, int stage, bool attention_only);

struct TrainConfig {
    int stage = 1;
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    int batch_size = 4;
    int total_steps = 8000;
    int max_views = 4;
    std::vector<double> view_count_weights;  // stage 2; empty = uniform over {1..max_views}
    double ratio_lo = 0.5;                   // stage-2 token sample ratio range
    double ratio_hi = 0.5;
    bool per_view_quota = false;
    uint64_t seed = 0;
    std::string dataset_path;  // manifest.json
    std::string init_checkpoint;
    std::string resume_checkpoint;
    std::string out_dir = ".";
    int checkpoint_every = 2000;
    int log_every = 50;
    int threads = 0;  // 0 = hardware concurrency
    bool attention_only = false;
    ModelConfig model;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct AdamState {
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
    int64_t t = 0;
};

// One batch element with all of its randomness pre-drawn, so worker threads
// stay free of RNG state.
struct TrainItem {
    std::vector<tokenizer::ViewInput> views;
    Image target;
    int t = 1;
    Tensor eps;
    double ratio = 1.0;
    uint64_t token_seed = 0;
};

// Builds the conditioning tokens for the configured fusion mode, applying
// token sampling when ratio < 1.
Var condition_from_views(Graph& g, Binder& bind, const std::vector<tokenizer::ViewInput>& views,
                         const ModelConfig& cfg, double ratio, uint64_t token_seed,
                         bool per_view_quota);

// Forward + backward + AdamW update on the masked parameters; returns the
// mean batch loss. Deterministic for a fixed batch regardless of threads.
double train_step(ModelBundle& bundle, AdamState& opt, const std::vector<TrainItem>& batch,
                  const TrainConfig& cfg, const std::set<std::string>& mask,
                  const diffusion::DiffusionSchedule& sched, int threads);

struct Checkpoint {
    uint32_t version = 1;
    int stage = 1;
    int64_t global_step = 0;
    std::string rng_state;
    ModelConfig model;
    ParamStore params;
    AdamState opt;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct StageResult {
    std::string checkpoint_path;
    double final_loss_ma = 0;  // 100-step moving average at the end
    double initial_loss_ma = 0;
};

StageResult run_stage(const TrainConfig& cfg);

}  // namespace valid::training
