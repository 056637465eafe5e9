#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace valid {

// Architecture hyperparameters; frozen into every checkpoint.
struct ModelConfig {
    int resolution = 32;
    int patch_size = 8;

    // source-view tokenizer
    int d_model = 64;
    int vit_layers = 2;
    int vit_heads = 4;
    int vit_ffw_mult = 4;
    int d_pose = 16;
    int pose_hidden = 32;
    bool pose_raw_concat = false;  // append the raw 4-vector instead of its MLP embedding

    // multi-view cross former
    int d_seed = 64;    // width of the 64 seed tokens
    int cf_layers = 4;  // L
    int cf_heads = 4;
    int cf_ffw_mult = 4;
    bool normalize_condition = false;  // layer-norm S_L before the denoiser

    // denoiser
    std::vector<int> unet_channels = {32, 64};
    int unet_heads = 4;
    int unet_groups = 8;
    int time_sin_dim = 64;
    int time_dim = 128;

    // noise schedule
    int t_steps = 400;
    double beta_start = 1e-4;
    double beta_end = 0.035;

    std::string fusion = "crossformer";  // crossformer | pooled | global

    int n_patches() const {
        int per_side = resolution / patch_size;
        return per_side * per_side;
    }
    int pose_width() const { return pose_raw_concat ? 4 : d_pose; }
    int token_width() const { return d_model + pose_width(); }

    void validate() const;

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

}  // namespace valid
