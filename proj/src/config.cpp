#include "valid/config.hpp"

#include <stdexcept>

namespace valid {

void ModelConfig::validate() const {
    if (resolution <= 0 || patch_size <= 0 || resolution % patch_size != 0)
        throw std::invalid_argument("model config: patch size " + std::to_string(patch_size) +
                                    " must divide resolution " + std::to_string(resolution));
    if (d_model % vit_heads != 0)
        throw std::invalid_argument("model config: d_model must divide by vit_heads");
    if (d_seed % cf_heads != 0)
        throw std::invalid_argument("model config: d_seed must divide by cf_heads");
    if (cf_layers < 1) throw std::invalid_argument("model config: cf_layers must be >= 1");
    if (vit_layers < 1) throw std::invalid_argument("model config: vit_layers must be >= 1");
    if (unet_channels.empty()) throw std::invalid_argument("model config: unet_channels empty");
    for (int c : unet_channels) {
        if (c % unet_groups != 0)
            throw std::invalid_argument("model config: channel count " + std::to_string(c) +
                                        " must divide by unet_groups");
        if (c % unet_heads != 0)
            throw std::invalid_argument("model config: channel count " + std::to_string(c) +
                                        " must divide by unet_heads");
    }
    int side = resolution;
    for (size_t l = 1; l < unet_channels.size(); ++l) {
        if (side % 2 != 0)
            throw std::invalid_argument("model config: resolution does not halve across levels");
        side /= 2;
    }
    if (t_steps < 1) throw std::invalid_argument("model config: t_steps must be >= 1");
    if (fusion != "crossformer" && fusion != "pooled" && fusion != "global")
        throw std::invalid_argument("model config: unknown fusion '" + fusion + "'");
}

nlohmann::json ModelConfig::to_json() const {
    return nlohmann::json{
        {"resolution", resolution},
        {"patch_size", patch_size},
        {"d_model", d_model},
        {"vit_layers", vit_layers},
        {"vit_heads", vit_heads},
        {"vit_ffw_mult", vit_ffw_mult},
        {"d_pose", d_pose},
        {"pose_hidden", pose_hidden},
        {"pose_raw_concat", pose_raw_concat},
        {"d_seed", d_seed},
        {"cf_layers", cf_layers},
        {"cf_heads", cf_heads},
        {"cf_ffw_mult", cf_ffw_mult},
        {"normalize_condition", normalize_condition},
        {"unet_channels", unet_channels},
        {"unet_heads", unet_heads},
        {"unet_groups", unet_groups},
        {"time_sin_dim", time_sin_dim},
        {"time_dim", time_dim},
        {"t_steps", t_steps},
        {"beta_start", beta_start},
        {"beta_end", beta_end},
        {"fusion", fusion},
    };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.resolution = j.value("resolution", c.resolution);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.d_model = j.value("d_model", c.d_model);
    c.vit_layers = j.value("vit_layers", c.vit_layers);
    c.vit_heads = j.value("vit_heads", c.vit_heads);
    c.vit_ffw_mult = j.value("vit_ffw_mult", c.vit_ffw_mult);
    c.d_pose = j.value("d_pose", c.d_pose);
    c.pose_hidden = j.value("pose_hidden", c.pose_hidden);
    c.pose_raw_concat = j.value("pose_raw_concat", c.pose_raw_concat);
    c.d_seed = j.value("d_seed", c.d_seed);
    c.cf_layers = j.value("cf_layers", c.cf_layers);
    c.cf_heads = j.value("cf_heads", c.cf_heads);
    c.cf_ffw_mult = j.value("cf_ffw_mult", c.cf_ffw_mult);
    c.normalize_condition = j.value("normalize_condition", c.normalize_condition);
    c.unet_channels = j.value("unet_channels", c.unet_channels);
    c.unet_heads = j.value("unet_heads", c.unet_heads);
    c.unet_groups = j.value("unet_groups", c.unet_groups);
    c.time_sin_dim = j.value("time_sin_dim", c.time_sin_dim);
    c.time_dim = j.value("time_dim", c.time_dim);
    c.t_steps = j.value("t_steps", c.t_steps);
    c.beta_start = j.value("beta_start", c.beta_start);
    c.beta_end = j.value("beta_end", c.beta_end);
    c.fusion = j.value("fusion", c.fusion);
    c.validate();
    return c;
}

}  // namespace valid
