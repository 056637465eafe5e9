#include "valid/tokenizer.hpp"

#include <stdexcept>
#include <string>

namespace valid::tokenizer {

PatchSequence patchify(const Image& img, int patch_size) {
    if (patch_size <= 0 || img.height % patch_size != 0 || img.width % patch_size != 0)
        throw std::invalid_argument("patchify: patch size " + std::to_string(patch_size) +
                                    " does not divide " + std::to_string(img.height) + "x" +
                                    std::to_string(img.width));
    int py = img.height / patch_size;
    int px = img.width / patch_size;
    PatchSequence out;
    out.n_patches = py * px;
    out.patch_dim = patch_size * patch_size * 3;
    out.values = Tensor({out.n_patches, out.patch_dim});
    for (int gy = 0; gy < py; ++gy)
        for (int gx = 0; gx < px; ++gx) {
            int row = gy * px + gx;
            int k = 0;
            for (int dy = 0; dy < patch_size; ++dy)
                for (int dx = 0; dx < patch_size; ++dx)
                    for (int c = 0; c < 3; ++c)
                        out.values.at(row, k++) = img.at(gy * patch_size + dy, gx * patch_size + dx, c);
        }
    return out;
}

Image unpatchify(const PatchSequence& patches, int height, int width, int patch_size) {
    int py = height / patch_size;
    int px = width / patch_size;
    if (patches.n_patches != py * px || patches.patch_dim != patch_size * patch_size * 3)
        throw std::invalid_argument("unpatchify: geometry mismatch");
    Image img(height, width);
    for (int gy = 0; gy < py; ++gy)
        for (int gx = 0; gx < px; ++gx) {
            int row = gy * px + gx;
            int k = 0;
            for (int dy = 0; dy < patch_size; ++dy)
                for (int dx = 0; dx < patch_size; ++dx)
                    for (int c = 0; c < 3; ++c)
                        img.at(gy * patch_size + dy, gx * patch_size + dx, c) = patches.values.at(row, k++);
        }
    return img;
}

void init_vit_params(ParamStore& ps, const ModelConfig& cfg, Rng& rng) {
    int patch_dim = cfg.patch_size * cfg.patch_size * 3;
    init_linear(ps, "vit.patch_proj", patch_dim, cfg.d_model, rng);
    ps.add("vit.pos_table", Tensor::randn({cfg.n_patches(), cfg.d_model}, rng, 0.02));
    for (int l = 0; l < cfg.vit_layers; ++l) {
        std::string p = "vit.block" + std::to_string(l);
        init_norm(ps, p + ".ln1", cfg.d_model);
        init_attn(ps, p + ".attn", cfg.d_model, cfg.d_model, cfg.d_model, cfg.d_model, rng);
        init_norm(ps, p + ".ln2", cfg.d_model);
        init_linear(ps, p + ".ffw.fc1", cfg.d_model, cfg.d_model * cfg.vit_ffw_mult, rng);
        init_linear(ps, p + ".ffw.fc2", cfg.d_model * cfg.vit_ffw_mult, cfg.d_model, rng);
    }
    init_norm(ps, "vit.final_ln", cfg.d_model);
}

void init_pose_mlp_params(ParamStore& ps, const ModelConfig& cfg, Rng& rng) {
    init_linear(ps, "pose_mlp.fc1", 4, cfg.pose_hidden, rng);
    init_linear(ps, "pose_mlp.fc2", cfg.pose_hidden, cfg.d_pose, rng);
}

Var encode(Graph& g, Binder& bind, Var patches, const ModelConfig& cfg) {
    const Tensor& tp = g.val(patches);
    int patch_dim = cfg.patch_size * cfg.patch_size * 3;
    if (tp.ndim() != 2 || tp.cols() != patch_dim)
        throw std::invalid_argument("encode: patch dim " + shape_str(tp.shape) + " does not match weights (" +
                                    std::to_string(patch_dim) + ")");
    if (tp.rows() != cfg.n_patches())
        throw std::invalid_argument("encode: patch count mismatch with positional table");

    Var x = linear(g, patches, bind("vit.patch_proj.weight"), bind("vit.patch_proj.bias"));
    x = g.add(x, bind("vit.pos_table"));
    for (int l = 0; l < cfg.vit_layers; ++l) {
        std::string p = "vit.block" + std::to_string(l);
        Var n1 = g.layer_norm_rows(x, bind(p + ".ln1.gain"), bind(p + ".ln1.bias"));
        AttnVars attn = bind_attn(bind, p + ".attn");
        x = g.add(x, multihead_attention(g, n1, n1, attn, cfg.vit_heads));
        Var n2 = g.layer_norm_rows(x, bind(p + ".ln2.gain"), bind(p + ".ln2.bias"));
        Var h = linear(g, n2, bind(p + ".ffw.fc1.weight"), bind(p + ".ffw.fc1.bias"));
        h = g.gelu(h);
        h = linear(g, h, bind(p + ".ffw.fc2.weight"), bind(p + ".ffw.fc2.bias"));
        x = g.add(x, h);
    }
    return g.layer_norm_rows(x, bind("vit.final_ln.gain"), bind("vit.final_ln.bias"));
}

Var pose_embed(Graph& g, Binder& bind, const geometry::RelativePose& rel, const ModelConfig& cfg) {
    Var in = g.constant(Tensor({1, 4}, {rel.d_polar, rel.sin_d_azimuth, rel.cos_d_azimuth, rel.d_radius}));
    Var h = linear(g, in, bind("pose_mlp.fc1.weight"), bind("pose_mlp.fc1.bias"));
    h = g.gelu(h);
    return linear(g, h, bind("pose_mlp.fc2.weight"), bind("pose_mlp.fc2.bias"));
}

Var entangle(Graph& g, Var tokens, Var pose_vec) {
    int n = g.val(tokens).rows();
    return g.concat_cols({tokens, g.tile_rows(pose_vec, n)});
}

std::vector<Var> tokenize_views(Graph& g, Binder& bind, const std::vector<ViewInput>& views,
                                const ModelConfig& cfg) {
    if (views.empty()) throw std::invalid_argument("tokenize_views: need at least one view");
    for (const ViewInput& v : views)
        if (v.image.height != views[0].image.height || v.image.width != views[0].image.width)
            throw std::invalid_argument("tokenize_views: mixed image resolutions");
    std::vector<Var> out;
    out.reserve(views.size());
    for (const ViewInput& v : views) {
        PatchSequence patches = patchify(v.image, cfg.patch_size);
        Var tokens = encode(g, bind, g.constant(std::move(patches.values)), cfg);
        Var suffix;
        if (cfg.pose_raw_concat)
            suffix = g.constant(Tensor(
                {1, 4}, {v.rel.d_polar, v.rel.sin_d_azimuth, v.rel.cos_d_azimuth, v.rel.d_radius}));
        else
            suffix = pose_embed(g, bind, v.rel, cfg);
        out.push_back(entangle(g, tokens, suffix));
    }
    return out;
}

Tensor encode_tokens(const PatchSequence& patches, const ParamStore& ps, const ModelConfig& cfg) {
    Graph g(false);
    Binder bind(g, ps);
    return g.val(encode(g, bind, g.constant(patches.values), cfg));
}

Tensor pose_embedding(const geometry::RelativePose& rel, const ParamStore& ps, const ModelConfig& cfg) {
    Graph g(false);
    Binder bind(g, ps);
    return g.val(pose_embed(g, bind, rel, cfg));
}

Tensor entangle_tokens(const Tensor& tokens, const Tensor& pose_vec) {
    Graph g(false);
    return g.val(entangle(g, g.constant(tokens), g.constant(pose_vec)));
}

std::vector<Tensor> tokenize_views_values(const std::vector<ViewInput>& views, const ParamStore& ps,
                                          const ModelConfig& cfg) {
    Graph g(false);
    Binder bind(g, ps);
    std::vector<Var> vars = tokenize_views(g, bind, views, cfg);
    std::vector<Tensor> out;
    out.reserve(vars.size());
    for (Var v : vars) out.push_back(g.val(v));
    return out;
}

}  // namespace valid::tokenizer
