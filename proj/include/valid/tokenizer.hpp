#pragma once

#include <vector>

#include "valid/autograd.hpp"
#include "valid/config.hpp"
#include "valid/geometry.hpp"
#include "valid/image.hpp"
#include "valid/nn.hpp"

namespace valid::tokenizer {

// Flattened non-overlapping patches, one per row, raster order.
struct PatchSequence {
    int n_patches = 0;
    int patch_dim = 0;
    Tensor values;  // [n_patches, patch_dim]
};

PatchSequence patchify(const Image& img, int patch_size);
Image unpatchify(const PatchSequence& patches, int height, int width, int patch_size);

void init_vit_params(ParamStore& ps, const ModelConfig& cfg, Rng& rng);
void init_pose_mlp_params(ParamStore& ps, const ModelConfig& cfg, Rng& rng);

// ViT encoder: patch projection + learned positional table + pre-norm blocks.
// Returns [n_patches, d_model].
Var encode(Graph& g, Binder& bind, Var patches, const ModelConfig& cfg);

// Two affine layers around a GELU; returns [1, d_pose].
Var pose_embed(Graph& g, Binder& bind, const geometry::RelativePose& rel, const ModelConfig& cfg);

// Row-wise [token || pose] concatenation (every row gets the same suffix).
Var entangle(Graph& g, Var tokens, Var pose_vec);

struct ViewInput {
    Image image;
    geometry::RelativePose rel;
};

// Per-view pipeline patchify -> encode -> pose suffix; one output per view,
// in input order. Views never see each other here.
std::vector<Var> tokenize_views(Graph& g, Binder& bind, const std::vector<ViewInput>& views,
                                const ModelConfig& cfg);

// value-level conveniences (build a private no-grad graph)
Tensor encode_tokens(const PatchSequence& patches, const ParamStore& ps, const ModelConfig& cfg);
Tensor pose_embedding(const geometry::RelativePose& rel, const ParamStore& ps, const ModelConfig& cfg);
Tensor entangle_tokens(const Tensor& tokens, const Tensor& pose_vec);
std::vector<Tensor> tokenize_views_values(const std::vector<ViewInput>& views, const ParamStore& ps,
                                          const ModelConfig& cfg);

}  // namespace valid::tokenizer
