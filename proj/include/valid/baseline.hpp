#pragma once

#include <vector>

#include "valid/autograd.hpp"
#include "valid/config.hpp"
#include "valid/nn.hpp"

namespace valid::baseline {

// Mean of per-view fused conditions: each view runs through the cross former
// alone, then the 64 x d_seed outputs are averaged elementwise.
Var pool_fuse(Graph& g, Binder& bind, Var seeds, const std::vector<Var>& token_sets,
              const ModelConfig& cfg);

// Single coarse condition token: mean over all pose-image tokens followed by a
// learned projection to d_seed. Output is [1, d_seed].
Var global_token_condition(Graph& g, Binder& bind, const std::vector<Var>& token_sets,
                           const ModelConfig& cfg);

void init_global_proj(ParamStore& ps, const ModelConfig& cfg, Rng& rng);

// value-level wrappers
Tensor pool_fuse_values(const Tensor& seeds, const std::vector<Tensor>& token_sets,
                        const ParamStore& ps, const ModelConfig& cfg);
Tensor global_token_condition_values(const std::vector<Tensor>& token_sets, const ParamStore& ps,
                                     const ModelConfig& cfg);

}  // namespace valid::baseline
