#pragma once

#include <cstdint>
#include <vector>

#include "valid/autograd.hpp"
#include "valid/config.hpp"
#include "valid/nn.hpp"

namespace valid::crossformer {

// The seed-token count is an architecture constant, independent of how many
// views or patches come in.
constexpr int kSeedCount = 64;

// 64 x d_seed standard-normal draws, deterministic in the seed.
Tensor init_seeds(uint64_t seed, int d_seed);

// layer weights under "crossformer.block{i}."; seed tokens under "seeds.tokens"
void init_crossformer_params(ParamStore& ps, const ModelConfig& cfg, Rng& rng, uint64_t seed_init);

// One block of Eq.-style cross attention: pre-normed seeds query the pooled
// kv rows, residual add, then pre-norm FFW with residual add.
Var cross_block(Graph& g, Binder& bind, const std::string& prefix, Var s_prev, Var kv,
                const ModelConfig& cfg);

// Concatenate the token sets, run cf_layers blocks starting from the seed
// tokens; output is always [64, d_seed].
Var fuse(Graph& g, Binder& bind, Var seeds, const std::vector<Var>& token_sets, const ModelConfig& cfg);
// variant used when the kv union was already assembled (e.g. after sampling)
Var fuse_kv(Graph& g, Binder& bind, Var seeds, Var kv, const ModelConfig& cfg);

// Uniform without-replacement row sample of the pooled union:
// max(1, floor(ratio * m_total)) indices, ascending. ratio 1 keeps everything.
std::vector<int> sample_indices(int m_total, double ratio, uint64_t rng_seed);

// Per-view-quota alternative: the same floor rule applied inside each view.
std::vector<int> sample_indices_per_view(const std::vector<int>& set_sizes, double ratio,
                                         uint64_t rng_seed);

// value-level forms of the spec operations
Tensor sample_tokens(const std::vector<Tensor>& token_sets, double ratio, uint64_t rng_seed);
Tensor fuse_values(const Tensor& seeds, const std::vector<Tensor>& token_sets, const ParamStore& ps,
                   const ModelConfig& cfg);

struct MacBreakdown {
    int64_t crossformer_macs = 0;
    int64_t unet_crossattn_macs = 0;
};

// Closed-form multiply-accumulate totals. The cross-former term scales with
// the sampled kv size; the U-Net cross-attention term sees exactly 64 tokens
// regardless of the number of views.
MacBreakdown mac_count(const ModelConfig& cfg, int n_views, double ratio);

}  // namespace valid::crossformer
