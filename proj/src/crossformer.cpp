#include "valid/crossformer.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace valid::crossformer {

Tensor init_seeds(uint64_t seed, int d_seed) {
    Rng rng(seed);
    return Tensor::randn({kSeedCount, d_seed}, rng);
}

void init_crossformer_params(ParamStore& ps, const ModelConfig& cfg, Rng& rng, uint64_t seed_init) {
    ps.add("seeds.tokens", init_seeds(seed_init, cfg.d_seed));
    int d_ff = cfg.d_seed * cfg.cf_ffw_mult;
    for (int l = 0; l < cfg.cf_layers; ++l) {
        std::string p = "crossformer.block" + std::to_string(l);
        init_norm(ps, p + ".ln_q", cfg.d_seed);
        init_norm(ps, p + ".ln_kv", cfg.token_width());
        init_attn(ps, p + ".attn", cfg.d_seed, cfg.token_width(), cfg.d_seed, cfg.d_seed, rng);
        init_norm(ps, p + ".ffw.ln", cfg.d_seed);
        init_linear(ps, p + ".ffw.fc1", cfg.d_seed, d_ff, rng);
        init_linear(ps, p + ".ffw.fc2", d_ff, cfg.d_seed, rng);
    }
    if (cfg.normalize_condition) init_norm(ps, "crossformer.out_ln", cfg.d_seed);
}

Var cross_block(Graph& g, Binder& bind, const std::string& prefix, Var s_prev, Var kv,
                const ModelConfig& cfg) {
    if (g.val(kv).rows() < 1) throw std::invalid_argument("cross_block: empty kv");
    Var qn = g.layer_norm_rows(s_prev, bind(prefix + ".ln_q.gain"), bind(prefix + ".ln_q.bias"));
    Var kvn = g.layer_norm_rows(kv, bind(prefix + ".ln_kv.gain"), bind(prefix + ".ln_kv.bias"));
    AttnVars attn = bind_attn(bind, prefix + ".attn");
    Var s_mid = g.add(multihead_attention(g, qn, kvn, attn, cfg.cf_heads), s_prev);
    Var h = g.layer_norm_rows(s_mid, bind(prefix + ".ffw.ln.gain"), bind(prefix + ".ffw.ln.bias"));
    h = linear(g, h, bind(prefix + ".ffw.fc1.weight"), bind(prefix + ".ffw.fc1.bias"));
    h = g.gelu(h);
    h = linear(g, h, bind(prefix + ".ffw.fc2.weight"), bind(prefix + ".ffw.fc2.bias"));
    return g.add(h, s_mid);
}

Var fuse_kv(Graph& g, Binder& bind, Var seeds, Var kv, const ModelConfig& cfg) {
    const Tensor& tkv = g.val(kv);
    if (tkv.rows() < 1) throw std::invalid_argument("fuse: empty kv union");
    if (tkv.cols() != cfg.token_width())
        throw std::invalid_argument("fuse: kv width " + std::to_string(tkv.cols()) +
                                    " does not match configured token width " +
                                    std::to_string(cfg.token_width()));
    Var s = seeds;
    for (int l = 0; l < cfg.cf_layers; ++l)
        s = cross_block(g, bind, "crossformer.block" + std::to_string(l), s, kv, cfg);
    if (cfg.normalize_condition)
        s = g.layer_norm_rows(s, bind("crossformer.out_ln.gain"), bind("crossformer.out_ln.bias"));
    return s;
}

Var fuse(Graph& g, Binder& bind, Var seeds, const std::vector<Var>& token_sets, const ModelConfig& cfg) {
    if (token_sets.empty()) throw std::invalid_argument("fuse: no token sets");
    Var kv = token_sets.size() == 1 ? token_sets[0] : g.concat_rows(token_sets);
    return fuse_kv(g, bind, seeds, kv, cfg);
}

std::vector<int> sample_indices(int m_total, double ratio, uint64_t rng_seed) {
    if (!(ratio > 0.0 && ratio <= 1.0))
        throw std::invalid_argument("sample_indices: ratio " + std::to_string(ratio) + " outside (0, 1]");
    if (m_total < 1) throw std::invalid_argument("sample_indices: empty union");
    int count = std::max(1, static_cast<int>(std::floor(ratio * m_total)));
    if (count >= m_total) {
        std::vector<int> all(m_total);
        for (int i = 0; i < m_total; ++i) all[i] = i;
        return all;
    }
    Rng rng(rng_seed);
    return rng.sample_without_replacement(m_total, count);
}

std::vector<int> sample_indices_per_view(const std::vector<int>& set_sizes, double ratio,
                                         uint64_t rng_seed) {
    if (!(ratio > 0.0 && ratio <= 1.0))
        throw std::invalid_argument("sample_indices_per_view: ratio outside (0, 1]");
    Rng rng(rng_seed);
    std::vector<int> out;
    int base = 0;
    for (int sz : set_sizes) {
        int count = std::max(1, static_cast<int>(std::floor(ratio * sz)));
        if (count >= sz) {
            for (int i = 0; i < sz; ++i) out.push_back(base + i);
        } else {
            for (int i : rng.sample_without_replacement(sz, count)) out.push_back(base + i);
        }
        base += sz;
    }
    return out;
}

Tensor sample_tokens(const std::vector<Tensor>& token_sets, double ratio, uint64_t rng_seed) {
    if (token_sets.empty()) throw std::invalid_argument("sample_tokens: no token sets");
    int width = token_sets[0].cols();
    int m_total = 0;
    for (const Tensor& t : token_sets) {
        if (t.cols() != width) throw std::invalid_argument("sample_tokens: width mismatch");
        m_total += t.rows();
    }
    std::vector<int> idx = sample_indices(m_total, ratio, rng_seed);
    Tensor out({static_cast<int>(idx.size()), width});
    int row = 0;
    for (int i : idx) {
        int set = 0, local = i;
        while (local >= token_sets[set].rows()) local -= token_sets[set++].rows();
        for (int j = 0; j < width; ++j) out.at(row, j) = token_sets[set].at(local, j);
        ++row;
    }
    return out;
}

Tensor fuse_values(const Tensor& seeds, const std::vector<Tensor>& token_sets, const ParamStore& ps,
                   const ModelConfig& cfg) {
    Graph g(false);
    Binder bind(g, ps);
    std::vector<Var> sets;
    sets.reserve(token_sets.size());
    for (const Tensor& t : token_sets) sets.push_back(g.constant(t));
    return g.val(fuse(g, bind, g.constant(seeds), sets, cfg));
}

MacBreakdown mac_count(const ModelConfig& cfg, int n_views, double ratio) {
    if (n_views < 1) throw std::invalid_argument("mac_count: n_views must be >= 1");
    if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("mac_count: ratio outside (0, 1]");

    const int64_t s = kSeedCount;
    const int64_t d = cfg.d_seed;
    const int64_t d_kv = cfg.token_width();
    const int64_t d_ff = static_cast<int64_t>(cfg.cf_ffw_mult) * d;
    const int64_t m_kv = std::max<int64_t>(
        1, static_cast<int64_t>(std::floor(ratio * static_cast<double>(n_views) * cfg.n_patches())));

    int64_t per_layer = 0;
    per_layer += 2 * m_kv * d_kv * d;  // key and value projections over the union
    per_layer += 2 * s * m_kv * d;     // attention scores and weighted values
    per_layer += s * d * d;            // query projection
    per_layer += s * d * d;            // output projection
    per_layer += 2 * s * d * d_ff;     // feed-forward on the 64 seeds
    MacBreakdown out;
    out.crossformer_macs = static_cast<int64_t>(cfg.cf_layers) * per_layer;

    // each U-Net attention site consumes exactly the 64 fused tokens
    int side = cfg.resolution;
    for (size_t l = 0; l < cfg.unet_channels.size(); ++l) {
        const int64_t c = cfg.unet_channels[l];
        const int64_t p = static_cast<int64_t>(side) * side;
        out.unet_crossattn_macs += p * c * c;      // query projection
        out.unet_crossattn_macs += 2 * s * d * c;  // key and value projections
        out.unet_crossattn_macs += 2 * p * s * c;  // scores and weighted values
        out.unet_crossattn_macs += p * c * c;      // output projection
        side /= 2;
    }
    return out;
}

}  // namespace valid::crossformer
