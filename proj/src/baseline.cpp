#include "valid/baseline.hpp"

#include <stdexcept>

#include "valid/crossformer.hpp"

namespace valid::baseline {

Var pool_fuse(Graph& g, Binder& bind, Var seeds, const std::vector<Var>& token_sets,
              const ModelConfig& cfg) {
    if (token_sets.empty()) throw std::invalid_argument("pool_fuse: no token sets");
    Var acc;
    for (size_t i = 0; i < token_sets.size(); ++i) {
        Var one = crossformer::fuse(g, bind, seeds, {token_sets[i]}, cfg);
        acc = i == 0 ? one : g.add(acc, one);
    }
    return token_sets.size() == 1 ? acc : g.scale(acc, 1.0 / static_cast<double>(token_sets.size()));
}

Var global_token_condition(Graph& g, Binder& bind, const std::vector<Var>& token_sets,
                           const ModelConfig& cfg) {
    if (token_sets.empty()) throw std::invalid_argument("global_token_condition: no token sets");
    Var kv = token_sets.size() == 1 ? token_sets[0] : g.concat_rows(token_sets);
    Var mean = g.mean_rows(kv);
    return linear(g, mean, bind("baseline.global_proj.weight"), bind("baseline.global_proj.bias"));
}

void init_global_proj(ParamStore& ps, const ModelConfig& cfg, Rng& rng) {
    init_linear(ps, "baseline.global_proj", cfg.token_width(), cfg.d_seed, rng);
}

Tensor pool_fuse_values(const Tensor& seeds, const std::vector<Tensor>& token_sets,
                        const ParamStore& ps, const ModelConfig& cfg) {
    Graph g(false);
    Binder bind(g, ps);
    std::vector<Var> sets;
    for (const Tensor& t : token_sets) sets.push_back(g.constant(t));
    return g.val(pool_fuse(g, bind, g.constant(seeds), sets, cfg));
}

Tensor global_token_condition_values(const std::vector<Tensor>& token_sets, const ParamStore& ps,
                                     const ModelConfig& cfg) {
    Graph g(false);
    Binder bind(g, ps);
    std::vector<Var> sets;
    for (const Tensor& t : token_sets) sets.push_back(g.constant(t));
    return g.val(global_token_condition(g, bind, sets, cfg));
}

}  // namespace valid::baseline
