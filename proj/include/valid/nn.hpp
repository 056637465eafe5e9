#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "valid/autograd.hpp"
#include "valid/tensor.hpp"

namespace valid {

// Named parameter tensors. std::map keeps iteration order stable, which the
// checkpoint format and deterministic init rely on.
struct ParamStore {
    std::map<std::string, Tensor> tensors;

    Tensor& add(const std::string& name, Tensor init);
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const { return tensors.count(name) != 0; }
    std::vector<std::string> names() const;
};

// Binds store entries into a Graph, one leaf per name per pass. Names in the
// trainable set become differentiable leaves; everything else enters as a
// constant, which also prunes backprop below frozen subgraphs.
class Binder {
public:
    Binder(Graph& g, const ParamStore& ps, const std::set<std::string>* trainable = nullptr)
        : g_(g), ps_(ps), trainable_(trainable) {}

    Var operator()(const std::string& name);

    // nullptr when the parameter was never used or carries no gradient
    const Tensor* grad_of(const std::string& name) const;

private:
    Graph& g_;
    const ParamStore& ps_;
    const std::set<std::string>* trainable_;
    std::map<std::string, Var> cache_;
};

Var linear(Graph& g, Var x, Var w, Var b);

struct AttnVars {
    Var wq, bq, wk, bk, wv, bv, wo, bo;
};

// Scaled dot-product multi-head attention. q_in: [Nq, dq], kv_in: [Nk, dkv];
// wq: [dq, d], wk/wv: [dkv, d], wo: [d, d_out]; d must divide by heads.
Var multihead_attention(Graph& g, Var q_in, Var kv_in, const AttnVars& p, int heads);

// parameter-init helpers (weights N(0, std), biases zero)
// wstd <= 0 selects the 1/sqrt(fan_in) default
void init_linear(ParamStore& ps, const std::string& prefix, int in, int out, Rng& rng, double wstd = 0.0);
void init_norm(ParamStore& ps, const std::string& prefix, int dim);
void init_attn(ParamStore& ps, const std::string& prefix, int dq, int dkv, int d, int d_out, Rng& rng,
               double wstd = 0.0);

AttnVars bind_attn(Binder& bind, const std::string& prefix);

}  // namespace valid
