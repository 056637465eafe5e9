#include "valid/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace valid {

Tensor& ParamStore::add(const std::string& name, Tensor init) {
    auto [it, inserted] = tensors.emplace(name, std::move(init));
    if (!inserted) throw std::logic_error("param store: duplicate name " + name);
    return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::logic_error("param store: missing name " + name);
    return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::logic_error("param store: missing name " + name);
    return it->second;
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(tensors.size());
    for (const auto& [k, v] : tensors) out.push_back(k);
    return out;
}

Var Binder::operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    const Tensor& t = ps_.get(name);
    Var v = (!trainable_ || trainable_->count(name)) ? g_.param(t) : g_.constant(t);
    cache_.emplace(name, v);
    return v;
}

const Tensor* Binder::grad_of(const std::string& name) const {
    auto it = cache_.find(name);
    if (it == cache_.end() || !g_.has_grad(it->second)) return nullptr;
    return &g_.grad(it->second);
}

Var linear(Graph& g, Var x, Var w, Var b) { return g.add_rowvec(g.matmul(x, w), b); }

Var multihead_attention(Graph& g, Var q_in, Var kv_in, const AttnVars& p, int heads) {
    Var q = linear(g, q_in, p.wq, p.bq);
    Var k = linear(g, kv_in, p.wk, p.bk);
    Var v = linear(g, kv_in, p.wv, p.bv);
    int d = g.val(q).cols();
    if (d % heads != 0) throw std::invalid_argument("attention: dim not divisible by heads");
    int hd = d / heads;
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Var> outs;
    outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        Var qh = g.slice_cols(q, h * hd, hd);
        Var kh = g.slice_cols(k, h * hd, hd);
        Var vh = g.slice_cols(v, h * hd, hd);
        Var scores = g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt);
        Var attn = g.softmax_rows(scores);
        outs.push_back(g.matmul(attn, vh));
    }
    Var merged = heads == 1 ? outs[0] : g.concat_cols(outs);
    return linear(g, merged, p.wo, p.bo);
}

void init_linear(ParamStore& ps, const std::string& prefix, int in, int out, Rng& rng, double wstd) {
    double std_ = wstd > 0 ? wstd : 1.0 / std::sqrt(static_cast<double>(in));
    ps.add(prefix + ".weight", Tensor::randn({in, out}, rng, std_));
    ps.add(prefix + ".bias", Tensor::zeros({out}));
}

void init_norm(ParamStore& ps, const std::string& prefix, int dim) {
    ps.add(prefix + ".gain", Tensor::full({dim}, 1.0));
    ps.add(prefix + ".bias", Tensor::zeros({dim}));
}

void init_attn(ParamStore& ps, const std::string& prefix, int dq, int dkv, int d, int d_out, Rng& rng,
               double wstd) {
    init_linear(ps, prefix + ".q", dq, d, rng, wstd);
    init_linear(ps, prefix + ".k", dkv, d, rng, wstd);
    init_linear(ps, prefix + ".v", dkv, d, rng, wstd);
    init_linear(ps, prefix + ".o", d, d_out, rng, wstd);
}

AttnVars bind_attn(Binder& bind, const std::string& prefix) {
    AttnVars a;
    a.wq = bind(prefix + ".q.weight");
    a.bq = bind(prefix + ".q.bias");
    a.wk = bind(prefix + ".k.weight");
    a.bk = bind(prefix + ".k.bias");
    a.wv = bind(prefix + ".v.weight");
    a.bv = bind(prefix + ".v.bias");
    a.wo = bind(prefix + ".o.weight");
    a.bo = bind(prefix + ".o.bias");
    return a;
}

}  // namespace valid
