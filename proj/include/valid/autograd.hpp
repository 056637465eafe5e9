#pragma once

#include <functional>
#include <vector>

#include "valid/tensor.hpp"

namespace valid {

class Graph;

// Handle into a Graph's node list.
struct Var {
    int i = -1;
    bool valid() const { return i >= 0; }
};

// Reverse-mode autodiff tape. A Graph owns the values and gradients of one
// forward pass; ops append nodes, backward() walks them in reverse creation
// order. Graphs are single-threaded; run one per worker.
//
// Constructed with grad_enabled=false the tape records values only, which is
// what inference-time sampling uses.
class Graph {
public:
    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // leaves
    Var constant(Tensor v);
    Var param(Tensor v);  // participates in backward when grads are enabled

    // elementwise / scalar
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double c);
    Var gelu(Var a);

    // 2D linear algebra
    Var matmul(Var a, Var b);
    Var transpose(Var a);
    Var add_rowvec(Var a, Var v);          // [m,n] + [n]
    Var tile_rows(Var v, int m);           // [n] -> [m,n]
    Var softmax_rows(Var a);
    Var layer_norm_rows(Var x, Var gain, Var bias, double eps = 1e-5);

    // shape plumbing
    Var reshape(Var a, std::vector<int> shape);
    Var concat_rows(const std::vector<Var>& parts);
    Var concat_cols(const std::vector<Var>& parts);
    Var slice_cols(Var a, int c0, int width);
    Var gather_rows(Var a, std::vector<int> idx);

    // reductions
    Var sum_all(Var a);
    Var mean_all(Var a);
    Var mean_rows(Var a);                  // [m,n] -> [1,n]

    // image ops on [C,H,W]
    Var conv2d(Var x, Var w, Var b, int stride, int pad);
    Var group_norm(Var x, int groups, Var gain, Var bias, double eps = 1e-5);
    Var add_channel_bias(Var x, Var v);    // [C,H,W] + [C]
    Var upsample_nearest2(Var x);
    Var chw_to_tokens(Var x);              // [C,H,W] -> [H*W, C]
    Var tokens_to_chw(Var t, int c, int h, int w);

    void backward(Var scalar_loss);

    const Tensor& val(Var v) const { return nodes_[v.i].value; }
    const Tensor& grad(Var v) const;
    bool has_grad(Var v) const { return !nodes_[v.i].grad.data.empty(); }
    bool requires_grad(Var v) const { return nodes_[v.i].requires_grad; }
    size_t size() const { return nodes_.size(); }

private:
    using BackFn = std::function<void(Graph&, int)>;

    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::vector<int> parents;
        BackFn back;
    };

    std::vector<Node> nodes_;
    bool grad_enabled_;

    Var make(Tensor value, const std::vector<Var>& parents, BackFn back);
    Tensor& grad_buf(int i);
    bool needs(int i) const { return nodes_[i].requires_grad; }
    friend struct GraphOps;
};

}  // namespace valid
