#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <functional>

#include "support/finite_diff.hpp"
#include "valid/autograd.hpp"
#include "valid/nn.hpp"
#include "valid/rng.hpp"

using namespace valid;
using testsupport::central_diff;
using testsupport::rel_err;

namespace {

// Generic op check: `build` assembles a scalar loss from leaf Vars. Analytic
// gradients from one backward pass are compared against central differences
// computed by rebuilding the graph around perturbed leaf values.
void check_grads(const std::function<Var(Graph&, std::vector<Var>&)>& build,
                 std::vector<Tensor> leaves, double tol = 5e-6, double h = 1e-5) {
    Graph g(true);
    std::vector<Var> vars;
    for (const Tensor& t : leaves) vars.push_back(g.param(t));
    Var loss = build(g, vars);
    g.backward(loss);

    auto eval = [&]() {
        Graph g2(false);
        std::vector<Var> vs;
        for (const Tensor& t : leaves) vs.push_back(g2.constant(t));
        return g2.val(build(g2, vs)).data[0];
    };

    double max_rel = 0;
    for (size_t li = 0; li < leaves.size(); ++li) {
        for (int64_t i = 0; i < leaves[li].numel(); ++i) {
            double fd = central_diff(leaves[li], i, h, eval);
            double an = g.has_grad(vars[li]) ? g.grad(vars[li]).data[i] : 0.0;
            max_rel = std::max(max_rel, rel_err(an, fd));
        }
    }
    CHECK(max_rel < tol);
}

Tensor rand_t(std::vector<int> shape, Rng& rng, double stddev = 1.0) {
    return Tensor::randn(std::move(shape), rng, stddev);
}

// scalarize an arbitrary output by a fixed random weighting
Var weigh(Graph& g, Var out, uint64_t seed) {
    Rng rng(seed);
    Tensor r = Tensor::randn(g.val(out).shape, rng);
    return g.sum_all(g.mul(out, g.constant(r)));
}

}  // namespace

TEST_CASE("backward basics: chain and reuse accumulate") {
    Graph g;
    Var x = g.param(Tensor::scalar(3.0));
    Var y = g.mul(x, x);  // reuse of the same node
    Var loss = g.sum_all(y);
    g.backward(loss);
    CHECK(g.grad(x).data[0] == doctest::Approx(6.0));
}

TEST_CASE("no-grad graphs skip the tape") {
    Graph g(false);
    Var x = g.param(Tensor::scalar(2.0));
    Var y = g.mul(x, x);
    CHECK(g.val(y).data[0] == doctest::Approx(4.0));
    CHECK(!g.requires_grad(y));
}

TEST_CASE("elementwise ops match finite differences") {
    Rng rng(11);
    Tensor a = rand_t({3, 4}, rng), b = rand_t({3, 4}, rng);
    check_grads([](Graph& g, std::vector<Var>& v) { return weigh(g, g.add(v[0], v[1]), 1); }, {a, b});
    check_grads([](Graph& g, std::vector<Var>& v) { return weigh(g, g.sub(v[0], v[1]), 2); }, {a, b});
    check_grads([](Graph& g, std::vector<Var>& v) { return weigh(g, g.mul(v[0], v[1]), 3); }, {a, b});
    check_grads([](Graph& g, std::vector<Var>& v) { return weigh(g, g.scale(v[0], -1.7), 4); }, {a});
    check_grads([](Graph& g, std::vector<Var>& v) { return weigh(g, g.gelu(v[0]), 5); }, {a});
}

TEST_CASE("matmul family matches finite differences") {
    Rng rng(12);
    Tensor a = rand_t({3, 5}, rng), b = rand_t({5, 2}, rng), v = rand_t({5}, rng);
    check_grads([](Graph& g, std::vector<Var>& vs) { return weigh(g, g.matmul(vs[0], vs[1]), 6); },
                {a, b});
    check_grads([](Graph& g, std::vector<Var>& vs) { return weigh(g, g.transpose(vs[0]), 7); }, {a});
    check_grads([](Graph& g, std::vector<Var>& vs) { return weigh(g, g.add_rowvec(vs[0], vs[1]), 8); },
                {a, v});
    check_grads([](Graph& g, std::vector<Var>& vs) { return weigh(g, g.tile_rows(vs[0], 4), 9); }, {v});
}

TEST_CASE("softmax and layer norm match finite differences") {
    Rng rng(13);
    Tensor a = rand_t({4, 6}, rng), gain = rand_t({6}, rng, 0.5), bias = rand_t({6}, rng, 0.5);
    for (double& x : gain.data) x += 1.0;
    check_grads([](Graph& g, std::vector<Var>& v) { return weigh(g, g.softmax_rows(v[0]), 10); }, {a},
                1e-5);
    check_grads(
        [](Graph& g, std::vector<Var>& v) {
            return weigh(g, g.layer_norm_rows(v[0], v[1], v[2]), 11);
        },
        {a, gain, bias}, 1e-5);
}

TEST_CASE("shape plumbing matches finite differences") {
    Rng rng(14);
    Tensor a = rand_t({3, 4}, rng), b = rand_t({2, 4}, rng), c = rand_t({3, 2}, rng);
    check_grads(
        [](Graph& g, std::vector<Var>& v) { return weigh(g, g.reshape(v[0], {4, 3}), 20); }, {a});
    check_grads(
        [](Graph& g, std::vector<Var>& v) { return weigh(g, g.concat_rows({v[0], v[1]}), 21); },
        {a, b});
    check_grads(
        [](Graph& g, std::vector<Var>& v) { return weigh(g, g.concat_cols({v[0], v[1]}), 22); },
        {a, c});
    check_grads(
        [](Graph& g, std::vector<Var>& v) { return weigh(g, g.slice_cols(v[0], 1, 2), 23); }, {a});
    check_grads(
        [](Graph& g, std::vector<Var>& v) { return weigh(g, g.gather_rows(v[0], {2, 0, 2}), 24); },
        {a});
}

TEST_CASE("reductions match finite differences") {
    Rng rng(15);
    Tensor a = rand_t({3, 4}, rng);
    check_grads([](Graph& g, std::vector<Var>& v) { return g.sum_all(v[0]); }, {a});
    check_grads([](Graph& g, std::vector<Var>& v) { return g.mean_all(v[0]); }, {a});
    check_grads([](Graph& g, std::vector<Var>& v) { return weigh(g, g.mean_rows(v[0]), 25); }, {a});
}

TEST_CASE("conv2d matches finite differences") {
    Rng rng(16);
    Tensor x = rand_t({2, 6, 6}, rng);
    Tensor w = rand_t({3, 2, 3, 3}, rng, 0.5);
    Tensor b = rand_t({3}, rng, 0.5);
    check_grads(
        [](Graph& g, std::vector<Var>& v) { return weigh(g, g.conv2d(v[0], v[1], v[2], 1, 1), 30); },
        {x, w, b}, 1e-5);
    check_grads(
        [](Graph& g, std::vector<Var>& v) { return weigh(g, g.conv2d(v[0], v[1], v[2], 2, 1), 31); },
        {x, w, b}, 1e-5);
    Tensor w1 = rand_t({4, 2, 1, 1}, rng, 0.5);
    Tensor b1 = rand_t({4}, rng, 0.5);
    check_grads(
        [](Graph& g, std::vector<Var>& v) { return weigh(g, g.conv2d(v[0], v[1], v[2], 1, 0), 32); },
        {x, w1, b1}, 1e-5);
}

TEST_CASE("image-shaped ops match finite differences") {
    Rng rng(17);
    Tensor x = rand_t({4, 3, 3}, rng);
    Tensor gain = rand_t({4}, rng, 0.3), bias = rand_t({4}, rng, 0.3);
    for (double& v : gain.data) v += 1.0;
    check_grads(
        [](Graph& g, std::vector<Var>& v) {
            return weigh(g, g.group_norm(v[0], 2, v[1], v[2]), 40);
        },
        {x, gain, bias}, 1e-5);
    Tensor vb = rand_t({4}, rng);
    check_grads(
        [](Graph& g, std::vector<Var>& v) { return weigh(g, g.add_channel_bias(v[0], v[1]), 41); },
        {x, vb});
    check_grads(
        [](Graph& g, std::vector<Var>& v) { return weigh(g, g.upsample_nearest2(v[0]), 42); }, {x});
    check_grads([](Graph& g, std::vector<Var>& v) { return weigh(g, g.chw_to_tokens(v[0]), 43); }, {x});
    Tensor tok = rand_t({9, 4}, rng);
    check_grads(
        [](Graph& g, std::vector<Var>& v) { return weigh(g, g.tokens_to_chw(v[0], 4, 3, 3), 44); },
        {tok});
}

TEST_CASE("multi-head attention composition matches finite differences") {
    Rng rng(18);
    Tensor q_in = rand_t({5, 6}, rng);
    Tensor kv_in = rand_t({7, 4}, rng);
    Tensor wq = rand_t({6, 6}, rng, 0.4), bq = rand_t({6}, rng, 0.2);
    Tensor wk = rand_t({4, 6}, rng, 0.4), bk = rand_t({6}, rng, 0.2);
    Tensor wv = rand_t({4, 6}, rng, 0.4), bv = rand_t({6}, rng, 0.2);
    Tensor wo = rand_t({6, 6}, rng, 0.4), bo = rand_t({6}, rng, 0.2);
    check_grads(
        [](Graph& g, std::vector<Var>& v) {
            AttnVars p{v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9]};
            return weigh(g, multihead_attention(g, v[0], v[1], p, 2), 50);
        },
        {q_in, kv_in, wq, bq, wk, bk, wv, bv, wo, bo}, 5e-5);
}

TEST_CASE("frozen leaves prune gradient work but not values") {
    Graph g;
    Var frozen = g.constant(Tensor::scalar(5.0));
    Var active = g.param(Tensor::scalar(2.0));
    Var loss = g.sum_all(g.mul(frozen, active));
    g.backward(loss);
    CHECK(g.grad(active).data[0] == doctest::Approx(5.0));
    CHECK(!g.has_grad(frozen));
}
