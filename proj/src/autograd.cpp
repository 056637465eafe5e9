#include "valid/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace valid {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_dx(double x) {
    double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

void check2d(const Tensor& t, const char* who) {
    if (t.ndim() != 2) throw std::invalid_argument(std::string(who) + ": expected 2D tensor, got " + shape_str(t.shape));
}

}  // namespace

Var Graph::make(Tensor value, const std::vector<Var>& parents, BackFn back) {
    Node n;
    n.value = std::move(value);
    if (grad_enabled_) {
        for (Var p : parents)
            if (nodes_[p.i].requires_grad) { n.requires_grad = true; break; }
        if (n.requires_grad) {
            n.parents.reserve(parents.size());
            for (Var p : parents) n.parents.push_back(p.i);
            n.back = std::move(back);
        }
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Tensor& Graph::grad_buf(int i) {
    Node& n = nodes_[i];
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
    return n.grad;
}

const Tensor& Graph::grad(Var v) const {
    const Node& n = nodes_[v.i];
    if (n.grad.data.empty()) throw std::logic_error("grad: no gradient recorded for this node");
    return n.grad;
}

Var Graph::constant(Tensor v) { return make(std::move(v), {}, nullptr); }

Var Graph::param(Tensor v) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = grad_enabled_;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

void Graph::backward(Var loss) {
    if (nodes_[loss.i].value.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar");
    if (!nodes_[loss.i].requires_grad)
        throw std::logic_error("backward: loss does not depend on any parameter");

    // reachable requires-grad nodes, processed in reverse creation order
    std::vector<char> seen(nodes_.size(), 0);
    std::vector<int> stack{loss.i}, order;
    seen[loss.i] = 1;
    while (!stack.empty()) {
        int i = stack.back();
        stack.pop_back();
        order.push_back(i);
        for (int p : nodes_[i].parents)
            if (!seen[p] && nodes_[p].requires_grad) {
                seen[p] = 1;
                stack.push_back(p);
            }
    }
    std::sort(order.begin(), order.end(), std::greater<int>());

    grad_buf(loss.i).data[0] = 1.0;
    for (int i : order) {
        Node& n = nodes_[i];
        if (n.back && !n.grad.data.empty()) n.back(*this, i);
    }
}

// ---------------------------------------------------------------- elementwise

Var Graph::add(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (!ta.same_shape(tb)) throw std::invalid_argument("add: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Tensor out = ta;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += tb.data[i];
    int ai = a.i, bi = b.i;
    return make(std::move(out), {a, b}, [ai, bi](Graph& g, int self) {
        const Tensor& go = g.nodes_[self].grad;
        if (g.needs(ai)) {
            Tensor& ga = g.grad_buf(ai);
            for (int64_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i];
        }
        if (g.needs(bi)) {
            Tensor& gb = g.grad_buf(bi);
            for (int64_t i = 0; i < go.numel(); ++i) gb.data[i] += go.data[i];
        }
    });
}

Var Graph::sub(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (!ta.same_shape(tb)) throw std::invalid_argument("sub: shape mismatch");
    Tensor out = ta;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] -= tb.data[i];
    int ai = a.i, bi = b.i;
    return make(std::move(out), {a, b}, [ai, bi](Graph& g, int self) {
        const Tensor& go = g.nodes_[self].grad;
        if (g.needs(ai)) {
            Tensor& ga = g.grad_buf(ai);
            for (int64_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i];
        }
        if (g.needs(bi)) {
            Tensor& gb = g.grad_buf(bi);
            for (int64_t i = 0; i < go.numel(); ++i) gb.data[i] -= go.data[i];
        }
    });
}

Var Graph::mul(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (!ta.same_shape(tb)) throw std::invalid_argument("mul: shape mismatch");
    Tensor out = ta;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] *= tb.data[i];
    int ai = a.i, bi = b.i;
    return make(std::move(out), {a, b}, [ai, bi](Graph& g, int self) {
        const Tensor& go = g.nodes_[self].grad;
        const Tensor& va = g.nodes_[ai].value;
        const Tensor& vb = g.nodes_[bi].value;
        if (g.needs(ai)) {
            Tensor& ga = g.grad_buf(ai);
            for (int64_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i] * vb.data[i];
        }
        if (g.needs(bi)) {
            Tensor& gb = g.grad_buf(bi);
            for (int64_t i = 0; i < go.numel(); ++i) gb.data[i] += go.data[i] * va.data[i];
        }
    });
}

Var Graph::scale(Var a, double c) {
    Tensor out = val(a);
    for (double& x : out.data) x *= c;
    int ai = a.i;
    return make(std::move(out), {a}, [ai, c](Graph& g, int self) {
        const Tensor& go = g.nodes_[self].grad;
        Tensor& ga = g.grad_buf(ai);
        for (int64_t i = 0; i < go.numel(); ++i) ga.data[i] += c * go.data[i];
    });
}

Var Graph::gelu(Var a) {
    Tensor out = val(a);
    for (double& x : out.data) x = gelu_fwd(x);
    int ai = a.i;
    return make(std::move(out), {a}, [ai](Graph& g, int self) {
        const Tensor& go = g.nodes_[self].grad;
        const Tensor& va = g.nodes_[ai].value;
        Tensor& ga = g.grad_buf(ai);
        for (int64_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i] * gelu_dx(va.data[i]);
    });
}

// ------------------------------------------------------------- linear algebra

Var Graph::matmul(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    check2d(ta, "matmul");
    check2d(tb, "matmul");
    if (ta.cols() != tb.rows())
        throw std::invalid_argument("matmul: inner dims " + shape_str(ta.shape) + " x " + shape_str(tb.shape));
    int m = ta.rows(), k = ta.cols(), n = tb.cols();
    Tensor out({m, n});
    gemm(false, false, m, n, k, 1.0, ta.ptr(), tb.ptr(), 0.0, out.ptr());
    int ai = a.i, bi = b.i;
    return make(std::move(out), {a, b}, [ai, bi, m, n, k](Graph& g, int self) {
        const Tensor& go = g.nodes_[self].grad;
        const Tensor& va = g.nodes_[ai].value;
        const Tensor& vb = g.nodes_[bi].value;
        if (g.needs(ai)) gemm(false, true, m, k, n, 1.0, go.ptr(), vb.ptr(), 1.0, g.grad_buf(ai).ptr());
        if (g.needs(bi)) gemm(true, false, k, n, m, 1.0, va.ptr(), go.ptr(), 1.0, g.grad_buf(bi).ptr());
    });
}

Var Graph::transpose(Var a) {
    const Tensor& ta = val(a);
    check2d(ta, "transpose");
    int m = ta.rows(), n = ta.cols();
    Tensor out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(j, i) = ta.at(i, j);
    int ai = a.i;
    return make(std::move(out), {a}, [ai, m, n](Graph& g, int self) {
        const Tensor& go = g.nodes_[self].grad;
        Tensor& ga = g.grad_buf(ai);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) ga.at(i, j) += go.at(j, i);
    });
}

Var Graph::add_rowvec(Var a, Var v) {
    const Tensor& ta = val(a);
    const Tensor& tv = val(v);
    check2d(ta, "add_rowvec");
    int n = ta.cols();
    if (tv.numel() != n) throw std::invalid_argument("add_rowvec: vector length mismatch");
    Tensor out = ta;
    int m = ta.rows();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(i, j) += tv.data[j];
    int ai = a.i, vi = v.i;
    return make(std::move(out), {a, v}, [ai, vi, m, n](Graph& g, int self) {
        const Tensor& go = g.nodes_[self].grad;
        if (g.needs(ai)) {
            Tensor& ga = g.grad_buf(ai);
            for (int64_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i];
        }
        if (g.needs(vi)) {
            Tensor& gv = g.grad_buf(vi);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) gv.data[j] += go.at(i, j);
        }
    });
}

Var Graph::tile_rows(Var v, int m) {
    const Tensor& tv = val(v);
    int n = static_cast<int>(tv.numel());
    Tensor out({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(i, j) = tv.data[j];
    int vi = v.i;
    return make(std::move(out), {v}, [vi, m, n](Graph& g, int self) {
        const Tensor& go = g.nodes_[self].grad;
        Tensor& gv = g.grad_buf(vi);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) gv.data[j] += go.at(i, j);
    });
}

Var Graph::softmax_rows(Var a) {
    const Tensor& ta = val(a);
    check2d(ta, "softmax_rows");
    int m = ta.rows(), n = ta.cols();
    Tensor out({m, n});
    for (int i = 0; i < m; ++i) {
        double mx = ta.at(i, 0);
        for (int j = 1; j < n; ++j) mx = std::max(mx, ta.at(i, j));
        double z = 0;
        for (int j = 0; j < n; ++j) {
            double e = std::exp(ta.at(i, j) - mx);
            out.at(i, j) = e;
            z += e;
        }
        for (int j = 0; j < n; ++j) out.at(i, j) /= z;
    }
    int ai = a.i;
    return make(std::move(out), {a}, [ai, m, n](Graph& g, int self) {
        const Tensor& s = g.nodes_[self].value;
        const Tensor& go = g.nodes_[self].grad;
        Tensor& ga = g.grad_buf(ai);
        for (int i = 0; i < m; ++i) {
            double dot = 0;
            for (int j = 0; j < n; ++j) dot += go.at(i, j) * s.at(i, j);
            for (int j = 0; j < n; ++j) ga.at(i, j) += s.at(i, j) * (go.at(i, j) - dot);
        }
    });
}

Var Graph::layer_norm_rows(Var x, Var gain, Var bias, double eps) {
    const Tensor& tx = val(x);
    check2d(tx, "layer_norm_rows");
    int m = tx.rows(), n = tx.cols();
    if (val(gain).numel() != n || val(bias).numel() != n)
        throw std::invalid_argument("layer_norm_rows: gain/bias length mismatch");
    Tensor xhat({m, n});
    std::vector<double> rstd(m);
    for (int i = 0; i < m; ++i) {
        double mu = 0;
        for (int j = 0; j < n; ++j) mu += tx.at(i, j);
        mu /= n;
        double var = 0;
        for (int j = 0; j < n; ++j) {
            double d = tx.at(i, j) - mu;
            var += d * d;
        }
        var /= n;
        double r = 1.0 / std::sqrt(var + eps);
        rstd[i] = r;
        for (int j = 0; j < n; ++j) xhat.at(i, j) = (tx.at(i, j) - mu) * r;
    }
    const Tensor& tg = val(gain);
    const Tensor& tb = val(bias);
    Tensor out({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(i, j) = xhat.at(i, j) * tg.data[j] + tb.data[j];
    int xi = x.i, gi = gain.i, bi = bias.i;
    return make(std::move(out), {x, gain, bias},
                [xi, gi, bi, m, n, xhat = std::move(xhat), rstd = std::move(rstd)](Graph& g, int self) {
        const Tensor& go = g.nodes_[self].grad;
        const Tensor& tg = g.nodes_[gi].value;
        if (g.needs(gi)) {
            Tensor& gg = g.grad_buf(gi);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) gg.data[j] += go.at(i, j) * xhat.at(i, j);
        }
        if (g.needs(bi)) {
            Tensor& gb = g.grad_buf(bi);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) gb.data[j] += go.at(i, j);
        }
        if (g.needs(xi)) {
            Tensor& gx = g.grad_buf(xi);
            for (int i = 0; i < m; ++i) {
                double m1 = 0, m2 = 0;
                for (int j = 0; j < n; ++j) {
                    double dxh = go.at(i, j) * tg.data[j];
                    m1 += dxh;
                    m2 += dxh * xhat.at(i, j);
                }
                m1 /= n;
                m2 /= n;
                for (int j = 0; j < n; ++j) {
                    double dxh = go.at(i, j) * tg.data[j];
                    gx.at(i, j) += rstd[i] * (dxh - m1 - xhat.at(i, j) * m2);
                }
            }
        }
    });
}

// --------------------------------------------------------------------- shape

Var Graph::reshape(Var a, std::vector<int> shape) {
    const Tensor& ta = val(a);
    if (Tensor::count(shape) != ta.numel())
        throw std::invalid_argument("reshape: element count mismatch");
    Tensor out(std::move(shape), ta.data);
    int ai = a.i;
    return make(std::move(out), {a}, [ai](Graph& g, int self) {
        const Tensor& go = g.nodes_[self].grad;
        Tensor& ga = g.grad_buf(ai);
        for (int64_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i];
    });
}

Var Graph::concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
    int n = val(parts[0]).cols(), m = 0;
    for (Var p : parts) {
        check2d(val(p), "concat_rows");
        if (val(p).cols() != n) throw std::invalid_argument("concat_rows: width mismatch");
        m += val(p).rows();
    }
    Tensor out({m, n});
    std::vector<int> row0(parts.size());
    std::vector<int> pidx(parts.size());
    std::vector<int> prow(parts.size());
    int r = 0;
    for (size_t k = 0; k < parts.size(); ++k) {
        const Tensor& tp = val(parts[k]);
        row0[k] = r;
        pidx[k] = parts[k].i;
        prow[k] = tp.rows();
        std::copy(tp.data.begin(), tp.data.end(), out.data.begin() + static_cast<int64_t>(r) * n);
        r += tp.rows();
    }
    return make(std::move(out), parts,
                [row0 = std::move(row0), pidx = std::move(pidx), prow = std::move(prow), n](Graph& g, int self) {
        const Tensor& go = g.nodes_[self].grad;
        for (size_t k = 0; k < pidx.size(); ++k) {
            if (!g.needs(pidx[k])) continue;
            Tensor& gp = g.grad_buf(pidx[k]);
            const double* src = go.ptr() + static_cast<int64_t>(row0[k]) * n;
            for (int64_t i = 0; i < static_cast<int64_t>(prow[k]) * n; ++i) gp.data[i] += src[i];
        }
    });
}

Var Graph::concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
    int m = val(parts[0]).rows(), n = 0;
    for (Var p : parts) {
        check2d(val(p), "concat_cols");
        if (val(p).rows() != m) throw std::invalid_argument("concat_cols: height mismatch");
        n += val(p).cols();
    }
    Tensor out({m, n});
    std::vector<int> col0(parts.size()), pidx(parts.size()), pcol(parts.size());
    int c = 0;
    for (size_t k = 0; k < parts.size(); ++k) {
        const Tensor& tp = val(parts[k]);
        col0[k] = c;
        pidx[k] = parts[k].i;
        pcol[k] = tp.cols();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < tp.cols(); ++j) out.at(i, c + j) = tp.at(i, j);
        c += tp.cols();
    }
    return make(std::move(out), parts,
                [col0 = std::move(col0), pidx = std::move(pidx), pcol = std::move(pcol), m](Graph& g, int self) {
        const Tensor& go = g.nodes_[self].grad;
        for (size_t k = 0; k < pidx.size(); ++k) {
            if (!g.needs(pidx[k])) continue;
            Tensor& gp = g.grad_buf(pidx[k]);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < pcol[k]; ++j) gp.at(i, j) += go.at(i, col0[k] + j);
        }
    });
}

Var Graph::slice_cols(Var a, int c0, int width) {
    const Tensor& ta = val(a);
    check2d(ta, "slice_cols");
    if (c0 < 0 || c0 + width > ta.cols()) throw std::invalid_argument("slice_cols: out of range");
    int m = ta.rows();
    Tensor out({m, width});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < width; ++j) out.at(i, j) = ta.at(i, c0 + j);
    int ai = a.i;
    return make(std::move(out), {a}, [ai, c0, width, m](Graph& g, int self) {
        const Tensor& go = g.nodes_[self].grad;
        Tensor& ga = g.grad_buf(ai);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < width; ++j) ga.at(i, c0 + j) += go.at(i, j);
    });
}

Var Graph::gather_rows(Var a, std::vector<int> idx) {
    const Tensor& ta = val(a);
    check2d(ta, "gather_rows");
    int n = ta.cols();
    Tensor out({static_cast<int>(idx.size()), n});
    for (size_t k = 0; k < idx.size(); ++k) {
        if (idx[k] < 0 || idx[k] >= ta.rows()) throw std::invalid_argument("gather_rows: index out of range");
        for (int j = 0; j < n; ++j) out.at(static_cast<int>(k), j) = ta.at(idx[k], j);
    }
    int ai = a.i;
    return make(std::move(out), {a}, [ai, idx = std::move(idx), n](Graph& g, int self) {
        const Tensor& go = g.nodes_[self].grad;
        Tensor& ga = g.grad_buf(ai);
        for (size_t k = 0; k < idx.size(); ++k)
            for (int j = 0; j < n; ++j) ga.at(idx[k], j) += go.at(static_cast<int>(k), j);
    });
}

// ----------------------------------------------------------------- reductions

Var Graph::sum_all(Var a) {
    const Tensor& ta = val(a);
    double s = 0;
    for (double x : ta.data) s += x;
    int ai = a.i;
    return make(Tensor::scalar(s), {a}, [ai](Graph& g, int self) {
        double go = g.nodes_[self].grad.data[0];
        Tensor& ga = g.grad_buf(ai);
        for (double& x : ga.data) x += go;
    });
}

Var Graph::mean_all(Var a) {
    const Tensor& ta = val(a);
    double s = 0;
    for (double x : ta.data) s += x;
    double inv = 1.0 / static_cast<double>(ta.numel());
    int ai = a.i;
    return make(Tensor::scalar(s * inv), {a}, [ai, inv](Graph& g, int self) {
        double go = g.nodes_[self].grad.data[0] * inv;
        Tensor& ga = g.grad_buf(ai);
        for (double& x : ga.data) x += go;
    });
}

Var Graph::mean_rows(Var a) {
    const Tensor& ta = val(a);
    check2d(ta, "mean_rows");
    int m = ta.rows(), n = ta.cols();
    Tensor out({1, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.data[j] += ta.at(i, j);
    for (int j = 0; j < n; ++j) out.data[j] /= m;
    int ai = a.i;
    return make(std::move(out), {a}, [ai, m, n](Graph& g, int self) {
        const Tensor& go = g.nodes_[self].grad;
        Tensor& ga = g.grad_buf(ai);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) ga.at(i, j) += go.data[j] / m;
    });
}

// ------------------------------------------------------------------ image ops

namespace {

// x: [Ci,H,W] -> cols [Ci*kh*kw, Ho*Wo]
void im2col(const Tensor& x, int kh, int kw, int stride, int pad, int ho, int wo, Tensor& cols) {
    int ci = x.shape[0], h = x.shape[1], w = x.shape[2];
    for (int c = 0; c < ci; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                int row = (c * kh + ky) * kw + kx;
                double* dst = cols.ptr() + static_cast<int64_t>(row) * ho * wo;
                const double* src = x.ptr() + static_cast<int64_t>(c) * h * w;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride + ky - pad;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride + kx - pad;
                        dst[oy * wo + ox] =
                            (iy >= 0 && iy < h && ix >= 0 && ix < w) ? src[iy * w + ix] : 0.0;
                    }
                }
            }
}

void col2im_add(const Tensor& cols, int ci, int h, int w, int kh, int kw, int stride, int pad,
                int ho, int wo, Tensor& gx) {
    for (int c = 0; c < ci; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                int row = (c * kh + ky) * kw + kx;
                const double* src = cols.ptr() + static_cast<int64_t>(row) * ho * wo;
                double* dst = gx.ptr() + static_cast<int64_t>(c) * h * w;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < w) dst[iy * w + ix] += src[oy * wo + ox];
                    }
                }
            }
}

}  // namespace

Var Graph::conv2d(Var x, Var w, Var b, int stride, int pad) {
    const Tensor& tx = val(x);
    const Tensor& tw = val(w);
    const Tensor& tb = val(b);
    if (tx.ndim() != 3) throw std::invalid_argument("conv2d: input must be [C,H,W]");
    if (tw.ndim() != 4) throw std::invalid_argument("conv2d: weight must be [Co,Ci,kh,kw]");
    int ci = tx.shape[0], h = tx.shape[1], wd = tx.shape[2];
    int co = tw.shape[0], kh = tw.shape[2], kw = tw.shape[3];
    if (tw.shape[1] != ci) throw std::invalid_argument("conv2d: channel mismatch");
    if (tb.numel() != co) throw std::invalid_argument("conv2d: bias size mismatch");
    int ho = (h + 2 * pad - kh) / stride + 1;
    int wo = (wd + 2 * pad - kw) / stride + 1;
    int k = ci * kh * kw;

    Tensor cols({k, ho * wo});
    im2col(tx, kh, kw, stride, pad, ho, wo, cols);
    Tensor out({co, ho, wo});
    gemm(false, false, co, ho * wo, k, 1.0, tw.ptr(), cols.ptr(), 0.0, out.ptr());
    for (int c = 0; c < co; ++c) {
        double* dst = out.ptr() + static_cast<int64_t>(c) * ho * wo;
        for (int i = 0; i < ho * wo; ++i) dst[i] += tb.data[c];
    }
    int xi = x.i, wi = w.i, bi = b.i;
    bool save_cols = grad_enabled_ && (needs(xi) || needs(wi) || needs(bi));
    if (!save_cols) cols = Tensor();
    return make(std::move(out), {x, w, b},
                [xi, wi, bi, stride, pad, ci, h, wd, co, kh, kw, ho, wo, k,
                 cols = std::move(cols)](Graph& g, int self) {
        const Tensor& go = g.nodes_[self].grad;  // [co, ho, wo]
        if (g.needs(bi)) {
            Tensor& gb = g.grad_buf(bi);
            for (int c = 0; c < co; ++c) {
                const double* src = go.ptr() + static_cast<int64_t>(c) * ho * wo;
                double s = 0;
                for (int i = 0; i < ho * wo; ++i) s += src[i];
                gb.data[c] += s;
            }
        }
        if (g.needs(wi))
            gemm(false, true, co, k, ho * wo, 1.0, go.ptr(), cols.ptr(), 1.0, g.grad_buf(wi).ptr());
        if (g.needs(xi)) {
            const Tensor& tw = g.nodes_[wi].value;
            Tensor dcols({k, ho * wo});
            gemm(true, false, k, ho * wo, co, 1.0, tw.ptr(), go.ptr(), 0.0, dcols.ptr());
            col2im_add(dcols, ci, h, wd, kh, kw, stride, pad, ho, wo, g.grad_buf(xi));
        }
    });
}

Var Graph::group_norm(Var x, int groups, Var gain, Var bias, double eps) {
    const Tensor& tx = val(x);
    if (tx.ndim() != 3) throw std::invalid_argument("group_norm: input must be [C,H,W]");
    int c = tx.shape[0], hw = tx.shape[1] * tx.shape[2];
    if (c % groups != 0) throw std::invalid_argument("group_norm: channels not divisible by groups");
    if (val(gain).numel() != c || val(bias).numel() != c)
        throw std::invalid_argument("group_norm: gain/bias size mismatch");
    int cg = c / groups;
    int64_t gsz = static_cast<int64_t>(cg) * hw;

    Tensor xhat(tx.shape);
    std::vector<double> rstd(groups);
    for (int g0 = 0; g0 < groups; ++g0) {
        const double* src = tx.ptr() + g0 * gsz;
        double mu = 0;
        for (int64_t i = 0; i < gsz; ++i) mu += src[i];
        mu /= static_cast<double>(gsz);
        double var = 0;
        for (int64_t i = 0; i < gsz; ++i) {
            double d = src[i] - mu;
            var += d * d;
        }
        var /= static_cast<double>(gsz);
        double r = 1.0 / std::sqrt(var + eps);
        rstd[g0] = r;
        double* dst = xhat.ptr() + g0 * gsz;
        for (int64_t i = 0; i < gsz; ++i) dst[i] = (src[i] - mu) * r;
    }
    const Tensor& tg = val(gain);
    const Tensor& tb = val(bias);
    Tensor out(tx.shape);
    for (int ch = 0; ch < c; ++ch) {
        const double* src = xhat.ptr() + static_cast<int64_t>(ch) * hw;
        double* dst = out.ptr() + static_cast<int64_t>(ch) * hw;
        for (int i = 0; i < hw; ++i) dst[i] = src[i] * tg.data[ch] + tb.data[ch];
    }
    int xi = x.i, gi = gain.i, bi = bias.i;
    return make(std::move(out), {x, gain, bias},
                [xi, gi, bi, groups, c, hw, cg, gsz, xhat = std::move(xhat),
                 rstd = std::move(rstd)](Graph& g, int self) {
        const Tensor& go = g.nodes_[self].grad;
        const Tensor& tg = g.nodes_[gi].value;
        if (g.needs(gi)) {
            Tensor& gg = g.grad_buf(gi);
            for (int ch = 0; ch < c; ++ch) {
                const double* gsrc = go.ptr() + static_cast<int64_t>(ch) * hw;
                const double* xsrc = xhat.ptr() + static_cast<int64_t>(ch) * hw;
                double s = 0;
                for (int i = 0; i < hw; ++i) s += gsrc[i] * xsrc[i];
                gg.data[ch] += s;
            }
        }
        if (g.needs(bi)) {
            Tensor& gb = g.grad_buf(bi);
            for (int ch = 0; ch < c; ++ch) {
                const double* gsrc = go.ptr() + static_cast<int64_t>(ch) * hw;
                double s = 0;
                for (int i = 0; i < hw; ++i) s += gsrc[i];
                gb.data[ch] += s;
            }
        }
        if (g.needs(xi)) {
            Tensor& gx = g.grad_buf(xi);
            for (int g0 = 0; g0 < groups; ++g0) {
                double m1 = 0, m2 = 0;
                for (int cc = 0; cc < cg; ++cc) {
                    int ch = g0 * cg + cc;
                    const double* gsrc = go.ptr() + static_cast<int64_t>(ch) * hw;
                    const double* xsrc = xhat.ptr() + static_cast<int64_t>(ch) * hw;
                    for (int i = 0; i < hw; ++i) {
                        double dxh = gsrc[i] * tg.data[ch];
                        m1 += dxh;
                        m2 += dxh * xsrc[i];
                    }
                }
                m1 /= static_cast<double>(gsz);
                m2 /= static_cast<double>(gsz);
                for (int cc = 0; cc < cg; ++cc) {
                    int ch = g0 * cg + cc;
                    const double* gsrc = go.ptr() + static_cast<int64_t>(ch) * hw;
                    const double* xsrc = xhat.ptr() + static_cast<int64_t>(ch) * hw;
                    double* dst = gx.ptr() + static_cast<int64_t>(ch) * hw;
                    for (int i = 0; i < hw; ++i) {
                        double dxh = gsrc[i] * tg.data[ch];
                        dst[i] += rstd[g0] * (dxh - m1 - xsrc[i] * m2);
                    }
                }
            }
        }
    });
}

Var Graph::add_channel_bias(Var x, Var v) {
    const Tensor& tx = val(x);
    const Tensor& tv = val(v);
    if (tx.ndim() != 3) throw std::invalid_argument("add_channel_bias: input must be [C,H,W]");
    int c = tx.shape[0], hw = tx.shape[1] * tx.shape[2];
    if (tv.numel() != c) throw std::invalid_argument("add_channel_bias: size mismatch");
    Tensor out = tx;
    for (int ch = 0; ch < c; ++ch) {
        double* dst = out.ptr() + static_cast<int64_t>(ch) * hw;
        for (int i = 0; i < hw; ++i) dst[i] += tv.data[ch];
    }
    int xi = x.i, vi = v.i;
    return make(std::move(out), {x, v}, [xi, vi, c, hw](Graph& g, int self) {
        const Tensor& go = g.nodes_[self].grad;
        if (g.needs(xi)) {
            Tensor& gx = g.grad_buf(xi);
            for (int64_t i = 0; i < go.numel(); ++i) gx.data[i] += go.data[i];
        }
        if (g.needs(vi)) {
            Tensor& gv = g.grad_buf(vi);
            for (int ch = 0; ch < c; ++ch) {
                const double* src = go.ptr() + static_cast<int64_t>(ch) * hw;
                double s = 0;
                for (int i = 0; i < hw; ++i) s += src[i];
                gv.data[ch] += s;
            }
        }
    });
}

Var Graph::upsample_nearest2(Var x) {
    const Tensor& tx = val(x);
    if (tx.ndim() != 3) throw std::invalid_argument("upsample_nearest2: input must be [C,H,W]");
    int c = tx.shape[0], h = tx.shape[1], w = tx.shape[2];
    Tensor out({c, 2 * h, 2 * w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                double v = tx.data[(static_cast<int64_t>(ch) * h + y) * w + xx];
                int64_t base = (static_cast<int64_t>(ch) * 2 * h + 2 * y) * 2 * w + 2 * xx;
                out.data[base] = v;
                out.data[base + 1] = v;
                out.data[base + 2 * w] = v;
                out.data[base + 2 * w + 1] = v;
            }
    int xi = x.i;
    return make(std::move(out), {x}, [xi, c, h, w](Graph& g, int self) {
        const Tensor& go = g.nodes_[self].grad;
        Tensor& gx = g.grad_buf(xi);
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    int64_t base = (static_cast<int64_t>(ch) * 2 * h + 2 * y) * 2 * w + 2 * xx;
                    gx.data[(static_cast<int64_t>(ch) * h + y) * w + xx] +=
                        go.data[base] + go.data[base + 1] + go.data[base + 2 * w] + go.data[base + 2 * w + 1];
                }
    });
}

Var Graph::chw_to_tokens(Var x) {
    const Tensor& tx = val(x);
    if (tx.ndim() != 3) throw std::invalid_argument("chw_to_tokens: input must be [C,H,W]");
    int c = tx.shape[0], hw = tx.shape[1] * tx.shape[2];
    Tensor out({hw, c});
    for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < hw; ++p) out.at(p, ch) = tx.data[static_cast<int64_t>(ch) * hw + p];
    int xi = x.i;
    return make(std::move(out), {x}, [xi, c, hw](Graph& g, int self) {
        const Tensor& go = g.nodes_[self].grad;
        Tensor& gx = g.grad_buf(xi);
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < hw; ++p) gx.data[static_cast<int64_t>(ch) * hw + p] += go.at(p, ch);
    });
}

Var Graph::tokens_to_chw(Var t, int c, int h, int w) {
    const Tensor& tt = val(t);
    check2d(tt, "tokens_to_chw");
    if (tt.rows() != h * w || tt.cols() != c)
        throw std::invalid_argument("tokens_to_chw: shape mismatch");
    Tensor out({c, h, w});
    int hw = h * w;
    for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < hw; ++p) out.data[static_cast<int64_t>(ch) * hw + p] = tt.at(p, ch);
    int ti = t.i;
    return make(std::move(out), {t}, [ti, c, hw](Graph& g, int self) {
        const Tensor& go = g.nodes_[self].grad;
        Tensor& gt = g.grad_buf(ti);
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < hw; ++p) gt.at(p, ch) += go.data[static_cast<int64_t>(ch) * hw + p];
    });
}

}  // namespace valid
