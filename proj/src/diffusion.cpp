#include "valid/diffusion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace valid::diffusion {

DiffusionSchedule make_schedule(int t_steps, double beta_start, double beta_end) {
    if (t_steps < 1) throw std::invalid_argument("make_schedule: t_steps must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1, got [" +
                                    std::to_string(beta_start) + ", " + std::to_string(beta_end) + "]");
    DiffusionSchedule s;
    s.t_steps = t_steps;
    s.beta.resize(t_steps);
    s.alpha.resize(t_steps);
    s.alpha_bar.resize(t_steps);
    double prod = 1.0;
    for (int i = 0; i < t_steps; ++i) {
        double frac = t_steps == 1 ? 0.0 : static_cast<double>(i) / (t_steps - 1);
        s.beta[i] = beta_start + (beta_end - beta_start) * frac;
        s.alpha[i] = 1.0 - s.beta[i];
        prod *= s.alpha[i];
        s.alpha_bar[i] = prod;
    }
    return s;
}

NoisyLatent q_sample(const Image& x0, int t, const Tensor& eps, const DiffusionSchedule& sched) {
    if (t < 1 || t > sched.t_steps)
        throw std::invalid_argument("q_sample: t " + std::to_string(t) + " outside [1, " +
                                    std::to_string(sched.t_steps) + "]");
    Tensor x = image_to_chw(x0);
    if (!x.same_shape(eps)) throw std::invalid_argument("q_sample: eps shape mismatch");
    double sa = std::sqrt(sched.alpha_bar_at(t));
    double sb = std::sqrt(1.0 - sched.alpha_bar_at(t));
    NoisyLatent out;
    out.t = t;
    out.values = Tensor(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i)
        out.values.data[i] = sa * (2.0 * x.data[i] - 1.0) + sb * eps.data[i];
    return out;
}

Tensor time_embedding(int t, int dim) {
    Tensor emb({1, dim});
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
        emb.data[i] = std::sin(t * freq);
        emb.data[half + i] = std::cos(t * freq);
    }
    return emb;
}

void init_unet_params(ParamStore& ps, const ModelConfig& cfg, Rng& rng) {
    const auto& ch = cfg.unet_channels;
    int levels = static_cast<int>(ch.size());

    init_linear(ps, "unet.time.fc1", cfg.time_sin_dim, cfg.time_dim, rng);
    init_linear(ps, "unet.time.fc2", cfg.time_dim, cfg.time_dim, rng);

    auto conv = [&](const std::string& name, int ci, int co, int k) {
        double std_ = std::sqrt(2.0 / (ci * k * k));
        ps.add(name + ".weight", Tensor::randn({co, ci, k, k}, rng, std_));
        ps.add(name + ".bias", Tensor::zeros({co}));
    };
    auto resblock = [&](const std::string& p, int ci, int co) {
        init_norm(ps, p + ".norm1", ci);
        conv(p + ".conv1", ci, co, 3);
        init_linear(ps, p + ".time", cfg.time_dim, co, rng);
        init_norm(ps, p + ".norm2", co);
        conv(p + ".conv2", co, co, 3);
        if (ci != co) conv(p + ".skip", ci, co, 1);
    };

    conv("unet.conv_in", 3, ch[0], 3);
    for (int l = 0; l < levels; ++l) {
        std::string p = "unet.level" + std::to_string(l);
        resblock(p + ".res", ch[l], ch[l]);
        init_norm(ps, p + ".attn.norm", ch[l]);
        init_attn(ps, p + ".attn", ch[l], cfg.d_seed, ch[l], ch[l], rng);
        if (l + 1 < levels) conv("unet.down" + std::to_string(l) + ".conv", ch[l], ch[l + 1], 3);
    }
    for (int l = levels - 2; l >= 0; --l) {
        std::string p = "unet.up" + std::to_string(l);
        conv(p + ".conv", ch[l + 1], ch[l], 3);
        resblock(p + ".res", 2 * ch[l], ch[l]);
    }
    init_norm(ps, "unet.out.norm", ch[0]);
    // zero-init so an untrained model predicts zero noise
    ps.add("unet.out.conv.weight", Tensor::zeros({3, ch[0], 3, 3}));
    ps.add("unet.out.conv.bias", Tensor::zeros({3}));
}

namespace {

Var apply_resblock(Graph& g, Binder& bind, const std::string& p, Var x, Var temb_act, int ci, int co,
                   const ModelConfig& cfg) {
    Var h = g.group_norm(x, cfg.unet_groups, bind(p + ".norm1.gain"), bind(p + ".norm1.bias"));
    h = g.gelu(h);
    h = g.conv2d(h, bind(p + ".conv1.weight"), bind(p + ".conv1.bias"), 1, 1);
    Var tb = linear(g, temb_act, bind(p + ".time.weight"), bind(p + ".time.bias"));
    h = g.add_channel_bias(h, g.reshape(tb, {co}));
    h = g.group_norm(h, cfg.unet_groups, bind(p + ".norm2.gain"), bind(p + ".norm2.bias"));
    h = g.gelu(h);
    h = g.conv2d(h, bind(p + ".conv2.weight"), bind(p + ".conv2.bias"), 1, 1);
    Var skip = ci == co ? x : g.conv2d(x, bind(p + ".skip.weight"), bind(p + ".skip.bias"), 1, 0);
    return g.add(h, skip);
}

Var apply_cross_attention(Graph& g, Binder& bind, const std::string& p, Var x, Var cond, int c,
                          const ModelConfig& cfg) {
    const Tensor& tx = g.val(x);
    int h = tx.shape[1], w = tx.shape[2];
    Var hn = g.group_norm(x, cfg.unet_groups, bind(p + ".norm.gain"), bind(p + ".norm.bias"));
    Var tokens = g.chw_to_tokens(hn);
    AttnVars attn = bind_attn(bind, p);
    Var out = multihead_attention(g, tokens, cond, attn, cfg.unet_heads);
    return g.add(x, g.tokens_to_chw(out, c, h, w));
}

}  // namespace

Var denoise(Graph& g, Binder& bind, Var z, int t, Var cond, const ModelConfig& cfg) {
    const Tensor& tz = g.val(z);
    if (tz.ndim() != 3 || tz.shape[0] != 3)
        throw std::invalid_argument("denoise: input must be [3,H,W], got " + shape_str(tz.shape));
    if (g.val(cond).ndim() != 2 || g.val(cond).cols() != cfg.d_seed)
        throw std::invalid_argument("denoise: condition width must equal d_seed");
    const auto& ch = cfg.unet_channels;
    int levels = static_cast<int>(ch.size());

    Var temb = g.constant(time_embedding(t, cfg.time_sin_dim));
    temb = linear(g, temb, bind("unet.time.fc1.weight"), bind("unet.time.fc1.bias"));
    temb = g.gelu(temb);
    temb = linear(g, temb, bind("unet.time.fc2.weight"), bind("unet.time.fc2.bias"));
    Var temb_act = g.gelu(temb);

    // each resolution level carries one cross-attention site: the bottom level
    // attends after its residual block, the outer levels attend on the decoder
    // side where the content is rendered
    Var h = g.conv2d(z, bind("unet.conv_in.weight"), bind("unet.conv_in.bias"), 1, 1);
    std::vector<Var> skips;
    for (int l = 0; l < levels; ++l) {
        std::string p = "unet.level" + std::to_string(l);
        h = apply_resblock(g, bind, p + ".res", h, temb_act, ch[l], ch[l], cfg);
        if (l + 1 < levels) {
            skips.push_back(h);
            h = g.conv2d(h, bind("unet.down" + std::to_string(l) + ".conv.weight"),
                         bind("unet.down" + std::to_string(l) + ".conv.bias"), 2, 1);
        } else {
            h = apply_cross_attention(g, bind, p + ".attn", h, cond, ch[l], cfg);
        }
    }
    for (int l = levels - 2; l >= 0; --l) {
        std::string p = "unet.up" + std::to_string(l);
        h = g.upsample_nearest2(h);
        h = g.conv2d(h, bind(p + ".conv.weight"), bind(p + ".conv.bias"), 1, 1);
        Var skip = skips[l];
        const Tensor& th = g.val(h);
        int hh = th.shape[1], ww = th.shape[2];
        Var merged = g.concat_rows({g.reshape(h, {ch[l], hh * ww}), g.reshape(skip, {ch[l], hh * ww})});
        h = g.reshape(merged, {2 * ch[l], hh, ww});
        h = apply_resblock(g, bind, p + ".res", h, temb_act, 2 * ch[l], ch[l], cfg);
        h = apply_cross_attention(g, bind, "unet.level" + std::to_string(l) + ".attn", h, cond, ch[l],
                                  cfg);
    }
    h = g.group_norm(h, cfg.unet_groups, bind("unet.out.norm.gain"), bind("unet.out.norm.bias"));
    h = g.gelu(h);
    return g.conv2d(h, bind("unet.out.conv.weight"), bind("unet.out.conv.bias"), 1, 1);
}

Tensor denoise_values(const Tensor& z, int t, const Tensor& cond, const ParamStore& ps,
                      const ModelConfig& cfg) {
    Graph g(false);
    Binder bind(g, ps);
    return g.val(denoise(g, bind, g.constant(z), t, g.constant(cond), cfg));
}

double loss_mse(const Tensor& eps_true, const Tensor& eps_pred) {
    if (!eps_true.same_shape(eps_pred)) throw std::invalid_argument("loss: shape mismatch");
    double s = 0;
    for (int64_t i = 0; i < eps_true.numel(); ++i) {
        double d = eps_true.data[i] - eps_pred.data[i];
        s += d * d;
    }
    return s / static_cast<double>(eps_true.numel());
}

Var mse(Graph& g, Var a, Var b) {
    Var d = g.sub(a, b);
    return g.mean_all(g.mul(d, d));
}

Image p_sample_loop(const Tensor& cond, const ParamStore& ps, const ModelConfig& cfg,
                    const DiffusionSchedule& sched, uint64_t rng_seed, int steps,
                    std::vector<StepDiag>* diag, bool clamp_x0) {
    if (steps < 1 || steps > sched.t_steps)
        throw std::invalid_argument("p_sample_loop: steps " + std::to_string(steps) + " outside [1, " +
                                    std::to_string(sched.t_steps) + "]");
    // evenly spaced timesteps, ascending, always ending at T
    std::vector<int> ts(steps);
    if (steps == 1) {
        ts[0] = sched.t_steps;
    } else {
        for (int j = 0; j < steps; ++j) {
            double f = static_cast<double>(j) / (steps - 1);
            ts[j] = 1 + static_cast<int>(std::lround(f * (sched.t_steps - 1)));
        }
    }

    Rng rng(rng_seed);
    Tensor z({3, cfg.resolution, cfg.resolution});
    for (double& v : z.data) v = rng.normal();

    for (int j = steps - 1; j >= 0; --j) {
        int t = ts[j];
        int t_prev = j > 0 ? ts[j - 1] : 0;
        Tensor eps_hat = denoise_values(z, t, cond, ps, cfg);
        double abar = sched.alpha_bar_at(t);
        double a_eff, b_eff;
        if (t_prev == t - 1) {  // contiguous step: use the schedule's own constants
            a_eff = sched.alpha_at(t);
            b_eff = sched.beta_at(t);
        } else {
            a_eff = abar / sched.alpha_bar_at(t_prev);
            b_eff = 1.0 - a_eff;
        }
        double inv_sqrt_a = 1.0 / std::sqrt(a_eff);
        double coef = b_eff / std::sqrt(1.0 - abar);
        double sigma = std::sqrt(b_eff);
        if (diag) {
            StepDiag d;
            d.step = steps - j;
            d.t = t;
            double zm = 0, zs = 0, ea = 0;
            for (int64_t i = 0; i < z.numel(); ++i) {
                zm += z.data[i];
                ea += std::abs(eps_hat.data[i]);
            }
            zm /= static_cast<double>(z.numel());
            ea /= static_cast<double>(z.numel());
            for (int64_t i = 0; i < z.numel(); ++i) {
                double dd = z.data[i] - zm;
                zs += dd * dd;
            }
            d.z_mean = zm;
            d.z_std = std::sqrt(zs / static_cast<double>(z.numel()));
            d.eps_abs_mean = ea;
            diag->push_back(d);
        }
        if (clamp_x0) {
            // bound the implied x0 and fold the correction back into eps_hat;
            // identical to the plain update whenever x0 already sits in range
            double sqrt_abar = std::sqrt(abar);
            double sqrt_one_m = std::sqrt(1.0 - abar);
            for (int64_t i = 0; i < z.numel(); ++i) {
                double x0 = (z.data[i] - sqrt_one_m * eps_hat.data[i]) / sqrt_abar;
                x0 = std::min(1.0, std::max(-1.0, x0));
                eps_hat.data[i] = (z.data[i] - sqrt_abar * x0) / sqrt_one_m;
            }
        }
        for (int64_t i = 0; i < z.numel(); ++i) {
            double mean = inv_sqrt_a * (z.data[i] - coef * eps_hat.data[i]);
            z.data[i] = j > 0 ? mean + sigma * rng.normal() : mean;
        }
    }
    for (double& v : z.data) v = (std::min(1.0, std::max(-1.0, v)) + 1.0) * 0.5;
    return chw_to_image(z);
}

}  // namespace valid::diffusion
