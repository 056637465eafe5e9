#pragma once

#include <cstdint>
#include <vector>

#include "valid/autograd.hpp"
#include "valid/config.hpp"
#include "valid/image.hpp"
#include "valid/nn.hpp"

namespace valid::diffusion {

// Linear-beta DDPM forward-process constants; index i holds timestep t = i+1.
struct DiffusionSchedule {
    int t_steps = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;

    double beta_at(int t) const { return beta[t - 1]; }
    double alpha_at(int t) const { return alpha[t - 1]; }
    double alpha_bar_at(int t) const { return t == 0 ? 1.0 : alpha_bar[t - 1]; }
};

DiffusionSchedule make_schedule(int t_steps, double beta_start, double beta_end);

struct NoisyLatent {
    Tensor values;  // [3,H,W], in the [-1,1]-scaled space
    int t = 0;
};

// z_t = sqrt(abar_t) * (2*x0 - 1) + sqrt(1 - abar_t) * eps
NoisyLatent q_sample(const Image& x0, int t, const Tensor& eps, const DiffusionSchedule& sched);

// sinusoidal timestep features (values only, no parameters)
Tensor time_embedding(int t, int dim);

void init_unet_params(ParamStore& ps, const ModelConfig& cfg, Rng& rng);

// Noise prediction. z: [3,H,W]; cond: [M, d_seed] tokens for the
// cross-attention sites (M is 64 for the fused condition).
Var denoise(Graph& g, Binder& bind, Var z, int t, Var cond, const ModelConfig& cfg);
Tensor denoise_values(const Tensor& z, int t, const Tensor& cond, const ParamStore& ps,
                      const ModelConfig& cfg);

// mean squared error over all elements
double loss_mse(const Tensor& eps_true, const Tensor& eps_pred);
Var mse(Graph& g, Var a, Var b);

struct StepDiag {
    int step = 0;
    int t = 0;
    double eps_abs_mean = 0;
    double z_mean = 0;
    double z_std = 0;
};

// Ancestral sampling from pure noise. steps == t_steps walks the full chain;
// fewer steps run the same update on an evenly re-spaced sub-schedule.
// Output is clamped to [-1,1] and rescaled to a [0,1] image.
//
// clamp_x0 bounds the implied clean image to [-1,1] before each posterior
// mean (the usual stabilizer for small pixel-space models); off by default,
// where the update uses the predicted noise exactly as stated.
Image p_sample_loop(const Tensor& cond, const ParamStore& ps, const ModelConfig& cfg,
                    const DiffusionSchedule& sched, uint64_t rng_seed, int steps,
                    std::vector<StepDiag>* diag = nullptr, bool clamp_x0 = false);

}  // namespace valid::diffusion
