#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "valid/image.hpp"
#include "valid/scenes.hpp"
#include "valid/training.hpp"

namespace valid::evaluation {

// 10*log10(1/MSE) on [0,1]-valued images, capped at 100 dB.
double psnr(const Image& a, const Image& b);

// Single-scale SSIM on the channel-mean grayscale: 11x11 Gaussian window
// (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2, dynamic range 1, valid-mode windows.
double ssim(const Image& a, const Image& b);

struct SweepParams {
    std::vector<int> view_counts{1, 2, 3, 4};
    int n_targets = 8;
    int sampler_steps = 50;
    uint64_t seed = 0;
    int threads = 0;
    bool zero_condition = false;
    int max_scenes = 0;  // cap on test scenes; 0 = all
    double token_ratio = 1.0;
    bool clamp_x0 = false;
    std::string split = "test";
};

struct CellResult {
    int k = 0;
    int scene_id = 0;
    int target_idx = 0;
    double psnr = 0;
    double ssim = 0;
};

struct KSummary {
    int k = 0;
    double psnr_mean = 0, psnr_std = 0;
    double ssim_mean = 0, ssim_std = 0;
    int count = 0;
};

struct MetricsReport {
    std::vector<CellResult> cells;
    std::vector<KSummary> summary;
    std::string checkpoint_id;
    uint64_t seed = 0;
    int sampler_steps = 0;
    int n_targets = 0;
};

// The view-count sweep: per test scene draw target poses and protocol source
// poses, condition on the first k sources, sample, score against the rendered
// ground truth.
MetricsReport evaluate_sweep(const training::ModelBundle& bundle,
                             const scenes::SceneManifest& manifest, const SweepParams& params);

void write_report_csv(const MetricsReport& report, const std::string& path);
std::string format_report_table(const MetricsReport& report);

}  // namespace valid::evaluation
