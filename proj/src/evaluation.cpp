#include "valid/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "valid/crossformer.hpp"
#include "valid/geometry.hpp"

namespace valid::evaluation {

double psnr(const Image& a, const Image& b) {
    double mse = image_mse(a, b);  // throws on shape mismatch
    if (mse <= 0.0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

namespace {

constexpr int kWin = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

const std::vector<double>& gaussian_kernel() {
    static const std::vector<double> k = [] {
        std::vector<double> v(kWin * kWin);
        double sum = 0;
        int c = kWin / 2;
        for (int y = 0; y < kWin; ++y)
            for (int x = 0; x < kWin; ++x) {
                double d2 = (y - c) * (y - c) + (x - c) * (x - c);
                v[y * kWin + x] = std::exp(-d2 / (2.0 * kSigma * kSigma));
                sum += v[y * kWin + x];
            }
        for (double& e : v) e /= sum;
        return v;
    }();
    return k;
}

std::vector<double> to_gray(const Image& img) {
    std::vector<double> g(static_cast<size_t>(img.height) * img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            g[static_cast<size_t>(y) * img.width + x] =
                (img.at(y, x, 0) + img.at(y, x, 1) + img.at(y, x, 2)) / 3.0;
    return g;
}

}  // namespace

double ssim(const Image& a, const Image& b) {
    if (a.height != b.height || a.width != b.width)
        throw std::invalid_argument("ssim: image size mismatch");
    if (a.height < kWin || a.width < kWin)
        throw std::invalid_argument("ssim: image smaller than the 11x11 window");
    std::vector<double> ga = to_gray(a), gb = to_gray(b);
    const auto& kern = gaussian_kernel();
    int h = a.height, w = a.width;

    double total = 0;
    int count = 0;
    for (int y = 0; y + kWin <= h; ++y)
        for (int x = 0; x + kWin <= w; ++x) {
            double mua = 0, mub = 0, saa = 0, sbb = 0, sab = 0;
            for (int dy = 0; dy < kWin; ++dy)
                for (int dx = 0; dx < kWin; ++dx) {
                    double kw = kern[dy * kWin + dx];
                    double va = ga[static_cast<size_t>(y + dy) * w + (x + dx)];
                    double vb = gb[static_cast<size_t>(y + dy) * w + (x + dx)];
                    mua += kw * va;
                    mub += kw * vb;
                    saa += kw * va * va;
                    sbb += kw * vb * vb;
                    sab += kw * va * vb;
                }
            double var_a = saa - mua * mua;
            double var_b = sbb - mub * mub;
            double cov = sab - mua * mub;
            double num = (2.0 * mua * mub + kC1) * (2.0 * cov + kC2);
            double den = (mua * mua + mub * mub + kC1) * (var_a + var_b + kC2);
            total += num / den;
            ++count;
        }
    return total / count;
}

namespace {

struct CellJob {
    int scene_index = 0;
    int scene_id = 0;
    int target_idx = 0;
    int k = 0;
    uint64_t sampler_seed = 0;
    uint64_t token_seed = 0;
};

}  // namespace

MetricsReport evaluate_sweep(const training::ModelBundle& bundle,
                             const scenes::SceneManifest& manifest, const SweepParams& params) {
    if (params.view_counts.empty()) throw std::invalid_argument("evaluate_sweep: no view counts");
    int k_max = *std::max_element(params.view_counts.begin(), params.view_counts.end());
    if (k_max > 4)
        throw std::invalid_argument("evaluate_sweep: view count " + std::to_string(k_max) +
                                    " exceeds the 4 protocol source views");
    if (params.n_targets < 1) throw std::invalid_argument("evaluate_sweep: n_targets must be >= 1");

    std::vector<int> test_scenes = manifest.split_indices(params.split);
    if (test_scenes.empty())
        throw std::invalid_argument("evaluate_sweep: dataset has no '" + params.split + "' scenes");
    if (params.max_scenes > 0 && static_cast<int>(test_scenes.size()) > params.max_scenes)
        test_scenes.resize(params.max_scenes);

    diffusion::DiffusionSchedule sched =
        diffusion::make_schedule(bundle.config.t_steps, bundle.config.beta_start, bundle.config.beta_end);
    int steps = std::min(params.sampler_steps, bundle.config.t_steps);

    // per-scene protocol poses and rendered ground truth
    struct SceneEval {
        const scenes::SceneEntry* entry = nullptr;
        std::vector<geometry::CameraPose> targets;
        std::vector<geometry::CameraPose> sources;
        std::vector<Image> source_images;
        std::vector<Image> target_images;
    };
    std::vector<SceneEval> evals;
    evals.reserve(test_scenes.size());
    for (int s : test_scenes) {
        SceneEval e;
        e.entry = &manifest.scenes[s];
        uint64_t sid = static_cast<uint64_t>(e.entry->spec.scene_id);
        e.targets = geometry::sample_target_views(derive_seed(params.seed, {0x7a26ull, sid}),
                                                  params.n_targets, manifest.sampling);
        e.sources = geometry::sample_source_views(derive_seed(params.seed, {0x50c5ull, sid}), k_max,
                                                  manifest.sampling);
        for (const auto& p : e.sources)
            e.source_images.push_back(scenes::render(e.entry->spec, p, manifest.resolution));
        for (const auto& p : e.targets)
            e.target_images.push_back(scenes::render(e.entry->spec, p, manifest.resolution));
        evals.push_back(std::move(e));
    }

    std::vector<CellJob> jobs;
    for (size_t si = 0; si < evals.size(); ++si)
        for (int ti = 0; ti < params.n_targets; ++ti)
            for (int k : params.view_counts) {
                CellJob job;
                job.scene_index = static_cast<int>(si);
                job.scene_id = evals[si].entry->spec.scene_id;
                job.target_idx = ti;
                job.k = k;
                // seeds deliberately ignore k: each (scene, target) cell runs the
                // same noise trajectory for every view count, so per-k means
                // compare paired samples
                uint64_t sid = static_cast<uint64_t>(job.scene_id);
                job.sampler_seed =
                    derive_seed(params.seed, {0xd1f5ull, sid, static_cast<uint64_t>(ti)});
                job.token_seed = derive_seed(params.seed, {0x70c3ull, sid, static_cast<uint64_t>(ti)});
                jobs.push_back(job);
            }

    std::vector<CellResult> cells(jobs.size());
    auto run_job = [&](size_t j) {
        const CellJob& job = jobs[j];
        const SceneEval& e = evals[job.scene_index];
        const geometry::CameraPose& target_pose = e.targets[job.target_idx];

        Tensor cond;
        if (params.zero_condition) {
            cond = Tensor::zeros({crossformer::kSeedCount, bundle.config.d_seed});
        } else {
            std::vector<tokenizer::ViewInput> views;
            for (int v = 0; v < job.k; ++v) {
                tokenizer::ViewInput vi;
                vi.image = e.source_images[v];
                vi.rel = geometry::relative_pose(e.sources[v], target_pose);
                views.push_back(std::move(vi));
            }
            Graph g(false);
            Binder bind(g, bundle.params);
            Var c = training::condition_from_views(g, bind, views, bundle.config, params.token_ratio,
                                                   job.token_seed, false);
            cond = g.val(c);
        }
        Image sample = diffusion::p_sample_loop(cond, bundle.params, bundle.config, sched,
                                                job.sampler_seed, steps, nullptr, params.clamp_x0);
        const Image& gt = e.target_images[job.target_idx];
        CellResult r;
        r.k = job.k;
        r.scene_id = job.scene_id;
        r.target_idx = job.target_idx;
        r.psnr = psnr(sample, gt);
        r.ssim = ssim(sample, gt);
        cells[j] = r;
    };

    int threads = params.threads > 0 ? params.threads
                                     : static_cast<int>(std::thread::hardware_concurrency());
    threads = std::max(1, std::min<int>(threads, static_cast<int>(jobs.size())));
    if (threads == 1) {
        for (size_t j = 0; j < jobs.size(); ++j) run_job(j);
    } else {
        std::vector<std::thread> pool;
        std::exception_ptr error;
        std::mutex error_mu;
        for (int w = 0; w < threads; ++w)
            pool.emplace_back([&, w]() {
                try {
                    for (size_t j = static_cast<size_t>(w); j < jobs.size(); j += threads) run_job(j);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mu);
                    if (!error) error = std::current_exception();
                }
            });
        for (auto& t : pool) t.join();
        if (error) std::rethrow_exception(error);
    }

    MetricsReport report;
    report.cells = std::move(cells);
    report.seed = params.seed;
    report.sampler_steps = steps;
    report.n_targets = params.n_targets;

    // Kahan-compensated accumulation in fixed cell order
    for (int k : params.view_counts) {
        double sum_p = 0, c_p = 0, sum_s = 0, c_s = 0;
        double sum_p2 = 0, c_p2 = 0, sum_s2 = 0, c_s2 = 0;
        int n = 0;
        auto acc = [](double& sum, double& comp, double v) {
            double y = v - comp;
            double t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        };
        for (const CellResult& r : report.cells) {
            if (r.k != k) continue;
            acc(sum_p, c_p, r.psnr);
            acc(sum_s, c_s, r.ssim);
            acc(sum_p2, c_p2, r.psnr * r.psnr);
            acc(sum_s2, c_s2, r.ssim * r.ssim);
            ++n;
        }
        KSummary s;
        s.k = k;
        s.count = n;
        s.psnr_mean = sum_p / n;
        s.ssim_mean = sum_s / n;
        s.psnr_std = std::sqrt(std::max(0.0, sum_p2 / n - s.psnr_mean * s.psnr_mean));
        s.ssim_std = std::sqrt(std::max(0.0, sum_s2 / n - s.ssim_mean * s.ssim_mean));
        report.summary.push_back(s);
    }
    return report;
}

void write_report_csv(const MetricsReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_report_csv: cannot open " + path);
    out << "row_type,k,scene_id,target_idx,psnr,ssim,psnr_std,ssim_std,count\n";
    char buf[160];
    for (const CellResult& r : report.cells) {
        std::snprintf(buf, sizeof(buf), "cell,%d,%d,%d,%.6f,%.6f,,,\n", r.k, r.scene_id, r.target_idx,
                      r.psnr, r.ssim);
        out << buf;
    }
    for (const KSummary& s : report.summary) {
        std::snprintf(buf, sizeof(buf), "summary,%d,,,%.6f,%.6f,%.6f,%.6f,%d\n", s.k, s.psnr_mean,
                      s.ssim_mean, s.psnr_std, s.ssim_std, s.count);
        out << buf;
    }
}

std::string format_report_table(const MetricsReport& report) {
    std::ostringstream os;
    char buf[128];
    os << "View num ";
    for (const KSummary& s : report.summary) {
        std::snprintf(buf, sizeof(buf), "%10d", s.k);
        os << buf;
    }
    os << "\nPSNR     ";
    for (const KSummary& s : report.summary) {
        std::snprintf(buf, sizeof(buf), "%10.3f", s.psnr_mean);
        os << buf;
    }
    os << "\nSSIM     ";
    for (const KSummary& s : report.summary) {
        std::snprintf(buf, sizeof(buf), "%10.3f", s.ssim_mean);
        os << buf;
    }
    os << "\n";
    return os.str();
}

}  // namespace valid::evaluation
