#include "valid/geometry.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace valid::geometry {

namespace {
double wrap_azimuth(double a) {
    a = std::fmod(a, kTwoPi);
    if (a < 0) a += kTwoPi;
    return a;
}
}  // namespace

CameraPose::CameraPose(double polar_rad, double azimuth_rad, double radius_units)
    : polar(polar_rad), azimuth(wrap_azimuth(azimuth_rad)), radius(radius_units) {
    if (!(polar >= 0.0 && polar <= kPi))
        throw std::invalid_argument("camera pose: polar " + std::to_string(polar_rad) + " outside [0, pi]");
    if (!(radius > 0.0))
        throw std::invalid_argument("camera pose: radius " + std::to_string(radius_units) + " must be positive");
}

RelativePose relative_pose(const CameraPose& source, const CameraPose& target) {
    double d_az = target.azimuth - source.azimuth;
    return RelativePose{
        target.polar - source.polar,
        std::sin(d_az),
        std::cos(d_az),
        target.radius - source.radius,
    };
}

std::vector<CameraPose> sample_source_views(uint64_t rng_seed, int count, const ViewSampling& cfg) {
    if (count < 1 || count > 4)
        throw std::invalid_argument("sample_source_views: count " + std::to_string(count) + " outside [1, 4]");
    Rng rng(rng_seed);
    double az0 = rng.uniform(0.0, kTwoPi);
    std::vector<CameraPose> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i)
        out.emplace_back(cfg.source_polar, az0 - i * cfg.source_azimuth_step, cfg.radius);
    return out;
}

std::vector<CameraPose> sample_target_views(uint64_t rng_seed, int count, const ViewSampling& cfg) {
    if (count < 1)
        throw std::invalid_argument("sample_target_views: count " + std::to_string(count) + " must be >= 1");
    Rng rng(rng_seed);
    std::vector<CameraPose> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        double polar = rng.uniform(cfg.polar_lo, cfg.polar_hi);
        double az = rng.uniform(0.0, kTwoPi);
        out.emplace_back(polar, az, cfg.radius);
    }
    return out;
}

}  // namespace valid::geometry
