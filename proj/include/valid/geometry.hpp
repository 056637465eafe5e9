#pragma once

#include <cstdint>
#include <vector>

#include "valid/rng.hpp"

namespace valid::geometry {

constexpr double kPi = 3.14159265358979323846;
constexpr double kTwoPi = 2.0 * kPi;

inline double deg_to_rad(double d) { return d * kPi / 180.0; }
inline double rad_to_deg(double r) { return r * 180.0 / kPi; }

// Spherical camera on a ball around the origin; always looks at the origin.
struct CameraPose {
    double polar;    // [0, pi], radians
    double azimuth;  // normalized to [0, 2*pi)
    double radius;   // > 0, scene units

    CameraPose(double polar_rad, double azimuth_rad, double radius_units);
};

// 4-vector encoding of a source pose relative to a target pose
struct RelativePose {
    double d_polar;
    double sin_d_azimuth;
    double cos_d_azimuth;
    double d_radius;
};

// (theta_t - theta_s, sin(phi_t - phi_s), cos(phi_t - phi_s), r_t - r_s)
RelativePose relative_pose(const CameraPose& source, const CameraPose& target);

struct ViewSampling {
    double polar_lo = deg_to_rad(30.0);
    double polar_hi = deg_to_rad(90.0);
    double radius = 1.5;
    double source_polar = deg_to_rad(60.0);
    double source_azimuth_step = deg_to_rad(90.0);  // clockwise spacing
};

// Reference view at the protocol polar angle with a random azimuth; further
// views step clockwise in azimuth. count must be in [1, 4].
std::vector<CameraPose> sample_source_views(uint64_t rng_seed, int count,
                                            const ViewSampling& cfg = {});

// Uniformly random target poses inside the configured polar band.
std::vector<CameraPose> sample_target_views(uint64_t rng_seed, int count,
                                            const ViewSampling& cfg = {});

}  // namespace valid::geometry
