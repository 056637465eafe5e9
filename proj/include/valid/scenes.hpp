#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "valid/geometry.hpp"
#include "valid/image.hpp"

namespace valid::scenes {

enum class Shape { sphere, box };

struct Primitive {
    Shape shape = Shape::sphere;
    std::array<double, 3> center{0, 0, 0};
    std::array<double, 3> size{0.3, 0.3, 0.3};  // sphere: size[0] = radius; box: half extents
    std::array<double, 3> color{0.5, 0.5, 0.5};

    double bounding_radius() const;
};

struct SceneSpec {
    int scene_id = 0;
    uint64_t generator_seed = 0;
    std::vector<Primitive> primitives;  // 1..4, all inside the unit ball
};

// Deterministic spec from its seed; regeneration is bit-identical.
SceneSpec make_scene_spec(int scene_id, uint64_t generator_seed);
void validate_scene_spec(const SceneSpec& spec);

// Perspective raycast of the scene looking at the origin. Lambert shading with
// one light direction fixed in the camera frame; rays that miss everything
// give exactly (1,1,1). resolution must be one of {16, 32, 64}.
Image render(const SceneSpec& spec, const geometry::CameraPose& pose, int resolution);

struct ViewRecord {
    double polar_deg = 0;
    double azimuth_deg = 0;
    double radius = 0;
    std::string image_relpath;

    geometry::CameraPose pose() const;
};

struct SceneEntry {
    SceneSpec spec;
    std::string split;  // "train" | "test"
    std::vector<ViewRecord> views;
};

struct SceneManifest {
    std::string dataset_id;
    int resolution = 32;
    int views_per_scene = 12;
    uint64_t seed = 0;
    geometry::ViewSampling sampling;
    std::vector<SceneEntry> scenes;

    std::vector<int> split_indices(const std::string& split) const;
};

struct DatasetParams {
    int n_scenes = 64;
    int views_per_scene = 12;
    int resolution = 32;
    uint64_t seed = 0;
    double test_fraction = 0.25;
    geometry::ViewSampling sampling;
};

// Renders every view to PNG under out_dir and writes out_dir/manifest.json.
SceneManifest generate_dataset(const DatasetParams& params, const std::string& out_dir);

void save_manifest(const SceneManifest& manifest, const std::string& path);
// Validates referenced files, declared resolution and scene-spec regeneration.
SceneManifest load_manifest(const std::string& path);

// Loads a referenced view image from disk (path resolved against the manifest dir).
Image load_view_image(const std::string& manifest_dir, const ViewRecord& view);

}  // namespace valid::scenes
