#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "valid/geometry.hpp"
#include "valid/scenes.hpp"

using namespace valid;
using namespace valid::scenes;
namespace fs = std::filesystem;

namespace {
fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("valid_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

int silhouette(const Image& img) {
    int n = 0;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            if (img.at(y, x, 0) != 1.0 || img.at(y, x, 1) != 1.0 || img.at(y, x, 2) != 1.0) ++n;
    return n;
}
}  // namespace

TEST_CASE("empty scene renders all white") {
    SceneSpec spec;
    Image img = render(spec, geometry::CameraPose(1.0, 0.3, 1.5), 16);
    for (double v : img.values) CHECK(v == 1.0);
}

TEST_CASE("a centered sphere looks identical from every azimuth") {
    SceneSpec spec;
    Primitive p;
    p.shape = Shape::sphere;
    p.center = {0, 0, 0};
    p.size = {0.5, 0.5, 0.5};
    p.color = {0.8, 0.3, 0.2};
    spec.primitives.push_back(p);

    double polar = geometry::deg_to_rad(60);
    Image ref = render(spec, geometry::CameraPose(polar, 0.0, 1.5), 32);
    for (double az_deg : {37.0, 90.0, 181.5, 311.0}) {
        Image img = render(spec, geometry::CameraPose(polar, geometry::deg_to_rad(az_deg), 1.5), 32);
        REQUIRE(img.values.size() == ref.values.size());
        double max_diff = 0;
        for (size_t i = 0; i < img.values.size(); ++i)
            max_diff = std::max(max_diff, std::abs(img.values[i] - ref.values[i]));
        CHECK(max_diff < 1e-12);
    }
}

TEST_CASE("silhouette of a unit sphere is azimuth-invariant within rasterization jitter") {
    SceneSpec spec;
    Primitive p;
    p.shape = Shape::sphere;
    p.size = {1.0, 1.0, 1.0};
    spec.primitives.push_back(p);
    double polar = geometry::deg_to_rad(75);
    int ref = silhouette(render(spec, geometry::CameraPose(polar, 0.0, 1.5), 32));
    for (double az : {0.7, 1.9, 3.1, 5.2}) {
        int s = silhouette(render(spec, geometry::CameraPose(polar, az, 1.5), 32));
        CHECK(std::abs(s - ref) <= 2);
    }
}

TEST_CASE("rendering is bitwise deterministic") {
    SceneSpec spec = make_scene_spec(0, 99);
    geometry::CameraPose pose(1.1, 2.2, 1.5);
    Image a = render(spec, pose, 32);
    Image b = render(spec, pose, 32);
    CHECK(a.values == b.values);
    CHECK_THROWS(render(spec, pose, 24));
}

TEST_CASE("generated scene specs regenerate bit-identically and fit the unit ball") {
    for (uint64_t seed : {1ull, 77ull, 900100ull}) {
        SceneSpec a = make_scene_spec(3, seed);
        SceneSpec b = make_scene_spec(3, seed);
        REQUIRE(a.primitives.size() == b.primitives.size());
        for (size_t i = 0; i < a.primitives.size(); ++i) {
            CHECK(a.primitives[i].center == b.primitives[i].center);
            CHECK(a.primitives[i].size == b.primitives[i].size);
            CHECK(a.primitives[i].color == b.primitives[i].color);
        }
        validate_scene_spec(a);
    }
}

TEST_CASE("dataset generation writes the declared images and round-trips") {
    fs::path dir = temp_dir("gen");
    DatasetParams params;
    params.n_scenes = 4;
    params.views_per_scene = 3;
    params.resolution = 16;
    params.seed = 5;
    SceneManifest m = generate_dataset(params, dir.string());
    REQUIRE(m.scenes.size() == 4);
    int n_images = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir / "images"))
        if (e.path().extension() == ".png") ++n_images;
    CHECK(n_images == 12);
    CHECK(!m.split_indices("train").empty());
    CHECK(!m.split_indices("test").empty());

    SceneManifest loaded = load_manifest((dir / "manifest.json").string());
    CHECK(loaded.dataset_id == m.dataset_id);
    CHECK(loaded.resolution == m.resolution);
    REQUIRE(loaded.scenes.size() == m.scenes.size());
    for (size_t s = 0; s < m.scenes.size(); ++s) {
        CHECK(loaded.scenes[s].split == m.scenes[s].split);
        REQUIRE(loaded.scenes[s].views.size() == m.scenes[s].views.size());
        for (size_t v = 0; v < m.scenes[s].views.size(); ++v) {
            CHECK(loaded.scenes[s].views[v].image_relpath == m.scenes[s].views[v].image_relpath);
            CHECK(loaded.scenes[s].views[v].azimuth_deg ==
                  doctest::Approx(m.scenes[s].views[v].azimuth_deg));
        }
    }

    CHECK_THROWS(generate_dataset(DatasetParams{.n_scenes = 0}, dir.string()));
    DatasetParams bad = params;
    bad.views_per_scene = 1;
    CHECK_THROWS(generate_dataset(bad, dir.string()));
}

TEST_CASE("regeneration with the same seed is byte-identical") {
    DatasetParams params;
    params.n_scenes = 2;
    params.views_per_scene = 2;
    params.resolution = 16;
    params.seed = 11;
    fs::path a = temp_dir("gen_a"), b = temp_dir("gen_b");
    generate_dataset(params, a.string());
    generate_dataset(params, b.string());
    for (const auto& e : fs::recursive_directory_iterator(a)) {
        if (!e.is_regular_file()) continue;
        fs::path rel = fs::relative(e.path(), a);
        std::ifstream fa(e.path(), std::ios::binary), fb(b / rel, std::ios::binary);
        REQUIRE(fb.good());
        std::string da((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
        std::string db((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
        CHECK(da == db);
    }
}

TEST_CASE("manifest validation catches missing and mis-sized images") {
    fs::path dir = temp_dir("gen_bad");
    DatasetParams params;
    params.n_scenes = 2;
    params.views_per_scene = 2;
    params.resolution = 16;
    params.seed = 3;
    SceneManifest m = generate_dataset(params, dir.string());

    fs::path victim = dir / m.scenes[0].views[0].image_relpath;
    fs::path stash = victim;
    stash += ".bak";
    fs::rename(victim, stash);
    CHECK_THROWS_WITH_AS(load_manifest((dir / "manifest.json").string()),
                         doctest::Contains(victim.filename().string().c_str()), std::runtime_error);
    fs::rename(stash, victim);

    // replace one image with a wrong-resolution one
    Image wrong = Image::white(8, 8);
    save_png(wrong, victim.string());
    CHECK_THROWS(load_manifest((dir / "manifest.json").string()));
}

TEST_CASE("png save/load round-trips within quantization") {
    fs::path dir = temp_dir("png");
    SceneSpec spec = make_scene_spec(0, 13);
    Image img = render(spec, geometry::CameraPose(1.0, 0.5, 1.5), 16);
    std::string path = (dir / "x.png").string();
    save_png(img, path);
    Image back = load_png(path);
    REQUIRE(back.height == img.height);
    REQUIRE(back.width == img.width);
    for (size_t i = 0; i < img.values.size(); ++i)
        CHECK(std::abs(back.values[i] - img.values[i]) <= 0.5 / 255.0 + 1e-12);
}
