#include "valid/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace valid::scenes {

namespace {

struct Vec3 {
    double x = 0, y = 0, z = 0;
    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
};
double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
double norm(const Vec3& v) { return std::sqrt(dot(v, v)); }
Vec3 normalized(const Vec3& v) {
    double n = norm(v);
    return {v.x / n, v.y / n, v.z / n};
}
Vec3 from_array(const std::array<double, 3>& a) { return {a[0], a[1], a[2]}; }

constexpr double kAmbient = 0.25;
constexpr double kTanHalfFov = 1.0;  // 90 degree field of view
constexpr double kRayEps = 1e-9;

struct Hit {
    double t = std::numeric_limits<double>::infinity();
    Vec3 normal;
    const Primitive* prim = nullptr;
};

bool intersect_sphere(const Vec3& o, const Vec3& d, const Primitive& p, Hit& hit) {
    Vec3 c = from_array(p.center);
    double r = p.size[0];
    Vec3 oc = o - c;
    double b = dot(oc, d);
    double disc = b * b - (dot(oc, oc) - r * r);
    if (disc < 0) return false;
    double sq = std::sqrt(disc);
    double t = -b - sq;
    if (t < kRayEps) t = -b + sq;
    if (t < kRayEps || t >= hit.t) return false;
    hit.t = t;
    hit.normal = normalized(o + d * t - c);
    hit.prim = &p;
    return true;
}

bool intersect_box(const Vec3& o, const Vec3& d, const Primitive& p, Hit& hit) {
    Vec3 c = from_array(p.center);
    const std::array<double, 3> he = p.size;
    double tmin = -std::numeric_limits<double>::infinity();
    double tmax = std::numeric_limits<double>::infinity();
    int entry_axis = -1;
    double od[3] = {o.x - c.x, o.y - c.y, o.z - c.z};
    double dd[3] = {d.x, d.y, d.z};
    for (int a = 0; a < 3; ++a) {
        if (std::abs(dd[a]) < 1e-15) {
            if (std::abs(od[a]) > he[a]) return false;
            continue;
        }
        double inv = 1.0 / dd[a];
        double t0 = (-he[a] - od[a]) * inv;
        double t1 = (he[a] - od[a]) * inv;
        if (t0 > t1) std::swap(t0, t1);
        if (t0 > tmin) {
            tmin = t0;
            entry_axis = a;
        }
        tmax = std::min(tmax, t1);
        if (tmin > tmax) return false;
    }
    double t = tmin;
    if (t < kRayEps) return false;  // camera inside the box is not a hit
    if (t >= hit.t) return false;
    hit.t = t;
    Vec3 n{0, 0, 0};
    double hitp[3] = {od[0] + dd[0] * t, od[1] + dd[1] * t, od[2] + dd[2] * t};
    if (entry_axis == 0) n.x = hitp[0] > 0 ? 1 : -1;
    if (entry_axis == 1) n.y = hitp[1] > 0 ? 1 : -1;
    if (entry_axis == 2) n.z = hitp[2] > 0 ? 1 : -1;
    hit.normal = n;
    hit.prim = &p;
    return true;
}

}  // namespace

double Primitive::bounding_radius() const {
    if (shape == Shape::sphere) return size[0];
    return std::sqrt(size[0] * size[0] + size[1] * size[1] + size[2] * size[2]);
}

SceneSpec make_scene_spec(int scene_id, uint64_t generator_seed) {
    Rng rng(generator_seed);
    SceneSpec spec;
    spec.scene_id = scene_id;
    spec.generator_seed = generator_seed;
    int n = 2 + rng.uniform_int(3);  // 2..4 primitives: keeps scenes view-dependent
    for (int i = 0; i < n; ++i) {
        Primitive p;
        p.shape = rng.uniform_int(2) == 0 ? Shape::sphere : Shape::box;
        Vec3 dir{rng.normal(), rng.normal(), rng.normal()};
        double dn = norm(dir);
        if (dn < 1e-9) dir = Vec3{1, 0, 0}, dn = 1;
        double dist = rng.uniform(0.0, 0.45);
        p.center = {dir.x / dn * dist, dir.y / dn * dist, dir.z / dn * dist};
        if (p.shape == Shape::sphere) {
            double r = rng.uniform(0.25, 0.50);
            p.size = {r, r, r};
        } else {
            p.size = {rng.uniform(0.20, 0.42), rng.uniform(0.20, 0.42), rng.uniform(0.20, 0.42)};
        }
        for (int c = 0; c < 3; ++c) p.color[c] = rng.uniform(0.05, 0.95);
        double bound = dist + p.bounding_radius();
        if (bound > 1.0) {
            double f = 0.98 / bound;
            for (int c = 0; c < 3; ++c) {
                p.center[c] *= f;
                p.size[c] *= f;
            }
        }
        spec.primitives.push_back(p);
    }
    return spec;
}

void validate_scene_spec(const SceneSpec& spec) {
    if (spec.primitives.empty() || spec.primitives.size() > 4)
        throw std::invalid_argument("scene spec: primitive count must be 1..4");
    for (const Primitive& p : spec.primitives) {
        double bound = norm(from_array(p.center)) + p.bounding_radius();
        if (bound > 1.0 + 1e-9)
            throw std::invalid_argument("scene spec: primitive escapes the unit ball");
        for (int c = 0; c < 3; ++c)
            if (p.color[c] < 0.0 || p.color[c] > 1.0)
                throw std::invalid_argument("scene spec: color outside [0,1]");
    }
}

Image render(const SceneSpec& spec, const geometry::CameraPose& pose, int resolution) {
    if (resolution != 16 && resolution != 32 && resolution != 64)
        throw std::invalid_argument("render: resolution " + std::to_string(resolution) +
                                    " not in {16, 32, 64}");
    double st = std::sin(pose.polar), ct = std::cos(pose.polar);
    double sp = std::sin(pose.azimuth), cp = std::cos(pose.azimuth);
    Vec3 eye{pose.radius * st * cp, pose.radius * st * sp, pose.radius * ct};
    Vec3 fwd = normalized(Vec3{0, 0, 0} - eye);
    Vec3 up_world{0, 0, 1};
    if (std::abs(dot(fwd, up_world)) > 0.999) up_world = Vec3{0, 1, 0};
    Vec3 right = normalized(cross(fwd, up_world));
    Vec3 up = cross(right, fwd);
    // light rides with the camera so images at equal polar differ only by the
    // scene content, not by where the sun sits
    Vec3 light = normalized(fwd * -1.0 + right * 0.35 + up * 0.45);

    Image img = Image::white(resolution, resolution);
    for (int y = 0; y < resolution; ++y) {
        double ndc_y = 1.0 - 2.0 * (y + 0.5) / resolution;
        for (int x = 0; x < resolution; ++x) {
            double ndc_x = 2.0 * (x + 0.5) / resolution - 1.0;
            Vec3 dir = normalized(fwd + right * (ndc_x * kTanHalfFov) + up * (ndc_y * kTanHalfFov));
            Hit hit;
            for (const Primitive& p : spec.primitives) {
                if (p.shape == Shape::sphere)
                    intersect_sphere(eye, dir, p, hit);
                else
                    intersect_box(eye, dir, p, hit);
            }
            if (!hit.prim) continue;  // stays white
            double lambert = std::max(0.0, dot(hit.normal, light));
            double shade = kAmbient + (1.0 - kAmbient) * lambert;
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = hit.prim->color[c] * shade;
        }
    }
    return img;
}

geometry::CameraPose ViewRecord::pose() const {
    return geometry::CameraPose(geometry::deg_to_rad(polar_deg), geometry::deg_to_rad(azimuth_deg),
                                radius);
}

std::vector<int> SceneManifest::split_indices(const std::string& split) const {
    std::vector<int> out;
    for (size_t i = 0; i < scenes.size(); ++i)
        if (scenes[i].split == split) out.push_back(static_cast<int>(i));
    return out;
}

namespace {

json primitive_to_json(const Primitive& p) {
    return json{{"shape", p.shape == Shape::sphere ? "sphere" : "box"},
                {"center", p.center},
                {"size", p.size},
                {"color", p.color}};
}

Primitive primitive_from_json(const json& j) {
    Primitive p;
    std::string s = j.at("shape").get<std::string>();
    if (s == "sphere")
        p.shape = Shape::sphere;
    else if (s == "box")
        p.shape = Shape::box;
    else
        throw std::runtime_error("manifest: unknown primitive shape '" + s + "'");
    p.center = j.at("center").get<std::array<double, 3>>();
    p.size = j.at("size").get<std::array<double, 3>>();
    p.color = j.at("color").get<std::array<double, 3>>();
    return p;
}

}  // namespace

SceneManifest generate_dataset(const DatasetParams& params, const std::string& out_dir) {
    if (params.n_scenes < 1) throw std::invalid_argument("generate_dataset: n_scenes must be >= 1");
    if (params.views_per_scene < 2)
        throw std::invalid_argument("generate_dataset: views_per_scene must be >= 2");

    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "images", ec);
    if (ec) throw std::runtime_error("generate_dataset: cannot create " + out_dir + ": " + ec.message());

    SceneManifest m;
    m.resolution = params.resolution;
    m.views_per_scene = params.views_per_scene;
    m.seed = params.seed;
    m.sampling = params.sampling;
    m.dataset_id = "procgen-" + std::to_string(params.n_scenes) + "x" +
                   std::to_string(params.views_per_scene) + "-r" + std::to_string(params.resolution) +
                   "-seed" + std::to_string(params.seed);

    int n_test = static_cast<int>(std::lround(params.n_scenes * params.test_fraction));
    n_test = std::min(n_test, params.n_scenes - 1);
    int n_train = params.n_scenes - n_test;

    for (int s = 0; s < params.n_scenes; ++s) {
        SceneEntry entry;
        entry.spec = make_scene_spec(s, derive_seed(params.seed, {0x5ce5eull, static_cast<uint64_t>(s)}));
        entry.split = s < n_train ? "train" : "test";

        char dirbuf[64];
        std::snprintf(dirbuf, sizeof(dirbuf), "images/scene_%04d", s);
        fs::create_directories(fs::path(out_dir) / dirbuf, ec);
        if (ec) throw std::runtime_error("generate_dataset: cannot create scene dir: " + ec.message());

        auto poses = geometry::sample_target_views(
            derive_seed(params.seed, {0x71e15ull, static_cast<uint64_t>(s)}), params.views_per_scene,
            params.sampling);
        for (int v = 0; v < params.views_per_scene; ++v) {
            Image img = render(entry.spec, poses[v], params.resolution);
            char relbuf[96];
            std::snprintf(relbuf, sizeof(relbuf), "%s/view_%02d.png", dirbuf, v);
            try {
                save_png(img, (fs::path(out_dir) / relbuf).string());
            } catch (const std::exception& e) {
                throw std::runtime_error(std::string("generate_dataset: image write failed: ") + e.what());
            }
            ViewRecord rec;
            rec.polar_deg = geometry::rad_to_deg(poses[v].polar);
            rec.azimuth_deg = geometry::rad_to_deg(poses[v].azimuth);
            rec.radius = poses[v].radius;
            rec.image_relpath = relbuf;
            entry.views.push_back(std::move(rec));
        }
        m.scenes.push_back(std::move(entry));
    }
    save_manifest(m, (fs::path(out_dir) / "manifest.json").string());
    return m;
}

void save_manifest(const SceneManifest& m, const std::string& path) {
    json j;
    j["format_version"] = 1;
    j["dataset_id"] = m.dataset_id;
    j["resolution"] = m.resolution;
    j["views_per_scene"] = m.views_per_scene;
    j["seed"] = m.seed;
    j["sampling"] = {{"polar_lo_deg", geometry::rad_to_deg(m.sampling.polar_lo)},
                     {"polar_hi_deg", geometry::rad_to_deg(m.sampling.polar_hi)},
                     {"radius", m.sampling.radius},
                     {"source_polar_deg", geometry::rad_to_deg(m.sampling.source_polar)},
                     {"source_azimuth_step_deg", geometry::rad_to_deg(m.sampling.source_azimuth_step)}};
    j["scenes"] = json::array();
    for (const SceneEntry& e : m.scenes) {
        json js;
        js["scene_id"] = e.spec.scene_id;
        js["generator_seed"] = e.spec.generator_seed;
        js["split"] = e.split;
        js["primitives"] = json::array();
        for (const Primitive& p : e.spec.primitives) js["primitives"].push_back(primitive_to_json(p));
        js["views"] = json::array();
        for (const ViewRecord& v : e.views)
            js["views"].push_back(json{{"polar_deg", v.polar_deg},
                                       {"azimuth_deg", v.azimuth_deg},
                                       {"radius", v.radius},
                                       {"image", v.image_relpath}});
        j["scenes"].push_back(std::move(js));
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_manifest: cannot open " + path);
    out << j.dump(1) << "\n";
}

SceneManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_manifest: cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error("load_manifest: malformed json in " + path + ": " + e.what());
    }
    fs::path base = fs::path(path).parent_path();

    SceneManifest m;
    try {
        m.dataset_id = j.at("dataset_id").get<std::string>();
        m.resolution = j.at("resolution").get<int>();
        m.views_per_scene = j.at("views_per_scene").get<int>();
        m.seed = j.at("seed").get<uint64_t>();
        const json& sj = j.at("sampling");
        m.sampling.polar_lo = geometry::deg_to_rad(sj.at("polar_lo_deg").get<double>());
        m.sampling.polar_hi = geometry::deg_to_rad(sj.at("polar_hi_deg").get<double>());
        m.sampling.radius = sj.at("radius").get<double>();
        m.sampling.source_polar = geometry::deg_to_rad(sj.at("source_polar_deg").get<double>());
        m.sampling.source_azimuth_step =
            geometry::deg_to_rad(sj.at("source_azimuth_step_deg").get<double>());

        for (const json& js : j.at("scenes")) {
            SceneEntry e;
            e.spec.scene_id = js.at("scene_id").get<int>();
            e.spec.generator_seed = js.at("generator_seed").get<uint64_t>();
            e.split = js.at("split").get<std::string>();
            if (e.split != "train" && e.split != "test")
                throw std::runtime_error("load_manifest: unknown split '" + e.split + "'");
            for (const json& jp : js.at("primitives")) e.spec.primitives.push_back(primitive_from_json(jp));
            validate_scene_spec(e.spec);
            SceneSpec regen = make_scene_spec(e.spec.scene_id, e.spec.generator_seed);
            if (regen.primitives.size() != e.spec.primitives.size())
                throw std::runtime_error("load_manifest: scene " + std::to_string(e.spec.scene_id) +
                                         " does not regenerate from its seed");
            for (const json& jv : js.at("views")) {
                ViewRecord v;
                v.polar_deg = jv.at("polar_deg").get<double>();
                v.azimuth_deg = jv.at("azimuth_deg").get<double>();
                v.radius = jv.at("radius").get<double>();
                v.image_relpath = jv.at("image").get<std::string>();
                fs::path img_path = base / v.image_relpath;
                if (!fs::exists(img_path))
                    throw std::runtime_error("load_manifest: missing image file " + img_path.string());
                auto [w, h] = png_dimensions(img_path.string());
                if (w != m.resolution || h != m.resolution)
                    throw std::runtime_error("load_manifest: image " + img_path.string() + " is " +
                                             std::to_string(w) + "x" + std::to_string(h) +
                                             ", manifest declares " + std::to_string(m.resolution));
                e.views.push_back(std::move(v));
            }
            m.scenes.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw std::runtime_error("load_manifest: malformed manifest " + path + ": " + e.what());
    }
    return m;
}

Image load_view_image(const std::string& manifest_dir, const ViewRecord& view) {
    return load_png((fs::path(manifest_dir) / view.image_relpath).string());
}

}  // namespace valid::scenes
