#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "setpose/data_io.hpp"
#include "setpose/errors.hpp"
#include "setpose/geometry.hpp"
#include "setpose/matching.hpp"
#include "setpose/metrics.hpp"
#include "setpose/rng.hpp"

namespace setpose {

/// Intrinsics of the synthetic camera; the values mirror the YCB-V capture
/// rig so annotation files look like the real dataset.
inline CameraIntrinsics synthetic_camera() {
    CameraIntrinsics cam;
    cam.fx = 1066.778;
    cam.fy = 1067.487;
    cam.cx = 312.9869;
    cam.cy = 241.3109;
    cam.width = 640;
    cam.height = 480;
    return cam;
}

/// Fixed extents per class. The first five are hand-picked household-sized
/// boxes with distinct proportions; further classes draw from a stream that
/// depends only on the class id.
inline Cuboid class_cuboid(int class_id) {
    static const std::array<Vec3, 5> table{Vec3(0.05, 0.035, 0.09), Vec3(0.035, 0.035, 0.05),
                                           Vec3(0.08, 0.03, 0.02), Vec3(0.06, 0.06, 0.025),
                                           Vec3(0.025, 0.025, 0.1)};
    if (class_id < 0) throw InvalidArgument("negative class id");
    if (class_id < int(table.size())) return {Vec3::Zero(), table[std::size_t(class_id)]};
    RngStream rng(0, "class-extents");
    auto s = rng.substream("class", std::uint64_t(class_id));
    return {Vec3::Zero(), Vec3(s.uniform(0.02, 0.1), s.uniform(0.02, 0.1), s.uniform(0.02, 0.1))};
}

/// Surface samples at the cell centers of an n x n grid on every face
/// (6 n^2 points, no duplicates along edges).
inline PointCloud cuboid_surface_points(const Cuboid& c, int n = 16) {
    validate_cuboid(c);
    PointCloud pc;
    pc.reserve(std::size_t(6 * n * n));
    for (int axis = 0; axis < 3; ++axis)
        for (double side : {-1.0, 1.0})
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    Vec3 u = Vec3::Zero();
                    u[axis] = side;
                    u[(axis + 1) % 3] = -1.0 + (2.0 * i + 1.0) / n;
                    u[(axis + 2) % 3] = -1.0 + (2.0 * j + 1.0) / n;
                    pc.push_back(c.center + u.cwiseProduct(c.half_extents));
                }
    return pc;
}

struct SyntheticConfig {
    int classes = 5;
    int max_objects = 3;
    int set_size = 20;  // object count never exceeds the prediction set
    int raster_h = 32;
    int raster_w = 32;
    int supersample = 4;
    double z_min = 0.5;
    double z_max = 2.0;
    double max_overlap_iou = 0.3;
    int max_tries = 100;
    CameraIntrinsics camera = synthetic_camera();

    void validate() const {
        if (classes <= 0) throw InvalidArgument("class count must be positive");
        if (max_objects < 0 || max_objects > set_size)
            throw InvalidArgument("max objects must lie in [0, set size]");
        if (raster_h <= 0 || raster_w <= 0 || supersample <= 0) throw InvalidArgument("bad raster size");
        if (!(z_min > 0.0 && z_max >= z_min)) throw InvalidArgument("bad depth range");
        camera.validate();
    }
};

struct SyntheticSample {
    std::uint64_t seed = 0;
    int raster_h = 0, raster_w = 0;
    std::vector<float> raster;  // [h][w][3], values in [0, 1]
    std::vector<TargetTuple> targets;
    CameraIntrinsics camera;
};

/// Regression targets for one object: normalized IBB keypoints, the hull box
/// of the projected corners, and the translation code.
inline TargetTuple make_target(int class_id, const Pose& pose, const Cuboid& cuboid, const CameraIntrinsics& cam) {
    TargetTuple t;
    t.class_id = class_id;
    t.model_id = class_id;
    t.pose = pose;
    t.translation = encode_translation(pose.t, cam);
    const auto px = project(generate_ibb(cuboid), pose, cam);
    t.box = hull_box(std::vector<Vec2>(px.points.begin(), px.points.begin() + 8), cam);
    t.keypoints = px;
    for (auto& p : t.keypoints.points) p = Vec2(p.x() / cam.width, p.y() / cam.height);
    return t;
}

namespace detail {

/// Face colors: channel 0 carries the class intensity, channels 1 and 2 name
/// the face (axis and side) so orientation is not ambiguous under the box
/// symmetries.
inline std::array<float, 3> face_color(int class_id, int classes, int axis, bool positive) {
    return {float(0.2 + 0.8 * (class_id + 1) / classes), float(0.25 + 0.25 * axis), positive ? 1.0f : 0.5f};
}

inline bool inside_convex(const std::array<Vec2, 4>& q, double x, double y) {
    // Accepts either winding.
    int pos = 0, neg = 0;
    for (int i = 0; i < 4; ++i) {
        const Vec2& a = q[std::size_t(i)];
        const Vec2& b = q[std::size_t((i + 1) % 4)];
        const double cr = (b.x() - a.x()) * (y - a.y()) - (b.y() - a.y()) * (x - a.x());
        pos += cr > 0.0;
        neg += cr < 0.0;
    }
    return pos == 0 || neg == 0;
}

/// Painter's algorithm over objects (far to near); within a convex object
/// the front faces never overlap. Every raster cell averages s x s samples.
inline std::vector<float> render(const std::vector<TargetTuple>& targets, const SyntheticConfig& cfg) {
    const int H = cfg.raster_h, W = cfg.raster_w, S = cfg.supersample;
    std::vector<float> acc(std::size_t(H * W * 3), 0.0f);
    std::vector<float> frame(std::size_t(H * S * W * S * 3), 0.0f);
    std::vector<std::size_t> order(targets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return targets[a].pose.t.z() > targets[b].pose.t.z(); });
    const auto& cam = cfg.camera;
    for (std::size_t oi : order) {
        const auto& t = targets[oi];
        const Cuboid c = class_cuboid(t.class_id);
        const auto corners = cuboid_corners(c);
        for (int axis = 0; axis < 3; ++axis)
            for (bool positive : {false, true}) {
                const int bit = 4 >> axis;
                std::array<int, 4> idx{};
                int k = 0;
                for (int i = 0; i < 8; ++i)
                    if (bool(i & bit) == positive) idx[std::size_t(k++)] = i;
                // Corner indices in cyclic order around the face.
                std::swap(idx[2], idx[3]);
                Vec3 normal = Vec3::Zero();
                normal[axis] = positive ? 1.0 : -1.0;
                const Vec3 n_cam = t.pose.R * normal;
                const Vec3 center_cam = t.pose.apply(c.center + normal.cwiseProduct(c.half_extents));
                if (n_cam.dot(center_cam) >= 0.0) continue;  // back face
                std::array<Vec2, 4> q;
                for (int i = 0; i < 4; ++i) {
                    const Vec2 p = project_point(corners[std::size_t(idx[std::size_t(i)])], t.pose, cam);
                    q[std::size_t(i)] = Vec2(p.x() / cam.width * W * S, p.y() / cam.height * H * S);
                }
                double x0 = q[0].x(), x1 = x0, y0 = q[0].y(), y1 = y0;
                for (const auto& p : q) {
                    x0 = std::min(x0, p.x());
                    x1 = std::max(x1, p.x());
                    y0 = std::min(y0, p.y());
                    y1 = std::max(y1, p.y());
                }
                const int c0 = std::max(0, int(std::floor(x0))), c1 = std::min(W * S - 1, int(std::ceil(x1)));
                const int r0 = std::max(0, int(std::floor(y0))), r1 = std::min(H * S - 1, int(std::ceil(y1)));
                const auto color = face_color(t.class_id, cfg.classes, axis, positive);
                for (int r = r0; r <= r1; ++r)
                    for (int cc = c0; cc <= c1; ++cc)
                        if (inside_convex(q, cc + 0.5, r + 0.5))
                            for (int ch = 0; ch < 3; ++ch)
                                frame[(std::size_t(r) * W * S + std::size_t(cc)) * 3 + std::size_t(ch)] =
                                    color[std::size_t(ch)];
            }
    }
    const float inv = 1.0f / float(S * S);
    for (int r = 0; r < H * S; ++r)
        for (int cc = 0; cc < W * S; ++cc)
            for (int ch = 0; ch < 3; ++ch)
                acc[(std::size_t(r / S) * W + std::size_t(cc / S)) * 3 + std::size_t(ch)] +=
                    frame[(std::size_t(r) * W * S + std::size_t(cc)) * 3 + std::size_t(ch)] * inv;
    return acc;
}

inline bool all_in_frame(const TargetTuple& t) {
    for (const auto& p : t.keypoints.points)
        if (!(p.x() >= 0.0 && p.x() <= 1.0 && p.y() >= 0.0 && p.y() <= 1.0)) return false;
    return true;
}

}  // namespace detail

/// Random scene with 0..max_objects cuboids. Each object keeps redrawing its
/// pose until every keypoint lies inside the image and its box overlaps no
/// earlier box by more than `max_overlap_iou`; after `max_tries` failures the
/// scene stops growing.
inline SyntheticSample generate_scene(std::uint64_t seed, const SyntheticConfig& cfg) {
    cfg.validate();
    RngStream rng(seed, "scene");
    SyntheticSample s;
    s.seed = seed;
    s.camera = cfg.camera;
    s.raster_h = cfg.raster_h;
    s.raster_w = cfg.raster_w;
    const auto count = int(rng.below(std::uint64_t(cfg.max_objects) + 1));
    for (int k = 0; k < count; ++k) {
        const int cls = int(rng.below(std::uint64_t(cfg.classes)));
        const Cuboid cub = class_cuboid(cls);
        bool placed = false;
        for (int attempt = 0; attempt < cfg.max_tries && !placed; ++attempt) {
            Pose pose;
            pose.R = random_rotation(rng);
            TranslationCode code{rng.uniform(), rng.uniform(), rng.uniform(cfg.z_min, cfg.z_max)};
            pose.t = decode_translation(code, cfg.camera);
            bool front = true;
            for (const auto& x : cuboid_corners(cub)) front = front && pose.apply(x).z() > 1e-6;
            if (!front) continue;
            TargetTuple t = make_target(cls, pose, cub, cfg.camera);
            if (!detail::all_in_frame(t)) continue;
            bool clear = true;
            for (const auto& o : s.targets) clear = clear && iou(o.box, t.box) <= cfg.max_overlap_iou;
            if (!clear) continue;
            s.targets.push_back(std::move(t));
            placed = true;
        }
        if (!placed) break;
    }
    s.raster = detail::render(s.targets, cfg);
    return s;
}

inline SyntheticSample generate_scene(std::uint64_t seed, int classes, int max_objects) {
    SyntheticConfig cfg;
    cfg.classes = classes;
    cfg.max_objects = max_objects;
    return generate_scene(seed, cfg);
}

/// Seed of sample i of a dataset drawn with `seed`.
inline std::uint64_t sample_seed(std::uint64_t seed, std::size_t i) {
    return RngStream(seed, "dataset").substream("sample", i).next_u64();
}

struct SyntheticDataset {
    SyntheticConfig config;
    std::uint64_t seed = 0;
    std::vector<SyntheticSample> samples;

    /// Model clouds (meters) indexed by class id.
    std::vector<PointCloud> models() const {
        std::vector<PointCloud> out;
        for (int c = 0; c < config.classes; ++c) out.push_back(cuboid_surface_points(class_cuboid(c)));
        return out;
    }
};

inline SyntheticDataset generate_dataset(std::uint64_t seed, std::size_t count, const SyntheticConfig& cfg) {
    SyntheticDataset ds;
    ds.config = cfg;
    ds.seed = seed;
    for (std::size_t i = 0; i < count; ++i) ds.samples.push_back(generate_scene(sample_seed(seed, i), cfg));
    return ds;
}

// ---------------------------------------------------------------------------
// On-disk layout
//
//   manifest.json                 generator config, seed, per-image seeds
//   000000/scene_gt.json          BOP annotations (one scene, image id = index)
//   000000/scene_camera.json
//   000000/raster/000123.pfm      float raster, little-endian PFM
//   models/obj_000001.ply         cuboid surface samples in millimeters
//   models/models_info.json

namespace io {

inline void write_pfm(const fs::path& path, int h, int w, const std::vector<float>& rgb) {
    if (rgb.size() != std::size_t(h * w * 3)) throw ShapeMismatch("pfm: raster size does not match extents");
    std::ostringstream ss;
    ss << "PF\n" << w << " " << h << "\n-1.0\n";
    // PFM stores the bottom row first.
    for (int r = h - 1; r >= 0; --r)
        ss.write(reinterpret_cast<const char*>(rgb.data() + std::size_t(r) * w * 3), std::streamsize(w * 3 * 4));
    write_file_atomic(path, ss.str());
}

inline std::vector<float> read_pfm(const fs::path& path, int& h, int& w) {
    const std::string data = read_file(path);
    std::istringstream ss(data);
    std::string magic;
    double scale = 0.0;
    ss >> magic >> w >> h >> scale;
    if (magic != "PF" || w <= 0 || h <= 0) throw ParseError(path.string() + ": not a color PFM file");
    if (scale > 0.0) throw UnsupportedFormat(path.string() + ": big-endian PFM");
    ss.get();
    const std::size_t offset = std::size_t(ss.tellg());
    const std::size_t n = std::size_t(h) * std::size_t(w) * 3;
    if (data.size() < offset + n * 4) throw ParseError(path.string() + ": truncated PFM data");
    std::vector<float> rgb(n);
    for (int r = 0; r < h; ++r)
        std::memcpy(rgb.data() + std::size_t(h - 1 - r) * w * 3, data.data() + offset + std::size_t(r) * w * 12,
                    std::size_t(w) * 12);
    return rgb;
}

inline json config_to_json(const SyntheticConfig& c) {
    return {{"classes", c.classes},         {"max_objects", c.max_objects}, {"set_size", c.set_size},
            {"raster_h", c.raster_h},       {"raster_w", c.raster_w},       {"supersample", c.supersample},
            {"z_min", c.z_min},             {"z_max", c.z_max},             {"max_overlap_iou", c.max_overlap_iou},
            {"max_tries", c.max_tries},
            {"camera", {{"fx", c.camera.fx}, {"fy", c.camera.fy}, {"cx", c.camera.cx}, {"cy", c.camera.cy},
                        {"width", c.camera.width}, {"height", c.camera.height}}}};
}

inline SyntheticConfig config_from_json(const json& j) {
    SyntheticConfig c;
    try {
        c.classes = j.at("classes").get<int>();
        c.max_objects = j.at("max_objects").get<int>();
        c.set_size = j.at("set_size").get<int>();
        c.raster_h = j.at("raster_h").get<int>();
        c.raster_w = j.at("raster_w").get<int>();
        c.supersample = j.at("supersample").get<int>();
        c.z_min = j.at("z_min").get<double>();
        c.z_max = j.at("z_max").get<double>();
        c.max_overlap_iou = j.at("max_overlap_iou").get<double>();
        c.max_tries = j.at("max_tries").get<int>();
        const auto& k = j.at("camera");
        c.camera.fx = k.at("fx").get<double>();
        c.camera.fy = k.at("fy").get<double>();
        c.camera.cx = k.at("cx").get<double>();
        c.camera.cy = k.at("cy").get<double>();
        c.camera.width = k.at("width").get<int>();
        c.camera.height = k.at("height").get<int>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("manifest config: ") + e.what());
    }
    c.validate();
    return c;
}

inline std::string image_name(std::size_t i, const char* ext) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06zu.%s", i, ext);
    return buf;
}

inline void write_dataset(const fs::path& dir, const SyntheticDataset& ds) {
    ds.config.validate();
    json manifest = {{"format", "setpose-synthetic"}, {"version", 1}, {"seed", ds.seed},
                     {"count", ds.samples.size()}, {"config", config_to_json(ds.config)}};
    json classes = json::array();
    for (int c = 0; c < ds.config.classes; ++c) {
        const Vec3 h = class_cuboid(c).half_extents;
        classes.push_back({{"class_id", c}, {"obj_id", c + 1}, {"half_extents", {h.x(), h.y(), h.z()}}});
    }
    manifest["classes"] = classes;
    json seeds = json::array();
    SceneAnnotation scene;
    scene.scene_id = 0;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const auto& s = ds.samples[i];
        seeds.push_back(s.seed);
        ImageAnnotation im;
        im.scene_id = 0;
        im.im_id = int(i);
        im.camera = s.camera;
        for (const auto& t : s.targets) im.objects.push_back({t.class_id + 1, t.pose});
        scene.images.push_back(std::move(im));
        write_pfm(dir / "000000" / "raster" / image_name(i, "pfm"), s.raster_h, s.raster_w, s.raster);
    }
    manifest["sample_seeds"] = seeds;
    write_bop_scene(dir / "000000", scene);
    std::map<int, PointCloud> models_mm;
    const auto models = ds.models();
    for (int c = 0; c < ds.config.classes; ++c) {
        PointCloud mm = models[std::size_t(c)];
        for (auto& p : mm) p *= 1000.0;
        char name[32];
        std::snprintf(name, sizeof name, "obj_%06d.ply", c + 1);
        write_ply(dir / "models" / name, mm, true);
        models_mm[c + 1] = models[std::size_t(c)];
    }
    write_model_info(dir / "models" / "models_info.json", models_mm);
    write_file_atomic(dir / "manifest.json", manifest.dump(1) + "\n");
}

/// Reads a dataset written by write_dataset. Targets are rebuilt from the
/// stored poses and the class extents.
inline SyntheticDataset load_dataset(const fs::path& dir) {
    const json manifest = parse_json_file(dir / "manifest.json");
    if (manifest.value("format", "") != "setpose-synthetic")
        throw ParseError((dir / "manifest.json").string() + ": not a synthetic dataset manifest");
    SyntheticDataset ds;
    ds.config = config_from_json(manifest.at("config"));
    ds.seed = manifest.value("seed", std::uint64_t(0));
    const auto scene = load_bop_scene(dir / "000000", 0);
    const auto& seeds = manifest.at("sample_seeds");
    if (seeds.size() != scene.images.size())
        throw ValidationError("manifest lists " + std::to_string(seeds.size()) + " samples, annotations have " +
                              std::to_string(scene.images.size()));
    for (std::size_t i = 0; i < scene.images.size(); ++i) {
        const auto& im = scene.images[i];
        SyntheticSample s;
        s.seed = seeds[i].get<std::uint64_t>();
        s.camera = im.camera;
        for (const auto& o : im.objects) {
            const int cls = o.obj_id - 1;
            if (cls < 0 || cls >= ds.config.classes) throw UnknownClass("object id " + std::to_string(o.obj_id));
            s.targets.push_back(make_target(cls, o.pose, class_cuboid(cls), im.camera));
        }
        s.raster = read_pfm(dir / "000000" / "raster" / image_name(std::size_t(im.im_id), "pfm"), s.raster_h,
                            s.raster_w);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace io
}  // namespace setpose
