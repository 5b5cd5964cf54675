#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "setpose/errors.hpp"
#include "setpose/geometry.hpp"
#include "setpose/metrics.hpp"

namespace setpose::io {

namespace fs = std::filesystem;
using nlohmann::json;

struct ObjectAnnotation {
    int obj_id = 0;
    Pose pose;  // meters
};

struct ImageAnnotation {
    int scene_id = 0;
    int im_id = 0;
    CameraIntrinsics camera;
    std::vector<ObjectAnnotation> objects;
};

/// One BOP scene directory, images in ascending id order.
struct SceneAnnotation {
    int scene_id = 0;
    std::vector<ImageAnnotation> images;
};

// ---------------------------------------------------------------------------
// Small file helpers

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IOError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Writes through a sibling temp file and renames it into place.
inline void write_file_atomic(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IOError("cannot write " + tmp.string());
        out << content;
        out.flush();
        if (!out) throw IOError("write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IOError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline json parse_json_file(const fs::path& path) {
    const std::string text = read_file(path);
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
        const auto line = 1 + std::count(text.begin(), text.begin() + std::ptrdiff_t(upto ? upto - 1 : 0), '\n');
        throw ParseError(path.string() + ":" + std::to_string(line) + ": " + e.what());
    }
}

/// Millimeter value whose division by 1000 gives back `meters` exactly, so
/// load(write(x)) == x bit for bit.
inline double exact_mm(double meters) {
    double y = meters * 1000.0;
    if (y / 1000.0 == meters) return y;
    for (int k = 1; k <= 4; ++k) {
        double up = y, down = y;
        for (int s = 0; s < k; ++s) {
            up = std::nextafter(up, HUGE_VAL);
            down = std::nextafter(down, -HUGE_VAL);
        }
        if (up / 1000.0 == meters) return up;
        if (down / 1000.0 == meters) return down;
    }
    return y;
}

/// Orthonormality check (|R^T R - I| < tol and det > 0) followed by polar
/// projection when the matrix is not already orthonormal to round-off.
inline Mat3 validated_rotation(const Mat3& R, double tol, const std::string& where) {
    const double dev = (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (!(dev < tol) || !(R.determinant() > 0.0))
        throw ValidationError(where + ": rotation is not orthonormal (deviation " + std::to_string(dev) +
                              ", det " + std::to_string(R.determinant()) + ")");
    return dev < 1e-14 ? R : project_to_so3(R);
}

// ---------------------------------------------------------------------------
// BOP scene layout: scene_gt.json and scene_camera.json

namespace detail {

inline std::vector<double> numbers(const json& j, std::size_t n, const std::string& what) {
    if (!j.is_array() || j.size() != n) throw ParseError(what + ": expected " + std::to_string(n) + " numbers");
    std::vector<double> v;
    for (const auto& x : j) {
        if (!x.is_number()) throw ParseError(what + ": non-numeric entry");
        v.push_back(x.get<double>());
    }
    return v;
}

inline int image_key(const std::string& k, const std::string& file) {
    try {
        std::size_t pos = 0;
        const int v = std::stoi(k, &pos);
        if (pos == k.size()) return v;
    } catch (const std::exception&) {
    }
    throw ParseError(file + ": image key '" + k + "' is not an integer");
}

}  // namespace detail

/// Loads scene_gt.json and scene_camera.json of one scene directory.
/// Translations are converted from millimeters to meters. Image width and
/// height come from optional "width"/"height" keys of the camera entry.
inline SceneAnnotation load_bop_scene(const fs::path& dir, int scene_id = -1) {
    const fs::path gt_path = dir / "scene_gt.json", cam_path = dir / "scene_camera.json";
    const json gt = parse_json_file(gt_path);
    const json cams = parse_json_file(cam_path);
    if (!gt.is_object()) throw ParseError(gt_path.string() + ": top level must be an object");
    if (!cams.is_object()) throw ParseError(cam_path.string() + ": top level must be an object");
    SceneAnnotation scene;
    if (scene_id < 0) {
        try {
            scene_id = std::stoi(dir.filename().string());
        } catch (const std::exception&) {
            scene_id = 0;
        }
    }
    scene.scene_id = scene_id;
    for (const auto& [key, objs] : gt.items()) {
        ImageAnnotation im;
        im.scene_id = scene_id;
        im.im_id = detail::image_key(key, gt_path.string());
        const std::string where = gt_path.string() + " image " + key;
        if (!cams.contains(key)) throw ValidationError(where + ": no camera entry");
        const auto& c = cams.at(key);
        const auto K = detail::numbers(c.value("cam_K", json()), 9, cam_path.string() + " image " + key + " cam_K");
        im.camera.fx = K[0];
        im.camera.cx = K[2];
        im.camera.fy = K[4];
        im.camera.cy = K[5];
        im.camera.width = c.value("width", 640);
        im.camera.height = c.value("height", 480);
        try {
            im.camera.validate();
        } catch (const InvalidArgument& e) {
            throw ValidationError(where + ": " + e.what());
        }
        if (!objs.is_array()) throw ParseError(where + ": expected a list of objects");
        for (const auto& o : objs) {
            ObjectAnnotation a;
            if (!o.contains("obj_id") || !o["obj_id"].is_number_integer())
                throw ParseError(where + ": object without integer obj_id");
            a.obj_id = o["obj_id"].get<int>();
            const auto R = detail::numbers(o.value("cam_R_m2c", json()), 9, where + " cam_R_m2c");
            const auto t = detail::numbers(o.value("cam_t_m2c", json()), 3, where + " cam_t_m2c");
            Mat3 M;
            for (int r = 0; r < 3; ++r)
                for (int k = 0; k < 3; ++k) M(r, k) = R[3 * r + k];
            a.pose.R = validated_rotation(M, 1e-4, where);
            a.pose.t = Vec3(t[0], t[1], t[2]) / 1000.0;
            im.objects.push_back(a);
        }
        scene.images.push_back(std::move(im));
    }
    std::sort(scene.images.begin(), scene.images.end(),
              [](const ImageAnnotation& a, const ImageAnnotation& b) { return a.im_id < b.im_id; });
    return scene;
}

inline void write_bop_scene(const fs::path& dir, const SceneAnnotation& scene) {
    json gt = json::object(), cams = json::object();
    for (const auto& im : scene.images) {
        const std::string key = std::to_string(im.im_id);
        json objs = json::array();
        for (const auto& o : im.objects) {
            std::vector<double> R, t;
            for (int r = 0; r < 3; ++r)
                for (int k = 0; k < 3; ++k) R.push_back(o.pose.R(r, k));
            for (int k = 0; k < 3; ++k) t.push_back(exact_mm(o.pose.t[k]));
            objs.push_back({{"cam_R_m2c", R}, {"cam_t_m2c", t}, {"obj_id", o.obj_id}});
        }
        gt[key] = objs;
        const auto& c = im.camera;
        cams[key] = {{"cam_K", {c.fx, 0.0, c.cx, 0.0, c.fy, c.cy, 0.0, 0.0, 1.0}},
                     {"depth_scale", 1.0},
                     {"width", c.width},
                     {"height", c.height}};
    }
    write_file_atomic(dir / "scene_gt.json", gt.dump(1) + "\n");
    write_file_atomic(dir / "scene_camera.json", cams.dump(1) + "\n");
}

/// Every numbered scene directory under `root`, ascending.
inline std::vector<SceneAnnotation> load_bop_split(const fs::path& root) {
    if (!fs::is_directory(root)) throw IOError("not a directory: " + root.string());
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory() && fs::exists(e.path() / "scene_gt.json")) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    std::vector<SceneAnnotation> out;
    for (const auto& d : dirs) out.push_back(load_bop_scene(d));
    return out;
}

inline std::vector<GtInstance> gt_instances(const std::vector<SceneAnnotation>& scenes) {
    std::vector<GtInstance> out;
    for (const auto& s : scenes)
        for (const auto& im : s.images)
            for (const auto& o : im.objects) out.push_back({im.scene_id, im.im_id, o.obj_id, o.pose});
    return out;
}

// ---------------------------------------------------------------------------
// models_info.json (diameters in millimeters)

inline std::map<int, double> load_model_diameters(const fs::path& path) {
    const json j = parse_json_file(path);
    std::map<int, double> out;
    for (const auto& [key, v] : j.items()) {
        if (!v.contains("diameter") || !v["diameter"].is_number())
            throw ParseError(path.string() + ": object " + key + " has no numeric diameter");
        out[detail::image_key(key, path.string())] = v["diameter"].get<double>() / 1000.0;
    }
    return out;
}

inline void write_model_info(const fs::path& path, const std::map<int, PointCloud>& models) {
    json j = json::object();
    for (const auto& [id, pc] : models) {
        Vec3 lo = Vec3::Constant(HUGE_VAL), hi = Vec3::Constant(-HUGE_VAL);
        for (const auto& p : pc) {
            lo = lo.cwiseMin(p);
            hi = hi.cwiseMax(p);
        }
        j[std::to_string(id)] = {{"diameter", model_diameter(pc) * 1000.0},
                                 {"min_x", lo.x() * 1000.0}, {"min_y", lo.y() * 1000.0}, {"min_z", lo.z() * 1000.0},
                                 {"size_x", (hi.x() - lo.x()) * 1000.0}, {"size_y", (hi.y() - lo.y()) * 1000.0},
                                 {"size_z", (hi.z() - lo.z()) * 1000.0}};
    }
    write_file_atomic(path, j.dump(1) + "\n");
}

// ---------------------------------------------------------------------------
// PLY

namespace detail {

inline int ply_type_size(const std::string& t) {
    if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
    if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
    if (t == "int" || t == "uint" || t == "float" || t == "int32" || t == "uint32" || t == "float32") return 4;
    if (t == "double" || t == "float64") return 8;
    return 0;
}

inline double ply_read_binary(const char* p, const std::string& t) {
    auto get = [p](auto v) {
        std::memcpy(&v, p, sizeof v);
        return double(v);
    };
    if (t == "char" || t == "int8") return get(std::int8_t{});
    if (t == "uchar" || t == "uint8") return get(std::uint8_t{});
    if (t == "short" || t == "int16") return get(std::int16_t{});
    if (t == "ushort" || t == "uint16") return get(std::uint16_t{});
    if (t == "int" || t == "int32") return get(std::int32_t{});
    if (t == "uint" || t == "uint32") return get(std::uint32_t{});
    if (t == "float" || t == "float32") return get(float{});
    return get(double{});
}

struct PlyProperty {
    std::string name, type, count_type;  // count_type non-empty for lists
};

struct PlyElement {
    std::string name;
    std::size_t count = 0;
    std::vector<PlyProperty> props;
};

}  // namespace detail

/// Vertex positions of an ASCII or binary little-endian PLY file. Faces and
/// other properties are skipped. `mm_to_m` scales by 1/1000.
inline PointCloud load_ply(const fs::path& path, bool mm_to_m = false) {
    const std::string data = read_file(path);
    const std::string file = path.string();
    std::size_t pos = 0;
    int lineno = 0;
    auto next_line = [&]() -> std::string {
        if (pos >= data.size()) throw ParseError(file + ": unexpected end of header");
        const auto nl = data.find('\n', pos);
        std::string line = data.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
        pos = nl == std::string::npos ? data.size() : nl + 1;
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return line;
    };
    auto fail = [&](const std::string& msg) { return ParseError(file + ":" + std::to_string(lineno) + ": " + msg); };

    if (next_line() != "ply") throw fail("missing 'ply' magic");
    std::string format;
    std::vector<detail::PlyElement> elements;
    for (;;) {
        const std::string line = next_line();
        std::istringstream ss(line);
        std::string word;
        ss >> word;
        if (word == "end_header") break;
        if (word == "comment" || word == "obj_info" || word.empty()) continue;
        if (word == "format") {
            ss >> format;
            if (format == "binary_big_endian") throw UnsupportedFormat(file + ": big-endian PLY");
            if (format != "ascii" && format != "binary_little_endian") throw fail("unknown format '" + format + "'");
        } else if (word == "element") {
            detail::PlyElement e;
            if (!(ss >> e.name >> e.count)) throw fail("malformed element line");
            elements.push_back(e);
        } else if (word == "property") {
            if (elements.empty()) throw fail("property before any element");
            detail::PlyProperty p;
            ss >> p.type;
            if (p.type == "list") {
                ss >> p.count_type >> p.type;
                if (!detail::ply_type_size(p.count_type)) throw fail("bad list count type");
            }
            if (!(ss >> p.name) || !detail::ply_type_size(p.type)) throw fail("malformed property line");
            elements.back().props.push_back(p);
        } else {
            throw fail("unknown header keyword '" + word + "'");
        }
    }
    if (format.empty()) throw fail("missing format line");

    const detail::PlyElement* vertex = nullptr;
    for (const auto& e : elements)
        if (e.name == "vertex") vertex = &e;
    if (!vertex) throw ParseError(file + ": no vertex element");
    int ix = -1, iy = -1, iz = -1;
    for (std::size_t i = 0; i < vertex->props.size(); ++i) {
        const auto& p = vertex->props[i];
        if (!p.count_type.empty()) continue;
        if (p.name == "x") ix = int(i);
        if (p.name == "y") iy = int(i);
        if (p.name == "z") iz = int(i);
    }
    if (ix < 0 || iy < 0 || iz < 0) throw ParseError(file + ": vertex element lacks x, y or z");
    const double scale = mm_to_m ? 1e-3 : 1.0;

    PointCloud out;
    out.reserve(vertex->count);
    if (format == "ascii") {
        std::istringstream body(data.substr(pos));
        for (const auto& e : elements) {
            for (std::size_t r = 0; r < e.count; ++r) {
                std::string line;
                do {
                    if (!std::getline(body, line)) throw ParseError(file + ": truncated " + e.name + " data");
                    ++lineno;
                } while (line.find_first_not_of(" \t\r") == std::string::npos);
                if (&e != vertex) continue;
                std::istringstream ls(line);
                std::vector<double> vals;
                double v;
                while (ls >> v) vals.push_back(v);
                if (vals.size() < vertex->props.size()) throw fail("too few vertex values");
                out.emplace_back(scale * vals[ix], scale * vals[iy], scale * vals[iz]);
            }
            if (&e == vertex) break;
        }
    } else {
        const char* p = data.data() + pos;
        const char* end = data.data() + data.size();
        auto need = [&](std::size_t n) {
            if (std::size_t(end - p) < n) throw ParseError(file + ": truncated binary data");
        };
        for (const auto& e : elements) {
            for (std::size_t r = 0; r < e.count; ++r) {
                double xyz[3] = {0, 0, 0};
                for (std::size_t i = 0; i < e.props.size(); ++i) {
                    const auto& prop = e.props[i];
                    if (!prop.count_type.empty()) {
                        const int cs = detail::ply_type_size(prop.count_type);
                        need(cs);
                        const auto n = std::size_t(detail::ply_read_binary(p, prop.count_type));
                        p += cs;
                        need(n * detail::ply_type_size(prop.type));
                        p += n * detail::ply_type_size(prop.type);
                        continue;
                    }
                    const int sz = detail::ply_type_size(prop.type);
                    need(sz);
                    const double v = detail::ply_read_binary(p, prop.type);
                    p += sz;
                    if (int(i) == ix) xyz[0] = v;
                    if (int(i) == iy) xyz[1] = v;
                    if (int(i) == iz) xyz[2] = v;
                }
                if (&e == vertex) out.emplace_back(scale * xyz[0], scale * xyz[1], scale * xyz[2]);
            }
            if (&e == vertex) break;
        }
    }
    return out;
}

/// Vertex-only PLY (float32 coordinates), ASCII or binary little-endian.
inline void write_ply(const fs::path& path, const PointCloud& pc, bool binary = true) {
    std::ostringstream ss;
    ss << "ply\nformat " << (binary ? "binary_little_endian" : "ascii") << " 1.0\n"
       << "element vertex " << pc.size() << "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
    for (const auto& p : pc) {
        if (binary) {
            const float v[3] = {float(p.x()), float(p.y()), float(p.z())};
            ss.write(reinterpret_cast<const char*>(v), sizeof v);
        } else {
            char buf[96];
            std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g\n", p.x(), p.y(), p.z());
            ss << buf;
        }
    }
    write_file_atomic(path, ss.str());
}

// ---------------------------------------------------------------------------
// Results CSV: scene_id,im_id,obj_id,score,R,t,time

inline constexpr const char* kResultsHeader = "scene_id,im_id,obj_id,score,R,t,time";

namespace detail {

/// Shortest text that parses back to the same double.
inline std::string fmt_num(double v) {
    if (v == 0.0) v = 0.0;  // no "-0"
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

}  // namespace detail

inline std::string format_results(const std::vector<PoseEstimate>& est) {
    std::string out = std::string(kResultsHeader) + "\n";
    for (const auto& e : est) {
        out += std::to_string(e.scene_id) + "," + std::to_string(e.im_id) + "," + std::to_string(e.obj_id) + "," +
               detail::fmt_num(e.score) + ",";
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) out += detail::fmt_num(e.pose.R(r, c)) + (r == 2 && c == 2 ? "," : " ");
        for (int k = 0; k < 3; ++k) out += detail::fmt_num(exact_mm(e.pose.t[k])) + (k == 2 ? "," : " ");
        out += detail::fmt_num(e.time) + "\n";
    }
    return out;
}

inline void write_results(const std::vector<PoseEstimate>& est, const fs::path& path) {
    write_file_atomic(path, format_results(est));
}

/// Parses results CSV text; `name` is used in error messages. Rotations are
/// taken as written (no re-orthonormalization) so reading is the inverse of
/// writing.
inline std::vector<PoseEstimate> parse_results(const std::string& text, const std::string& name = "<results>") {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    std::vector<PoseEstimate> out;
    auto fail = [&](const std::string& msg) { return ParseError(name + ":" + std::to_string(lineno) + ": " + msg); };
    bool header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (!header) {
            if (line != kResultsHeader) throw fail("expected header '" + std::string(kResultsHeader) + "'");
            header = true;
            continue;
        }
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (f.size() != 7) throw fail("expected 7 fields, got " + std::to_string(f.size()));
        auto nums = [&](const std::string& s, std::size_t n, const char* what) {
            std::istringstream ns(s);
            std::vector<double> v;
            double x;
            while (ns >> x) v.push_back(x);
            if (!ns.eof() || v.size() != n) throw fail(std::string("bad ") + what + " field '" + s + "'");
            return v;
        };
        auto integer = [&](const std::string& s, const char* what) {
            const auto v = nums(s, 1, what)[0];
            if (v != std::floor(v)) throw fail(std::string(what) + " is not an integer");
            return int(v);
        };
        PoseEstimate e;
        e.scene_id = integer(f[0], "scene_id");
        e.im_id = integer(f[1], "im_id");
        e.obj_id = integer(f[2], "obj_id");
        e.score = nums(f[3], 1, "score")[0];
        const auto R = nums(f[4], 9, "R");
        const auto t = nums(f[5], 3, "t");
        e.time = nums(f[6], 1, "time")[0];
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) e.pose.R(r, c) = R[3 * r + c];
        e.pose.t = Vec3(t[0], t[1], t[2]) / 1000.0;
        out.push_back(e);
    }
    if (!header) throw ParseError(name + ": empty results file");
    return out;
}

inline std::vector<PoseEstimate> read_results(const fs::path& path) { return parse_results(read_file(path), path.string()); }

}  // namespace setpose::io
