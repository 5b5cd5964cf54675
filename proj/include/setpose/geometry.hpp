#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "setpose/errors.hpp"
#include "setpose/rng.hpp"

namespace setpose {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Rot6D = Eigen::Matrix<double, 6, 1>;
using PointCloud = std::vector<Vec3>;

struct Pose {
    Mat3 R = Mat3::Identity();
    Vec3 t = Vec3::Zero();

    Vec3 apply(const Vec3& x) const { return R * x + t; }
};

struct CameraIntrinsics {
    double fx = 500.0;
    double fy = 500.0;
    double cx = 320.0;
    double cy = 240.0;
    int width = 640;
    int height = 480;

    void validate() const {
        if (!(fx > 0.0) || !(fy > 0.0)) throw InvalidArgument("focal lengths must be positive");
        if (width <= 0 || height <= 0) throw InvalidArgument("image size must be positive");
    }
};

struct Cuboid {
    Vec3 center = Vec3::Zero();
    Vec3 half_extents = Vec3::Constant(0.5);
};

enum class KeypointRep { BB8, FPS8, IBB32 };

inline std::string_view to_string(KeypointRep rep) {
    switch (rep) {
        case KeypointRep::BB8: return "bb8";
        case KeypointRep::FPS8: return "fps8";
        case KeypointRep::IBB32: return "ibb32";
    }
    return "?";
}

inline KeypointRep parse_keypoint_rep(std::string_view s) {
    if (s == "bb8") return KeypointRep::BB8;
    if (s == "fps8") return KeypointRep::FPS8;
    if (s == "ibb32") return KeypointRep::IBB32;
    throw InvalidArgument("unknown keypoint representation '" + std::string(s) + "'");
}

inline int keypoint_count(KeypointRep rep) { return rep == KeypointRep::IBB32 ? 32 : 8; }

/// Index quadruple (corner, 1/3 point, 2/3 point, corner) of one cuboid edge.
using LineTuple = std::array<int, 4>;

template <typename Point>
struct KeypointSet {
    std::vector<Point> points;
    KeypointRep rep = KeypointRep::BB8;
    std::vector<LineTuple> lines;

    std::size_t size() const { return points.size(); }
};

using KeypointSet3D = KeypointSet<Vec3>;
using KeypointSet2D = KeypointSet<Vec2>;

// ---------------------------------------------------------------------------
// Rotations

inline Mat3 rot6d_to_matrix(const Rot6D& r) {
    const Vec3 a1 = r.head<3>();
    const Vec3 a2 = r.tail<3>();
    const double n1 = a1.norm();
    const double n2 = a2.norm();
    if (n1 < 1e-12 || n2 < 1e-12) throw DegenerateInput("rot6d column with vanishing norm");
    const Vec3 b1 = a1 / n1;
    const Vec3 ortho = a2 - b1.dot(a2) * b1;
    // |ortho| / |a2| is the sine of the angle between the columns.
    if (ortho.norm() / n2 < 1e-6) throw DegenerateInput("rot6d columns are parallel");
    const Vec3 b2 = ortho.normalized();
    Mat3 R;
    R.col(0) = b1;
    R.col(1) = b2;
    R.col(2) = b1.cross(b2);
    return R;
}

inline Rot6D matrix_to_rot6d(const Mat3& R) {
    Rot6D r;
    r.head<3>() = R.col(0);
    r.tail<3>() = R.col(1);
    return r;
}

inline double geodesic_distance(const Mat3& Ra, const Mat3& Rb) {
    const double c = ((Ra.transpose() * Rb).trace() - 1.0) / 2.0;
    return std::acos(std::clamp(c, -1.0, 1.0));
}

inline Mat3 axis_angle(const Vec3& axis, double angle) {
    return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

/// Nearest rotation in Frobenius norm (polar factor), with det forced to +1.
inline Mat3 project_to_so3(const Mat3& M) {
    Eigen::JacobiSVD<Mat3> svd(M, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 D = Mat3::Identity();
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) D(2, 2) = -1.0;
    return svd.matrixU() * D * svd.matrixV().transpose();
}

inline bool is_rotation(const Mat3& R, double tol = 1e-9) {
    return (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() < tol &&
           std::abs(R.determinant() - 1.0) < tol;
}

/// Uniform rotation from a normalized Gaussian quaternion.
inline Mat3 random_rotation(RngStream& rng) {
    Eigen::Quaterniond q;
    double n = 0.0;
    do {
        q = Eigen::Quaterniond(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        n = q.norm();
    } while (n < 1e-9);
    q.coeffs() /= n;
    return q.toRotationMatrix();
}

// ---------------------------------------------------------------------------
// Projection

inline Vec2 project_point(const Vec3& x, const Pose& pose, const CameraIntrinsics& cam) {
    const Vec3 p = pose.apply(x);
    if (!(p.z() > 1e-6)) throw BehindCamera("camera-frame depth " + std::to_string(p.z()));
    return {cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy};
}

inline std::vector<Vec2> project(const PointCloud& points, const Pose& pose,
                                 const CameraIntrinsics& cam) {
    std::vector<Vec2> out;
    out.reserve(points.size());
    for (const auto& x : points) out.push_back(project_point(x, pose, cam));
    return out;
}

inline KeypointSet2D project(const KeypointSet3D& kps, const Pose& pose,
                             const CameraIntrinsics& cam) {
    return {project(kps.points, pose, cam), kps.rep, kps.lines};
}

// ---------------------------------------------------------------------------
// Keypoint sets

/// Corners in lexicographic sign order: index = 4*sx + 2*sy + sz with
/// s = 0 for the negative and 1 for the positive half-extent.
inline std::vector<Vec3> cuboid_corners(const Cuboid& c) {
    std::vector<Vec3> out;
    out.reserve(8);
    for (int i = 0; i < 8; ++i) {
        const Vec3 s((i & 4) ? 1.0 : -1.0, (i & 2) ? 1.0 : -1.0, (i & 1) ? 1.0 : -1.0);
        out.push_back(c.center + s.cwiseProduct(c.half_extents));
    }
    return out;
}

/// The 12 cuboid edges as corner-index pairs: x-edges, then y-edges, then
/// z-edges; within an axis, ordered by the lower corner index.
inline std::array<std::array<int, 2>, 12> cuboid_edges() {
    std::array<std::array<int, 2>, 12> edges{};
    int e = 0;
    for (int bit : {4, 2, 1}) {
        for (int i = 0; i < 8; ++i) {
            if (i & bit) continue;
            edges[e++] = {i, i | bit};
        }
    }
    return edges;
}

inline void validate_cuboid(const Cuboid& c) {
    if (!(c.half_extents.minCoeff() > 0.0)) throw InvalidArgument("cuboid half-extents must be positive");
}

inline KeypointSet3D generate_bb8(const Cuboid& c) {
    validate_cuboid(c);
    return {cuboid_corners(c), KeypointRep::BB8, {}};
}

/// 8 corners followed by two trisection points per edge (at 1/3 and 2/3
/// from the lower-index corner). Each edge gives the collinear tuple
/// (corner, 1/3 point, 2/3 point, corner).
inline KeypointSet3D generate_ibb(const Cuboid& c) {
    validate_cuboid(c);
    KeypointSet3D out;
    out.rep = KeypointRep::IBB32;
    out.points = cuboid_corners(c);
    out.points.reserve(32);
    int next = 8;
    for (const auto& [a, b] : cuboid_edges()) {
        const Vec3 pa = out.points[a];
        const Vec3 pb = out.points[b];
        out.points.push_back(pa + (pb - pa) / 3.0);
        out.points.push_back(pa + 2.0 * (pb - pa) / 3.0);
        out.lines.push_back({a, next, next + 1, b});
        next += 2;
    }
    return out;
}

inline Cuboid bounding_cuboid(const PointCloud& points) {
    if (points.empty()) throw EmptyInput("bounding cuboid of an empty cloud");
    Vec3 lo = points.front();
    Vec3 hi = points.front();
    for (const auto& p : points) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    return {(lo + hi) / 2.0, ((hi - lo) / 2.0).cwiseMax(1e-9)};
}

/// Squared cross-ratio (|c-a|^2 |d-b|^2) / (|c-b|^2 |d-a|^2).
template <typename V>
double cross_ratio_sq(const V& a, const V& b, const V& c, const V& d) {
    const double cb = (c - b).squaredNorm();
    const double da = (d - a).squaredNorm();
    if (cb <= 1e-18 || da <= 1e-18) throw DegenerateInput("coincident points in cross-ratio");
    return (c - a).squaredNorm() * (d - b).squaredNorm() / (cb * da);
}

inline constexpr double kIbbCrossRatioSq = 16.0 / 9.0;

/// Greedy farthest point sampling. Output order is selection order, ties
/// resolve to the lowest index.
inline PointCloud fps_sample(const PointCloud& points, std::size_t k, std::size_t seed_index = 0) {
    if (k > points.size()) throw InvalidArgument("fps_sample: k exceeds point count");
    if (k == 0) return {};
    if (seed_index >= points.size()) throw InvalidArgument("fps_sample: seed index out of range");
    std::vector<double> dist(points.size(), std::numeric_limits<double>::infinity());
    PointCloud out;
    out.reserve(k);
    std::size_t current = seed_index;
    for (std::size_t s = 0; s < k; ++s) {
        out.push_back(points[current]);
        dist[current] = -1.0;
        std::size_t best = 0;
        double best_d = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < points.size(); ++i) {
            if (dist[i] < 0.0) continue;
            dist[i] = std::min(dist[i], (points[i] - points[current]).squaredNorm());
            if (dist[i] > best_d) {
                best_d = dist[i];
                best = i;
            }
        }
        current = best;
    }
    return out;
}

inline KeypointSet3D generate_fps8(const PointCloud& model) {
    return {fps_sample(model, 8, 0), KeypointRep::FPS8, {}};
}

/// Keypoint set of the requested representation for a model cloud; the
/// cuboid representations use the cloud's axis-aligned bounding box.
inline KeypointSet3D model_keypoints(const PointCloud& model, KeypointRep rep) {
    switch (rep) {
        case KeypointRep::BB8: return generate_bb8(bounding_cuboid(model));
        case KeypointRep::FPS8: return generate_fps8(model);
        case KeypointRep::IBB32: return generate_ibb(bounding_cuboid(model));
    }
    throw InvalidArgument("unknown keypoint representation");
}

// ---------------------------------------------------------------------------
// Translation code

struct TranslationCode {
    double u_norm = 0.5;
    double v_norm = 0.5;
    double tz = 1.0;
};

inline Vec3 decode_translation(const TranslationCode& code, const CameraIntrinsics& cam) {
    if (!(code.tz > 0.0)) throw InvalidArgument("translation depth must be positive");
    const double u = code.u_norm * cam.width;
    const double v = code.v_norm * cam.height;
    return {(u - cam.cx) * code.tz / cam.fx, (v - cam.cy) * code.tz / cam.fy, code.tz};
}

inline TranslationCode encode_translation(const Vec3& t, const CameraIntrinsics& cam) {
    if (!(t.z() > 0.0)) throw InvalidArgument("translation depth must be positive");
    const double u = cam.fx * t.x() / t.z() + cam.cx;
    const double v = cam.fy * t.y() / t.z() + cam.cy;
    return {u / cam.width, v / cam.height, t.z()};
}

// ---------------------------------------------------------------------------
// Axis-aligned boxes (center-x, center-y, width, height)

struct Box {
    double cx = 0.5;
    double cy = 0.5;
    double w = 0.0;
    double h = 0.0;

    double x0() const { return cx - w / 2.0; }
    double x1() const { return cx + w / 2.0; }
    double y0() const { return cy - h / 2.0; }
    double y1() const { return cy + h / 2.0; }
    double area() const { return w * h; }
    double l1(const Box& o) const {
        return std::abs(cx - o.cx) + std::abs(cy - o.cy) + std::abs(w - o.w) + std::abs(h - o.h);
    }
};

inline double iou(const Box& a, const Box& b) {
    const double iw = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
    const double ih = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
    const double inter = iw * ih;
    return inter / (a.area() + b.area() - inter);
}

inline double giou(const Box& a, const Box& b) {
    if (!(a.w > 0.0 && a.h > 0.0 && b.w > 0.0 && b.h > 0.0))
        throw InvalidArgument("giou requires positive box extents");
    const double iw = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
    const double ih = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    const double ew = std::max(a.x1(), b.x1()) - std::min(a.x0(), b.x0());
    const double eh = std::max(a.y1(), b.y1()) - std::min(a.y0(), b.y0());
    const double enclosing = ew * eh;
    return inter / uni - (enclosing - uni) / enclosing;
}

/// Tight hull of 2D points, clamped to the unit square, in normalized units.
inline Box hull_box(const std::vector<Vec2>& pixels, const CameraIntrinsics& cam) {
    double x0 = 1.0, y0 = 1.0, x1 = 0.0, y1 = 0.0;
    for (const auto& p : pixels) {
        const double u = std::clamp(p.x() / cam.width, 0.0, 1.0);
        const double v = std::clamp(p.y() / cam.height, 0.0, 1.0);
        x0 = std::min(x0, u);
        x1 = std::max(x1, u);
        y0 = std::min(y0, v);
        y1 = std::max(y1, v);
    }
    return {(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0};
}

}  // namespace setpose
