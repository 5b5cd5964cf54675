#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "setpose/errors.hpp"
#include "setpose/geometry.hpp"
#include "setpose/rng.hpp"

namespace setpose {

/// Paired model points (meters) and image points (pixels).
struct Correspondences {
    std::vector<Vec3> object;
    std::vector<Vec2> image;

    void validate() const {
        if (object.size() != image.size()) throw ShapeMismatch("correspondence lists differ in length");
        if (object.size() < 4) throw InsufficientPoints(std::to_string(object.size()) + " correspondences, need 4");
        for (const auto& p : object)
            if (!p.allFinite()) throw InvalidArgument("non-finite model point");
        for (const auto& p : image)
            if (!p.allFinite()) throw InvalidArgument("non-finite image point");
    }

    Correspondences subset(const std::vector<std::size_t>& idx) const {
        Correspondences c;
        for (auto i : idx) {
            c.object.push_back(object[i]);
            c.image.push_back(image[i]);
        }
        return c;
    }
};

struct RansacConfig {
    int iterations = 200;
    double threshold = 2.0;  // pixels
    std::uint64_t seed = 0;

    void validate() const {
        if (iterations < 1) throw InvalidArgument("RANSAC needs at least one iteration");
        if (!(threshold > 0.0)) throw InvalidArgument("RANSAC threshold must be positive");
    }
};

struct RansacResult {
    Pose pose;
    std::vector<bool> inliers;
    std::size_t inlier_count = 0;
};

/// Pixel distance between the projection of x and u; +inf behind the camera.
inline double reprojection_error(const Vec3& x, const Vec2& u, const Pose& pose, const CameraIntrinsics& cam) {
    const Vec3 p = pose.apply(x);
    if (!(p.z() > 1e-9)) return std::numeric_limits<double>::infinity();
    return (Vec2(cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy) - u).norm();
}

inline double mean_reprojection_error(const Correspondences& c, const Pose& pose, const CameraIntrinsics& cam) {
    double s = 0.0;
    for (std::size_t i = 0; i < c.object.size(); ++i) s += reprojection_error(c.object[i], c.image[i], pose, cam);
    return s / double(c.object.size());
}

namespace detail {

/// Least-squares rigid transform mapping `a` onto `b` (b ~ R a + t).
inline Pose kabsch(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    Vec3 ca = Vec3::Zero(), cb = Vec3::Zero();
    for (std::size_t i = 0; i < a.size(); ++i) {
        ca += a[i];
        cb += b[i];
    }
    ca /= double(a.size());
    cb /= double(b.size());
    Mat3 H = Mat3::Zero();
    for (std::size_t i = 0; i < a.size(); ++i) H += (b[i] - cb) * (a[i] - ca).transpose();
    Pose p;
    p.R = project_to_so3(H);
    p.t = cb - p.R * ca;
    return p;
}

struct EpnpCandidate {
    Pose pose;
    std::size_t in_front = 0;
    double error = std::numeric_limits<double>::infinity();
};

}  // namespace detail

/// EPnP with control points from the centroid and principal directions.
/// Nullspace dimensions 1 to 3 give initial betas, each refined by five
/// Gauss-Newton steps on the control-point distance constraints; the
/// candidate with the smallest mean reprojection error wins. Coplanar model
/// points use three control points.
inline Pose epnp(const Correspondences& c, const CameraIntrinsics& cam) {
    c.validate();
    cam.validate();
    const std::size_t n = c.object.size();

    // Control points.
    Vec3 centroid = Vec3::Zero();
    for (const auto& p : c.object) centroid += p;
    centroid /= double(n);
    Mat3 cov = Mat3::Zero();
    for (const auto& p : c.object) cov += (p - centroid) * (p - centroid).transpose();
    Eigen::SelfAdjointEigenSolver<Mat3> pca(cov);
    if (pca.info() != Eigen::Success) throw NumericalFailure("EPnP: PCA of model points failed");
    const Eigen::Vector3d lam = pca.eigenvalues();  // ascending
    if (!(lam(2) > 1e-20)) throw DegenerateInput("EPnP: model points coincide");
    if (lam(1) < 1e-10 * lam(2)) throw DegenerateInput("EPnP: model points are collinear");
    const bool planar = lam(0) < 1e-10 * lam(2);
    const int K = planar ? 3 : 4;
    std::vector<Vec3> ctrl{centroid};
    for (int k = 2; k >= (planar ? 1 : 0); --k)
        ctrl.push_back(centroid + std::sqrt(lam(k) / double(n)) * pca.eigenvectors().col(k));

    // Barycentric coordinates.
    Eigen::MatrixXd alpha(n, K);
    {
        Eigen::MatrixXd B(3, K - 1);
        for (int k = 1; k < K; ++k) B.col(k - 1) = ctrl[k] - centroid;
        const auto solver = B.colPivHouseholderQr();
        for (std::size_t i = 0; i < n; ++i) {
            Eigen::VectorXd a = solver.solve(c.object[i] - centroid);
            alpha(i, 0) = 1.0 - a.sum();
            for (int k = 1; k < K; ++k) alpha(i, k) = a(k - 1);
        }
    }

    // Projection constraints on the camera-frame control points.
    const int D = 3 * K;
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(2 * n, D);
    for (std::size_t i = 0; i < n; ++i) {
        const double u = c.image[i].x(), v = c.image[i].y();
        for (int k = 0; k < K; ++k) {
            M(2 * i, 3 * k) = alpha(i, k) * cam.fx;
            M(2 * i, 3 * k + 2) = alpha(i, k) * (cam.cx - u);
            M(2 * i + 1, 3 * k + 1) = alpha(i, k) * cam.fy;
            M(2 * i + 1, 3 * k + 2) = alpha(i, k) * (cam.cy - v);
        }
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(M.transpose() * M);
    if (eig.info() != Eigen::Success) throw NumericalFailure("EPnP: eigensolve failed");
    const Eigen::MatrixXd& V = eig.eigenvectors();  // ascending eigenvalues

    // Distance constraints between control-point pairs.
    std::vector<std::pair<int, int>> pairs;
    for (int a = 0; a < K; ++a)
        for (int b = a + 1; b < K; ++b) pairs.emplace_back(a, b);
    const int P = int(pairs.size());
    const int Nv = K;  // null vectors used
    // dv[p][k]: difference of null vector k between the two control points of pair p.
    std::vector<std::vector<Vec3>> dv(P, std::vector<Vec3>(Nv));
    Eigen::VectorXd rho(P);
    for (int p = 0; p < P; ++p) {
        const auto [a, b] = pairs[p];
        rho(p) = (ctrl[a] - ctrl[b]).squaredNorm();
        for (int k = 0; k < Nv; ++k) dv[p][k] = V.col(k).segment<3>(3 * a) - V.col(k).segment<3>(3 * b);
    }

    auto refine = [&](Eigen::VectorXd beta) {
        for (int it = 0; it < 5; ++it) {
            Eigen::MatrixXd J(P, Nv);
            Eigen::VectorXd r(P);
            for (int p = 0; p < P; ++p) {
                Vec3 d = Vec3::Zero();
                for (int k = 0; k < Nv; ++k) d += beta(k) * dv[p][k];
                r(p) = d.squaredNorm() - rho(p);
                for (int k = 0; k < Nv; ++k) J(p, k) = 2.0 * d.dot(dv[p][k]);
            }
            const Eigen::VectorXd step = J.colPivHouseholderQr().solve(-r);
            if (!step.allFinite()) break;
            beta += step;
        }
        return beta;
    };

    auto evaluate = [&](const Eigen::VectorXd& beta) {
        detail::EpnpCandidate cand;
        Eigen::VectorXd x = Eigen::VectorXd::Zero(D);
        for (int k = 0; k < Nv; ++k) x += beta(k) * V.col(k);
        std::vector<Vec3> cam_pts(n);
        double zsum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            Vec3 p = Vec3::Zero();
            for (int k = 0; k < K; ++k) p += alpha(i, k) * x.segment<3>(3 * k);
            cam_pts[i] = p;
            zsum += p.z();
        }
        if (zsum < 0.0)
            for (auto& p : cam_pts) p = -p;
        if (!x.allFinite()) return cand;
        cand.pose = detail::kabsch(c.object, cam_pts);
        double err = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (cand.pose.apply(c.object[i]).z() > 1e-9) ++cand.in_front;
            err += reprojection_error(c.object[i], c.image[i], cand.pose, cam);
        }
        cand.error = err / double(n);
        return cand;
    };

    // Linearized initial betas; column (k, l) of L multiplies beta_k beta_l.
    auto products = [&](int nv) {
        std::vector<std::pair<int, int>> idx;
        for (int k = 0; k < nv; ++k)
            for (int l = k; l < nv; ++l) idx.emplace_back(k, l);
        Eigen::MatrixXd L(P, idx.size());
        for (int p = 0; p < P; ++p)
            for (std::size_t j = 0; j < idx.size(); ++j) {
                const auto [k, l] = idx[j];
                L(p, j) = (k == l ? 1.0 : 2.0) * dv[p][k].dot(dv[p][l]);
            }
        return std::make_pair(L, idx);
    };

    std::vector<detail::EpnpCandidate> cands;
    for (int nv = 1; nv <= 3; ++nv) {
        auto [L, idx] = products(nv);
        if (L.cols() > L.rows()) break;
        const Eigen::VectorXd bb = L.colPivHouseholderQr().solve(rho);
        if (!bb.allFinite()) continue;
        // beta_k from the diagonal products, signs from the products with beta_0.
        Eigen::VectorXd beta = Eigen::VectorXd::Zero(Nv);
        for (std::size_t j = 0; j < idx.size(); ++j) {
            const auto [k, l] = idx[j];
            if (k != l) continue;
            beta(k) = std::sqrt(std::abs(bb(j)));
        }
        for (std::size_t j = 0; j < idx.size(); ++j) {
            const auto [k, l] = idx[j];
            if (k == 0 && l > 0 && bb(j) < 0.0) beta(l) = -beta(l);
        }
        cands.push_back(evaluate(refine(beta)));
    }

    // Prefer candidates with every point in front; otherwise the most in front.
    const detail::EpnpCandidate* best = nullptr;
    for (const auto& cand : cands) {
        if (cand.in_front == 0 || !std::isfinite(cand.error)) continue;
        if (!best || cand.in_front > best->in_front ||
            (cand.in_front == best->in_front && cand.error < best->error))
            best = &cand;
    }
    if (!best) throw NumericalFailure("EPnP: every candidate places the points behind the camera");
    Pose out = best->pose;
    out.R = project_to_so3(out.R);
    return out;
}

/// Hypothesize-and-verify over minimal 4-point samples, then an EPnP refit on
/// the largest consensus set. Trial i draws from the substream (seed, i).
inline RansacResult ransac_pnp(const Correspondences& c, const CameraIntrinsics& cam, const RansacConfig& cfg = {}) {
    c.validate();
    cfg.validate();
    const std::size_t n = c.object.size();
    auto mask_of = [&](const Pose& pose, std::size_t& count) {
        std::vector<bool> m(n);
        count = 0;
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = reprojection_error(c.object[i], c.image[i], pose, cam) < cfg.threshold;
            count += m[i];
        }
        return m;
    };

    RngStream base(cfg.seed, "ransac");
    RansacResult best;
    for (int trial = 0; trial < cfg.iterations; ++trial) {
        RngStream rng = base.substream("trial", std::uint64_t(trial));
        std::vector<std::size_t> perm(n);
        for (std::size_t i = 0; i < n; ++i) perm[i] = i;
        for (std::size_t i = 0; i < 4; ++i) std::swap(perm[i], perm[i + rng.below(n - i)]);
        perm.resize(4);
        Pose hyp;
        try {
            hyp = epnp(c.subset(perm), cam);
        } catch (const Error&) {
            continue;  // degenerate sample
        }
        std::size_t count = 0;
        auto mask = mask_of(hyp, count);
        if (count > best.inlier_count) {
            best.pose = hyp;
            best.inliers = std::move(mask);
            best.inlier_count = count;
        }
    }
    if (best.inlier_count < 4)
        throw NoConsensus("largest consensus set has " + std::to_string(best.inlier_count) + " points");

    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i)
        if (best.inliers[i]) idx.push_back(i);
    try {
        RansacResult refit;
        refit.pose = epnp(c.subset(idx), cam);
        refit.inliers = mask_of(refit.pose, refit.inlier_count);
        if (refit.inlier_count >= 4) return refit;
    } catch (const Error&) {
    }
    return best;
}

}  // namespace setpose
