#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "setpose/autodiff.hpp"
#include "setpose/geometry.hpp"
#include "setpose/losses.hpp"
#include "setpose/matching.hpp"
#include "setpose/rng.hpp"

// Central finite-difference checks of every differentiable op and loss,
// evaluated in double precision. Inputs for non-smooth functions are drawn
// with a margin from their kinks so the difference quotient is valid.

namespace setpose::gradcheck {

using Td = ad::Tensor<double>;
using Fn = std::function<Td(const std::vector<Td>&)>;

struct Problem {
    Fn f;
    std::vector<Td> inputs;
};

struct Case {
    std::string name;
    std::function<Problem(RngStream&)> make;
};

struct Report {
    std::string name;
    std::size_t trials = 0;
    std::size_t elements = 0;
    double max_rel_error = 0.0;
    double tolerance = 1e-4;
    bool passed() const { return max_rel_error < tolerance; }
};

/// Largest |analytic - numeric| / max(|analytic|, 1e-6) over all input
/// elements. `f` must return a scalar.
inline double max_relative_error(const Fn& f, const std::vector<Td>& inputs, double h = 1e-4,
                                 std::size_t* elements = nullptr) {
    std::vector<Td> params;
    for (const auto& in : inputs) params.push_back(Td::parameter(in.rows(), in.cols(), in.value()));
    ad::backward(f(params));
    double worst = 0.0;
    for (auto& p : params) {
        const std::vector<double> analytic = p.grad();
        for (std::size_t i = 0; i < p.size(); ++i) {
            double fp, fm;
            {
                ad::NoGradGuard guard;
                const double orig = p.value()[i];
                p.mutable_value()[i] = orig + h;
                fp = f(params).item();
                p.mutable_value()[i] = orig - h;
                fm = f(params).item();
                p.mutable_value()[i] = orig;
            }
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic.empty() ? 0.0 : analytic[i];
            const double denom = std::max(std::abs(a), 1e-6);
            worst = std::max(worst, std::abs(a - numeric) / denom);
            if (elements) ++*elements;
        }
    }
    return worst;
}

namespace detail {

inline Td rand_tensor(RngStream& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(r * c);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Td::constant(r, c, std::move(v));
}

/// Values with |x - kink| in [margin, margin + spread].
inline Td away_from(RngStream& rng, std::size_t r, std::size_t c, double kink = 0.0, double margin = 0.05,
                    double spread = 1.0) {
    std::vector<double> v(r * c);
    for (auto& x : v) x = kink + (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(margin, margin + spread);
    return Td::constant(r, c, std::move(v));
}

inline std::size_t dim(RngStream& rng, std::size_t lo = 1, std::size_t hi = 5) {
    return lo + rng.below(hi - lo + 1);
}

/// Wraps a tensor-valued function into a scalar one via a fixed random
/// weighting of the output.
inline Fn weighted(std::function<Td(const std::vector<Td>&)> g, RngStream& rng) {
    auto key = rng.next_u64();
    return [g, key](const std::vector<Td>& in) {
        Td out = g(in);
        RngStream wr(key, std::uint64_t{0});
        std::vector<double> w(out.size());
        for (auto& x : w) x = wr.uniform(-1.0, 1.0);
        return ad::sum(ad::mul(out, Td::constant(out.rows(), out.cols(), std::move(w))));
    };
}

inline bool separated(const std::vector<double>& xs, double margin) {
    for (std::size_t i = 0; i < xs.size(); ++i)
        for (std::size_t j = i + 1; j < xs.size(); ++j)
            if (std::abs(xs[i] - xs[j]) < margin) return false;
    return true;
}

/// Pair of [R, 4] box tensors whose edges are pairwise separated so min/max
/// and the overlap clamp are differentiable at the sample.
inline std::pair<Td, Td> box_pair(RngStream& rng, std::size_t R, double margin = 2e-3) {
    std::vector<double> a, b;
    for (std::size_t i = 0; i < R; ++i) {
        for (;;) {
            Box ba{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.5)};
            Box bb{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.5)};
            const bool ok =
                separated({ba.x0(), ba.x1(), bb.x0(), bb.x1()}, margin) &&
                separated({ba.y0(), ba.y1(), bb.y0(), bb.y1()}, margin) &&
                separated({ba.cx, bb.cx}, margin) && separated({ba.cy, bb.cy}, margin) &&
                separated({ba.w, bb.w}, margin) && separated({ba.h, bb.h}, margin);
            if (!ok) continue;
            a.insert(a.end(), {ba.cx, ba.cy, ba.w, ba.h});
            b.insert(b.end(), {bb.cx, bb.cy, bb.w, bb.h});
            break;
        }
    }
    return {Td::constant(R, 4, std::move(a)), Td::constant(R, 4, std::move(b))};
}

inline Cuboid random_cuboid(RngStream& rng) {
    return {Vec3(rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02)),
            Vec3(rng.uniform(0.08, 0.2), rng.uniform(0.08, 0.2), rng.uniform(0.08, 0.2))};
}

/// IBB keypoints in pixels of a random cuboid seen by a 640x480 camera, as
/// a [1, 64] row. Views where consecutive points of a line come closer than
/// `min_spacing` pixels are redrawn; the cross-ratio's curvature grows with
/// 1/spacing and would swamp the difference quotient. Pixel units (rather
/// than normalized ones) keep h = 1e-4 small against that spacing.
inline std::vector<double> ibb_row(RngStream& rng, double min_spacing = 20.0) {
    const CameraIntrinsics cam{500, 500, 320, 240, 640, 480};
    for (;;) {
        const Cuboid cub = random_cuboid(rng);
        Pose pose;
        pose.R = random_rotation(rng);
        pose.t = Vec3(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(0.7, 1.2));
        const auto img = project(generate_ibb(cub), pose, cam);
        const auto& pts = img.points;
        bool ok = true;
        for (const auto& line : img.lines)
            for (int k = 0; k < 3 && ok; ++k) ok = (pts[line[k + 1]] - pts[line[k]]).norm() >= min_spacing;
        if (!ok) continue;
        std::vector<double> row;
        for (const auto& p : pts) row.insert(row.end(), {p.x(), p.y()});
        return row;
    }
}

inline PointCloud random_cloud(RngStream& rng, std::size_t n) {
    PointCloud pc;
    for (std::size_t i = 0; i < n; ++i)
        pc.emplace_back(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1));
    return pc;
}

inline Mat3 rot_from_cols(const std::vector<double>& v) {
    Mat3 R;
    for (int c = 0; c < 3; ++c)
        for (int r = 0; r < 3; ++r) R(r, c) = v[3 * c + r];
    return R;
}

/// Every component of R_gt x - R_pred x is at least `margin` from zero.
inline bool l1_components_clear(const Mat3& Rg, const Mat3& Rp, const PointCloud& pc, double margin) {
    for (const auto& x : pc)
        if ((Rg * x - Rp * x).cwiseAbs().minCoeff() < margin) return false;
    return true;
}

/// Symmetric point matching is well-conditioned: the nearest predicted
/// point is unique by a margin and its L1 components are clear of zero.
inline bool sym_match_clear(const Mat3& Rg, const Mat3& Rp, const PointCloud& pc, double margin) {
    for (const auto& x1 : pc) {
        const Vec3 g = Rg * x1;
        double best = 1e300, second = 1e300;
        Vec3 best_diff;
        for (const auto& x2 : pc) {
            const Vec3 diff = g - Rp * x2;
            const double d = diff.cwiseAbs().sum();
            if (d < best) {
                second = best;
                best = d;
                best_diff = diff;
            } else if (d < second) {
                second = d;
            }
        }
        if (second - best < margin || best_diff.cwiseAbs().minCoeff() < margin) return false;
    }
    return true;
}

}  // namespace detail

/// Every autodiff op, each wrapped into a scalar function.
inline std::vector<Case> op_cases() {
    using namespace detail;
    std::vector<Case> cases;
    auto unary = [&](std::string name, std::function<Td(const Td&)> op, std::function<Td(RngStream&, std::size_t,
                                                                                            std::size_t)> gen) {
        cases.push_back({name, [op, gen](RngStream& rng) {
                             const auto r = dim(rng), c = dim(rng);
                             return Problem{weighted([op](const std::vector<Td>& in) { return op(in[0]); }, rng),
                                            {gen(rng, r, c)}};
                         }});
    };
    auto plain = [](RngStream& rng, std::size_t r, std::size_t c) { return rand_tensor(rng, r, c); };
    auto positive = [](RngStream& rng, std::size_t r, std::size_t c) { return rand_tensor(rng, r, c, 0.2, 3.0); };
    auto off_zero = [](RngStream& rng, std::size_t r, std::size_t c) { return away_from(rng, r, c); };

    cases.push_back({"matmul", [](RngStream& rng) {
                         const auto m = dim(rng), k = dim(rng), n = dim(rng);
                         return Problem{weighted([](const std::vector<Td>& in) { return ad::matmul(in[0], in[1]); }, rng),
                                        {rand_tensor(rng, m, k), rand_tensor(rng, k, n)}};
                     }});
    cases.push_back({"linear", [](RngStream& rng) {
                         const auto m = dim(rng), k = dim(rng), n = dim(rng);
                         return Problem{
                             weighted([](const std::vector<Td>& in) { return ad::linear(in[0], in[1], in[2]); }, rng),
                             {rand_tensor(rng, m, k), rand_tensor(rng, k, n), rand_tensor(rng, 1, n)}};
                     }});
    unary("transpose", [](const Td& x) { return ad::transpose(x); }, plain);
    cases.push_back({"add_broadcast", [](RngStream& rng) {
                         const auto m = dim(rng), n = dim(rng);
                         return Problem{weighted([](const std::vector<Td>& in) { return ad::add(in[0], in[1]); }, rng),
                                        {rand_tensor(rng, m, n), rand_tensor(rng, 1, n)}};
                     }});
    cases.push_back({"sub_broadcast", [](RngStream& rng) {
                         const auto m = dim(rng), n = dim(rng);
                         return Problem{weighted([](const std::vector<Td>& in) { return ad::sub(in[0], in[1]); }, rng),
                                        {rand_tensor(rng, m, n), rand_tensor(rng, m, 1)}};
                     }});
    cases.push_back({"mul", [](RngStream& rng) {
                         const auto m = dim(rng), n = dim(rng);
                         return Problem{weighted([](const std::vector<Td>& in) { return ad::mul(in[0], in[1]); }, rng),
                                        {rand_tensor(rng, m, n), rand_tensor(rng, m, n)}};
                     }});
    cases.push_back({"div", [](RngStream& rng) {
                         const auto m = dim(rng), n = dim(rng);
                         return Problem{weighted([](const std::vector<Td>& in) { return ad::div(in[0], in[1]); }, rng),
                                        {rand_tensor(rng, m, n), away_from(rng, m, n, 0.0, 0.5, 1.5)}};
                     }});
    for (bool is_max : {true, false}) {
        cases.push_back({is_max ? "maximum" : "minimum", [is_max](RngStream& rng) {
                             const auto m = dim(rng), n = dim(rng);
                             Td a = rand_tensor(rng, m, n);
                             Td off = away_from(rng, m, n);
                             Td b = Td::constant(m, n, ad::add(a, off).value());
                             return Problem{weighted(
                                                [is_max](const std::vector<Td>& in) {
                                                    return is_max ? ad::maximum(in[0], in[1]) : ad::minimum(in[0], in[1]);
                                                },
                                                rng),
                                            {a, b}};
                         }});
    }
    unary("scale", [](const Td& x) { return ad::scale(x, -1.75); }, plain);
    unary("add_scalar", [](const Td& x) { return ad::add_scalar(x, 0.5); }, plain);
    unary("relu", [](const Td& x) { return ad::relu(x); }, off_zero);
    unary("sigmoid", [](const Td& x) { return ad::sigmoid(ad::scale(x, 3.0)); }, plain);
    unary("exp", [](const Td& x) { return ad::exp(x); }, plain);
    unary("log", [](const Td& x) { return ad::log(x); }, positive);
    unary("abs", [](const Td& x) { return ad::abs(x); }, off_zero);
    unary("sqrt", [](const Td& x) { return ad::sqrt(x); }, positive);
    unary("square", [](const Td& x) { return ad::square(x); }, plain);
    unary("smooth_l1",
          [](const Td& x) { return ad::smooth_l1(x); },
          [](RngStream& rng, std::size_t r, std::size_t c) {
              std::vector<double> v(r * c);
              for (auto& x : v) {
                  const double mag = rng.uniform() < 0.5 ? rng.uniform(0.05, 0.95) : rng.uniform(1.05, 3.0);
                  x = rng.uniform() < 0.5 ? -mag : mag;
              }
              return Td::constant(r, c, std::move(v));
          });
    unary("sum", [](const Td& x) { return ad::sum(x); }, plain);
    unary("sum_axis0", [](const Td& x) { return ad::sum(x, 0); }, plain);
    unary("sum_axis1", [](const Td& x) { return ad::sum(x, 1); }, plain);
    unary("mean", [](const Td& x) { return ad::mean(x); }, plain);
    unary("mean_axis1", [](const Td& x) { return ad::mean(x, 1); }, plain);
    unary("l1", [](const Td& x) { return ad::l1(x); }, off_zero);
    unary("l2sq", [](const Td& x) { return ad::l2sq(x); }, plain);
    unary("min_cols",
          [](const Td& x) { return ad::min_cols(x); },
          [](RngStream& rng, std::size_t r, std::size_t c) {
              // Distinct row entries: shuffled multiples of 0.1 plus small noise.
              std::vector<double> v(r * c);
              for (std::size_t i = 0; i < r; ++i) {
                  std::vector<double> row(c);
                  for (std::size_t j = 0; j < c; ++j) row[j] = 0.1 * double(j) + rng.uniform(0.0, 0.02);
                  for (std::size_t j = c; j > 1; --j) std::swap(row[j - 1], row[rng.below(j)]);
                  std::copy(row.begin(), row.end(), v.begin() + i * c);
              }
              return Td::constant(r, c, std::move(v));
          });
    unary("softmax_axis1", [](const Td& x) { return ad::softmax(ad::scale(x, 2.0), 1); }, plain);
    unary("softmax_axis0", [](const Td& x) { return ad::softmax(ad::scale(x, 2.0), 0); }, plain);
    unary("log_softmax", [](const Td& x) { return ad::log_softmax(ad::scale(x, 2.0)); }, plain);
    cases.push_back({"layer_norm", [](RngStream& rng) {
                         const auto m = dim(rng), n = dim(rng, 2, 6);
                         return Problem{
                             weighted([](const std::vector<Td>& in) { return ad::layer_norm(in[0], in[1], in[2]); }, rng),
                             {rand_tensor(rng, m, n, -2, 2), rand_tensor(rng, 1, n, 0.5, 1.5), rand_tensor(rng, 1, n)}};
                     }});
    cases.push_back({"dropout", [](RngStream& rng) {
                         const auto m = dim(rng), n = dim(rng);
                         const auto key = rng.next_u64();
                         return Problem{weighted(
                                            [key](const std::vector<Td>& in) {
                                                RngStream mask(key, std::uint64_t{0});  // same mask every call
                                                return ad::dropout(in[0], 0.5, true, mask);
                                            },
                                            rng),
                                        {rand_tensor(rng, m, n)}};
                     }});
    cases.push_back({"concat_rows", [](RngStream& rng) {
                         const auto n = dim(rng);
                         return Problem{weighted([](const std::vector<Td>& in) { return ad::concat(in, 0); }, rng),
                                        {rand_tensor(rng, dim(rng), n), rand_tensor(rng, dim(rng), n)}};
                     }});
    cases.push_back({"concat_cols", [](RngStream& rng) {
                         const auto m = dim(rng);
                         return Problem{weighted([](const std::vector<Td>& in) { return ad::concat(in, 1); }, rng),
                                        {rand_tensor(rng, m, dim(rng)), rand_tensor(rng, m, dim(rng)),
                                         rand_tensor(rng, m, dim(rng))}};
                     }});
    for (int axis : {0, 1}) {
        cases.push_back({axis == 0 ? "slice_rows" : "slice_cols", [axis](RngStream& rng) {
                             const auto m = dim(rng, 2, 6), n = dim(rng, 2, 6);
                             const std::size_t ext = axis == 0 ? m : n;
                             const std::size_t b = rng.below(ext - 1);
                             const std::size_t e = b + 1 + rng.below(ext - b - 1);
                             return Problem{
                                 weighted([axis, b, e](const std::vector<Td>& in) { return ad::slice(in[0], axis, b, e); },
                                          rng),
                                 {rand_tensor(rng, m, n)}};
                         }});
    }
    cases.push_back({"gather_rows", [](RngStream& rng) {
                         const auto m = dim(rng), n = dim(rng);
                         std::vector<std::size_t> idx(dim(rng, 1, 7));
                         for (auto& i : idx) i = rng.below(m);  // repeats allowed
                         return Problem{
                             weighted([idx](const std::vector<Td>& in) { return ad::gather_rows(in[0], idx); }, rng),
                             {rand_tensor(rng, m, n)}};
                     }});
    cases.push_back({"gather_cols", [](RngStream& rng) {
                         const auto m = dim(rng), n = dim(rng);
                         std::vector<std::size_t> idx(dim(rng, 1, 7));
                         for (auto& i : idx) i = rng.below(n);
                         return Problem{
                             weighted([idx](const std::vector<Td>& in) { return ad::gather_cols(in[0], idx); }, rng),
                             {rand_tensor(rng, m, n)}};
                     }});
    cases.push_back({"tile_rows", [](RngStream& rng) {
                         const auto times = dim(rng, 1, 4);
                         return Problem{
                             weighted([times](const std::vector<Td>& in) { return ad::tile_rows(in[0], times); }, rng),
                             {rand_tensor(rng, dim(rng), dim(rng))}};
                     }});
    cases.push_back({"reshape", [](RngStream& rng) {
                         const auto m = dim(rng), n = dim(rng);
                         return Problem{
                             weighted([m, n](const std::vector<Td>& in) { return ad::reshape(in[0], n, m); }, rng),
                             {rand_tensor(rng, m, n)}};
                     }});
    cases.push_back({"pairwise_l1", [](RngStream& rng) {
                         const auto m = dim(rng), n = dim(rng), d = dim(rng, 1, 3);
                         // Coordinates on interleaved lattices keep every difference >= 0.05.
                         std::vector<double> a(m * d), b(n * d);
                         for (auto& x : a) x = 0.2 * double(rng.below(5)) + rng.uniform(0.0, 0.05);
                         for (auto& x : b) x = 0.2 * double(rng.below(5)) + rng.uniform(0.1, 0.15);
                         return Problem{
                             weighted([](const std::vector<Td>& in) { return ad::pairwise_l1(in[0], in[1]); }, rng),
                             {Td::constant(m, d, std::move(a)), Td::constant(n, d, std::move(b))}};
                     }});
    cases.push_back({"multi_head_attention", [](RngStream& rng) {
                         const std::size_t batch = dim(rng, 1, 2), heads = dim(rng, 1, 2), tq = dim(rng, 1, 3),
                                           tk = dim(rng, 1, 4), dh = dim(rng, 1, 3);
                         const std::size_t d = heads * dh;
                         return Problem{weighted(
                                            [heads, batch](const std::vector<Td>& in) {
                                                return ad::multi_head_attention(in[0], in[1], in[2], heads, batch);
                                            },
                                            rng),
                                        {rand_tensor(rng, batch * tq, d, -1.5, 1.5), rand_tensor(rng, batch * tk, d, -1.5, 1.5),
                                         rand_tensor(rng, batch * tk, d)}};
                     }});
    return cases;
}

/// Every loss of the losses module.
inline std::vector<Case> loss_cases() {
    using namespace detail;
    std::vector<Case> cases;
    cases.push_back({"class_nll", [](RngStream& rng) {
                         const auto rows = dim(rng, 1, 6), width = dim(rng, 2, 6);
                         std::vector<int> classes(rows);
                         for (auto& c : classes) c = int(rng.below(width));
                         return Problem{[classes](const std::vector<Td>& in) { return losses::class_nll(in[0], classes); },
                                        {rand_tensor(rng, rows, width, -3, 3)}};
                     }});
    cases.push_back({"giou", [](RngStream& rng) {
                         auto [a, b] = box_pair(rng, dim(rng, 1, 4));
                         return Problem{weighted([](const std::vector<Td>& in) { return losses::giou(in[0], in[1]); }, rng),
                                        {a, b}};
                     }});
    cases.push_back({"box_loss", [](RngStream& rng) {
                         auto [a, b] = box_pair(rng, dim(rng, 1, 4));
                         return Problem{[b = b](const std::vector<Td>& in) { return losses::box_loss(in[0], b); }, {a}};
                     }});
    auto noisy_ibb = [](RngStream& rng, std::size_t rows, double noise, std::vector<double>& clean) {
        std::vector<double> v;
        for (std::size_t r = 0; r < rows; ++r) {
            auto row = ibb_row(rng);
            clean.insert(clean.end(), row.begin(), row.end());
            for (auto& x : row) x += (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1 * noise, noise);
            v.insert(v.end(), row.begin(), row.end());
        }
        return v;
    };
    const auto lines = generate_ibb(Cuboid{}).lines;
    cases.push_back({"cross_ratio_loss", [noisy_ibb, lines](RngStream& rng) {
                         for (;;) {
                             const auto rows = dim(rng, 1, 3);
                             std::vector<double> clean;
                             auto v = noisy_ibb(rng, rows, 5.0, clean);
                             // Keep every residual off the smooth-L1 transition.
                             auto cr = losses::cross_ratio_sq(Td::constant(rows, 64, v), lines);
                             bool ok = true;
                             for (double c : cr.value()) ok = ok && std::abs(std::abs(16.0 / 9.0 - c) - 1.0) > 1e-2;
                             if (!ok) continue;
                             return Problem{[lines](const std::vector<Td>& in) { return losses::cross_ratio_loss(in[0], lines); },
                                            {Td::constant(rows, 64, std::move(v))}};
                         }
                     }});
    cases.push_back({"keypoint_loss", [noisy_ibb, lines](RngStream& rng) {
                         for (;;) {
                             const auto rows = dim(rng, 1, 3);
                             std::vector<double> clean;
                             auto v = noisy_ibb(rng, rows, 5.0, clean);
                             auto cr = losses::cross_ratio_sq(Td::constant(rows, 64, v), lines);
                             bool ok = true;
                             for (double c : cr.value()) ok = ok && std::abs(std::abs(16.0 / 9.0 - c) - 1.0) > 1e-2;
                             if (!ok) continue;
                             Td gt = Td::constant(rows, 64, std::move(clean));
                             return Problem{[gt, lines](const std::vector<Td>& in) {
                                                return losses::keypoint_loss(in[0], gt, lines);
                                            },
                                            {Td::constant(rows, 64, std::move(v))}};
                         }
                     }});
    cases.push_back({"rot6d_to_matrix", [](RngStream& rng) {
                         // Gram-Schmidt curvature blows up as |a1| -> 0 or a2 -> a1; keep rows away from both.
                         const auto rows = dim(rng, 1, 4);
                         std::vector<double> v;
                         while (v.size() < 6 * rows) {
                             Vec3 a1(rng.normal(), rng.normal(), rng.normal()), a2(rng.normal(), rng.normal(), rng.normal());
                             if (a1.norm() < 0.5 || a1.normalized().cross(a2).norm() < 0.3 * a2.norm()) continue;
                             v.insert(v.end(), {a1.x(), a1.y(), a1.z(), a2.x(), a2.y(), a2.z()});
                         }
                         return Problem{weighted([](const std::vector<Td>& in) { return losses::rot6d_to_matrix(in[0]); }, rng),
                                        {Td::constant(rows, 6, std::move(v))}};
                     }});
    cases.push_back({"decode_translation", [](RngStream& rng) {
                         const auto rows = dim(rng, 1, 4);
                         std::vector<CameraIntrinsics> cams;
                         std::vector<double> code;
                         for (std::size_t r = 0; r < rows; ++r) {
                             cams.push_back({rng.uniform(400, 700), rng.uniform(400, 700), rng.uniform(300, 340),
                                             rng.uniform(220, 260), 640, 480});
                             code.insert(code.end(), {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.5, 2.0)});
                         }
                         return Problem{weighted(
                                            [cams](const std::vector<Td>& in) {
                                                return losses::decode_translation(in[0], cams);
                                            },
                                            rng),
                                        {Td::constant(rows, 3, std::move(code))}};
                     }});
    for (bool sym : {false, true}) {
        cases.push_back({sym ? "rot_loss_symmetric" : "rot_loss", [sym](RngStream& rng) {
                             for (;;) {
                                 const auto cloud = random_cloud(rng, sym ? 8 : 20);
                                 const Mat3 Rg = random_rotation(rng);
                                 Rot6D r6 = matrix_to_rot6d(Rg * axis_angle(Vec3(rng.normal(), rng.normal(), rng.normal()),
                                                                            rng.uniform(0.05, 0.6)));
                                 std::vector<double> x(r6.data(), r6.data() + 6);
                                 for (auto& v : x) v *= rng.uniform(0.8, 1.2);
                                 const Mat3 Rp = rot6d_to_matrix(Eigen::Map<Rot6D>(x.data()));
                                 const bool ok = sym ? sym_match_clear(Rg, Rp, cloud, 1e-3)
                                                     : l1_components_clear(Rg, Rp, cloud, 1e-3);
                                 if (!ok) continue;
                                 return Problem{[Rg, cloud, sym](const std::vector<Td>& in) {
                                                    return losses::rot_loss(Rg, losses::rot6d_to_matrix(in[0]), cloud, sym);
                                                },
                                                {Td::constant(1, 6, std::move(x))}};
                             }
                         }});
    }
    cases.push_back({"pose_loss", [](RngStream& rng) {
                         for (;;) {
                             const auto cloud = random_cloud(rng, 12);
                             Pose gt;
                             gt.R = random_rotation(rng);
                             gt.t = Vec3(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(0.5, 2));
                             const Mat3 Rp = gt.R * axis_angle(Vec3(rng.normal(), rng.normal(), rng.normal()), 0.3);
                             const Rot6D r6 = matrix_to_rot6d(Rp);
                             Td t = away_from(rng, 1, 3, 0.0, 0.01, 0.05);
                             if (!l1_components_clear(gt.R, Rp, cloud, 1e-3)) continue;
                             std::vector<double> tp{gt.t.x() + t(0, 0), gt.t.y() + t(0, 1), gt.t.z() + t(0, 2)};
                             return Problem{[gt, cloud](const std::vector<Td>& in) {
                                                return losses::pose_loss(gt, losses::rot6d_to_matrix(in[0]), in[1], cloud,
                                                                         false);
                                            },
                                            {Td::constant(1, 6, std::vector<double>(r6.data(), r6.data() + 6)),
                                             Td::constant(1, 3, std::move(tp))}};
                         }
                     }});
    cases.push_back({"hungarian_loss", [lines](RngStream& rng) {
                         // One sample, three queries, two matched objects of
                         // two classes (C = 2); predictions are groundtruth
                         // plus offsets bounded away from every kink.
                         constexpr std::size_t Q = 3, C = 2;
                         const CameraIntrinsics cam{500, 500, 320, 240, 640, 480};
                         losses::ClassModels models;
                         for (std::size_t c = 0; c < C; ++c) models.points.push_back(random_cloud(rng, 6));
                         models.symmetric = {};
                         for (;;) {
                             losses::SampleTargets st;
                             st.camera = cam;
                             std::vector<double> logits, boxes, trans, kps;
                             for (std::size_t t = 0; t < 2; ++t) {
                                 TargetTuple tt;
                                 tt.class_id = int(t);
                                 tt.pose.R = random_rotation(rng);
                                 tt.pose.t = Vec3(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(0.8, 1.4));
                                 tt.translation = encode_translation(tt.pose.t, cam);
                                 tt.box = {rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.1, 0.3),
                                           rng.uniform(0.1, 0.3)};
                                 auto row = ibb_row(rng);  // pixel units, see ibb_row
                                 tt.keypoints.rep = KeypointRep::IBB32;
                                 tt.keypoints.lines = lines;
                                 for (int k = 0; k < 32; ++k) tt.keypoints.points.emplace_back(row[2 * k], row[2 * k + 1]);
                                 st.targets.push_back(tt);
                             }
                             for (std::size_t q = 0; q < Q; ++q) {
                                 for (std::size_t c = 0; c <= C; ++c) logits.push_back(rng.uniform(-2, 2));
                                 const auto& src = st.targets[q % 2];
                                 auto sgn = [&] { return rng.uniform() < 0.5 ? -1.0 : 1.0; };
                                 const double dcx = sgn() * rng.uniform(0.01, 0.02), dcy = sgn() * rng.uniform(0.01, 0.02);
                                 const double dw = sgn() * rng.uniform(0.002, 0.008), dh = sgn() * rng.uniform(0.002, 0.008);
                                 boxes.insert(boxes.end(), {src.box.cx + dcx, src.box.cy + dcy, src.box.w + dw, src.box.h + dh});
                                 trans.insert(trans.end(), {src.translation.u_norm + sgn() * rng.uniform(0.01, 0.03),
                                                            src.translation.v_norm + sgn() * rng.uniform(0.01, 0.03),
                                                            src.translation.tz + sgn() * rng.uniform(0.02, 0.05)});
                                 for (const auto& p : src.keypoints.points)
                                     kps.insert(kps.end(), {p.x() + sgn() * rng.uniform(0.5, 2.0), p.y() + sgn() * rng.uniform(0.5, 2.0)});
                             }
                             losses::SetOutputs<double> out;
                             out.batch = 1;
                             out.queries = Q;
                             out.logits = Td::constant(Q, C + 1, logits);
                             out.boxes = Td::constant(Q, 4, boxes);
                             out.translation = Td::constant(Q, 3, trans);
                             out.keypoints = Td::constant(Q, 64, kps);
                             // Fixed assignment from the values at the sample.
                             std::vector<PredictionTuple> preds(Q);
                             for (std::size_t q = 0; q < Q; ++q) {
                                 preds[q].class_logits.assign(logits.begin() + q * (C + 1), logits.begin() + (q + 1) * (C + 1));
                                 preds[q].box = {boxes[4 * q], boxes[4 * q + 1], boxes[4 * q + 2], boxes[4 * q + 3]};
                             }
                             const Assignment asg = match_sets(preds, st.targets);
                             // Fixed linear rotation head.
                             Td head = rand_tensor(rng, 64, 6, -1.0 / 640, 1.0 / 640);
                             losses::RotationHead<double> rh = [head](const Td& k) { return ad::matmul(k, head); };
                             // Reject samples whose pose residuals sit on an L1 kink.
                             bool ok = true;
                             for (std::size_t t = 0; t < 2 && ok; ++t) {
                                 const int p = asg.target_to_pred[t];
                                 auto r6 = ad::matmul(ad::slice(out.keypoints, 0, p, p + 1), head);
                                 const Mat3 Rp = rot_from_cols(losses::rot6d_to_matrix(r6).value());
                                 ok = l1_components_clear(st.targets[t].pose.R, Rp, models.points[t], 1e-3);
                                 const Vec3 tp = decode_translation({trans[3 * p], trans[3 * p + 1], trans[3 * p + 2]}, cam);
                                 ok = ok && (tp - st.targets[t].pose.t).cwiseAbs().minCoeff() > 1e-3;
                                 std::vector<double> row;
                                 for (int k = 0; k < 32; ++k) row.insert(row.end(), {kps[64 * p + 2 * k], kps[64 * p + 2 * k + 1]});
                                 auto cr = losses::cross_ratio_sq(Td::constant(1, 64, row), lines);
                                 for (double c : cr.value()) ok = ok && std::abs(std::abs(16.0 / 9.0 - c) - 1.0) > 1e-2;
                             }
                             if (!ok) continue;
                             std::vector<losses::SampleTargets> samples{st};
                             std::vector<Assignment> asgs{asg};
                             return Problem{[samples, asgs, models, rh](const std::vector<Td>& in) {
                                                losses::SetOutputs<double> o;
                                                o.batch = 1;
                                                o.queries = 3;
                                                o.logits = in[0];
                                                o.boxes = in[1];
                                                o.translation = in[2];
                                                o.keypoints = in[3];
                                                return losses::hungarian_loss(o, samples, asgs, losses::LossWeights{}, &models, rh)
                                                    .total;
                                            },
                                            {out.logits, out.boxes, out.translation, out.keypoints}};
                         }
                     }});
    return cases;
}

/// Runs `trials` seeded problems per case.
inline std::vector<Report> run(const std::vector<Case>& cases, std::size_t trials, std::uint64_t seed,
                               double tolerance = 1e-4) {
    std::vector<Report> out;
    for (const auto& c : cases) {
        Report rep;
        rep.name = c.name;
        rep.tolerance = tolerance;
        RngStream base(seed, c.name);
        for (std::size_t t = 0; t < trials; ++t) {
            RngStream rng = base.substream("trial", t);
            const Problem p = c.make(rng);
            rep.max_rel_error = std::max(rep.max_rel_error, max_relative_error(p.f, p.inputs, 1e-4, &rep.elements));
            ++rep.trials;
        }
        out.push_back(rep);
    }
    return out;
}

}  // namespace setpose::gradcheck
