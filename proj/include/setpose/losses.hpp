#pragma once

#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "setpose/autodiff.hpp"
#include "setpose/errors.hpp"
#include "setpose/geometry.hpp"
#include "setpose/matching.hpp"

// Loss terms of the set-prediction objective. Every function works on
// ad::Tensor<T> so the same code drives training (float) and the
// finite-difference checks (double). Batched inputs carry one sample per row.

namespace setpose::losses {

using ad::Tensor;

struct LossWeights {
    double gamma = 10.0;             // keypoint L1
    double delta = 1.0;              // cross-ratio
    double class_null_weight = 0.4;  // no-object class in the NLL
    double box_l1 = 5.0;
    double box_giou = 2.0;
    double pose_weight = 0.02;

    void validate() const {
        for (double v : {gamma, delta, class_null_weight, box_l1, box_giou, pose_weight})
            if (!(v >= 0.0)) throw InvalidArgument("loss weights must be non-negative");
    }
};

namespace detail {

template <typename T>
Tensor<T> column_constant(const std::vector<double>& v) {
    std::vector<T> out(v.begin(), v.end());
    return Tensor<T>::constant(v.size(), 1, std::move(out));
}

template <typename T>
Tensor<T> col(const Tensor<T>& x, std::size_t j) {
    return ad::slice(x, 1, j, j + 1);
}

}  // namespace detail

/// Weighted negative log-likelihood over rows of `logits` [R, C+1]. Rows whose
/// class is C (no object) get `null_weight`; the result is divided by the sum
/// of the weights.
template <typename T>
Tensor<T> class_nll(const Tensor<T>& logits, const std::vector<int>& classes, double null_weight = 0.4) {
    const std::size_t rows = logits.rows(), width = logits.cols();
    if (classes.size() != rows) throw ShapeMismatch("class_nll: one class per row expected");
    if (rows == 0) return Tensor<T>::scalar(T(0));
    const int null_id = static_cast<int>(width) - 1;
    std::vector<T> weights(rows * width, T(0));
    double total = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        if (classes[i] < 0 || classes[i] > null_id) throw InvalidArgument("class_nll: class id out of range");
        const double w = classes[i] == null_id ? null_weight : 1.0;
        weights[i * width + classes[i]] = T(w);
        total += w;
    }
    if (total <= 0.0) return Tensor<T>::scalar(T(0));
    const auto W = Tensor<T>::constant(rows, width, std::move(weights));
    return ad::scale(ad::sum(ad::mul(ad::log_softmax(logits), W)), T(-1.0 / total));
}

/// Generalized IoU per row of two [R, 4] (cx, cy, w, h) box tensors -> [R, 1].
template <typename T>
Tensor<T> giou(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.cols() != 4 || b.cols() != 4 || a.rows() != b.rows()) throw ShapeMismatch("giou: [R, 4] boxes expected");
    for (const auto* t : {&a, &b})
        for (std::size_t i = 0; i < t->rows(); ++i)
            if (!((*t)(i, 2) > T(0) && (*t)(i, 3) > T(0))) throw InvalidArgument("giou: non-positive box extent");
    using detail::col;
    const T half(0.5);
    auto ax0 = col(a, 0) - ad::scale(col(a, 2), half), ax1 = col(a, 0) + ad::scale(col(a, 2), half);
    auto ay0 = col(a, 1) - ad::scale(col(a, 3), half), ay1 = col(a, 1) + ad::scale(col(a, 3), half);
    auto bx0 = col(b, 0) - ad::scale(col(b, 2), half), bx1 = col(b, 0) + ad::scale(col(b, 2), half);
    auto by0 = col(b, 1) - ad::scale(col(b, 3), half), by1 = col(b, 1) + ad::scale(col(b, 3), half);
    auto iw = ad::relu(ad::minimum(ax1, bx1) - ad::maximum(ax0, bx0));
    auto ih = ad::relu(ad::minimum(ay1, by1) - ad::maximum(ay0, by0));
    auto inter = iw * ih;
    auto uni = col(a, 2) * col(a, 3) + col(b, 2) * col(b, 3) - inter;
    auto ew = ad::maximum(ax1, bx1) - ad::minimum(ax0, bx0);
    auto eh = ad::maximum(ay1, by1) - ad::minimum(ay0, by0);
    auto enclosing = ew * eh;
    return inter / uni - (enclosing - uni) / enclosing;
}

/// Mean over rows of l1_w * |pred - gt|_1 + giou_w * (1 - GIoU).
template <typename T>
Tensor<T> box_loss(const Tensor<T>& pred, const Tensor<T>& gt, const LossWeights& w = {}) {
    if (pred.rows() == 0) return Tensor<T>::scalar(T(0));
    const T n = T(pred.rows());
    auto l1_term = ad::scale(ad::l1(pred - gt), T(w.box_l1) / n);
    auto g = giou(pred, gt);
    auto giou_term = ad::scale(ad::sum(ad::add_scalar(ad::neg(g), T(1))), T(w.box_giou) / n);
    return l1_term + giou_term;
}

struct CrossRatioOptions {
    /// Throw DegenerateInput on coincident points. When false the
    /// denominators are floored at 1e-12 instead (used during training).
    bool strict = true;
};

/// Squared cross-ratios of every line tuple, for keypoints laid out as
/// [R, 2K] (x0, y0, x1, y1, ...) -> [R, L].
template <typename T>
Tensor<T> cross_ratio_sq(const Tensor<T>& kps, const std::vector<LineTuple>& lines,
                         const CrossRatioOptions& opt = {}) {
    const std::size_t L = lines.size();
    std::array<std::vector<std::size_t>, 4> cols;
    for (const auto& line : lines)
        for (int r = 0; r < 4; ++r) {
            cols[r].push_back(std::size_t(2 * line[r]));
            cols[r].push_back(std::size_t(2 * line[r] + 1));
        }
    // Sums adjacent (x, y) column pairs.
    std::vector<T> pair(2 * L * L, T(0));
    for (std::size_t l = 0; l < L; ++l) {
        pair[(2 * l) * L + l] = T(1);
        pair[(2 * l + 1) * L + l] = T(1);
    }
    const auto P = Tensor<T>::constant(2 * L, L, std::move(pair));
    const auto a = ad::gather_cols(kps, cols[0]);
    const auto b = ad::gather_cols(kps, cols[1]);
    const auto c = ad::gather_cols(kps, cols[2]);
    const auto d = ad::gather_cols(kps, cols[3]);
    auto sq = [&](const Tensor<T>& u, const Tensor<T>& v) { return ad::matmul(ad::square(u - v), P); };
    auto ca = sq(c, a), db = sq(d, b), cb = sq(c, b), da = sq(d, a);
    if (opt.strict) {
        for (const auto* t : {&cb, &da})
            for (T v : t->value())
                if (!(v > T(1e-12))) throw DegenerateInput("cross-ratio with coincident keypoints");
    } else {
        const auto floor = Tensor<T>::scalar(T(1e-12));
        cb = ad::maximum(cb, floor);
        da = ad::maximum(da, floor);
    }
    return (ca * db) / (cb * da);
}

/// Mean over rows and line tuples of smoothL1(16/9 - CR^2). Zero when there
/// are no line tuples.
template <typename T>
Tensor<T> cross_ratio_loss(const Tensor<T>& kps, const std::vector<LineTuple>& lines,
                           const CrossRatioOptions& opt = {}) {
    if (lines.empty() || kps.rows() == 0) return Tensor<T>::scalar(T(0));
    auto cr = cross_ratio_sq(kps, lines, opt);
    return ad::mean(ad::smooth_l1(ad::add_scalar(ad::neg(cr), T(kIbbCrossRatioSq))));
}

/// gamma * |pred - gt|_1 / K + delta * cross-ratio loss, averaged over rows.
template <typename T>
Tensor<T> keypoint_loss(const Tensor<T>& pred, const Tensor<T>& gt, const std::vector<LineTuple>& lines,
                        const LossWeights& w = {}, const CrossRatioOptions& opt = {}) {
    if (pred.rows() != gt.rows() || pred.cols() != gt.cols() || pred.cols() % 2 != 0)
        throw ShapeMismatch("keypoint_loss: prediction and groundtruth layouts differ");
    if (pred.rows() == 0) return Tensor<T>::scalar(T(0));
    const T points = T(pred.cols() / 2);
    auto l1_term = ad::scale(ad::l1(pred - gt), T(w.gamma) / (points * T(pred.rows())));
    if (w.delta == 0.0 || lines.empty()) return l1_term;
    return l1_term + ad::scale(cross_ratio_loss(pred, lines, opt), T(w.delta));
}

/// Gram-Schmidt on each row of a [R, 6] tensor. Output [R, 9] holds the
/// rotation columns b1, b2, b3 one after another (column-major 3x3).
template <typename T>
Tensor<T> rot6d_to_matrix(const Tensor<T>& x) {
    if (x.cols() != 6) throw ShapeMismatch("rot6d_to_matrix: [R, 6] expected");
    auto a1 = ad::slice(x, 1, 0, 3);
    auto a2 = ad::slice(x, 1, 3, 6);
    auto n1 = ad::sqrt(ad::sum(ad::square(a1), 1));
    for (T v : n1.value())
        if (!(v > T(1e-12))) throw DegenerateInput("rot6d column with vanishing norm");
    auto b1 = a1 / n1;
    auto o = a2 - ad::sum(b1 * a2, 1) * b1;
    auto n2 = ad::sqrt(ad::sum(ad::square(o), 1));
    for (T v : n2.value())
        if (!(v > T(1e-12))) throw DegenerateInput("rot6d columns are parallel");
    auto b2 = o / n2;
    const std::vector<std::size_t> i120{1, 2, 0}, i201{2, 0, 1};
    auto b3 = ad::gather_cols(b1, i120) * ad::gather_cols(b2, i201) -
              ad::gather_cols(b1, i201) * ad::gather_cols(b2, i120);
    return ad::concat<T>({b1, b2, b3}, 1);
}

/// Constant [9, 3M] such that (rot_cols [R, 9]) x (this) = rotated points
/// [R, 3M] laid out x0 y0 z0 x1 ...
template <typename T>
Tensor<T> rotation_point_matrix(const PointCloud& model) {
    const std::size_t M = model.size();
    std::vector<T> v(9 * 3 * M, T(0));
    for (std::size_t m = 0; m < M; ++m)
        for (int k = 0; k < 3; ++k)
            for (int i = 0; i < 3; ++i) v[(3 * k + i) * (3 * M) + 3 * m + i] = T(model[m][k]);
    return Tensor<T>::constant(9, 3 * M, std::move(v));
}

template <typename T>
Tensor<T> rotated_points(const Mat3& R, const PointCloud& model) {
    std::vector<T> v;
    v.reserve(3 * model.size());
    for (const auto& x : model) {
        const Vec3 p = R * x;
        v.insert(v.end(), {T(p.x()), T(p.y()), T(p.z())});
    }
    const std::size_t n = v.size();
    return Tensor<T>::constant(1, n, std::move(v));
}

/// Point-matching rotation loss for one prediction. `rot_cols` is [1, 9]
/// from rot6d_to_matrix. Non-symmetric: mean over model points of
/// |R_gt x - R_pred x|_1. Symmetric: mean over x1 of min over x2 of
/// |R_gt x1 - R_pred x2|_1 (exhaustive search).
template <typename T>
Tensor<T> rot_loss(const Mat3& R_gt, const Tensor<T>& rot_cols, const PointCloud& model, bool symmetric,
                   const Tensor<T>* point_matrix = nullptr) {
    if (model.empty()) throw EmptyInput("rot_loss: empty model");
    if (rot_cols.rows() != 1 || rot_cols.cols() != 9) throw ShapeMismatch("rot_loss: [1, 9] rotation expected");
    const std::size_t M = model.size();
    const Tensor<T> P = point_matrix ? *point_matrix : rotation_point_matrix<T>(model);
    auto pred = ad::matmul(rot_cols, P);
    auto gt = rotated_points<T>(R_gt, model);
    if (!symmetric) return ad::scale(ad::l1(pred - gt), T(1.0 / double(M)));
    auto dist = ad::pairwise_l1(ad::reshape(gt, M, 3), ad::reshape(pred, M, 3));
    return ad::mean(ad::min_cols(dist));
}

/// Non-symmetric rot_loss averaged over a batch of rotations [B, 9].
template <typename T>
Tensor<T> rot_loss_batch(const std::vector<Mat3>& R_gt, const Tensor<T>& rot_cols, const PointCloud& model,
                         const Tensor<T>& point_matrix) {
    if (R_gt.size() != rot_cols.rows()) throw ShapeMismatch("rot_loss_batch: batch sizes differ");
    if (R_gt.empty()) return Tensor<T>::scalar(T(0));
    std::vector<Tensor<T>> rows;
    for (const auto& R : R_gt) rows.push_back(rotated_points<T>(R, model));
    auto gt = ad::concat(rows, 0);
    return ad::scale(ad::l1(ad::matmul(rot_cols, point_matrix) - gt),
                     T(1.0 / (double(model.size()) * double(R_gt.size()))));
}

/// Translation codes [R, 3] (u_norm, v_norm, tz) to camera-frame translations
/// [R, 3], one camera per row.
template <typename T>
Tensor<T> decode_translation(const Tensor<T>& code, const std::vector<CameraIntrinsics>& cams) {
    if (code.cols() != 3 || cams.size() != code.rows()) throw ShapeMismatch("decode_translation: [R, 3] codes expected");
    std::vector<double> w, h, cx, cy, ifx, ify;
    for (const auto& c : cams) {
        w.push_back(c.width);
        h.push_back(c.height);
        cx.push_back(c.cx);
        cy.push_back(c.cy);
        ifx.push_back(1.0 / c.fx);
        ify.push_back(1.0 / c.fy);
    }
    using detail::col;
    using detail::column_constant;
    auto tz = col(code, 2);
    auto x = (col(code, 0) * column_constant<T>(w) - column_constant<T>(cx)) * tz * column_constant<T>(ifx);
    auto y = (col(code, 1) * column_constant<T>(h) - column_constant<T>(cy)) * tz * column_constant<T>(ify);
    return ad::concat<T>({x, y, tz}, 1);
}

/// rot_loss + |t_gt - t_pred|_1 for one prediction; `t_pred` is [1, 3].
template <typename T>
Tensor<T> pose_loss(const Pose& gt, const Tensor<T>& rot_cols, const Tensor<T>& t_pred, const PointCloud& model,
                    bool symmetric, const Tensor<T>* point_matrix = nullptr) {
    auto t_gt = Tensor<T>::constant(1, 3, {T(gt.t.x()), T(gt.t.y()), T(gt.t.z())});
    return rot_loss(gt.R, rot_cols, model, symmetric, point_matrix) + ad::l1(t_pred - t_gt);
}

// ---------------------------------------------------------------------------
// Set-level loss

/// Network outputs for a batch of B samples with Q queries each; row b*Q+q
/// belongs to query q of sample b.
template <typename T>
struct SetOutputs {
    Tensor<T> logits;       // [B*Q, C+1]
    Tensor<T> boxes;        // [B*Q, 4]
    Tensor<T> translation;  // [B*Q, 3] (u_norm, v_norm, tz)
    Tensor<T> keypoints;    // [B*Q, 2K]
    std::size_t batch = 0;
    std::size_t queries = 0;
};

struct SampleTargets {
    std::vector<TargetTuple> targets;
    CameraIntrinsics camera;
};

/// Model clouds and symmetry flags indexed by class id.
struct ClassModels {
    std::vector<PointCloud> points;
    std::set<int> symmetric;
};

template <typename T>
struct LossBreakdown {
    Tensor<T> total;
    double class_loss = 0.0;
    double box_loss = 0.0;
    double keypoint_loss = 0.0;
    double pose_loss = 0.0;  // before pose_weight
    double total_value = 0.0;
    std::size_t matched = 0;
};

/// Maps matched keypoint rows [R, 2K] to 6D rotations [R, 6].
template <typename T>
using RotationHead = std::function<Tensor<T>(const Tensor<T>&)>;

/// Class NLL over every query (unmatched ones target the no-object class);
/// box, keypoint and pose terms averaged over matched pairs. The pose term
/// is computed only when a rotation head and class models are supplied.
template <typename T>
LossBreakdown<T> hungarian_loss(const SetOutputs<T>& out, const std::vector<SampleTargets>& samples,
                                const std::vector<Assignment>& assignments, const LossWeights& w,
                                const ClassModels* models = nullptr, const RotationHead<T>& rotation_head = {},
                                const CrossRatioOptions& cr_opt = {}) {
    w.validate();
    if (samples.size() != out.batch || assignments.size() != out.batch)
        throw ShapeMismatch("hungarian_loss: one target list and assignment per sample expected");
    const int null_id = static_cast<int>(out.logits.cols()) - 1;
    std::vector<int> classes(out.batch * out.queries, null_id);
    std::vector<std::size_t> rows;
    std::vector<const TargetTuple*> matched;
    std::vector<CameraIntrinsics> cams;
    for (std::size_t b = 0; b < out.batch; ++b) {
        const auto& targets = samples[b].targets;
        if (assignments[b].target_to_pred.size() != targets.size())
            throw ShapeMismatch("hungarian_loss: assignment does not cover the targets");
        for (std::size_t t = 0; t < targets.size(); ++t) {
            const int p = assignments[b].target_to_pred[t];
            if (p < 0) continue;
            const std::size_t row = b * out.queries + std::size_t(p);
            classes[row] = targets[t].class_id;
            rows.push_back(row);
            matched.push_back(&targets[t]);
            cams.push_back(samples[b].camera);
        }
    }

    LossBreakdown<T> res;
    res.matched = rows.size();
    auto cls = class_nll(out.logits, classes, w.class_null_weight);
    Tensor<T> total = cls;
    res.class_loss = double(cls.item());

    if (!rows.empty()) {
        std::vector<T> gt_boxes, gt_kps;
        const std::size_t kp_width = out.keypoints.cols();
        for (const auto* t : matched) {
            gt_boxes.insert(gt_boxes.end(), {T(t->box.cx), T(t->box.cy), T(t->box.w), T(t->box.h)});
            if (t->keypoints.points.size() * 2 != kp_width)
                throw ShapeMismatch("hungarian_loss: keypoint count differs from network output");
            for (const auto& p : t->keypoints.points) gt_kps.insert(gt_kps.end(), {T(p.x()), T(p.y())});
        }
        const std::size_t n = rows.size();
        auto bl = box_loss(ad::gather_rows(out.boxes, rows), Tensor<T>::constant(n, 4, std::move(gt_boxes)), w);
        auto pred_kps = ad::gather_rows(out.keypoints, rows);
        auto kl = keypoint_loss(pred_kps, Tensor<T>::constant(n, kp_width, std::move(gt_kps)),
                                matched.front()->keypoints.lines, w, cr_opt);
        res.box_loss = double(bl.item());
        res.keypoint_loss = double(kl.item());
        total = total + bl + kl;

        if (models && rotation_head) {
            auto rot = rot6d_to_matrix(rotation_head(pred_kps));
            auto trans = decode_translation(ad::gather_rows(out.translation, rows), cams);
            std::vector<Tensor<T>> per;
            for (std::size_t i = 0; i < n; ++i) {
                const int c = matched[i]->class_id;
                if (c < 0 || std::size_t(c) >= models->points.size()) throw UnknownClass(std::to_string(c));
                per.push_back(pose_loss(matched[i]->pose, ad::slice(rot, 0, i, i + 1), ad::slice(trans, 0, i, i + 1),
                                        models->points[c], models->symmetric.count(c) > 0));
            }
            auto pl = ad::scale(ad::sum(ad::concat(per, 0)), T(1.0 / double(n)));
            res.pose_loss = double(pl.item());
            total = total + ad::scale(pl, T(w.pose_weight));
        }
    }
    res.total = total;
    res.total_value = double(total.item());
    return res;
}

/// Reads a symmetric-object list: one BOP object id per line; blank lines
/// and lines starting with '#' are skipped.
inline std::set<int> read_symmetric_classes(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IOError("cannot open symmetric class list " + path);
    std::set<int> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        std::istringstream ss(line);
        int id;
        std::string rest;
        if (!(ss >> id) || (ss >> rest))
            throw ParseError(path + ":" + std::to_string(lineno) + ": expected one integer class id");
        out.insert(id);
    }
    return out;
}

/// YCB-V objects marked symmetric in the usual evaluation protocol
/// (BOP object ids): bowl, wood block, large and extra-large clamp, foam brick.
inline std::set<int> default_symmetric_classes() { return {13, 16, 19, 20, 21}; }

}  // namespace setpose::losses
