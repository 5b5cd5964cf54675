#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "setpose/errors.hpp"
#include "setpose/geometry.hpp"

namespace setpose {

/// One scored (estimate, groundtruth) pair. Records without an estimate
/// count as failures at every threshold.
struct EvalRecord {
    int scene_id = 0;
    int im_id = 0;
    int obj_id = 0;
    Pose estimate;
    bool has_estimate = true;
    double score = 1.0;
    Pose gt;
    double diameter = 0.0;  // meters
};

struct ClassMetrics {
    int obj_id = -1;  // -1 for the mean row
    std::size_t count = 0;
    double auc_add = 0.0;
    double auc_adds = 0.0;
    double auc_add_s = 0.0;  // ADD for asymmetric, ADD-S for symmetric objects
    double ar_add_s_01m = 0.0;
    double ar_add_s_01d = 0.0;
};

struct MetricReport {
    std::vector<ClassMetrics> classes;  // ascending obj_id
    ClassMetrics mean;
};

inline double add_error(const Pose& gt, const Pose& pred, const PointCloud& model) {
    if (model.empty()) throw EmptyInput("add_error: empty model");
    double s = 0.0;
    for (const auto& x : model) s += (gt.apply(x) - pred.apply(x)).norm();
    return s / double(model.size());
}

/// Exhaustive closest-point pairing; squared distances are compared and the
/// root is taken once per point.
inline double adds_error(const Pose& gt, const Pose& pred, const PointCloud& model) {
    if (model.empty()) throw EmptyInput("adds_error: empty model");
    const std::size_t M = model.size();
    std::vector<double> px(M), py(M), pz(M);
    for (std::size_t j = 0; j < M; ++j) {
        const Vec3 p = pred.apply(model[j]);
        px[j] = p.x();
        py[j] = p.y();
        pz[j] = p.z();
    }
    double s = 0.0;
    for (const auto& x : model) {
        const Vec3 g = gt.apply(x);
        const double gx = g.x(), gy = g.y(), gz = g.z();
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < M; ++j) {
            const double dx = gx - px[j], dy = gy - py[j], dz = gz - pz[j];
            best = std::min(best, dx * dx + dy * dy + dz * dz);
        }
        s += std::sqrt(best);
    }
    return s / double(M);
}

/// Mean of max(0, 1 - e / max_threshold): the area under the accuracy curve
/// on [0, max_threshold], normalized to [0, 1].
inline double auc(const std::vector<double>& errors, double max_threshold = 0.1) {
    if (errors.empty()) throw EmptyInput("auc: no errors");
    if (!(max_threshold > 0.0)) throw InvalidArgument("auc: threshold must be positive");
    double s = 0.0;
    for (double e : errors) s += std::max(0.0, 1.0 - e / max_threshold);
    return s / double(errors.size());
}

/// Fraction of errors strictly below their threshold.
inline double recall_at(const std::vector<double>& errors, const std::vector<double>& thresholds) {
    if (errors.empty()) throw EmptyInput("recall_at: no errors");
    if (errors.size() != thresholds.size()) throw ShapeMismatch("recall_at: one threshold per error expected");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < errors.size(); ++i) hit += errors[i] < thresholds[i];
    return double(hit) / double(errors.size());
}

/// Per-object AUCs and recalls plus the unweighted mean over objects present.
inline MetricReport evaluate(const std::vector<EvalRecord>& records, const std::map<int, PointCloud>& models,
                             const std::set<int>& symmetric, double max_threshold = 0.1) {
    std::map<int, std::vector<const EvalRecord*>> by_obj;
    for (const auto& r : records) {
        if (!models.count(r.obj_id)) throw UnknownClass("no model for object " + std::to_string(r.obj_id));
        if (!(r.diameter > 0.0)) throw InvalidArgument("object diameter must be positive");
        by_obj[r.obj_id].push_back(&r);
    }
    constexpr double inf = std::numeric_limits<double>::infinity();
    MetricReport rep;
    for (const auto& [obj, recs] : by_obj) {
        const auto& model = models.at(obj);
        const bool sym = symmetric.count(obj) > 0;
        std::vector<double> add, adds, mixed, thr_m, thr_d;
        for (const auto* r : recs) {
            const double a = r->has_estimate ? add_error(r->gt, r->estimate, model) : inf;
            const double s = r->has_estimate ? adds_error(r->gt, r->estimate, model) : inf;
            add.push_back(a);
            adds.push_back(s);
            mixed.push_back(sym ? s : a);
            thr_m.push_back(0.1);
            thr_d.push_back(0.1 * r->diameter);
        }
        ClassMetrics cm;
        cm.obj_id = obj;
        cm.count = recs.size();
        cm.auc_add = auc(add, max_threshold);
        cm.auc_adds = auc(adds, max_threshold);
        cm.auc_add_s = auc(mixed, max_threshold);
        cm.ar_add_s_01m = recall_at(mixed, thr_m);
        cm.ar_add_s_01d = recall_at(mixed, thr_d);
        rep.classes.push_back(cm);
    }
    if (!rep.classes.empty()) {
        const double k = double(rep.classes.size());
        for (const auto& c : rep.classes) {
            rep.mean.count += c.count;
            rep.mean.auc_add += c.auc_add / k;
            rep.mean.auc_adds += c.auc_adds / k;
            rep.mean.auc_add_s += c.auc_add_s / k;
            rep.mean.ar_add_s_01m += c.ar_add_s_01m / k;
            rep.mean.ar_add_s_01d += c.ar_add_s_01d / k;
        }
    }
    return rep;
}

struct GtInstance {
    int scene_id = 0;
    int im_id = 0;
    int obj_id = 0;
    Pose pose;
};

struct PoseEstimate {
    int scene_id = 0;
    int im_id = 0;
    int obj_id = 0;
    double score = 1.0;
    Pose pose;
    double time = -1.0;
};

/// Pairs estimates with groundtruth instances of the same object in the same
/// image. Within a group, estimates are taken by descending score and each
/// joins the free instance with the closest translation. Instances left
/// without an estimate produce records with `has_estimate = false`; surplus
/// estimates are dropped.
inline std::vector<EvalRecord> join_estimates(const std::vector<GtInstance>& gt,
                                              const std::vector<PoseEstimate>& est,
                                              const std::map<int, double>& diameters) {
    using Key = std::tuple<int, int, int>;
    std::map<Key, std::vector<const PoseEstimate*>> est_by;
    for (const auto& e : est) est_by[{e.scene_id, e.im_id, e.obj_id}].push_back(&e);
    std::map<Key, std::vector<std::size_t>> gt_by;
    for (std::size_t i = 0; i < gt.size(); ++i) gt_by[{gt[i].scene_id, gt[i].im_id, gt[i].obj_id}].push_back(i);

    std::vector<EvalRecord> out(gt.size());
    for (std::size_t i = 0; i < gt.size(); ++i) {
        auto& r = out[i];
        r.scene_id = gt[i].scene_id;
        r.im_id = gt[i].im_id;
        r.obj_id = gt[i].obj_id;
        r.gt = gt[i].pose;
        r.has_estimate = false;
        r.score = 0.0;
        const auto d = diameters.find(r.obj_id);
        if (d == diameters.end()) throw UnknownClass("no diameter for object " + std::to_string(r.obj_id));
        r.diameter = d->second;
    }
    for (auto& [key, idx] : gt_by) {
        auto it = est_by.find(key);
        if (it == est_by.end()) continue;
        auto cands = it->second;
        std::stable_sort(cands.begin(), cands.end(),
                         [](const PoseEstimate* a, const PoseEstimate* b) { return a->score > b->score; });
        std::vector<bool> taken(idx.size(), false);
        for (const auto* e : cands) {
            int best = -1;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < idx.size(); ++k) {
                if (taken[k]) continue;
                const double dist = (gt[idx[k]].pose.t - e->pose.t).norm();
                if (dist < best_d) {
                    best_d = dist;
                    best = int(k);
                }
            }
            if (best < 0) break;
            taken[best] = true;
            auto& r = out[idx[best]];
            r.estimate = e->pose;
            r.has_estimate = true;
            r.score = e->score;
        }
    }
    return out;
}

/// Largest pairwise distance of the model points (exhaustive).
inline double model_diameter(const PointCloud& model) {
    double d = 0.0;
    for (std::size_t i = 0; i < model.size(); ++i)
        for (std::size_t j = i + 1; j < model.size(); ++j) d = std::max(d, (model[i] - model[j]).squaredNorm());
    return std::sqrt(d);
}

/// Farthest-point subsample used for both losses and metrics.
inline PointCloud subsample_model(const PointCloud& model, std::size_t k = 1500) {
    if (model.size() <= k) return model;
    return fps_sample(model, k);
}

}  // namespace setpose
