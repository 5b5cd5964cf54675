#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include "setpose/autodiff.hpp"
#include "setpose/geometry.hpp"
#include "setpose/losses.hpp"
#include "setpose/matching.hpp"
#include "setpose/metrics.hpp"
#include "setpose/models.hpp"
#include "setpose/optim.hpp"
#include "setpose/pnp.hpp"
#include "setpose/synthetic.hpp"

namespace setpose::train {

using ad::Tensor;
using nlohmann::json;

/// Random pose with depth in [z_min, z_max] whose projected points all fall
/// inside the image. Rejection sampling over uniform rotations and image
/// positions of the origin.
inline Pose sample_visible_pose(RngStream& rng, const std::vector<Vec3>& points, const CameraIntrinsics& cam,
                                double z_min = 0.5, double z_max = 2.0, int max_tries = 1000) {
    for (int attempt = 0; attempt < max_tries; ++attempt) {
        Pose pose;
        pose.R = random_rotation(rng);
        pose.t = decode_translation({rng.uniform(), rng.uniform(), rng.uniform(z_min, z_max)}, cam);
        bool ok = true;
        for (const auto& x : points) {
            const Vec3 c = pose.apply(x);
            if (c.z() <= 1e-6) {
                ok = false;
                break;
            }
            const double u = cam.fx * c.x() / c.z() + cam.cx, v = cam.fy * c.y() / c.z() + cam.cy;
            if (u < 0 || u > cam.width || v < 0 || v > cam.height) {
                ok = false;
                break;
            }
        }
        if (ok) return pose;
    }
    throw NumericalFailure("no visible pose found; object too large for the camera");
}

/// Noisy keypoint observation of an object, normalized by image extents.
struct KeypointPair {
    std::vector<float> input;  // 2K values, (x0, y0, x1, y1, ...)
    std::vector<Vec2> pixels;  // noisy pixel coordinates
    Pose pose;
};

inline std::vector<KeypointPair> make_keypoint_pairs(std::uint64_t seed, std::size_t count,
                                                     const KeypointSet3D& kps, const CameraIntrinsics& cam,
                                                     double noise_px, double z_min = 0.5, double z_max = 2.0) {
    std::vector<KeypointPair> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        auto rng = RngStream(seed, "keypoint-pairs").substream("pair", i);
        KeypointPair p;
        p.pose = sample_visible_pose(rng, kps.points, cam, z_min, z_max);
        for (const auto& x : kps.points) {
            Vec2 px = project_point(x, p.pose, cam);
            if (noise_px > 0.0) px += Vec2(rng.normal(0.0, noise_px), rng.normal(0.0, noise_px));
            p.pixels.push_back(px);
            p.input.push_back(float(px.x() / cam.width));
            p.input.push_back(float(px.y() / cam.height));
        }
        out.push_back(std::move(p));
    }
    return out;
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    auto rng = RngStream(seed, "shuffle").substream("epoch", std::uint64_t(epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    return idx;
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw EmptyInput("median of nothing");
    const std::size_t m = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + std::ptrdiff_t(m), v.end());
    double hi = v[m];
    if (v.size() % 2 == 1) return hi;
    return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + std::ptrdiff_t(m)));
}

/// Geodesic error of a 6D prediction; degenerate outputs count as pi.
inline double rot6d_error(const float* six, const Mat3& R_gt) {
    Rot6D r;
    for (int k = 0; k < 6; ++k) r[k] = double(six[k]);
    try {
        return geodesic_distance(rot6d_to_matrix(r), R_gt);
    } catch (const DegenerateInput&) {
        return M_PI;
    }
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Learning rate for the given optimizer step. With `cosine` the rate decays
/// from `lr` to `lr * floor` over `total_steps`; otherwise it is constant.
inline double scheduled_lr(double lr, bool cosine, double floor, std::uint64_t step, std::uint64_t total_steps) {
    if (!cosine || total_steps == 0) return lr;
    const double f = std::min(1.0, double(step) / double(total_steps));
    return lr * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(M_PI * f)));
}

inline std::uint64_t steps_per_epoch(std::size_t n, int batch) { return (n + std::size_t(batch) - 1) / std::size_t(batch); }

// ---------------------------------------------------------------------------
// Rotation estimator

enum class RotLossKind { PointMatch, SixDL1 };

struct RotEstTrainConfig {
    int epochs = 30;
    int batch = 64;
    double lr = 2e-4;
    double weight_decay = 1e-4;
    double clip_norm = 0.1;
    std::uint64_t seed = 0;
    RotLossKind loss = RotLossKind::PointMatch;
    bool cosine = false;     // decay the rate over the whole run
    double lr_floor = 0.0;   // final rate as a fraction of lr

    json to_json() const {
        return {{"epochs", epochs}, {"batch", batch}, {"lr", lr}, {"weight_decay", weight_decay},
                {"clip_norm", clip_norm}, {"seed", seed},
                {"loss", loss == RotLossKind::PointMatch ? "points" : "sixd"}, {"cosine", cosine},
                {"lr_floor", lr_floor}};
    }
    void validate() const {
        if (epochs < 0 || batch <= 0) throw InvalidArgument("epochs must be >= 0 and batch > 0");
        if (!(lr > 0.0)) throw InvalidArgument("learning rate must be positive");
        if (!(lr_floor >= 0.0 && lr_floor <= 1.0)) throw InvalidArgument("lr_floor must be in [0, 1]");
    }
};

struct RotEstEpoch {
    int epoch = 0;
    std::uint64_t step = 0;
    double train_loss = 0.0;
    double val_median_deg = 0.0;
    double val_mean_deg = 0.0;
    double seconds = 0.0;
};

struct RotEstModel {
    nn::ParamStore<float> params;
    models::RotEst<float> net;
    optim::OptimizerState<float> opt;
    int epoch = 0;

    RotEstModel(const models::RotEstConfig& cfg, std::uint64_t seed) {
        RngStream init(seed, "init");
        net = models::RotEst<float>(params, "rotest", cfg, init);
    }
    RotEstModel(const RotEstModel&) = delete;
    RotEstModel& operator=(const RotEstModel&) = delete;

    /// Eval-mode 6D outputs [n, 6] for a set of pairs.
    std::vector<float> predict(const std::vector<KeypointPair>& pairs) const {
        ad::NoGradGuard ng;
        const std::size_t w = std::size_t(net.config.input_dim);
        std::vector<float> out;
        const std::size_t chunk = 512;
        for (std::size_t s = 0; s < pairs.size(); s += chunk) {
            const std::size_t e = std::min(pairs.size(), s + chunk);
            std::vector<float> x;
            x.reserve((e - s) * w);
            for (std::size_t i = s; i < e; ++i) {
                if (pairs[i].input.size() != w) throw ShapeMismatch("keypoint pair width differs from the model");
                x.insert(x.end(), pairs[i].input.begin(), pairs[i].input.end());
            }
            const auto y = net(Tensor<float>::constant(e - s, w, std::move(x)));
            out.insert(out.end(), y.value().begin(), y.value().end());
        }
        return out;
    }

    std::vector<double> errors(const std::vector<KeypointPair>& pairs) const {
        const auto y = predict(pairs);
        std::vector<double> err;
        for (std::size_t i = 0; i < pairs.size(); ++i) err.push_back(rot6d_error(y.data() + 6 * i, pairs[i].pose.R));
        return err;
    }
};

/// Cloud on the surface of the unit cube, used by the point-matching loss.
inline PointCloud unit_cube_cloud() { return cuboid_surface_points(Cuboid{Vec3::Zero(), Vec3::Constant(0.5)}); }

/// Supervised training until `cfg.epochs` epochs are complete (continuing
/// from `m.epoch`). Held-out median geodesic error is logged every epoch.
inline std::vector<RotEstEpoch> train_rotest(RotEstModel& m, const std::vector<KeypointPair>& train,
                                             const std::vector<KeypointPair>& val, const RotEstTrainConfig& cfg,
                                             const std::function<void(const RotEstEpoch&)>& on_epoch = {}) {
    cfg.validate();
    if (train.empty()) throw EmptyInput("no training pairs");
    m.opt.config.lr = cfg.lr;
    m.opt.config.weight_decay = cfg.weight_decay;
    m.opt.config.clip_norm = cfg.clip_norm;
    if (m.opt.first_moment.size() != m.params.size()) m.opt.init(m.params);
    const auto cloud = unit_cube_cloud();
    const auto P = losses::rotation_point_matrix<float>(cloud);
    const std::size_t w = std::size_t(m.net.config.input_dim);
    const std::uint64_t total_steps = steps_per_epoch(train.size(), cfg.batch) * std::uint64_t(cfg.epochs);
    std::vector<RotEstEpoch> log;
    while (m.epoch < cfg.epochs) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto order = epoch_order(train.size(), cfg.seed, m.epoch);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t s = 0; s < order.size(); s += std::size_t(cfg.batch)) {
            const std::size_t e = std::min(order.size(), s + std::size_t(cfg.batch));
            std::vector<float> x;
            std::vector<Mat3> Rs;
            std::vector<float> six;
            for (std::size_t i = s; i < e; ++i) {
                const auto& p = train[order[i]];
                if (p.input.size() != w) throw ShapeMismatch("keypoint pair width differs from the model");
                x.insert(x.end(), p.input.begin(), p.input.end());
                Rs.push_back(p.pose.R);
                const Rot6D r = matrix_to_rot6d(p.pose.R);
                for (int k = 0; k < 6; ++k) six.push_back(float(r[k]));
            }
            auto drop = RngStream(cfg.seed, "dropout").substream("step", m.opt.step);
            m.opt.config.lr = scheduled_lr(cfg.lr, cfg.cosine, cfg.lr_floor, m.opt.step, total_steps);
            const std::size_t n = e - s;
            auto y = m.net(Tensor<float>::constant(n, w, std::move(x)), true, &drop);
            Tensor<float> loss;
            if (cfg.loss == RotLossKind::PointMatch)
                loss = losses::rot_loss_batch(Rs, losses::rot6d_to_matrix(y), cloud, P);
            else
                loss = ad::scale(ad::l1(y - Tensor<float>::constant(n, 6, std::move(six))), 1.0f / float(n));
            m.params.zero_grad();
            ad::backward(loss);
            optim::clip_and_step(m.opt, m.params);
            loss_sum += double(loss.item());
            ++batches;
        }
        RotEstEpoch ep;
        ep.epoch = ++m.epoch;
        ep.step = m.opt.step;
        ep.train_loss = loss_sum / double(batches);
        if (!val.empty()) {
            const auto err = m.errors(val);
            ep.val_median_deg = median(err) * 180.0 / M_PI;
            ep.val_mean_deg = std::accumulate(err.begin(), err.end(), 0.0) / double(err.size()) * 180.0 / M_PI;
        }
        ep.seconds = seconds_since(t0);
        log.push_back(ep);
        if (on_epoch) on_epoch(ep);
    }
    return log;
}

// ---------------------------------------------------------------------------
// Toy set-prediction transformer

struct ToyTrainConfig {
    int epochs = 40;
    int batch = 8;
    double lr = 2e-4;
    double weight_decay = 1e-4;
    double clip_norm = 0.1;
    std::uint64_t seed = 0;
    bool cosine = false;
    double lr_floor = 0.0;
    losses::LossWeights weights;

    json to_json() const {
        return {{"epochs", epochs}, {"batch", batch}, {"lr", lr}, {"weight_decay", weight_decay},
                {"clip_norm", clip_norm}, {"seed", seed}, {"cosine", cosine}, {"lr_floor", lr_floor},
                {"weights",
                 {{"gamma", weights.gamma}, {"delta", weights.delta}, {"class_null_weight", weights.class_null_weight},
                  {"box_l1", weights.box_l1}, {"box_giou", weights.box_giou}, {"pose_weight", weights.pose_weight}}}};
    }
    void validate() const {
        if (epochs < 0 || batch <= 0) throw InvalidArgument("epochs must be >= 0 and batch > 0");
        if (!(lr > 0.0)) throw InvalidArgument("learning rate must be positive");
        if (!(lr_floor >= 0.0 && lr_floor <= 1.0)) throw InvalidArgument("lr_floor must be in [0, 1]");
        weights.validate();
    }
};

struct ToyEval {
    std::size_t objects = 0;
    double class_accuracy = 0.0;  // matched queries whose argmax (incl. no-object) is the true class
    double keypoint_l1 = 0.0;     // mean over matched objects of per-point |dx| + |dy|, normalized units
    double rot_median_deg = 0.0;  // rotation head on predicted keypoints; 0 without a head
    double null_accuracy = 0.0;   // unmatched queries predicting no-object
};

struct ToyEpoch {
    int epoch = 0;
    std::uint64_t step = 0;
    double loss = 0.0, class_loss = 0.0, box_loss = 0.0, keypoint_loss = 0.0, pose_loss = 0.0;
    ToyEval val;
    double seconds = 0.0;
};

struct ToyModel {
    models::ToyTransformer<float> net;
    optim::OptimizerState<float> opt;
    int epoch = 0;

    ToyModel(const models::ToyTransformerConfig& cfg, std::uint64_t seed) : net(cfg, seed) {}
};

/// Model clouds per class for the pose term (1.5K-point subsample).
inline losses::ClassModels class_models(int classes) {
    losses::ClassModels m;
    for (int c = 0; c < classes; ++c) m.points.push_back(subsample_model(cuboid_surface_points(class_cuboid(c)), 1500));
    return m;
}

inline std::vector<losses::SampleTargets> sample_targets(const std::vector<const SyntheticSample*>& batch) {
    std::vector<losses::SampleTargets> out;
    for (const auto* s : batch) out.push_back({s->targets, s->camera});
    return out;
}

inline ToyEval evaluate_toy(const models::ToyTransformer<float>& net, const std::vector<SyntheticSample>& data,
                            std::size_t chunk = 32) {
    ad::NoGradGuard ng;
    ToyEval ev;
    std::size_t correct = 0, null_total = 0, null_correct = 0;
    double l1_sum = 0.0;
    std::vector<double> rot_err;
    const int C = net.config.classes;
    for (std::size_t s = 0; s < data.size(); s += chunk) {
        const std::size_t e = std::min(data.size(), s + chunk);
        std::vector<const std::vector<float>*> rasters;
        for (std::size_t i = s; i < e; ++i) rasters.push_back(&data[i].raster);
        const auto out = net.forward(rasters);
        const auto preds = models::to_predictions(out);
        std::vector<std::size_t> rows;
        std::vector<Mat3> gts;
        for (std::size_t b = 0; b < preds.size(); ++b) {
            const auto& targets = data[s + b].targets;
            const auto asg = match_sets(preds[b], targets);
            std::vector<bool> used(preds[b].size(), false);
            for (std::size_t t = 0; t < targets.size(); ++t) {
                const int q = asg.target_to_pred[t];
                if (q < 0) continue;
                used[std::size_t(q)] = true;
                const auto& p = preds[b][std::size_t(q)];
                const auto best = std::max_element(p.class_logits.begin(), p.class_logits.end()) - p.class_logits.begin();
                correct += best == targets[t].class_id;
                const auto& kp = targets[t].keypoints.points;
                if (kp.size() != p.keypoints.points.size()) throw ShapeMismatch("keypoint count differs from the model");
                double l1 = 0.0;
                for (std::size_t k = 0; k < kp.size(); ++k) l1 += (kp[k] - p.keypoints.points[k]).cwiseAbs().sum();
                l1_sum += l1 / double(kp.size());
                ++ev.objects;
                rows.push_back(b * out.queries + std::size_t(q));
                gts.push_back(targets[t].pose.R);
            }
            for (std::size_t q = 0; q < used.size(); ++q) {
                if (used[q]) continue;
                const auto& lg = preds[b][q].class_logits;
                ++null_total;
                null_correct += std::max_element(lg.begin(), lg.end()) - lg.begin() == C;
            }
        }
        if (net.config.rotation_head && !rows.empty()) {
            const auto six = net.rotest(ad::gather_rows(out.keypoints, rows));
            for (std::size_t i = 0; i < rows.size(); ++i) rot_err.push_back(rot6d_error(six.value().data() + 6 * i, gts[i]));
        }
    }
    if (ev.objects > 0) {
        ev.class_accuracy = double(correct) / double(ev.objects);
        ev.keypoint_l1 = l1_sum / double(ev.objects);
    }
    if (!rot_err.empty()) ev.rot_median_deg = median(rot_err) * 180.0 / M_PI;
    if (null_total > 0) ev.null_accuracy = double(null_correct) / double(null_total);
    return ev;
}

/// A query whose argmax is a real class.
struct ToyDetection {
    std::size_t sample = 0;
    int class_id = 0;
    double score = 0.0;         // softmax probability of the class
    std::vector<Vec2> pixels;   // keypoints in pixels
    Pose pose;
    bool has_pose = false;
};

/// Eval-mode detections. R comes from the rotation head on the predicted
/// keypoints (or EPnP against the class IBB points without a head); t is
/// the decoded translation head.
inline std::vector<ToyDetection> predict_toy(const models::ToyTransformer<float>& net,
                                             const std::vector<SyntheticSample>& data, std::size_t chunk = 32) {
    ad::NoGradGuard ng;
    std::vector<ToyDetection> out;
    const int C = net.config.classes;
    for (std::size_t s = 0; s < data.size(); s += chunk) {
        const std::size_t e = std::min(data.size(), s + chunk);
        std::vector<const std::vector<float>*> rasters;
        for (std::size_t i = s; i < e; ++i) rasters.push_back(&data[i].raster);
        const auto o = net.forward(rasters);
        const auto preds = models::to_predictions(o);
        std::vector<std::size_t> rows;
        std::vector<std::size_t> idx;
        for (std::size_t b = 0; b < preds.size(); ++b) {
            const auto& cam = data[s + b].camera;
            for (std::size_t q = 0; q < preds[b].size(); ++q) {
                const auto& p = preds[b][q];
                const auto best = int(std::max_element(p.class_logits.begin(), p.class_logits.end()) -
                                      p.class_logits.begin());
                if (best == C) continue;
                ToyDetection d;
                d.sample = s + b;
                d.class_id = best;
                d.score = softmax(p.class_logits)[std::size_t(best)];
                for (const auto& k : p.keypoints.points) d.pixels.emplace_back(k.x() * cam.width, k.y() * cam.height);
                try {
                    d.pose.t = decode_translation(p.translation, cam);
                    d.has_pose = true;
                } catch (const Error&) {
                }
                rows.push_back(b * o.queries + q);
                idx.push_back(out.size());
                out.push_back(std::move(d));
            }
        }
        if (rows.empty()) continue;
        if (net.config.rotation_head) {
            const auto six = net.rotest(ad::gather_rows(o.keypoints, rows), false, nullptr);
            for (std::size_t i = 0; i < rows.size(); ++i) {
                auto& d = out[idx[i]];
                try {
                    Rot6D r;
                    for (int k = 0; k < 6; ++k) r[k] = double(six(i, std::size_t(k)));
                    d.pose.R = rot6d_to_matrix(r);
                } catch (const Error&) {
                    d.has_pose = false;
                }
            }
        } else {
            for (std::size_t i = 0; i < rows.size(); ++i) {
                auto& d = out[idx[i]];
                try {
                    Correspondences c{generate_ibb(class_cuboid(d.class_id)).points, d.pixels};
                    d.pose.R = epnp(c, data[d.sample].camera).R;
                } catch (const Error&) {
                    d.has_pose = false;
                }
            }
        }
    }
    return out;
}

/// Full loop: forward, matching, set loss, backward, clipped AdamW step.
/// Continues from `m.epoch` until `cfg.epochs` epochs are complete.
inline std::vector<ToyEpoch> train_toy(ToyModel& m, const std::vector<SyntheticSample>& train,
                                       const std::vector<SyntheticSample>& val, const ToyTrainConfig& cfg,
                                       const std::function<void(const ToyEpoch&)>& on_epoch = {}) {
    cfg.validate();
    if (train.empty()) throw EmptyInput("no training scenes");
    auto& net = m.net;
    m.opt.config.lr = cfg.lr;
    m.opt.config.weight_decay = cfg.weight_decay;
    m.opt.config.clip_norm = cfg.clip_norm;
    if (m.opt.first_moment.size() != net.params.size()) m.opt.init(net.params);
    const auto models = class_models(net.config.classes);
    const std::uint64_t total_steps = steps_per_epoch(train.size(), cfg.batch) * std::uint64_t(cfg.epochs);
    std::vector<ToyEpoch> log;
    while (m.epoch < cfg.epochs) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto order = epoch_order(train.size(), cfg.seed, m.epoch);
        ToyEpoch ep;
        std::size_t batches = 0;
        for (std::size_t s = 0; s < order.size(); s += std::size_t(cfg.batch)) {
            const std::size_t e = std::min(order.size(), s + std::size_t(cfg.batch));
            std::vector<const SyntheticSample*> batch;
            std::vector<const std::vector<float>*> rasters;
            for (std::size_t i = s; i < e; ++i) {
                batch.push_back(&train[order[i]]);
                rasters.push_back(&train[order[i]].raster);
            }
            auto drop = RngStream(cfg.seed, "dropout").substream("step", m.opt.step);
            m.opt.config.lr = scheduled_lr(cfg.lr, cfg.cosine, cfg.lr_floor, m.opt.step, total_steps);
            const auto out = net.forward(rasters);
            const auto preds = models::to_predictions(out);
            std::vector<Assignment> asg;
            for (std::size_t b = 0; b < batch.size(); ++b) asg.push_back(match_sets(preds[b], batch[b]->targets));
            const auto targets = sample_targets(batch);
            const auto res = losses::hungarian_loss(out, targets, asg, cfg.weights, &models,
                                                    net.rotation_head(true, &drop));
            net.params.zero_grad();
            ad::backward(res.total);
            optim::clip_and_step(m.opt, net.params);
            ep.loss += res.total_value;
            ep.class_loss += res.class_loss;
            ep.box_loss += res.box_loss;
            ep.keypoint_loss += res.keypoint_loss;
            ep.pose_loss += res.pose_loss;
            ++batches;
        }
        for (double* v : {&ep.loss, &ep.class_loss, &ep.box_loss, &ep.keypoint_loss, &ep.pose_loss})
            *v /= double(batches);
        ep.epoch = ++m.epoch;
        ep.step = m.opt.step;
        if (!val.empty()) ep.val = evaluate_toy(net, val);
        ep.seconds = seconds_since(t0);
        log.push_back(ep);
        if (on_epoch) on_epoch(ep);
    }
    return log;
}

}  // namespace setpose::train
