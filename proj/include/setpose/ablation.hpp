#pragma once

#include <array>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "setpose/metrics.hpp"
#include "setpose/pnp.hpp"
#include "setpose/synthetic.hpp"
#include "setpose/training.hpp"

// Keypoint representation x pose recovery grid on synthetic keypoints.
// Every representation sees the same poses and the same per-coordinate
// Gaussian pixel noise, so differences come from the representation and the
// solver alone.
namespace setpose::ablation {

using nlohmann::json;
using ad::Tensor;

inline constexpr std::array<KeypointRep, 3> kReps{KeypointRep::BB8, KeypointRep::FPS8, KeypointRep::IBB32};
inline constexpr std::array<const char*, 3> kMethods{"EPnP", "EPnP-R+head-t", "RotEst-R+head-t"};

inline const char* rep_name(KeypointRep r) {
    switch (r) {
        case KeypointRep::BB8: return "BB8";
        case KeypointRep::FPS8: return "FPS8";
        case KeypointRep::IBB32: return "IBB32";
    }
    return "?";
}

struct AblationConfig {
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    int classes = 5;
    std::size_t train_instances = 20000;
    std::size_t test_instances = 500;
    double noise_px = 10.0;  // about the per-point error of a 0.03 normalized L1
    double z_min = 0.5, z_max = 2.0;
    std::size_t model_points = 500;  // metric cloud per class
    models::RotEstConfig rotest = models::RotEstConfig::toy();
    train::RotEstTrainConfig rotest_train;
    bool class_conditioned = true;  // nets see the detected class
    int head_hidden = 128;
    int head_layers = 4;
    train::RotEstTrainConfig head_train;  // reused for its optimizer and epoch fields

    AblationConfig() {
        rotest.dropout = 0.0;
        rotest_train.epochs = 25;
        rotest_train.lr = 1e-3;
        rotest_train.cosine = true;
        head_train = rotest_train;
    }

    void validate() const {
        if (seeds.empty()) throw InvalidArgument("ablation needs at least one seed");
        if (classes < 1) throw InvalidArgument("ablation needs at least one class");
        if (train_instances == 0 || test_instances == 0) throw InvalidArgument("instance counts must be positive");
        if (!(noise_px >= 0.0)) throw InvalidArgument("noise must be non-negative");
        if (!(z_min > 0.0 && z_max >= z_min)) throw InvalidArgument("depth range must be positive and ordered");
        if (head_hidden < 1 || head_layers < 2) throw InvalidArgument("translation head needs width >= 1 and 2+ layers");
        rotest_train.validate();
        head_train.validate();
    }

    json to_json() const {
        return {{"seeds", seeds},
                {"classes", classes},
                {"train_instances", train_instances},
                {"test_instances", test_instances},
                {"noise_px", noise_px},
                {"z_min", z_min},
                {"z_max", z_max},
                {"model_points", model_points},
                {"rotest", rotest.to_json()},
                {"rotest_train", rotest_train.to_json()},
                {"class_conditioned", class_conditioned},
                {"head_hidden", head_hidden},
                {"head_layers", head_layers},
                {"head_train", head_train.to_json()}};
    }
};

/// One posed object seen through every representation.
struct Instance {
    int class_id = 0;
    Pose pose;
    std::array<std::vector<Vec2>, 3> pixels;  // noisy, indexed like kReps
};

struct ClassGeometry {
    std::array<KeypointSet3D, 3> keypoints;
    PointCloud model;
    double diameter = 0.0;
};

inline std::vector<ClassGeometry> class_geometry(const AblationConfig& cfg) {
    std::vector<ClassGeometry> out;
    for (int c = 0; c < cfg.classes; ++c) {
        ClassGeometry g;
        const auto surface = cuboid_surface_points(class_cuboid(c));
        g.keypoints[0] = generate_bb8(class_cuboid(c));
        g.keypoints[1] = generate_fps8(surface);
        g.keypoints[2] = generate_ibb(class_cuboid(c));
        g.model = subsample_model(surface, cfg.model_points);
        g.diameter = model_diameter(g.keypoints[0].points);
        out.push_back(std::move(g));
    }
    return out;
}

/// Instances for one split. Classes cycle; the pose keeps every IBB point
/// (hence every cuboid point) inside the image.
inline std::vector<Instance> make_instances(std::uint64_t seed, const std::string& split, std::size_t count,
                                            const std::vector<ClassGeometry>& geo, const AblationConfig& cfg) {
    const auto cam = synthetic_camera();
    std::vector<Instance> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        auto rng = RngStream(seed, "ablation-" + split).substream("instance", i);
        Instance in;
        in.class_id = int(i % geo.size());
        const auto& g = geo[std::size_t(in.class_id)];
        in.pose = train::sample_visible_pose(rng, g.keypoints[2].points, cam, cfg.z_min, cfg.z_max);
        for (std::size_t r = 0; r < kReps.size(); ++r) {
            auto noise = rng.substream(rep_name(kReps[r]), 0);
            for (const auto& x : g.keypoints[r].points)
                in.pixels[r].push_back(project_point(x, in.pose, cam) +
                                       Vec2(noise.normal(0.0, cfg.noise_px), noise.normal(0.0, cfg.noise_px)));
        }
        out.push_back(std::move(in));
    }
    return out;
}

/// Network inputs: normalized keypoints, then a one-hot class code when
/// `classes` > 0 (object size sets depth, so a class-blind head is ambiguous).
inline std::vector<train::KeypointPair> to_pairs(const std::vector<Instance>& data, std::size_t rep, int classes = 0) {
    const auto cam = synthetic_camera();
    std::vector<train::KeypointPair> out;
    out.reserve(data.size());
    for (const auto& in : data) {
        train::KeypointPair p;
        p.pose = in.pose;
        p.pixels = in.pixels[rep];
        for (const auto& px : p.pixels) {
            p.input.push_back(float(px.x() / cam.width));
            p.input.push_back(float(px.y() / cam.height));
        }
        for (int c = 0; c < classes; ++c) p.input.push_back(c == in.class_id ? 1.0f : 0.0f);
        out.push_back(std::move(p));
    }
    return out;
}

/// Translation head: an MLP from keypoints to (u, v, log z). Its input is
/// the keypoint centroid, the log RMS radius and the keypoints centered and
/// scaled by that radius (depth is then close to linear in the input), plus
/// any class code carried by the pair.
struct TranslationHead {
    nn::ParamStore<float> params;
    nn::Mlp<float> mlp;
    optim::OptimizerState<float> opt;
    int epoch = 0;

    TranslationHead(std::size_t inputs, int hidden, int layers, std::uint64_t seed) {
        RngStream init(seed, "head-t");
        std::vector<std::size_t> widths{inputs + 3};
        for (int i = 0; i + 1 < layers; ++i) widths.push_back(std::size_t(hidden));
        widths.push_back(3);
        mlp = nn::Mlp<float>(params, "head_t", widths, init);
    }
    TranslationHead(const TranslationHead&) = delete;
    TranslationHead& operator=(const TranslationHead&) = delete;

    static std::array<float, 3> target(const Pose& p) {
        const auto c = encode_translation(p.t, synthetic_camera());
        return {float(c.u_norm), float(c.v_norm), float(std::log(c.tz))};
    }

    static void features(const train::KeypointPair& p, std::vector<float>& x) {
        const auto cam = synthetic_camera();
        Vec2 c = Vec2::Zero();
        for (const auto& px : p.pixels) c += px;
        c /= double(p.pixels.size());
        double r2 = 0.0;
        for (const auto& px : p.pixels) r2 += (px - c).squaredNorm();
        const double r = std::max(std::sqrt(r2 / double(p.pixels.size())), 1e-3);
        x.push_back(float(c.x() / cam.width));
        x.push_back(float(c.y() / cam.height));
        x.push_back(float(std::log(r / cam.width)));
        for (const auto& px : p.pixels) {
            x.push_back(float((px.x() - c.x()) / r));
            x.push_back(float((px.y() - c.y()) / r));
        }
        x.insert(x.end(), p.input.begin() + long(2 * p.pixels.size()), p.input.end());
    }

    std::vector<Vec3> predict(const std::vector<train::KeypointPair>& pairs) const {
        ad::NoGradGuard ng;
        const std::size_t w = pairs.empty() ? 0 : pairs[0].input.size() + 3;
        std::vector<float> x;
        for (const auto& p : pairs) features(p, x);
        const auto y = mlp(Tensor<float>::constant(pairs.size(), w, std::move(x)));
        std::vector<Vec3> out;
        for (std::size_t i = 0; i < pairs.size(); ++i)
            out.push_back(decode_translation({double(y(i, 0)), double(y(i, 1)), std::exp(double(y(i, 2)))}, synthetic_camera()));
        return out;
    }
};

inline void train_head(TranslationHead& h, const std::vector<train::KeypointPair>& data,
                       const train::RotEstTrainConfig& cfg) {
    cfg.validate();
    if (data.empty()) throw EmptyInput("no training pairs for the translation head");
    h.opt.config.weight_decay = cfg.weight_decay;
    h.opt.config.clip_norm = cfg.clip_norm;
    if (h.opt.first_moment.size() != h.params.size()) h.opt.init(h.params);
    const std::size_t w = data[0].input.size() + 3;
    const std::uint64_t total = train::steps_per_epoch(data.size(), cfg.batch) * std::uint64_t(cfg.epochs);
    while (h.epoch < cfg.epochs) {
        const auto order = train::epoch_order(data.size(), cfg.seed, h.epoch);
        for (std::size_t s = 0; s < order.size(); s += std::size_t(cfg.batch)) {
            const std::size_t e = std::min(order.size(), s + std::size_t(cfg.batch));
            std::vector<float> x, y;
            for (std::size_t i = s; i < e; ++i) {
                const auto& p = data[order[i]];
                TranslationHead::features(p, x);
                const auto t = TranslationHead::target(p.pose);
                y.insert(y.end(), t.begin(), t.end());
            }
            const std::size_t n = e - s;
            h.opt.config.lr = train::scheduled_lr(cfg.lr, cfg.cosine, cfg.lr_floor, h.opt.step, total);
            const auto out = h.mlp(Tensor<float>::constant(n, w, std::move(x)));
            const auto loss = ad::scale(ad::l1(out - Tensor<float>::constant(n, 3, std::move(y))), 1.0f / float(n));
            h.params.zero_grad();
            ad::backward(loss);
            optim::clip_and_step(h.opt, h.params);
        }
        ++h.epoch;
    }
}

/// Mean metrics of one grid cell; `rot_median_deg` is diagnostic.
struct Cell {
    double auc_add_s = 0.0;
    double ar_add_s_01d = 0.0;
    double rot_median_deg = 0.0;
    double trans_median_m = 0.0;
    std::size_t failures = 0;  // solver gave no pose
};

struct SeedResult {
    std::uint64_t seed = 0;
    std::array<std::array<Cell, 3>, 3> cells;  // [rep][method]
    double seconds = 0.0;
};

struct AblationResult {
    std::vector<SeedResult> seeds;
    std::array<std::array<Cell, 3>, 3> mean;
};

inline Cell score(const std::vector<Instance>& test, const std::vector<Pose>& est, const std::vector<bool>& ok,
                  const std::vector<ClassGeometry>& geo) {
    std::vector<EvalRecord> recs;
    std::map<int, PointCloud> models;
    std::vector<double> rot, trans;
    Cell c;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const auto& g = geo[std::size_t(test[i].class_id)];
        models.emplace(test[i].class_id, g.model);
        EvalRecord r;
        r.im_id = int(i);
        r.obj_id = test[i].class_id;
        r.gt = test[i].pose;
        r.estimate = est[i];
        r.has_estimate = ok[i];
        r.diameter = g.diameter;
        recs.push_back(r);
        if (ok[i]) {
            rot.push_back(geodesic_distance(est[i].R, test[i].pose.R) * 180.0 / M_PI);
            trans.push_back((est[i].t - test[i].pose.t).norm());
        } else {
            ++c.failures;
        }
    }
    // Keypoints are labeled, so the ordering fixes any box symmetry: plain ADD.
    const auto rep = evaluate(recs, models, {});
    c.auc_add_s = rep.mean.auc_add_s;
    c.ar_add_s_01d = rep.mean.ar_add_s_01d;
    if (!rot.empty()) {
        c.rot_median_deg = train::median(rot);
        c.trans_median_m = train::median(trans);
    }
    return c;
}

inline SeedResult run_seed(std::uint64_t seed, const AblationConfig& cfg,
                           const std::function<void(const std::string&)>& log = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto cam = synthetic_camera();
    const auto geo = class_geometry(cfg);
    const auto train_set = make_instances(seed, "train", cfg.train_instances, geo, cfg);
    const auto test_set = make_instances(seed, "test", cfg.test_instances, geo, cfg);
    SeedResult res;
    res.seed = seed;
    for (std::size_t r = 0; r < kReps.size(); ++r) {
        const int code = cfg.class_conditioned ? cfg.classes : 0;
        const auto tr = to_pairs(train_set, r, code);
        const auto te = to_pairs(test_set, r, code);
        const std::size_t inputs = tr[0].input.size();

        auto rcfg = cfg.rotest;
        rcfg.input_dim = int(inputs);
        train::RotEstModel rot(rcfg, seed);
        auto rtc = cfg.rotest_train;
        rtc.seed = seed;
        train::train_rotest(rot, tr, {}, rtc);
        TranslationHead head(inputs, cfg.head_hidden, cfg.head_layers, seed);
        auto htc = cfg.head_train;
        htc.seed = seed;
        train_head(head, tr, htc);

        const auto t_head = head.predict(te);
        const auto six = rot.predict(te);
        const std::size_t n = te.size();
        std::vector<Pose> epnp_pose(n), epnp_r(n), learned(n);
        std::vector<bool> epnp_ok(n, true), learned_ok(n, true);
        for (std::size_t i = 0; i < n; ++i) {
            Correspondences c;
            c.object = geo[std::size_t(test_set[i].class_id)].keypoints[r].points;
            c.image = te[i].pixels;
            try {
                epnp_pose[i] = epnp(c, cam);
            } catch (const Error&) {
                epnp_ok[i] = false;
            }
            epnp_r[i] = {epnp_pose[i].R, t_head[i]};
            try {
                Rot6D r6;
                for (int k = 0; k < 6; ++k) r6[k] = double(six[6 * i + std::size_t(k)]);
                learned[i] = {rot6d_to_matrix(r6), t_head[i]};
            } catch (const DegenerateInput&) {
                learned_ok[i] = false;
            }
        }
        res.cells[r][0] = score(test_set, epnp_pose, epnp_ok, geo);
        res.cells[r][1] = score(test_set, epnp_r, epnp_ok, geo);
        res.cells[r][2] = score(test_set, learned, learned_ok, geo);
        if (log) {
            std::ostringstream os;
            os << "seed " << seed << " " << rep_name(kReps[r]);
            for (std::size_t m = 0; m < 3; ++m)
                os << "  " << kMethods[m] << " auc " << res.cells[r][m].auc_add_s << " rot "
                   << res.cells[r][m].rot_median_deg;
            log(os.str());
        }
    }
    res.seconds = train::seconds_since(t0);
    return res;
}

inline AblationResult run_ablation(const AblationConfig& cfg,
                                   const std::function<void(const std::string&)>& log = {}) {
    cfg.validate();
    AblationResult out;
    for (auto s : cfg.seeds) out.seeds.push_back(run_seed(s, cfg, log));
    const double k = double(out.seeds.size());
    for (const auto& s : out.seeds)
        for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t m = 0; m < 3; ++m) {
                auto& c = out.mean[r][m];
                const auto& x = s.cells[r][m];
                c.auc_add_s += x.auc_add_s / k;
                c.ar_add_s_01d += x.ar_add_s_01d / k;
                c.rot_median_deg += x.rot_median_deg / k;
                c.trans_median_m += x.trans_median_m / k;
                c.failures += x.failures;
            }
    return out;
}

/// Table-shaped CSV: one row per (representation, method), seed means.
inline std::string table_csv(const AblationResult& res) {
    std::ostringstream os;
    os.precision(6);
    os << "keypoints,method,add_s_recall_0.1d,auc_add_s,rot_median_deg,trans_median_m,failures,seeds\n";
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t m = 0; m < 3; ++m) {
            const auto& c = res.mean[r][m];
            os << rep_name(kReps[r]) << ',' << kMethods[m] << ',' << c.ar_add_s_01d << ',' << c.auc_add_s << ','
               << c.rot_median_deg << ',' << c.trans_median_m << ',' << c.failures << ',' << res.seeds.size() << '\n';
        }
    return os.str();
}

/// Long CSV with every seed's cells.
inline std::string seeds_csv(const AblationResult& res) {
    std::ostringstream os;
    os.precision(6);
    os << "seed,keypoints,method,add_s_recall_0.1d,auc_add_s,rot_median_deg,trans_median_m,failures\n";
    for (const auto& s : res.seeds)
        for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t m = 0; m < 3; ++m) {
                const auto& c = s.cells[r][m];
                os << s.seed << ',' << rep_name(kReps[r]) << ',' << kMethods[m] << ',' << c.ar_add_s_01d << ','
                   << c.auc_add_s << ',' << c.rot_median_deg << ',' << c.trans_median_m << ',' << c.failures << '\n';
            }
    return os.str();
}

}  // namespace setpose::ablation
