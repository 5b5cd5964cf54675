#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "setpose/ablation.hpp"
#include "setpose/checkpoint.hpp"
#include "setpose/gradcheck.hpp"
#include "setpose/keypoint_csv.hpp"
#include "setpose/report.hpp"
#include "setpose/training.hpp"

namespace fs = std::filesystem;
using namespace setpose;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr const char* kOutRootEnv = "SETPOSE_OUT_ROOT";

// Thrown for bad command lines found after CLI11 is done (exit 2).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

/// Removes `--config FILE` from args and appends `--key=value` for every
/// key in the file that the command line does not already set.
std::vector<std::string> expand_config(std::vector<std::string> args) {
    std::string path;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config") {
            if (i + 1 >= args.size()) throw UsageError("--config needs a file");
            path = args[i + 1];
            args.erase(args.begin() + long(i), args.begin() + long(i) + 2);
            break;
        }
        if (args[i].rfind("--config=", 0) == 0) {
            path = args[i].substr(9);
            args.erase(args.begin() + long(i));
            break;
        }
    }
    if (path.empty()) return args;
    std::set<std::string> given;
    for (const auto& a : args)
        if (a.rfind("--", 0) == 0) given.insert(a.substr(2, a.find('=') == std::string::npos ? std::string::npos : a.find('=') - 2));
    std::istringstream in(io::read_file(path));
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError(path + ":" + std::to_string(lineno) + ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw UsageError(path + ":" + std::to_string(lineno) + ": empty key");
        if (!given.count(key)) args.push_back("--" + key + "=" + trim(line.substr(eq + 1)));
    }
    return args;
}

/// Output directory plus the resolved-config echo every run carries.
fs::path prepare_run(const CLI::App& sub, const std::string& out) {
    fs::path dir = out;
    if (dir.empty()) {
        const char* root = std::getenv(kOutRootEnv);
        dir = fs::path(root && *root ? root : "runs") / sub.get_name();
    }
    fs::create_directories(dir);
    std::string echo = "# setpose " + std::string(kVersion) + " " + sub.get_name() + "\n";
    echo += sub.config_to_str(true, false);
    io::write_file_atomic(dir / "config.txt", echo);
    return dir;
}

std::string g(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

// Splits a dataset into (train, held-out) with the held-out tail.
std::pair<std::vector<SyntheticSample>, std::vector<SyntheticSample>> split(std::vector<SyntheticSample> all,
                                                                            double val_fraction) {
    const auto nval = std::size_t(std::llround(double(all.size()) * val_fraction));
    std::vector<SyntheticSample> val(all.end() - long(nval), all.end());
    all.resize(all.size() - nval);
    return {std::move(all), std::move(val)};
}

void write_models(const fs::path& dir, int classes) {
    std::map<int, PointCloud> m;
    for (int c = 0; c < classes; ++c) {
        const auto pc = cuboid_surface_points(class_cuboid(c));
        PointCloud mm = pc;
        for (auto& p : mm) p *= 1000.0;
        char name[32];
        std::snprintf(name, sizeof name, "obj_%06d.ply", c + 1);
        io::write_ply(dir / name, mm, true);
        m[c + 1] = pc;
    }
    io::write_model_info(dir / "models_info.json", m);
}

// ---------------------------------------------------------------------------
// gen-data

struct GenData {
    std::string out;
    std::uint64_t seed = 0;
    std::size_t samples = 100;
    int max_objects = 3;
    int classes = 5;

    void add(CLI::App& app) {
        auto* s = app.add_subcommand("gen-data", "Write a synthetic dataset (BOP layout plus rasters)");
        s->add_option("--out", out, "Output directory")->configurable(false);
        s->add_option("--seed", seed, "Dataset seed")->capture_default_str();
        s->add_option("--samples", samples, "Number of scenes")->capture_default_str();
        s->add_option("--max-objects", max_objects, "Objects per scene at most")->capture_default_str();
        s->add_option("--classes", classes, "Class count")->capture_default_str();
        s->callback([this, s] { run(*s); });
    }

    void run(const CLI::App& sub) {
        SyntheticConfig cfg;
        cfg.classes = classes;
        cfg.max_objects = max_objects;
        cfg.validate();
        const auto dir = prepare_run(sub, out);
        const auto ds = generate_dataset(seed, samples, cfg);
        io::write_dataset(dir, ds);
        std::size_t objects = 0;
        for (const auto& s : ds.samples) objects += s.targets.size();
        std::cout << "wrote " << samples << " scenes (" << objects << " objects) to " << dir.string() << "\n";
    }
};

// ---------------------------------------------------------------------------
// train-toy

struct TrainToy {
    std::string out, data, resume;
    std::size_t samples = 2000;
    double val_fraction = 0.1;
    train::ToyTrainConfig tc;
    models::ToyTransformerConfig mc;
    int classes = 5;
    int max_objects = 3;

    void add(CLI::App& app) {
        auto* s = app.add_subcommand("train-toy", "Train the set-prediction transformer");
        s->add_option("--out", out, "Output directory")->configurable(false);
        s->add_option("--data", data, "Dataset directory (generated in memory when absent)");
        s->add_option("--samples", samples, "Scenes to generate without --data")->capture_default_str();
        s->add_option("--max-objects", max_objects, "Objects per generated scene at most")->capture_default_str();
        s->add_option("--val-fraction", val_fraction, "Held-out tail of the dataset")
            ->check(CLI::Range(0.0, 0.9))
            ->capture_default_str();
        s->add_option("--seed", tc.seed, "Seed for init, data order, dropout and generated data")->capture_default_str();
        s->add_option("--epochs", tc.epochs, "Total epochs (a resumed run continues up to this)")->capture_default_str();
        s->add_option("--lr", tc.lr, "AdamW learning rate")->capture_default_str();
        s->add_option("--batch", tc.batch, "Scenes per step")->capture_default_str();
        s->add_option("--weight-decay", tc.weight_decay)->capture_default_str();
        s->add_option("--clip", tc.clip_norm, "Gradient norm clip")->capture_default_str();
        s->add_flag("--cosine", tc.cosine, "Cosine learning-rate decay over the run");
        s->add_option("--lr-floor", tc.lr_floor, "Final rate as a fraction of --lr")->capture_default_str();
        s->add_option("--gamma", tc.weights.gamma, "Keypoint L1 weight")->capture_default_str();
        s->add_option("--delta", tc.weights.delta, "Cross-ratio weight")->capture_default_str();
        s->add_option("--null-weight", tc.weights.class_null_weight, "No-object class weight")->capture_default_str();
        s->add_option("--box-l1", tc.weights.box_l1)->capture_default_str();
        s->add_option("--box-giou", tc.weights.box_giou)->capture_default_str();
        s->add_option("--pose-weight", tc.weights.pose_weight)->capture_default_str();
        s->add_option("--classes", classes, "Class count")->capture_default_str();
        s->add_option("--dim", mc.dim, "Embedding width")->capture_default_str();
        s->add_option("--encoder-layers", mc.encoder_layers)->capture_default_str();
        s->add_option("--decoder-layers", mc.decoder_layers)->capture_default_str();
        s->add_option("--heads", mc.heads)->capture_default_str();
        s->add_option("--queries", mc.queries, "Prediction set size")->capture_default_str();
        s->add_option("--patch", mc.patch)->capture_default_str();
        s->add_option("--head-hidden", mc.head_hidden)->capture_default_str();
        s->add_option("--ffn-hidden", mc.ffn_hidden)->capture_default_str();
        s->add_option("--hidden", mc.rotest.hidden, "Rotation head width")->capture_default_str();
        s->add_option("--rotation-head", mc.rotation_head, "Use the rotation head for the pose term")
            ->capture_default_str();
        s->add_option("--resume", resume, "Checkpoint to continue from");
        s->callback([this, s] { run(*s); });
    }

    void run(const CLI::App& sub) {
        mc.classes = classes;
        mc.validate();
        tc.validate();
        const auto dir = prepare_run(sub, out);
        SyntheticDataset ds;
        if (!data.empty()) {
            ds = io::load_dataset(data);
        } else {
            SyntheticConfig sc;
            sc.classes = classes;
            sc.max_objects = max_objects;
            sc.validate();
            ds = generate_dataset(tc.seed, samples, sc);
        }
        auto [tr, va] = split(std::move(ds.samples), val_fraction);
        if (tr.empty()) throw EmptyInput("no training scenes after the held-out split");

        std::unique_ptr<train::ToyModel> m;
        if (!resume.empty()) {
            const auto f = read_checkpoint(resume);
            const auto st = f.state();
            if (st.kind != "toy") throw ValidationError(resume + " is a " + st.kind + " checkpoint");
            m = std::make_unique<train::ToyModel>(models::ToyTransformerConfig::from_json(st.config), st.seed);
            restore_checkpoint(f, m->net.params, &m->opt);
            m->epoch = st.epoch;
            std::cout << "resumed at epoch " << st.epoch << ", step " << m->opt.step << "\n";
        } else {
            m = std::make_unique<train::ToyModel>(mc, tc.seed);
        }
        if (m->net.config.classes != ds.config.classes)
            throw ValidationError("model has " + std::to_string(m->net.config.classes) + " classes, data has " +
                                  std::to_string(ds.config.classes));
        io::write_file_atomic(dir / "model.json", m->net.config.to_json().dump(2) + "\n");

        std::ofstream csv(dir / "metrics.csv");
        csv << "epoch,step,loss,class_loss,box_loss,keypoint_loss,pose_loss,val_objects,val_class_accuracy,"
               "val_keypoint_l1,val_rot_median_deg,val_null_accuracy,seconds\n";
        train::train_toy(*m, tr, va, tc, [&](const train::ToyEpoch& e) {
            csv << e.epoch << ',' << e.step << ',' << g(e.loss) << ',' << g(e.class_loss) << ',' << g(e.box_loss) << ','
                << g(e.keypoint_loss) << ',' << g(e.pose_loss) << ',' << e.val.objects << ','
                << g(e.val.class_accuracy) << ',' << g(e.val.keypoint_l1) << ',' << g(e.val.rot_median_deg) << ','
                << g(e.val.null_accuracy) << ',' << g(e.seconds) << '\n'
                << std::flush;
            CheckpointState st{"toy", m->net.config.to_json(), tc.to_json(), m->opt.step, m->epoch, tc.seed};
            save_checkpoint(dir / "checkpoint.ckpt", st, m->net.params, &m->opt);
            std::printf("epoch %d step %llu loss %.4f | held-out acc %.3f kpL1 %.4f (%.1fs)\n", e.epoch,
                        (unsigned long long)e.step, e.loss, e.val.class_accuracy, e.val.keypoint_l1, e.seconds);
            std::fflush(stdout);
        });
        if (m->epoch == 0 || tc.epochs <= 0) {
            CheckpointState st{"toy", m->net.config.to_json(), tc.to_json(), m->opt.step, m->epoch, tc.seed};
            save_checkpoint(dir / "checkpoint.ckpt", st, m->net.params, &m->opt);
        }
        if (!va.empty()) export_heldout(dir, *m, va);
    }

    // Predictions on the held-out split as keypoint and pose CSVs, plus a
    // matching groundtruth scene and models so `eval` can score them.
    static void export_heldout(const fs::path& dir, const train::ToyModel& m, const std::vector<SyntheticSample>& va) {
        const auto dets = train::predict_toy(m.net, va);
        std::vector<io::KeypointDetection> kps;
        std::vector<PoseEstimate> est;
        for (const auto& d : dets) {
            kps.push_back({0, int(d.sample), d.class_id + 1, d.score, d.pixels});
            if (d.has_pose) est.push_back({0, int(d.sample), d.class_id + 1, d.score, d.pose, -1.0});
        }
        io::write_file_atomic(dir / "val_keypoints.csv", io::format_keypoints(kps));
        io::write_results(est, dir / "val_results.csv");
        io::SceneAnnotation scene;
        for (std::size_t i = 0; i < va.size(); ++i) {
            io::ImageAnnotation im;
            im.im_id = int(i);
            im.camera = va[i].camera;
            for (const auto& t : va[i].targets) im.objects.push_back({t.class_id + 1, t.pose});
            scene.images.push_back(std::move(im));
        }
        io::write_bop_scene(dir / "val_gt", scene);
        write_models(dir / "models", m.net.config.classes);
    }
};

// ---------------------------------------------------------------------------
// train-rotest

struct TrainRotEst {
    std::string out, data, resume, loss = "points";
    models::RotEstConfig mc;
    train::RotEstTrainConfig tc;
    std::size_t pairs = 20000, val_pairs = 2000;
    double noise_px = 1.0;
    int cls = 0;
    double val_fraction = 0.1;

    void add(CLI::App& app) {
        auto* s = app.add_subcommand("train-rotest", "Train the keypoint-to-rotation MLP");
        s->add_option("--out", out, "Output directory")->configurable(false);
        s->add_option("--data", data, "Dataset directory; pairs come from its annotated objects");
        s->add_option("--pairs", pairs, "Generated training pairs without --data")->capture_default_str();
        s->add_option("--val-pairs", val_pairs, "Generated held-out pairs without --data")->capture_default_str();
        s->add_option("--val-fraction", val_fraction, "Held-out tail of a --data dataset")
            ->check(CLI::Range(0.0, 0.9))
            ->capture_default_str();
        s->add_option("--noise-px", noise_px, "Gaussian keypoint noise in pixels")->capture_default_str();
        s->add_option("--class", cls, "Cuboid class for generated pairs")->capture_default_str();
        s->add_option("--seed", tc.seed)->capture_default_str();
        s->add_option("--epochs", tc.epochs)->capture_default_str();
        s->add_option("--lr", tc.lr)->capture_default_str();
        s->add_option("--batch", tc.batch)->capture_default_str();
        s->add_option("--weight-decay", tc.weight_decay)->capture_default_str();
        s->add_option("--clip", tc.clip_norm)->capture_default_str();
        s->add_flag("--cosine", tc.cosine, "Cosine learning-rate decay over the run");
        s->add_option("--lr-floor", tc.lr_floor)->capture_default_str();
        s->add_option("--loss", loss, "Training loss")
            ->check(CLI::IsMember({"points", "sixd"}))
            ->capture_default_str();
        s->add_option("--hidden", mc.hidden)->capture_default_str();
        s->add_option("--layers", mc.layers)->capture_default_str();
        s->add_option("--dropout", mc.dropout)->capture_default_str();
        s->add_option("--resume", resume, "Checkpoint to continue from");
        s->callback([this, s] { run(*s); });
    }

    std::pair<std::vector<train::KeypointPair>, std::vector<train::KeypointPair>> make_pairs() const {
        if (data.empty()) {
            const auto kps = generate_ibb(class_cuboid(cls));
            const auto cam = synthetic_camera();
            return {train::make_keypoint_pairs(tc.seed, pairs, kps, cam, noise_px),
                    train::make_keypoint_pairs(tc.seed + 1, val_pairs, kps, cam, noise_px)};
        }
        const auto ds = io::load_dataset(data);
        const auto nval = std::size_t(std::llround(double(ds.samples.size()) * val_fraction));
        std::vector<train::KeypointPair> tr, va;
        std::size_t k = 0;
        for (std::size_t i = 0; i < ds.samples.size(); ++i)
            for (const auto& t : ds.samples[i].targets) {
                auto rng = RngStream(tc.seed, "rotest-data").substream("object", k++);
                const auto& cam = ds.samples[i].camera;
                train::KeypointPair p;
                p.pose = t.pose;
                for (const auto& x : generate_ibb(class_cuboid(t.class_id)).points) {
                    Vec2 px = project_point(x, t.pose, cam);
                    if (noise_px > 0.0) px += Vec2(rng.normal(0.0, noise_px), rng.normal(0.0, noise_px));
                    p.pixels.push_back(px);
                    p.input.push_back(float(px.x() / cam.width));
                    p.input.push_back(float(px.y() / cam.height));
                }
                (i + nval < ds.samples.size() ? tr : va).push_back(std::move(p));
            }
        return {std::move(tr), std::move(va)};
    }

    void run(const CLI::App& sub) {
        tc.loss = loss == "points" ? train::RotLossKind::PointMatch : train::RotLossKind::SixDL1;
        mc.validate();
        tc.validate();
        if (cls < 0) throw InvalidArgument("class id must be non-negative");
        const auto dir = prepare_run(sub, out);
        const auto [tr, va] = make_pairs();
        std::unique_ptr<train::RotEstModel> m;
        if (!resume.empty()) {
            const auto f = read_checkpoint(resume);
            const auto st = f.state();
            if (st.kind != "rotest") throw ValidationError(resume + " is a " + st.kind + " checkpoint");
            m = std::make_unique<train::RotEstModel>(models::RotEstConfig::from_json(st.config), st.seed);
            restore_checkpoint(f, m->params, &m->opt);
            m->epoch = st.epoch;
            std::cout << "resumed at epoch " << st.epoch << ", step " << m->opt.step << "\n";
        } else {
            m = std::make_unique<train::RotEstModel>(mc, tc.seed);
        }
        io::write_file_atomic(dir / "model.json", m->net.config.to_json().dump(2) + "\n");
        std::ofstream csv(dir / "metrics.csv");
        csv << "epoch,step,train_loss,val_median_deg,val_mean_deg,seconds\n";
        auto save = [&] {
            CheckpointState st{"rotest", m->net.config.to_json(), tc.to_json(), m->opt.step, m->epoch, tc.seed};
            save_checkpoint(dir / "checkpoint.ckpt", st, m->params, &m->opt);
        };
        train::train_rotest(*m, tr, va, tc, [&](const train::RotEstEpoch& e) {
            csv << e.epoch << ',' << e.step << ',' << g(e.train_loss) << ',' << g(e.val_median_deg) << ','
                << g(e.val_mean_deg) << ',' << g(e.seconds) << '\n'
                << std::flush;
            save();
            std::printf("epoch %d step %llu loss %.5f | held-out median %.2f deg (%.1fs)\n", e.epoch,
                        (unsigned long long)e.step, e.train_loss, e.val_median_deg, e.seconds);
            std::fflush(stdout);
        });
        if (m->epoch == 0 || tc.epochs <= 0) save();
    }
};

// ---------------------------------------------------------------------------
// eval

struct Eval {
    std::string out, results, gt, models, sym_list;

    void add(CLI::App& app) {
        auto* s = app.add_subcommand("eval", "Score a results CSV against BOP annotations");
        s->add_option("--out", out, "Output directory")->configurable(false);
        s->add_option("--results", results, "Results CSV (scene_id,im_id,obj_id,score,R,t,time)")->required();
        s->add_option("--gt", gt, "BOP split root or scene directory")->required();
        s->add_option("--models", models, "Directory of obj_NNNNNN.ply models in millimeters")->required();
        s->add_option("--sym-list", sym_list, "File of symmetric object ids (default: the YCB-V list)");
        s->callback([this, s] { run(*s); });
    }

    void run(const CLI::App& sub) {
        report::EvalInputs in{results, gt, models, sym_list.empty() ? losses::default_symmetric_classes()
                                                                    : losses::read_symmetric_classes(sym_list)};
        const auto rep = report::run_eval(in);
        const auto dir = prepare_run(sub, out);
        report::write_report(dir, rep);
        std::cout << report::metrics_csv(rep);
    }
};

// ---------------------------------------------------------------------------
// solve-pnp

KeypointRep parse_rep(const std::string& v) {
    if (v == "bb8") return KeypointRep::BB8;
    if (v == "fps8") return KeypointRep::FPS8;
    return KeypointRep::IBB32;
}

struct SolvePnp {
    std::string out, keypoints, data, models, gt, variant = "ibb32", method = "epnp";
    double noise_px = 0.0, outliers = 0.0;
    std::uint64_t seed = 0;
    RansacConfig ransac;

    void add(CLI::App& app) {
        auto* s = app.add_subcommand("solve-pnp", "Recover poses from 2D keypoints with EPnP or RANSAC");
        s->add_option("--out", out, "Output directory")->configurable(false);
        auto* k = s->add_option("--keypoints", keypoints, "Keypoint CSV (scene_id,im_id,obj_id,score,keypoints)");
        auto* d = s->add_option("--data", data, "Dataset; keypoints are projected from its groundtruth");
        k->excludes(d);
        s->add_option("--models", models, "Model directory (default: <data>/models)");
        s->add_option("--gt", gt, "Scene directory for cameras and scoring (default: <data>/000000)");
        s->add_option("--variant", variant, "Keypoint representation")
            ->check(CLI::IsMember({"bb8", "fps8", "ibb32"}))
            ->capture_default_str();
        s->add_option("--method", method, "Solver")->check(CLI::IsMember({"epnp", "ransac"}))->capture_default_str();
        s->add_option("--noise-px", noise_px, "Gaussian noise on projected keypoints (--data)")->capture_default_str();
        s->add_option("--outliers", outliers, "Fraction of keypoints replaced by uniform outliers (--data)")
            ->check(CLI::Range(0.0, 1.0))
            ->capture_default_str();
        s->add_option("--seed", seed, "Noise seed (--data)")->capture_default_str();
        s->add_option("--ransac-iterations", ransac.iterations)->capture_default_str();
        s->add_option("--ransac-threshold", ransac.threshold, "Inlier threshold in pixels")->capture_default_str();
        s->callback([this, s] { run(*s); });
    }

    void run(const CLI::App& sub) {
        if (keypoints.empty() && data.empty()) throw UsageError("solve-pnp needs --keypoints or --data");
        if (models.empty() && !data.empty()) models = (fs::path(data) / "models").string();
        if (gt.empty() && !data.empty()) gt = (fs::path(data) / "000000").string();
        if (models.empty()) throw UsageError("solve-pnp needs --models with --keypoints");
        ransac.seed = seed;
        ransac.validate();
        const auto rep = parse_rep(variant);
        const auto clouds = report::load_models_dir(models);
        std::map<int, KeypointSet3D> kp3;
        for (const auto& [id, pc] : clouds) kp3[id] = model_keypoints(pc, rep);
        auto model_kps = [&](int obj) -> const KeypointSet3D& {
            const auto it = kp3.find(obj);
            if (it == kp3.end()) throw UnknownClass("no model for obj_id " + std::to_string(obj));
            return it->second;
        };

        std::map<std::pair<int, int>, CameraIntrinsics> cams;
        std::vector<io::SceneAnnotation> scenes;
        if (!gt.empty()) {
            scenes.push_back(io::load_bop_scene(gt));
            for (const auto& im : scenes[0].images) cams[{im.scene_id, im.im_id}] = im.camera;
        }
        std::vector<io::KeypointDetection> dets;
        if (!keypoints.empty()) {
            dets = io::read_keypoints(keypoints);
        } else {
            std::uint64_t k = 0;
            for (const auto& im : scenes[0].images)
                for (const auto& o : im.objects) {
                    auto rng = RngStream(seed, "solve-pnp").substream("object", k++);
                    io::KeypointDetection det{im.scene_id, im.im_id, o.obj_id, 1.0, {}};
                    for (const auto& x : model_kps(o.obj_id).points) {
                        Vec2 px = project_point(x, o.pose, im.camera);
                        if (rng.uniform() < outliers)
                            px = Vec2(rng.uniform() * im.camera.width, rng.uniform() * im.camera.height);
                        else if (noise_px > 0.0)
                            px += Vec2(rng.normal(0.0, noise_px), rng.normal(0.0, noise_px));
                        det.pixels.push_back(px);
                    }
                    dets.push_back(std::move(det));
                }
        }
        const auto dir = prepare_run(sub, out);
        if (keypoints.empty()) io::write_file_atomic(dir / "keypoints.csv", io::format_keypoints(dets));

        std::vector<PoseEstimate> est;
        std::size_t failed = 0;
        for (const auto& d : dets) {
            const auto& k3 = model_kps(d.obj_id);
            if (k3.points.size() != d.pixels.size())
                throw ValidationError("obj_id " + std::to_string(d.obj_id) + ": " + std::to_string(d.pixels.size()) +
                                      " keypoints given, " + variant + " has " + std::to_string(k3.points.size()));
            const auto it = cams.find({d.scene_id, d.im_id});
            const CameraIntrinsics cam = it == cams.end() ? synthetic_camera() : it->second;
            Correspondences c{k3.points, d.pixels};
            try {
                const Pose p = method == "epnp" ? epnp(c, cam) : ransac_pnp(c, cam, ransac).pose;
                est.push_back({d.scene_id, d.im_id, d.obj_id, d.score, p, -1.0});
            } catch (const Error&) {
                ++failed;
            }
        }
        io::write_results(est, dir / "results.csv");
        std::cout << est.size() << " poses, " << failed << " solver failures\n";
        if (!scenes.empty()) {
            const auto diam = report::model_diameters(models, clouds);
            const auto recs = join_estimates(io::gt_instances(scenes), est, diam);
            const auto rep = evaluate(recs, clouds, {});
            report::write_report(dir, rep);
            std::cout << report::metrics_csv(rep);
        }
    }
};

// ---------------------------------------------------------------------------
// ablate

struct Ablate {
    std::string out;
    ablation::AblationConfig cfg;
    int nseeds = 5;
    std::uint64_t first_seed = 0;

    void add(CLI::App& app) {
        auto* s = app.add_subcommand("ablate", "Keypoint representation x pose recovery grid on synthetic data");
        s->add_option("--out", out, "Output directory")->configurable(false);
        s->add_option("--seeds", nseeds, "Number of seeds")->check(CLI::PositiveNumber)->capture_default_str();
        s->add_option("--seed", first_seed, "First seed")->capture_default_str();
        s->add_option("--classes", cfg.classes)->capture_default_str();
        s->add_option("--train-instances", cfg.train_instances)->capture_default_str();
        s->add_option("--test-instances", cfg.test_instances)->capture_default_str();
        s->add_option("--noise-px", cfg.noise_px, "Gaussian keypoint noise in pixels")->capture_default_str();
        s->add_option("--epochs", cfg.rotest_train.epochs, "Epochs for the rotation and translation nets")
            ->capture_default_str();
        s->add_option("--lr", cfg.rotest_train.lr)->capture_default_str();
        s->add_option("--hidden", cfg.rotest.hidden, "Rotation net width")->capture_default_str();
        s->add_option("--head-hidden", cfg.head_hidden, "Translation head width")->capture_default_str();
        s->callback([this, s] { run(*s); });
    }

    void run(const CLI::App& sub) {
        cfg.seeds.clear();
        for (int i = 0; i < nseeds; ++i) cfg.seeds.push_back(first_seed + std::uint64_t(i));
        cfg.head_train.epochs = cfg.rotest_train.epochs;
        cfg.head_train.lr = cfg.rotest_train.lr;
        cfg.validate();
        const auto dir = prepare_run(sub, out);
        const auto res = ablation::run_ablation(cfg, [](const std::string& msg) {
            std::cout << msg << "\n" << std::flush;
        });
        io::write_file_atomic(dir / "table.csv", ablation::table_csv(res));
        io::write_file_atomic(dir / "seeds.csv", ablation::seeds_csv(res));
        std::cout << ablation::table_csv(res);
    }
};

// ---------------------------------------------------------------------------
// gradcheck

struct GradCheck {
    std::string out;
    std::size_t trials = 100;
    std::uint64_t seed = 0;
    double tol = 1e-4;
    bool passed = true;

    void add(CLI::App& app) {
        auto* s = app.add_subcommand("gradcheck", "Finite-difference check of every op and loss");
        s->add_option("--out", out, "Output directory")->configurable(false);
        s->add_option("--trials", trials, "Seeded inputs per case")->capture_default_str();
        s->add_option("--seed", seed)->capture_default_str();
        s->add_option("--tol", tol, "Relative error bound")->capture_default_str();
        s->callback([this, s] { run(*s); });
    }

    void run(const CLI::App& sub) {
        if (trials == 0) throw InvalidArgument("need at least one trial");
        const auto dir = prepare_run(sub, out);
        std::ostringstream csv;
        csv << "suite,name,trials,elements,max_rel_error,tolerance,passed\n";
        std::size_t failed = 0;
        for (const auto& [suite, cases] : {std::pair{"op", gradcheck::op_cases()}, {"loss", gradcheck::loss_cases()}})
            for (const auto& r : gradcheck::run(cases, trials, seed, tol)) {
                csv << suite << ',' << r.name << ',' << r.trials << ',' << r.elements << ',' << g(r.max_rel_error)
                    << ',' << g(r.tolerance) << ',' << (r.passed() ? 1 : 0) << '\n';
                std::printf("%-4s %-28s max rel err %.3e  %s\n", suite, r.name.c_str(), r.max_rel_error,
                            r.passed() ? "PASS" : "FAIL");
                failed += !r.passed();
            }
        io::write_file_atomic(dir / "gradcheck.csv", csv.str());
        passed = failed == 0;
        if (!passed) std::printf("%zu case(s) failed\n", failed);
    }
};

// ---------------------------------------------------------------------------
// dump-attention

struct DumpAttention {
    std::string out, checkpoint, data;
    std::size_t sample = 0;
    std::uint64_t seed = 0;

    void add(CLI::App& app) {
        auto* s = app.add_subcommand("dump-attention", "Export attention maps of a trained model for one scene");
        s->add_option("--out", out, "Output directory")->configurable(false);
        s->add_option("--checkpoint", checkpoint, "Toy model checkpoint")->required();
        s->add_option("--sample", sample, "Scene index")->capture_default_str();
        s->add_option("--data", data, "Dataset directory (a scene is generated from --seed when absent)");
        s->add_option("--seed", seed, "Seed of the generated dataset")->capture_default_str();
        s->callback([this, s] { run(*s); });
    }

    void run(const CLI::App& sub) {
        const auto f = read_checkpoint(checkpoint);
        const auto st = f.state();
        if (st.kind != "toy") throw ValidationError(checkpoint + " is a " + st.kind + " checkpoint");
        models::ToyTransformer<float> net(models::ToyTransformerConfig::from_json(st.config), st.seed);
        restore_checkpoint(f, net.params, nullptr);
        SyntheticSample s;
        if (!data.empty()) {
            auto ds = io::load_dataset(data);
            if (sample >= ds.samples.size())
                throw InvalidArgument("sample " + std::to_string(sample) + " is past the dataset end");
            s = std::move(ds.samples[sample]);
        } else {
            SyntheticConfig sc;
            sc.classes = net.config.classes;
            s = generate_scene(sample_seed(seed, sample), sc);
        }
        const auto dir = prepare_run(sub, out);
        models::AttentionRecord<float> rec;
        {
            ad::NoGradGuard ng;
            net.forward({&s.raster}, &rec);
        }
        const std::size_t gw = std::size_t(net.config.raster_w / net.config.patch);
        auto dump = [&](const std::vector<ad::AttentionMaps<float>>& layers) {
            std::ostringstream os;
            os << "layer,head,query,token,token_row,token_col,weight\n";
            for (std::size_t l = 0; l < layers.size(); ++l) {
                const auto& a = layers[l];
                for (std::size_t h = 0; h < a.heads; ++h)
                    for (std::size_t q = 0; q < a.queries; ++q)
                        for (std::size_t k = 0; k < a.keys; ++k)
                            os << l << ',' << h << ',' << q << ',' << k << ',' << k / gw << ',' << k % gw << ','
                               << io::detail::fmt_num(double(a.at(0, h, q, k))) << '\n';
            }
            return os.str();
        };
        io::write_file_atomic(dir / "encoder_self.csv", dump(rec.encoder_self));
        io::write_file_atomic(dir / "decoder_cross.csv", dump(rec.decoder_cross));
        std::cout << "wrote " << rec.encoder_self.size() << " encoder and " << rec.decoder_cross.size()
                  << " decoder layers to " << dir.string() << "\n";
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Set-prediction 6D pose toolkit"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);
    GenData gen;
    TrainToy toy;
    TrainRotEst rot;
    Eval ev;
    SolvePnp pnp;
    Ablate abl;
    GradCheck gc;
    DumpAttention att;
    gen.add(app);
    rot.add(app);
    toy.add(app);
    ev.add(app);
    pnp.add(app);
    abl.add(app);
    gc.add(app);
    att.add(app);

    std::vector<std::string> args(argv + 1, argv + argc);
    try {
        args = expand_config(std::move(args));
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::vector<char*> cargv{argv[0]};
    for (auto& a : args) cargv.push_back(a.data());
    try {
        app.parse(int(cargv.size()), cargv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const InvalidArgument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return gc.passed ? 0 : 1;
}
