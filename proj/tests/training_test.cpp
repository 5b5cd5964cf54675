#include <gtest/gtest.h>

#include <filesystem>

#include "setpose/checkpoint.hpp"
#include "setpose/training.hpp"

using namespace setpose;
namespace fs = std::filesystem;

namespace {

models::ToyTransformerConfig tiny_model() {
    models::ToyTransformerConfig c;
    c.raster_h = c.raster_w = 16;
    c.dim = 16;
    c.heads = 2;
    c.queries = 5;
    c.head_hidden = 16;
    c.ffn_hidden = 16;
    c.encoder_layers = 1;
    c.decoder_layers = 1;
    c.rotest.hidden = 16;
    c.rotest.layers = 3;
    return c;
}

SyntheticConfig tiny_scenes(int max_objects = 3) {
    SyntheticConfig s;
    s.raster_h = s.raster_w = 16;
    s.max_objects = max_objects;
    return s;
}

train::ToyTrainConfig tiny_train(int epochs) {
    train::ToyTrainConfig t;
    t.epochs = epochs;
    t.batch = 4;
    t.lr = 1e-3;
    t.seed = 11;
    return t;
}

std::vector<std::vector<float>> snapshot(const nn::ParamStore<float>& p) {
    std::vector<std::vector<float>> out;
    for (const auto& [_, t] : p.entries()) out.push_back(t.value());
    return out;
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::path(::testing::TempDir()) / ("setpose_train_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST(KeypointPairs, NoiselessPairsProjectExactly) {
    const auto kps = generate_ibb(class_cuboid(1));
    const auto cam = synthetic_camera();
    const auto pairs = train::make_keypoint_pairs(3, 50, kps, cam, 0.0);
    for (const auto& p : pairs) {
        ASSERT_EQ(p.input.size(), 64u);
        EXPECT_GE(p.pose.t.z(), 0.5);
        EXPECT_LE(p.pose.t.z(), 2.0);
        for (std::size_t k = 0; k < 32; ++k) {
            EXPECT_LT((p.pixels[k] - project_point(kps.points[k], p.pose, cam)).norm(), 1e-9);
            EXPECT_GE(p.input[2 * k], 0.0f);
            EXPECT_LE(p.input[2 * k], 1.0f);
        }
    }
    const auto again = train::make_keypoint_pairs(3, 50, kps, cam, 0.0);
    EXPECT_EQ(pairs[17].input, again[17].input);
}

TEST(KeypointPairs, NoiseHasRequestedScale) {
    const auto kps = generate_ibb(class_cuboid(0));
    const auto cam = synthetic_camera();
    const auto pairs = train::make_keypoint_pairs(4, 200, kps, cam, 2.0);
    double ss = 0.0;
    std::size_t n = 0;
    for (const auto& p : pairs)
        for (std::size_t k = 0; k < 32; ++k, n += 2) ss += (p.pixels[k] - project_point(kps.points[k], p.pose, cam)).squaredNorm();
    EXPECT_NEAR(std::sqrt(ss / double(n)), 2.0, 0.1);
}

TEST(Median, OddAndEven) {
    EXPECT_EQ(train::median({3, 1, 2}), 2.0);
    EXPECT_EQ(train::median({4, 1, 3, 2}), 2.5);
    EXPECT_THROW(train::median({}), EmptyInput);
}

TEST(RotEstTraining, NoiselessSmallModelLearnsAndIsDeterministic) {
    const auto kps = generate_ibb(class_cuboid(0));
    const auto cam = synthetic_camera();
    const auto tr = train::make_keypoint_pairs(1, 2000, kps, cam, 0.0);
    const auto va = train::make_keypoint_pairs(2, 200, kps, cam, 0.0);
    auto cfg = models::RotEstConfig::toy();
    cfg.dropout = 0.0;
    train::RotEstTrainConfig tc;
    tc.epochs = 12;
    tc.lr = 1e-3;
    tc.seed = 5;
    train::RotEstModel a(cfg, 5), b(cfg, 5);
    const auto la = train::train_rotest(a, tr, va, tc);
    const auto lb = train::train_rotest(b, tr, va, tc);
    ASSERT_EQ(la.size(), 12u);
    for (std::size_t i = 0; i < la.size(); ++i) {
        EXPECT_EQ(la[i].train_loss, lb[i].train_loss);
        EXPECT_EQ(la[i].val_median_deg, lb[i].val_median_deg);
    }
    EXPECT_EQ(snapshot(a.params), snapshot(b.params));
    EXPECT_LT(la.back().train_loss, la.front().train_loss);
    EXPECT_LT(la.back().val_median_deg, 0.6 * la.front().val_median_deg);
}

TEST(RotEstTraining, SixDLossVariantRuns) {
    const auto kps = generate_ibb(class_cuboid(0));
    const auto tr = train::make_keypoint_pairs(1, 256, kps, synthetic_camera(), 1.0);
    train::RotEstModel m(models::RotEstConfig::toy(), 1);
    train::RotEstTrainConfig tc;
    tc.epochs = 3;
    tc.loss = train::RotLossKind::SixDL1;
    const auto log = train::train_rotest(m, tr, {}, tc);
    EXPECT_LT(log.back().train_loss, log.front().train_loss);
}

TEST(ToyTraining, DeterministicAndDecreasing) {
    const auto data = generate_dataset(1, 24, tiny_scenes());
    const auto val = generate_dataset(2, 8, tiny_scenes());
    train::ToyModel a(tiny_model(), 3), b(tiny_model(), 3);
    const auto la = train::train_toy(a, data.samples, val.samples, tiny_train(4));
    const auto lb = train::train_toy(b, data.samples, val.samples, tiny_train(4));
    ASSERT_EQ(la.size(), 4u);
    for (std::size_t i = 0; i < la.size(); ++i) {
        EXPECT_EQ(la[i].loss, lb[i].loss);
        EXPECT_EQ(la[i].val.keypoint_l1, lb[i].val.keypoint_l1);
    }
    EXPECT_EQ(snapshot(a.net.params), snapshot(b.net.params));
    EXPECT_LT(la.back().loss, la.front().loss);
    EXPECT_EQ(la.back().step, 4u * 6u);
    EXPECT_GT(la.back().val.objects, 0u);
}

TEST(ToyTraining, DetectionsMirrorNonNullQueries) {
    const auto data = generate_dataset(4, 6, tiny_scenes());
    for (bool head : {true, false}) {
        auto cfg = tiny_model();
        cfg.rotation_head = head;
        train::ToyModel m(cfg, 2);
        train::train_toy(m, data.samples, {}, tiny_train(2));
        std::vector<const std::vector<float>*> rasters;
        for (const auto& s : data.samples) rasters.push_back(&s.raster);
        const auto preds = models::to_predictions(m.net.forward(rasters));
        std::size_t expected = 0;
        for (const auto& p : preds)
            for (const auto& q : p)
                expected += std::max_element(q.class_logits.begin(), q.class_logits.end()) - q.class_logits.begin() !=
                            cfg.classes;
        const auto dets = train::predict_toy(m.net, data.samples, 4);
        EXPECT_EQ(dets.size(), expected);
        for (const auto& d : dets) {
            ASSERT_LT(d.sample, data.samples.size());
            EXPECT_GE(d.class_id, 0);
            EXPECT_LT(d.class_id, cfg.classes);
            EXPECT_GT(d.score, 0.0);
            EXPECT_LE(d.score, 1.0);
            EXPECT_EQ(d.pixels.size(), std::size_t(cfg.keypoints));
            if (!d.has_pose) continue;
            EXPECT_LT((d.pose.R.transpose() * d.pose.R - Mat3::Identity()).norm(), 1e-9);
            EXPECT_GT(d.pose.t.z(), 0.0);
        }
    }
}

TEST(ToyTraining, EmptyScenesGiveClassOnlyLoss) {
    const auto data = generate_dataset(3, 8, tiny_scenes(0));
    train::ToyModel m(tiny_model(), 1);
    const auto log = train::train_toy(m, data.samples, data.samples, tiny_train(1));
    ASSERT_EQ(log.size(), 1u);
    EXPECT_GT(log[0].class_loss, 0.0);
    EXPECT_EQ(log[0].box_loss, 0.0);
    EXPECT_EQ(log[0].keypoint_loss, 0.0);
    EXPECT_EQ(log[0].pose_loss, 0.0);
    EXPECT_NEAR(log[0].loss, log[0].class_loss, 1e-12);
    EXPECT_EQ(log[0].val.objects, 0u);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
    const auto data = generate_dataset(5, 16, tiny_scenes());
    train::ToyModel full(tiny_model(), 9);
    train::train_toy(full, data.samples, {}, tiny_train(2));

    train::ToyModel first(tiny_model(), 9);
    train::train_toy(first, data.samples, {}, tiny_train(1));
    const auto path = scratch("resume") / "model.ckpt";
    CheckpointState st{"toy", first.net.config.to_json(), tiny_train(1).to_json(), first.opt.step, first.epoch, 9};
    save_checkpoint(path, st, first.net.params, &first.opt);

    const auto file = read_checkpoint(path);
    EXPECT_EQ(file.state().epoch, 1);
    EXPECT_EQ(file.state().step, first.opt.step);
    train::ToyModel resumed(models::ToyTransformerConfig::from_json(file.state().config), 12345);
    restore_checkpoint(file, resumed.net.params, &resumed.opt);
    resumed.epoch = file.state().epoch;
    EXPECT_EQ(snapshot(resumed.net.params), snapshot(first.net.params));
    EXPECT_EQ(resumed.opt.step, first.opt.step);
    const auto log = train::train_toy(resumed, data.samples, {}, tiny_train(2));
    ASSERT_EQ(log.size(), 1u);
    EXPECT_EQ(log[0].step, full.opt.step);
    EXPECT_EQ(snapshot(resumed.net.params), snapshot(full.net.params));
}

TEST(Checkpoint, Errors) {
    const auto dir = scratch("errors");
    EXPECT_THROW(read_checkpoint(dir / "missing.ckpt"), IOError);
    io::write_file_atomic(dir / "junk.ckpt", "hello\n");
    EXPECT_THROW(read_checkpoint(dir / "junk.ckpt"), ParseError);
    io::write_file_atomic(dir / "v9.ckpt", "SETPOSE-CHECKPOINT 9\n{}\n");
    EXPECT_THROW(read_checkpoint(dir / "v9.ckpt"), UnsupportedFormat);

    train::RotEstModel small(models::RotEstConfig::toy(), 1);
    save_checkpoint(dir / "r.ckpt", {"rotest", small.net.config.to_json(), {}, 0, 0, 1}, small.params, nullptr);
    auto big_cfg = models::RotEstConfig::toy();
    big_cfg.hidden = 32;
    train::RotEstModel big(big_cfg, 1);
    EXPECT_THROW(restore_checkpoint(read_checkpoint(dir / "r.ckpt"), big.params, nullptr), ShapeMismatch);
    train::ToyModel toy(tiny_model(), 1);
    EXPECT_THROW(restore_checkpoint(read_checkpoint(dir / "r.ckpt"), toy.net.params, nullptr), ValidationError);
}
