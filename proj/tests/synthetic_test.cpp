#include <gtest/gtest.h>

#include <filesystem>

#include "setpose/synthetic.hpp"

using namespace setpose;
namespace fs = std::filesystem;

TEST(Synthetic, SeedDeterminism) {
    SyntheticConfig cfg;
    for (std::uint64_t seed : {1u, 2u, 99u}) {
        const auto a = generate_scene(seed, cfg);
        const auto b = generate_scene(seed, cfg);
        EXPECT_EQ(a.raster, b.raster);
        ASSERT_EQ(a.targets.size(), b.targets.size());
        for (std::size_t i = 0; i < a.targets.size(); ++i) {
            EXPECT_TRUE(a.targets[i].pose.R == b.targets[i].pose.R);
            EXPECT_TRUE(a.targets[i].pose.t == b.targets[i].pose.t);
        }
    }
}

TEST(Synthetic, TargetsAreSelfConsistent) {
    SyntheticConfig cfg;
    std::size_t objects = 0;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const auto s = generate_scene(seed, cfg);
        EXPECT_LE(int(s.targets.size()), cfg.max_objects);
        for (const auto& t : s.targets) {
            ++objects;
            EXPECT_GE(t.pose.t.z(), cfg.z_min);
            EXPECT_LE(t.pose.t.z(), cfg.z_max);
            EXPECT_LT((decode_translation(t.translation, s.camera) - t.pose.t).norm(), 1e-9);
            const auto px = project(generate_ibb(class_cuboid(t.class_id)), t.pose, s.camera);
            ASSERT_EQ(t.keypoints.points.size(), 32u);
            ASSERT_EQ(t.keypoints.lines.size(), 12u);
            std::vector<Vec2> pix;
            for (std::size_t k = 0; k < 32; ++k) {
                const auto& p = t.keypoints.points[k];
                EXPECT_TRUE(p.x() >= 0 && p.x() <= 1 && p.y() >= 0 && p.y() <= 1);
                const Vec2 d(p.x() * s.camera.width, p.y() * s.camera.height);
                EXPECT_LT((d - px.points[k]).norm(), 1e-9);
                pix.push_back(d);
            }
            for (const auto& l : t.keypoints.lines)
                EXPECT_NEAR(cross_ratio_sq(pix[l[0]], pix[l[1]], pix[l[2]], pix[l[3]]), kIbbCrossRatioSq, 1e-6);
            const Box hull = hull_box(std::vector<Vec2>(px.points.begin(), px.points.begin() + 8), s.camera);
            EXPECT_EQ(hull.cx, t.box.cx);
            EXPECT_EQ(hull.w, t.box.w);
            EXPECT_GT(t.box.w, 0.0);
            EXPECT_GT(t.box.h, 0.0);
        }
        for (std::size_t i = 0; i < s.targets.size(); ++i)
            for (std::size_t j = 0; j < i; ++j) EXPECT_LE(iou(s.targets[i].box, s.targets[j].box), cfg.max_overlap_iou);
    }
    EXPECT_GT(objects, 200u);
}

TEST(Synthetic, RasterCoversObjects) {
    SyntheticConfig cfg;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto s = generate_scene(seed, cfg);
        ASSERT_EQ(s.raster.size(), std::size_t(cfg.raster_h * cfg.raster_w * 3));
        double mass = 0.0;
        for (float v : s.raster) {
            EXPECT_GE(v, 0.0f);
            EXPECT_LE(v, 1.0f);
            mass += v;
        }
        if (s.targets.empty()) {
            EXPECT_EQ(mass, 0.0);
        }
        for (const auto& t : s.targets) {
            // The cell under the box center is painted unless a nearer
            // object covers it, which the overlap cap makes rare.
            const int r = std::min(cfg.raster_h - 1, int(t.box.cy * cfg.raster_h));
            const int c = std::min(cfg.raster_w - 1, int(t.box.cx * cfg.raster_w));
            EXPECT_GT(s.raster[(std::size_t(r) * cfg.raster_w + c) * 3], 0.0f) << "seed " << seed;
        }
    }
}

TEST(Synthetic, ZeroObjectsAndLimits) {
    SyntheticConfig cfg;
    cfg.max_objects = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) EXPECT_TRUE(generate_scene(seed, cfg).targets.empty());
    cfg.max_objects = 21;
    EXPECT_THROW(generate_scene(0, cfg), InvalidArgument);
    cfg.max_objects = 3;
    cfg.classes = 0;
    EXPECT_THROW(generate_scene(0, cfg), InvalidArgument);
}

TEST(Synthetic, ClassCuboidsAreFixed) {
    for (int c = 0; c < 8; ++c) {
        EXPECT_TRUE(class_cuboid(c).half_extents == class_cuboid(c).half_extents);
        EXPECT_GT(class_cuboid(c).half_extents.minCoeff(), 0.0);
    }
    EXPECT_THROW(class_cuboid(-1), InvalidArgument);
    const auto pc = cuboid_surface_points(class_cuboid(0));
    EXPECT_EQ(pc.size(), 6u * 16 * 16);
    const Cuboid b = bounding_cuboid(pc);
    EXPECT_LT((b.half_extents - class_cuboid(0).half_extents).norm(), 1e-12);
}

TEST(Synthetic, DatasetRoundTrip) {
    SyntheticConfig cfg;
    const auto ds = generate_dataset(7, 20, cfg);
    const fs::path dir = fs::path(::testing::TempDir()) / "setpose_synth";
    fs::remove_all(dir);
    io::write_dataset(dir, ds);
    const auto back = io::load_dataset(dir);
    ASSERT_EQ(back.samples.size(), ds.samples.size());
    EXPECT_EQ(back.config.classes, cfg.classes);
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const auto &a = ds.samples[i], &b = back.samples[i];
        EXPECT_EQ(a.seed, b.seed);
        EXPECT_EQ(a.raster, b.raster);
        ASSERT_EQ(a.targets.size(), b.targets.size());
        for (std::size_t k = 0; k < a.targets.size(); ++k) {
            EXPECT_EQ(a.targets[k].class_id, b.targets[k].class_id);
            for (std::size_t p = 0; p < 32; ++p)
                EXPECT_LT((a.targets[k].keypoints.points[p] - b.targets[k].keypoints.points[p]).norm(), 1e-9);
        }
    }
    // Writing the same dataset twice gives byte-identical files.
    const fs::path dir2 = fs::path(::testing::TempDir()) / "setpose_synth2";
    fs::remove_all(dir2);
    io::write_dataset(dir2, generate_dataset(7, 20, cfg));
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), dir);
        EXPECT_EQ(io::read_file(e.path()), io::read_file(dir2 / rel)) << rel;
    }
    const auto diam = io::load_model_diameters(dir / "models" / "models_info.json");
    EXPECT_EQ(diam.size(), std::size_t(cfg.classes));
}

TEST(Synthetic, PfmRejectsGarbage) {
    const fs::path dir = fs::path(::testing::TempDir()) / "setpose_pfm";
    fs::create_directories(dir);
    io::write_file_atomic(dir / "bad.pfm", "P6\n1 1\n255\nabc");
    int h = 0, w = 0;
    EXPECT_THROW(io::read_pfm(dir / "bad.pfm", h, w), ParseError);
    io::write_file_atomic(dir / "short.pfm", "PF\n4 4\n-1.0\nxx");
    EXPECT_THROW(io::read_pfm(dir / "short.pfm", h, w), ParseError);
}
