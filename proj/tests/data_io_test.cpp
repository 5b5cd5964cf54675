#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "setpose/data_io.hpp"

using namespace setpose;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = SETPOSE_FIXTURES;

fs::path scratch(const std::string& name) {
    const fs::path p = fs::path(::testing::TempDir()) / ("setpose_io_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

void expect_same(const io::SceneAnnotation& a, const io::SceneAnnotation& b) {
    ASSERT_EQ(a.images.size(), b.images.size());
    EXPECT_EQ(a.scene_id, b.scene_id);
    for (std::size_t i = 0; i < a.images.size(); ++i) {
        const auto &x = a.images[i], &y = b.images[i];
        EXPECT_EQ(x.im_id, y.im_id);
        EXPECT_EQ(x.camera.fx, y.camera.fx);
        EXPECT_EQ(x.camera.fy, y.camera.fy);
        EXPECT_EQ(x.camera.cx, y.camera.cx);
        EXPECT_EQ(x.camera.cy, y.camera.cy);
        EXPECT_EQ(x.camera.width, y.camera.width);
        EXPECT_EQ(x.camera.height, y.camera.height);
        ASSERT_EQ(x.objects.size(), y.objects.size());
        for (std::size_t k = 0; k < x.objects.size(); ++k) {
            EXPECT_EQ(x.objects[k].obj_id, y.objects[k].obj_id);
            EXPECT_TRUE(x.objects[k].pose.R == y.objects[k].pose.R);
            EXPECT_TRUE(x.objects[k].pose.t == y.objects[k].pose.t);
        }
    }
}

}  // namespace

TEST(Bop, LoadsFixture) {
    const auto s = io::load_bop_scene(kFixtures / "bop" / "000001");
    EXPECT_EQ(s.scene_id, 1);
    ASSERT_EQ(s.images.size(), 2u);
    EXPECT_EQ(s.images[0].im_id, 0);
    ASSERT_EQ(s.images[0].objects.size(), 1u);
    EXPECT_EQ(s.images[0].objects[0].obj_id, 1);
    EXPECT_TRUE(s.images[0].objects[0].pose.R == Mat3::Identity());
    EXPECT_TRUE(s.images[0].objects[0].pose.t == Vec3(0, 0, 1));
    EXPECT_EQ(s.images[1].im_id, 3);
    EXPECT_EQ(s.images[1].objects.size(), 2u);
    EXPECT_NEAR(s.images[1].objects[0].pose.t.x(), 0.0255, 1e-15);
    EXPECT_DOUBLE_EQ(s.images[1].camera.fx, 1066.778);
    EXPECT_DOUBLE_EQ(s.images[1].camera.cy, 241.3109);
}

TEST(Bop, LoadWriteLoadFixpoint) {
    const auto a = io::load_bop_scene(kFixtures / "bop" / "000001");
    const auto dir = scratch("fixpoint") / "000001";
    io::write_bop_scene(dir, a);
    const auto b = io::load_bop_scene(dir);
    expect_same(a, b);
    io::write_bop_scene(dir, b);
    expect_same(b, io::load_bop_scene(dir));
}

TEST(Bop, RandomPosesRoundTrip) {
    RngStream rng(3, "bop-rt");
    io::SceneAnnotation s;
    s.scene_id = 4;
    for (int i = 0; i < 20; ++i) {
        io::ImageAnnotation im;
        im.scene_id = 4;
        im.im_id = i;
        im.camera.fx = rng.uniform(400, 1100);
        for (int k = 0; k < 3; ++k)
            im.objects.push_back({int(1 + rng.below(21)),
                                  Pose{random_rotation(rng), Vec3(rng.normal(), rng.normal(), rng.uniform(0.3, 2))}});
        s.images.push_back(im);
    }
    const auto dir = scratch("random") / "000004";
    io::write_bop_scene(dir, s);
    const auto a = io::load_bop_scene(dir);
    for (std::size_t i = 0; i < s.images.size(); ++i)
        for (std::size_t k = 0; k < 3; ++k) {
            // Not every meter value has an exact millimeter preimage; the
            // first trip is within an ulp, later trips are exact.
            EXPECT_LT((a.images[i].objects[k].pose.t - s.images[i].objects[k].pose.t).norm(), 1e-15);
            EXPECT_LT((a.images[i].objects[k].pose.R - s.images[i].objects[k].pose.R).norm(), 1e-14);
        }
    io::write_bop_scene(dir, a);
    expect_same(a, io::load_bop_scene(dir));
}

TEST(Bop, MalformedRotationNamesImage) {
    try {
        io::load_bop_scene(kFixtures / "bad_rotation" / "000000");
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("image 7"), std::string::npos) << e.what();
    }
}

TEST(Bop, ParseErrorHasLine) {
    const auto dir = scratch("broken");
    std::ofstream(dir / "scene_gt.json") << "{\n \"0\": [\n  {\"obj_id\": 1,,}\n ]\n}\n";
    std::ofstream(dir / "scene_camera.json") << "{}\n";
    try {
        io::load_bop_scene(dir);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("scene_gt.json:3"), std::string::npos) << e.what();
    }
}

TEST(Bop, MissingFileIsIoError) { EXPECT_THROW(io::load_bop_scene(scratch("empty")), IOError); }

TEST(Ply, AsciiAndBinaryAgree) {
    const auto a = io::load_ply(kFixtures / "cube_ascii.ply");
    const auto b = io::load_ply(kFixtures / "cube_binary.ply");
    ASSERT_EQ(a.size(), 8u);
    ASSERT_EQ(b.size(), 8u);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_LT((a[i] - b[i]).norm(), 1e-7);
    EXPECT_NEAR(a[7].x(), 0.05, 1e-12);
}

TEST(Ply, Errors) {
    EXPECT_THROW(io::load_ply(kFixtures / "cube_big_endian.ply"), UnsupportedFormat);
    EXPECT_THROW(io::load_ply(kFixtures / "cube_no_z.ply"), ParseError);
    EXPECT_THROW(io::load_ply(kFixtures / "missing.ply"), IOError);
}

TEST(Ply, WriteReadAndUnits) {
    RngStream rng(4, "ply");
    PointCloud pc;
    for (int i = 0; i < 100; ++i) pc.emplace_back(rng.normal(0, 50), rng.normal(0, 50), rng.normal(0, 50));
    const auto dir = scratch("ply");
    for (bool binary : {true, false}) {
        io::write_ply(dir / "m.ply", pc, binary);
        const auto back = io::load_ply(dir / "m.ply", true);
        ASSERT_EQ(back.size(), pc.size());
        for (std::size_t i = 0; i < pc.size(); ++i) EXPECT_LT((back[i] * 1000.0 - pc[i]).norm(), 1e-4);
    }
}

TEST(Results, IdentitySerialization) {
    PoseEstimate e;
    e.scene_id = 1;
    e.pose.t = Vec3(0, 0, 1);
    e.score = 1;
    const auto text = io::format_results({e});
    EXPECT_NE(text.find(",1 0 0 0 1 0 0 0 1,"), std::string::npos) << text;
    EXPECT_NE(text.find(",0 0 1000,"), std::string::npos) << text;
}

TEST(Results, FixtureFixpoint) {
    const auto text = io::read_file(kFixtures / "results.csv");
    const auto recs = io::parse_results(text);
    ASSERT_EQ(recs.size(), 3u);
    EXPECT_EQ(io::format_results(recs), text);
    EXPECT_DOUBLE_EQ(recs[2].score, 0.123456789);
    EXPECT_DOUBLE_EQ(recs[2].pose.t.z(), 1.2005);
}

TEST(Results, RandomRoundTripTo9Digits) {
    RngStream rng(5, "res");
    std::vector<PoseEstimate> est;
    for (int i = 0; i < 200; ++i) {
        PoseEstimate e;
        e.scene_id = int(rng.below(50));
        e.im_id = int(rng.below(2000));
        e.obj_id = int(1 + rng.below(21));
        e.score = rng.uniform();
        e.pose = Pose{random_rotation(rng), Vec3(rng.normal(), rng.normal(), rng.uniform(0.3, 2))};
        e.time = rng.uniform(0, 1);
        est.push_back(e);
    }
    const auto path = scratch("results") / "r.csv";
    io::write_results(est, path);
    const auto back = io::read_results(path);
    ASSERT_EQ(back.size(), est.size());
    auto close9 = [](double a, double b) { return std::abs(a - b) <= 5e-9 * std::max(std::abs(a), 1e-300) + 1e-300; };
    for (std::size_t i = 0; i < est.size(); ++i) {
        EXPECT_EQ(back[i].scene_id, est[i].scene_id);
        EXPECT_EQ(back[i].obj_id, est[i].obj_id);
        EXPECT_TRUE(close9(back[i].score, est[i].score));
        for (int k = 0; k < 3; ++k) EXPECT_TRUE(close9(back[i].pose.t[k], est[i].pose.t[k]));
        for (int k = 0; k < 9; ++k) EXPECT_TRUE(close9(back[i].pose.R(k / 3, k % 3), est[i].pose.R(k / 3, k % 3)));
    }
    // Second trip is byte-identical.
    EXPECT_EQ(io::format_results(back), io::read_file(path));
    EXPECT_FALSE(fs::exists(path.string() + ".tmp"));
}

TEST(Results, ParseErrorsCarryLine) {
    const std::string bad = std::string(io::kResultsHeader) + "\n1,0,1,0.9,1 0 0 0 1 0 0 0 1,0 0 1000,0\n1,0,1,0.9,1 0 0,0 0 1,0\n";
    try {
        io::parse_results(bad, "r.csv");
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("r.csv:3"), std::string::npos) << e.what();
    }
    EXPECT_THROW(io::parse_results("a,b\n"), ParseError);
    EXPECT_THROW(io::parse_results(""), ParseError);
}

TEST(ModelInfo, DiametersInMeters) {
    const auto dir = scratch("info");
    std::map<int, PointCloud> models{{1, io::load_ply(kFixtures / "cube_ascii.ply")}};
    io::write_model_info(dir / "models_info.json", models);
    const auto d = io::load_model_diameters(dir / "models_info.json");
    EXPECT_NEAR(d.at(1), 0.1 * std::sqrt(3.0), 1e-7);
}
