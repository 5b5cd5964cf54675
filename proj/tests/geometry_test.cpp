#include <gtest/gtest.h>

#include <cmath>

#include "setpose/geometry.hpp"
#include "test_support.hpp"

using namespace setpose;

TEST(Rot6D, IdentityAndScaleInvariance) {
    Rot6D r;
    r << 1, 0, 0, 0, 1, 0;
    EXPECT_TRUE(rot6d_to_matrix(r).isApprox(Mat3::Identity(), 1e-15));
    r << 2, 0, 0, 0, 3, 0;
    EXPECT_TRUE(rot6d_to_matrix(r).isApprox(Mat3::Identity(), 1e-15));
}

TEST(Rot6D, SwappedAxes) {
    Rot6D r;
    r << 0, 1, 0, 1, 0, 0;
    const Mat3 R = rot6d_to_matrix(r);
    EXPECT_TRUE(R.col(0).isApprox(Vec3(0, 1, 0)));
    EXPECT_TRUE(R.col(1).isApprox(Vec3(1, 0, 0)));
    EXPECT_TRUE(R.col(2).isApprox(Vec3(0, 0, -1)));
    EXPECT_NEAR(R.determinant(), 1.0, 1e-12);
}

TEST(Rot6D, DegenerateInputs) {
    Rot6D zero = Rot6D::Zero();
    EXPECT_THROW(rot6d_to_matrix(zero), DegenerateInput);
    Rot6D parallel;
    parallel << 1, 2, 3, 2, 4, 6;
    EXPECT_THROW(rot6d_to_matrix(parallel), DegenerateInput);
}

TEST(Rot6D, RandomInputsGiveRotations) {
    RngStream rng(1, "rot6d");
    for (int i = 0; i < 1000; ++i) {
        Rot6D r;
        for (int k = 0; k < 6; ++k) r[k] = rng.normal();
        const Mat3 R = rot6d_to_matrix(r);
        EXPECT_LT((R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-9);
        EXPECT_LT(std::abs(R.determinant() - 1.0), 1e-9);
    }
}

TEST(Rot6D, RoundTrip) {
    Rot6D id;
    id << 1, 0, 0, 0, 1, 0;
    EXPECT_EQ(matrix_to_rot6d(Mat3::Identity()), id);
    const Mat3 Rz = axis_angle(Vec3::UnitZ(), M_PI / 2);
    const Rot6D r = matrix_to_rot6d(Rz);
    EXPECT_TRUE(r.head<3>().isApprox(Rz.col(0)));
    EXPECT_TRUE(r.tail<3>().isApprox(Rz.col(1)));
    RngStream rng(2, "roundtrip");
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const Mat3 R = random_rotation(rng);
        worst = std::max(worst, (rot6d_to_matrix(matrix_to_rot6d(R)) - R).cwiseAbs().maxCoeff());
    }
    EXPECT_LT(worst, 1e-9);
}

TEST(Geodesic, Examples) {
    const Mat3 R = axis_angle(Vec3(1, 2, 3), 0.7);
    EXPECT_NEAR(geodesic_distance(R, R), 0.0, 1e-7);
    EXPECT_NEAR(geodesic_distance(Mat3::Identity(), axis_angle(Vec3::UnitX(), M_PI)), M_PI, 1e-12);
    EXPECT_NEAR(geodesic_distance(Mat3::Identity(), axis_angle(Vec3::UnitZ(), M_PI / 2)), M_PI / 2, 1e-12);
}

TEST(Project, Examples) {
    Pose pose;
    pose.t = Vec3(0, 0, 1);
    CameraIntrinsics cam{500, 500, 320, 240, 640, 480};
    auto px = project_point(Vec3::Zero(), pose, cam);
    EXPECT_DOUBLE_EQ(px.x(), 320);
    EXPECT_DOUBLE_EQ(px.y(), 240);
    px = project_point(Vec3(0.1, 0, 0), pose, cam);
    EXPECT_DOUBLE_EQ(px.x(), 370);
    EXPECT_DOUBLE_EQ(px.y(), 240);
    EXPECT_THROW(project_point(Vec3(0, 0, -2), pose, cam), BehindCamera);
}

TEST(Project, PrincipalPointShiftIsExact) {
    RngStream rng(3, "shift");
    for (int i = 0; i < 100; ++i) {
        auto v = testkit::random_view(rng);
        auto kps = generate_ibb(v.cuboid);
        auto a = project(kps, v.pose, v.cam);
        auto cam2 = v.cam;
        const double delta = 17.25;
        cam2.cx += delta;
        auto b = project(kps, v.pose, cam2);
        EXPECT_EQ(b.lines, a.lines);
        for (std::size_t k = 0; k < a.size(); ++k) {
            EXPECT_NEAR(b.points[k].x() - a.points[k].x(), delta, 1e-9);
            EXPECT_EQ(b.points[k].y(), a.points[k].y());
        }
    }
}

TEST(Ibb, UnitCubeCoordinates) {
    const auto kps = generate_ibb(Cuboid{});
    ASSERT_EQ(kps.size(), 32u);
    ASSERT_EQ(kps.lines.size(), 12u);
    for (const auto& p : kps.points)
        for (int k = 0; k < 3; ++k) {
            const double a = std::abs(p[k]);
            EXPECT_TRUE(std::abs(a - 0.5) < 1e-15 || std::abs(a - 1.0 / 6.0) < 1e-15) << p.transpose();
        }
    // Corner order is lexicographic in the signs.
    EXPECT_TRUE(kps.points[0].isApprox(Vec3(-0.5, -0.5, -0.5)));
    EXPECT_TRUE(kps.points[1].isApprox(Vec3(-0.5, -0.5, 0.5)));
    EXPECT_TRUE(kps.points[7].isApprox(Vec3(0.5, 0.5, 0.5)));
}

TEST(Ibb, EveryLineListedOnceWithCrossRatio) {
    RngStream rng(4, "ibb");
    const auto kps = generate_ibb(testkit::random_view(rng).cuboid);
    std::vector<int> uses(32, 0);
    for (const auto& line : kps.lines) {
        for (int i : line) ++uses[i];
        EXPECT_NEAR(cross_ratio_sq(kps.points[line[0]], kps.points[line[1]], kps.points[line[2]],
                                   kps.points[line[3]]),
                    16.0 / 9.0, 1e-12);
        // Collinear: interior points lie on the corner-to-corner segment.
        const Vec3 dir = kps.points[line[3]] - kps.points[line[0]];
        EXPECT_LT((kps.points[line[1]] - kps.points[line[0]]).cross(dir).norm(), 1e-12);
    }
    for (int i = 8; i < 32; ++i) EXPECT_EQ(uses[i], 1) << i;  // interior points once
    for (int i = 0; i < 8; ++i) EXPECT_EQ(uses[i], 3) << i;   // each corner has 3 edges
}

TEST(Ibb, Bb8HasNoLines) {
    const auto kps = generate_bb8(Cuboid{});
    EXPECT_EQ(kps.size(), 8u);
    EXPECT_TRUE(kps.lines.empty());
    EXPECT_THROW(generate_ibb(Cuboid{Vec3::Zero(), Vec3(1, 0, 1)}), InvalidArgument);
}

TEST(CrossRatio, Examples) {
    EXPECT_DOUBLE_EQ(cross_ratio_sq(Vec2(0, 0), Vec2(1, 0), Vec2(2, 0), Vec2(3, 0)), 16.0 / 9.0);
    EXPECT_NEAR(cross_ratio_sq(Vec2(0, 0), Vec2(1.0 / 3, 0), Vec2(2.0 / 3, 0), Vec2(1, 0)), 16.0 / 9.0, 1e-14);
    EXPECT_THROW(cross_ratio_sq(Vec2(0, 0), Vec2(1, 0), Vec2(1, 0), Vec2(3, 0)), DegenerateInput);
}

TEST(CrossRatio, ProjectiveInvariance) {
    RngStream rng(5, "cr-invariance");
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        auto v = testkit::random_view(rng);
        auto img = project(generate_ibb(v.cuboid), v.pose, v.cam);
        for (const auto& l : img.lines)
            worst = std::max(worst, std::abs(cross_ratio_sq(img.points[l[0]], img.points[l[1]], img.points[l[2]],
                                                            img.points[l[3]]) -
                                             16.0 / 9.0));
    }
    EXPECT_LT(worst, 1e-6);
}

TEST(Fps, Examples) {
    PointCloud line{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2, 0, 0), Vec3(10, 0, 0)};
    auto one = fps_sample(line, 1, 2);
    ASSERT_EQ(one.size(), 1u);
    EXPECT_EQ(one[0], line[2]);
    auto two = fps_sample(line, 2, 0);
    EXPECT_EQ(two[0], line[0]);
    EXPECT_EQ(two[1], line[3]);
    auto all = fps_sample(line, 4, 0);
    EXPECT_EQ(all.size(), 4u);
    EXPECT_EQ(all[2], line[2]);  // farthest from {0, 10}
    EXPECT_THROW(fps_sample(line, 5, 0), InvalidArgument);
}

TEST(Fps, TiesResolveToLowestIndex) {
    PointCloud sym{Vec3(0, 0, 0), Vec3(-1, 0, 0), Vec3(1, 0, 0)};
    EXPECT_EQ(fps_sample(sym, 2, 0)[1], sym[1]);
}

TEST(Fps, PrefixProperty) {
    RngStream rng(6, "fps");
    PointCloud cloud;
    for (int i = 0; i < 300; ++i) cloud.emplace_back(rng.normal(), rng.normal(), rng.normal());
    const auto big = fps_sample(cloud, 40, 7);
    for (std::size_t k : {1u, 5u, 17u, 39u}) {
        const auto small = fps_sample(cloud, k, 7);
        for (std::size_t i = 0; i < k; ++i) EXPECT_EQ(small[i], big[i]);
    }
    EXPECT_EQ(fps_sample(cloud, 40, 7), big);
}

TEST(Translation, Examples) {
    CameraIntrinsics cam{500, 500, 320, 240, 640, 480};
    Vec3 t = decode_translation({0.5, 0.5, 1.0}, cam);
    EXPECT_TRUE(t.isApprox(Vec3(0, 0, 1)));
    t = decode_translation({1.0, 0.5, 2.0}, cam);
    EXPECT_DOUBLE_EQ(t.x(), 1.28);
    EXPECT_THROW(decode_translation({0.5, 0.5, 0.0}, cam), InvalidArgument);
}

TEST(Translation, RoundTrip) {
    RngStream rng(7, "translation");
    for (int i = 0; i < 1000; ++i) {
        auto v = testkit::random_view(rng);
        const Vec3 t(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.1, 10));
        const Vec3 back = decode_translation(encode_translation(t, v.cam), v.cam);
        EXPECT_LT((back - t).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Boxes, Giou) {
    Box a{0.5, 0.5, 1, 1};
    EXPECT_DOUBLE_EQ(giou(a, a), 1.0);
    EXPECT_DOUBLE_EQ(giou(a, Box{1.5, 1.5, 1, 1}), -0.5);
    EXPECT_DOUBLE_EQ(giou(Box{0.5, 0.5, 2, 1}, Box{0.5, 0.5, 1, 1}), 0.5);
    EXPECT_THROW(giou(a, Box{0.5, 0.5, 0, 1}), InvalidArgument);
}
