#include <gtest/gtest.h>

#include <filesystem>

#include "setpose/keypoint_csv.hpp"
#include "setpose/report.hpp"
#include "setpose/synthetic.hpp"

using namespace setpose;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::path(::testing::TempDir()) / ("setpose_report_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Dataset on disk plus a results file copying its groundtruth.
fs::path perfect_run(const std::string& name) {
    const auto dir = scratch(name);
    SyntheticConfig cfg;
    const auto ds = generate_dataset(3, 30, cfg);
    io::write_dataset(dir / "data", ds);
    std::vector<PoseEstimate> est;
    for (std::size_t i = 0; i < ds.samples.size(); ++i)
        for (const auto& t : ds.samples[i].targets) est.push_back({0, int(i), t.class_id + 1, 1.0, t.pose, -1.0});
    io::write_results(est, dir / "results.csv");
    return dir;
}

}  // namespace

TEST(Report, PerfectResultsScoreOne) {
    const auto dir = perfect_run("perfect");
    report::EvalInputs in{dir / "results.csv", dir / "data" / "000000", dir / "data" / "models", {}};
    const auto rep = report::run_eval(in);
    ASSERT_FALSE(rep.classes.empty());
    for (const auto* c : {&rep.mean}) {
        EXPECT_EQ(c->auc_add, 1.0);
        EXPECT_EQ(c->auc_adds, 1.0);
        EXPECT_EQ(c->auc_add_s, 1.0);
        EXPECT_EQ(c->ar_add_s_01m, 1.0);
        EXPECT_EQ(c->ar_add_s_01d, 1.0);
    }
    for (const auto& c : rep.classes) EXPECT_EQ(c.auc_add_s, 1.0) << c.obj_id;
}

TEST(Report, WritesCsvJsonAndChart) {
    const auto dir = perfect_run("files");
    report::EvalInputs in{dir / "results.csv", dir / "data" / "000000", dir / "data" / "models", {}};
    const auto rep = report::run_eval(in);
    report::write_report(dir / "out", rep);
    const auto csv = io::read_file(dir / "out" / "metrics.csv");
    EXPECT_EQ(csv.rfind("obj_id,count,auc_add,auc_adds,auc_add_s,ar_add_s_0.1m,ar_add_s_0.1d\n", 0), 0u);
    EXPECT_NE(csv.find("\nMEAN,"), std::string::npos);
    const auto j = io::parse_json_file(dir / "out" / "metrics.json");
    EXPECT_EQ(j.at("classes").size(), rep.classes.size());
    EXPECT_EQ(j.at("mean").at("auc_add_s").get<double>(), 1.0);
    const auto svg = io::read_file(dir / "out" / "auc_per_class.svg");
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_NE(svg.find(">MEAN<"), std::string::npos);
    // One bar per class plus the mean bar.
    std::size_t bars = 0;
    for (auto p = svg.find("<rect"); p != std::string::npos; p = svg.find("<rect", p + 1)) ++bars;
    EXPECT_EQ(bars, rep.classes.size() + 1);
}

TEST(Report, MissingMeshIsUnknownClass) {
    const auto dir = perfect_run("missing");
    fs::remove(dir / "data" / "models" / "obj_000002.ply");
    fs::remove(dir / "data" / "models" / "models_info.json");
    report::EvalInputs in{dir / "results.csv", dir / "data" / "000000", dir / "data" / "models", {}};
    EXPECT_THROW(report::run_eval(in), UnknownClass);
}

TEST(Report, SplitRootAndSceneDirAgree) {
    const auto dir = perfect_run("split");
    const auto a = report::run_eval({dir / "results.csv", dir / "data" / "000000", dir / "data" / "models", {}});
    const auto b = report::run_eval({dir / "results.csv", dir / "data", dir / "data" / "models", {}});
    EXPECT_EQ(report::metrics_csv(a), report::metrics_csv(b));
}

TEST(KeypointCsv, RoundTripIsExact) {
    RngStream rng(5, "kp");
    std::vector<io::KeypointDetection> dets;
    for (int i = 0; i < 20; ++i) {
        io::KeypointDetection d{i % 3, i, 1 + i % 5, rng.uniform(), {}};
        for (int k = 0; k < (i % 2 ? 8 : 32); ++k) d.pixels.emplace_back(rng.uniform(-50, 700), rng.uniform(-50, 500));
        dets.push_back(d);
    }
    const auto text = io::format_keypoints(dets);
    const auto back = io::parse_keypoints(text);
    ASSERT_EQ(back.size(), dets.size());
    for (std::size_t i = 0; i < dets.size(); ++i) {
        EXPECT_EQ(back[i].scene_id, dets[i].scene_id);
        EXPECT_EQ(back[i].im_id, dets[i].im_id);
        EXPECT_EQ(back[i].obj_id, dets[i].obj_id);
        EXPECT_EQ(back[i].score, dets[i].score);
        ASSERT_EQ(back[i].pixels.size(), dets[i].pixels.size());
        for (std::size_t k = 0; k < dets[i].pixels.size(); ++k) EXPECT_TRUE(back[i].pixels[k] == dets[i].pixels[k]);
    }
    EXPECT_EQ(io::format_keypoints(back), text);
}

TEST(KeypointCsv, ErrorsCarryLineNumbers) {
    const std::string head = "scene_id,im_id,obj_id,score,keypoints\n";
    auto message = [](const std::string& text) {
        try {
            io::parse_keypoints(text, "k.csv");
        } catch (const ParseError& e) {
            return std::string(e.what());
        }
        return std::string("no error");
    };
    EXPECT_NE(message("a,b\n").find("k.csv:1"), std::string::npos);
    EXPECT_NE(message(head + "0,0,1,1,1 2 3\n").find("k.csv:2"), std::string::npos);
    EXPECT_NE(message(head + "0,0,1,1,1 2\n0,x,1,1,1 2\n").find("k.csv:3"), std::string::npos);
    EXPECT_NE(message(head + "0,0,1,1,1 2q\n").find("k.csv:2"), std::string::npos);
    EXPECT_NE(message("").find("empty"), std::string::npos);
    EXPECT_EQ(io::parse_keypoints(head).size(), 0u);
}
