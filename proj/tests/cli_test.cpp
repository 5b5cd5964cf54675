#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "setpose/data_io.hpp"

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::path(::testing::TempDir()) / ("setpose_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Runs the CLI with output captured to dir/log.txt; returns the exit code.
int run(const fs::path& dir, const std::string& args) {
    const std::string cmd = std::string(SETPOSE_CLI) + " " + args + " > " + (dir / "log.txt").string() + " 2>&1";
    const int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string slurp(const fs::path& p) { return setpose::io::read_file(p); }

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

const std::string kTinyToy =
    " --samples 10 --val-fraction 0.2 --dim 16 --heads 2 --queries 4 --encoder-layers 1 --decoder-layers 1"
    " --head-hidden 16 --ffn-hidden 16 --hidden 32 --batch 4 --seed 3";

}  // namespace

TEST(Cli, HelpAndVersionExitZero) {
    const auto d = scratch("help");
    EXPECT_EQ(run(d, "--help"), 0);
    EXPECT_NE(slurp(d / "log.txt").find("train-toy"), std::string::npos);
    EXPECT_EQ(run(d, "--version"), 0);
    EXPECT_NE(slurp(d / "log.txt").find("0.1.0"), std::string::npos);
    EXPECT_EQ(run(d, "eval --help"), 0);
}

TEST(Cli, BadUsageExitsTwo) {
    const auto d = scratch("usage");
    EXPECT_EQ(run(d, ""), 2);
    EXPECT_EQ(run(d, "no-such-command"), 2);
    EXPECT_EQ(run(d, "gen-data --samples many"), 2);
    EXPECT_EQ(run(d, "eval --results x.csv"), 2);  // missing required options
    EXPECT_EQ(run(d, "solve-pnp --data x --variant bb9"), 2);
    EXPECT_EQ(run(d, "solve-pnp --data x --method dlt"), 2);
    EXPECT_EQ(run(d, "gen-data --config"), 2);
}

TEST(Cli, RuntimeFailureExitsOne) {
    const auto d = scratch("runtime");
    EXPECT_EQ(run(d, "dump-attention --checkpoint " + (d / "missing.ckpt").string() + " --out " + d.string()), 1);
    EXPECT_EQ(run(d, "eval --results " + (d / "none.csv").string() + " --gt " + d.string() + " --models " +
                         d.string() + " --out " + (d / "e").string()),
              1);
}

TEST(Cli, GenDataIsByteIdenticalAndEchoesConfig) {
    const auto d = scratch("gen");
    ASSERT_EQ(run(d, "gen-data --samples 5 --seed 9 --out " + (d / "a").string()), 0);
    ASSERT_EQ(run(d, "gen-data --samples 5 --seed 9 --out " + (d / "b").string()), 0);
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(d / "a")) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), d / "a");
        ASSERT_TRUE(fs::exists(d / "b" / rel)) << rel;
        EXPECT_EQ(slurp(e.path()), slurp(d / "b" / rel)) << rel;
        ++files;
    }
    EXPECT_GT(files, 5u);
    const auto cfg = slurp(d / "a" / "config.txt");
    EXPECT_EQ(cfg.rfind("# setpose 0.1.0 gen-data\n", 0), 0u);
    EXPECT_NE(cfg.find("seed=9"), std::string::npos);
    EXPECT_EQ(cfg.find("out="), std::string::npos);
}

TEST(Cli, ConfigFileFillsUnsetFlagsOnly) {
    const auto d = scratch("config");
    {
        std::ofstream f(d / "run.cfg");
        f << "# comment\nsamples = 4\nseed=2\n";
    }
    ASSERT_EQ(run(d, "gen-data --config " + (d / "run.cfg").string() + " --seed 7 --out " + (d / "o").string()), 0);
    const auto cfg = slurp(d / "o" / "config.txt");
    EXPECT_NE(cfg.find("samples=4"), std::string::npos);
    EXPECT_NE(cfg.find("seed=7"), std::string::npos);
    {
        std::ofstream f(d / "bad.cfg");
        f << "samples 4\n";
    }
    EXPECT_EQ(run(d, "gen-data --config=" + (d / "bad.cfg").string() + " --out " + (d / "p").string()), 2);
}

TEST(Cli, OutputRootFromEnvironment) {
    const auto d = scratch("env");
    const std::string cmd = "SETPOSE_OUT_ROOT=" + d.string() + " " + SETPOSE_CLI + " gen-data --samples 1 > " +
                            (d / "log.txt").string() + " 2>&1";
    ASSERT_EQ(std::system(cmd.c_str()), 0);
    EXPECT_TRUE(fs::exists(d / "gen-data" / "config.txt"));
}

TEST(Cli, ResumeMatchesUninterruptedRun) {
    const auto d = scratch("resume");
    ASSERT_EQ(run(d, "train-toy" + kTinyToy + " --epochs 2 --out " + (d / "full").string()), 0);
    ASSERT_EQ(run(d, "train-toy" + kTinyToy + " --epochs 1 --out " + (d / "half").string()), 0);
    ASSERT_EQ(run(d, "train-toy" + kTinyToy + " --epochs 2 --resume " + (d / "half" / "checkpoint.ckpt").string() +
                         " --out " + (d / "rest").string()),
              0);
    EXPECT_NE(slurp(d / "log.txt").find("resumed at epoch 1"), std::string::npos);
    EXPECT_EQ(slurp(d / "full" / "checkpoint.ckpt"), slurp(d / "rest" / "checkpoint.ckpt"));
    const auto full = lines(slurp(d / "full" / "metrics.csv"));
    const auto rest = lines(slurp(d / "rest" / "metrics.csv"));
    ASSERT_EQ(full.size(), 3u);
    ASSERT_EQ(rest.size(), 2u);
    // Same epoch and step numbers, same loss; only the timing column differs.
    EXPECT_EQ(full[2].substr(0, full[2].rfind(',')), rest[1].substr(0, rest[1].rfind(',')));
    for (const char* f : {"val_keypoints.csv", "val_results.csv", "model.json"})
        EXPECT_EQ(slurp(d / "full" / f), slurp(d / "rest" / f)) << f;
}

TEST(Cli, TrainExportScoresWithEval) {
    const auto d = scratch("export");
    ASSERT_EQ(run(d, "train-toy" + kTinyToy + " --epochs 1 --out " + (d / "t").string()), 0);
    const auto t = d / "t";
    ASSERT_EQ(run(d, "eval --results " + (t / "val_results.csv").string() + " --gt " + (t / "val_gt").string() +
                         " --models " + (t / "models").string() + " --out " + (d / "e").string()),
              0);
    for (const char* f : {"metrics.csv", "metrics.json", "auc_per_class.svg", "config.txt"})
        EXPECT_TRUE(fs::exists(d / "e" / f)) << f;
    EXPECT_NE(slurp(d / "e" / "metrics.csv").find("\nMEAN,"), std::string::npos);
}

TEST(Cli, DumpAttentionRowsAreDistributions) {
    const auto d = scratch("attn");
    ASSERT_EQ(run(d, "train-toy" + kTinyToy + " --epochs 0 --out " + (d / "t").string()), 0);
    ASSERT_EQ(run(d, "dump-attention --checkpoint " + (d / "t" / "checkpoint.ckpt").string() + " --sample 1 --out " +
                         (d / "a").string()),
              0);
    for (const char* f : {"encoder_self.csv", "decoder_cross.csv"}) {
        const auto rows = lines(slurp(d / "a" / f));
        ASSERT_GT(rows.size(), 1u);
        EXPECT_EQ(rows[0], "layer,head,query,token,token_row,token_col,weight");
        std::map<std::string, double> sums;
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const auto& r = rows[i];
            std::size_t c = 0;
            for (int k = 0; k < 3; ++k) c = r.find(',', c) + 1;
            const double w = std::stod(r.substr(r.rfind(',') + 1));
            EXPECT_GE(w, 0.0);
            sums[r.substr(0, c)] += w;
        }
        for (const auto& [key, s] : sums) EXPECT_NEAR(s, 1.0, 1e-5) << f << " " << key;
    }
}

TEST(Cli, SolvePnpRecoversNoiselessPoses) {
    const auto d = scratch("pnp");
    ASSERT_EQ(run(d, "gen-data --samples 6 --seed 4 --out " + (d / "data").string()), 0);
    ASSERT_EQ(run(d, "solve-pnp --data " + (d / "data").string() + " --noise-px 0 --out " + (d / "p").string()), 0);
    const auto j = setpose::io::parse_json_file(d / "p" / "metrics.json");
    EXPECT_GT(j.at("mean").at("auc_add_s").get<double>(), 0.99);
    // Keypoint CSV input path, with RANSAC.
    ASSERT_EQ(run(d, "solve-pnp --data " + (d / "data").string() + " --variant bb8 --method ransac --outliers 0.25 --out " +
                         (d / "r").string()),
              0);
    EXPECT_TRUE(fs::exists(d / "r" / "results.csv"));
}

TEST(Cli, GradcheckPasses) {
    const auto d = scratch("grad");
    ASSERT_EQ(run(d, "gradcheck --trials 3 --out " + (d / "g").string()), 0);
    const auto rows = lines(slurp(d / "g" / "gradcheck.csv"));
    ASSERT_GT(rows.size(), 10u);
    for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(rows[i].back(), '1') << rows[i];
    // An impossible tolerance must fail the run.
    EXPECT_EQ(run(d, "gradcheck --trials 1 --tol 1e-300 --out " + (d / "h").string()), 1);
}

TEST(Cli, AblateWritesTables) {
    const auto d = scratch("ablate");
    ASSERT_EQ(run(d, "ablate --seeds 1 --classes 2 --train-instances 60 --test-instances 20 --epochs 1 --hidden 8"
                     " --head-hidden 8 --out " + (d / "a").string()),
              0);
    const auto table = lines(slurp(d / "a" / "table.csv"));
    ASSERT_EQ(table.size(), 10u);
    EXPECT_EQ(table[0].rfind("keypoints,method,", 0), 0u);
    EXPECT_EQ(lines(slurp(d / "a" / "seeds.csv")).size(), 10u);
    EXPECT_EQ(run(d, "ablate --seeds 0"), 2);
}
