#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string str() const { return path.string(); }
};

int run_cli(const std::string& args) {
    const std::string cmd = std::string(SGTA_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

TEST(CliGen, ProducesDatasetWithRequestedCounts) {
    TempDir dir("sgta_cli_gen");
    ASSERT_EQ(run_cli("gen --out " + dir.str() + " --videos 3 --frames 4 --seed 7"), 0);
    const std::string content = slurp(dir.path / "dataset.jsonl");
    ASSERT_FALSE(content.empty());
    // manifest + 12 frame records
    const auto lines = std::count(content.begin(), content.end(), '\n');
    EXPECT_EQ(lines, 1 + 3 * 4);
    const auto manifest = nlohmann::json::parse(content.substr(0, content.find('\n')));
    EXPECT_EQ(manifest.at("videos").get<int>(), 3);
    EXPECT_EQ(manifest.at("frames_per_video").get<int>(), 4);
    // frames 4 at fps 30 -> duration per video
    EXPECT_NEAR(manifest.at("duration_s").get<double>(), 4.0 / 30.0, 1e-12);
}

TEST(CliGen, RerunIsByteIdentical) {
    TempDir a("sgta_cli_gen_a"), b("sgta_cli_gen_b");
    const std::string flags = " --videos 2 --frames 3 --seed 99 --noise-sigma 1.5";
    ASSERT_EQ(run_cli("gen --out " + a.str() + flags), 0);
    ASSERT_EQ(run_cli("gen --out " + b.str() + flags), 0);
    EXPECT_EQ(slurp(a.path / "dataset.jsonl"), slurp(b.path / "dataset.jsonl"));
}

TEST(CliGen, RefusesOverwriteWithoutForce) {
    TempDir dir("sgta_cli_gen_force");
    ASSERT_EQ(run_cli("gen --out " + dir.str() + " --videos 1 --frames 2 --seed 1"), 0);
    EXPECT_EQ(run_cli("gen --out " + dir.str() + " --videos 1 --frames 2 --seed 1"), 3);
    EXPECT_EQ(run_cli("gen --out " + dir.str() + " --videos 1 --frames 2 --seed 1 --force"), 0);
}

TEST(CliGen, BadFlagsExitTwo) {
    EXPECT_EQ(run_cli("gen --videos 2"), 2);          // missing --out
    EXPECT_EQ(run_cli("gen --out /tmp/x --bogus 1"), 2);
    EXPECT_EQ(run_cli("definitely-not-a-command"), 2);
}

TEST(CliTrack, ZeroNoiseDatasetScoresPerfectAuc) {
    TempDir data("sgta_cli_track_data"), out("sgta_cli_track_out");
    ASSERT_EQ(run_cli("gen --out " + data.str() +
                      " --videos 2 --frames 4 --seed 3 --noise-sigma 0"),
              0);
    ASSERT_EQ(run_cli("track --data " + data.str() + " --out " + out.str()), 0);
    const auto report = nlohmann::json::parse(slurp(out.path / "report.json"));
    EXPECT_NEAR(report.at("add").at("auc").get<double>(), 1.0, 1e-9);
    EXPECT_NEAR(report.at("pck").at("auc").get<double>(), 1.0, 1e-6);
    EXPECT_EQ(report.at("thresholds").at("pck_px").get<double>(), 12.0);
    EXPECT_EQ(report.at("thresholds").at("add_mm").get<double>(), 60.0);
    EXPECT_TRUE(fs::exists(out.path / "results.jsonl"));
    EXPECT_TRUE(fs::exists(out.path / "timing.log"));  // timings live in the sidecar only
    const std::string results = slurp(out.path / "results.jsonl");
    EXPECT_EQ(std::count(results.begin(), results.end(), '\n'), 2 * 4);
    EXPECT_EQ(results.find("timing"), std::string::npos);
}

TEST(CliTrack, AblationFlagsAreAccepted) {
    TempDir data("sgta_cli_track_fl_data"), out("sgta_cli_track_fl_out");
    ASSERT_EQ(run_cli("gen --out " + data.str() +
                      " --videos 1 --frames 3 --seed 5 --noise-sigma 1"),
              0);
    ASSERT_EQ(run_cli("track --data " + data.str() + " --out " + out.str() +
                      " --no-sgf --no-tca --no-prf"),
              0);
}

TEST(CliTrack, AllFramesFailedExitsFour) {
    TempDir data("sgta_cli_track_fail_data"), out("sgta_cli_track_fail_out");
    ASSERT_EQ(run_cli("gen --out " + data.str() +
                      " --videos 1 --frames 3 --seed 5 --occlusion-prob 1.0"),
              0);
    EXPECT_EQ(run_cli("track --data " + data.str() + " --out " + out.str() + " --no-sgf"), 4);
}

TEST(CliTrack, RerunIsByteIdentical) {
    TempDir data("sgta_cli_track_det_data"), a("sgta_cli_track_det_a"), b("sgta_cli_track_det_b");
    ASSERT_EQ(run_cli("gen --out " + data.str() +
                      " --videos 2 --frames 3 --seed 11 --noise-sigma 1.5"),
              0);
    ASSERT_EQ(run_cli("track --data " + data.str() + " --out " + a.str() + " --seed 4"), 0);
    ASSERT_EQ(run_cli("track --data " + data.str() + " --out " + b.str() + " --seed 4"), 0);
    EXPECT_EQ(slurp(a.path / "results.jsonl"), slurp(b.path / "results.jsonl"));
    EXPECT_EQ(slurp(a.path / "report.json"), slurp(b.path / "report.json"));
}

TEST(CliEval, ReproducesTrackReport) {
    TempDir data("sgta_cli_eval_data"), track("sgta_cli_eval_track"), eval("sgta_cli_eval_out");
    ASSERT_EQ(run_cli("gen --out " + data.str() +
                      " --videos 2 --frames 3 --seed 13 --noise-sigma 1"),
              0);
    ASSERT_EQ(run_cli("track --data " + data.str() + " --out " + track.str()), 0);
    ASSERT_EQ(run_cli("eval --results " + (track.path / "results.jsonl").string() + " --data " +
                      data.str() + " --out " + eval.str() + " --curves"),
              0);
    const auto a = nlohmann::json::parse(slurp(track.path / "report.json"));
    const auto b = nlohmann::json::parse(slurp(eval.path / "report.json"));
    EXPECT_EQ(a.at("pck"), b.at("pck"));
    EXPECT_EQ(a.at("add"), b.at("add"));
    const std::string curve = slurp(eval.path / "pck_curve.csv");
    EXPECT_EQ(std::count(curve.begin(), curve.end(), '\n'), 1 + 256);
}

TEST(CliMultiframe, EmitsCsvSweep) {
    TempDir data("sgta_cli_mf_data"), out("sgta_cli_mf_out");
    ASSERT_EQ(run_cli("gen --out " + data.str() +
                      " --videos 1 --frames 8 --seed 17 --noise-sigma 1"),
              0);
    ASSERT_EQ(run_cli("multiframe --data " + data.str() + " --out " + out.str() +
                      " --sweep 1 2 4 8 --ransac-threshold 6"),
              0);
    const std::string csv = slurp(out.path / "multiframe.csv");
    ASSERT_FALSE(csv.empty());
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 4);
    EXPECT_NE(csv.find("l,mean_add_mm,median_add_mm,min_add_mm,max_add_mm"), std::string::npos);
}

TEST(CliAblate, EmitsFourRows) {
    TempDir data("sgta_cli_ab_data"), out("sgta_cli_ab_out");
    ASSERT_EQ(run_cli("gen --out " + data.str() +
                      " --videos 1 --frames 3 --seed 19 --noise-sigma 1"),
              0);
    ASSERT_EQ(run_cli("ablate --data " + data.str() + " --out " + out.str() +
                      " --ransac-threshold 4.5"),
              0);
    const std::string csv = slurp(out.path / "ablate.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 4);
    EXPECT_NE(csv.find("baseline,0,0,0"), std::string::npos);
    EXPECT_NE(csv.find("sgf+tca+prf,1,1,1"), std::string::npos);
}

TEST(CliTrack, MissingDatasetExitsThree) {
    TempDir out("sgta_cli_missing_out");
    EXPECT_EQ(run_cli("track --data /nonexistent/path --out " + out.str()), 3);
}

}  // namespace
