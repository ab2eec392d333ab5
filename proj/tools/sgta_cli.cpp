// Command-line entry points for dataset generation, online tracking,
// evaluation, multi-frame PnP sweeps and the ablation grid.
//
// Exit codes: 0 success, 2 configuration/parse failure, 3 I/O failure,
// 4 every frame failed to solve.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "sgta/sgta.hpp"

namespace fs = std::filesystem;
using sgta::Json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitAllFailed = 4;

struct IoFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct AllFramesFailed : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void ensure_output_dir(const std::string& dir, const std::string& primary_file, bool force) {
    fs::create_directories(dir);
    const fs::path primary = fs::path(dir) / primary_file;
    if (fs::exists(primary) && !force)
        throw IoFailure("output " + primary.string() + " exists; pass --force to overwrite");
}

Json report_to_json(const sgta::MetricsReport& r) {
    Json j;
    j["pck"] = {{"auc", r.pck_auc}, {"median_px", r.pck_median_px}};
    j["add"] = {{"auc", r.add_auc},
                {"median_mm", std::isfinite(r.add_median_mm) ? Json(r.add_median_mm) : Json()},
                {"median_finite_mm", std::isfinite(r.add_median_finite_mm)
                                         ? Json(r.add_median_finite_mm)
                                         : Json()}};
    j["n_frames"] = r.n_frames;
    j["n_keypoints_evaluated"] = r.n_keypoints_evaluated;
    j["n_failed_frames"] = r.n_failed_frames;
    j["thresholds"] = {{"pck_px", r.pck_threshold_px}, {"add_mm", r.add_threshold_mm}};
    return j;
}

void print_report(const sgta::MetricsReport& r) {
    std::cout << "  PCK AUC@" << r.pck_threshold_px << "px: " << r.pck_auc
              << "  median: " << r.pck_median_px << " px\n";
    std::cout << "  ADD AUC@" << r.add_threshold_mm << "mm: " << r.add_auc
              << "  median: " << r.add_median_mm << " mm (finite-only: " << r.add_median_finite_mm
              << ")\n";
    std::cout << "  frames: " << r.n_frames << "  failed solves: " << r.n_failed_frames << "\n";
}

// --- gen --------------------------------------------------------------------

struct GenOptions {
    sgta::SimConfig sim;
    std::string out_dir;
    std::string chain_file;
    bool force = false;
};

int run_gen(const GenOptions& opt) {
    ensure_output_dir(opt.out_dir, "dataset.jsonl", opt.force);
    const sgta::KinematicChain chain =
        opt.chain_file.empty() ? sgta::default_chain() : sgta::load_chain(opt.chain_file);
    const auto violations = sgta::validate_chain(chain);
    if (!violations.empty()) {
        std::cerr << "invalid chain: " << violations.front() << "\n";
        return kExitConfig;
    }
    const sgta::Dataset ds = sgta::generate_dataset(opt.sim, chain);
    const std::string path = (fs::path(opt.out_dir) / "dataset.jsonl").string();
    sgta::write_dataset(ds, path);
    std::cout << "generated " << opt.sim.videos << " videos x " << opt.sim.frames_per_video
              << " frames (seed " << opt.sim.seed << ", " << ds.manifest.duration_s
              << " s per video) -> " << path << "\n";
    return 0;
}

// --- shared tracker options ---------------------------------------------------

struct TrackOptions {
    std::string data;
    std::string out_dir;
    sgta::AblationFlags flags;
    sgta::TrackerConfig tracker;
    std::uint64_t weights_seed = 0;
    std::string weights_file;
    bool training_mode = false;
    bool force = false;
};

std::string dataset_path(const std::string& data) {
    const fs::path p(data);
    if (fs::is_directory(p)) return (p / "dataset.jsonl").string();
    return data;
}

sgta::FusionWeights make_weights(const TrackOptions& opt) {
    if (!opt.weights_file.empty())
        return sgta::load_fusion_weights(opt.tracker.fusion, opt.weights_file);
    return sgta::make_fusion_weights(opt.tracker.fusion, opt.weights_seed);
}

void write_results_jsonl(const sgta::Dataset& ds, const sgta::TrackRunResult& run,
                         const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoFailure("cannot open " + path);
    for (std::size_t v = 0; v < run.sequences.size(); ++v) {
        for (std::size_t f = 0; f < run.sequences[v].frames.size(); ++f) {
            const sgta::FrameResult& r = run.sequences[v].frames[f];
            Json j;
            j["video"] = ds.videos[v].video_index;
            j["frame"] = static_cast<int>(f);
            j["pose"] = r.estimate ? sgta::pose_to_json(*r.estimate) : Json();
            j["solve_failed"] = r.solve_failed;
            j["add_mm"] = std::isfinite(r.add_mm) ? Json(r.add_mm) : Json();
            Json kps = Json::array();
            for (const auto& kp : r.keypoints) {
                kps.push_back(Json{{"id", kp.id},
                                   {"p", {kp.p.x(), kp.p.y()}},
                                   {"confidence", kp.confidence},
                                   {"in_frame", kp.in_frame}});
            }
            j["keypoints"] = kps;
            out << j.dump() << "\n";
        }
    }
}

void write_timing_log(const sgta::TrackRunResult& run, const std::string& path) {
    std::ofstream out(path);
    for (std::size_t v = 0; v < run.sequences.size(); ++v)
        out << "video=" << v << " mean_fps=" << run.sequences[v].mean_fps << "\n";
    out << "overall mean_fps=" << run.mean_fps << "\n";
}

int run_track(const TrackOptions& opt) {
    ensure_output_dir(opt.out_dir, "results.jsonl", opt.force);
    const sgta::Dataset ds = sgta::read_dataset(dataset_path(opt.data));
    TrackOptions local = opt;
    if (opt.training_mode) local.tracker.mode = sgta::PriorMode::kTraining;
    const sgta::FusionWeights weights = make_weights(local);
    const sgta::TrackRunResult run = sgta::track_dataset(ds, local.tracker, opt.flags, weights);

    write_results_jsonl(ds, run, (fs::path(opt.out_dir) / "results.jsonl").string());
    std::ofstream report_out((fs::path(opt.out_dir) / "report.json").string());
    if (!report_out) throw IoFailure("cannot open report.json");
    report_out << report_to_json(run.overall).dump(2) << "\n";
    write_timing_log(run, (fs::path(opt.out_dir) / "timing.log").string());

    std::cout << "tracked " << run.sequences.size() << " videos, " << run.total_frames
              << " frames (sgf=" << opt.flags.sgf << " tca=" << opt.flags.tca
              << " prf=" << opt.flags.prf << ")\n";
    print_report(run.overall);
    if (run.total_frames > 0 && run.failed_frames == run.total_frames)
        throw AllFramesFailed("every frame failed to solve");
    return 0;
}

// --- eval ---------------------------------------------------------------------

int run_eval(const std::string& results_file, const std::string& data, const std::string& out_dir,
             bool curves, bool force) {
    ensure_output_dir(out_dir, "report.json", force);
    const sgta::Dataset ds = sgta::read_dataset(dataset_path(data));
    std::ifstream in(results_file);
    if (!in) throw IoFailure("cannot open " + results_file);

    std::vector<double> pixel_errors;
    std::vector<double> add_errors;
    std::size_t n_frames = 0, failed = 0;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        Json j;
        try {
            j = Json::parse(line);
        } catch (const Json::exception& e) {
            throw sgta::FormatError(std::string("bad results line: ") + e.what());
        }
        const int v = j.at("video").get<int>();
        const int f = j.at("frame").get<int>();
        if (v < 0 || v >= static_cast<int>(ds.videos.size()) || f < 0 ||
            f >= static_cast<int>(ds.videos[v].frames.size()))
            throw sgta::FormatError("results refer to frames outside the dataset");
        const sgta::FrameRecord& rec = ds.videos[v].frames[f];
        ++n_frames;
        if (j.at("solve_failed").get<bool>()) ++failed;
        if (!j.at("pose").is_null()) {
            const sgta::PoseSE3 pose = sgta::pose_from_json(j.at("pose"));
            add_errors.push_back(sgta::add_error(pose, rec.pose, rec.kp3d));
        } else {
            add_errors.push_back(std::numeric_limits<double>::infinity());
        }
        sgta::KeypointSet2D kps;
        for (const auto& kj : j.at("keypoints")) {
            sgta::Keypoint2D kp;
            kp.id = kj.at("id").get<int>();
            kp.p = Eigen::Vector2d(kj.at("p").at(0).get<double>(), kj.at("p").at(1).get<double>());
            kp.confidence = kj.at("confidence").get<double>();
            kp.in_frame = kj.at("in_frame").get<bool>();
            kps.kps.push_back(kp);
        }
        const auto errs = sgta::pck_errors(kps, rec.kp2d_gt);
        pixel_errors.insert(pixel_errors.end(), errs.begin(), errs.end());
    }
    const sgta::MetricsReport report = sgta::make_report(pixel_errors, add_errors, n_frames, failed);
    std::ofstream report_out((fs::path(out_dir) / "report.json").string());
    report_out << report_to_json(report).dump(2) << "\n";
    if (curves) {
        auto dump_curve = [&](const std::vector<double>& errors, double threshold,
                              const std::string& name) {
            std::ofstream c((fs::path(out_dir) / name).string());
            c << "threshold,accuracy\n";
            for (const auto& [tau, acc] : sgta::accuracy_curve(errors, threshold))
                c << sgta::format_double(tau) << "," << sgta::format_double(acc) << "\n";
        };
        dump_curve(pixel_errors, sgta::kPckThresholdPx, "pck_curve.csv");
        dump_curve(add_errors, sgta::kAddThresholdMm, "add_curve.csv");
    }
    std::cout << "evaluated " << n_frames << " frames\n";
    print_report(report);
    return 0;
}

// --- multiframe ------------------------------------------------------------------

int run_multiframe(const std::string& data, const std::string& out_dir, int video,
                   std::vector<int> sweep, std::size_t max_combinations, std::uint64_t seed,
                   const sgta::RansacConfig& ransac, bool force) {
    ensure_output_dir(out_dir, "multiframe.csv", force);
    const sgta::Dataset ds = sgta::read_dataset(dataset_path(data));
    if (video < 0 || video >= static_cast<int>(ds.videos.size()))
        throw IoFailure("video index out of range");
    if (sweep.empty()) sweep = {1, 2, 5, 10, 15, 20};
    std::sort(sweep.begin(), sweep.end());
    const auto rows =
        sgta::multiframe_sweep(ds.videos[video], sweep, ransac, max_combinations, seed);
    if (rows.empty()) throw IoFailure("sweep produced no rows (video too short?)");
    sgta::write_multiframe_csv(rows, (fs::path(out_dir) / "multiframe.csv").string());
    std::cout << "multiframe sweep on video " << video << " (" << ds.videos[video].frames.size()
              << " frames)\n";
    std::cout << "  l  combos  mean_mm  median_mm\n";
    for (const auto& r : rows)
        std::cout << "  " << r.l << "  " << r.combinations << "  " << r.mean_add_mm << "  "
                  << r.median_add_mm << "\n";
    return 0;
}

// --- ablate -------------------------------------------------------------------------

int run_ablate(const TrackOptions& opt) {
    ensure_output_dir(opt.out_dir, "ablate.csv", opt.force);
    const sgta::Dataset ds = sgta::read_dataset(dataset_path(opt.data));
    const sgta::FusionWeights weights = make_weights(opt);
    const auto rows = sgta::run_ablation_grid(ds, opt.tracker, weights);

    std::ofstream csv((fs::path(opt.out_dir) / "ablate.csv").string());
    if (!csv) throw IoFailure("cannot open ablate.csv");
    csv << "name,sgf,tca,prf,pck_auc,pck_median_px,add_auc,add_median_mm,mean_add_mm,failed_frames\n";
    for (const auto& r : rows) {
        csv << r.name << "," << r.flags.sgf << "," << r.flags.tca << "," << r.flags.prf << ","
            << sgta::format_double(r.report.pck_auc) << ","
            << sgta::format_double(r.report.pck_median_px) << ","
            << sgta::format_double(r.report.add_auc) << ","
            << sgta::format_double(r.report.add_median_mm) << ","
            << sgta::format_double(r.mean_add_mm) << "," << r.failed_frames << "\n";
    }
    std::cout << "ablation grid over " << ds.videos.size() << " videos\n";
    for (const auto& r : rows) {
        std::cout << "  [" << (r.flags.sgf ? "SGF" : "   ") << " " << (r.flags.tca ? "TCA" : "   ")
                  << " " << (r.flags.prf ? "PRF" : "   ") << "] mean ADD " << r.mean_add_mm
                  << " mm, ADD AUC " << r.report.add_auc << ", PCK AUC " << r.report.pck_auc
                  << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sgta: structure-prior guided temporal pose tracking toolkit"};
    app.require_subcommand(1);
    app.set_config("--config", "", "TOML config file (long option names as keys)");

    GenOptions gen;
    auto* cmd_gen = app.add_subcommand("gen", "generate a synthetic tracking dataset");
    cmd_gen->add_option("--out", gen.out_dir, "output directory")->required();
    cmd_gen->add_option("--videos", gen.sim.videos, "number of videos");
    cmd_gen->add_option("--frames", gen.sim.frames_per_video, "frames per video");
    cmd_gen->add_option("--seed", gen.sim.seed, "master seed");
    cmd_gen->add_option("--fps", gen.sim.fps, "frames per second");
    cmd_gen->add_option("--noise-sigma", gen.sim.detector_noise_sigma,
                        "detector noise sigma, pixels");
    cmd_gen->add_option("--outlier-prob", gen.sim.outlier_prob, "outlier probability");
    cmd_gen->add_option("--outlier-magnitude", gen.sim.outlier_magnitude,
                        "outlier displacement, pixels");
    cmd_gen->add_option("--occlusion-prob", gen.sim.occlusion_prob, "occlusion probability");
    cmd_gen->add_option("--joint-velocity-max", gen.sim.joint_velocity_max,
                        "max joint velocity, rad/s");
    cmd_gen->add_option("--camera-distance-min", gen.sim.camera_distance_min, "meters");
    cmd_gen->add_option("--camera-distance-max", gen.sim.camera_distance_max, "meters");
    cmd_gen->add_option("--chain", gen.chain_file, "kinematic chain JSON file");
    cmd_gen->add_flag("--force", gen.force, "overwrite existing outputs");

    auto add_tracker_options = [](CLI::App* cmd, TrackOptions& opt) {
        cmd->add_option("--data", opt.data, "dataset file or directory")->required();
        cmd->add_option("--out", opt.out_dir, "output directory")->required();
        cmd->add_option("--seed", opt.tracker.seed, "tracker seed (augmentation + solver)");
        cmd->add_option("--weights-seed", opt.weights_seed, "fusion weight init seed");
        cmd->add_option("--weights", opt.weights_file, "fusion weights file to load");
        cmd->add_option("--ransac-iterations", opt.tracker.ransac.iterations);
        cmd->add_option("--ransac-threshold", opt.tracker.ransac.inlier_threshold, "pixels");
        cmd->add_flag("--training-mode", opt.training_mode,
                      "apply the prior augmentation (training-time behavior)");
        cmd->add_flag("--force", opt.force, "overwrite existing outputs");
    };

    TrackOptions track;
    auto* cmd_track = app.add_subcommand("track", "run the online tracker over a dataset");
    add_tracker_options(cmd_track, track);
    cmd_track->add_flag("--no-sgf{false}", track.flags.sgf, "disable the structure prior");
    cmd_track->add_flag("--no-tca{false}", track.flags.tca, "disable temporal cross attention");
    cmd_track->add_flag("--no-prf{false}", track.flags.prf, "disable the pose refiner");
    cmd_track->add_flag("--network-detections{true}", track.tracker.use_network_detections,
                        "decode keypoints from the toy network head");

    std::string eval_results, eval_data, eval_out;
    bool eval_curves = false, eval_force = false;
    auto* cmd_eval = app.add_subcommand("eval", "recompute metrics from a results file");
    cmd_eval->add_option("--results", eval_results, "results.jsonl from track")->required();
    cmd_eval->add_option("--data", eval_data, "dataset file or directory")->required();
    cmd_eval->add_option("--out", eval_out, "output directory")->required();
    cmd_eval->add_flag("--curves", eval_curves, "emit accuracy curve CSVs");
    cmd_eval->add_flag("--force", eval_force, "overwrite existing outputs");

    std::string mf_data, mf_out;
    int mf_video = 0;
    std::vector<int> mf_sweep;
    std::size_t mf_cap = 2500;
    std::uint64_t mf_seed = 0;
    sgta::RansacConfig mf_ransac;
    bool mf_force = false;
    auto* cmd_mf = app.add_subcommand("multiframe", "multi-frame PnP accuracy sweep");
    cmd_mf->add_option("--data", mf_data, "dataset file or directory")->required();
    cmd_mf->add_option("--out", mf_out, "output directory")->required();
    cmd_mf->add_option("--video", mf_video, "video index to sweep");
    cmd_mf->add_option("--sweep", mf_sweep, "frame counts l (default 1 2 5 10 15 20)");
    cmd_mf->add_option("--max-combinations", mf_cap, "combination cap per l");
    cmd_mf->add_option("--seed", mf_seed, "combination sampling seed");
    cmd_mf->add_option("--ransac-iterations", mf_ransac.iterations);
    cmd_mf->add_option("--ransac-threshold", mf_ransac.inlier_threshold, "pixels");
    cmd_mf->add_flag("--force", mf_force, "overwrite existing outputs");

    TrackOptions ablate;
    auto* cmd_ablate = app.add_subcommand("ablate", "run the four-row ablation grid");
    add_tracker_options(cmd_ablate, ablate);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (cmd_gen->parsed()) return run_gen(gen);
        if (cmd_track->parsed()) return run_track(track);
        if (cmd_eval->parsed())
            return run_eval(eval_results, eval_data, eval_out, eval_curves, eval_force);
        if (cmd_mf->parsed())
            return run_multiframe(mf_data, mf_out, mf_video, mf_sweep, mf_cap, mf_seed, mf_ransac,
                                  mf_force);
        if (cmd_ablate->parsed()) return run_ablate(ablate);
    } catch (const AllFramesFailed& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitAllFailed;
    } catch (const sgta::FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const sgta::ChecksumError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const IoFailure& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    }
    return 0;
}
