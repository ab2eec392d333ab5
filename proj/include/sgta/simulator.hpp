#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "sgta/beliefmap.hpp"
#include "sgta/errors.hpp"
#include "sgta/geometry.hpp"
#include "sgta/json_io.hpp"
#include "sgta/kinematics.hpp"
#include "sgta/rng.hpp"

namespace sgta {

struct SimConfig {
    int videos = 10;
    int frames_per_video = 30;
    double fps = 30.0;
    double joint_velocity_max = 1.0;      // rad/s
    double camera_distance_min = 1.4;     // meters
    double camera_distance_max = 2.0;
    double detector_noise_sigma = 2.0;    // pixels
    double outlier_prob = 0.0;
    double outlier_magnitude = 50.0;      // pixels
    double occlusion_prob = 0.0;
    std::uint64_t seed = 0;
};

struct FrameRecord {
    int video = 0;
    int frame = 0;
    JointConfig q;
    PoseSE3 pose;            // constant within a video
    KeypointSet3D kp3d;
    KeypointSet2D kp2d_gt;   // exact projections; in_frame = inside raw bounds
    KeypointSet2D kp2d_det;  // pseudo-detector output; in_frame = detection available
};

struct SequenceSample {
    int video_index = 0;
    PoseSE3 pose;
    CameraIntrinsics intrinsics;
    std::vector<FrameRecord> frames;
};

struct DatasetManifest {
    int videos = 0;
    int frames_per_video = 0;
    double duration_s = 0.0;  // per video
    std::uint64_t seed = 0;
    int version = 1;
    SimConfig config;
    CameraIntrinsics intrinsics;
    KinematicChain chain;
    std::vector<int> video_line_offsets;  // 1-based line index of each video's first frame
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<SequenceSample> videos;
};

// Fixed synthetic camera: fx = fy = 600 px, 640x480, principal point centered.
inline CameraIntrinsics default_intrinsics() {
    CameraIntrinsics k;
    k.fx = 600.0;
    k.fy = 600.0;
    k.cx = 320.0;
    k.cy = 240.0;
    k.width = 640;
    k.height = 480;
    return k;
}

// Samples a camera on a spherical shell around the robot base, looking at
// the base origin with a random roll about the optical axis. The returned
// pose maps robot-base coordinates into the camera frame.
inline std::pair<CameraIntrinsics, PoseSE3> sample_camera(const SimConfig& cfg, Rng& rng) {
    const double distance = rng.uniform(cfg.camera_distance_min, cfg.camera_distance_max);
    // Uniform direction on the sphere.
    const double z = rng.uniform(-1.0, 1.0);
    const double phi = rng.uniform(0.0, 2.0 * M_PI);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const Eigen::Vector3d center = distance * Eigen::Vector3d(r * std::cos(phi), r * std::sin(phi), z);

    const Eigen::Vector3d forward = (-center).normalized();  // optical axis hits the base origin
    Eigen::Vector3d up = Eigen::Vector3d::UnitZ();
    if (std::abs(forward.dot(up)) > 0.999) up = Eigen::Vector3d::UnitX();
    Eigen::Vector3d right = up.cross(forward).normalized();
    Eigen::Vector3d down = forward.cross(right);
    const double roll = rng.uniform(0.0, 2.0 * M_PI);
    const Eigen::Vector3d rx = std::cos(roll) * right + std::sin(roll) * down;
    const Eigen::Vector3d ry = -std::sin(roll) * right + std::cos(roll) * down;

    PoseSE3 pose;
    pose.rotation.row(0) = rx;
    pose.rotation.row(1) = ry;
    pose.rotation.row(2) = forward;
    pose.translation = -(pose.rotation * center);
    return {default_intrinsics(), pose};
}

// Pseudo-detector noise model: per-axis Gaussian noise, occasional outliers
// displaced by exactly outlier_magnitude in a random direction, and
// occlusion drops. Positions are corrupted in place; bounds checks are the
// caller's concern.
inline KeypointSet2D corrupt_detections(const KeypointSet2D& kps, const SimConfig& cfg, Rng& rng) {
    KeypointSet2D out = kps;
    for (Keypoint2D& kp : out) {
        const bool occluded = rng.bernoulli(cfg.occlusion_prob);
        const bool outlier = rng.bernoulli(cfg.outlier_prob);
        if (outlier) {
            const double angle = rng.uniform(0.0, 2.0 * M_PI);
            kp.p += cfg.outlier_magnitude * Eigen::Vector2d(std::cos(angle), std::sin(angle));
        } else {
            kp.p.x() += rng.normal(0.0, cfg.detector_noise_sigma);
            kp.p.y() += rng.normal(0.0, cfg.detector_noise_sigma);
        }
        if (occluded) {
            kp.in_frame = false;
            kp.confidence = 0.0;
        }
    }
    return out;
}

namespace detail {

struct JointTrajectory {
    std::vector<double> center, amplitude, freq_hz, phase;

    double angle(std::size_t joint, double t) const {
        return center[joint] +
               amplitude[joint] * std::sin(2.0 * M_PI * freq_hz[joint] * t + phase[joint]);
    }
};

// Smooth sinusoids with the per-step displacement capped by construction:
// amplitude * 2*pi*freq <= joint_velocity_max.
inline JointTrajectory sample_trajectory(const SimConfig& cfg, std::size_t joints, Rng& rng) {
    JointTrajectory traj;
    traj.center.resize(joints);
    traj.amplitude.resize(joints);
    traj.freq_hz.resize(joints);
    traj.phase.resize(joints);
    for (std::size_t j = 0; j < joints; ++j) {
        traj.center[j] = rng.uniform(-0.4, 0.4);
        traj.freq_hz[j] = rng.uniform(0.05, 0.4);
        const double amp_cap =
            std::min(cfg.joint_velocity_max / (2.0 * M_PI * traj.freq_hz[j]), 0.6);
        traj.amplitude[j] = rng.uniform(0.2, 1.0) * amp_cap;
        traj.phase[j] = rng.uniform(0.0, 2.0 * M_PI);
    }
    return traj;
}

}  // namespace detail

// Generates one video: fixed camera, moving arm, exact projections and
// pseudo-detections. Pure function of (cfg, chain, rng state).
inline SequenceSample gen_sequence(const SimConfig& cfg, const KinematicChain& chain, Rng& rng,
                                   int video_index = 0) {
    SequenceSample sample;
    sample.video_index = video_index;
    auto [intrinsics, pose] = sample_camera(cfg, rng);
    sample.intrinsics = intrinsics;
    sample.pose = pose;

    const auto traj = detail::sample_trajectory(cfg, chain.links.size(), rng);
    sample.frames.reserve(cfg.frames_per_video);
    for (int f = 0; f < cfg.frames_per_video; ++f) {
        FrameRecord rec;
        rec.video = video_index;
        rec.frame = f;
        rec.pose = pose;
        const double t = static_cast<double>(f) / cfg.fps;
        rec.q.angles.resize(chain.links.size());
        for (std::size_t j = 0; j < chain.links.size(); ++j) rec.q.angles[j] = traj.angle(j, t);
        rec.kp3d = fk_keypoints(chain, rec.q);

        rec.kp2d_gt.kps.reserve(rec.kp3d.size());
        for (std::size_t i = 0; i < rec.kp3d.size(); ++i) {
            Keypoint2D kp;
            kp.id = rec.kp3d.ids[i];
            const auto uv = try_project(intrinsics, pose, rec.kp3d.points[i]);
            if (uv) {
                kp.p = *uv;
                kp.in_frame = kp.p.x() >= 0.0 && kp.p.y() >= 0.0 && kp.p.x() < intrinsics.width &&
                              kp.p.y() < intrinsics.height;
            } else {
                kp.p = Eigen::Vector2d(1e6, 1e6);  // behind the camera
                kp.in_frame = false;
            }
            rec.kp2d_gt.kps.push_back(kp);
        }

        rec.kp2d_det = corrupt_detections(rec.kp2d_gt, cfg, rng);
        for (Keypoint2D& kp : rec.kp2d_det) {
            // A detector only reports peaks inside the image.
            if (kp.p.x() < 0.0 || kp.p.y() < 0.0 || kp.p.x() >= intrinsics.width ||
                kp.p.y() >= intrinsics.height)
                kp.in_frame = false;
        }
        sample.frames.push_back(std::move(rec));
    }
    return sample;
}

inline Dataset generate_dataset(const SimConfig& cfg, const KinematicChain& chain) {
    Dataset ds;
    ds.manifest.videos = cfg.videos;
    ds.manifest.frames_per_video = cfg.frames_per_video;
    ds.manifest.duration_s = cfg.frames_per_video / cfg.fps;
    ds.manifest.seed = cfg.seed;
    ds.manifest.config = cfg;
    ds.manifest.intrinsics = default_intrinsics();
    ds.manifest.chain = chain;
    ds.videos.reserve(cfg.videos);
    for (int v = 0; v < cfg.videos; ++v) {
        Rng rng = Rng::derive(cfg.seed, static_cast<std::uint64_t>(v));
        ds.videos.push_back(gen_sequence(cfg, chain, rng, v));
        ds.manifest.video_line_offsets.push_back(2 + v * cfg.frames_per_video);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Dataset file format: JSON lines. Line 1 is the manifest; every following
// line is one frame record with a trailing crc32 over its canonical
// serialization. All floats are written with 17 significant digits.
// ---------------------------------------------------------------------------

namespace detail {

inline void append_vec2_list(std::string& s, const KeypointSet2D& kps) {
    s += "[";
    for (std::size_t i = 0; i < kps.size(); ++i) {
        if (i) s += ",";
        s += "[";
        append_double(s, kps[i].p.x());
        s += ",";
        append_double(s, kps[i].p.y());
        s += "]";
    }
    s += "]";
}

inline std::string serialize_record(const FrameRecord& rec) {
    std::string s = "{\"video\":" + std::to_string(rec.video) +
                    ",\"frame\":" + std::to_string(rec.frame) + ",\"q\":[";
    for (std::size_t j = 0; j < rec.q.angles.size(); ++j) {
        if (j) s += ",";
        append_double(s, rec.q.angles[j]);
    }
    s += "],\"pose\":{\"rotation\":[";
    for (int r = 0; r < 3; ++r) {
        if (r) s += ",";
        s += "[";
        for (int c = 0; c < 3; ++c) {
            if (c) s += ",";
            append_double(s, rec.pose.rotation(r, c));
        }
        s += "]";
    }
    s += "],\"translation\":[";
    for (int i = 0; i < 3; ++i) {
        if (i) s += ",";
        append_double(s, rec.pose.translation[i]);
    }
    s += "]},\"kp3d\":[";
    for (std::size_t i = 0; i < rec.kp3d.size(); ++i) {
        if (i) s += ",";
        s += "[";
        append_double(s, rec.kp3d.points[i].x());
        s += ",";
        append_double(s, rec.kp3d.points[i].y());
        s += ",";
        append_double(s, rec.kp3d.points[i].z());
        s += "]";
    }
    s += "],\"kp2d_gt\":";
    append_vec2_list(s, rec.kp2d_gt);
    s += ",\"kp2d_det\":";
    append_vec2_list(s, rec.kp2d_det);
    s += ",\"visible\":[";
    for (std::size_t i = 0; i < rec.kp2d_det.size(); ++i) {
        if (i) s += ",";
        s += rec.kp2d_det[i].in_frame ? "true" : "false";
    }
    s += "]}";
    return s;
}

inline std::string serialize_manifest(const DatasetManifest& m) {
    std::string s = "{\"magic\":\"sgta-dataset\",\"version\":" + std::to_string(m.version) +
                    ",\"videos\":" + std::to_string(m.videos) +
                    ",\"frames_per_video\":" + std::to_string(m.frames_per_video) +
                    ",\"duration_s\":";
    append_double(s, m.duration_s);
    s += ",\"seed\":" + std::to_string(m.seed);
    s += ",\"config\":{\"fps\":";
    append_double(s, m.config.fps);
    s += ",\"joint_velocity_max\":";
    append_double(s, m.config.joint_velocity_max);
    s += ",\"camera_distance_min\":";
    append_double(s, m.config.camera_distance_min);
    s += ",\"camera_distance_max\":";
    append_double(s, m.config.camera_distance_max);
    s += ",\"detector_noise_sigma\":";
    append_double(s, m.config.detector_noise_sigma);
    s += ",\"outlier_prob\":";
    append_double(s, m.config.outlier_prob);
    s += ",\"outlier_magnitude\":";
    append_double(s, m.config.outlier_magnitude);
    s += ",\"occlusion_prob\":";
    append_double(s, m.config.occlusion_prob);
    s += "},\"intrinsics\":{\"fx\":";
    append_double(s, m.intrinsics.fx);
    s += ",\"fy\":";
    append_double(s, m.intrinsics.fy);
    s += ",\"cx\":";
    append_double(s, m.intrinsics.cx);
    s += ",\"cy\":";
    append_double(s, m.intrinsics.cy);
    s += ",\"width\":" + std::to_string(m.intrinsics.width) +
         ",\"height\":" + std::to_string(m.intrinsics.height) + "},\"chain\":";
    // The chain is small and static; its nlohmann dump is deterministic
    // (alphabetical keys, shortest-round-trip numbers).
    s += chain_to_json(m.chain).dump();
    s += ",\"video_line_offsets\":[";
    for (std::size_t i = 0; i < m.video_line_offsets.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(m.video_line_offsets[i]);
    }
    s += "]}";
    return s;
}

}  // namespace detail

inline void write_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("write_dataset: cannot open " + path);
    out << detail::serialize_manifest(ds.manifest) << "\n";
    for (const auto& video : ds.videos) {
        for (const auto& rec : video.frames) {
            std::string line = detail::serialize_record(rec);
            const std::uint32_t crc = crc32(line);
            line.back() = ',';  // replace '}' -> ',' then append the crc field
            line += "\"crc\":" + std::to_string(crc) + "}";
            out << line << "\n";
        }
    }
    if (!out) throw FormatError("write_dataset: write failure on " + path);
}

inline Dataset read_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("read_dataset: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw FormatError("read_dataset: empty file");

    Dataset ds;
    Json mj;
    try {
        mj = Json::parse(line);
    } catch (const Json::exception& e) {
        throw FormatError(std::string("read_dataset: bad manifest: ") + e.what());
    }
    if (mj.value("magic", "") != "sgta-dataset") throw FormatError("read_dataset: bad magic");
    if (mj.value("version", 0) != 1)
        throw FormatError("read_dataset: unsupported version " + std::to_string(mj.value("version", 0)));

    DatasetManifest& m = ds.manifest;
    m.version = mj.at("version").get<int>();
    m.videos = mj.at("videos").get<int>();
    m.frames_per_video = mj.at("frames_per_video").get<int>();
    m.duration_s = mj.at("duration_s").get<double>();
    m.seed = mj.at("seed").get<std::uint64_t>();
    const Json& cj = mj.at("config");
    m.config.videos = m.videos;
    m.config.frames_per_video = m.frames_per_video;
    m.config.seed = m.seed;
    m.config.fps = cj.at("fps").get<double>();
    m.config.joint_velocity_max = cj.at("joint_velocity_max").get<double>();
    m.config.camera_distance_min = cj.at("camera_distance_min").get<double>();
    m.config.camera_distance_max = cj.at("camera_distance_max").get<double>();
    m.config.detector_noise_sigma = cj.at("detector_noise_sigma").get<double>();
    m.config.outlier_prob = cj.at("outlier_prob").get<double>();
    m.config.outlier_magnitude = cj.at("outlier_magnitude").get<double>();
    m.config.occlusion_prob = cj.at("occlusion_prob").get<double>();
    m.intrinsics = intrinsics_from_json(mj.at("intrinsics"));
    m.chain = chain_from_json(mj.at("chain"));
    for (const auto& v : mj.at("video_line_offsets")) m.video_line_offsets.push_back(v.get<int>());

    ds.videos.resize(m.videos);
    int line_no = 1;
    int expected_total = m.videos * m.frames_per_video;
    int seen = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        Json j;
        try {
            j = Json::parse(line);
        } catch (const Json::exception& e) {
            throw FormatError("read_dataset: bad record at line " + std::to_string(line_no) + ": " +
                              e.what());
        }
        FrameRecord rec;
        rec.video = j.at("video").get<int>();
        rec.frame = j.at("frame").get<int>();
        for (const auto& a : j.at("q")) rec.q.angles.push_back(a.get<double>());
        rec.pose = pose_from_json(j.at("pose"));
        const auto& kp3d = j.at("kp3d");
        for (std::size_t i = 0; i < kp3d.size(); ++i) {
            rec.kp3d.points.emplace_back(kp3d[i][0].get<double>(), kp3d[i][1].get<double>(),
                                         kp3d[i][2].get<double>());
            rec.kp3d.ids.push_back(static_cast<int>(i));
        }
        const auto& gt = j.at("kp2d_gt");
        const auto& det = j.at("kp2d_det");
        const auto& vis = j.at("visible");
        if (gt.size() != det.size() || gt.size() != vis.size() || gt.size() != kp3d.size())
            throw FormatError("read_dataset: inconsistent keypoint arrays at line " +
                              std::to_string(line_no));
        const CameraIntrinsics& k = m.intrinsics;
        for (std::size_t i = 0; i < gt.size(); ++i) {
            Keypoint2D g;
            g.id = static_cast<int>(i);
            g.p = Eigen::Vector2d(gt[i][0].get<double>(), gt[i][1].get<double>());
            g.in_frame = g.p.x() >= 0.0 && g.p.y() >= 0.0 && g.p.x() < k.width && g.p.y() < k.height;
            rec.kp2d_gt.kps.push_back(g);
            Keypoint2D d;
            d.id = static_cast<int>(i);
            d.p = Eigen::Vector2d(det[i][0].get<double>(), det[i][1].get<double>());
            d.in_frame = vis[i].get<bool>();
            if (!d.in_frame) d.confidence = 0.0;
            rec.kp2d_det.kps.push_back(d);
        }
        if (!j.contains("crc")) throw ChecksumError("read_dataset: record missing crc");
        const std::uint32_t stored = j.at("crc").get<std::uint32_t>();
        const std::uint32_t computed = crc32(detail::serialize_record(rec));
        if (stored != computed)
            throw ChecksumError("read_dataset: crc mismatch at line " + std::to_string(line_no));
        if (rec.video < 0 || rec.video >= m.videos)
            throw FormatError("read_dataset: video index out of range");
        SequenceSample& sample = ds.videos[rec.video];
        sample.video_index = rec.video;
        sample.pose = rec.pose;
        sample.intrinsics = m.intrinsics;
        sample.frames.push_back(std::move(rec));
        ++seen;
    }
    if (seen != expected_total)
        throw FormatError("read_dataset: expected " + std::to_string(expected_total) +
                          " records, found " + std::to_string(seen));
    return ds;
}

}  // namespace sgta
