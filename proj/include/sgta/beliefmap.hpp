#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "sgta/errors.hpp"
#include "sgta/geometry.hpp"
#include "sgta/kinematics.hpp"
#include "sgta/rng.hpp"

namespace sgta {

struct Keypoint2D {
    Eigen::Vector2d p = Eigen::Vector2d::Zero();  // pixels
    int id = 0;
    double confidence = 1.0;
    bool in_frame = true;
};

struct KeypointSet2D {
    std::vector<Keypoint2D> kps;

    std::size_t size() const { return kps.size(); }
    Keypoint2D& operator[](std::size_t i) { return kps[i]; }
    const Keypoint2D& operator[](std::size_t i) const { return kps[i]; }
    auto begin() { return kps.begin(); }
    auto end() { return kps.end(); }
    auto begin() const { return kps.begin(); }
    auto end() const { return kps.end(); }
};

// Gaussian-rendered keypoint likelihood image. Values live in [0,1],
// stored channel-major: index (c, y, x) -> (c*height + y)*width + x.
struct BeliefMap {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<double> values;

    static BeliefMap zeros(int w, int h, int c = 1) {
        BeliefMap m;
        m.width = w;
        m.height = h;
        m.channels = c;
        m.values.assign(static_cast<std::size_t>(w) * h * c, 0.0);
        return m;
    }

    double at(int c, int y, int x) const {
        return values[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    double& at(int c, int y, int x) {
        return values[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    bool all_zero() const {
        for (double v : values)
            if (v != 0.0) return false;
        return true;
    }
};

// Detection head: per-keypoint heatmaps at input/R resolution plus a shared
// 2-channel sub-cell offset grid. `supervised` marks keypoints whose offset
// cell carries a training target (in-frame keypoints only).
struct DetectionHead {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> heatmaps;  // (c, h, w)
    std::vector<double> offsets;   // (2, h, w): dx plane then dy plane
    std::vector<bool> supervised;  // per keypoint channel

    static DetectionHead zeros(int w, int h, int c) {
        DetectionHead d;
        d.width = w;
        d.height = h;
        d.channels = c;
        d.heatmaps.assign(static_cast<std::size_t>(c) * h * w, 0.0);
        d.offsets.assign(static_cast<std::size_t>(2) * h * w, 0.0);
        d.supervised.assign(c, false);
        return d;
    }

    double heat(int c, int y, int x) const {
        return heatmaps[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    double& heat(int c, int y, int x) {
        return heatmaps[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    double off(int c, int y, int x) const {
        return offsets[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    double& off(int c, int y, int x) {
        return offsets[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
};

struct HeadConfig {
    int input_size = 480;   // square network input, pixels
    int downsample = 4;     // output stride R
    int keypoint_count = 7;
    double sigma2 = 4.0;    // Gaussian variance, pixels^2 (kernel denominator 2*sigma2 = 8)

    int head_size() const { return input_size / downsample; }
};

enum class BeliefResolution { kFull, kHead };
enum class BeliefChannels { kSingle, kPerKeypoint };

namespace detail {

// Renders exp(-((x-px)^2+(y-py)^2)/(2*sigma2)) into a h x w plane, combining
// with existing content by max. Kernel truncated at radius 3*sigma.
inline void splat_gaussian(double* plane, int width, int height, const Eigen::Vector2d& p,
                           double sigma2) {
    const double radius = 3.0 * std::sqrt(sigma2);
    const int x0 = std::max(0, static_cast<int>(std::ceil(p.x() - radius)));
    const int x1 = std::min(width - 1, static_cast<int>(std::floor(p.x() + radius)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(p.y() - radius)));
    const int y1 = std::min(height - 1, static_cast<int>(std::floor(p.y() + radius)));
    const double inv = 1.0 / (2.0 * sigma2);
    for (int y = y0; y <= y1; ++y) {
        double* row = plane + static_cast<std::size_t>(y) * width;
        for (int x = x0; x <= x1; ++x) {
            const double dx = x - p.x();
            const double dy = y - p.y();
            const double d2 = dx * dx + dy * dy;
            if (d2 > radius * radius) continue;
            row[x] = std::max(row[x], std::exp(-d2 * inv));
        }
    }
}

}  // namespace detail

// Renders keypoints into a belief map. Keypoints must already be in the
// target resolution's coordinate frame; out-of-frame keypoints are skipped.
inline BeliefMap render_belief(const KeypointSet2D& kps, const HeadConfig& cfg,
                               BeliefResolution res = BeliefResolution::kFull,
                               BeliefChannels channels = BeliefChannels::kSingle) {
    const int side = res == BeliefResolution::kFull ? cfg.input_size : cfg.head_size();
    const int nchan = channels == BeliefChannels::kSingle ? 1 : cfg.keypoint_count;
    BeliefMap map = BeliefMap::zeros(side, side, nchan);
    for (const Keypoint2D& kp : kps) {
        if (!kp.in_frame) continue;
        const int chan = channels == BeliefChannels::kSingle ? 0 : kp.id;
        if (chan < 0 || chan >= nchan) continue;
        double* plane = map.values.data() + static_cast<std::size_t>(chan) * side * side;
        detail::splat_gaussian(plane, side, side, kp.p, cfg.sigma2);
    }
    return map;
}

// Projects current-frame 3D keypoints through a previous pose estimate and
// maps them into the input frame; used both for the reprojected belief map
// and for center proposals. Points behind the camera come back out-of-frame.
inline KeypointSet2D reproject_keypoints(const PoseSE3& pose_prev, const KeypointSet3D& points,
                                         const CameraIntrinsics& k, const AffineMap2D& m) {
    KeypointSet2D out;
    out.kps.reserve(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
        Keypoint2D kp;
        kp.id = points.ids[i];
        const auto uv = try_project(k, pose_prev, points.points[i]);
        if (uv) {
            kp.p = m.apply(*uv);
            kp.in_frame = true;
        } else {
            kp.in_frame = false;
        }
        out.kps.push_back(kp);
    }
    return out;
}

inline BeliefMap reproject_belief(const PoseSE3& pose_prev, const KeypointSet3D& points,
                                  const CameraIntrinsics& k, const AffineMap2D& m,
                                  const HeadConfig& cfg) {
    return render_belief(reproject_keypoints(pose_prev, points, k, m), cfg,
                         BeliefResolution::kFull, BeliefChannels::kSingle);
}

// Ground-truth head for training targets; also the round-trip oracle for
// decode_peaks. Keypoints must be in the input (square) frame. Each channel
// is rendered around the floored low-resolution cell p_low = floor(p / R)
// and the offset grid at p_low stores the fractional remainder p/R - p_low.
inline DetectionHead encode_target(const KeypointSet2D& kps, const HeadConfig& cfg) {
    const int hs = cfg.head_size();
    DetectionHead head = DetectionHead::zeros(hs, hs, cfg.keypoint_count);
    for (const Keypoint2D& kp : kps) {
        if (kp.id < 0 || kp.id >= cfg.keypoint_count) continue;
        const bool inside = kp.in_frame && kp.p.x() >= 0.0 && kp.p.y() >= 0.0 &&
                            kp.p.x() < cfg.input_size && kp.p.y() < cfg.input_size;
        if (!inside) continue;  // channel stays zero, offset unsupervised
        const double lx = kp.p.x() / cfg.downsample;
        const double ly = kp.p.y() / cfg.downsample;
        const int cx = static_cast<int>(std::floor(lx));
        const int cy = static_cast<int>(std::floor(ly));
        double* plane = head.heatmaps.data() + static_cast<std::size_t>(kp.id) * hs * hs;
        detail::splat_gaussian(plane, hs, hs, Eigen::Vector2d(cx, cy), cfg.sigma2);
        head.off(0, cy, cx) = lx - cx;
        head.off(1, cy, cx) = ly - cy;
        head.supervised[kp.id] = true;
    }
    return head;
}

// Decodes per-channel argmax peaks (row-major scan, first index wins ties),
// adds the sub-cell offset at the peak, scales by R and maps back to the raw
// frame through the inverse affine. in_frame reports containment in the raw
// image bounds; confidence is the peak heatmap value.
inline KeypointSet2D decode_peaks(const DetectionHead& head, const HeadConfig& cfg,
                                  const AffineMap2D& m, int raw_width, int raw_height) {
    const AffineMap2D inv = affine_invert(m);
    KeypointSet2D out;
    out.kps.reserve(head.channels);
    for (int c = 0; c < head.channels; ++c) {
        int best_y = 0, best_x = 0;
        double best = head.heat(c, 0, 0);
        for (int y = 0; y < head.height; ++y) {
            for (int x = 0; x < head.width; ++x) {
                const double v = head.heat(c, y, x);
                if (v > best) {
                    best = v;
                    best_y = y;
                    best_x = x;
                }
            }
        }
        Keypoint2D kp;
        kp.id = c;
        kp.confidence = best;
        const Eigen::Vector2d refined(best_x + head.off(0, best_y, best_x),
                                      best_y + head.off(1, best_y, best_x));
        kp.p = inv.apply(refined * static_cast<double>(cfg.downsample));
        kp.in_frame =
            kp.p.x() >= 0.0 && kp.p.y() >= 0.0 && kp.p.x() < raw_width && kp.p.y() < raw_height;
        out.kps.push_back(kp);
    }
    return out;
}

// Training-time prior corruption: N(0, 1.5 I) jitter plus independent drops
// with probability 0.2. Dropped keypoints are flagged out-of-frame so no
// kernel is rendered for them.
inline KeypointSet2D augment_prior(const KeypointSet2D& kps, Rng& rng, double sigma = 1.5,
                                   double drop_prob = 0.2) {
    KeypointSet2D out = kps;
    for (Keypoint2D& kp : out) {
        const double nx = rng.normal(0.0, sigma);
        const double ny = rng.normal(0.0, sigma);
        const bool drop = rng.bernoulli(drop_prob);
        kp.p.x() += nx;
        kp.p.y() += ny;
        if (drop) {
            kp.in_frame = false;
            kp.confidence = 0.0;
        }
    }
    return out;
}

// 8-bit PGM dump of one channel for visual debugging.
inline void write_pgm(const BeliefMap& map, const std::string& path, int channel = 0) {
    if (channel < 0 || channel >= map.channels) throw ShapeMismatch("write_pgm: bad channel");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("write_pgm: cannot open " + path);
    out << "P5\n" << map.width << " " << map.height << "\n255\n";
    for (int y = 0; y < map.height; ++y) {
        for (int x = 0; x < map.width; ++x) {
            const double v = std::clamp(map.at(channel, y, x), 0.0, 1.0);
            out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
        }
    }
}

}  // namespace sgta
