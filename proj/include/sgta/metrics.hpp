#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "sgta/beliefmap.hpp"
#include "sgta/errors.hpp"
#include "sgta/geometry.hpp"
#include "sgta/kinematics.hpp"

namespace sgta {

inline constexpr double kPckThresholdPx = 12.0;  // AUC threshold for PCK
inline constexpr double kAddThresholdMm = 60.0;  // AUC threshold for ADD (6 cm)

struct MetricsReport {
    double pck_auc = 0.0;
    double pck_median_px = 0.0;
    double add_auc = 0.0;
    double add_median_mm = 0.0;
    double add_median_finite_mm = 0.0;  // median over finite errors only
    std::size_t n_frames = 0;
    std::size_t n_keypoints_evaluated = 0;
    std::size_t n_failed_frames = 0;
    double pck_threshold_px = kPckThresholdPx;
    double add_threshold_mm = kAddThresholdMm;
};

// L2 pixel errors between predicted and ground-truth keypoints. Keypoints
// whose ground truth lies out of frame are excluded entirely; predictions
// that are unavailable for an in-frame ground truth count as infinite error.
inline std::vector<double> pck_errors(const KeypointSet2D& pred, const KeypointSet2D& gt) {
    if (pred.size() != gt.size()) throw IdMismatch("pck_errors: size mismatch");
    std::vector<double> errors;
    errors.reserve(gt.size());
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (pred[i].id != gt[i].id) throw IdMismatch("pck_errors: keypoint ids differ");
        if (!gt[i].in_frame) continue;
        if (!pred[i].in_frame) {
            errors.push_back(std::numeric_limits<double>::infinity());
            continue;
        }
        errors.push_back((pred[i].p - gt[i].p).norm());
    }
    return errors;
}

// Mean Euclidean distance, in millimeters, between keypoints transformed by
// the estimated pose and by the ground-truth pose.
inline double add_error(const PoseSE3& pose_est, const PoseSE3& pose_gt, const KeypointSet3D& points) {
    if (points.size() == 0) throw EmptyInput("add_error: no keypoints");
    double sum = 0.0;
    for (const Eigen::Vector3d& p : points.points) {
        sum += (pose_est.apply(p) - pose_gt.apply(p)).norm();
    }
    return sum / static_cast<double>(points.size()) * 1000.0;
}

// Exact area under the empirical accuracy curve a(tau) = P(error <= tau),
// integrated over [0, threshold] and normalized by the threshold. Computed
// in closed form from the step function: each error e contributes
// max(0, threshold - e); infinite errors contribute nothing.
inline double auc_below(const std::vector<double>& errors, double threshold) {
    if (errors.empty()) throw EmptyInput("auc_below: no errors");
    if (threshold <= 0.0) throw EmptyInput("auc_below: threshold must be positive");
    double area = 0.0;
    for (double e : errors) {
        if (e < threshold) area += threshold - std::max(e, 0.0);
    }
    return area / (threshold * static_cast<double>(errors.size()));
}

inline double median(std::vector<double> values) {
    if (values.empty()) throw EmptyInput("median: no values");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    if (n % 2 == 1) return values[n / 2];
    return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

// Median over the finite entries; +inf if none are finite.
inline double median_finite(const std::vector<double>& values) {
    std::vector<double> finite;
    finite.reserve(values.size());
    for (double v : values)
        if (std::isfinite(v)) finite.push_back(v);
    if (finite.empty()) return std::numeric_limits<double>::infinity();
    return median(std::move(finite));
}

struct LossConfig {
    double lambda_belief = 1.0;
    double lambda_offset = 0.01;
    double smooth_l1_beta = 1.0;
};

struct LossValue {
    double value = 0.0;
    std::vector<double> gradient;  // d(loss)/d(pred), same layout as pred
};

// Squared L2 heatmap loss: sum over all cells and channels of
// (pred - target)^2, gradient 2*(pred - target).
inline LossValue loss_belief(const std::vector<double>& pred, const std::vector<double>& target) {
    if (pred.size() != target.size()) throw ShapeMismatch("loss_belief: shape mismatch");
    LossValue out;
    out.gradient.resize(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - target[i];
        out.value += d * d;
        out.gradient[i] = 2.0 * d;
    }
    return out;
}

// Smooth-L1 offset loss, supervised only at the low-resolution cells of
// in-frame ground-truth keypoints; everywhere else the gradient is zero.
// pred_offsets uses DetectionHead layout: (2, h, w), dx plane then dy plane.
inline LossValue loss_offset(const std::vector<double>& pred_offsets, const KeypointSet2D& gt,
                             const HeadConfig& cfg, const LossConfig& loss_cfg = {}) {
    const int hs = cfg.head_size();
    if (pred_offsets.size() != static_cast<std::size_t>(2) * hs * hs)
        throw ShapeMismatch("loss_offset: offset grid size mismatch");
    LossValue out;
    out.gradient.assign(pred_offsets.size(), 0.0);
    const double beta = loss_cfg.smooth_l1_beta;
    auto idx = [hs](int plane, int y, int x) {
        return (static_cast<std::size_t>(plane) * hs + y) * hs + x;
    };
    for (const Keypoint2D& kp : gt) {
        const bool inside = kp.in_frame && kp.p.x() >= 0.0 && kp.p.y() >= 0.0 &&
                            kp.p.x() < cfg.input_size && kp.p.y() < cfg.input_size;
        if (!inside) continue;
        const double lx = kp.p.x() / cfg.downsample;
        const double ly = kp.p.y() / cfg.downsample;
        const int cx = static_cast<int>(std::floor(lx));
        const int cy = static_cast<int>(std::floor(ly));
        if (cx < 0 || cy < 0 || cx >= hs || cy >= hs) continue;
        const double target[2] = {lx - cx, ly - cy};
        for (int plane = 0; plane < 2; ++plane) {
            const std::size_t i = idx(plane, cy, cx);
            const double d = pred_offsets[i] - target[plane];
            const double a = std::abs(d);
            if (a < beta) {
                out.value += 0.5 * d * d / beta;
                out.gradient[i] += d / beta;
            } else {
                out.value += a - 0.5 * beta;
                out.gradient[i] += d > 0.0 ? 1.0 : -1.0;
            }
        }
    }
    return out;
}

inline double loss_total(double belief_loss, double offset_loss, const LossConfig& cfg = {}) {
    return cfg.lambda_belief * belief_loss + cfg.lambda_offset * offset_loss;
}

// Assembles a report from pooled per-keypoint pixel errors and per-frame ADD
// errors (millimeters; +inf marks frames whose solve never produced a pose).
inline MetricsReport make_report(const std::vector<double>& pixel_errors,
                                 const std::vector<double>& add_errors_mm, std::size_t n_frames,
                                 std::size_t n_failed_frames) {
    MetricsReport r;
    r.n_frames = n_frames;
    r.n_failed_frames = n_failed_frames;
    r.n_keypoints_evaluated = pixel_errors.size();
    if (!pixel_errors.empty()) {
        r.pck_auc = auc_below(pixel_errors, kPckThresholdPx);
        r.pck_median_px = median(pixel_errors);
    }
    if (!add_errors_mm.empty()) {
        r.add_auc = auc_below(add_errors_mm, kAddThresholdMm);
        r.add_median_mm = median(add_errors_mm);
        r.add_median_finite_mm = median_finite(add_errors_mm);
    }
    return r;
}

// 256-point accuracy curve (threshold, accuracy) for plotting.
inline std::vector<std::pair<double, double>> accuracy_curve(const std::vector<double>& errors,
                                                             double threshold, int samples = 256) {
    std::vector<std::pair<double, double>> curve;
    curve.reserve(samples);
    std::vector<double> sorted = errors;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < samples; ++i) {
        const double tau = threshold * static_cast<double>(i + 1) / samples;
        const auto it = std::upper_bound(sorted.begin(), sorted.end(), tau);
        curve.emplace_back(tau, static_cast<double>(it - sorted.begin()) /
                                    static_cast<double>(sorted.empty() ? 1 : sorted.size()));
    }
    return curve;
}

}  // namespace sgta
