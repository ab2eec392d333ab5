#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "sgta/beliefmap.hpp"
#include "sgta/errors.hpp"
#include "sgta/geometry.hpp"
#include "sgta/kinematics.hpp"
#include "sgta/rng.hpp"

namespace sgta {

struct CorrespondencePair {
    Eigen::Vector2d p;  // pixels, raw image frame
    Eigen::Vector3d P;  // meters, robot base frame
    int id = 0;
};

struct Correspondence2D3D {
    std::vector<CorrespondencePair> pairs;

    std::size_t size() const { return pairs.size(); }
};

struct RansacConfig {
    int iterations = 200;
    double inlier_threshold = 2.0;  // pixels
    int sample_size = 6;
    std::uint64_t seed = 0;
};

struct RefineResult {
    PoseSE3 pose;
    PoseSE3 initial_pose;            // the PnP-RANSAC estimate the refiner started from
    std::vector<double> weights;     // per-pair omega, aligned with the correspondence order
    std::vector<int> inlier_ids;
    int iterations_used = 0;
    double final_cost = 0.0;
    std::vector<double> cost_trace;  // cost after every accepted step, starting at the initial cost
};

namespace detail {

inline double reprojection_error_px(const CameraIntrinsics& k, const PoseSE3& pose,
                                    const CorrespondencePair& pair) {
    const auto uv = try_project(k, pose, pair.P);
    if (!uv) return std::numeric_limits<double>::infinity();
    return (*uv - pair.p).norm();
}

inline double reprojection_rms_px(const CameraIntrinsics& k, const PoseSE3& pose,
                                  const Correspondence2D3D& corr) {
    double sum = 0.0;
    for (const auto& pair : corr.pairs) {
        const double e = reprojection_error_px(k, pose, pair);
        if (!std::isfinite(e)) return std::numeric_limits<double>::infinity();
        sum += e * e;
    }
    return std::sqrt(sum / static_cast<double>(corr.size()));
}

}  // namespace detail

// Direct linear transform PnP. Works in normalized camera coordinates,
// solves for the 3x4 matrix [A|b] via the SVD null vector, then projects A
// onto the nearest rotation and re-fits the translation linearly with the
// rotation held fixed.
inline PoseSE3 pnp_dlt(const Correspondence2D3D& corr, const CameraIntrinsics& k) {
    const std::size_t n = corr.size();
    if (n < 6) throw InsufficientPoints("pnp_dlt: need at least 6 correspondences");

    // Condition the 3D points: shift to the centroid, scale to unit mean norm.
    Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
    for (const auto& pair : corr.pairs) centroid += pair.P;
    centroid /= static_cast<double>(n);
    double mean_norm = 0.0;
    for (const auto& pair : corr.pairs) mean_norm += (pair.P - centroid).norm();
    mean_norm /= static_cast<double>(n);
    const double scale = mean_norm > 1e-12 ? mean_norm : 1.0;

    Eigen::MatrixXd design(2 * n, 12);
    for (std::size_t i = 0; i < n; ++i) {
        const Eigen::Vector3d P = (corr.pairs[i].P - centroid) / scale;
        const double x = (corr.pairs[i].p.x() - k.cx) / k.fx;
        const double y = (corr.pairs[i].p.y() - k.cy) / k.fy;
        design.row(2 * i) << P.x(), P.y(), P.z(), 1.0, 0.0, 0.0, 0.0, 0.0, -x * P.x(), -x * P.y(),
            -x * P.z(), -x;
        design.row(2 * i + 1) << 0.0, 0.0, 0.0, 0.0, P.x(), P.y(), P.z(), 1.0, -y * P.x(),
            -y * P.y(), -y * P.z(), -y;
    }

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(design, Eigen::ComputeThinV);
    const Eigen::VectorXd& sv = svd.singularValues();
    // A valid configuration leaves exactly one near-null direction; a second
    // one means the points do not constrain the pose.
    if (sv(10) / sv(0) < 1e-10)
        throw DegenerateConfiguration("pnp_dlt: design matrix is rank-deficient");

    const Eigen::VectorXd m = svd.matrixV().col(11);
    Eigen::Matrix3d a;
    a << m(0), m(1), m(2), m(4), m(5), m(6), m(8), m(9), m(10);
    Eigen::Vector3d b(m(3), m(7), m(11));

    // Undo the 3D conditioning: A' = A/scale, b' = b - A*centroid/scale.
    b = b - a * centroid / scale;
    a = a / scale;

    // Fix the projective sign so points land in front of the camera.
    int positive = 0;
    for (const auto& pair : corr.pairs) {
        if (a.row(2).dot(pair.P) + b.z() > 0.0) ++positive;
    }
    if (2 * positive < static_cast<int>(n)) {
        a = -a;
        b = -b;
    }

    Eigen::JacobiSVD<Eigen::Matrix3d> asvd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const double proj_scale = asvd.singularValues().mean();
    if (proj_scale < 1e-12) throw DegenerateConfiguration("pnp_dlt: vanishing rotation block");

    PoseSE3 pose;
    pose.rotation = nearest_rotation(a);
    pose.translation = b / proj_scale;

    // Re-fit the translation with the projected rotation held fixed; the
    // algebraic residual is linear in t.
    Eigen::MatrixXd lhs(2 * n, 3);
    Eigen::VectorXd rhs(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        const Eigen::Vector3d rp = pose.rotation * corr.pairs[i].P;
        const double x = (corr.pairs[i].p.x() - k.cx) / k.fx;
        const double y = (corr.pairs[i].p.y() - k.cy) / k.fy;
        lhs.row(2 * i) << 1.0, 0.0, -x;
        rhs(2 * i) = x * rp.z() - rp.x();
        lhs.row(2 * i + 1) << 0.0, 1.0, -y;
        rhs(2 * i + 1) = y * rp.z() - rp.y();
    }
    const Eigen::Vector3d t = lhs.colPivHouseholderQr().solve(rhs);
    if (t.allFinite()) pose.translation = t;
    return pose;
}

inline RefineResult refine_lm(const PoseSE3& init, const Correspondence2D3D& corr,
                              const CameraIntrinsics& k, const std::vector<double>& weights,
                              int max_iterations);

// PnP-RANSAC: scores minimal DLT hypotheses by inlier count (ties broken by
// lower inlier RMS), then re-solves on the winning inlier set and polishes
// it with an unweighted LM pass over the inliers, as reference PnP-RANSAC
// implementations do. The result is a pure function of (corr, k, cfg.seed).
inline PoseSE3 pnp_ransac(const Correspondence2D3D& corr, const CameraIntrinsics& k,
                          const RansacConfig& cfg, std::vector<int>* inlier_ids_out = nullptr) {
    const std::size_t n = corr.size();
    if (static_cast<int>(n) < cfg.sample_size)
        throw InsufficientPoints("pnp_ransac: fewer pairs than sample_size");

    Rng rng(cfg.seed);
    std::vector<int> best_inliers;
    double best_rms = std::numeric_limits<double>::infinity();
    PoseSE3 best_pose;
    bool found = false;

    std::vector<int> indices(n);
    for (std::size_t i = 0; i < n; ++i) indices[i] = static_cast<int>(i);

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        // Partial Fisher-Yates draw of sample_size distinct indices.
        for (int j = 0; j < cfg.sample_size; ++j) {
            const std::size_t pick = j + rng.uniform_int(n - j);
            std::swap(indices[j], indices[pick]);
        }
        Correspondence2D3D sample;
        sample.pairs.reserve(cfg.sample_size);
        for (int j = 0; j < cfg.sample_size; ++j) sample.pairs.push_back(corr.pairs[indices[j]]);

        PoseSE3 hypothesis;
        try {
            hypothesis = pnp_dlt(sample, k);
        } catch (const DegenerateConfiguration&) {
            continue;
        }

        std::vector<int> inliers;
        double rms_sum = 0.0;
        double all_sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double e = detail::reprojection_error_px(k, hypothesis, corr.pairs[i]);
            all_sum += std::isfinite(e) ? e * e : 1e12;
            if (e <= cfg.inlier_threshold) {
                inliers.push_back(static_cast<int>(i));
                rms_sum += e * e;
            }
        }
        // Hypotheses without a consensus set still compete on all-point RMS,
        // so a model is returned whenever any minimal set solved.
        const double rms = inliers.empty()
                               ? std::sqrt(all_sum / static_cast<double>(n))
                               : std::sqrt(rms_sum / static_cast<double>(inliers.size()));
        if (!found || inliers.size() > best_inliers.size() ||
            (inliers.size() == best_inliers.size() && rms < best_rms)) {
            best_inliers = std::move(inliers);
            best_rms = rms;
            best_pose = hypothesis;
            found = true;
        }
    }
    if (!found) throw NoModelFound("pnp_ransac: every sampled minimal set was degenerate");

    Correspondence2D3D inlier_corr;
    inlier_corr.pairs.reserve(best_inliers.size());
    for (int i : best_inliers) inlier_corr.pairs.push_back(corr.pairs[i]);
    if (best_inliers.size() >= 6) {
        try {
            best_pose = pnp_dlt(inlier_corr, k);
        } catch (const DegenerateConfiguration&) {
            // keep the hypothesis pose
        }
    }
    if (best_inliers.size() >= 4) {
        try {
            const std::vector<double> uniform(inlier_corr.size(), 1.0);
            best_pose = refine_lm(best_pose, inlier_corr, k, uniform, 100).pose;
        } catch (const std::runtime_error&) {
            // keep the linear estimate
        }
    }
    if (inlier_ids_out) {
        inlier_ids_out->clear();
        for (int i : best_inliers) inlier_ids_out->push_back(corr.pairs[i].id);
    }
    return best_pose;
}

// Residual normalization scale, in medians. Ordinary inliers sit within a
// few medians of the reference fit, so a wide scale keeps their weights
// nearly flat (u <= 0.2 or so) while genuine outliers, an order of
// magnitude out, still decay to nothing through exp(-5 u^2). Tighter
// scales (1-4 medians) crush honest points by their own noise realization
// and lose to uniform weighting on a measurable fraction of solves.
inline constexpr double kReweightMedianScale = 16.0;

// omega_i = exp(-5 * ||r_i / s||^2) with s = kReweightMedianScale * median
// residual norm, floored at 1e-6. Zero residual maps to exactly 1.
inline std::vector<double> reweight(const std::vector<Eigen::Vector2d>& residuals) {
    std::vector<double> norms;
    norms.reserve(residuals.size());
    for (const auto& r : residuals) norms.push_back(r.norm());
    double s = 1.0;
    if (!norms.empty()) {
        std::vector<double> sorted = norms;
        std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
        s = std::max(kReweightMedianScale * sorted[sorted.size() / 2], 1e-6);
    }
    std::vector<double> weights;
    weights.reserve(residuals.size());
    for (double nrm : norms) {
        const double u = nrm / s;
        weights.push_back(std::exp(-5.0 * u * u));
    }
    return weights;
}

inline constexpr double kBehindCameraResidualPx = 1e3;

namespace detail {

// Weighted reprojection cost 0.5 * sum ||omega_i (pi(R P_i + t) - p_i)||^2.
// Points behind the camera contribute a large residual of
// 1e3 * (1 + (eps - z)) px per axis: finite, equal to 1e3 at the depth
// boundary, and growing with how far behind the point sits so the solver
// has a direction back toward positive depth.
inline double lm_cost(const CameraIntrinsics& k, const PoseSE3& pose,
                      const Correspondence2D3D& corr, const std::vector<double>& weights) {
    double cost = 0.0;
    for (std::size_t i = 0; i < corr.size(); ++i) {
        const Eigen::Vector3d c = pose.apply(corr.pairs[i].P);
        Eigen::Vector2d r;
        if (c.z() <= kMinDepth) {
            const double pen = kBehindCameraResidualPx * (1.0 + (kMinDepth - c.z()));
            r = Eigen::Vector2d(pen, pen) * weights[i];
        } else {
            const Eigen::Vector2d uv(k.fx * c.x() / c.z() + k.cx, k.fy * c.y() / c.z() + k.cy);
            r = weights[i] * (uv - corr.pairs[i].p);
        }
        cost += 0.5 * r.squaredNorm();
    }
    return cost;
}

}  // namespace detail

// Damped Gauss-Newton (Levenberg-Marquardt) minimization of the weighted
// reprojection objective over a local (axis-angle, translation) chart.
// Accepted steps strictly decrease the cost; the trace records it.
inline RefineResult refine_lm(const PoseSE3& init, const Correspondence2D3D& corr,
                              const CameraIntrinsics& k, const std::vector<double>& weights,
                              int max_iterations = 100) {
    if (corr.size() != weights.size()) throw LengthMismatch("refine_lm: weights/pairs mismatch");
    int active = 0;
    for (double w : weights)
        if (w > 1e-6) ++active;
    if (active < 4) throw InsufficientPoints("refine_lm: fewer than 4 pairs with weight > 1e-6");

    RefineResult result;
    result.initial_pose = init;
    result.weights = weights;
    PoseSE3 pose = init;
    double cost = detail::lm_cost(k, pose, corr, weights);
    result.cost_trace.push_back(cost);

    double lambda = 1e-3;
    constexpr double kMaxLambda = 1e8;
    int iter = 0;
    for (; iter < max_iterations; ++iter) {
        Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
        Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
        for (std::size_t i = 0; i < corr.size(); ++i) {
            const Eigen::Vector3d c = pose.apply(corr.pairs[i].P);
            Eigen::Matrix<double, 3, 6> jx;
            jx.leftCols<3>() = -skew(pose.rotation * corr.pairs[i].P);
            jx.rightCols<3>() = Eigen::Matrix3d::Identity();
            if (c.z() <= kMinDepth) {
                // depth-penalty residual: both axes share d(pen)/dz = -1e3
                const double pen = kBehindCameraResidualPx * (1.0 + (kMinDepth - c.z()));
                const Eigen::Vector2d r = weights[i] * Eigen::Vector2d(pen, pen);
                const Eigen::Matrix<double, 1, 6> dz = jx.row(2);
                Eigen::Matrix<double, 2, 6> j;
                j.row(0) = -kBehindCameraResidualPx * weights[i] * dz;
                j.row(1) = j.row(0);
                h += j.transpose() * j;
                g += j.transpose() * r;
                continue;
            }
            const Eigen::Vector2d uv(k.fx * c.x() / c.z() + k.cx, k.fy * c.y() / c.z() + k.cy);
            const Eigen::Vector2d r = weights[i] * (uv - corr.pairs[i].p);
            Eigen::Matrix<double, 2, 3> jpi;
            const double iz = 1.0 / c.z();
            jpi << k.fx * iz, 0.0, -k.fx * c.x() * iz * iz, 0.0, k.fy * iz, -k.fy * c.y() * iz * iz;
            const Eigen::Matrix<double, 2, 6> j = weights[i] * (jpi * jx);
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        if (g.cwiseAbs().maxCoeff() < 1e-10) break;

        bool accepted = false;
        while (lambda <= kMaxLambda) {
            Eigen::Matrix<double, 6, 6> damped = h;
            for (int d = 0; d < 6; ++d) damped(d, d) += lambda * std::max(h(d, d), 1e-12);
            const Eigen::Matrix<double, 6, 1> step = damped.ldlt().solve(-g);
            if (!step.allFinite()) {
                if (lambda >= kMaxLambda)
                    throw NumericalFailure("refine_lm: normal equations unsolvable at max damping");
                lambda *= 10.0;
                continue;
            }
            if (step.norm() < 1e-12) break;
            PoseSE3 trial;
            trial.rotation = so3_exp(step.head<3>()) * pose.rotation;
            trial.translation = pose.translation + step.tail<3>();
            const double trial_cost = detail::lm_cost(k, trial, corr, weights);
            if (trial_cost < cost) {
                pose = trial;
                cost = trial_cost;
                result.cost_trace.push_back(cost);
                lambda = std::max(lambda * 0.1, 1e-12);
                accepted = true;
                break;
            }
            if (lambda >= kMaxLambda) break;
            lambda *= 10.0;
        }
        if (!accepted) break;
    }

    result.pose = pose;
    result.iterations_used = iter;
    result.final_cost = cost;
    return result;
}

// Full pose solve on raw correspondences: PnP-RANSAC initialization, an
// unweighted LM polish (the linear RANSAC estimate is too rough at small
// point counts to rank residuals), reprojection residuals at the polished
// pose, reweighting, then the weighted LM solve.
inline RefineResult solve_correspondences(const Correspondence2D3D& corr,
                                          const CameraIntrinsics& k, const RansacConfig& cfg) {
    std::vector<int> inlier_ids;
    const PoseSE3 init = pnp_ransac(corr, k, cfg, &inlier_ids);

    PoseSE3 reference = init;
    {
        const std::vector<double> uniform(corr.size(), 1.0);
        try {
            reference = refine_lm(init, corr, k, uniform).pose;
        } catch (const std::runtime_error&) {
            reference = init;
        }
    }

    std::vector<Eigen::Vector2d> residuals;
    residuals.reserve(corr.size());
    for (const auto& pair : corr.pairs) {
        const auto uv = try_project(k, reference, pair.P);
        if (uv) {
            residuals.push_back(pair.p - *uv);
        } else {
            residuals.push_back(Eigen::Vector2d(1e3, 1e3));
        }
    }
    const std::vector<double> weights = reweight(residuals);

    RefineResult result = refine_lm(reference, corr, k, weights);
    result.initial_pose = init;
    result.inlier_ids = std::move(inlier_ids);
    return result;
}

// Solves a pose from 2D detections matched to 3D keypoints by id. Only
// in-frame detections participate; at least 6 are required.
inline RefineResult refine_pose(const KeypointSet2D& detections, const KeypointSet3D& points,
                                const CameraIntrinsics& k, const RansacConfig& cfg) {
    if (detections.size() != points.size())
        throw IdMismatch("refine_pose: detection/keypoint count mismatch");
    Correspondence2D3D corr;
    for (std::size_t i = 0; i < detections.size(); ++i) {
        if (detections[i].id != points.ids[i]) throw IdMismatch("refine_pose: id order mismatch");
        if (!detections[i].in_frame) continue;
        corr.pairs.push_back({detections[i].p, points.points[i], detections[i].id});
    }
    if (corr.size() < 6) throw InsufficientPoints("refine_pose: fewer than 6 in-frame detections");
    return solve_correspondences(corr, k, cfg);
}

struct FrameCorrespondences {
    KeypointSet2D detections;
    KeypointSet3D points;
};

// Multi-frame aggregation: all frames observe the same camera-to-base pose,
// so their 2D-3D pairs concatenate into one solve.
inline RefineResult multiframe_pnp(const std::vector<FrameCorrespondences>& frames,
                                   const CameraIntrinsics& k, const RansacConfig& cfg) {
    Correspondence2D3D corr;
    for (const auto& frame : frames) {
        if (frame.detections.size() != frame.points.size())
            throw IdMismatch("multiframe_pnp: detection/keypoint count mismatch");
        for (std::size_t i = 0; i < frame.detections.size(); ++i) {
            if (!frame.detections[i].in_frame) continue;
            corr.pairs.push_back(
                {frame.detections[i].p, frame.points.points[i], frame.detections[i].id});
        }
    }
    if (corr.size() < 6) throw InsufficientPoints("multiframe_pnp: fewer than 6 combined pairs");
    return solve_correspondences(corr, k, cfg);
}

}  // namespace sgta
