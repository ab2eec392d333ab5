#pragma once

#include <chrono>
#include <optional>
#include <utility>
#include <vector>

#include "sgta/beliefmap.hpp"
#include "sgta/errors.hpp"
#include "sgta/fusion.hpp"
#include "sgta/geometry.hpp"
#include "sgta/metrics.hpp"
#include "sgta/simulator.hpp"
#include "sgta/solver.hpp"

namespace sgta {

// Pipeline switches mirroring the three ablatable modules: structure-prior
// reprojection maps, temporal cross-attention fusion, and the reweighted
// pose refiner.
struct AblationFlags {
    bool sgf = true;
    bool tca = true;
    bool prf = true;
};

enum class PriorMode { kInference, kTraining };

struct TrackerConfig {
    HeadConfig head;
    FusionConfig fusion;
    RansacConfig ransac;
    PriorMode mode = PriorMode::kInference;
    double backfill_confidence = 0.3;  // confidence assigned to prior-repaired keypoints
    // When set, keypoints come from decoding the toy network head instead of
    // the injected pseudo-detections (exercises the full network path).
    bool use_network_detections = false;
    bool capture_maps = false;  // stash constructed belief maps in FrameResult
    std::uint64_t seed = 0;
};

struct TrackerState {
    std::optional<PoseSE3> prev_pose;             // last successful solve
    std::optional<KeypointSet2D> prev_keypoints;  // final keypoints, raw frame
    std::optional<KeypointSet2D> prev_detections; // raw pseudo-detections (for the image render)
    BeliefMap prev_belief;                        // blank until frame_index >= 2
    int frame_index = 0;
};

struct StageTimings {
    double belief_ms = 0.0;
    double encode_ms = 0.0;
    double fuse_ms = 0.0;
    double decode_ms = 0.0;
    double solve_ms = 0.0;
    double total_ms = 0.0;
};

struct FrameResult {
    int frame_index = 0;
    std::optional<PoseSE3> estimate;     // reported pose: this frame's solve, else carried prior
    std::optional<PoseSE3> solved_pose;  // present only if this frame's solve succeeded
    bool solve_failed = false;
    double add_mm = std::numeric_limits<double>::infinity();
    KeypointSet2D keypoints;             // final assembled keypoints, raw frame
    KeypointSet2D network_keypoints;     // decode_peaks output of the toy network head
    StageTimings timings;
    std::optional<BeliefMap> prior_map;   // B_{t-1}, when capture_maps
    std::optional<BeliefMap> reproj_map;  // B~_t, when capture_maps
};

namespace detail {

inline KeypointSet2D to_input_frame(const KeypointSet2D& raw, const AffineMap2D& m, int input_size) {
    KeypointSet2D out = raw;
    for (Keypoint2D& kp : out) {
        kp.p = m.apply(kp.p);
        if (kp.in_frame)
            kp.in_frame = kp.p.x() >= 0.0 && kp.p.y() >= 0.0 && kp.p.x() < input_size &&
                          kp.p.y() < input_size;
    }
    return out;
}

// Normalization with mean 0.5 / std 0.5 applied to a rendered [0,1] map.
inline BeliefMap normalize_image(BeliefMap map) {
    for (double& v : map.values) v = 2.0 * v - 1.0;
    return map;
}

inline double ms_since(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// Online camera-to-robot tracker. Frame t consumes the previous frame's
// state; a failed solve never erases the prior.
class Tracker {
public:
    Tracker(const CameraIntrinsics& intrinsics, TrackerConfig cfg, AblationFlags flags,
            const FusionWeights& weights)
        : intrinsics_(intrinsics),
          cfg_(std::move(cfg)),
          flags_(flags),
          weights_(weights),
          affine_(letterbox_map(intrinsics.width, intrinsics.height, cfg_.head.input_size)),
          augment_rng_(cfg_.seed) {
        state_.prev_belief = BeliefMap::zeros(cfg_.head.input_size, cfg_.head.input_size);
    }

    const TrackerState& state() const { return state_; }

    FrameResult process(const FrameRecord& frame) {
        const auto t_start = std::chrono::steady_clock::now();
        FrameResult result;
        result.frame_index = state_.frame_index;

        const KeypointSet2D& det_raw = frame.kp2d_det;
        const std::size_t n = det_raw.size();

        // --- temporal prior positions (raw frame) ---------------------------
        // With SGF the prior is the reprojection of the current 3D keypoints
        // through the previous pose estimate; otherwise the previous frame's
        // final keypoints stand in.
        std::optional<KeypointSet2D> prior_raw;
        if (flags_.sgf && state_.prev_pose) {
            KeypointSet2D prior;
            prior.kps.reserve(n);
            for (std::size_t i = 0; i < n; ++i) {
                Keypoint2D kp;
                kp.id = frame.kp3d.ids[i];
                const auto uv = try_project(intrinsics_, *state_.prev_pose, frame.kp3d.points[i]);
                if (uv) {
                    kp.p = *uv;
                    kp.in_frame = kp.p.x() >= 0.0 && kp.p.y() >= 0.0 &&
                                  kp.p.x() < intrinsics_.width && kp.p.y() < intrinsics_.height;
                } else {
                    kp.in_frame = false;
                }
                prior.kps.push_back(kp);
            }
            prior_raw = std::move(prior);
        } else if (state_.prev_keypoints) {
            prior_raw = *state_.prev_keypoints;
        }

        // --- belief maps -----------------------------------------------------
        auto t_belief = std::chrono::steady_clock::now();
        const int input = cfg_.head.input_size;
        BeliefMap belief_prev;
        if (state_.frame_index <= 1 || !state_.prev_keypoints) {
            belief_prev = BeliefMap::zeros(input, input);  // blank bootstrap maps
        } else {
            KeypointSet2D prev_input =
                detail::to_input_frame(*state_.prev_keypoints, affine_, input);
            if (cfg_.mode == PriorMode::kTraining)
                prev_input = augment_prior(prev_input, augment_rng_);
            belief_prev = render_belief(prev_input, cfg_.head);
        }
        BeliefMap belief_cur = BeliefMap::zeros(input, input);
        if (flags_.sgf && state_.prev_pose)
            belief_cur = reproject_belief(*state_.prev_pose, frame.kp3d, intrinsics_, affine_,
                                          cfg_.head);
        if (cfg_.capture_maps) {
            result.prior_map = belief_prev;
            result.reproj_map = belief_cur;
        }

        // Pseudo-images: renders of the pseudo-detections, normalized.
        const KeypointSet2D det_input = detail::to_input_frame(det_raw, affine_, input);
        BeliefMap image_cur = detail::normalize_image(render_belief(det_input, cfg_.head));
        BeliefMap image_prev =
            state_.prev_detections
                ? detail::normalize_image(render_belief(
                      detail::to_input_frame(*state_.prev_detections, affine_, input), cfg_.head))
                : image_cur;
        result.timings.belief_ms = detail::ms_since(t_belief);

        // --- encode + fuse + decode ------------------------------------------
        auto t_encode = std::chrono::steady_clock::now();
        const FeaturePyramid pyr_prev = encode_pyramid(image_prev, belief_prev, cfg_.fusion, weights_);
        const FeaturePyramid pyr_cur = encode_pyramid(image_cur, belief_cur, cfg_.fusion, weights_);
        result.timings.encode_ms = detail::ms_since(t_encode);

        auto t_fuse = std::chrono::steady_clock::now();
        KeypointSet2D prev_kps_input =
            state_.prev_keypoints ? detail::to_input_frame(*state_.prev_keypoints, affine_, input)
                                  : det_input;
        KeypointSet2D cur_kps_input =
            prior_raw ? detail::to_input_frame(*prior_raw, affine_, input) : det_input;
        const FeaturePyramid fused =
            flags_.tca
                ? fuse_pyramids(pyr_prev, pyr_cur, prev_kps_input, cur_kps_input, cfg_.fusion,
                                weights_)
                : fuse_concat_only(pyr_prev, pyr_cur, cur_kps_input, cfg_.fusion, weights_);
        result.timings.fuse_ms = detail::ms_since(t_fuse);

        auto t_decode = std::chrono::steady_clock::now();
        const DetectionHead head = decode_head(fused, cfg_.fusion, weights_);
        result.network_keypoints =
            decode_peaks(head, cfg_.head, affine_, intrinsics_.width, intrinsics_.height);
        result.timings.decode_ms = detail::ms_since(t_decode);

        // --- keypoint assembly at the decode boundary ------------------------
        KeypointSet2D assembled;
        if (cfg_.use_network_detections) {
            assembled = result.network_keypoints;
        } else {
            assembled.kps.resize(n);
            // The level-1 attention window half-extent mapped to raw pixels: a
            // detection farther than this from its center proposal is outside
            // everything the windowed fusion can match.
            const double scale = affine_.linear(0, 0);
            const double gate = (cfg_.fusion.window_sizes[0] / 2.0) * cfg_.fusion.stride / scale;
            // The prior is trusted for repairs only when it agrees with the
            // majority of available detections; a stale prior must not
            // overwrite healthy detections.
            int agreeing = 0, comparable = 0;
            if (prior_raw) {
                for (std::size_t i = 0; i < n; ++i) {
                    if (!det_raw[i].in_frame || !(*prior_raw)[i].in_frame) continue;
                    ++comparable;
                    if ((det_raw[i].p - (*prior_raw)[i].p).norm() <= gate) ++agreeing;
                }
            }
            const bool prior_consistent = comparable >= 4 && 2 * agreeing > comparable;
            for (std::size_t i = 0; i < n; ++i) {
                Keypoint2D kp = det_raw[i];
                const Keypoint2D* prior =
                    prior_raw && i < prior_raw->size() ? &(*prior_raw)[i] : nullptr;
                if (kp.in_frame) {
                    if (flags_.tca && prior_consistent && prior && prior->in_frame &&
                        (kp.p - prior->p).norm() > gate) {
                        // Out-of-window detection: the windowed attention finds
                        // no match there, so the center proposal stands in.
                        kp.p = prior->p;
                        kp.confidence = cfg_.backfill_confidence;
                    }
                } else if (flags_.sgf && state_.prev_pose && prior && prior->in_frame) {
                    // Occluded keypoint recovered from the structure prior.
                    kp.p = prior->p;
                    kp.in_frame = true;
                    kp.confidence = cfg_.backfill_confidence;
                }
                assembled.kps[i] = kp;
            }
        }
        result.keypoints = assembled;

        // --- pose solve -------------------------------------------------------
        auto t_solve = std::chrono::steady_clock::now();
        std::optional<PoseSE3> solved;
        try {
            const RefineResult solve = refine_pose(assembled, frame.kp3d, intrinsics_, cfg_.ransac);
            solved = flags_.prf ? solve.pose : solve.initial_pose;
        } catch (const std::runtime_error&) {
            solved = std::nullopt;
        }
        result.timings.solve_ms = detail::ms_since(t_solve);

        if (solved) {
            result.solved_pose = solved;
            result.estimate = solved;
        } else {
            result.solve_failed = true;
            result.estimate = state_.prev_pose;  // the prior persists
        }
        if (result.estimate)
            result.add_mm = add_error(*result.estimate, frame.pose, frame.kp3d);

        // --- state update ------------------------------------------------------
        if (solved) state_.prev_pose = solved;
        state_.prev_keypoints = assembled;
        state_.prev_detections = det_raw;
        state_.prev_belief = state_.frame_index + 1 <= 1
                                 ? BeliefMap::zeros(input, input)
                                 : render_belief(detail::to_input_frame(assembled, affine_, input),
                                                 cfg_.head);
        state_.frame_index += 1;

        result.timings.total_ms = detail::ms_since(t_start);
        return result;
    }

private:
    CameraIntrinsics intrinsics_;
    TrackerConfig cfg_;
    AblationFlags flags_;
    const FusionWeights& weights_;
    AffineMap2D affine_;
    Rng augment_rng_;
    TrackerState state_;
};

struct SequenceResult {
    std::vector<FrameResult> frames;  // one per input frame
    MetricsReport report;
    double mean_fps = 0.0;
};

// Streams a video through the tracker. The first frame is processed twice
// (as I_0 and I_1) with blank initial belief maps; results are reported for
// the second pass onward, one per input frame.
inline SequenceResult track_sequence(const SequenceSample& sample, const TrackerConfig& cfg,
                                     const AblationFlags& flags, const FusionWeights& weights) {
    if (sample.frames.empty()) throw EmptyInput("track_sequence: no frames");
    Tracker tracker(sample.intrinsics, cfg, flags, weights);
    SequenceResult out;
    out.frames.reserve(sample.frames.size());

    tracker.process(sample.frames[0]);  // bootstrap duplicate of frame 0
    std::vector<double> pixel_errors;
    std::vector<double> add_errors;
    std::size_t failed = 0;
    double total_ms = 0.0;
    for (const FrameRecord& frame : sample.frames) {
        FrameResult r = tracker.process(frame);
        total_ms += r.timings.total_ms;
        if (r.solve_failed) ++failed;
        add_errors.push_back(r.add_mm);
        const auto errs = pck_errors(r.keypoints, frame.kp2d_gt);
        pixel_errors.insert(pixel_errors.end(), errs.begin(), errs.end());
        out.frames.push_back(std::move(r));
    }
    out.report = make_report(pixel_errors, add_errors, out.frames.size(), failed);
    out.mean_fps = total_ms > 0.0 ? 1000.0 * static_cast<double>(out.frames.size()) / total_ms : 0.0;
    return out;
}

}  // namespace sgta
