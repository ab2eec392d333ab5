#include <gtest/gtest.h>

#include <cmath>

#include "sgta/experiments.hpp"
#include "sgta/pipeline.hpp"
#include "sgta/simulator.hpp"

namespace sgta {
namespace {

SimConfig clean_config(int frames = 8, std::uint64_t seed = 5) {
    SimConfig cfg;
    cfg.videos = 1;
    cfg.frames_per_video = frames;
    cfg.seed = seed;
    cfg.detector_noise_sigma = 0.0;
    cfg.outlier_prob = 0.0;
    cfg.occlusion_prob = 0.0;
    return cfg;
}

// Deterministically resamples until every ground-truth keypoint of every
// frame stays inside the image, so solves cannot fail for framing reasons.
Dataset framed_dataset(SimConfig cfg, const KinematicChain& chain) {
    for (int attempt = 0;; ++attempt) {
        cfg.seed += attempt;
        Dataset ds = generate_dataset(cfg, chain);
        bool framed = true;
        for (const auto& video : ds.videos) {
            for (const auto& frame : video.frames) {
                for (const auto& kp : frame.kp2d_gt)
                    if (!kp.in_frame) framed = false;
            }
        }
        if (framed) return ds;
    }
}

struct PipelineFixture {
    KinematicChain chain = default_chain();
    TrackerConfig cfg;
    FusionWeights weights;

    PipelineFixture() : weights(make_fusion_weights(cfg.fusion, 0)) {
        cfg.ransac.inlier_threshold = 4.5;
    }
};

TEST(TrackSequence, ZeroNoiseSequenceIsExact) {
    PipelineFixture fx;
    const Dataset ds = framed_dataset(clean_config(8, 11), fx.chain);
    const SequenceResult res = track_sequence(ds.videos[0], fx.cfg, AblationFlags{}, fx.weights);
    ASSERT_EQ(res.frames.size(), 8u);
    for (const auto& frame : res.frames) {
        EXPECT_FALSE(frame.solve_failed);
        EXPECT_LT(frame.add_mm, 1e-3);  // < 1e-6 m
    }
    EXPECT_NEAR(res.report.add_auc, 1.0, 1e-9);
    EXPECT_GT(res.mean_fps, 0.0);
}

TEST(TrackSequence, DeterministicUnderSameInputs) {
    PipelineFixture fx;
    SimConfig sim = clean_config(5, 13);
    sim.detector_noise_sigma = 1.5;
    const Dataset ds = framed_dataset(sim, fx.chain);
    const SequenceResult a = track_sequence(ds.videos[0], fx.cfg, AblationFlags{}, fx.weights);
    const SequenceResult b = track_sequence(ds.videos[0], fx.cfg, AblationFlags{}, fx.weights);
    ASSERT_EQ(a.frames.size(), b.frames.size());
    for (std::size_t f = 0; f < a.frames.size(); ++f) {
        ASSERT_EQ(a.frames[f].estimate.has_value(), b.frames[f].estimate.has_value());
        if (a.frames[f].estimate) {
            EXPECT_EQ(a.frames[f].estimate->rotation, b.frames[f].estimate->rotation);
            EXPECT_EQ(a.frames[f].estimate->translation, b.frames[f].estimate->translation);
        }
        for (std::size_t i = 0; i < a.frames[f].keypoints.size(); ++i) {
            EXPECT_EQ(a.frames[f].keypoints[i].p, b.frames[f].keypoints[i].p);
        }
    }
}

// With SGF disabled the constructed reprojection map must be identically
// zero on every frame.
TEST(TrackSequence, NoSgfMeansBlankReprojectionMap) {
    PipelineFixture fx;
    fx.cfg.capture_maps = true;
    SimConfig sim = clean_config(6, 17);
    sim.detector_noise_sigma = 1.0;
    const Dataset ds = framed_dataset(sim, fx.chain);
    AblationFlags flags;
    flags.sgf = false;
    const SequenceResult res = track_sequence(ds.videos[0], fx.cfg, flags, fx.weights);
    for (const auto& frame : res.frames) {
        ASSERT_TRUE(frame.reproj_map.has_value());
        EXPECT_TRUE(frame.reproj_map->all_zero());
    }
    // and with SGF on, the map carries mass once a prior pose exists
    const SequenceResult on = track_sequence(ds.videos[0], fx.cfg, AblationFlags{}, fx.weights);
    EXPECT_FALSE(on.frames.back().reproj_map->all_zero());
}

// A frame whose solve fails must keep the previous pose as the prior and
// report it as the carried estimate.
TEST(TrackFrame, FailedSolveKeepsPrior) {
    PipelineFixture fx;
    const Dataset ds = framed_dataset(clean_config(4, 19), fx.chain);
    AblationFlags flags;
    flags.sgf = false;  // no backfill: dropping detections must fail the solve
    flags.tca = false;
    Tracker tracker(ds.videos[0].intrinsics, fx.cfg, flags, fx.weights);
    tracker.process(ds.videos[0].frames[0]);
    const FrameResult good = tracker.process(ds.videos[0].frames[0]);
    ASSERT_TRUE(good.estimate.has_value());
    const PoseSE3 prior = *tracker.state().prev_pose;

    FrameRecord crippled = ds.videos[0].frames[1];
    for (std::size_t i = 0; i < 3; ++i) crippled.kp2d_det[i].in_frame = false;  // 4 left < 6
    const FrameResult failed = tracker.process(crippled);
    EXPECT_TRUE(failed.solve_failed);
    ASSERT_TRUE(failed.estimate.has_value());  // carried estimate
    EXPECT_EQ(failed.estimate->translation, prior.translation);
    ASSERT_TRUE(tracker.state().prev_pose.has_value());
    EXPECT_EQ(tracker.state().prev_pose->translation, prior.translation);

    // a later healthy frame recovers a fresh solve
    const FrameResult healthy = tracker.process(ds.videos[0].frames[2]);
    EXPECT_FALSE(healthy.solve_failed);
}

// Processing [f0] and [f0, f0] must agree on the final frame's pose: the
// bootstrap duplicates frame 0, so both runs see the same stationary input.
TEST(TrackSequence, BootstrapEquivalenceOnCleanInput) {
    PipelineFixture fx;
    const Dataset ds = framed_dataset(clean_config(2, 23), fx.chain);
    SequenceSample single = ds.videos[0];
    single.frames = {ds.videos[0].frames[0]};
    SequenceSample doubled = ds.videos[0];
    doubled.frames = {ds.videos[0].frames[0], ds.videos[0].frames[0]};
    const SequenceResult a = track_sequence(single, fx.cfg, AblationFlags{}, fx.weights);
    const SequenceResult b = track_sequence(doubled, fx.cfg, AblationFlags{}, fx.weights);
    ASSERT_TRUE(a.frames.back().estimate.has_value());
    ASSERT_TRUE(b.frames.back().estimate.has_value());
    EXPECT_LT((a.frames.back().estimate->translation - b.frames.back().estimate->translation)
                  .cwiseAbs()
                  .maxCoeff(),
              1e-12);
    EXPECT_LT((a.frames.back().estimate->rotation - b.frames.back().estimate->rotation)
                  .cwiseAbs()
                  .maxCoeff(),
              1e-12);
}

TEST(TrackFrame, BlankBootstrapBeliefMaps) {
    PipelineFixture fx;
    fx.cfg.capture_maps = true;
    const Dataset ds = framed_dataset(clean_config(3, 29), fx.chain);
    Tracker tracker(ds.videos[0].intrinsics, fx.cfg, AblationFlags{}, fx.weights);
    const FrameResult f0 = tracker.process(ds.videos[0].frames[0]);
    ASSERT_TRUE(f0.prior_map.has_value());
    EXPECT_TRUE(f0.prior_map->all_zero());  // B_0 blank
    const FrameResult f1 = tracker.process(ds.videos[0].frames[0]);
    EXPECT_TRUE(f1.prior_map->all_zero());  // B_1 blank
    const FrameResult f2 = tracker.process(ds.videos[0].frames[1]);
    EXPECT_FALSE(f2.prior_map->all_zero());  // rendered from tracked keypoints afterwards
}

TEST(TrackFrame, TimingsAreBookkept) {
    PipelineFixture fx;
    const Dataset ds = framed_dataset(clean_config(2, 31), fx.chain);
    Tracker tracker(ds.videos[0].intrinsics, fx.cfg, AblationFlags{}, fx.weights);
    const FrameResult r = tracker.process(ds.videos[0].frames[0]);
    EXPECT_GE(r.timings.belief_ms, 0.0);
    EXPECT_GE(r.timings.encode_ms, 0.0);
    EXPECT_GE(r.timings.fuse_ms, 0.0);
    EXPECT_GE(r.timings.decode_ms, 0.0);
    EXPECT_GE(r.timings.solve_ms, 0.0);
    EXPECT_GT(r.timings.total_ms, 0.0);
    EXPECT_EQ(r.network_keypoints.size(), static_cast<std::size_t>(fx.cfg.head.keypoint_count));
}

// Occluded keypoints are repaired from the structure prior when SGF is on,
// so mid-burst frames keep solving; with SGF off they fail.
TEST(TrackFrame, SgfBackfillsOcclusions) {
    PipelineFixture fx;
    const Dataset ds = framed_dataset(clean_config(4, 37), fx.chain);
    for (bool sgf : {true, false}) {
        AblationFlags flags;
        flags.sgf = sgf;
        Tracker tracker(ds.videos[0].intrinsics, fx.cfg, flags, fx.weights);
        tracker.process(ds.videos[0].frames[0]);
        tracker.process(ds.videos[0].frames[0]);
        FrameRecord occluded = ds.videos[0].frames[1];
        for (std::size_t i = 0; i < 3; ++i) occluded.kp2d_det[i].in_frame = false;
        const FrameResult r = tracker.process(occluded);
        if (sgf) {
            EXPECT_FALSE(r.solve_failed);
            int available = 0;
            for (const auto& kp : r.keypoints)
                if (kp.in_frame) ++available;
            EXPECT_EQ(available, 7);
        } else {
            EXPECT_TRUE(r.solve_failed);
        }
    }
}

// The full configuration must not lose to the all-off baseline on a noisy
// set; the acceptance suite runs the full four-row grid at 100 videos.
TEST(TrackDataset, FullConfigBeatsBaseline) {
    PipelineFixture fx;
    SimConfig sim;
    sim.videos = 8;
    sim.frames_per_video = 6;
    sim.seed = 41;
    sim.detector_noise_sigma = 1.5;
    sim.outlier_prob = 0.05;
    sim.outlier_magnitude = 40.0;
    sim.occlusion_prob = 0.10;
    const Dataset ds = framed_dataset(sim, fx.chain);
    const FusionWeights& w = fx.weights;
    const TrackRunResult full = track_dataset(ds, fx.cfg, AblationFlags{true, true, true}, w);
    const TrackRunResult base = track_dataset(ds, fx.cfg, AblationFlags{false, false, false}, w);
    EXPECT_LE(mean_add_capped(full), mean_add_capped(base) * 1.05);
    EXPECT_LE(full.failed_frames, base.failed_frames);
}

TEST(MultiframeSweep, CombinationCapAndExhaustiveCase) {
    PipelineFixture fx;
    SimConfig sim = clean_config(20, 43);
    sim.detector_noise_sigma = 2.0;
    const Dataset ds = framed_dataset(sim, fx.chain);
    RansacConfig rcfg;
    rcfg.inlier_threshold = 6.0;
    const auto rows = multiframe_sweep(ds.videos[0], {1, 10, 20}, rcfg, 2500, 7);
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0].combinations, 20u);    // C(20,1)
    EXPECT_EQ(rows[1].combinations, 2500u);  // C(20,10) = 184756 capped at 2500
    EXPECT_EQ(rows[2].combinations, 1u);     // C(20,20): min = max = median
    EXPECT_EQ(rows[2].min_add_mm, rows[2].max_add_mm);
    EXPECT_EQ(rows[2].min_add_mm, rows[2].median_add_mm);
}

TEST(OcclusionBurst, MarksOnlyBurstFrames) {
    PipelineFixture fx;
    SimConfig sim = clean_config(10, 47);
    const Dataset ds = framed_dataset(sim, fx.chain);
    const SequenceSample burst = apply_occlusion_burst(ds.videos[0], 4, 6, 1.0, 99);
    for (int f = 0; f < 10; ++f) {
        int dropped = 0;
        for (const auto& kp : burst.frames[f].kp2d_det)
            if (!kp.in_frame) ++dropped;
        if (f >= 4 && f <= 6) {
            EXPECT_EQ(dropped, 7) << "frame " << f;
        } else {
            EXPECT_EQ(dropped, 0) << "frame " << f;
        }
    }
}

}  // namespace
}  // namespace sgta
