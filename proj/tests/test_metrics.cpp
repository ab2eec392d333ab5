#include <gtest/gtest.h>

#include <cmath>

#include "sgta/metrics.hpp"
#include "sgta/rng.hpp"

namespace sgta {
namespace {

KeypointSet2D make_set(const std::vector<Eigen::Vector2d>& points) {
    KeypointSet2D out;
    for (std::size_t i = 0; i < points.size(); ++i) {
        Keypoint2D kp;
        kp.id = static_cast<int>(i);
        kp.p = points[i];
        out.kps.push_back(kp);
    }
    return out;
}

TEST(PckErrors, EqualSetsGiveZeros) {
    const KeypointSet2D gt = make_set({{10, 10}, {20, 30}, {40, 50}});
    const auto errors = pck_errors(gt, gt);
    ASSERT_EQ(errors.size(), 3u);
    for (double e : errors) EXPECT_DOUBLE_EQ(e, 0.0);
}

TEST(PckErrors, PythagoreanOffset) {
    const KeypointSet2D gt = make_set({{10, 10}});
    const KeypointSet2D pred = make_set({{13, 14}});
    const auto errors = pck_errors(pred, gt);
    ASSERT_EQ(errors.size(), 1u);
    EXPECT_DOUBLE_EQ(errors[0], 5.0);
}

TEST(PckErrors, OutOfFrameGroundTruthExcluded) {
    KeypointSet2D gt = make_set({{10, 10}, {20, 30}});
    gt[1].in_frame = false;
    const KeypointSet2D pred = make_set({{10, 10}, {99, 99}});
    const auto errors = pck_errors(pred, gt);
    EXPECT_EQ(errors.size(), 1u);
}

TEST(PckErrors, UnavailablePredictionIsInfinite) {
    const KeypointSet2D gt = make_set({{10, 10}});
    KeypointSet2D pred = make_set({{10, 10}});
    pred[0].in_frame = false;
    const auto errors = pck_errors(pred, gt);
    ASSERT_EQ(errors.size(), 1u);
    EXPECT_TRUE(std::isinf(errors[0]));
}

TEST(PckErrors, IdMismatchThrows) {
    KeypointSet2D gt = make_set({{10, 10}});
    KeypointSet2D pred = make_set({{10, 10}});
    pred[0].id = 5;
    EXPECT_THROW(pck_errors(pred, gt), IdMismatch);
}

TEST(AddError, IdenticalPosesGiveZero) {
    KeypointSet3D points;
    points.points = {{0.1, 0.2, 0.3}, {0.4, 0.1, 0.2}};
    points.ids = {0, 1};
    PoseSE3 pose;
    pose.translation = Eigen::Vector3d(0.5, 0, 1.0);
    EXPECT_DOUBLE_EQ(add_error(pose, pose, points), 0.0);
}

TEST(AddError, PureTranslationIsExact) {
    KeypointSet3D points;
    points.points = {{0.1, 0.2, 0.3}, {0.4, 0.1, 0.2}, {-0.2, 0.3, 0.5}};
    points.ids = {0, 1, 2};
    PoseSE3 gt;
    PoseSE3 est = gt;
    est.translation.x() += 0.010;  // 10 mm
    EXPECT_NEAR(add_error(est, gt, points), 10.0, 1e-12);
}

// Chord length: keypoints on a radius-0.5 circle in the xy-plane rotated by
// 5 degrees about z move by 2 * 0.5 * sin(2.5 deg) = 43.62 mm.
TEST(AddError, RotationChordLength) {
    KeypointSet3D points;
    for (int i = 0; i < 8; ++i) {
        const double a = 2.0 * M_PI * i / 8;
        points.points.emplace_back(0.5 * std::cos(a), 0.5 * std::sin(a), 0.0);
        points.ids.push_back(i);
    }
    PoseSE3 gt;
    PoseSE3 est;
    est.rotation = so3_exp(Eigen::Vector3d(0, 0, 5.0 * M_PI / 180.0));
    const double expected_mm = 2.0 * 0.5 * std::sin(2.5 * M_PI / 180.0) * 1000.0;
    EXPECT_NEAR(add_error(est, gt, points), expected_mm, 1e-9);
    EXPECT_NEAR(expected_mm, 43.6194, 1e-3);
}

TEST(AddError, SymmetricInArguments) {
    KeypointSet3D points;
    points.points = {{0.1, 0.2, 0.3}, {0.4, 0.1, 0.2}, {-0.2, 0.3, 0.5}};
    points.ids = {0, 1, 2};
    Rng rng(5);
    PoseSE3 a, b;
    a.rotation = so3_exp(Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()));
    a.translation = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
    b.rotation = so3_exp(Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()));
    b.translation = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
    EXPECT_DOUBLE_EQ(add_error(a, b, points), add_error(b, a, points));
}

TEST(AucBelow, AllZerosIsOne) {
    EXPECT_DOUBLE_EQ(auc_below({0, 0, 0}, 12.0), 1.0);
}

TEST(AucBelow, AllAboveThresholdIsZero) {
    EXPECT_DOUBLE_EQ(auc_below({13, 20, 1e9}, 12.0), 0.0);
}

TEST(AucBelow, UniformErrorsConvergeToHalf) {
    Rng rng(13);
    std::vector<double> errors;
    errors.reserve(100000);
    for (int i = 0; i < 100000; ++i) errors.push_back(rng.uniform(0.0, 12.0));
    EXPECT_NEAR(auc_below(errors, 12.0), 0.5, 0.01);
}

TEST(AucBelow, InfiniteErrorsNeverAccurate) {
    const double inf = std::numeric_limits<double>::infinity();
    EXPECT_DOUBLE_EQ(auc_below({0.0, inf}, 12.0), 0.5);
}

TEST(AucBelow, MonotoneInThresholdAndPermutationInvariant) {
    Rng rng(17);
    std::vector<double> errors;
    for (int i = 0; i < 500; ++i) errors.push_back(rng.uniform(0.0, 30.0));
    double prev = 0.0;
    for (double tau : {2.0, 4.0, 8.0, 16.0, 32.0}) {
        const double auc = auc_below(errors, tau);
        EXPECT_GE(auc + 1e-15, prev);
        prev = auc;
    }
    std::vector<double> shuffled = errors;
    std::reverse(shuffled.begin(), shuffled.end());
    EXPECT_DOUBLE_EQ(auc_below(errors, 12.0), auc_below(shuffled, 12.0));
}

TEST(AucBelow, EmptyInputThrows) {
    EXPECT_THROW(auc_below({}, 12.0), EmptyInput);
}

TEST(Median, OddEvenAndInfinities) {
    EXPECT_DOUBLE_EQ(median({3, 1, 2}), 2.0);
    EXPECT_DOUBLE_EQ(median({4, 1, 2, 3}), 2.5);
    const double inf = std::numeric_limits<double>::infinity();
    EXPECT_TRUE(std::isinf(median({1.0, inf, inf})));
    EXPECT_DOUBLE_EQ(median_finite({1.0, inf, inf}), 1.0);
    EXPECT_THROW(median({}), EmptyInput);
}

TEST(LossBelief, ZeroWhenEqual) {
    const std::vector<double> a = {0.1, 0.5, 0.9};
    EXPECT_DOUBLE_EQ(loss_belief(a, a).value, 0.0);
}

TEST(LossBelief, SingleCellSquare) {
    const std::vector<double> target = {0.0, 0.0};
    const std::vector<double> pred = {0.5, 0.0};
    EXPECT_DOUBLE_EQ(loss_belief(pred, target).value, 0.25);
}

TEST(LossBelief, GradientMatchesFiniteDifferences) {
    Rng rng(21);
    std::vector<double> pred(40), target(40);
    for (auto& v : pred) v = rng.uniform(0, 1);
    for (auto& v : target) v = rng.uniform(0, 1);
    const LossValue loss = loss_belief(pred, target);
    const double h = 1e-6;
    for (int i = 0; i < 10; ++i) {
        const std::size_t idx = rng.uniform_int(pred.size());
        std::vector<double> plus = pred, minus = pred;
        plus[idx] += h;
        minus[idx] -= h;
        const double fd = (loss_belief(plus, target).value - loss_belief(minus, target).value) /
                          (2.0 * h);
        EXPECT_NEAR(loss.gradient[idx], fd, 1e-6 * std::max(1.0, std::abs(fd)));
    }
}

TEST(LossBelief, ShapeMismatchThrows) {
    EXPECT_THROW(loss_belief({0.1}, {0.1, 0.2}), ShapeMismatch);
}

TEST(LossOffset, PerfectOffsetsGiveZero) {
    HeadConfig cfg;
    KeypointSet2D gt;
    Keypoint2D kp;
    kp.id = 0;
    kp.p = Eigen::Vector2d(102, 61);  // p_low (25, 15), target offset (0.5, 0.25)
    gt.kps.push_back(kp);
    const int hs = cfg.head_size();
    std::vector<double> offsets(2 * hs * hs, 0.0);
    offsets[(0 * hs + 15) * hs + 25] = 0.5;
    offsets[(1 * hs + 15) * hs + 25] = 0.25;
    EXPECT_DOUBLE_EQ(loss_offset(offsets, gt, cfg).value, 0.0);
}

// Smooth-L1 with beta = 1: error 0.5 per axis -> 0.5 * 0.25 per axis,
// 0.25 for the keypoint.
TEST(LossOffset, SmoothL1QuadraticRegion) {
    HeadConfig cfg;
    KeypointSet2D gt;
    Keypoint2D kp;
    kp.id = 0;
    kp.p = Eigen::Vector2d(100, 60);  // targets (0, 0)
    gt.kps.push_back(kp);
    const int hs = cfg.head_size();
    std::vector<double> offsets(2 * hs * hs, 0.0);
    offsets[(0 * hs + 15) * hs + 25] = 0.5;
    offsets[(1 * hs + 15) * hs + 25] = 0.5;
    EXPECT_DOUBLE_EQ(loss_offset(offsets, gt, cfg).value, 0.25);
}

TEST(LossOffset, GradientOnlyAtSupervisedCells) {
    HeadConfig cfg;
    KeypointSet2D gt;
    Keypoint2D kp;
    kp.id = 0;
    kp.p = Eigen::Vector2d(100, 60);
    gt.kps.push_back(kp);
    const int hs = cfg.head_size();
    Rng rng(31);
    std::vector<double> offsets(2 * hs * hs);
    for (auto& v : offsets) v = rng.uniform(-0.5, 0.5);
    const LossValue loss = loss_offset(offsets, gt, cfg);
    for (int plane = 0; plane < 2; ++plane) {
        for (int y = 0; y < hs; ++y) {
            for (int x = 0; x < hs; ++x) {
                const double g = loss.gradient[(plane * hs + y) * hs + x];
                if (y == 15 && x == 25) {
                    EXPECT_NE(g, 0.0);
                } else {
                    EXPECT_EQ(g, 0.0);
                }
            }
        }
    }
}

TEST(LossOffset, GradientMatchesFiniteDifferences) {
    HeadConfig cfg{64, 4, 2, 4.0};
    KeypointSet2D gt;
    for (int i = 0; i < 2; ++i) {
        Keypoint2D kp;
        kp.id = i;
        kp.p = Eigen::Vector2d(13.0 + 17.0 * i, 22.0 + 9.0 * i);
        gt.kps.push_back(kp);
    }
    const int hs = cfg.head_size();
    Rng rng(37);
    std::vector<double> offsets(2 * hs * hs);
    for (auto& v : offsets) v = rng.uniform(-2.0, 2.0);  // exercises both branches
    const LossValue loss = loss_offset(offsets, gt, cfg);
    const double h = 1e-6;
    for (std::size_t idx = 0; idx < offsets.size(); ++idx) {
        if (loss.gradient[idx] == 0.0) continue;
        std::vector<double> plus = offsets, minus = offsets;
        plus[idx] += h;
        minus[idx] -= h;
        const double fd =
            (loss_offset(plus, gt, cfg).value - loss_offset(minus, gt, cfg).value) / (2.0 * h);
        EXPECT_NEAR(loss.gradient[idx], fd, 1e-6 * std::max(1.0, std::abs(fd)));
    }
}

TEST(LossTotal, PaperWeights) {
    EXPECT_DOUBLE_EQ(loss_total(2.0, 100.0), 3.0);
    EXPECT_DOUBLE_EQ(loss_total(0.0, 0.0), 0.0);
    LossConfig cfg;
    cfg.lambda_offset *= 2.0;
    EXPECT_DOUBLE_EQ(loss_total(2.0, 100.0, cfg), 4.0);
}

}  // namespace
}  // namespace sgta
