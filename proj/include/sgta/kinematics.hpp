#pragma once

#include <string>
#include <vector>

#include "sgta/geometry.hpp"

namespace sgta {

// One revolute link: a fixed transform from the parent frame followed by a
// rotation of `angle` about joint_axis (expressed in the link frame).
struct ChainLink {
    PoseSE3 fixed_transform;
    Eigen::Vector3d joint_axis = Eigen::Vector3d::UnitZ();
};

struct KeypointAnchor {
    int link = 0;                                          // index into links
    Eigen::Vector3d offset = Eigen::Vector3d::Zero();      // meters, link frame
};

struct KinematicChain {
    std::vector<ChainLink> links;
    std::vector<KeypointAnchor> anchors;
};

struct JointConfig {
    std::vector<double> angles;  // radians, one per link
};

struct KeypointSet3D {
    std::vector<Eigen::Vector3d> points;  // meters, robot base frame
    std::vector<int> ids;                 // dense 0..c-1

    std::size_t size() const { return points.size(); }
};

inline std::vector<std::string> validate_chain(const KinematicChain& chain) {
    std::vector<std::string> violations;
    for (std::size_t i = 0; i < chain.links.size(); ++i) {
        if (std::abs(chain.links[i].joint_axis.norm() - 1.0) > 1e-9)
            violations.push_back("joint_axis not unit (link " + std::to_string(i) + ")");
        if (!chain.links[i].fixed_transform.is_valid())
            violations.push_back("fixed_transform not rigid (link " + std::to_string(i) + ")");
    }
    for (std::size_t i = 0; i < chain.anchors.size(); ++i) {
        const int link = chain.anchors[i].link;
        if (link < 0 || link >= static_cast<int>(chain.links.size()))
            violations.push_back("anchor out of range (anchor " + std::to_string(i) + ")");
    }
    if (chain.anchors.size() < 6) violations.push_back("fewer than 6 keypoint anchors");
    return violations;
}

// Forward kinematics of the keypoint anchors. Link k's frame is
//   T_k = T_{k-1} * fixed_k * Rot(axis_k, q_k),  T_{-1} = identity.
inline KeypointSet3D fk_keypoints(const KinematicChain& chain, const JointConfig& q) {
    if (q.angles.size() != chain.links.size())
        throw LengthMismatch("fk_keypoints: joint config length " + std::to_string(q.angles.size()) +
                             " != link count " + std::to_string(chain.links.size()));
    std::vector<PoseSE3> frames(chain.links.size());
    PoseSE3 cur = PoseSE3::identity();
    for (std::size_t k = 0; k < chain.links.size(); ++k) {
        cur = compose(cur, chain.links[k].fixed_transform);
        PoseSE3 joint;
        joint.rotation = so3_exp(chain.links[k].joint_axis * q.angles[k]);
        cur = compose(cur, joint);
        frames[k] = cur;
    }
    KeypointSet3D out;
    out.points.reserve(chain.anchors.size());
    out.ids.reserve(chain.anchors.size());
    for (std::size_t i = 0; i < chain.anchors.size(); ++i) {
        out.points.push_back(frames[chain.anchors[i].link].apply(chain.anchors[i].offset));
        out.ids.push_back(static_cast<int>(i));
    }
    return out;
}

// Bundled 7-joint chain with one keypoint anchor per link. The dimensions
// are invented placeholders shaped loosely like a tabletop arm; they are not
// measurements of any real manipulator.
inline KinematicChain default_chain() {
    auto link = [](double tx, double ty, double tz, const Eigen::Vector3d& axis) {
        ChainLink l;
        l.fixed_transform.translation = Eigen::Vector3d(tx, ty, tz);
        l.joint_axis = axis.normalized();
        return l;
    };
    KinematicChain chain;
    chain.links = {
        link(0.00, 0.00, 0.14, Eigen::Vector3d::UnitZ()),
        link(0.03, 0.00, 0.10, Eigen::Vector3d::UnitY()),
        link(0.00, 0.02, 0.12, Eigen::Vector3d::UnitZ()),
        link(0.05, 0.00, 0.10, Eigen::Vector3d::UnitY()),
        link(0.00, -0.03, 0.11, Eigen::Vector3d::UnitZ()),
        link(0.04, 0.00, 0.08, Eigen::Vector3d::UnitY()),
        link(0.00, 0.02, 0.06, Eigen::Vector3d::UnitX()),
    };
    // Anchors sit off the joint axes (housing bosses rather than joint
    // centers) so the keypoint cloud never collapses onto the arm's spine;
    // nearly collinear keypoints leave PnP ill-conditioned.
    chain.anchors = {
        {0, Eigen::Vector3d(0.06, 0.00, 0.0)},  {1, Eigen::Vector3d(-0.05, 0.04, 0.0)},
        {2, Eigen::Vector3d(0.00, -0.06, 0.0)}, {3, Eigen::Vector3d(0.05, 0.04, 0.0)},
        {4, Eigen::Vector3d(-0.04, -0.04, 0.0)},{5, Eigen::Vector3d(0.00, 0.05, 0.02)},
        {6, Eigen::Vector3d(0.02, 0.00, 0.04)},
    };
    return chain;
}

}  // namespace sgta
