#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgta/errors.hpp"
#include "sgta/fusion.hpp"
#include "sgta/geometry.hpp"
#include "sgta/kinematics.hpp"

namespace sgta {

using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// Deterministic number formatting
// ---------------------------------------------------------------------------

// Decimal with 17 significant digits: enough to round-trip any double
// exactly, and byte-stable across reruns. Negative zero is canonicalized to
// "0" because JSON parsers with an integer fast path drop its sign.
inline void append_double(std::string& out, double v) {
    if (v == 0.0) {
        out += "0";
        return;
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out += buf;
}

inline std::string format_double(double v) {
    std::string s;
    append_double(s, v);
    return s;
}

// ---------------------------------------------------------------------------
// CRC32 (polynomial 0xEDB88320), used to detect corrupted dataset records
// ---------------------------------------------------------------------------

inline std::uint32_t crc32(const std::string& data) {
    static const std::array<std::uint32_t, 256> table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t crc = 0xFFFFFFFFu;
    for (unsigned char ch : data) crc = table[(crc ^ ch) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

// ---------------------------------------------------------------------------
// Pose / intrinsics / chain JSON
// ---------------------------------------------------------------------------

inline Json pose_to_json(const PoseSE3& pose) {
    Json j;
    for (int r = 0; r < 3; ++r) {
        Json row = Json::array();
        for (int c = 0; c < 3; ++c) row.push_back(pose.rotation(r, c));
        j["rotation"].push_back(row);
    }
    j["translation"] = {pose.translation.x(), pose.translation.y(), pose.translation.z()};
    return j;
}

inline PoseSE3 pose_from_json(const Json& j) {
    PoseSE3 pose;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) pose.rotation(r, c) = j.at("rotation").at(r).at(c).get<double>();
    for (int i = 0; i < 3; ++i) pose.translation[i] = j.at("translation").at(i).get<double>();
    return pose;
}

inline Json intrinsics_to_json(const CameraIntrinsics& k) {
    return Json{{"fx", k.fx}, {"fy", k.fy},       {"cx", k.cx},
                {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
}

inline CameraIntrinsics intrinsics_from_json(const Json& j) {
    CameraIntrinsics k;
    k.fx = j.at("fx").get<double>();
    k.fy = j.at("fy").get<double>();
    k.cx = j.at("cx").get<double>();
    k.cy = j.at("cy").get<double>();
    k.width = j.at("width").get<int>();
    k.height = j.at("height").get<int>();
    return k;
}

inline Json chain_to_json(const KinematicChain& chain) {
    Json j;
    j["links"] = Json::array();
    for (const auto& link : chain.links) {
        Json l;
        l["transform"] = pose_to_json(link.fixed_transform);
        l["axis"] = {link.joint_axis.x(), link.joint_axis.y(), link.joint_axis.z()};
        j["links"].push_back(l);
    }
    j["anchors"] = Json::array();
    for (const auto& anchor : chain.anchors) {
        Json a;
        a["link"] = anchor.link;
        a["offset"] = {anchor.offset.x(), anchor.offset.y(), anchor.offset.z()};
        j["anchors"].push_back(a);
    }
    return j;
}

inline KinematicChain chain_from_json(const Json& j) {
    KinematicChain chain;
    for (const auto& l : j.at("links")) {
        ChainLink link;
        link.fixed_transform = pose_from_json(l.at("transform"));
        for (int i = 0; i < 3; ++i) link.joint_axis[i] = l.at("axis").at(i).get<double>();
        chain.links.push_back(link);
    }
    for (const auto& a : j.at("anchors")) {
        KeypointAnchor anchor;
        anchor.link = a.at("link").get<int>();
        for (int i = 0; i < 3; ++i) anchor.offset[i] = a.at("offset").at(i).get<double>();
        chain.anchors.push_back(anchor);
    }
    return chain;
}

inline KinematicChain load_chain(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("load_chain: cannot open " + path);
    Json j;
    try {
        in >> j;
    } catch (const Json::exception& e) {
        throw FormatError(std::string("load_chain: ") + e.what());
    }
    return chain_from_json(j);
}

inline void save_chain(const KinematicChain& chain, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw FormatError("save_chain: cannot open " + path);
    out << chain_to_json(chain).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Fusion weights: JSON header line + little-endian 64-bit floats
// ---------------------------------------------------------------------------

inline void save_fusion_weights(FusionWeights& weights, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("save_fusion_weights: cannot open " + path);
    Json header;
    header["magic"] = "sgta-weights";
    header["version"] = 1;
    header["seed"] = weights.seed;
    header["shapes"] = Json::array();
    auto views = param_views(weights);
    for (const auto& v : views)
        header["shapes"].push_back(Json{{"name", v.name}, {"rows", v.rows}, {"cols", v.cols}});
    out << header.dump() << "\n";
    static_assert(sizeof(double) == 8);
    for (const auto& v : views)
        out.write(reinterpret_cast<const char*>(v.data),
                  static_cast<std::streamsize>(v.size * sizeof(double)));
}

inline FusionWeights load_fusion_weights(const FusionConfig& cfg, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("load_fusion_weights: cannot open " + path);
    std::string header_line;
    if (!std::getline(in, header_line)) throw FormatError("load_fusion_weights: missing header");
    Json header;
    try {
        header = Json::parse(header_line);
    } catch (const Json::exception& e) {
        throw FormatError(std::string("load_fusion_weights: bad header: ") + e.what());
    }
    if (header.value("magic", "") != "sgta-weights")
        throw FormatError("load_fusion_weights: bad magic");
    if (header.value("version", 0) != 1)
        throw FormatError("load_fusion_weights: unsupported version");
    FusionWeights weights = make_fusion_weights(cfg, header.value("seed", 0ULL));
    auto views = param_views(weights);
    const auto& shapes = header.at("shapes");
    if (shapes.size() != views.size())
        throw FormatError("load_fusion_weights: shape count mismatch");
    for (std::size_t i = 0; i < views.size(); ++i) {
        if (shapes[i].at("name").get<std::string>() != views[i].name ||
            shapes[i].at("rows").get<int>() != views[i].rows ||
            shapes[i].at("cols").get<int>() != views[i].cols)
            throw FormatError("load_fusion_weights: shape mismatch at " + views[i].name);
        in.read(reinterpret_cast<char*>(views[i].data),
                static_cast<std::streamsize>(views[i].size * sizeof(double)));
        if (!in) throw FormatError("load_fusion_weights: truncated payload");
    }
    return weights;
}

}  // namespace sgta
