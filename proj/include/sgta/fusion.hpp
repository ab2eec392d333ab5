#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sgta/beliefmap.hpp"
#include "sgta/errors.hpp"
#include "sgta/rng.hpp"

namespace sgta {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// One pyramid level, stored channel-major: values[(c*height + y)*width + x].
// Viewed as a matrix it is (channels x cells) with cells scanned row-major.
struct FeatureLevel {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> values;

    static FeatureLevel zeros(int c, int h, int w) {
        FeatureLevel f;
        f.channels = c;
        f.height = h;
        f.width = w;
        f.values.assign(static_cast<std::size_t>(c) * h * w, 0.0);
        return f;
    }

    int cells() const { return height * width; }

    double at(int c, int y, int x) const {
        return values[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    double& at(int c, int y, int x) {
        return values[(static_cast<std::size_t>(c) * height + y) * width + x];
    }

    using MatrixView = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    using ConstMatrixView =
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

    MatrixView matrix() { return MatrixView(values.data(), channels, cells()); }
    ConstMatrixView matrix() const { return ConstMatrixView(values.data(), channels, cells()); }
};

struct FeaturePyramid {
    std::array<FeatureLevel, 6> levels;
};

struct FusionConfig {
    int input_size = 480;
    int stride = 4;  // level-1 stride relative to the input
    std::array<int, 3> window_sizes{13, 7, 3};
    int attention_layers = 3;
    int heads = 4;
    int base_channels = 16;
    int decoder_channels = 7;  // heatmap channels emitted by the decoder

    int level_channels(int level) const { return base_channels << level; }

    // Level spatial side: level 0 at input/stride, then ceil-halved.
    int level_side(int level) const {
        int s = input_size / stride;
        for (int j = 0; j < level; ++j) s = (s + 1) / 2;
        return s;
    }
};

struct MlpWeights {
    Matrix w1;  // (hidden x in)
    Vector b1;
    Matrix w2;  // (out x hidden)
    Vector b2;
};

struct AttentionLayerWeights {
    Matrix wq, wk, wv, wo;  // each (C x C); heads are column blocks of width C/heads
};

struct FusionWeights {
    Matrix patch_embed;                 // (c1 x 2): image + belief pooled channels
    std::array<Matrix, 5> level_mix;    // level j+1 mix: (c_{j+1} x c_j)
    std::array<std::vector<AttentionLayerWeights>, 3> attention;  // fine levels 0..2
    std::array<MlpWeights, 3> fine_mlp;    // 2c -> 2c -> c for levels 0..2
    std::array<MlpWeights, 3> coarse_mlp;  // 2c -> 2c -> c for levels 3..5
    Matrix dec_heat;  // (decoder_channels x c1)
    Vector dec_heat_b;
    Matrix dec_off;  // (2 x c1)
    Vector dec_off_b;
    std::uint64_t seed = 0;
};

namespace detail {

inline Matrix seeded_matrix(Rng& rng, int rows, int cols) {
    const double a = 1.0 / std::sqrt(static_cast<double>(cols));
    Matrix m(rows, cols);
    for (int j = 0; j < cols; ++j)
        for (int i = 0; i < rows; ++i) m(i, j) = rng.uniform(-a, a);
    return m;
}

}  // namespace detail

inline FusionWeights make_fusion_weights(const FusionConfig& cfg, std::uint64_t seed) {
    Rng rng = Rng::derive(seed, 0xf05edULL);
    FusionWeights w;
    w.seed = seed;
    w.patch_embed = detail::seeded_matrix(rng, cfg.base_channels, 2);
    for (int j = 0; j < 5; ++j)
        w.level_mix[j] =
            detail::seeded_matrix(rng, cfg.level_channels(j + 1), cfg.level_channels(j));
    for (int m = 0; m < 3; ++m) {
        const int c = cfg.level_channels(m);
        w.attention[m].resize(cfg.attention_layers);
        for (auto& layer : w.attention[m]) {
            layer.wq = detail::seeded_matrix(rng, c, c);
            layer.wk = detail::seeded_matrix(rng, c, c);
            layer.wv = detail::seeded_matrix(rng, c, c);
            layer.wo = detail::seeded_matrix(rng, c, c);
        }
        w.fine_mlp[m].w1 = detail::seeded_matrix(rng, 2 * c, 2 * c);
        w.fine_mlp[m].b1 = Vector::Zero(2 * c);
        w.fine_mlp[m].w2 = detail::seeded_matrix(rng, c, 2 * c);
        w.fine_mlp[m].b2 = Vector::Zero(c);
    }
    for (int i = 0; i < 3; ++i) {
        const int c = cfg.level_channels(3 + i);
        w.coarse_mlp[i].w1 = detail::seeded_matrix(rng, 2 * c, 2 * c);
        w.coarse_mlp[i].b1 = Vector::Zero(2 * c);
        w.coarse_mlp[i].w2 = detail::seeded_matrix(rng, c, 2 * c);
        w.coarse_mlp[i].b2 = Vector::Zero(c);
    }
    w.dec_heat = detail::seeded_matrix(rng, cfg.decoder_channels, cfg.base_channels);
    w.dec_heat_b = Vector::Zero(cfg.decoder_channels);
    w.dec_off = detail::seeded_matrix(rng, 2, cfg.base_channels);
    w.dec_off_b = Vector::Zero(2);
    return w;
}

// Flat named views over every parameter block, for serialization and
// finite-difference checks.
struct ParamView {
    std::string name;
    double* data;
    std::ptrdiff_t size;
    int rows;
    int cols;
};

inline std::vector<ParamView> param_views(FusionWeights& w) {
    std::vector<ParamView> views;
    auto add_m = [&views](const std::string& name, Matrix& m) {
        views.push_back({name, m.data(), m.size(), static_cast<int>(m.rows()),
                         static_cast<int>(m.cols())});
    };
    auto add_v = [&views](const std::string& name, Vector& v) {
        views.push_back({name, v.data(), v.size(), static_cast<int>(v.size()), 1});
    };
    add_m("patch_embed", w.patch_embed);
    for (int j = 0; j < 5; ++j) add_m("level_mix/" + std::to_string(j), w.level_mix[j]);
    for (int m = 0; m < 3; ++m) {
        for (std::size_t l = 0; l < w.attention[m].size(); ++l) {
            const std::string base = "attention/" + std::to_string(m) + "/" + std::to_string(l);
            add_m(base + "/wq", w.attention[m][l].wq);
            add_m(base + "/wk", w.attention[m][l].wk);
            add_m(base + "/wv", w.attention[m][l].wv);
            add_m(base + "/wo", w.attention[m][l].wo);
        }
        const std::string base = "fine_mlp/" + std::to_string(m);
        add_m(base + "/w1", w.fine_mlp[m].w1);
        add_v(base + "/b1", w.fine_mlp[m].b1);
        add_m(base + "/w2", w.fine_mlp[m].w2);
        add_v(base + "/b2", w.fine_mlp[m].b2);
    }
    for (int i = 0; i < 3; ++i) {
        const std::string base = "coarse_mlp/" + std::to_string(i);
        add_m(base + "/w1", w.coarse_mlp[i].w1);
        add_v(base + "/b1", w.coarse_mlp[i].b1);
        add_m(base + "/w2", w.coarse_mlp[i].w2);
        add_v(base + "/b2", w.coarse_mlp[i].b2);
    }
    add_m("dec_heat", w.dec_heat);
    add_v("dec_heat_b", w.dec_heat_b);
    add_m("dec_off", w.dec_off);
    add_v("dec_off_b", w.dec_off_b);
    return views;
}

// Zero-valued clone of a weight set, used to accumulate gradients.
inline FusionWeights zeros_like(const FusionWeights& w) {
    FusionWeights z = w;
    for (auto view : param_views(z)) std::fill(view.data, view.data + view.size, 0.0);
    return z;
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

struct EncodeCache {
    std::array<Matrix, 6> pooled;  // pooled[0]: (2 x cells0); pooled[j]: (c_j x cells_{j+1})
};

namespace detail {

// Average-pools a (channels x h*w) matrix of row-major cells by 2x with
// ceil semantics: edge windows shrink instead of padding. Cells of one
// channel are contiguous, so pooling walks each channel plane in order.
template <typename Derived>
inline Matrix avgpool2(const Eigen::MatrixBase<Derived>& in, int h, int w, int& oh, int& ow) {
    oh = (h + 1) / 2;
    ow = (w + 1) / 2;
    Matrix out(in.rows(), static_cast<Eigen::Index>(oh) * ow);
    for (int c = 0; c < in.rows(); ++c) {
        for (int y = 0; y < oh; ++y) {
            const int y1 = std::min(2 * y + 1, h - 1);
            for (int x = 0; x < ow; ++x) {
                const int x1 = std::min(2 * x + 1, w - 1);
                double acc = in(c, static_cast<Eigen::Index>(2 * y) * w + 2 * x);
                int count = 1;
                if (x1 > 2 * x) {
                    acc += in(c, static_cast<Eigen::Index>(2 * y) * w + x1);
                    ++count;
                }
                if (y1 > 2 * y) {
                    acc += in(c, static_cast<Eigen::Index>(y1) * w + 2 * x);
                    ++count;
                    if (x1 > 2 * x) {
                        acc += in(c, static_cast<Eigen::Index>(y1) * w + x1);
                        ++count;
                    }
                }
                out(c, static_cast<Eigen::Index>(y) * ow + x) = acc / count;
            }
        }
    }
    return out;
}

// Distributes pooled-cell gradients back to the source cells.
inline void avgpool2_backward(const Matrix& d_out, int h, int w, Matrix& d_in) {
    const int oh = (h + 1) / 2;
    const int ow = (w + 1) / 2;
    for (int c = 0; c < d_out.rows(); ++c) {
        for (int y = 0; y < oh; ++y) {
            const int y1 = std::min(2 * y + 1, h - 1);
            for (int x = 0; x < ow; ++x) {
                const int x1 = std::min(2 * x + 1, w - 1);
                const int count = (y1 - 2 * y + 1) * (x1 - 2 * x + 1);
                const double share = d_out(c, static_cast<Eigen::Index>(y) * ow + x) / count;
                for (int yy = 2 * y; yy <= y1; ++yy)
                    for (int xx = 2 * x; xx <= x1; ++xx)
                        d_in(c, static_cast<Eigen::Index>(yy) * w + xx) += share;
            }
        }
    }
}

}  // namespace detail

// Deterministic toy encoder: stride-4 average pooling of the (normalized
// image, belief) pair into a seeded linear mix with tanh, then repeated
// 2x average pooling and channel-doubling mixes for the remaining levels.
inline FeaturePyramid encode_pyramid(const BeliefMap& image, const BeliefMap& belief,
                                     const FusionConfig& cfg, const FusionWeights& weights,
                                     EncodeCache* cache = nullptr) {
    if (image.width != cfg.input_size || image.height != cfg.input_size || image.channels != 1 ||
        belief.width != cfg.input_size || belief.height != cfg.input_size || belief.channels != 1)
        throw SizeMismatch("encode_pyramid: inputs must be single-channel at input_size");
    if (cfg.input_size % cfg.stride != 0)
        throw SizeMismatch("encode_pyramid: input_size not divisible by stride");

    const int s0 = cfg.input_size / cfg.stride;
    Matrix pooled0(2, static_cast<Eigen::Index>(s0) * s0);
    const double inv_area = 1.0 / (cfg.stride * cfg.stride);
    for (int y = 0; y < s0; ++y) {
        for (int x = 0; x < s0; ++x) {
            double si = 0.0, sb = 0.0;
            for (int yy = y * cfg.stride; yy < (y + 1) * cfg.stride; ++yy)
                for (int xx = x * cfg.stride; xx < (x + 1) * cfg.stride; ++xx) {
                    si += image.at(0, yy, xx);
                    sb += belief.at(0, yy, xx);
                }
            pooled0(0, static_cast<Eigen::Index>(y) * s0 + x) = si * inv_area;
            pooled0(1, static_cast<Eigen::Index>(y) * s0 + x) = sb * inv_area;
        }
    }

    FeaturePyramid pyr;
    pyr.levels[0] = FeatureLevel::zeros(cfg.base_channels, s0, s0);
    pyr.levels[0].matrix() = (weights.patch_embed * pooled0).array().tanh();
    if (cache) cache->pooled[0] = pooled0;

    int h = s0, w = s0;
    for (int j = 1; j < 6; ++j) {
        int oh = 0, ow = 0;
        Matrix pooled = detail::avgpool2(pyr.levels[j - 1].matrix(), h, w, oh, ow);
        pyr.levels[j] = FeatureLevel::zeros(cfg.level_channels(j), oh, ow);
        pyr.levels[j].matrix() = (weights.level_mix[j - 1] * pooled).array().tanh();
        if (cache) cache->pooled[j] = std::move(pooled);
        h = oh;
        w = ow;
    }
    return pyr;
}

// Backward through the encoder. d_pyramid holds dLoss/d(level values) for
// every level; gradients accumulate into d_weights, d_image and d_belief.
inline void encode_backward(const FeaturePyramid& pyr, const EncodeCache& cache,
                            const FusionConfig& cfg, const FusionWeights& weights,
                            const std::array<Matrix, 6>& d_pyramid, FusionWeights& d_weights,
                            BeliefMap* d_image = nullptr, BeliefMap* d_belief = nullptr) {
    std::array<Matrix, 6> d_levels = d_pyramid;
    for (int j = 5; j >= 1; --j) {
        const auto level = pyr.levels[j].matrix();
        const Matrix d_pre =
            (d_levels[j].array() * (1.0 - level.array().square())).matrix();
        d_weights.level_mix[j - 1] += d_pre * cache.pooled[j].transpose();
        const Matrix d_pooled = weights.level_mix[j - 1].transpose() * d_pre;
        detail::avgpool2_backward(d_pooled, pyr.levels[j - 1].height, pyr.levels[j - 1].width,
                                  d_levels[j - 1]);
    }
    const auto level0 = pyr.levels[0].matrix();
    const Matrix d_pre0 = (d_levels[0].array() * (1.0 - level0.array().square())).matrix();
    d_weights.patch_embed += d_pre0 * cache.pooled[0].transpose();
    if (d_image || d_belief) {
        const Matrix d_pooled0 = weights.patch_embed.transpose() * d_pre0;
        const int s0 = cfg.input_size / cfg.stride;
        const double inv_area = 1.0 / (cfg.stride * cfg.stride);
        for (int y = 0; y < s0; ++y) {
            for (int x = 0; x < s0; ++x) {
                const Eigen::Index cell = static_cast<Eigen::Index>(y) * s0 + x;
                for (int yy = y * cfg.stride; yy < (y + 1) * cfg.stride; ++yy)
                    for (int xx = x * cfg.stride; xx < (x + 1) * cfg.stride; ++xx) {
                        if (d_image) d_image->at(0, yy, xx) += d_pooled0(0, cell) * inv_area;
                        if (d_belief) d_belief->at(0, yy, xx) += d_pooled0(1, cell) * inv_area;
                    }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Center proposals and windows
// ---------------------------------------------------------------------------

struct CenterProposal {
    int x = 0;
    int y = 0;
    bool valid = false;
};

struct CenterProposals {
    std::vector<CenterProposal> props;

    std::size_t size() const { return props.size(); }
};

// Rescales input-frame keypoints onto a level grid; nearest cell, clamped to
// the grid. Out-of-frame or dropped keypoints come back invalid.
inline CenterProposals make_proposals(const KeypointSet2D& kps, int level_side, int input_size) {
    CenterProposals out;
    out.props.reserve(kps.size());
    const double scale = static_cast<double>(level_side) / input_size;
    for (const Keypoint2D& kp : kps) {
        CenterProposal p;
        if (kp.in_frame && kp.p.x() >= 0.0 && kp.p.y() >= 0.0 && kp.p.x() < input_size &&
            kp.p.y() < input_size) {
            p.valid = true;
            p.x = std::clamp(static_cast<int>(std::lround(kp.p.x() * scale)), 0, level_side - 1);
            p.y = std::clamp(static_cast<int>(std::lround(kp.p.y() * scale)), 0, level_side - 1);
        }
        out.props.push_back(p);
    }
    return out;
}

inline CenterProposals make_proposals(const KeypointSet2D& kps, int level, const FusionConfig& cfg) {
    return make_proposals(kps, cfg.level_side(level), cfg.input_size);
}

// Rows of the d x d window centered on `center`, row-major over the patch;
// out-of-grid cells are zero rows.
inline Matrix extract_window(const FeatureLevel& f, const CenterProposal& center, int d) {
    if (d % 2 == 0) throw ShapeMismatch("extract_window: window size must be odd");
    Matrix rows = Matrix::Zero(static_cast<Eigen::Index>(d) * d, f.channels);
    const int half = d / 2;
    for (int wy = 0; wy < d; ++wy) {
        for (int wx = 0; wx < d; ++wx) {
            const int y = center.y - half + wy;
            const int x = center.x - half + wx;
            if (y < 0 || x < 0 || y >= f.height || x >= f.width) continue;
            const Eigen::Index row = static_cast<Eigen::Index>(wy) * d + wx;
            for (int c = 0; c < f.channels; ++c) rows(row, c) = f.at(c, y, x);
        }
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Cross attention
// ---------------------------------------------------------------------------

struct AttentionLayerCache {
    Matrix x;                      // query stream entering the layer (Nq x C)
    std::vector<Matrix> q, k, v;   // per head (Nq x Dh) / (Nk x Dh)
    std::vector<Matrix> attn;      // per head softmax weights (Nq x Nk)
    Matrix concat;                 // pre-output-projection (Nq x C)
};

struct AttentionCache {
    std::vector<AttentionLayerCache> layers;
};

// Stacked "vanilla transformer" cross-attention: the query stream evolves
// through residual layers while keys/values stay pinned to the current-frame
// window rows. Scale is 1/sqrt(C/heads).
inline Matrix cross_attention_block(const Matrix& queries, const Matrix& keys_values,
                                    const std::vector<AttentionLayerWeights>& layers, int heads,
                                    AttentionCache* cache = nullptr) {
    const Eigen::Index c = queries.cols();
    if (keys_values.cols() != c) throw ShapeMismatch("cross_attention_block: channel mismatch");
    if (c % heads != 0) throw ShapeMismatch("cross_attention_block: channels not divisible by heads");
    const Eigen::Index dh = c / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix x = queries;
    Matrix qp(x.rows(), c), kp(keys_values.rows(), c), vp(keys_values.rows(), c);
    Matrix scores(x.rows(), keys_values.rows());
    Matrix concat(x.rows(), c);
    if (cache) cache->layers.resize(layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& lw = layers[l];
        if (lw.wq.rows() != c || lw.wq.cols() != c || lw.wo.rows() != c || lw.wo.cols() != c)
            throw ShapeMismatch("cross_attention_block: projection shape mismatch");
        qp.noalias() = x * lw.wq;
        kp.noalias() = keys_values * lw.wk;
        vp.noalias() = keys_values * lw.wv;
        AttentionLayerCache* lc = cache ? &cache->layers[l] : nullptr;
        if (lc) {
            lc->x = x;
            lc->q.resize(heads);
            lc->k.resize(heads);
            lc->v.resize(heads);
            lc->attn.resize(heads);
        }
        for (int h = 0; h < heads; ++h) {
            scores.noalias() = qp.middleCols(h * dh, dh) * kp.middleCols(h * dh, dh).transpose();
            scores *= scale;
            // row-wise softmax, stabilized by the row max
            scores = (scores.colwise() - scores.rowwise().maxCoeff()).array().exp();
            scores.array().colwise() /= scores.rowwise().sum().array();
            concat.middleCols(h * dh, dh).noalias() = scores * vp.middleCols(h * dh, dh);
            if (lc) {
                lc->q[h] = qp.middleCols(h * dh, dh);
                lc->k[h] = kp.middleCols(h * dh, dh);
                lc->v[h] = vp.middleCols(h * dh, dh);
                lc->attn[h] = scores;
            }
        }
        if (lc) lc->concat = concat;
        x += concat * lw.wo;  // residual connection, no normalization
    }
    return x;
}

// Backward companion of cross_attention_block. d_out is dLoss/d(block
// output); gradients accumulate into d_layers, d_queries and d_keys_values.
inline void cross_attention_backward(const Matrix& keys_values,
                                     const std::vector<AttentionLayerWeights>& layers, int heads,
                                     const AttentionCache& cache, const Matrix& d_out,
                                     std::vector<AttentionLayerWeights>& d_layers,
                                     Matrix& d_queries, Matrix& d_keys_values) {
    const Eigen::Index c = keys_values.cols();
    const Eigen::Index dh = c / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix dx = d_out;
    for (int l = static_cast<int>(layers.size()) - 1; l >= 0; --l) {
        const auto& lw = layers[l];
        const auto& lc = cache.layers[l];
        // x_{l+1} = x_l + concat * wo
        d_layers[l].wo += lc.concat.transpose() * dx;
        const Matrix d_concat = dx * lw.wo.transpose();
        Matrix d_qp = Matrix::Zero(lc.x.rows(), c);
        Matrix d_kp = Matrix::Zero(keys_values.rows(), c);
        Matrix d_vp = Matrix::Zero(keys_values.rows(), c);
        for (int h = 0; h < heads; ++h) {
            const Matrix d_head = d_concat.middleCols(h * dh, dh);
            const Matrix& a = lc.attn[h];
            d_vp.middleCols(h * dh, dh) += a.transpose() * d_head;
            Matrix d_a = d_head * lc.v[h].transpose();
            // softmax backward per row: dS = A .* (dA - rowsum(dA .* A))
            Matrix d_scores(a.rows(), a.cols());
            for (Eigen::Index r = 0; r < a.rows(); ++r) {
                const double dot = d_a.row(r).cwiseProduct(a.row(r)).sum();
                d_scores.row(r) = a.row(r).array() * (d_a.row(r).array() - dot);
            }
            d_qp.middleCols(h * dh, dh) += d_scores * lc.k[h] * scale;
            d_kp.middleCols(h * dh, dh) += d_scores.transpose() * lc.q[h] * scale;
        }
        d_layers[l].wq += lc.x.transpose() * d_qp;
        d_layers[l].wk += keys_values.transpose() * d_kp;
        d_layers[l].wv += keys_values.transpose() * d_vp;
        d_keys_values += d_kp * lw.wk.transpose() + d_vp * lw.wv.transpose();
        dx = dx + d_qp * lw.wq.transpose();  // residual + query projection path
    }
    d_queries += dx;
}

// ---------------------------------------------------------------------------
// MLP helpers
// ---------------------------------------------------------------------------

struct MlpCache {
    Matrix input;   // (N x in)
    Matrix hidden;  // post-tanh (N x hidden)
};

inline Matrix mlp_forward(const Matrix& input, const MlpWeights& mlp, MlpCache* cache = nullptr) {
    Matrix hidden =
        ((input * mlp.w1.transpose()).rowwise() + mlp.b1.transpose()).array().tanh().matrix();
    Matrix out = (hidden * mlp.w2.transpose()).rowwise() + mlp.b2.transpose();
    if (cache) {
        cache->input = input;
        cache->hidden = std::move(hidden);
    }
    return out;
}

inline void mlp_backward(const MlpWeights& mlp, const MlpCache& cache, const Matrix& d_out,
                         MlpWeights& d_mlp, Matrix& d_input) {
    d_mlp.w2 += d_out.transpose() * cache.hidden;
    d_mlp.b2 += d_out.colwise().sum().transpose();
    const Matrix d_hidden_pre =
        ((d_out * mlp.w2).array() * (1.0 - cache.hidden.array().square())).matrix();
    d_mlp.w1 += d_hidden_pre.transpose() * cache.input;
    d_mlp.b1 += d_hidden_pre.colwise().sum().transpose();
    d_input += d_hidden_pre * mlp.w1;
}

// ---------------------------------------------------------------------------
// Window fusion
// ---------------------------------------------------------------------------

struct FineKeypointCache {
    bool fused = false;
    Matrix queries;      // prev-frame window rows
    Matrix keys_values;  // current-frame window rows
    AttentionCache attention;
    MlpCache mlp;
};

struct FineLevelCache {
    std::vector<FineKeypointCache> keypoints;
    std::vector<int> final_writer;  // per cell: last keypoint id written, -1 if untouched
};

struct CoarseLevelCache {
    MlpCache mlp;                 // batched over fused keypoints, one row each
    std::vector<int> fused_row;   // per keypoint: its row in the batch, -1 if skipped
    std::vector<int> final_writer;
};

// Temporal cross-attention fusion of one fine level. Windows are read from
// the unfused inputs; outputs are written back in ascending keypoint id
// order, so on overlap the higher id wins. Cells outside every window keep
// f_cur's values untouched.
inline FeatureLevel fuse_fine(int fine_index, const FeatureLevel& f_prev, const FeatureLevel& f_cur,
                              const CenterProposals& proposals_prev,
                              const CenterProposals& proposals_cur, const FusionConfig& cfg,
                              const FusionWeights& weights, FineLevelCache* cache = nullptr) {
    if (proposals_prev.size() != proposals_cur.size())
        throw ShapeMismatch("fuse_fine: proposal count mismatch");
    const int d = cfg.window_sizes[fine_index];
    const int half = d / 2;
    FeatureLevel out = f_cur;
    if (cache) {
        cache->keypoints.assign(proposals_prev.size(), {});
        cache->final_writer.assign(static_cast<std::size_t>(f_cur.cells()), -1);
    }
    for (std::size_t kp = 0; kp < proposals_prev.size(); ++kp) {
        const auto& pp = proposals_prev.props[kp];
        const auto& pc = proposals_cur.props[kp];
        if (!pp.valid || !pc.valid) continue;
        FineKeypointCache* kc = cache ? &cache->keypoints[kp] : nullptr;
        Matrix queries = extract_window(f_prev, pp, d);
        Matrix keys_values = extract_window(f_cur, pc, d);
        Matrix attended = cross_attention_block(queries, keys_values, weights.attention[fine_index],
                                                cfg.heads, kc ? &kc->attention : nullptr);
        Matrix concatenated(attended.rows(), attended.cols() + keys_values.cols());
        concatenated << attended, keys_values;
        Matrix fused =
            mlp_forward(concatenated, weights.fine_mlp[fine_index], kc ? &kc->mlp : nullptr);
        for (int wy = 0; wy < d; ++wy) {
            for (int wx = 0; wx < d; ++wx) {
                const int y = pc.y - half + wy;
                const int x = pc.x - half + wx;
                if (y < 0 || x < 0 || y >= out.height || x >= out.width) continue;
                const Eigen::Index row = static_cast<Eigen::Index>(wy) * d + wx;
                for (int c = 0; c < out.channels; ++c) out.at(c, y, x) = fused(row, c);
                if (cache) cache->final_writer[static_cast<std::size_t>(y) * out.width + x] =
                    static_cast<int>(kp);
            }
        }
        if (kc) {
            kc->fused = true;
            kc->queries = std::move(queries);
            kc->keys_values = std::move(keys_values);
        }
    }
    return out;
}

// Coarse fusion: per keypoint, the channel vectors of both pyramids at the
// current proposal cell are concatenated and MLP-mapped back to c channels.
// The MLP runs once over all fused keypoints (one row each); writes happen
// in ascending keypoint id order so the overwrite rule is unchanged.
inline FeatureLevel fuse_coarse(int coarse_index, const FeatureLevel& f_prev,
                                const FeatureLevel& f_cur, const CenterProposals& proposals_cur,
                                const FusionWeights& weights, CoarseLevelCache* cache = nullptr) {
    FeatureLevel out = f_cur;
    std::vector<int> fused_row(proposals_cur.size(), -1);
    std::vector<std::pair<int, int>> cells;  // per batch row: (y, x)
    for (std::size_t kp = 0; kp < proposals_cur.size(); ++kp) {
        const auto& pc = proposals_cur.props[kp];
        if (!pc.valid) continue;
        if (pc.x < 0 || pc.y < 0 || pc.x >= f_cur.width || pc.y >= f_cur.height) continue;
        fused_row[kp] = static_cast<int>(cells.size());
        cells.emplace_back(pc.y, pc.x);
    }
    if (cache) {
        cache->fused_row = fused_row;
        cache->final_writer.assign(static_cast<std::size_t>(f_cur.cells()), -1);
    }
    if (cells.empty()) return out;

    const int c = f_cur.channels;
    Matrix input(static_cast<Eigen::Index>(cells.size()), 2 * c);
    for (std::size_t row = 0; row < cells.size(); ++row) {
        for (int ch = 0; ch < c; ++ch) {
            input(row, ch) = f_prev.at(ch, cells[row].first, cells[row].second);
            input(row, c + ch) = f_cur.at(ch, cells[row].first, cells[row].second);
        }
    }
    const Matrix fused =
        mlp_forward(input, weights.coarse_mlp[coarse_index], cache ? &cache->mlp : nullptr);
    for (std::size_t kp = 0; kp < proposals_cur.size(); ++kp) {
        if (fused_row[kp] < 0) continue;
        const auto [y, x] = cells[fused_row[kp]];
        for (int ch = 0; ch < c; ++ch) out.at(ch, y, x) = fused(fused_row[kp], ch);
        if (cache)
            cache->final_writer[static_cast<std::size_t>(y) * out.width + x] = static_cast<int>(kp);
    }
    return out;
}

// Backward through fuse_fine. Overwrite semantics: the upstream gradient at
// a written cell belongs to its final writer only; untouched cells pass the
// gradient straight through to f_cur.
inline void fuse_fine_backward(int fine_index, const FeatureLevel& f_cur,
                               const CenterProposals& proposals_prev,
                               const CenterProposals& proposals_cur, const FusionConfig& cfg,
                               const FusionWeights& weights, const FineLevelCache& cache,
                               const Matrix& d_out, FusionWeights& d_weights, Matrix& d_f_prev,
                               Matrix& d_f_cur) {
    const int d = cfg.window_sizes[fine_index];
    const int half = d / 2;
    const int w = f_cur.width;
    const int h = f_cur.height;

    // Pass-through for cells no keypoint wrote.
    for (int cell = 0; cell < f_cur.cells(); ++cell) {
        if (cache.final_writer[cell] < 0) d_f_cur.col(cell) += d_out.col(cell);
    }

    for (std::size_t kp = 0; kp < proposals_prev.size(); ++kp) {
        const auto& kc = cache.keypoints[kp];
        if (!kc.fused) continue;
        const auto& pp = proposals_prev.props[kp];
        const auto& pc = proposals_cur.props[kp];
        const Eigen::Index rows = static_cast<Eigen::Index>(d) * d;
        const Eigen::Index c = f_cur.channels;

        // Gather upstream gradient for this keypoint's surviving writes.
        Matrix d_fused = Matrix::Zero(rows, c);
        bool any = false;
        for (int wy = 0; wy < d; ++wy) {
            for (int wx = 0; wx < d; ++wx) {
                const int y = pc.y - half + wy;
                const int x = pc.x - half + wx;
                if (y < 0 || x < 0 || y >= h || x >= w) continue;
                const std::size_t cell = static_cast<std::size_t>(y) * w + x;
                if (cache.final_writer[cell] != static_cast<int>(kp)) continue;
                d_fused.row(static_cast<Eigen::Index>(wy) * d + wx) = d_out.col(cell).transpose();
                any = true;
            }
        }
        if (!any) continue;

        Matrix d_concat = Matrix::Zero(rows, 2 * c);
        mlp_backward(weights.fine_mlp[fine_index], kc.mlp, d_fused, d_weights.fine_mlp[fine_index],
                     d_concat);
        const Matrix d_attended = d_concat.leftCols(c);
        Matrix d_kv_window = d_concat.rightCols(c);  // gradient for the concatenated f_cur rows

        Matrix d_queries = Matrix::Zero(rows, c);
        Matrix d_kv_attn = Matrix::Zero(rows, c);
        cross_attention_backward(kc.keys_values, weights.attention[fine_index], cfg.heads,
                                 kc.attention, d_attended, d_weights.attention[fine_index],
                                 d_queries, d_kv_attn);
        d_kv_window += d_kv_attn;

        // Scatter window-row gradients back to the source grids (reads came
        // from the unfused inputs; out-of-grid padding rows vanish).
        for (int wy = 0; wy < d; ++wy) {
            for (int wx = 0; wx < d; ++wx) {
                const Eigen::Index row = static_cast<Eigen::Index>(wy) * d + wx;
                const int yq = pp.y - half + wy;
                const int xq = pp.x - half + wx;
                if (yq >= 0 && xq >= 0 && yq < h && xq < w)
                    d_f_prev.col(static_cast<Eigen::Index>(yq) * w + xq) +=
                        d_queries.row(row).transpose();
                const int yk = pc.y - half + wy;
                const int xk = pc.x - half + wx;
                if (yk >= 0 && xk >= 0 && yk < h && xk < w)
                    d_f_cur.col(static_cast<Eigen::Index>(yk) * w + xk) +=
                        d_kv_window.row(row).transpose();
            }
        }
    }
}

inline void fuse_coarse_backward(int coarse_index, const FeatureLevel& f_cur,
                                 const CenterProposals& proposals_cur, const FusionWeights& weights,
                                 const CoarseLevelCache& cache, const Matrix& d_out,
                                 FusionWeights& d_weights, Matrix& d_f_prev, Matrix& d_f_cur) {
    for (int cell = 0; cell < f_cur.cells(); ++cell) {
        if (cache.final_writer[cell] < 0) d_f_cur.col(cell) += d_out.col(cell);
    }
    const Eigen::Index c = f_cur.channels;
    const Eigen::Index rows = cache.mlp.input.rows();
    if (rows == 0) return;
    // Upstream gradient per batch row; rows whose cell was overwritten by a
    // later keypoint receive zero.
    Matrix d_fused = Matrix::Zero(rows, c);
    std::vector<std::size_t> row_cell(rows, 0);
    for (std::size_t kp = 0; kp < proposals_cur.size(); ++kp) {
        const int row = cache.fused_row[kp];
        if (row < 0) continue;
        const auto& pc = proposals_cur.props[kp];
        const std::size_t cell = static_cast<std::size_t>(pc.y) * f_cur.width + pc.x;
        row_cell[row] = cell;
        if (cache.final_writer[cell] == static_cast<int>(kp))
            d_fused.row(row) = d_out.col(cell).transpose();
    }
    Matrix d_input = Matrix::Zero(rows, 2 * c);
    mlp_backward(weights.coarse_mlp[coarse_index], cache.mlp, d_fused,
                 d_weights.coarse_mlp[coarse_index], d_input);
    for (Eigen::Index row = 0; row < rows; ++row) {
        d_f_prev.col(row_cell[row]) += d_input.row(row).head(c).transpose();
        d_f_cur.col(row_cell[row]) += d_input.row(row).tail(c).transpose();
    }
}

// ---------------------------------------------------------------------------
// Whole-pyramid fusion
// ---------------------------------------------------------------------------

struct FusionCache {
    std::array<FineLevelCache, 3> fine;
    std::array<CoarseLevelCache, 3> coarse;
    std::array<CenterProposals, 6> proposals_prev;
    std::array<CenterProposals, 6> proposals_cur;
};

// Attention fusion on the fine levels plus concat+MLP fusion on the coarse
// levels; all levels fuse on the already-built pyramids (no re-pooling).
inline FeaturePyramid fuse_pyramids(const FeaturePyramid& prev, const FeaturePyramid& cur,
                                    const KeypointSet2D& prev_kps_input,
                                    const KeypointSet2D& cur_kps_input, const FusionConfig& cfg,
                                    const FusionWeights& weights, FusionCache* cache = nullptr) {
    FeaturePyramid fused;
    std::array<CenterProposals, 6> pprev, pcur;
    for (int j = 0; j < 6; ++j) {
        pprev[j] = make_proposals(prev_kps_input, j, cfg);
        pcur[j] = make_proposals(cur_kps_input, j, cfg);
    }
    for (int m = 0; m < 3; ++m) {
        fused.levels[m] = fuse_fine(m, prev.levels[m], cur.levels[m], pprev[m], pcur[m], cfg,
                                    weights, cache ? &cache->fine[m] : nullptr);
    }
    for (int i = 0; i < 3; ++i) {
        fused.levels[3 + i] = fuse_coarse(i, prev.levels[3 + i], cur.levels[3 + i], pcur[3 + i],
                                          weights, cache ? &cache->coarse[i] : nullptr);
    }
    if (cache) {
        cache->proposals_prev = std::move(pprev);
        cache->proposals_cur = std::move(pcur);
    }
    return fused;
}

// Gradients of a scalar loss w.r.t. both input pyramids and every weight
// block, given upstream gradients per fused level.
inline void fuse_pyramids_backward(const FeaturePyramid& cur, const FusionConfig& cfg,
                                   const FusionWeights& weights, const FusionCache& cache,
                                   const std::array<Matrix, 6>& d_fused, FusionWeights& d_weights,
                                   std::array<Matrix, 6>& d_prev, std::array<Matrix, 6>& d_cur) {
    for (int j = 0; j < 6; ++j) {
        if (d_prev[j].size() == 0)
            d_prev[j] = Matrix::Zero(cur.levels[j].channels, cur.levels[j].cells());
        if (d_cur[j].size() == 0)
            d_cur[j] = Matrix::Zero(cur.levels[j].channels, cur.levels[j].cells());
    }
    for (int m = 0; m < 3; ++m) {
        fuse_fine_backward(m, cur.levels[m], cache.proposals_prev[m], cache.proposals_cur[m], cfg,
                           weights, cache.fine[m], d_fused[m], d_weights, d_prev[m], d_cur[m]);
    }
    for (int i = 0; i < 3; ++i) {
        fuse_coarse_backward(i, cur.levels[3 + i], cache.proposals_cur[3 + i], weights,
                             cache.coarse[i], d_fused[3 + i], d_weights, d_prev[3 + i],
                             d_cur[3 + i]);
    }
}

// Ablation branch without attention: per-cell concatenation of the two
// pyramids pushed through the per-level MLP at the current proposal cells
// only, mirroring a plain temporal-concatenation baseline.
inline FeaturePyramid fuse_concat_only(const FeaturePyramid& prev, const FeaturePyramid& cur,
                                       const KeypointSet2D& cur_kps_input, const FusionConfig& cfg,
                                       const FusionWeights& weights) {
    FeaturePyramid fused;
    for (int j = 0; j < 6; ++j) {
        const CenterProposals props = make_proposals(cur_kps_input, j, cfg);
        const MlpWeights& mlp = j < 3 ? weights.fine_mlp[j] : weights.coarse_mlp[j - 3];
        FeatureLevel out = cur.levels[j];
        const int c = out.channels;
        for (const auto& p : props.props) {
            if (!p.valid) continue;
            Matrix input(1, 2 * c);
            for (int ch = 0; ch < c; ++ch) {
                input(0, ch) = prev.levels[j].at(ch, p.y, p.x);
                input(0, c + ch) = cur.levels[j].at(ch, p.y, p.x);
            }
            const Matrix y = mlp_forward(input, mlp);
            for (int ch = 0; ch < c; ++ch) out.at(ch, p.y, p.x) = y(0, ch);
        }
        fused.levels[j] = std::move(out);
    }
    return fused;
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

struct DecodeCache {
    Matrix level0;  // (c1 x cells)
    Matrix heat;    // post-logistic (channels x cells)
};

// Maps level-1 features to keypoint heatmaps through a logistic squash plus
// two linear offset channels.
inline DetectionHead decode_head(const FeaturePyramid& pyramid, const FusionConfig& cfg,
                                 const FusionWeights& weights, DecodeCache* cache = nullptr) {
    const FeatureLevel& f0 = pyramid.levels[0];
    if (f0.channels != cfg.base_channels)
        throw ShapeMismatch("decode_head: level-1 channel mismatch");
    DetectionHead head = DetectionHead::zeros(f0.width, f0.height, cfg.decoder_channels);
    const auto x = f0.matrix();
    Matrix heat_pre = (weights.dec_heat * x).colwise() + weights.dec_heat_b;
    Matrix heat = (1.0 / (1.0 + (-heat_pre.array()).exp())).matrix();
    Matrix off = (weights.dec_off * x).colwise() + weights.dec_off_b;
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        head.heatmaps.data(), cfg.decoder_channels, f0.cells()) = heat;
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        head.offsets.data(), 2, f0.cells()) = off;
    if (cache) {
        cache->level0 = x;
        cache->heat = std::move(heat);
    }
    return head;
}

// Backward through the decoder: d_heat/d_off are upstream gradients laid out
// (channels x cells); returns the gradient w.r.t. level-1 features.
inline Matrix decode_head_backward(const FusionConfig& cfg, const FusionWeights& weights,
                                   const DecodeCache& cache, const Matrix& d_heat,
                                   const Matrix& d_off, FusionWeights& d_weights) {
    const Matrix d_heat_pre =
        (d_heat.array() * cache.heat.array() * (1.0 - cache.heat.array())).matrix();
    d_weights.dec_heat += d_heat_pre * cache.level0.transpose();
    d_weights.dec_heat_b += d_heat_pre.rowwise().sum();
    d_weights.dec_off += d_off * cache.level0.transpose();
    d_weights.dec_off_b += d_off.rowwise().sum();
    return weights.dec_heat.transpose() * d_heat_pre + weights.dec_off.transpose() * d_off;
}

// ---------------------------------------------------------------------------
// Full forward / backward chain (encoder -> fusion -> decoder)
// ---------------------------------------------------------------------------

struct ForwardCache {
    EncodeCache enc_prev, enc_cur;
    FeaturePyramid pyr_prev, pyr_cur, fused;
    FusionCache fusion;
    DecodeCache decode;
};

inline DetectionHead fusion_forward(const BeliefMap& image_prev, const BeliefMap& belief_prev,
                                    const BeliefMap& image_cur, const BeliefMap& belief_cur,
                                    const KeypointSet2D& prev_kps_input,
                                    const KeypointSet2D& cur_kps_input, const FusionConfig& cfg,
                                    const FusionWeights& weights, ForwardCache* cache = nullptr) {
    ForwardCache local;
    ForwardCache& c = cache ? *cache : local;
    c.pyr_prev = encode_pyramid(image_prev, belief_prev, cfg, weights, &c.enc_prev);
    c.pyr_cur = encode_pyramid(image_cur, belief_cur, cfg, weights, &c.enc_cur);
    c.fused = fuse_pyramids(c.pyr_prev, c.pyr_cur, prev_kps_input, cur_kps_input, cfg, weights,
                            &c.fusion);
    return decode_head(c.fused, cfg, weights, &c.decode);
}

struct FusionGradients {
    FusionWeights weights;  // same shapes, gradient values
    BeliefMap d_image_prev, d_belief_prev, d_image_cur, d_belief_cur;
};

// Backward of the full chain given dLoss/d(head), optionally plus direct
// upstream gradients on every fused level (a loss may read the pyramid as
// well as the decoded head). Produces gradients for every weight block and
// for all four encoder inputs.
inline FusionGradients fusion_backward(const FusionConfig& cfg, const FusionWeights& weights,
                                       const ForwardCache& cache, const Matrix& d_heat,
                                       const Matrix& d_off,
                                       const std::array<Matrix, 6>* d_fused_levels = nullptr) {
    FusionGradients g;
    g.weights = zeros_like(weights);
    g.d_image_prev = BeliefMap::zeros(cfg.input_size, cfg.input_size);
    g.d_belief_prev = BeliefMap::zeros(cfg.input_size, cfg.input_size);
    g.d_image_cur = BeliefMap::zeros(cfg.input_size, cfg.input_size);
    g.d_belief_cur = BeliefMap::zeros(cfg.input_size, cfg.input_size);

    std::array<Matrix, 6> d_fused;
    for (int j = 0; j < 6; ++j)
        d_fused[j] = Matrix::Zero(cache.fused.levels[j].channels, cache.fused.levels[j].cells());
    d_fused[0] = decode_head_backward(cfg, weights, cache.decode, d_heat, d_off, g.weights);
    if (d_fused_levels)
        for (int j = 0; j < 6; ++j)
            if ((*d_fused_levels)[j].size() > 0) d_fused[j] += (*d_fused_levels)[j];

    std::array<Matrix, 6> d_prev, d_cur;
    fuse_pyramids_backward(cache.pyr_cur, cfg, weights, cache.fusion, d_fused, g.weights, d_prev,
                           d_cur);
    encode_backward(cache.pyr_prev, cache.enc_prev, cfg, weights, d_prev, g.weights,
                    &g.d_image_prev, &g.d_belief_prev);
    encode_backward(cache.pyr_cur, cache.enc_cur, cfg, weights, d_cur, g.weights, &g.d_image_cur,
                    &g.d_belief_cur);
    return g;
}

}  // namespace sgta
