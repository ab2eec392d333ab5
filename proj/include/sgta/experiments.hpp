#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "sgta/pipeline.hpp"
#include "sgta/simulator.hpp"

namespace sgta {

// Worker cap: SGTA_THREADS when set, otherwise the hardware concurrency.
inline unsigned worker_count() {
    if (const char* env = std::getenv("SGTA_THREADS")) {
        const long n = std::strtol(env, nullptr, 10);
        if (n >= 1) return static_cast<unsigned>(n);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? hw : 1;
}

// Runs fn(i) for i in [0, count) across workers; each index is processed by
// exactly one worker and results are index-addressed, so the outcome does
// not depend on the worker count.
template <typename Fn>
inline void parallel_for(std::size_t count, Fn&& fn) {
    const unsigned workers = std::min<std::size_t>(worker_count(), count);
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= count) return;
                fn(i);
            }
        });
    }
    for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Whole-dataset tracking
// ---------------------------------------------------------------------------

struct TrackRunResult {
    std::vector<SequenceResult> sequences;
    MetricsReport overall;
    std::size_t total_frames = 0;
    std::size_t failed_frames = 0;
    double mean_fps = 0.0;
};

inline TrackRunResult track_dataset(const Dataset& ds, const TrackerConfig& cfg,
                                    const AblationFlags& flags, const FusionWeights& weights) {
    TrackRunResult run;
    run.sequences.resize(ds.videos.size());
    parallel_for(ds.videos.size(), [&](std::size_t v) {
        run.sequences[v] = track_sequence(ds.videos[v], cfg, flags, weights);
    });
    std::vector<double> pixel_errors;
    std::vector<double> add_errors;
    double fps_sum = 0.0;
    for (std::size_t v = 0; v < run.sequences.size(); ++v) {
        const auto& seq = run.sequences[v];
        const auto& sample = ds.videos[v];
        for (std::size_t f = 0; f < seq.frames.size(); ++f) {
            add_errors.push_back(seq.frames[f].add_mm);
            const auto errs = pck_errors(seq.frames[f].keypoints, sample.frames[f].kp2d_gt);
            pixel_errors.insert(pixel_errors.end(), errs.begin(), errs.end());
            if (seq.frames[f].solve_failed) ++run.failed_frames;
        }
        run.total_frames += seq.frames.size();
        fps_sum += seq.mean_fps;
    }
    run.overall = make_report(pixel_errors, add_errors, run.total_frames, run.failed_frames);
    run.mean_fps = run.sequences.empty() ? 0.0 : fps_sum / static_cast<double>(run.sequences.size());
    return run;
}

// Aggregate used by the ablation comparison: mean ADD over all frames, with
// frames that never produced an estimate counted at the ADD AUC threshold
// (60 mm) so failures register as a bounded penalty.
inline double mean_add_capped(const TrackRunResult& run) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& seq : run.sequences) {
        for (const auto& frame : seq.frames) {
            sum += std::isfinite(frame.add_mm) ? frame.add_mm : kAddThresholdMm;
            ++n;
        }
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Ablation grid (the four-row table analog)
// ---------------------------------------------------------------------------

struct AblationRow {
    std::string name;
    AblationFlags flags;
    MetricsReport report;
    double mean_add_mm = 0.0;
    std::size_t failed_frames = 0;
};

inline std::vector<AblationRow> run_ablation_grid(const Dataset& ds, const TrackerConfig& cfg,
                                                  const FusionWeights& weights) {
    const std::vector<std::pair<std::string, AblationFlags>> grid = {
        {"baseline", {false, false, false}},
        {"sgf", {true, false, false}},
        {"sgf+tca", {true, true, false}},
        {"sgf+tca+prf", {true, true, true}},
    };
    std::vector<AblationRow> rows;
    rows.reserve(grid.size());
    for (const auto& [name, flags] : grid) {
        const TrackRunResult run = track_dataset(ds, cfg, flags, weights);
        AblationRow row;
        row.name = name;
        row.flags = flags;
        row.report = run.overall;
        row.mean_add_mm = mean_add_capped(run);
        row.failed_frames = run.failed_frames;
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Multi-frame PnP sweep
// ---------------------------------------------------------------------------

struct MultiframeRow {
    int l = 0;
    std::size_t combinations = 0;
    double mean_add_mm = 0.0;
    double median_add_mm = 0.0;
    double min_add_mm = 0.0;
    double max_add_mm = 0.0;
};

namespace detail {

// C(n, k), saturating at cap to avoid overflow.
inline std::size_t binomial_capped(int n, int k, std::size_t cap) {
    if (k < 0 || k > n) return 0;
    k = std::min(k, n - k);
    std::size_t result = 1;
    for (int i = 1; i <= k; ++i) {
        result = result * static_cast<std::size_t>(n - k + i) / static_cast<std::size_t>(i);
        if (result >= cap) return cap;
    }
    return result;
}

inline double combination_add(const SequenceSample& video, const std::vector<int>& frame_ids,
                              const RansacConfig& ransac) {
    std::vector<FrameCorrespondences> frames;
    frames.reserve(frame_ids.size());
    KeypointSet3D union_points;
    for (int f : frame_ids) {
        const FrameRecord& rec = video.frames[f];
        frames.push_back({rec.kp2d_det, rec.kp3d});
        for (std::size_t i = 0; i < rec.kp3d.size(); ++i) {
            union_points.points.push_back(rec.kp3d.points[i]);
            union_points.ids.push_back(static_cast<int>(union_points.ids.size()));
        }
    }
    try {
        const RefineResult result = multiframe_pnp(frames, video.intrinsics, ransac);
        return add_error(result.pose, video.pose, union_points);
    } catch (const std::runtime_error&) {
        return std::numeric_limits<double>::infinity();
    }
}

}  // namespace detail

// For each l in the sweep, draws min(C(L, l), max_combinations) frame
// subsets from one static-pose video, solves multiframe PnP per subset
// (sampling seeded and deterministic) and aggregates the ADD statistics.
inline std::vector<MultiframeRow> multiframe_sweep(const SequenceSample& video,
                                                   const std::vector<int>& sweep,
                                                   const RansacConfig& ransac,
                                                   std::size_t max_combinations,
                                                   std::uint64_t seed) {
    const int total = static_cast<int>(video.frames.size());
    std::vector<MultiframeRow> rows;
    for (int l : sweep) {
        if (l < 1 || l > total) continue;
        const std::size_t n_comb = detail::binomial_capped(total, l, max_combinations);
        Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(l));
        std::vector<double> adds(n_comb);

        std::vector<std::vector<int>> subsets(n_comb);
        if (n_comb < max_combinations) {
            // Exhaustive enumeration in lexicographic order.
            std::vector<int> pick(l);
            for (int i = 0; i < l; ++i) pick[i] = i;
            for (std::size_t c = 0; c < n_comb; ++c) {
                subsets[c] = pick;
                int i = l - 1;
                while (i >= 0 && pick[i] == total - l + i) --i;
                if (i < 0) break;
                ++pick[i];
                for (int j = i + 1; j < l; ++j) pick[j] = pick[j - 1] + 1;
            }
        } else {
            std::vector<int> ids(total);
            for (int i = 0; i < total; ++i) ids[i] = i;
            for (std::size_t c = 0; c < n_comb; ++c) {
                for (int j = 0; j < l; ++j) {
                    const std::size_t pick = j + rng.uniform_int(total - j);
                    std::swap(ids[j], ids[pick]);
                }
                subsets[c].assign(ids.begin(), ids.begin() + l);
                std::sort(subsets[c].begin(), subsets[c].end());
            }
        }
        parallel_for(n_comb, [&](std::size_t c) {
            adds[c] = detail::combination_add(video, subsets[c], ransac);
        });

        MultiframeRow row;
        row.l = l;
        row.combinations = n_comb;
        double sum = 0.0;
        row.min_add_mm = std::numeric_limits<double>::infinity();
        row.max_add_mm = 0.0;
        for (double a : adds) {
            sum += a;
            row.min_add_mm = std::min(row.min_add_mm, a);
            row.max_add_mm = std::max(row.max_add_mm, a);
        }
        row.mean_add_mm = sum / static_cast<double>(n_comb);
        row.median_add_mm = median(adds);
        rows.push_back(row);
    }
    return rows;
}

inline void write_multiframe_csv(const std::vector<MultiframeRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw FormatError("write_multiframe_csv: cannot open " + path);
    out << "l,mean_add_mm,median_add_mm,min_add_mm,max_add_mm\n";
    for (const auto& r : rows) {
        out << r.l << "," << format_double(r.mean_add_mm) << "," << format_double(r.median_add_mm)
            << "," << format_double(r.min_add_mm) << "," << format_double(r.max_add_mm) << "\n";
    }
}

// ---------------------------------------------------------------------------
// Occlusion bursts (robustness experiments)
// ---------------------------------------------------------------------------

// Marks detections unavailable with probability `prob` on frames
// [first_frame, last_frame], emulating a mid-video occlusion burst.
inline SequenceSample apply_occlusion_burst(const SequenceSample& sample, int first_frame,
                                            int last_frame, double prob, std::uint64_t seed) {
    SequenceSample out = sample;
    Rng rng = Rng::derive(seed, 0x0cc1ULL);
    for (int f = first_frame; f <= last_frame && f < static_cast<int>(out.frames.size()); ++f) {
        if (f < 0) continue;
        for (Keypoint2D& kp : out.frames[f].kp2d_det) {
            if (rng.bernoulli(prob)) {
                kp.in_frame = false;
                kp.confidence = 0.0;
            }
        }
    }
    return out;
}

}  // namespace sgta
