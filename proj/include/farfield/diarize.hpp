#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "farfield/common.hpp"
#include "farfield/features.hpp"
#include "farfield/metrics.hpp"
#include "farfield/sad.hpp"
#include "farfield/segments.hpp"

namespace farfield {

struct TimeWindow {
    double onset = 0.0;
    double duration = 0.0;

    double end() const { return onset + duration; }
    double center() const { return onset + 0.5 * duration; }
};

/// Overlapping analysis windows cut from speech segments.
struct SubsegmentGrid {
    double window_sec = 1.5;
    double stride_sec = 0.25;
    std::vector<TimeWindow> windows;
};

constexpr double kMinFinalWindowSec = 0.5;

struct Embedding {
    Eigen::VectorXd vector;
    TimeWindow window;
    int array_id = 0;
};

struct PldaModel {
    Eigen::VectorXd mean;
    Eigen::MatrixXd between_cov;
    Eigen::MatrixXd within_cov;

    Eigen::Index dim() const { return mean.size(); }
};

struct SimilarityMatrix {
    Eigen::MatrixXd scores;
    std::vector<TimeWindow> windows;

    Eigen::Index size() const { return scores.rows(); }
};

/// Windows at onset + k*stride while a full window fits; a shortened window
/// covers any uncovered remainder of at least kMinFinalWindowSec.
inline SubsegmentGrid cut_subsegments(const std::vector<Segment>& speech, double window_sec = 1.5,
                                      double stride_sec = 0.25) {
    if (!(window_sec > 0.0) || !(stride_sec > 0.0))
        throw DataError("cut_subsegments: window and stride must be positive");
    if (stride_sec > window_sec + 1e-12)
        throw DataError("cut_subsegments: stride exceeds window");
    SubsegmentGrid grid;
    grid.window_sec = window_sec;
    grid.stride_sec = stride_sec;
    for (const Segment& seg : speech) {
        double covered = seg.onset;
        for (int k = 0;; ++k) {
            const double onset = seg.onset + k * stride_sec;
            if (onset + window_sec > seg.end() + 1e-9) break;
            grid.windows.push_back({onset, window_sec});
            covered = onset + window_sec;
        }
        const double rem = seg.end() - covered;
        if (rem >= kMinFinalWindowSec - 1e-9) grid.windows.push_back({covered, rem});
    }
    return grid;
}

/// Mean plus standard deviation of each feature dimension, length-normalized.
inline Embedding reference_embedding(const FeatureMatrix& features, TimeWindow window = {},
                                     int array_id = 0) {
    if (features.frames() < 10) throw DataError("reference_embedding: need at least 10 frames");
    const Eigen::Index d = features.dims();
    Eigen::VectorXd v(2 * d);
    for (Eigen::Index j = 0; j < d; ++j) {
        const double mean = features.rows.col(j).mean();
        const double var = (features.rows.col(j).array() - mean).square().mean();
        v(j) = mean;
        v(d + j) = std::sqrt(var);
    }
    const double norm = v.norm();
    if (norm > 1e-12) v /= norm;
    return {std::move(v), window, array_id};
}

/// Embedding per grid window, sliced from a full-recording feature matrix.
inline std::vector<Embedding> extract_embeddings(const FeatureMatrix& features,
                                                 const SubsegmentGrid& grid, int array_id = 0) {
    std::vector<Embedding> out;
    out.reserve(grid.windows.size());
    const double shift = features.frame_shift_sec;
    for (const TimeWindow& w : grid.windows) {
        const auto lo = static_cast<Eigen::Index>(std::llround(w.onset / shift));
        auto hi = static_cast<Eigen::Index>(std::llround(w.end() / shift));
        hi = std::min(hi, features.frames());
        if (lo >= features.frames() || hi - lo < 10)
            throw DataError("extract_embeddings: window outside the feature matrix");
        FeatureMatrix slice;
        slice.frame_shift_sec = shift;
        slice.rows = features.rows.middleRows(lo, hi - lo);
        out.push_back(reference_embedding(slice, w, array_id));
    }
    return out;
}

/// Two-covariance model fit: global mean, covariance of speaker means, and
/// pooled within-speaker covariance with a ridge keeping it positive-definite.
inline PldaModel plda_train(const std::vector<std::vector<Eigen::VectorXd>>& speakers) {
    if (speakers.size() < 2) throw DataError("plda_train: need at least 2 speakers");
    const Eigen::Index d = speakers.front().empty() ? 0 : speakers.front().front().size();
    if (d < 1) throw DataError("plda_train: empty embeddings");

    Eigen::Index total = 0;
    for (const auto& group : speakers) {
        if (group.size() < 2) throw DataError("plda_train: need at least 2 segments per speaker");
        for (const auto& x : group) {
            if (x.size() != d) throw DataError("plda_train: embedding dimension mismatch");
            if (!x.allFinite()) throw DataError("plda_train: non-finite embedding");
        }
        total += static_cast<Eigen::Index>(group.size());
    }

    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
    std::vector<Eigen::VectorXd> speaker_means;
    speaker_means.reserve(speakers.size());
    for (const auto& group : speakers) {
        Eigen::VectorXd m = Eigen::VectorXd::Zero(d);
        for (const auto& x : group) m += x;
        m /= static_cast<double>(group.size());
        for (const auto& x : group) mean += x;
        speaker_means.push_back(std::move(m));
    }
    mean /= static_cast<double>(total);

    Eigen::MatrixXd between = Eigen::MatrixXd::Zero(d, d);
    for (const auto& m : speaker_means) {
        const Eigen::VectorXd c = m - mean;
        between += c * c.transpose();
    }
    between /= static_cast<double>(speaker_means.size());

    Eigen::MatrixXd within = Eigen::MatrixXd::Zero(d, d);
    for (std::size_t s = 0; s < speakers.size(); ++s) {
        for (const auto& x : speakers[s]) {
            const Eigen::VectorXd c = x - speaker_means[s];
            within += c * c.transpose();
        }
    }
    within /= static_cast<double>(total);

    const double ridge = std::max(1e-6 * within.trace() / static_cast<double>(d), 1e-10);
    within += ridge * Eigen::MatrixXd::Identity(d, d);

    PldaModel model;
    model.mean = std::move(mean);
    model.between_cov = 0.5 * (between + between.transpose());
    model.within_cov = 0.5 * (within + within.transpose());
    return model;
}

namespace detail {

/// Cached joint-Gaussian forms for the two-covariance likelihood ratio.
struct PldaScorer {
    Eigen::VectorXd mean;
    Eigen::MatrixXd tot_inv;    // (B + W)^-1
    Eigen::MatrixXd same_m1;    // diagonal block of the same-speaker precision
    Eigen::MatrixXd same_m2;    // off-diagonal block of the same-speaker precision
    double logdet_gap = 0.0;    // logdet(diff cov) - logdet(same cov)

    explicit PldaScorer(const PldaModel& model) {
        const Eigen::Index d = model.dim();
        mean = model.mean;
        const Eigen::MatrixXd tot = model.between_cov + model.within_cov;
        Eigen::MatrixXd joint(2 * d, 2 * d);
        joint.topLeftCorner(d, d) = tot;
        joint.topRightCorner(d, d) = model.between_cov;
        joint.bottomLeftCorner(d, d) = model.between_cov;
        joint.bottomRightCorner(d, d) = tot;

        Eigen::LLT<Eigen::MatrixXd> llt_tot(tot);
        Eigen::LLT<Eigen::MatrixXd> llt_joint(joint);
        if (llt_tot.info() != Eigen::Success || llt_joint.info() != Eigen::Success)
            throw DataError("plda_score: covariance model is not positive-definite");
        tot_inv = llt_tot.solve(Eigen::MatrixXd::Identity(d, d));
        const Eigen::MatrixXd joint_inv = llt_joint.solve(Eigen::MatrixXd::Identity(2 * d, 2 * d));
        same_m1 = joint_inv.topLeftCorner(d, d);
        same_m2 = joint_inv.topRightCorner(d, d);

        double logdet_tot = 0.0;
        for (Eigen::Index i = 0; i < d; ++i)
            logdet_tot += 2.0 * std::log(llt_tot.matrixL()(i, i));
        double logdet_joint = 0.0;
        for (Eigen::Index i = 0; i < 2 * d; ++i)
            logdet_joint += 2.0 * std::log(llt_joint.matrixL()(i, i));
        logdet_gap = 2.0 * logdet_tot - logdet_joint;
    }

    double score(const Eigen::VectorXd& e1, const Eigen::VectorXd& e2) const {
        const Eigen::VectorXd a = e1 - mean;
        const Eigen::VectorXd b = e2 - mean;
        const double diff_q = a.dot(tot_inv * a) + b.dot(tot_inv * b);
        const double same_q = a.dot(same_m1 * a) + b.dot(same_m1 * b) + 2.0 * a.dot(same_m2 * b);
        return 0.5 * (diff_q - same_q + logdet_gap);
    }
};

}  // namespace detail

/// Log-likelihood ratio of same speaker versus different speakers.
inline double plda_score(const PldaModel& model, const Eigen::VectorXd& e1,
                         const Eigen::VectorXd& e2) {
    if (e1.size() != model.dim() || e2.size() != model.dim())
        throw DataError("plda_score: embedding dimension mismatch");
    return detail::PldaScorer(model).score(e1, e2);
}

/// Pairwise score matrix over one array's embeddings.
inline SimilarityMatrix plda_similarity(const PldaModel& model,
                                        const std::vector<Embedding>& embeddings) {
    const auto n = static_cast<Eigen::Index>(embeddings.size());
    detail::PldaScorer scorer(model);
    SimilarityMatrix sim;
    sim.scores.resize(n, n);
    sim.windows.reserve(embeddings.size());
    for (const Embedding& e : embeddings) {
        if (e.vector.size() != model.dim())
            throw DataError("plda_similarity: embedding dimension mismatch");
        sim.windows.push_back(e.window);
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i; j < n; ++j) {
            const double s = scorer.score(embeddings[static_cast<std::size_t>(i)].vector,
                                          embeddings[static_cast<std::size_t>(j)].vector);
            sim.scores(i, j) = s;
            sim.scores(j, i) = s;
        }
    }
    return sim;
}

/// Element-wise max (default) or mean across per-array score matrices.
inline SimilarityMatrix fuse_plda_scores(const std::vector<SimilarityMatrix>& per_array,
                                         FusionCriterion criterion = FusionCriterion::max) {
    if (per_array.empty()) throw DataError("fuse_plda_scores: no inputs");
    const Eigen::Index n = per_array.front().size();
    for (const SimilarityMatrix& m : per_array)
        if (m.scores.rows() != n || m.scores.cols() != n)
            throw DataError("fuse_plda_scores: shape mismatch");
    SimilarityMatrix out = per_array.front();
    for (std::size_t k = 1; k < per_array.size(); ++k) {
        if (criterion == FusionCriterion::max)
            out.scores = out.scores.cwiseMax(per_array[k].scores);
        else
            out.scores += per_array[k].scores;
    }
    if (criterion == FusionCriterion::mean)
        out.scores /= static_cast<double>(per_array.size());
    return out;
}

struct AhcStop {
    enum class Kind { threshold, num_clusters };
    Kind kind = Kind::threshold;
    double threshold = 0.0;
    int num_clusters = 1;

    static AhcStop by_threshold(double t) { return {Kind::threshold, t, 1}; }
    static AhcStop by_count(int k) { return {Kind::num_clusters, 0.0, k}; }
};

/// Average-linkage agglomerative clustering on a similarity matrix.
/// Merges the most similar pair first; stops below the threshold or at the
/// requested cluster count. Labels are 0-based in order of first appearance.
inline std::vector<int> ahc_cluster(const SimilarityMatrix& sim, const AhcStop& stop) {
    const Eigen::Index n = sim.size();
    if (n < 1) throw DataError("ahc_cluster: empty similarity matrix");
    if (sim.scores.cols() != n) throw DataError("ahc_cluster: similarity matrix is not square");
    if (!sim.scores.allFinite()) throw DataError("ahc_cluster: non-finite similarity");
    if (stop.kind == AhcStop::Kind::num_clusters && stop.num_clusters < 1)
        throw DataError("ahc_cluster: num_clusters must be at least 1");

    std::vector<int> parent(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) parent[static_cast<std::size_t>(i)] = static_cast<int>(i);
    std::vector<double> weight(static_cast<std::size_t>(n), 1.0);
    std::vector<bool> alive(static_cast<std::size_t>(n), true);
    Eigen::MatrixXd link = sim.scores;
    int clusters = static_cast<int>(n);
    const int target = stop.kind == AhcStop::Kind::num_clusters
                           ? std::min(stop.num_clusters, clusters)
                           : 1;

    while (clusters > target) {
        double best = -std::numeric_limits<double>::infinity();
        Eigen::Index bi = -1, bj = -1;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (!alive[static_cast<std::size_t>(i)]) continue;
            for (Eigen::Index j = i + 1; j < n; ++j) {
                if (!alive[static_cast<std::size_t>(j)]) continue;
                if (link(i, j) > best) {
                    best = link(i, j);
                    bi = i;
                    bj = j;
                }
            }
        }
        if (bi < 0) break;
        if (stop.kind == AhcStop::Kind::threshold && best < stop.threshold) break;

        const double wi = weight[static_cast<std::size_t>(bi)];
        const double wj = weight[static_cast<std::size_t>(bj)];
        for (Eigen::Index k = 0; k < n; ++k) {
            if (!alive[static_cast<std::size_t>(k)] || k == bi || k == bj) continue;
            link(bi, k) = (wi * link(bi, k) + wj * link(bj, k)) / (wi + wj);
            link(k, bi) = link(bi, k);
        }
        weight[static_cast<std::size_t>(bi)] = wi + wj;
        alive[static_cast<std::size_t>(bj)] = false;
        for (Eigen::Index k = 0; k < n; ++k)
            if (parent[static_cast<std::size_t>(k)] == static_cast<int>(bj))
                parent[static_cast<std::size_t>(k)] = static_cast<int>(bi);
        --clusters;
    }

    std::vector<int> labels(static_cast<std::size_t>(n), -1);
    int next = 0;
    std::vector<int> relabel(static_cast<std::size_t>(n), -1);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int root = parent[static_cast<std::size_t>(i)];
        if (relabel[static_cast<std::size_t>(root)] < 0)
            relabel[static_cast<std::size_t>(root)] = next++;
        labels[static_cast<std::size_t>(i)] = relabel[static_cast<std::size_t>(root)];
    }
    return labels;
}

/// Paints cluster labels onto the 10 ms frame grid: a frame inside any window
/// takes the label of the nearest window center; runs merge into segments.
inline std::vector<Segment> windows_to_segments(const std::vector<int>& labels,
                                                const SubsegmentGrid& grid) {
    if (labels.size() != grid.windows.size())
        throw DataError("windows_to_segments: one label per window required");
    std::vector<Segment> out;
    if (grid.windows.empty()) return out;

    double max_end = 0.0;
    for (const TimeWindow& w : grid.windows) max_end = std::max(max_end, w.end());
    const auto frames = static_cast<Eigen::Index>(std::ceil(max_end / kScoreFrameSec - 1e-9));

    std::vector<std::size_t> order(grid.windows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return grid.windows[a].onset < grid.windows[b].onset;
    });

    std::vector<int> frame_label(static_cast<std::size_t>(frames), -1);
    std::size_t sweep = 0;
    std::vector<std::size_t> active;
    for (Eigen::Index t = 0; t < frames; ++t) {
        const double center = (static_cast<double>(t) + 0.5) * kScoreFrameSec;
        while (sweep < order.size() && grid.windows[order[sweep]].onset <= center)
            active.push_back(order[sweep++]);
        std::erase_if(active, [&](std::size_t i) { return grid.windows[i].end() <= center; });

        double best_dist = std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        bool found = false;
        for (std::size_t i : active) {
            const double dist = std::abs(grid.windows[i].center() - center);
            if (dist < best_dist || (dist == best_dist && found && i < best_idx)) {
                best_dist = dist;
                best_idx = i;
                found = true;
            }
        }
        if (found) frame_label[static_cast<std::size_t>(t)] = labels[best_idx];
    }

    Eigen::Index run_start = -1;
    int run_label = -1;
    for (Eigen::Index t = 0; t <= frames; ++t) {
        const int lab = t < frames ? frame_label[static_cast<std::size_t>(t)] : -1;
        if (lab != run_label) {
            if (run_label >= 0)
                out.push_back({static_cast<double>(run_start) * kScoreFrameSec,
                               static_cast<double>(t - run_start) * kScoreFrameSec,
                               "spk" + std::to_string(run_label)});
            run_start = t;
            run_label = lab;
        }
    }
    return out;
}

/// Text serialization: a header line with the dimension, then the mean, then
/// the between and within covariance rows, all at full double precision.
constexpr char kPldaMagic[4] = {'P', 'L', 'D', 'A'};
constexpr std::uint32_t kPldaVersion = 1;

namespace detail {

inline void put_f64(std::string& out, double x) {
    const auto bits = std::bit_cast<std::uint64_t>(x);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t x) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

class PldaReader {
public:
    PldaReader(const std::string& bytes, std::size_t start) : bytes_(bytes), pos_(start) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t x = 0;
        for (int i = 0; i < 4; ++i)
            x |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + static_cast<std::size_t>(i)]))
                 << (8 * i);
        pos_ += 4;
        return x;
    }

    double f64() {
        need(8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i)
            bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + static_cast<std::size_t>(i)]))
                    << (8 * i);
        pos_ += 8;
        return std::bit_cast<double>(bits);
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) {
        if (bytes_.size() - pos_ < n) throw FormatError("speaker model: truncated data");
    }

    const std::string& bytes_;
    std::size_t pos_;
};

}  // namespace detail

/// Little-endian binary speaker model: magic, version, dim, then mean,
/// between and within covariance as row-major float64.
inline std::string emit_plda(const PldaModel& model) {
    const Eigen::Index d = model.dim();
    std::string out;
    out.reserve(12 + 8 * static_cast<std::size_t>(d) * static_cast<std::size_t>(2 * d + 1));
    out.append(kPldaMagic, 4);
    detail::put_u32(out, kPldaVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (Eigen::Index i = 0; i < d; ++i) detail::put_f64(out, model.mean(i));
    for (const Eigen::MatrixXd* m : {&model.between_cov, &model.within_cov})
        for (Eigen::Index r = 0; r < d; ++r)
            for (Eigen::Index c = 0; c < d; ++c) detail::put_f64(out, (*m)(r, c));
    return out;
}

inline PldaModel parse_plda(const std::string& bytes) {
    if (bytes.size() < 4 || bytes.compare(0, 4, kPldaMagic, 4) != 0)
        throw FormatError("speaker model: bad magic");
    detail::PldaReader in(bytes, 4);
    const std::uint32_t version = in.u32();
    if (version != kPldaVersion)
        throw FormatError("speaker model: unsupported version " + std::to_string(version));
    const std::uint32_t dim = in.u32();
    if (dim < 1 || dim > 65536) throw FormatError("speaker model: bad dimension");
    const auto d = static_cast<Eigen::Index>(dim);
    PldaModel model;
    model.mean.resize(d);
    model.between_cov.resize(d, d);
    model.within_cov.resize(d, d);
    for (Eigen::Index i = 0; i < d; ++i) model.mean(i) = in.f64();
    for (Eigen::MatrixXd* m : {&model.between_cov, &model.within_cov})
        for (Eigen::Index r = 0; r < d; ++r)
            for (Eigen::Index c = 0; c < d; ++c) (*m)(r, c) = in.f64();
    if (!in.done()) throw FormatError("speaker model: trailing data");
    return model;
}

inline void write_plda(const std::string& path, const PldaModel& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_plda: cannot open " + path + " for writing");
    const std::string bytes = emit_plda(model);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write_plda: write failed for " + path);
}

inline PldaModel read_plda(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_plda: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_plda(buf.str());
}

}  // namespace farfield
