#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "farfield/common.hpp"
#include "farfield/features.hpp"
#include "farfield/metrics.hpp"
#include "farfield/sad.hpp"
#include "farfield/segments.hpp"
#include "farfield/simulate.hpp"

namespace farfield {

/// Per-frame speaker posteriors. All-zero rows mark non-speech frames.
struct QMatrix {
    Eigen::MatrixXd q;  // frames x speakers
    double frame_shift_sec = kScoreFrameSec;

    Eigen::Index frames() const { return q.rows(); }
    Eigen::Index speakers() const { return q.cols(); }
};

struct VbConfig {
    int subspace_dim = 16;
    double loop_prob = 0.99;
    int downsample = 25;
    int num_iters = 1;
    double acoustic_scale = 0.1;
};

struct OverlapMask {
    std::vector<char> flags;
    double frame_shift_sec = kScoreFrameSec;

    Eigen::Index frames() const { return static_cast<Eigen::Index>(flags.size()); }
};

namespace detail {

inline void validate_vb_config(const VbConfig& c) {
    if (c.subspace_dim < 1) throw DataError("vb_resegment: subspace_dim must be >= 1");
    if (!(c.loop_prob >= 0.0) || !(c.loop_prob < 1.0))
        throw DataError("vb_resegment: loop_prob must lie in [0, 1)");
    if (c.downsample < 1) throw DataError("vb_resegment: downsample must be >= 1");
    if (c.num_iters < 1) throw DataError("vb_resegment: num_iters must be >= 1");
    if (!(c.acoustic_scale > 0.0)) throw DataError("vb_resegment: acoustic_scale must be positive");
}

/// Index of the covering segment for a frame center, resolving overlapping
/// segments by splitting the shared span at its midpoint.
inline int covering_segment(const std::vector<Segment>& segs, double center) {
    int first = -1, last = -1;
    for (std::size_t i = 0; i < segs.size(); ++i) {
        if (center >= segs[i].onset && center < segs[i].end()) {
            if (first < 0 || segs[i].onset < segs[static_cast<std::size_t>(first)].onset)
                first = static_cast<int>(i);
            if (last < 0 || segs[i].onset > segs[static_cast<std::size_t>(last)].onset)
                last = static_cast<int>(i);
        }
    }
    if (first < 0 || first == last) return first;
    const double split = 0.5 * (segs[static_cast<std::size_t>(last)].onset +
                                segs[static_cast<std::size_t>(first)].end());
    return center < split ? first : last;
}

}  // namespace detail

/// Binary speaker posteriors from a first-pass segmentation. Frames inside a
/// labeled segment get probability 1 on that speaker; frames inside `speech`
/// without a label get a uniform row; everything else is zero.
inline QMatrix init_q(const std::vector<Segment>& first_pass, Eigen::Index num_frames,
                      const std::vector<std::string>& speakers,
                      const std::vector<Segment>& speech = {},
                      double frame_shift_sec = kScoreFrameSec) {
    if (speakers.empty()) throw DataError("init_q: empty speaker list");
    const auto num_speakers = static_cast<Eigen::Index>(speakers.size());
    for (const Segment& seg : first_pass)
        if (std::find(speakers.begin(), speakers.end(), seg.label) == speakers.end())
            throw DataError("init_q: segment label '" + seg.label + "' missing from speaker list");

    QMatrix out;
    out.frame_shift_sec = frame_shift_sec;
    out.q = Eigen::MatrixXd::Zero(num_frames, num_speakers);
    for (Eigen::Index t = 0; t < num_frames; ++t) {
        const double center = (static_cast<double>(t) + 0.5) * frame_shift_sec;
        const int seg = detail::covering_segment(first_pass, center);
        if (seg >= 0) {
            const auto s = std::distance(
                speakers.begin(),
                std::find(speakers.begin(), speakers.end(),
                          first_pass[static_cast<std::size_t>(seg)].label));
            out.q(t, static_cast<Eigen::Index>(s)) = 1.0;
            continue;
        }
        for (const Segment& sp : speech) {
            if (center >= sp.onset && center < sp.end()) {
                out.q.row(t).setConstant(1.0 / static_cast<double>(num_speakers));
                break;
            }
        }
    }
    return out;
}

/// One or more iterations of speaker-subspace VB-HMM inference: speaker means
/// live in a PCA subspace of the recording's own features, and a
/// forward-backward pass with a self-loop prior converts binary posteriors
/// into soft ones.
inline QMatrix vb_resegment(const FeatureMatrix& features, const QMatrix& q0,
                            const VbConfig& config = {}) {
    detail::validate_vb_config(config);
    if (q0.frames() != features.frames())
        throw DataError("vb_resegment: feature and posterior frame counts differ");
    if (q0.speakers() < 1) throw DataError("vb_resegment: need at least one speaker");

    const Eigen::Index t_count = features.frames();
    const Eigen::Index num_speakers = q0.speakers();
    const Eigen::Index f_dim = features.dims();

    std::vector<Eigen::Index> speech_frames;
    for (Eigen::Index t = 0; t < t_count; ++t)
        if (q0.q.row(t).sum() > 1e-9) speech_frames.push_back(t);
    if (speech_frames.empty()) throw DataError("vb_resegment: no speech frames");

    if (num_speakers == 1) {
        QMatrix out = q0;
        for (Eigen::Index t : speech_frames) out.q(t, 0) = 1.0;
        return out;
    }

    Eigen::VectorXd mu = Eigen::VectorXd::Zero(f_dim);
    for (Eigen::Index t : speech_frames) mu += features.rows.row(t).transpose();
    mu /= static_cast<double>(speech_frames.size());

    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(f_dim, f_dim);
    for (Eigen::Index t : speech_frames) {
        const Eigen::VectorXd c = features.rows.row(t).transpose() - mu;
        cov += c * c.transpose();
    }
    cov /= static_cast<double>(speech_frames.size());

    const Eigen::Index sub_dim = std::min<Eigen::Index>(config.subspace_dim, f_dim);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    Eigen::MatrixXd v(f_dim, sub_dim);
    for (Eigen::Index d = 0; d < sub_dim; ++d) v.col(d) = eig.eigenvectors().col(f_dim - 1 - d);

    Eigen::VectorXd noise_var(f_dim);
    {
        Eigen::MatrixXd resid_sum = Eigen::MatrixXd::Zero(1, f_dim);
        for (Eigen::Index t : speech_frames) {
            const Eigen::VectorXd c = features.rows.row(t).transpose() - mu;
            const Eigen::VectorXd r = c - v * (v.transpose() * c);
            resid_sum += r.cwiseAbs2().transpose();
        }
        noise_var = (resid_sum.transpose() / static_cast<double>(speech_frames.size()))
                        .cwiseMax(1e-3 * cov.diagonal().maxCoeff() + 1e-10);
    }
    const Eigen::VectorXd inv_noise = noise_var.cwiseInverse();
    const Eigen::MatrixXd vt_inv_noise = v.transpose() * inv_noise.asDiagonal();
    const Eigen::MatrixXd vtv = vt_inv_noise * v;

    Eigen::MatrixXd q = q0.q;
    const double cross = (1.0 - config.loop_prob) / static_cast<double>(num_speakers - 1);
    const double log_loop = std::log(std::max(config.loop_prob, 1e-300));
    const double log_cross = std::log(std::max(cross, 1e-300));

    for (int iter = 0; iter < config.num_iters; ++iter) {
        Eigen::MatrixXd speaker_mean(f_dim, num_speakers);
        Eigen::VectorXd model_penalty(num_speakers);
        for (Eigen::Index s = 0; s < num_speakers; ++s) {
            double n_s = 0.0;
            Eigen::VectorXd f_s = Eigen::VectorXd::Zero(f_dim);
            for (Eigen::Index t : speech_frames) {
                const double g = q(t, s);
                if (g <= 0.0) continue;
                n_s += g;
                f_s += g * (features.rows.row(t).transpose() - mu);
            }
            const Eigen::MatrixXd prec =
                Eigen::MatrixXd::Identity(sub_dim, sub_dim) + n_s * vtv;
            const Eigen::LLT<Eigen::MatrixXd> llt(prec);
            const Eigen::VectorXd y_mean = llt.solve(vt_inv_noise * f_s);
            const Eigen::MatrixXd y_cov = llt.solve(Eigen::MatrixXd::Identity(sub_dim, sub_dim));
            speaker_mean.col(s) = v * y_mean;
            model_penalty(s) = (vtv * y_cov).trace();
        }

        const auto n_speech = static_cast<Eigen::Index>(speech_frames.size());
        const Eigen::Index n_blocks = (n_speech + config.downsample - 1) / config.downsample;
        Eigen::MatrixXd block_ll = Eigen::MatrixXd::Zero(n_blocks, num_speakers);
        for (Eigen::Index i = 0; i < n_speech; ++i) {
            const Eigen::Index b = i / config.downsample;
            const Eigen::VectorXd c = features.rows.row(speech_frames[static_cast<std::size_t>(i)])
                                          .transpose() -
                                      mu;
            for (Eigen::Index s = 0; s < num_speakers; ++s) {
                const Eigen::VectorXd r = c - speaker_mean.col(s);
                block_ll(b, s) += -0.5 * (r.cwiseAbs2().dot(inv_noise) + model_penalty(s));
            }
        }
        for (Eigen::Index b = 0; b < n_blocks; ++b) {
            const Eigen::Index lo = b * config.downsample;
            const Eigen::Index hi = std::min(lo + config.downsample, n_speech);
            block_ll.row(b) *= config.acoustic_scale / static_cast<double>(hi - lo);
        }

        Eigen::MatrixXd alpha(n_blocks, num_speakers), beta(n_blocks, num_speakers);
        const auto log_sum_exp = [](const Eigen::VectorXd& x) {
            const double m = x.maxCoeff();
            return m + std::log((x.array() - m).exp().sum());
        };
        alpha.row(0) = block_ll.row(0).array() - std::log(static_cast<double>(num_speakers));
        for (Eigen::Index b = 1; b < n_blocks; ++b) {
            for (Eigen::Index s = 0; s < num_speakers; ++s) {
                Eigen::VectorXd steps(num_speakers);
                for (Eigen::Index r = 0; r < num_speakers; ++r)
                    steps(r) = alpha(b - 1, r) + (r == s ? log_loop : log_cross);
                alpha(b, s) = log_sum_exp(steps) + block_ll(b, s);
            }
        }
        beta.row(n_blocks - 1).setZero();
        for (Eigen::Index b = n_blocks - 2; b >= 0; --b) {
            for (Eigen::Index s = 0; s < num_speakers; ++s) {
                Eigen::VectorXd steps(num_speakers);
                for (Eigen::Index r = 0; r < num_speakers; ++r)
                    steps(r) = (r == s ? log_loop : log_cross) + block_ll(b + 1, r) + beta(b + 1, r);
                beta(b, s) = log_sum_exp(steps);
            }
        }

        q.setZero();
        for (Eigen::Index i = 0; i < n_speech; ++i) {
            const Eigen::Index b = i / config.downsample;
            Eigen::VectorXd post = (alpha.row(b) + beta.row(b)).transpose();
            const double z = log_sum_exp(post);
            post = (post.array() - z).exp();
            q.row(speech_frames[static_cast<std::size_t>(i)]) = post.transpose() / post.sum();
        }
    }

    QMatrix out;
    out.frame_shift_sec = q0.frame_shift_sec;
    out.q = std::move(q);
    return out;
}

/// Ground-truth overlap flags from a simulated scene, stretched or clipped to
/// the requested frame count.
inline OverlapMask oracle_overlap(const SceneTruth& truth, Eigen::Index num_frames,
                                  double frame_shift_sec = kScoreFrameSec) {
    OverlapMask mask;
    mask.frame_shift_sec = frame_shift_sec;
    mask.flags.assign(static_cast<std::size_t>(num_frames), 0);
    for (Eigen::Index t = 0; t < num_frames; ++t) {
        const double center = (static_cast<double>(t) + 0.5) * frame_shift_sec;
        const auto src = static_cast<std::size_t>(center / 0.01);
        if (src < truth.overlap_mask_10ms.size()) mask.flags[static_cast<std::size_t>(t)] =
            truth.overlap_mask_10ms[src];
    }
    return mask;
}

/// Overlap flags painted from `onset duration` spans.
inline OverlapMask oracle_overlap_from_spans(const std::vector<Segment>& spans,
                                             Eigen::Index num_frames,
                                             double frame_shift_sec = kScoreFrameSec) {
    OverlapMask mask;
    mask.frame_shift_sec = frame_shift_sec;
    mask.flags.assign(static_cast<std::size_t>(num_frames), 0);
    for (Eigen::Index t = 0; t < num_frames; ++t) {
        const double center = (static_cast<double>(t) + 0.5) * frame_shift_sec;
        for (const Segment& s : spans)
            if (center >= s.onset && center < s.end()) {
                mask.flags[static_cast<std::size_t>(t)] = 1;
                break;
            }
    }
    return mask;
}

/// Energy-and-flatness overlap heuristic. Weak by construction; it exists so
/// the pipeline can run without ground truth, not as a serious detector.
inline OverlapMask heuristic_overlap(const FramePosteriors& sad_posteriors,
                                     const FeatureMatrix& features,
                                     double flatness_threshold = 0.35) {
    const Eigen::Index n = std::min(sad_posteriors.frames(), features.frames());
    OverlapMask mask;
    mask.frame_shift_sec = sad_posteriors.frame_shift_sec;
    mask.flags.assign(static_cast<std::size_t>(features.frames()), 0);
    for (Eigen::Index t = 0; t < n; ++t) {
        const Eigen::ArrayXd mel = features.rows.row(t).array().exp();
        const double flatness = std::exp(features.rows.row(t).mean()) /
                                std::max(mel.mean(), kMelFloor);
        if (sad_posteriors.probs(t, 1) > 0.9 && flatness > flatness_threshold)
            mask.flags[static_cast<std::size_t>(t)] = 1;
    }
    return mask;
}

/// One or two speakers per speech frame: argmax normally, the top two by
/// posterior on overlap frames. Ties go to the lower speaker index.
inline std::vector<Segment> assign_speakers(const QMatrix& q, const OverlapMask& overlap,
                                            const std::vector<Segment>& speech,
                                            const std::vector<std::string>& speaker_names = {}) {
    const Eigen::Index t_count = q.frames();
    const Eigen::Index num_speakers = q.speakers();
    if (!speaker_names.empty() &&
        static_cast<Eigen::Index>(speaker_names.size()) != num_speakers)
        throw DataError("assign_speakers: speaker name count mismatch");

    const auto name = [&](Eigen::Index s) {
        return speaker_names.empty() ? "spk" + std::to_string(s)
                                     : speaker_names[static_cast<std::size_t>(s)];
    };

    std::vector<std::vector<char>> active(static_cast<std::size_t>(num_speakers),
                                          std::vector<char>(static_cast<std::size_t>(t_count), 0));
    for (Eigen::Index t = 0; t < t_count; ++t) {
        const double center = (static_cast<double>(t) + 0.5) * q.frame_shift_sec;
        bool in_speech = false;
        for (const Segment& s : speech)
            if (center >= s.onset && center < s.end()) {
                in_speech = true;
                break;
            }
        if (!in_speech) continue;
        if (q.q.row(t).sum() <= 0.0) continue;

        Eigen::Index top1 = 0;
        for (Eigen::Index s = 1; s < num_speakers; ++s)
            if (q.q(t, s) > q.q(t, top1)) top1 = s;
        active[static_cast<std::size_t>(top1)][static_cast<std::size_t>(t)] = 1;

        const bool overlapped =
            t < overlap.frames() && overlap.flags[static_cast<std::size_t>(t)] != 0;
        if (overlapped && num_speakers >= 2) {
            Eigen::Index top2 = top1 == 0 ? 1 : 0;
            for (Eigen::Index s = 0; s < num_speakers; ++s) {
                if (s == top1) continue;
                if (q.q(t, s) > q.q(t, top2)) top2 = s;
            }
            active[static_cast<std::size_t>(top2)][static_cast<std::size_t>(t)] = 1;
        }
    }

    std::vector<Segment> out;
    for (Eigen::Index s = 0; s < num_speakers; ++s) {
        Eigen::Index run_start = -1;
        for (Eigen::Index t = 0; t <= t_count; ++t) {
            const bool on = t < t_count && active[static_cast<std::size_t>(s)][static_cast<std::size_t>(t)] != 0;
            if (on && run_start < 0) run_start = t;
            if (!on && run_start >= 0) {
                out.push_back({static_cast<double>(run_start) * q.frame_shift_sec,
                               static_cast<double>(t - run_start) * q.frame_shift_sec, name(s)});
                run_start = -1;
            }
        }
    }
    sort_segments(out);
    return out;
}

/// Drops segments strictly shorter than the floor.
inline std::vector<Segment> filter_short(const std::vector<Segment>& segments,
                                         double min_dur_sec = 0.2) {
    std::vector<Segment> out;
    out.reserve(segments.size());
    for (const Segment& s : segments)
        if (s.duration >= min_dur_sec) out.push_back(s);
    return out;
}

}  // namespace farfield
