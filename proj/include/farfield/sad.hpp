#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "farfield/common.hpp"
#include "farfield/features.hpp"
#include "farfield/segments.hpp"

namespace farfield {

/// Frame classes, in column order: silence, speech, garbage.
enum class SadClass : int { silence = 0, speech = 1, garbage = 2 };
constexpr int kSadNumClasses = 3;

/// Per-frame class probabilities. Rows sum to 1.
struct FramePosteriors {
    Eigen::MatrixXd probs;  // frames x kSadNumClasses
    double frame_shift_sec = 0.0;

    Eigen::Index frames() const { return probs.rows(); }
};

struct SadHmmConfig {
    double min_speech_sec = 0.3;
    double min_silence_sec = 0.3;
    double max_speech_sec = 20.0;
    double speech_prior = 0.5;
};

enum class FusionCriterion { mean, max };

namespace detail {

inline void validate_posteriors(const FramePosteriors& p, const char* who) {
    if (p.probs.cols() != kSadNumClasses)
        throw DataError(std::string(who) + ": posterior matrix must have 3 columns");
    if (p.probs.rows() < 1) throw DataError(std::string(who) + ": empty posterior matrix");
    if (!(p.frame_shift_sec > 0.0))
        throw DataError(std::string(who) + ": frame shift must be positive");
    if (!p.probs.allFinite()) throw DataError(std::string(who) + ": non-finite posterior");
}

inline void validate_sad_config(const SadHmmConfig& c) {
    if (!(c.min_speech_sec > 0.0) || !(c.min_silence_sec > 0.0) || !(c.max_speech_sec > 0.0))
        throw DataError("sad: durations must be positive");
    if (c.min_speech_sec > c.max_speech_sec)
        throw DataError("sad: min_speech_sec exceeds max_speech_sec");
    if (!(c.speech_prior > 0.0) || !(c.speech_prior < 1.0))
        throw DataError("sad: speech_prior must lie strictly inside (0, 1)");
}

/// Two-component diagonal Gaussian EM on standardized 2-d points.
/// Returns per-point responsibility of the component with the higher first
/// coordinate mean. Initialization is deterministic (low/high quantiles).
inline Eigen::VectorXd two_gaussian_responsibilities(const Eigen::MatrixXd& pts) {
    const Eigen::Index n = pts.rows();
    std::vector<double> first(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) first[static_cast<std::size_t>(i)] = pts(i, 0);
    std::vector<std::size_t> order(first.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return first[a] < first[b]; });

    Eigen::Matrix<double, 2, 2> mu;  // component x dim
    mu.row(0) = pts.row(static_cast<Eigen::Index>(order[order.size() / 10]));
    mu.row(1) = pts.row(static_cast<Eigen::Index>(order[order.size() - 1 - order.size() / 10]));
    Eigen::Matrix<double, 2, 2> var = Eigen::Matrix<double, 2, 2>::Ones();
    Eigen::Vector2d weight(0.5, 0.5);

    Eigen::MatrixXd resp(n, 2);
    for (int iter = 0; iter < 50; ++iter) {
        for (Eigen::Index i = 0; i < n; ++i) {
            Eigen::Vector2d logp;
            for (int k = 0; k < 2; ++k) {
                double ll = std::log(weight(k));
                for (int d = 0; d < 2; ++d) {
                    const double diff = pts(i, d) - mu(k, d);
                    ll -= 0.5 * (std::log(2.0 * M_PI * var(k, d)) + diff * diff / var(k, d));
                }
                logp(k) = ll;
            }
            const double m = logp.maxCoeff();
            Eigen::Vector2d e = (logp.array() - m).exp();
            resp.row(i) = (e / e.sum()).transpose();
        }
        for (int k = 0; k < 2; ++k) {
            const double nk = resp.col(k).sum();
            if (nk < 1e-8) continue;
            for (int d = 0; d < 2; ++d) {
                const double mean = resp.col(k).dot(pts.col(d)) / nk;
                const Eigen::ArrayXd diff = pts.col(d).array() - mean;
                mu(k, d) = mean;
                var(k, d) = std::max(resp.col(k).dot((diff * diff).matrix()) / nk, 1e-4);
            }
            weight(k) = nk / static_cast<double>(n);
        }
    }
    const int speech_comp = mu(0, 0) >= mu(1, 0) ? 0 : 1;
    return resp.col(speech_comp);
}

}  // namespace detail

/// Unsupervised speech posteriors from log-energy plus spectral flatness:
/// a deterministic 2-component Gaussian mixture, higher-energy component
/// mapped to speech. Garbage stays at zero. Output is smoothed with a
/// 5-frame moving average and renormalized per row.
inline FramePosteriors reference_posteriors(const FeatureMatrix& features) {
    if (features.frames() < 2) throw DataError("reference_posteriors: need at least 2 frames");
    if (!(features.frame_shift_sec > 0.0))
        throw DataError("reference_posteriors: frame shift must be positive");
    const Eigen::Index t_count = features.frames();

    Eigen::MatrixXd pts(t_count, 2);
    for (Eigen::Index t = 0; t < t_count; ++t) {
        const Eigen::ArrayXd mel = features.rows.row(t).array().exp();
        pts(t, 0) = std::log(std::max(mel.sum(), kMelFloor));
        pts(t, 1) = std::exp(features.rows.row(t).mean()) / std::max(mel.mean(), kMelFloor);
    }

    FramePosteriors out;
    out.frame_shift_sec = features.frame_shift_sec;
    out.probs.resize(t_count, kSadNumClasses);

    const double spread = pts.col(0).maxCoeff() - pts.col(0).minCoeff();
    if (spread < 1e-9) {
        out.probs.col(0).setConstant(0.5);
        out.probs.col(1).setConstant(0.5);
        out.probs.col(2).setZero();
        return out;
    }

    Eigen::MatrixXd z = pts;
    for (int d = 0; d < 2; ++d) {
        const double mean = z.col(d).mean();
        const double sd = std::sqrt((z.col(d).array() - mean).square().mean());
        z.col(d) = (z.col(d).array() - mean) / std::max(sd, 1e-12);
    }

    const Eigen::VectorXd speech = detail::two_gaussian_responsibilities(z);
    Eigen::MatrixXd raw(t_count, kSadNumClasses);
    raw.col(1) = speech;
    raw.col(0) = Eigen::VectorXd::Ones(t_count) - speech;
    raw.col(2).setZero();

    for (Eigen::Index t = 0; t < t_count; ++t) {
        const Eigen::Index lo = std::max<Eigen::Index>(0, t - 2);
        const Eigen::Index hi = std::min(t_count - 1, t + 2);
        Eigen::RowVector3d avg = Eigen::RowVector3d::Zero();
        for (Eigen::Index u = lo; u <= hi; ++u) avg += raw.row(u);
        avg /= static_cast<double>(hi - lo + 1);
        out.probs.row(t) = avg / avg.sum();
    }
    return out;
}

/// Element-wise mean or max across arrays, renormalized per row.
inline FramePosteriors fuse_posteriors(const std::vector<FramePosteriors>& per_array,
                                       FusionCriterion criterion) {
    if (per_array.empty()) throw DataError("fuse_posteriors: no inputs");
    for (const FramePosteriors& p : per_array) detail::validate_posteriors(p, "fuse_posteriors");
    const Eigen::Index t_count = per_array.front().frames();
    const double shift = per_array.front().frame_shift_sec;
    for (const FramePosteriors& p : per_array) {
        if (p.frames() != t_count) throw DataError("fuse_posteriors: frame count mismatch");
        if (std::abs(p.frame_shift_sec - shift) > 1e-12)
            throw DataError("fuse_posteriors: frame shift mismatch");
    }

    Eigen::MatrixXd fused = per_array.front().probs;
    for (std::size_t k = 1; k < per_array.size(); ++k) {
        if (criterion == FusionCriterion::mean)
            fused += per_array[k].probs;
        else
            fused = fused.cwiseMax(per_array[k].probs);
    }
    if (criterion == FusionCriterion::mean) fused /= static_cast<double>(per_array.size());

    FramePosteriors out;
    out.frame_shift_sec = shift;
    out.probs.resize(t_count, kSadNumClasses);
    for (Eigen::Index t = 0; t < t_count; ++t) {
        const double s = fused.row(t).sum();
        out.probs.row(t) = s > 0.0 ? (fused.row(t) / s).eval() : fused.row(t);
    }
    return out;
}

namespace detail {

struct SadDurations {
    int min_speech, min_silence, max_speech;
};

inline SadDurations sad_frame_durations(const SadHmmConfig& c, double shift) {
    SadDurations d;
    d.min_speech = std::max(1, static_cast<int>(std::ceil(c.min_speech_sec / shift - 1e-9)));
    d.min_silence = std::max(1, static_cast<int>(std::ceil(c.min_silence_sec / shift - 1e-9)));
    d.max_speech =
        std::max(d.min_speech, static_cast<int>(std::floor(c.max_speech_sec / shift + 1e-9)));
    return d;
}

/// Duration-constrained two-class Viterbi over left-to-right state chains.
/// Silence occupies states [0, min_silence); speech occupies
/// [min_silence, min_silence + max_speech). Returns the per-frame labels
/// (1 = speech) and the path log score.
inline std::pair<std::vector<std::uint8_t>, double> viterbi_labels(const FramePosteriors& post,
                                                                   const SadHmmConfig& config) {
    validate_posteriors(post, "viterbi_smooth");
    validate_sad_config(config);
    const SadDurations dur = sad_frame_durations(config, post.frame_shift_sec);
    const int msl = dur.min_silence, ms = dur.min_speech, cap = dur.max_speech;
    const int n_states = msl + cap;
    const Eigen::Index t_count = post.frames();
    const double log_sp = std::log(config.speech_prior);
    const double log_sil = std::log(1.0 - config.speech_prior);
    constexpr double kEmisFloor = 1e-12;
    constexpr double kNegInf = -std::numeric_limits<double>::infinity();

    const auto emis = [&](Eigen::Index t, bool speech) {
        const double p = speech ? post.probs(t, 1) : post.probs(t, 0) + post.probs(t, 2);
        return std::log(p + kEmisFloor);
    };

    Eigen::MatrixXd score(t_count, n_states);
    Eigen::MatrixXi from(t_count, n_states);
    score.setConstant(kNegInf);
    from.setConstant(-1);
    score(0, 0) = log_sil + emis(0, false);
    score(0, msl) = log_sp + emis(0, true);

    for (Eigen::Index t = 1; t < t_count; ++t) {
        const double e_sil = emis(t, false);
        const double e_sp = emis(t, true);

        double best_exit = kNegInf;
        int best_exit_state = -1;
        for (int i = msl + ms - 1; i < msl + cap; ++i) {
            const double s =
                score(t - 1, i) + (i == msl + cap - 1 ? 0.0 : log_sil);
            if (s > best_exit) {
                best_exit = s;
                best_exit_state = i;
            }
        }

        for (int j = 0; j < n_states; ++j) {
            double best;
            int arg;
            if (j == msl - 1) {
                // Last silence state: staying silent wins ties over arriving.
                best = score(t - 1, j) + log_sil;
                arg = j;
                const double arrive = j == 0 ? best_exit : score(t - 1, j - 1);
                const int arrive_arg = j == 0 ? best_exit_state : j - 1;
                if (arrive > best) {
                    best = arrive;
                    arg = arrive_arg;
                }
            } else if (j == 0) {
                best = best_exit;
                arg = best_exit_state;
            } else if (j < msl) {
                best = score(t - 1, j - 1);
                arg = j - 1;
            } else if (j == msl) {
                best = score(t - 1, msl - 1) + log_sp;
                arg = msl - 1;
            } else {
                const int i = j - 1;
                const bool past_min = i >= msl + ms - 1;
                best = score(t - 1, i) + (past_min ? log_sp : 0.0);
                arg = i;
            }
            if (arg >= 0 && std::isfinite(best)) score(t, j) = best + (j < msl ? e_sil : e_sp);
            from(t, j) = arg;
        }
    }

    double best = kNegInf;
    int state = -1;
    for (int j = 0; j < n_states; ++j) {
        const bool legal_end = j < msl || j >= msl + ms - 1;
        if (legal_end && score(t_count - 1, j) > best) {
            best = score(t_count - 1, j);
            state = j;
        }
    }
    if (state < 0) throw DataError("viterbi_smooth: no legal path");

    std::vector<std::uint8_t> labels(static_cast<std::size_t>(t_count));
    for (Eigen::Index t = t_count - 1; t >= 0; --t) {
        labels[static_cast<std::size_t>(t)] = state >= msl ? 1 : 0;
        if (t > 0) state = from(t, state);
    }
    return {std::move(labels), best};
}

}  // namespace detail

/// Most likely speech segmentation under the duration-constrained HMM.
/// Recordings shorter than min_speech_sec fall back to a single segment
/// spanning the recording when the mean speech posterior exceeds 0.5.
inline std::vector<Segment> viterbi_smooth(const FramePosteriors& post,
                                           const SadHmmConfig& config = {}) {
    detail::validate_posteriors(post, "viterbi_smooth");
    detail::validate_sad_config(config);
    const double shift = post.frame_shift_sec;
    const Eigen::Index t_count = post.frames();

    if (static_cast<double>(t_count) * shift < config.min_speech_sec) {
        std::vector<Segment> out;
        if (post.probs.col(1).mean() > 0.5)
            out.push_back({0.0, static_cast<double>(t_count) * shift, "speech"});
        return out;
    }

    const auto [labels, score] = detail::viterbi_labels(post, config);
    (void)score;
    std::vector<Segment> out;
    Eigen::Index run_start = -1;
    for (Eigen::Index t = 0; t <= t_count; ++t) {
        const bool sp = t < t_count && labels[static_cast<std::size_t>(t)] == 1;
        if (sp && run_start < 0) run_start = t;
        if (!sp && run_start >= 0) {
            out.push_back({static_cast<double>(run_start) * shift,
                           static_cast<double>(t - run_start) * shift, "speech"});
            run_start = -1;
        }
    }
    return out;
}

}  // namespace farfield
