#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <complex>
#include <vector>

#include "farfield/audio.hpp"
#include "farfield/common.hpp"
#include "farfield/fft.hpp"

namespace farfield {

/// Per-block integer alignment against channel 0, with a confidence per
/// (block, channel) used later as summing weight.
struct TdoaTrack {
    Eigen::MatrixXi delays;       // blocks x channels, samples, column 0 all zero
    Eigen::MatrixXd confidence;   // blocks x channels in [0,1]
    int block_len_samples = 0;
};

constexpr double kTdoaConfidenceThreshold = 0.1;
constexpr double kDefaultBlockLenSec = 0.5;
constexpr double kDefaultMaxDelaySec = 0.03;

/// Phase-transform cross-correlation peak. The correlation is scaled so a
/// pair of identical signals scores exactly 1 at lag 0; the peak is searched
/// within +-max_delay samples.
inline std::pair<int, double> gcc_phat(const Eigen::VectorXd& ref_block,
                                       const Eigen::VectorXd& other_block, int max_delay) {
    if (ref_block.size() != other_block.size())
        throw DataError("gcc_phat: blocks of different length");
    if (ref_block.size() == 0) throw DataError("gcc_phat: empty blocks");
    if (max_delay < 0) throw DataError("gcc_phat: negative max_delay");
    const bool ref_silent = ref_block.squaredNorm() == 0.0;
    const bool other_silent = other_block.squaredNorm() == 0.0;
    if (ref_silent || other_silent) return {0, 0.0};

    const auto n = static_cast<std::size_t>(ref_block.size());
    const std::size_t L = next_power_of_two(2 * n);
    std::vector<std::complex<double>> X(L, 0.0), Y(L, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
        X[t] = ref_block(static_cast<Eigen::Index>(t));
        Y[t] = other_block(static_cast<Eigen::Index>(t));
    }
    fft_inplace(X);
    fft_inplace(Y);
    std::vector<std::complex<double>> C(L);
    for (std::size_t k = 0; k < L; ++k) {
        const std::complex<double> c = X[k] * std::conj(Y[k]);
        const double mag = std::abs(c);
        C[k] = mag > 1e-30 ? c / mag : std::complex<double>(0.0, 0.0);
    }
    fft_inplace(C, true);  // already divides by L, so a perfect match peaks at 1

    const int limit = std::min<int>(max_delay, static_cast<int>(L / 2) - 1);
    int best_lag = 0;
    double best = -2.0;
    for (int lag = -limit; lag <= limit; ++lag) {
        // other = ref delayed by `lag` samples puts the correlation peak at
        // index (L - lag) mod L
        const std::size_t idx = lag <= 0 ? static_cast<std::size_t>(-lag)
                                         : L - static_cast<std::size_t>(lag);
        const double v = C[idx].real();
        if (v > best) {
            best = v;
            best_lag = lag;
        }
    }
    return {best_lag, std::clamp(best, 0.0, 1.0)};
}

/// Blockwise GCC-PHAT delays vs channel 0. Blocks under the confidence
/// threshold inherit the previous block's delay, then each channel's delay
/// sequence is median-smoothed over a 3-block window.
inline TdoaTrack track_tdoa(const MultichannelAudio& audio, double block_len_sec = kDefaultBlockLenSec,
                            double max_delay_sec = kDefaultMaxDelaySec) {
    if (audio.channels() < 2) throw DataError("track_tdoa: need at least two channels");
    const auto block = static_cast<Eigen::Index>(std::llround(block_len_sec * audio.sample_rate));
    if (block < 1 || audio.num_samples() < block)
        throw DataError("track_tdoa: audio shorter than one block");
    const int max_delay = static_cast<int>(std::llround(max_delay_sec * audio.sample_rate));

    const Eigen::Index C = audio.channels();
    const Eigen::Index n_blocks = (audio.num_samples() + block - 1) / block;
    TdoaTrack track;
    track.block_len_samples = static_cast<int>(block);
    track.delays = Eigen::MatrixXi::Zero(n_blocks, C);
    track.confidence = Eigen::MatrixXd::Zero(n_blocks, C);
    track.confidence.col(0).setOnes();

    for (Eigen::Index b = 0; b < n_blocks; ++b) {
        const Eigen::Index lo = b * block;
        const Eigen::Index len = std::min(block, audio.num_samples() - lo);
        const Eigen::VectorXd ref = audio.samples.row(0).segment(lo, len);
        for (Eigen::Index c = 1; c < C; ++c) {
            const Eigen::VectorXd other = audio.samples.row(c).segment(lo, len);
            auto [delay, conf] = gcc_phat(ref, other, max_delay);
            track.confidence(b, c) = conf;
            if (conf < kTdoaConfidenceThreshold) {
                track.delays(b, c) = b > 0 ? track.delays(b - 1, c) : 0;
            } else {
                track.delays(b, c) = delay;
            }
        }
    }

    Eigen::MatrixXi smoothed = track.delays;
    for (Eigen::Index c = 1; c < C; ++c) {
        for (Eigen::Index b = 0; b < n_blocks; ++b) {
            int v[3] = {track.delays(std::max<Eigen::Index>(b - 1, 0), c), track.delays(b, c),
                        track.delays(std::min(b + 1, n_blocks - 1), c)};
            std::sort(v, v + 3);
            smoothed(b, c) = v[1];
        }
    }
    track.delays = smoothed;
    return track;
}

/// Confidence-weighted delay-and-sum against the reference channel. Channel
/// weights are the per-channel average block confidence, normalized to sum to
/// one (uniform if everything is zero).
inline MultichannelAudio delay_and_sum(const MultichannelAudio& audio, const TdoaTrack& track) {
    if (audio.channels() < 1) throw DataError("delay_and_sum: empty audio");
    if (track.delays.cols() != audio.channels())
        throw DataError("delay_and_sum: track channel count mismatch");
    if (track.block_len_samples < 1 ||
        static_cast<Eigen::Index>(track.delays.rows()) * track.block_len_samples < audio.num_samples())
        throw DataError("delay_and_sum: track does not cover the recording");

    const Eigen::Index C = audio.channels();
    Eigen::VectorXd weights = track.confidence.colwise().mean();
    const double total = weights.sum();
    if (total <= 1e-12) {
        weights.setConstant(1.0 / static_cast<double>(C));
    } else {
        weights /= total;
    }

    MultichannelAudio out;
    out.sample_rate = audio.sample_rate;
    out.samples = Eigen::MatrixXd::Zero(1, audio.num_samples());
    for (Eigen::Index t = 0; t < audio.num_samples(); ++t) {
        const Eigen::Index b = std::min<Eigen::Index>(t / track.block_len_samples, track.delays.rows() - 1);
        double acc = 0.0;
        for (Eigen::Index c = 0; c < C; ++c) {
            const Eigen::Index src = t + track.delays(b, c);
            if (src >= 0 && src < audio.num_samples()) acc += weights(c) * audio.samples(c, src);
        }
        out.samples(0, t) = acc;
    }
    return out;
}

}  // namespace farfield
