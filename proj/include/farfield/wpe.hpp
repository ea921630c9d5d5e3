#pragma once

#include <Eigen/Dense>
#include <complex>
#include <deque>
#include <thread>
#include <vector>

#include "farfield/audio.hpp"
#include "farfield/common.hpp"
#include "farfield/stft.hpp"

namespace farfield {

struct WpeConfig {
    int taps = 10;
    int delay = 3;          // prediction starts delay+1 frames back
    double alpha = 0.9999;  // RLS forgetting factor
    int psd_context = 0;    // extra past frames averaged into the power estimate
};

constexpr double kWpeInvCorrInit = 1.0;   // R^-1 starts at this*I
constexpr double kWpePowerFloor = 1e-10;
constexpr double kWpeDenomGuard = 1e-12;

namespace detail {

inline void validate_wpe_config(const WpeConfig& c) {
    if (c.taps < 1) throw DataError("wpe: taps must be >= 1");
    if (c.delay < 1) throw DataError("wpe: delay must be >= 1");
    if (!(c.alpha > 0.0 && c.alpha < 1.0)) throw DataError("wpe: alpha outside (0,1)");
    if (c.psd_context < 0) throw DataError("wpe: negative psd_context");
}

/// Recursive least-squares update for a single frequency bin.
/// y: stacked context (taps*channels), x: current frame (channels),
/// power: floored channel-mean periodogram of the recent frames.
/// Returns the dereverberated frame values; updates inv_corr and filter.
inline Eigen::VectorXcd wpe_bin_step(const Eigen::VectorXcd& y, const Eigen::VectorXcd& x,
                                     double power, double alpha, Eigen::MatrixXcd& inv_corr,
                                     Eigen::MatrixXcd& filter) {
    if (y.squaredNorm() == 0.0) return x;  // no context information yet
    Eigen::VectorXcd pred = x - filter.adjoint() * y;
    Eigen::VectorXcd nominator = inv_corr * y;
    const double denominator = alpha * power + std::real(y.dot(nominator));
    if (denominator < kWpeDenomGuard) return pred;
    Eigen::VectorXcd kalman = nominator / denominator;
    Eigen::RowVectorXcd y_inv = y.adjoint() * inv_corr;
    inv_corr -= kalman * y_inv;
    inv_corr /= alpha;
    filter += kalman * pred.adjoint();
    return pred;
}

}  // namespace detail

/// Per-frequency recursive state. Frames enter via wpe_step; the buffer holds
/// the last taps+delay+1 frames so the stacked context starts delay+1 frames
/// back.
struct WpeState {
    WpeConfig config;
    Eigen::Index channels = 0;
    Eigen::Index freqs = 0;
    std::vector<Eigen::MatrixXcd> inv_corr;  // per freq, (taps*C) x (taps*C)
    std::vector<Eigen::MatrixXcd> filter;    // per freq, (taps*C) x C
    std::deque<Eigen::MatrixXcd> buffer;     // recent frames, each C x freqs, oldest first
};

inline WpeState wpe_init(const WpeConfig& config, Eigen::Index channels, Eigen::Index freqs) {
    detail::validate_wpe_config(config);
    if (channels < 1 || freqs < 1) throw DataError("wpe: need at least one channel and bin");
    WpeState s;
    s.config = config;
    s.channels = channels;
    s.freqs = freqs;
    const Eigen::Index kc = static_cast<Eigen::Index>(config.taps) * channels;
    s.inv_corr.assign(static_cast<std::size_t>(freqs),
                      Eigen::MatrixXcd::Identity(kc, kc) * kWpeInvCorrInit);
    s.filter.assign(static_cast<std::size_t>(freqs), Eigen::MatrixXcd::Zero(kc, channels));
    return s;
}

/// One STFT frame (channels x freqs) in, dereverberated frame out.
inline Eigen::MatrixXcd wpe_step(WpeState& state, const Eigen::MatrixXcd& frame) {
    if (frame.rows() != state.channels || frame.cols() != state.freqs)
        throw DataError("wpe_step: frame shape does not match state");
    if (!frame.allFinite()) throw DataError("wpe_step: non-finite input frame");

    const int taps = state.config.taps;
    const int delay = state.config.delay;
    state.buffer.push_back(frame);
    const auto needed = static_cast<std::size_t>(taps + delay + 1);
    while (state.buffer.size() > needed) state.buffer.pop_front();

    Eigen::MatrixXcd out(state.channels, state.freqs);
    const auto have = state.buffer.size();

    // power estimate across the most recent psd_context+1 frames
    Eigen::VectorXd power = Eigen::VectorXd::Zero(state.freqs);
    const auto ctx = std::min<std::size_t>(static_cast<std::size_t>(state.config.psd_context) + 1, have);
    for (std::size_t i = 0; i < ctx; ++i)
        power += state.buffer[have - 1 - i].cwiseAbs2().colwise().mean().transpose();
    power /= static_cast<double>(ctx);
    power = power.cwiseMax(kWpePowerFloor);

    Eigen::VectorXcd y(static_cast<Eigen::Index>(taps) * state.channels);
    for (Eigen::Index f = 0; f < state.freqs; ++f) {
        y.setZero();
        // context frames, most recent first: lags delay+1 .. delay+taps
        for (int k = 0; k < taps; ++k) {
            const long idx = static_cast<long>(have) - 1 - delay - 1 - k;
            if (idx < 0) continue;
            y.segment(static_cast<Eigen::Index>(k) * state.channels, state.channels) =
                state.buffer[static_cast<std::size_t>(idx)].col(f);
        }
        out.col(f) = detail::wpe_bin_step(y, frame.col(f), power(f), state.config.alpha,
                                          state.inv_corr[static_cast<std::size_t>(f)],
                                          state.filter[static_cast<std::size_t>(f)]);
    }
    return out;
}

/// STFT -> per-frame recursion -> iSTFT, parallel over frequency bins.
/// Identical arithmetic per bin to the wpe_step path.
inline MultichannelAudio wpe_process(const MultichannelAudio& audio, const WpeConfig& config = {}) {
    detail::validate_wpe_config(config);
    if (audio.channels() < 1) throw DataError("wpe_process: empty audio");
    if (!audio.samples.allFinite()) throw DataError("wpe_process: non-finite input");

    const int fft_size = 1024;
    const int shift = 256;
    Spectrogram spec = stft(audio, fft_size, shift);
    const Eigen::Index C = spec.channels();
    const Eigen::Index T = spec.frames();
    const Eigen::Index F = spec.freqs();
    const int taps = config.taps;
    const int delay = config.delay;

    // channel-mean periodogram per (frame, freq), shared across bins
    Eigen::MatrixXd power = Eigen::MatrixXd::Zero(T, F);
    for (Eigen::Index c = 0; c < C; ++c) power += spec.bins[static_cast<std::size_t>(c)].cwiseAbs2();
    power /= static_cast<double>(C);

    Spectrogram out = spec;
    const Eigen::Index kc = static_cast<Eigen::Index>(taps) * C;

    auto process_bin_range = [&](Eigen::Index f_begin, Eigen::Index f_end) {
        Eigen::MatrixXcd inv_corr(kc, kc), filter(kc, C);
        Eigen::VectorXcd y(kc), x(C);
        for (Eigen::Index f = f_begin; f < f_end; ++f) {
            inv_corr = Eigen::MatrixXcd::Identity(kc, kc) * kWpeInvCorrInit;
            filter.setZero();
            for (Eigen::Index t = 0; t < T; ++t) {
                y.setZero();
                for (int k = 0; k < taps; ++k) {
                    const Eigen::Index idx = t - delay - 1 - k;
                    if (idx < 0) continue;
                    for (Eigen::Index c = 0; c < C; ++c)
                        y(static_cast<Eigen::Index>(k) * C + c) = spec.bins[static_cast<std::size_t>(c)](idx, f);
                }
                for (Eigen::Index c = 0; c < C; ++c) x(c) = spec.bins[static_cast<std::size_t>(c)](t, f);

                double p = 0.0;
                const Eigen::Index ctx = std::min<Eigen::Index>(
                    std::min<Eigen::Index>(config.psd_context + 1, t + 1), taps + delay + 1);
                for (Eigen::Index i = 0; i < ctx; ++i) p += power(t - i, f);
                p = std::max(p / static_cast<double>(ctx), kWpePowerFloor);

                const Eigen::VectorXcd pred = detail::wpe_bin_step(y, x, p, config.alpha, inv_corr, filter);
                for (Eigen::Index c = 0; c < C; ++c) out.bins[static_cast<std::size_t>(c)](t, f) = pred(c);
            }
        }
    };

    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    const Eigen::Index n_workers = std::min<Eigen::Index>(static_cast<Eigen::Index>(hw), F);
    std::vector<std::thread> workers;
    const Eigen::Index chunk = (F + n_workers - 1) / n_workers;
    for (Eigen::Index w = 0; w < n_workers; ++w) {
        const Eigen::Index b = w * chunk;
        const Eigen::Index e = std::min(F, b + chunk);
        if (b >= e) break;
        workers.emplace_back(process_bin_range, b, e);
    }
    for (auto& t : workers) t.join();

    return istft(out);
}

}  // namespace farfield
