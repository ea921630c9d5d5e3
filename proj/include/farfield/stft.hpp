#pragma once

#include <Eigen/Dense>
#include <complex>
#include <vector>

#include "farfield/audio.hpp"
#include "farfield/fft.hpp"

namespace farfield {

enum class Window { SqrtHann, Hann, Rectangular };

/// Periodic window of length n.
inline std::vector<double> window_values(Window type, int n) {
    std::vector<double> w(static_cast<std::size_t>(n), 1.0);
    if (type == Window::Rectangular) return w;
    for (int i = 0; i < n; ++i) {
        double h = 0.5 * (1.0 - std::cos(2.0 * kPi * i / n));
        w[static_cast<std::size_t>(i)] = (type == Window::SqrtHann) ? std::sqrt(h) : h;
    }
    return w;
}

/// Complex one-sided STFT tensor, one frames x freqs matrix per channel.
/// Frames are centered: frame t covers sample t*frame_shift at its midpoint,
/// with fft_size/2 zeros prepended and the tail frame zero-padded.
struct Spectrogram {
    std::vector<Eigen::MatrixXcd> bins;  // per channel: frames x freqs
    int frame_shift = 0;                 // samples
    int fft_size = 0;                    // samples
    int sample_rate = 0;
    Eigen::Index num_samples = 0;  // original signal length, for inversion

    int channels() const { return static_cast<int>(bins.size()); }
    Eigen::Index frames() const { return bins.empty() ? 0 : bins[0].rows(); }
    Eigen::Index freqs() const { return bins.empty() ? 0 : bins[0].cols(); }
    double frame_shift_sec() const {
        return sample_rate > 0 ? static_cast<double>(frame_shift) / sample_rate : 0.0;
    }
};

/// Number of centered STFT frames covering n samples.
inline Eigen::Index stft_num_frames(Eigen::Index n, int frame_shift) {
    return (n + frame_shift - 1) / frame_shift + 1;
}

inline Spectrogram stft(const MultichannelAudio& audio, int fft_size, int frame_shift,
                        Window window = Window::SqrtHann) {
    if (audio.num_samples() == 0 || audio.channels() == 0) throw DataError("stft: empty audio");
    if (!is_power_of_two(static_cast<std::size_t>(fft_size)))
        throw DataError("stft: fft_size must be a power of two");
    if (frame_shift <= 0 || frame_shift > fft_size)
        throw DataError("stft: need 0 < frame_shift <= fft_size");

    const Eigen::Index n = audio.num_samples();
    const Eigen::Index frames = stft_num_frames(n, frame_shift);
    const Eigen::Index freqs = fft_size / 2 + 1;
    const Eigen::Index pad_left = fft_size / 2;
    const std::vector<double> win = window_values(window, fft_size);

    Spectrogram spec;
    spec.frame_shift = frame_shift;
    spec.fft_size = fft_size;
    spec.sample_rate = audio.sample_rate;
    spec.num_samples = n;
    spec.bins.resize(static_cast<std::size_t>(audio.channels()));

    std::vector<std::complex<double>> frame(static_cast<std::size_t>(fft_size));
    for (int c = 0; c < audio.channels(); ++c) {
        Eigen::MatrixXcd& out = spec.bins[static_cast<std::size_t>(c)];
        out.resize(frames, freqs);
        for (Eigen::Index t = 0; t < frames; ++t) {
            const Eigen::Index start = t * frame_shift - pad_left;
            for (int i = 0; i < fft_size; ++i) {
                const Eigen::Index s = start + i;
                const double x = (s >= 0 && s < n) ? audio.samples(c, s) : 0.0;
                frame[static_cast<std::size_t>(i)] = x * win[static_cast<std::size_t>(i)];
            }
            fft_inplace(frame);
            for (Eigen::Index k = 0; k < freqs; ++k) out(t, k) = frame[static_cast<std::size_t>(k)];
        }
    }
    return spec;
}

/// Overlap-add inverse, normalized by the window overlap sum and trimmed to
/// the stored original length.
inline MultichannelAudio istft(const Spectrogram& spec, Window window = Window::SqrtHann) {
    if (spec.frames() == 0 || spec.channels() == 0) throw DataError("istft: zero frames");
    const int fft_size = spec.fft_size;
    const int shift = spec.frame_shift;
    if (!is_power_of_two(static_cast<std::size_t>(fft_size)) || shift <= 0 || shift > fft_size)
        throw DataError("istft: inconsistent fft_size/frame_shift");
    if (spec.freqs() != fft_size / 2 + 1) throw DataError("istft: freqs != fft_size/2 + 1");

    const Eigen::Index frames = spec.frames();
    const Eigen::Index pad_left = fft_size / 2;
    const Eigen::Index padded_len = (frames - 1) * shift + fft_size;
    const std::vector<double> win = window_values(window, fft_size);

    Eigen::VectorXd wsum = Eigen::VectorXd::Zero(padded_len);
    for (Eigen::Index t = 0; t < frames; ++t)
        for (int i = 0; i < fft_size; ++i)
            wsum(t * shift + i) += win[static_cast<std::size_t>(i)] * win[static_cast<std::size_t>(i)];

    MultichannelAudio audio;
    audio.sample_rate = spec.sample_rate;
    audio.samples = Eigen::MatrixXd::Zero(spec.channels(), spec.num_samples);

    std::vector<std::complex<double>> frame(static_cast<std::size_t>(fft_size));
    Eigen::VectorXd acc(padded_len);
    for (int c = 0; c < spec.channels(); ++c) {
        acc.setZero();
        const Eigen::MatrixXcd& in = spec.bins[static_cast<std::size_t>(c)];
        for (Eigen::Index t = 0; t < frames; ++t) {
            for (Eigen::Index k = 0; k <= fft_size / 2; ++k)
                frame[static_cast<std::size_t>(k)] = in(t, k);
            for (Eigen::Index k = fft_size / 2 + 1; k < fft_size; ++k)
                frame[static_cast<std::size_t>(k)] = std::conj(in(t, fft_size - k));
            fft_inplace(frame, true);
            for (int i = 0; i < fft_size; ++i)
                acc(t * shift + i) += win[static_cast<std::size_t>(i)] * frame[static_cast<std::size_t>(i)].real();
        }
        for (Eigen::Index s = 0; s < spec.num_samples; ++s) {
            const double d = wsum(pad_left + s);
            audio.samples(c, s) = d > 1e-12 ? acc(pad_left + s) / d : 0.0;
        }
    }
    return audio;
}

}  // namespace farfield
