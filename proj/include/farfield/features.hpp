#pragma once

#include <Eigen/Dense>

#include "farfield/stft.hpp"

namespace farfield {

/// Real feature rows on a fixed frame grid.
struct FeatureMatrix {
    Eigen::MatrixXd rows;  // frames x dims
    double frame_shift_sec = 0.0;

    Eigen::Index frames() const { return rows.rows(); }
    Eigen::Index dims() const { return rows.cols(); }
};

namespace detail {

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular mel filterbank, num_mels x (fft_size/2 + 1), spanning 0..Nyquist.
inline Eigen::MatrixXd mel_filterbank(int num_mels, int fft_size, int sample_rate) {
    const int freqs = fft_size / 2 + 1;
    const double mel_max = hz_to_mel(sample_rate / 2.0);
    Eigen::VectorXd edges(num_mels + 2);
    for (int i = 0; i < num_mels + 2; ++i)
        edges(i) = mel_to_hz(mel_max * i / (num_mels + 1));
    Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(num_mels, freqs);
    for (int m = 0; m < num_mels; ++m) {
        const double lo = edges(m), mid = edges(m + 1), hi = edges(m + 2);
        for (int k = 0; k < freqs; ++k) {
            const double f = static_cast<double>(k) * sample_rate / fft_size;
            if (f > lo && f <= mid)
                fb(m, k) = (f - lo) / (mid - lo);
            else if (f > mid && f < hi)
                fb(m, k) = (hi - f) / (hi - mid);
        }
    }
    return fb;
}

}  // namespace detail

constexpr double kMelFloor = 1e-10;

/// Log-mel filterbank energies of a single-channel signal. Natural log of
/// floored mel energies, frames on the centered STFT grid.
inline FeatureMatrix logmel(const MultichannelAudio& audio, int num_mels, int fft_size,
                            int frame_shift) {
    if (num_mels < 1) throw DataError("logmel: num_mels < 1");
    if (audio.channels() != 1) throw DataError("logmel: expects a single channel");
    const Spectrogram spec = stft(audio, fft_size, frame_shift, Window::SqrtHann);
    const Eigen::MatrixXd fb = detail::mel_filterbank(num_mels, fft_size, audio.sample_rate);

    FeatureMatrix feats;
    feats.frame_shift_sec = spec.frame_shift_sec();
    feats.rows.resize(spec.frames(), num_mels);
    const Eigen::MatrixXcd& bins = spec.bins[0];
    Eigen::VectorXd power(spec.freqs());
    for (Eigen::Index t = 0; t < spec.frames(); ++t) {
        for (Eigen::Index k = 0; k < spec.freqs(); ++k) power(k) = std::norm(bins(t, k));
        Eigen::VectorXd mel = fb * power;
        for (int m = 0; m < num_mels; ++m)
            feats.rows(t, m) = std::log(std::max(mel(m), kMelFloor));
    }
    return feats;
}

}  // namespace farfield
