#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "farfield/audio.hpp"
#include "farfield/common.hpp"
#include "farfield/fft.hpp"
#include "farfield/metrics.hpp"

namespace farfield {

/// Localized loud-noise interval on one array, used to build scenes where
/// arrays are corrupted at different times.
struct NoiseBurst {
    int array = 0;
    double onset_sec = 0.0;
    double duration_sec = 0.0;
    double snr_db = -12.0;  // burst level relative to overall speech RMS
};

struct SceneSpec {
    int num_speakers = 2;
    int num_arrays = 2;
    int channels_per_array = 4;
    double duration_sec = 20.0;
    int sample_rate = 16000;
    double overlap_ratio = 0.0;
    double snr_db = 30.0;
    double reverb_t60_sec = 0.0;
    std::uint64_t seed = 0;
    std::string recording_id = "scene";
    std::vector<NoiseBurst> noise_bursts;
};

/// Ground truth kept alongside the rendered arrays: dry per-speaker signals,
/// the geometry (integer sample delays and gains), the shared reverb tails,
/// the reference RTTM and a 10 ms overlap mask.
struct SceneTruth {
    Rttm rttm;
    std::vector<std::vector<double>> dry;                // [speaker][sample]
    std::vector<std::vector<std::vector<int>>> delays;   // [speaker][array][channel]
    std::vector<std::vector<double>> gains;              // [speaker][array]
    std::vector<std::vector<std::vector<double>>> late;  // [speaker][array], channel-shared, unscaled
    std::vector<char> overlap_mask_10ms;
    int sample_rate = 16000;
    Eigen::Index num_samples = 0;

    /// Direct-path rendering of one speaker at one array (delayed, scaled).
    MultichannelAudio direct_source_image(int s, int a) const {
        const auto& d = delays[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)];
        MultichannelAudio out;
        out.sample_rate = sample_rate;
        out.samples = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d.size()), num_samples);
        const auto& x = dry[static_cast<std::size_t>(s)];
        const double g = gains[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)];
        for (std::size_t c = 0; c < d.size(); ++c) {
            const int dl = d[c];
            for (Eigen::Index t = 0; t < num_samples; ++t) {
                const Eigen::Index src = t - dl;
                if (src >= 0 && src < static_cast<Eigen::Index>(x.size()))
                    out.samples(static_cast<Eigen::Index>(c), t) = g * x[static_cast<std::size_t>(src)];
            }
        }
        return out;
    }

    /// Sum of all speakers' direct paths at one array.
    MultichannelAudio direct_image(int a) const {
        MultichannelAudio out;
        for (std::size_t s = 0; s < dry.size(); ++s) {
            MultichannelAudio one = direct_source_image(static_cast<int>(s), a);
            if (s == 0)
                out = std::move(one);
            else
                out.samples += one.samples;
        }
        return out;
    }

    /// Scaled sum of reverb tails at one array (identical on every channel).
    std::vector<double> late_image(int a) const {
        std::vector<double> out(static_cast<std::size_t>(num_samples), 0.0);
        for (std::size_t s = 0; s < dry.size(); ++s) {
            if (late.empty() || late[s].empty() || late[s][static_cast<std::size_t>(a)].empty()) continue;
            const auto& l = late[s][static_cast<std::size_t>(a)];
            const double g = gains[s][static_cast<std::size_t>(a)];
            for (std::size_t t = 0; t < out.size() && t < l.size(); ++t) out[t] += g * l[t];
        }
        return out;
    }
};

namespace detail {

/// Two-pole resonator, output RMS left to the caller.
inline std::vector<double> resonate(const std::vector<double>& x, double freq_hz, double bw_hz,
                                    int sample_rate) {
    const double r = std::exp(-kPi * bw_hz / sample_rate);
    const double c = 2.0 * r * std::cos(2.0 * kPi * freq_hz / sample_rate);
    const double r2 = r * r;
    std::vector<double> y(x.size(), 0.0);
    double y1 = 0.0, y2 = 0.0;
    for (std::size_t t = 0; t < x.size(); ++t) {
        const double v = x[t] + c * y1 - r2 * y2;
        y[t] = v;
        y2 = y1;
        y1 = v;
    }
    return y;
}

/// One utterance: modulated noise through three formant-like resonators,
/// faded at the edges, normalized to a fixed RMS.
inline std::vector<double> synth_utterance(Rng& rng, std::size_t n, const double formants[3],
                                           int sample_rate) {
    std::vector<double> noise(n);
    for (auto& v : noise) v = rng.normal();

    const double syl_hz = rng.uniform(2.5, 4.5);
    const double phase = rng.uniform(0.0, 2.0 * kPi);
    for (std::size_t t = 0; t < n; ++t) {
        const double env =
            0.55 + 0.45 * std::sin(2.0 * kPi * syl_hz * static_cast<double>(t) / sample_rate + phase);
        noise[t] *= env;
    }

    static const double weights[3] = {1.0, 0.6, 0.3};
    std::vector<double> out(n, 0.0);
    for (int k = 0; k < 3; ++k) {
        std::vector<double> y = resonate(noise, formants[k], 150.0, sample_rate);
        for (std::size_t t = 0; t < n; ++t) out[t] += weights[k] * y[t];
    }

    const auto fade = static_cast<std::size_t>(0.01 * sample_rate);
    for (std::size_t t = 0; t < fade && t < n; ++t) {
        const double w = 0.5 - 0.5 * std::cos(kPi * static_cast<double>(t) / static_cast<double>(fade));
        out[t] *= w;
        out[n - 1 - t] *= w;
    }

    double rms = 0.0;
    for (double v : out) rms += v * v;
    rms = std::sqrt(rms / static_cast<double>(n));
    const double target = 0.08;
    if (rms > 1e-12)
        for (auto& v : out) v *= target / rms;
    return out;
}

/// Union time (any speaker) and overlapped time (two or more) of a schedule.
inline std::pair<double, double> speech_union_overlap(const std::vector<RttmRecord>& utts) {
    std::vector<std::pair<double, int>> events;
    for (const auto& u : utts) {
        events.push_back({u.onset, +1});
        events.push_back({u.onset + u.duration, -1});
    }
    std::sort(events.begin(), events.end());
    double uni = 0.0, ov = 0.0, prev = 0.0;
    int active = 0;
    for (const auto& [t, d] : events) {
        if (active >= 1) uni += t - prev;
        if (active >= 2) ov += t - prev;
        active += d;
        prev = t;
    }
    return {uni, ov};
}

/// Turn-taking with exponential gaps; a feedback term steers the measured
/// overlapped fraction toward the requested ratio.
inline std::vector<RttmRecord> schedule_turns(Rng& rng, const SceneSpec& spec) {
    std::vector<RttmRecord> utts;
    std::vector<double> last_end(static_cast<std::size_t>(spec.num_speakers), -1.0);
    int prev_spk = -1;
    double prev_end = 0.0, prev_dur = 0.0;

    while (true) {
        double dur = rng.uniform(1.2, 2.8);
        int spk = 0;
        if (spec.num_speakers > 1) {
            if (prev_spk < 0) {
                spk = static_cast<int>(rng.uniform_int(0, spec.num_speakers - 1));
            } else {
                spk = static_cast<int>(rng.uniform_int(0, spec.num_speakers - 2));
                if (spk >= prev_spk) ++spk;
            }
        }

        double onset;
        if (utts.empty()) {
            onset = rng.exponential(0.3);
        } else {
            const auto [uni, ov] = speech_union_overlap(utts);
            const double deficit = spec.overlap_ratio * uni - ov;
            if (deficit > 0.01) {
                const double o = std::min(deficit + 0.2, 0.85 * std::min(dur, prev_dur));
                onset = prev_end - o;
            } else {
                onset = prev_end + rng.exponential(0.5);
            }
        }
        onset = std::max(onset, 0.0);
        onset = std::max(onset, last_end[static_cast<std::size_t>(spk)] + 0.05);
        if (onset + 0.4 > spec.duration_sec) break;
        dur = std::min(dur, spec.duration_sec - onset);

        utts.push_back({spec.recording_id, onset, dur, "spk" + std::to_string(spk)});
        last_end[static_cast<std::size_t>(spk)] = onset + dur;
        prev_end = std::max(prev_end, onset + dur);
        prev_dur = dur;
        prev_spk = spk;
        if (prev_end > spec.duration_sec - 0.6) break;
    }
    return utts;
}

}  // namespace detail

/// Renders a seeded synthetic scene: per-speaker filtered-noise sources with
/// a controlled-overlap schedule, integer geometry delays per channel, an
/// optional exponential-decay reverb tail per speaker and array, and diffuse
/// Gaussian noise at the requested SNR.
inline std::pair<std::vector<MultichannelAudio>, SceneTruth> simulate_scene(const SceneSpec& spec) {
    if (spec.num_speakers < 1 || spec.num_speakers > 16)
        throw DataError("simulate_scene: num_speakers out of range");
    if (spec.num_speakers < 2 && spec.overlap_ratio > 0.0)
        throw DataError("simulate_scene: overlap requires at least two speakers");
    if (spec.overlap_ratio < 0.0 || spec.overlap_ratio >= 1.0)
        throw DataError("simulate_scene: overlap_ratio outside [0,1)");
    if (spec.num_arrays < 1 || spec.channels_per_array < 1)
        throw DataError("simulate_scene: need at least one array and channel");
    if (spec.duration_sec <= 0.0 || spec.sample_rate <= 0)
        throw DataError("simulate_scene: non-positive duration or sample rate");
    if (spec.reverb_t60_sec < 0.0) throw DataError("simulate_scene: negative reverb time");

    Rng rng(spec.seed);
    const auto n_total = static_cast<std::size_t>(std::llround(spec.duration_sec * spec.sample_rate));
    const auto S = static_cast<std::size_t>(spec.num_speakers);
    const auto A = static_cast<std::size_t>(spec.num_arrays);
    const auto C = static_cast<std::size_t>(spec.channels_per_array);

    std::vector<std::array<double, 3>> formants(S);
    for (auto& f : formants) {
        f[0] = rng.uniform(250.0, 800.0);
        f[1] = rng.uniform(900.0, 2000.0);
        f[2] = rng.uniform(2100.0, 3300.0);
    }

    SceneTruth truth;
    truth.sample_rate = spec.sample_rate;
    truth.num_samples = static_cast<Eigen::Index>(n_total);
    std::vector<RttmRecord> utts = detail::schedule_turns(rng, spec);
    truth.rttm.records = utts;

    truth.dry.assign(S, std::vector<double>(n_total, 0.0));
    for (const auto& u : utts) {
        const int s = std::stoi(u.speaker.substr(3));
        const auto start = static_cast<std::size_t>(std::llround(u.onset * spec.sample_rate));
        auto len = static_cast<std::size_t>(std::llround(u.duration * spec.sample_rate));
        len = std::min(len, n_total - start);
        std::vector<double> sig =
            detail::synth_utterance(rng, len, formants[static_cast<std::size_t>(s)].data(), spec.sample_rate);
        for (std::size_t t = 0; t < len; ++t) truth.dry[static_cast<std::size_t>(s)][start + t] += sig[t];
    }

    truth.delays.assign(S, std::vector<std::vector<int>>(A, std::vector<int>(C, 0)));
    truth.gains.assign(S, std::vector<double>(A, 1.0));
    for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t a = 0; a < A; ++a) {
            for (std::size_t c = 1; c < C; ++c)
                truth.delays[s][a][c] = static_cast<int>(rng.uniform_int(-8, 8));
            truth.gains[s][a] = rng.uniform(0.6, 1.0);
        }
    }

    if (spec.reverb_t60_sec > 0.0) {
        const auto tail_len =
            static_cast<std::size_t>(std::llround(1.2 * spec.reverb_t60_sec * spec.sample_rate));
        const auto tail_start = static_cast<std::size_t>(std::llround(0.08 * spec.sample_rate));
        truth.late.assign(S, std::vector<std::vector<double>>(A));
        for (std::size_t s = 0; s < S; ++s) {
            for (std::size_t a = 0; a < A; ++a) {
                std::vector<double> tail(tail_len, 0.0);
                double energy = 0.0;
                for (std::size_t i = tail_start; i < tail_len; ++i) {
                    const double t = static_cast<double>(i) / spec.sample_rate;
                    tail[i] = rng.normal() * std::pow(10.0, -3.0 * t / spec.reverb_t60_sec);
                    energy += tail[i] * tail[i];
                }
                if (energy > 1e-30) {
                    const double scale = 1.0 / std::sqrt(energy);
                    for (auto& v : tail) v *= scale;
                }
                std::vector<double> conv = fft_convolve(truth.dry[s], tail);
                conv.resize(n_total);
                truth.late[s][a] = std::move(conv);
            }
        }
    }

    std::vector<MultichannelAudio> arrays(A);
    double image_energy = 0.0;
    std::size_t image_count = 0;
    for (std::size_t a = 0; a < A; ++a) {
        arrays[a].sample_rate = spec.sample_rate;
        arrays[a].samples = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(C),
                                                  static_cast<Eigen::Index>(n_total));
        MultichannelAudio direct = truth.direct_image(static_cast<int>(a));
        arrays[a].samples = direct.samples;
        if (spec.reverb_t60_sec > 0.0) {
            std::vector<double> lt = truth.late_image(static_cast<int>(a));
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t t = 0; t < n_total; ++t)
                    arrays[a].samples(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(t)) += lt[t];
        }
        image_energy += arrays[a].samples.squaredNorm();
        image_count += C * n_total;
    }
    const double image_rms = std::sqrt(image_energy / static_cast<double>(std::max<std::size_t>(image_count, 1)));

    const double noise_sigma = image_rms * std::pow(10.0, -spec.snr_db / 20.0);
    for (std::size_t a = 0; a < A; ++a)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t t = 0; t < n_total; ++t)
                arrays[a].samples(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(t)) +=
                    noise_sigma * rng.normal();

    for (const NoiseBurst& b : spec.noise_bursts) {
        if (b.array < 0 || b.array >= spec.num_arrays)
            throw DataError("simulate_scene: noise burst on missing array");
        const double amp = image_rms * std::pow(10.0, -b.snr_db / 20.0);
        const auto lo = static_cast<std::size_t>(
            std::max<long long>(0, std::llround(b.onset_sec * spec.sample_rate)));
        const auto hi = std::min(
            n_total, static_cast<std::size_t>(std::max<long long>(
                         0, std::llround((b.onset_sec + b.duration_sec) * spec.sample_rate))));
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t t = lo; t < hi; ++t)
                arrays[static_cast<std::size_t>(b.array)].samples(static_cast<Eigen::Index>(c),
                                                                  static_cast<Eigen::Index>(t)) +=
                    amp * rng.normal();
    }

    const auto frames = static_cast<std::size_t>(std::ceil(spec.duration_sec / 0.01) + 0.5);
    truth.overlap_mask_10ms.assign(frames, 0);
    for (std::size_t t = 0; t < frames; ++t) {
        const double center = (static_cast<double>(t) + 0.5) * 0.01;
        int active = 0;
        for (const auto& u : utts)
            if (center >= u.onset && center < u.onset + u.duration) ++active;
        if (active >= 2) truth.overlap_mask_10ms[t] = 1;
    }

    return {std::move(arrays), std::move(truth)};
}

}  // namespace farfield
