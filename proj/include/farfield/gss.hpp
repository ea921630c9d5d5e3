#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "farfield/audio.hpp"
#include "farfield/common.hpp"
#include "farfield/segments.hpp"
#include "farfield/stft.hpp"

namespace farfield {

constexpr double kGssContextSec = 20.0;
constexpr int kGssEmIters = 20;
constexpr double kGssShapeLoading = 1e-10;

/// Per-class frame activity over a recording. Class indices follow the sorted
/// speaker list; the last class is an always-on noise class. The region marks
/// the frame span (target utterance plus context) used for statistics.
struct ActivityPattern {
    Eigen::Matrix<char, Eigen::Dynamic, Eigen::Dynamic> active;  // classes x frames
    std::vector<std::string> speakers;
    int target_class = 0;
    Eigen::Index region_begin = 0;
    Eigen::Index region_end = 0;
    double region_onset_sec = 0.0;
    double region_end_sec = 0.0;

    Eigen::Index classes() const { return active.rows(); }
    Eigen::Index frames() const { return active.cols(); }
    int noise_class() const { return static_cast<int>(classes()) - 1; }

    ActivityPattern slice_region() const {
        ActivityPattern out = *this;
        out.active = active.middleCols(region_begin, region_end - region_begin).eval();
        out.region_begin = 0;
        out.region_end = out.active.cols();
        return out;
    }
};

/// Mixture parameters: one Hermitian shape matrix per (frequency, class) and
/// frame-wise class weights shared across frequency.
struct CacgmmParams {
    std::vector<std::vector<Eigen::MatrixXcd>> shape;  // [freq][class], D x D
    Eigen::MatrixXd weights;                           // frames x classes
};

struct TfMask {
    std::vector<Eigen::MatrixXd> gamma;  // per class: frames x freqs

    Eigen::Index classes() const { return static_cast<Eigen::Index>(gamma.size()); }
    Eigen::Index frames() const { return gamma.empty() ? 0 : gamma[0].rows(); }
    Eigen::Index freqs() const { return gamma.empty() ? 0 : gamma[0].cols(); }
};

struct CacgmmResult {
    CacgmmParams params;
    TfMask mask;
    std::vector<double> log_lik;  // one entry per E-step, final params last
};

/// Activity for enhancing one utterance: the processed region extends the
/// utterance by context_sec on each side, clipped to the recording. Frames are
/// active when their center sample falls inside a segment of that speaker.
inline ActivityPattern build_activity(const std::vector<Segment>& segments,
                                      const Segment& utterance, Eigen::Index num_frames,
                                      int frame_shift, int sample_rate,
                                      double context_sec = kGssContextSec) {
    if (num_frames <= 0 || frame_shift <= 0 || sample_rate <= 0)
        throw DataError("build_activity: need positive frame count, shift and rate");
    if (!(context_sec >= 0.0)) throw DataError("build_activity: negative context");
    bool found = false;
    std::set<std::string> labels;
    for (const Segment& s : segments) {
        if (s.duration <= 0.0) throw DataError("build_activity: non-positive segment duration");
        labels.insert(s.label);
        if (s.label == utterance.label && std::abs(s.onset - utterance.onset) < 1e-6 &&
            std::abs(s.duration - utterance.duration) < 1e-6)
            found = true;
    }
    if (!found) throw DataError("build_activity: target utterance not in segment list");

    ActivityPattern act;
    act.speakers.assign(labels.begin(), labels.end());
    const auto spk_index = [&act](const std::string& label) {
        return static_cast<int>(std::lower_bound(act.speakers.begin(), act.speakers.end(), label) -
                                act.speakers.begin());
    };
    act.target_class = spk_index(utterance.label);

    const double fs = sample_rate;
    const auto total_samples = num_frames * static_cast<Eigen::Index>(frame_shift);
    const auto region_on =
        std::max<Eigen::Index>(0, std::llround((utterance.onset - context_sec) * fs));
    const auto region_off =
        std::min(total_samples, static_cast<Eigen::Index>(std::llround((utterance.end() + context_sec) * fs)));
    act.region_onset_sec = static_cast<double>(region_on) / fs;
    act.region_end_sec = static_cast<double>(region_off) / fs;
    act.region_begin = (region_on + frame_shift - 1) / frame_shift;
    act.region_end = std::min(num_frames, (region_off + frame_shift - 1) / frame_shift);
    if (act.region_end <= act.region_begin)
        throw DataError("build_activity: empty processed region");

    const auto num_classes = static_cast<Eigen::Index>(act.speakers.size()) + 1;
    act.active.setZero(num_classes, num_frames);
    act.active.row(num_classes - 1).setOnes();
    for (const Segment& s : segments) {
        const auto on = static_cast<Eigen::Index>(std::llround(s.onset * fs));
        const auto off = static_cast<Eigen::Index>(std::llround(s.end() * fs));
        Eigen::Index lo = (on + frame_shift - 1) / frame_shift;
        Eigen::Index hi = std::min(num_frames, (off + frame_shift - 1) / frame_shift);
        const int row = spk_index(s.label);
        for (Eigen::Index t = std::max<Eigen::Index>(0, lo); t < hi; ++t) act.active(row, t) = 1;
    }
    return act;
}

namespace detail {

inline void validate_cacgmm_inputs(const Spectrogram& spec, const ActivityPattern& activity,
                                   int iters) {
    if (spec.channels() < 2) throw DataError("cacgmm: need at least two stacked channels");
    if (iters < 1) throw DataError("cacgmm: need at least one iteration");
    if (activity.frames() != spec.frames())
        throw DataError("cacgmm: activity frame count does not match spectrogram");
    if (activity.classes() < 2) throw DataError("cacgmm: need a speaker class plus noise");
    for (const Eigen::MatrixXcd& m : spec.bins)
        if (!m.allFinite()) throw DataError("cacgmm: non-finite spectrogram");
    for (Eigen::Index t = 0; t < activity.frames(); ++t)
        if (activity.active.col(t).maxCoeff() == 0)
            throw DataError("cacgmm: frame with no active class");
}

/// Hermitian inverse and log-determinant via Cholesky.
inline void hermitian_inverse(const Eigen::MatrixXcd& m, Eigen::MatrixXcd& inv, double& logdet) {
    Eigen::LLT<Eigen::MatrixXcd> llt(m);
    if (llt.info() != Eigen::Success) {
        Eigen::MatrixXcd loaded = m;
        loaded.diagonal().array() += kGssShapeLoading * (std::abs(m.trace()) / m.rows() + 1.0);
        llt.compute(loaded);
        if (llt.info() != Eigen::Success) throw DataError("cacgmm: shape matrix not positive definite");
    }
    inv = llt.solve(Eigen::MatrixXcd::Identity(m.rows(), m.cols()));
    logdet = 0.0;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        logdet += 2.0 * std::log(std::real(llt.matrixLLT()(i, i)));
}

}  // namespace detail

/// Complex angular-central-Gaussian mixture EM over unit-normalized
/// observations, one mixture per frequency bin. Class weights are time-varying
/// but shared across frequency and masked by the activity pattern, which ties
/// the per-bin mixtures together and resolves their permutation.
inline CacgmmResult cacgmm_em(const Spectrogram& spec, const ActivityPattern& activity,
                              int iters = kGssEmIters) {
    detail::validate_cacgmm_inputs(spec, activity, iters);
    const int dim = spec.channels();
    const Eigen::Index frames = spec.frames();
    const Eigen::Index freqs = spec.freqs();
    const Eigen::Index num_classes = activity.classes();
    const double ddim = static_cast<double>(dim);

    CacgmmResult result;
    result.params.shape.assign(
        static_cast<std::size_t>(freqs),
        std::vector<Eigen::MatrixXcd>(static_cast<std::size_t>(num_classes),
                                      Eigen::MatrixXcd::Identity(dim, dim)));
    Eigen::MatrixXd& pi = result.params.weights;
    pi.setZero(frames, num_classes);
    for (Eigen::Index t = 0; t < frames; ++t) {
        double act = 0.0;
        for (Eigen::Index k = 0; k < num_classes; ++k) act += activity.active(k, t) != 0 ? 1.0 : 0.0;
        for (Eigen::Index k = 0; k < num_classes; ++k)
            if (activity.active(k, t) != 0) pi(t, k) = 1.0 / act;
    }

    result.mask.gamma.assign(static_cast<std::size_t>(num_classes),
                             Eigen::MatrixXd::Zero(frames, freqs));

    Eigen::MatrixXcd z(dim, frames);
    Eigen::MatrixXcd work(dim, frames);
    Eigen::MatrixXd log_post(frames, num_classes);
    Eigen::MatrixXd quad(frames, num_classes);
    Eigen::MatrixXd pi_acc(frames, num_classes);
    std::vector<Eigen::MatrixXcd> shape_inv(static_cast<std::size_t>(num_classes));
    std::vector<double> shape_logdet(static_cast<std::size_t>(num_classes));
    std::vector<char> zero_frame(static_cast<std::size_t>(frames));

    for (int iter = 0; iter <= iters; ++iter) {
        const bool final_pass = iter == iters;
        pi_acc.setZero();
        double ll = 0.0;
        for (Eigen::Index f = 0; f < freqs; ++f) {
            for (Eigen::Index t = 0; t < frames; ++t) {
                double norm2 = 0.0;
                for (int c = 0; c < dim; ++c) {
                    const std::complex<double> v =
                        spec.bins[static_cast<std::size_t>(c)](t, f);
                    z(c, t) = v;
                    norm2 += std::norm(v);
                }
                zero_frame[static_cast<std::size_t>(t)] = norm2 < 1e-30 ? 1 : 0;
                if (norm2 >= 1e-30) z.col(t) /= std::sqrt(norm2);
            }
            auto& shapes = result.params.shape[static_cast<std::size_t>(f)];
            for (Eigen::Index k = 0; k < num_classes; ++k)
                detail::hermitian_inverse(shapes[static_cast<std::size_t>(k)],
                                          shape_inv[static_cast<std::size_t>(k)],
                                          shape_logdet[static_cast<std::size_t>(k)]);

            for (Eigen::Index k = 0; k < num_classes; ++k) {
                work.noalias() = shape_inv[static_cast<std::size_t>(k)] * z;
                for (Eigen::Index t = 0; t < frames; ++t) {
                    const double q =
                        std::max(1e-12, std::real(z.col(t).dot(work.col(t))));
                    quad(t, k) = q;
                    double lp = pi(t, k) > 0.0 ? std::log(pi(t, k)) : -1e300;
                    if (zero_frame[static_cast<std::size_t>(t)] == 0)
                        lp += -shape_logdet[static_cast<std::size_t>(k)] - ddim * std::log(q);
                    log_post(t, k) = lp;
                }
            }
            for (Eigen::Index t = 0; t < frames; ++t) {
                const double mx = log_post.row(t).maxCoeff();
                double sum = 0.0;
                for (Eigen::Index k = 0; k < num_classes; ++k)
                    sum += std::exp(log_post(t, k) - mx);
                ll += mx + std::log(sum);
                for (Eigen::Index k = 0; k < num_classes; ++k) {
                    const double g = std::exp(log_post(t, k) - mx) / sum;
                    log_post(t, k) = g;
                    pi_acc(t, k) += g;
                    if (final_pass) result.mask.gamma[static_cast<std::size_t>(k)](t, f) = g;
                }
            }
            if (final_pass) continue;
            for (Eigen::Index k = 0; k < num_classes; ++k) {
                double mass = 0.0;
                for (Eigen::Index t = 0; t < frames; ++t) mass += log_post(t, k);
                if (mass < 1e-30) continue;
                for (Eigen::Index t = 0; t < frames; ++t)
                    work.col(t) = z.col(t) * (log_post(t, k) / quad(t, k));
                Eigen::MatrixXcd updated = (work * z.adjoint()) * (ddim / mass);
                updated = (updated + updated.adjoint().eval()) * 0.5;
                const double tr = std::real(updated.trace());
                if (tr > 1e-300) updated *= ddim / tr;
                updated.diagonal().array() += kGssShapeLoading;
                shapes[static_cast<std::size_t>(k)] = updated;
            }
        }
        result.log_lik.push_back(ll);
        if (final_pass) break;
        for (Eigen::Index t = 0; t < frames; ++t) {
            double sum = 0.0;
            for (Eigen::Index k = 0; k < num_classes; ++k) {
                double w = activity.active(k, t) != 0 ? pi_acc(t, k) / freqs : 0.0;
                pi(t, k) = w;
                sum += w;
            }
            if (sum > 0.0)
                pi.row(t) /= sum;
            else
                for (Eigen::Index k = 0; k < num_classes; ++k)
                    pi(t, k) = activity.active(k, t) != 0 ? 1.0 : 0.0;
        }
    }
    return result;
}

struct MvdrResult {
    Spectrogram out;
    int ref_channel = 0;
    bool fallback = false;
};

/// Mask-based MVDR: per frequency, target and interference-plus-noise
/// covariances are mask-weighted outer products, and the filter is the
/// reference column of inv(Phi_n) * Phi_t scaled by its trace. Bins where that
/// construction degenerates fall back to masking the reference channel.
inline MvdrResult mvdr_extract(const Spectrogram& spec, const Eigen::MatrixXd& target_mask,
                               int ref_channel = -1) {
    const int dim = spec.channels();
    if (dim < 1) throw DataError("mvdr: empty spectrogram");
    if (target_mask.rows() != spec.frames() || target_mask.cols() != spec.freqs())
        throw DataError("mvdr: mask shape does not match spectrogram");
    if (target_mask.minCoeff() < -1e-9 || target_mask.maxCoeff() > 1.0 + 1e-9)
        throw DataError("mvdr: mask entries outside [0, 1]");
    const Eigen::Index frames = spec.frames();
    const Eigen::Index freqs = spec.freqs();

    MvdrResult result;
    if (ref_channel >= dim) throw DataError("mvdr: reference channel out of range");
    if (ref_channel < 0) {
        double best = -1.0;
        for (int c = 0; c < dim; ++c) {
            const double e =
                (target_mask.array() * spec.bins[static_cast<std::size_t>(c)].array().abs2())
                    .sum();
            if (e > best) {
                best = e;
                ref_channel = c;
            }
        }
    }
    result.ref_channel = ref_channel;

    result.out = spec;
    result.out.bins.assign(1, Eigen::MatrixXcd::Zero(frames, freqs));
    Eigen::MatrixXcd& out = result.out.bins[0];
    const Eigen::MatrixXcd& ref_bins = spec.bins[static_cast<std::size_t>(ref_channel)];

    Eigen::VectorXcd x(dim);
    Eigen::MatrixXcd phi_t(dim, dim), phi_n(dim, dim);
    for (Eigen::Index f = 0; f < freqs; ++f) {
        phi_t.setZero();
        phi_n.setZero();
        double mass_t = 0.0, mass_n = 0.0;
        for (Eigen::Index t = 0; t < frames; ++t) {
            for (int c = 0; c < dim; ++c) x(c) = spec.bins[static_cast<std::size_t>(c)](t, f);
            const double g = std::clamp(target_mask(t, f), 0.0, 1.0);
            if (g > 0.0) phi_t.noalias() += g * (x * x.adjoint());
            if (g < 1.0) phi_n.noalias() += (1.0 - g) * (x * x.adjoint());
            mass_t += g;
            mass_n += 1.0 - g;
        }
        bool ok = mass_t > 1e-12;
        Eigen::VectorXcd w;
        if (ok) {
            phi_t /= mass_t;
            if (mass_n > 1e-12)
                phi_n /= mass_n;
            else
                phi_n = Eigen::MatrixXcd::Identity(dim, dim) *
                        (std::real(phi_t.trace()) / dim + 1e-300);
            const double load = std::real(phi_n.trace());
            phi_n.diagonal().array() += 1e-10 * load / dim + 1e-300;
            Eigen::LLT<Eigen::MatrixXcd> llt(phi_n);
            if (llt.info() == Eigen::Success) {
                const Eigen::MatrixXcd ratio = llt.solve(phi_t);
                const std::complex<double> tr = ratio.trace();
                if (std::abs(tr) > 1e-30) {
                    w = ratio.col(ref_channel) / tr;
                    ok = w.allFinite();
                } else {
                    ok = false;
                }
            } else {
                ok = false;
            }
        }
        if (!ok) {
            result.fallback = true;
            out.col(f) = target_mask.col(f).array() * ref_bins.col(f).array();
            continue;
        }
        for (Eigen::Index t = 0; t < frames; ++t) {
            for (int c = 0; c < dim; ++c) x(c) = spec.bins[static_cast<std::size_t>(c)](t, f);
            out(t, f) = w.dot(x);
        }
    }
    return result;
}

struct GssConfig {
    int fft_size = 512;
    int frame_shift = 128;
    double context_sec = kGssContextSec;
    int em_iters = kGssEmIters;
    int ref_channel = -1;  // negative selects the strongest masked channel
};

struct GssResult {
    MultichannelAudio audio;        // single channel covering the utterance
    Eigen::Index onset_sample = 0;  // recording position of the first sample
    int ref_channel = 0;
    bool fallback = false;
    std::vector<double> log_lik;
};

/// Enhances one utterance: stacks every channel of every array, estimates
/// per-class masks over the context-extended region, then beamforms and
/// inverts only the utterance frames.
inline GssResult gss_enhance(const std::vector<MultichannelAudio>& arrays,
                             const std::vector<Segment>& segments, const Segment& utterance,
                             const GssConfig& config = {}) {
    if (arrays.empty()) throw DataError("gss: need at least one array");
    const int fs = arrays[0].sample_rate;
    const Eigen::Index samples = arrays[0].num_samples();
    int total_channels = 0;
    for (const MultichannelAudio& a : arrays) {
        if (a.sample_rate != fs || a.num_samples() != samples)
            throw DataError("gss: arrays disagree on rate or length");
        total_channels += a.channels();
    }
    const double rec_sec = static_cast<double>(samples) / fs;
    if (utterance.onset < 0.0 || utterance.end() > rec_sec + 1e-6 || utterance.duration <= 0.0)
        throw DataError("gss: utterance outside the recording");

    MultichannelAudio stacked;
    stacked.sample_rate = fs;
    stacked.samples.resize(total_channels, samples);
    int row = 0;
    for (const MultichannelAudio& a : arrays) {
        stacked.samples.middleRows(row, a.channels()) = a.samples;
        row += a.channels();
    }

    const Spectrogram spec = stft(stacked, config.fft_size, config.frame_shift);
    const ActivityPattern act = build_activity(segments, utterance, spec.frames(),
                                               config.frame_shift, fs, config.context_sec);

    Spectrogram region;
    region.frame_shift = spec.frame_shift;
    region.fft_size = spec.fft_size;
    region.sample_rate = spec.sample_rate;
    region.num_samples = spec.num_samples;
    const Eigen::Index region_frames = act.region_end - act.region_begin;
    region.bins.reserve(spec.bins.size());
    for (const auto& m : spec.bins)
        region.bins.emplace_back(m.middleRows(act.region_begin, region_frames));
    const CacgmmResult em = cacgmm_em(region, act.slice_region(), config.em_iters);

    const auto on_sample = static_cast<Eigen::Index>(std::llround(utterance.onset * fs));
    const auto off_sample =
        std::min(samples, static_cast<Eigen::Index>(std::llround(utterance.end() * fs)));
    const Eigen::Index shift = config.frame_shift;
    const Eigen::Index u_begin = (on_sample + shift - 1) / shift;
    const Eigen::Index u_end = std::min(spec.frames(), (off_sample + shift - 1) / shift);
    if (u_end <= u_begin) throw DataError("gss: utterance shorter than one frame");

    Spectrogram cut;
    cut.frame_shift = region.frame_shift;
    cut.fft_size = region.fft_size;
    cut.sample_rate = region.sample_rate;
    const Eigen::Index local_begin = u_begin - act.region_begin;
    cut.bins.reserve(region.bins.size());
    for (const auto& m : region.bins)
        cut.bins.emplace_back(m.middleRows(local_begin, u_end - u_begin));
    const Eigen::MatrixXd mask =
        em.mask.gamma[static_cast<std::size_t>(act.target_class)].middleRows(local_begin,
                                                                             u_end - u_begin);
    MvdrResult mvdr = mvdr_extract(cut, mask, config.ref_channel);
    mvdr.out.num_samples = off_sample - u_begin * shift;

    GssResult result;
    result.audio = istft(mvdr.out);
    result.onset_sample = u_begin * shift;
    result.ref_channel = mvdr.ref_channel;
    result.fallback = mvdr.fallback;
    result.log_lik = em.log_lik;
    return result;
}

}  // namespace farfield
