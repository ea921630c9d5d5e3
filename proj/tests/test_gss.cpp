#include <algorithm>
#include <random>
#include <vector>

#include <catch_amalgamated.hpp>

#include "farfield/gss.hpp"
#include "farfield/simulate.hpp"
#include "support/oracles.hpp"

using namespace farfield;

namespace {

std::vector<Segment> rttm_segments(const Rttm& rttm) {
    std::vector<Segment> segs;
    for (const RttmRecord& r : rttm.records) segs.push_back({r.onset, r.duration, r.speaker});
    return segs;
}

std::vector<double> channel_slice(const MultichannelAudio& audio, int ch, Eigen::Index start,
                                  Eigen::Index len) {
    std::vector<double> out(static_cast<std::size_t>(len));
    for (Eigen::Index i = 0; i < len; ++i) out[static_cast<std::size_t>(i)] = audio.samples(ch, start + i);
    return out;
}

void require_monotone(const std::vector<double>& ll) {
    REQUIRE(ll.size() >= 2);
    for (std::size_t i = 1; i < ll.size(); ++i) {
        REQUIRE(std::isfinite(ll[i]));
        REQUIRE(ll[i] >= ll[i - 1] - 1e-6 * std::max(1.0, std::abs(ll[i - 1])));
    }
}

double overlap_with_others(const Segment& seg, const std::vector<Segment>& all) {
    double total = 0.0;
    for (const Segment& o : all) {
        if (o.label == seg.label) continue;
        total += std::max(0.0, std::min(seg.end(), o.end()) - std::max(seg.onset, o.onset));
    }
    return total;
}

/// Best SI-SDR any raw channel achieves against its own direct image of the
/// target speaker over the given sample span.
double best_channel_si_sdr(const std::vector<MultichannelAudio>& arrays, const SceneTruth& truth,
                           int spk, Eigen::Index start, Eigen::Index len) {
    double best = -1e300;
    for (std::size_t a = 0; a < arrays.size(); ++a) {
        const MultichannelAudio image = truth.direct_source_image(spk, static_cast<int>(a));
        for (int c = 0; c < arrays[a].channels(); ++c) {
            best = std::max(best, oracle::si_sdr(channel_slice(arrays[a], c, start, len),
                                                 channel_slice(image, c, start, len)));
        }
    }
    return best;
}

}  // namespace

TEST_CASE("activity windows", "[gss]") {
    const int fs = 16000;
    const int shift = 128;
    const Eigen::Index frames = stft_num_frames(static_cast<Eigen::Index>(60) * fs, shift);
    const Segment target = {30.0, 5.0, "a"};
    const std::vector<Segment> segments = {target, {12.0, 3.0, "b"}, {20.0, 2.0, "b"}};

    SECTION("context extends the utterance on both sides") {
        ActivityPattern act = build_activity(segments, target, frames, shift, fs);
        REQUIRE(act.region_onset_sec == Catch::Approx(10.0));
        REQUIRE(act.region_end_sec == Catch::Approx(55.0));
        REQUIRE(act.region_begin == 1250);
        REQUIRE(act.region_end == 6875);
    }

    SECTION("the region clips at the recording start") {
        const Segment early = {5.0, 4.0, "a"};
        ActivityPattern act = build_activity({early, segments[1]}, early, frames, shift, fs);
        REQUIRE(act.region_onset_sec == Catch::Approx(0.0));
        REQUIRE(act.region_end_sec == Catch::Approx(29.0));
    }

    SECTION("speaker rows are unions of their segments and noise is always on") {
        ActivityPattern act = build_activity(segments, target, frames, shift, fs);
        REQUIRE(act.speakers == std::vector<std::string>{"a", "b"});
        REQUIRE(act.target_class == 0);
        REQUIRE(act.noise_class() == 2);
        REQUIRE(static_cast<int>(act.active.row(2).cast<int>().sum()) == frames);
        REQUIRE(static_cast<int>(act.active.row(0).cast<int>().sum()) == 625);
        REQUIRE(static_cast<int>(act.active.row(1).cast<int>().sum()) == 625);
        for (Eigen::Index t = 0; t < frames; ++t) {
            const double c = static_cast<double>(t) * shift / fs;
            const bool in_b = (c >= 12.0 && c < 15.0) || (c >= 20.0 && c < 22.0);
            REQUIRE((act.active(1, t) != 0) == in_b);
        }
    }

    SECTION("a missing target is rejected") {
        REQUIRE_THROWS_AS(build_activity(segments, {40.0, 2.0, "a"}, frames, shift, fs),
                          DataError);
    }

    SECTION("region slicing rebases the frame range") {
        ActivityPattern act = build_activity(segments, target, frames, shift, fs);
        ActivityPattern cut = act.slice_region();
        REQUIRE(cut.frames() == 5625);
        REQUIRE(cut.region_begin == 0);
        REQUIRE(cut.active(0, 2500) == act.active(0, 1250 + 2500));
    }
}

TEST_CASE("mixture mask estimation", "[gss]") {
    const int fs = 16000;

    SECTION("a padded single source claims its high-energy bins") {
        Rng rng(21);
        const double formants[3] = {500.0, 1500.0, 2500.0};
        const std::vector<double> utt =
            detail::synth_utterance(rng, static_cast<std::size_t>(2 * fs), formants, fs);
        MultichannelAudio audio;
        audio.sample_rate = fs;
        audio.samples = Eigen::MatrixXd::Zero(4, 4 * fs);
        for (int c = 0; c < 4; ++c) {
            for (std::size_t i = 0; i < utt.size(); ++i)
                audio.samples(c, fs + static_cast<Eigen::Index>(i) + c) = utt[i];
            for (Eigen::Index i = 0; i < audio.samples.cols(); ++i)
                audio.samples(c, i) += 1e-3 * rng.normal();
        }
        const Spectrogram spec = stft(audio, 512, 128);
        const Segment seg = {1.0, 2.0, "a"};
        const ActivityPattern act = build_activity({seg}, seg, spec.frames(), 128, fs);
        const CacgmmResult em = cacgmm_em(spec, act, 10);
        require_monotone(em.log_lik);

        Eigen::MatrixXd energy = Eigen::MatrixXd::Zero(spec.frames(), spec.freqs());
        for (const auto& ch : spec.bins) energy += ch.array().abs2().matrix();
        std::vector<double> active_energy;
        for (Eigen::Index t = 0; t < spec.frames(); ++t)
            if (act.active(0, t) != 0)
                for (Eigen::Index f = 0; f < spec.freqs(); ++f)
                    active_energy.push_back(energy(t, f));
        std::sort(active_energy.begin(), active_energy.end());
        const double cut = active_energy[active_energy.size() * 9 / 10];

        double mask_sum = 0.0;
        int count = 0;
        for (Eigen::Index t = 0; t < spec.frames(); ++t) {
            if (act.active(0, t) == 0) continue;
            for (Eigen::Index f = 0; f < spec.freqs(); ++f) {
                if (energy(t, f) < cut) continue;
                mask_sum += em.mask.gamma[0](t, f);
                ++count;
            }
        }
        REQUIRE(count > 500);
        REQUIRE(mask_sum / count >= 0.9);
    }

    SECTION("disjoint speakers recover their activity patterns") {
        SceneSpec sc;
        sc.num_speakers = 2;
        sc.num_arrays = 1;
        sc.channels_per_array = 4;
        sc.duration_sec = 12.0;
        sc.overlap_ratio = 0.0;
        sc.snr_db = 45.0;
        sc.seed = 31;
        auto [arrays, truth] = simulate_scene(sc);
        const std::vector<Segment> segments = rttm_segments(truth.rttm);
        REQUIRE(segments.size() >= 2);

        const Spectrogram spec = stft(arrays[0], 512, 128);
        const ActivityPattern act =
            build_activity(segments, segments[0], spec.frames(), 128, fs);
        const CacgmmResult em = cacgmm_em(spec, act, 15);
        require_monotone(em.log_lik);

        for (int k = 0; k < 2; ++k) {
            double dev = 0.0;
            long n = 0;
            for (Eigen::Index t = 0; t < spec.frames(); ++t) {
                if (act.active(k, t) == 0) {
                    REQUIRE(em.mask.gamma[static_cast<std::size_t>(k)].row(t).maxCoeff() == 0.0);
                    continue;
                }
                for (Eigen::Index f = 0; f < spec.freqs(); ++f) {
                    dev += 1.0 - em.mask.gamma[static_cast<std::size_t>(k)](t, f);
                    ++n;
                }
            }
            REQUIRE(n > 0);
            REQUIRE(dev / static_cast<double>(n) < 0.1);
        }

        for (Eigen::Index t = 0; t < spec.frames(); ++t) {
            for (Eigen::Index f = 0; f < spec.freqs(); ++f) {
                double total = 0.0;
                for (const auto& g : em.mask.gamma) total += g(t, f);
                REQUIRE(total == Catch::Approx(1.0).margin(1e-6));
            }
            REQUIRE(em.params.weights.row(t).sum() == Catch::Approx(1.0).margin(1e-9));
        }
    }

    SECTION("bad inputs are rejected") {
        MultichannelAudio mono;
        mono.sample_rate = fs;
        mono.samples = Eigen::MatrixXd::Random(1, fs);
        const Spectrogram spec = stft(mono, 512, 128);
        ActivityPattern act;
        act.active.setOnes(2, spec.frames());
        REQUIRE_THROWS_AS(cacgmm_em(spec, act, 5), DataError);

        MultichannelAudio stereo;
        stereo.sample_rate = fs;
        stereo.samples = Eigen::MatrixXd::Random(2, fs);
        const Spectrogram spec2 = stft(stereo, 512, 128);
        REQUIRE_THROWS_AS(cacgmm_em(spec2, act, 0), DataError);
        ActivityPattern short_act;
        short_act.active.setOnes(2, spec2.frames() - 1);
        REQUIRE_THROWS_AS(cacgmm_em(spec2, short_act, 5), DataError);
    }
}

TEST_CASE("mask-based beamforming", "[gss]") {
    const int fs = 16000;

    SECTION("identical channels pass a full-mask source through") {
        Rng rng(33);
        const double formants[3] = {450.0, 1400.0, 2600.0};
        const std::vector<double> utt =
            detail::synth_utterance(rng, static_cast<std::size_t>(3 * fs / 2), formants, fs);
        MultichannelAudio audio;
        audio.sample_rate = fs;
        audio.samples.resize(4, static_cast<Eigen::Index>(utt.size()));
        for (int c = 0; c < 4; ++c)
            for (std::size_t i = 0; i < utt.size(); ++i)
                audio.samples(c, static_cast<Eigen::Index>(i)) = utt[i];
        const Spectrogram spec = stft(audio, 512, 128);
        const Eigen::MatrixXd mask = Eigen::MatrixXd::Ones(spec.frames(), spec.freqs());
        MvdrResult res = mvdr_extract(spec, mask);
        REQUIRE_FALSE(res.fallback);
        const MultichannelAudio out = istft(res.out);
        const std::vector<double> est = channel_slice(out, 0, 0, out.num_samples());
        REQUIRE(oracle::si_sdr(est, utt) > 30.0);
    }

    SECTION("an empty mask takes the flagged fallback path") {
        MultichannelAudio audio;
        audio.sample_rate = fs;
        audio.samples = Eigen::MatrixXd::Random(3, fs / 2);
        const Spectrogram spec = stft(audio, 512, 128);
        const Eigen::MatrixXd mask = Eigen::MatrixXd::Zero(spec.frames(), spec.freqs());
        MvdrResult res = mvdr_extract(spec, mask);
        REQUIRE(res.fallback);
        REQUIRE(res.out.bins[0].norm() == 0.0);
    }

    SECTION("scaling the input scales the output linearly") {
        std::mt19937 rng(71);
        std::normal_distribution<double> gauss;
        std::uniform_real_distribution<double> uni(0.0, 1.0);
        Spectrogram spec;
        spec.frame_shift = 128;
        spec.fft_size = 32;
        spec.sample_rate = fs;
        spec.num_samples = 39 * 128;
        spec.bins.assign(3, Eigen::MatrixXcd(40, 17));
        for (auto& ch : spec.bins)
            for (Eigen::Index t = 0; t < 40; ++t)
                for (Eigen::Index f = 0; f < 17; ++f) ch(t, f) = {gauss(rng), gauss(rng)};
        Eigen::MatrixXd mask(40, 17);
        for (Eigen::Index t = 0; t < 40; ++t)
            for (Eigen::Index f = 0; f < 17; ++f) mask(t, f) = uni(rng);

        MvdrResult base = mvdr_extract(spec, mask);
        const double c = 3.7;
        Spectrogram scaled = spec;
        for (auto& ch : scaled.bins) ch *= c;
        MvdrResult big = mvdr_extract(scaled, mask);
        REQUIRE(big.ref_channel == base.ref_channel);
        const double rel =
            (big.out.bins[0] - c * base.out.bins[0]).norm() / (c * base.out.bins[0]).norm();
        REQUIRE(rel < 1e-6);
    }

    SECTION("shape mismatches are rejected") {
        MultichannelAudio audio;
        audio.sample_rate = fs;
        audio.samples = Eigen::MatrixXd::Random(2, fs / 4);
        const Spectrogram spec = stft(audio, 512, 128);
        const Eigen::MatrixXd bad = Eigen::MatrixXd::Ones(3, 3);
        REQUIRE_THROWS_AS(mvdr_extract(spec, bad), DataError);
        Eigen::MatrixXd wild = Eigen::MatrixXd::Ones(spec.frames(), spec.freqs()) * 1.5;
        REQUIRE_THROWS_AS(mvdr_extract(spec, wild), DataError);
        REQUIRE_THROWS_AS(
            mvdr_extract(spec, Eigen::MatrixXd::Ones(spec.frames(), spec.freqs()), 7), DataError);
    }
}

TEST_CASE("utterance enhancement", "[gss]") {
    SECTION("overlapped speech separates toward the target") {
        SceneSpec sc;
        sc.num_speakers = 2;
        sc.num_arrays = 2;
        sc.channels_per_array = 2;
        sc.duration_sec = 12.0;
        sc.overlap_ratio = 0.5;
        sc.snr_db = 30.0;
        sc.seed = 41;
        auto [arrays, truth] = simulate_scene(sc);
        const std::vector<Segment> segments = rttm_segments(truth.rttm);

        GssConfig cfg;
        cfg.em_iters = 10;
        for (int spk = 0; spk < 2; ++spk) {
            const std::string label = "spk" + std::to_string(spk);
            const Segment* target = nullptr;
            double best_ov = -1.0;
            for (const Segment& s : segments) {
                if (s.label != label) continue;
                const double ov = overlap_with_others(s, segments);
                if (ov > best_ov) {
                    best_ov = ov;
                    target = &s;
                }
            }
            REQUIRE(target != nullptr);
            REQUIRE(best_ov > 0.3);

            GssResult res = gss_enhance(arrays, segments, *target, cfg);
            require_monotone(res.log_lik);
            REQUIRE_FALSE(res.fallback);

            const Eigen::Index len = res.audio.num_samples();
            int array_of_ref = 0, ch_of_ref = res.ref_channel;
            while (ch_of_ref >= arrays[static_cast<std::size_t>(array_of_ref)].channels()) {
                ch_of_ref -= arrays[static_cast<std::size_t>(array_of_ref)].channels();
                ++array_of_ref;
            }
            const MultichannelAudio image = truth.direct_source_image(spk, array_of_ref);
            const double enhanced =
                oracle::si_sdr(channel_slice(res.audio, 0, 0, len),
                               channel_slice(image, ch_of_ref, res.onset_sample, len));
            const double baseline =
                best_channel_si_sdr(arrays, truth, spk, res.onset_sample, len);
            INFO("speaker " << spk << ": enhanced " << enhanced << " dB, best raw channel "
                            << baseline << " dB");
            REQUIRE(enhanced >= baseline + 5.0);

            if (spk == 0) {
                GssResult rerun = gss_enhance(arrays, segments, *target, cfg);
                REQUIRE(rerun.audio.samples == res.audio.samples);
                REQUIRE(rerun.ref_channel == res.ref_channel);
            }
        }
    }

    SECTION("with no interference the output never falls below the best channel") {
        SceneSpec sc;
        sc.num_speakers = 1;
        sc.num_arrays = 1;
        sc.channels_per_array = 4;
        sc.duration_sec = 8.0;
        sc.snr_db = 15.0;
        sc.seed = 43;
        auto [arrays, truth] = simulate_scene(sc);
        const std::vector<Segment> segments = rttm_segments(truth.rttm);
        REQUIRE_FALSE(segments.empty());
        const Segment* target = &segments[0];
        for (const Segment& s : segments)
            if (s.duration > target->duration) target = &s;

        GssConfig cfg;
        cfg.em_iters = 10;
        GssResult res = gss_enhance(arrays, segments, *target, cfg);
        const Eigen::Index len = res.audio.num_samples();
        const MultichannelAudio image = truth.direct_source_image(0, 0);
        int ch = res.ref_channel;
        const double enhanced = oracle::si_sdr(channel_slice(res.audio, 0, 0, len),
                                               channel_slice(image, ch, res.onset_sample, len));
        const double baseline = best_channel_si_sdr(arrays, truth, 0, res.onset_sample, len);
        INFO("enhanced " << enhanced << " dB, best raw channel " << baseline << " dB");
        REQUIRE(enhanced >= baseline);
    }
}
