#pragma once

// Independent reference implementations used only by tests. Everything here
// favors obviousness over speed: plain loops, explicit enumeration.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "farfield/metrics.hpp"

namespace oracle {

struct Painted {
    std::vector<std::vector<bool>> ref;  // [speaker][frame]
    std::vector<std::vector<bool>> hyp;
    std::vector<bool> scored;
    std::vector<std::string> ref_names, hyp_names;
};

inline Painted paint(const std::vector<farfield::RttmRecord>& refs,
                     const std::vector<farfield::RttmRecord>& hyps, double collar,
                     bool score_overlap) {
    const double step = 0.01;
    Painted p;
    std::set<std::string> rs, hs;
    double end = 0.0;
    for (const auto& r : refs) {
        rs.insert(r.speaker);
        end = std::max(end, r.onset + r.duration);
    }
    for (const auto& h : hyps) {
        hs.insert(h.speaker);
        end = std::max(end, h.onset + h.duration);
    }
    p.ref_names.assign(rs.begin(), rs.end());
    p.hyp_names.assign(hs.begin(), hs.end());
    const auto frames = static_cast<std::size_t>(std::ceil(end / step) + 0.5);
    p.ref.assign(p.ref_names.size(), std::vector<bool>(frames, false));
    p.hyp.assign(p.hyp_names.size(), std::vector<bool>(frames, false));
    p.scored.assign(frames, true);

    for (std::size_t t = 0; t < frames; ++t) {
        const double center = (static_cast<double>(t) + 0.5) * step;
        for (const auto& r : refs) {
            if (center >= r.onset && center < r.onset + r.duration) {
                const auto i = static_cast<std::size_t>(
                    std::find(p.ref_names.begin(), p.ref_names.end(), r.speaker) - p.ref_names.begin());
                p.ref[i][t] = true;
            }
        }
        for (const auto& h : hyps) {
            if (center >= h.onset && center < h.onset + h.duration) {
                const auto i = static_cast<std::size_t>(
                    std::find(p.hyp_names.begin(), p.hyp_names.end(), h.speaker) - p.hyp_names.begin());
                p.hyp[i][t] = true;
            }
        }
        if (collar > 0.0) {
            for (const auto& r : refs) {
                if (std::abs(center - r.onset) <= collar ||
                    std::abs(center - (r.onset + r.duration)) <= collar) {
                    p.scored[t] = false;
                }
            }
        }
        if (!score_overlap) {
            int n = 0;
            for (const auto& row : p.ref)
                if (row[t]) ++n;
            if (n > 1) p.scored[t] = false;
        }
    }
    return p;
}

/// All one-to-one (partial) ref->hyp assignments, depth first, trying hyp
/// indices in increasing order and "unmapped" last; the first assignment
/// reaching the maximum correct-frame count is kept.
inline void enumerate_assignments(const Painted& p, std::size_t row, std::vector<int>& cur,
                                  std::vector<bool>& used, long& best, std::vector<int>& best_assign) {
    if (row == p.ref.size()) {
        long correct = 0;
        for (std::size_t t = 0; t < p.scored.size(); ++t) {
            if (!p.scored[t]) continue;
            for (std::size_t i = 0; i < p.ref.size(); ++i)
                if (cur[i] >= 0 && p.ref[i][t] && p.hyp[static_cast<std::size_t>(cur[i])][t]) ++correct;
        }
        if (correct > best) {
            best = correct;
            best_assign = cur;
        }
        return;
    }
    for (std::size_t j = 0; j < p.hyp.size(); ++j) {
        if (used[j]) continue;
        used[j] = true;
        cur[row] = static_cast<int>(j);
        enumerate_assignments(p, row + 1, cur, used, best, best_assign);
        used[j] = false;
    }
    cur[row] = -1;
    enumerate_assignments(p, row + 1, cur, used, best, best_assign);
}

inline std::vector<int> best_assignment(const Painted& p) {
    std::vector<int> cur(p.ref.size(), -1), best_assign(p.ref.size(), -1);
    std::vector<bool> used(p.hyp.size(), false);
    long best = -1;
    enumerate_assignments(p, 0, cur, used, best, best_assign);
    return best_assign;
}

struct Score {
    double miss = 0.0, fa = 0.0, se = 0.0, der = 0.0, jer = 0.0;
};

inline Score brute_force_score(const farfield::Rttm& ref, const farfield::Rttm& hyp, double collar,
                               bool score_overlap) {
    std::map<std::string, std::vector<farfield::RttmRecord>> ref_by, hyp_by;
    for (const auto& r : ref.records) ref_by[r.recording_id].push_back(r);
    for (const auto& h : hyp.records) hyp_by[h.recording_id].push_back(h);

    double ref_frames = 0.0, hyp_frames = 0.0, miss = 0.0, fa = 0.0, conf = 0.0, jer_sum = 0.0;
    int jer_count = 0;
    for (const auto& [rec, refs] : ref_by) {
        const auto it = hyp_by.find(rec);
        const std::vector<farfield::RttmRecord> empty;
        const auto& hyps = it == hyp_by.end() ? empty : it->second;

        Painted p = paint(refs, hyps, collar, score_overlap);
        std::vector<int> assign = best_assignment(p);
        for (std::size_t t = 0; t < p.scored.size(); ++t) {
            if (!p.scored[t]) continue;
            int nr = 0, nh = 0, correct = 0;
            for (const auto& row : p.ref)
                if (row[t]) ++nr;
            for (const auto& row : p.hyp)
                if (row[t]) ++nh;
            for (std::size_t i = 0; i < p.ref.size(); ++i)
                if (assign[i] >= 0 && p.ref[i][t] && p.hyp[static_cast<std::size_t>(assign[i])][t]) ++correct;
            ref_frames += nr;
            hyp_frames += nh;
            miss += std::max(0, nr - nh);
            fa += std::max(0, nh - nr);
            conf += std::min(nr, nh) - correct;
        }

        Painted pj = (collar == 0.0 && score_overlap) ? p : paint(refs, hyps, 0.0, true);
        std::vector<int> ja = (collar == 0.0 && score_overlap) ? assign : best_assignment(pj);
        for (std::size_t i = 0; i < pj.ref.size(); ++i) {
            double inter = 0.0, uni = 0.0;
            for (std::size_t t = 0; t < pj.scored.size(); ++t) {
                const bool r = pj.ref[i][t];
                const bool h = ja[i] >= 0 && pj.hyp[static_cast<std::size_t>(ja[i])][t];
                if (r && h) ++inter;
                if (r || h) ++uni;
            }
            jer_sum += uni > 0.0 ? 1.0 - inter / uni : (ja[i] >= 0 ? 0.0 : 1.0);
            ++jer_count;
        }
    }
    Score s;
    const double denom = ref_frames > 0.0 ? ref_frames : std::max(hyp_frames, 1.0);
    s.miss = miss / denom;
    s.fa = fa / denom;
    s.se = conf / denom;
    s.der = s.miss + s.fa + s.se;
    s.jer = jer_count > 0 ? jer_sum / jer_count : 0.0;
    return s;
}

/// Exhaustive search over every duration-legal binary label sequence.
/// Legality: speech runs last [min_speech, max_speech] frames; a silence run
/// followed by speech lasts at least min_silence frames; a trailing silence
/// run may be any length. Scoring mirrors the HMM: emissions are
/// log(p_speech + 1e-12) and log(p_silence + p_garbage + 1e-12); entering or
/// extending a class past its mandatory span costs the class log prior, and
/// the forced exit at max_speech costs nothing.
struct SadPath {
    std::vector<std::uint8_t> labels;
    double score = -std::numeric_limits<double>::infinity();
};

inline SadPath best_sad_path(const std::vector<std::array<double, 3>>& probs, int min_speech,
                             int min_silence, int max_speech, double speech_prior) {
    const int frames = static_cast<int>(probs.size());
    const double log_sp = std::log(speech_prior);
    const double log_sil = std::log(1.0 - speech_prior);
    std::vector<double> emis_sil(probs.size()), emis_sp(probs.size());
    for (std::size_t t = 0; t < probs.size(); ++t) {
        emis_sil[t] = std::log(probs[t][0] + probs[t][2] + 1e-12);
        emis_sp[t] = std::log(probs[t][1] + 1e-12);
    }

    SadPath best;
    std::vector<std::uint8_t> cur(probs.size());
    const auto rec = [&](const auto& self, int t, int label, int run, double score) -> void {
        if (t == frames) {
            const bool legal_end = label == 0 || run >= min_speech;
            if (legal_end && score > best.score) {
                best.score = score;
                best.labels = cur;
            }
            return;
        }
        if (label == 0) {
            cur[static_cast<std::size_t>(t)] = 0;
            self(self, t + 1, 0, run + 1, score + (run >= min_silence ? log_sil : 0.0) + emis_sil[static_cast<std::size_t>(t)]);
            if (run >= min_silence) {
                cur[static_cast<std::size_t>(t)] = 1;
                self(self, t + 1, 1, 1, score + log_sp + emis_sp[static_cast<std::size_t>(t)]);
            }
        } else {
            if (run < max_speech) {
                cur[static_cast<std::size_t>(t)] = 1;
                self(self, t + 1, 1, run + 1, score + (run >= min_speech ? log_sp : 0.0) + emis_sp[static_cast<std::size_t>(t)]);
            }
            if (run >= min_speech) {
                cur[static_cast<std::size_t>(t)] = 0;
                self(self, t + 1, 0, 1, score + (run == max_speech ? 0.0 : log_sil) + emis_sil[static_cast<std::size_t>(t)]);
            }
        }
    };
    cur[0] = 0;
    rec(rec, 1, 0, 1, log_sil + emis_sil[0]);
    cur[0] = 1;
    rec(rec, 1, 1, 1, log_sp + emis_sp[0]);
    return best;
}

/// Scale-invariant signal-to-distortion ratio in dB.
inline double si_sdr(const std::vector<double>& estimate, const std::vector<double>& reference) {
    double dot = 0.0, ref_energy = 0.0;
    const std::size_t n = std::min(estimate.size(), reference.size());
    for (std::size_t t = 0; t < n; ++t) {
        dot += estimate[t] * reference[t];
        ref_energy += reference[t] * reference[t];
    }
    if (ref_energy < 1e-30) return -300.0;
    const double alpha = dot / ref_energy;
    double target = 0.0, noise = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
        const double s = alpha * reference[t];
        target += s * s;
        const double e = estimate[t] - s;
        noise += e * e;
    }
    if (noise < 1e-30) return 300.0;
    return 10.0 * std::log10(target / noise);
}

}  // namespace oracle
