#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "farfield/common.hpp"
#include "farfield/segments.hpp"

namespace farfield {

/// One NIST RTTM SPEAKER record.
struct RttmRecord {
    std::string recording_id;
    double onset = 0.0;
    double duration = 0.0;
    std::string speaker;
};

struct Rttm {
    std::vector<RttmRecord> records;
};

struct SpeakerMapping {
    std::string recording;
    std::string reference;
    std::string system;
};

/// Error components as fractions of scored reference speech time.
struct DiarScore {
    double missed_speech = 0.0;
    double false_alarm = 0.0;
    double speaker_error = 0.0;
    double der = 0.0;
    double jer = 0.0;
    std::vector<SpeakerMapping> mapping;
};

constexpr double kScoreFrameSec = 0.01;

inline Rttm parse_rttm(const std::string& text) {
    Rttm rttm;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream ls(line);
        std::vector<std::string> tok;
        std::string t;
        while (ls >> t) tok.push_back(t);
        if (tok.empty() || tok[0] != "SPEAKER") continue;
        if (tok.size() != 10)
            throw FormatError("rttm: line " + std::to_string(line_no) + ": expected 10 fields, got " +
                              std::to_string(tok.size()));
        RttmRecord rec;
        rec.recording_id = tok[1];
        try {
            std::size_t used = 0;
            rec.onset = std::stod(tok[3], &used);
            if (used != tok[3].size()) throw std::invalid_argument(tok[3]);
            rec.duration = std::stod(tok[4], &used);
            if (used != tok[4].size()) throw std::invalid_argument(tok[4]);
        } catch (const std::exception&) {
            throw FormatError("rttm: line " + std::to_string(line_no) + ": non-numeric time field");
        }
        if (rec.duration <= 0.0)
            throw FormatError("rttm: line " + std::to_string(line_no) + ": non-positive duration");
        rec.speaker = tok[7];
        rttm.records.push_back(rec);
    }
    return rttm;
}

inline Rttm read_rttm(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("read_rttm: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_rttm(ss.str());
}

inline std::string emit_rttm(const Rttm& rttm) {
    std::string out;
    char line[256];
    for (const RttmRecord& r : rttm.records) {
        std::snprintf(line, sizeof(line), "SPEAKER %s 1 %.2f %.2f <NA> <NA> %s <NA> <NA>\n",
                      r.recording_id.c_str(), r.onset, r.duration, r.speaker.c_str());
        out += line;
    }
    return out;
}

inline void write_rttm(const std::string& path, const Rttm& rttm) {
    std::ofstream out(path);
    if (!out) throw IoError("write_rttm: cannot open " + path);
    out << emit_rttm(rttm);
}

/// Builds an Rttm from speaker-labeled segments under one recording id.
inline Rttm segments_to_rttm(const SegmentList& segs, const std::string& recording_id) {
    Rttm rttm;
    for (const Segment& s : segs) rttm.records.push_back({recording_id, s.onset, s.duration, s.label});
    return rttm;
}

inline SegmentList rttm_to_segments(const Rttm& rttm, const std::string& recording_id) {
    SegmentList segs;
    for (const RttmRecord& r : rttm.records)
        if (r.recording_id == recording_id) segs.push_back({r.onset, r.duration, r.speaker});
    sort_segments(segs);
    return segs;
}

namespace detail {

/// Min-cost assignment over a square cost matrix; returns column per row.
inline std::vector<int> hungarian_min(const Eigen::MatrixXd& cost) {
    const int n = static_cast<int>(cost.rows());
    const int m = static_cast<int>(cost.cols());
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(static_cast<std::size_t>(m) + 1, 0.0);
    std::vector<int> p(static_cast<std::size_t>(m) + 1, 0), way(static_cast<std::size_t>(m) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(m) + 1, inf);
        std::vector<char> used(static_cast<std::size_t>(m) + 1, 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            int i0 = p[static_cast<std::size_t>(j0)], j1 = -1;
            double delta = inf;
            for (int j = 1; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            int j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
    for (int j = 1; j <= m; ++j)
        if (p[static_cast<std::size_t>(j)] >= 1) row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)]) - 1] = j - 1;
    return row_to_col;
}

struct FrameGrid {
    // Per frame, a bitmask over speaker indices, lexicographically ordered labels.
    std::vector<std::uint64_t> ref_mask, hyp_mask;
    std::vector<std::string> ref_spk, hyp_spk;
    std::vector<char> scored;  // collar / overlap exclusion
};

inline FrameGrid build_grid(const std::vector<const RttmRecord*>& ref,
                            const std::vector<const RttmRecord*>& hyp, double collar_sec,
                            bool score_overlap) {
    FrameGrid g;
    std::set<std::string> ref_set, hyp_set;
    double end = 0.0;
    for (auto* r : ref) {
        ref_set.insert(r->speaker);
        end = std::max(end, r->onset + r->duration);
    }
    for (auto* h : hyp) {
        hyp_set.insert(h->speaker);
        end = std::max(end, h->onset + h->duration);
    }
    g.ref_spk.assign(ref_set.begin(), ref_set.end());
    g.hyp_spk.assign(hyp_set.begin(), hyp_set.end());
    if (g.ref_spk.size() > 64 || g.hyp_spk.size() > 64)
        throw DataError("der: more than 64 speakers in one recording");

    const auto frames = static_cast<std::size_t>(std::ceil(end / kScoreFrameSec) + 0.5);
    g.ref_mask.assign(frames, 0);
    g.hyp_mask.assign(frames, 0);
    g.scored.assign(frames, 1);

    auto spk_index = [](const std::vector<std::string>& v, const std::string& s) {
        return static_cast<std::uint64_t>(std::lower_bound(v.begin(), v.end(), s) - v.begin());
    };
    auto paint = [&](const std::vector<const RttmRecord*>& recs, const std::vector<std::string>& spk,
                     std::vector<std::uint64_t>& mask) {
        for (auto* r : recs) {
            const std::uint64_t bit = 1ull << spk_index(spk, r->speaker);
            for (std::size_t t = 0; t < mask.size(); ++t) {
                const double center = (static_cast<double>(t) + 0.5) * kScoreFrameSec;
                if (center >= r->onset && center < r->onset + r->duration) mask[t] |= bit;
            }
        }
    };
    paint(ref, g.ref_spk, g.ref_mask);
    paint(hyp, g.hyp_spk, g.hyp_mask);

    if (collar_sec > 0.0) {
        for (auto* r : ref) {
            for (double b : {r->onset, r->onset + r->duration}) {
                const auto lo = static_cast<long>(std::floor((b - collar_sec) / kScoreFrameSec - 0.5));
                const auto hi = static_cast<long>(std::ceil((b + collar_sec) / kScoreFrameSec + 0.5));
                for (long t = std::max(0L, lo); t < hi && t < static_cast<long>(frames); ++t) {
                    const double center = (static_cast<double>(t) + 0.5) * kScoreFrameSec;
                    if (std::abs(center - b) <= collar_sec) g.scored[static_cast<std::size_t>(t)] = 0;
                }
            }
        }
    }
    if (!score_overlap) {
        for (std::size_t t = 0; t < frames; ++t)
            if (std::popcount(g.ref_mask[t]) > 1) g.scored[t] = 0;
    }
    return g;
}

/// Best achievable total of a one-to-one row/column assignment.
inline double max_assignment_value(const Eigen::MatrixXd& m) {
    const int r = static_cast<int>(m.rows());
    const int c = static_cast<int>(m.cols());
    const int n = std::max(r, c);
    if (n == 0) return 0.0;
    Eigen::MatrixXd cost = Eigen::MatrixXd::Zero(n, n);
    cost.topLeftCorner(r, c) = -m;
    std::vector<int> col = hungarian_min(cost);
    double total = 0.0;
    for (int i = 0; i < r; ++i)
        if (col[static_cast<std::size_t>(i)] < c) total += m(i, col[static_cast<std::size_t>(i)]);
    return total;
}

/// Maximum-overlap one-to-one speaker assignment on scored frames.
/// Among equally good assignments, picks the lexicographically smallest one
/// (ref speakers in order, lower hyp index preferred, unmapped last) so the
/// result does not depend on solver internals.
inline std::vector<int> best_mapping(const FrameGrid& g) {
    const int nr = static_cast<int>(g.ref_spk.size());
    const int nh = static_cast<int>(g.hyp_spk.size());
    if (nr == 0) return {};
    Eigen::MatrixXd overlap = Eigen::MatrixXd::Zero(std::max(nr, 1), std::max(nh, 1));
    for (std::size_t t = 0; t < g.ref_mask.size(); ++t) {
        if (!g.scored[t]) continue;
        for (int i = 0; i < nr; ++i) {
            if (!(g.ref_mask[t] >> i & 1)) continue;
            for (int j = 0; j < nh; ++j)
                if (g.hyp_mask[t] >> j & 1) overlap(i, j) += 1.0;
        }
    }
    const double target = max_assignment_value(overlap.topLeftCorner(nr, std::max(nh, 1)));

    std::vector<int> assign(static_cast<std::size_t>(nr), -1);
    std::vector<char> used(static_cast<std::size_t>(std::max(nh, 1)), 0);
    double fixed = 0.0;
    for (int i = 0; i < nr; ++i) {
        bool placed = false;
        for (int j = 0; j < nh && !placed; ++j) {
            if (used[static_cast<std::size_t>(j)]) continue;
            // Value still reachable with rows 0..i fixed and (i, j) chosen.
            std::vector<int> free_cols;
            for (int k = 0; k < nh; ++k)
                if (!used[static_cast<std::size_t>(k)] && k != j) free_cols.push_back(k);
            Eigen::MatrixXd rem(nr - i - 1, std::max<int>(static_cast<int>(free_cols.size()), 1));
            rem.setZero();
            for (int r2 = i + 1; r2 < nr; ++r2)
                for (std::size_t k = 0; k < free_cols.size(); ++k)
                    rem(r2 - i - 1, static_cast<int>(k)) = overlap(r2, free_cols[k]);
            const double reach = fixed + overlap(i, j) + max_assignment_value(rem);
            if (reach >= target - 1e-9) {
                assign[static_cast<std::size_t>(i)] = j;
                used[static_cast<std::size_t>(j)] = 1;
                fixed += overlap(i, j);
                placed = true;
            }
        }
        // The unmapped option is always feasible when no column choice was.
    }
    for (int i = 0; i < nr; ++i)
        if (assign[static_cast<std::size_t>(i)] >= 0 && overlap(i, assign[static_cast<std::size_t>(i)]) <= 0.0)
            assign[static_cast<std::size_t>(i)] = -1;
    return assign;
}

}  // namespace detail

/// Diarization error rate at 10 ms resolution with optimal one-to-one speaker
/// mapping. Collar excludes +-collar_sec around every reference boundary;
/// score_overlap=false excludes reference overlap regions instead of demanding
/// multiple hypothesis speakers there.
inline DiarScore compute_der(const Rttm& ref, const Rttm& hyp, double collar_sec = 0.0,
                             bool score_overlap = true) {
    std::map<std::string, std::vector<const RttmRecord*>> ref_by_rec, hyp_by_rec;
    for (const auto& r : ref.records) ref_by_rec[r.recording_id].push_back(&r);
    for (const auto& h : hyp.records) {
        if (ref_by_rec.find(h.recording_id) == ref_by_rec.end())
            throw DataError("der: hypothesis recording not in reference: " + h.recording_id);
        hyp_by_rec[h.recording_id].push_back(&h);
    }

    double ref_frames = 0.0, hyp_frames = 0.0, miss = 0.0, fa = 0.0, conf = 0.0;
    double jer_sum = 0.0;
    int jer_count = 0;
    DiarScore score;

    for (const auto& [rec, refs] : ref_by_rec) {
        const auto hit = hyp_by_rec.find(rec);
        static const std::vector<const RttmRecord*> kEmpty;
        const auto& hyps = (hit == hyp_by_rec.end()) ? kEmpty : hit->second;

        detail::FrameGrid g = detail::build_grid(refs, hyps, collar_sec, score_overlap);
        std::vector<int> assign = detail::best_mapping(g);

        // hyp speaker bit -> mapped ref bit (or -1)
        std::vector<int> hyp_to_ref(g.hyp_spk.size(), -1);
        for (std::size_t i = 0; i < assign.size(); ++i) {
            if (assign[i] >= 0) {
                hyp_to_ref[static_cast<std::size_t>(assign[i])] = static_cast<int>(i);
                score.mapping.push_back({rec, g.ref_spk[i], g.hyp_spk[static_cast<std::size_t>(assign[i])]});
            }
        }

        for (std::size_t t = 0; t < g.ref_mask.size(); ++t) {
            if (!g.scored[t]) continue;
            const int nr = std::popcount(g.ref_mask[t]);
            const int nh = std::popcount(g.hyp_mask[t]);
            int correct = 0;
            for (std::size_t j = 0; j < g.hyp_spk.size(); ++j)
                if ((g.hyp_mask[t] >> j & 1) && hyp_to_ref[j] >= 0 && (g.ref_mask[t] >> hyp_to_ref[j] & 1))
                    ++correct;
            ref_frames += nr;
            hyp_frames += nh;
            miss += std::max(0, nr - nh);
            fa += std::max(0, nh - nr);
            conf += std::min(nr, nh) - correct;
        }

        // Per-reference-speaker Jaccard under the same mapping, no collar,
        // overlap always scored.
        detail::FrameGrid gj = (collar_sec == 0.0 && score_overlap)
                                   ? g
                                   : detail::build_grid(refs, hyps, 0.0, true);
        for (std::size_t i = 0; i < gj.ref_spk.size(); ++i) {
            double inter = 0.0, uni = 0.0;
            const int mapped = (i < assign.size()) ? assign[i] : -1;
            for (std::size_t t = 0; t < gj.ref_mask.size(); ++t) {
                const bool r = gj.ref_mask[t] >> i & 1;
                const bool h = mapped >= 0 && (gj.hyp_mask[t] >> mapped & 1);
                if (r && h) ++inter;
                if (r || h) ++uni;
            }
            jer_sum += uni > 0.0 ? 1.0 - inter / uni : (mapped >= 0 ? 0.0 : 1.0);
            ++jer_count;
        }
    }

    const double denom = ref_frames > 0.0 ? ref_frames : std::max(hyp_frames, 1.0);
    score.missed_speech = miss / denom;
    score.false_alarm = fa / denom;
    score.speaker_error = conf / denom;
    score.der = score.missed_speech + score.false_alarm + score.speaker_error;
    score.jer = jer_count > 0 ? jer_sum / jer_count : 0.0;
    return score;
}

/// Mean per-reference-speaker Jaccard error under the DER-optimal mapping.
inline double compute_jer(const Rttm& ref, const Rttm& hyp) {
    return compute_der(ref, hyp, 0.0, true).jer;
}

}  // namespace farfield
