#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "farfield/common.hpp"

namespace farfield {

/// One labeled time span. Onset and duration in seconds.
struct Segment {
    double onset = 0.0;
    double duration = 0.0;
    std::string label;

    double end() const { return onset + duration; }
};

/// Records sorted by onset; onset >= 0, duration > 0.
using SegmentList = std::vector<Segment>;

inline void sort_segments(SegmentList& segs) {
    std::stable_sort(segs.begin(), segs.end(), [](const Segment& a, const Segment& b) {
        return a.onset < b.onset;
    });
}

/// Merges overlapping or touching spans, discarding labels ("speech" output).
inline SegmentList merge_spans(const SegmentList& segs, const std::string& label = "speech") {
    SegmentList sorted = segs;
    sort_segments(sorted);
    SegmentList out;
    for (const Segment& s : sorted) {
        if (!out.empty() && s.onset <= out.back().end() + 1e-9) {
            double end = std::max(out.back().end(), s.end());
            out.back().duration = end - out.back().onset;
        } else {
            out.push_back({s.onset, s.duration, label});
        }
    }
    return out;
}

/// Clips spans to [0, total_sec], dropping spans that fall entirely outside.
/// Frame-quantized grids can overrun a recording tail by a fraction of a
/// frame; the audio length is authoritative.
inline SegmentList clip_segments(const SegmentList& segs, double total_sec) {
    SegmentList out;
    for (const Segment& s : segs) {
        const double onset = std::max(0.0, s.onset);
        const double end = std::min(s.end(), total_sec);
        if (end - onset > 1e-9) out.push_back({onset, end - onset, s.label});
    }
    return out;
}

/// One "onset duration label" triple per line, 2-decimal fixed point.
inline std::string write_segments_text(const SegmentList& segs) {
    std::string out;
    char line[128];
    for (const Segment& s : segs) {
        std::snprintf(line, sizeof(line), "%.2f %.2f %s\n", s.onset, s.duration, s.label.c_str());
        out += line;
    }
    return out;
}

inline void write_segments(const std::string& path, const SegmentList& segs) {
    std::ofstream out(path);
    if (!out) throw IoError("write_segments: cannot open " + path);
    out << write_segments_text(segs);
}

inline SegmentList parse_segments_text(const std::string& text) {
    SegmentList segs;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        Segment s;
        if (!(ls >> s.onset >> s.duration)) {
            throw FormatError("segments: malformed line " + std::to_string(line_no));
        }
        if (!(ls >> s.label)) s.label = "speech";
        segs.push_back(s);
    }
    sort_segments(segs);
    return segs;
}

inline SegmentList read_segments(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("read_segments: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_segments_text(ss.str());
}

}  // namespace farfield
