#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "farfield/audio.hpp"
#include "farfield/beamform.hpp"
#include "farfield/common.hpp"
#include "farfield/diarize.hpp"
#include "farfield/features.hpp"
#include "farfield/gss.hpp"
#include "farfield/metrics.hpp"
#include "farfield/reseg.hpp"
#include "farfield/sad.hpp"
#include "farfield/segments.hpp"
#include "farfield/wpe.hpp"

namespace farfield {

constexpr int kPipelineNumMels = 24;
constexpr int kPipelineFftSize = 512;
constexpr int kPipelineFrameShift = 160;  // 10 ms at 16 kHz
constexpr const char* kCacheEnvVar = "FARFIELD_CACHE_DIR";

/// Flat `stage.param = value` configuration. Keys are validated against a
/// fixed schema when parsed; values are strings converted on access.
struct PipelineConfig {
    std::map<std::string, std::string> values;

    std::string get(const std::string& key, const std::string& fallback) const {
        auto it = values.find(key);
        return it == values.end() ? fallback : it->second;
    }
    int get_int(const std::string& key, int fallback) const {
        auto it = values.find(key);
        return it == values.end() ? fallback : std::stoi(it->second);
    }
    double get_double(const std::string& key, double fallback) const {
        auto it = values.find(key);
        return it == values.end() ? fallback : std::stod(it->second);
    }
    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values.find(key);
        if (it == values.end()) return fallback;
        return it->second == "true" || it->second == "1";
    }
    FusionCriterion get_fusion(const std::string& key, FusionCriterion fallback) const {
        auto it = values.find(key);
        if (it == values.end()) return fallback;
        return it->second == "mean" ? FusionCriterion::mean : FusionCriterion::max;
    }
};

namespace detail {

enum class ConfigKind { boolean, integer, real, fusion, overlap, text };

inline const std::map<std::string, ConfigKind>& config_schema() {
    static const std::map<std::string, ConfigKind> schema = {
        {"wpe.enabled", ConfigKind::boolean},
        {"wpe.taps", ConfigKind::integer},
        {"wpe.delay", ConfigKind::integer},
        {"wpe.alpha", ConfigKind::real},
        {"wpe.psd_context", ConfigKind::integer},
        {"beamform.block_len_sec", ConfigKind::real},
        {"beamform.max_delay_sec", ConfigKind::real},
        {"sad.min_speech_sec", ConfigKind::real},
        {"sad.min_silence_sec", ConfigKind::real},
        {"sad.max_speech_sec", ConfigKind::real},
        {"sad.speech_prior", ConfigKind::real},
        {"sad.fusion", ConfigKind::fusion},
        {"diarize.window_sec", ConfigKind::real},
        {"diarize.stride_sec", ConfigKind::real},
        {"diarize.num_speakers", ConfigKind::integer},
        {"diarize.threshold", ConfigKind::real},
        {"diarize.fusion", ConfigKind::fusion},
        {"diarize.plda", ConfigKind::text},
        {"reseg.enabled", ConfigKind::boolean},
        {"reseg.loop_prob", ConfigKind::real},
        {"reseg.subspace_dim", ConfigKind::integer},
        {"reseg.downsample", ConfigKind::integer},
        {"reseg.iters", ConfigKind::integer},
        {"reseg.acoustic_scale", ConfigKind::real},
        {"reseg.overlap", ConfigKind::overlap},
        {"reseg.min_dur_sec", ConfigKind::real},
        {"gss.enabled", ConfigKind::boolean},
        {"gss.context_sec", ConfigKind::real},
        {"gss.em_iters", ConfigKind::integer},
        {"score.collar_sec", ConfigKind::real},
        {"score.overlap", ConfigKind::boolean},
    };
    return schema;
}

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline void check_config_value(const std::string& key, ConfigKind kind, const std::string& value) {
    const auto bad = [&key, &value](const char* what) {
        throw FormatError("config: key " + key + " expects " + what + ", got '" + value + "'");
    };
    switch (kind) {
        case ConfigKind::boolean:
            if (value != "true" && value != "false" && value != "0" && value != "1")
                bad("a boolean");
            break;
        case ConfigKind::integer: {
            std::size_t used = 0;
            try {
                (void)std::stoi(value, &used);
            } catch (const std::exception&) {
                bad("an integer");
            }
            if (used != value.size()) bad("an integer");
            break;
        }
        case ConfigKind::real: {
            std::size_t used = 0;
            try {
                (void)std::stod(value, &used);
            } catch (const std::exception&) {
                bad("a number");
            }
            if (used != value.size()) bad("a number");
            break;
        }
        case ConfigKind::fusion:
            if (value != "mean" && value != "max") bad("mean or max");
            break;
        case ConfigKind::overlap:
            if (value != "heuristic" && value.rfind("oracle:", 0) != 0)
                bad("heuristic or oracle:<file>");
            break;
        case ConfigKind::text:
            if (value.empty()) bad("a non-empty value");
            break;
    }
}

}  // namespace detail

inline PipelineConfig parse_config(const std::string& text) {
    PipelineConfig cfg;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        const std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw FormatError("config line " + std::to_string(line_no) + ": expected key = value");
        const std::string key = detail::trim(t.substr(0, eq));
        const std::string value = detail::trim(t.substr(eq + 1));
        const auto& schema = detail::config_schema();
        auto it = schema.find(key);
        if (it == schema.end())
            throw FormatError("config line " + std::to_string(line_no) + ": unknown key " + key);
        detail::check_config_value(key, it->second, value);
        cfg.values[key] = value;
    }
    return cfg;
}

inline PipelineConfig read_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("read_config: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 14695981039346656037ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("hash_file: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return fnv1a(buf.str());
}

namespace detail {

inline std::string hex64(std::uint64_t v) {
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << v;
    return out.str();
}

/// Copies stage outputs between the working directory and a content-addressed
/// cache. A stage entry counts only once its marker file exists.
class StageStore {
public:
    StageStore(std::string out_dir, std::string cache_dir)
        : out_(std::move(out_dir)), cache_(std::move(cache_dir)) {}

    bool restore(const std::string& stage, std::uint64_t key,
                 const std::vector<std::string>& rel_files) const {
        if (cache_.empty()) return false;
        namespace fs = std::filesystem;
        const fs::path entry = fs::path(cache_) / (stage + "-" + hex64(key));
        if (!fs::exists(entry / "done")) return false;
        for (const std::string& f : rel_files) {
            const fs::path src = entry / f;
            if (!fs::exists(src)) return false;
        }
        for (const std::string& f : rel_files) {
            const fs::path dst = fs::path(out_) / f;
            fs::create_directories(dst.parent_path());
            fs::copy_file(entry / f, dst, fs::copy_options::overwrite_existing);
        }
        return true;
    }

    void store(const std::string& stage, std::uint64_t key,
               const std::vector<std::string>& rel_files) const {
        if (cache_.empty()) return;
        namespace fs = std::filesystem;
        const fs::path entry = fs::path(cache_) / (stage + "-" + hex64(key));
        for (const std::string& f : rel_files) {
            const fs::path dst = entry / f;
            fs::create_directories(dst.parent_path());
            fs::copy_file(fs::path(out_) / f, dst, fs::copy_options::overwrite_existing);
        }
        std::ofstream marker(entry / "done");
        marker << "ok\n";
    }

private:
    std::string out_;
    std::string cache_;
};

inline std::vector<Segment> parse_span_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("overlap spans: cannot open " + path);
    std::vector<Segment> spans;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::istringstream row(t);
        double onset = 0.0, duration = 0.0;
        if (!(row >> onset >> duration))
            throw FormatError("overlap spans line " + std::to_string(line_no) +
                              ": expected onset and duration");
        spans.push_back({onset, duration, "overlap"});
    }
    return spans;
}

inline std::string sanitize_label(const std::string& label) {
    std::string out = label;
    for (char& c : out)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') c = '_';
    return out;
}

inline std::string utterance_wav_name(const Segment& seg) {
    return sanitize_label(seg.label) + "-" + std::to_string(std::llround(seg.onset * 1000.0)) +
           "-" + std::to_string(std::llround(seg.end() * 1000.0)) + ".wav";
}

}  // namespace detail

struct PipelineInputs {
    std::vector<std::string> array_wavs;
    std::string oracle_rttm;     // non-empty switches to the oracle-segment path
    std::string reference_rttm;  // non-empty enables scoring
    std::string out_dir;
    std::string cache_dir;  // empty falls back to the cache environment variable
    std::string recording_id = "rec";
};

struct PipelineResult {
    Rttm diarization;
    DiarScore score;
    double jer = 0.0;
    bool scored = false;
    std::vector<std::string> enhanced_files;
    std::vector<std::string> stages_computed;
    std::vector<std::string> stages_reused;
};

/// Runs dereverberation, per-array beamforming, array-fused speech detection
/// and clustering, overlap-aware resegmentation, and per-utterance source
/// separation on one recording. An oracle segment file replaces the detection
/// and clustering stages. Stage outputs land in out_dir and are reused from
/// the cache directory when the same stage ran on the same inputs before.
inline PipelineResult run_pipeline(const PipelineConfig& cfg, const PipelineInputs& in) {
    namespace fs = std::filesystem;
    if (in.array_wavs.empty()) throw DataError("pipeline: no input arrays");
    if (in.out_dir.empty()) throw DataError("pipeline: no output directory");
    fs::create_directories(in.out_dir);
    std::string cache_dir = in.cache_dir;
    if (cache_dir.empty()) {
        const char* env = std::getenv(kCacheEnvVar);
        if (env != nullptr) cache_dir = env;
    }
    if (!cache_dir.empty()) fs::create_directories(cache_dir);
    const detail::StageStore store(in.out_dir, cache_dir);
    const auto out_path = [&in](const std::string& rel) {
        return (fs::path(in.out_dir) / rel).string();
    };

    PipelineResult result;
    std::uint64_t h = fnv1a("inputs|" + in.recording_id);
    for (const std::string& w : in.array_wavs) h = fnv1a(detail::hex64(hash_file(w)), h);

    std::vector<MultichannelAudio> arrays;
    arrays.reserve(in.array_wavs.size());
    for (const std::string& w : in.array_wavs) arrays.push_back(read_wav(w));
    const int fs_rate = arrays[0].sample_rate;
    for (const MultichannelAudio& a : arrays)
        if (a.sample_rate != fs_rate || a.num_samples() != arrays[0].num_samples())
            throw DataError("pipeline: arrays disagree on rate or length");
    const int num_arrays = static_cast<int>(arrays.size());

    const auto run_stage = [&result, &store](const std::string& stage, std::uint64_t key,
                                             const std::vector<std::string>& files,
                                             const std::function<void()>& compute) {
        if (store.restore(stage, key, files)) {
            result.stages_reused.push_back(stage);
            return;
        }
        compute();
        store.store(stage, key, files);
        result.stages_computed.push_back(stage);
    };

    // Dereverberation.
    std::vector<MultichannelAudio> derev;
    if (cfg.get_bool("wpe.enabled", true)) {
        WpeConfig wc;
        wc.taps = cfg.get_int("wpe.taps", wc.taps);
        wc.delay = cfg.get_int("wpe.delay", wc.delay);
        wc.alpha = cfg.get_double("wpe.alpha", wc.alpha);
        wc.psd_context = cfg.get_int("wpe.psd_context", wc.psd_context);
        std::ostringstream params;
        params << "wpe|" << wc.taps << "|" << wc.delay << "|" << wc.alpha << "|" << wc.psd_context;
        h = fnv1a(params.str(), h);
        std::vector<std::string> files;
        for (int a = 0; a < num_arrays; ++a) files.push_back("wpe_a" + std::to_string(a) + ".wav");
        run_stage("wpe", h, files, [&arrays, &files, &wc, &out_path, num_arrays] {
            for (int a = 0; a < num_arrays; ++a)
                write_wav(out_path(files[static_cast<std::size_t>(a)]),
                          wpe_process(arrays[static_cast<std::size_t>(a)], wc));
        });
        derev.reserve(files.size());
        for (const std::string& f : files) derev.push_back(read_wav(out_path(f)));
    } else {
        h = fnv1a("wpe|off", h);
        derev = arrays;
    }

    // Per-array beamforming.
    const double block_len = cfg.get_double("beamform.block_len_sec", kDefaultBlockLenSec);
    const double max_delay = cfg.get_double("beamform.max_delay_sec", kDefaultMaxDelaySec);
    {
        std::ostringstream params;
        params << "beamform|" << block_len << "|" << max_delay;
        h = fnv1a(params.str(), h);
    }
    std::vector<std::string> beam_files;
    for (int a = 0; a < num_arrays; ++a) beam_files.push_back("beam_a" + std::to_string(a) + ".wav");
    run_stage("beamform", h, beam_files, [&derev, &beam_files, &out_path, block_len, max_delay,
                                          num_arrays] {
        for (int a = 0; a < num_arrays; ++a) {
            const MultichannelAudio& src = derev[static_cast<std::size_t>(a)];
            const TdoaTrack track = track_tdoa(src, block_len, max_delay);
            write_wav(out_path(beam_files[static_cast<std::size_t>(a)]), delay_and_sum(src, track));
        }
    });
    std::vector<MultichannelAudio> beams;
    beams.reserve(beam_files.size());
    for (const std::string& f : beam_files) beams.push_back(read_wav(out_path(f)));

    const auto beam_features = [&beams](int a) {
        return logmel(beams[static_cast<std::size_t>(a)], kPipelineNumMels, kPipelineFftSize,
                      kPipelineFrameShift);
    };
    const auto fused_sad = [&beam_features, &cfg, num_arrays] {
        std::vector<FramePosteriors> per_array;
        per_array.reserve(static_cast<std::size_t>(num_arrays));
        for (int a = 0; a < num_arrays; ++a)
            per_array.push_back(reference_posteriors(beam_features(a)));
        return fuse_posteriors(per_array, cfg.get_fusion("sad.fusion", FusionCriterion::max));
    };

    Rttm final_rttm;
    if (!in.oracle_rttm.empty()) {
        const Rttm oracle = read_rttm(in.oracle_rttm);
        Rttm filtered;
        for (const RttmRecord& r : oracle.records)
            if (r.recording_id == in.recording_id) filtered.records.push_back(r);
        if (filtered.records.empty())
            throw DataError("pipeline: oracle RTTM has no records for " + in.recording_id);
        final_rttm = filtered;
        write_rttm(out_path("final.rttm"), final_rttm);
        h = fnv1a("oracle|" + detail::hex64(hash_file(in.oracle_rttm)), h);
    } else {
        // Speech activity detection with posterior fusion.
        SadHmmConfig sad_cfg;
        sad_cfg.min_speech_sec = cfg.get_double("sad.min_speech_sec", sad_cfg.min_speech_sec);
        sad_cfg.min_silence_sec = cfg.get_double("sad.min_silence_sec", sad_cfg.min_silence_sec);
        sad_cfg.max_speech_sec = cfg.get_double("sad.max_speech_sec", sad_cfg.max_speech_sec);
        sad_cfg.speech_prior = cfg.get_double("sad.speech_prior", sad_cfg.speech_prior);
        {
            std::ostringstream params;
            params << "sad|" << sad_cfg.min_speech_sec << "|" << sad_cfg.min_silence_sec << "|"
                   << sad_cfg.max_speech_sec << "|" << sad_cfg.speech_prior << "|"
                   << cfg.get("sad.fusion", "max");
            h = fnv1a(params.str(), h);
        }
        run_stage("sad", h, {"sad_speech.txt"}, [&fused_sad, &sad_cfg, &out_path] {
            write_segments(out_path("sad_speech.txt"), viterbi_smooth(fused_sad(), sad_cfg));
        });
        const SegmentList speech = read_segments(out_path("sad_speech.txt"));
        if (speech.empty()) throw DataError("pipeline: no speech detected");

        // First-pass clustering.
        const std::string plda_path = cfg.get("diarize.plda", "");
        if (plda_path.empty())
            throw DataError("pipeline: diarize.plda is required without an oracle RTTM");
        const double window_sec = cfg.get_double("diarize.window_sec", 1.5);
        const double stride_sec = cfg.get_double("diarize.stride_sec", 0.25);
        const int num_speakers = cfg.get_int("diarize.num_speakers", 0);
        const double threshold = cfg.get_double("diarize.threshold", 0.0);
        {
            std::ostringstream params;
            params << "diarize|" << window_sec << "|" << stride_sec << "|" << num_speakers << "|"
                   << threshold << "|" << cfg.get("diarize.fusion", "max") << "|"
                   << detail::hex64(hash_file(plda_path));
            h = fnv1a(params.str(), h);
        }
        run_stage("diarize", h, {"first_pass.rttm"}, [&] {
            const SubsegmentGrid grid = cut_subsegments(speech, window_sec, stride_sec);
            if (grid.windows.empty()) throw DataError("pipeline: no subsegments to cluster");
            const PldaModel plda = read_plda(plda_path);
            std::vector<SimilarityMatrix> sims;
            sims.reserve(static_cast<std::size_t>(num_arrays));
            for (int a = 0; a < num_arrays; ++a)
                sims.push_back(plda_similarity(plda, extract_embeddings(beam_features(a), grid, a)));
            const SimilarityMatrix fused =
                fuse_plda_scores(sims, cfg.get_fusion("diarize.fusion", FusionCriterion::max));
            const AhcStop stop = num_speakers > 0 ? AhcStop::by_count(num_speakers)
                                                  : AhcStop::by_threshold(threshold);
            const std::vector<int> labels = ahc_cluster(fused, stop);
            write_rttm(out_path("first_pass.rttm"),
                       segments_to_rttm(windows_to_segments(labels, grid), in.recording_id));
        });
        const Rttm first_pass = read_rttm(out_path("first_pass.rttm"));

        // Overlap-aware resegmentation.
        if (cfg.get_bool("reseg.enabled", true)) {
            VbConfig vb;
            vb.subspace_dim = cfg.get_int("reseg.subspace_dim", vb.subspace_dim);
            vb.loop_prob = cfg.get_double("reseg.loop_prob", vb.loop_prob);
            vb.downsample = cfg.get_int("reseg.downsample", vb.downsample);
            vb.num_iters = cfg.get_int("reseg.iters", vb.num_iters);
            vb.acoustic_scale = cfg.get_double("reseg.acoustic_scale", vb.acoustic_scale);
            const std::string overlap_mode = cfg.get("reseg.overlap", "heuristic");
            const double min_dur = cfg.get_double("reseg.min_dur_sec", 0.2);
            {
                std::ostringstream params;
                params << "reseg|" << vb.subspace_dim << "|" << vb.loop_prob << "|"
                       << vb.downsample << "|" << vb.num_iters << "|" << vb.acoustic_scale << "|"
                       << min_dur << "|" << overlap_mode;
                if (overlap_mode.rfind("oracle:", 0) == 0)
                    params << "|" << detail::hex64(hash_file(overlap_mode.substr(7)));
                h = fnv1a(params.str(), h);
            }
            run_stage("reseg", h, {"final.rttm"}, [&] {
                const FeatureMatrix feats = beam_features(0);
                const std::vector<Segment> fp_segs = rttm_to_segments(first_pass, in.recording_id);
                std::vector<std::string> speakers;
                for (const Segment& s : fp_segs) speakers.push_back(s.label);
                std::sort(speakers.begin(), speakers.end());
                speakers.erase(std::unique(speakers.begin(), speakers.end()), speakers.end());
                QMatrix q0 = init_q(fp_segs, feats.frames(), speakers, speech);
                const QMatrix q = vb_resegment(feats, q0, vb);
                OverlapMask mask;
                if (overlap_mode.rfind("oracle:", 0) == 0)
                    mask = oracle_overlap_from_spans(detail::parse_span_file(overlap_mode.substr(7)),
                                                     feats.frames());
                else
                    mask = heuristic_overlap(fused_sad(), feats);
                std::vector<Segment> segs = assign_speakers(q, mask, speech, speakers);
                segs = filter_short(segs, min_dur);
                write_rttm(out_path("final.rttm"), segments_to_rttm(segs, in.recording_id));
            });
        } else {
            h = fnv1a("reseg|off", h);
            write_rttm(out_path("final.rttm"), first_pass);
        }
        final_rttm = read_rttm(out_path("final.rttm"));
    }
    result.diarization = final_rttm;

    // Per-utterance source separation.
    if (cfg.get_bool("gss.enabled", true)) {
        GssConfig gc;
        gc.context_sec = cfg.get_double("gss.context_sec", gc.context_sec);
        gc.em_iters = cfg.get_int("gss.em_iters", gc.em_iters);
        {
            std::ostringstream params;
            params << "gss|" << gc.context_sec << "|" << gc.em_iters << "|"
                   << detail::hex64(fnv1a(emit_rttm(final_rttm)));
            h = fnv1a(params.str(), h);
        }
        const std::vector<Segment> segs = rttm_to_segments(final_rttm, in.recording_id);
        std::vector<std::string> files;
        files.reserve(segs.size());
        for (const Segment& s : segs) files.push_back("gss/" + detail::utterance_wav_name(s));
        run_stage("gss", h, files, [&derev, &segs, &files, &gc, &out_path, &in] {
            fs::create_directories(fs::path(in.out_dir) / "gss");
            for (std::size_t i = 0; i < segs.size(); ++i) {
                const GssResult res = gss_enhance(derev, segs, segs[i], gc);
                write_wav(out_path(files[i]), res.audio);
            }
        });
        for (const std::string& f : files) result.enhanced_files.push_back(out_path(f));
    }

    // Scoring against a reference.
    if (!in.reference_rttm.empty()) {
        const Rttm ref = read_rttm(in.reference_rttm);
        const double collar = cfg.get_double("score.collar_sec", 0.0);
        const bool overlap = cfg.get_bool("score.overlap", true);
        result.score = compute_der(ref, final_rttm, collar, overlap);
        result.jer = compute_jer(ref, final_rttm);
        result.score.jer = result.jer;
        result.scored = true;
        std::ostringstream line;
        line.setf(std::ios::fixed);
        line.precision(2);
        line << 100.0 * result.score.der << " " << 100.0 * result.score.missed_speech << " "
             << 100.0 * result.score.false_alarm << " " << 100.0 * result.score.speaker_error
             << " " << 100.0 * result.jer << "\n";
        std::ofstream out(out_path("scores.txt"));
        out << line.str();
    }
    return result;
}

}  // namespace farfield
