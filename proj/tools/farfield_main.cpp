#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "farfield.hpp"

namespace fs = std::filesystem;
using namespace farfield;

namespace {

std::string recording_id_of(const Rttm& rttm, const std::string& path) {
    if (rttm.records.empty()) throw DataError(path + ": no records");
    return rttm.records.front().recording_id;
}

FusionCriterion to_fusion(const std::string& name) {
    return name == "mean" ? FusionCriterion::mean : FusionCriterion::max;
}

std::vector<MultichannelAudio> read_arrays(const std::vector<std::string>& paths) {
    std::vector<MultichannelAudio> arrays;
    arrays.reserve(paths.size());
    for (const std::string& p : paths) arrays.push_back(read_wav(p));
    for (const MultichannelAudio& a : arrays)
        if (a.sample_rate != arrays[0].sample_rate || a.num_samples() != arrays[0].num_samples())
            throw DataError("input arrays disagree on sample rate or length");
    return arrays;
}

void write_spans_10ms(const std::string& path, const std::vector<char>& mask) {
    std::ofstream out(path);
    if (!out) throw IoError(path + ": cannot open for writing");
    char line[64];
    std::size_t i = 0;
    while (i < mask.size()) {
        if (!mask[i]) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < mask.size() && mask[j]) ++j;
        std::snprintf(line, sizeof(line), "%.2f %.2f\n", 0.01 * static_cast<double>(i),
                      0.01 * static_cast<double>(j - i));
        out << line;
        i = j;
    }
}

void cmd_simulate(const SceneSpec& spec, const std::string& out_dir) {
    fs::create_directories(out_dir);
    const auto [arrays, truth] = simulate_scene(spec);
    for (std::size_t a = 0; a < arrays.size(); ++a) {
        const std::string path = (fs::path(out_dir) / ("array" + std::to_string(a) + ".wav")).string();
        write_wav(path, arrays[a]);
        std::cout << path << "\n";
    }
    const std::string rttm_path = (fs::path(out_dir) / "truth.rttm").string();
    write_rttm(rttm_path, truth.rttm);
    std::cout << rttm_path << "\n";
    const std::string overlap_path = (fs::path(out_dir) / "overlap.txt").string();
    write_spans_10ms(overlap_path, truth.overlap_mask_10ms);
    std::cout << overlap_path << "\n";
}

void cmd_sad(const std::vector<std::string>& inputs, const std::string& fusion,
             const std::string& out) {
    std::vector<FramePosteriors> per_array;
    per_array.reserve(inputs.size());
    for (const std::string& p : inputs)
        per_array.push_back(reference_posteriors(
            logmel(read_wav(p), kPipelineNumMels, kPipelineFftSize, kPipelineFrameShift)));
    const FramePosteriors fused = fuse_posteriors(per_array, to_fusion(fusion));
    write_segments(out, viterbi_smooth(fused, SadHmmConfig{}));
}

void cmd_diarize(const std::string& sad_path, const std::vector<std::string>& inputs,
                 const std::string& plda_path, const std::string& fusion, int num_speakers,
                 double threshold, double window_sec, double stride_sec, const std::string& rec_id,
                 const std::string& out) {
    const SegmentList speech = read_segments(sad_path);
    if (speech.empty()) throw DataError(sad_path + ": no speech segments");
    const SubsegmentGrid grid = cut_subsegments(speech, window_sec, stride_sec);
    if (grid.windows.empty()) throw DataError("no subsegments to cluster");
    const PldaModel plda = read_plda(plda_path);
    std::vector<SimilarityMatrix> sims;
    sims.reserve(inputs.size());
    for (std::size_t a = 0; a < inputs.size(); ++a) {
        const FeatureMatrix feats =
            logmel(read_wav(inputs[a]), kPipelineNumMels, kPipelineFftSize, kPipelineFrameShift);
        sims.push_back(plda_similarity(plda, extract_embeddings(feats, grid, static_cast<int>(a))));
    }
    const SimilarityMatrix fused = fuse_plda_scores(sims, to_fusion(fusion));
    const AhcStop stop =
        num_speakers > 0 ? AhcStop::by_count(num_speakers) : AhcStop::by_threshold(threshold);
    const std::vector<int> labels = ahc_cluster(fused, stop);
    write_rttm(out, segments_to_rttm(windows_to_segments(labels, grid), rec_id));
}

void cmd_reseg(const std::string& in_wav, const std::string& rttm_path,
               const std::string& overlap_mode, double min_dur, const std::string& out) {
    const Rttm first_pass = read_rttm(rttm_path);
    const std::string rec_id = recording_id_of(first_pass, rttm_path);
    const std::vector<Segment> fp_segs = rttm_to_segments(first_pass, rec_id);
    const FeatureMatrix feats =
        logmel(read_wav(in_wav), kPipelineNumMels, kPipelineFftSize, kPipelineFrameShift);
    std::vector<std::string> speakers;
    for (const Segment& s : fp_segs) speakers.push_back(s.label);
    std::sort(speakers.begin(), speakers.end());
    speakers.erase(std::unique(speakers.begin(), speakers.end()), speakers.end());
    const SegmentList speech = merge_spans(fp_segs);
    const QMatrix q0 = init_q(fp_segs, feats.frames(), speakers, speech);
    const QMatrix q = vb_resegment(feats, q0, VbConfig{});
    OverlapMask mask;
    if (overlap_mode.rfind("oracle:", 0) == 0)
        mask = oracle_overlap_from_spans(detail::parse_span_file(overlap_mode.substr(7)),
                                         feats.frames());
    else
        mask = heuristic_overlap(reference_posteriors(feats), feats);
    std::vector<Segment> segs = assign_speakers(q, mask, speech, speakers);
    segs = filter_short(segs, min_dur);
    write_rttm(out, segments_to_rttm(segs, rec_id));
}

void cmd_gss(const std::vector<std::string>& inputs, const std::string& rttm_path,
             const std::string& speaker, double context_sec, int em_iters,
             const std::string& out_dir) {
    const Rttm rttm = read_rttm(rttm_path);
    const std::string rec_id = recording_id_of(rttm, rttm_path);
    const std::vector<Segment> segs = rttm_to_segments(rttm, rec_id);
    std::vector<Segment> targets;
    for (const Segment& s : segs)
        if (s.label == speaker) targets.push_back(s);
    if (targets.empty()) throw DataError(rttm_path + ": no segments for speaker " + speaker);
    const std::vector<MultichannelAudio> arrays = read_arrays(inputs);
    GssConfig gc;
    gc.context_sec = context_sec;
    gc.em_iters = em_iters;
    fs::create_directories(out_dir);
    for (const Segment& utt : targets) {
        const GssResult res = gss_enhance(arrays, segs, utt, gc);
        const std::string path = (fs::path(out_dir) / detail::utterance_wav_name(utt)).string();
        write_wav(path, res.audio);
        std::cout << path << "\n";
    }
}

void cmd_score(const std::string& ref_path, const std::string& hyp_path, double collar,
               bool ignore_overlap) {
    const Rttm ref = read_rttm(ref_path);
    const Rttm hyp = read_rttm(hyp_path);
    const DiarScore score = compute_der(ref, hyp, collar, !ignore_overlap);
    const double jer = compute_jer(ref, hyp);
    std::printf("%.2f %.2f %.2f %.2f %.2f\n", 100.0 * score.der, 100.0 * score.missed_speech,
                100.0 * score.false_alarm, 100.0 * score.speaker_error, 100.0 * jer);
}

void cmd_run(const std::string& config_path, const PipelineInputs& inputs) {
    const PipelineConfig cfg =
        config_path.empty() ? PipelineConfig{} : read_config(config_path);
    const PipelineResult res = run_pipeline(cfg, inputs);
    for (const std::string& s : res.stages_computed) std::cout << "computed " << s << "\n";
    for (const std::string& s : res.stages_reused) std::cout << "reused " << s << "\n";
    std::cout << (fs::path(inputs.out_dir) / "final.rttm").string() << "\n";
    if (res.scored)
        std::printf("DER %.2f MS %.2f FA %.2f SE %.2f JER %.2f\n", 100.0 * res.score.der,
                    100.0 * res.score.missed_speech, 100.0 * res.score.false_alarm,
                    100.0 * res.score.speaker_error, 100.0 * res.jer);
}

void cmd_plda_train(int num_speakers, int clips, std::uint64_t seed, double clip_sec,
                    const std::string& out) {
    const int fs_rate = 16000;
    std::vector<std::vector<Eigen::VectorXd>> speakers;
    for (int s = 0; s < num_speakers; ++s) {
        Rng rng(seed + static_cast<std::uint64_t>(s));
        const double formants[3] = {rng.uniform(250.0, 800.0), rng.uniform(900.0, 2000.0),
                                    rng.uniform(2100.0, 3300.0)};
        std::vector<Eigen::VectorXd> clip_vecs;
        for (int c = 0; c < clips; ++c) {
            const auto n = static_cast<std::size_t>(clip_sec * fs_rate);
            const std::vector<double> utt = detail::synth_utterance(rng, n, formants, fs_rate);
            MultichannelAudio audio;
            audio.sample_rate = fs_rate;
            audio.samples.resize(1, static_cast<Eigen::Index>(utt.size()));
            for (std::size_t i = 0; i < utt.size(); ++i)
                audio.samples(0, static_cast<Eigen::Index>(i)) = utt[i];
            clip_vecs.push_back(
                reference_embedding(
                    logmel(audio, kPipelineNumMels, kPipelineFftSize, kPipelineFrameShift))
                    .vector);
        }
        speakers.push_back(std::move(clip_vecs));
    }
    write_plda(out, plda_train(speakers));
    std::cout << out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Far-field multichannel speech pipeline"};
    app.require_subcommand(1);

    SceneSpec sim_spec;
    std::string sim_out;
    auto* sim = app.add_subcommand("simulate", "Render a synthetic multichannel scene");
    sim->add_option("--out-dir", sim_out, "Output directory")->required();
    sim->add_option("--speakers", sim_spec.num_speakers, "Number of speakers");
    sim->add_option("--arrays", sim_spec.num_arrays, "Number of arrays");
    sim->add_option("--channels", sim_spec.channels_per_array, "Channels per array");
    sim->add_option("--duration", sim_spec.duration_sec, "Scene length in seconds");
    sim->add_option("--overlap", sim_spec.overlap_ratio, "Target overlap ratio");
    sim->add_option("--snr", sim_spec.snr_db, "Signal-to-noise ratio in dB");
    sim->add_option("--t60", sim_spec.reverb_t60_sec, "Reverberation time in seconds");
    sim->add_option("--seed", sim_spec.seed, "Random seed");
    sim->add_option("--id", sim_spec.recording_id, "Recording id");

    std::string wpe_in, wpe_out;
    WpeConfig wpe_cfg;
    auto* wpe = app.add_subcommand("wpe", "Dereverberate a multichannel WAV");
    wpe->add_option("--in", wpe_in, "Input WAV")->required();
    wpe->add_option("--out", wpe_out, "Output WAV")->required();
    wpe->add_option("--taps", wpe_cfg.taps, "Filter taps per channel");
    wpe->add_option("--delay", wpe_cfg.delay, "Prediction delay in frames");
    wpe->add_option("--alpha", wpe_cfg.alpha, "Recursive PSD smoothing factor");

    std::string beam_in, beam_out;
    double beam_block = kDefaultBlockLenSec, beam_delay = kDefaultMaxDelaySec;
    auto* beam = app.add_subcommand("beamform", "Steer and sum a multichannel WAV");
    beam->add_option("--in", beam_in, "Input WAV")->required();
    beam->add_option("--out", beam_out, "Output WAV")->required();
    beam->add_option("--block-len", beam_block, "Delay tracking block in seconds");
    beam->add_option("--max-delay", beam_delay, "Largest delay searched in seconds");

    std::vector<std::string> sad_in;
    std::string sad_fusion = "max", sad_out;
    auto* sad = app.add_subcommand("sad", "Detect speech across arrays");
    sad->add_option("--in", sad_in, "One WAV per array")->required()->expected(-1);
    sad->add_option("--fusion", sad_fusion, "Posterior fusion rule")
        ->check(CLI::IsMember({"mean", "max"}));
    sad->add_option("--out", sad_out, "Output segments file")->required();

    std::string dia_sad, dia_plda, dia_fusion = "max", dia_id = "rec", dia_out;
    std::vector<std::string> dia_in;
    int dia_speakers = 0;
    double dia_threshold = 0.0, dia_window = 1.5, dia_stride = 0.25;
    auto* dia = app.add_subcommand("diarize", "Cluster speech into speakers");
    dia->add_option("--sad", dia_sad, "Speech segments file")->required();
    dia->add_option("--in", dia_in, "One WAV per array")->required()->expected(-1);
    dia->add_option("--plda", dia_plda, "Speaker model file")->required();
    dia->add_option("--fusion", dia_fusion, "Score fusion rule")
        ->check(CLI::IsMember({"mean", "max"}));
    dia->add_option("--num-speakers", dia_speakers, "Cluster count, 0 uses the threshold");
    dia->add_option("--threshold", dia_threshold, "Merge threshold when count is 0");
    dia->add_option("--window", dia_window, "Subsegment window in seconds");
    dia->add_option("--stride", dia_stride, "Subsegment stride in seconds");
    dia->add_option("--id", dia_id, "Recording id for the output");
    dia->add_option("--out", dia_out, "Output RTTM")->required();

    std::string rs_in, rs_rttm, rs_overlap = "heuristic", rs_out;
    double rs_min_dur = 0.2;
    auto* rs = app.add_subcommand("reseg", "Refine speaker boundaries and overlap");
    rs->add_option("--in", rs_in, "Input WAV")->required();
    rs->add_option("--rttm", rs_rttm, "First-pass RTTM")->required();
    rs->add_option("--overlap", rs_overlap, "heuristic or oracle:<spans file>")
        ->check([](const std::string& v) {
            return v == "heuristic" || v.rfind("oracle:", 0) == 0
                       ? std::string{}
                       : std::string{"expected heuristic or oracle:<file>"};
        });
    rs->add_option("--min-dur", rs_min_dur, "Drop segments shorter than this");
    rs->add_option("--out", rs_out, "Output RTTM")->required();

    std::vector<std::string> gss_in;
    std::string gss_rttm, gss_speaker, gss_outdir;
    double gss_context = kGssContextSec;
    int gss_iters = kGssEmIters;
    auto* gss = app.add_subcommand("gss", "Separate one speaker from a mixture");
    gss->add_option("--in", gss_in, "One WAV per array")->required()->expected(-1);
    gss->add_option("--rttm", gss_rttm, "Segments for all speakers")->required();
    gss->add_option("--speaker", gss_speaker, "Speaker label to extract")->required();
    gss->add_option("--context", gss_context, "Context seconds around each utterance");
    gss->add_option("--em-iters", gss_iters, "Mask estimation iterations");
    gss->add_option("--outdir", gss_outdir, "Output directory")->required();

    std::string score_ref, score_hyp;
    double score_collar = 0.25;
    bool score_ignore_overlap = false;
    auto* score = app.add_subcommand("score", "Score a hypothesis RTTM against a reference");
    score->add_option("--ref", score_ref, "Reference RTTM")->required();
    score->add_option("--hyp", score_hyp, "Hypothesis RTTM")->required();
    score->add_option("--collar", score_collar, "No-score collar in seconds");
    score->add_flag("--ignore-overlap", score_ignore_overlap, "Score only single-speaker regions");

    std::string run_config;
    PipelineInputs run_inputs;
    auto* run = app.add_subcommand("run", "Run the full pipeline on one recording");
    run->add_option("--config", run_config, "Pipeline configuration file");
    run->add_option("--in", run_inputs.array_wavs, "One WAV per array")->required()->expected(-1);
    run->add_option("--out", run_inputs.out_dir, "Output directory")->required();
    run->add_option("--oracle-rttm", run_inputs.oracle_rttm, "Skip detection, use these segments");
    run->add_option("--ref-rttm", run_inputs.reference_rttm, "Score against this reference");
    run->add_option("--cache", run_inputs.cache_dir, "Stage cache directory");
    run->add_option("--id", run_inputs.recording_id, "Recording id");

    std::string pt_out;
    int pt_speakers = 16, pt_clips = 4;
    std::uint64_t pt_seed = 9000;
    double pt_clip_sec = 1.5;
    auto* pt = app.add_subcommand("plda-train", "Train a speaker model on synthetic voices");
    pt->add_option("--out", pt_out, "Output model file")->required();
    pt->add_option("--speakers", pt_speakers, "Training speakers");
    pt->add_option("--clips", pt_clips, "Clips per speaker");
    pt->add_option("--seed", pt_seed, "Random seed");
    pt->add_option("--clip-sec", pt_clip_sec, "Clip length in seconds");

    try {
        app.parse(argc, argv);
        if (sim->parsed()) cmd_simulate(sim_spec, sim_out);
        if (wpe->parsed()) write_wav(wpe_out, wpe_process(read_wav(wpe_in), wpe_cfg));
        if (beam->parsed()) {
            const MultichannelAudio audio = read_wav(beam_in);
            write_wav(beam_out, delay_and_sum(audio, track_tdoa(audio, beam_block, beam_delay)));
        }
        if (sad->parsed()) cmd_sad(sad_in, sad_fusion, sad_out);
        if (dia->parsed())
            cmd_diarize(dia_sad, dia_in, dia_plda, dia_fusion, dia_speakers, dia_threshold,
                        dia_window, dia_stride, dia_id, dia_out);
        if (rs->parsed()) cmd_reseg(rs_in, rs_rttm, rs_overlap, rs_min_dur, rs_out);
        if (gss->parsed())
            cmd_gss(gss_in, gss_rttm, gss_speaker, gss_context, gss_iters, gss_outdir);
        if (score->parsed()) cmd_score(score_ref, score_hyp, score_collar, score_ignore_overlap);
        if (run->parsed()) cmd_run(run_config, run_inputs);
        if (pt->parsed()) cmd_plda_train(pt_speakers, pt_clips, pt_seed, pt_clip_sec, pt_out);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
