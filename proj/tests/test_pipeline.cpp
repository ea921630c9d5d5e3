#include <algorithm>
#include <filesystem>
#include <fstream>

#include <catch_amalgamated.hpp>

#include "farfield.hpp"

using namespace farfield;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void train_plda_file(const std::string& path) {
    const int fs_rate = 16000;
    std::vector<std::vector<Eigen::VectorXd>> speakers;
    for (int s = 0; s < 16; ++s) {
        Rng rng(9000 + static_cast<std::uint64_t>(s));
        double formants[3] = {rng.uniform(250.0, 800.0), rng.uniform(900.0, 2000.0),
                              rng.uniform(2100.0, 3300.0)};
        std::vector<Eigen::VectorXd> clips;
        for (int c = 0; c < 4; ++c) {
            const std::vector<double> utt = detail::synth_utterance(
                rng, static_cast<std::size_t>(fs_rate) * 3 / 2, formants, fs_rate);
            MultichannelAudio audio;
            audio.sample_rate = fs_rate;
            audio.samples.resize(1, static_cast<Eigen::Index>(utt.size()));
            for (std::size_t i = 0; i < utt.size(); ++i)
                audio.samples(0, static_cast<Eigen::Index>(i)) = utt[i];
            clips.push_back(
                reference_embedding(logmel(audio, kPipelineNumMels, kPipelineFftSize,
                                           kPipelineFrameShift))
                    .vector);
        }
        speakers.push_back(std::move(clips));
    }
    write_plda(path, plda_train(speakers));
}

struct SceneFiles {
    std::vector<std::string> wavs;
    std::string rttm;
    SceneTruth truth;
};

SceneFiles write_scene(const fs::path& dir, const SceneSpec& spec) {
    auto [arrays, truth] = simulate_scene(spec);
    SceneFiles out;
    for (std::size_t a = 0; a < arrays.size(); ++a) {
        const std::string p = (dir / ("array" + std::to_string(a) + ".wav")).string();
        write_wav(p, arrays[a]);
        out.wavs.push_back(p);
    }
    out.rttm = (dir / "truth.rttm").string();
    write_rttm(out.rttm, truth.rttm);
    out.truth = std::move(truth);
    return out;
}

}  // namespace

TEST_CASE("configuration parsing", "[pipeline]") {
    SECTION("values, comments and typed access") {
        PipelineConfig cfg = parse_config(
            "# comment\n"
            "\n"
            "wpe.taps = 8\n"
            "sad.fusion = mean\n"
            "reseg.loop_prob = 0.95\n"
            "gss.enabled = false\n"
            "reseg.overlap = oracle:/tmp/spans.txt\n");
        REQUIRE(cfg.get_int("wpe.taps", 10) == 8);
        REQUIRE(cfg.get_int("wpe.delay", 3) == 3);
        REQUIRE(cfg.get_fusion("sad.fusion", FusionCriterion::max) == FusionCriterion::mean);
        REQUIRE(cfg.get_double("reseg.loop_prob", 0.99) == Catch::Approx(0.95));
        REQUIRE_FALSE(cfg.get_bool("gss.enabled", true));
        REQUIRE(cfg.get("reseg.overlap", "") == "oracle:/tmp/spans.txt");
    }

    SECTION("schema violations are rejected") {
        REQUIRE_THROWS_AS(parse_config("wpe.tapz = 8\n"), FormatError);
        REQUIRE_THROWS_AS(parse_config("wpe.taps = eight\n"), FormatError);
        REQUIRE_THROWS_AS(parse_config("sad.fusion = median\n"), FormatError);
        REQUIRE_THROWS_AS(parse_config("reseg.overlap = sometimes\n"), FormatError);
        REQUIRE_THROWS_AS(parse_config("wpe.enabled = maybe\n"), FormatError);
        REQUIRE_THROWS_AS(parse_config("just some text\n"), FormatError);
        REQUIRE_THROWS_AS(parse_config("wpe.alpha = 0.99x\n"), FormatError);
    }
}

TEST_CASE("speaker model serialization", "[pipeline]") {
    std::mt19937 rng(5);
    std::normal_distribution<double> gauss;
    std::vector<std::vector<Eigen::VectorXd>> speakers;
    for (int s = 0; s < 6; ++s) {
        Eigen::VectorXd mean(5);
        for (int d = 0; d < 5; ++d) mean(d) = 3.0 * gauss(rng);
        std::vector<Eigen::VectorXd> clips;
        for (int c = 0; c < 5; ++c) {
            Eigen::VectorXd v = mean;
            for (int d = 0; d < 5; ++d) v(d) += gauss(rng);
            clips.push_back(v);
        }
        speakers.push_back(clips);
    }
    const PldaModel model = plda_train(speakers);
    const std::string bytes = emit_plda(model);
    const PldaModel back = parse_plda(bytes);
    REQUIRE(back.mean == model.mean);
    REQUIRE(back.between_cov == model.between_cov);
    REQUIRE(back.within_cov == model.within_cov);
    REQUIRE_THROWS_AS(parse_plda("nonsense"), FormatError);
    REQUIRE_THROWS_AS(parse_plda(bytes.substr(0, bytes.size() - 3)), FormatError);
    REQUIRE_THROWS_AS(parse_plda(bytes + "x"), FormatError);
}

TEST_CASE("full recording pipeline", "[pipeline]") {
    const fs::path dir = fresh_dir("farfield_pipeline_full");
    SceneSpec sc;
    sc.num_speakers = 3;
    sc.num_arrays = 2;
    sc.channels_per_array = 2;
    sc.duration_sec = 16.0;
    sc.overlap_ratio = 0.1;
    sc.snr_db = 30.0;
    sc.seed = 51;
    const SceneFiles scene = write_scene(dir, sc);
    const std::string plda_path = (dir / "model.plda").string();
    train_plda_file(plda_path);

    PipelineConfig cfg = parse_config(
        "wpe.enabled = false\n"
        "diarize.num_speakers = 3\n"
        "diarize.plda = " + plda_path + "\n"
        "gss.em_iters = 4\n");

    PipelineInputs inputs;
    inputs.array_wavs = scene.wavs;
    inputs.reference_rttm = scene.rttm;
    inputs.out_dir = (dir / "out").string();
    inputs.recording_id = "scene";

    const PipelineResult res = run_pipeline(cfg, inputs);
    REQUIRE_FALSE(res.diarization.records.empty());
    REQUIRE(res.scored);
    REQUIRE(std::isfinite(res.score.der));
    REQUIRE(res.score.der < 0.8);
    REQUIRE(res.score.der ==
            Catch::Approx(res.score.missed_speech + res.score.false_alarm +
                          res.score.speaker_error)
                .margin(1e-9));
    REQUIRE_FALSE(res.enhanced_files.empty());
    for (const std::string& f : res.enhanced_files) REQUIRE(fs::exists(f));
    REQUIRE(fs::exists(dir / "out" / "final.rttm"));
    REQUIRE(fs::exists(dir / "out" / "scores.txt"));

    SECTION("end to end determinism") {
        PipelineInputs again = inputs;
        again.out_dir = (dir / "out2").string();
        const PipelineResult res2 = run_pipeline(cfg, again);
        REQUIRE(emit_rttm(res2.diarization) == emit_rttm(res.diarization));
        REQUIRE(res2.enhanced_files.size() == res.enhanced_files.size());
        REQUIRE(file_bytes(res2.enhanced_files[0]) == file_bytes(res.enhanced_files[0]));
    }

    SECTION("disabling resegmentation still yields a scoreable result") {
        PipelineConfig no_reseg = cfg;
        no_reseg.values["reseg.enabled"] = "false";
        no_reseg.values["gss.enabled"] = "false";
        PipelineInputs alt = inputs;
        alt.out_dir = (dir / "out_noreseg").string();
        const PipelineResult res2 = run_pipeline(no_reseg, alt);
        REQUIRE_FALSE(res2.diarization.records.empty());
        const std::string first_pass = file_bytes((dir / "out_noreseg" / "first_pass.rttm").string());
        const std::string final_pass = file_bytes((dir / "out_noreseg" / "final.rttm").string());
        REQUIRE(first_pass == final_pass);
    }
}

TEST_CASE("pipeline caching and oracle mode", "[pipeline]") {
    const fs::path dir = fresh_dir("farfield_pipeline_cache");
    SceneSpec sc;
    sc.num_speakers = 2;
    sc.num_arrays = 1;
    sc.channels_per_array = 2;
    sc.duration_sec = 8.0;
    sc.snr_db = 30.0;
    sc.seed = 53;
    const SceneFiles scene = write_scene(dir, sc);
    const std::string plda_path = (dir / "model.plda").string();
    train_plda_file(plda_path);

    SECTION("a second run reuses every cached stage") {
        PipelineConfig cfg = parse_config(
            "wpe.taps = 6\n"
            "diarize.num_speakers = 2\n"
            "diarize.plda = " + plda_path + "\n"
            "gss.em_iters = 2\n");
        PipelineInputs inputs;
        inputs.array_wavs = scene.wavs;
        inputs.out_dir = (dir / "out_a").string();
        inputs.cache_dir = (dir / "cache").string();
        inputs.recording_id = "scene";

        const PipelineResult first = run_pipeline(cfg, inputs);
        const std::vector<std::string> expected = {"wpe", "beamform", "sad",
                                                   "diarize", "reseg", "gss"};
        REQUIRE(first.stages_computed == expected);
        REQUIRE(first.stages_reused.empty());

        PipelineInputs second = inputs;
        second.out_dir = (dir / "out_b").string();
        const PipelineResult rerun = run_pipeline(cfg, second);
        REQUIRE(rerun.stages_computed.empty());
        REQUIRE(rerun.stages_reused == expected);
        REQUIRE(emit_rttm(rerun.diarization) == emit_rttm(first.diarization));
        REQUIRE(file_bytes((dir / "out_b" / "final.rttm").string()) ==
                file_bytes((dir / "out_a" / "final.rttm").string()));

        PipelineConfig changed = cfg;
        changed.values["wpe.taps"] = "5";
        PipelineInputs third = inputs;
        third.out_dir = (dir / "out_c").string();
        const PipelineResult recompute = run_pipeline(changed, third);
        REQUIRE_FALSE(recompute.stages_computed.empty());
        REQUIRE(std::find(recompute.stages_computed.begin(), recompute.stages_computed.end(),
                          "wpe") != recompute.stages_computed.end());
    }

    SECTION("an oracle segment file bypasses detection and clustering") {
        PipelineConfig cfg = parse_config(
            "wpe.enabled = false\n"
            "gss.em_iters = 2\n");
        PipelineInputs inputs;
        inputs.array_wavs = scene.wavs;
        inputs.oracle_rttm = scene.rttm;
        inputs.reference_rttm = scene.rttm;
        inputs.out_dir = (dir / "out_oracle").string();
        inputs.recording_id = "scene";

        const PipelineResult res = run_pipeline(cfg, inputs);
        for (const std::string& stage : res.stages_computed) {
            REQUIRE(stage != "sad");
            REQUIRE(stage != "diarize");
            REQUIRE(stage != "reseg");
        }
        REQUIRE(res.diarization.records.size() == scene.truth.rttm.records.size());
        REQUIRE(res.scored);
        REQUIRE(res.score.der == Catch::Approx(0.0).margin(1e-9));
        REQUIRE(res.enhanced_files.size() == scene.truth.rttm.records.size());
        const RttmRecord r0 = read_rttm(scene.rttm).records[0];
        const std::string expect_name =
            r0.speaker + "-" + std::to_string(std::llround(r0.onset * 1000.0)) + "-" +
            std::to_string(std::llround((r0.onset + r0.duration) * 1000.0)) + ".wav";
        bool found = false;
        for (const std::string& f : res.enhanced_files)
            if (f.size() >= expect_name.size() &&
                f.compare(f.size() - expect_name.size(), expect_name.size(), expect_name) == 0)
                found = true;
        REQUIRE(found);
    }

    SECTION("misconfigured runs are rejected") {
        PipelineConfig cfg;
        PipelineInputs inputs;
        inputs.out_dir = (dir / "out_err").string();
        REQUIRE_THROWS_AS(run_pipeline(cfg, inputs), DataError);

        inputs.array_wavs = scene.wavs;
        PipelineConfig no_plda = parse_config("wpe.enabled = false\ngss.enabled = false\n");
        REQUIRE_THROWS_AS(run_pipeline(no_plda, inputs), DataError);
    }
}
