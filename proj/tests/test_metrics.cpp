#include <catch2/catch_amalgamated.hpp>

#include <string>
#include <vector>

#include "farfield/common.hpp"
#include "farfield/metrics.hpp"
#include "support/oracles.hpp"

using namespace farfield;

namespace {

Rttm make_rttm(std::initializer_list<RttmRecord> records) {
    Rttm r;
    r.records = records;
    return r;
}

Rttm random_rttm(Rng& rng, int num_speakers, int max_segments, const std::string& prefix) {
    Rttm r;
    const int n = static_cast<int>(rng.uniform_int(1, max_segments));
    for (int i = 0; i < n; ++i) {
        RttmRecord rec;
        rec.recording_id = "rec";
        rec.onset = rng.uniform(0.0, 18.0);
        rec.duration = rng.uniform(0.05, 4.0);
        rec.speaker = prefix + std::to_string(rng.uniform_int(0, num_speakers - 1));
        r.records.push_back(rec);
    }
    return r;
}

}  // namespace

TEST_CASE("rttm text round trip and validation", "[metrics]") {
    SECTION("canonical line parses to one record") {
        Rttm r = parse_rttm("SPEAKER rec 1 10.00 2.50 <NA> <NA> spk1 <NA> <NA>\n");
        REQUIRE(r.records.size() == 1);
        REQUIRE(r.records[0].recording_id == "rec");
        REQUIRE(r.records[0].onset == Catch::Approx(10.0));
        REQUIRE(r.records[0].duration == Catch::Approx(2.5));
        REQUIRE(r.records[0].speaker == "spk1");
    }

    SECTION("emit then parse is the identity") {
        Rttm r = make_rttm({{"recA", 0.25, 1.5, "alice"}, {"recA", 2.0, 0.75, "bob"}});
        Rttm back = parse_rttm(emit_rttm(r));
        REQUIRE(back.records.size() == 2);
        REQUIRE(emit_rttm(back) == emit_rttm(r));
    }

    SECTION("empty text gives an empty collection") {
        REQUIRE(parse_rttm("").records.empty());
        REQUIRE(parse_rttm("; comment-ish line\nLIGHT rec 1 0 1 x y z a b\n").records.empty());
    }

    SECTION("malformed lines name the line number") {
        try {
            parse_rttm("SPEAKER rec 1 0.00 1.00 <NA> <NA> a <NA> <NA>\nSPEAKER rec 1 oops 1.00 <NA> <NA> b <NA> <NA>\n");
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            REQUIRE(std::string(e.what()).find("line 2") != std::string::npos);
        }
        REQUIRE_THROWS_AS(parse_rttm("SPEAKER rec 1 0.00\n"), FormatError);
        REQUIRE_THROWS_AS(parse_rttm("SPEAKER rec 1 1.00 0.00 <NA> <NA> a <NA> <NA>\n"), FormatError);
    }
}

TEST_CASE("der on pinned examples", "[metrics]") {
    SECTION("identical hypothesis scores zero, labels permuted") {
        Rttm ref = make_rttm({{"rec", 0.0, 4.0, "A"}, {"rec", 3.0, 3.0, "B"}, {"rec", 8.0, 1.0, "A"}});
        Rttm hyp = make_rttm({{"rec", 0.0, 4.0, "x"}, {"rec", 3.0, 3.0, "y"}, {"rec", 8.0, 1.0, "x"}});
        DiarScore s = compute_der(ref, hyp);
        REQUIRE(s.der == Catch::Approx(0.0).margin(1e-12));
        REQUIRE(s.jer == Catch::Approx(0.0).margin(1e-12));
    }

    SECTION("two seconds missed out of ten is twenty percent") {
        Rttm ref = make_rttm({{"rec", 0.0, 10.0, "A"}});
        Rttm hyp = make_rttm({{"rec", 0.0, 8.0, "X"}});
        DiarScore s = compute_der(ref, hyp, 0.0, true);
        REQUIRE(s.missed_speech == Catch::Approx(0.2).margin(1e-9));
        REQUIRE(s.false_alarm == Catch::Approx(0.0).margin(1e-12));
        REQUIRE(s.speaker_error == Catch::Approx(0.0).margin(1e-12));
        REQUIRE(s.der == Catch::Approx(0.2).margin(1e-9));
    }

    SECTION("jaccard error of shifted segments") {
        Rttm ref = make_rttm({{"rec", 0.0, 10.0, "A"}});
        Rttm hyp = make_rttm({{"rec", 5.0, 10.0, "X"}});
        REQUIRE(compute_jer(ref, hyp) == Catch::Approx(2.0 / 3.0).margin(0.0001));
    }

    SECTION("disjoint times give full jaccard error") {
        Rttm ref = make_rttm({{"rec", 0.0, 2.0, "A"}});
        Rttm hyp = make_rttm({{"rec", 5.0, 2.0, "X"}});
        REQUIRE(compute_jer(ref, hyp) == Catch::Approx(1.0).margin(1e-12));
    }

    SECTION("unknown recording in hypothesis") {
        Rttm ref = make_rttm({{"rec", 0.0, 2.0, "A"}});
        Rttm hyp = make_rttm({{"other", 0.0, 2.0, "A"}});
        REQUIRE_THROWS_AS(compute_der(ref, hyp), DataError);
    }

    SECTION("overlap exclusion removes the ambiguous region") {
        Rttm ref = make_rttm({{"rec", 0.0, 4.0, "A"}, {"rec", 2.0, 4.0, "B"}});
        Rttm hyp = make_rttm({{"rec", 0.0, 6.0, "C"}});
        DiarScore s = compute_der(ref, hyp, 0.0, false);
        // scored: A on [0,2), B on [4,6); C maps to one of them
        REQUIRE(s.der == Catch::Approx(0.5).margin(1e-9));
        REQUIRE(s.missed_speech == Catch::Approx(0.0).margin(1e-12));
        REQUIRE(s.speaker_error == Catch::Approx(0.5).margin(1e-9));
    }
}

TEST_CASE("der properties", "[metrics]") {
    Rng rng(101);

    SECTION("self-score is zero, including overlapped references") {
        for (int trial = 0; trial < 10; ++trial) {
            Rttm ref = random_rttm(rng, 3, 12, "spk");
            DiarScore s = compute_der(ref, ref);
            REQUIRE(s.der == Catch::Approx(0.0).margin(1e-12));
            REQUIRE(s.jer == Catch::Approx(0.0).margin(1e-12));
        }
    }

    SECTION("hyp relabeling leaves the score unchanged") {
        for (int trial = 0; trial < 10; ++trial) {
            Rttm ref = random_rttm(rng, 3, 10, "r");
            Rttm hyp = random_rttm(rng, 3, 10, "h");
            DiarScore s1 = compute_der(ref, hyp, 0.25, true);
            Rttm relabeled = hyp;
            for (auto& rec : relabeled.records) rec.speaker = "zz" + rec.speaker;
            DiarScore s2 = compute_der(ref, relabeled, 0.25, true);
            REQUIRE(s1.der == Catch::Approx(s2.der).margin(1e-12));
            REQUIRE(s1.jer == Catch::Approx(s2.jer).margin(1e-12));
        }
    }

    SECTION("an extra false-alarm segment never lowers the error") {
        for (int trial = 0; trial < 10; ++trial) {
            Rttm ref = random_rttm(rng, 2, 8, "r");
            Rttm hyp = random_rttm(rng, 2, 8, "h");
            DiarScore before = compute_der(ref, hyp);
            Rttm padded = hyp;
            double end = 0.0;
            for (const auto& r : ref.records) end = std::max(end, r.onset + r.duration);
            for (const auto& h : hyp.records) end = std::max(end, h.onset + h.duration);
            padded.records.push_back({"rec", end + 1.0, 2.0, "extra"});
            DiarScore after = compute_der(ref, padded);
            REQUIRE(after.der >= before.der - 1e-12);
        }
    }

    SECTION("component identity holds") {
        for (int trial = 0; trial < 10; ++trial) {
            Rttm ref = random_rttm(rng, 3, 10, "r");
            Rttm hyp = random_rttm(rng, 3, 10, "h");
            DiarScore s = compute_der(ref, hyp, 0.1, trial % 2 == 0);
            REQUIRE(s.der ==
                    Catch::Approx(s.missed_speech + s.false_alarm + s.speaker_error).margin(1e-9));
        }
    }
}

TEST_CASE("der and jer match the mapping-enumeration scorer", "[metrics]") {
    Rng rng(202);
    for (int trial = 0; trial < 40; ++trial) {
        Rttm ref = random_rttm(rng, 3, 14, "r");
        Rttm hyp = random_rttm(rng, 3, 14, "h");
        const double collar = (trial % 3 == 0) ? 0.25 : 0.0;
        const bool overlap = trial % 4 != 0;

        DiarScore got = compute_der(ref, hyp, collar, overlap);
        oracle::Score want = oracle::brute_force_score(ref, hyp, collar, overlap);
        INFO("trial " << trial << " collar " << collar << " overlap " << overlap);
        REQUIRE(got.missed_speech == Catch::Approx(want.miss).margin(1e-9));
        REQUIRE(got.false_alarm == Catch::Approx(want.fa).margin(1e-9));
        REQUIRE(got.speaker_error == Catch::Approx(want.se).margin(1e-9));
        REQUIRE(got.der == Catch::Approx(want.der).margin(1e-9));

        const double jer = compute_jer(ref, hyp);
        oracle::Score jwant = oracle::brute_force_score(ref, hyp, 0.0, true);
        REQUIRE(jer == Catch::Approx(jwant.jer).margin(1e-9));
    }
}

TEST_CASE("segment list text format", "[metrics]") {
    SegmentList segs = {{0.5, 1.25, "speech"}, {3.0, 0.4, "speech"}};
    const std::string text = write_segments_text(segs);
    REQUIRE(text == "0.50 1.25 speech\n3.00 0.40 speech\n");
    SegmentList back = parse_segments_text(text);
    REQUIRE(back.size() == 2);
    REQUIRE(back[1].onset == Catch::Approx(3.0));

    SECTION("labels default to speech and comments are skipped") {
        SegmentList s = parse_segments_text("# header\n1.0 2.0\n\n4.0 1.0 spk3\n");
        REQUIRE(s.size() == 2);
        REQUIRE(s[0].label == "speech");
        REQUIRE(s[1].label == "spk3");
    }

    SECTION("bad numbers name the line") {
        try {
            parse_segments_text("1.0 1.0\nnope 2.0\n");
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            REQUIRE(std::string(e.what()).find("line 2") != std::string::npos);
        }
    }
}
