// tests/test_supervision.cpp
//
// Copyright 2026 The ASDL Toolkit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "asdl/labels.hpp"

using namespace asdl;

namespace {

std::filesystem::path temp_file(const std::string& name, const std::string& content) {
  const auto dir = std::filesystem::temp_directory_path() / "asdl_label_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / name;
  std::ofstream f(path, std::ios::trunc);
  f << content;
  return path;
}

LabelTrack make_gt(int n_frames, int view, double x0 = 0.5) {
  LabelTrack gt;
  gt.n_frames = n_frames;
  auto& frames = gt.view(view);
  for (int i = 0; i < n_frames; ++i) {
    frames[size_t(i)].active = true;
    frames[size_t(i)].has_x = true;
    frames[size_t(i)].x_norm = float(x0);
  }
  return gt;
}

}  // namespace

TEST_CASE("ingest teacher track") {
  SECTION("centered box maps to x_norm 0.5") {
    const auto path = temp_file("centered.csv",
                                "frame,view,active,x_left_px,x_right_px,confidence\n"
                                "0,5,1,1100,1348,0.93\n");
    const auto res = ingest_teacher_track(path);
    REQUIRE(res.track.n_frames == 1);
    const auto& fl = res.track.view(5)[0];
    CHECK(fl.active);
    CHECK(fl.x_norm == Catch::Approx(0.5));
    CHECK(fl.confidence == Catch::Approx(0.93f));
  }

  SECTION("empty file gives an empty track") {
    const auto path = temp_file("empty.csv", "frame,view,active,x_left_px,x_right_px,confidence\n");
    const auto res = ingest_teacher_track(path);
    CHECK(res.track.n_frames == 0);
    CHECK(res.rejected == 0);
  }

  SECTION("box center at 528 px normalizes near the 5th-percentile position") {
    const auto path = temp_file("p5.csv",
                                "frame,view,active,x_left_px,x_right_px,confidence\n"
                                "3,5,1,500,556,\n");
    const auto res = ingest_teacher_track(path);
    CHECK(res.track.view(5)[3].x_norm == Catch::Approx(0.2157).margin(5e-4));
  }

  SECTION("frames with no detection stay inactive") {
    const auto path = temp_file("gap.csv",
                                "frame,view,active,x_left_px,x_right_px,confidence\n"
                                "0,5,1,100,200,\n"
                                "4,5,1,100,200,\n");
    const auto res = ingest_teacher_track(path);
    REQUIRE(res.track.n_frames == 5);
    CHECK(res.track.view(5)[0].active);
    CHECK_FALSE(res.track.view(5)[1].active);
    CHECK_FALSE(res.track.view(5)[3].active);
    CHECK(res.track.view(5)[4].active);
  }

  SECTION("malformed rows carry the line number") {
    const auto path = temp_file("bad.csv",
                                "frame,view,active,x_left_px,x_right_px,confidence\n"
                                "0,5,1,100,200,\n"
                                "1,5,yes,100,200,\n");
    try {
      ingest_teacher_track(path);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line_number == 3);
    }
  }

  SECTION("out-of-range centers are rejected and counted") {
    const auto path = temp_file("reject.csv",
                                "frame,view,active,x_left_px,x_right_px,confidence\n"
                                "0,5,1,2400,2600,\n"
                                "1,5,1,100,200,\n");
    const auto res = ingest_teacher_track(path);
    CHECK(res.rejected == 1);
    CHECK_FALSE(res.track.view(5)[0].active);
    CHECK(res.track.view(5)[1].active);
  }

  SECTION("write/ingest round trip") {
    LabelTrack t = make_gt(8, 2, 0.37);
    t.view(2)[3] = FrameLabel{};  // one inactive frame
    const auto dir = std::filesystem::temp_directory_path() / "asdl_label_test";
    write_label_track(dir / "rt.csv", t);
    const auto back = ingest_teacher_track(dir / "rt.csv");
    REQUIRE(back.track.n_frames == 8);
    CHECK(back.track.view(2)[0].x_norm == Catch::Approx(0.37).margin(1e-3));
    CHECK_FALSE(back.track.view(2)[3].active);
  }
}

TEST_CASE("rasterize VA") {
  SECTION("no segments -> all zeros") {
    VaTrack va;
    const auto bits = rasterize_va(va, 30.0, 60);
    for (auto b : bits) REQUIRE(b == 0);
  }
  SECTION("full-clip segment -> all ones") {
    VaTrack va;
    va.segments = {{0.0, 2.0}};
    const auto bits = rasterize_va(va, 30.0, 60);
    for (auto b : bits) REQUIRE(b == 1);
  }
  SECTION("segment (0.5, 1.0) at 30 fps activates frames 15..29") {
    VaTrack va;
    va.segments = {{0.5, 1.0}};
    const auto bits = rasterize_va(va, 30.0, 60);
    for (int i = 0; i < 60; ++i) {
      const bool want = i >= 15 && i <= 29;
      REQUIRE(bool(bits[size_t(i)]) == want);
    }
  }
  SECTION("n_frames must be positive") {
    VaTrack va;
    CHECK_THROWS_AS(rasterize_va(va, 30.0, 0), std::invalid_argument);
  }
}

TEST_CASE("fuse") {
  std::vector<FrameLabel> loc(3);
  // frame 0: teacher detected at 0.7
  loc[0] = {true, true, 0.7f, 1.0f};
  // frame 1: teacher missed (occlusion)
  loc[1] = FrameLabel{};
  // frame 2: teacher false positive on a silent frame
  loc[2] = {true, true, 0.3f, 1.0f};
  const std::vector<uint8_t> va = {1, 1, 0};

  const auto t = fuse(loc, va);
  REQUIRE(t.size() == 3);
  CHECK(t.frames[0].mask == 1);
  CHECK(t.frames[0].c_hat == 1);
  CHECK(t.frames[0].x_hat == 0.7f);

  CHECK(t.frames[1].mask == 0);
  CHECK(t.frames[1].c_hat == 1);  // confidence comes from VA alone

  CHECK(t.frames[2].mask == 0);   // VA gates out the teacher FP
  CHECK(t.frames[2].c_hat == 0);

  SECTION("mask bypass trusts teacher detections regardless of VA") {
    const auto b = fuse(loc, va, FuseOptions{.mask_bypass = true});
    CHECK(b.frames[2].mask == 1);
    CHECK(b.frames[2].c_hat == 0);  // confidence target still owned by VA
  }

  SECTION("misaligned lengths are an error") {
    const std::vector<uint8_t> short_va = {1};
    CHECK_THROWS_AS(fuse(loc, short_va), std::invalid_argument);
  }

  SECTION("mask is a subset of both VA-active and teacher-detected frames") {
    Rng rng(7);
    std::vector<FrameLabel> rloc(500);
    std::vector<uint8_t> rva(500);
    for (size_t i = 0; i < 500; ++i) {
      rloc[i].active = rng.uniform() < 0.6;
      rloc[i].has_x = rloc[i].active;
      rloc[i].x_norm = float(rng.uniform());
      rva[i] = rng.uniform() < 0.5 ? 1 : 0;
    }
    const auto rt = fuse(rloc, rva);
    for (size_t i = 0; i < 500; ++i) {
      if (rt.frames[i].mask) {
        REQUIRE(rva[i] == 1);
        REQUIRE(rloc[i].active);
      }
      REQUIRE(rt.frames[i].c_hat == rva[i]);
    }
  }

  SECTION("GT-GT fusion masks exactly the voice-active frames") {
    std::vector<FrameLabel> gt_loc(60);
    std::vector<uint8_t> gt_va(60);
    for (size_t i = 0; i < 60; ++i) {
      gt_va[i] = (i >= 10 && i < 40) ? 1 : 0;
      gt_loc[i].active = gt_va[i] != 0;
      gt_loc[i].has_x = gt_loc[i].active;
      gt_loc[i].x_norm = 0.5f;
    }
    const auto gt_t = fuse(gt_loc, gt_va);
    for (size_t i = 0; i < 60; ++i) REQUIRE(gt_t.frames[i].mask == gt_va[i]);
  }
}

TEST_CASE("screen false positives") {
  LabelTrack gt = make_gt(100, 0);
  for (int i = 50; i < 100; ++i) gt.view(0)[size_t(i)] = FrameLabel{};  // silent half

  SECTION("detections on GT-silent frames are removed; active ones untouched") {
    LabelTrack noisy = gt;
    noisy.view(0)[70] = {true, true, 0.2f, 1.0f};
    noisy.view(0)[80] = {true, true, 0.2f, 1.0f};
    const auto screened = screen_false_positives(noisy, gt);
    CHECK_FALSE(screened.view(0)[70].active);
    CHECK_FALSE(screened.view(0)[80].active);
    for (int i = 0; i < 50; ++i) CHECK(screened.view(0)[size_t(i)].active);
  }

  SECTION("a track matching GT activity is unchanged, and screening is idempotent") {
    const auto once = screen_false_positives(gt, gt);
    for (int i = 0; i < 100; ++i) {
      CHECK(once.view(0)[size_t(i)].active == gt.view(0)[size_t(i)].active);
    }
    LabelTrack noisy = gt;
    noisy.view(0)[60] = {true, true, 0.9f, 1.0f};
    const auto s1 = screen_false_positives(noisy, gt);
    const auto s2 = screen_false_positives(s1, gt);
    for (int i = 0; i < 100; ++i) {
      CHECK(s1.view(0)[size_t(i)].active == s2.view(0)[size_t(i)].active);
      CHECK(s1.view(0)[size_t(i)].x_norm == s2.view(0)[size_t(i)].x_norm);
    }
  }

  SECTION("a synthetic weak teacher is fully cleaned against the injection log") {
    TeacherParams params;
    params.fp_fraction = 0.10;
    params.occlusion_fraction = 0.0;
    params.jitter_sigma = 0.0;
    const auto res = synth_teacher(gt, TeacherQuality::Weak, params, 99);
    REQUIRE(!res.injected.empty());
    const auto screened = screen_false_positives(res.track, gt);
    int fp_after = 0, tp_after = 0;
    for (int i = 0; i < 100; ++i) {
      const bool gt_active = gt.view(0)[size_t(i)].active;
      const bool det = screened.view(0)[size_t(i)].active;
      if (det && !gt_active) ++fp_after;
      if (det && gt_active) ++tp_after;
    }
    CHECK(fp_after == 0);
    CHECK(tp_after == 50);  // TP count unchanged by screening
  }
}

TEST_CASE("synthetic teacher") {
  SECTION("strong teacher with zero occlusion and jitter equals GT on active frames") {
    const LabelTrack gt = make_gt(200, 1, 0.42);
    TeacherParams p;
    p.occlusion_fraction = 0.0;
    p.jitter_sigma = 0.0;
    const auto res = synth_teacher(gt, TeacherQuality::Strong, p, 3);
    CHECK(res.dropped.empty());
    for (int i = 0; i < 200; ++i) {
      CHECK(res.track.view(1)[size_t(i)].active);
      CHECK(res.track.view(1)[size_t(i)].x_norm == 0.42f);
    }
  }

  SECTION("weak teacher on an all-silent sequence leaves only false positives") {
    LabelTrack silent;
    silent.n_frames = 300;
    silent.view(0).resize(300);
    const auto res = synth_teacher(silent, TeacherQuality::Weak, TeacherParams{}, 5);
    int detections = 0;
    for (const auto& fl : res.track.view(0))
      if (fl.active) {
        ++detections;
        CHECK(fl.x_norm == Catch::Approx(0.20));
      }
    CHECK(detections == int(res.injected.size()));
    CHECK(detections > 0);
  }

  SECTION("FP count on a 600-frame half-silent track is binomial around 60") {
    LabelTrack gt = make_gt(600, 0);
    for (int i = 300; i < 600; ++i) gt.view(0)[size_t(i)] = FrameLabel{};
    // Monte Carlo over seeds: mean within 4 sigma / sqrt(n) of 300 * 0.2.
    const int n_seeds = 30;
    double total = 0.0;
    for (int s = 0; s < n_seeds; ++s) {
      const auto res = synth_teacher(gt, TeacherQuality::Weak, TeacherParams{}, uint64_t(s));
      total += double(res.injected.size());
    }
    const double mean = total / n_seeds;
    const double sigma = std::sqrt(300 * 0.2 * 0.8);  // ~6.9 per draw
    CHECK(std::abs(mean - 60.0) < 4.0 * sigma / std::sqrt(double(n_seeds)));
  }

  SECTION("deterministic per seed") {
    const LabelTrack gt = make_gt(100, 0);
    const auto a = synth_teacher(gt, TeacherQuality::Weak, TeacherParams{}, 11);
    const auto b = synth_teacher(gt, TeacherQuality::Weak, TeacherParams{}, 11);
    CHECK(a.dropped == b.dropped);
    CHECK(a.injected == b.injected);
  }
}

TEST_CASE("supervision config names") {
  for (const auto& name : SupervisionConfig::valid_names()) {
    const auto cfg = SupervisionConfig::parse(name);
    CHECK(cfg.name() == name);
  }
  CHECK(SupervisionConfig::parse("TalkNet-Vad").location == LocationSource::TALKNET);
  CHECK(SupervisionConfig::parse("TalkNet-Vad").va == VaSource::VAD);
  CHECK(SupervisionConfig::parse("Asc(s)-Gt").location == LocationSource::ASC_SCREENED);

  try {
    SupervisionConfig::parse("Gt-Maybe");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    for (const auto& name : SupervisionConfig::valid_names())
      CHECK(msg.find(name) != std::string::npos);
  }
}

TEST_CASE("energy VAD") {
  const double fs = 48000.0;
  const int flen = int(0.030 * fs);
  std::vector<float> x(size_t(60 * flen), 0.0f);
  // Loud region covering frames 10..19.
  Rng rng(13);
  for (int i = 10 * flen; i < 20 * flen; ++i) x[size_t(i)] = float(0.25 * rng.gaussian());

  const auto va = energy_vad(x, fs);
  REQUIRE(va.segments.size() == 1);
  CHECK(va.segments[0].onset_s == Catch::Approx(10 * 0.030).margin(1e-9));
  // Hangover extends activity by 3 frames past the last loud frame.
  CHECK(va.segments[0].offset_s == Catch::Approx(23 * 0.030).margin(1e-9));

  SECTION("silence stays silent") {
    std::vector<float> quiet(size_t(20 * flen), 1e-5f);
    CHECK(energy_vad(quiet, fs).segments.empty());
  }
}

TEST_CASE("targets file round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "asdl_label_test";
  std::filesystem::create_directories(dir);
  std::vector<TrainingTarget> targets(3);
  Rng rng(17);
  for (auto& t : targets) {
    t.view = int(rng.bounded(11));
    t.frames.resize(60);
    for (auto& fr : t.frames) {
      fr.mask = rng.uniform() < 0.5 ? 1 : 0;
      fr.c_hat = fr.mask ? 1 : (rng.uniform() < 0.5 ? 1 : 0);
      fr.x_hat = fr.mask ? float(rng.uniform()) : 0.0f;
    }
  }
  write_targets_file(dir / "targets.bin", targets);
  const auto back = read_targets_file(dir / "targets.bin");
  REQUIRE(back.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(back[i].view == targets[i].view);
    REQUIRE(back[i].frames.size() == 60);
    for (size_t k = 0; k < 60; ++k) {
      CHECK(back[i].frames[k].mask == targets[i].frames[k].mask);
      CHECK(back[i].frames[k].c_hat == targets[i].frames[k].c_hat);
      CHECK(back[i].frames[k].x_hat == targets[i].frames[k].x_hat);
    }
  }
}
