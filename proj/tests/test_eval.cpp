// tests/test_eval.cpp
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

#include "asdl/eval.hpp"

using namespace asdl;

namespace {

FrameLabel pred_frame(double conf, double x) {
  return {conf >= 0.0, true, float(x), float(conf)};
}
FrameLabel gt_active(double x) { return {true, true, float(x), 1.0f}; }
FrameLabel gt_silent() { return {}; }

/// Exhaustive reference: enumerate every threshold, classify every frame by
/// the stated rules, build the envelope by direct scanning. Shares nothing
/// with the library implementation.
struct BruteResult {
  double ap = 0.0, f1 = 0.0, f1_thr = 0.5, det_err = 0.0;
  double ad = std::numeric_limits<double>::quiet_NaN();
};

BruteResult brute_force_metrics(const std::vector<FrameLabel>& pred,
                                const std::vector<FrameLabel>& gt, double tol_px,
                                int width, int k) {
  BruteResult out;
  std::vector<double> thrs;
  for (int j = 0; j < k; ++j)
    thrs.push_back(1.0 / (1.0 + std::exp(-(-8.0 + 16.0 * j / (k - 1)))));

  std::vector<std::pair<double, double>> pr;  // (precision, recall)
  for (double thr : thrs) {
    long tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
      const bool pos = pred[i].confidence >= thr;
      const bool hit = gt[i].active && gt[i].has_x && pred[i].has_x &&
                       std::abs(double(pred[i].x_norm) - double(gt[i].x_norm)) * width <= tol_px;
      if (pos && hit) ++tp;
      else if (pos) ++fp;
      else if (gt[i].active) ++fn;
    }
    const double p = tp + fp > 0 ? double(tp) / double(tp + fp) : 1.0;
    const double r = tp + fn > 0 ? double(tp) / double(tp + fn) : 0.0;
    pr.emplace_back(p, r);
    const double f1 = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    if (f1 > out.f1) {
      out.f1 = f1;
      out.f1_thr = thr;
    }
  }
  // AP: for each point in recall order, envelope precision = max precision
  // among points with recall >= this recall.
  std::vector<size_t> order(pr.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return pr[a].second < pr[b].second; });
  double prev_r = 0.0;
  for (size_t oi = 0; oi < order.size(); ++oi) {
    const double r = pr[order[oi]].second;
    double env = 0.0;
    for (const auto& [p2, r2] : pr)
      if (r2 >= r) env = std::max(env, p2);
    out.ap += (r - prev_r) * env;
    prev_r = r;
  }
  // aD over TPs at the best-F1 threshold.
  double acc = 0.0;
  long tps = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].confidence < out.f1_thr || !gt[i].active) continue;
    const double err = std::abs(double(pred[i].x_norm) - double(gt[i].x_norm)) * width;
    if (err <= tol_px) {
      acc += err;
      ++tps;
    }
  }
  if (tps > 0) out.ad = acc / double(tps);
  // DetErr at 0.5.
  long wrong = 0;
  for (size_t i = 0; i < pred.size(); ++i)
    if ((pred[i].confidence >= 0.5) != gt[i].active) ++wrong;
  out.det_err = double(wrong) / double(pred.size());
  return out;
}

}  // namespace

TEST_CASE("sigmoid thresholds") {
  SECTION("k = 3 hits the logistic endpoints and center") {
    const auto t = sigmoid_thresholds(3);
    REQUIRE(t.size() == 3);
    CHECK(t[0] == Catch::Approx(3.3535e-4).epsilon(1e-3));
    CHECK(t[1] == Catch::Approx(0.5));
    CHECK(t[2] == Catch::Approx(0.99966).margin(1e-5));
  }
  SECTION("symmetry: t_j + t_{k-1-j} = 1") {
    const auto t = sigmoid_thresholds(101);
    for (size_t j = 0; j < t.size(); ++j)
      CHECK(t[j] + t[t.size() - 1 - j] == Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("spacing near 0.5 is coarser than near the ends") {
    const auto t = sigmoid_thresholds(101);
    CHECK(t[51] - t[50] > t[1] - t[0]);
    double prev = -1.0;
    for (double v : t) {
      CHECK(v > prev);
      prev = v;
    }
  }
  SECTION("k < 2 is rejected") { CHECK_THROWS_AS(sigmoid_thresholds(1), std::invalid_argument); }
}

TEST_CASE("classify frames") {
  const ToleranceSpec tol = ToleranceSpec::paper(2.0);  // 89 px

  SECTION("perfect predictor has no errors") {
    std::vector<FrameLabel> gt{gt_active(0.2), gt_active(0.8), gt_silent()};
    std::vector<FrameLabel> pred{pred_frame(0.99, 0.2), pred_frame(0.99, 0.8),
                                 FrameLabel{false, false, 0.0f, 0.01f}};
    const auto c = classify_frames(pred, gt, 0.5, tol);
    CHECK(c.tp == 2);
    CHECK(c.fp == 0);
    CHECK(c.fn == 0);
    CHECK(c.tn == 1);
  }

  SECTION("all-silent predictor on all-active GT") {
    std::vector<FrameLabel> gt(5, gt_active(0.5));
    std::vector<FrameLabel> pred(5, FrameLabel{false, false, 0.0f, 0.0f});
    const auto c = classify_frames(pred, gt, 0.5, tol);
    CHECK(c.tp == 0);
    CHECK(c.fp == 0);
    CHECK(c.fn == 5);
  }

  SECTION("crafted 4-frame case: TP=1, FP=2, FN=1") {
    // {conf .9, err 10 px, active}, {conf .9, err 300 px, active},
    // {conf .1, active}, {conf .9, silent}
    std::vector<FrameLabel> gt{gt_active(0.5), gt_active(0.5), gt_active(0.5), gt_silent()};
    std::vector<FrameLabel> pred{pred_frame(0.9, 0.5 + 10.0 / 2448),
                                 pred_frame(0.9, 0.5 + 300.0 / 2448),
                                 pred_frame(0.1, 0.5), pred_frame(0.9, 0.5)};
    const auto c = classify_frames(pred, gt, 0.5, tol);
    CHECK(c.tp == 1);
    CHECK(c.fp == 2);
    CHECK(c.fn == 1);
    CHECK(c.tn == 0);
  }

  SECTION("misaligned tracks are an error") {
    std::vector<FrameLabel> gt(3), pred(2);
    CHECK_THROWS_AS(classify_frames(pred, gt, 0.5, tol), std::invalid_argument);
  }
}

TEST_CASE("average precision") {
  SECTION("hand-integrated 3-point curve gives 0.63") {
    std::vector<PrPoint> pts{{0.9, 1.0, 0.2}, {0.5, 0.6, 0.5}, {0.1, 0.5, 1.0}};
    CHECK(ap_from_pr(pts) == Catch::Approx(0.63).margin(1e-12));
  }

  SECTION("perfect confident predictor reaches AP = 1") {
    std::vector<FrameLabel> gt{gt_active(0.3), gt_active(0.6), gt_silent(), gt_active(0.9)};
    std::vector<FrameLabel> pred{pred_frame(1.0, 0.3), pred_frame(1.0, 0.6),
                                 FrameLabel{false, false, 0.0f, 0.0f}, pred_frame(1.0, 0.9)};
    std::vector<EvalPair> pairs{{&pred, &gt, "s"}};
    const auto report = evaluate(pairs, ToleranceSpec::paper(2.0));
    CHECK(report.ap == Catch::Approx(1.0));
    CHECK(report.f1_best == Catch::Approx(1.0));
    CHECK(report.det_err == 0.0);
    CHECK(report.ad_pixels == Catch::Approx(0.0).margin(1e-9));
  }

  SECTION("zero GT-active frames is an explicit error") {
    std::vector<FrameLabel> gt(4, gt_silent());
    std::vector<FrameLabel> pred(4, pred_frame(0.9, 0.5));
    std::vector<EvalPair> pairs{{&pred, &gt, "s"}};
    CHECK_THROWS_AS(evaluate(pairs, ToleranceSpec::paper(2.0)), std::invalid_argument);
  }
}

TEST_CASE("metrics match the exhaustive brute-force reference") {
  Rng rng(19);
  // 20-frame crafted track: half-active ground truth, noisy predictor.
  std::vector<FrameLabel> gt, pred;
  for (int i = 0; i < 20; ++i) {
    if (i % 2 == 0) gt.push_back(gt_active(rng.uniform(0.1, 0.9)));
    else gt.push_back(gt_silent());
    const double conf = rng.uniform();
    const double x = rng.uniform();
    pred.push_back(pred_frame(conf, x));
  }
  std::vector<EvalPair> pairs{{&pred, &gt, "s"}};
  for (double deg : {2.0, 5.0}) {
    const ToleranceSpec tol = ToleranceSpec::paper(deg);
    const auto report = evaluate(pairs, tol);
    const auto brute = brute_force_metrics(pred, gt, tol.pixels, 2448, 101);
    CHECK(report.ap == Catch::Approx(brute.ap).margin(1e-12));
    CHECK(report.f1_best == Catch::Approx(brute.f1).margin(1e-12));
    CHECK(report.det_err == Catch::Approx(brute.det_err).margin(1e-12));
    if (std::isnan(brute.ad)) CHECK_FALSE(report.ad_defined);
    else CHECK(report.ad_pixels == Catch::Approx(brute.ad).margin(1e-9));
  }
}

TEST_CASE("summary metrics") {
  SECTION("constant +40 px offset within 89 px tolerance") {
    std::vector<FrameLabel> gt, pred;
    for (int i = 0; i < 30; ++i) {
      const bool active = i % 3 != 0;
      if (active) {
        const double x = 0.3 + 0.01 * i;
        gt.push_back(gt_active(x));
        pred.push_back(pred_frame(0.95, x + 40.0 / 2448));
      } else {
        gt.push_back(gt_silent());
        pred.push_back(FrameLabel{false, false, 0.0f, 0.05f});
      }
    }
    std::vector<EvalPair> pairs{{&pred, &gt, "s"}};
    const auto r89 = evaluate(pairs, ToleranceSpec::paper(2.0));
    CHECK(r89.det_err == 0.0);
    CHECK(r89.f1_best == Catch::Approx(1.0));
    CHECK(r89.ad_pixels == Catch::Approx(40.0).margin(0.05));

    // The same predictor at a 30 px tolerance has no true positives.
    const ToleranceSpec tight{2.0, 30.0, ToleranceSpec::Conversion::PaperCalibration};
    const auto r30 = evaluate(pairs, tight);
    CHECK(r30.f1_best == 0.0);
    CHECK_FALSE(r30.ad_defined);
    CHECK(r30.det_err == 0.0);  // detection is position-blind
  }
}

TEST_CASE("pixel/degree conversion") {
  const ToleranceSpec paper = ToleranceSpec::paper(2.0);
  CHECK(px_deg_convert(89.0, paper, ConvertDirection::PixelsToDegrees) ==
        Catch::Approx(2.0).margin(0.02));
  CHECK(px_deg_convert(222.0, paper, ConvertDirection::PixelsToDegrees) ==
        Catch::Approx(5.0).margin(0.02));
  CHECK(px_deg_convert(39.0, paper, ConvertDirection::PixelsToDegrees) ==
        Catch::Approx(0.88).margin(0.02));
  CHECK(px_deg_convert(2.0, paper, ConvertDirection::DegreesToPixels) ==
        Catch::Approx(89.0));

  CameraModel cam;
  const ToleranceSpec pin = ToleranceSpec::pinhole(2.0, cam);
  CHECK(pin.pixels == Catch::Approx(82.1).margin(0.2));
  CHECK_THROWS_AS(px_deg_convert(-1.0, paper, ConvertDirection::PixelsToDegrees),
                  std::domain_error);
}

TEST_CASE("metric invariants") {
  Rng rng(23);
  std::vector<FrameLabel> gt, pred;
  for (int i = 0; i < 200; ++i) {
    const bool active = rng.uniform() < 0.55;
    if (active) gt.push_back(gt_active(rng.uniform(0.1, 0.9)));
    else gt.push_back(gt_silent());
    // Mildly informative predictor.
    const double conf = active ? rng.uniform(0.3, 1.0) : rng.uniform(0.0, 0.7);
    const double x = active ? double(gt.back().x_norm) + 0.03 * rng.gaussian()
                            : rng.uniform();
    pred.push_back(pred_frame(conf, std::min(1.0, std::max(0.0, x))));
  }
  std::vector<EvalPair> pairs{{&pred, &gt, "s"}};
  const auto r2 = evaluate(pairs, ToleranceSpec::paper(2.0));
  const auto r5 = evaluate(pairs, ToleranceSpec::paper(5.0));

  SECTION("recall non-increasing and envelope non-increasing over recall") {
    for (size_t i = 1; i < r2.pr.size(); ++i)
      CHECK(r2.pr[i].recall <= r2.pr[i - 1].recall + 1e-12);
    std::vector<PrPoint> sorted = r2.pr;
    std::sort(sorted.begin(), sorted.end(),
              [](const PrPoint& a, const PrPoint& b) { return a.recall < b.recall; });
    double env = 0.0;
    for (size_t i = sorted.size(); i-- > 0;) {
      env = std::max(env, sorted[i].precision);
      // envelope accumulated from the right is non-increasing along recall
      CHECK(env >= sorted[i].precision - 1e-12);
    }
  }
  SECTION("AP bounds and tolerance monotonicity") {
    CHECK(r2.ap >= 0.0);
    CHECK(r2.ap <= 1.0);
    CHECK(r5.ap >= r2.ap);
    CHECK(r5.f1_best >= r2.f1_best);
  }
  SECTION("DetErr equals (FP+FN)/N with position ignored") {
    const ToleranceSpec inf_tol{2.0, 1e18, ToleranceSpec::Conversion::PaperCalibration};
    const auto c = classify_frames(pred, gt, 0.5, inf_tol);
    CHECK(r2.det_err == Catch::Approx(double(c.fp + c.fn) / double(c.total())).margin(1e-12));
  }
}

TEST_CASE("report files") {
  const auto dir = std::filesystem::temp_directory_path() / "asdl_eval_test";
  std::filesystem::create_directories(dir);

  std::vector<FrameLabel> gt{gt_active(0.4), gt_silent(), gt_active(0.6)};
  std::vector<FrameLabel> pred{pred_frame(0.9, 0.4), FrameLabel{false, false, 0.0f, 0.1f},
                               pred_frame(0.8, 0.62)};
  std::vector<EvalPair> pairs{{&pred, &gt, "seq0"}};
  const auto report = evaluate(pairs, ToleranceSpec::paper(2.0));

  write_metrics_json(dir / "metrics.json", report);
  write_pr_csv(dir / "pr.csv", report);
  write_pr_svg(dir / "pr.svg", report, "test");

  std::ifstream jf(dir / "metrics.json");
  const json parsed = json::parse(jf);
  CHECK(parsed["ap"].get<double>() == Catch::Approx(report.ap));
  CHECK(parsed["tolerance"]["pixels"].get<double>() == Catch::Approx(89.0));

  std::ifstream sf(dir / "pr.svg");
  const std::string svg((std::istreambuf_iterator<char>(sf)),
                        std::istreambuf_iterator<char>());
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("polyline") != std::string::npos);
  CHECK(svg.find("circle") != std::string::npos);  // best-F1 marker

  std::filesystem::remove_all(dir);
}
