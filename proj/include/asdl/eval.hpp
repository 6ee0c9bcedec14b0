// include/asdl/eval.hpp
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
//
// Frame-level detection/localization metrics: sigmoid-spaced threshold
// sweeps, monotone-envelope average precision, best F1, average distance
// over true positives, and the active/silent detection error at a fixed 0.5
// confidence.

#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "asdl/common.hpp"
#include "asdl/geometry.hpp"
#include "asdl/labels.hpp"

namespace asdl {

struct ToleranceSpec {
  double degrees = 2.0;
  double pixels = 89.0;
  enum class Conversion { PaperCalibration, Pinhole } source = Conversion::PaperCalibration;

  double px_per_degree() const { return pixels / degrees; }

  /// The paper-calibration preset: 89 px at 2 degrees (44.5 px/degree).
  static ToleranceSpec paper(double degrees_tol) {
    return {degrees_tol, 44.5 * degrees_tol, Conversion::PaperCalibration};
  }

  /// Small-angle pinhole preset derived from a camera model.
  static ToleranceSpec pinhole(double degrees_tol, const CameraModel& cam) {
    return {degrees_tol, cam.px_per_degree_at_center() * degrees_tol, Conversion::Pinhole};
  }

  json to_json() const {
    return json{{"degrees", degrees},
                {"pixels", pixels},
                {"source", source == Conversion::PaperCalibration ? "paper-calibration"
                                                                  : "pinhole"}};
  }
};

enum class ConvertDirection { PixelsToDegrees, DegreesToPixels };

/// Linear small-angle conversion with the spec's px-per-degree ratio.
inline double px_deg_convert(double value, const ToleranceSpec& spec,
                             ConvertDirection direction) {
  if (value < 0) throw std::domain_error("px_deg_convert: negative value");
  return direction == ConvertDirection::PixelsToDegrees ? value / spec.px_per_degree()
                                                        : value * spec.px_per_degree();
}

/// k confidence thresholds sigma(z) for z uniform over [-8, 8]: strictly
/// increasing and denser near 0 and 1 than near 0.5.
inline std::vector<double> sigmoid_thresholds(int k) {
  if (k < 2) throw std::invalid_argument("sigmoid_thresholds: need k >= 2");
  std::vector<double> out(static_cast<size_t>(k));
  for (int j = 0; j < k; ++j) {
    const double z = -8.0 + 16.0 * double(j) / double(k - 1);
    out[size_t(j)] = 1.0 / (1.0 + std::exp(-z));
  }
  return out;
}

struct FrameCounts {
  long tp = 0, fp = 0, fn = 0, tn = 0;
  long total() const { return tp + fp + fn + tn; }
};

/// Frame classification at one confidence threshold: a prediction is
/// positive when its confidence reaches the threshold; a positive counts as
/// true only on a voice-active frame within the pixel tolerance. Positives
/// failing either condition are false positives; active non-positives are
/// false negatives.
inline FrameCounts classify_frames(std::span<const FrameLabel> pred,
                                   std::span<const FrameLabel> gt, double threshold,
                                   const ToleranceSpec& tol, int image_width = 2448) {
  if (pred.size() != gt.size())
    throw std::invalid_argument("classify_frames: misaligned tracks");
  FrameCounts counts;
  for (size_t i = 0; i < pred.size(); ++i) {
    const bool positive = double(pred[i].confidence) >= threshold;
    if (positive) {
      const bool within = gt[i].active && gt[i].has_x && pred[i].has_x &&
                          std::abs(double(pred[i].x_norm) - double(gt[i].x_norm)) *
                                  double(image_width) <=
                              tol.pixels;
      if (within) ++counts.tp;
      else ++counts.fp;
    } else {
      if (gt[i].active) ++counts.fn;
      else ++counts.tn;
    }
  }
  return counts;
}

struct PrPoint {
  double threshold = 0.0;
  double precision = 1.0;
  double recall = 0.0;
};

/// Pascal-VOC style AP: monotone envelope of the precision-recall points
/// (precision at recall r is the maximum precision at any recall >= r),
/// integrated over recall with right-continuous steps.
inline double ap_from_pr(std::span<const PrPoint> points) {
  std::vector<PrPoint> sorted(points.begin(), points.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const PrPoint& a, const PrPoint& b) { return a.recall < b.recall; });
  // Envelope from the right.
  std::vector<double> env(sorted.size());
  double best = 0.0;
  for (size_t i = sorted.size(); i-- > 0;) {
    best = std::max(best, sorted[i].precision);
    env[i] = best;
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (size_t i = 0; i < sorted.size(); ++i) {
    ap += (sorted[i].recall - prev_recall) * env[i];
    prev_recall = sorted[i].recall;
  }
  return ap;
}

struct SequenceMetrics {
  double ap = 0.0;
  double f1_best = 0.0;
  double det_err = 0.0;
  double ad_pixels = std::numeric_limits<double>::quiet_NaN();
};

struct MetricsReport {
  ToleranceSpec tolerance;
  std::vector<PrPoint> pr;
  double ap = 0.0;
  double f1_best = 0.0;
  double f1_best_threshold = 0.5;
  double ad_pixels = std::numeric_limits<double>::quiet_NaN();
  double ad_degrees = std::numeric_limits<double>::quiet_NaN();
  bool ad_defined = false;
  double det_err = 0.0;
  long n_frames = 0;
  long n_active = 0;
  std::map<std::string, SequenceMetrics> per_sequence;

  json to_json() const {
    json j;
    j["tolerance"] = tolerance.to_json();
    j["ap"] = ap;
    j["f1_best"] = f1_best;
    j["f1_best_threshold"] = f1_best_threshold;
    j["ad_pixels"] = ad_defined ? json(ad_pixels) : json(nullptr);
    j["ad_degrees"] = ad_defined ? json(ad_degrees) : json(nullptr);
    j["det_err"] = det_err;
    j["n_frames"] = n_frames;
    j["n_active"] = n_active;
    j["pr"] = json::array();
    for (const auto& p : pr) j["pr"].push_back({p.threshold, p.precision, p.recall});
    j["per_sequence"] = json::object();
    for (const auto& [name, m] : per_sequence) {
      j["per_sequence"][name] = {{"ap", m.ap},
                                 {"f1_best", m.f1_best},
                                 {"det_err", m.det_err},
                                 {"ad_pixels", std::isnan(m.ad_pixels) ? json(nullptr)
                                                                       : json(m.ad_pixels)}};
    }
    return j;
  }
};

/// One (prediction, ground truth) pair of aligned per-frame tracks.
struct EvalPair {
  const std::vector<FrameLabel>* pred = nullptr;
  const std::vector<FrameLabel>* gt = nullptr;
  std::string sequence_id;
};

struct EvalOptions {
  int n_thresholds = 101;
  int image_width = 2448;
  /// Operating point for the average distance: the best-F1 threshold by
  /// default, or a fixed 0.5.
  enum class AdOperatingPoint { F1Best, Fixed05 } ad_point = AdOperatingPoint::F1Best;
};

namespace detail {

inline double mean_tp_distance_px(std::span<const EvalPair> pairs, double threshold,
                                  const ToleranceSpec& tol, int image_width, long* tp_out) {
  KahanSum acc;
  long tp = 0;
  for (const auto& pair : pairs) {
    for (size_t i = 0; i < pair.pred->size(); ++i) {
      const FrameLabel& p = (*pair.pred)[i];
      const FrameLabel& g = (*pair.gt)[i];
      if (double(p.confidence) < threshold || !g.active || !g.has_x || !p.has_x) continue;
      const double err = std::abs(double(p.x_norm) - double(g.x_norm)) * image_width;
      if (err <= tol.pixels) {
        acc.add(err);
        ++tp;
      }
    }
  }
  if (tp_out) *tp_out = tp;
  return tp > 0 ? acc.value() / double(tp) : std::numeric_limits<double>::quiet_NaN();
}

inline MetricsReport evaluate_counts(std::span<const EvalPair> pairs,
                                     const ToleranceSpec& tol, const EvalOptions& opt) {
  MetricsReport report;
  report.tolerance = tol;
  long n_active = 0, n_frames = 0;
  for (const auto& pair : pairs) {
    if (!pair.pred || !pair.gt || pair.pred->size() != pair.gt->size())
      throw std::invalid_argument("evaluate: misaligned prediction/gt pair");
    n_frames += long(pair.pred->size());
    for (const auto& g : *pair.gt) n_active += g.active ? 1 : 0;
  }
  if (n_active == 0)
    throw std::invalid_argument("evaluate: no voice-active ground-truth frames, AP undefined");
  report.n_frames = n_frames;
  report.n_active = n_active;

  const auto thresholds = sigmoid_thresholds(opt.n_thresholds);
  double best_f1 = 0.0, best_thr = 0.5;
  for (double thr : thresholds) {
    FrameCounts counts;
    for (const auto& pair : pairs) {
      const FrameCounts c = classify_frames(*pair.pred, *pair.gt, thr, tol, opt.image_width);
      counts.tp += c.tp;
      counts.fp += c.fp;
      counts.fn += c.fn;
      counts.tn += c.tn;
    }
    PrPoint point;
    point.threshold = thr;
    point.precision = counts.tp + counts.fp > 0
                          ? double(counts.tp) / double(counts.tp + counts.fp)
                          : 1.0;
    point.recall =
        counts.tp + counts.fn > 0 ? double(counts.tp) / double(counts.tp + counts.fn) : 0.0;
    report.pr.push_back(point);
    const double pr_sum = point.precision + point.recall;
    const double f1 = pr_sum > 0 ? 2.0 * point.precision * point.recall / pr_sum : 0.0;
    if (f1 > best_f1) {
      best_f1 = f1;
      best_thr = thr;
    }
  }
  report.ap = ap_from_pr(report.pr);
  report.f1_best = best_f1;
  report.f1_best_threshold = best_thr;

  const double ad_thr =
      opt.ad_point == EvalOptions::AdOperatingPoint::F1Best ? best_thr : 0.5;
  long tp = 0;
  report.ad_pixels = mean_tp_distance_px(pairs, ad_thr, tol, opt.image_width, &tp);
  report.ad_defined = tp > 0;
  if (report.ad_defined) report.ad_degrees = report.ad_pixels / tol.px_per_degree();

  // Detection error at 0.5 confidence, position ignored.
  long wrong = 0;
  for (const auto& pair : pairs) {
    for (size_t i = 0; i < pair.pred->size(); ++i) {
      const bool positive = double((*pair.pred)[i].confidence) >= 0.5;
      if (positive != (*pair.gt)[i].active) ++wrong;
    }
  }
  report.det_err = double(wrong) / double(n_frames);
  return report;
}

}  // namespace detail

/// Aggregate metrics over every pair, plus a per-sequence breakdown.
inline MetricsReport evaluate(std::span<const EvalPair> pairs, const ToleranceSpec& tol,
                              const EvalOptions& opt = {}) {
  MetricsReport report = detail::evaluate_counts(pairs, tol, opt);
  std::map<std::string, std::vector<EvalPair>> by_seq;
  for (const auto& pair : pairs) by_seq[pair.sequence_id].push_back(pair);
  if (by_seq.size() > 1) {
    for (const auto& [name, seq_pairs] : by_seq) {
      const MetricsReport r = detail::evaluate_counts(seq_pairs, tol, opt);
      report.per_sequence[name] = {r.ap, r.f1_best, r.det_err, r.ad_pixels};
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Report emission

inline void write_metrics_json(const std::filesystem::path& path, const MetricsReport& r) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw std::runtime_error("write_metrics_json: cannot open " + tmp.string());
    f << r.to_json().dump(2) << "\n";
  }
  std::filesystem::rename(tmp, path);
}

inline void write_pr_csv(const std::filesystem::path& path, const MetricsReport& r) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    f << "threshold,precision,recall\n";
    for (const auto& p : r.pr) {
      char buf[96];
      std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g\n", p.threshold, p.precision, p.recall);
      f << buf;
    }
  }
  std::filesystem::rename(tmp, path);
}

/// Standalone SVG of the precision-recall curve with the best-F1 point marked.
inline void write_pr_svg(const std::filesystem::path& path, const MetricsReport& r,
                         const std::string& title = "precision-recall") {
  const int W = 480, H = 420, PAD = 50;
  auto sx = [&](double recall) { return PAD + recall * (W - 2 * PAD); };
  auto sy = [&](double precision) { return H - PAD - precision * (H - 2 * PAD); };

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(W) +
         "\" height=\"" + std::to_string(H) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"none\" "
                "stroke=\"black\"/>\n",
                PAD, PAD, W - 2 * PAD, H - 2 * PAD);
  svg += buf;
  for (int g = 0; g <= 4; ++g) {
    const double v = 0.25 * g;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.0f\" y=\"%d\" font-size=\"11\" text-anchor=\"middle\">%.2f"
                  "</text>\n",
                  sx(v), H - PAD + 16, v);
    svg += buf;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"%.0f\" font-size=\"11\" text-anchor=\"end\">%.2f"
                  "</text>\n",
                  PAD - 6, sy(v) + 4, v);
    svg += buf;
  }
  std::snprintf(buf, sizeof(buf),
                "<text x=\"%d\" y=\"%d\" font-size=\"13\">%s (AP=%.3f, F1=%.3f)</text>\n",
                PAD, PAD - 12, title.c_str(), r.ap, r.f1_best);
  svg += buf;
  std::snprintf(buf, sizeof(buf),
                "<text x=\"%.0f\" y=\"%d\" font-size=\"12\" text-anchor=\"middle\">recall"
                "</text>\n",
                sx(0.5), H - 8);
  svg += buf;

  // Polyline over recall-sorted points.
  std::vector<PrPoint> sorted = r.pr;
  std::sort(sorted.begin(), sorted.end(),
            [](const PrPoint& a, const PrPoint& b) { return a.recall < b.recall; });
  svg += "<polyline fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"1.5\" points=\"";
  for (const auto& p : sorted) {
    std::snprintf(buf, sizeof(buf), "%.1f,%.1f ", sx(p.recall), sy(p.precision));
    svg += buf;
  }
  svg += "\"/>\n";

  // Best-F1 marker.
  for (const auto& p : r.pr) {
    if (p.threshold == r.f1_best_threshold) {
      std::snprintf(buf, sizeof(buf),
                    "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"4\" fill=\"#d62728\"/>\n",
                    sx(p.recall), sy(p.precision));
      svg += buf;
      break;
    }
  }
  svg += "</svg>\n";

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    f << svg;
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace asdl
