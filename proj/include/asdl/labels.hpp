// include/asdl/labels.hpp
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

#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "asdl/common.hpp"
#include "asdl/scene.hpp"

namespace asdl {

// ---------------------------------------------------------------------------
// Label tracks

struct FrameLabel {
  bool active = false;
  bool has_x = false;
  float x_norm = 0.0f;      // horizontal position in [0, 1]
  float confidence = 1.0f;
};

/// Per-video-frame labels at 30 fps, dense per camera view. Used for ground
/// truth, teacher pseudo-labels, fused supervision, and predictions alike.
struct LabelTrack {
  double fps = 30.0;
  int image_width = 2448;
  int n_frames = 0;
  std::map<int, std::vector<FrameLabel>> views;

  std::vector<FrameLabel>& view(int v) {
    auto& frames = views[v];
    if (int(frames.size()) < n_frames) frames.resize(size_t(n_frames));
    return frames;
  }
  const std::vector<FrameLabel>& view(int v) const { return views.at(v); }
  bool has_view(int v) const { return views.count(v) != 0; }
};

struct IngestResult {
  LabelTrack track;
  int rejected = 0;  // rows whose normalized position fell outside [0, 1]
};

namespace detail {

inline std::vector<std::string> split_csv_row(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

constexpr const char* kLabelCsvHeader = "frame,view,active,x_left_px,x_right_px,confidence";

/// Parse a teacher/GT prediction file (CSV, see kLabelCsvHeader). Bounding
/// boxes reduce to normalized horizontal centers; frames without a row stay
/// inactive. Rows whose center leaves [0, width] after normalization are
/// rejected and counted.
inline IngestResult ingest_teacher_track(const std::filesystem::path& path,
                                         int image_width = 2448, double fps = 30.0) {
  std::ifstream f(path);
  if (!f) throw MissingArtifactError("ingest_teacher_track: cannot open " + path.string());
  IngestResult result;
  result.track.image_width = image_width;
  result.track.fps = fps;

  std::string line;
  int line_no = 0;
  int max_frame = -1;
  struct Row {
    int frame, view;
    bool active;
    bool has_x;
    float x_norm;
    float conf;
  };
  std::vector<Row> rows;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty() || (line_no == 1 && line.rfind("frame,", 0) == 0)) continue;
    const auto cells = detail::split_csv_row(line);
    if (cells.size() != 6)
      throw ParseError(path.string(), line_no, "expected 6 columns, got " +
                                                   std::to_string(cells.size()));
    Row r{};
    try {
      r.frame = std::stoi(cells[0]);
      r.view = std::stoi(cells[1]);
      r.active = std::stoi(cells[2]) != 0;
      r.has_x = r.active && !cells[3].empty() && !cells[4].empty();
      if (r.has_x) {
        const double left = std::stod(cells[3]);
        const double right = std::stod(cells[4]);
        r.x_norm = float((left + right) / 2.0 / double(image_width));
      }
      r.conf = cells[5].empty() ? 1.0f : float(std::stod(cells[5]));
    } catch (const std::invalid_argument&) {
      throw ParseError(path.string(), line_no, "malformed numeric field");
    } catch (const std::out_of_range&) {
      throw ParseError(path.string(), line_no, "numeric field out of range");
    }
    if (r.frame < 0) throw ParseError(path.string(), line_no, "negative frame index");
    if (r.has_x && (r.x_norm < 0.0f || r.x_norm > 1.0f)) {
      ++result.rejected;
      continue;
    }
    max_frame = std::max(max_frame, r.frame);
    rows.push_back(r);
  }

  result.track.n_frames = max_frame + 1;
  for (const auto& r : rows) {
    auto& frames = result.track.view(r.view);
    FrameLabel& fl = frames[size_t(r.frame)];
    fl.active = r.active;
    fl.has_x = r.has_x;
    fl.x_norm = r.x_norm;
    fl.confidence = r.conf;
  }
  return result;
}

/// Write a track in the same CSV schema the ingester reads. Positions are
/// emitted as a degenerate box centered on x_norm.
inline void write_label_track(const std::filesystem::path& path, const LabelTrack& track) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw std::runtime_error("write_label_track: cannot open " + tmp.string());
    f << kLabelCsvHeader << "\n";
    for (const auto& [v, frames] : track.views) {
      for (int i = 0; i < int(frames.size()); ++i) {
        const FrameLabel& fl = frames[size_t(i)];
        f << i << "," << v << "," << (fl.active ? 1 : 0) << ",";
        if (fl.has_x) {
          const double px = double(fl.x_norm) * track.image_width;
          char buf[64];
          std::snprintf(buf, sizeof(buf), "%.3f,%.3f", px, px);
          f << buf;
        } else {
          f << ",";
        }
        char cbuf[32];
        std::snprintf(cbuf, sizeof(cbuf), ",%.4f", double(fl.confidence));
        f << cbuf << "\n";
      }
    }
  }
  std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Voice activity

struct VaTrack {
  enum class Source { GT, VAD };
  Source source = Source::GT;
  std::vector<VoiceSegment> segments;

  void validate() const {
    double prev = -1.0;
    for (const auto& s : segments) {
      if (s.onset_s < prev || s.offset_s <= s.onset_s)
        throw ConfigError("VaTrack: segments must be disjoint and sorted");
      prev = s.offset_s;
    }
  }
};

inline void write_va_track(const std::filesystem::path& path, const VaTrack& va) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw std::runtime_error("write_va_track: cannot open " + tmp.string());
    f << "onset_s,offset_s\n";
    for (const auto& s : va.segments) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.6f,%.6f\n", s.onset_s, s.offset_s);
      f << buf;
    }
  }
  std::filesystem::rename(tmp, path);
}

inline VaTrack read_va_track(const std::filesystem::path& path,
                             VaTrack::Source source = VaTrack::Source::GT) {
  std::ifstream f(path);
  if (!f) throw MissingArtifactError("read_va_track: cannot open " + path.string());
  VaTrack va;
  va.source = source;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty() || (line_no == 1 && line.rfind("onset", 0) == 0)) continue;
    const auto cells = detail::split_csv_row(line);
    if (cells.size() != 2) throw ParseError(path.string(), line_no, "expected 2 columns");
    try {
      va.segments.push_back({std::stod(cells[0]), std::stod(cells[1])});
    } catch (const std::exception&) {
      throw ParseError(path.string(), line_no, "malformed numeric field");
    }
  }
  va.validate();
  return va;
}

/// Frame i is active iff its midpoint time (i + 0.5)/fps lies inside a segment.
inline std::vector<uint8_t> rasterize_va(const VaTrack& va, double fps, int n_frames) {
  if (n_frames <= 0) throw std::invalid_argument("rasterize_va: n_frames must be positive");
  std::vector<uint8_t> out(size_t(n_frames), 0);
  for (int i = 0; i < n_frames; ++i) {
    const double mid = (double(i) + 0.5) / fps;
    for (const auto& s : va.segments)
      if (mid >= s.onset_s && mid < s.offset_s) {
        out[size_t(i)] = 1;
        break;
      }
  }
  return out;
}

/// Energy-threshold voice activity detector: non-overlapping frames of
/// frame_ms, active when 10 log10(mean x^2) clears threshold_dbfs, with a
/// hangover that keeps activity alive for hangover_frames after the last
/// loud frame. Provided to exercise the VAD supervision pathway on synthetic
/// scenes.
inline VaTrack energy_vad(std::span<const float> x, double sample_rate,
                          double frame_ms = 30.0, double threshold_dbfs = -40.0,
                          int hangover_frames = 3) {
  const int flen = int(frame_ms * sample_rate / 1000.0);
  const int n_frames = int(x.size()) / flen;
  std::vector<uint8_t> active(size_t(n_frames), 0);
  int hang = 0;
  for (int i = 0; i < n_frames; ++i) {
    double e = 0.0;
    for (int k = 0; k < flen; ++k) {
      const double v = x[size_t(i * flen + k)];
      e += v * v;
    }
    const double db = 10.0 * std::log10(e / double(flen) + 1e-30);
    if (db >= threshold_dbfs) {
      active[size_t(i)] = 1;
      hang = hangover_frames;
    } else if (hang > 0) {
      active[size_t(i)] = 1;
      --hang;
    }
  }
  VaTrack va;
  va.source = VaTrack::Source::VAD;
  int start = -1;
  for (int i = 0; i <= n_frames; ++i) {
    const bool on = i < n_frames && active[size_t(i)];
    if (on && start < 0) start = i;
    if (!on && start >= 0) {
      va.segments.push_back({double(start) * flen / sample_rate, double(i) * flen / sample_rate});
      start = -1;
    }
  }
  return va;
}

// ---------------------------------------------------------------------------
// Supervision matrix

enum class LocationSource { GT, ASC, ASC_SCREENED, TALKNET };
enum class VaSource { GT, VAD };

/// One of the eight supervisory conditions, named [Location]-[VA].
struct SupervisionConfig {
  LocationSource location = LocationSource::GT;
  VaSource va = VaSource::GT;

  static const std::vector<std::string>& valid_names() {
    static const std::vector<std::string> names = {
        "Gt-Gt",  "Gt-Vad",  "Asc(s)-Gt", "Asc(s)-Vad",
        "Asc-Gt", "Asc-Vad", "TalkNet-Gt", "TalkNet-Vad"};
    return names;
  }

  static SupervisionConfig parse(const std::string& name) {
    SupervisionConfig c;
    const auto dash = name.rfind('-');
    std::string loc = dash == std::string::npos ? name : name.substr(0, dash);
    std::string va = dash == std::string::npos ? "" : name.substr(dash + 1);
    if (loc == "Gt") c.location = LocationSource::GT;
    else if (loc == "Asc") c.location = LocationSource::ASC;
    else if (loc == "Asc(s)") c.location = LocationSource::ASC_SCREENED;
    else if (loc == "TalkNet") c.location = LocationSource::TALKNET;
    else loc.clear();
    if (va == "Gt") c.va = VaSource::GT;
    else if (va == "Vad") c.va = VaSource::VAD;
    else va.clear();
    if (loc.empty() || va.empty()) {
      std::string msg = "unknown supervision condition '" + name + "'; valid names:";
      for (const auto& n : valid_names()) msg += " " + n;
      throw ConfigError(msg);
    }
    return c;
  }

  std::string name() const {
    std::string loc;
    switch (location) {
      case LocationSource::GT: loc = "Gt"; break;
      case LocationSource::ASC: loc = "Asc"; break;
      case LocationSource::ASC_SCREENED: loc = "Asc(s)"; break;
      case LocationSource::TALKNET: loc = "TalkNet"; break;
    }
    return loc + (va == VaSource::GT ? "-Gt" : "-Vad");
  }
};

// ---------------------------------------------------------------------------
// Target fusion

/// Per-output-frame training targets implementing the masked loss semantics:
/// the confidence target comes from voice activity alone, and the regression
/// target is masked in unless the frame is both voice-active and carries a
/// teacher detection. Teacher negatives never drive the confidence target.
struct TargetFrame {
  uint8_t mask = 0;
  uint8_t c_hat = 0;
  float x_hat = 0.0f;
};

struct TrainingTarget {
  std::vector<TargetFrame> frames;
  int view = 0;
  int size() const { return int(frames.size()); }
};

struct FuseOptions {
  /// Criterion hook: when true the regression mask ignores voice activity and
  /// trusts every teacher detection, including false positives.
  bool mask_bypass = false;
};

inline TrainingTarget fuse(std::span<const FrameLabel> location, std::span<const uint8_t> va,
                           const FuseOptions& opt = {}) {
  if (location.size() != va.size())
    throw std::invalid_argument("fuse: location and VA tracks have different lengths");
  TrainingTarget t;
  t.frames.resize(location.size());
  for (size_t i = 0; i < location.size(); ++i) {
    const bool detected = location[i].active && location[i].has_x;
    const bool masked = opt.mask_bypass ? detected : (va[i] != 0 && detected);
    t.frames[i].mask = masked ? 1 : 0;
    t.frames[i].c_hat = va[i] != 0 ? 1 : 0;
    t.frames[i].x_hat = masked ? location[i].x_norm : 0.0f;
  }
  return t;
}

/// Remove teacher detections on frames where the ground truth is silent
/// (the automatic stand-in for manual false-positive screening).
inline LabelTrack screen_false_positives(const LabelTrack& track, const LabelTrack& gt) {
  LabelTrack out = track;
  for (auto& [v, frames] : out.views) {
    if (!gt.has_view(v))
      throw std::invalid_argument("screen_false_positives: ground truth lacks view " +
                                  std::to_string(v));
    const auto& gt_frames = gt.view(v);
    for (size_t i = 0; i < frames.size() && i < gt_frames.size(); ++i) {
      if (!gt_frames[i].active && frames[i].active) {
        frames[i] = FrameLabel{};
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic teacher

enum class TeacherQuality { Strong, Weak };

struct TeacherParams {
  double occlusion_fraction = 0.15;  // detections dropped on active frames
  double jitter_sigma = 0.005;       // positional noise, normalized units
  double fp_fraction = 0.20;         // weak only: FP rate on silent frames
  double distractor_x = 0.20;        // weak only: where FP detections point
};

struct SynthTeacherResult {
  LabelTrack track;
  std::vector<std::pair<int, int>> dropped;   // (view, frame) occluded
  std::vector<std::pair<int, int>> injected;  // (view, frame) false positives
};

/// Corrupt a ground-truth track into a synthetic teacher: the strong teacher
/// misses a fraction of active frames (occlusion) and jitters positions; the
/// weak teacher additionally reports false detections at the distractor
/// position on a fraction of silent frames.
inline SynthTeacherResult synth_teacher(const LabelTrack& gt, TeacherQuality quality,
                                        const TeacherParams& p, uint64_t seed) {
  SynthTeacherResult result;
  result.track = gt;
  for (auto& [v, frames] : result.track.views) {
    Rng rng(derive_seed(seed, uint64_t(v)));
    for (size_t i = 0; i < frames.size(); ++i) {
      FrameLabel& fl = frames[i];
      if (fl.active && fl.has_x) {
        if (rng.uniform() < p.occlusion_fraction) {
          fl = FrameLabel{};
          result.dropped.emplace_back(v, int(i));
        } else if (p.jitter_sigma > 0.0) {
          const double x = double(fl.x_norm) + p.jitter_sigma * rng.gaussian();
          fl.x_norm = float(std::min(1.0, std::max(0.0, x)));
        }
      } else if (quality == TeacherQuality::Weak && !fl.active) {
        if (rng.uniform() < p.fp_fraction) {
          fl.active = true;
          fl.has_x = true;
          fl.x_norm = float(p.distractor_x);
          fl.confidence = 1.0f;
          result.injected.emplace_back(v, int(i));
        }
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Binary target sidecar: fused targets stored alongside the feature chunks.

inline void write_targets_file(const std::filesystem::path& path,
                               std::span<const TrainingTarget> targets) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("write_targets_file: cannot open " + tmp.string());
    f.write("ASDLTGT1", 8);
    const uint32_t n = uint32_t(targets.size());
    f.write(reinterpret_cast<const char*>(&n), 4);
    for (const auto& t : targets) {
      const uint32_t view = uint32_t(t.view);
      const uint32_t len = uint32_t(t.frames.size());
      f.write(reinterpret_cast<const char*>(&view), 4);
      f.write(reinterpret_cast<const char*>(&len), 4);
      for (const auto& fr : t.frames) {
        f.put(char(fr.mask));
        f.put(char(fr.c_hat));
        f.write(reinterpret_cast<const char*>(&fr.x_hat), 4);
      }
    }
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<TrainingTarget> read_targets_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifactError("read_targets_file: cannot open " + path.string());
  char magic[8];
  f.read(magic, 8);
  if (std::string(magic, 8) != "ASDLTGT1")
    throw std::runtime_error("read_targets_file: bad magic");
  uint32_t n = 0;
  f.read(reinterpret_cast<char*>(&n), 4);
  std::vector<TrainingTarget> targets(n);
  for (auto& t : targets) {
    uint32_t view = 0, len = 0;
    f.read(reinterpret_cast<char*>(&view), 4);
    f.read(reinterpret_cast<char*>(&len), 4);
    t.view = int(view);
    t.frames.resize(len);
    for (auto& fr : t.frames) {
      fr.mask = uint8_t(f.get());
      fr.c_hat = uint8_t(f.get());
      f.read(reinterpret_cast<char*>(&fr.x_hat), 4);
    }
  }
  if (!f) throw std::runtime_error("read_targets_file: truncated file");
  return targets;
}

}  // namespace asdl
