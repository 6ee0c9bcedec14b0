// include/asdl/pipeline.hpp
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
// Experiment orchestration: configuration with environment overrides, the
// simulate -> features -> labels -> train -> eval -> report workflow over a
// manifest of atomically written artifacts, and the ablation matrix.

#pragma once

#include <unistd.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "asdl/eval.hpp"
#include "asdl/features.hpp"
#include "asdl/geometry.hpp"
#include "asdl/labels.hpp"
#include "asdl/model.hpp"
#include "asdl/scene.hpp"
#include "asdl/wav.hpp"

namespace asdl {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

struct SceneGenConfig {
  int n_train = 12;
  int n_test = 5;
  double train_duration_s = 5.0;
  double test_duration_s = 4.0;
  double azimuth_limit_deg = 20.0;
  double max_rate_deg_s = 12.0;
  double speech_min_s = 0.6, speech_max_s = 1.5;
  double gap_min_s = 0.25, gap_max_s = 0.7;
  uint64_t seed = 1234;
  Propagation propagation = Propagation::PlaneWave;
  double source_range_m = 3.5;
};

struct TeacherConfig {
  TeacherParams params;
  uint64_t seed = 555;
};

struct VadConfig {
  double frame_ms = 30.0;
  double threshold_dbfs = -40.0;
  int hangover_frames = 3;
};

struct EvalConfig {
  int n_thresholds = 101;
  std::vector<double> tolerances_deg = {2.0, 5.0};
  enum class PxPerDeg { Pinhole, PaperCalibration } px_per_deg = PxPerDeg::Pinhole;
  EvalOptions::AdOperatingPoint ad_point = EvalOptions::AdOperatingPoint::F1Best;
  double confidence_threshold = 0.5;
};

struct AblationAxes {
  std::vector<std::string> features;      // feature kinds
  std::vector<std::string> models;        // model variants
  std::vector<std::string> supervisions;  // Table-style names
  std::vector<json> snrs;                 // numbers or null for clean
  bool empty() const {
    return features.empty() && models.empty() && supervisions.empty() && snrs.empty();
  }
};

struct ExperimentConfig {
  std::string name = "experiment";
  fs::path out_dir = "runs/experiment";
  uint64_t seed = 0;

  ArrayGeometry geometry = ArrayGeometry::default_rig();
  std::vector<CameraModel> cameras = default_camera_views();
  std::vector<int> active_views = {5};

  SceneGenConfig scenes;
  std::optional<double> snr_db;
  uint64_t noise_seed = 777;

  FeatureKind feature = FeatureKind::GccPhat;
  FeatureConfig feature_cfg;

  CrnnConfig model;
  TrainHyper train;
  SupervisionConfig supervision;
  bool mask_bypass = false;
  TeacherConfig teacher;
  VadConfig vad;
  EvalConfig eval;

  AblationAxes ablate;
  int workers = 2;

  json effective_json;  // the fully resolved configuration, for hashing/logs

  std::string config_hash() const { return hex64(fnv1a64(effective_json.dump())); }

  const CameraModel& camera(int view) const {
    for (const auto& c : cameras)
      if (c.view_index == view) return c;
    throw ConfigError("no camera for view " + std::to_string(view));
  }

  static ExperimentConfig from_json(json j);
  static ExperimentConfig load(const fs::path& path);
};

namespace detail {

/// ASDL_FOO_BAR=value overrides config key foo.bar (longest-prefix key match
/// on each level, so ASDL_OUT_DIR hits "out_dir"). Values parse as JSON with
/// a string fallback.
inline void apply_env_overrides(json& j, const char* prefix = "ASDL_") {
  for (char** e = ::environ; *e; ++e) {
    const std::string entry(*e);
    if (entry.rfind(prefix, 0) != 0) continue;
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    std::string key = entry.substr(std::string(prefix).size(), eq - std::string(prefix).size());
    const std::string value = entry.substr(eq + 1);
    for (auto& c : key) c = char(std::tolower(c));

    // Resolve the dotted path by greedily matching existing keys.
    std::vector<std::string> tokens;
    std::string cur;
    for (char c : key) {
      if (c == '_') {
        tokens.push_back(cur);
        cur.clear();
      } else cur.push_back(c);
    }
    tokens.push_back(cur);

    std::function<bool(json&, size_t)> descend = [&](json& node, size_t i) -> bool {
      if (i >= tokens.size()) return false;
      std::string joined;
      for (size_t k = tokens.size(); k > i; --k) {
        joined.clear();
        for (size_t t = i; t < k; ++t) {
          if (t > i) joined += "_";
          joined += tokens[t];
        }
        if (!node.is_object() || !node.contains(joined)) continue;
        if (k == tokens.size()) {
          json parsed = json::parse(value, nullptr, false);
          node[joined] = parsed.is_discarded() ? json(value) : parsed;
          return true;
        }
        if (descend(node[joined], k)) return true;
      }
      return false;
    };
    descend(j, 0);
  }
}

inline void apply_model_preset(CrnnConfig& m, const std::string& preset) {
  if (preset == "desk") {
    m.conv_channels = {16, 32, 64, 128};
    m.gru_hidden = 64;
    m.fc1_dim = 64;
  } else if (preset == "paper") {
    m.conv_channels = {64, 128, 256, 512};
    m.gru_hidden = 256;
    m.fc1_dim = 128;
  } else if (preset == "mini") {
    m.conv_channels = {4, 8, 16, 32};
    m.gru_hidden = 16;
    m.fc1_dim = 32;
  } else {
    throw ConfigError("unknown model preset '" + preset + "' (desk|paper|mini)");
  }
}

}  // namespace detail

inline ExperimentConfig ExperimentConfig::from_json(json j) {
  detail::apply_env_overrides(j);
  ExperimentConfig cfg;
  cfg.name = j.value("name", cfg.name);
  cfg.out_dir = fs::path(j.value("out_dir", cfg.out_dir.string()));
  cfg.seed = j.value("seed", cfg.seed);

  if (j.contains("geometry")) cfg.geometry = ArrayGeometry::from_json(j["geometry"]);
  if (j.contains("cameras")) {
    cfg.cameras.clear();
    for (const auto& c : j["cameras"]) cfg.cameras.push_back(CameraModel::from_json(c));
  }
  if (j.contains("active_views"))
    cfg.active_views = j["active_views"].get<std::vector<int>>();

  if (j.contains("scenes")) {
    const json& s = j["scenes"];
    cfg.scenes.n_train = s.value("n_train", cfg.scenes.n_train);
    cfg.scenes.n_test = s.value("n_test", cfg.scenes.n_test);
    cfg.scenes.train_duration_s = s.value("train_duration_s", cfg.scenes.train_duration_s);
    cfg.scenes.test_duration_s = s.value("test_duration_s", cfg.scenes.test_duration_s);
    cfg.scenes.azimuth_limit_deg = s.value("azimuth_limit_deg", cfg.scenes.azimuth_limit_deg);
    cfg.scenes.max_rate_deg_s = s.value("max_rate_deg_s", cfg.scenes.max_rate_deg_s);
    cfg.scenes.speech_min_s = s.value("speech_min_s", cfg.scenes.speech_min_s);
    cfg.scenes.speech_max_s = s.value("speech_max_s", cfg.scenes.speech_max_s);
    cfg.scenes.gap_min_s = s.value("gap_min_s", cfg.scenes.gap_min_s);
    cfg.scenes.gap_max_s = s.value("gap_max_s", cfg.scenes.gap_max_s);
    cfg.scenes.seed = s.value("seed", cfg.scenes.seed);
    cfg.scenes.propagation = s.value("propagation", std::string("plane")) == "spherical"
                                 ? Propagation::Spherical
                                 : Propagation::PlaneWave;
    cfg.scenes.source_range_m = s.value("source_range_m", cfg.scenes.source_range_m);
  }
  if (j.contains("snr_db") && !j["snr_db"].is_null())
    cfg.snr_db = j["snr_db"].get<double>();
  cfg.noise_seed = j.value("noise_seed", cfg.noise_seed);

  cfg.feature = feature_kind_from_string(j.value("feature", std::string("gcc-phat")));

  if (j.contains("model")) {
    const json& m = j["model"];
    if (m.contains("preset")) detail::apply_model_preset(cfg.model, m["preset"]);
    cfg.model.variant = model_variant_from_string(m.value("variant", std::string("crnn")));
    if (m.contains("conv_channels")) {
      const auto v = m["conv_channels"].get<std::vector<int>>();
      if (v.size() != 4) throw ConfigError("model.conv_channels needs 4 entries");
      std::copy(v.begin(), v.end(), cfg.model.conv_channels.begin());
    }
    cfg.model.gru_hidden = m.value("gru_hidden", cfg.model.gru_hidden);
    cfg.model.fc1_dim = m.value("fc1_dim", cfg.model.fc1_dim);
  }
  cfg.model.in_channels = feature_channels(cfg.feature, cfg.geometry.n_mics());
  cfg.model.t_in = 960;
  cfg.model.f_in = 64;

  if (j.contains("train")) {
    const json& t = j["train"];
    cfg.train.epochs = t.value("epochs", cfg.train.epochs);
    cfg.train.batch = t.value("batch", cfg.train.batch);
    cfg.train.lr = t.value("lr", cfg.train.lr);
    cfg.train.lr_fixed_epochs = t.value("lr_fixed_epochs", cfg.train.lr_fixed_epochs);
    cfg.train.lr_decay = t.value("lr_decay", cfg.train.lr_decay);
  }

  cfg.supervision = SupervisionConfig::parse(j.value("supervision", std::string("Gt-Gt")));
  cfg.mask_bypass = j.value("mask_bypass", false);

  if (j.contains("teacher")) {
    const json& t = j["teacher"];
    cfg.teacher.params.occlusion_fraction =
        t.value("occlusion_fraction", cfg.teacher.params.occlusion_fraction);
    cfg.teacher.params.jitter_sigma = t.value("jitter_sigma", cfg.teacher.params.jitter_sigma);
    cfg.teacher.params.fp_fraction = t.value("fp_fraction", cfg.teacher.params.fp_fraction);
    cfg.teacher.params.distractor_x = t.value("distractor_x", cfg.teacher.params.distractor_x);
    cfg.teacher.seed = t.value("seed", cfg.teacher.seed);
  }
  if (j.contains("vad")) {
    const json& v = j["vad"];
    cfg.vad.frame_ms = v.value("frame_ms", cfg.vad.frame_ms);
    cfg.vad.threshold_dbfs = v.value("threshold_dbfs", cfg.vad.threshold_dbfs);
    cfg.vad.hangover_frames = v.value("hangover_frames", cfg.vad.hangover_frames);
  }
  if (j.contains("eval")) {
    const json& e = j["eval"];
    cfg.eval.n_thresholds = e.value("thresholds", cfg.eval.n_thresholds);
    if (e.contains("tolerances_deg"))
      cfg.eval.tolerances_deg = e["tolerances_deg"].get<std::vector<double>>();
    const std::string px = e.value("px_per_deg", std::string("pinhole"));
    if (px == "pinhole") cfg.eval.px_per_deg = EvalConfig::PxPerDeg::Pinhole;
    else if (px == "paper-calibration" || px == "paper")
      cfg.eval.px_per_deg = EvalConfig::PxPerDeg::PaperCalibration;
    else throw ConfigError("eval.px_per_deg must be pinhole|paper-calibration");
    const std::string ad = e.value("ad_operating_point", std::string("f1-best"));
    if (ad == "f1-best") cfg.eval.ad_point = EvalOptions::AdOperatingPoint::F1Best;
    else if (ad == "0.5") cfg.eval.ad_point = EvalOptions::AdOperatingPoint::Fixed05;
    else throw ConfigError("eval.ad_operating_point must be f1-best|0.5");
    cfg.eval.confidence_threshold =
        e.value("confidence_threshold", cfg.eval.confidence_threshold);
  }
  if (j.contains("ablate")) {
    const json& a = j["ablate"];
    if (a.contains("features"))
      cfg.ablate.features = a["features"].get<std::vector<std::string>>();
    if (a.contains("models")) cfg.ablate.models = a["models"].get<std::vector<std::string>>();
    if (a.contains("supervisions"))
      cfg.ablate.supervisions = a["supervisions"].get<std::vector<std::string>>();
    if (a.contains("snrs"))
      for (const auto& s : a["snrs"]) cfg.ablate.snrs.push_back(s);
  }
  cfg.workers = std::max(1, j.value("workers", cfg.workers));
  cfg.effective_json = j;
  return cfg;
}

inline ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path.string());
  json j = json::parse(f, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file is not valid JSON: " + path.string());
  return from_json(j);
}

// ---------------------------------------------------------------------------
// Logging and the manifest

inline void log_stage(const ExperimentConfig& cfg, const std::string& stage,
                      const std::string& msg) {
  std::fprintf(stderr, "[asdl] stage=%s config=%s seed=%llu %s\n", stage.c_str(),
               cfg.config_hash().c_str(), static_cast<unsigned long long>(cfg.seed),
               msg.c_str());
}

inline void write_text_atomic(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc | std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + tmp.string());
    f.write(text.data(), std::streamsize(text.size()));
  }
  fs::rename(tmp, path);
}

class Manifest {
 public:
  explicit Manifest(const fs::path& out_dir) : path_(out_dir / "manifest.json") {
    if (fs::exists(path_)) {
      std::ifstream f(path_);
      data_ = json::parse(f, nullptr, false);
      if (data_.is_discarded()) data_ = json::object();
    } else {
      data_ = json::object();
    }
    if (!data_.contains("stages")) data_["stages"] = json::object();
  }

  void record_stage(const std::string& stage, const std::string& config_hash,
                    std::vector<std::string> artifacts) {
    std::sort(artifacts.begin(), artifacts.end());
    data_["stages"][stage] = {{"config_hash", config_hash}, {"artifacts", artifacts}};
    write_text_atomic(path_, data_.dump(2) + "\n");
  }

  bool has_stage(const std::string& stage) const {
    return data_["stages"].contains(stage);
  }

  std::vector<std::string> artifacts(const std::string& stage) const {
    if (!has_stage(stage)) return {};
    return data_["stages"][stage]["artifacts"].get<std::vector<std::string>>();
  }

  /// Every artifact recorded for the stage must exist on disk.
  void require_stage(const fs::path& out_dir, const std::string& stage,
                     const std::string& needed_by) const {
    if (!has_stage(stage))
      throw MissingArtifactError("stage '" + needed_by + "' needs artifacts from '" + stage +
                                 "'; run `asdl " + stage + "` first");
    for (const auto& a : artifacts(stage))
      if (!fs::exists(out_dir / a))
        throw MissingArtifactError("artifact '" + a + "' recorded by stage '" + stage +
                                   "' is missing; re-run `asdl " + stage + "`");
  }

  const json& data() const { return data_; }

 private:
  fs::path path_;
  json data_;
};

// ---------------------------------------------------------------------------
// Scene generation

/// Deterministic synthetic scene: a piecewise-linear azimuth random walk and
/// alternating speech/gap segments.
inline SceneSpec generate_scene(const SceneGenConfig& gen, const std::string& id,
                                double duration, uint64_t scene_seed) {
  Rng rng(scene_seed);
  SceneSpec spec;
  spec.id = id;
  spec.duration_s = duration;
  spec.rng_seed = scene_seed;
  spec.propagation = gen.propagation;
  spec.source_range_m = gen.source_range_m;

  double az = rng.uniform(-gen.azimuth_limit_deg, gen.azimuth_limit_deg);
  for (double t = 0.0;; t += 0.5) {
    spec.trajectory.push_back({t, az});
    if (t >= duration) break;
    az += rng.uniform(-gen.max_rate_deg_s, gen.max_rate_deg_s) * 0.5;
    az = std::min(gen.azimuth_limit_deg, std::max(-gen.azimuth_limit_deg, az));
  }

  double t = rng.uniform(0.05, 0.3);
  while (t < duration - 0.2) {
    const double len = rng.uniform(gen.speech_min_s, gen.speech_max_s);
    const double end = std::min(t + len, duration - 0.02);
    if (end - t > 0.15) spec.voice_segments.push_back({t, end});
    t = end + rng.uniform(gen.gap_min_s, gen.gap_max_s);
  }
  if (spec.voice_segments.empty())
    spec.voice_segments.push_back({0.2, std::min(1.2, duration - 0.1)});
  return spec;
}

struct ChunkRef {
  std::string scene_id;
  std::string split;  // "train" | "test"
  double start_s = 0.0;
  int index = 0;  // position in the global chunk order
};

/// 2-second chunks at a 1-second hop over every scene, train scenes first.
inline std::vector<ChunkRef> chunk_plan(const ExperimentConfig& cfg) {
  std::vector<ChunkRef> chunks;
  auto add = [&](const std::string& split, int count, double duration) {
    for (int i = 0; i < count; ++i) {
      const std::string id = split + "_" + std::to_string(i);
      for (double s = 0.0; s + 2.0 <= duration + 1e-9; s += 1.0)
        chunks.push_back({id, split, s, int(chunks.size())});
    }
  };
  add("train", cfg.scenes.n_train, cfg.scenes.train_duration_s);
  add("test", cfg.scenes.n_test, cfg.scenes.test_duration_s);
  return chunks;
}

inline std::vector<std::pair<std::string, double>> scene_list(const ExperimentConfig& cfg) {
  std::vector<std::pair<std::string, double>> scenes;
  for (int i = 0; i < cfg.scenes.n_train; ++i)
    scenes.emplace_back("train_" + std::to_string(i), cfg.scenes.train_duration_s);
  for (int i = 0; i < cfg.scenes.n_test; ++i)
    scenes.emplace_back("test_" + std::to_string(i), cfg.scenes.test_duration_s);
  return scenes;
}

// ---------------------------------------------------------------------------
// Stages

/// simulate: render every scene to a 24-bit multichannel WAV (pink noise
/// baked in when snr_db is set) plus its spec JSON.
inline void run_simulate(const ExperimentConfig& cfg) {
  const fs::path dir = cfg.out_dir / "scenes";
  fs::create_directories(dir);
  Manifest manifest(cfg.out_dir);
  std::vector<std::string> artifacts;

  const CameraModel& cam = cfg.camera(cfg.active_views.front());
  const auto scenes = scene_list(cfg);
  for (size_t i = 0; i < scenes.size(); ++i) {
    const auto& [id, duration] = scenes[i];
    SceneSpec spec = generate_scene(cfg.scenes, id, duration,
                                    derive_seed(cfg.scenes.seed, uint64_t(i)));
    spec.snr_db = cfg.snr_db;
    spec.validate(&cam);

    Rng source_rng(derive_seed(spec.rng_seed, 0x5253ULL));
    const auto source = speech_shaped_noise(
        size_t((duration + 0.1) * cfg.geometry.sample_rate), cfg.geometry.sample_rate,
        source_rng);
    MultichannelClip clip = render_scene(spec, cfg.geometry, source);
    if (cfg.snr_db)
      clip = add_pink_noise(clip, *cfg.snr_db, derive_seed(cfg.noise_seed, uint64_t(i)));

    write_text_atomic(dir / (id + ".json"), spec.to_json().dump(2) + "\n");
    write_wav24(dir / (id + ".wav"), clip.samples, int(cfg.geometry.sample_rate));
    artifacts.push_back("scenes/" + id + ".json");
    artifacts.push_back("scenes/" + id + ".wav");
  }
  manifest.record_stage("simulate", cfg.config_hash(), artifacts);
  log_stage(cfg, "simulate", "rendered " + std::to_string(scenes.size()) + " scenes");
}

/// features: slice every scene into 2 s chunks, extract the configured
/// feature kind, fit normalization stats on the training chunks, and write
/// the sidecar index.
inline void run_features(const ExperimentConfig& cfg) {
  Manifest manifest(cfg.out_dir);
  manifest.require_stage(cfg.out_dir, "simulate", "features");
  const fs::path dir = cfg.out_dir / "features" / to_string(cfg.feature);
  fs::create_directories(dir);

  const auto chunks = chunk_plan(cfg);
  std::vector<FeatureTensor> tensors(chunks.size());

  // Per-scene WAVs loaded once, chunks cut per plan. Chunks fan out over a
  // small worker pool; each slot writes only its own entry.
  std::map<std::string, MultichannelClip> clips;
  for (const auto& [id, duration] : scene_list(cfg)) {
    const WavData wav = read_wav(cfg.out_dir / "scenes" / (id + ".wav"));
    MultichannelClip clip;
    clip.sample_rate = wav.sample_rate;
    clip.samples = wav.channels;
    clips[id] = std::move(clip);
    (void)duration;
  }

  std::atomic<size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= chunks.size()) break;
      const ChunkRef& c = chunks[i];
      const MultichannelClip& scene_clip = clips.at(c.scene_id);
      MultichannelClip chunk;
      chunk.sample_rate = scene_clip.sample_rate;
      const size_t s0 = size_t(std::llround(c.start_s * scene_clip.sample_rate));
      chunk.samples.resize(scene_clip.samples.size());
      for (size_t ch = 0; ch < scene_clip.samples.size(); ++ch)
        chunk.samples[ch].assign(scene_clip.samples[ch].begin() + long(s0),
                                 scene_clip.samples[ch].begin() + long(s0) + 96000);
      tensors[i] = extract_features(chunk, cfg.geometry, cfg.feature_cfg, cfg.feature);
      tensors[i].clip_id = c.scene_id + "_c" + std::to_string(c.index);
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < cfg.workers; ++w) pool.emplace_back(worker);
  for (auto& th : pool) th.join();

  // Normalization from the training split only.
  std::vector<FeatureTensor> train_tensors;
  for (size_t i = 0; i < chunks.size(); ++i)
    if (chunks[i].split == "train") train_tensors.push_back(tensors[i]);
  const NormStats stats = fit_normalization(train_tensors);
  write_norm_stats(dir / "norm.bin", stats);

  std::vector<std::string> artifacts{"features/" + to_string(cfg.feature) + "/norm.bin"};
  json index;
  index["kind"] = to_string(cfg.feature);
  index["norm_stats"] = "norm.bin";
  index["targets"] = "targets.bin";  // written by the labels stage
  index["chunks"] = json::array();
  for (size_t i = 0; i < chunks.size(); ++i) {
    const std::string fname = "chunk_" + std::to_string(chunks[i].index) + ".feat";
    write_feature_file(dir / fname, tensors[i]);
    artifacts.push_back("features/" + to_string(cfg.feature) + "/" + fname);
    index["chunks"].push_back({{"file", fname},
                               {"sequence", chunks[i].scene_id},
                               {"split", chunks[i].split},
                               {"start_s", chunks[i].start_s},
                               {"cameras", cfg.active_views}});
  }
  write_text_atomic(dir / "index.json", index.dump(2) + "\n");
  artifacts.push_back("features/" + to_string(cfg.feature) + "/index.json");
  manifest.record_stage("features", cfg.config_hash(), artifacts);
  log_stage(cfg, "features",
            "extracted " + std::to_string(chunks.size()) + " chunks of " +
                to_string(cfg.feature));
}

namespace detail {

inline LabelTrack gt_track_for_scene(const ExperimentConfig& cfg, const SceneSpec& spec) {
  LabelTrack gt;
  gt.fps = 30.0;
  gt.n_frames = int(std::lround(spec.duration_s * 30.0));
  VaTrack va;
  va.segments = spec.voice_segments;
  const auto bits = rasterize_va(va, 30.0, gt.n_frames);
  for (int view : cfg.active_views) {
    const CameraModel& cam = cfg.camera(view);
    gt.image_width = cam.image_width;
    auto& frames = gt.view(view);
    for (int i = 0; i < gt.n_frames; ++i) {
      if (!bits[size_t(i)]) continue;
      const double t_mid = (double(i) + 0.5) / 30.0;
      const double az = spec.azimuth_at(t_mid);
      frames[size_t(i)].active = true;
      frames[size_t(i)].has_x = true;
      frames[size_t(i)].x_norm = float(cam.project_to_pixels(az) / cam.image_width);
    }
  }
  return gt;
}

inline SceneSpec load_scene_spec(const ExperimentConfig& cfg, const std::string& id) {
  std::ifstream f(cfg.out_dir / "scenes" / (id + ".json"));
  if (!f)
    throw MissingArtifactError("scene spec '" + id + "' missing; run `asdl simulate` first");
  return SceneSpec::from_json(json::parse(f));
}

/// The location track feeding fusion, per the configured supervision.
inline LabelTrack location_track(const ExperimentConfig& cfg, const LabelTrack& gt,
                                 uint64_t scene_tag) {
  switch (cfg.supervision.location) {
    case LocationSource::GT:
      return gt;
    case LocationSource::ASC:
      return synth_teacher(gt, TeacherQuality::Weak, cfg.teacher.params,
                           derive_seed(cfg.teacher.seed, scene_tag))
          .track;
    case LocationSource::ASC_SCREENED: {
      const auto weak = synth_teacher(gt, TeacherQuality::Weak, cfg.teacher.params,
                                      derive_seed(cfg.teacher.seed, scene_tag));
      return screen_false_positives(weak.track, gt);
    }
    case LocationSource::TALKNET:
      return synth_teacher(gt, TeacherQuality::Strong, cfg.teacher.params,
                           derive_seed(cfg.teacher.seed, scene_tag))
          .track;
  }
  throw ConfigError("location_track: unreachable");
}

}  // namespace detail

/// labels: GT tracks per scene (projected through each active camera), VA
/// tracks (ground truth segments and the energy VAD), the teacher track per
/// the supervision condition, and the fused per-chunk training targets.
inline void run_labels(const ExperimentConfig& cfg) {
  Manifest manifest(cfg.out_dir);
  manifest.require_stage(cfg.out_dir, "simulate", "labels");
  const fs::path dir = cfg.out_dir / "labels";
  fs::create_directories(dir);
  std::vector<std::string> artifacts;

  const auto chunks = chunk_plan(cfg);
  std::vector<TrainingTarget> targets;

  const auto scenes = scene_list(cfg);
  std::map<std::string, LabelTrack> fused_by_scene_view;  // "<scene>/<view>" -> per-frame
  std::map<std::string, TrainingTarget> full_targets;

  for (size_t si = 0; si < scenes.size(); ++si) {
    const std::string& id = scenes[si].first;
    const SceneSpec spec = detail::load_scene_spec(cfg, id);
    const LabelTrack gt = detail::gt_track_for_scene(cfg, spec);
    write_label_track(dir / (id + "_gt.csv"), gt);
    artifacts.push_back("labels/" + id + "_gt.csv");

    // Voice activity: ground truth segments and the energy VAD on the
    // reference channel of the rendered audio.
    VaTrack va_gt;
    va_gt.segments = spec.voice_segments;
    write_va_track(dir / (id + "_va_gt.csv"), va_gt);
    artifacts.push_back("labels/" + id + "_va_gt.csv");

    const WavData wav = read_wav(cfg.out_dir / "scenes" / (id + ".wav"));
    const VaTrack va_vad =
        energy_vad(wav.channels[size_t(cfg.geometry.reference_mic_index)],
                   double(wav.sample_rate), cfg.vad.frame_ms, cfg.vad.threshold_dbfs,
                   cfg.vad.hangover_frames);
    write_va_track(dir / (id + "_va_vad.csv"), va_vad);
    artifacts.push_back("labels/" + id + "_va_vad.csv");

    const LabelTrack teacher = detail::location_track(cfg, gt, uint64_t(si));
    if (cfg.supervision.location != LocationSource::GT) {
      write_label_track(dir / (id + "_teacher.csv"), teacher);
      artifacts.push_back("labels/" + id + "_teacher.csv");
    }

    const VaTrack& va_used = cfg.supervision.va == VaSource::GT ? va_gt : va_vad;
    const auto va_bits = rasterize_va(va_used, 30.0, gt.n_frames);
    for (int view : cfg.active_views) {
      const TrainingTarget fused =
          fuse(teacher.view(view), va_bits, FuseOptions{.mask_bypass = cfg.mask_bypass});
      TrainingTarget keyed = fused;
      keyed.view = view;
      full_targets[id + "/" + std::to_string(view)] = std::move(keyed);
    }
  }

  // Slice the per-scene fused tracks into per-chunk 60-frame targets, in
  // chunk-plan order, one per active view.
  for (const auto& c : chunks) {
    for (int view : cfg.active_views) {
      const TrainingTarget& full = full_targets.at(c.scene_id + "/" + std::to_string(view));
      TrainingTarget t;
      t.view = view;
      const int f0 = int(std::lround(c.start_s * 30.0));
      for (int i = 0; i < 60; ++i) t.frames.push_back(full.frames[size_t(f0 + i)]);
      targets.push_back(std::move(t));
    }
  }
  const fs::path tpath = cfg.out_dir / "features" / to_string(cfg.feature) / "targets.bin";
  fs::create_directories(tpath.parent_path());
  write_targets_file(tpath, targets);
  artifacts.push_back("features/" + to_string(cfg.feature) + "/targets.bin");

  manifest.record_stage("labels", cfg.config_hash(), artifacts);
  log_stage(cfg, "labels",
            "fused " + std::to_string(targets.size()) + " targets under " +
                cfg.supervision.name());
}

namespace detail {

struct LoadedDataset {
  std::vector<FeatureTensor> tensors;       // normalized
  std::vector<TrainingTarget> targets;      // aligned with samples
  std::vector<TrainSample> samples;         // train split only
  std::vector<ChunkRef> chunks;             // full plan
  NormStats stats;
};

inline LoadedDataset load_dataset(const ExperimentConfig& cfg, bool train_split_only) {
  LoadedDataset ds;
  const fs::path dir = cfg.out_dir / "features" / to_string(cfg.feature);
  std::ifstream f(dir / "index.json");
  if (!f) throw MissingArtifactError("feature index missing; run `asdl features` first");
  const json index = json::parse(f);
  ds.stats = read_norm_stats(dir / "norm.bin");
  const auto all_targets = read_targets_file(dir / "targets.bin");

  const json& chunk_list = index["chunks"];
  const size_t n_views = cfg.active_views.size();
  if (all_targets.size() != chunk_list.size() * n_views)
    throw MissingArtifactError("targets/index mismatch; re-run `asdl labels`");

  for (size_t i = 0; i < chunk_list.size(); ++i) {
    const json& c = chunk_list[size_t(i)];
    ChunkRef ref;
    ref.scene_id = c["sequence"].get<std::string>();
    ref.split = c["split"].get<std::string>();
    ref.start_s = c["start_s"].get<double>();
    ref.index = int(i);
    ds.chunks.push_back(ref);
    FeatureTensor t = read_feature_file(dir / c["file"].get<std::string>());
    apply_normalization(t, ds.stats);
    ds.tensors.push_back(std::move(t));
  }
  ds.targets = all_targets;
  for (size_t i = 0; i < ds.chunks.size(); ++i) {
    if (train_split_only && ds.chunks[i].split != "train") continue;
    for (size_t v = 0; v < n_views; ++v)
      ds.samples.push_back({&ds.tensors[i], cfg.active_views[v],
                            &ds.targets[i * n_views + v]});
  }
  return ds;
}

}  // namespace detail

/// train: fit the student network on the training chunks and write the
/// checkpoint plus the loss history.
inline void run_train(const ExperimentConfig& cfg) {
  Manifest manifest(cfg.out_dir);
  manifest.require_stage(cfg.out_dir, "features", "train");
  manifest.require_stage(cfg.out_dir, "labels", "train");
  const fs::path dir = cfg.out_dir / "model";
  fs::create_directories(dir);

  auto ds = detail::load_dataset(cfg, true);
  if (ds.samples.empty()) throw MissingArtifactError("train: no training samples");
  log_stage(cfg, "train",
            "training " + to_string(cfg.model.variant) + " on " +
                std::to_string(ds.samples.size()) + " samples");
  auto result = train_crnn(ds.samples, cfg.model, cfg.train, cfg.seed);

  save_checkpoint(dir / "checkpoint.bin", result.params, cfg.effective_json.dump(), nullptr,
                  cfg.train.epochs);
  write_history_csv(dir / "history.csv", result.epoch_loss);
  Manifest m2(cfg.out_dir);
  m2.record_stage("train", cfg.config_hash(), {"model/checkpoint.bin", "model/history.csv"});
  log_stage(cfg, "train",
            "final loss " + std::to_string(result.epoch_loss.back()));
}

/// eval: run inference over the held-out scenes with overlapped windows,
/// score against the ground-truth tracks at every configured tolerance, and
/// emit metrics JSON plus PR CSV/SVG.
inline void run_eval(const ExperimentConfig& cfg) {
  Manifest manifest(cfg.out_dir);
  manifest.require_stage(cfg.out_dir, "train", "eval");
  manifest.require_stage(cfg.out_dir, "labels", "eval");
  const fs::path dir = cfg.out_dir / "eval";
  fs::create_directories(dir);

  auto ds = detail::load_dataset(cfg, false);
  CrnnParams<float> params = init_crnn_params<float>(cfg.model, cfg.seed);
  load_checkpoint(cfg.out_dir / "model" / "checkpoint.bin", params);

  // Group test chunks per scene.
  std::map<std::string, std::vector<InferChunk>> by_scene;
  for (size_t i = 0; i < ds.chunks.size(); ++i)
    if (ds.chunks[i].split == "test")
      by_scene[ds.chunks[i].scene_id].push_back({&ds.tensors[i], ds.chunks[i].start_s});
  if (by_scene.empty()) throw MissingArtifactError("eval: no test chunks in the index");

  struct TrackPair {
    std::vector<FrameLabel> pred, gt;
    std::string id;
  };
  std::vector<TrackPair> pairs_data;
  for (const auto& [scene_id, chunks] : by_scene) {
    const SceneSpec spec = detail::load_scene_spec(cfg, scene_id);
    const int n_frames = int(std::lround(spec.duration_s * 30.0));
    const auto gt_res =
        ingest_teacher_track(cfg.out_dir / "labels" / (scene_id + "_gt.csv"));
    for (int view : cfg.active_views) {
      LabelTrack pred = infer_track(params, cfg.model, chunks, view,
                                    cfg.eval.confidence_threshold, n_frames);
      TrackPair pair;
      pair.pred = pred.view(view);
      pair.gt = gt_res.track.view(view);
      pair.gt.resize(size_t(n_frames));
      pair.id = scene_id;
      pairs_data.push_back(std::move(pair));
    }
  }
  std::vector<EvalPair> pairs;
  for (const auto& p : pairs_data) pairs.push_back({&p.pred, &p.gt, p.id});

  const CameraModel& cam = cfg.camera(cfg.active_views.front());
  std::vector<std::string> artifacts;
  EvalOptions opt;
  opt.n_thresholds = cfg.eval.n_thresholds;
  opt.image_width = cam.image_width;
  opt.ad_point = cfg.eval.ad_point;
  for (double deg : cfg.eval.tolerances_deg) {
    const ToleranceSpec tol = cfg.eval.px_per_deg == EvalConfig::PxPerDeg::Pinhole
                                  ? ToleranceSpec::pinhole(deg, cam)
                                  : ToleranceSpec::paper(deg);
    const MetricsReport report = evaluate(pairs, tol, opt);
    char tag[32];
    std::snprintf(tag, sizeof(tag), "%gdeg", deg);
    write_metrics_json(dir / ("metrics_" + std::string(tag) + ".json"), report);
    write_pr_csv(dir / ("pr_" + std::string(tag) + ".csv"), report);
    write_pr_svg(dir / ("pr_" + std::string(tag) + ".svg"), report,
                 cfg.name + " @" + tag);
    artifacts.push_back("eval/metrics_" + std::string(tag) + ".json");
    artifacts.push_back("eval/pr_" + std::string(tag) + ".csv");
    artifacts.push_back("eval/pr_" + std::string(tag) + ".svg");
    log_stage(cfg, "eval",
              std::string(tag) + ": AP=" + std::to_string(report.ap) +
                  " F1=" + std::to_string(report.f1_best) +
                  " DetErr=" + std::to_string(report.det_err));
  }
  Manifest m2(cfg.out_dir);
  m2.record_stage("eval", cfg.config_hash(), artifacts);
}

/// report: verify manifest closure (every recorded artifact exists) and
/// aggregate the per-tolerance metrics into a single summary.
inline void run_report(const ExperimentConfig& cfg) {
  Manifest manifest(cfg.out_dir);
  for (const std::string stage : {"simulate", "features", "labels", "train", "eval"})
    manifest.require_stage(cfg.out_dir, stage, "report");

  json summary;
  summary["name"] = cfg.name;
  summary["config_hash"] = cfg.config_hash();
  summary["supervision"] = cfg.supervision.name();
  summary["feature"] = to_string(cfg.feature);
  summary["model"] = to_string(cfg.model.variant);
  summary["snr_db"] = cfg.snr_db ? json(*cfg.snr_db) : json(nullptr);
  summary["metrics"] = json::object();
  for (const auto& a : manifest.artifacts("eval")) {
    if (a.find("metrics_") == std::string::npos) continue;
    std::ifstream f(cfg.out_dir / a);
    const json m = json::parse(f);
    const std::string deg = std::to_string(m["tolerance"]["degrees"].get<double>());
    summary["metrics"][deg] = {{"ap", m["ap"]},
                               {"f1_best", m["f1_best"]},
                               {"det_err", m["det_err"]},
                               {"ad_pixels", m["ad_pixels"]},
                               {"ad_degrees", m["ad_degrees"]}};
  }
  fs::create_directories(cfg.out_dir / "report");
  write_text_atomic(cfg.out_dir / "report" / "summary.json", summary.dump(2) + "\n");
  Manifest m2(cfg.out_dir);
  m2.record_stage("report", cfg.config_hash(), {"report/summary.json"});
  log_stage(cfg, "report", "summary written");
}

inline void run_stage(const std::string& stage, const ExperimentConfig& cfg) {
  if (stage == "simulate") run_simulate(cfg);
  else if (stage == "features") run_features(cfg);
  else if (stage == "labels") run_labels(cfg);
  else if (stage == "train") run_train(cfg);
  else if (stage == "eval") run_eval(cfg);
  else if (stage == "report") run_report(cfg);
  else
    throw ConfigError("unknown stage '" + stage +
                      "' (simulate|features|labels|train|eval|report)");
}

inline void run_all_stages(const ExperimentConfig& cfg) {
  for (const std::string s : {"simulate", "features", "labels", "train", "eval", "report"})
    run_stage(s, cfg);
}

// ---------------------------------------------------------------------------
// Ablation

/// Expand the requested axes into per-cell experiment configs: the
/// cross-product of feature kinds, model variants, supervision conditions,
/// and SNRs, deduplicated, each cell with its own seed and output directory.
inline std::vector<ExperimentConfig> ablation_matrix(const ExperimentConfig& base) {
  const AblationAxes& ax = base.ablate;
  if (ax.empty()) throw ConfigError("ablation_matrix: no axes configured under 'ablate'");
  auto or_default = [](const std::vector<std::string>& v, const std::string& d) {
    return v.empty() ? std::vector<std::string>{d} : v;
  };
  const auto features = or_default(ax.features, to_string(base.feature));
  const auto models = or_default(ax.models, to_string(base.model.variant));
  const auto supervisions = or_default(ax.supervisions, base.supervision.name());
  std::vector<json> snrs = ax.snrs;
  if (snrs.empty()) snrs.push_back(base.snr_db ? json(*base.snr_db) : json(nullptr));
  for (const auto& f : features) feature_kind_from_string(f);        // validate early
  for (const auto& m : models) model_variant_from_string(m);
  for (const auto& s : supervisions) SupervisionConfig::parse(s);

  std::vector<ExperimentConfig> plan;
  std::vector<std::string> seen;
  int cell = 0;
  for (const auto& f : features)
    for (const auto& m : models)
      for (const auto& s : supervisions)
        for (const auto& snr : snrs) {
          json j = base.effective_json;
          j["feature"] = f;
          if (!j.contains("model")) j["model"] = json::object();
          j["model"]["variant"] = m;
          j["supervision"] = s;
          j["snr_db"] = snr;
          j.erase("ablate");
          const std::string key = j.dump();
          if (std::find(seen.begin(), seen.end(), key) != seen.end()) continue;
          seen.push_back(key);
          const std::string snr_tag = snr.is_null() ? "clean" : "snr" + snr.dump();
          const std::string cell_name =
              f + "_" + m + "_" + s + "_" + snr_tag;
          j["name"] = base.name + "/" + cell_name;
          j["out_dir"] = (base.out_dir / "cells" / cell_name).string();
          j["seed"] = base.seed + uint64_t(cell);
          plan.push_back(ExperimentConfig::from_json(j));
          ++cell;
        }
  return plan;
}

inline void run_ablate(const ExperimentConfig& base) {
  const auto plan = ablation_matrix(base);
  log_stage(base, "ablate", "running " + std::to_string(plan.size()) + " cells");
  json index;
  index["cells"] = json::array();
  for (const auto& cell : plan) {
    run_all_stages(cell);
    index["cells"].push_back({{"name", cell.name},
                              {"out_dir", cell.out_dir.string()},
                              {"config_hash", cell.config_hash()}});
  }
  fs::create_directories(base.out_dir);
  write_text_atomic(base.out_dir / "ablation.json", index.dump(2) + "\n");
}

}  // namespace asdl
