// include/asdl/model.hpp
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
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "asdl/features.hpp"
#include "asdl/labels.hpp"
#include "asdl/nn.hpp"

namespace asdl {

struct TrainHyper {
  int epochs = 50;
  int batch = 32;
  double lr = 1e-4;
  int lr_fixed_epochs = 30;  // then the rate decays by lr_decay each epoch
  double lr_decay = 0.9;
};

struct TrainSample {
  const FeatureTensor* features = nullptr;
  int view = 0;
  const TrainingTarget* target = nullptr;
};

struct TrainResult {
  CrnnParams<float> params;
  std::vector<double> epoch_loss;
};

namespace detail {

/// Pack a batch of feature tensors into the network input layout.
inline MatR<float> pack_inputs(std::span<const TrainSample> samples,
                               std::span<const size_t> idx, const CrnnConfig& cfg) {
  const int B = int(idx.size());
  MatR<float> input(cfg.in_channels, long(B) * cfg.t_in * cfg.f_in);
  for (int b = 0; b < B; ++b) {
    const FeatureTensor& ft = *samples[idx[size_t(b)]].features;
    if (ft.channels != cfg.in_channels || ft.frames != cfg.t_in || ft.bins != cfg.f_in)
      throw std::invalid_argument("pack_inputs: tensor shape does not match model config");
    for (int c = 0; c < cfg.in_channels; ++c) {
      float* dst = input.data() + size_t(c) * size_t(input.cols()) +
                   size_t(b) * size_t(cfg.t_in) * size_t(cfg.f_in);
      const float* src = ft.data.data() + size_t(c) * size_t(cfg.t_in) * size_t(cfg.f_in);
      std::copy(src, src + size_t(cfg.t_in) * size_t(cfg.f_in), dst);
    }
  }
  return input;
}

}  // namespace detail

/// Deterministic training loop: seeded shuffling, fixed batch order, Adam
/// with the fixed-then-decaying learning rate schedule. Aborts with a
/// diagnostic when the loss diverges.
inline TrainResult train_crnn(std::span<const TrainSample> samples, const CrnnConfig& cfg,
                              const TrainHyper& hyper, uint64_t seed,
                              const std::function<void(int, double)>& on_epoch = {}) {
  if (samples.empty()) throw std::invalid_argument("train_crnn: empty dataset");
  cfg.validate();

  TrainResult result;
  result.params = init_crnn_params<float>(cfg, seed);
  CrnnParams<float> grads = zero_like(result.params);
  Adam<float> adam(result.params);
  Rng shuffle_rng(derive_seed(seed, 0x7368756646ULL));

  std::vector<size_t> order(samples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  double lr = hyper.lr;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    if (epoch >= hyper.lr_fixed_epochs && epoch > 0) lr *= hyper.lr_decay;
    shuffle_rng.shuffle(order);
    KahanSum epoch_loss;
    int batches = 0;
    for (size_t start = 0; start < order.size(); start += size_t(hyper.batch)) {
      const size_t end = std::min(order.size(), start + size_t(hyper.batch));
      std::vector<size_t> idx(order.begin() + long(start), order.begin() + long(end));
      const MatR<float> input = detail::pack_inputs(samples, idx, cfg);
      std::vector<int> views;
      std::vector<TrainingTarget> targets;
      for (size_t i : idx) {
        views.push_back(samples[i].view);
        targets.push_back(*samples[i].target);
      }
      for (auto& r : grads.registry())
        std::fill(r.data, r.data + r.size, 0.0f);
      const float loss = crnn_loss_and_grad(result.params, cfg, input, views, targets, grads,
                                            BnMode{.use_batch_stats = true, .update_running = true});
      if (!std::isfinite(loss))
        throw DivergenceError("train_crnn: non-finite loss at epoch " +
                              std::to_string(epoch) + " (lr=" + std::to_string(lr) + ")");
      if (lr > 0.0) adam.step(result.params, grads, lr);
      epoch_loss.add(double(loss));
      ++batches;
    }
    if (!result.params.all_finite())
      throw DivergenceError("train_crnn: non-finite parameters after epoch " +
                            std::to_string(epoch));
    result.epoch_loss.push_back(epoch_loss.value() / double(batches));
    if (on_epoch) on_epoch(epoch, result.epoch_loss.back());
  }
  return result;
}

/// Inference-mode forward for a batch of chunks (batch-norm running stats).
inline MatR<float> crnn_infer(CrnnParams<float>& params, const CrnnConfig& cfg,
                              const MatR<float>& input, std::span<const int> views) {
  return crnn_forward(params, cfg, input, views, BnMode{});
}

/// One inference chunk: 2 s of features starting at start_s within its scene.
struct InferChunk {
  const FeatureTensor* features = nullptr;
  double start_s = 0.0;
};

/// Run the model over overlapping chunks of a long clip and stitch a label
/// track: per-video-frame (x, C) averaged over every window that covers the
/// frame, then thresholded.
inline LabelTrack infer_track(CrnnParams<float>& params, const CrnnConfig& cfg,
                              std::span<const InferChunk> chunks, int view,
                              double confidence_threshold, int n_frames, double fps = 30.0,
                              int image_width = 2448) {
  LabelTrack track;
  track.fps = fps;
  track.image_width = image_width;
  track.n_frames = n_frames;
  auto& frames = track.view(view);

  std::vector<double> sum_x(size_t(n_frames), 0.0), sum_c(size_t(n_frames), 0.0);
  std::vector<int> count(size_t(n_frames), 0);

  const int T_out = cfg.t_out();
  for (const auto& chunk : chunks) {
    MatR<float> input(cfg.in_channels, long(cfg.t_in) * cfg.f_in);
    const FeatureTensor& ft = *chunk.features;
    if (ft.channels != cfg.in_channels || ft.frames != cfg.t_in || ft.bins != cfg.f_in)
      throw std::invalid_argument("infer_track: tensor shape mismatch");
    std::copy(ft.data.begin(), ft.data.end(), input.data());
    const std::vector<int> views{view};
    const MatR<float> pred = crnn_infer(params, cfg, input, views);
    const int frame0 = int(std::lround(chunk.start_s * fps));
    for (int i = 0; i < T_out; ++i) {
      const int frame = frame0 + i;
      if (frame < 0 || frame >= n_frames) continue;
      sum_x[size_t(frame)] += double(pred(0, i));
      sum_c[size_t(frame)] += double(pred(1, i));
      ++count[size_t(frame)];
    }
  }
  for (int i = 0; i < n_frames; ++i) {
    if (count[size_t(i)] == 0) continue;
    const double x = sum_x[size_t(i)] / count[size_t(i)];
    const double c = sum_c[size_t(i)] / count[size_t(i)];
    frames[size_t(i)].active = c >= confidence_threshold;
    frames[size_t(i)].has_x = frames[size_t(i)].active;
    frames[size_t(i)].x_norm = float(x);
    frames[size_t(i)].confidence = float(c);
  }
  return track;
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned binary with the config, named tensors, optimizer
// moments, and the epoch count.

inline void save_checkpoint(const std::filesystem::path& path, CrnnParams<float>& params,
                            const std::string& config_json, Adam<float>* adam = nullptr,
                            int epoch = 0) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + tmp.string());
    f.write("ASDLCKP1", 8);
    const uint64_t hash = fnv1a64(config_json);
    f.write(reinterpret_cast<const char*>(&hash), 8);
    const uint32_t cfg_len = uint32_t(config_json.size());
    f.write(reinterpret_cast<const char*>(&cfg_len), 4);
    f.write(config_json.data(), cfg_len);
    const uint32_t ep = uint32_t(epoch);
    f.write(reinterpret_cast<const char*>(&ep), 4);

    auto reg = params.registry();
    const uint32_t n = uint32_t(reg.size());
    f.write(reinterpret_cast<const char*>(&n), 4);
    for (const auto& r : reg) {
      const uint32_t name_len = uint32_t(r.name.size());
      f.write(reinterpret_cast<const char*>(&name_len), 4);
      f.write(r.name.data(), name_len);
      const uint64_t size = uint64_t(r.size);
      f.write(reinterpret_cast<const char*>(&size), 8);
      f.write(reinterpret_cast<const char*>(r.data), std::streamsize(r.size * 4));
    }

    const uint32_t has_opt = adam ? 1 : 0;
    f.write(reinterpret_cast<const char*>(&has_opt), 4);
    if (adam) {
      const uint32_t steps = uint32_t(adam->step_count());
      f.write(reinterpret_cast<const char*>(&steps), 4);
      for (auto* mom : {&adam->moments_m(), &adam->moments_v()}) {
        for (const auto& vec : *mom)
          f.write(reinterpret_cast<const char*>(vec.data()),
                  std::streamsize(vec.size() * 8));
      }
    }
  }
  std::filesystem::rename(tmp, path);
}

struct CheckpointInfo {
  std::string config_json;
  uint64_t config_hash = 0;
  int epoch = 0;
};

/// Load a checkpoint into an already-shaped parameter struct (from the same
/// config). Returns the embedded config/hash/epoch.
inline CheckpointInfo load_checkpoint(const std::filesystem::path& path,
                                      CrnnParams<float>& params, Adam<float>* adam = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifactError("load_checkpoint: cannot open " + path.string());
  char magic[8];
  f.read(magic, 8);
  if (std::string(magic, 8) != "ASDLCKP1")
    throw std::runtime_error("load_checkpoint: bad magic in " + path.string());
  CheckpointInfo info;
  f.read(reinterpret_cast<char*>(&info.config_hash), 8);
  uint32_t cfg_len = 0;
  f.read(reinterpret_cast<char*>(&cfg_len), 4);
  info.config_json.resize(cfg_len);
  f.read(info.config_json.data(), cfg_len);
  uint32_t ep = 0;
  f.read(reinterpret_cast<char*>(&ep), 4);
  info.epoch = int(ep);

  auto reg = params.registry();
  uint32_t n = 0;
  f.read(reinterpret_cast<char*>(&n), 4);
  if (n != reg.size())
    throw std::runtime_error("load_checkpoint: tensor count mismatch (wrong config?)");
  for (auto& r : reg) {
    uint32_t name_len = 0;
    f.read(reinterpret_cast<char*>(&name_len), 4);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    uint64_t size = 0;
    f.read(reinterpret_cast<char*>(&size), 8);
    if (name != r.name || long(size) != r.size)
      throw std::runtime_error("load_checkpoint: tensor '" + name + "' does not match '" +
                               r.name + "'");
    f.read(reinterpret_cast<char*>(r.data), std::streamsize(r.size * 4));
  }
  uint32_t has_opt = 0;
  f.read(reinterpret_cast<char*>(&has_opt), 4);
  if (has_opt && adam) {
    uint32_t steps = 0;
    f.read(reinterpret_cast<char*>(&steps), 4);
    adam->set_step_count(int(steps));
    for (auto* mom : {&adam->moments_m(), &adam->moments_v()}) {
      for (auto& vec : *mom)
        f.read(reinterpret_cast<char*>(vec.data()), std::streamsize(vec.size() * 8));
    }
  }
  if (!f) throw std::runtime_error("load_checkpoint: truncated " + path.string());
  return info;
}

inline void write_history_csv(const std::filesystem::path& path,
                              std::span<const double> epoch_loss) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    f << "epoch,train_loss\n";
    for (size_t i = 0; i < epoch_loss.size(); ++i) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%zu,%.9g\n", i, epoch_loss[i]);
      f << buf;
    }
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace asdl
