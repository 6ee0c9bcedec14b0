// include/asdl/features.hpp
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

#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "asdl/dsp.hpp"
#include "asdl/geometry.hpp"
#include "asdl/scene.hpp"

namespace asdl {

enum class FeatureKind { GccPhat, SalsaLite, LogMel16, LogMel2, LogMel1 };

inline std::string to_string(FeatureKind k) {
  switch (k) {
    case FeatureKind::GccPhat: return "gcc-phat";
    case FeatureKind::SalsaLite: return "salsa-lite";
    case FeatureKind::LogMel16: return "logmel16";
    case FeatureKind::LogMel2: return "logmel2";
    case FeatureKind::LogMel1: return "logmel1";
  }
  return "?";
}

inline FeatureKind feature_kind_from_string(const std::string& s) {
  if (s == "gcc-phat") return FeatureKind::GccPhat;
  if (s == "salsa-lite") return FeatureKind::SalsaLite;
  if (s == "logmel16" || s == "16mics") return FeatureKind::LogMel16;
  if (s == "logmel2" || s == "stereo") return FeatureKind::LogMel2;
  if (s == "logmel1" || s == "mono") return FeatureKind::LogMel1;
  throw ConfigError("unknown feature kind '" + s +
                    "' (expected gcc-phat|salsa-lite|logmel16|logmel2|logmel1)");
}

inline int feature_channels(FeatureKind k, int n_mics) {
  switch (k) {
    case FeatureKind::GccPhat:
    case FeatureKind::SalsaLite:
    case FeatureKind::LogMel16: return n_mics;
    case FeatureKind::LogMel2: return 2;
    case FeatureKind::LogMel1: return 1;
  }
  return 0;
}

/// Ch x T x F feature block with provenance. Data is row-major [c][t][f].
struct FeatureTensor {
  FeatureKind kind = FeatureKind::GccPhat;
  int channels = 0;
  int frames = 0;
  int bins = 0;
  std::string clip_id;
  std::vector<float> data;

  void resize(int c, int t, int f) {
    channels = c;
    frames = t;
    bins = f;
    data.assign(size_t(c) * size_t(t) * size_t(f), 0.0f);
  }
  float& at(int c, int t, int f) {
    return data[(size_t(c) * size_t(frames) + size_t(t)) * size_t(bins) + size_t(f)];
  }
  float at(int c, int t, int f) const {
    return data[(size_t(c) * size_t(frames) + size_t(t)) * size_t(bins) + size_t(f)];
  }
  bool all_finite() const {
    for (float v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

struct FeatureConfig {
  StftConfig stft;
  int n_mels = 64;
  int n_lags = 64;                // GCC lag axis; lag 0 sits at index n_lags/2
  double salsa_cutoff_hz = 6000;  // keeps the first 64 linear bins at 48 kHz/512
  double phat_epsilon = 1e-8;
  double log_floor = 1e-10;
  int mono_mic_index = 3;         // nearest-center mic of the default rig
  double stereo_offset_m = 0.0883;  // ORTF half-spacing, matched against geometry
  double stereo_tolerance_m = 2e-3;
  int chunk_samples = 96000;      // 2 s at 48 kHz
};

/// Maximum delay (samples) between any two mics for sources within the camera
/// FoV: round(d_max sin(fov/2) / c * fs). Errors out when the lag axis cannot
/// hold -max..+max around its center.
inline int max_lag(const ArrayGeometry& g, const CameraModel& cam, int lag_axis = 64) {
  const double d_rel = g.max_pairwise_distance() * std::sin(cam.half_fov_rad());
  const int lag = int(std::lround(d_rel / g.speed_of_sound * g.sample_rate));
  if (2 * lag + 1 > lag_axis || lag > lag_axis / 2 - 1)
    throw ConfigError("max_lag: " + std::to_string(lag) + " samples exceeds the " +
                      std::to_string(lag_axis) + "-lag axis (need 2*lag+1 <= " +
                      std::to_string(lag_axis) + " and lag <= " +
                      std::to_string(lag_axis / 2 - 1) + ")");
  return lag;
}

/// Indices of the ORTF stereo pair, located from the geometry: the two mics
/// nearest +/-stereo_offset_m on the x axis. Throws when the rig has no such
/// pair within tolerance.
inline std::pair<int, int> stereo_pair_indices(const ArrayGeometry& g, const FeatureConfig& cfg) {
  int left = -1, right = -1;
  double dl = cfg.stereo_tolerance_m, dr = cfg.stereo_tolerance_m;
  for (int m = 0; m < g.n_mics(); ++m) {
    const double x = g.mic_positions[size_t(m)].x;
    if (std::abs(x + cfg.stereo_offset_m) < dl) {
      dl = std::abs(x + cfg.stereo_offset_m);
      left = m;
    }
    if (std::abs(x - cfg.stereo_offset_m) < dr) {
      dr = std::abs(x - cfg.stereo_offset_m);
      right = m;
    }
  }
  if (left < 0 || right < 0)
    throw ConfigError("stereo_pair_indices: no mics near +/-" +
                      std::to_string(cfg.stereo_offset_m) + " m in this rig");
  return {left, right};
}

namespace detail {

inline void check_chunk(const MultichannelClip& clip, const FeatureConfig& cfg, int want_ch) {
  if (clip.n_channels() < want_ch)
    throw std::length_error("features: clip has fewer channels than required");
  if (long(clip.n_samples()) != cfg.chunk_samples)
    throw std::length_error("features: expected a chunk of exactly " +
                            std::to_string(cfg.chunk_samples) + " samples");
}

inline std::vector<Eigen::MatrixXcd> stft_all(const MultichannelClip& clip,
                                              const FeatureConfig& cfg) {
  std::vector<Eigen::MatrixXcd> specs;
  specs.reserve(size_t(clip.n_channels()));
  for (int c = 0; c < clip.n_channels(); ++c)
    specs.push_back(stft(clip.samples[size_t(c)], cfg.stft));
  return specs;
}

}  // namespace detail

/// GCC-PHAT input features: channel 0 is the reference mic's log-mel
/// spectrogram; channels 1..n-1 hold, per frame, the PHAT-whitened
/// cross-correlation between the reference mic and mic m over the central
/// n_lags lags. Lag 0 maps to bin n_lags/2, and positive lags mean the
/// reference mic hears the wavefront later than mic m.
inline FeatureTensor gcc_phat_features(const MultichannelClip& clip, const ArrayGeometry& g,
                                       const FeatureConfig& cfg) {
  detail::check_chunk(clip, cfg, g.n_mics());
  const auto specs = detail::stft_all(clip, cfg);
  const int T = int(specs[0].rows());
  const int bins = int(specs[0].cols());
  const int nfft = cfg.stft.window_size;
  const int ref = g.reference_mic_index;
  const int half = cfg.n_lags / 2;

  FeatureTensor out;
  out.kind = FeatureKind::GccPhat;
  out.resize(g.n_mics(), T, cfg.n_lags);

  const Eigen::MatrixXd fb =
      mel_filterbank(cfg.n_mels, nfft, cfg.stft.sample_rate);
  const Eigen::MatrixXd ref_logmel =
      log_mel(power_spectrogram(specs[size_t(ref)]), fb, cfg.log_floor);
  for (int t = 0; t < T; ++t)
    for (int f = 0; f < cfg.n_mels; ++f) out.at(0, t, f) = float(ref_logmel(t, f));

  std::vector<cplx> full(static_cast<size_t>(nfft));
  int ch = 1;
  for (int m = 0; m < g.n_mics(); ++m) {
    if (m == ref) continue;
    for (int t = 0; t < T; ++t) {
      // Whitened cross-spectrum R = X_ref conj(X_m) / max(|R|, eps), mirrored
      // to a full hermitian spectrum, then inverse transformed.
      for (int k = 0; k < bins; ++k) {
        const cplx r = specs[size_t(ref)](t, k) * std::conj(specs[size_t(m)](t, k));
        const double mag = std::abs(r);
        full[size_t(k)] = r / std::max(mag, cfg.phat_epsilon);
      }
      for (int k = 1; k < nfft - bins + 1; ++k)
        full[size_t(nfft - k)] = std::conj(full[size_t(k)]);
      fft_inplace(full, true);
      for (int lag = -half; lag < half; ++lag) {
        const int src = (lag + nfft) % nfft;
        out.at(ch, t, lag + half) = float(full[size_t(src)].real());
      }
    }
    ++ch;
  }
  return out;
}

/// SALSA-Lite input features: channel 0 is the reference mic's log-linear
/// spectrogram over the first n_lags STFT bins (up to the 6 kHz cutoff);
/// channels 1..n-1 hold the frequency-normalized inter-channel phase
/// difference -c/(2 pi f) arg(X_ref* X_m), which approximates the
/// path-length difference in meters independently of frequency.
inline FeatureTensor salsa_lite_features(const MultichannelClip& clip, const ArrayGeometry& g,
                                         const FeatureConfig& cfg) {
  detail::check_chunk(clip, cfg, g.n_mics());
  const auto specs = detail::stft_all(clip, cfg);
  const int T = int(specs[0].rows());
  const int ref = g.reference_mic_index;
  const int F = cfg.n_lags;
  if (cfg.stft.bin_hz(F) > cfg.salsa_cutoff_hz + 1e-6)
    throw ConfigError("salsa_lite_features: bin span exceeds the cutoff frequency");

  FeatureTensor out;
  out.kind = FeatureKind::SalsaLite;
  out.resize(g.n_mics(), T, F);

  for (int t = 0; t < T; ++t)
    for (int f = 0; f < F; ++f)
      out.at(0, t, f) =
          float(std::log(std::max(std::norm(specs[size_t(ref)](t, f)), cfg.log_floor)));

  int ch = 1;
  for (int m = 0; m < g.n_mics(); ++m) {
    if (m == ref) continue;
    for (int t = 0; t < T; ++t) {
      out.at(ch, t, 0) = 0.0f;  // no phase scale at DC
      for (int f = 1; f < F; ++f) {
        const cplx r = std::conj(specs[size_t(ref)](t, f)) * specs[size_t(m)](t, f);
        const double phase = (r.real() == 0.0 && r.imag() == 0.0)
                                 ? 0.0
                                 : std::atan2(r.imag(), r.real());
        const double freq = cfg.stft.bin_hz(f);
        out.at(ch, t, f) = float(-g.speed_of_sound / (2.0 * kPi * freq) * phase);
      }
    }
    ++ch;
  }
  return out;
}

/// Log-mel stacks: all 16 mics, the ORTF stereo pair, or the central mic.
inline FeatureTensor logmel_features(const MultichannelClip& clip, const ArrayGeometry& g,
                                     const FeatureConfig& cfg, FeatureKind kind) {
  std::vector<int> mics;
  switch (kind) {
    case FeatureKind::LogMel16:
      for (int m = 0; m < g.n_mics(); ++m) mics.push_back(m);
      break;
    case FeatureKind::LogMel2: {
      const auto [l, r] = stereo_pair_indices(g, cfg);
      mics = {l, r};
      break;
    }
    case FeatureKind::LogMel1:
      if (cfg.mono_mic_index < 0 || cfg.mono_mic_index >= g.n_mics())
        throw ConfigError("logmel_features: mono mic index out of range");
      mics = {cfg.mono_mic_index};
      break;
    default:
      throw ConfigError("logmel_features: not a log-mel kind");
  }
  detail::check_chunk(clip, cfg, g.n_mics());

  const Eigen::MatrixXd fb =
      mel_filterbank(cfg.n_mels, cfg.stft.window_size, cfg.stft.sample_rate);
  FeatureTensor out;
  out.kind = kind;
  int T = cfg.chunk_samples / cfg.stft.hop;
  out.resize(int(mics.size()), T, cfg.n_mels);
  for (size_t i = 0; i < mics.size(); ++i) {
    const Eigen::MatrixXcd spec = stft(clip.samples[size_t(mics[i])], cfg.stft);
    const Eigen::MatrixXd lm = log_mel(power_spectrogram(spec), fb, cfg.log_floor);
    for (int t = 0; t < T; ++t)
      for (int f = 0; f < cfg.n_mels; ++f) out.at(int(i), t, f) = float(lm(t, f));
  }
  return out;
}

inline FeatureTensor extract_features(const MultichannelClip& clip, const ArrayGeometry& g,
                                      const FeatureConfig& cfg, FeatureKind kind) {
  switch (kind) {
    case FeatureKind::GccPhat: return gcc_phat_features(clip, g, cfg);
    case FeatureKind::SalsaLite: return salsa_lite_features(clip, g, cfg);
    default: return logmel_features(clip, g, cfg, kind);
  }
}

/// Per-(channel, bin) mean and standard deviation over all training frames.
struct NormStats {
  FeatureKind kind = FeatureKind::GccPhat;
  int channels = 0;
  int bins = 0;
  std::vector<float> mean;  // [c][f]
  std::vector<float> stdev; // [c][f], floored at 1e-8

  float mean_at(int c, int f) const { return mean[size_t(c) * size_t(bins) + size_t(f)]; }
  float std_at(int c, int f) const { return stdev[size_t(c) * size_t(bins) + size_t(f)]; }
};

/// Two-pass fit with compensated summation so the result does not depend on
/// the order tensors are visited in.
inline NormStats fit_normalization(std::span<const FeatureTensor> tensors) {
  if (tensors.empty()) throw std::invalid_argument("fit_normalization: empty training set");
  const FeatureTensor& first = tensors[0];
  for (const auto& t : tensors)
    if (t.kind != first.kind || t.channels != first.channels || t.bins != first.bins)
      throw std::invalid_argument("fit_normalization: mixed tensor kinds/shapes");

  NormStats stats;
  stats.kind = first.kind;
  stats.channels = first.channels;
  stats.bins = first.bins;
  const size_t cells = size_t(first.channels) * size_t(first.bins);
  stats.mean.assign(cells, 0.0f);
  stats.stdev.assign(cells, 0.0f);

  size_t total_frames = 0;
  for (const auto& t : tensors) total_frames += size_t(t.frames);

  for (int c = 0; c < first.channels; ++c) {
    for (int f = 0; f < first.bins; ++f) {
      KahanSum acc;
      for (const auto& t : tensors)
        for (int fr = 0; fr < t.frames; ++fr) acc.add(double(t.at(c, fr, f)));
      const double mu = acc.value() / double(total_frames);
      KahanSum var;
      for (const auto& t : tensors)
        for (int fr = 0; fr < t.frames; ++fr) {
          const double d = double(t.at(c, fr, f)) - mu;
          var.add(d * d);
        }
      const double sd = std::sqrt(var.value() / double(total_frames));
      stats.mean[size_t(c) * size_t(first.bins) + size_t(f)] = float(mu);
      stats.stdev[size_t(c) * size_t(first.bins) + size_t(f)] = float(std::max(sd, 1e-8));
    }
  }
  return stats;
}

inline void apply_normalization(FeatureTensor& t, const NormStats& stats) {
  if (t.channels != stats.channels || t.bins != stats.bins || t.kind != stats.kind)
    throw std::invalid_argument("apply_normalization: stats/tensor mismatch");
  for (int c = 0; c < t.channels; ++c)
    for (int fr = 0; fr < t.frames; ++fr)
      for (int f = 0; f < t.bins; ++f)
        t.at(c, fr, f) = (t.at(c, fr, f) - stats.mean_at(c, f)) / stats.std_at(c, f);
}

// ---------------------------------------------------------------------------
// Flat binary feature files: little-endian header {magic, version, kind, Ch,
// T, F, dtype} followed by row-major f32 data. One file per 2 s chunk.

namespace detail {

constexpr char kFeatureMagic[8] = {'A', 'S', 'D', 'L', 'F', 'E', 'A', 'T'};

inline void put_u32le(std::ofstream& f, uint32_t v) {
  char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff),
               char((v >> 24) & 0xff)};
  f.write(b, 4);
}
inline uint32_t get_u32le(std::ifstream& f) {
  char b[4];
  f.read(b, 4);
  return uint32_t(uint8_t(b[0])) | uint32_t(uint8_t(b[1])) << 8 |
         uint32_t(uint8_t(b[2])) << 16 | uint32_t(uint8_t(b[3])) << 24;
}

}  // namespace detail

inline void write_feature_file(const std::filesystem::path& path, const FeatureTensor& t) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("write_feature_file: cannot open " + tmp.string());
    f.write(detail::kFeatureMagic, 8);
    detail::put_u32le(f, 1);  // version
    detail::put_u32le(f, uint32_t(t.kind));
    detail::put_u32le(f, uint32_t(t.channels));
    detail::put_u32le(f, uint32_t(t.frames));
    detail::put_u32le(f, uint32_t(t.bins));
    detail::put_u32le(f, 0);  // dtype f32
    f.write(reinterpret_cast<const char*>(t.data.data()),
            std::streamsize(t.data.size() * sizeof(float)));
  }
  std::filesystem::rename(tmp, path);
}

inline FeatureTensor read_feature_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifactError("read_feature_file: cannot open " + path.string());
  char magic[8];
  f.read(magic, 8);
  if (std::memcmp(magic, detail::kFeatureMagic, 8) != 0)
    throw std::runtime_error("read_feature_file: bad magic in " + path.string());
  const uint32_t version = detail::get_u32le(f);
  if (version != 1) throw std::runtime_error("read_feature_file: unsupported version");
  FeatureTensor t;
  t.kind = FeatureKind(detail::get_u32le(f));
  const uint32_t c = detail::get_u32le(f);
  const uint32_t tt = detail::get_u32le(f);
  const uint32_t ff = detail::get_u32le(f);
  const uint32_t dtype = detail::get_u32le(f);
  if (dtype != 0) throw std::runtime_error("read_feature_file: unsupported dtype");
  t.resize(int(c), int(tt), int(ff));
  f.read(reinterpret_cast<char*>(t.data.data()),
         std::streamsize(t.data.size() * sizeof(float)));
  if (!f) throw std::runtime_error("read_feature_file: truncated " + path.string());
  t.clip_id = path.stem().string();
  return t;
}

inline void write_norm_stats(const std::filesystem::path& path, const NormStats& s) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("write_norm_stats: cannot open " + tmp.string());
    f.write("ASDLNORM", 8);
    detail::put_u32le(f, uint32_t(s.kind));
    detail::put_u32le(f, uint32_t(s.channels));
    detail::put_u32le(f, uint32_t(s.bins));
    f.write(reinterpret_cast<const char*>(s.mean.data()),
            std::streamsize(s.mean.size() * sizeof(float)));
    f.write(reinterpret_cast<const char*>(s.stdev.data()),
            std::streamsize(s.stdev.size() * sizeof(float)));
  }
  std::filesystem::rename(tmp, path);
}

inline NormStats read_norm_stats(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifactError("read_norm_stats: cannot open " + path.string());
  char magic[8];
  f.read(magic, 8);
  if (std::memcmp(magic, "ASDLNORM", 8) != 0)
    throw std::runtime_error("read_norm_stats: bad magic");
  NormStats s;
  s.kind = FeatureKind(detail::get_u32le(f));
  s.channels = int(detail::get_u32le(f));
  s.bins = int(detail::get_u32le(f));
  const size_t cells = size_t(s.channels) * size_t(s.bins);
  s.mean.resize(cells);
  s.stdev.resize(cells);
  f.read(reinterpret_cast<char*>(s.mean.data()), std::streamsize(cells * sizeof(float)));
  f.read(reinterpret_cast<char*>(s.stdev.data()), std::streamsize(cells * sizeof(float)));
  if (!f) throw std::runtime_error("read_norm_stats: truncated file");
  return s;
}

}  // namespace asdl
