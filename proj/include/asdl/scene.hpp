// include/asdl/scene.hpp
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

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "asdl/common.hpp"
#include "asdl/geometry.hpp"

namespace asdl {

struct TrajectoryKnot {
  double t_s = 0.0;
  double azimuth_deg = 0.0;
};

struct VoiceSegment {
  double onset_s = 0.0;
  double offset_s = 0.0;
};

enum class Propagation { PlaneWave, Spherical };

struct SceneSpec {
  std::string id;
  double duration_s = 2.0;
  std::vector<TrajectoryKnot> trajectory;   // piecewise-linear azimuth(t)
  std::vector<VoiceSegment> voice_segments; // disjoint, sorted, within [0, duration]
  std::optional<double> snr_db;             // absent = clean
  uint64_t rng_seed = 0;
  Propagation propagation = Propagation::PlaneWave;
  double source_range_m = 3.5;              // used by the spherical model only

  double azimuth_at(double t) const {
    if (trajectory.empty()) return 0.0;
    if (t <= trajectory.front().t_s) return trajectory.front().azimuth_deg;
    if (t >= trajectory.back().t_s) return trajectory.back().azimuth_deg;
    for (size_t i = 1; i < trajectory.size(); ++i) {
      if (t <= trajectory[i].t_s) {
        const auto& a = trajectory[i - 1];
        const auto& b = trajectory[i];
        const double w = (t - a.t_s) / (b.t_s - a.t_s);
        return a.azimuth_deg + w * (b.azimuth_deg - a.azimuth_deg);
      }
    }
    return trajectory.back().azimuth_deg;
  }

  bool is_active(double t) const {
    for (const auto& s : voice_segments)
      if (t >= s.onset_s && t < s.offset_s) return true;
    return false;
  }

  void validate(const CameraModel* camera = nullptr) const {
    if (duration_s <= 0) throw ConfigError("scene " + id + ": non-positive duration");
    double prev_end = 0.0;
    for (const auto& s : voice_segments) {
      if (s.onset_s < prev_end || s.offset_s <= s.onset_s || s.offset_s > duration_s + 1e-9)
        throw ConfigError("scene " + id + ": voice segments must be disjoint, sorted, within [0, duration]");
      prev_end = s.offset_s;
    }
    if (camera) {
      for (double t = 0.0; t <= duration_s; t += 0.01)
        if (!camera->contains(azimuth_at(t)))
          throw ConfigError("scene " + id + ": azimuth leaves the camera FoV");
    }
  }

  json to_json() const {
    json j;
    j["id"] = id;
    j["duration_s"] = duration_s;
    j["trajectory"] = json::array();
    for (const auto& k : trajectory) j["trajectory"].push_back({k.t_s, k.azimuth_deg});
    j["voice_segments"] = json::array();
    for (const auto& s : voice_segments) j["voice_segments"].push_back({s.onset_s, s.offset_s});
    if (snr_db) j["snr_db"] = *snr_db;
    j["rng_seed"] = rng_seed;
    j["propagation"] = propagation == Propagation::PlaneWave ? "plane" : "spherical";
    j["source_range_m"] = source_range_m;
    return j;
  }

  static SceneSpec from_json(const json& j) {
    SceneSpec s;
    s.id = j.value("id", "");
    s.duration_s = j.at("duration_s").get<double>();
    for (const auto& k : j.value("trajectory", json::array()))
      s.trajectory.push_back({k.at(0).get<double>(), k.at(1).get<double>()});
    for (const auto& v : j.value("voice_segments", json::array()))
      s.voice_segments.push_back({v.at(0).get<double>(), v.at(1).get<double>()});
    if (j.contains("snr_db") && !j["snr_db"].is_null()) s.snr_db = j["snr_db"].get<double>();
    s.rng_seed = j.value("rng_seed", uint64_t(0));
    s.propagation = j.value("propagation", std::string("plane")) == "spherical"
                        ? Propagation::Spherical
                        : Propagation::PlaneWave;
    s.source_range_m = j.value("source_range_m", 3.5);
    return s;
  }
};

struct MultichannelClip {
  std::vector<std::vector<float>> samples;  // [channel][time]
  double sample_rate = 48000.0;

  int n_channels() const { return int(samples.size()); }
  size_t n_samples() const { return samples.empty() ? 0 : samples[0].size(); }
};

/// Speech-shaped noise source: white Gaussian noise through a one-pole
/// lowpass at 500 Hz (-6 dB/octave above the knee), peak-normalized to 0.5.
inline std::vector<float> speech_shaped_noise(size_t n, double sample_rate, Rng& rng) {
  std::vector<float> out(n);
  const double a = std::exp(-2.0 * kPi * 500.0 / sample_rate);
  double state = 0.0;
  double peak = 1e-12;
  for (size_t i = 0; i < n; ++i) {
    state = a * state + (1.0 - a) * rng.gaussian();
    out[i] = float(state);
    peak = std::max(peak, std::abs(state));
  }
  const float g = float(0.5 / peak);
  for (auto& v : out) v *= g;
  return out;
}

namespace detail {

/// Polyphase table of a 31-tap Hann-windowed sinc interpolator; phase p/P is
/// the fractional part of the delay. Lookups interpolate linearly between
/// adjacent phases.
class FractionalDelayTable {
 public:
  static constexpr int kTaps = 31;
  static constexpr int kHalf = 15;
  static constexpr int kPhases = 512;

  FractionalDelayTable() : table_(size_t(kPhases + 1) * kTaps) {
    for (int p = 0; p <= kPhases; ++p) {
      const double mu = double(p) / double(kPhases);
      for (int k = 0; k < kTaps; ++k) {
        const double t = double(k) - double(kHalf) - mu;
        const double sinc = t == 0.0 ? 1.0 : std::sin(kPi * t) / (kPi * t);
        const double w = 0.5 * (1.0 - std::cos(2.0 * kPi * double(k) / double(kTaps - 1)));
        table_[size_t(p) * kTaps + size_t(k)] = sinc * w;
      }
    }
  }

  /// Evaluates x at the fractional position n - delay: with pos = i0 + mu,
  /// y = sum_k h_mu(k) x[i0 + k - kHalf] and h_mu(k) = w(k) sinc(k - kHalf - mu).
  double interpolate(std::span<const float> x, long n, double delay) const {
    const double pos = double(n) - delay;  // fractional source index
    const long i0 = long(std::floor(pos));
    const double mu = pos - double(i0);
    const double fp = mu * kPhases;
    const int p = int(fp);
    const double frac = fp - double(p);
    const double* h0 = &table_[size_t(p) * kTaps];
    const double* h1 = &table_[size_t(std::min(p + 1, kPhases)) * kTaps];
    const long nx = long(x.size());
    double acc = 0.0;
    for (int k = 0; k < kTaps; ++k) {
      const long idx = i0 + k - kHalf;
      if (idx < 0 || idx >= nx) continue;
      const double h = h0[k] + frac * (h1[k] - h0[k]);
      acc += h * double(x[size_t(idx)]);
    }
    return acc;
  }

 private:
  std::vector<double> table_;
};

inline const FractionalDelayTable& fractional_delay_table() {
  static const FractionalDelayTable t;
  return t;
}

}  // namespace detail

/// Render a scene to a multichannel clip. Each channel is the source delayed
/// by its per-mic arrival time (plane-wave by default, optional spherical
/// model with 1/r gain), then gated so samples outside voice segments are
/// exactly zero. Deterministic: no randomness is consumed here.
inline MultichannelClip render_scene(const SceneSpec& spec, const ArrayGeometry& geom,
                                     std::span<const float> source) {
  geom.validate();
  const double fs = geom.sample_rate;
  const size_t n = size_t(std::llround(spec.duration_s * fs));
  if (source.size() < n)
    throw std::length_error("render_scene: source signal shorter than duration");

  const auto& table = detail::fractional_delay_table();
  const int n_mics = geom.n_mics();
  MultichannelClip clip;
  clip.sample_rate = fs;
  clip.samples.assign(size_t(n_mics), std::vector<float>(n, 0.0f));

  // Constant bulk delay keeps all per-mic delays positive.
  const double bulk_m = geom.max_pairwise_distance();

  // Sample i is voice-active iff onset <= i/fs < offset for some segment.
  std::vector<uint8_t> active(n, 0);
  for (const auto& seg : spec.voice_segments) {
    const long lo = std::max<long>(0, long(std::ceil(seg.onset_s * fs - 1e-9)));
    const long hi = std::min<long>(long(n), long(std::ceil(seg.offset_s * fs - 1e-9)));
    for (long i = lo; i < hi; ++i) active[size_t(i)] = 1;
  }

  std::vector<double> delays(static_cast<size_t>(n_mics));
  std::vector<double> gains(static_cast<size_t>(n_mics), 1.0);
  for (size_t i = 0; i < n; ++i) {
    if (!active[i]) continue;
    const double t = double(i) / fs;
    const double az = deg2rad(spec.azimuth_at(t));
    const double ux = std::sin(az), uy = std::cos(az);
    if (spec.propagation == Propagation::PlaneWave) {
      for (int m = 0; m < n_mics; ++m) {
        const Vec3& p = geom.mic_positions[size_t(m)];
        delays[size_t(m)] = (bulk_m - (ux * p.x + uy * p.y)) / geom.speed_of_sound * fs;
      }
    } else {
      const double sx = spec.source_range_m * ux, sy = spec.source_range_m * uy;
      for (int m = 0; m < n_mics; ++m) {
        const Vec3& p = geom.mic_positions[size_t(m)];
        const double dx = sx - p.x, dy = sy - p.y, dz = -p.z;
        const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
        delays[size_t(m)] = r / geom.speed_of_sound * fs;
        gains[size_t(m)] = spec.source_range_m / r;
      }
    }
    for (int m = 0; m < n_mics; ++m)
      clip.samples[size_t(m)][i] =
          float(gains[size_t(m)] * table.interpolate(source, long(i), delays[size_t(m)]));
  }
  return clip;
}

namespace detail {

/// First-order pole-zero cascade approximating a -3 dB/octave power slope.
/// Poles are half-decade spaced with zeros at the geometric midpoints.
class PinkFilter {
 public:
  explicit PinkFilter(double sample_rate) {
    const double f0 = 10.0;
    for (int k = 0; k < 7; ++k) {
      const double fp = f0 * std::pow(10.0, 0.5 * k);
      const double fz = fp * std::pow(10.0, 0.25);
      Stage s;
      s.a = std::exp(-2.0 * kPi * fp / sample_rate);
      s.b = std::exp(-2.0 * kPi * fz / sample_rate);
      stages_.push_back(s);
    }
  }

  double process(double x) {
    for (auto& s : stages_) {
      const double y = x - s.b * s.x1 + s.a * s.y1;
      s.x1 = x;
      s.y1 = y;
      x = y;
    }
    return x;
  }

 private:
  struct Stage {
    double a = 0.0, b = 0.0, x1 = 0.0, y1 = 0.0;
  };
  std::vector<Stage> stages_;
};

}  // namespace detail

/// 1/f-spectrum noise from seeded white Gaussian noise through the pinking
/// cascade; the filter is warmed up before samples are collected. RMS is
/// normalized to 1.
inline std::vector<float> pink_noise(size_t n, double sample_rate, Rng& rng) {
  detail::PinkFilter filter(sample_rate);
  for (int i = 0; i < 8192; ++i) filter.process(rng.gaussian());
  std::vector<double> raw(n);
  KahanSum power;
  for (size_t i = 0; i < n; ++i) {
    raw[i] = filter.process(rng.gaussian());
    power.add(raw[i] * raw[i]);
  }
  const double rms = std::sqrt(std::max(power.value() / double(std::max<size_t>(n, 1)), 1e-30));
  std::vector<float> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = float(raw[i] / rms);
  return out;
}

/// Add per-channel-independent pink noise scaled so that the ratio of
/// voice-active signal power to noise power (measured over the same active
/// samples, summed across channels) equals snr_db. Voice activity is taken
/// from the exact zero gating of the clean clip. +inf snr returns the input
/// unchanged.
inline MultichannelClip add_pink_noise(const MultichannelClip& clip, double snr_db,
                                       uint64_t rng_seed) {
  if (std::isinf(snr_db) && snr_db > 0) return clip;
  const size_t n = clip.n_samples();
  const int nch = clip.n_channels();

  std::vector<uint8_t> active(n, 0);
  size_t n_active = 0;
  for (size_t i = 0; i < n; ++i) {
    for (int c = 0; c < nch; ++c)
      if (clip.samples[size_t(c)][i] != 0.0f) {
        active[i] = 1;
        ++n_active;
        break;
      }
  }
  if (n_active == 0)
    throw std::invalid_argument("add_pink_noise: all-silent clip, SNR undefined");

  std::vector<std::vector<float>> noise(static_cast<size_t>(nch));
  KahanSum sig_power, noise_power;
  for (int c = 0; c < nch; ++c) {
    Rng rng(derive_seed(rng_seed, uint64_t(c)));
    noise[size_t(c)] = pink_noise(n, clip.sample_rate, rng);
    for (size_t i = 0; i < n; ++i) {
      if (!active[i]) continue;
      sig_power.add(double(clip.samples[size_t(c)][i]) * double(clip.samples[size_t(c)][i]));
      noise_power.add(double(noise[size_t(c)][i]) * double(noise[size_t(c)][i]));
    }
  }
  const double target_ratio = std::pow(10.0, snr_db / 10.0);
  const double gain = std::sqrt(sig_power.value() / (noise_power.value() * target_ratio));

  MultichannelClip out = clip;
  for (int c = 0; c < nch; ++c)
    for (size_t i = 0; i < n; ++i)
      out.samples[size_t(c)][i] += float(gain * double(noise[size_t(c)][i]));
  return out;
}

}  // namespace asdl
