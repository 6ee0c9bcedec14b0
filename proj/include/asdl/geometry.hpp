// include/asdl/geometry.hpp
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

#include <cmath>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "asdl/common.hpp"

namespace asdl {

using json = nlohmann::json;

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;
};

inline double distance(const Vec3& a, const Vec3& b) {
  const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

/// Microphone rig: positions in meters, mics on the x-z plane, the camera
/// axis (broadside) along +y. Azimuth is measured around the vertical axis,
/// positive toward +x, so a plane wave from azimuth `az` has direction
/// u = (sin az, cos az, 0).
struct ArrayGeometry {
  std::vector<Vec3> mic_positions;
  int reference_mic_index = 0;
  double speed_of_sound = 343.0;
  double sample_rate = 48000.0;

  int n_mics() const { return int(mic_positions.size()); }

  double max_pairwise_distance() const {
    double best = 0.0;
    for (size_t a = 0; a < mic_positions.size(); ++a)
      for (size_t b = a + 1; b < mic_positions.size(); ++b)
        best = std::max(best, distance(mic_positions[a], mic_positions[b]));
    return best;
  }

  std::pair<int, int> farthest_pair() const {
    double best = -1.0;
    std::pair<int, int> p{0, 0};
    for (size_t a = 0; a < mic_positions.size(); ++a)
      for (size_t b = a + 1; b < mic_positions.size(); ++b)
        if (distance(mic_positions[a], mic_positions[b]) > best) {
          best = distance(mic_positions[a], mic_positions[b]);
          p = {int(a), int(b)};
        }
    return p;
  }

  void validate() const {
    if (mic_positions.empty()) throw ConfigError("geometry: no microphones");
    if (reference_mic_index < 0 || reference_mic_index >= n_mics())
      throw ConfigError("geometry: reference mic index out of range");
    if (speed_of_sound <= 0 || sample_rate <= 0)
      throw ConfigError("geometry: non-positive speed of sound or sample rate");
  }

  /// Default 16-element rig: two horizontal linear subarrays on the baffle
  /// plane (y = 0). The lower row spans the full 450 mm aperture and holds
  /// the reference mic at its left end plus an ORTF-spaced pair at
  /// +/-88.3 mm; the upper row is slightly narrower so that the maximum
  /// pairwise distance stays exactly 0.450 m. Coordinates are a documented
  /// configuration, not measured truth.
  static ArrayGeometry default_rig() {
    ArrayGeometry g;
    const double zl = -0.030, zu = 0.030;
    const double lower_x[8] = {-0.2250, -0.1550, -0.0883, -0.0300,
                               0.0300,  0.0883,  0.1550,  0.2250};
    const double upper_x[8] = {-0.2200, -0.1571, -0.0943, -0.0314,
                               0.0314,  0.0943,  0.1571,  0.2200};
    for (double x : lower_x) g.mic_positions.push_back({x, 0.0, zl});
    for (double x : upper_x) g.mic_positions.push_back({x, 0.0, zu});
    g.reference_mic_index = 0;  // first mic of the lower subarray
    return g;
  }

  json to_json() const {
    json j;
    j["speed_of_sound"] = speed_of_sound;
    j["sample_rate"] = sample_rate;
    j["reference_mic_index"] = reference_mic_index;
    j["mic_positions"] = json::array();
    for (const auto& p : mic_positions) j["mic_positions"].push_back({p.x, p.y, p.z});
    return j;
  }

  static ArrayGeometry from_json(const json& j) {
    ArrayGeometry g;
    g.speed_of_sound = j.value("speed_of_sound", 343.0);
    g.sample_rate = j.value("sample_rate", 48000.0);
    g.reference_mic_index = j.value("reference_mic_index", 0);
    for (const auto& p : j.at("mic_positions"))
      g.mic_positions.push_back({p.at(0).get<double>(), p.at(1).get<double>(),
                                 p.at(2).get<double>()});
    g.validate();
    return g;
  }
};

/// Far-field plane-wave arrival-time difference (seconds) between mic_a and
/// mic_b for a source at the given azimuth: positive when mic_a hears the
/// wavefront later than mic_b. Antisymmetric under index swap.
inline double tdoa(const ArrayGeometry& g, double azimuth_deg, int mic_a, int mic_b) {
  if (!(azimuth_deg > -90.0 && azimuth_deg < 90.0))
    throw std::domain_error("tdoa: azimuth must lie in (-90, 90) degrees");
  if (mic_a < 0 || mic_a >= g.n_mics() || mic_b < 0 || mic_b >= g.n_mics())
    throw std::out_of_range("tdoa: mic index out of range");
  const double az = deg2rad(azimuth_deg);
  const double ux = std::sin(az), uy = std::cos(az);
  const Vec3& pa = g.mic_positions[size_t(mic_a)];
  const Vec3& pb = g.mic_positions[size_t(mic_b)];
  return ((ux * pb.x + uy * pb.y) - (ux * pa.x + uy * pa.y)) / g.speed_of_sound;
}

/// Pinhole camera looking along +y with a per-view yaw offset.
/// x = W/2 (1 + tan(az - offset) / tan(fov/2)).
struct CameraModel {
  double horizontal_fov_deg = 55.0;
  int image_width = 2448;
  double horizontal_offset_deg = 0.0;
  int view_index = 0;

  double half_fov_rad() const { return deg2rad(horizontal_fov_deg / 2.0); }

  bool contains(double azimuth_deg) const {
    return std::abs(azimuth_deg - horizontal_offset_deg) <= horizontal_fov_deg / 2.0;
  }

  double project_to_pixels(double azimuth_deg) const {
    if (!contains(azimuth_deg))
      throw std::domain_error("project_to_pixels: azimuth outside view FoV");
    const double rel = deg2rad(azimuth_deg - horizontal_offset_deg);
    return double(image_width) / 2.0 * (1.0 + std::tan(rel) / std::tan(half_fov_rad()));
  }

  double unproject_pixels(double px) const {
    const double t = (2.0 * px / double(image_width) - 1.0) * std::tan(half_fov_rad());
    return rad2deg(std::atan(t)) + horizontal_offset_deg;
  }

  /// Pixels per degree of the pinhole mapping at the principal point; the
  /// small-angle conversion used when scoring synthetic scenes.
  double px_per_degree_at_center() const {
    return double(image_width) / 2.0 * (kPi / 180.0) / std::tan(half_fov_rad());
  }

  json to_json() const {
    return json{{"horizontal_fov_deg", horizontal_fov_deg},
                {"image_width", image_width},
                {"horizontal_offset_deg", horizontal_offset_deg},
                {"view_index", view_index}};
  }

  static CameraModel from_json(const json& j) {
    CameraModel c;
    c.horizontal_fov_deg = j.value("horizontal_fov_deg", 55.0);
    c.image_width = j.value("image_width", 2448);
    c.horizontal_offset_deg = j.value("horizontal_offset_deg", 0.0);
    c.view_index = j.value("view_index", 0);
    return c;
  }
};

/// The 11 camera views of the default rig: forward-facing with small yaw
/// offsets, view 5 on the array axis.
inline std::vector<CameraModel> default_camera_views() {
  std::vector<CameraModel> views;
  for (int v = 0; v < 11; ++v) {
    CameraModel c;
    c.view_index = v;
    c.horizontal_offset_deg = 2.0 * (v - 5);
    views.push_back(c);
  }
  return views;
}

}  // namespace asdl
