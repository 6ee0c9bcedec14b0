// tests/test_geometry.cpp
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

#include <cmath>
#include <filesystem>

#include "asdl/geometry.hpp"
#include "asdl/scene.hpp"
#include "asdl/wav.hpp"
#include "oracles.hpp"

using namespace asdl;

TEST_CASE("default rig geometry invariants") {
  const ArrayGeometry g = ArrayGeometry::default_rig();
  REQUIRE(g.n_mics() == 16);
  CHECK(g.max_pairwise_distance() == Catch::Approx(0.450).margin(1e-6));
  CHECK(g.reference_mic_index == 0);
  for (const auto& p : g.mic_positions) CHECK(p.y == 0.0);  // one plane

  const auto [a, b] = g.farthest_pair();
  CHECK(distance(g.mic_positions[size_t(a)], g.mic_positions[size_t(b)]) ==
        Catch::Approx(0.450).margin(1e-9));
}

TEST_CASE("tdoa basics and analytic example") {
  const ArrayGeometry g = ArrayGeometry::default_rig();

  SECTION("broadside hits the coplanar rig simultaneously") {
    for (int m = 1; m < g.n_mics(); ++m) CHECK(tdoa(g, 0.0, 0, m) == Catch::Approx(0.0).margin(1e-15));
  }
  SECTION("identical mics") { CHECK(tdoa(g, 17.0, 4, 4) == 0.0); }
  SECTION("furthest pair at the FoV edge") {
    const auto [a, b] = g.farthest_pair();
    const double expected = 0.450 * std::sin(deg2rad(27.5)) / 343.0;
    CHECK(std::abs(tdoa(g, 27.5, a, b)) == Catch::Approx(expected).epsilon(1e-9));
    CHECK(expected == Catch::Approx(6.06e-4).margin(1e-6));
    // Cross-check against a brute-force geometric path-length difference.
    CHECK(tdoa(g, 27.5, a, b) ==
          Catch::Approx(oracles::brute_force_tdoa(g, 27.5, a, b)).margin(1e-9));
  }
  SECTION("antisymmetry and bound over a sweep") {
    const double bound = g.max_pairwise_distance() / g.speed_of_sound;
    for (double az = -80.0; az <= 80.0; az += 7.3) {
      for (int a = 0; a < g.n_mics(); a += 3) {
        for (int b = 0; b < g.n_mics(); b += 5) {
          CHECK(tdoa(g, az, a, b) == -tdoa(g, az, b, a));
          CHECK(std::abs(tdoa(g, az, a, b)) <= bound + 1e-12);
        }
      }
    }
  }
  SECTION("out-of-range azimuth") {
    CHECK_THROWS_AS(tdoa(g, 90.0, 0, 1), std::domain_error);
    CHECK_THROWS_AS(tdoa(g, -95.0, 0, 1), std::domain_error);
  }
}

TEST_CASE("camera projection") {
  CameraModel cam;  // fov 55, width 2448, offset 0

  CHECK(cam.project_to_pixels(0.0) == Catch::Approx(1224.0));
  CHECK(cam.project_to_pixels(27.5) == Catch::Approx(2448.0));
  CHECK(cam.project_to_pixels(-27.5) == Catch::Approx(0.0).margin(1e-9));
  // 2 degrees under the pinhole model: about 82 px from center.
  CHECK(cam.project_to_pixels(2.0) == Catch::Approx(1306.1).margin(0.5));

  SECTION("strict monotonicity") {
    double prev = -1.0;
    for (double az = -27.4; az <= 27.4; az += 0.1) {
      const double px = cam.project_to_pixels(az);
      CHECK(px > prev);
      prev = px;
    }
  }
  SECTION("project/unproject round trip over 1000 azimuths") {
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const double az = -27.4 + 54.8 * double(i) / 999.0;
      worst = std::max(worst, std::abs(cam.unproject_pixels(cam.project_to_pixels(az)) - az));
    }
    CHECK(worst < 1e-9);
  }
  SECTION("offset view") {
    CameraModel side = cam;
    side.horizontal_offset_deg = -4.0;
    CHECK(side.project_to_pixels(-4.0) == Catch::Approx(1224.0));
    CHECK_THROWS_AS(side.project_to_pixels(24.0), std::domain_error);
  }
  SECTION("out of FoV") { CHECK_THROWS_AS(cam.project_to_pixels(28.0), std::domain_error); }
}

static SceneSpec static_scene(double azimuth, double duration, uint64_t seed) {
  SceneSpec s;
  s.id = "static";
  s.duration_s = duration;
  s.trajectory = {{0.0, azimuth}, {duration, azimuth}};
  s.voice_segments = {{0.0, duration}};
  s.rng_seed = seed;
  return s;
}

TEST_CASE("render_scene") {
  const ArrayGeometry g = ArrayGeometry::default_rig();
  Rng rng(7);
  const auto source = speech_shaped_noise(size_t(2.2 * 48000), 48000.0, rng);

  SECTION("broadside render: all channels identical") {
    const auto clip = render_scene(static_scene(0.0, 1.0, 1), g, source);
    REQUIRE(clip.n_channels() == 16);
    double rms = 0.0;
    for (int c = 1; c < 16; ++c) {
      double acc = 0.0;
      for (size_t i = 0; i < clip.n_samples(); ++i) {
        const double d = double(clip.samples[size_t(c)][i]) - double(clip.samples[0][i]);
        acc += d * d;
      }
      rms = std::max(rms, std::sqrt(acc / double(clip.n_samples())));
    }
    CHECK(rms < 1e-6);
  }

  SECTION("empty voice segments yield an all-zero clip") {
    SceneSpec s = static_scene(5.0, 1.0, 1);
    s.voice_segments.clear();
    const auto clip = render_scene(s, g, source);
    for (const auto& ch : clip.samples)
      for (float v : ch) REQUIRE(v == 0.0f);
  }

  SECTION("cross-correlation lag of the farthest pair matches round(tdoa*fs)") {
    Rng wn(3);
    std::vector<float> white(size_t(1.2 * 48000));
    for (auto& v : white) v = float(0.3 * wn.gaussian());
    const auto clip = render_scene(static_scene(15.0, 1.0, 1), g, white);
    const auto [a, b] = g.farthest_pair();
    const int expected = int(std::lround(tdoa(g, 15.0, a, b) * g.sample_rate));
    const int measured =
        oracles::xcorr_argmax(clip.samples[size_t(a)], clip.samples[size_t(b)], 80);
    CHECK(measured == expected);
  }

  SECTION("VA gating is exact outside segments") {
    SceneSpec s = static_scene(10.0, 1.0, 1);
    s.voice_segments = {{0.25, 0.5}, {0.7, 0.9}};
    const auto clip = render_scene(s, g, source);
    const double fs = clip.sample_rate;
    for (size_t i = 0; i < clip.n_samples(); ++i) {
      const double t = double(i) / fs;
      const bool inside = (t >= 0.25 && t < 0.5) || (t >= 0.7 && t < 0.9);
      if (!inside)
        for (int c = 0; c < clip.n_channels(); ++c)
          REQUIRE(clip.samples[size_t(c)][i] == 0.0f);
    }
  }

  SECTION("determinism: identical spec renders bit-identical clips") {
    const auto c1 = render_scene(static_scene(-12.0, 0.5, 9), g, source);
    const auto c2 = render_scene(static_scene(-12.0, 0.5, 9), g, source);
    REQUIRE(c1.samples == c2.samples);
  }

  SECTION("short source is rejected") {
    std::vector<float> tiny(100, 0.1f);
    CHECK_THROWS_AS(render_scene(static_scene(0.0, 1.0, 1), g, tiny), std::length_error);
  }
}

TEST_CASE("pink noise") {
  const ArrayGeometry g = ArrayGeometry::default_rig();

  SECTION("infinite SNR bypass is bit-exact") {
    Rng rng(1);
    const auto source = speech_shaped_noise(48000, 48000.0, rng);
    const auto clip = render_scene(static_scene(3.0, 1.0, 4), g, source);
    const auto out = add_pink_noise(clip, std::numeric_limits<double>::infinity(), 11);
    REQUIRE(out.samples == clip.samples);
  }

  SECTION("0 dB SNR holds within 0.1 dB over active regions") {
    Rng rng(2);
    const auto source = speech_shaped_noise(size_t(1.2 * 48000), 48000.0, rng);
    SceneSpec s = static_scene(6.0, 1.0, 5);
    s.voice_segments = {{0.1, 0.55}, {0.8, 0.95}};
    const auto clean = render_scene(s, g, source);
    const auto noisy = add_pink_noise(clean, 0.0, 21);

    double ps = 0.0, pn = 0.0;
    size_t count = 0;
    for (size_t i = 0; i < clean.n_samples(); ++i) {
      bool act = false;
      for (int c = 0; c < clean.n_channels(); ++c)
        if (clean.samples[size_t(c)][i] != 0.0f) act = true;
      if (!act) continue;
      ++count;
      for (int c = 0; c < clean.n_channels(); ++c) {
        const double sv = clean.samples[size_t(c)][i];
        const double nv = double(noisy.samples[size_t(c)][i]) - sv;
        ps += sv * sv;
        pn += nv * nv;
      }
    }
    REQUIRE(count > 0);
    const double ratio_db = 10.0 * std::log10(ps / pn);
    CHECK(ratio_db == Catch::Approx(0.0).margin(0.1));
  }

  SECTION("spectral slope is about -3 dB/octave between 100 Hz and 6 kHz") {
    Rng rng(31);
    const auto noise = pink_noise(size_t(60) * 48000, 48000.0, rng);
    const double slope = oracles::spectral_slope_db_per_octave(noise, 48000.0, 100.0, 6000.0);
    CHECK(slope == Catch::Approx(-3.0).margin(0.5));
  }

  SECTION("all-silent clip is rejected") {
    MultichannelClip clip;
    clip.sample_rate = 48000.0;
    clip.samples.assign(2, std::vector<float>(1000, 0.0f));
    CHECK_THROWS_AS(add_pink_noise(clip, 10.0, 1), std::invalid_argument);
  }

  SECTION("seeded determinism") {
    Rng rng(2);
    const auto source = speech_shaped_noise(size_t(1.2 * 48000), 48000.0, rng);
    const auto clean = render_scene(static_scene(2.0, 1.0, 5), g, source);
    const auto n1 = add_pink_noise(clean, 10.0, 42);
    const auto n2 = add_pink_noise(clean, 10.0, 42);
    REQUIRE(n1.samples == n2.samples);
  }
}

TEST_CASE("wav 24-bit round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "asdl_wav_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "clip.wav";

  Rng rng(5);
  std::vector<std::vector<float>> ch(3, std::vector<float>(4800));
  for (auto& c : ch)
    for (auto& v : c) v = float(0.8 * rng.uniform(-1.0, 1.0));

  write_wav24(path, ch, 48000);
  const WavData back = read_wav(path);
  REQUIRE(back.sample_rate == 48000);
  REQUIRE(back.bits_per_sample == 24);
  REQUIRE(back.channels.size() == 3);
  REQUIRE(back.n_samples() == 4800);
  double worst = 0.0;
  for (size_t c = 0; c < 3; ++c)
    for (size_t i = 0; i < 4800; ++i)
      worst = std::max(worst, std::abs(double(back.channels[c][i]) - double(ch[c][i])));
  CHECK(worst <= 1.0 / 8388608.0);  // one LSB at 24 bits

  std::filesystem::remove_all(dir);
}

TEST_CASE("scene spec JSON round trip and validation") {
  SceneSpec s = static_scene(8.0, 2.0, 77);
  s.snr_db = 20.0;
  const SceneSpec back = SceneSpec::from_json(s.to_json());
  CHECK(back.duration_s == s.duration_s);
  CHECK(back.snr_db.has_value());
  CHECK(*back.snr_db == 20.0);
  CHECK(back.rng_seed == 77);

  SECTION("overlapping segments rejected") {
    SceneSpec bad = s;
    bad.voice_segments = {{0.0, 1.0}, {0.5, 1.5}};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }
  SECTION("azimuth outside FoV rejected") {
    SceneSpec bad = static_scene(40.0, 1.0, 1);
    CameraModel cam;
    CHECK_THROWS_AS(bad.validate(&cam), ConfigError);
  }
}
