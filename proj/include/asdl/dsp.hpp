// include/asdl/dsp.hpp
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

#include <complex>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "asdl/common.hpp"

namespace asdl {

using cplx = std::complex<double>;

inline bool is_pow2(size_t n) { return n != 0 && (n & (n - 1)) == 0; }

/// Iterative radix-2 FFT, in place. `inverse` applies conjugation and 1/N.
/// Hand-rolled so every stage of the toolkit is bit-reproducible without an
/// external planner.
inline void fft_inplace(std::vector<cplx>& a, bool inverse = false) {
  const size_t n = a.size();
  if (!is_pow2(n)) throw std::invalid_argument("fft: size must be a power of two");
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * kPi / double(len) * (inverse ? 1.0 : -1.0);
    const cplx wlen(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      cplx w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        const cplx u = a[i + k];
        const cplx v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse) {
    const double inv = 1.0 / double(n);
    for (auto& x : a) x *= inv;
  }
}

/// Periodic Hann window of length n: w[k] = 0.5 (1 - cos(2 pi k / n)).
inline std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<size_t>(n));
  for (int k = 0; k < n; ++k) w[size_t(k)] = 0.5 * (1.0 - std::cos(2.0 * kPi * k / n));
  return w;
}

struct StftConfig {
  int window_size = 512;
  int hop = 100;
  double sample_rate = 48000.0;

  int one_sided_bins() const { return window_size / 2 + 1; }
  double bin_hz(int k) const { return double(k) * sample_rate / double(window_size); }
};

/// Short-time Fourier transform with reflect padding of window_size/2 on both
/// ends, so frame t is centered on sample t*hop and an input of n samples
/// yields exactly n/hop frames (96000 samples -> 960 frames).
/// Returns a (frames x one_sided_bins) complex matrix.
inline Eigen::MatrixXcd stft(std::span<const float> x, const StftConfig& cfg) {
  const int ws = cfg.window_size;
  const int hop = cfg.hop;
  const long n = long(x.size());
  if (n < ws || n % hop != 0)
    throw std::length_error("stft: input length must be >= window and a multiple of hop");
  const int pad = ws / 2;
  const long frames = n / hop;
  const int bins = cfg.one_sided_bins();

  // Reflect pad (no edge duplication): padded[pad + i] = x[i], padded[pad - k] = x[k].
  std::vector<double> padded(size_t(n + 2 * pad));
  for (long i = 0; i < n; ++i) padded[size_t(pad + i)] = x[size_t(i)];
  for (int k = 1; k <= pad; ++k) padded[size_t(pad - k)] = x[size_t(k)];
  for (int k = 1; k <= pad; ++k) padded[size_t(n - 1 + pad + k)] = x[size_t(n - 1 - k)];

  const std::vector<double> w = hann_window(ws);
  Eigen::MatrixXcd out(frames, bins);
  std::vector<cplx> buf(static_cast<size_t>(ws));
  for (long t = 0; t < frames; ++t) {
    const size_t start = size_t(t * hop);
    for (int k = 0; k < ws; ++k)
      buf[size_t(k)] = cplx(padded[start + size_t(k)] * w[size_t(k)], 0.0);
    fft_inplace(buf, false);
    for (int k = 0; k < bins; ++k) out(t, k) = buf[size_t(k)];
  }
  return out;
}

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

namespace detail {

/// Integral of the ramp (f - x0)/(x1 - x0) over [a, b] clipped to [x0, x1].
inline double ramp_integral(double x0, double x1, double a, double b, bool rising) {
  const double lo = std::max(a, std::min(x0, x1));
  const double hi = std::min(b, std::max(x0, x1));
  if (hi <= lo) return 0.0;
  auto value = [&](double f) { return rising ? (f - x0) / (x1 - x0) : (x1 - f) / (x1 - x0); };
  return 0.5 * (value(lo) + value(hi)) * (hi - lo);
}

}  // namespace detail

/// Triangular mel filterbank (HTK mel scale, unit peak), rows are bands,
/// columns one-sided FFT bins. Each weight is the triangle averaged over the
/// bin's frequency interval rather than sampled at its center, so that every
/// band keeps support even where triangles are narrower than a bin.
inline Eigen::MatrixXd mel_filterbank(int n_mels, int window_size, double sample_rate,
                                      double f_lo = 0.0, double f_hi = -1.0) {
  if (f_hi <= 0.0) f_hi = sample_rate / 2.0;
  const int bins = window_size / 2 + 1;
  const double bin_w = sample_rate / double(window_size);
  const double m_lo = hz_to_mel(f_lo);
  const double m_hi = hz_to_mel(f_hi);
  std::vector<double> edges(size_t(n_mels) + 2);
  for (int i = 0; i < n_mels + 2; ++i)
    edges[size_t(i)] = mel_to_hz(m_lo + (m_hi - m_lo) * double(i) / double(n_mels + 1));

  Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(n_mels, bins);
  for (int m = 0; m < n_mels; ++m) {
    const double left = edges[size_t(m)];
    const double center = edges[size_t(m) + 1];
    const double right = edges[size_t(m) + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = double(k) * bin_w;
      const double a = std::max(f - bin_w / 2.0, 0.0);
      const double b = f + bin_w / 2.0;
      if (b <= left || a >= right) continue;
      const double area = detail::ramp_integral(left, center, a, b, true) +
                          detail::ramp_integral(center, right, a, b, false);
      fb(m, k) = area / bin_w;
    }
  }
  return fb;
}

/// log(max(power . fb^T, floor)) with natural log; input is a one-sided
/// magnitude-squared spectrogram (frames x bins).
inline Eigen::MatrixXd log_mel(const Eigen::MatrixXd& power, const Eigen::MatrixXd& fb,
                               double log_floor = 1e-10) {
  if (power.cols() != fb.cols())
    throw std::invalid_argument("log_mel: spectrogram/filterbank bin mismatch");
  Eigen::MatrixXd mel = power * fb.transpose();
  return mel.cwiseMax(log_floor).array().log().matrix();
}

inline Eigen::MatrixXd power_spectrogram(const Eigen::MatrixXcd& spec) {
  return spec.cwiseAbs2();
}

}  // namespace asdl
