// include/asdl/wav.hpp
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
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "asdl/common.hpp"

namespace asdl {

struct WavData {
  int sample_rate = 0;
  int bits_per_sample = 0;
  std::vector<std::vector<float>> channels;  // deinterleaved, [-1, 1)

  size_t n_samples() const { return channels.empty() ? 0 : channels[0].size(); }
};

namespace detail {

inline void put_u32(std::string& s, uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& s, uint16_t v) {
  s.push_back(char(v & 0xff));
  s.push_back(char((v >> 8) & 0xff));
}
inline uint32_t get_u32(const char* p) {
  return uint32_t(uint8_t(p[0])) | uint32_t(uint8_t(p[1])) << 8 |
         uint32_t(uint8_t(p[2])) << 16 | uint32_t(uint8_t(p[3])) << 24;
}
inline uint16_t get_u16(const char* p) {
  return uint16_t(uint16_t(uint8_t(p[0])) | uint16_t(uint8_t(p[1])) << 8);
}

inline int32_t float_to_i24(float x) {
  double v = double(x) * 8388608.0;
  v = std::min(8388607.0, std::max(-8388608.0, v));
  return int32_t(std::lrint(v));
}

}  // namespace detail

/// Write a multichannel RIFF/WAVE file, 24-bit integer PCM, little-endian.
inline void write_wav24(const std::filesystem::path& path,
                        const std::vector<std::vector<float>>& channels,
                        int sample_rate) {
  if (channels.empty()) throw std::invalid_argument("write_wav24: no channels");
  const size_t n = channels[0].size();
  for (const auto& c : channels)
    if (c.size() != n) throw std::invalid_argument("write_wav24: ragged channels");

  const uint16_t nch = uint16_t(channels.size());
  const uint32_t byte_rate = uint32_t(sample_rate) * nch * 3;
  const uint16_t block_align = uint16_t(nch * 3);
  const uint32_t data_bytes = uint32_t(n * nch * 3);

  std::string out;
  out.reserve(44 + data_bytes);
  out += "RIFF";
  detail::put_u32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, 1);  // PCM
  detail::put_u16(out, nch);
  detail::put_u32(out, uint32_t(sample_rate));
  detail::put_u32(out, byte_rate);
  detail::put_u16(out, block_align);
  detail::put_u16(out, 24);
  out += "data";
  detail::put_u32(out, data_bytes);
  for (size_t i = 0; i < n; ++i) {
    for (size_t c = 0; c < channels.size(); ++c) {
      const int32_t v = detail::float_to_i24(channels[c][i]);
      out.push_back(char(v & 0xff));
      out.push_back(char((v >> 8) & 0xff));
      out.push_back(char((v >> 16) & 0xff));
    }
  }

  // Atomic write: temp file in the same directory, then rename.
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("write_wav24: cannot open " + tmp.string());
    f.write(out.data(), std::streamsize(out.size()));
  }
  std::filesystem::rename(tmp, path);
}

/// Read a RIFF/WAVE file. Supports PCM 16/24/32-bit and IEEE float 32.
inline WavData read_wav(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_wav: cannot open " + path.string());
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 12 || buf.compare(0, 4, "RIFF") != 0 || buf.compare(8, 4, "WAVE") != 0)
    throw std::runtime_error("read_wav: not a RIFF/WAVE file: " + path.string());

  WavData wav;
  uint16_t format = 0, nch = 0, bits = 0;
  size_t pos = 12;
  size_t data_off = 0, data_len = 0;
  while (pos + 8 <= buf.size()) {
    const std::string id = buf.substr(pos, 4);
    const uint32_t len = detail::get_u32(buf.data() + pos + 4);
    const size_t body = pos + 8;
    if (id == "fmt ") {
      if (len < 16) throw std::runtime_error("read_wav: short fmt chunk");
      format = detail::get_u16(buf.data() + body);
      nch = detail::get_u16(buf.data() + body + 2);
      wav.sample_rate = int(detail::get_u32(buf.data() + body + 4));
      bits = detail::get_u16(buf.data() + body + 14);
    } else if (id == "data") {
      data_off = body;
      data_len = len;
    }
    pos = body + len + (len & 1);
  }
  if (nch == 0 || data_off == 0) throw std::runtime_error("read_wav: missing fmt/data chunk");
  if (!(format == 1 || format == 3))
    throw std::runtime_error("read_wav: unsupported format tag " + std::to_string(format));
  wav.bits_per_sample = bits;

  const size_t bytes_per = size_t(bits) / 8;
  const size_t frames = data_len / (bytes_per * nch);
  wav.channels.assign(nch, std::vector<float>(frames));
  const char* p = buf.data() + data_off;
  for (size_t i = 0; i < frames; ++i) {
    for (size_t c = 0; c < nch; ++c) {
      const char* s = p + (i * nch + c) * bytes_per;
      float v = 0.0f;
      if (format == 3 && bits == 32) {
        uint32_t u = detail::get_u32(s);
        std::memcpy(&v, &u, 4);
      } else if (bits == 16) {
        int16_t x = int16_t(detail::get_u16(s));
        v = float(x) / 32768.0f;
      } else if (bits == 24) {
        int32_t x = int32_t(uint32_t(uint8_t(s[0])) | uint32_t(uint8_t(s[1])) << 8 |
                            uint32_t(uint8_t(s[2])) << 16);
        if (x & 0x800000) x |= int32_t(0xff000000u);
        v = float(double(x) / 8388608.0);
      } else if (bits == 32) {
        int32_t x = int32_t(detail::get_u32(s));
        v = float(double(x) / 2147483648.0);
      } else {
        throw std::runtime_error("read_wav: unsupported bit depth " + std::to_string(bits));
      }
      wav.channels[c][i] = v;
    }
  }
  return wav;
}

}  // namespace asdl
