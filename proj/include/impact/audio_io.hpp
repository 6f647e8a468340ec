// Copyright 2026 The IMPACT Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef IMPACT_AUDIO_IO_HPP
#define IMPACT_AUDIO_IO_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "impact/csv.hpp"
#include "impact/error.hpp"

namespace impact {

inline constexpr int kPipelineRateHz = 48000;

struct AudioClip {
  std::vector<double> samples;
  int sample_rate_hz = kPipelineRateHz;
  std::string source_id;
  std::optional<std::string> label;

  std::size_t size() const { return samples.size(); }
  double duration_s() const { return static_cast<double>(samples.size()) / sample_rate_hz; }
};

inline void validate(const AudioClip& clip) {
  require(!clip.samples.empty(), ErrorCode::kInvalidArgument, "audio clip has no samples");
  require(clip.sample_rate_hz > 0, ErrorCode::kInvalidArgument, "sample rate must be positive");
  for (double s : clip.samples) {
    require(std::isfinite(s), ErrorCode::kInvalidArgument, "audio clip contains non-finite samples");
  }
}

// ---------------------------------------------------------------------------
// RIFF/WAVE

enum class WavEncoding { kPcm16, kFloat32 };

namespace wav_detail {

inline std::uint32_t u32le(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}
inline std::uint16_t u16le(const std::uint8_t* p) { return std::uint16_t(p[0] | (p[1] << 8)); }

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t((v >> (8 * i)) & 0xFF));
}
inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(std::uint8_t(v & 0xFF));
  out.push_back(std::uint8_t(v >> 8));
}
inline void put_tag(std::vector<std::uint8_t>& out, const char* tag) { out.insert(out.end(), tag, tag + 4); }

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

}  // namespace wav_detail

/// Decodes an in-memory RIFF/WAVE file. Integer PCM (8/16/24/32-bit) is
/// scaled to [-1, 1); IEEE float data is taken as is. Channels are averaged.
inline AudioClip decode_wav(std::span<const std::uint8_t> bytes, const std::string& source_id = {}) {
  using namespace wav_detail;
  const auto* data = bytes.data();
  const std::size_t n = bytes.size();
  require(n >= 12 && std::memcmp(data, "RIFF", 4) == 0 && std::memcmp(data + 8, "WAVE", 4) == 0,
          ErrorCode::kUnreadableFile, "missing RIFF/WAVE header in '" + source_id + "'");

  std::uint16_t format = 0, channels = 0, bits = 0, block_align = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  const std::uint8_t* payload = nullptr;
  std::size_t payload_size = 0;

  std::size_t pos = 12;
  while (pos + 8 <= n) {
    const std::uint8_t* chunk = data + pos;
    const std::uint32_t size = u32le(chunk + 4);
    const std::size_t body = pos + 8;
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      require(size >= 16 && body + 16 <= n, ErrorCode::kUnreadableFile, "truncated fmt chunk");
      format = u16le(data + body);
      channels = u16le(data + body + 2);
      rate = u32le(data + body + 4);
      block_align = u16le(data + body + 12);
      bits = u16le(data + body + 14);
      if (format == kFormatExtensible) {
        require(size >= 40 && body + 26 <= n, ErrorCode::kUnreadableFile, "truncated extensible fmt chunk");
        format = u16le(data + body + 24);
      }
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      payload = data + body;
      // Streaming writers sometimes leave the size field unset.
      payload_size = std::min<std::size_t>(size, n - body);
    }
    pos = body + size + (size & 1u);
  }

  require(have_fmt, ErrorCode::kUnreadableFile, "no fmt chunk in '" + source_id + "'");
  require(payload != nullptr, ErrorCode::kUnreadableFile, "no data chunk in '" + source_id + "'");
  require(channels > 0 && rate > 0, ErrorCode::kUnreadableFile, "invalid channel count or sample rate");

  const bool pcm_ok = format == kFormatPcm && (bits == 8 || bits == 16 || bits == 24 || bits == 32);
  const bool float_ok = format == kFormatFloat && bits == 32;
  require(pcm_ok || float_ok, ErrorCode::kUnsupportedEncoding,
          "format " + std::to_string(format) + " with " + std::to_string(bits) + " bits");
  const std::size_t width = bits / 8;
  require(block_align == 0 || block_align == width * channels, ErrorCode::kUnreadableFile,
          "block alignment does not match channel layout");

  const std::size_t frames = payload_size / (width * channels);
  AudioClip clip;
  clip.sample_rate_hz = static_cast<int>(rate);
  clip.source_id = source_id;
  clip.samples.resize(frames);

  auto sample_at = [&](const std::uint8_t* p) -> double {
    if (float_ok) {
      float f;
      const std::uint32_t raw = u32le(p);
      std::memcpy(&f, &raw, sizeof f);
      return f;
    }
    switch (bits) {
      case 8: return (static_cast<int>(p[0]) - 128) / 128.0;
      case 16: return static_cast<std::int16_t>(u16le(p)) / 32768.0;
      case 24: {
        std::int32_t v = std::int32_t(p[0]) | (std::int32_t(p[1]) << 8) | (std::int32_t(p[2]) << 16);
        if (v & 0x800000) v -= 0x1000000;
        return v / 8388608.0;
      }
      default: return static_cast<std::int32_t>(u32le(p)) / 2147483648.0;
    }
  };

  for (std::size_t f = 0; f < frames; ++f) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) acc += sample_at(payload + (f * channels + c) * width);
    clip.samples[f] = acc / channels;
  }
  return clip;
}

inline AudioClip read_audio(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kUnreadableFile, "cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  AudioClip clip = decode_wav(bytes, std::filesystem::path(path).stem().string());
  require(!clip.samples.empty(), ErrorCode::kUnreadableFile, "no samples in " + path);
  return clip;
}

inline std::vector<std::uint8_t> encode_wav(const AudioClip& clip, WavEncoding encoding = WavEncoding::kPcm16) {
  using namespace wav_detail;
  const bool pcm = encoding == WavEncoding::kPcm16;
  const std::uint16_t bits = pcm ? 16 : 32;
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(clip.samples.size() * (bits / 8));
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  put_tag(out, "RIFF");
  put_u32(out, 36 + data_bytes);
  put_tag(out, "WAVE");
  put_tag(out, "fmt ");
  put_u32(out, 16);
  put_u16(out, pcm ? kFormatPcm : kFormatFloat);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate_hz));
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate_hz) * (bits / 8));
  put_u16(out, bits / 8);
  put_u16(out, bits);
  put_tag(out, "data");
  put_u32(out, data_bytes);
  for (double s : clip.samples) {
    if (pcm) {
      const double q = std::clamp(std::round(s * 32768.0), -32768.0, 32767.0);
      put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
    } else {
      const float f = static_cast<float>(s);
      std::uint32_t raw;
      std::memcpy(&raw, &f, sizeof raw);
      put_u32(out, raw);
    }
  }
  return out;
}

inline void write_wav(const std::string& path, const AudioClip& clip, WavEncoding encoding = WavEncoding::kPcm16) {
  const auto bytes = encode_wav(clip, encoding);
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::kIoFailure, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(!out.fail(), ErrorCode::kIoFailure, "short write to " + path);
}

// ---------------------------------------------------------------------------
// Sample-rate conversion

/// Band-limited resampling with a Hann-windowed sinc kernel. The kernel is
/// renormalized per output sample so DC passes through exactly, edges included.
inline AudioClip resample(const AudioClip& clip, int target_hz, int zero_crossings = 32) {
  require(target_hz > 0, ErrorCode::kInvalidArgument, "target rate must be positive");
  if (target_hz == clip.sample_rate_hz) return clip;

  const double ratio = static_cast<double>(target_hz) / clip.sample_rate_hz;
  const double cutoff = std::min(1.0, ratio);
  const double half_width = zero_crossings / cutoff;
  const auto in_len = static_cast<std::ptrdiff_t>(clip.samples.size());
  const auto out_len = static_cast<std::size_t>(std::llround(static_cast<double>(in_len) * ratio));

  AudioClip out = clip;
  out.sample_rate_hz = target_hz;
  out.samples.assign(out_len, 0.0);
  for (std::size_t n = 0; n < out_len; ++n) {
    const double center = static_cast<double>(n) / ratio;
    const auto lo = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(std::ceil(center - half_width)));
    const auto hi = std::min<std::ptrdiff_t>(in_len - 1, static_cast<std::ptrdiff_t>(std::floor(center + half_width)));
    double acc = 0.0, weight_sum = 0.0;
    for (std::ptrdiff_t k = lo; k <= hi; ++k) {
      const double x = static_cast<double>(k) - center;
      const double arg = M_PI * cutoff * x;
      const double sinc = std::abs(arg) < 1e-12 ? 1.0 : std::sin(arg) / arg;
      const double window = 0.5 + 0.5 * std::cos(M_PI * x / half_width);
      const double w = sinc * window;
      acc += w * clip.samples[static_cast<std::size_t>(k)];
      weight_sum += w;
    }
    out.samples[n] = weight_sum != 0.0 ? acc / weight_sum : 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Level normalization and segmentation

inline double rms(std::span<const double> x) {
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return x.empty() ? 0.0 : std::sqrt(acc / static_cast<double>(x.size()));
}

inline AudioClip rms_normalize(const AudioClip& clip, double target_rms = 0.1) {
  require(target_rms > 0.0, ErrorCode::kInvalidArgument, "target RMS must be positive");
  const double level = rms(clip.samples);
  require(level >= 1e-9, ErrorCode::kSilentClip, "RMS below 1e-9 in '" + clip.source_id + "'");
  AudioClip out = clip;
  const double gain = target_rms / level;
  for (double& s : out.samples) s *= gain;
  return out;
}

/// Zero mean, unit population standard deviation.
inline AudioClip zscore_normalize(const AudioClip& clip) {
  const auto n = static_cast<double>(clip.samples.size());
  require(n > 0, ErrorCode::kDegenerateClip, "empty clip");
  double mean = 0.0;
  for (double s : clip.samples) mean += s;
  mean /= n;
  double var = 0.0;
  for (double s : clip.samples) var += (s - mean) * (s - mean);
  const double sd = std::sqrt(var / n);
  require(sd > 1e-9, ErrorCode::kDegenerateClip, "constant signal in '" + clip.source_id + "'");
  AudioClip out = clip;
  for (double& s : out.samples) s = (s - mean) / sd;
  return out;
}

/// Consecutive non-overlapping windows; a trailing partial window is dropped.
inline std::vector<AudioClip> segment(const AudioClip& clip, double window_s = 1.0) {
  const auto window = static_cast<std::size_t>(std::llround(window_s * clip.sample_rate_hz));
  require(window >= 1, ErrorCode::kInvalidArgument, "segment window shorter than one sample");
  std::vector<AudioClip> out;
  const std::size_t count = clip.samples.size() / window;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    AudioClip piece;
    piece.sample_rate_hz = clip.sample_rate_hz;
    piece.source_id = clip.source_id;
    piece.label = clip.label;
    const auto first = clip.samples.begin() + static_cast<std::ptrdiff_t>(i * window);
    piece.samples.assign(first, first + static_cast<std::ptrdiff_t>(window));
    out.push_back(std::move(piece));
  }
  return out;
}

struct PrepareOptions {
  int target_rate_hz = kPipelineRateHz;
  double target_rms = 0.1;
  double window_s = 1.0;
};

/// Whole-recording preparation: resample, RMS then Z-score normalization of
/// the full recording, then segmentation into fixed windows.
inline std::vector<AudioClip> prepare_recording(const AudioClip& clip, const PrepareOptions& options = {}) {
  validate(clip);
  AudioClip x = resample(clip, options.target_rate_hz);
  x = rms_normalize(x, options.target_rms);
  x = zscore_normalize(x);
  return segment(x, options.window_s);
}

// ---------------------------------------------------------------------------
// Dataset manifest, CSV with header `path,machine,class,sensor`.

enum class Sensor { kStethoscope, kMicrophone };

inline std::string to_string(Sensor s) { return s == Sensor::kStethoscope ? "stethoscope" : "microphone"; }

inline Sensor parse_sensor(const std::string& text) {
  if (text == "stethoscope") return Sensor::kStethoscope;
  if (text == "microphone") return Sensor::kMicrophone;
  fail(ErrorCode::kInvalidArgument, "unknown sensor type '" + text + "'");
}

struct ManifestEntry {
  std::string path;
  std::string machine;
  std::string class_id;
  Sensor sensor = Sensor::kMicrophone;

  /// File stem; the key used to join embeddings back to their labels.
  std::string clip_id() const { return std::filesystem::path(path).stem().string(); }
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::optional<std::int64_t> split_seed;

  void validate() const {
    std::set<std::string> seen;
    for (const auto& e : entries) {
      require(seen.insert(e.path).second, ErrorCode::kInvalidArgument, "duplicate manifest path '" + e.path + "'");
      require(!e.class_id.empty(), ErrorCode::kInvalidArgument, "empty class id for '" + e.path + "'");
    }
  }

  void add(ManifestEntry entry) { entries.push_back(std::move(entry)); }
};

inline const csv::Row& manifest_header() {
  static const csv::Row header{"path", "machine", "class", "sensor"};
  return header;
}

inline Manifest load_manifest(const std::string& path) {
  std::vector<std::string> comments;
  const auto rows = csv::read_file(path, &comments);
  require(!rows.empty() && rows.front() == manifest_header(), ErrorCode::kInvalidArgument,
          "manifest " + path + " must start with header path,machine,class,sensor");
  Manifest m;
  for (const auto& c : comments) {
    if (c.rfind("split_seed=", 0) == 0) m.split_seed = std::stoll(c.substr(11));
  }
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    require(r.size() == 4, ErrorCode::kInvalidArgument, "manifest row " + std::to_string(i) + " needs 4 fields");
    m.add({r[0], r[1], r[2], parse_sensor(r[3])});
  }
  m.validate();
  return m;
}

inline void save_manifest(const Manifest& m, const std::string& path) {
  m.validate();
  csv::Writer w(path);
  if (m.split_seed) w.comment("split_seed=" + std::to_string(*m.split_seed));
  w.row(manifest_header());
  for (const auto& e : m.entries) w.row({e.path, e.machine, e.class_id, to_string(e.sensor)});
  w.close();
}

/// Manifest paths are resolved relative to the manifest's own directory.
inline std::string resolve_entry_path(const std::string& manifest_path, const ManifestEntry& entry) {
  const std::filesystem::path p(entry.path);
  if (p.is_absolute()) return p.string();
  return (std::filesystem::path(manifest_path).parent_path() / p).string();
}

}  // namespace impact

#endif  // IMPACT_AUDIO_IO_HPP
