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

#ifndef IMPACT_DSP_HPP
#define IMPACT_DSP_HPP

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "impact/audio_io.hpp"
#include "impact/error.hpp"
#include "impact/tensor.hpp"

namespace impact {

using cplx = std::complex<double>;
using ComplexMat = Eigen::Matrix<cplx, Eigen::Dynamic, Eigen::Dynamic>;

struct SpectrogramParams {
  int n_fft = 2048;
  int win_length = 2048;
  int hop_length = 376;
  int n_mels = 128;
  double top_db = 80.0;
  int sample_rate_hz = kPipelineRateHz;
  double fmin_hz = 0.0;
  double fmax_hz = 24000.0;
  bool standardize = true;

  int n_bins() const { return n_fft / 2 + 1; }
  int frames_for(std::size_t len) const { return 1 + static_cast<int>(len / static_cast<std::size_t>(hop_length)); }

  void validate() const {
    require(n_fft >= win_length && win_length > 0, ErrorCode::kInvalidArgument, "need n_fft >= win_length > 0");
    require(hop_length > 0, ErrorCode::kInvalidArgument, "hop_length must be positive");
    require(n_mels > 0, ErrorCode::kInvalidArgument, "n_mels must be positive");
    require(top_db > 0, ErrorCode::kInvalidArgument, "top_db must be positive");
    require(sample_rate_hz > 0, ErrorCode::kInvalidArgument, "sample rate must be positive");
    require(fmin_hz >= 0 && fmin_hz < fmax_hz && fmax_hz <= sample_rate_hz / 2.0, ErrorCode::kInvalidArgument,
            "need 0 <= fmin < fmax <= rate/2");
  }
};

// ---------------------------------------------------------------------------
// FFT

/// Forward DFT (e^{-i...} convention), via Eigen's FFT module.
inline std::vector<cplx> fft(const std::vector<cplx>& a) {
  thread_local Eigen::FFT<double> engine;
  std::vector<cplx> out;
  engine.fwd(out, a);
  return out;
}

/// Periodic Hann window.
inline std::vector<double> hann_window(int length) {
  std::vector<double> w(static_cast<std::size_t>(length));
  for (int i = 0; i < length; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / length);
  return w;
}

namespace dsp_detail {

/// Index into x under repeated mirror reflection (numpy "reflect" mode,
/// extended to pads longer than the signal).
inline std::size_t reflect_index(std::ptrdiff_t i, std::ptrdiff_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - i);
}

}  // namespace dsp_detail

/// Center-padded (reflect) STFT with a Hann window; rows are the n_fft/2+1
/// one-sided bins, columns the 1 + floor(len/hop) frames.
inline ComplexMat stft(std::span<const double> samples, const SpectrogramParams& params) {
  require(!samples.empty(), ErrorCode::kInvalidArgument, "stft of empty signal");
  const int n_fft = params.n_fft;
  const int n_frames = params.frames_for(samples.size());
  const auto n = static_cast<std::ptrdiff_t>(samples.size());
  const std::vector<double> window = hann_window(params.win_length);
  const int win_offset = (n_fft - params.win_length) / 2;

  ComplexMat out(params.n_bins(), n_frames);
  std::vector<cplx> frame(static_cast<std::size_t>(n_fft));
  for (int f = 0; f < n_frames; ++f) {
    std::fill(frame.begin(), frame.end(), cplx{});
    const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(f) * params.hop_length - n_fft / 2;
    for (int t = 0; t < params.win_length; ++t) {
      const std::ptrdiff_t idx = start + win_offset + t;
      frame[static_cast<std::size_t>(win_offset + t)] = samples[dsp_detail::reflect_index(idx, n)] * window[t];
    }
    const auto spec = fft(frame);
    for (int k = 0; k < params.n_bins(); ++k) out(k, f) = spec[static_cast<std::size_t>(k)];
  }
  return out;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// n_mels + 2 edge frequencies, equally spaced on the HTK mel scale. Band m
/// rises from edge m to its center m+1 and falls to edge m+2.
inline std::vector<double> mel_band_edges(const SpectrogramParams& params) {
  const double lo = hz_to_mel(params.fmin_hz), hi = hz_to_mel(params.fmax_hz);
  std::vector<double> edges(static_cast<std::size_t>(params.n_mels + 2));
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(params.n_mels + 1));
  return edges;
}

inline Mat<double> mel_filterbank(const SpectrogramParams& params) {
  params.validate();
  const auto edges = mel_band_edges(params);
  const int bins = params.n_bins();
  Mat<double> fb = Mat<double>::Zero(params.n_mels, bins);
  for (int m = 0; m < params.n_mels; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * params.sample_rate_hz / params.n_fft;
      const double rise = (f - left) / (center - left);
      const double fall = (right - f) / (right - center);
      fb(m, k) = std::max(0.0, std::min(rise, fall));
    }
    require(fb.row(m).maxCoeff() > 0.0, ErrorCode::kDegenerateBand,
            "mel band " + std::to_string(m) + " covers no FFT bin; n_mels too large for n_fft");
  }
  return fb;
}

struct LogMelSpectrogram {
  Mat<double> values;  // mel bin x frame
  double ref_db = 0.0;
  SpectrogramParams params;
  bool standardized = false;

  int rows() const { return static_cast<int>(values.rows()); }
  int cols() const { return static_cast<int>(values.cols()); }
};

/// In-place mean 0 / population sigma 1. A constant input is only centered.
inline void standardize(LogMelSpectrogram& spec) {
  const double mean = spec.values.mean();
  spec.values.array() -= mean;
  const double sd = std::sqrt(spec.values.array().square().mean());
  if (sd > 1e-12) spec.values /= sd;
  spec.standardized = true;
}

/// Holds the window and filterbank so many clips can share one read-only
/// instance across threads.
class LogMelFrontend {
 public:
  explicit LogMelFrontend(SpectrogramParams params = {}) : params_(params), filterbank_(mel_filterbank(params)) {}

  const SpectrogramParams& params() const { return params_; }
  const Mat<double>& filterbank() const { return filterbank_; }

  /// dB relative to the spectrogram maximum, clamped to [-top_db, 0].
  LogMelSpectrogram unstandardized(const AudioClip& clip) const {
    require(clip.sample_rate_hz == params_.sample_rate_hz &&
                clip.samples.size() == static_cast<std::size_t>(params_.sample_rate_hz),
            ErrorCode::kWrongDuration,
            "log-Mel input must be exactly 1 s at " + std::to_string(params_.sample_rate_hz) + " Hz, got " +
                std::to_string(clip.samples.size()) + " samples at " + std::to_string(clip.sample_rate_hz));
    const ComplexMat spectrum = stft(clip.samples, params_);
    const Mat<double> power = spectrum.cwiseAbs2();
    Mat<double> mel = filterbank_ * power;

    static constexpr double kAmin = 1e-10;
    LogMelSpectrogram out;
    out.params = params_;
    out.values = mel.unaryExpr([](double v) { return 10.0 * std::log10(std::max(v, kAmin)); });
    out.ref_db = out.values.maxCoeff();
    const double floor = -params_.top_db;
    out.values = out.values.unaryExpr([&](double v) { return std::max(v - out.ref_db, floor); });
    return out;
  }

  LogMelSpectrogram operator()(const AudioClip& clip) const {
    LogMelSpectrogram out = unstandardized(clip);
    if (params_.standardize) standardize(out);
    return out;
  }

 private:
  SpectrogramParams params_;
  Mat<double> filterbank_;
};

inline LogMelSpectrogram log_mel(const AudioClip& clip, const SpectrogramParams& params = {}) {
  return LogMelFrontend(params)(clip);
}

// ---------------------------------------------------------------------------
// Mean magnitude spectrum over fixed-length segments

struct MeanSpectrum {
  std::vector<double> freqs_hz;
  std::vector<double> mean_db;
  std::vector<double> std_db;  // population
  std::size_t n_segments = 0;

  std::size_t argmax() const {
    return static_cast<std::size_t>(std::max_element(mean_db.begin(), mean_db.end()) - mean_db.begin());
  }
};

/// Rectangular-window FFT magnitudes (20 log10(|X| + 1e-10)) over segments
/// starting every `hop` samples; a trailing partial segment is ignored.
inline MeanSpectrum mean_spectrum(const AudioClip& clip, int segment_len = 2048, int hop = 0) {
  if (hop <= 0) hop = segment_len;
  require(segment_len > 0, ErrorCode::kInvalidArgument, "segment length must be positive");
  require(clip.samples.size() >= static_cast<std::size_t>(segment_len), ErrorCode::kTooShort,
          "need at least " + std::to_string(segment_len) + " samples, got " + std::to_string(clip.samples.size()));
  const std::size_t bins = static_cast<std::size_t>(segment_len / 2 + 1);
  const std::size_t count = (clip.samples.size() - static_cast<std::size_t>(segment_len)) / hop + 1;

  std::vector<double> sum(bins, 0.0), sum_sq(bins, 0.0);
  std::vector<std::vector<double>> per_segment;
  per_segment.reserve(count);
  std::vector<cplx> frame(static_cast<std::size_t>(segment_len));
  for (std::size_t s = 0; s < count; ++s) {
    for (int t = 0; t < segment_len; ++t) frame[t] = clip.samples[s * hop + static_cast<std::size_t>(t)];
    const auto spec = fft(frame);
    std::vector<double> db(bins);
    for (std::size_t k = 0; k < bins; ++k) db[k] = 20.0 * std::log10(std::abs(spec[k]) + 1e-10);
    per_segment.push_back(std::move(db));
  }

  MeanSpectrum out;
  out.n_segments = count;
  out.freqs_hz.resize(bins);
  out.mean_db.assign(bins, 0.0);
  out.std_db.assign(bins, 0.0);
  for (std::size_t k = 0; k < bins; ++k) {
    out.freqs_hz[k] = static_cast<double>(k) * clip.sample_rate_hz / segment_len;
    double m = 0.0;
    for (const auto& db : per_segment) m += db[k];
    m /= static_cast<double>(count);
    double v = 0.0;
    for (const auto& db : per_segment) v += (db[k] - m) * (db[k] - m);
    out.mean_db[k] = m;
    out.std_db[k] = std::sqrt(v / static_cast<double>(count));
  }
  return out;
}

inline void write_mean_spectrum_csv(const MeanSpectrum& ms, const std::string& path) {
  csv::Writer w(path);
  w.row({"freq_hz", "mean_db", "std_db"});
  char buf[96];
  for (std::size_t k = 0; k < ms.freqs_hz.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%.6f,%.9g,%.9g", ms.freqs_hz[k], ms.mean_db[k], ms.std_db[k]);
    w.stream() << buf << '\n';
  }
  w.close();
}

// ---------------------------------------------------------------------------
// Spectrogram file: "IMSPEC1\0", u32 rows, u32 cols (little-endian), then
// rows*cols float32 values in row-major order.

inline constexpr char kSpectrogramMagic[8] = {'I', 'M', 'S', 'P', 'E', 'C', '1', '\0'};

inline std::vector<std::uint8_t> encode_spectrogram(const Mat<double>& values) {
  std::vector<std::uint8_t> out(kSpectrogramMagic, kSpectrogramMagic + 8);
  auto put_u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t((v >> (8 * i)) & 0xFF));
  };
  put_u32(static_cast<std::uint32_t>(values.rows()));
  put_u32(static_cast<std::uint32_t>(values.cols()));
  for (Eigen::Index r = 0; r < values.rows(); ++r)
    for (Eigen::Index c = 0; c < values.cols(); ++c) {
      const float f = static_cast<float>(values(r, c));
      std::uint32_t raw;
      std::memcpy(&raw, &f, 4);
      put_u32(raw);
    }
  return out;
}

inline Mat<double> decode_spectrogram(std::span<const std::uint8_t> bytes) {
  require(bytes.size() >= 16 && std::memcmp(bytes.data(), kSpectrogramMagic, 8) == 0, ErrorCode::kUnreadableFile,
          "not an IMSPEC1 spectrogram");
  auto u32 = [&](std::size_t off) {
    return std::uint32_t(bytes[off]) | (std::uint32_t(bytes[off + 1]) << 8) | (std::uint32_t(bytes[off + 2]) << 16) |
           (std::uint32_t(bytes[off + 3]) << 24);
  };
  const std::uint32_t rows = u32(8), cols = u32(12);
  require(bytes.size() == 16 + std::size_t(rows) * cols * 4, ErrorCode::kUnreadableFile,
          "spectrogram payload size mismatch");
  Mat<double> values(rows, cols);
  std::size_t off = 16;
  for (std::uint32_t r = 0; r < rows; ++r)
    for (std::uint32_t c = 0; c < cols; ++c, off += 4) {
      const std::uint32_t raw = u32(off);
      float f;
      std::memcpy(&f, &raw, 4);
      values(r, c) = f;
    }
  return values;
}

inline void write_spectrogram(const std::string& path, const Mat<double>& values) {
  const auto bytes = encode_spectrogram(values);
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::kIoFailure, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Mat<double> read_spectrogram(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kUnreadableFile, "cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_spectrogram(bytes);
}

}  // namespace impact

#endif  // IMPACT_DSP_HPP
