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

#include <gtest/gtest.h>

#include <cmath>

#include "impact/dsp.hpp"
#include "test_util.hpp"

namespace impact {
namespace {

using testing::TempDir;

TEST(Stft, FrameCountLaw) {
  SpectrogramParams p;
  for (std::size_t len : {1u, 2u, 375u, 376u, 377u, 10000u, 48000u}) {
    const auto n = static_cast<int>(1 + len / 376);
    EXPECT_EQ(p.frames_for(len), n);
    std::vector<double> x(len, 0.1);
    EXPECT_EQ(stft(x, p).cols(), n) << len;
  }
  EXPECT_EQ(p.frames_for(48000), 128);
}

TEST(Stft, ZeroInputGivesZeroMatrix) {
  const std::vector<double> x(48000, 0.0);
  const auto s = stft(x, SpectrogramParams{});
  EXPECT_EQ(s.rows(), 1025);
  EXPECT_EQ(s.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Stft, ToneAtBinFortyPeaksThere) {
  const auto tone = testing::sine(937.5, 48000, 48000);
  const auto s = stft(tone.samples, SpectrogramParams{});
  for (Eigen::Index f = 0; f < s.cols(); ++f) {
    Eigen::Index k;
    s.col(f).cwiseAbs().maxCoeff(&k);
    // The two edge frames see the reflected (no longer pure) tone.
    if (f == 0 || f == s.cols() - 1) {
      EXPECT_LE(std::abs(static_cast<int>(k) - 40), 1) << "frame " << f;
    } else {
      EXPECT_EQ(k, 40) << "frame " << f;
    }
  }
}

TEST(Stft, InteriorColumnMatchesBruteForceDft) {
  const auto x = testing::noise(48000, 48000, 12).samples;
  SpectrogramParams p;
  const auto s = stft(x, p);
  const auto window = hann_window(p.win_length);
  for (int f : {10, 64, 120}) {
    std::vector<double> frame(2048);
    const int start = f * p.hop_length - 1024;
    for (int t = 0; t < 2048; ++t) frame[t] = x[static_cast<std::size_t>(start + t)] * window[t];
    const auto ref = testing::naive_dft(frame);
    double err = 0.0, norm = 0.0;
    for (int k = 0; k < 1025; ++k) {
      err += std::norm(ref[k] - s(k, f));
      norm += std::norm(ref[k]);
    }
    EXPECT_LE(std::sqrt(err / norm), 1e-6);
  }
}

TEST(Stft, ReflectPaddingMirrorsWithoutRepeatingTheEdge) {
  // numpy reflect: [.. x2 x1 | x0 x1 x2 ..]
  EXPECT_EQ(dsp_detail::reflect_index(-1, 5), 1u);
  EXPECT_EQ(dsp_detail::reflect_index(-2, 5), 2u);
  EXPECT_EQ(dsp_detail::reflect_index(5, 5), 3u);
  EXPECT_EQ(dsp_detail::reflect_index(6, 5), 2u);
  EXPECT_EQ(dsp_detail::reflect_index(2, 5), 2u);
}

TEST(MelScale, ClosedForm) {
  EXPECT_NEAR(hz_to_mel(700.0), 2595.0 * std::log10(2.0), 1e-9);
  EXPECT_NEAR(hz_to_mel(700.0), 781.17, 0.01);
  for (double f : {0.0, 100.0, 1000.0, 24000.0}) EXPECT_NEAR(mel_to_hz(hz_to_mel(f)), f, 1e-7);
}

TEST(MelFilterbank, ShapeNonNegativityAndCoverage) {
  SpectrogramParams p;
  const Mat<double> fb = mel_filterbank(p);
  ASSERT_EQ(fb.rows(), 128);
  ASSERT_EQ(fb.cols(), 1025);
  EXPECT_GE(fb.minCoeff(), 0.0);
  for (Eigen::Index m = 0; m < fb.rows(); ++m) EXPECT_GT(fb.row(m).maxCoeff(), 0.0);
  const auto edges = mel_band_edges(p);
  const double bin_hz = 48000.0 / 2048.0;
  for (int k = 0; k < 1025; ++k) {
    const double f = k * bin_hz;
    if (f > edges[1] && f < edges[128]) EXPECT_GT(fb.col(k).sum(), 0.0) << "bin " << k;
  }
}

TEST(MelFilterbank, RowsAreUnimodal) {
  const Mat<double> fb = mel_filterbank(SpectrogramParams{});
  for (Eigen::Index m = 0; m < fb.rows(); ++m) {
    int changes = 0, last = 0;
    for (Eigen::Index k = 1; k < fb.cols(); ++k) {
      const double d = fb(m, k) - fb(m, k - 1);
      const int sign = d > 0 ? 1 : (d < 0 ? -1 : 0);
      if (sign != 0 && sign != last) {
        if (last != 0) ++changes;
        last = sign;
      }
    }
    EXPECT_LE(changes, 1) << "row " << m;  // one rise->fall turn
  }
}

TEST(MelFilterbank, TooManyBandsIsDegenerate) {
  SpectrogramParams p;
  p.n_fft = 64;
  p.win_length = 64;
  p.n_mels = 128;
  try {
    mel_filterbank(p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateBand);
  }
}

TEST(LogMel, WhiteNoiseShapeAndRange) {
  const LogMelFrontend fe;
  const auto clip = testing::noise(48000, 48000, 77);
  const auto raw = fe.unstandardized(clip);
  ASSERT_EQ(raw.rows(), 128);
  ASSERT_EQ(raw.cols(), 128);
  EXPECT_TRUE(raw.values.allFinite());
  EXPECT_LE(raw.values.maxCoeff(), 0.0);
  EXPECT_GE(raw.values.minCoeff(), -80.0);
  EXPECT_LE(raw.values.maxCoeff() - raw.values.minCoeff(), 80.0 + 1e-6);
  const auto std_spec = fe(clip);
  EXPECT_TRUE(std_spec.standardized);
  EXPECT_NEAR(std_spec.values.mean(), 0.0, 1e-9);
  EXPECT_NEAR(std::sqrt(std_spec.values.array().square().mean()), 1.0, 1e-9);
}

TEST(LogMel, SilenceIsConstant) {
  AudioClip silent;
  silent.samples.assign(48000, 0.0);
  const auto raw = LogMelFrontend().unstandardized(silent);
  EXPECT_EQ(raw.values.maxCoeff(), raw.values.minCoeff());
  const auto std_spec = log_mel(silent);
  EXPECT_TRUE(std_spec.values.allFinite());
}

TEST(LogMel, ToneEnergyPeaksAtNearestMelCenter) {
  const LogMelFrontend fe;
  const auto raw = fe.unstandardized(testing::sine(1000.0, 48000, 48000));
  Eigen::Index best;
  raw.values.rowwise().mean().maxCoeff(&best);
  const auto edges = mel_band_edges(fe.params());
  int nearest = 0;
  for (int m = 1; m < 128; ++m)
    if (std::abs(edges[m + 1] - 1000.0) < std::abs(edges[nearest + 1] - 1000.0)) nearest = m;
  EXPECT_LE(std::abs(static_cast<int>(best) - nearest), 1);
}

TEST(LogMel, RejectsWrongDuration) {
  for (std::size_t n : {47999u, 48001u, 96000u}) {
    try {
      log_mel(testing::noise(n, 48000, 1));
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kWrongDuration);
    }
  }
  EXPECT_THROW(log_mel(testing::noise(44100, 44100, 1)), Error);
}

TEST(MeanSpectrum, TwoIdenticalSegmentsAtBin43) {
  const double f = 43.0 * 48000.0 / 2048.0;
  auto one = testing::sine(f, 2048, 48000);
  AudioClip two = one;
  two.samples.insert(two.samples.end(), one.samples.begin(), one.samples.end());
  const auto ms = mean_spectrum(two);
  EXPECT_EQ(ms.n_segments, 2u);
  EXPECT_EQ(ms.argmax(), 43u);
  for (double s : ms.std_db) EXPECT_EQ(s, 0.0);
  ASSERT_EQ(ms.freqs_hz.size(), 1025u);
  EXPECT_EQ(ms.freqs_hz.front(), 0.0);
  EXPECT_EQ(ms.freqs_hz.back(), 24000.0);
}

TEST(MeanSpectrum, SingleSegmentHasZeroStd) {
  const auto ms = mean_spectrum(testing::noise(2048, 48000, 3));
  for (double s : ms.std_db) EXPECT_EQ(s, 0.0);
}

TEST(MeanSpectrum, LoudAndQuietSegmentsGiveTwoPointStd) {
  const double f = 43.0 * 48000.0 / 2048.0;
  auto loud = testing::sine(f, 2048, 48000, 1.0);
  const auto quiet = testing::sine(f, 2048, 48000, 0.1);
  loud.samples.insert(loud.samples.end(), quiet.samples.begin(), quiet.samples.end());
  const auto ms = mean_spectrum(loud);
  // |X| scales by 10 -> 20 dB apart; population std of two points is half the gap.
  EXPECT_NEAR(ms.std_db[43], 10.0, 1e-6);
}

TEST(MeanSpectrum, TooShortIsRejected) {
  try {
    mean_spectrum(testing::noise(2047, 48000, 3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kTooShort);
  }
}

TEST(SpectrogramFile, RoundTripAndHeader) {
  TempDir dir("spec");
  Mat<double> v(3, 4);
  v.setRandom();
  write_spectrogram(dir.file("s.bin"), v);
  const auto bytes = encode_spectrogram(v);
  ASSERT_EQ(bytes.size(), 8u + 8u + 12u * 4u);
  EXPECT_EQ(std::string(reinterpret_cast<const char*>(bytes.data()), 7), "IMSPEC1");
  EXPECT_EQ(bytes[7], 0);
  EXPECT_EQ(bytes[8], 3);
  EXPECT_EQ(bytes[12], 4);
  const Mat<double> back = read_spectrogram(dir.file("s.bin"));
  ASSERT_EQ(back.rows(), 3);
  ASSERT_EQ(back.cols(), 4);
  EXPECT_TRUE(back.isApprox(v.cast<float>().cast<double>(), 0.0));
}

}  // namespace
}  // namespace impact
