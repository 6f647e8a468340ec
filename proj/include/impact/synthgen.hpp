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

#ifndef IMPACT_SYNTHGEN_HPP
#define IMPACT_SYNTHGEN_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "impact/audio_io.hpp"
#include "impact/error.hpp"
#include "impact/parallel.hpp"
#include "impact/random.hpp"

namespace impact {

/// Harmonic stack + broadband noise + band-limited bursts.
struct MachineSpec {
  double fundamental_hz = 1000.0;
  int n_harmonics = 1;
  double harmonic_decay = 1.0;
  double noise_floor_db = -std::numeric_limits<double>::infinity();  // relative to the harmonic stack RMS
  double transient_rate_hz = 0.0;                                     // Poisson burst rate
  std::pair<double, double> transient_band_hz{2000.0, 8000.0};
  double am_depth = 0.0;
  double am_rate_hz = 4.0;
  double transient_level_db = 0.0;  // burst RMS relative to the harmonic stack RMS
  double transient_duration_s = 0.01;

  void validate(int rate_hz = kPipelineRateHz) const {
    const double nyquist = rate_hz / 2.0;
    auto check = [](bool ok, const std::string& why) { require(ok, ErrorCode::kInvalidSpec, why); };
    check(fundamental_hz > 0.0, "fundamental_hz must be positive");
    check(n_harmonics >= 1, "n_harmonics must be at least 1");
    check(fundamental_hz * n_harmonics < nyquist, "fundamental_hz * n_harmonics must stay below Nyquist");
    check(harmonic_decay > 0.0 && harmonic_decay <= 1.0, "harmonic_decay must lie in (0, 1]");
    check(!std::isnan(noise_floor_db) && noise_floor_db < std::numeric_limits<double>::infinity(),
          "noise_floor_db must be finite or -inf");
    check(transient_rate_hz >= 0.0 && std::isfinite(transient_rate_hz), "transient_rate_hz must be non-negative");
    check(transient_band_hz.first > 0.0 && transient_band_hz.first < transient_band_hz.second &&
              transient_band_hz.second < nyquist,
          "transient_band_hz must be an increasing pair inside (0, Nyquist)");
    check(am_depth >= 0.0 && am_depth <= 1.0, "am_depth must lie in [0, 1]");
    check(am_rate_hz >= 0.0, "am_rate_hz must be non-negative");
    check(std::isfinite(transient_level_db), "transient_level_db must be finite");
    check(transient_duration_s > 0.0, "transient_duration_s must be positive");
  }
};

// JSON has no infinity; a null noise floor means "no noise".
inline void to_json(nlohmann::json& j, const MachineSpec& s) {
  j = {{"fundamental_hz", s.fundamental_hz},
       {"n_harmonics", s.n_harmonics},
       {"harmonic_decay", s.harmonic_decay},
       {"noise_floor_db", std::isinf(s.noise_floor_db) ? nlohmann::json(nullptr) : nlohmann::json(s.noise_floor_db)},
       {"transient_rate_hz", s.transient_rate_hz},
       {"transient_band_hz", {s.transient_band_hz.first, s.transient_band_hz.second}},
       {"am_depth", s.am_depth},
       {"am_rate_hz", s.am_rate_hz},
       {"transient_level_db", s.transient_level_db},
       {"transient_duration_s", s.transient_duration_s}};
}

inline void from_json(const nlohmann::json& j, MachineSpec& s) {
  s = MachineSpec{};
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("fundamental_hz", s.fundamental_hz);
  get("n_harmonics", s.n_harmonics);
  get("harmonic_decay", s.harmonic_decay);
  if (j.contains("noise_floor_db")) {
    const auto& v = j.at("noise_floor_db");
    s.noise_floor_db = v.is_null() ? -std::numeric_limits<double>::infinity() : v.get<double>();
  }
  get("transient_rate_hz", s.transient_rate_hz);
  if (j.contains("transient_band_hz")) {
    const auto band = j.at("transient_band_hz").get<std::vector<double>>();
    require(band.size() == 2, ErrorCode::kInvalidSpec, "transient_band_hz needs two values");
    s.transient_band_hz = {band[0], band[1]};
  }
  get("am_depth", s.am_depth);
  get("am_rate_hz", s.am_rate_hz);
  get("transient_level_db", s.transient_level_db);
  get("transient_duration_s", s.transient_duration_s);
}

inline constexpr double kSynthPeak = 0.9;

/// Deterministic given the generator state. Draw order: harmonic phases,
/// AM phase, noise, bursts.
inline AudioClip synth_clip(const MachineSpec& spec, double duration_s, int rate_hz, Rng& rng) {
  require(duration_s > 0.0 && rate_hz > 0, ErrorCode::kInvalidSpec, "duration and rate must be positive");
  spec.validate(rate_hz);
  const auto n = static_cast<std::size_t>(std::llround(duration_s * rate_hz));
  require(n > 0, ErrorCode::kInvalidSpec, "clip would be empty");
  const double two_pi = 2.0 * M_PI;
  const double dt = 1.0 / rate_hz;

  std::vector<double> phases(static_cast<std::size_t>(spec.n_harmonics));
  for (auto& p : phases) p = rng.uniform(0.0, two_pi);
  const double am_phase = rng.uniform(0.0, two_pi);

  std::vector<double> x(n, 0.0);
  for (int k = 1; k <= spec.n_harmonics; ++k) {
    const double amp = std::pow(spec.harmonic_decay, k - 1);
    const double w = two_pi * k * spec.fundamental_hz;
    const double phi = phases[static_cast<std::size_t>(k - 1)];
    for (std::size_t i = 0; i < n; ++i) x[i] += amp * std::sin(w * static_cast<double>(i) * dt + phi);
  }
  if (spec.am_depth > 0.0) {
    for (std::size_t i = 0; i < n; ++i)
      x[i] *= 1.0 + spec.am_depth * std::sin(two_pi * spec.am_rate_hz * static_cast<double>(i) * dt + am_phase);
  }
  const double stack_rms = rms(x);

  if (std::isfinite(spec.noise_floor_db)) {
    const double sd = stack_rms * std::pow(10.0, spec.noise_floor_db / 20.0);
    for (auto& v : x) v += rng.normal(0.0, sd);
  }

  if (spec.transient_rate_hz > 0.0) {
    // Each burst: a Hann-windowed sum of random in-band tones.
    constexpr int kTones = 24;
    const double level = stack_rms * std::pow(10.0, spec.transient_level_db / 20.0);
    const auto len = std::max<std::size_t>(2, static_cast<std::size_t>(std::llround(spec.transient_duration_s * rate_hz)));
    const double tone_amp = level * std::sqrt(2.0 / kTones) / std::sqrt(0.375);  // Hann mean square is 3/8
    double t = rng.exponential(spec.transient_rate_hz);
    while (t < duration_s) {
      const auto start = static_cast<std::size_t>(t * rate_hz);
      std::vector<std::pair<double, double>> tones(kTones);
      for (auto& [f, p] : tones) {
        f = rng.uniform(spec.transient_band_hz.first, spec.transient_band_hz.second);
        p = rng.uniform(0.0, two_pi);
      }
      for (std::size_t i = 0; i < len && start + i < n; ++i) {
        const double win = 0.5 - 0.5 * std::cos(two_pi * static_cast<double>(i) / static_cast<double>(len - 1));
        double v = 0.0;
        for (const auto& [f, p] : tones) v += std::sin(two_pi * f * static_cast<double>(i) * dt + p);
        x[start + i] += tone_amp * win * v;
      }
      t += rng.exponential(spec.transient_rate_hz);
    }
  }

  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::abs(v));
  if (peak > 0.0)
    for (auto& v : x) v *= kSynthPeak / peak;

  AudioClip clip;
  clip.samples = std::move(x);
  clip.sample_rate_hz = rate_hz;
  return clip;
}

// ---------------------------------------------------------------------------
// Corpora

struct ClassSpec {
  std::string name;
  MachineSpec spec;
};

struct CorpusPreset {
  std::string name;
  std::string machine = "machine";
  Sensor sensor = Sensor::kMicrophone;
  double duration_s = 1.0;
  int rate_hz = kPipelineRateHz;
  double fundamental_jitter = 0.02;  // relative, uniform +-
  double noise_jitter_db = 3.0;      // uniform +-
  std::vector<ClassSpec> classes;

  void validate() const {
    require(!classes.empty(), ErrorCode::kInvalidSpec, "preset has no classes");
    require(duration_s > 0.0 && rate_hz > 0, ErrorCode::kInvalidSpec, "preset duration and rate must be positive");
    require(fundamental_jitter >= 0.0 && fundamental_jitter < 1.0, ErrorCode::kInvalidSpec,
            "fundamental_jitter must lie in [0, 1)");
    require(noise_jitter_db >= 0.0, ErrorCode::kInvalidSpec, "noise_jitter_db must be non-negative");
    for (const auto& c : classes) {
      require(!c.name.empty(), ErrorCode::kInvalidSpec, "class name must be non-empty");
      MachineSpec worst = c.spec;
      worst.fundamental_hz *= 1.0 + fundamental_jitter;
      worst.validate(rate_hz);
    }
  }
};

inline void to_json(nlohmann::json& j, const CorpusPreset& p) {
  j = {{"name", p.name},
       {"machine", p.machine},
       {"sensor", to_string(p.sensor)},
       {"duration_s", p.duration_s},
       {"rate_hz", p.rate_hz},
       {"fundamental_jitter", p.fundamental_jitter},
       {"noise_jitter_db", p.noise_jitter_db},
       {"classes", nlohmann::json::array()}};
  for (const auto& c : p.classes) j["classes"].push_back({{"name", c.name}, {"spec", c.spec}});
}

inline void from_json(const nlohmann::json& j, CorpusPreset& p) {
  p = CorpusPreset{};
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("name", p.name);
  get("machine", p.machine);
  if (j.contains("sensor")) p.sensor = parse_sensor(j.at("sensor").get<std::string>());
  get("duration_s", p.duration_s);
  get("rate_hz", p.rate_hz);
  get("fundamental_jitter", p.fundamental_jitter);
  get("noise_jitter_db", p.noise_jitter_db);
  for (const auto& c : j.at("classes")) p.classes.push_back({c.at("name").get<std::string>(), c.at("spec").get<MachineSpec>()});
}

/// Four machine states with disjoint fundamentals and different burst
/// activity, loosely shaped after a powder-spray process.
inline CorpusPreset coldspray4() {
  CorpusPreset p;
  p.name = "coldspray4";
  p.machine = "coldspray";
  auto make = [](double f0, double burst_rate, std::pair<double, double> band, double am) {
    MachineSpec s;
    s.fundamental_hz = f0;
    s.n_harmonics = 8;
    s.harmonic_decay = 0.7;
    s.noise_floor_db = -20.0;
    s.transient_rate_hz = burst_rate;
    s.transient_band_hz = band;
    s.am_depth = am;
    s.am_rate_hz = 6.0;
    s.transient_level_db = 0.0;
    s.transient_duration_s = 0.01;
    return s;
  };
  p.classes = {{"normal", make(600.0, 2.0, {3000.0, 9000.0}, 0.2)},
               {"no_powder", make(900.0, 0.5, {3000.0, 9000.0}, 0.1)},
               {"jamming", make(1350.0, 12.0, {5000.0, 15000.0}, 0.4)},
               {"no_gas", make(2000.0, 1.0, {2000.0, 6000.0}, 0.0)}};
  return p;
}

/// Built-in preset by name, or a JSON preset file.
inline CorpusPreset load_preset(const std::string& name_or_path) {
  if (name_or_path == "coldspray4") return coldspray4();
  std::ifstream in(name_or_path);
  require(in.good(), ErrorCode::kInvalidSpec, "unknown preset '" + name_or_path + "' (not a built-in or readable file)");
  try {
    CorpusPreset p = nlohmann::json::parse(in).get<CorpusPreset>();
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidSpec, "bad preset file " + name_or_path + ": " + e.what());
  }
}

struct CorpusClip {
  std::string class_name;
  std::uint64_t seed = 0;
  MachineSpec spec;  // after jitter
};

/// Clip i (class-major order) uses seed base ^ i: the jitter is drawn first,
/// then the clip itself.
inline CorpusClip plan_clip(const CorpusPreset& preset, int clips_per_class, std::uint64_t base_seed, std::size_t i,
                            Rng& rng) {
  const auto& cls = preset.classes.at(i / static_cast<std::size_t>(clips_per_class));
  CorpusClip c{cls.name, base_seed ^ static_cast<std::uint64_t>(i), cls.spec};
  rng = Rng(c.seed);
  c.spec.fundamental_hz *= 1.0 + rng.uniform(-preset.fundamental_jitter, preset.fundamental_jitter);
  const double dn = rng.uniform(-preset.noise_jitter_db, preset.noise_jitter_db);
  if (std::isfinite(c.spec.noise_floor_db)) c.spec.noise_floor_db += dn;
  return c;
}

/// In-memory corpus: one clip per entry, source_id set to the file stem
/// make_corpus would use and label to the class name.
inline std::vector<AudioClip> synth_corpus(const CorpusPreset& preset, int clips_per_class, std::uint64_t base_seed,
                                           std::size_t threads = 0) {
  preset.validate();
  require(clips_per_class >= 1, ErrorCode::kInvalidSpec, "clips per class must be at least 1");
  const std::size_t total = preset.classes.size() * static_cast<std::size_t>(clips_per_class);
  std::vector<AudioClip> clips(total);
  parallel_for(total, threads, [&](std::size_t i) {
    Rng rng;
    const CorpusClip plan = plan_clip(preset, clips_per_class, base_seed, i, rng);
    AudioClip clip = synth_clip(plan.spec, preset.duration_s, preset.rate_hz, rng);
    char stem[32];
    std::snprintf(stem, sizeof(stem), "_%05zu", i);
    clip.source_id = plan.class_name + stem;
    clip.label = plan.class_name;
    clips[i] = std::move(clip);
  });
  return clips;
}

/// Writes <out>/clips/<class>_<index>.wav (float32) and <out>/manifest.csv
/// with paths relative to <out>. Returns the manifest.
inline Manifest make_corpus(const CorpusPreset& preset, int clips_per_class, const std::string& out_dir,
                            std::uint64_t base_seed, std::size_t threads = 0) {
  const auto clips = synth_corpus(preset, clips_per_class, base_seed, threads);
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "clips", ec);
  require(!ec, ErrorCode::kIoFailure, "cannot create " + out_dir + "/clips: " + ec.message());
  Manifest manifest;
  for (const auto& clip : clips) {
    const std::string rel = "clips/" + clip.source_id + ".wav";
    manifest.add({rel, preset.machine, *clip.label, preset.sensor});
  }
  parallel_for(clips.size(), threads, [&](std::size_t i) {
    write_wav((fs::path(out_dir) / manifest.entries[i].path).string(), clips[i], WavEncoding::kFloat32);
  });
  save_manifest(manifest, (fs::path(out_dir) / "manifest.csv").string());
  return manifest;
}

}  // namespace impact

#endif  // IMPACT_SYNTHGEN_HPP
