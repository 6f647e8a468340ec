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

#ifndef IMPACT_RUN_CONFIG_HPP
#define IMPACT_RUN_CONFIG_HPP

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "impact/audio_io.hpp"
#include "impact/dsp.hpp"
#include "impact/error.hpp"
#include "impact/model.hpp"
#include "impact/probe_bench.hpp"
#include "impact/ssl_train.hpp"

namespace impact {

inline void to_json(nlohmann::json& j, const SpectrogramParams& p) {
  j = {{"n_fft", p.n_fft},
       {"win_length", p.win_length},
       {"hop_length", p.hop_length},
       {"n_mels", p.n_mels},
       {"top_db", p.top_db},
       {"sample_rate_hz", p.sample_rate_hz},
       {"fmin_hz", p.fmin_hz},
       {"fmax_hz", p.fmax_hz},
       {"standardize", p.standardize}};
}

inline void from_json(const nlohmann::json& j, SpectrogramParams& p) {
  p = SpectrogramParams{};
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("n_fft", p.n_fft);
  get("win_length", p.win_length);
  get("hop_length", p.hop_length);
  get("n_mels", p.n_mels);
  get("top_db", p.top_db);
  get("sample_rate_hz", p.sample_rate_hz);
  get("fmin_hz", p.fmin_hz);
  get("fmax_hz", p.fmax_hz);
  get("standardize", p.standardize);
}

inline std::string to_string(Pooling p) {
  switch (p) {
    case Pooling::kCls: return "cls";
    case Pooling::kMean: return "mean";
    case Pooling::kClsMean: return "cls+mean";
  }
  return "mean";
}

inline Pooling parse_pooling(const std::string& s) {
  if (s == "cls") return Pooling::kCls;
  if (s == "mean") return Pooling::kMean;
  if (s == "cls+mean") return Pooling::kClsMean;
  fail(ErrorCode::kInvalidConfig, "embed.pooling: expected 'cls', 'mean' or 'cls+mean', got '" + s + "'");
}

inline std::string to_string(Branch b) { return b == Branch::kStudent ? "student" : "teacher"; }

inline Branch parse_branch(const std::string& s) {
  if (s == "student") return Branch::kStudent;
  if (s == "teacher") return Branch::kTeacher;
  fail(ErrorCode::kInvalidConfig, "embed.branch: expected 'student' or 'teacher', got '" + s + "'");
}

enum class Provenance { kDefault, kFile, kFlag };

inline std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::kDefault: return "default";
    case Provenance::kFile: return "file";
    case Provenance::kFlag: return "flag";
  }
  return "default";
}

/// Everything a CLI run depends on. `seed` is the single root seed: the
/// training seed is the root itself, the probe and synth seeds are derived
/// from it.
struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  SpectrogramParams dsp;
  double target_rms = 0.1;
  double window_s = 1.0;
  ModelConfig model;
  TrainConfig train;
  ProbeConfig probe;
  Pooling pooling = Pooling::kMean;
  Branch branch = Branch::kStudent;
  std::map<std::string, Provenance> provenance;  // dotted leaf path -> source

  PrepareOptions prepare_options() const { return {dsp.sample_rate_hz, target_rms, window_s}; }
  std::uint64_t probe_seed() const { return derive_seed(seed, 3); }

  TrainConfig effective_train() const {
    TrainConfig t = train;
    t.seed = seed;
    return t;
  }

  ProbeConfig effective_probe() const {
    ProbeConfig p = probe;
    p.seed = probe_seed();
    p.threads = threads;
    return p;
  }

  /// Every module's invariants plus the cross-module shape contract.
  void validate() const {
    try {
      dsp.validate();
    } catch (const Error& e) {
      fail(ErrorCode::kInvalidConfig, std::string("dsp: ") + e.what());
    }
    require(target_rms > 0.0, ErrorCode::kInvalidConfig, "audio.target_rms: must be positive");
    require(window_s > 0.0, ErrorCode::kInvalidConfig, "audio.window_s: must be positive");
    model.validate("model");
    train.validate("train");
    probe.validate("probe");
    const auto window = static_cast<std::size_t>(std::llround(window_s * dsp.sample_rate_hz));
    require(model.input_size == dsp.n_mels, ErrorCode::kInvalidConfig,
            "model.input_size: must equal dsp.n_mels (" + std::to_string(dsp.n_mels) + ")");
    require(model.input_size == dsp.frames_for(window), ErrorCode::kInvalidConfig,
            "model.input_size: must equal the frame count of one window (" + std::to_string(dsp.frames_for(window)) +
                ")");
  }
};

inline nlohmann::json to_json_tree(const RunConfig& c) {
  nlohmann::json train = c.train;
  train.erase("seed");
  return {{"seed", c.seed},
          {"threads", c.threads},
          {"dsp", c.dsp},
          {"audio", {{"target_rms", c.target_rms}, {"window_s", c.window_s}}},
          {"model", c.model},
          {"train", train},
          {"probe", c.probe},
          {"embed", {{"pooling", to_string(c.pooling)}, {"branch", to_string(c.branch)}}}};
}

inline RunConfig from_json_tree(const nlohmann::json& j) {
  RunConfig c;
  try {
    c.seed = j.at("seed").get<std::uint64_t>();
    c.threads = j.at("threads").get<std::size_t>();
    c.dsp = j.at("dsp").get<SpectrogramParams>();
    c.target_rms = j.at("audio").at("target_rms").get<double>();
    c.window_s = j.at("audio").at("window_s").get<double>();
    c.model = j.at("model").get<ModelConfig>();
    c.train = j.at("train").get<TrainConfig>();
    c.probe = j.at("probe").get<ProbeConfig>();
    c.pooling = parse_pooling(j.at("embed").at("pooling").get<std::string>());
    c.branch = parse_branch(j.at("embed").at("branch").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidConfig, std::string("config: ") + e.what());
  }
  return c;
}

namespace run_config_detail {

inline void collect_leaves(const nlohmann::json& j, const std::string& prefix,
                           std::vector<std::pair<std::string, nlohmann::json>>& out) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it)
      collect_leaves(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
  } else {
    out.emplace_back(prefix, j);
  }
}

inline nlohmann::json::json_pointer pointer(const std::string& dotted) {
  std::string p;
  std::size_t start = 0;
  while (start <= dotted.size()) {
    const auto end = dotted.find('.', start);
    p += "/" + dotted.substr(start, end == std::string::npos ? std::string::npos : end - start);
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return nlohmann::json::json_pointer(p);
}

/// Type check against the default: numbers may change kind (int <-> float
/// is caught later by the typed parse), everything else must match.
inline bool compatible(const nlohmann::json& def, const nlohmann::json& v) {
  if (def.is_number()) return v.is_number();
  if (def.is_null()) return true;
  return def.type() == v.type();
}

}  // namespace run_config_detail

/// Builds a RunConfig from defaults, then an optional JSON file, then flag
/// overrides (dotted path -> JSON value). Unknown keys are rejected with
/// their path. The result is validated.
class RunConfigBuilder {
 public:
  RunConfigBuilder() : tree_(to_json_tree(RunConfig{})) {
    std::vector<std::pair<std::string, nlohmann::json>> leaves;
    run_config_detail::collect_leaves(tree_, "", leaves);
    for (const auto& [path, v] : leaves) provenance_[path] = Provenance::kDefault;
  }

  /// Starts from a model preset other than the default.
  RunConfigBuilder& base_model(const ModelConfig& model) {
    tree_["model"] = model;
    return *this;
  }

  RunConfigBuilder& merge(const nlohmann::json& j, Provenance source) {
    require(j.is_object(), ErrorCode::kInvalidConfig, "config: top level must be a JSON object");
    std::vector<std::pair<std::string, nlohmann::json>> leaves;
    run_config_detail::collect_leaves(j, "", leaves);
    for (const auto& [path, value] : leaves) {
      if (path == "_provenance" || path.rfind("_provenance.", 0) == 0) continue;
      set(path, value, source);
    }
    return *this;
  }

  RunConfigBuilder& merge_file(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorCode::kInvalidConfig, "config: cannot open " + path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kInvalidConfig, "config: " + path + " is not valid JSON: " + e.what());
    }
    return merge(j, Provenance::kFile);
  }

  RunConfigBuilder& set(const std::string& path, const nlohmann::json& value, Provenance source = Provenance::kFlag) {
    const auto it = provenance_.find(path);
    require(it != provenance_.end(), ErrorCode::kInvalidConfig, path + ": unknown configuration key");
    const auto ptr = run_config_detail::pointer(path);
    require(run_config_detail::compatible(tree_.at(ptr), value), ErrorCode::kInvalidConfig,
            path + ": expected a value of type " + std::string(tree_.at(ptr).type_name()));
    tree_[ptr] = value;
    it->second = source;
    return *this;
  }

  /// `key=value`; the value is parsed as JSON, falling back to a string.
  RunConfigBuilder& set_text(const std::string& assignment) {
    const auto eq = assignment.find('=');
    require(eq != std::string::npos && eq > 0, ErrorCode::kInvalidConfig,
            "--set expects key=value, got '" + assignment + "'");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    nlohmann::json v;
    try {
      v = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception&) {
      v = text;
    }
    return set(key, v, Provenance::kFlag);
  }

  RunConfig build() const {
    RunConfig c = from_json_tree(tree_);
    c.provenance = provenance_;
    c.validate();
    return c;
  }

  const nlohmann::json& tree() const { return tree_; }

 private:
  nlohmann::json tree_;
  std::map<std::string, Provenance> provenance_;
};

/// The merged tree plus a `_provenance` map; loadable again with --config.
inline nlohmann::json effective_config_json(const RunConfig& c) {
  nlohmann::json j = to_json_tree(c);
  nlohmann::json prov = nlohmann::json::object();
  for (const auto& [path, source] : c.provenance) prov[path] = to_string(source);
  j["_provenance"] = prov;
  return j;
}

}  // namespace impact

#endif  // IMPACT_RUN_CONFIG_HPP
