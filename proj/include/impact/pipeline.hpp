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

#ifndef IMPACT_PIPELINE_HPP
#define IMPACT_PIPELINE_HPP

// Subcommand bodies shared by the CLI, the acceptance suite and selftest.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

#include "impact/audio_io.hpp"
#include "impact/checkpoint.hpp"
#include "impact/csv.hpp"
#include "impact/dsp.hpp"
#include "impact/error.hpp"
#include "impact/parallel.hpp"
#include "impact/probe_bench.hpp"
#include "impact/run_config.hpp"
#include "impact/ssl_train.hpp"
#include "impact/synthgen.hpp"

#ifndef IMPACT_VERSION
#define IMPACT_VERSION "0.0.0"
#endif

namespace impact {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Output handling

/// Creates `dir` if needed. An existing non-empty directory needs `force`.
inline void prepare_output_dir(const fs::path& dir, bool force) {
  std::error_code ec;
  if (fs::exists(dir, ec)) {
    require(fs::is_directory(dir, ec), ErrorCode::kInvalidArgument, dir.string() + " exists and is not a directory");
    require(force || fs::is_empty(dir, ec), ErrorCode::kInvalidArgument,
            dir.string() + " is not empty; pass --force to overwrite");
  }
  fs::create_directories(dir, ec);
  require(!ec, ErrorCode::kIoFailure, "cannot create " + dir.string() + ": " + ec.message());
}

/// For single-file outputs: the file must not exist unless `force`.
inline void prepare_output_file(const fs::path& file, bool force) {
  std::error_code ec;
  require(force || !fs::exists(file, ec), ErrorCode::kInvalidArgument,
          file.string() + " exists; pass --force to overwrite");
  if (file.has_parent_path()) {
    fs::create_directories(file.parent_path(), ec);
    require(!ec, ErrorCode::kIoFailure, "cannot create " + file.parent_path().string() + ": " + ec.message());
  }
}

inline std::string versions_text(const std::string& command) {
  std::string s;
  s += "impact " IMPACT_VERSION "\n";
  s += "command " + command + "\n";
  s += "eigen " + std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
       std::to_string(EIGEN_MINOR_VERSION) + "\n";
  s += "nlohmann_json " + std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
       std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." + std::to_string(NLOHMANN_JSON_VERSION_PATCH) + "\n";
#if defined(__clang__)
  s += "compiler clang " __clang_version__ "\n";
#elif defined(__GNUC__)
  s += "compiler gcc " __VERSION__ "\n";
#endif
  s += "checkpoint_format " + std::string(kCheckpointVersion) + "\n";
  return s;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  require(out.good(), ErrorCode::kIoFailure, "cannot write " + path.string());
  out << text;
  out.close();
  require(!out.fail(), ErrorCode::kIoFailure, "write failed for " + path.string());
}

/// effective_config.json and versions.txt. `prefix` is prepended to both
/// names (used when the run's output is a single file).
inline void write_run_metadata(const fs::path& dir, const RunConfig& cfg, const std::string& command,
                               const std::string& prefix = {}) {
  write_text(dir / (prefix + "effective_config.json"), effective_config_json(cfg).dump(2) + "\n");
  write_text(dir / (prefix + "versions.txt"), versions_text(command));
}

// ---------------------------------------------------------------------------
// Datasets

struct DatasetItem {
  std::string clip_id;  // recording stem
  std::string machine;
  std::string class_id;
  std::string path;  // resolved audio path
};

/// A data source is a manifest CSV, or a directory holding index.csv,
/// manifest.csv, or plain .wav files (in that order of preference).
inline std::vector<DatasetItem> list_dataset(const std::string& source) {
  fs::path manifest_path;
  if (fs::is_regular_file(source)) {
    manifest_path = source;
  } else {
    require(fs::is_directory(source), ErrorCode::kUnreadableFile, "data source " + source + " does not exist");
    for (const char* name : {"index.csv", "manifest.csv"}) {
      if (fs::is_regular_file(fs::path(source) / name)) {
        manifest_path = fs::path(source) / name;
        break;
      }
    }
  }
  std::vector<DatasetItem> items;
  if (!manifest_path.empty()) {
    const auto manifest = load_manifest(manifest_path.string());
    for (const auto& e : manifest.entries)
      items.push_back({e.clip_id(), e.machine, e.class_id, resolve_entry_path(manifest_path.string(), e)});
  } else {
    std::vector<fs::path> wavs;
    for (const auto& entry : fs::directory_iterator(source))
      if (entry.is_regular_file() && entry.path().extension() == ".wav") wavs.push_back(entry.path());
    std::sort(wavs.begin(), wavs.end());
    for (const auto& p : wavs) items.push_back({p.stem().string(), "unknown", "unknown", p.string()});
  }
  require(!items.empty(), ErrorCode::kInvalidArgument, "data source " + source + " lists no recordings");
  std::set<std::string> ids;
  for (const auto& it : items)
    require(ids.insert(it.clip_id).second, ErrorCode::kInvalidArgument, "duplicate clip id '" + it.clip_id + "'");
  return items;
}

struct PreparedRecording {
  DatasetItem item;
  std::vector<Spectrogram> segments;
};

/// Reads, normalizes and segments each recording, then computes one
/// log-Mel spectrogram per segment. Parallel over recordings.
inline std::vector<PreparedRecording> prepare_dataset(const std::vector<DatasetItem>& items, const RunConfig& cfg) {
  std::vector<PreparedRecording> out(items.size());
  const LogMelFrontend frontend(cfg.dsp);
  parallel_for(items.size(), cfg.threads, [&](std::size_t i) {
    const AudioClip clip = read_audio(items[i].path);
    const auto pieces = prepare_recording(clip, cfg.prepare_options());
    require(!pieces.empty(), ErrorCode::kTooShort, "'" + items[i].path + "' is shorter than one window");
    out[i].item = items[i];
    for (const auto& piece : pieces) out[i].segments.push_back(to_model_input(frontend(piece)));
  });
  return out;
}

// ---------------------------------------------------------------------------
// ingest

struct IngestResult {
  std::size_t recordings = 0;
  std::size_t clips = 0;
};

/// Writes <out>/clips/<stem>_sNNN.wav (float32) and <out>/index.csv, which
/// is itself a manifest over the segment files.
inline IngestResult run_ingest(const std::string& manifest_path, const fs::path& out, const RunConfig& cfg) {
  const auto manifest = load_manifest(manifest_path);
  require(!manifest.entries.empty(), ErrorCode::kInvalidArgument, "manifest " + manifest_path + " is empty");
  fs::create_directories(out / "clips");
  std::vector<std::vector<ManifestEntry>> rows(manifest.entries.size());
  parallel_for(manifest.entries.size(), cfg.threads, [&](std::size_t i) {
    const auto& e = manifest.entries[i];
    const AudioClip clip = read_audio(resolve_entry_path(manifest_path, e));
    const auto pieces = prepare_recording(clip, cfg.prepare_options());
    for (std::size_t k = 0; k < pieces.size(); ++k) {
      char suffix[16];
      std::snprintf(suffix, sizeof suffix, "_s%03zu", k);
      const std::string rel = "clips/" + e.clip_id() + suffix + ".wav";
      write_wav((out / rel).string(), pieces[k], WavEncoding::kFloat32);
      rows[i].push_back({rel, e.machine, e.class_id, e.sensor});
    }
  });
  Manifest index;
  IngestResult r;
  r.recordings = manifest.entries.size();
  for (auto& group : rows)
    for (auto& row : group) index.add(std::move(row));
  r.clips = index.entries.size();
  save_manifest(index, (out / "index.csv").string());
  return r;
}

// ---------------------------------------------------------------------------
// pretrain

inline void write_loss_curve_header(csv::Writer& w) { w.row({"epoch", "frame_loss", "utt_loss", "total_loss"}); }

inline void write_loss_curve_row(csv::Writer& w, const EpochLosses& e) {
  w.row({std::to_string(e.epoch), csv::format_double(e.loss.frame), csv::format_double(e.loss.utterance),
         csv::format_double(e.loss.total)});
  w.stream().flush();
}

inline nlohmann::json checkpoint_extra(const RunConfig& cfg) {
  return {{"dsp", cfg.dsp}, {"audio", {{"target_rms", cfg.target_rms}, {"window_s", cfg.window_s}}}};
}

/// Checkpoints go to <out>/epoch_NNN.ckpt after every epoch and
/// <out>/final.ckpt at the end; the loss curve to <out>/loss_curve.csv.
inline PretrainResult run_pretrain(const std::vector<Spectrogram>& corpus, const fs::path& out, const RunConfig& cfg,
                                   std::ostream* log = nullptr) {
  const TrainConfig train = cfg.effective_train();
  csv::Writer curve((out / "loss_curve.csv").string());
  write_loss_curve_header(curve);
  const auto extra = checkpoint_extra(cfg);
  auto result = pretrain(corpus, cfg.model, train, [&](const ModelState& state, const EpochLosses& e) {
    write_loss_curve_row(curve, e);
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03d.ckpt", e.epoch);
    save_checkpoint((out / name).string(), state, train, extra);
    if (log) {
      char line[160];
      std::snprintf(line, sizeof line, "epoch %d: frame %.6f utt %.6f total %.6f\n", e.epoch, e.loss.frame,
                    e.loss.utterance, e.loss.total);
      *log << line << std::flush;
    }
  });
  curve.close();
  save_checkpoint((out / "final.ckpt").string(), result.state, train, extra);
  return result;
}

inline std::vector<Spectrogram> flatten_segments(const std::vector<PreparedRecording>& data) {
  std::vector<Spectrogram> corpus;
  for (const auto& r : data)
    for (const auto& s : r.segments) corpus.push_back(s);
  return corpus;
}

// ---------------------------------------------------------------------------
// embed

struct EmbeddingTable {
  std::vector<std::string> clip_ids;
  Mat<double> values;  // [N, D]
};

/// One row per recording: the mean of its segment embeddings.
inline EmbeddingTable embed_recordings(const Parameters<float>& params, const std::vector<PreparedRecording>& data,
                                       Pooling pooling, std::size_t batch_size = 32) {
  std::vector<Spectrogram> flat;
  std::vector<std::size_t> owner;
  for (std::size_t r = 0; r < data.size(); ++r)
    for (const auto& s : data[r].segments) {
      flat.push_back(s);
      owner.push_back(r);
    }
  const int d = embedding_dim(params.config, pooling);
  EmbeddingTable table;
  table.values = Mat<double>::Zero(static_cast<Eigen::Index>(data.size()), d);
  std::vector<int> counts(data.size(), 0);
  for (std::size_t start = 0; start < flat.size(); start += batch_size) {
    const std::size_t stop = std::min(flat.size(), start + batch_size);
    const Batch<float> batch(flat.begin() + static_cast<std::ptrdiff_t>(start),
                             flat.begin() + static_cast<std::ptrdiff_t>(stop));
    const auto vecs = embed_batch(params, batch, pooling);
    for (std::size_t k = 0; k < vecs.size(); ++k) {
      const std::size_t r = owner[start + k];
      for (int j = 0; j < d; ++j) table.values(static_cast<Eigen::Index>(r), j) += vecs[k][static_cast<std::size_t>(j)];
      ++counts[r];
    }
  }
  for (std::size_t r = 0; r < data.size(); ++r) {
    table.values.row(static_cast<Eigen::Index>(r)) /= static_cast<double>(counts[r]);
    table.clip_ids.push_back(data[r].item.clip_id);
  }
  return table;
}

inline void write_embeddings_csv(const std::string& path, const EmbeddingTable& t) {
  csv::Writer w(path);
  csv::Row header{"clip_id"};
  for (Eigen::Index j = 0; j < t.values.cols(); ++j) header.push_back("dim" + std::to_string(j));
  w.row(header);
  for (std::size_t i = 0; i < t.clip_ids.size(); ++i) {
    csv::Row row{t.clip_ids[i]};
    for (Eigen::Index j = 0; j < t.values.cols(); ++j)
      row.push_back(csv::format_float(static_cast<float>(t.values(static_cast<Eigen::Index>(i), j))));
    w.row(row);
  }
  w.close();
}

inline EmbeddingTable read_embeddings_csv(const std::string& path) {
  const auto rows = csv::read_file(path);
  require(!rows.empty() && !rows.front().empty() && rows.front().front() == "clip_id", ErrorCode::kInvalidArgument,
          path + ": expected header clip_id,dim0,...");
  const std::size_t d = rows.front().size() - 1;
  require(d > 0, ErrorCode::kInvalidArgument, path + ": no embedding columns");
  EmbeddingTable t;
  t.values.resize(static_cast<Eigen::Index>(rows.size() - 1), static_cast<Eigen::Index>(d));
  for (std::size_t i = 1; i < rows.size(); ++i) {
    require(rows[i].size() == d + 1, ErrorCode::kInvalidArgument, path + ": row " + std::to_string(i) + " has the wrong width");
    t.clip_ids.push_back(rows[i][0]);
    for (std::size_t j = 0; j < d; ++j) {
      try {
        t.values(static_cast<Eigen::Index>(i - 1), static_cast<Eigen::Index>(j)) = std::stod(rows[i][j + 1]);
      } catch (const std::exception&) {
        fail(ErrorCode::kInvalidArgument, path + ": bad number '" + rows[i][j + 1] + "' in row " + std::to_string(i));
      }
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// probe

/// Joins embeddings to manifest labels by clip id and groups by machine.
/// Classes keep their order of first appearance in the manifest.
inline std::vector<LabeledEmbeddingSet> labeled_sets(const EmbeddingTable& table, const Manifest& manifest) {
  std::map<std::string, const ManifestEntry*> by_id;
  for (const auto& e : manifest.entries) by_id[e.clip_id()] = &e;
  std::vector<std::string> machines;
  std::map<std::string, std::vector<std::string>> classes;
  for (const auto& e : manifest.entries) {
    if (std::find(machines.begin(), machines.end(), e.machine) == machines.end()) machines.push_back(e.machine);
    auto& names = classes[e.machine];
    if (std::find(names.begin(), names.end(), e.class_id) == names.end()) names.push_back(e.class_id);
  }
  std::map<std::string, std::vector<std::size_t>> rows;
  for (std::size_t i = 0; i < table.clip_ids.size(); ++i) {
    const auto it = by_id.find(table.clip_ids[i]);
    require(it != by_id.end(), ErrorCode::kInvalidArgument,
            "embedding clip '" + table.clip_ids[i] + "' has no manifest entry");
    rows[it->second->machine].push_back(i);
  }
  std::vector<LabeledEmbeddingSet> sets;
  for (const auto& m : machines) {
    const auto& idx = rows[m];
    if (idx.empty()) continue;
    LabeledEmbeddingSet s;
    s.machine = m;
    s.class_names = classes[m];
    s.embeddings.resize(static_cast<Eigen::Index>(idx.size()), table.values.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      s.embeddings.row(static_cast<Eigen::Index>(k)) = table.values.row(static_cast<Eigen::Index>(idx[k]));
      const auto& names = s.class_names;
      const auto& cls = by_id[table.clip_ids[idx[k]]]->class_id;
      s.labels.push_back(static_cast<int>(std::find(names.begin(), names.end(), cls) - names.begin()));
    }
    sets.push_back(std::move(s));
  }
  return sets;
}

inline std::string safe_file_token(std::string s) {
  for (char& c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
  return s;
}

/// report.csv, machine_summary.csv, repeats.csv and confusion_<machine>.csv.
inline void write_probe_outputs(const fs::path& out, const std::vector<ProbeReport>& reports) {
  write_report_csv((out / "report.csv").string(), reports);
  write_machine_summary_csv((out / "machine_summary.csv").string(), reports);
  csv::Writer w((out / "repeats.csv").string());
  csv::Row header{"machine", "repeat", "seed", "machine_f1"};
  w.row(header);
  for (const auto& r : reports)
    for (std::size_t i = 0; i < r.repeats.size(); ++i)
      w.row({r.machine, std::to_string(i), std::to_string(r.repeats[i].seed), csv::format_double(r.repeats[i].machine_f1)});
  w.close();
  for (const auto& r : reports) write_confusion_csv((out / ("confusion_" + safe_file_token(r.machine) + ".csv")).string(), r);
}

// ---------------------------------------------------------------------------
// analyze

inline MeanSpectrum run_analyze(const std::string& wav, const std::string& out_csv, int segment_len = 2048) {
  const AudioClip clip = read_audio(wav);
  const MeanSpectrum ms = mean_spectrum(clip, segment_len);
  write_mean_spectrum_csv(ms, out_csv);
  return ms;
}

}  // namespace impact

#endif  // IMPACT_PIPELINE_HPP
