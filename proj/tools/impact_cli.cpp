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

// impact: command-line front end for the pretraining and benchmark pipeline.

#include <unistd.h>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "impact/pipeline.hpp"
#include "impact/selftest.hpp"

namespace {

using namespace impact;

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidConfig:
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kInvalidSpec:
    case ErrorCode::kUnknownCommand:
      return kExitValidation;
    default:
      return kExitRuntime;
  }
}

/// Options every subcommand accepts.
struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::vector<std::string> sets;
  bool force = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON run configuration (flags override it)");
    app->add_option("--seed", seed, "root seed; every module seed derives from it");
    app->add_option("--threads", threads, "worker cap (default: IMPACT_THREADS, else all cores)");
    app->add_option("--set", sets, "override any config field, e.g. --set train.epochs=3")->take_all();
    app->add_flag("--force", force, "overwrite existing outputs");
  }
};

/// defaults -> base model -> config file -> typed flags -> --set.
class ConfigAssembly {
 public:
  explicit ConfigAssembly(const Common& common) : common_(common) {}

  ConfigAssembly& base_model(const ModelConfig& m) {
    builder_.base_model(m);
    return *this;
  }

  template <class V>
  ConfigAssembly& flag(const std::string& path, const std::optional<V>& v) {
    if (v) flags_.emplace_back(path, nlohmann::json(*v));
    return *this;
  }

  RunConfig build() {
    if (!common_.config_path.empty()) builder_.merge_file(common_.config_path);
    if (common_.seed) builder_.set("seed", *common_.seed);
    if (common_.threads) builder_.set("threads", *common_.threads);
    for (const auto& [path, value] : flags_) builder_.set(path, value);
    for (const auto& s : common_.sets) builder_.set_text(s);
    return builder_.build();
  }

 private:
  const Common& common_;
  RunConfigBuilder builder_;
  std::vector<std::pair<std::string, nlohmann::json>> flags_;
};

ModelConfig model_preset(const std::string& name) {
  if (name == "default") return ModelConfig{};
  if (name == "quarter") return ModelConfig::quarter_scale();
  if (name == "micro") return ModelConfig::micro();
  fail(ErrorCode::kInvalidConfig, "model preset: expected default, quarter or micro, got '" + name + "'");
}

std::string command_line(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) {
    if (i) s += ' ';
    s += argv[i];
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"impact: self-supervised audio pretraining and probe benchmark for industrial machine sounds"};
  app.set_version_flag("--version", IMPACT_VERSION);
  app.require_subcommand(1);
  app.fallthrough(false);
  const std::string cmdline = command_line(argc, argv);

  // ingest
  Common ingest_common;
  std::string ingest_manifest, ingest_out;
  auto* ingest = app.add_subcommand("ingest", "normalize and segment recordings listed in a manifest");
  ingest->add_option("--manifest", ingest_manifest, "manifest CSV (path,machine,class,sensor)")->required();
  ingest->add_option("--out", ingest_out, "output directory")->required();
  ingest_common.attach(ingest);

  // synth
  Common synth_common;
  std::string synth_preset = "coldspray4", synth_out;
  int synth_clips = 50;
  auto* synth = app.add_subcommand("synth", "generate a labeled synthetic machine-sound corpus");
  synth->add_option("--preset", synth_preset, "built-in preset name or preset JSON file")->capture_default_str();
  synth->add_option("--clips", synth_clips, "clips per class")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--out", synth_out, "output directory")->required();
  synth_common.attach(synth);

  // pretrain
  Common pre_common;
  std::string pre_data, pre_out;
  std::optional<std::string> pre_model;
  std::optional<int> pre_epochs, pre_batch;
  std::optional<double> pre_mask, pre_lambda, pre_lr, pre_ema;
  auto* pre = app.add_subcommand("pretrain", "student-teacher pretraining on a directory of recordings");
  pre->add_option("--data", pre_data, "data directory or manifest")->required();
  pre->add_option("--out", pre_out, "checkpoint directory")->required();
  pre->add_option("--model", pre_model, "model preset: default, quarter or micro");
  pre->add_option("--epochs", pre_epochs, "train.epochs");
  pre->add_option("--batch-size", pre_batch, "train.batch_size");
  pre->add_option("--mask-ratio", pre_mask, "train.mask_ratio");
  pre->add_option("--lambda", pre_lambda, "train.lambda_u");
  pre->add_option("--lr", pre_lr, "train.learning_rate");
  pre->add_option("--ema-decay", pre_ema, "train.ema_decay");
  pre_common.attach(pre);

  // embed
  Common emb_common;
  std::string emb_ckpt, emb_data, emb_out;
  std::optional<std::string> emb_pooling, emb_branch;
  auto* emb = app.add_subcommand("embed", "frozen-encoder embeddings, one row per recording");
  emb->add_option("--ckpt", emb_ckpt, "checkpoint file")->required();
  emb->add_option("--data", emb_data, "data directory or manifest")->required();
  emb->add_option("--out", emb_out, "output CSV (clip_id,dim0..dimN)")->required();
  emb->add_option("--pooling", emb_pooling, "cls, mean or cls+mean");
  emb->add_option("--branch", emb_branch, "student or teacher");
  emb_common.attach(emb);

  // probe
  Common probe_common;
  std::string probe_emb, probe_manifest, probe_out;
  std::optional<int> probe_repeats;
  bool probe_linear = false, probe_weighted = false;
  auto* probe = app.add_subcommand("probe", "repeated stratified-split probe benchmark");
  probe->add_option("--embeddings", probe_emb, "embedding CSV from `embed`")->required();
  probe->add_option("--manifest", probe_manifest, "manifest with machine and class labels")->required();
  probe->add_option("--repeats", probe_repeats, "probe.n_repeats");
  probe->add_option("--out", probe_out, "output directory")->required();
  probe->add_flag("--linear-only", probe_linear, "linear head instead of the 256-unit hidden layer");
  probe->add_flag("--weighted", probe_weighted, "support-weighted instead of macro F1");
  probe_common.attach(probe);

  // analyze
  Common an_common;
  std::string an_in, an_out;
  int an_segment = 2048;
  auto* an = app.add_subcommand("analyze", "mean FFT magnitude spectrum over fixed segments");
  an->add_option("--in", an_in, "WAV file")->required();
  an->add_option("--out", an_out, "output CSV (freq_hz,mean_db,std_db)")->required();
  an->add_option("--segment", an_segment, "segment length in samples")->capture_default_str()->check(CLI::PositiveNumber);
  an_common.attach(an);

  // selftest
  Common st_common;
  std::string st_out;
  auto* st = app.add_subcommand("selftest", "invariant checks end to end on a generated micro-corpus");
  st->add_option("--out", st_out, "keep the work directory here (default: a temporary directory)");
  st_common.attach(st);

  if (argc > 1 && argv[1][0] != '-') {
    bool known = false;
    for (const auto* sub : app.get_subcommands({})) known |= sub->check_name(argv[1]);
    if (!known) {
      std::cerr << "error: unknown subcommand '" << argv[1] << "'\n\n" << app.help();
      return kExitValidation;
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    if (app.get_subcommands().empty()) std::cerr << "\n" << app.help();
    return kExitValidation;
  }

  try {
    if (*ingest) {
      const RunConfig cfg = ConfigAssembly(ingest_common).build();
      const fs::path out(ingest_out);
      prepare_output_dir(out, ingest_common.force);
      write_run_metadata(out, cfg, cmdline);
      const auto r = run_ingest(ingest_manifest, out, cfg);
      std::cout << "ingested " << r.recordings << " recordings into " << r.clips << " clips\n";
    } else if (*synth) {
      const RunConfig cfg = ConfigAssembly(synth_common).build();
      const CorpusPreset preset = load_preset(synth_preset);
      const fs::path out(synth_out);
      prepare_output_dir(out, synth_common.force);
      write_run_metadata(out, cfg, cmdline);
      write_text(out / "preset.json", nlohmann::json(preset).dump(2) + "\n");
      const auto m = make_corpus(preset, synth_clips, out.string(), cfg.seed, cfg.threads);
      std::cout << "wrote " << m.entries.size() << " clips and " << (out / "manifest.csv").string() << "\n";
    } else if (*pre) {
      ConfigAssembly assembly(pre_common);
      if (pre_model) assembly.base_model(model_preset(*pre_model));
      assembly.flag("train.epochs", pre_epochs)
          .flag("train.batch_size", pre_batch)
          .flag("train.mask_ratio", pre_mask)
          .flag("train.lambda_u", pre_lambda)
          .flag("train.learning_rate", pre_lr)
          .flag("train.ema_decay", pre_ema);
      const RunConfig cfg = assembly.build();
      const fs::path out(pre_out);
      prepare_output_dir(out, pre_common.force);
      write_run_metadata(out, cfg, cmdline);
      const auto data = prepare_dataset(list_dataset(pre_data), cfg);
      const auto corpus = flatten_segments(data);
      std::cout << "pretraining on " << corpus.size() << " clips from " << data.size() << " recordings, "
                << param_count(init_parameters<float>(cfg.model, 0)) << " parameters\n";
      run_pretrain(corpus, out, cfg, &std::cout);
      std::cout << "final checkpoint " << (out / "final.ckpt").string() << "\n";
    } else if (*emb) {
      const ModelState state = load_checkpoint(emb_ckpt);
      ConfigAssembly assembly(emb_common);
      assembly.base_model(state.student.config);
      assembly.flag("embed.pooling", emb_pooling).flag("embed.branch", emb_branch);
      const RunConfig cfg = assembly.build();
      require(cfg.model == state.student.config, ErrorCode::kInvalidConfig,
              "model: configuration differs from the one stored in " + emb_ckpt);
      const fs::path out(emb_out);
      prepare_output_file(out, emb_common.force);
      const fs::path meta_dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
      write_run_metadata(meta_dir, cfg, cmdline, out.stem().string() + ".");
      const auto data = prepare_dataset(list_dataset(emb_data), cfg);
      const auto& params = cfg.branch == Branch::kStudent ? state.student : state.teacher;
      const auto table = embed_recordings(params, data, cfg.pooling);
      write_embeddings_csv(out.string(), table);
      std::cout << "wrote " << table.clip_ids.size() << " embeddings of dimension " << table.values.cols() << "\n";
    } else if (*probe) {
      ConfigAssembly assembly(probe_common);
      assembly.flag("probe.n_repeats", probe_repeats);
      if (probe_linear) assembly.flag("probe.linear_only", std::optional<bool>(true));
      if (probe_weighted) assembly.flag("probe.average", std::optional<std::string>("weighted"));
      const RunConfig cfg = assembly.build();
      const fs::path out(probe_out);
      prepare_output_dir(out, probe_common.force);
      write_run_metadata(out, cfg, cmdline);
      const auto table = read_embeddings_csv(probe_emb);
      const auto sets = labeled_sets(table, load_manifest(probe_manifest));
      const auto reports = run_benchmark(sets, cfg.effective_probe());
      write_probe_outputs(out, reports);
      for (const auto& r : reports)
        std::cout << r.machine << ": F1 " << r.machine_f1.mean << " +- " << r.machine_f1.std << " over "
                  << r.n_repeats << " repeats\n";
    } else if (*an) {
      const RunConfig cfg = ConfigAssembly(an_common).build();
      const fs::path out(an_out);
      prepare_output_file(out, an_common.force);
      const fs::path meta_dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
      write_run_metadata(meta_dir, cfg, cmdline, out.stem().string() + ".");
      const auto ms = run_analyze(an_in, out.string(), an_segment);
      const auto k = ms.argmax();
      std::cout << "segments " << ms.n_segments << ", peak bin " << k << " (" << ms.freqs_hz[k] << " Hz), "
                << ms.mean_db[k] << " dB mean, " << ms.std_db[k] << " dB std\n";
    } else if (*st) {
      const RunConfig cfg = ConfigAssembly(st_common).build();
      const bool temporary = st_out.empty();
      const fs::path work = temporary ? fs::temp_directory_path() / ("impact-selftest-" + std::to_string(::getpid()))
                                      : fs::path(st_out);
      prepare_output_dir(work, st_common.force || temporary);
      write_run_metadata(work, cfg, cmdline);
      const auto results = run_selftest(work, cfg.seed, cfg.threads, &std::cout);
      if (temporary) fs::remove_all(work);
      std::size_t failed = 0;
      for (const auto& r : results) failed += !r.ok;
      std::cout << results.size() - failed << "/" << results.size() << " checks passed\n";
      return failed ? kExitRuntime : kExitOk;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
