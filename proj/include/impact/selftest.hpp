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

#ifndef IMPACT_SELFTEST_HPP
#define IMPACT_SELFTEST_HPP

// End-to-end invariant checks on a generated micro-corpus. Cheap enough to
// run from the CLI in well under a minute.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "impact/gradcheck.hpp"
#include "impact/pipeline.hpp"

namespace impact {

struct CheckResult {
  std::string name;
  bool ok = false;
  std::string detail;
  double seconds = 0.0;
};

namespace selftest_detail {

inline std::vector<int> random_labels(Rng& rng, std::size_t n, int classes) {
  std::vector<int> v(n);
  for (auto& x : v) x = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(classes));
  return v;
}

/// Textbook F1 from an explicit confusion matrix.
inline std::vector<double> brute_force_f1(const std::vector<int>& preds, const std::vector<int>& truth, int classes) {
  std::vector<std::vector<long>> cm(static_cast<std::size_t>(classes), std::vector<long>(static_cast<std::size_t>(classes)));
  for (std::size_t i = 0; i < preds.size(); ++i) ++cm[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(preds[i])];
  std::vector<double> f1(static_cast<std::size_t>(classes));
  for (int c = 0; c < classes; ++c) {
    long tp = cm[c][c], fp = 0, fn = 0;
    for (int k = 0; k < classes; ++k) {
      if (k == c) continue;
      fp += cm[k][c];
      fn += cm[c][k];
    }
    f1[c] = (2 * tp + fp + fn) ? 2.0 * tp / static_cast<double>(2 * tp + fp + fn) : 0.0;
  }
  return f1;
}

}  // namespace selftest_detail

/// Runs every check; `work_dir` receives the micro-corpus and run outputs.
inline std::vector<CheckResult> run_selftest(const fs::path& work_dir, std::uint64_t seed, std::size_t threads,
                                             std::ostream* log = nullptr) {
  std::vector<CheckResult> results;
  auto check = [&](const std::string& name, const std::function<std::string()>& body) {
    CheckResult r;
    r.name = name;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      r.detail = body();
      r.ok = r.detail.rfind("FAIL", 0) != 0;
    } catch (const std::exception& e) {
      r.ok = false;
      r.detail = std::string("exception: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (log) *log << (r.ok ? "PASS " : "FAIL ") << r.name << " (" << r.detail << ")\n" << std::flush;
    results.push_back(r);
  };
  auto verdict = [](bool ok, const std::string& detail) { return ok ? detail : "FAIL: " + detail; };

  RunConfig cfg;
  cfg.seed = seed;
  cfg.threads = threads;
  cfg.model = ModelConfig::micro();
  cfg.train.epochs = 2;
  cfg.train.batch_size = 8;
  cfg.probe.n_repeats = 3;
  cfg.probe.epochs = 50;

  const fs::path corpus_dir = work_dir / "corpus";
  std::vector<PreparedRecording> data;

  check("synth micro-corpus", [&] {
    const auto m = make_corpus(coldspray4(), 6, corpus_dir.string(), seed, threads);
    data = prepare_dataset(list_dataset(corpus_dir.string()), cfg);
    double peak = 0.0;
    for (const auto& e : m.entries)
      for (double s : read_audio((corpus_dir / e.path).string()).samples) peak = std::max(peak, std::abs(s));
    return verdict(m.entries.size() == 24 && data.size() == 24 && peak <= kSynthPeak + 1e-6,
                   std::to_string(m.entries.size()) + " clips, peak " + std::to_string(peak));
  });

  check("log-mel and reconstruction shapes", [&] {
    const auto& s = data.at(0).segments.at(0);
    const auto params = init_parameters<float>(ModelConfig{}, seed);
    const auto masks = std::vector<std::vector<bool>>{std::vector<bool>(16, false)};
    const auto out = student_forward<float>(params, Batch<float>{s}, masks, BnMode::kEval, nullptr);
    const bool ok = s.size() == 128 * 128 && out.recon[0].size() == 128 * 128;
    return verdict(ok, "spectrogram " + std::to_string(s.size()) + " values, reconstruction " +
                           std::to_string(out.recon[0].size()));
  });

  check("loss algebra", [&] {
    const bool ok = std::abs(total_loss(1.0, 2.0, 0.1) - 1.2) <= 1e-12 && std::abs(huber(1.0, 1.0) - 0.5) <= 1e-12 &&
                    std::abs(huber(2.0, 1.0) - 1.5) <= 1e-12;
    return verdict(ok, "total(1,2,0.1), huber(1), huber(2)");
  });

  check("masking law", [&] {
    Rng rng(derive_seed(seed, 20));
    std::vector<int> hits(16, 0);
    bool counts_ok = true;
    const int draws = 2000;
    for (int d = 0; d < draws; ++d) {
      const auto m = sample_mask(16, 0.7, rng);
      counts_ok &= std::count(m.begin(), m.end(), true) == 11;
      for (int i = 0; i < 16; ++i) hits[i] += m[i];
    }
    double worst = 0.0;
    for (int h : hits) worst = std::max(worst, std::abs(h / double(draws) - 11.0 / 16.0));
    return verdict(counts_ok && worst < 0.05, "max frequency deviation " + std::to_string(worst));
  });

  check("EMA contract", [&] {
    const auto student = init_parameters<float>(ModelConfig::tiny(), 1);
    auto teacher = init_parameters<float>(ModelConfig::tiny(), 2);
    const auto before = teacher;
    ema_update(teacher, student, 0.9);
    double worst = 0.0;
    const auto t = tensor_list(std::as_const(teacher)), s = tensor_list(student), b = tensor_list(before);
    std::size_t i = 0;
    teacher.visit([&](const std::string&, const Mat<float>&, TensorRole role) {
      if (role == TensorRole::kParameter || role == TensorRole::kWeight) {
        const Mat<double> want = 0.9 * b[i]->cast<double>().array() + 0.1 * s[i]->cast<double>().array();
        worst = std::max(worst, (t[i]->cast<double>() - want).cwiseAbs().maxCoeff());
      }
      ++i;
    });
    auto copy = before;
    ema_update(copy, student, 0.0);
    bool exact = true;
    const auto c = tensor_list(std::as_const(copy));
    for (std::size_t k = 0; k < c.size(); ++k) exact &= (*c[k] - *s[k]).cwiseAbs().maxCoeff() == 0.0f;
    return verdict(worst <= 1e-7 && exact, "max convex-combination error " + std::to_string(worst));
  });

  check("gradient check (tiny config)", [&] {
    GradCheckOptions o;
    o.seed = seed;
    double worst = 0.0;
    bool ok = true;
    for (const auto& r : gradient_check(o)) {
      worst = std::max(worst, r.rel_error);
      ok &= r.ok;
    }
    return verdict(ok, "worst relative error " + std::to_string(worst));
  });

  check("F1 against brute force", [&] {
    Rng rng(derive_seed(seed, 21));
    double worst = 0.0;
    for (int t = 0; t < 200; ++t) {
      const int classes = 2 + static_cast<int>(rng.next_u64() % 4);
      const std::size_t n = 1 + rng.next_u64() % 50;
      const auto truth = selftest_detail::random_labels(rng, n, classes);
      const auto preds = selftest_detail::random_labels(rng, n, classes);
      const auto a = f1_per_class(preds, truth, classes);
      const auto b = selftest_detail::brute_force_f1(preds, truth, classes);
      for (int c = 0; c < classes; ++c) worst = std::max(worst, std::abs(a[c] - b[c]));
    }
    return verdict(worst <= 1e-12, "max deviation " + std::to_string(worst));
  });

  const fs::path run_a = work_dir / "pretrain_a", run_b = work_dir / "pretrain_b";
  PretrainResult trained;

  check("pretrain, checkpoint round trip, determinism", [&] {
    const auto corpus = flatten_segments(data);
    prepare_output_dir(run_a, true);
    prepare_output_dir(run_b, true);
    trained = run_pretrain(corpus, run_a, cfg);
    const auto again = run_pretrain(corpus, run_b, cfg);
    bool finite = true, same_curve = true;
    for (std::size_t e = 0; e < trained.curve.size(); ++e) {
      finite &= std::isfinite(trained.curve[e].loss.total);
      same_curve &= trained.curve[e].loss.total == again.curve[e].loss.total;
    }
    const auto bytes_a = encode_archive(read_archive((run_a / "final.ckpt").string()));
    const auto bytes_b = encode_archive(read_archive((run_b / "final.ckpt").string()));
    const auto restored = load_checkpoint((run_a / "final.ckpt").string());
    const auto x = tensor_list(restored.student);
    const auto y = tensor_list(std::as_const(trained.state.student));
    bool round_trip = restored.epoch == trained.state.epoch;
    for (std::size_t k = 0; k < x.size(); ++k) round_trip &= *x[k] == *y[k];
    return verdict(finite && same_curve && bytes_a == bytes_b && round_trip,
                   "epochs " + std::to_string(trained.curve.size()) + ", identical runs " +
                       (same_curve && bytes_a == bytes_b ? "yes" : "no") + ", round trip " +
                       (round_trip ? "exact" : "differs"));
  });

  check("embed and probe", [&] {
    const auto table = embed_recordings(trained.state.student, data, cfg.pooling);
    const auto sets = labeled_sets(table, load_manifest((corpus_dir / "manifest.csv").string()));
    const auto reports = run_benchmark(sets, cfg.effective_probe());
    const fs::path out = work_dir / "probe";
    prepare_output_dir(out, true);
    write_probe_outputs(out, reports);
    bool ok = reports.size() == 1 && reports[0].repeats.size() == 3;
    for (const auto& r : reports) {
      ok &= r.machine_f1.mean >= 0.0 && r.machine_f1.mean <= 1.0 && r.machine_f1.std >= 0.0;
      for (const auto& rep : r.repeats) {
        for (long n : rep.train_per_class) ok &= n == 1;  // round(0.2 * 6)
        for (long n : rep.test_per_class) ok &= n == 5;
      }
      ok &= r.confusion.sum() == 3 * 20;
    }
    return verdict(ok, "macro F1 " + std::to_string(reports.at(0).machine_f1.mean));
  });

  check("analyze pure tone", [&] {
    AudioClip tone;
    tone.samples.resize(48000);
    // 2048 samples hold exactly 40 periods; tiling one block keeps the tone
    // continuous and makes every segment bitwise identical.
    for (std::size_t i = 0; i < tone.samples.size(); ++i)
      tone.samples[i] = 0.5 * std::sin(2.0 * M_PI * 937.5 * static_cast<double>(i % 2048) / 48000.0);
    const auto wav = (work_dir / "tone.wav").string();
    write_wav(wav, tone, WavEncoding::kFloat32);
    const auto ms = run_analyze(wav, (work_dir / "tone_spectrum.csv").string());
    double max_std = 0.0;
    for (double s : ms.std_db) max_std = std::max(max_std, s);
    return verdict(ms.argmax() == 40 && max_std < 1e-9,
                   "argmax bin " + std::to_string(ms.argmax()) + ", max std " + std::to_string(max_std) + " dB");
  });

  return results;
}

}  // namespace impact

#endif  // IMPACT_SELFTEST_HPP
