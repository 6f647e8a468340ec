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

#ifndef IMPACT_PROBE_BENCH_HPP
#define IMPACT_PROBE_BENCH_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "impact/csv.hpp"
#include "impact/error.hpp"
#include "impact/layers.hpp"
#include "impact/parallel.hpp"
#include "impact/random.hpp"
#include "impact/tensor.hpp"

namespace impact {

struct LabeledEmbeddingSet {
  Mat<double> embeddings;  // [N, D]
  std::vector<int> labels;  // indices into class_names
  std::string machine;
  std::vector<std::string> class_names;

  std::size_t size() const { return labels.size(); }
  int n_classes() const { return static_cast<int>(class_names.size()); }

  void validate() const {
    require(static_cast<std::size_t>(embeddings.rows()) == labels.size(), ErrorCode::kLengthMismatch,
            "machine '" + machine + "': embedding rows and labels differ in count");
    require(embeddings.cols() > 0, ErrorCode::kInvalidArgument, "machine '" + machine + "': empty embeddings");
    std::set<int> distinct;
    for (int l : labels) {
      require(l >= 0 && l < n_classes(), ErrorCode::kInvalidArgument,
              "machine '" + machine + "': label out of range");
      distinct.insert(l);
    }
    require(distinct.size() >= 2, ErrorCode::kClassTooSmall, "machine '" + machine + "' needs at least two classes");
    require(embeddings.allFinite(), ErrorCode::kInvalidArgument, "machine '" + machine + "': non-finite embeddings");
  }
};

enum class F1Average { kMacro, kWeighted };

struct ProbeConfig {
  int hidden = 256;
  int epochs = 200;
  double learning_rate = 1e-3;
  double train_fraction = 0.2;
  int n_repeats = 10;
  bool linear_only = false;
  bool standardize = true;  // z-score features with training-split statistics
  F1Average average = F1Average::kMacro;
  std::uint64_t seed = 0;
  std::size_t threads = 0;

  void validate(const std::string& path = "probe") const {
    auto check = [&](bool ok, const std::string& field, const std::string& why) {
      require(ok, ErrorCode::kInvalidConfig, path + "." + field + ": " + why);
    };
    check(hidden > 0, "hidden", "must be positive");
    check(epochs >= 0, "epochs", "must be non-negative");
    check(learning_rate > 0.0, "learning_rate", "must be positive");
    check(train_fraction > 0.0 && train_fraction < 1.0, "train_fraction", "must lie in (0, 1)");
    check(n_repeats >= 1, "n_repeats", "must be at least 1");
  }
};

inline void to_json(nlohmann::json& j, const ProbeConfig& c) {
  j = {{"hidden", c.hidden},
       {"epochs", c.epochs},
       {"learning_rate", c.learning_rate},
       {"train_fraction", c.train_fraction},
       {"n_repeats", c.n_repeats},
       {"linear_only", c.linear_only},
       {"standardize", c.standardize},
       {"average", c.average == F1Average::kMacro ? "macro" : "weighted"}};
}

inline void from_json(const nlohmann::json& j, ProbeConfig& c) {
  c = ProbeConfig{};
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("hidden", c.hidden);
  get("epochs", c.epochs);
  get("learning_rate", c.learning_rate);
  get("train_fraction", c.train_fraction);
  get("n_repeats", c.n_repeats);
  get("linear_only", c.linear_only);
  get("standardize", c.standardize);
  if (j.contains("average")) {
    const auto a = j.at("average").get<std::string>();
    require(a == "macro" || a == "weighted", ErrorCode::kInvalidConfig, "probe.average: expected 'macro' or 'weighted'");
    c.average = a == "macro" ? F1Average::kMacro : F1Average::kWeighted;
  }
}

// ---------------------------------------------------------------------------
// Splits

struct Split {
  std::vector<std::size_t> train, test;
};

/// Per class: round(fraction * n_c) (at least 1) samples to train, the rest
/// to test. Both lists come back sorted.
inline Split stratified_split(const std::vector<int>& labels, int n_classes, double train_fraction,
                              std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) by_class.at(static_cast<std::size_t>(labels[i])).push_back(i);
  Rng rng(seed);
  Split split;
  for (int c = 0; c < n_classes; ++c) {
    auto& idx = by_class[static_cast<std::size_t>(c)];
    require(idx.size() >= 2, ErrorCode::kClassTooSmall,
            "class " + std::to_string(c) + " has " + std::to_string(idx.size()) + " samples; need at least 2");
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    const auto n = static_cast<long>(idx.size());
    const long k = std::clamp(std::lround(train_fraction * static_cast<double>(n)), 1L, n - 1);
    split.train.insert(split.train.end(), idx.begin(), idx.begin() + k);
    split.test.insert(split.test.end(), idx.begin() + k, idx.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

inline Split stratified_split(const LabeledEmbeddingSet& set, double train_fraction, std::uint64_t seed) {
  return stratified_split(set.labels, set.n_classes(), train_fraction, seed);
}

// ---------------------------------------------------------------------------
// Probe head

struct ProbeParams {
  bool linear_only = false;
  Mat<double> feature_mean, feature_scale;  // [1, D]
  Mat<double> w1, b1;                        // hidden layer (unused when linear_only)
  Mat<double> w2, b2;                        // output layer

  Mat<double> logits(const Mat<double>& x) const {
    Mat<double> z = (x.rowwise() - feature_mean.row(0)).array().rowwise() * feature_scale.row(0).array();
    if (linear_only) return nn::linear_forward(z, w2, b2);
    return nn::linear_forward(nn::gelu_forward(nn::linear_forward(z, w1, b1)), w2, b2);
  }

  std::vector<int> predict(const Mat<double>& x) const {
    const Mat<double> s = logits(x);
    std::vector<int> out(static_cast<std::size_t>(s.rows()));
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      Eigen::Index arg;
      s.row(i).maxCoeff(&arg);
      out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
    }
    return out;
  }
};

namespace probe_detail {

inline Mat<double> uniform_init(int rows, int cols, double bound, Rng& rng) {
  Mat<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  return m;
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001B3ULL;
  return h;
}

struct Adam {
  double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  long step = 0;
  std::vector<Mat<double>> m, v;

  void update(const std::vector<Mat<double>*>& params, const std::vector<Mat<double>*>& grads) {
    if (m.empty()) {
      for (auto* p : params) {
        m.push_back(Mat<double>::Zero(p->rows(), p->cols()));
        v.push_back(Mat<double>::Zero(p->rows(), p->cols()));
      }
    }
    ++step;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * *grads[i];
      v[i].array() = b2 * v[i].array() + (1.0 - b2) * grads[i]->array().square();
      params[i]->array() -= lr * (m[i].array() / c1) / ((v[i].array() / c2).sqrt() + eps);
    }
  }
};

}  // namespace probe_detail

/// Softmax cross-entropy on the full training set for cfg.epochs Adam steps.
/// Fresh initialization from `seed`; the embeddings are only read.
inline ProbeParams train_probe(const Mat<double>& x, const std::vector<int>& labels, int n_classes,
                               const ProbeConfig& cfg, std::uint64_t seed) {
  require(static_cast<std::size_t>(x.rows()) == labels.size(), ErrorCode::kLengthMismatch,
          "probe: embeddings and labels differ in count");
  require(x.rows() > 0, ErrorCode::kInvalidArgument, "probe: empty training set");
  const int d = static_cast<int>(x.cols());
  const int h = cfg.hidden;
  ProbeParams p;
  p.linear_only = cfg.linear_only;
  p.feature_mean = Mat<double>::Zero(1, d);
  p.feature_scale = Mat<double>::Ones(1, d);
  if (cfg.standardize) {
    p.feature_mean = x.colwise().mean();
    const Mat<double> var = (x.rowwise() - p.feature_mean.row(0)).array().square().colwise().mean();
    for (int j = 0; j < d; ++j) p.feature_scale(0, j) = 1.0 / std::sqrt(var(0, j) + 1e-8);
  }
  Rng rng(seed);
  const int in2 = cfg.linear_only ? d : h;
  if (!cfg.linear_only) {
    p.w1 = probe_detail::uniform_init(h, d, 1.0 / std::sqrt(double(d)), rng);
    p.b1 = probe_detail::uniform_init(1, h, 1.0 / std::sqrt(double(d)), rng);
  }
  p.w2 = probe_detail::uniform_init(n_classes, in2, 1.0 / std::sqrt(double(in2)), rng);
  p.b2 = probe_detail::uniform_init(1, n_classes, 1.0 / std::sqrt(double(in2)), rng);

  const Mat<double> z = (x.rowwise() - p.feature_mean.row(0)).array().rowwise() * p.feature_scale.row(0).array();
  Mat<double> onehot = Mat<double>::Zero(x.rows(), n_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) onehot(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  const double inv_n = 1.0 / static_cast<double>(x.rows());

  probe_detail::Adam opt{cfg.learning_rate};
  Mat<double> dw1, db1, dw2, db2;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Mat<double> pre, act;
    if (!cfg.linear_only) {
      pre = nn::linear_forward(z, p.w1, p.b1);
      act = nn::gelu_forward(pre);
    }
    const Mat<double>& in = cfg.linear_only ? z : act;
    Mat<double> dlogits = nn::softmax_rows(Mat<double>(nn::linear_forward(in, p.w2, p.b2)));
    dlogits = (dlogits - onehot) * inv_n;
    dw2 = Mat<double>::Zero(p.w2.rows(), p.w2.cols());
    db2 = Mat<double>::Zero(1, p.b2.cols());
    const Mat<double> dact = nn::linear_backward(dlogits, in, p.w2, dw2, db2);
    if (cfg.linear_only) {
      opt.update({&p.w2, &p.b2}, {&dw2, &db2});
      continue;
    }
    dw1 = Mat<double>::Zero(p.w1.rows(), p.w1.cols());
    db1 = Mat<double>::Zero(1, p.b1.cols());
    nn::linear_backward(nn::gelu_backward(dact, pre), z, p.w1, dw1, db1);
    opt.update({&p.w1, &p.b1, &p.w2, &p.b2}, {&dw1, &db1, &dw2, &db2});
  }
  return p;
}

inline double cross_entropy(const ProbeParams& p, const Mat<double>& x, const std::vector<int>& labels) {
  const Mat<double> prob = nn::softmax_rows(p.logits(x));
  double loss = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    loss -= std::log(std::max(prob(static_cast<Eigen::Index>(i), labels[i]), 1e-300));
  return loss / static_cast<double>(labels.size());
}

// ---------------------------------------------------------------------------
// Metrics

/// confusion(t, p) counts samples with truth t predicted as p.
inline Mat<long> confusion_matrix(const std::vector<int>& preds, const std::vector<int>& truth, int n_classes) {
  require(preds.size() == truth.size(), ErrorCode::kLengthMismatch, "predictions and truth differ in length");
  Mat<long> cm = Mat<long>::Zero(n_classes, n_classes);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    require(truth[i] >= 0 && truth[i] < n_classes && preds[i] >= 0 && preds[i] < n_classes,
            ErrorCode::kInvalidArgument, "class id out of range");
    ++cm(truth[i], preds[i]);
  }
  return cm;
}

/// F1 = 2TP / (2TP + FP + FN), 0 when the denominator is 0.
inline std::vector<double> f1_per_class(const std::vector<int>& preds, const std::vector<int>& truth, int n_classes) {
  require(preds.size() == truth.size(), ErrorCode::kLengthMismatch, "predictions and truth differ in length");
  std::vector<long> tp(static_cast<std::size_t>(n_classes)), fp(tp.size()), fn(tp.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    require(truth[i] >= 0 && truth[i] < n_classes && preds[i] >= 0 && preds[i] < n_classes,
            ErrorCode::kInvalidArgument, "class id out of range");
    if (preds[i] == truth[i]) {
      ++tp[static_cast<std::size_t>(truth[i])];
    } else {
      ++fp[static_cast<std::size_t>(preds[i])];
      ++fn[static_cast<std::size_t>(truth[i])];
    }
  }
  std::vector<double> f1(tp.size(), 0.0);
  for (std::size_t c = 0; c < tp.size(); ++c) {
    const long denom = 2 * tp[c] + fp[c] + fn[c];
    if (denom > 0) f1[c] = 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom);
  }
  return f1;
}

/// Macro: unweighted class mean. Weighted: by support in `truth`.
inline double average_f1(const std::vector<double>& f1, const std::vector<int>& truth, F1Average average) {
  if (f1.empty()) return 0.0;
  if (average == F1Average::kMacro) return std::accumulate(f1.begin(), f1.end(), 0.0) / static_cast<double>(f1.size());
  std::vector<double> support(f1.size(), 0.0);
  for (int t : truth) support[static_cast<std::size_t>(t)] += 1.0;
  double num = 0.0, den = 0.0;
  for (std::size_t c = 0; c < f1.size(); ++c) {
    num += support[c] * f1[c];
    den += support[c];
  }
  return den > 0.0 ? num / den : 0.0;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

/// Mean and sample standard deviation; the std of a single value is 0.
inline MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd r;
  if (xs.empty()) return r;
  r.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() < 2) return r;
  double ss = 0.0;
  for (double x : xs) ss += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  return r;
}

// ---------------------------------------------------------------------------
// Benchmark

struct RepeatResult {
  std::uint64_t seed = 0;
  std::vector<long> train_per_class, test_per_class;
  std::vector<double> class_f1;
  double machine_f1 = 0.0;
  Mat<long> confusion;
};

struct ProbeReport {
  std::string machine;
  std::vector<std::string> class_names;
  std::vector<MeanStd> per_class_f1;
  MeanStd machine_f1;
  int n_repeats = 0;
  double split_fraction = 0.2;
  Mat<long> confusion;  // summed over repeats; rows truth, columns prediction
  std::vector<RepeatResult> repeats;
};

inline RepeatResult run_repeat(const LabeledEmbeddingSet& set, const ProbeConfig& cfg, std::uint64_t seed) {
  const int c = set.n_classes();
  const Split split = stratified_split(set, cfg.train_fraction, derive_seed(seed, 0));
  auto gather = [&](const std::vector<std::size_t>& idx, Mat<double>& x, std::vector<int>& y) {
    x.resize(static_cast<Eigen::Index>(idx.size()), set.embeddings.cols());
    y.resize(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      x.row(static_cast<Eigen::Index>(i)) = set.embeddings.row(static_cast<Eigen::Index>(idx[i]));
      y[i] = set.labels[idx[i]];
    }
  };
  Mat<double> xtr, xte;
  std::vector<int> ytr, yte;
  gather(split.train, xtr, ytr);
  gather(split.test, xte, yte);

  RepeatResult r;
  r.seed = seed;
  r.train_per_class.assign(static_cast<std::size_t>(c), 0);
  r.test_per_class.assign(static_cast<std::size_t>(c), 0);
  for (int y : ytr) ++r.train_per_class[static_cast<std::size_t>(y)];
  for (int y : yte) ++r.test_per_class[static_cast<std::size_t>(y)];
  const ProbeParams probe = train_probe(xtr, ytr, c, cfg, derive_seed(seed, 1));
  const auto preds = probe.predict(xte);
  r.class_f1 = f1_per_class(preds, yte, c);
  r.machine_f1 = average_f1(r.class_f1, yte, cfg.average);
  r.confusion = confusion_matrix(preds, yte, c);
  return r;
}

/// n_repeats independent split/train/evaluate rounds; repeats run in
/// parallel but each owns a seed derived from (cfg.seed, repeat index).
inline ProbeReport run_benchmark(const LabeledEmbeddingSet& set, const ProbeConfig& cfg) {
  cfg.validate();
  set.validate();
  const int c = set.n_classes();
  ProbeReport report;
  report.machine = set.machine;
  report.class_names = set.class_names;
  report.n_repeats = cfg.n_repeats;
  report.split_fraction = cfg.train_fraction;
  report.repeats.resize(static_cast<std::size_t>(cfg.n_repeats));
  const std::uint64_t machine_seed = derive_seed(cfg.seed, probe_detail::fnv1a(set.machine));
  parallel_for(report.repeats.size(), cfg.threads, [&](std::size_t i) {
    report.repeats[i] = run_repeat(set, cfg, derive_seed(machine_seed, i));
  });

  report.confusion = Mat<long>::Zero(c, c);
  std::vector<double> machine_scores;
  for (const auto& r : report.repeats) {
    report.confusion += r.confusion;
    machine_scores.push_back(r.machine_f1);
  }
  report.machine_f1 = mean_std(machine_scores);
  for (int k = 0; k < c; ++k) {
    std::vector<double> scores;
    for (const auto& r : report.repeats) scores.push_back(r.class_f1[static_cast<std::size_t>(k)]);
    report.per_class_f1.push_back(mean_std(scores));
  }
  return report;
}

inline std::vector<ProbeReport> run_benchmark(const std::vector<LabeledEmbeddingSet>& sets, const ProbeConfig& cfg) {
  std::vector<ProbeReport> reports;
  for (const auto& s : sets) reports.push_back(run_benchmark(s, cfg));
  return reports;
}

// ---------------------------------------------------------------------------
// Report files

inline void write_report_csv(const std::string& path, const std::vector<ProbeReport>& reports) {
  csv::Writer w(path);
  w.row({"machine", "class", "f1_mean", "f1_std"});
  for (const auto& r : reports)
    for (std::size_t k = 0; k < r.class_names.size(); ++k)
      w.row({r.machine, r.class_names[k], csv::format_double(r.per_class_f1[k].mean),
             csv::format_double(r.per_class_f1[k].std)});
  w.close();
}

inline void write_machine_summary_csv(const std::string& path, const std::vector<ProbeReport>& reports) {
  csv::Writer w(path);
  w.row({"machine", "n_classes", "n_repeats", "train_fraction", "f1_mean", "f1_std"});
  for (const auto& r : reports)
    w.row({r.machine, std::to_string(r.class_names.size()), std::to_string(r.n_repeats),
           csv::format_double(r.split_fraction), csv::format_double(r.machine_f1.mean),
           csv::format_double(r.machine_f1.std)});
  w.close();
}

/// Truth classes down the rows, predicted classes across the columns.
inline void write_confusion_csv(const std::string& path, const ProbeReport& r) {
  csv::Writer w(path);
  csv::Row header{"truth\\pred"};
  header.insert(header.end(), r.class_names.begin(), r.class_names.end());
  w.row(header);
  for (std::size_t t = 0; t < r.class_names.size(); ++t) {
    csv::Row row{r.class_names[t]};
    for (std::size_t p = 0; p < r.class_names.size(); ++p)
      row.push_back(std::to_string(r.confusion(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(p))));
    w.row(row);
  }
  w.close();
}

}  // namespace impact

#endif  // IMPACT_PROBE_BENCH_HPP
