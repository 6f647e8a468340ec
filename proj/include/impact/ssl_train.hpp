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

#ifndef IMPACT_SSL_TRAIN_HPP
#define IMPACT_SSL_TRAIN_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"

#include "impact/dsp.hpp"
#include "impact/error.hpp"
#include "impact/model.hpp"
#include "impact/random.hpp"

namespace impact {

enum class FrameLossScope { kMasked, kAll };
enum class Pooling { kCls, kMean, kClsMean };
enum class Branch { kStudent, kTeacher };

struct TrainConfig {
  double mask_ratio = 0.7;
  double lambda_u = 0.1;
  double huber_delta = 1.0;
  double ema_decay = 0.99;
  int epochs = 10;
  int batch_size = 32;
  double learning_rate = 5e-4;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  FrameLossScope frame_loss_scope = FrameLossScope::kMasked;
  bool teacher_include_cls = false;

  void validate(const std::string& path = "train") const {
    auto check = [&](bool ok, const std::string& field, const std::string& why) {
      require(ok, ErrorCode::kInvalidConfig, path + "." + field + ": " + why);
    };
    check(mask_ratio > 0.0 && mask_ratio < 1.0, "mask_ratio", "must lie in (0, 1)");
    check(lambda_u >= 0.0, "lambda_u", "must be non-negative");
    check(huber_delta > 0.0, "huber_delta", "must be positive");
    check(ema_decay >= 0.0 && ema_decay < 1.0, "ema_decay", "must lie in [0, 1)");
    check(epochs >= 0, "epochs", "must be non-negative");
    check(batch_size > 0, "batch_size", "must be positive");
    check(learning_rate >= 0.0, "learning_rate", "must be non-negative");
    check(weight_decay >= 0.0, "weight_decay", "must be non-negative");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"mask_ratio", c.mask_ratio},
       {"lambda_u", c.lambda_u},
       {"huber_delta", c.huber_delta},
       {"ema_decay", c.ema_decay},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"weight_decay", c.weight_decay},
       {"seed", c.seed},
       {"frame_loss_scope", c.frame_loss_scope == FrameLossScope::kMasked ? "masked" : "all"},
       {"teacher_include_cls", c.teacher_include_cls}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("mask_ratio", c.mask_ratio);
  get("lambda_u", c.lambda_u);
  get("huber_delta", c.huber_delta);
  get("ema_decay", c.ema_decay);
  get("epochs", c.epochs);
  get("batch_size", c.batch_size);
  get("learning_rate", c.learning_rate);
  get("weight_decay", c.weight_decay);
  get("seed", c.seed);
  get("teacher_include_cls", c.teacher_include_cls);
  if (j.contains("frame_loss_scope")) {
    const auto scope = j.at("frame_loss_scope").get<std::string>();
    require(scope == "masked" || scope == "all", ErrorCode::kInvalidConfig,
            "train.frame_loss_scope: expected 'masked' or 'all'");
    c.frame_loss_scope = scope == "masked" ? FrameLossScope::kMasked : FrameLossScope::kAll;
  }
}

// ---------------------------------------------------------------------------
// Masking

/// max(1, round(ratio * n)), capped at n.
inline int masked_count(int n_patches, double ratio) {
  return std::min(n_patches, std::max(1, static_cast<int>(std::lround(ratio * n_patches))));
}

/// Uniform choice of masked_count(n, ratio) positions without replacement.
inline std::vector<bool> sample_mask(int n_patches, double ratio, Rng& rng) {
  require(n_patches >= 1, ErrorCode::kInvalidArgument, "need at least one patch");
  require(ratio > 0.0 && ratio < 1.0, ErrorCode::kInvalidArgument, "mask ratio must lie in (0, 1)");
  std::vector<int> order(static_cast<std::size_t>(n_patches));
  std::iota(order.begin(), order.end(), 0);
  const int k = masked_count(n_patches, ratio);
  // Partial Fisher-Yates: the first k entries are a uniform k-subset.
  for (int i = 0; i < k; ++i) {
    const auto j = i + static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(n_patches - i));
    std::swap(order[i], order[j]);
  }
  std::vector<bool> mask(static_cast<std::size_t>(n_patches), false);
  for (int i = 0; i < k; ++i) mask[static_cast<std::size_t>(order[i])] = true;
  return mask;
}

// ---------------------------------------------------------------------------
// Losses

/// Mean over layers of the per-layer mean over patch tokens (row 0, the
/// CLS token, is skipped unless include_cls).
template <class T>
Mat<T> teacher_target(const std::vector<Mat<T>>& layers, bool include_cls = false) {
  require(!layers.empty(), ErrorCode::kInvalidArgument, "teacher target needs at least one layer");
  Mat<T> acc = Mat<T>::Zero(1, layers.front().cols());
  for (const auto& layer : layers) {
    const Eigen::Index first = include_cls ? 0 : 1;
    require(layer.rows() > first, ErrorCode::kInvalidArgument, "layer output has no patch tokens");
    acc += layer.bottomRows(layer.rows() - first).colwise().mean();
  }
  return acc / T(layers.size());
}

template <class T>
T utterance_loss(const Mat<T>& cls, const Mat<T>& target) {
  require(cls.size() == target.size(), ErrorCode::kShapeMismatch, "utterance loss inputs differ in size");
  return (cls.array() - target.array()).square().mean();
}

template <class T>
Mat<T> utterance_loss_grad(const Mat<T>& cls, const Mat<T>& target) {
  return (cls - target) * (T(2) / T(cls.size()));
}

template <class T>
inline T huber(T e, T delta) {
  const T a = std::abs(e);
  return a <= delta ? T(0.5) * e * e : delta * (a - T(0.5) * delta);
}

template <class T>
inline T huber_grad(T e, T delta) {
  return std::abs(e) <= delta ? e : (e > 0 ? delta : -delta);
}

/// Per-element weights selecting the spectrogram regions of masked patches
/// (or everything, for FrameLossScope::kAll). Returns the selected count.
inline std::vector<char> frame_loss_region(const ModelConfig& c, const std::vector<bool>& mask, FrameLossScope scope,
                                           std::size_t& count) {
  const int side = c.input_size, region = c.region(), grid = c.grid();
  require(mask.size() == static_cast<std::size_t>(c.n_patches()), ErrorCode::kShapeMismatch,
          "mask length must equal the patch count");
  std::vector<char> sel(static_cast<std::size_t>(side) * side, scope == FrameLossScope::kAll ? 1 : 0);
  count = scope == FrameLossScope::kAll ? sel.size() : 0;
  if (scope == FrameLossScope::kAll) return sel;
  for (int p = 0; p < c.n_patches(); ++p) {
    if (!mask[static_cast<std::size_t>(p)]) continue;
    const int r0 = (p / grid) * region, c0 = (p % grid) * region;
    for (int r = r0; r < r0 + region; ++r)
      for (int col = c0; col < c0 + region; ++col) sel[static_cast<std::size_t>(r) * side + col] = 1;
    count += static_cast<std::size_t>(region) * region;
  }
  require(count > 0, ErrorCode::kEmptyMask, "frame loss needs at least one masked patch");
  return sel;
}

/// Huber reconstruction error averaged over the selected elements. `recon`
/// and `target` hold the same number of elements in the same (row-major)
/// order; `grad`, when given, receives d(loss)/d(recon) scaled by `scale`.
template <class T>
T frame_loss(const Mat<T>& recon, const Mat<T>& target, const ModelConfig& c, const std::vector<bool>& mask, T delta,
             FrameLossScope scope = FrameLossScope::kMasked, Mat<T>* grad = nullptr, T scale = T(1)) {
  require(recon.size() == target.size() && recon.size() == Eigen::Index(c.input_size) * c.input_size,
          ErrorCode::kShapeMismatch, "reconstruction and target shapes differ");
  std::size_t count = 0;
  const auto sel = frame_loss_region(c, mask, scope, count);
  if (grad) *grad = Mat<T>::Zero(recon.rows(), recon.cols());
  T acc = 0;
  for (std::size_t i = 0; i < sel.size(); ++i) {
    if (!sel[i]) continue;
    const T e = recon.data()[i] - target.data()[i];
    acc += huber(e, delta);
    if (grad) grad->data()[i] = huber_grad(e, delta) * scale / T(count);
  }
  return acc / T(count);
}

inline double total_loss(double frame, double utterance, double lambda_u) { return frame + lambda_u * utterance; }

struct LossBreakdown {
  double frame = 0.0;
  double utterance = 0.0;
  double total = 0.0;
};

// ---------------------------------------------------------------------------
// Teacher EMA

/// teacher <- decay * teacher + (1 - decay) * student for trainable tensors;
/// running statistics are copied from the student.
template <class T>
void ema_update(Parameters<T>& teacher, const Parameters<T>& student, double decay) {
  require(decay >= 0.0 && decay < 1.0, ErrorCode::kInvalidArgument, "EMA decay must lie in [0, 1)");
  require(same_structure(teacher, student), ErrorCode::kStructureMismatch, "teacher and student differ in structure");
  std::vector<std::pair<Mat<T>*, TensorRole>> dst;
  teacher.visit([&](const std::string&, Mat<T>& m, TensorRole role) { dst.push_back({&m, role}); });
  const auto src = tensor_list(student);
  const T d = T(decay), keep = T(1.0 - decay);
  for (std::size_t i = 0; i < dst.size(); ++i) {
    auto& [m, role] = dst[i];
    if (role == TensorRole::kFixed) continue;
    if (role == TensorRole::kRunningStat || decay == 0.0) {
      *m = *src[i];
    } else {
      *m = d * m->array() + keep * src[i]->array();
    }
  }
}

// ---------------------------------------------------------------------------
// Optimizer: Adam moments with decoupled weight decay

struct AdamConfig {
  double learning_rate = 5e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  Parameters<T> m, v;
  std::int64_t step = 0;
};

template <class T>
AdamState<T> make_adam_state(const Parameters<T>& like) {
  return {zeros_like(like), zeros_like(like), 0};
}

template <class T>
void adam_step(Parameters<T>& params, const Parameters<T>& grads, AdamState<T>& state, const AdamConfig& cfg) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  std::vector<std::pair<Mat<T>*, TensorRole>> p;
  params.visit([&](const std::string&, Mat<T>& m, TensorRole role) { p.push_back({&m, role}); });
  const auto g = tensor_list(grads);
  const auto m = tensor_list(state.m);
  const auto v = tensor_list(state.v);
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2), lr = T(cfg.learning_rate), eps = T(cfg.eps);
  const T wd = T(cfg.weight_decay), ibc1 = T(1.0 / bc1), ibc2 = T(1.0 / bc2);
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto& [param, role] = p[i];
    if (!is_trainable(role)) continue;
    m[i]->array() = b1 * m[i]->array() + (T(1) - b1) * g[i]->array();
    v[i]->array() = b2 * v[i]->array() + (T(1) - b2) * g[i]->array().square();
    auto update = (m[i]->array() * ibc1) / ((v[i]->array() * ibc2).sqrt() + eps);
    if (role == TensorRole::kWeight && cfg.weight_decay > 0.0) {
      param->array() -= lr * (update + wd * param->array());
    } else {
      param->array() -= lr * update;
    }
  }
}

// ---------------------------------------------------------------------------
// Training state and steps

using Spectrogram = Mat<float>;  // model input, [1, H*W]

/// Flattens a log-Mel spectrogram (mel rows, frame columns) to model input.
inline Spectrogram to_model_input(const LogMelSpectrogram& spec) {
  return Eigen::Map<const Mat<double>>(spec.values.data(), 1, spec.values.size()).cast<float>();
}

struct ModelState {
  Parameters<float> student;
  Parameters<float> teacher;
  int epoch = 0;
  AdamState<float> optimizer;
};

inline ModelState init_state(const ModelConfig& model, std::uint64_t seed) {
  ModelState s;
  s.student = init_parameters<float>(model, derive_seed(seed, 1));
  s.teacher = s.student;
  s.optimizer = make_adam_state(s.student);
  return s;
}

/// Loss of the student on a batch with the given masks. When `grads` is
/// non-null the gradient of the batch-mean total loss is accumulated into
/// it; when `stats` is non-null batch-norm running statistics are updated.
template <class T>
LossBreakdown compute_losses(const Parameters<T>& student, const Parameters<T>& teacher, const Batch<T>& specs,
                             const std::vector<std::vector<bool>>& masks, const TrainConfig& cfg,
                             Parameters<T>* grads = nullptr, Parameters<T>* stats = nullptr) {
  require(!specs.empty(), ErrorCode::kInvalidArgument, "empty batch");
  const auto& c = student.config;
  const std::size_t batch = specs.size();

  // Teacher: unmasked input, batch statistics, no gradients.
  const auto teacher_out = encode_full(teacher, specs, BnMode::kBatchStats);
  std::vector<Mat<T>> targets;
  for (const auto& t : teacher_out) targets.push_back(teacher_target(t.layers, cfg.teacher_include_cls));

  StudentTape<T> tape;
  const auto out =
      student_forward(student, specs, masks, stats ? BnMode::kTrain : BnMode::kBatchStats, grads ? &tape : nullptr, stats);

  LossBreakdown loss;
  Batch<T> d_recon(batch);
  std::vector<Mat<T>> d_cls(batch);
  const T inv_batch = T(1.0 / static_cast<double>(batch));
  for (std::size_t n = 0; n < batch; ++n) {
    const T f = frame_loss(out.recon[n], specs[n], c, masks[n], T(cfg.huber_delta), cfg.frame_loss_scope,
                           grads ? &d_recon[n] : nullptr, inv_batch);
    const T u = utterance_loss(out.cls[n], targets[n]);
    loss.frame += static_cast<double>(f);
    loss.utterance += static_cast<double>(u);
    if (grads) d_cls[n] = utterance_loss_grad(out.cls[n], targets[n]) * (T(cfg.lambda_u) * inv_batch);
  }
  loss.frame /= static_cast<double>(batch);
  loss.utterance /= static_cast<double>(batch);
  loss.total = total_loss(loss.frame, loss.utterance, cfg.lambda_u);
  if (grads) student_backward(student, tape, d_recon, d_cls, *grads);
  return loss;
}

inline std::vector<std::vector<bool>> sample_batch_masks(const ModelConfig& c, std::size_t batch, double ratio,
                                                         Rng& rng) {
  std::vector<std::vector<bool>> masks;
  for (std::size_t n = 0; n < batch; ++n) masks.push_back(sample_mask(c.n_patches(), ratio, rng));
  return masks;
}

/// One optimizer update of the student with explicit masks. Returns the
/// losses measured before the update.
inline LossBreakdown train_step_with_masks(ModelState& state, const Batch<float>& specs,
                                           const std::vector<std::vector<bool>>& masks, const TrainConfig& cfg) {
  Parameters<float> grads = zeros_like(state.student);
  const LossBreakdown loss = compute_losses(state.student, state.teacher, specs, masks, cfg, &grads, &state.student);
  require(std::isfinite(loss.total) && std::isfinite(loss.frame) && std::isfinite(loss.utterance),
          ErrorCode::kNonFiniteLoss, "training diverged (non-finite loss)");
  adam_step(state.student, grads, state.optimizer, {cfg.learning_rate, cfg.weight_decay});
  return loss;
}

inline LossBreakdown train_step(ModelState& state, const Batch<float>& specs, const TrainConfig& cfg, Rng& rng) {
  require(!specs.empty(), ErrorCode::kInvalidArgument, "empty batch");
  const auto masks = sample_batch_masks(state.student.config, specs.size(), cfg.mask_ratio, rng);
  return train_step_with_masks(state, specs, masks, cfg);
}

struct EpochLosses {
  int epoch = 0;
  LossBreakdown loss;
};

struct PretrainResult {
  ModelState state;
  std::vector<EpochLosses> curve;
};

/// Called after each epoch's EMA update (for checkpointing and progress).
using EpochCallback = std::function<void(const ModelState&, const EpochLosses&)>;

/// Epochs of shuffled mini-batches; the teacher follows the student by EMA
/// once per epoch. Single-threaded, so runs are bitwise reproducible.
inline PretrainResult pretrain(const std::vector<Spectrogram>& corpus, const ModelConfig& model, const TrainConfig& cfg,
                               const EpochCallback& on_epoch = {}) {
  require(!corpus.empty(), ErrorCode::kInvalidArgument, "empty pretraining corpus");
  model.validate();
  cfg.validate();
  PretrainResult result{init_state(model, cfg.seed), {}};
  Rng rng(derive_seed(cfg.seed, 2));
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    LossBreakdown sum;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      Batch<float> batch;
      for (std::size_t i = start; i < stop; ++i) batch.push_back(corpus[order[i]]);
      const auto loss = train_step(result.state, batch, cfg, rng);
      const double w = static_cast<double>(stop - start);
      sum.frame += loss.frame * w;
      sum.utterance += loss.utterance * w;
      sum.total += loss.total * w;
    }
    const double n = static_cast<double>(corpus.size());
    EpochLosses entry{e + 1, {sum.frame / n, sum.utterance / n, sum.total / n}};
    ema_update(result.state.teacher, result.state.student, cfg.ema_decay);
    result.state.epoch = e + 1;
    result.curve.push_back(entry);
    if (on_epoch) on_epoch(result.state, entry);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Embeddings

struct Embedding {
  std::vector<float> vector;
  std::string clip_id;
};

inline int embedding_dim(const ModelConfig& c, Pooling pooling) {
  return pooling == Pooling::kClsMean ? 2 * c.embed_dim : c.embed_dim;
}

/// Frozen-encoder features for a batch of clips (running batch-norm
/// statistics, no masking). Pooling is over the final normed layer.
inline std::vector<std::vector<float>> embed_batch(const Parameters<float>& params, const Batch<float>& specs,
                                                   Pooling pooling = Pooling::kMean) {
  const auto outs = encode_full(params, specs, BnMode::kEval);
  std::vector<std::vector<float>> result;
  for (const auto& out : outs) {
    const Mat<float>& z = out.final;
    Mat<float> v;
    if (pooling == Pooling::kCls) {
      v = z.row(0);
    } else {
      Mat<float> mean = z.bottomRows(z.rows() - 1).colwise().mean();
      if (pooling == Pooling::kMean) {
        v = mean;
      } else {
        v.resize(1, 2 * z.cols());
        v << z.row(0), mean;
      }
    }
    result.emplace_back(v.data(), v.data() + v.size());
  }
  return result;
}

inline Embedding embed(const Spectrogram& spec, const ModelState& state, Pooling pooling = Pooling::kMean,
                       Branch branch = Branch::kStudent, std::string clip_id = {}) {
  const auto& params = branch == Branch::kStudent ? state.student : state.teacher;
  return {embed_batch(params, {spec}, pooling).front(), std::move(clip_id)};
}

}  // namespace impact

#endif  // IMPACT_SSL_TRAIN_HPP
