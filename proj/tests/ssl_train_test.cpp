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
#include <limits>
#include <utility>

#include "impact/ssl_train.hpp"

namespace impact {
namespace {

// Smooth, clip-dependent 64 x 64 inputs for the tiny model.
std::vector<Spectrogram> tiny_corpus(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Spectrogram> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double f = rng.uniform(0.05, 0.4), g = rng.uniform(0.05, 0.4), a = rng.uniform(0.5, 2.0);
    Spectrogram s(1, 64 * 64);
    for (int r = 0; r < 64; ++r)
      for (int c = 0; c < 64; ++c)
        s(0, r * 64 + c) = float(a * std::sin(f * r) * std::cos(g * c) + 0.1 * rng.normal());
    out.push_back(s);
  }
  return out;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.batch_size = 8;
  t.learning_rate = 1e-3;
  t.seed = 17;
  return t;
}

bool trainable_equal(const Parameters<float>& a, const Parameters<float>& b) {
  const auto tb = tensor_list(b);
  std::size_t i = 0;
  bool same = true;
  a.visit([&](const std::string&, const Mat<float>& m, TensorRole role) {
    if (is_trainable(role) && !(m == *tb[i])) same = false;
    ++i;
  });
  return same;
}

bool all_equal(const Parameters<float>& a, const Parameters<float>& b) {
  const auto ta = tensor_list(a), tb = tensor_list(b);
  for (std::size_t i = 0; i < ta.size(); ++i)
    if (!(*ta[i] == *tb[i])) return false;
  return true;
}

// ---------------------------------------------------------------------------

TEST(SampleMask, ElevenOfSixteenAtDefaultRatio) {
  Rng rng(1);
  const auto m = sample_mask(16, 0.7, rng);
  EXPECT_EQ(std::count(m.begin(), m.end(), true), 11);
}

TEST(SampleMask, CountLawAndClamp) {
  Rng rng(2);
  for (int n : {1, 2, 3, 7, 16, 64})
    for (double r : {1e-6, 0.1, 0.25, 0.5, 0.7, 0.95, 0.999999}) {
      const auto m = sample_mask(n, r, rng);
      const long expect = std::min<long>(n, std::max<long>(1, std::lround(r * n)));
      EXPECT_EQ(std::count(m.begin(), m.end(), true), expect) << n << " " << r;
    }
  EXPECT_EQ(masked_count(16, 0.001), 1);
  EXPECT_THROW(sample_mask(16, 1.0, rng), Error);
  EXPECT_THROW(sample_mask(0, 0.5, rng), Error);
}

TEST(SampleMask, DeterministicAndUniform) {
  Rng a(3), b(3);
  EXPECT_EQ(sample_mask(16, 0.7, a), sample_mask(16, 0.7, b));
  Rng rng(4);
  std::vector<int> hits(16, 0);
  const int draws = 4000;
  for (int i = 0; i < draws; ++i) {
    const auto m = sample_mask(16, 0.7, rng);
    for (int p = 0; p < 16; ++p) hits[p] += m[p];
  }
  // Each position is masked with probability 11/16; 5 sigma is about 0.037.
  for (int p = 0; p < 16; ++p) EXPECT_NEAR(hits[p] / double(draws), 11.0 / 16.0, 0.04) << p;
}

TEST(TeacherTarget, ConstantLayersGiveTheConstant) {
  RowVec<double> v(4);
  v << 1, -2, 3, 0.5;
  std::vector<Mat<double>> layers(8, v.replicate(5, 1));
  EXPECT_LT((teacher_target(layers) - v).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(TeacherTarget, TwoStageMeanSkipsCls) {
  Rng rng(5);
  std::vector<Mat<double>> layers;
  for (int l = 0; l < 3; ++l) {
    Mat<double> m(4, 2);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    layers.push_back(m);
  }
  for (int d = 0; d < 2; ++d) {
    double outer = 0, outer_cls = 0;
    for (const auto& m : layers) {
      outer += (m(1, d) + m(2, d) + m(3, d)) / 3.0;
      outer_cls += (m(0, d) + m(1, d) + m(2, d) + m(3, d)) / 4.0;
    }
    EXPECT_NEAR(teacher_target(layers)(0, d), outer / 3.0, 1e-14);
    EXPECT_NEAR(teacher_target(layers, true)(0, d), outer_cls / 3.0, 1e-14);
  }
  const std::vector<Mat<double>> one{layers.front()};
  EXPECT_LT((teacher_target(one) - layers.front().bottomRows(3).colwise().mean()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(UtteranceLoss, Examples) {
  const Mat<double> zero = Mat<double>::Zero(1, 384), ones = Mat<double>::Ones(1, 384);
  EXPECT_EQ(utterance_loss(ones, ones), 0.0);
  EXPECT_DOUBLE_EQ(utterance_loss(zero, ones), 1.0);
  Rng rng(6);
  Mat<double> a(1, 10), b(1, 10);
  for (int i = 0; i < 10; ++i) a(0, i) = rng.normal(), b(0, i) = rng.normal();
  const Mat<double> a3 = a * 3.0, b3 = b * 3.0;
  EXPECT_NEAR(utterance_loss(a3, b3), 9.0 * utterance_loss(a, b), 1e-12);
}

TEST(FrameLoss, KnotExamples) {
  const auto c = ModelConfig{};
  std::vector<bool> mask(16, false);
  mask[0] = mask[5] = true;
  const Mat<double> t = Mat<double>::Zero(128, 128);
  EXPECT_EQ(frame_loss<double>(t, t, c, mask, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(frame_loss<double>(Mat<double>::Constant(128, 128, 1.0), t, c, mask, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(frame_loss<double>(Mat<double>::Constant(128, 128, 2.0), t, c, mask, 1.0), 1.5);
  EXPECT_DOUBLE_EQ(frame_loss<double>(Mat<double>::Constant(128, 128, -2.0), t, c, mask, 1.0), 1.5);
}

TEST(FrameLoss, OnlyMaskedRegionsCount) {
  const auto c = ModelConfig{};
  std::vector<bool> mask(16, false);
  mask[6] = true;  // grid (1, 2): rows 32..63, columns 64..95
  Mat<double> recon = Mat<double>::Zero(128, 128);
  recon.block(0, 0, 32, 128).setConstant(50.0);
  recon.block(64, 0, 64, 128).setConstant(-50.0);
  recon.block(32, 0, 32, 64).setConstant(9.0);
  recon.block(32, 96, 32, 32).setConstant(9.0);
  const Mat<double> target = Mat<double>::Zero(128, 128);
  EXPECT_EQ(frame_loss<double>(recon, target, c, mask, 1.0), 0.0);
  recon(40, 70) = 2.0;
  EXPECT_DOUBLE_EQ(frame_loss<double>(recon, target, c, mask, 1.0), 1.5 / 1024.0);
  EXPECT_DOUBLE_EQ(frame_loss<double>(recon, target, c, mask, 1.0, FrameLossScope::kAll),
                   ((32.0 * 128 + 64 * 128) * (50 - 0.5) + 32.0 * 96 * 8.5 + 1.5) / 16384.0);
}

TEST(FrameLoss, EmptyMaskRejected) {
  const auto c = ModelConfig{};
  const Mat<double> t = Mat<double>::Zero(128, 128);
  try {
    frame_loss<double>(t, t, c, std::vector<bool>(16, false), 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyMask);
  }
}

TEST(FrameLoss, SmoothAtKnot) {
  const double h = 1e-7;
  for (double delta : {0.5, 1.0, 2.0}) {
    const double left = (huber(delta, delta) - huber(delta - h, delta)) / h;
    const double right = (huber(delta + h, delta) - huber(delta, delta)) / h;
    EXPECT_NEAR(left, right, 1e-6);
    EXPECT_NEAR(huber(delta - 1e-12, delta), huber(delta + 1e-12, delta), 1e-11);
    EXPECT_DOUBLE_EQ(huber_grad(delta, delta), delta);
  }
}

TEST(FrameLoss, GradientMatchesFiniteDifferences) {
  const auto c = ModelConfig::tiny();
  std::vector<bool> mask(c.n_patches(), false);
  mask[1] = true;
  Rng rng(7);
  Mat<double> recon(1, 64 * 64), target(1, 64 * 64);
  for (Eigen::Index i = 0; i < recon.size(); ++i) recon.data()[i] = rng.normal(0, 1.5), target.data()[i] = rng.normal();
  Mat<double> grad;
  frame_loss(recon, target, c, mask, 1.0, FrameLossScope::kMasked, &grad);
  for (Eigen::Index i : {Eigen::Index(40), Eigen::Index(10 * 64 + 40), Eigen::Index(64 * 64 - 1)}) {
    Mat<double> up = recon, down = recon;
    up.data()[i] += 1e-6;
    down.data()[i] -= 1e-6;
    const double fd = (frame_loss(up, target, c, mask, 1.0) - frame_loss(down, target, c, mask, 1.0)) / 2e-6;
    EXPECT_NEAR(grad.data()[i], fd, 1e-8) << i;
  }
}

TEST(TotalLoss, AffineCombination) {
  EXPECT_NEAR(total_loss(1.0, 2.0, 0.1), 1.2, 1e-15);
  EXPECT_EQ(total_loss(0.7, 5.0, 0.0), 0.7);
  EXPECT_NEAR(total_loss(0.0, 3.0, 0.1), 0.3, 1e-15);
  // Exactly affine: differences are independent of the other argument.
  EXPECT_NEAR(total_loss(2.0, 1.0, 0.1) - total_loss(1.0, 1.0, 0.1), total_loss(2.0, 9.0, 0.1) - total_loss(1.0, 9.0, 0.1),
              1e-15);
}

TEST(Ema, DecayZeroCopiesStudentExactly) {
  const auto c = ModelConfig::micro();
  auto teacher = init_parameters<float>(c, 1);
  const auto student = init_parameters<float>(c, 2);
  ema_update(teacher, student, 0.0);
  EXPECT_TRUE(all_equal(teacher, student));
}

TEST(Ema, ConvexCombination) {
  const auto c = ModelConfig::micro();
  auto teacher = zero_parameters<float>(c), student = zero_parameters<float>(c);
  teacher.visit([](const std::string&, Mat<float>& m, TensorRole) { m.setOnes(); });
  student.visit([](const std::string&, Mat<float>& m, TensorRole role) { m.setConstant(role == TensorRole::kRunningStat ? 5.0f : 0.0f); });
  ema_update(teacher, student, 0.99);
  teacher.visit([](const std::string& name, const Mat<float>& m, TensorRole role) {
    if (role == TensorRole::kRunningStat)
      EXPECT_EQ(m.minCoeff(), 5.0f) << name;
    else if (role == TensorRole::kFixed)
      EXPECT_EQ(m.minCoeff(), 1.0f) << name;  // positional table is never blended
    else
      EXPECT_NEAR(m.maxCoeff(), 0.99f, 1e-7) << name;
  });

  auto t = init_parameters<float>(c, 3);
  const auto s = init_parameters<float>(c, 4);
  const auto before = t;
  ema_update(t, s, 0.7);
  const auto tn = tensor_list(std::as_const(t)), tb = tensor_list(before), ts = tensor_list(s);
  for (std::size_t i = 0; i < tn.size(); ++i) {
    const Mat<float> lo = tb[i]->cwiseMin(*ts[i]), hi = tb[i]->cwiseMax(*ts[i]);
    EXPECT_TRUE(((tn[i]->array() >= lo.array() - 1e-7f) && (tn[i]->array() <= hi.array() + 1e-7f)).all()) << i;
  }
}

TEST(Ema, FixedPointAndErrors) {
  const auto c = ModelConfig::micro();
  auto t = init_parameters<float>(c, 5);
  const auto s = t;
  ema_update(t, s, 0.37);
  EXPECT_TRUE(all_equal(t, s));
  EXPECT_THROW(ema_update(t, s, 1.0), Error);
  auto other = init_parameters<float>(ModelConfig::tiny(), 1);
  try {
    ema_update(other, s, 0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kStructureMismatch);
  }
}

TEST(Adam, FirstStepScalarOracle) {
  const auto c = ModelConfig::tiny();
  auto p = zero_parameters<double>(c);
  p.patch_weight.setConstant(2.0);  // a decayed weight
  p.patch_bias.setConstant(2.0);    // a bias: no decay
  auto g = zeros_like(p);
  g.patch_weight.setConstant(0.3);
  g.patch_bias.setConstant(-0.3);
  auto state = make_adam_state(p);
  const AdamConfig cfg{0.1, 0.01, 0.9, 0.999, 1e-8};
  adam_step(p, g, state, cfg);
  // Bias-corrected m/sqrt(v) is g/|g| on the first step.
  const double u = 0.3 / (0.3 + 1e-8);
  EXPECT_NEAR(p.patch_weight(0, 0), 2.0 - 0.1 * (u + 0.01 * 2.0), 1e-12);
  EXPECT_NEAR(p.patch_bias(0, 0), 2.0 + 0.1 * u, 1e-12);
  EXPECT_NEAR(state.m.patch_weight(0, 0), 0.03, 1e-15);
  EXPECT_NEAR(state.v.patch_weight(0, 0), 0.001 * 0.09, 1e-15);
  EXPECT_EQ(state.step, 1);
  // Untouched tensors with zero gradient stay put (weights at zero do not decay).
  EXPECT_EQ(p.cls_token.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Adam, SecondStepMatchesRecurrence) {
  const auto c = ModelConfig::tiny();
  auto p = zero_parameters<double>(c);
  p.cls_token.setConstant(1.0);
  auto g = zeros_like(p);
  auto state = make_adam_state(p);
  const AdamConfig cfg{0.01, 0.5, 0.9, 0.999, 1e-8};
  double x = 1.0, m = 0, v = 0;
  for (int t = 1; t <= 2; ++t) {
    const double grad = t == 1 ? 0.5 : -0.2;
    g.cls_token.setConstant(grad);
    adam_step(p, g, state, cfg);
    m = 0.9 * m + 0.1 * grad;
    v = 0.999 * v + 0.001 * grad * grad;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    x -= 0.01 * mh / (std::sqrt(vh) + 1e-8);  // cls_token is not a weight matrix: no decay
  }
  EXPECT_NEAR(p.cls_token(0, 0), x, 1e-12);
}

TEST(TrainStep, ZeroLearningRateLeavesStudent) {
  const auto c = ModelConfig::tiny();
  auto state = init_state(c, 1);
  const auto before = state.student;
  auto cfg = tiny_train();
  cfg.learning_rate = 0.0;
  Rng rng(8);
  const auto corpus = tiny_corpus(4, 1);
  const auto loss = train_step(state, corpus, cfg, rng);
  EXPECT_TRUE(std::isfinite(loss.total));
  EXPECT_GT(loss.total, 0.0);
  EXPECT_NEAR(loss.total, loss.frame + 0.1 * loss.utterance, 1e-12);
  EXPECT_TRUE(trainable_equal(state.student, before));
}

TEST(TrainStep, TeacherUntouchedWithinEpoch) {
  const auto c = ModelConfig::tiny();
  auto state = init_state(c, 2);
  const auto teacher = state.teacher;
  Rng rng(9);
  const auto corpus = tiny_corpus(4, 2);
  for (int i = 0; i < 3; ++i) train_step(state, corpus, tiny_train(), rng);
  EXPECT_TRUE(all_equal(state.teacher, teacher));
  EXPECT_FALSE(trainable_equal(state.student, teacher));
}

TEST(TrainStep, DescendsOnFixedBatch) {
  const auto c = ModelConfig::tiny();
  const auto cfg = tiny_train();
  auto state = init_state(c, 3);
  const auto corpus = tiny_corpus(8, 3);
  Rng rng(10);
  int better = 0;
  const int steps = 50;
  for (int i = 0; i < steps; ++i) {
    const auto masks = sample_batch_masks(c, corpus.size(), cfg.mask_ratio, rng);
    const auto before = train_step_with_masks(state, corpus, masks, cfg);
    const auto after = compute_losses(state.student, state.teacher, corpus, masks, cfg);
    better += after.total <= before.total;
  }
  EXPECT_GE(better, 40) << better << " of " << steps;
}

TEST(TrainStep, NonFiniteInputRaises) {
  const auto c = ModelConfig::tiny();
  auto state = init_state(c, 4);
  auto corpus = tiny_corpus(2, 4);
  corpus[0](0, 100) = std::numeric_limits<float>::quiet_NaN();
  Rng rng(11);
  try {
    train_step(state, corpus, tiny_train(), rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonFiniteLoss);
  }
}

TEST(Pretrain, ZeroEpochsReturnsInitialState) {
  const auto c = ModelConfig::tiny();
  auto cfg = tiny_train();
  cfg.epochs = 0;
  const auto r = pretrain(tiny_corpus(4, 5), c, cfg);
  EXPECT_TRUE(r.curve.empty());
  EXPECT_EQ(r.state.epoch, 0);
  EXPECT_TRUE(all_equal(r.state.student, init_state(c, cfg.seed).student));
}

TEST(Pretrain, LossFallsAndRunsAreBitwiseReproducible) {
  const auto c = ModelConfig::tiny();
  const auto corpus = tiny_corpus(64, 6);
  const auto cfg = tiny_train();
  const auto a = pretrain(corpus, c, cfg);
  ASSERT_EQ(a.curve.size(), 10u);
  EXPECT_LT(a.curve.back().loss.total, a.curve.front().loss.total);
  const auto b = pretrain(corpus, c, cfg);
  EXPECT_TRUE(all_equal(a.state.student, b.state.student));
  EXPECT_TRUE(all_equal(a.state.teacher, b.state.teacher));
  for (std::size_t e = 0; e < a.curve.size(); ++e) EXPECT_EQ(a.curve[e].loss.total, b.curve[e].loss.total);
  auto other = cfg;
  other.seed = 18;
  EXPECT_FALSE(all_equal(pretrain(corpus, c, other).state.student, a.state.student));
}

TEST(Pretrain, DecayZeroTeacherSnapshotsStudent) {
  const auto c = ModelConfig::tiny();
  auto cfg = tiny_train();
  cfg.epochs = 1;
  cfg.ema_decay = 0.0;
  bool called = false;
  pretrain(tiny_corpus(8, 7), c, cfg, [&](const ModelState& s, const EpochLosses& e) {
    called = true;
    EXPECT_EQ(e.epoch, 1);
    EXPECT_TRUE(all_equal(s.teacher, s.student));
  });
  EXPECT_TRUE(called);
}

TEST(Pretrain, InvalidConfigNamesField) {
  auto cfg = tiny_train();
  cfg.mask_ratio = 1.5;
  try {
    pretrain(tiny_corpus(2, 8), ModelConfig::tiny(), cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidConfig);
    EXPECT_NE(std::string(e.what()).find("train.mask_ratio"), std::string::npos);
  }
}

TEST(Embed, ShapesPoolingAndDeterminism) {
  const auto c = ModelConfig::micro();
  const auto state = init_state(c, 5);
  Rng rng(12);
  Spectrogram spec(1, 128 * 128);
  for (Eigen::Index i = 0; i < spec.size(); ++i) spec.data()[i] = float(rng.normal());
  const auto before = state.student;
  const auto a = embed(spec, state);
  const auto b = embed(spec, state);
  ASSERT_EQ(a.vector.size(), std::size_t(c.embed_dim));
  EXPECT_EQ(a.vector, b.vector);
  for (float v : a.vector) EXPECT_TRUE(std::isfinite(v));
  const auto cls = embed(spec, state, Pooling::kCls);
  const auto both = embed(spec, state, Pooling::kClsMean);
  ASSERT_EQ(both.vector.size(), std::size_t(2 * c.embed_dim));
  EXPECT_TRUE(std::equal(cls.vector.begin(), cls.vector.end(), both.vector.begin()));
  EXPECT_TRUE(std::equal(a.vector.begin(), a.vector.end(), both.vector.begin() + c.embed_dim));
  EXPECT_TRUE(all_equal(state.student, before));
  EXPECT_EQ(embedding_dim(ModelConfig{}, Pooling::kClsMean), 768);
}

TEST(TrainConfig, JsonRoundTrip) {
  TrainConfig t;
  t.mask_ratio = 0.6;
  t.frame_loss_scope = FrameLossScope::kAll;
  t.teacher_include_cls = true;
  nlohmann::json j = t;
  const auto back = j.get<TrainConfig>();
  EXPECT_EQ(back.mask_ratio, 0.6);
  EXPECT_EQ(back.frame_loss_scope, FrameLossScope::kAll);
  EXPECT_TRUE(back.teacher_include_cls);
  EXPECT_EQ(back.batch_size, 32);
}

}  // namespace
}  // namespace impact
