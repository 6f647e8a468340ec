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

#ifndef IMPACT_GRADCHECK_HPP
#define IMPACT_GRADCHECK_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "impact/model.hpp"
#include "impact/random.hpp"
#include "impact/ssl_train.hpp"

namespace impact {

struct TensorGradCheck {
  std::string name;
  int checked = 0;
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
  double rel_error = 0.0;  // ||a - n|| / max(||a||, ||n||, floor) over the sampled elements
  bool ok = false;
};

struct GradCheckOptions {
  ModelConfig model = ModelConfig::tiny();
  TrainConfig train;
  int batch = 2;
  int samples_per_tensor = 6;
  double step = 1e-5;
  double rel_tol = 1e-4;
  double abs_floor = 1e-6;
  std::uint64_t seed = 11;
};

/// Central differences of the full dual loss (batch statistics, fixed masks)
/// against the analytic backward pass, in double precision.
inline std::vector<TensorGradCheck> gradient_check(const GradCheckOptions& o = {}) {
  using T = double;
  Rng rng(o.seed);
  Parameters<T> student = init_parameters<T>(o.model, derive_seed(o.seed, 1));
  // Move off the symmetric initial point so no gradient vanishes trivially.
  student.visit([&](const std::string&, Mat<T>& m, TensorRole role) {
    if (!is_trainable(role)) return;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += rng.normal(0.0, 0.05);
  });
  Parameters<T> teacher = student;
  teacher.visit([&](const std::string&, Mat<T>& m, TensorRole role) {
    if (!is_trainable(role)) return;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += rng.normal(0.0, 0.05);
  });
  const int side = o.model.input_size;
  Batch<T> specs;
  for (int n = 0; n < o.batch; ++n) {
    Mat<T> s(1, side * side);
    for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = rng.normal();
    specs.push_back(std::move(s));
  }
  const auto masks = sample_batch_masks(o.model, specs.size(), o.train.mask_ratio, rng);

  Parameters<T> grads = zeros_like(student);
  compute_losses(student, teacher, specs, masks, o.train, &grads);
  auto loss_at = [&](const Parameters<T>& p) { return compute_losses(p, teacher, specs, masks, o.train).total; };

  std::vector<TensorGradCheck> results;
  std::vector<std::pair<std::string, Mat<T>*>> tensors;
  student.visit([&](const std::string& name, Mat<T>& m, TensorRole role) {
    if (is_trainable(role)) tensors.emplace_back(name, &m);
  });
  const auto g = tensor_list(grads);
  std::vector<const Mat<T>*> g_trainable;
  {
    std::size_t i = 0;
    student.visit([&](const std::string&, Mat<T>&, TensorRole role) {
      if (is_trainable(role)) g_trainable.push_back(g[i]);
      ++i;
    });
  }

  for (std::size_t t = 0; t < tensors.size(); ++t) {
    auto& [name, m] = tensors[t];
    TensorGradCheck r;
    r.name = name;
    const Eigen::Index size = m->size();
    const int k = static_cast<int>(std::min<Eigen::Index>(size, o.samples_per_tensor));
    std::vector<Eigen::Index> picks;
    for (int s = 0; s < k; ++s)
      picks.push_back(size <= o.samples_per_tensor ? s : static_cast<Eigen::Index>(rng.next_u64() % static_cast<std::uint64_t>(size)));
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (const auto idx : picks) {
      const T saved = m->data()[idx];
      m->data()[idx] = saved + o.step;
      const double up = loss_at(student);
      m->data()[idx] = saved - o.step;
      const double down = loss_at(student);
      m->data()[idx] = saved;
      const double numeric = (up - down) / (2.0 * o.step);
      const double analytic = g_trainable[t]->data()[idx];
      diff2 += (analytic - numeric) * (analytic - numeric);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
    }
    r.checked = k;
    r.analytic_norm = std::sqrt(a2);
    r.numeric_norm = std::sqrt(n2);
    r.rel_error = std::sqrt(diff2) / std::max({r.analytic_norm, r.numeric_norm, o.abs_floor});
    r.ok = r.rel_error <= o.rel_tol;
    results.push_back(r);
  }
  return results;
}

}  // namespace impact

#endif  // IMPACT_GRADCHECK_HPP
