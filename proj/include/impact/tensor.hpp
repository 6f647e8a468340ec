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

#ifndef IMPACT_TENSOR_HPP
#define IMPACT_TENSOR_HPP

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <vector>

namespace impact {

// Feature maps are stored as [channels, height*width]; token sequences as
// [tokens, dim]; weights as [out, in]. Everything is row-major.
template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

template <class T>
using Batch = std::vector<Mat<T>>;

template <class T>
bool all_finite(const Mat<T>& m) {
  return m.allFinite();
}

template <class To, class From>
Mat<To> cast(const Mat<From>& m) {
  return m.template cast<To>();
}

/// Exact GELU, 0.5 x (1 + erf(x / sqrt 2)).
template <class T>
inline T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(M_SQRT1_2)));
}

template <class T>
inline T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014327);
  return cdf + x * pdf;
}

}  // namespace impact

#endif  // IMPACT_TENSOR_HPP
