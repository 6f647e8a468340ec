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

#ifndef IMPACT_LAYERS_HPP
#define IMPACT_LAYERS_HPP

// Forward and backward kernels for the layers the network is built from.
// Backward functions accumulate (+=) into parameter gradients and return the
// gradient with respect to the layer input.

#include <cmath>
#include <utility>
#include <vector>

#include <unsupported/Eigen/SpecialFunctions>

#include "impact/error.hpp"
#include "impact/tensor.hpp"

namespace impact::nn {

// ---------------------------------------------------------------------------
// Convolutions via im2col / col2im

struct ConvGeometry {
  int channels = 1;
  int height = 1;
  int width = 1;
  int kernel = 3;
  int stride = 1;
  int pad = 0;

  int out_h() const { return (height + 2 * pad - kernel) / stride + 1; }
  int out_w() const { return (width + 2 * pad - kernel) / stride + 1; }
};

namespace detail {

/// Output columns [lo, hi) whose input column ox*stride - pad + kj is in range.
inline std::pair<int, int> valid_range(int kj, int in, int out, int stride, int pad) {
  int lo = 0;
  while (lo < out && lo * stride - pad + kj < 0) ++lo;
  int hi = out;
  while (hi > lo && (hi - 1) * stride - pad + kj >= in) --hi;
  return {lo, hi};
}

}  // namespace detail

/// [C, H*W] image -> [C*k*k, out_h*out_w] patch columns.
template <class T>
Mat<T> im2col(const Mat<T>& img, const ConvGeometry& g) {
  const int oh = g.out_h(), ow = g.out_w(), k = g.kernel, s = g.stride;
  Mat<T> cols = Mat<T>::Zero(g.channels * k * k, oh * ow);
  for (int c = 0; c < g.channels; ++c) {
    const T* src = img.row(c).data();
    for (int ki = 0; ki < k; ++ki) {
      const auto [ylo, yhi] = detail::valid_range(ki, g.height, oh, s, g.pad);
      for (int kj = 0; kj < k; ++kj) {
        const auto [xlo, xhi] = detail::valid_range(kj, g.width, ow, s, g.pad);
        T* dst = cols.row((c * k + ki) * k + kj).data();
        for (int oy = ylo; oy < yhi; ++oy) {
          const T* in = src + (oy * s - g.pad + ki) * g.width + (kj - g.pad);
          T* out = dst + oy * ow;
          for (int ox = xlo; ox < xhi; ++ox) out[ox] = in[ox * s];
        }
      }
    }
  }
  return cols;
}

/// Adjoint of im2col: scatter-adds columns back into a [C, H*W] image.
template <class T>
Mat<T> col2im(const Mat<T>& cols, const ConvGeometry& g) {
  const int oh = g.out_h(), ow = g.out_w(), k = g.kernel, s = g.stride;
  Mat<T> img = Mat<T>::Zero(g.channels, g.height * g.width);
  for (int c = 0; c < g.channels; ++c) {
    T* dst = img.row(c).data();
    for (int ki = 0; ki < k; ++ki) {
      const auto [ylo, yhi] = detail::valid_range(ki, g.height, oh, s, g.pad);
      for (int kj = 0; kj < k; ++kj) {
        const auto [xlo, xhi] = detail::valid_range(kj, g.width, ow, s, g.pad);
        const T* src = cols.row((c * k + ki) * k + kj).data();
        for (int oy = ylo; oy < yhi; ++oy) {
          T* out = dst + (oy * s - g.pad + ki) * g.width + (kj - g.pad);
          const T* in = src + oy * ow;
          for (int ox = xlo; ox < xhi; ++ox) out[ox * s] += in[ox];
        }
      }
    }
  }
  return img;
}

/// weight [Cout, Cin*k*k], bias [1, Cout]; x is [Cin, H*W] described by g.
template <class T>
Mat<T> conv2d_forward(const Mat<T>& x, const Mat<T>& weight, const Mat<T>& bias, const ConvGeometry& g) {
  Mat<T> y = weight * im2col(x, g);
  y.colwise() += bias.row(0).transpose();
  return y;
}

template <class T>
Mat<T> conv2d_backward(const Mat<T>& dy, const Mat<T>& x, const Mat<T>& weight, const ConvGeometry& g, Mat<T>& dweight,
                       Mat<T>& dbias) {
  const Mat<T> cols = im2col(x, g);
  dweight.noalias() += dy * cols.transpose();
  dbias += dy.rowwise().sum().transpose();
  return col2im<T>(weight.transpose() * dy, g);
}

/// Transposed convolution. weight [Cin, Cout*k*k]; `out` describes the output
/// image (Cout channels) such that a forward conv over it yields x's size.
template <class T>
Mat<T> conv_transpose2d_forward(const Mat<T>& x, const Mat<T>& weight, const Mat<T>& bias, const ConvGeometry& out) {
  Mat<T> y = col2im<T>(weight.transpose() * x, out);
  y.colwise() += bias.row(0).transpose();
  return y;
}

template <class T>
Mat<T> conv_transpose2d_backward(const Mat<T>& dy, const Mat<T>& x, const Mat<T>& weight, const ConvGeometry& out,
                                 Mat<T>& dweight, Mat<T>& dbias) {
  const Mat<T> dcols = im2col(dy, out);
  dweight.noalias() += x * dcols.transpose();
  dbias += dy.rowwise().sum().transpose();
  return weight * dcols;
}

// ---------------------------------------------------------------------------
// Batch normalization over (batch, spatial) per channel

enum class BnMode {
  kTrain,       // batch statistics, running statistics updated
  kBatchStats,  // batch statistics, running statistics left alone
  kEval,        // running statistics
};

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

template <class T>
struct BatchNormCache {
  Batch<T> xhat;
  std::vector<T> inv_std;
  bool batch_stats = true;
};

/// gamma/beta/running stats are [1, C]; each x[n] is [C, M]. In kTrain mode
/// the updated running statistics are written to the `*_out` tensors when
/// given (they may alias the inputs).
template <class T>
Batch<T> batchnorm_forward(const Batch<T>& x, const Mat<T>& gamma, const Mat<T>& beta, const Mat<T>& running_mean,
                           const Mat<T>& running_var, BnMode mode, BatchNormCache<T>* cache,
                           Mat<T>* running_mean_out = nullptr, Mat<T>* running_var_out = nullptr) {
  const Eigen::Index channels = gamma.cols();
  std::vector<T> mean(channels), inv_std(channels);
  if (mode == BnMode::kEval) {
    for (Eigen::Index c = 0; c < channels; ++c) {
      mean[c] = running_mean(0, c);
      inv_std[c] = T(1) / std::sqrt(running_var(0, c) + T(kBnEps));
    }
  } else {
    const double count = static_cast<double>(x.size()) * static_cast<double>(x.front().cols());
    for (Eigen::Index c = 0; c < channels; ++c) {
      T sum = 0;
      for (const auto& xn : x) sum += xn.row(c).sum();
      const T m = sum / T(count);
      T sq = 0;
      for (const auto& xn : x) sq += (xn.row(c).array() - m).square().sum();
      const T var = sq / T(count);
      mean[c] = m;
      inv_std[c] = T(1) / std::sqrt(var + T(kBnEps));
      if (mode == BnMode::kTrain && running_mean_out && running_var_out) {
        const T unbiased = count > 1 ? sq / T(count - 1) : var;
        (*running_mean_out)(0, c) = T(1 - kBnMomentum) * running_mean(0, c) + T(kBnMomentum) * m;
        (*running_var_out)(0, c) = T(1 - kBnMomentum) * running_var(0, c) + T(kBnMomentum) * unbiased;
      }
    }
  }

  Batch<T> y(x.size());
  if (cache) {
    cache->xhat.resize(x.size());
    cache->inv_std = inv_std;
    cache->batch_stats = mode != BnMode::kEval;
  }
  for (std::size_t n = 0; n < x.size(); ++n) {
    Mat<T> xhat(x[n].rows(), x[n].cols());
    for (Eigen::Index c = 0; c < channels; ++c) xhat.row(c) = (x[n].row(c).array() - mean[c]) * inv_std[c];
    y[n].resize(xhat.rows(), xhat.cols());
    for (Eigen::Index c = 0; c < channels; ++c) y[n].row(c) = xhat.row(c).array() * gamma(0, c) + beta(0, c);
    if (cache) cache->xhat[n] = std::move(xhat);
  }
  return y;
}

template <class T>
Batch<T> batchnorm_backward(const Batch<T>& dy, const BatchNormCache<T>& cache, const Mat<T>& gamma, Mat<T>& dgamma,
                            Mat<T>& dbeta) {
  const Eigen::Index channels = gamma.cols();
  const double count = static_cast<double>(dy.size()) * static_cast<double>(dy.front().cols());
  Batch<T> dx(dy.size());
  for (auto& d : dx) d.resize(dy.front().rows(), dy.front().cols());
  for (Eigen::Index c = 0; c < channels; ++c) {
    T sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t n = 0; n < dy.size(); ++n) {
      sum_dy += dy[n].row(c).sum();
      sum_dy_xhat += (dy[n].row(c).array() * cache.xhat[n].row(c).array()).sum();
    }
    dgamma(0, c) += sum_dy_xhat;
    dbeta(0, c) += sum_dy;
    const T g = gamma(0, c), inv = cache.inv_std[c];
    for (std::size_t n = 0; n < dy.size(); ++n) {
      if (cache.batch_stats) {
        dx[n].row(c) = (g * inv / T(count)) * (T(count) * dy[n].row(c).array() - sum_dy -
                                                 cache.xhat[n].row(c).array() * sum_dy_xhat);
      } else {
        dx[n].row(c) = dy[n].row(c) * (g * inv);
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Elementwise

// Exact (erf) GELU, evaluated with Eigen's packet erf/exp.
template <class T>
Mat<T> gelu_forward(const Mat<T>& x) {
  const auto a = x.array();
  return (T(0.5) * a * (T(1) + (a * T(M_SQRT1_2)).erf())).matrix();
}

template <class T>
Mat<T> gelu_backward(const Mat<T>& dy, const Mat<T>& x) {
  const auto a = x.array();
  const auto cdf = T(0.5) * (T(1) + (a * T(M_SQRT1_2)).erf());
  const auto pdf = (T(-0.5) * a.square()).exp() * T(0.3989422804014327);
  return (dy.array() * (cdf + a * pdf)).matrix();
}

// ---------------------------------------------------------------------------
// Dense layers on [tokens, features]

/// weight [out, in], bias [1, out].
template <class T>
Mat<T> linear_forward(const Mat<T>& x, const Mat<T>& weight, const Mat<T>& bias) {
  Mat<T> y = x * weight.transpose();
  y.rowwise() += bias.row(0);
  return y;
}

template <class T>
Mat<T> linear_backward(const Mat<T>& dy, const Mat<T>& x, const Mat<T>& weight, Mat<T>& dweight, Mat<T>& dbias) {
  dweight.noalias() += dy.transpose() * x;
  dbias += dy.colwise().sum();
  return dy * weight;
}

inline constexpr double kLnEps = 1e-6;

template <class T>
struct LayerNormCache {
  Mat<T> xhat;
  std::vector<T> inv_std;
};

template <class T>
Mat<T> layernorm_forward(const Mat<T>& x, const Mat<T>& gamma, const Mat<T>& beta, LayerNormCache<T>* cache) {
  const Eigen::Index d = x.cols();
  Mat<T> xhat(x.rows(), d);
  std::vector<T> inv_std(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T mean = x.row(r).mean();
    const T var = (x.row(r).array() - mean).square().mean();
    inv_std[r] = T(1) / std::sqrt(var + T(kLnEps));
    xhat.row(r) = (x.row(r).array() - mean) * inv_std[r];
  }
  Mat<T> y = xhat.array().rowwise() * gamma.row(0).array();
  y.rowwise() += beta.row(0);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <class T>
Mat<T> layernorm_backward(const Mat<T>& dy, const LayerNormCache<T>& cache, const Mat<T>& gamma, Mat<T>& dgamma,
                          Mat<T>& dbeta) {
  const auto d = static_cast<double>(dy.cols());
  dgamma += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  dbeta += dy.colwise().sum();
  const Mat<T> dxhat = dy.array().rowwise() * gamma.row(0).array();
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const T s1 = dxhat.row(r).sum();
    const T s2 = (dxhat.row(r).array() * cache.xhat.row(r).array()).sum();
    dx.row(r) = (cache.inv_std[r] / T(d)) * (T(d) * dxhat.row(r).array() - s1 - cache.xhat.row(r).array() * s2);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Multi-head self-attention

template <class T>
struct AttentionCache {
  Mat<T> input;                 // [N, D]
  Mat<T> qkv;                   // [N, 3D]
  std::vector<Mat<T>> probs;    // per head [N, N]
  Mat<T> context;               // [N, D], heads concatenated
};

/// Row-wise softmax.
template <class T>
Mat<T> softmax_rows(const Mat<T>& s) {
  Mat<T> p(s.rows(), s.cols());
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const T m = s.row(r).maxCoeff();
    p.row(r) = (s.row(r).array() - m).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

/// qkv_weight [3D, D] packs query, key, value projections; proj_weight [D, D].
template <class T>
Mat<T> attention_forward(const Mat<T>& x, const Mat<T>& qkv_weight, const Mat<T>& qkv_bias, const Mat<T>& proj_weight,
                         const Mat<T>& proj_bias, int n_heads, AttentionCache<T>* cache,
                         std::vector<Mat<T>>* probs_out = nullptr) {
  const Eigen::Index n = x.rows(), d = x.cols(), hd = d / n_heads;
  const T scale = T(1) / std::sqrt(T(hd));
  Mat<T> qkv = linear_forward(x, qkv_weight, qkv_bias);
  Mat<T> context(n, d);
  std::vector<Mat<T>> probs(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    const auto q = qkv.middleCols(h * hd, hd);
    const auto k = qkv.middleCols(d + h * hd, hd);
    const auto v = qkv.middleCols(2 * d + h * hd, hd);
    probs[h] = softmax_rows<T>((q * k.transpose()) * scale);
    context.middleCols(h * hd, hd).noalias() = probs[h] * v;
  }
  Mat<T> y = linear_forward(context, proj_weight, proj_bias);
  if (probs_out) *probs_out = probs;
  if (cache) {
    cache->input = x;
    cache->qkv = std::move(qkv);
    cache->probs = std::move(probs);
    cache->context = std::move(context);
  }
  return y;
}

template <class T>
Mat<T> attention_backward(const Mat<T>& dy, const AttentionCache<T>& cache, const Mat<T>& qkv_weight,
                          const Mat<T>& proj_weight, int n_heads, Mat<T>& dqkv_weight, Mat<T>& dqkv_bias,
                          Mat<T>& dproj_weight, Mat<T>& dproj_bias) {
  const Eigen::Index n = cache.input.rows(), d = cache.input.cols(), hd = d / n_heads;
  const T scale = T(1) / std::sqrt(T(hd));
  const Mat<T> dcontext = linear_backward(dy, cache.context, proj_weight, dproj_weight, dproj_bias);
  Mat<T> dqkv(n, 3 * d);
  for (int h = 0; h < n_heads; ++h) {
    const auto q = cache.qkv.middleCols(h * hd, hd);
    const auto k = cache.qkv.middleCols(d + h * hd, hd);
    const auto v = cache.qkv.middleCols(2 * d + h * hd, hd);
    const Mat<T>& p = cache.probs[h];
    const auto dctx = dcontext.middleCols(h * hd, hd);
    dqkv.middleCols(2 * d + h * hd, hd).noalias() = p.transpose() * dctx;
    const Mat<T> dp = dctx * v.transpose();
    Mat<T> ds = p.cwiseProduct(dp);
    const Eigen::Matrix<T, Eigen::Dynamic, 1> row_dot = ds.rowwise().sum();
    ds -= p.cwiseProduct(row_dot.replicate(1, p.cols()));
    ds *= scale;
    dqkv.middleCols(h * hd, hd).noalias() = ds * k;
    dqkv.middleCols(d + h * hd, hd).noalias() = ds.transpose() * q;
  }
  return linear_backward(dqkv, cache.input, qkv_weight, dqkv_weight, dqkv_bias);
}

}  // namespace impact::nn

#endif  // IMPACT_LAYERS_HPP
