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

#ifndef IMPACT_MODEL_HPP
#define IMPACT_MODEL_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "json.hpp"

#include "impact/error.hpp"
#include "impact/layers.hpp"
#include "impact/random.hpp"
#include "impact/tensor.hpp"

namespace impact {

using nn::BnMode;

struct ModelConfig {
  int input_size = 128;  // spectrogram is input_size x input_size (mel x frame)
  int cnn_channels = 32;
  int patch_size = 16;
  int embed_dim = 384;
  int n_layers = 8;
  int n_heads = 16;
  int mlp_ratio = 4;
  int decoder_proj_dim = 512;
  std::vector<int> decoder_channels{128, 128, 64, 32, 16, 1};

  int feature_size() const { return input_size / 2; }
  int grid() const { return feature_size() / patch_size; }
  int n_patches() const { return grid() * grid(); }
  int patch_dim() const { return cnn_channels * patch_size * patch_size; }
  int mlp_dim() const { return embed_dim * mlp_ratio; }
  int head_dim() const { return embed_dim / n_heads; }
  /// Side length of the square block each token occupies in the decoder base map.
  int token_side() const {
    const int area = decoder_proj_dim / decoder_channels.front();
    return static_cast<int>(std::lround(std::sqrt(static_cast<double>(area))));
  }
  int decoder_base() const { return grid() * token_side(); }
  int n_upsample() const { return static_cast<int>(decoder_channels.size()) - 2; }
  /// Spectrogram region (per side) covered by one patch.
  int region() const { return input_size / grid(); }

  /// Throws InvalidConfig naming the offending field (prefixed by `path`).
  void validate(const std::string& path = "model") const {
    auto check = [&](bool ok, const std::string& field, const std::string& why) {
      require(ok, ErrorCode::kInvalidConfig, path + "." + field + ": " + why);
    };
    check(input_size > 0 && input_size % 2 == 0, "input_size", "must be a positive even number");
    check(cnn_channels > 0, "cnn_channels", "must be positive");
    check(patch_size > 0 && feature_size() % patch_size == 0, "patch_size", "must evenly tile the CNN feature map");
    check(embed_dim > 0 && embed_dim % 4 == 0, "embed_dim", "must be a positive multiple of 4");
    check(n_layers >= 0, "n_layers", "must be non-negative");
    check(n_heads > 0 && embed_dim % n_heads == 0, "n_heads", "must divide embed_dim");
    check(mlp_ratio > 0, "mlp_ratio", "must be positive");
    check(decoder_channels.size() >= 2, "decoder_channels", "needs at least one upsampling stage and an output layer");
    for (int c : decoder_channels) check(c > 0, "decoder_channels", "channel counts must be positive");
    const int side = token_side();
    check(decoder_proj_dim > 0 && side * side * decoder_channels.front() == decoder_proj_dim, "decoder_proj_dim",
          "must equal decoder_channels[0] * s * s for an integer token side s");
    check(decoder_base() << n_upsample() == input_size, "decoder_channels",
          "upsampling stages do not reconstruct the input size");
  }

  static ModelConfig tiny() {
    ModelConfig c;
    c.input_size = 64;
    c.cnn_channels = 2;
    c.embed_dim = 8;
    c.n_layers = 1;
    c.n_heads = 2;
    c.decoder_proj_dim = 16;
    c.decoder_channels = {4, 4, 3, 2, 2, 1};
    return c;
  }

  /// Full 128 x 128 input with a very small network; for smoke runs.
  static ModelConfig micro() {
    ModelConfig c;
    c.cnn_channels = 4;
    c.embed_dim = 32;
    c.n_layers = 2;
    c.n_heads = 4;
    c.decoder_proj_dim = 32;
    c.decoder_channels = {8, 8, 8, 4, 4, 1};
    return c;
  }

  /// Roughly a third of the default parameter count and a fifth of its
  /// training cost; same depth, patching and decoder geometry.
  static ModelConfig quarter_scale() {
    ModelConfig c;
    c.embed_dim = 192;
    c.n_heads = 8;
    c.decoder_proj_dim = 256;
    c.decoder_channels = {64, 64, 32, 16, 8, 1};
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"input_size", c.input_size},         {"cnn_channels", c.cnn_channels},
       {"patch_size", c.patch_size},         {"embed_dim", c.embed_dim},
       {"n_layers", c.n_layers},             {"n_heads", c.n_heads},
       {"mlp_ratio", c.mlp_ratio},           {"decoder_proj_dim", c.decoder_proj_dim},
       {"decoder_channels", c.decoder_channels}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("input_size", c.input_size);
  get("cnn_channels", c.cnn_channels);
  get("patch_size", c.patch_size);
  get("embed_dim", c.embed_dim);
  get("n_layers", c.n_layers);
  get("n_heads", c.n_heads);
  get("mlp_ratio", c.mlp_ratio);
  get("decoder_proj_dim", c.decoder_proj_dim);
  get("decoder_channels", c.decoder_channels);
}

// ---------------------------------------------------------------------------
// Parameters

enum class TensorRole {
  kWeight,       // trainable, weight decay applied
  kParameter,    // trainable, no weight decay (biases, norms, tokens)
  kRunningStat,  // batch-norm running statistics
  kFixed,        // positional table
};

inline bool is_trainable(TensorRole role) { return role == TensorRole::kWeight || role == TensorRole::kParameter; }

template <class T>
struct ConvBnParams {
  Mat<T> weight, bias, gamma, beta, running_mean, running_var;

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + ".weight", self.weight, TensorRole::kWeight);
    f(prefix + ".bias", self.bias, TensorRole::kParameter);
    f(prefix + ".bn.gamma", self.gamma, TensorRole::kParameter);
    f(prefix + ".bn.beta", self.beta, TensorRole::kParameter);
    f(prefix + ".bn.running_mean", self.running_mean, TensorRole::kRunningStat);
    f(prefix + ".bn.running_var", self.running_var, TensorRole::kRunningStat);
  }
};

template <class T>
struct BlockParams {
  Mat<T> ln1_gamma, ln1_beta, qkv_weight, qkv_bias, proj_weight, proj_bias;
  Mat<T> ln2_gamma, ln2_beta, fc1_weight, fc1_bias, fc2_weight, fc2_bias;

  template <class Self, class F>
  static void visit(Self& self, const std::string& p, F&& f) {
    f(p + ".ln1.gamma", self.ln1_gamma, TensorRole::kParameter);
    f(p + ".ln1.beta", self.ln1_beta, TensorRole::kParameter);
    f(p + ".attn.qkv.weight", self.qkv_weight, TensorRole::kWeight);
    f(p + ".attn.qkv.bias", self.qkv_bias, TensorRole::kParameter);
    f(p + ".attn.proj.weight", self.proj_weight, TensorRole::kWeight);
    f(p + ".attn.proj.bias", self.proj_bias, TensorRole::kParameter);
    f(p + ".ln2.gamma", self.ln2_gamma, TensorRole::kParameter);
    f(p + ".ln2.beta", self.ln2_beta, TensorRole::kParameter);
    f(p + ".mlp.fc1.weight", self.fc1_weight, TensorRole::kWeight);
    f(p + ".mlp.fc1.bias", self.fc1_bias, TensorRole::kParameter);
    f(p + ".mlp.fc2.weight", self.fc2_weight, TensorRole::kWeight);
    f(p + ".mlp.fc2.bias", self.fc2_bias, TensorRole::kParameter);
  }
};

template <class T>
struct Parameters {
  ModelConfig config;
  ConvBnParams<T> encoder;
  Mat<T> patch_weight, patch_bias;
  Mat<T> pos_table;  // [1 + n_patches, D]; row 0 belongs to CLS
  Mat<T> cls_token, mask_token;
  std::vector<BlockParams<T>> blocks;
  Mat<T> norm_gamma, norm_beta;
  Mat<T> decoder_proj_weight, decoder_proj_bias;
  std::vector<ConvBnParams<T>> decoder_stages;
  Mat<T> output_weight, output_bias;

  /// Calls f(name, tensor, role) for every tensor in a fixed order.
  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    ConvBnParams<T>::visit(self.encoder, "encoder.conv", f);
    f("patch_embed.weight", self.patch_weight, TensorRole::kWeight);
    f("patch_embed.bias", self.patch_bias, TensorRole::kParameter);
    f("pos_table", self.pos_table, TensorRole::kFixed);
    f("cls_token", self.cls_token, TensorRole::kParameter);
    f("mask_token", self.mask_token, TensorRole::kParameter);
    for (std::size_t l = 0; l < self.blocks.size(); ++l)
      BlockParams<T>::visit(self.blocks[l], "blocks." + std::to_string(l), f);
    f("norm.gamma", self.norm_gamma, TensorRole::kParameter);
    f("norm.beta", self.norm_beta, TensorRole::kParameter);
    f("decoder.proj.weight", self.decoder_proj_weight, TensorRole::kWeight);
    f("decoder.proj.bias", self.decoder_proj_bias, TensorRole::kParameter);
    for (std::size_t s = 0; s < self.decoder_stages.size(); ++s)
      ConvBnParams<T>::visit(self.decoder_stages[s], "decoder.up." + std::to_string(s), f);
    f("decoder.out.weight", self.output_weight, TensorRole::kWeight);
    f("decoder.out.bias", self.output_bias, TensorRole::kParameter);
  }
};

/// Fixed 2D sine-cosine table over the patch grid. Half of the channels
/// encode the row, half the column; the CLS row is zero.
template <class T>
Mat<T> sincos_position_table(int grid, int dim) {
  Mat<T> table = Mat<T>::Zero(1 + grid * grid, dim);
  const int quarter = dim / 4;
  for (int gi = 0; gi < grid; ++gi)
    for (int gj = 0; gj < grid; ++gj) {
      const int row = 1 + gi * grid + gj;
      for (int i = 0; i < quarter; ++i) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / quarter);
        table(row, i) = T(std::sin(gi * omega));
        table(row, quarter + i) = T(std::cos(gi * omega));
        table(row, 2 * quarter + i) = T(std::sin(gj * omega));
        table(row, 3 * quarter + i) = T(std::cos(gj * omega));
      }
    }
  return table;
}

/// All tensors allocated with their shapes and zero-filled.
template <class T>
Parameters<T> zero_parameters(const ModelConfig& c) {
  c.validate();
  Parameters<T> p;
  p.config = c;
  const int d = c.embed_dim;
  auto conv_bn = [](int rows, int cols, int channels) {
    ConvBnParams<T> cb;
    cb.weight = Mat<T>::Zero(rows, cols);
    cb.bias = Mat<T>::Zero(1, channels);
    cb.gamma = Mat<T>::Zero(1, channels);
    cb.beta = Mat<T>::Zero(1, channels);
    cb.running_mean = Mat<T>::Zero(1, channels);
    cb.running_var = Mat<T>::Zero(1, channels);
    return cb;
  };
  p.encoder = conv_bn(c.cnn_channels, 9, c.cnn_channels);
  p.patch_weight = Mat<T>::Zero(d, c.patch_dim());
  p.patch_bias = Mat<T>::Zero(1, d);
  p.pos_table = Mat<T>::Zero(1 + c.n_patches(), d);
  p.cls_token = Mat<T>::Zero(1, d);
  p.mask_token = Mat<T>::Zero(1, d);
  p.blocks.resize(static_cast<std::size_t>(c.n_layers));
  for (auto& b : p.blocks) {
    b.ln1_gamma = b.ln1_beta = b.ln2_gamma = b.ln2_beta = Mat<T>::Zero(1, d);
    b.qkv_weight = Mat<T>::Zero(3 * d, d);
    b.qkv_bias = Mat<T>::Zero(1, 3 * d);
    b.proj_weight = Mat<T>::Zero(d, d);
    b.proj_bias = Mat<T>::Zero(1, d);
    b.fc1_weight = Mat<T>::Zero(c.mlp_dim(), d);
    b.fc1_bias = Mat<T>::Zero(1, c.mlp_dim());
    b.fc2_weight = Mat<T>::Zero(d, c.mlp_dim());
    b.fc2_bias = Mat<T>::Zero(1, d);
  }
  p.norm_gamma = p.norm_beta = Mat<T>::Zero(1, d);
  p.decoder_proj_weight = Mat<T>::Zero(c.decoder_proj_dim, d);
  p.decoder_proj_bias = Mat<T>::Zero(1, c.decoder_proj_dim);
  const auto& ch = c.decoder_channels;
  for (int s = 0; s < c.n_upsample(); ++s) p.decoder_stages.push_back(conv_bn(ch[s], ch[s + 1] * 16, ch[s + 1]));
  const int last_in = ch[ch.size() - 2], last_out = ch.back();
  p.output_weight = Mat<T>::Zero(last_out, last_in * 9);
  p.output_bias = Mat<T>::Zero(1, last_out);
  return p;
}

/// Same structure as `like`, every tensor zero. Used for gradients and
/// optimizer moments.
template <class T>
Parameters<T> zeros_like(const Parameters<T>& like) {
  Parameters<T> out = like;
  out.visit([](const std::string&, Mat<T>& m, TensorRole) { m.setZero(); });
  return out;
}

inline constexpr double kInitStddev = 0.02;

/// Weights and CLS/mask embeddings ~ N(0, 0.02^2) truncated at 2 sigma;
/// biases 0; norm and batch-norm scales 1, shifts 0; running variance 1.
template <class T>
Parameters<T> init_parameters(const ModelConfig& config, std::uint64_t seed) {
  Parameters<T> p = zero_parameters<T>(config);
  Rng rng(seed);
  p.visit([&](const std::string& name, Mat<T>& m, TensorRole role) {
    const bool is_scale = name.ends_with(".gamma") || name.ends_with("running_var");
    if (role == TensorRole::kWeight || name == "cls_token" || name == "mask_token") {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = T(rng.truncated_normal(kInitStddev));
    } else if (is_scale) {
      m.setOnes();
    }
  });
  p.pos_table = sincos_position_table<T>(config.grid(), config.embed_dim);
  return p;
}

template <class T>
std::size_t param_count(const Parameters<T>& p) {
  std::size_t total = 0;
  p.visit([&](const std::string&, const Mat<T>& m, TensorRole role) {
    if (is_trainable(role)) total += static_cast<std::size_t>(m.size());
  });
  return total;
}

template <class T>
bool same_structure(const Parameters<T>& a, const Parameters<T>& b) {
  std::vector<std::pair<std::string, std::pair<Eigen::Index, Eigen::Index>>> sa, sb;
  a.visit([&](const std::string& n, const Mat<T>& m, TensorRole) { sa.push_back({n, {m.rows(), m.cols()}}); });
  b.visit([&](const std::string& n, const Mat<T>& m, TensorRole) { sb.push_back({n, {m.rows(), m.cols()}}); });
  return sa == sb;
}

/// Tensor pointers in visit order, for zipping two parameter sets.
template <class T>
std::vector<Mat<T>*> tensor_list(Parameters<T>& p) {
  std::vector<Mat<T>*> out;
  p.visit([&](const std::string&, Mat<T>& m, TensorRole) { out.push_back(&m); });
  return out;
}

template <class T>
std::vector<const Mat<T>*> tensor_list(const Parameters<T>& p) {
  std::vector<const Mat<T>*> out;
  p.visit([&](const std::string&, const Mat<T>& m, TensorRole) { out.push_back(&m); });
  return out;
}

template <class To, class From>
Parameters<To> cast_parameters(const Parameters<From>& p) {
  Parameters<To> out = zero_parameters<To>(p.config);
  auto src = tensor_list(p);
  auto dst = tensor_list(out);
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = src[i]->template cast<To>();
  return out;
}

// ---------------------------------------------------------------------------
// Building blocks shared by the inference and training paths

namespace model_detail {

inline nn::ConvGeometry encoder_geometry(const ModelConfig& c) {
  return {1, c.input_size, c.input_size, 3, 2, 1};
}

/// Geometry of the output image of upsampling stage s (kernel 4, stride 2, pad 1).
inline nn::ConvGeometry upsample_geometry(const ModelConfig& c, int s) {
  const int side = c.decoder_base() << (s + 1);
  return {c.decoder_channels[static_cast<std::size_t>(s) + 1], side, side, 4, 2, 1};
}

inline nn::ConvGeometry output_geometry(const ModelConfig& c) {
  const auto& ch = c.decoder_channels;
  return {ch[ch.size() - 2], c.input_size, c.input_size, 3, 1, 1};
}

/// Rows of flattened (channel, row, col) patches for the given grid positions.
template <class T>
Mat<T> extract_patches(const Mat<T>& feat, const ModelConfig& c, const std::vector<int>& positions) {
  const int p = c.patch_size, side = c.feature_size(), grid = c.grid();
  Mat<T> out(static_cast<Eigen::Index>(positions.size()), c.patch_dim());
  for (std::size_t r = 0; r < positions.size(); ++r) {
    const int gi = positions[r] / grid, gj = positions[r] % grid;
    T* dst = out.row(static_cast<Eigen::Index>(r)).data();
    for (int ch = 0; ch < c.cnn_channels; ++ch) {
      const T* src = feat.row(ch).data();
      for (int a = 0; a < p; ++a)
        for (int b = 0; b < p; ++b) *dst++ = src[(gi * p + a) * side + gj * p + b];
    }
  }
  return out;
}

template <class T>
void scatter_patches(const Mat<T>& dpatches, const ModelConfig& c, const std::vector<int>& positions, Mat<T>& dfeat) {
  const int p = c.patch_size, side = c.feature_size(), grid = c.grid();
  for (std::size_t r = 0; r < positions.size(); ++r) {
    const int gi = positions[r] / grid, gj = positions[r] % grid;
    const T* src = dpatches.row(static_cast<Eigen::Index>(r)).data();
    for (int ch = 0; ch < c.cnn_channels; ++ch) {
      T* dst = dfeat.row(ch).data();
      for (int a = 0; a < p; ++a)
        for (int b = 0; b < p; ++b) dst[(gi * p + a) * side + gj * p + b] += *src++;
    }
  }
}

/// [n_patches, proj_dim] -> [C0, base*base]: each token fills a side x side block.
template <class T>
Mat<T> tile_tokens(const Mat<T>& proj, const ModelConfig& c) {
  const int s = c.token_side(), base = c.decoder_base(), grid = c.grid(), c0 = c.decoder_channels.front();
  Mat<T> map(c0, base * base);
  for (int t = 0; t < c.n_patches(); ++t) {
    const int gi = t / grid, gj = t % grid;
    for (int ch = 0; ch < c0; ++ch)
      for (int a = 0; a < s; ++a)
        for (int b = 0; b < s; ++b) map(ch, (gi * s + a) * base + gj * s + b) = proj(t, (ch * s + a) * s + b);
  }
  return map;
}

template <class T>
Mat<T> untile_tokens(const Mat<T>& dmap, const ModelConfig& c) {
  const int s = c.token_side(), base = c.decoder_base(), grid = c.grid(), c0 = c.decoder_channels.front();
  Mat<T> dproj(c.n_patches(), c.decoder_proj_dim);
  for (int t = 0; t < c.n_patches(); ++t) {
    const int gi = t / grid, gj = t % grid;
    for (int ch = 0; ch < c0; ++ch)
      for (int a = 0; a < s; ++a)
        for (int b = 0; b < s; ++b) dproj(t, (ch * s + a) * s + b) = dmap(ch, (gi * s + a) * base + gj * s + b);
  }
  return dproj;
}

template <class T>
struct BlockCache {
  nn::LayerNormCache<T> ln1, ln2;
  nn::AttentionCache<T> attn;
  Mat<T> ln2_out, fc1_out, gelu_out;
};

template <class T>
Mat<T> block_forward(const BlockParams<T>& b, const Mat<T>& x, int n_heads, std::type_identity_t<BlockCache<T>>* cache,
                     std::type_identity_t<std::vector<Mat<T>>>* probs = nullptr) {
  const Mat<T> a = nn::layernorm_forward(x, b.ln1_gamma, b.ln1_beta, cache ? &cache->ln1 : nullptr);
  Mat<T> h = x + nn::attention_forward(a, b.qkv_weight, b.qkv_bias, b.proj_weight, b.proj_bias, n_heads,
                                       cache ? &cache->attn : nullptr, probs);
  Mat<T> m = nn::layernorm_forward(h, b.ln2_gamma, b.ln2_beta, cache ? &cache->ln2 : nullptr);
  Mat<T> f = nn::linear_forward(m, b.fc1_weight, b.fc1_bias);
  Mat<T> g = nn::gelu_forward(f);
  Mat<T> y = h + nn::linear_forward(g, b.fc2_weight, b.fc2_bias);
  if (cache) {
    cache->ln2_out = std::move(m);
    cache->fc1_out = std::move(f);
    cache->gelu_out = std::move(g);
  }
  return y;
}

template <class T>
Mat<T> block_backward(const BlockParams<T>& b, const Mat<T>& dy, const BlockCache<T>& cache, int n_heads,
                      BlockParams<T>& g) {
  Mat<T> dh = dy;
  const Mat<T> dgelu = nn::linear_backward(dy, cache.gelu_out, b.fc2_weight, g.fc2_weight, g.fc2_bias);
  const Mat<T> dfc1 = nn::gelu_backward(dgelu, cache.fc1_out);
  const Mat<T> dm = nn::linear_backward(dfc1, cache.ln2_out, b.fc1_weight, g.fc1_weight, g.fc1_bias);
  dh += nn::layernorm_backward(dm, cache.ln2, b.ln2_gamma, g.ln2_gamma, g.ln2_beta);
  const Mat<T> da = nn::attention_backward(dh, cache.attn, b.qkv_weight, b.proj_weight, n_heads, g.qkv_weight,
                                           g.qkv_bias, g.proj_weight, g.proj_bias);
  return dh + nn::layernorm_backward(da, cache.ln1, b.ln1_gamma, g.ln1_gamma, g.ln1_beta);
}

}  // namespace model_detail

// ---------------------------------------------------------------------------
// Inference-path operations

template <class T>
struct TokenSequence {
  Mat<T> tokens;           // [1 + n_patches, D]; row 0 is CLS
  int grid = 0;
  std::vector<bool> mask;  // per patch; true = hidden from the encoder

  int n_patches() const { return grid * grid; }
  std::vector<int> visible_positions() const {
    std::vector<int> out;
    for (int p = 0; p < n_patches(); ++p)
      if (!mask[static_cast<std::size_t>(p)]) out.push_back(p);
    return out;
  }
};

template <class T>
struct TransformerOutput {
  std::vector<Mat<T>> layers;  // every block's output, [tokens, D]
  Mat<T> final;                // last block output after the final norm
  std::vector<int> positions;  // grid position of rows 1.. (row 0 is CLS)
};

/// Batched CNN encoder over [1, H*W] spectrograms. In kTrain mode updated
/// batch-norm running statistics go to `stats` when given.
template <class T>
Batch<T> cnn_encode_batch(const Parameters<T>& params, const Batch<T>& specs, BnMode mode,
                          nn::BatchNormCache<T>* bn_cache = nullptr, Batch<T>* pre_gelu = nullptr,
                          Parameters<T>* stats = nullptr) {
  const auto g = model_detail::encoder_geometry(params.config);
  Batch<T> conv(specs.size());
  for (std::size_t n = 0; n < specs.size(); ++n) {
    require(specs[n].size() == static_cast<Eigen::Index>(params.config.input_size) * params.config.input_size,
            ErrorCode::kShapeMismatch, "spectrogram does not match model input size");
    conv[n] = nn::conv2d_forward(specs[n], params.encoder.weight, params.encoder.bias, g);
  }
  Batch<T> z = nn::batchnorm_forward(conv, params.encoder.gamma, params.encoder.beta, params.encoder.running_mean,
                                     params.encoder.running_var, mode, bn_cache,
                                     stats ? &stats->encoder.running_mean : nullptr,
                                     stats ? &stats->encoder.running_var : nullptr);
  Batch<T> out(z.size());
  for (std::size_t n = 0; n < z.size(); ++n) out[n] = nn::gelu_forward(z[n]);
  if (pre_gelu) *pre_gelu = std::move(z);
  return out;
}

/// Spectrogram [H, W] -> feature map [C, (H/2)*(W/2)].
template <class T>
Mat<T> cnn_encode(const Parameters<T>& params, const std::type_identity_t<Mat<T>>& spec,
                  BnMode mode = BnMode::kEval) {
  const auto& c = params.config;
  require(spec.rows() == c.input_size && spec.cols() == c.input_size, ErrorCode::kShapeMismatch,
          "expected a " + std::to_string(c.input_size) + "x" + std::to_string(c.input_size) + " spectrogram");
  Mat<T> flat = Eigen::Map<const Mat<T>>(spec.data(), 1, spec.size());
  return cnn_encode_batch(params, Batch<T>{flat}, mode).front();
}

/// Feature map -> CLS + all patch tokens with positional codes added.
template <class T>
TokenSequence<T> patchify_embed(const Parameters<T>& params, const std::type_identity_t<Mat<T>>& feat) {
  const auto& c = params.config;
  require(feat.rows() == c.cnn_channels && feat.cols() == c.feature_size() * c.feature_size(),
          ErrorCode::kShapeMismatch, "feature map shape does not match the model config");
  std::vector<int> all(static_cast<std::size_t>(c.n_patches()));
  for (int p = 0; p < c.n_patches(); ++p) all[p] = p;
  TokenSequence<T> seq;
  seq.grid = c.grid();
  seq.mask.assign(all.size(), false);
  seq.tokens.resize(1 + c.n_patches(), c.embed_dim);
  seq.tokens.row(0) = params.cls_token + params.pos_table.row(0);
  seq.tokens.bottomRows(c.n_patches()) =
      nn::linear_forward(model_detail::extract_patches(feat, c, all), params.patch_weight, params.patch_bias) +
      params.pos_table.bottomRows(c.n_patches());
  return seq;
}

template <class T>
TransformerOutput<T> transformer_forward(const Parameters<T>& params, const TokenSequence<T>& seq, bool visible_only,
                                         std::vector<std::vector<Mat<T>>>* attention_probs = nullptr) {
  const auto& c = params.config;
  require(seq.tokens.cols() == c.embed_dim, ErrorCode::kShapeMismatch, "token width does not match embed_dim");
  TransformerOutput<T> out;
  Mat<T> x;
  if (visible_only) {
    out.positions = seq.visible_positions();
    x.resize(1 + static_cast<Eigen::Index>(out.positions.size()), c.embed_dim);
    x.row(0) = seq.tokens.row(0);
    for (std::size_t r = 0; r < out.positions.size(); ++r)
      x.row(1 + static_cast<Eigen::Index>(r)) = seq.tokens.row(1 + out.positions[r]);
  } else {
    for (int p = 0; p < seq.n_patches(); ++p) out.positions.push_back(p);
    x = seq.tokens;
  }
  for (const auto& block : params.blocks) {
    std::vector<Mat<T>> probs;
    x = model_detail::block_forward(block, x, c.n_heads, nullptr, attention_probs ? &probs : nullptr);
    if (attention_probs) attention_probs->push_back(std::move(probs));
    out.layers.push_back(x);
  }
  out.final = nn::layernorm_forward<T>(x, params.norm_gamma, params.norm_beta, nullptr);
  return out;
}

/// Decoder input: visible rows as given, masked positions replaced by the
/// mask embedding plus that position's fixed code.
template <class T>
Mat<T> decoder_tokens(const Parameters<T>& params, const Mat<T>& encoded, const std::vector<int>& positions) {
  const auto& c = params.config;
  Mat<T> tokens(c.n_patches(), c.embed_dim);
  for (int p = 0; p < c.n_patches(); ++p) tokens.row(p) = params.mask_token + params.pos_table.row(1 + p);
  for (std::size_t r = 0; r < positions.size(); ++r)
    tokens.row(positions[r]) = encoded.row(1 + static_cast<Eigen::Index>(r));
  return tokens;
}

template <class T>
struct DecoderTape {
  std::vector<Mat<T>> tokens;  // [n_patches, D]
  struct Stage {
    Batch<T> input;
    nn::BatchNormCache<T> bn;
    Batch<T> pre_gelu;
  };
  std::vector<Stage> stages;
  Batch<T> output_input;
};

/// Batched decoder over [n_patches, D] token matrices -> [1, H*W] maps.
template <class T>
Batch<T> cnn_decode_batch(const Parameters<T>& params, const std::vector<Mat<T>>& tokens, BnMode mode,
                          DecoderTape<T>* tape = nullptr, Parameters<T>* stats = nullptr) {
  const auto& c = params.config;
  Batch<T> x(tokens.size());
  for (std::size_t n = 0; n < tokens.size(); ++n) {
    require(tokens[n].rows() == c.n_patches() && tokens[n].cols() == c.embed_dim, ErrorCode::kShapeMismatch,
            "decoder expects one token per patch");
    x[n] = model_detail::tile_tokens(nn::linear_forward(tokens[n], params.decoder_proj_weight, params.decoder_proj_bias),
                                     c);
  }
  if (tape) {
    tape->tokens = tokens;
    tape->stages.assign(params.decoder_stages.size(), {});
  }
  for (std::size_t s = 0; s < params.decoder_stages.size(); ++s) {
    const auto& st = params.decoder_stages[s];
    const auto g = model_detail::upsample_geometry(c, static_cast<int>(s));
    Batch<T> conv(x.size());
    for (std::size_t n = 0; n < x.size(); ++n) conv[n] = nn::conv_transpose2d_forward(x[n], st.weight, st.bias, g);
    auto* stage = tape ? &tape->stages[s] : nullptr;
    Batch<T> z = nn::batchnorm_forward(conv, st.gamma, st.beta, st.running_mean, st.running_var, mode,
                                       stage ? &stage->bn : nullptr,
                                       stats ? &stats->decoder_stages[s].running_mean : nullptr,
                                       stats ? &stats->decoder_stages[s].running_var : nullptr);
    Batch<T> y(z.size());
    for (std::size_t n = 0; n < z.size(); ++n) y[n] = nn::gelu_forward(z[n]);
    if (stage) {
      stage->input = std::move(x);
      stage->pre_gelu = std::move(z);
    }
    x = std::move(y);
  }
  const auto og = model_detail::output_geometry(c);
  Batch<T> out(x.size());
  for (std::size_t n = 0; n < x.size(); ++n) out[n] = nn::conv2d_forward(x[n], params.output_weight, params.output_bias, og);
  if (tape) tape->output_input = std::move(x);
  return out;
}

/// Reconstruction [H, W] from a token sequence (CLS row ignored). Masked
/// positions are filled from the mask embedding.
template <class T>
Mat<T> cnn_decode(const Parameters<T>& params, const TokenSequence<T>& seq, BnMode mode = BnMode::kEval) {
  const auto& c = params.config;
  require(seq.tokens.cols() == c.embed_dim &&
              (seq.tokens.rows() == c.n_patches() || seq.tokens.rows() == c.n_patches() + 1),
          ErrorCode::kShapeMismatch, "decoder expects a full token sequence");
  Mat<T> encoded(1 + c.n_patches(), c.embed_dim);
  encoded.bottomRows(c.n_patches()) = seq.tokens.bottomRows(c.n_patches());
  encoded.row(0).setZero();
  std::vector<int> visible;
  for (int p = 0; p < c.n_patches(); ++p)
    if (seq.mask.empty() || !seq.mask[static_cast<std::size_t>(p)]) visible.push_back(p);
  Mat<T> compact(1 + static_cast<Eigen::Index>(visible.size()), c.embed_dim);
  compact.row(0).setZero();
  for (std::size_t r = 0; r < visible.size(); ++r) compact.row(1 + static_cast<Eigen::Index>(r)) = encoded.row(1 + visible[r]);
  const Mat<T> flat = cnn_decode_batch(params, {decoder_tokens(params, compact, visible)}, mode).front();
  return Eigen::Map<const Mat<T>>(flat.data(), c.input_size, c.input_size);
}

// ---------------------------------------------------------------------------
// Batched student pass with a tape for backpropagation

template <class T>
struct StudentTape {
  Batch<T> specs;
  nn::BatchNormCache<T> encoder_bn;
  Batch<T> encoder_pre_gelu;
  std::vector<std::vector<int>> visible;
  std::vector<Mat<T>> patches;  // visible patches, [V, patch_dim]
  std::vector<std::vector<model_detail::BlockCache<T>>> blocks;
  std::vector<nn::LayerNormCache<T>> final_norm;
  DecoderTape<T> decoder;
};

template <class T>
struct StudentOutput {
  Batch<T> recon;            // [1, H*W] per clip
  std::vector<Mat<T>> cls;   // [1, D] final-normed CLS per clip
};

/// Masked student pass. `stats` receives updated batch-norm running
/// statistics in kTrain mode; it may be the same object as `params`.
template <class T>
StudentOutput<T> student_forward(const Parameters<T>& params, const Batch<T>& specs,
                                 const std::vector<std::vector<bool>>& masks, BnMode mode, StudentTape<T>* tape,
                                 Parameters<T>* stats = nullptr) {
  const auto& c = params.config;
  const std::size_t batch = specs.size();
  require(masks.size() == batch, ErrorCode::kShapeMismatch, "one mask per clip required");
  Batch<T> feats = cnn_encode_batch(params, specs, mode, tape ? &tape->encoder_bn : nullptr,
                                    tape ? &tape->encoder_pre_gelu : nullptr, stats);
  if (tape) {
    tape->specs = specs;
    tape->visible.assign(batch, {});
    tape->patches.assign(batch, {});
    tape->blocks.assign(batch, {});
    tape->final_norm.assign(batch, {});
  }
  StudentOutput<T> out;
  std::vector<Mat<T>> dec_tokens(batch);
  for (std::size_t n = 0; n < batch; ++n) {
    require(masks[n].size() == static_cast<std::size_t>(c.n_patches()), ErrorCode::kShapeMismatch,
            "mask length must equal the patch count");
    std::vector<int> visible;
    for (int p = 0; p < c.n_patches(); ++p)
      if (!masks[n][static_cast<std::size_t>(p)]) visible.push_back(p);
    Mat<T> patches = model_detail::extract_patches(feats[n], c, visible);
    Mat<T> x(1 + static_cast<Eigen::Index>(visible.size()), c.embed_dim);
    x.row(0) = params.cls_token + params.pos_table.row(0);
    if (!visible.empty()) {
      Mat<T> emb = nn::linear_forward(patches, params.patch_weight, params.patch_bias);
      for (std::size_t r = 0; r < visible.size(); ++r)
        x.row(1 + static_cast<Eigen::Index>(r)) = emb.row(static_cast<Eigen::Index>(r)) + params.pos_table.row(1 + visible[r]);
    }
    std::vector<model_detail::BlockCache<T>> caches(params.blocks.size());
    for (std::size_t l = 0; l < params.blocks.size(); ++l)
      x = model_detail::block_forward(params.blocks[l], x, c.n_heads, tape ? &caches[l] : nullptr);
    nn::LayerNormCache<T> ln;
    Mat<T> z = nn::layernorm_forward(x, params.norm_gamma, params.norm_beta, tape ? &ln : nullptr);
    out.cls.push_back(z.row(0));
    dec_tokens[n] = decoder_tokens(params, z, visible);
    if (tape) {
      tape->visible[n] = std::move(visible);
      tape->patches[n] = std::move(patches);
      tape->blocks[n] = std::move(caches);
      tape->final_norm[n] = std::move(ln);
    }
  }
  out.recon = cnn_decode_batch(params, dec_tokens, mode, tape ? &tape->decoder : nullptr, stats);
  return out;
}

/// Accumulates parameter gradients into `grads` given d(loss)/d(recon) and
/// d(loss)/d(cls) per clip.
template <class T>
void student_backward(const Parameters<T>& params, const StudentTape<T>& tape, const Batch<T>& d_recon,
                      const std::vector<Mat<T>>& d_cls, Parameters<T>& grads) {
  const auto& c = params.config;
  const std::size_t batch = d_recon.size();

  // Decoder.
  const auto og = model_detail::output_geometry(c);
  Batch<T> dx(batch);
  for (std::size_t n = 0; n < batch; ++n)
    dx[n] = nn::conv2d_backward(d_recon[n], tape.decoder.output_input[n], params.output_weight, og,
                                grads.output_weight, grads.output_bias);
  for (std::size_t s = params.decoder_stages.size(); s-- > 0;) {
    const auto& st = params.decoder_stages[s];
    auto& gs = grads.decoder_stages[s];
    const auto& stage = tape.decoder.stages[s];
    for (std::size_t n = 0; n < batch; ++n) dx[n] = nn::gelu_backward(dx[n], stage.pre_gelu[n]);
    Batch<T> dconv = nn::batchnorm_backward(dx, stage.bn, st.gamma, gs.gamma, gs.beta);
    const auto g = model_detail::upsample_geometry(c, static_cast<int>(s));
    for (std::size_t n = 0; n < batch; ++n)
      dx[n] = nn::conv_transpose2d_backward(dconv[n], stage.input[n], st.weight, g, gs.weight, gs.bias);
  }

  // Tokens, transformer, patch embedding.
  Batch<T> dfeat(batch);
  for (std::size_t n = 0; n < batch; ++n) {
    const Mat<T> dproj = model_detail::untile_tokens(dx[n], c);
    const Mat<T> dtokens = nn::linear_backward(dproj, tape.decoder.tokens[n], params.decoder_proj_weight,
                                               grads.decoder_proj_weight, grads.decoder_proj_bias);
    const auto& visible = tape.visible[n];
    std::vector<bool> is_visible(static_cast<std::size_t>(c.n_patches()), false);
    for (int p : visible) is_visible[static_cast<std::size_t>(p)] = true;
    for (int p = 0; p < c.n_patches(); ++p)
      if (!is_visible[static_cast<std::size_t>(p)]) grads.mask_token += dtokens.row(p);

    Mat<T> dz = Mat<T>::Zero(1 + static_cast<Eigen::Index>(visible.size()), c.embed_dim);
    dz.row(0) = d_cls[n];
    for (std::size_t r = 0; r < visible.size(); ++r) dz.row(1 + static_cast<Eigen::Index>(r)) = dtokens.row(visible[r]);
    Mat<T> dseq = nn::layernorm_backward(dz, tape.final_norm[n], params.norm_gamma, grads.norm_gamma, grads.norm_beta);
    for (std::size_t l = params.blocks.size(); l-- > 0;)
      dseq = model_detail::block_backward(params.blocks[l], dseq, tape.blocks[n][l], c.n_heads, grads.blocks[l]);
    grads.cls_token += dseq.row(0);

    dfeat[n] = Mat<T>::Zero(c.cnn_channels, c.feature_size() * c.feature_size());
    if (!visible.empty()) {
      const Mat<T> demb = dseq.bottomRows(static_cast<Eigen::Index>(visible.size()));
      const Mat<T> dpatch =
          nn::linear_backward(demb, tape.patches[n], params.patch_weight, grads.patch_weight, grads.patch_bias);
      model_detail::scatter_patches(dpatch, c, visible, dfeat[n]);
    }
  }

  // CNN encoder.
  for (std::size_t n = 0; n < batch; ++n) dfeat[n] = nn::gelu_backward(dfeat[n], tape.encoder_pre_gelu[n]);
  Batch<T> dconv = nn::batchnorm_backward(dfeat, tape.encoder_bn, params.encoder.gamma, grads.encoder.gamma,
                                          grads.encoder.beta);
  const auto g = model_detail::encoder_geometry(c);
  for (std::size_t n = 0; n < batch; ++n)
    nn::conv2d_backward(dconv[n], tape.specs[n], params.encoder.weight, g, grads.encoder.weight, grads.encoder.bias);
}

/// Full (unmasked) encoder pass over a batch; per clip, every layer's output.
template <class T>
std::vector<TransformerOutput<T>> encode_full(const Parameters<T>& params, const Batch<T>& specs, BnMode mode) {
  Batch<T> feats = cnn_encode_batch(params, specs, mode);
  std::vector<TransformerOutput<T>> out;
  out.reserve(feats.size());
  for (const auto& f : feats) out.push_back(transformer_forward(params, patchify_embed(params, f), false));
  return out;
}

}  // namespace impact

#endif  // IMPACT_MODEL_HPP
