// Copyright (c) 2026 The svpool Authors
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

// Speaker-embedding backend over layer stacks (B x C x L x T):
//
//   1x1 projection -> attentive VAD -> dense multi-dilated block (D2)
//   -> layer pooling (multi-head channel attention, or softmax-weighted sum)
//   -> attentive statistics pooling -> linear -> batch norm -> embedding.
//
// Every stage is a free function over Vars so it can be driven with
// hand-set parameters; Backend wires them together and owns the parameters.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "svpool/ops.hpp"

namespace svpool {

enum class PoolMode { kMca, kSuperb };

inline std::string ToString(PoolMode m) {
  return m == PoolMode::kMca ? "mca" : "superb";
}

struct ModelConfig {
  std::size_t input_c = 768;
  std::size_t input_l = 13;
  std::size_t c_backbone = 512;
  std::size_t d2_bottleneck = 128;
  std::size_t d2_layers = 4;
  std::size_t d2_growth = 128;
  std::size_t kernel_h = 3;  // layer axis
  std::size_t kernel_w = 3;  // frame axis
  std::size_t heads = 4;
  std::size_t head_dim = 128;
  std::size_t asp_bottleneck = 128;
  std::size_t embed_dim = 192;
  bool use_attn_vad = true;
  bool use_d2 = true;
  PoolMode pool_mode = PoolMode::kMca;

  void Validate() const {
    SVPOOL_CHECK_SHAPE(input_c >= 1 && input_l >= 1 && c_backbone >= 1 &&
                           d2_bottleneck >= 1 && d2_layers >= 1 &&
                           d2_growth >= 1 && heads >= 1 && head_dim >= 1 &&
                           asp_bottleneck >= 1 && embed_dim >= 1 &&
                           kernel_h >= 1 && kernel_w >= 1,
                       "model dimensions must be >= 1");
    SVPOOL_CHECK_SHAPE(heads * head_dim == c_backbone, "heads (", heads,
                       ") x head_dim (", head_dim, ") must equal c_backbone (",
                       c_backbone, ")");
    SVPOOL_CHECK_SHAPE(d2_layers * d2_growth == c_backbone, "d2_layers (",
                       d2_layers, ") x d2_growth (", d2_growth,
                       ") must equal c_backbone (", c_backbone, ")");
  }
};

// Width of the MCA squeeze bottleneck for a layer count.
inline std::size_t LayerBottleneck(std::size_t layers) {
  return std::max<std::size_t>(layers / 2, 1);
}

// Frame-axis dilation applied to dense group j.
inline std::size_t GroupDilation(std::size_t group) {
  return std::size_t{1} << group;
}

// ---------------------------------------------------------------------------
// Stages.

// Scales every frame of every layer by a sigmoid relevance score computed
// from one softmax-weighted layer summary:
//   xhat  = sum_i softmax(w)_i x[:, i, :]
//   alpha = sigmoid(W_l . xhat)           (one scoring row per layer l)
//   out[:, l, t] = alpha_l[t] * x[:, l, t]
// x: B x C x L x T, layer_logits: L, frame_scorer: L x C.
template <typename T>
Var<T> attentive_vad(const Var<T>& x, const Var<T>& layer_logits,
                     const Var<T>& frame_scorer) {
  SVPOOL_CHECK_SHAPE(x.shape().rank() == 4, "attentive_vad expects B x C x L x T");
  const std::size_t b = x.dim(0), c = x.dim(1), l = x.dim(2), t = x.dim(3);
  SVPOOL_CHECK_SHAPE(layer_logits.value().numel() == l,
                     "attentive_vad: input has ", l, " layers but w has ",
                     layer_logits.value().numel());
  SVPOOL_CHECK_SHAPE(frame_scorer.shape() == (Shape{l, c}),
                     "attentive_vad: scorer must be ", l, "x", c, ", got ",
                     frame_scorer.shape().str());
  auto weights = reshape(softmax(reshape(layer_logits, Shape{l}), 0),
                         Shape{1, 1, l, 1});
  auto summary = reshape(sum(mul(x, weights), 2), Shape{b, c, t});
  auto alpha = sigmoid(pointwise_conv(summary, frame_scorer));  // B x L x T
  return mul(x, reshape(alpha, Shape{b, 1, l, t}));
}

// Sum of the per-group dilated convolutions of one dense layer (before psi).
// Group j uses frame-axis dilation 2^j and layer-axis dilation 1.
template <typename T>
Var<T> multi_dilated_sum(const std::vector<Var<T>>& groups,
                         const std::vector<Var<T>>& kernels,
                         std::size_t layer_index) {
  SVPOOL_CHECK_SHAPE(layer_index >= 1, "md_conv layer index must be >= 1");
  SVPOOL_CHECK_SHAPE(groups.size() == layer_index && kernels.size() == layer_index,
                     "md_conv layer ", layer_index, " needs ", layer_index,
                     " groups and kernels, got ", groups.size(), " and ",
                     kernels.size());
  std::vector<std::pair<std::size_t, std::size_t>> dilations;
  for (std::size_t j = 0; j < groups.size(); ++j) dilations.emplace_back(1, GroupDilation(j));
  return conv2d_sum(groups, kernels, dilations);
}

template <typename T>
struct NormParams {
  Var<T> gamma;
  Var<T> beta;
  Var<T> running_mean;
  Var<T> running_var;

  BatchNormBuffers<T> buffers() {
    return {&running_mean.mutable_value(), &running_var.mutable_value()};
  }
};

// psi(sum_j conv(group_j)): batch norm then ReLU.
template <typename T>
Var<T> md_conv(const std::vector<Var<T>>& groups,
               const std::vector<Var<T>>& kernels, std::size_t layer_index,
               NormParams<T>& norm, bool training) {
  auto s = multi_dilated_sum(groups, kernels, layer_index);
  return relu(batch_norm(s, norm.gamma, norm.beta, norm.buffers(), training));
}

template <typename T>
struct SqueezeExcite {
  Var<T> w1, b1, w2, b2;
};

// Channel SE over B x C x (rest): global mean, C -> k -> C, sigmoid, scale.
template <typename T>
Var<T> channel_se(const Var<T>& x, const SqueezeExcite<T>& se) {
  const std::size_t b = x.dim(0), c = x.dim(1);
  const std::size_t rest = x.shape().span_size(2, x.shape().rank());
  auto flat = reshape(x, Shape{b, c, rest});
  auto squeezed = mean(flat, 2);  // B x C
  auto gate = sigmoid(linear(relu(linear(squeezed, se.w1, se.b1)), se.w2, se.b2));
  std::vector<std::size_t> gshape(x.shape().rank(), 1);
  gshape[0] = b;
  gshape[1] = c;
  return mul(x, reshape(gate, Shape(gshape)));
}

template <typename T>
struct D2Params {
  Var<T> bottleneck_w, bottleneck_b;
  std::vector<std::vector<Var<T>>> kernels;  // kernels[i-1][j], j < i
  std::vector<NormParams<T>> norms;
  SqueezeExcite<T> se;
};

// Dense multi-dilated block with SE and residual; output shape = input shape.
template <typename T>
Var<T> d2_block(const Var<T>& x, D2Params<T>& p, bool training) {
  SVPOOL_CHECK_SHAPE(x.shape().rank() == 4, "d2_block expects B x C x L x T");
  SVPOOL_CHECK_SHAPE(p.bottleneck_w.dim(1) == x.dim(1), "d2_block: input has ",
                     x.dim(1), " channels, bottleneck expects ",
                     p.bottleneck_w.dim(1));
  std::vector<Var<T>> groups{pointwise_conv(x, p.bottleneck_w, p.bottleneck_b)};
  std::vector<Var<T>> outputs;
  for (std::size_t i = 1; i <= p.kernels.size(); ++i) {
    auto y = md_conv(groups, p.kernels[i - 1], i, p.norms[i - 1], training);
    groups.push_back(y);
    outputs.push_back(y);
  }
  auto dense = concat(outputs, 1);
  SVPOOL_CHECK_SHAPE(dense.shape() == x.shape(), "d2_block: dense output ",
                     dense.shape().str(), " does not match input ",
                     x.shape().str());
  return add(channel_se(dense, p.se), x);
}

template <typename T>
struct McaParams {
  Var<T> proj_w, proj_b;
  std::vector<Var<T>> squeeze;  // per head, (L/2) x L
  std::vector<Var<T>> excite;   // per head, L x (L/2)
};

// Multi-head channel attention over layers followed by max over layers.
// x: B x C x L x T -> B x (h*d) x T.
template <typename T>
Var<T> layer_attention_pool(const Var<T>& x, const McaParams<T>& p) {
  SVPOOL_CHECK_SHAPE(x.shape().rank() == 4, "layer_attention_pool expects B x C x L x T");
  const std::size_t b = x.dim(0), l = x.dim(2), t = x.dim(3);
  const std::size_t heads = p.squeeze.size();
  SVPOOL_CHECK_SHAPE(heads >= 1 && p.excite.size() == heads,
                     "layer_attention_pool needs one squeeze/excite pair per head");
  auto proj = pointwise_conv(x, p.proj_w, p.proj_b);
  const std::size_t width = proj.dim(1);
  SVPOOL_CHECK_SHAPE(width % heads == 0, "projection width ", width,
                     " not divisible by ", heads, " heads");
  const std::size_t d = width / heads;
  std::vector<Var<T>> scaled;
  for (std::size_t k = 0; k < heads; ++k) {
    SVPOOL_CHECK_SHAPE(p.squeeze[k].dim(1) == l && p.excite[k].dim(0) == l,
                       "layer_attention_pool: SE weights sized for ",
                       p.squeeze[k].dim(1), " layers, input has ", l);
    auto head = slice(proj, 1, k * d, d);
    auto s_avg = mean(head, 1);  // B x L x T
    auto s_max = max(head, 1);
    auto e_avg = pointwise_conv(relu(pointwise_conv(s_avg, p.squeeze[k])), p.excite[k]);
    auto e_max = pointwise_conv(relu(pointwise_conv(s_max, p.squeeze[k])), p.excite[k]);
    auto gate = reshape(sigmoid(add(e_avg, e_max)), Shape{b, 1, l, t});
    scaled.push_back(mul(head, gate));
  }
  return max(concat(scaled, 1), 2);
}

// Softmax-weighted sum over layers. x: B x C x L x T -> B x C x T.
template <typename T>
Var<T> superb_sum_pool(const Var<T>& x, const Var<T>& layer_logits) {
  SVPOOL_CHECK_SHAPE(x.shape().rank() == 4, "superb_sum_pool expects B x C x L x T");
  const std::size_t l = x.dim(2);
  SVPOOL_CHECK_SHAPE(layer_logits.value().numel() == l, "superb_sum_pool: input has ",
                     l, " layers but weights have ", layer_logits.value().numel());
  auto weights = reshape(softmax(reshape(layer_logits, Shape{l}), 0),
                         Shape{1, 1, l, 1});
  return sum(mul(x, weights), 2);
}

template <typename T>
struct AspParams {
  Var<T> w1, b1;  // bottleneck x C
  Var<T> w2;      // C x bottleneck; no bias, softmax over frames cancels it
};

inline constexpr double kAspVarianceFloor = 1e-9;

// Channel-dependent attentive statistics. x: B x C x T -> B x 2C (mean, std).
template <typename T>
Var<T> attentive_stats_pool(const Var<T>& x, const AspParams<T>& p) {
  SVPOOL_CHECK_SHAPE(x.shape().rank() == 3, "attentive_stats_pool expects B x C x T, got ",
                     x.shape().str());
  auto scores = pointwise_conv(tanh(pointwise_conv(x, p.w1, p.b1)), p.w2);
  auto alpha = softmax(scores, 2);
  auto mu = sum(mul(alpha, x), 2);                // B x C
  auto second = sum(mul(alpha, square(x)), 2);    // B x C
  auto var = clamp_min(sub(second, square(mu)), static_cast<T>(kAspVarianceFloor));
  return concat(std::vector<Var<T>>{mu, sqrt(var)}, 1);
}

// ---------------------------------------------------------------------------
// Full backend.

enum class InitMode { kRandom, kZeros };

template <typename T>
class Backend {
 public:
  explicit Backend(ModelConfig cfg, std::uint64_t seed = 0,
                   InitMode init = InitMode::kRandom)
      : cfg_(cfg), rng_(seed), init_(init) {
    cfg_.Validate();
    Build();
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // Learnable scalars, grouped by the name prefix before the first '.'.
  std::map<std::string, std::size_t> parameter_breakdown() const {
    std::map<std::string, std::size_t> out;
    for (const auto& e : params_.entries()) {
      if (!e.learnable) continue;
      out[e.name.substr(0, e.name.find('.'))] += e.var.value().numel();
    }
    return out;
  }

  // batch: B x input_c x input_l x T -> B x embed_dim.
  Var<T> forward(const Var<T>& batch, bool training) {
    SVPOOL_CHECK_SHAPE(batch.shape().rank() == 4 && batch.dim(1) == cfg_.input_c &&
                           batch.dim(2) == cfg_.input_l,
                       "model expects B x ", cfg_.input_c, " x ", cfg_.input_l,
                       " x T input, got ", batch.shape().str());
    auto h = pointwise_conv(batch, p("input_proj.weight"), p("input_proj.bias"));
    if (cfg_.use_attn_vad) {
      h = attentive_vad(h, p("vad.layer_logits"), p("vad.frame_scorer"));
    }
    if (cfg_.use_d2) h = d2_block(h, d2_, training);
    Var<T> pooled = cfg_.pool_mode == PoolMode::kMca
                        ? layer_attention_pool(h, mca_)
                        : superb_sum_pool(h, p("superb.layer_logits"));
    auto stats = attentive_stats_pool(pooled, asp_);
    // No bias here: the batch norm that follows would remove it.
    auto emb = linear(stats, p("embed.weight"));
    return batch_norm(emb, embed_norm_.gamma, embed_norm_.beta,
                      embed_norm_.buffers(), training);
  }

  Var<T> forward(const Tensor<T>& batch, bool training) {
    return forward(Var<T>(batch), training);
  }

 private:
  Var<T>& p(const std::string& name) { return params_.get(name); }

  Tensor<T> Kaiming(Shape shape, std::size_t fan_in) {
    Tensor<T> t(std::move(shape));
    if (init_ == InitMode::kZeros) return t;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.storage()) v = static_cast<T>(dist(rng_));
    return t;
  }

  Var<T> Weight(const std::string& name, Shape shape, std::size_t fan_in) {
    return params_.add(name, Kaiming(std::move(shape), fan_in));
  }
  Var<T> Zeros(const std::string& name, Shape shape) {
    return params_.add(name, Tensor<T>(std::move(shape)));
  }

  NormParams<T> Norm(const std::string& prefix, std::size_t ch) {
    NormParams<T> n;
    n.gamma = params_.add(prefix + ".gamma", Tensor<T>(Shape{ch}, T(1)));
    n.beta = params_.add(prefix + ".beta", Tensor<T>(Shape{ch}));
    n.running_mean = params_.add(prefix + ".running_mean", Tensor<T>(Shape{ch}), false);
    n.running_var = params_.add(prefix + ".running_var", Tensor<T>(Shape{ch}, T(1)), false);
    return n;
  }

  void Build() {
    const auto& c = cfg_;
    const std::size_t cb = c.c_backbone, l = c.input_l;
    Weight("input_proj.weight", Shape{cb, c.input_c}, c.input_c);
    Zeros("input_proj.bias", Shape{cb});

    if (c.use_attn_vad) {
      Zeros("vad.layer_logits", Shape{l});
      Zeros("vad.frame_scorer", Shape{l, cb});
    }

    if (c.use_d2) {
      d2_.bottleneck_w = Weight("d2.bottleneck.weight", Shape{c.d2_bottleneck, cb}, cb);
      d2_.bottleneck_b = Zeros("d2.bottleneck.bias", Shape{c.d2_bottleneck});
      for (std::size_t i = 1; i <= c.d2_layers; ++i) {
        std::vector<Var<T>> ks;
        for (std::size_t j = 0; j < i; ++j) {
          const std::size_t in = j == 0 ? c.d2_bottleneck : c.d2_growth;
          ks.push_back(Weight("d2.mdconv" + std::to_string(i) + ".group" +
                                  std::to_string(j) + ".kernel",
                              Shape{c.d2_growth, in, c.kernel_h, c.kernel_w},
                              in * c.kernel_h * c.kernel_w));
        }
        d2_.kernels.push_back(std::move(ks));
        d2_.norms.push_back(Norm("d2.mdconv" + std::to_string(i) + ".norm", c.d2_growth));
      }
      const std::size_t se_mid = c.d2_bottleneck;
      d2_.se.w1 = Weight("d2.se.fc1.weight", Shape{se_mid, cb}, cb);
      d2_.se.b1 = Zeros("d2.se.fc1.bias", Shape{se_mid});
      d2_.se.w2 = Weight("d2.se.fc2.weight", Shape{cb, se_mid}, se_mid);
      d2_.se.b2 = Zeros("d2.se.fc2.bias", Shape{cb});
    }

    if (c.pool_mode == PoolMode::kMca) {
      const std::size_t width = c.heads * c.head_dim;
      const std::size_t mid = LayerBottleneck(l);
      mca_.proj_w = Weight("mca.proj.weight", Shape{width, cb}, cb);
      mca_.proj_b = Zeros("mca.proj.bias", Shape{width});
      for (std::size_t k = 0; k < c.heads; ++k) {
        const std::string head = "mca.head" + std::to_string(k);
        mca_.squeeze.push_back(Weight(head + ".squeeze", Shape{mid, l}, l));
        mca_.excite.push_back(Weight(head + ".excite", Shape{l, mid}, mid));
      }
    } else {
      Zeros("superb.layer_logits", Shape{l});
    }

    const std::size_t pooled = c.pool_mode == PoolMode::kMca ? c.heads * c.head_dim : cb;
    asp_.w1 = Weight("asp.attn1.weight", Shape{c.asp_bottleneck, pooled}, pooled);
    asp_.b1 = Zeros("asp.attn1.bias", Shape{c.asp_bottleneck});
    asp_.w2 = Weight("asp.attn2.weight", Shape{pooled, c.asp_bottleneck}, c.asp_bottleneck);

    Weight("embed.weight", Shape{c.embed_dim, 2 * pooled}, 2 * pooled);
    embed_norm_ = Norm("embed.norm", c.embed_dim);
  }

  ModelConfig cfg_;
  std::mt19937_64 rng_;
  InitMode init_;
  ParamStore<T> params_;
  D2Params<T> d2_;
  McaParams<T> mca_;
  AspParams<T> asp_;
  NormParams<T> embed_norm_;
};

// Learnable scalars of the backend for a configuration (classifier head
// excluded).
inline std::size_t param_count(const ModelConfig& cfg) {
  Backend<float> model(cfg, 0, InitMode::kZeros);
  return model.params().learnable_count();
}

}  // namespace svpool
