// SPDX-License-Identifier: Apache-2.0
//
// Layer wrappers that own their parameters and gradient buffers, the
// residual attention block (1x1 in -> spatial operator -> mode attention ->
// 1x1 out -> skip), its convolutional ablation variants, and the global
// pairwise-attention baseline block.

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "strattn/local_attention.hpp"
#include "strattn/mode_attention.hpp"
#include "strattn/ops.hpp"

namespace strattn {

template <class S>
struct ParamRef {
  std::string name;
  Tensor<S>* value;
  Tensor<S>* grad;
};

enum class BnMode { training, frozen, off };

// ---- conv + grads -------------------------------------------------------

template <class S>
struct Conv2dLayer {
  Tensor<S> w, b, gw, gb;
  Conv2dSpec spec;
  bool has_bias = false;

  static Conv2dLayer init(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, int groups,
                          int stride, int pad, bool bias, Rng& rng) {
    Conv2dLayer l;
    l.spec = Conv2dSpec{groups, {stride, stride}, {pad, pad}};
    const std::size_t fan_in = (in_ch / std::size_t(groups)) * kernel * kernel;
    l.w = seeded_init<S>({out_ch, in_ch / std::size_t(groups), kernel, kernel}, fan_in, rng);
    l.gw = Tensor<S>(l.w.shape());
    l.has_bias = bias;
    if (bias) {
      l.b = Tensor<S>({out_ch});
      l.gb = Tensor<S>({out_ch});
    }
    return l;
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    return conv2d_grouped(x, w, has_bias ? &b : nullptr, spec);
  }

  Tensor<S> backward(const Tensor<S>& gy, const Tensor<S>& x) {
    auto g = conv2d_grouped_backward(gy, x, w, has_bias, spec);
    axpy(S(1), g.weight, gw);
    if (has_bias) axpy(S(1), g.bias, gb);
    return std::move(g.input);
  }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    out.push_back({prefix + ".w", &w, &gw});
    if (has_bias) out.push_back({prefix + ".b", &b, &gb});
  }

  void zero_grad() {
    std::fill(gw.begin(), gw.end(), S(0));
    if (has_bias) std::fill(gb.begin(), gb.end(), S(0));
  }
};

// ---- batch norm + grads --------------------------------------------------

template <class S>
struct BatchNormLayer {
  BatchNormParams<S> p;
  Tensor<S> ggamma, gbeta;
  bool frozen_config = false;  // "frozen" in the block config: never trains

  static BatchNormLayer init(std::size_t channels, bool frozen) {
    BatchNormLayer l;
    l.p = BatchNormParams<S>::identity(channels);
    l.frozen_config = frozen;
    if (frozen) l.p.mode = BatchNormParams<S>::Mode::frozen;
    l.ggamma = Tensor<S>({channels});
    l.gbeta = Tensor<S>({channels});
    return l;
  }

  void set_train(bool train) {
    p.mode = (train && !frozen_config) ? BatchNormParams<S>::Mode::training
                                       : BatchNormParams<S>::Mode::frozen;
  }

  BatchNormResult<S> forward(const Tensor<S>& x) { return batch_norm(x, p); }

  Tensor<S> backward(const Tensor<S>& gy, const BatchNormCache<S>& cache) {
    auto g = batch_norm_backward(gy, cache, p);
    axpy(S(1), g.gamma, ggamma);
    axpy(S(1), g.beta, gbeta);
    return std::move(g.input);
  }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    out.push_back({prefix + ".gamma", &p.gamma, &ggamma});
    out.push_back({prefix + ".beta", &p.beta, &gbeta});
  }

  void zero_grad() {
    std::fill(ggamma.begin(), ggamma.end(), S(0));
    std::fill(gbeta.begin(), gbeta.end(), S(0));
  }
};

// ---- plain conv block (stem / downsampling): conv + BN + ReLU ------------

template <class S>
struct ConvBlock {
  Conv2dLayer<S> conv;
  std::unique_ptr<BatchNormLayer<S>> bn;

  struct Cache {
    Tensor<S> input;
    std::optional<BatchNormCache<S>> bn;
    Tensor<S> pre_relu;
  };

  static ConvBlock init(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, int stride,
                        BnMode bn_mode, Rng& rng) {
    ConvBlock b;
    const int pad = int(kernel) / 2;
    b.conv = Conv2dLayer<S>::init(in_ch, out_ch, kernel, 1, stride, pad,
                                  bn_mode == BnMode::off, rng);
    if (bn_mode != BnMode::off)
      b.bn = std::make_unique<BatchNormLayer<S>>(
          BatchNormLayer<S>::init(out_ch, bn_mode == BnMode::frozen));
    return b;
  }

  Tensor<S> forward(const Tensor<S>& x, Cache& cache) {
    cache.input = x;
    Tensor<S> a = conv.forward(x);
    if (bn) {
      auto r = bn->forward(a);
      cache.bn = std::move(r.cache);
      a = std::move(r.out);
    }
    cache.pre_relu = a;
    return relu(a);
  }

  Tensor<S> backward(const Tensor<S>& gy, const Cache& cache) {
    Tensor<S> g = relu_backward(gy, cache.pre_relu);
    if (bn) g = bn->backward(g, *cache.bn);
    return conv.backward(g, cache.input);
  }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    conv.collect(prefix + ".conv", out);
    if (bn) bn->collect(prefix + ".bn", out);
  }
  void zero_grad() {
    conv.zero_grad();
    if (bn) bn->zero_grad();
  }
  void set_train(bool train) {
    if (bn) bn->set_train(train);
  }
};

// ---- the residual attention block ----------------------------------------

enum class SpatialVariant { local_attn, conv3x3, group_conv3x3 };

struct BlockConfig {
  std::size_t in_channels = 0;
  std::size_t mid_per_mode = 8;  // C_m
  std::size_t out_channels = 0;
  int groups = 4;  // G
  int window = 3;  // K
  Gating gating = Gating::sigmoid;
  bool interaction = true;
  bool masks_from_input = false;  // mask conv reads the spatial-op input
  SpatialVariant spatial = SpatialVariant::local_attn;
  bool mode_attention = true;
  BnMode bn = BnMode::training;
  bool mean_pool = false;
  bool scaled_inner = false;
  bool context_uses_mixed = true;
  bool omit_final_projection = false;  // drop the fusing 1x1; out width = G*C_m

  std::size_t mid_channels() const { return mid_per_mode * std::size_t(groups); }
};

template <class S>
struct StraBlock {
  BlockConfig cfg;
  Conv2dLayer<S> conv_in;
  std::unique_ptr<BatchNormLayer<S>> bn_in;
  // spatial operator: exactly one of these is active
  std::unique_ptr<LocalAttnParams<S>> attn;
  std::unique_ptr<Conv2dLayer<S>> spatial_conv;
  std::unique_ptr<BatchNormLayer<S>> bn_spatial;
  LocalAttnGrads<S> attn_grads;  // accumulated like layer grads
  std::unique_ptr<ModeParams<S>> mode;
  Tensor<S> mode_gw;
  std::unique_ptr<Conv2dLayer<S>> conv_out;
  std::unique_ptr<BatchNormLayer<S>> bn_out;
  std::unique_ptr<Conv2dLayer<S>> conv_skip;
  std::unique_ptr<BatchNormLayer<S>> bn_skip;

  struct Cache {
    Tensor<S> input;
    std::optional<BatchNormCache<S>> bn_in;
    Tensor<S> pre_relu_in;
    Tensor<S> spatial_in;  // after the first ReLU
    std::optional<LocalAttnCache<S>> attn;
    std::optional<BatchNormCache<S>> bn_spatial;
    std::optional<ModeCache<S>> mode;
    Tensor<S> mid;  // input of the output projection
    std::optional<BatchNormCache<S>> bn_out;
    std::optional<BatchNormCache<S>> bn_skip;
    Tensor<S> pre_relu_out;
  };

  static StraBlock init(const BlockConfig& cfg, Rng& rng) {
    if (cfg.in_channels < 1 || cfg.out_channels < 1 || cfg.mid_per_mode < 1)
      throw ShapeError("stra block: channel widths must be >= 1");
    StraBlock b;
    b.cfg = cfg;
    const std::size_t mid = cfg.mid_channels();
    const bool with_bn = cfg.bn != BnMode::off;
    const bool frozen = cfg.bn == BnMode::frozen;

    b.conv_in = Conv2dLayer<S>::init(cfg.in_channels, mid, 1, 1, 1, 0, !with_bn, rng);
    if (with_bn)
      b.bn_in = std::make_unique<BatchNormLayer<S>>(BatchNormLayer<S>::init(mid, frozen));

    switch (cfg.spatial) {
      case SpatialVariant::local_attn:
        b.attn = std::make_unique<LocalAttnParams<S>>(LocalAttnParams<S>::init(
            mid, cfg.mid_per_mode, cfg.groups, cfg.window, rng, with_bn));
        if (with_bn && frozen) b.attn->value_bn->mode = BatchNormParams<S>::Mode::frozen;
        break;
      case SpatialVariant::conv3x3:
      case SpatialVariant::group_conv3x3: {
        const int groups = cfg.spatial == SpatialVariant::conv3x3 ? 1 : cfg.groups;
        b.spatial_conv = std::make_unique<Conv2dLayer<S>>(
            Conv2dLayer<S>::init(mid, mid, 3, groups, 1, 1, !with_bn, rng));
        if (with_bn)
          b.bn_spatial =
              std::make_unique<BatchNormLayer<S>>(BatchNormLayer<S>::init(mid, frozen));
        break;
      }
    }

    if (cfg.mode_attention) {
      ModeConfig mc;
      mc.groups = cfg.groups;
      mc.gating = cfg.gating;
      mc.interaction = cfg.interaction;
      mc.mean_pool = cfg.mean_pool;
      mc.masks_from_input = cfg.masks_from_input;
      mc.scaled_inner = cfg.scaled_inner;
      mc.context_uses_mixed = cfg.context_uses_mixed;
      b.mode = std::make_unique<ModeParams<S>>(ModeParams<S>::init(cfg.mid_per_mode, mc, rng));
      b.mode_gw = Tensor<S>(b.mode->mask_w.shape());
    }

    if (cfg.omit_final_projection) {
      if (cfg.out_channels != mid)
        throw ShapeError("stra block: without the output projection, out_channels must equal " +
                         std::to_string(mid));
    } else {
      b.conv_out = std::make_unique<Conv2dLayer<S>>(
          Conv2dLayer<S>::init(mid, cfg.out_channels, 1, 1, 1, 0, !with_bn, rng));
      if (with_bn)
        b.bn_out = std::make_unique<BatchNormLayer<S>>(
            BatchNormLayer<S>::init(cfg.out_channels, frozen));
    }

    if (cfg.in_channels != cfg.out_channels) {
      b.conv_skip = std::make_unique<Conv2dLayer<S>>(
          Conv2dLayer<S>::init(cfg.in_channels, cfg.out_channels, 1, 1, 1, 0, !with_bn, rng));
      if (with_bn)
        b.bn_skip = std::make_unique<BatchNormLayer<S>>(
            BatchNormLayer<S>::init(cfg.out_channels, frozen));
    }

    // gradient buffers for the attention parameters
    if (b.attn) {
      b.attn_grads.query_w = Tensor<S>(b.attn->query_w.shape());
      b.attn_grads.query_b = Tensor<S>(b.attn->query_b.shape());
      b.attn_grads.key_w = Tensor<S>(b.attn->key_w.shape());
      b.attn_grads.value_w = Tensor<S>(b.attn->value_w.shape());
      b.attn_grads.value_b = Tensor<S>(b.attn->value_b.shape());
      if (b.attn->value_bn) {
        b.attn_grads.bn_gamma = Tensor<S>(b.attn->value_bn->gamma.shape());
        b.attn_grads.bn_beta = Tensor<S>(b.attn->value_bn->beta.shape());
      }
    }
    return b;
  }

  Tensor<S> forward(const Tensor<S>& x, Cache& cache) {
    if (x.extent(1) != cfg.in_channels)
      throw ShapeError("stra block: input has " + std::to_string(x.extent(1)) +
                       " channels, config says " + std::to_string(cfg.in_channels));
    cache.input = x;
    Tensor<S> a = conv_in.forward(x);
    if (bn_in) {
      auto r = bn_in->forward(a);
      cache.bn_in = std::move(r.cache);
      a = std::move(r.out);
    }
    cache.pre_relu_in = a;
    cache.spatial_in = relu(a);

    Tensor<S> s;
    if (attn) {
      auto r = local_attention_forward(cache.spatial_in, *attn);
      s = std::move(r.out);
      cache.attn = std::move(r.cache);
    } else {
      s = spatial_conv->forward(cache.spatial_in);
      if (bn_spatial) {
        auto r = bn_spatial->forward(s);
        cache.bn_spatial = std::move(r.cache);
        s = std::move(r.out);
      }
    }

    if (mode) {
      auto r = mode_attention_forward(
          s, *mode, cfg.masks_from_input ? &cache.spatial_in : nullptr);
      cache.mid = std::move(r.out);
      cache.mode = std::move(r.cache);
    } else {
      cache.mid = std::move(s);
    }

    Tensor<S> q;
    if (conv_out) {
      q = conv_out->forward(cache.mid);
      if (bn_out) {
        auto r = bn_out->forward(q);
        cache.bn_out = std::move(r.cache);
        q = std::move(r.out);
      }
    } else {
      q = cache.mid;
    }

    if (conv_skip) {
      Tensor<S> sc = conv_skip->forward(x);
      if (bn_skip) {
        auto r = bn_skip->forward(sc);
        cache.bn_skip = std::move(r.cache);
        sc = std::move(r.out);
      }
      axpy(S(1), sc, q);
    } else {
      axpy(S(1), x, q);
    }
    cache.pre_relu_out = q;
    return relu(q);
  }

  // grad_masks: optional upstream gradient on this block's mode masks
  // (the diversity regularizer's path)
  Tensor<S> backward(const Tensor<S>& gy, const Cache& cache,
                     const Tensor<S>* grad_masks = nullptr) {
    Tensor<S> gpre = relu_backward(gy, cache.pre_relu_out);

    Tensor<S> gx;
    if (conv_skip) {
      Tensor<S> gsc = gpre;
      if (bn_skip) gsc = bn_skip->backward(gsc, *cache.bn_skip);
      gx = conv_skip->backward(gsc, cache.input);
    } else {
      gx = gpre;
    }

    Tensor<S> gmid;
    if (conv_out) {
      Tensor<S> gq = gpre;
      if (bn_out) gq = bn_out->backward(gq, *cache.bn_out);
      gmid = conv_out->backward(gq, cache.mid);
    } else {
      gmid = gpre;
    }

    Tensor<S> gs;
    Tensor<S> gspatial_extra;  // mask-source path when it reads the block input
    if (mode) {
      auto g = mode_attention_backward(gmid, *cache.mode, *mode, grad_masks);
      axpy(S(1), g.mask_w, mode_gw);
      gs = std::move(g.features);
      if (cfg.masks_from_input) gspatial_extra = std::move(g.mask_source);
    } else {
      gs = std::move(gmid);
    }

    Tensor<S> gr1;
    if (attn) {
      auto g = local_attention_backward(gs, *cache.attn, *attn);
      axpy(S(1), g.query_w, attn_grads.query_w);
      axpy(S(1), g.query_b, attn_grads.query_b);
      axpy(S(1), g.key_w, attn_grads.key_w);
      axpy(S(1), g.value_w, attn_grads.value_w);
      axpy(S(1), g.value_b, attn_grads.value_b);
      if (attn->value_bn) {
        axpy(S(1), g.bn_gamma, attn_grads.bn_gamma);
        axpy(S(1), g.bn_beta, attn_grads.bn_beta);
      }
      gr1 = std::move(g.input);
    } else {
      Tensor<S> gsp = gs;
      if (bn_spatial) gsp = bn_spatial->backward(gsp, *cache.bn_spatial);
      gr1 = spatial_conv->backward(gsp, cache.spatial_in);
    }
    if (gspatial_extra.numel() > 0) axpy(S(1), gspatial_extra, gr1);

    Tensor<S> ga = relu_backward(gr1, cache.pre_relu_in);
    if (bn_in) ga = bn_in->backward(ga, *cache.bn_in);
    axpy(S(1), conv_in.backward(ga, cache.input), gx);
    return gx;
  }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    conv_in.collect(prefix + ".conv_in", out);
    if (bn_in) bn_in->collect(prefix + ".bn_in", out);
    if (attn) {
      out.push_back({prefix + ".attn.query_w", &attn->query_w, &attn_grads.query_w});
      out.push_back({prefix + ".attn.query_b", &attn->query_b, &attn_grads.query_b});
      out.push_back({prefix + ".attn.key_w", &attn->key_w, &attn_grads.key_w});
      out.push_back({prefix + ".attn.value_w", &attn->value_w, &attn_grads.value_w});
      out.push_back({prefix + ".attn.value_b", &attn->value_b, &attn_grads.value_b});
      if (attn->value_bn) {
        out.push_back({prefix + ".attn.bn.gamma", &attn->value_bn->gamma,
                       &attn_grads.bn_gamma});
        out.push_back({prefix + ".attn.bn.beta", &attn->value_bn->beta,
                       &attn_grads.bn_beta});
      }
    }
    if (spatial_conv) spatial_conv->collect(prefix + ".spatial", out);
    if (bn_spatial) bn_spatial->collect(prefix + ".bn_spatial", out);
    if (mode) out.push_back({prefix + ".mode.mask_w", &mode->mask_w, &mode_gw});
    if (conv_out) conv_out->collect(prefix + ".conv_out", out);
    if (bn_out) bn_out->collect(prefix + ".bn_out", out);
    if (conv_skip) conv_skip->collect(prefix + ".conv_skip", out);
    if (bn_skip) bn_skip->collect(prefix + ".bn_skip", out);
  }

  void zero_grad() {
    conv_in.zero_grad();
    if (bn_in) bn_in->zero_grad();
    if (attn) {
      for (auto* t : {&attn_grads.query_w, &attn_grads.query_b, &attn_grads.key_w,
                      &attn_grads.value_w, &attn_grads.value_b})
        std::fill(t->begin(), t->end(), S(0));
      if (attn->value_bn) {
        std::fill(attn_grads.bn_gamma.begin(), attn_grads.bn_gamma.end(), S(0));
        std::fill(attn_grads.bn_beta.begin(), attn_grads.bn_beta.end(), S(0));
      }
    }
    if (spatial_conv) spatial_conv->zero_grad();
    if (bn_spatial) bn_spatial->zero_grad();
    if (mode) std::fill(mode_gw.begin(), mode_gw.end(), S(0));
    if (conv_out) conv_out->zero_grad();
    if (bn_out) bn_out->zero_grad();
    if (conv_skip) conv_skip->zero_grad();
    if (bn_skip) bn_skip->zero_grad();
  }

  void set_train(bool train) {
    if (bn_in) bn_in->set_train(train);
    if (attn && attn->value_bn && cfg.bn == BnMode::training)
      attn->value_bn->mode = train ? BatchNormParams<S>::Mode::training
                                   : BatchNormParams<S>::Mode::frozen;
    if (bn_spatial) bn_spatial->set_train(train);
    if (bn_out) bn_out->set_train(train);
    if (bn_skip) bn_skip->set_train(train);
  }
};

// ---- global pairwise-attention baseline -----------------------------------
//
// out_i = x_i + sum_j softmax_j(<theta(x_i), phi(x_j)>) u(x_j)
// Quadratic in H*W; forward-only reference point for the local design.

template <class S>
struct NonLocalParams {
  Tensor<S> theta_w, phi_w, u_w;  // 1x1 projections, no bias

  static NonLocalParams init(std::size_t channels, std::size_t embed, Rng& rng) {
    NonLocalParams p;
    p.theta_w = seeded_init<S>({embed, channels, 1, 1}, channels, rng);
    p.phi_w = seeded_init<S>({embed, channels, 1, 1}, channels, rng);
    p.u_w = seeded_init<S>({channels, channels, 1, 1}, channels, rng);
    return p;
  }
};

template <class S>
Tensor<S> nonlocal_block_forward(const Tensor<S>& x, const NonLocalParams<S>& p) {
  require_rank(x, 4, "nonlocal block input");
  const std::size_t n = x.extent(0), c = x.extent(1);
  const std::size_t area = x.extent(2) * x.extent(3);
  const std::size_t ce = p.theta_w.extent(0);
  const Conv2dSpec pw{1, {1, 1}, {0, 0}};
  Tensor<S> theta = conv2d_grouped(x, p.theta_w, nullptr, pw);
  Tensor<S> phi = conv2d_grouped(x, p.phi_w, nullptr, pw);
  Tensor<S> values = conv2d_grouped(x, p.u_w, nullptr, pw);

  Tensor<S> out = x;
  for (std::size_t b = 0; b < n; ++b) {
    ConstMatMap<S> tm(theta.data() + b * ce * area, ce, area);
    ConstMatMap<S> pm(phi.data() + b * ce * area, ce, area);
    Tensor<S> logits({area, area});
    MatMap<S> lm(logits.data(), area, area);
    lm.noalias() = tm.transpose() * pm;  // row i: query pixel i over all j
    Tensor<S> weights = softmax(logits, 1);
    ConstMatMap<S> wm(weights.data(), area, area);
    ConstMatMap<S> vm(values.data() + b * c * area, c, area);
    MatMap<S> om(out.data() + b * c * area, c, area);
    om.noalias() += vm * wm.transpose();
  }
  debug_check_finite(out, "nonlocal block output");
  return out;
}

}  // namespace strattn
