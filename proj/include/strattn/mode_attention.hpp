// SPDX-License-Identifier: Apache-2.0
//
// Mode attention: factorizes the grouped feature map into G modes, each
// summarized by a modal vector, and distributes mode context back to every
// pixel.
//
//   masks    M_g  = softmax over all H*W positions of a grouped 1x1 conv
//   modes    z_g  = sum_i M_g(i) * s_i^g          (or the spatial mean)
//   mixing   z'_g = sum_j softmax_j(<z_g, z_j>) * z_j
//   coeffs   r_ig = gate(<s_i^g, z_g>)            (sigmoid or across-mode softmax)
//   context  y_i^g = r_ig * z_g,  out = S + Y
//
// With mixing enabled the mixed vectors replace the raw ones in the
// coefficient inner products; by default they feed the contexts as well
// (context_uses_mixed = false restricts the substitution to the
// coefficients).

#pragma once

#include <cmath>
#include <optional>
#include <type_traits>

#include "strattn/ops.hpp"
#include "strattn/tensor.hpp"

namespace strattn {

enum class Gating { sigmoid, softmax_modes };

struct ModeConfig {
  int groups = 4;
  Gating gating = Gating::sigmoid;
  bool interaction = true;
  bool mean_pool = false;          // spatial mean instead of mask-weighted sum
  bool masks_from_input = false;   // mask conv reads the block input, not S
  bool scaled_inner = false;       // 1/sqrt(C_m) on the gating inner products
  bool context_uses_mixed = true;  // mixed vectors feed Y, not just the coefficients
};

template <class S>
struct ModeParams {
  // grouped 1x1, G*C_m -> G; bias-free, a per-mode shift is invisible
  // to the spatial softmax
  Tensor<S> mask_w;
  ModeConfig cfg;

  static ModeParams init(std::size_t per_mode, const ModeConfig& cfg, Rng& rng) {
    if (cfg.groups < 1) throw ShapeError("mode attention: groups must be >= 1");
    ModeParams p;
    p.cfg = cfg;
    p.mask_w = seeded_init<S>({std::size_t(cfg.groups), per_mode, 1, 1}, per_mode, rng);
    return p;
  }
};

// Normalized per-mode spatial masks, (N, G, H, W); each (n, g) slice sums to 1.
template <class S>
Tensor<S> spatial_masks(const Tensor<S>& source, const Tensor<S>& mask_w, int groups) {
  require_rank(source, 4, "spatial_masks input");
  const Conv2dSpec pointwise{groups, {1, 1}, {0, 0}};
  Tensor<S> logits = conv2d_grouped(source, mask_w, nullptr, pointwise);
  const std::size_t n = logits.extent(0), g = logits.extent(1);
  const std::size_t h = logits.extent(2), w = logits.extent(3);
  Tensor<S> m = softmax(logits.reshaped({n, g, h * w}), 2);
  return m.reshaped({n, g, h, w});
}

// Mask-weighted aggregation of the grouped features, (N, G, C_m).
template <class S>
Tensor<S> modal_vectors(const Tensor<S>& features, const Tensor<S>& masks, bool mean_pool) {
  require_rank(features, 4, "modal_vectors features");
  require_rank(masks, 4, "modal_vectors masks");
  const std::size_t n = features.extent(0), g = masks.extent(1);
  const std::size_t h = features.extent(2), w = features.extent(3);
  if (masks.extent(0) != n || masks.extent(2) != h || masks.extent(3) != w ||
      features.extent(1) % g != 0)
    throw ShapeError("modal_vectors: masks " + shape_str(masks.shape()) +
                     " inconsistent with features " + shape_str(features.shape()));
  const std::size_t cm = features.extent(1) / g;
  const std::size_t area = h * w;

  Tensor<S> z({n, g, cm});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t gi = 0; gi < g; ++gi) {
      ConstMatMap<S> sg(features.data() + (b * g * cm + gi * cm) * area, cm, area);
      VecMap<S> zg(z.data() + (b * g + gi) * cm, cm);
      if (mean_pool) {
        zg = sg.rowwise().mean();
      } else {
        ConstVecMap<S> mg(masks.data() + (b * g + gi) * area, area);
        zg.noalias() = sg * mg;
      }
    }
  }
  return z;
}

template <class S>
struct ModeInteractionResult {
  Tensor<S> mixed;    // (N, G, C_m)
  Tensor<S> weights;  // (N, G, G), rows sum to 1
};

// Softmax-weighted mixing among the modal vectors of one sample.
template <class S>
ModeInteractionResult<S> mode_interaction(const Tensor<S>& modes) {
  require_rank(modes, 3, "mode_interaction modes");
  const std::size_t n = modes.extent(0), g = modes.extent(1), cm = modes.extent(2);
  ModeInteractionResult<S> r;
  r.weights = Tensor<S>({n, g, g});
  r.mixed = Tensor<S>({n, g, cm});
  for (std::size_t b = 0; b < n; ++b) {
    ConstMatMap<S> z(modes.data() + b * g * cm, g, cm);
    MatMap<S> wmat(r.weights.data() + b * g * g, g, g);
    wmat.noalias() = z * z.transpose();
    for (std::size_t row = 0; row < g; ++row) {
      S mx = wmat.row(row).maxCoeff();
      S sum = 0;
      for (std::size_t col = 0; col < g; ++col) {
        wmat(row, col) = std::exp(wmat(row, col) - mx);
        sum += wmat(row, col);
      }
      wmat.row(row) /= sum;
    }
    MatMap<S> mixed(r.mixed.data() + b * g * cm, g, cm);
    mixed.noalias() = wmat * z;
  }
  return r;
}

// Gated match between each pixel's mode feature and the modal vector,
// (N, G, H, W).
template <class S>
Tensor<S> attention_coefficients(const Tensor<S>& features, const Tensor<S>& modes,
                                 Gating gating, bool scaled_inner = false) {
  require_rank(features, 4, "attention_coefficients features");
  require_rank(modes, 3, "attention_coefficients modes");
  const std::size_t n = features.extent(0), g = modes.extent(1), cm = modes.extent(2);
  if (features.extent(1) != g * cm)
    throw ShapeError("attention_coefficients: features " + shape_str(features.shape()) +
                     " vs modes " + shape_str(modes.shape()));
  const std::size_t area = features.extent(2) * features.extent(3);
  const S scale = scaled_inner ? S(1) / S(std::sqrt(double(cm))) : S(1);

  Tensor<S> dots({n, g, features.extent(2), features.extent(3)});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t gi = 0; gi < g; ++gi) {
      ConstMatMap<S> sg(features.data() + (b * g * cm + gi * cm) * area, cm, area);
      ConstVecMap<S> zg(modes.data() + (b * g + gi) * cm, cm);
      VecMap<S> dg(dots.data() + (b * g + gi) * area, area);
      dg.noalias() = scale * (sg.transpose() * zg);
    }
  }
  switch (gating) {
    case Gating::sigmoid:
      return sigmoid(dots);
    case Gating::softmax_modes:
      return softmax(dots, 1);
  }
  throw ShapeError("attention_coefficients: unknown gating");
}

// Everything the backward pass and the visualization exports need.
template <class S>
struct ModeCache {
  Tensor<S> features;     // S, (N, G*C_m, H, W)
  Tensor<S> mask_source;  // empty unless masks_from_input
  Tensor<S> masks;        // M, (N, G, H, W)
  Tensor<S> modes;        // Z, (N, G, C_m)
  Tensor<S> mix_weights;  // (N, G, G), empty without interaction
  Tensor<S> mixed;        // Z', empty without interaction
  Tensor<S> coeffs;       // R, (N, G, H, W)
};

template <class S>
struct ModeAttnResult {
  Tensor<S> out;  // S + Y
  ModeCache<S> cache;
};

template <class S>
ModeAttnResult<S> mode_attention_forward(const Tensor<S>& features, const ModeParams<S>& p,
                                         std::type_identity_t<const Tensor<S>*> mask_source = nullptr) {
  require_rank(features, 4, "mode attention input");
  const ModeConfig& cfg = p.cfg;
  const std::size_t g = std::size_t(cfg.groups);
  if (features.extent(1) % g != 0)
    throw ShapeError("mode attention: groups " + std::to_string(g) +
                     " do not divide channels " + std::to_string(features.extent(1)));
  if (cfg.masks_from_input && !mask_source)
    throw ShapeError("mode attention: configured to read masks from the block input, "
                     "but none was provided");
  const Tensor<S>& src = cfg.masks_from_input ? *mask_source : features;

  ModeAttnResult<S> r;
  r.cache.features = features;
  if (cfg.masks_from_input) r.cache.mask_source = src;
  r.cache.masks = spatial_masks(src, p.mask_w, cfg.groups);
  r.cache.modes = modal_vectors(features, r.cache.masks, cfg.mean_pool);

  const Tensor<S>* coef_modes = &r.cache.modes;
  const Tensor<S>* ctx_modes = &r.cache.modes;
  if (cfg.interaction) {
    auto mix = mode_interaction(r.cache.modes);
    r.cache.mixed = std::move(mix.mixed);
    r.cache.mix_weights = std::move(mix.weights);
    coef_modes = &r.cache.mixed;
    if (cfg.context_uses_mixed) ctx_modes = &r.cache.mixed;
  }
  r.cache.coeffs = attention_coefficients(features, *coef_modes, cfg.gating, cfg.scaled_inner);

  const std::size_t n = features.extent(0);
  const std::size_t cm = features.extent(1) / g;
  const std::size_t area = features.extent(2) * features.extent(3);
  r.out = features;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t gi = 0; gi < g; ++gi) {
      const S* z = ctx_modes->data() + (b * g + gi) * cm;
      const S* coeff = r.cache.coeffs.data() + (b * g + gi) * area;
      for (std::size_t c = 0; c < cm; ++c) {
        S* out = r.out.data() + (b * g * cm + gi * cm + c) * area;
        for (std::size_t i = 0; i < area; ++i) out[i] += coeff[i] * z[c];
      }
    }
  }
  debug_check_finite(r.out, "mode attention output");
  return r;
}

template <class S>
struct ModeAttnGrads {
  Tensor<S> features;          // dL/dS
  Tensor<S> mask_w;            // mask conv grads
  Tensor<S> mask_source;       // empty unless masks_from_input
};

// grad_masks_extra lets a regularizer on M (the diversity loss) inject its
// gradient through the same mask-softmax path.
template <class S>
ModeAttnGrads<S> mode_attention_backward(const Tensor<S>& grad_out, const ModeCache<S>& cache,
                                         const ModeParams<S>& p,
                                         std::type_identity_t<const Tensor<S>*> grad_masks_extra = nullptr) {
  const ModeConfig& cfg = p.cfg;
  const Tensor<S>& features = cache.features;
  require_same_shape(grad_out, features, "mode attention backward");
  if (grad_masks_extra) require_same_shape(*grad_masks_extra, cache.masks,
                                           "mode attention backward mask grad");
  const std::size_t n = features.extent(0);
  const std::size_t g = std::size_t(cfg.groups);
  const std::size_t cm = features.extent(1) / g;
  const std::size_t h = features.extent(2), w = features.extent(3);
  const std::size_t area = h * w;
  const S scale = cfg.scaled_inner ? S(1) / S(std::sqrt(double(cm))) : S(1);

  const Tensor<S>& coef_modes = cfg.interaction ? cache.mixed : cache.modes;
  const Tensor<S>& ctx_modes =
      (cfg.interaction && cfg.context_uses_mixed) ? cache.mixed : cache.modes;

  ModeAttnGrads<S> grads;
  grads.features = grad_out;  // skip path

  Tensor<S> grad_coeffs({n, g, h, w});
  Tensor<S> grad_ctx({n, g, cm});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t gi = 0; gi < g; ++gi) {
      ConstMatMap<S> dout(grad_out.data() + (b * g * cm + gi * cm) * area, cm, area);
      ConstVecMap<S> z(ctx_modes.data() + (b * g + gi) * cm, cm);
      ConstVecMap<S> coeff(cache.coeffs.data() + (b * g + gi) * area, area);
      VecMap<S> dr(grad_coeffs.data() + (b * g + gi) * area, area);
      VecMap<S> dz(grad_ctx.data() + (b * g + gi) * cm, cm);
      dr.noalias() = dout.transpose() * z;
      dz.noalias() = dout * coeff;
    }
  }

  // gating backward: grad of the pre-gate inner products
  Tensor<S> grad_dots({n, g, h, w});
  if (cfg.gating == Gating::sigmoid) {
    for (std::size_t i = 0; i < grad_dots.numel(); ++i) {
      const S r = cache.coeffs[i];
      grad_dots[i] = grad_coeffs[i] * r * (S(1) - r);
    }
  } else {
    grad_dots = softmax_backward(cache.coeffs, grad_coeffs, 1);
  }
  if (cfg.scaled_inner)
    for (std::size_t i = 0; i < grad_dots.numel(); ++i) grad_dots[i] *= scale;

  // inner-product backward: into S and into the coefficient-side vectors
  Tensor<S> grad_coef_modes({n, g, cm});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t gi = 0; gi < g; ++gi) {
      ConstVecMap<S> dd(grad_dots.data() + (b * g + gi) * area, area);
      ConstVecMap<S> z(coef_modes.data() + (b * g + gi) * cm, cm);
      ConstMatMap<S> sg(features.data() + (b * g * cm + gi * cm) * area, cm, area);
      MatMap<S> ds(grads.features.data() + (b * g * cm + gi * cm) * area, cm, area);
      ds.noalias() += z * dd.transpose();
      VecMap<S> dzc(grad_coef_modes.data() + (b * g + gi) * cm, cm);
      dzc.noalias() = sg * dd;
    }
  }

  // combine the two consumers of the (possibly mixed) modal vectors
  Tensor<S> grad_modes({n, g, cm});
  if (!cfg.interaction) {
    for (std::size_t i = 0; i < grad_modes.numel(); ++i)
      grad_modes[i] = grad_coef_modes[i] + grad_ctx[i];
  } else {
    Tensor<S> grad_mixed = grad_coef_modes;
    if (cfg.context_uses_mixed) {
      axpy(S(1), grad_ctx, grad_mixed);
    } else {
      grad_modes = grad_ctx;
    }
    // interaction backward: z' = W z with W = rowwise softmax of z z^T
    for (std::size_t b = 0; b < n; ++b) {
      ConstMatMap<S> z(cache.modes.data() + b * g * cm, g, cm);
      ConstMatMap<S> wmat(cache.mix_weights.data() + b * g * g, g, g);
      ConstMatMap<S> dzp(grad_mixed.data() + b * g * cm, g, cm);
      MatMap<S> dz(grad_modes.data() + b * g * cm, g, cm);
      dz.noalias() += wmat.transpose() * dzp;
      MatRM<S> dw = dzp * z.transpose();  // (G, G)
      MatRM<S> dq(g, g);
      for (std::size_t row = 0; row < g; ++row) {
        const S dot = (wmat.row(row).array() * dw.row(row).array()).sum();
        dq.row(row) = wmat.row(row).array() * (dw.row(row).array() - dot);
      }
      dz.noalias() += dq * z;
      dz.noalias() += dq.transpose() * z;
    }
  }

  // aggregation backward: z_g = S_g M_g (or the spatial mean)
  Tensor<S> grad_masks({n, g, h, w});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t gi = 0; gi < g; ++gi) {
      ConstVecMap<S> dz(grad_modes.data() + (b * g + gi) * cm, cm);
      ConstMatMap<S> sg(features.data() + (b * g * cm + gi * cm) * area, cm, area);
      MatMap<S> ds(grads.features.data() + (b * g * cm + gi * cm) * area, cm, area);
      if (cfg.mean_pool) {
        ds.noalias() += dz * MatRM<S>::Constant(1, area, S(1) / S(area));
      } else {
        ConstVecMap<S> mg(cache.masks.data() + (b * g + gi) * area, area);
        ds.noalias() += dz * mg.transpose();
        VecMap<S> dm(grad_masks.data() + (b * g + gi) * area, area);
        dm.noalias() = sg.transpose() * dz;
      }
    }
  }
  if (grad_masks_extra) axpy(S(1), *grad_masks_extra, grad_masks);

  // mask softmax + mask conv backward
  Tensor<S> grad_logits =
      softmax_backward(cache.masks.reshaped({n, g, area}), grad_masks.reshaped({n, g, area}), 2)
          .reshaped({n, g, h, w});
  const Tensor<S>& src = cfg.masks_from_input ? cache.mask_source : features;
  const Conv2dSpec pointwise{cfg.groups, {1, 1}, {0, 0}};
  auto gm = conv2d_grouped_backward(grad_logits, src, p.mask_w, false, pointwise);
  grads.mask_w = std::move(gm.weight);
  if (cfg.masks_from_input)
    grads.mask_source = std::move(gm.input);
  else
    axpy(S(1), gm.input, grads.features);
  return grads;
}

}  // namespace strattn
