// SPDX-License-Identifier: Apache-2.0
//
// Windowed local attention. Each pixel i attends over its KxK
// neighbourhood with data-dependent weights
//
//   a_ij = softmax_j( query(x_i)_j + key(x_j) ),   s_i = sum_j a_ij value(x_j)
//
// computed independently per group. query maps a pixel to K*K logits (one
// per window slot), key maps each neighbour to a scalar logit, value is the
// aggregated projection. Border windows renormalize over in-bounds
// neighbours only (masked softmax; no phantom zero-padded values).
//
// Window slots are ordered row-major over offsets, top-left to
// bottom-right; slot j has offset (j / K - K/2, j % K - K/2). This ordering
// is part of the checkpoint contract.

#pragma once

#include <optional>

#include "strattn/ops.hpp"
#include "strattn/tensor.hpp"

namespace strattn {

template <class S>
struct LocalAttnParams {
  Tensor<S> query_w, query_b;  // grouped 1x1, C -> G*K*K
  Tensor<S> key_w;             // grouped 1x1, C -> G; bias-free, a scalar
                               // shift is invisible to the window softmax
  Tensor<S> value_w, value_b;  // grouped 1x1, C -> G*C_m
  int window = 3;              // K, odd
  int groups = 1;              // G
  std::optional<BatchNormParams<S>> value_bn;  // after the value projection

  std::size_t out_per_mode() const { return value_w.extent(0) / std::size_t(groups); }

  static LocalAttnParams init(std::size_t in_channels, std::size_t out_per_mode, int groups,
                              int window, Rng& rng, bool with_bn) {
    if (window < 1 || window % 2 == 0)
      throw ShapeError("local attention: window size must be odd and positive, got " +
                       std::to_string(window));
    if (groups < 1 || in_channels % std::size_t(groups) != 0)
      throw ShapeError("local attention: groups " + std::to_string(groups) +
                       " do not divide channels " + std::to_string(in_channels));
    const std::size_t cg = in_channels / std::size_t(groups);
    const std::size_t kk = std::size_t(window) * std::size_t(window);
    LocalAttnParams p;
    p.window = window;
    p.groups = groups;
    p.query_w = seeded_init<S>({std::size_t(groups) * kk, cg, 1, 1}, cg, rng);
    p.query_b = Tensor<S>({std::size_t(groups) * kk});
    p.key_w = seeded_init<S>({std::size_t(groups), cg, 1, 1}, cg, rng);
    p.value_w = seeded_init<S>({std::size_t(groups) * out_per_mode, cg, 1, 1}, cg, rng);
    p.value_b = Tensor<S>({std::size_t(groups) * out_per_mode});
    if (with_bn) p.value_bn = BatchNormParams<S>::identity(std::size_t(groups) * out_per_mode);
    return p;
  }
};

// 0/1 validity of window slot j at each pixel, shape (K*K, H, W).
template <class S>
Tensor<S> window_validity(std::size_t h, std::size_t w, int window) {
  const int half = window / 2;
  const std::size_t kk = std::size_t(window) * std::size_t(window);
  Tensor<S> valid({kk, h, w});
  for (int j = 0; j < int(kk); ++j) {
    const int dy = j / window - half;
    const int dx = j % window - half;
    for (std::size_t y = 0; y < h; ++y) {
      const long ny = long(y) + dy;
      if (ny < 0 || ny >= long(h)) continue;
      for (std::size_t x = 0; x < w; ++x) {
        const long nx = long(x) + dx;
        if (nx >= 0 && nx < long(w)) valid(std::size_t(j), y, x) = S(1);
      }
    }
  }
  return valid;
}

namespace detail {

template <class S>
void check_local_input(const Tensor<S>& x, const LocalAttnParams<S>& p) {
  require_rank(x, 4, "local attention input");
  if (p.window < 1 || p.window % 2 == 0)
    throw ShapeError("local attention: window size must be odd, got " +
                     std::to_string(p.window));
  if (p.groups < 1 || x.extent(1) % std::size_t(p.groups) != 0)
    throw ShapeError("local attention: groups " + std::to_string(p.groups) +
                     " do not divide input channels " + std::to_string(x.extent(1)));
}

// Tile (K*K, H, W) validity to the full (N, G, K*K, H, W) logit shape.
template <class S>
Tensor<S> tile_validity(const Tensor<S>& valid, std::size_t n, std::size_t g) {
  Tensor<S> out({n, g, valid.extent(0), valid.extent(1), valid.extent(2)});
  const std::size_t block = valid.numel();
  for (std::size_t r = 0; r < n * g; ++r)
    std::copy(valid.data(), valid.data() + block, out.data() + r * block);
  return out;
}

}  // namespace detail

// Pre-softmax window logits, shape (N, G, K*K, H, W). Out-of-bounds slots
// are left at zero; combine with window_validity for masking.
template <class S>
Tensor<S> local_logits(const Tensor<S>& x, const LocalAttnParams<S>& p) {
  detail::check_local_input(x, p);
  const std::size_t n = x.extent(0), h = x.extent(2), w = x.extent(3);
  const std::size_t g = std::size_t(p.groups);
  const int window = p.window;
  const int half = window / 2;
  const std::size_t kk = std::size_t(window) * std::size_t(window);

  const Conv2dSpec pointwise{p.groups, {1, 1}, {0, 0}};
  Tensor<S> q = conv2d_grouped(x, p.query_w, &p.query_b, pointwise);  // (N, G*KK, H, W)
  Tensor<S> k = conv2d_grouped(x, p.key_w, nullptr, pointwise);       // (N, G, H, W)

  Tensor<S> logits({n, g, kk, h, w});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t gi = 0; gi < g; ++gi) {
      for (std::size_t j = 0; j < kk; ++j) {
        const int dy = int(j) / window - half;
        const int dx = int(j) % window - half;
        const std::size_t y0 = std::size_t(std::max(0, -dy));
        const std::size_t y1 = h - std::size_t(std::max(0, dy));
        const std::size_t x0 = std::size_t(std::max(0, -dx));
        const std::size_t x1 = w - std::size_t(std::max(0, dx));
        const S* qrow = q.data() + ((b * g * kk + gi * kk + j) * h) * w;
        const S* krow = k.data() + ((b * g + gi) * h) * w;
        S* out = logits.data() + (((b * g + gi) * kk + j) * h) * w;
        for (std::size_t y = y0; y < y1; ++y) {
          const S* kn = krow + (y + std::size_t(dy)) * w + std::size_t(dx);
          for (std::size_t x = x0; x < x1; ++x) out[y * w + x] = qrow[y * w + x] + kn[x];
        }
      }
    }
  }
  return logits;
}

template <class S>
struct LocalAttnCache {
  Tensor<S> input;     // x
  Tensor<S> values;    // value projection after optional BN, (N, G*C_m, H, W)
  Tensor<S> affinity;  // attention weights, (N, G, K*K, H, W)
  std::optional<BatchNormCache<S>> bn;
};

template <class S>
struct LocalAttnResult {
  Tensor<S> out;  // (N, G*C_m, H, W)
  LocalAttnCache<S> cache;
};

template <class S>
LocalAttnResult<S> local_attention_forward(const Tensor<S>& x, LocalAttnParams<S>& p) {
  detail::check_local_input(x, p);
  const std::size_t n = x.extent(0), h = x.extent(2), w = x.extent(3);
  const std::size_t g = std::size_t(p.groups);
  const int window = p.window;
  const int half = window / 2;
  const std::size_t kk = std::size_t(window) * std::size_t(window);
  const std::size_t cm = p.out_per_mode();

  const Conv2dSpec pointwise{p.groups, {1, 1}, {0, 0}};
  Tensor<S> values = conv2d_grouped(x, p.value_w, &p.value_b, pointwise);

  LocalAttnResult<S> r;
  if (p.value_bn) {
    auto bn = batch_norm(values, *p.value_bn);
    values = std::move(bn.out);
    r.cache.bn = std::move(bn.cache);
  }

  Tensor<S> logits = local_logits(x, p);
  Tensor<S> valid = detail::tile_validity(window_validity<S>(h, w, window), n, g);
  Tensor<S> affinity = softmax(logits, 2, &valid);

  r.out = Tensor<S>({n, g * cm, h, w});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t gi = 0; gi < g; ++gi) {
      for (std::size_t j = 0; j < kk; ++j) {
        const int dy = int(j) / window - half;
        const int dx = int(j) % window - half;
        const std::size_t y0 = std::size_t(std::max(0, -dy));
        const std::size_t y1 = h - std::size_t(std::max(0, dy));
        const std::size_t x0 = std::size_t(std::max(0, -dx));
        const std::size_t x1 = w - std::size_t(std::max(0, dx));
        const S* a = affinity.data() + (((b * g + gi) * kk + j) * h) * w;
        for (std::size_t c = 0; c < cm; ++c) {
          const S* v = values.data() + ((b * g * cm + gi * cm + c) * h) * w;
          S* out = r.out.data() + ((b * g * cm + gi * cm + c) * h) * w;
          for (std::size_t y = y0; y < y1; ++y) {
            const S* vn = v + (y + std::size_t(dy)) * w + std::size_t(dx);
            for (std::size_t x = x0; x < x1; ++x) out[y * w + x] += a[y * w + x] * vn[x];
          }
        }
      }
    }
  }
  debug_check_finite(r.out, "local attention output");

  r.cache.input = x;
  r.cache.values = std::move(values);
  r.cache.affinity = std::move(affinity);
  return r;
}

template <class S>
struct LocalAttnGrads {
  Tensor<S> input;
  Tensor<S> query_w, query_b, key_w, value_w, value_b;
  Tensor<S> bn_gamma, bn_beta;  // empty without BN
};

template <class S>
LocalAttnGrads<S> local_attention_backward(const Tensor<S>& grad_out,
                                           const LocalAttnCache<S>& cache,
                                           const LocalAttnParams<S>& p) {
  const Tensor<S>& x = cache.input;
  detail::check_local_input(x, p);
  const std::size_t n = x.extent(0), h = x.extent(2), w = x.extent(3);
  const std::size_t g = std::size_t(p.groups);
  const int window = p.window;
  const int half = window / 2;
  const std::size_t kk = std::size_t(window) * std::size_t(window);
  const std::size_t cm = p.out_per_mode();
  if (grad_out.rank() != 4 || grad_out.extent(0) != n || grad_out.extent(1) != g * cm ||
      grad_out.extent(2) != h || grad_out.extent(3) != w)
    throw ShapeError("local attention backward: grad shape " + shape_str(grad_out.shape()) +
                     " does not match cached forward");

  const Tensor<S>& affinity = cache.affinity;
  const Tensor<S>& values = cache.values;
  Tensor<S> grad_values(values.shape());
  Tensor<S> grad_affinity(affinity.shape());

  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t gi = 0; gi < g; ++gi) {
      for (std::size_t j = 0; j < kk; ++j) {
        const int dy = int(j) / window - half;
        const int dx = int(j) % window - half;
        const std::size_t y0 = std::size_t(std::max(0, -dy));
        const std::size_t y1 = h - std::size_t(std::max(0, dy));
        const std::size_t x0 = std::size_t(std::max(0, -dx));
        const std::size_t x1 = w - std::size_t(std::max(0, dx));
        const S* a = affinity.data() + (((b * g + gi) * kk + j) * h) * w;
        S* da = grad_affinity.data() + (((b * g + gi) * kk + j) * h) * w;
        for (std::size_t c = 0; c < cm; ++c) {
          const S* v = values.data() + ((b * g * cm + gi * cm + c) * h) * w;
          S* dv = grad_values.data() + ((b * g * cm + gi * cm + c) * h) * w;
          const S* dout = grad_out.data() + ((b * g * cm + gi * cm + c) * h) * w;
          for (std::size_t y = y0; y < y1; ++y) {
            const std::size_t noff = (y + std::size_t(dy)) * w + std::size_t(dx);
            for (std::size_t x = x0; x < x1; ++x) {
              da[y * w + x] += dout[y * w + x] * v[noff + x];
              dv[noff + x] += a[y * w + x] * dout[y * w + x];
            }
          }
        }
      }
    }
  }

  Tensor<S> grad_logits = softmax_backward(affinity, grad_affinity, 2);

  // split the logit gradient into its query part (slot at the centre pixel)
  // and key part (scattered onto the neighbour pixel)
  Tensor<S> grad_q({n, g * kk, h, w});
  Tensor<S> grad_k({n, g, h, w});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t gi = 0; gi < g; ++gi) {
      for (std::size_t j = 0; j < kk; ++j) {
        const int dy = int(j) / window - half;
        const int dx = int(j) % window - half;
        const std::size_t y0 = std::size_t(std::max(0, -dy));
        const std::size_t y1 = h - std::size_t(std::max(0, dy));
        const std::size_t x0 = std::size_t(std::max(0, -dx));
        const std::size_t x1 = w - std::size_t(std::max(0, dx));
        const S* dl = grad_logits.data() + (((b * g + gi) * kk + j) * h) * w;
        S* dq = grad_q.data() + ((b * g * kk + gi * kk + j) * h) * w;
        S* dk = grad_k.data() + ((b * g + gi) * h) * w;
        for (std::size_t y = y0; y < y1; ++y) {
          S* dkn = dk + (y + std::size_t(dy)) * w + std::size_t(dx);
          for (std::size_t x = x0; x < x1; ++x) {
            dq[y * w + x] = dl[y * w + x];
            dkn[x] += dl[y * w + x];
          }
        }
      }
    }
  }

  LocalAttnGrads<S> grads;
  if (p.value_bn) {
    auto bn = batch_norm_backward(grad_values, *cache.bn, *p.value_bn);
    grad_values = std::move(bn.input);
    grads.bn_gamma = std::move(bn.gamma);
    grads.bn_beta = std::move(bn.beta);
  }

  const Conv2dSpec pointwise{p.groups, {1, 1}, {0, 0}};
  auto gq = conv2d_grouped_backward(grad_q, x, p.query_w, true, pointwise);
  auto gk = conv2d_grouped_backward(grad_k, x, p.key_w, false, pointwise);
  auto gv = conv2d_grouped_backward(grad_values, x, p.value_w, true, pointwise);

  grads.input = std::move(gq.input);
  axpy(S(1), gk.input, grads.input);
  axpy(S(1), gv.input, grads.input);
  grads.query_w = std::move(gq.weight);
  grads.query_b = std::move(gq.bias);
  grads.key_w = std::move(gk.weight);
  grads.value_w = std::move(gv.weight);
  grads.value_b = std::move(gv.bias);
  return grads;
}

}  // namespace strattn
