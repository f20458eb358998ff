// SPDX-License-Identifier: Apache-2.0
//
// Forward and backward kernels on rank-4 feature maps: grouped
// cross-correlation (im2col + GEMM per group), masked softmax, sigmoid,
// ReLU, batch normalization. All forwards are pure; training-mode batch
// norm additionally updates its running statistics unless told not to.

#pragma once

#include <optional>
#include <type_traits>
#include <utility>

#include "strattn/tensor.hpp"
#include "strattn/threads.hpp"

namespace strattn {

struct Conv2dSpec {
  int groups = 1;
  std::pair<int, int> stride = {1, 1};
  std::pair<int, int> padding = {0, 0};
};

namespace detail {

struct ConvDims {
  std::size_t n, cin, h, w;
  std::size_t cout, cin_g, kh, kw;
  std::size_t ho, wo;
  std::size_t groups, cout_g;
};

template <class S>
ConvDims conv_dims(const Tensor<S>& input, const Tensor<S>& weight,
                   std::type_identity_t<const Tensor<S>*> bias,
                   const Conv2dSpec& spec) {
  require_rank(input, 4, "conv2d_grouped input");
  require_rank(weight, 4, "conv2d_grouped weight");
  ConvDims d;
  d.n = input.extent(0);
  d.cin = input.extent(1);
  d.h = input.extent(2);
  d.w = input.extent(3);
  d.cout = weight.extent(0);
  d.cin_g = weight.extent(1);
  d.kh = weight.extent(2);
  d.kw = weight.extent(3);
  if (spec.groups < 1) throw ShapeError("conv2d_grouped: groups must be >= 1");
  d.groups = std::size_t(spec.groups);
  if (d.cin % d.groups != 0)
    throw ShapeError("conv2d_grouped: input channels " + std::to_string(d.cin) +
                     " not divisible by groups " + std::to_string(d.groups));
  if (d.cout % d.groups != 0)
    throw ShapeError("conv2d_grouped: output channels " + std::to_string(d.cout) +
                     " not divisible by groups " + std::to_string(d.groups));
  if (d.cin_g != d.cin / d.groups)
    throw ShapeError("conv2d_grouped: weight in-channel extent " + std::to_string(d.cin_g) +
                     " does not match input channels/groups = " +
                     std::to_string(d.cin / d.groups));
  d.cout_g = d.cout / d.groups;
  if (bias) {
    require_rank(*bias, 1, "conv2d_grouped bias");
    if (bias->extent(0) != d.cout)
      throw ShapeError("conv2d_grouped: bias extent " + std::to_string(bias->extent(0)) +
                       " does not match output channels " + std::to_string(d.cout));
  }
  const auto [sh, sw] = spec.stride;
  const auto [ph, pw] = spec.padding;
  if (sh < 1 || sw < 1) throw ShapeError("conv2d_grouped: stride must be >= 1");
  if (ph < 0 || pw < 0) throw ShapeError("conv2d_grouped: padding must be >= 0");
  const long ho = (long(d.h) + 2 * ph - long(d.kh)) / sh + 1;
  const long wo = (long(d.w) + 2 * pw - long(d.kw)) / sw + 1;
  if (ho < 1 || wo < 1)
    throw ShapeError("conv2d_grouped: kernel " + std::to_string(d.kh) + "x" +
                     std::to_string(d.kw) + " does not fit input " + std::to_string(d.h) + "x" +
                     std::to_string(d.w) + " with the given stride/padding");
  d.ho = std::size_t(ho);
  d.wo = std::size_t(wo);
  return d;
}

// Column buffer layout: row ((c*kh + i)*kw + j), one column per output pixel.
template <class S>
void im2col(const S* in, const ConvDims& d, const Conv2dSpec& spec, S* col) {
  const auto [sh, sw] = spec.stride;
  const auto [ph, pw] = spec.padding;
  const std::size_t area = d.ho * d.wo;
  for (std::size_t c = 0; c < d.cin; ++c) {
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j) {
        S* row = col + ((c * d.kh + i) * d.kw + j) * area;
        for (std::size_t oh = 0; oh < d.ho; ++oh) {
          const long ih = long(oh) * sh - ph + long(i);
          for (std::size_t ow = 0; ow < d.wo; ++ow) {
            const long iw = long(ow) * sw - pw + long(j);
            const bool inside =
                ih >= 0 && ih < long(d.h) && iw >= 0 && iw < long(d.w);
            row[oh * d.wo + ow] = inside ? in[(c * d.h + std::size_t(ih)) * d.w +
                                              std::size_t(iw)]
                                         : S(0);
          }
        }
      }
    }
  }
}

template <class S>
void col2im_accumulate(const S* col, const ConvDims& d, const Conv2dSpec& spec, S* in_grad) {
  const auto [sh, sw] = spec.stride;
  const auto [ph, pw] = spec.padding;
  const std::size_t area = d.ho * d.wo;
  for (std::size_t c = 0; c < d.cin; ++c) {
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j) {
        const S* row = col + ((c * d.kh + i) * d.kw + j) * area;
        for (std::size_t oh = 0; oh < d.ho; ++oh) {
          const long ih = long(oh) * sh - ph + long(i);
          if (ih < 0 || ih >= long(d.h)) continue;
          for (std::size_t ow = 0; ow < d.wo; ++ow) {
            const long iw = long(ow) * sw - pw + long(j);
            if (iw < 0 || iw >= long(d.w)) continue;
            in_grad[(c * d.h + std::size_t(ih)) * d.w + std::size_t(iw)] +=
                row[oh * d.wo + ow];
          }
        }
      }
    }
  }
}

inline bool is_pointwise(const ConvDims& d, const Conv2dSpec& spec) {
  return d.kh == 1 && d.kw == 1 && spec.stride == std::pair<int, int>{1, 1} &&
         spec.padding == std::pair<int, int>{0, 0};
}

}  // namespace detail

// Grouped 2-D cross-correlation. input (N, Cin, H, W), weight
// (Cout, Cin/groups, kH, kW), optional bias (Cout).
template <class S>
Tensor<S> conv2d_grouped(const Tensor<S>& input, const Tensor<S>& weight,
                         std::type_identity_t<const Tensor<S>*> bias, const Conv2dSpec& spec) {
  const auto d = detail::conv_dims(input, weight, bias, spec);
  Tensor<S> out({d.n, d.cout, d.ho, d.wo});
  const std::size_t area = d.ho * d.wo;
  const std::size_t krows = d.cin_g * d.kh * d.kw;
  const bool pointwise = detail::is_pointwise(d, spec);

  parallel_for(d.n, [&](std::size_t n) {
    Tensor<S> col;
    const S* cols = nullptr;
    if (pointwise) {
      cols = input.data() + n * d.cin * area;
    } else {
      col = Tensor<S>({d.cin * d.kh * d.kw, area});
      detail::im2col(input.data() + n * d.cin * d.h * d.w, d, spec, col.data());
      cols = col.data();
    }
    for (std::size_t g = 0; g < d.groups; ++g) {
      ConstMatMap<S> wg(weight.data() + g * d.cout_g * krows, d.cout_g, krows);
      ConstMatMap<S> cg(cols + g * krows * area, krows, area);
      MatMap<S> og(out.data() + (n * d.cout + g * d.cout_g) * area, d.cout_g, area);
      og.noalias() = wg * cg;
    }
    if (bias) {
      for (std::size_t oc = 0; oc < d.cout; ++oc) {
        S* row = out.data() + (n * d.cout + oc) * area;
        const S b = (*bias)[oc];
        for (std::size_t p = 0; p < area; ++p) row[p] += b;
      }
    }
  });
  debug_check_finite(out, "conv2d_grouped output");
  return out;
}

template <class S>
struct Conv2dGrads {
  Tensor<S> input;
  Tensor<S> weight;
  Tensor<S> bias;  // empty when the forward had no bias
};

template <class S>
Conv2dGrads<S> conv2d_grouped_backward(const Tensor<S>& grad_out, const Tensor<S>& input,
                                       const Tensor<S>& weight, bool has_bias,
                                       const Conv2dSpec& spec) {
  const auto d = detail::conv_dims(input, weight, nullptr, spec);
  require_rank(grad_out, 4, "conv2d_grouped_backward grad");
  if (grad_out.extent(0) != d.n || grad_out.extent(1) != d.cout ||
      grad_out.extent(2) != d.ho || grad_out.extent(3) != d.wo)
    throw ShapeError("conv2d_grouped_backward: upstream grad shape " +
                     shape_str(grad_out.shape()) + " does not match forward output");

  Conv2dGrads<S> grads;
  grads.input = Tensor<S>(input.shape());
  grads.weight = Tensor<S>(weight.shape());
  if (has_bias) grads.bias = Tensor<S>({d.cout});

  const std::size_t area = d.ho * d.wo;
  const std::size_t krows = d.cin_g * d.kh * d.kw;
  const bool pointwise = detail::is_pointwise(d, spec);
  Tensor<S> col, gcol;
  if (!pointwise) {
    col = Tensor<S>({d.cin * d.kh * d.kw, area});
    gcol = Tensor<S>({d.cin * d.kh * d.kw, area});
  }

  for (std::size_t n = 0; n < d.n; ++n) {
    const S* cols;
    if (pointwise) {
      cols = input.data() + n * d.cin * area;
    } else {
      detail::im2col(input.data() + n * d.cin * d.h * d.w, d, spec, col.data());
      cols = col.data();
    }
    for (std::size_t g = 0; g < d.groups; ++g) {
      ConstMatMap<S> go(grad_out.data() + (n * d.cout + g * d.cout_g) * area, d.cout_g, area);
      ConstMatMap<S> cg(cols + g * krows * area, krows, area);
      MatMap<S> gw(grads.weight.data() + g * d.cout_g * krows, d.cout_g, krows);
      gw.noalias() += go * cg.transpose();
      ConstMatMap<S> wg(weight.data() + g * d.cout_g * krows, d.cout_g, krows);
      if (pointwise) {
        MatMap<S> gi(grads.input.data() + (n * d.cin + g * d.cin_g) * area, krows, area);
        gi.noalias() += wg.transpose() * go;
      } else {
        MatMap<S> gc(gcol.data() + g * krows * area, krows, area);
        gc.noalias() = wg.transpose() * go;
      }
    }
    if (!pointwise)
      detail::col2im_accumulate(gcol.data(), d, spec,
                                grads.input.data() + n * d.cin * d.h * d.w);
    if (has_bias) {
      for (std::size_t oc = 0; oc < d.cout; ++oc) {
        const S* row = grad_out.data() + (n * d.cout + oc) * area;
        S acc = 0;
        for (std::size_t p = 0; p < area; ++p) acc += row[p];
        grads.bias[oc] += acc;
      }
    }
  }
  return grads;
}

// ---- softmax ------------------------------------------------------------

// Max-shifted softmax along `axis`. A mask (same shape, nonzero = valid)
// restricts normalization to valid entries; masked entries output exactly 0.
template <class S>
Tensor<S> softmax(const Tensor<S>& logits, std::size_t axis,
                  std::type_identity_t<const Tensor<S>*> mask = nullptr) {
  if (axis >= logits.rank())
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(logits.rank()));
  if (mask) require_same_shape(logits, *mask, "softmax mask");
  const auto& sh = logits.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= sh[d];
  for (std::size_t d = axis + 1; d < sh.size(); ++d) inner *= sh[d];
  const std::size_t len = sh[axis];

  Tensor<S> out(logits.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      S mx = -std::numeric_limits<S>::infinity();
      bool any = false;
      for (std::size_t l = 0; l < len; ++l) {
        const std::size_t idx = base + l * inner;
        if (mask && (*mask)[idx] == S(0)) continue;
        any = true;
        mx = std::max(mx, logits[idx]);
      }
      if (!any) throw NumericError("softmax: fully masked slice");
      S sum = 0;
      for (std::size_t l = 0; l < len; ++l) {
        const std::size_t idx = base + l * inner;
        if (mask && (*mask)[idx] == S(0)) {
          out[idx] = S(0);
          continue;
        }
        const S e = std::exp(logits[idx] - mx);
        out[idx] = e;
        sum += e;
      }
      for (std::size_t l = 0; l < len; ++l) out[base + l * inner] /= sum;
    }
  }
  debug_check_finite(out, "softmax output");
  return out;
}

// Backward through softmax given its output y: dx = y * (dy - sum(y * dy)).
// Masked slots carry y = 0 and therefore produce zero input gradient.
template <class S>
Tensor<S> softmax_backward(const Tensor<S>& y, const Tensor<S>& grad_y, std::size_t axis) {
  require_same_shape(y, grad_y, "softmax_backward");
  if (axis >= y.rank()) throw ShapeError("softmax_backward: axis out of range");
  const auto& sh = y.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= sh[d];
  for (std::size_t d = axis + 1; d < sh.size(); ++d) inner *= sh[d];
  const std::size_t len = sh[axis];

  Tensor<S> out(y.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      S dot = 0;
      for (std::size_t l = 0; l < len; ++l) {
        const std::size_t idx = base + l * inner;
        dot += y[idx] * grad_y[idx];
      }
      for (std::size_t l = 0; l < len; ++l) {
        const std::size_t idx = base + l * inner;
        out[idx] = y[idx] * (grad_y[idx] - dot);
      }
    }
  }
  return out;
}

// ---- sigmoid / relu -----------------------------------------------------

template <class S>
S sigmoid_scalar(S x) {
  if (x >= S(0)) {
    const S e = std::exp(-x);
    return S(1) / (S(1) + e);
  }
  const S e = std::exp(x);
  return e / (S(1) + e);
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  Tensor<S> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = sigmoid_scalar(x[i]);
  debug_check_finite(out, "sigmoid output");
  return out;
}

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > S(0) ? x[i] : S(0);
  return out;
}

template <class S>
Tensor<S> relu_backward(const Tensor<S>& grad_y, const Tensor<S>& x) {
  require_same_shape(grad_y, x, "relu_backward");
  Tensor<S> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > S(0) ? grad_y[i] : S(0);
  return out;
}

// ---- batch normalization -------------------------------------------------

template <class S>
struct BatchNormParams {
  Tensor<S> gamma, beta;                  // (C)
  Tensor<S> running_mean, running_var;    // (C)
  S momentum = S(0.1);
  S eps = S(1e-5);
  enum class Mode { training, frozen };
  Mode mode = Mode::training;
  bool track_running = true;  // gradient checking disables the stat update

  static BatchNormParams identity(std::size_t channels) {
    BatchNormParams p;
    p.gamma = Tensor<S>::full({channels}, S(1));
    p.beta = Tensor<S>({channels});
    p.running_mean = Tensor<S>({channels});
    p.running_var = Tensor<S>::full({channels}, S(1));
    return p;
  }
};

template <class S>
struct BatchNormCache {
  Tensor<S> xhat;     // normalized input, (N, C, H, W)
  Tensor<S> inv_std;  // per channel, (C)
  typename BatchNormParams<S>::Mode mode;
};

template <class S>
struct BatchNormResult {
  Tensor<S> out;
  BatchNormCache<S> cache;
};

template <class S>
BatchNormResult<S> batch_norm(const Tensor<S>& input, BatchNormParams<S>& params) {
  require_rank(input, 4, "batch_norm input");
  const std::size_t n = input.extent(0), c = input.extent(1);
  const std::size_t area = input.extent(2) * input.extent(3);
  if (params.gamma.numel() != c)
    throw ShapeError("batch_norm: params sized for " + std::to_string(params.gamma.numel()) +
                     " channels, input has " + std::to_string(c));
  if (!(params.eps > S(0))) throw ShapeError("batch_norm: eps must be > 0");
  const std::size_t count = n * area;
  const bool training = params.mode == BatchNormParams<S>::Mode::training;
  if (training && count == 1)
    throw NumericError("batch_norm: training mode needs more than one value per channel");

  BatchNormResult<S> r;
  r.out = Tensor<S>(input.shape());
  r.cache.xhat = Tensor<S>(input.shape());
  r.cache.inv_std = Tensor<S>({c});
  r.cache.mode = params.mode;

  for (std::size_t ch = 0; ch < c; ++ch) {
    S mean, var;
    if (training) {
      S sum = 0, sq = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const S* x = input.data() + (b * c + ch) * area;
        for (std::size_t p = 0; p < area; ++p) {
          sum += x[p];
          sq += x[p] * x[p];
        }
      }
      mean = sum / S(count);
      var = sq / S(count) - mean * mean;
      if (var < S(0)) var = S(0);
      if (params.track_running) {
        params.running_mean[ch] =
            (S(1) - params.momentum) * params.running_mean[ch] + params.momentum * mean;
        params.running_var[ch] =
            (S(1) - params.momentum) * params.running_var[ch] + params.momentum * var;
      }
    } else {
      mean = params.running_mean[ch];
      var = params.running_var[ch];
    }
    const S inv = S(1) / std::sqrt(var + params.eps);
    r.cache.inv_std[ch] = inv;
    const S g = params.gamma[ch], b0 = params.beta[ch];
    for (std::size_t b = 0; b < n; ++b) {
      const S* x = input.data() + (b * c + ch) * area;
      S* xh = r.cache.xhat.data() + (b * c + ch) * area;
      S* y = r.out.data() + (b * c + ch) * area;
      for (std::size_t p = 0; p < area; ++p) {
        xh[p] = (x[p] - mean) * inv;
        y[p] = g * xh[p] + b0;
      }
    }
  }
  debug_check_finite(r.out, "batch_norm output");
  return r;
}

template <class S>
struct BatchNormGrads {
  Tensor<S> input;
  Tensor<S> gamma, beta;
};

template <class S>
BatchNormGrads<S> batch_norm_backward(const Tensor<S>& grad_out, const BatchNormCache<S>& cache,
                                      const BatchNormParams<S>& params) {
  require_same_shape(grad_out, cache.xhat, "batch_norm_backward");
  const std::size_t n = grad_out.extent(0), c = grad_out.extent(1);
  const std::size_t area = grad_out.extent(2) * grad_out.extent(3);
  const std::size_t count = n * area;
  const bool training = cache.mode == BatchNormParams<S>::Mode::training;

  BatchNormGrads<S> g;
  g.input = Tensor<S>(grad_out.shape());
  g.gamma = Tensor<S>({c});
  g.beta = Tensor<S>({c});

  for (std::size_t ch = 0; ch < c; ++ch) {
    S sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const S* dy = grad_out.data() + (b * c + ch) * area;
      const S* xh = cache.xhat.data() + (b * c + ch) * area;
      for (std::size_t p = 0; p < area; ++p) {
        sum_dy += dy[p];
        sum_dy_xhat += dy[p] * xh[p];
      }
    }
    g.gamma[ch] = sum_dy_xhat;
    g.beta[ch] = sum_dy;
    const S gamma = params.gamma[ch];
    const S inv = cache.inv_std[ch];
    if (training) {
      const S mean_dy = sum_dy / S(count);
      const S mean_dy_xhat = sum_dy_xhat / S(count);
      for (std::size_t b = 0; b < n; ++b) {
        const S* dy = grad_out.data() + (b * c + ch) * area;
        const S* xh = cache.xhat.data() + (b * c + ch) * area;
        S* dx = g.input.data() + (b * c + ch) * area;
        for (std::size_t p = 0; p < area; ++p)
          dx[p] = gamma * inv * (dy[p] - mean_dy - xh[p] * mean_dy_xhat);
      }
    } else {
      for (std::size_t b = 0; b < n; ++b) {
        const S* dy = grad_out.data() + (b * c + ch) * area;
        S* dx = g.input.data() + (b * c + ch) * area;
        for (std::size_t p = 0; p < area; ++p) dx[p] = gamma * inv * dy[p];
      }
    }
  }
  return g;
}

}  // namespace strattn
