// SPDX-License-Identifier: Apache-2.0
//
// Brute-force reference implementations used to cross-check the fast
// kernels, plus the comparison driver. Everything here is written as plain
// nested loops over definitions, deliberately sharing no computation path
// with the implementations under test.

#pragma once

#include <functional>
#include <string>
#include <type_traits>
#include <vector>

#include "strattn/local_attention.hpp"
#include "strattn/mode_attention.hpp"
#include "strattn/tensor.hpp"

namespace strattn::naive {

template <class S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight,
                 std::type_identity_t<const Tensor<S>*> bias,
                 int groups, std::pair<int, int> stride, std::pair<int, int> padding) {
  const std::size_t n = input.extent(0), cin = input.extent(1);
  const std::size_t h = input.extent(2), w = input.extent(3);
  const std::size_t cout = weight.extent(0), cin_g = weight.extent(1);
  const std::size_t kh = weight.extent(2), kw = weight.extent(3);
  const std::size_t g = std::size_t(groups);
  const std::size_t cout_g = cout / g;
  const auto [sh, sw] = stride;
  const auto [ph, pw] = padding;
  const std::size_t ho = std::size_t((long(h) + 2 * ph - long(kh)) / sh + 1);
  const std::size_t wo = std::size_t((long(w) + 2 * pw - long(kw)) / sw + 1);

  Tensor<S> out({n, cout, ho, wo});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t gi = 0; gi < g; ++gi)
      for (std::size_t oc = 0; oc < cout_g; ++oc)
        for (std::size_t oh = 0; oh < ho; ++oh)
          for (std::size_t ow = 0; ow < wo; ++ow) {
            double acc = bias ? double((*bias)[gi * cout_g + oc]) : 0.0;
            for (std::size_t ic = 0; ic < cin_g; ++ic)
              for (std::size_t i = 0; i < kh; ++i)
                for (std::size_t j = 0; j < kw; ++j) {
                  const long ih = long(oh) * sh - ph + long(i);
                  const long iw = long(ow) * sw - pw + long(j);
                  if (ih < 0 || ih >= long(h) || iw < 0 || iw >= long(w)) continue;
                  acc += double(input(b, gi * cin_g + ic, std::size_t(ih), std::size_t(iw))) *
                         double(weight(gi * cout_g + oc, ic, i, j));
                }
            out(b, gi * cout_g + oc, oh, ow) = S(acc);
          }
  return out;
}

// Per-pixel neighbour walk over the local attention definition. Ignores
// the optional value-path BN; compare against params without it.
template <class S>
Tensor<S> local_attention(const Tensor<S>& x, const LocalAttnParams<S>& p) {
  const std::size_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  const std::size_t g = std::size_t(p.groups);
  const std::size_t cg = c / g;
  const int window = p.window;
  const int half = window / 2;
  const std::size_t kk = std::size_t(window) * std::size_t(window);
  const std::size_t cm = p.out_per_mode();

  auto project = [&](const Tensor<S>* wt, const Tensor<S>* bt, std::size_t rows,
                     std::size_t b, std::size_t gi, std::size_t y, std::size_t xx,
                     std::vector<double>& out) {
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = bt ? double((*bt)[gi * rows + r]) : 0.0;
      for (std::size_t ic = 0; ic < cg; ++ic)
        acc += double((*wt)(gi * rows + r, ic, 0, 0)) * double(x(b, gi * cg + ic, y, xx));
      out[r] = acc;
    }
  };

  Tensor<S> out({n, g * cm, h, w});
  std::vector<double> q(kk), scalar(1), val(cm);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t gi = 0; gi < g; ++gi)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) {
          project(&p.query_w, &p.query_b, kk, b, gi, y, xx, q);
          std::vector<double> logits(kk);
          std::vector<bool> ok(kk, false);
          double mx = -1e300;
          for (std::size_t j = 0; j < kk; ++j) {
            const long ny = long(y) + long(j) / window - half;
            const long nx = long(xx) + long(j) % window - half;
            if (ny < 0 || ny >= long(h) || nx < 0 || nx >= long(w)) continue;
            project(&p.key_w, nullptr, 1, b, gi, std::size_t(ny), std::size_t(nx), scalar);
            logits[j] = q[j] + scalar[0];
            ok[j] = true;
            mx = std::max(mx, logits[j]);
          }
          double denom = 0;
          for (std::size_t j = 0; j < kk; ++j)
            if (ok[j]) denom += std::exp(logits[j] - mx);
          for (std::size_t j = 0; j < kk; ++j) {
            if (!ok[j]) continue;
            const double a = std::exp(logits[j] - mx) / denom;
            const long ny = long(y) + long(j) / window - half;
            const long nx = long(xx) + long(j) % window - half;
            project(&p.value_w, &p.value_b, cm, b, gi, std::size_t(ny), std::size_t(nx), val);
            for (std::size_t cc = 0; cc < cm; ++cc)
              out(b, gi * cm + cc, y, xx) += S(a * val[cc]);
          }
        }
  return out;
}

// Flatten-and-softmax over the mask conv logits.
template <class S>
Tensor<S> spatial_masks(const Tensor<S>& src, const Tensor<S>& mask_w, int groups) {
  Tensor<S> logits = conv2d(src, mask_w, nullptr, groups, {1, 1}, {0, 0});
  const std::size_t n = logits.extent(0), g = logits.extent(1);
  const std::size_t area = logits.extent(2) * logits.extent(3);
  Tensor<S> m(logits.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t gi = 0; gi < g; ++gi) {
      const S* in = logits.data() + (b * g + gi) * area;
      S* out = m.data() + (b * g + gi) * area;
      double mx = double(in[0]);
      for (std::size_t i = 1; i < area; ++i) mx = std::max(mx, double(in[i]));
      double denom = 0;
      for (std::size_t i = 0; i < area; ++i) denom += std::exp(double(in[i]) - mx);
      for (std::size_t i = 0; i < area; ++i) out[i] = S(std::exp(double(in[i]) - mx) / denom);
    }
  return m;
}

template <class S>
Tensor<S> modal_vectors(const Tensor<S>& features, const Tensor<S>& masks, bool mean_pool) {
  const std::size_t n = features.extent(0), g = masks.extent(1);
  const std::size_t cm = features.extent(1) / g;
  const std::size_t h = features.extent(2), w = features.extent(3);
  Tensor<S> z({n, g, cm});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t gi = 0; gi < g; ++gi)
      for (std::size_t c = 0; c < cm; ++c) {
        double acc = 0;
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const double weight =
                mean_pool ? 1.0 / double(h * w) : double(masks(b, gi, y, x));
            acc += weight * double(features(b, gi * cm + c, y, x));
          }
        z(b, gi, c) = S(acc);
      }
  return z;
}

template <class S>
Tensor<S> mode_interaction(const Tensor<S>& modes) {
  const std::size_t n = modes.extent(0), g = modes.extent(1), cm = modes.extent(2);
  Tensor<S> mixed({n, g, cm});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ga = 0; ga < g; ++ga) {
      std::vector<double> dots(g);
      double mx = -1e300;
      for (std::size_t gb = 0; gb < g; ++gb) {
        double acc = 0;
        for (std::size_t c = 0; c < cm; ++c)
          acc += double(modes(b, ga, c)) * double(modes(b, gb, c));
        dots[gb] = acc;
        mx = std::max(mx, acc);
      }
      double denom = 0;
      for (std::size_t gb = 0; gb < g; ++gb) denom += std::exp(dots[gb] - mx);
      for (std::size_t gb = 0; gb < g; ++gb) {
        const double wgt = std::exp(dots[gb] - mx) / denom;
        for (std::size_t c = 0; c < cm; ++c)
          mixed(b, ga, c) += S(wgt * double(modes(b, gb, c)));
      }
    }
  return mixed;
}

// The composed mode-attention pipeline, all loops.
template <class S>
Tensor<S> mode_attention(const Tensor<S>& features, const ModeParams<S>& p,
                         std::type_identity_t<const Tensor<S>*> mask_source = nullptr) {
  const ModeConfig& cfg = p.cfg;
  const Tensor<S>& src = cfg.masks_from_input ? *mask_source : features;
  Tensor<S> masks = naive::spatial_masks(src, p.mask_w, cfg.groups);
  Tensor<S> modes = naive::modal_vectors(features, masks, cfg.mean_pool);
  Tensor<S> mixed = cfg.interaction ? naive::mode_interaction(modes) : modes;
  const Tensor<S>& coef_modes = cfg.interaction ? mixed : modes;
  const Tensor<S>& ctx_modes = (cfg.interaction && cfg.context_uses_mixed) ? mixed : modes;

  const std::size_t n = features.extent(0), g = std::size_t(cfg.groups);
  const std::size_t cm = features.extent(1) / g;
  const std::size_t h = features.extent(2), w = features.extent(3);
  Tensor<S> out = features;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        std::vector<double> dots(g);
        for (std::size_t gi = 0; gi < g; ++gi) {
          double acc = 0;
          for (std::size_t c = 0; c < cm; ++c)
            acc += double(features(b, gi * cm + c, y, x)) * double(coef_modes(b, gi, c));
          if (cfg.scaled_inner) acc /= std::sqrt(double(cm));
          dots[gi] = acc;
        }
        std::vector<double> r(g);
        if (cfg.gating == Gating::sigmoid) {
          for (std::size_t gi = 0; gi < g; ++gi) r[gi] = 1.0 / (1.0 + std::exp(-dots[gi]));
        } else {
          double mx = dots[0];
          for (std::size_t gi = 1; gi < g; ++gi) mx = std::max(mx, dots[gi]);
          double denom = 0;
          for (std::size_t gi = 0; gi < g; ++gi) denom += std::exp(dots[gi] - mx);
          for (std::size_t gi = 0; gi < g; ++gi) r[gi] = std::exp(dots[gi] - mx) / denom;
        }
        for (std::size_t gi = 0; gi < g; ++gi)
          for (std::size_t c = 0; c < cm; ++c)
            out(b, gi * cm + c, y, x) += S(r[gi] * double(ctx_modes(b, gi, c)));
      }
  return out;
}

// O((HW)^2) pairwise attention over all positions:
// out_i = x_i + sum_j softmax_j(<theta(x_i), phi(x_j)>) u(x_j).
template <class S>
Tensor<S> nonlocal_block(const Tensor<S>& x, const Tensor<S>& theta_w, const Tensor<S>& phi_w,
                         const Tensor<S>& u_w) {
  const std::size_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  const std::size_t ce = theta_w.extent(0);
  const std::size_t area = h * w;
  auto embed = [&](const Tensor<S>& wt, std::size_t rows, std::size_t b, std::size_t i,
                   std::vector<double>& out) {
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0;
      for (std::size_t ic = 0; ic < c; ++ic)
        acc += double(wt(r, ic, 0, 0)) * double(x.data()[(b * c + ic) * area + i]);
      out[r] = acc;
    }
  };
  Tensor<S> out = x;
  std::vector<double> ti(ce), pj(ce), uj(c);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < area; ++i) {
      embed(theta_w, ce, b, i, ti);
      std::vector<double> logits(area);
      double mx = -1e300;
      for (std::size_t j = 0; j < area; ++j) {
        embed(phi_w, ce, b, j, pj);
        double acc = 0;
        for (std::size_t r = 0; r < ce; ++r) acc += ti[r] * pj[r];
        logits[j] = acc;
        mx = std::max(mx, acc);
      }
      double denom = 0;
      for (std::size_t j = 0; j < area; ++j) denom += std::exp(logits[j] - mx);
      for (std::size_t j = 0; j < area; ++j) {
        const double f = std::exp(logits[j] - mx) / denom;
        embed(u_w, c, b, j, uj);
        for (std::size_t ic = 0; ic < c; ++ic)
          out.data()[(b * c + ic) * area + i] += S(f * uj[ic]);
      }
    }
  return out;
}

}  // namespace strattn::naive

namespace strattn {

using Instance = std::vector<TensorX>;
using OpHandle = std::function<TensorX(const Instance&)>;
using InstanceMaker = std::function<Instance(Rng&)>;

struct OracleReport {
  double max_rel_err = 0;
  std::size_t worst_trial = 0;
  std::size_t trials = 0;
  bool shapes_agree = true;
  double threshold = 1e-10;

  bool pass() const { return shapes_agree && max_rel_err <= threshold; }
};

// Runs both handles on `trials` random instances and records the worst
// elementwise relative error.
inline OracleReport oracle_compare(const OpHandle& fast, const OpHandle& reference,
                                   const InstanceMaker& make_instance, std::size_t trials,
                                   Rng rng = Rng(20240209), double threshold = 1e-10) {
  OracleReport report;
  report.trials = trials;
  report.threshold = threshold;
  for (std::size_t t = 0; t < trials; ++t) {
    const Instance inst = make_instance(rng);
    const TensorX a = fast(inst);
    const TensorX b = reference(inst);
    if (!a.same_shape(b)) {
      report.shapes_agree = false;
      report.worst_trial = t;
      return report;
    }
    const double err = max_rel_diff(a, b);
    if (err > report.max_rel_err) {
      report.max_rel_err = err;
      report.worst_trial = t;
    }
  }
  return report;
}

}  // namespace strattn
