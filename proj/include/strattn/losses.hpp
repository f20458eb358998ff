// SPDX-License-Identifier: Apache-2.0
//
// Training objectives and mask diagnostics: the mode-diversity regularizer,
// cross-entropy classification loss, and the pairwise mask-overlap measure.

#pragma once

#include <cmath>

#include "strattn/tensor.hpp"

namespace strattn {

struct LossWeights {
  double lambda_d = 1.0;  // weight on the diversity term; >= 0
};

template <class S>
struct ScalarWithGrad {
  double value = 0;
  Tensor<S> grad;
};

// Diversity regularizer on the normalized masks M (N, G, H, W):
// batch mean of  G - sum_i max_g M_g(i).
// Zero exactly when the G masks occupy disjoint positions. The subgradient
// routes -1 to the maximizing mode per position; ties go to the lowest g.
template <class S>
ScalarWithGrad<S> diversity_loss(const Tensor<S>& masks) {
  require_rank(masks, 4, "diversity_loss masks");
  const std::size_t n = masks.extent(0), g = masks.extent(1);
  const std::size_t area = masks.extent(2) * masks.extent(3);
  ScalarWithGrad<S> r;
  r.grad = Tensor<S>(masks.shape());
  double total = 0;
  for (std::size_t b = 0; b < n; ++b) {
    double sum_max = 0;
    for (std::size_t i = 0; i < area; ++i) {
      std::size_t best = 0;
      S best_v = masks[(b * g) * area + i];
      for (std::size_t gi = 1; gi < g; ++gi) {
        const S v = masks[(b * g + gi) * area + i];
        if (v > best_v) {
          best_v = v;
          best = gi;
        }
      }
      sum_max += double(best_v);
      r.grad[(b * g + best) * area + i] = S(-1) / S(n);
    }
    total += double(g) - sum_max;
  }
  r.value = total / double(n);
  return r;
}

// Mean negative log-softmax of the true class. logits (N, classes).
// Computed as log1p(sum of shifted exponentials) so near-saturated logits
// keep their tiny positive loss.
template <class S>
ScalarWithGrad<S> cross_entropy(const Tensor<S>& logits, const std::vector<std::size_t>& labels) {
  require_rank(logits, 2, "cross_entropy logits");
  const std::size_t n = logits.extent(0), classes = logits.extent(1);
  if (labels.size() != n)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(n));
  ScalarWithGrad<S> r;
  r.grad = Tensor<S>(logits.shape());
  double total = 0;
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t y = labels[b];
    if (y >= classes)
      throw ShapeError("cross_entropy: label " + std::to_string(y) + " out of range for " +
                       std::to_string(classes) + " classes");
    const S* row = logits.data() + b * classes;
    S mx = row[0];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
    double rest = 0;  // sum over non-true classes of exp(l - mx)
    for (std::size_t c = 0; c < classes; ++c)
      if (c != y) rest += std::exp(double(row[c]) - double(mx));
    total += (double(mx) - double(row[y])) +
             std::log1p(std::expm1(double(row[y]) - double(mx)) + rest);
    const double denom = rest + std::exp(double(row[y]) - double(mx));
    for (std::size_t c = 0; c < classes; ++c) {
      const double p = std::exp(double(row[c]) - double(mx)) / denom;
      r.grad[b * classes + c] = S((p - (c == y ? 1.0 : 0.0)) / double(n));
    }
  }
  r.value = total / double(n);
  return r;
}

inline double total_loss(double ce, double ld, const LossWeights& w) {
  if (w.lambda_d < 0) throw ShapeError("total_loss: lambda_d must be >= 0");
  return ce + w.lambda_d * ld;
}

// Mean pairwise overlap of the mode masks: average over mode pairs g < h of
// sum_i min(M_g(i), M_h(i)). 0 for disjoint supports, 1 for identical masks.
template <class S>
double mask_overlap(const Tensor<S>& masks) {
  require_rank(masks, 4, "mask_overlap masks");
  const std::size_t n = masks.extent(0), g = masks.extent(1);
  const std::size_t area = masks.extent(2) * masks.extent(3);
  if (g < 2) throw ShapeError("mask_overlap: needs at least 2 modes");
  double total = 0;
  std::size_t pairs = 0;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ga = 0; ga < g; ++ga) {
      for (std::size_t gb = ga + 1; gb < g; ++gb) {
        double acc = 0;
        const S* ma = masks.data() + (b * g + ga) * area;
        const S* mb = masks.data() + (b * g + gb) * area;
        for (std::size_t i = 0; i < area; ++i) acc += double(std::min(ma[i], mb[i]));
        total += acc;
        ++pairs;
      }
    }
  }
  return total / double(pairs);
}

}  // namespace strattn
