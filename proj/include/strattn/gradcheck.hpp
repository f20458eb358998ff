// SPDX-License-Identifier: Apache-2.0
//
// Central-difference gradient checking. The caller runs its analytic
// backward once, then hands over the checked tensors together with a pure
// scalar loss closure; every coordinate is perturbed with a relative step
// and compared against the analytic value.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "strattn/tensor.hpp"

namespace strattn {

struct TensorReport {
  std::string name;
  double max_rel_err = 0;
  double max_abs_err = 0;
  std::size_t worst_index = 0;
  bool finite = true;
};

struct GradReport {
  std::vector<TensorReport> tensors;
  double tol = 1e-4;

  double max_rel_err() const {
    double m = 0;
    for (const auto& t : tensors) m = std::max(m, t.max_rel_err);
    return m;
  }
  bool pass() const {
    for (const auto& t : tensors)
      if (!t.finite || t.max_rel_err > tol) return false;
    return true;
  }
};

template <class S>
struct GradProbe {
  std::string name;
  Tensor<S>* value;          // perturbed in place during the check
  const Tensor<S>* analytic; // gradient produced by the backward under test
};

// loss_fn must be pure: repeated calls at the same parameter point return
// the same value (run batch norm with track_running = false).
template <class S>
GradReport gradcheck(const std::vector<GradProbe<S>>& probes,
                     const std::function<double()>& loss_fn, double tol = 1e-4,
                     double rel_step = 1e-5) {
  GradReport report;
  report.tol = tol;
  for (const auto& probe : probes) {
    TensorReport tr;
    tr.name = probe.name;
    require_same_shape(*probe.value, *probe.analytic, "gradcheck probe");
    Tensor<S>& x = *probe.value;
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const S saved = x[i];
      const double h = rel_step * std::max(std::abs(double(saved)), 1.0);
      x[i] = S(double(saved) + h);
      const double up = loss_fn();
      x[i] = S(double(saved) - h);
      const double down = loss_fn();
      x[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = double((*probe.analytic)[i]);
      if (!std::isfinite(numeric) || !std::isfinite(analytic)) {
        tr.finite = false;
        tr.worst_index = i;
        tr.max_rel_err = std::numeric_limits<double>::infinity();
        break;
      }
      const double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double abs_err = std::abs(analytic - numeric);
      if (rel > tr.max_rel_err) {
        tr.max_rel_err = rel;
        tr.worst_index = i;
      }
      tr.max_abs_err = std::max(tr.max_abs_err, abs_err);
    }
    report.tensors.push_back(std::move(tr));
  }
  return report;
}

inline std::string format_report(const GradReport& r) {
  std::string out;
  for (const auto& t : r.tensors) {
    char line[160];
    std::snprintf(line, sizeof line, "  %-24s max_rel %10.3e  max_abs %10.3e  at %zu  %s\n",
                  t.name.c_str(), t.max_rel_err, t.max_abs_err, t.worst_index,
                  (t.finite && t.max_rel_err <= r.tol) ? "ok" : "FAIL");
    out += line;
  }
  return out;
}

}  // namespace strattn
