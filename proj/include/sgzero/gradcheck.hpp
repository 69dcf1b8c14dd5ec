#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sgzero/params.hpp"

namespace sgz {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // non-differentiable points (kinks)
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  bool passed = true;
};

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  // Denominator floor for the relative error, so gradients that are zero
  // analytically are compared in absolute terms against finite-difference noise.
  double abs_floor = 1e-6;
  // One-sided slopes disagreeing by more than this (relative) mark a kink.
  double kink_threshold = 1e-2;
};

/// Loss builder: binds the store into `g` and returns a scalar loss node.
using LossBuilder = std::function<Var(Graph& g, const BoundParams& p)>;

/// Compares reverse-mode gradients of `f` against central differences for every
/// scalar in `params`. Points where the forward and backward one-sided slopes
/// disagree are treated as kinks and skipped.
inline GradCheckReport grad_check(const LossBuilder& f, ParamStore& params,
                                  const GradCheckOptions& opt = {}) {
  ParamStore analytic;
  {
    Graph g;
    BoundParams bound(g, params);
    Var loss = f(g, bound);
    g.backward(loss);
    analytic = bound.gradients(params);
  }
  auto eval = [&]() {
    Graph g;
    BoundParams bound(g, params);
    return f(g, bound).value().item();
  };
  const double f0 = eval();

  GradCheckReport report;
  for (auto& [name, tensor] : params) {
    GradCheckEntry entry{name};
    const Tensor& an = analytic.at(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double orig = tensor[i];
      tensor[i] = orig + opt.h;
      const double fp = eval();
      tensor[i] = orig - opt.h;
      const double fm = eval();
      tensor[i] = orig;
      const double fwd = (fp - f0) / opt.h;
      const double bwd = (f0 - fm) / opt.h;
      const double slope_scale = std::max({std::abs(fwd), std::abs(bwd), 1.0});
      if (std::abs(fwd - bwd) > opt.kink_threshold * slope_scale) {
        ++entry.skipped;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * opt.h);
      const double denom = std::max({std::abs(numeric), std::abs(an[i]), opt.abs_floor});
      const double rel = std::abs(numeric - an[i]) / denom;
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
      ++entry.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.checked += entry.checked;
    report.skipped += entry.skipped;
    report.entries.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error < opt.tol;
  return report;
}

}  // namespace sgz
