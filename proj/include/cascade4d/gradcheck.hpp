// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>

#include "cascade4d/autodiff.hpp"
#include "cascade4d/params.hpp"

namespace c4d {

using ParamMap = std::map<std::string, Tensor>;
using ParamVars = std::map<std::string, Var>;

/// Scalar function of named parameters, evaluated on a caller-supplied tape.
using ScalarFn = std::function<Var(Tape&, const ParamVars&)>;

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst;  // "name[index]"
  std::size_t coords_checked = 0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-4;
  double tol = 1e-3;
  /// Per tensor, at most this many coordinates (spread evenly) are probed;
  /// 0 probes every coordinate.
  std::size_t max_coords = 0;
  /// Denominator floor for the relative error |ad - fd| / max(|ad|, |fd|, floor).
  double scale_floor = 1e-6;
};

namespace detail {

inline double eval_scalar(const ScalarFn& fn, const ParamMap& params) {
  Tape tape(false);
  ParamVars vars;
  for (const auto& [name, t] : params) vars.emplace(name, tape.constant(t));
  return fn(tape, vars).value().item();
}

}  // namespace detail

/// Compares reverse-mode gradients with central differences.
inline GradCheckReport finite_diff_check(const ScalarFn& fn, ParamMap params, const GradCheckOptions& opt = {}) {
  GradCheckReport rep;
  ParamMap grads;
  {
    Tape tape(true);
    ParamVars vars;
    for (const auto& [name, t] : params) vars.emplace(name, tape.parameter(name, t));
    Var loss = fn(tape, vars);
    grads = tape.backward(loss);
  }
  for (auto& [name, t] : params) {
    const std::size_t n = t.size();
    const std::size_t probes = opt.max_coords == 0 ? n : std::min(n, opt.max_coords);
    for (std::size_t k = 0; k < probes; ++k) {
      const std::size_t i = probes == n ? k : (k * n) / probes + (n / probes) / 2;
      const double orig = t[i];
      t[i] = orig + opt.step;
      const double fp = detail::eval_scalar(fn, params);
      t[i] = orig - opt.step;
      const double fm = detail::eval_scalar(fn, params);
      t[i] = orig;
      const double fd = (fp - fm) / (2.0 * opt.step);
      const double ad = grads.at(name)[i];
      const double denom = std::max({std::abs(ad), std::abs(fd), opt.scale_floor});
      const double rel = std::abs(ad - fd) / denom;
      ++rep.coords_checked;
      if (rel > rep.max_rel_err || rep.worst.empty()) {
        rep.max_rel_err = rel;
        rep.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  rep.passed = rep.max_rel_err < opt.tol;
  return rep;
}

/// Loss built from parameters bound through a Binder.
using BoundFn = std::function<Var(Binder&)>;

/// Same check for parameters living in a store; `names` are probed, the
/// rest stay constant.
inline GradCheckReport store_grad_check(const BoundFn& fn, ParameterStore ps, const std::set<std::string>& names,
                                        const GradCheckOptions& opt = {}) {
  GradCheckReport rep;
  ParamMap grads;
  {
    Tape tape(true);
    Binder P(tape, ps, &names);
    grads = tape.backward(fn(P));
  }
  auto eval = [&] {
    Tape tape(false);
    Binder P(tape, ps);
    return fn(P).value().item();
  };
  for (const auto& name : names) {
    Tensor& t = ps.mut(name);
    const std::size_t n = t.size();
    const std::size_t probes = opt.max_coords == 0 ? n : std::min(n, opt.max_coords);
    for (std::size_t k = 0; k < probes; ++k) {
      const std::size_t i = probes == n ? k : (k * n) / probes + (n / probes) / 2;
      const double orig = t[i];
      t[i] = orig + opt.step;
      const double fp = eval();
      t[i] = orig - opt.step;
      const double fm = eval();
      t[i] = orig;
      const double fd = (fp - fm) / (2.0 * opt.step);
      auto g = grads.find(name);
      const double ad = g == grads.end() ? 0.0 : g->second[i];
      const double rel = std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), opt.scale_floor});
      ++rep.coords_checked;
      if (rel > rep.max_rel_err || rep.worst.empty()) {
        rep.max_rel_err = rel;
        rep.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  rep.passed = rep.max_rel_err < opt.tol;
  return rep;
}

}  // namespace c4d
