#pragma once

// Maximization of a smooth objective under linear inequality constraints
// u * beta - c >= 0, by a logarithmic barrier outer loop around a BFGS inner
// solver with feasibility-preserving backtracking.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "regfpca/error.hpp"
#include "regfpca/funcdata.hpp"

namespace regfpca {

/// Linear inequality system over the free coordinates of a coefficient
/// vector; pinned coordinates keep the values stored in `pinned`.
struct ConstraintSet {
  Eigen::MatrixXd u;              // m x p_free
  Eigen::VectorXd c;              // m
  std::vector<int> free_index;    // positions of free coordinates in the full vector
  Eigen::VectorXd pinned;         // full-length vector; values used at non-free positions

  Eigen::Index full_size() const { return pinned.size(); }
  Eigen::Index free_size() const { return static_cast<Eigen::Index>(free_index.size()); }

  Eigen::VectorXd expand(const Eigen::VectorXd& free) const {
    Eigen::VectorXd full = pinned;
    for (std::size_t k = 0; k < free_index.size(); ++k) full(free_index[k]) = free(static_cast<Eigen::Index>(k));
    return full;
  }

  Eigen::VectorXd restrict(const Eigen::VectorXd& full) const {
    Eigen::VectorXd free(free_size());
    for (std::size_t k = 0; k < free_index.size(); ++k) free(static_cast<Eigen::Index>(k)) = full(free_index[k]);
    return free;
  }

  Eigen::VectorXd slack(const Eigen::VectorXd& free) const { return u * free - c; }
};

/// Monotonicity plus domain-bound constraints for a warping coefficient
/// vector of length p, per incompleteness mode. The global domain is [0,1].
inline ConstraintSet build_constraints(IncompletenessMode mode, int p, double t_star_min, double t_star_max) {
  if (p < 3) throw Error(Errc::InvalidConfig, "warping basis needs p >= 3");
  if (!(t_star_min >= 0.0 && t_star_min < t_star_max && t_star_max <= 1.0))
    throw Error(Errc::InvalidDomain, "need 0 <= t*_min < t*_max <= 1");
  constexpr double t_min = 0.0, t_max = 1.0;
  ConstraintSet cs;
  cs.pinned = Eigen::VectorXd::Zero(p);
  int first = 0, last = p - 1;  // free range, inclusive
  double lower = t_min, upper = t_max;
  switch (mode) {
    case IncompletenessMode::Complete:
      first = 1;
      last = p - 2;
      cs.pinned(0) = t_star_min;
      cs.pinned(p - 1) = t_star_max;
      lower = t_star_min;
      upper = t_star_max;
      break;
    case IncompletenessMode::Leading:
      last = p - 2;
      cs.pinned(p - 1) = t_star_max;
      upper = t_star_max;
      break;
    case IncompletenessMode::Trailing:
      first = 1;
      cs.pinned(0) = t_star_min;
      lower = t_star_min;
      break;
    case IncompletenessMode::Full:
      break;
  }
  const int n_free = last - first + 1;
  for (int k = first; k <= last; ++k) cs.free_index.push_back(k);
  cs.u = Eigen::MatrixXd::Zero(n_free + 1, n_free);
  cs.c = Eigen::VectorXd::Zero(n_free + 1);
  for (int r = 0; r < n_free; ++r) {
    cs.u(r, r) = 1.0;
    if (r > 0) cs.u(r, r - 1) = -1.0;
  }
  cs.u(n_free, n_free - 1) = -1.0;
  cs.c(0) = lower;
  cs.c(n_free) = -upper;
  return cs;
}

/// Objective returning f(x) and writing the gradient into `grad` when it is
/// non-null. Non-finite values are treated as infeasible by the line search.
using Objective = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)>;

struct MaximizeOptions {
  double mu0 = 1e-2;
  double mu_factor = 0.1;
  double mu_min = 1e-8;
  double tol_obj = 1e-8;
  double armijo = 1e-4;
  double margin = 1e-8;
  int max_outer = 30;
  int max_inner = 500;
};

struct MaximizeResult {
  Eigen::VectorXd x;
  double value = -std::numeric_limits<double>::infinity();
  int iterations = 0;  // inner BFGS iterations across all barrier stages
  bool converged = false;
  std::vector<double> outer_values;  // best objective after each barrier stage
};

namespace detail {

struct BarrierEval {
  double value;
  double f;
  Eigen::VectorXd grad;
};

inline std::optional<BarrierEval> barrier_eval(const Objective& obj, const ConstraintSet& cs, const Eigen::VectorXd& x,
                                               double mu) {
  const Eigen::VectorXd s = cs.slack(x);
  if ((s.array() <= 0.0).any()) return std::nullopt;
  Eigen::VectorXd g(x.size());
  const double f = obj(x, &g);
  if (!std::isfinite(f) || !g.allFinite()) return std::nullopt;
  BarrierEval e;
  e.f = f;
  e.value = f + mu * s.array().log().sum();
  e.grad = g + mu * (cs.u.transpose() * s.cwiseInverse());
  return e;
}

/// Inverse of I + mu U'S^-2 U: the exact barrier curvature plus a unit
/// objective curvature, used to seed the quasi-Newton matrix.
inline Eigen::MatrixXd barrier_preconditioner(const ConstraintSet& cs, const Eigen::VectorXd& x, double mu) {
  const Eigen::VectorXd s = cs.slack(x);
  Eigen::MatrixXd a = mu * cs.u.transpose() * s.array().square().inverse().matrix().asDiagonal() * cs.u;
  a.diagonal().array() += 1.0;
  return a.ldlt().solve(Eigen::MatrixXd::Identity(x.size(), x.size()));
}

}  // namespace detail

/// Maximizes `obj` subject to `cs`, starting from `x0`. If `x0` is not
/// strictly feasible it is shrunk toward `anchor` (a strictly feasible point)
/// with factors 0.9, 0.5, 0.1; without an anchor an infeasible start throws.
inline MaximizeResult maximize(const Objective& obj, const ConstraintSet& cs, Eigen::VectorXd x0,
                               const MaximizeOptions& opts = {},
                               const std::optional<Eigen::VectorXd>& anchor = std::nullopt) {
  if (x0.size() != cs.free_size()) throw Error(Errc::InvalidInput, "start vector has the wrong dimension");
  auto strictly_feasible = [&](const Eigen::VectorXd& x) { return (cs.slack(x).array() >= opts.margin).all(); };
  if (!strictly_feasible(x0)) {
    bool repaired = false;
    if (anchor && strictly_feasible(*anchor)) {
      for (double theta : {0.9, 0.5, 0.1}) {
        const Eigen::VectorXd cand = theta * x0 + (1.0 - theta) * *anchor;
        if (strictly_feasible(cand)) {
          x0 = cand;
          repaired = true;
          break;
        }
      }
    }
    if (!repaired) throw Error(Errc::InfeasibleStart, "start point is not strictly feasible");
  }

  MaximizeResult res;
  {
    const double f0 = obj(x0, nullptr);
    if (!std::isfinite(f0)) throw Error(Errc::NonFiniteObjective, "objective is not finite at the start point");
    res.x = x0;
    res.value = f0;
  }

  Eigen::VectorXd x = x0;
  double mu = opts.mu0;
  double prev_stage = res.value;
  const Eigen::Index n = x.size();
  for (int outer = 0; outer < opts.max_outer; ++outer) {
    auto cur = detail::barrier_eval(obj, cs, x, mu);
    if (!cur) throw Error(Errc::NonFiniteObjective, "objective is not finite at a feasible iterate");
    Eigen::MatrixXd h = detail::barrier_preconditioner(cs, x, mu);  // inverse Hessian of -F
    int flat_steps = 0;
    for (int it = 0; it < opts.max_inner; ++it) {
      ++res.iterations;
      Eigen::VectorXd dir = h * cur->grad;
      double slope = cur->grad.dot(dir);
      if (!(slope > 0.0)) {
        h = detail::barrier_preconditioner(cs, x, mu);
        dir = h * cur->grad;
        slope = cur->grad.dot(dir);
      }
      if (!(slope > 0.0)) break;
      double step = 1.0;
      std::optional<detail::BarrierEval> next;
      for (int half = 0; half < 60; ++half, step *= 0.5) {
        next = detail::barrier_eval(obj, cs, x + step * dir, mu);
        if (next && next->value >= cur->value + opts.armijo * step * slope) break;
        next.reset();
      }
      if (!next) break;
      const Eigen::VectorXd sx = step * dir;
      const Eigen::VectorXd yg = cur->grad - next->grad;  // gradient change of -F
      const double change = next->value - cur->value;
      x += sx;
      const double sy = sx.dot(yg);
      if (sy > 1e-16 * sx.norm() * yg.norm()) {
        const double rho = 1.0 / sy;
        const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(n, n);
        h = (eye - rho * sx * yg.transpose()) * h * (eye - rho * yg * sx.transpose()) + rho * sx * sx.transpose();
      }
      cur = std::move(next);
      if (cur->f > res.value) {
        res.value = cur->f;
        res.x = x;
      }
      const double grad_scale = cur->grad.lpNorm<Eigen::Infinity>() * (1.0 + x.lpNorm<Eigen::Infinity>());
      // A single short step is common in ill-conditioned barrier valleys, so
      // stagnation must persist before the stage ends.
      flat_steps = std::abs(change) <= opts.tol_obj * 1e-2 * (std::abs(cur->value) + opts.tol_obj) ? flat_steps + 1 : 0;
      if (flat_steps >= 3 || grad_scale <= 1e-12 * (1.0 + std::abs(cur->value))) break;
    }
    res.outer_values.push_back(res.value);
    const bool small_mu = mu <= opts.mu_min;
    if (outer > 0 && small_mu && std::abs(res.value - prev_stage) <= opts.tol_obj * (1.0 + std::abs(res.value))) {
      res.converged = true;
      break;
    }
    prev_stage = res.value;
    mu *= opts.mu_factor;
  }
  return res;
}

}  // namespace regfpca
