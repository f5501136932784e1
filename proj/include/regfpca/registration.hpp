#pragma once

// Likelihood-based registration of (possibly incomplete) curves: estimate one
// monotone inverse warping function per curve by maximizing the penalized
// exponential-family log-likelihood under linear coefficient constraints.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "regfpca/bspline.hpp"
#include "regfpca/constropt.hpp"
#include "regfpca/error.hpp"
#include "regfpca/expfam.hpp"
#include "regfpca/funcdata.hpp"
#include "regfpca/parallel.hpp"

namespace regfpca {

/// Template mu(t) = g(s(t)) with s a latent-scale cubic spline on [0,1].
struct TemplateFunction {
  Spline latent;
  Family family;

  double latent_value(double t) const { return latent(t); }
  double mean(double t) const { return family.response(latent(t)); }
  /// d/dt g(s(t)) = g'(s(t)) s'(t).
  double mean_derivative(double t) const {
    const auto [s, ds] = latent.eval_with_derivative(t);
    return family.response_derivative(s) * ds;
  }
};

/// Least-squares cubic spline through latent grid values.
inline TemplateFunction fit_template(std::span<const double> grid, std::span<const double> latent_values,
                                     const Family& family, int n_basis = 20) {
  n_basis = std::min<int>(n_basis, static_cast<int>(grid.size()));
  n_basis = std::max(n_basis, 4);
  BsplineBasis basis(n_basis, 3, 0.0, 1.0);
  std::vector<double> w(grid.size(), 1.0);
  auto fit = penalized_spline_fit(grid, latent_values, w, basis, 2, 0.0);
  return TemplateFunction{Spline{basis, fit.coef}, family};
}

struct RegistrationConfig {
  double lambda = 0.0;
  int kh = 4;
  IncompletenessMode mode = IncompletenessMode::Complete;
  MaximizeOptions optimizer{};
  int workers = 1;

  void validate() const {
    if (!std::isfinite(lambda) || lambda < 0.0) throw Error(Errc::InvalidConfig, "lambda must be finite and >= 0");
    if (kh < 3) throw Error(Errc::InvalidConfig, "warping basis size K_h must be >= 3");
  }
};

/// Domain-length penalty: squared change of the registered domain length
/// (Full), squared endpoint offset from the diagonal (Leading/Trailing), and
/// zero for Complete.
inline double penalty(const WarpingFunction& w) {
  const Eigen::Index p = w.beta.size();
  switch (w.mode) {
    case IncompletenessMode::Complete: return 0.0;
    case IncompletenessMode::Leading: {
      const double d = w.beta(0) - w.t_star_min();
      return d * d;
    }
    case IncompletenessMode::Trailing: {
      const double d = w.beta(p - 1) - w.t_star_max();
      return d * d;
    }
    case IncompletenessMode::Full: {
      const double d = (w.beta(p - 1) - w.beta(0)) - w.observed_length();
      return d * d;
    }
  }
  return 0.0;
}

struct RegistrationResult {
  WarpingFunction warp;
  double objective = 0.0;  // penalized log-likelihood at warp
  bool converged = false;
  std::optional<Errc> flag;  // set when the curve was not registered normally
  std::string message;
};

/// Penalized log-likelihood of one curve as a function of the free warping
/// coefficients, with analytic gradient.
class RegistrationObjective {
 public:
  RegistrationObjective(const Curve& curve, const TemplateFunction& tmpl, const ConstraintSet& cs,
                        const BsplineBasis& basis, double lambda, IncompletenessMode mode)
      : curve_(curve), tmpl_(tmpl), cs_(cs), lambda_(lambda), mode_(mode) {
    theta_ = design_matrix(basis, curve.times);
    t_min_ = basis.lower();
    t_max_ = basis.upper();
  }

  double full(const Eigen::VectorXd& beta, Eigen::VectorXd* grad_full) const {
    const Eigen::VectorXd h = theta_ * beta;
    const Eigen::Index n = h.size();
    Eigen::VectorXd dl_dh(n);
    double ll = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      const double hj = std::clamp(h(j), 0.0, 1.0);
      const auto [eta, deta] = tmpl_.latent.eval_with_derivative(hj);
      const double y = curve_.values[static_cast<std::size_t>(j)];
      ll += detail::logpdf(tmpl_.family, y, eta);
      dl_dh(j) = detail::score(tmpl_.family, y, eta) * deta;
    }
    const Eigen::Index p = beta.size();
    const double weight = lambda_ * static_cast<double>(n);
    double pen = 0.0;
    Eigen::VectorXd pen_grad = Eigen::VectorXd::Zero(p);
    switch (mode_) {
      case IncompletenessMode::Complete: break;
      case IncompletenessMode::Leading: {
        const double d = beta(0) - t_min_;
        pen = d * d;
        pen_grad(0) = 2.0 * d;
        break;
      }
      case IncompletenessMode::Trailing: {
        const double d = beta(p - 1) - t_max_;
        pen = d * d;
        pen_grad(p - 1) = 2.0 * d;
        break;
      }
      case IncompletenessMode::Full: {
        const double d = (beta(p - 1) - beta(0)) - (t_max_ - t_min_);
        pen = d * d;
        pen_grad(p - 1) = 2.0 * d;
        pen_grad(0) = -2.0 * d;
        break;
      }
    }
    if (grad_full != nullptr) *grad_full = theta_.transpose() * dl_dh - weight * pen_grad;
    return ll - weight * pen;
  }

  double operator()(const Eigen::VectorXd& free, Eigen::VectorXd* grad) const {
    Eigen::VectorXd gfull;
    const double v = full(cs_.expand(free), grad != nullptr ? &gfull : nullptr);
    if (grad != nullptr) *grad = cs_.restrict(gfull);
    return v;
  }

 private:
  const Curve& curve_;
  const TemplateFunction& tmpl_;
  const ConstraintSet& cs_;
  Eigen::MatrixXd theta_;
  double lambda_;
  IncompletenessMode mode_;
  double t_min_ = 0.0, t_max_ = 1.0;
};

namespace detail {

/// Strictly feasible warping coefficients close to the identity.
inline Eigen::VectorXd interior_anchor(const BsplineBasis& basis, IncompletenessMode mode) {
  const double lo = basis.lower(), hi = basis.upper();
  const double delta = std::min(1e-3, (hi - lo) / 4.0);
  const bool pin_start = mode == IncompletenessMode::Complete || mode == IncompletenessMode::Trailing;
  const bool pin_end = mode == IncompletenessMode::Complete || mode == IncompletenessMode::Leading;
  const double a = pin_start ? lo : std::max(lo, delta);
  const double b = pin_end ? hi : std::min(hi, 1.0 - delta);
  return greville_identity_beta(basis, a, b);
}

inline bool is_constant(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
}

}  // namespace detail

/// Registers one curve to its template. Flat data or a flat template yields
/// the identity warp with `flag` set instead of an exception.
inline RegistrationResult register_curve(const Curve& curve, const TemplateFunction& tmpl,
                                         const RegistrationConfig& cfg,
                                         const std::optional<WarpingFunction>& warm_start = std::nullopt) {
  cfg.validate();
  check_observations(tmpl.family, curve.values);
  if (curve.size() < 2) throw Error(Errc::CurveTooShort, "curve '" + curve.id + "' has fewer than 2 samples");
  const double t_lo = curve.t_min(), t_hi = curve.t_max();
  BsplineBasis basis(cfg.kh, 3, t_lo, t_hi);
  const Eigen::VectorXd beta_id = greville_identity_beta(basis, t_lo, t_hi);
  const ConstraintSet cs = build_constraints(cfg.mode, cfg.kh, t_lo, t_hi);
  const RegistrationObjective objective(curve, tmpl, cs, basis, cfg.lambda, cfg.mode);

  RegistrationResult out;
  out.warp = WarpingFunction{basis, beta_id, cfg.mode};
  out.objective = objective.full(beta_id, nullptr);

  if (detail::is_constant(curve.values)) {
    out.flag = Errc::DegenerateData;
    out.message = "curve '" + curve.id + "' is constant; no registration signal";
    return out;
  }

  Eigen::VectorXd start_full = beta_id;
  if (warm_start && warm_start->beta.size() == cfg.kh && warm_start->basis == basis) start_full = warm_start->beta;
  {
    const WarpingFunction start_warp{basis, start_full, cfg.mode};
    const double a = std::clamp(start_warp(t_lo), 0.0, 1.0), b = std::clamp(start_warp(t_hi), 0.0, 1.0);
    double max_slope = 0.0;
    for (int k = 0; k <= 100; ++k) max_slope = std::max(max_slope, std::abs(tmpl.mean_derivative(a + (b - a) * k / 100.0)));
    if (max_slope < 1e-8) {
      out.flag = Errc::DegenerateTemplate;
      out.message = "template is flat on the warped range of curve '" + curve.id + "'";
      return out;
    }
  }

  const Eigen::VectorXd anchor = cs.restrict(detail::interior_anchor(basis, cfg.mode));
  const Objective fn = [&](const Eigen::VectorXd& x, Eigen::VectorXd* g) { return objective(x, g); };
  const MaximizeResult res = maximize(fn, cs, cs.restrict(start_full), cfg.optimizer, anchor);

  Eigen::VectorXd best = cs.expand(res.x);
  double best_value = res.value;
  // The identity warp is feasible in every mode (possibly on the boundary).
  if (out.objective > best_value) {
    best = beta_id;
    best_value = out.objective;
  }
  out.warp.beta = best;
  out.objective = best_value;
  out.converged = res.converged;
  return out;
}

struct RegistrationBatch {
  std::vector<RegistrationResult> results;
  std::vector<std::string> failures;  // ids of curves that errored or were flagged
};

/// Registers every curve (in parallel); results keep input order and do not
/// depend on the worker count. Per-curve errors are recorded, not thrown.
inline RegistrationBatch register_all(const FunctionalDataset& ds, const std::vector<TemplateFunction>& templates,
                                      const RegistrationConfig& cfg,
                                      const std::vector<std::optional<WarpingFunction>>& warm_starts = {}) {
  cfg.validate();
  if (templates.size() != 1 && templates.size() != ds.size())
    throw Error(Errc::InvalidInput, "need one shared template or one template per curve");
  if (!warm_starts.empty() && warm_starts.size() != ds.size())
    throw Error(Errc::InvalidInput, "warm starts must match the curve count");
  RegistrationBatch batch;
  batch.results.resize(ds.size());
  parallel_for(ds.size(), cfg.workers, [&](std::size_t i) {
    const auto& tmpl = templates.size() == 1 ? templates.front() : templates[i];
    const std::optional<WarpingFunction> warm = warm_starts.empty() ? std::nullopt : warm_starts[i];
    const Curve& curve = ds.curves[i];
    try {
      batch.results[i] = register_curve(curve, tmpl, cfg, warm);
    } catch (const Error& e) {
      RegistrationResult r;
      r.warp = identity_warp(curve.t_min(), curve.t_max(), cfg.kh, cfg.mode);
      r.objective = -std::numeric_limits<double>::infinity();
      r.flag = e.code();
      r.message = e.what();
      batch.results[i] = std::move(r);
    }
  });
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (batch.results[i].flag) batch.failures.push_back(ds.curves[i].id);
  return batch;
}

/// Curves with chronological times replaced by registered internal times.
inline FunctionalDataset apply_warps(const FunctionalDataset& ds, const std::vector<WarpingFunction>& warps) {
  if (warps.size() != ds.size()) throw Error(Errc::InvalidInput, "one warp per curve required");
  FunctionalDataset out = ds;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto h = eval_warp(warps[i], ds.curves[i].times);
    for (double& v : h) v = std::clamp(v, 0.0, 1.0);
    out.curves[i].times = std::move(h);
  }
  return out;
}

/// Dispersion estimated once from residuals against a template at the
/// identity warp (chronological time used as internal time).
inline double template_dispersion(const FunctionalDataset& ds, const TemplateFunction& tmpl) {
  std::vector<double> y, mu;
  for (const auto& c : ds.curves)
    for (std::size_t j = 0; j < c.size(); ++j) {
      y.push_back(c.values[j]);
      mu.push_back(tmpl.mean(c.times[j]));
    }
  return moment_dispersion(tmpl.family.kind, y, mu);
}

}  // namespace regfpca
