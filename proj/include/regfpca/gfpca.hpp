#pragma once

// Two-step generalized functional PCA. The marginal mean is a penalized IRLS
// smoother of the pooled data; the covariance of the latent Gaussian process
// comes from a smoothed surface of binned crossproducts of mean-centered
// data (diagonal excluded), rescaled by the response-function derivative and
// eigendecomposed; FPC scores are per-curve MAP estimates under N(0, tau_k)
// priors, alternated with a re-fit of the latent mean.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "regfpca/bspline.hpp"
#include "regfpca/error.hpp"
#include "regfpca/expfam.hpp"
#include "regfpca/funcdata.hpp"
#include "regfpca/parallel.hpp"

namespace regfpca {

// ---------------------------------------------------------------------------
// Grid helpers

inline std::vector<double> uniform_grid(int m) {
  if (m < 2) throw Error(Errc::InvalidConfig, "grid needs at least 2 points");
  std::vector<double> g(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) g[static_cast<std::size_t>(i)] = static_cast<double>(i) / (m - 1);
  g.back() = 1.0;
  return g;
}

/// Trapezoid quadrature weights for an increasing grid.
inline Eigen::VectorXd trapezoid_weights(std::span<const double> grid) {
  const auto m = static_cast<Eigen::Index>(grid.size());
  Eigen::VectorXd w = Eigen::VectorXd::Zero(m);
  for (Eigen::Index i = 0; i + 1 < m; ++i) {
    const double h = grid[static_cast<std::size_t>(i + 1)] - grid[static_cast<std::size_t>(i)];
    w(i) += h / 2.0;
    w(i + 1) += h / 2.0;
  }
  return w;
}

/// Linear interpolation of grid values at t (grid increasing, t clamped).
inline double interpolate(std::span<const double> grid, const Eigen::Ref<const Eigen::VectorXd>& values, double t) {
  if (t <= grid.front()) return values(0);
  if (t >= grid.back()) return values(values.size() - 1);
  const auto it = std::upper_bound(grid.begin(), grid.end(), t);
  const auto hi = static_cast<Eigen::Index>(it - grid.begin());
  const Eigen::Index lo = hi - 1;
  const double t0 = grid[static_cast<std::size_t>(lo)], t1 = grid[static_cast<std::size_t>(hi)];
  const double a = (t - t0) / (t1 - t0);
  return (1.0 - a) * values(lo) + a * values(hi);
}

/// Rows of `values` (m x K) interpolated at each of `t`.
inline Eigen::MatrixXd interpolate_rows(std::span<const double> grid, const Eigen::MatrixXd& values,
                                        std::span<const double> t) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(t.size()), values.cols());
  for (Eigen::Index k = 0; k < values.cols(); ++k) {
    const Eigen::VectorXd col = values.col(k);
    for (std::size_t j = 0; j < t.size(); ++j) out(static_cast<Eigen::Index>(j), k) = interpolate(grid, col, t[j]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Penalized IRLS

struct IrlsOptions {
  int max_iter = 50;
  double tol = 1e-8;
};

struct IrlsFit {
  PenalizedFit fit;
  Eigen::VectorXd eta;  // full linear predictor (spline + offset) at the data
  int iterations = 0;
  bool converged = false;
};

/// Fits eta = B coef + offset by penalized IRLS with a second-order
/// difference penalty and GCV smoothing at each step.
inline IrlsFit penalized_irls(std::span<const double> t, std::span<const double> y, std::span<const double> offset,
                              const Family& family, const BsplineBasis& basis, const IrlsOptions& opts,
                              std::optional<Eigen::VectorXd> eta_start = std::nullopt) {
  const auto n = static_cast<Eigen::Index>(t.size());
  check_observations(family, y);
  Eigen::VectorXd eta(n);
  if (eta_start && eta_start->size() == n) {
    eta = *eta_start;
  } else {
    for (Eigen::Index j = 0; j < n; ++j) {
      const double yj = y[static_cast<std::size_t>(j)];
      const double mu0 = family.kind == FamilyKind::Binomial ? (yj + 0.5) / 2.0 : yj;
      eta(j) = family.link(mu0);
    }
  }
  auto loglik_of = [&](const Eigen::VectorXd& e) {
    double s = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) s += detail::logpdf(family, y[static_cast<std::size_t>(j)], e(j));
    return s;
  };
  const Eigen::MatrixXd b = design_matrix(basis, t);
  IrlsFit out;
  std::vector<double> z(static_cast<std::size_t>(n)), w(static_cast<std::size_t>(n));
  for (int it = 0; it < opts.max_iter; ++it) {
    out.iterations = it + 1;
    const auto work = irls_weights(family, y, std::span<const double>(eta.data(), static_cast<std::size_t>(n)));
    for (Eigen::Index j = 0; j < n; ++j) {
      z[static_cast<std::size_t>(j)] = work.z(j) - offset[static_cast<std::size_t>(j)];
      w[static_cast<std::size_t>(j)] = work.w(j);
    }
    out.fit = penalized_spline_fit(t, z, w, basis, 2, AutoGcv{});
    Eigen::VectorXd eta_new = b * out.fit.coef;
    for (Eigen::Index j = 0; j < n; ++j) eta_new(j) += offset[static_cast<std::size_t>(j)];
    int halvings = 0;
    while (!std::isfinite(loglik_of(eta_new))) {
      if (++halvings > 30) throw Error(Errc::IrlsDiverged, "step-halving exhausted in penalized IRLS");
      eta_new = 0.5 * (eta_new + eta);
    }
    const double delta = (eta_new - eta).lpNorm<Eigen::Infinity>();
    eta = std::move(eta_new);
    if (delta <= opts.tol * (1.0 + eta.lpNorm<Eigen::Infinity>())) {
      out.converged = true;
      break;
    }
  }
  out.eta = std::move(eta);
  return out;
}

// ---------------------------------------------------------------------------
// Marginal mean

struct MarginalMean {
  Spline mu_x;  // latent scale
  Family family;

  double latent(double t) const { return mu_x(t); }
  double response(double t) const { return family.response(mu_x(t)); }
};

namespace detail {

struct Pooled {
  std::vector<double> t, y;
};

inline Pooled pool(const FunctionalDataset& ds) {
  Pooled p;
  for (const auto& c : ds.curves) {
    p.t.insert(p.t.end(), c.times.begin(), c.times.end());
    p.y.insert(p.y.end(), c.values.begin(), c.values.end());
  }
  return p;
}

}  // namespace detail

inline MarginalMean estimate_marginal_mean(const FunctionalDataset& ds, const Family& family, int n_basis = 8,
                                           const IrlsOptions& opts = {}) {
  if (ds.empty()) throw Error(Errc::EmptyDataset, "no curves");
  const auto pooled = detail::pool(ds);
  std::vector<double> distinct = pooled.t;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (static_cast<int>(distinct.size()) < std::min(n_basis, 3))
    throw Error(Errc::SingularSystem, "too few distinct time points for the mean basis");
  BsplineBasis basis(n_basis, 3, 0.0, 1.0);
  const std::vector<double> offset(pooled.t.size(), 0.0);
  const IrlsFit fit = penalized_irls(pooled.t, pooled.y, offset, family, basis, opts);
  return MarginalMean{Spline{basis, fit.fit.coef}, family};
}

inline FunctionalDataset center_curves(const FunctionalDataset& ds, const MarginalMean& mean) {
  FunctionalDataset out = ds;
  for (auto& c : out.curves)
    for (std::size_t j = 0; j < c.size(); ++j) c.values[j] -= mean.response(c.times[j]);
  return out;
}

// ---------------------------------------------------------------------------
// Covariance surface

struct CovarianceEstimate {
  std::vector<double> grid;
  Eigen::MatrixXd raw;     // cell means of crossproducts
  Eigen::MatrixXd counts;  // number of crossproducts per cell
  Eigen::MatrixXd smoothed;
  std::optional<int> digits;
  // Tensor-product fit, filled by smooth_covariance.
  std::optional<BsplineBasis> basis;
  Eigen::MatrixXd coef;  // K x K
  double smooth_par = 0.0;

  /// Smoothed surface evaluated on an arbitrary grid, symmetrized.
  Eigen::MatrixXd evaluate(std::span<const double> at) const {
    if (!basis) throw Error(Errc::InvalidInput, "covariance surface has not been smoothed");
    const Eigen::MatrixXd b = design_matrix(*basis, at);
    Eigen::MatrixXd s = b * coef * b.transpose();
    return 0.5 * (s + s.transpose());
  }

  /// Copy with `smoothed` re-evaluated on `at` (raw parts dropped).
  CovarianceEstimate resampled(std::span<const double> at) const {
    CovarianceEstimate out;
    out.grid.assign(at.begin(), at.end());
    out.smoothed = evaluate(at);
    out.digits = digits;
    out.basis = basis;
    out.coef = coef;
    out.smooth_par = smooth_par;
    return out;
  }
};

/// Bins times to `digits` decimal places (exact times when unset) and averages
/// all within-curve crossproducts y_c(s) y_c(t), diagonal pairs included.
inline CovarianceEstimate assemble_crossproducts(const FunctionalDataset& centered, std::optional<int> digits = 3) {
  if (centered.empty()) throw Error(Errc::EmptyDataset, "no curves");
  if (digits && (*digits < 1 || *digits > 6)) throw Error(Errc::InvalidConfig, "digits must be in 1..6");
  const double scale = digits ? std::pow(10.0, *digits) : 1.0;
  // Binned keys: integers for rounded grids, exact doubles otherwise.
  std::map<double, int> index;
  auto key_of = [&](double t) { return digits ? static_cast<double>(std::llround(t * scale)) : t; };
  for (const auto& c : centered.curves)
    for (double t : c.times) index.emplace(key_of(t), 0);
  CovarianceEstimate cov;
  cov.digits = digits;
  int next = 0;
  for (auto& [key, idx] : index) {
    idx = next++;
    cov.grid.push_back(digits ? key / scale : key);
  }
  const auto m = static_cast<Eigen::Index>(cov.grid.size());
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(m, m);
  cov.counts = Eigen::MatrixXd::Zero(m, m);
  std::vector<int> bins;
  // Curves are reduced in index order, so the result is deterministic.
  for (const auto& c : centered.curves) {
    bins.resize(c.size());
    for (std::size_t j = 0; j < c.size(); ++j) bins[j] = index.at(key_of(c.times[j]));
    for (std::size_t j = 0; j < c.size(); ++j)
      for (std::size_t k = 0; k < c.size(); ++k) {
        if (bins[j] > bins[k]) continue;  // upper triangle only; mirrored below
        sum(bins[j], bins[k]) += c.values[j] * c.values[k];
        cov.counts(bins[j], bins[k]) += 1.0;
      }
  }
  cov.raw = Eigen::MatrixXd::Zero(m, m);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = i; j < m; ++j) {
      if (cov.counts(i, j) > 0) cov.raw(i, j) = sum(i, j) / cov.counts(i, j);
      cov.raw(j, i) = cov.raw(i, j);
      cov.counts(j, i) = cov.counts(i, j);
    }
  return cov;
}

/// Tensor-product P-spline fit to the off-diagonal raw cells (weights = cell
/// counts), evaluated back on the full grid including the diagonal.
inline CovarianceEstimate smooth_covariance(CovarianceEstimate cov, int marginal_basis = 10) {
  const auto m = static_cast<Eigen::Index>(cov.grid.size());
  const int k = marginal_basis;
  BsplineBasis basis(k, 3, 0.0, 1.0);
  std::vector<int> first(static_cast<std::size_t>(m));
  std::vector<std::array<double, 4>> vals(static_cast<std::size_t>(m));
  double v[16];
  for (Eigen::Index i = 0; i < m; ++i) {
    first[static_cast<std::size_t>(i)] = basis.eval_nonzero(cov.grid[static_cast<std::size_t>(i)], v);
    for (int a = 0; a < 4; ++a) vals[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] = v[a];
  }
  NormalEquations ne;
  ne.gram = Eigen::MatrixXd::Zero(k * k, k * k);
  ne.rhs = Eigen::VectorXd::Zero(k * k);
  int populated = 0;
  int idx[16];
  double x[16];
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) {
      if (i == j || cov.counts(i, j) <= 0) continue;
      ++populated;
      const double w = cov.counts(i, j), y = cov.raw(i, j);
      const auto& vi = vals[static_cast<std::size_t>(i)];
      const auto& vj = vals[static_cast<std::size_t>(j)];
      const int fi = first[static_cast<std::size_t>(i)], fj = first[static_cast<std::size_t>(j)];
      for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) {
          idx[a * 4 + b] = (fi + a) * k + (fj + b);
          x[a * 4 + b] = vi[static_cast<std::size_t>(a)] * vj[static_cast<std::size_t>(b)];
        }
      for (int p = 0; p < 16; ++p) {
        ne.rhs(idx[p]) += w * x[p] * y;
        for (int q = 0; q < 16; ++q) ne.gram(idx[p], idx[q]) += w * x[p] * x[q];
      }
      ne.yy += w * y * y;
      ne.n_obs += 1.0;
    }
  if (populated < k * k)
    throw Error(Errc::InsufficientOverlap, "only " + std::to_string(populated) +
                                               " populated off-diagonal covariance cells; need " +
                                               std::to_string(k * k));
  const Eigen::MatrixXd d = greville_difference_matrix(basis, 2);
  const Eigen::MatrixXd dd = d.transpose() * d;
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(k, k);
  Eigen::MatrixXd penalty = Eigen::MatrixXd::Zero(k * k, k * k);
  for (int a = 0; a < k; ++a)
    for (int b = 0; b < k; ++b) {
      penalty.block(a * k, b * k, k, k) += dd(a, b) * eye;
      penalty.block(a * k, b * k, k, k) += eye(a, b) * dd;
    }
  const PenalizedFit fit = solve_penalized(ne, penalty, AutoGcv{});
  cov.basis = basis;
  cov.coef = Eigen::Map<const Eigen::MatrixXd>(fit.coef.data(), k, k).transpose();
  cov.coef = 0.5 * (cov.coef + cov.coef.transpose());
  cov.smooth_par = fit.smooth_par;
  cov.smoothed = cov.evaluate(cov.grid);
  return cov;
}

/// Count-weighted mean of raw minus smoothed diagonal cells (the nugget).
inline double diagonal_nugget(const CovarianceEstimate& cov) {
  double num = 0.0, den = 0.0;
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(cov.grid.size()); ++i) {
    if (cov.counts(i, i) <= 0) continue;
    num += cov.counts(i, i) * (cov.raw(i, i) - cov.smoothed(i, i));
    den += cov.counts(i, i);
  }
  return den > 0 ? num / den : 0.0;
}

/// Latent covariance: smoothed / (g'(mu_X(s)) g'(mu_X(t))).
inline Eigen::MatrixXd latent_covariance(const CovarianceEstimate& cov, const MarginalMean& mean, const Family& family) {
  const auto m = static_cast<Eigen::Index>(cov.grid.size());
  Eigen::VectorXd d(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double t = cov.grid[static_cast<std::size_t>(i)];
    d(i) = family.response_derivative(mean.latent(t));
    if (!(std::abs(d(i)) >= 1e-8))
      throw Error(Errc::DerivativeUnderflow, "g'(mu_X) vanishes at t=" + format_double(t));
  }
  Eigen::MatrixXd out = cov.smoothed;
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) out(i, j) /= d(i) * d(j);
  return 0.5 * (out + out.transpose());
}

// ---------------------------------------------------------------------------
// Spectral decomposition

struct Eigenpairs {
  Eigen::MatrixXd psi;  // m x K, columns quadrature-orthonormal
  Eigen::VectorXd tau;  // descending
};

namespace detail {

inline Eigenpairs weighted_eigen(const Eigen::MatrixXd& c, std::span<const double> grid) {
  const auto m = c.rows();
  if (c.cols() != m || static_cast<Eigen::Index>(grid.size()) != m)
    throw Error(Errc::GridMismatch, "covariance and grid sizes differ");
  const double scale = std::max(1.0, c.cwiseAbs().maxCoeff());
  if ((c - c.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
    throw Error(Errc::NotSymmetric, "covariance matrix is not symmetric");
  const Eigen::VectorXd w = trapezoid_weights(grid);
  const Eigen::VectorXd sw = w.cwiseSqrt();
  Eigen::MatrixXd a = sw.asDiagonal() * c * sw.asDiagonal();
  a = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  if (es.info() != Eigen::Success) throw Error(Errc::NonFinite, "eigendecomposition failed");
  Eigenpairs out;
  out.tau = es.eigenvalues().reverse();
  out.psi = sw.cwiseInverse().asDiagonal() * es.eigenvectors().rowwise().reverse();
  for (Eigen::Index k = 0; k < out.psi.cols(); ++k) {
    Eigen::Index arg = 0;
    out.psi.col(k).cwiseAbs().maxCoeff(&arg);
    if (out.psi(arg, k) < 0) out.psi.col(k) *= -1.0;
  }
  return out;
}

}  // namespace detail

/// Quadrature-weighted eigendecomposition: psi' W psi = I with W the
/// trapezoid weights; eigenvalues that are negative or numerically zero
/// (below 1e-12 of the largest) are dropped.
inline Eigenpairs eigendecompose(const Eigen::MatrixXd& c, std::span<const double> grid) {
  Eigenpairs all = detail::weighted_eigen(c, grid);
  const double top = all.tau.size() > 0 ? std::max(0.0, all.tau(0)) : 0.0;
  Eigen::Index keep = 0;
  while (keep < all.tau.size() && all.tau(keep) > 1e-12 * top && all.tau(keep) > 0.0) ++keep;
  return Eigenpairs{all.psi.leftCols(keep), all.tau.head(keep)};
}

/// Number of FPCs: the shortest prefix explaining at least `pve` of the total,
/// minus components each explaining less than `drop_below`; at least 1.
inline int select_num_fpcs(std::span<const double> tau, double pve = 0.90, double drop_below = 0.02) {
  if (tau.empty()) return 1;
  double total = 0.0;
  for (double t : tau) total += std::max(t, 0.0);
  if (!(total > 0.0)) return 1;
  std::size_t prefix = tau.size();
  double cum = 0.0;
  for (std::size_t k = 0; k < tau.size(); ++k) {
    cum += std::max(tau[k], 0.0) / total;
    if (cum >= pve - 1e-12) {
      prefix = k + 1;
      break;
    }
  }
  int kept = 0;
  for (std::size_t k = 0; k < prefix; ++k)
    if (std::max(tau[k], 0.0) / total >= drop_below) ++kept;
  return std::max(kept, 1);
}

// ---------------------------------------------------------------------------
// Scores

struct ScoreOptions {
  int backfit_cycles = 2;
  int mean_basis = 8;
  IrlsOptions irls{};
  double newton_tol = 1e-10;
  int newton_max_iter = 100;
  int workers = 1;
};

struct ScoreFit {
  Eigen::VectorXd alpha;   // latent mean on the grid
  Eigen::MatrixXd scores;  // N x K
  std::vector<std::string> flagged;  // curves whose Newton iteration failed
};

namespace detail {

/// MAP of c under y ~ family(g(alpha + Psi c)), c_k ~ N(0, tau_k). Components
/// with tau_k <= 0 stay at 0. Returns nullopt if Newton fails.
inline std::optional<Eigen::VectorXd> map_scores(const Family& family, std::span<const double> y,
                                                 const Eigen::VectorXd& alpha, const Eigen::MatrixXd& psi,
                                                 const Eigen::VectorXd& tau, const ScoreOptions& opts) {
  const Eigen::Index k = psi.cols();
  const auto n = static_cast<Eigen::Index>(y.size());
  std::vector<Eigen::Index> active;
  for (Eigen::Index j = 0; j < k; ++j)
    if (tau(j) > 0.0) active.push_back(j);
  Eigen::VectorXd c = Eigen::VectorXd::Zero(k);
  if (active.empty()) return c;
  const auto ka = static_cast<Eigen::Index>(active.size());
  Eigen::MatrixXd pa(n, ka);
  Eigen::VectorXd prec(ka);
  for (Eigen::Index a = 0; a < ka; ++a) {
    pa.col(a) = psi.col(active[static_cast<std::size_t>(a)]);
    prec(a) = 1.0 / tau(active[static_cast<std::size_t>(a)]);
  }
  auto objective = [&](const Eigen::VectorXd& ca) {
    const Eigen::VectorXd eta = alpha + pa * ca;
    double s = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) s += logpdf(family, y[static_cast<std::size_t>(j)], eta(j));
    return s - 0.5 * (ca.array().square() * prec.array()).sum();
  };
  Eigen::VectorXd ca = Eigen::VectorXd::Zero(ka);
  double q = objective(ca);
  if (!std::isfinite(q)) return std::nullopt;
  bool done = false;
  for (int it = 0; it < opts.newton_max_iter && !done; ++it) {
    const Eigen::VectorXd eta = alpha + pa * ca;
    Eigen::VectorXd sc(n), cu(n);
    for (Eigen::Index j = 0; j < n; ++j) {
      sc(j) = score(family, y[static_cast<std::size_t>(j)], eta(j));
      cu(j) = -curvature(family, y[static_cast<std::size_t>(j)], eta(j));
    }
    const Eigen::VectorXd grad = pa.transpose() * sc - prec.cwiseProduct(ca);
    Eigen::MatrixXd neg_h = pa.transpose() * cu.asDiagonal() * pa;
    neg_h.diagonal() += prec;
    const Eigen::VectorXd step = neg_h.ldlt().solve(grad);
    if (!step.allFinite()) return std::nullopt;
    double scale = 1.0;
    bool accepted = false;
    for (int half = 0; half < 40; ++half, scale *= 0.5) {
      const Eigen::VectorXd cand = ca + scale * step;
      const double qc = objective(cand);
      if (std::isfinite(qc) && qc >= q - 1e-12 * (1.0 + std::abs(q))) {
        ca = cand;
        q = qc;
        accepted = true;
        break;
      }
    }
    if (!accepted) return std::nullopt;
    if ((scale * step).lpNorm<Eigen::Infinity>() <= opts.newton_tol * (1.0 + ca.lpNorm<Eigen::Infinity>())) done = true;
  }
  if (!done) return std::nullopt;
  for (Eigen::Index a = 0; a < ka; ++a) c(active[static_cast<std::size_t>(a)]) = ca(a);
  return c;
}

}  // namespace detail

/// Alternates per-curve MAP score estimation with a penalized IRLS re-fit of
/// the latent mean alpha (offset by the current FPC terms); a final score pass
/// makes the returned scores consistent with the returned alpha.
inline ScoreFit estimate_scores(const FunctionalDataset& ds, std::span<const double> grid, const Eigen::VectorXd& alpha,
                                const Eigen::MatrixXd& psi, const Eigen::VectorXd& tau, const Family& family,
                                const ScoreOptions& opts = {}) {
  if (psi.rows() != static_cast<Eigen::Index>(grid.size()) || alpha.size() != psi.rows())
    throw Error(Errc::GridMismatch, "alpha/psi rows must match the grid");
  if (tau.size() != psi.cols()) throw Error(Errc::InvalidInput, "tau and psi column counts differ");
  const std::size_t n = ds.size();
  ScoreFit out;
  out.alpha = alpha;
  out.scores = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), psi.cols());
  std::vector<Eigen::MatrixXd> psi_at(n);
  for (std::size_t i = 0; i < n; ++i) psi_at[i] = interpolate_rows(grid, psi, ds.curves[i].times);

  std::vector<char> failed(n, 0);
  auto score_pass = [&] {
    parallel_for(n, opts.workers, [&](std::size_t i) {
      const auto& c = ds.curves[i];
      Eigen::VectorXd a(static_cast<Eigen::Index>(c.size()));
      for (std::size_t j = 0; j < c.size(); ++j) a(static_cast<Eigen::Index>(j)) = interpolate(grid, out.alpha, c.times[j]);
      const auto s = detail::map_scores(family, c.values, a, psi_at[i], tau, opts);
      failed[i] = s ? 0 : 1;
      if (s)
        out.scores.row(static_cast<Eigen::Index>(i)) = s->transpose();
      else
        out.scores.row(static_cast<Eigen::Index>(i)).setZero();
    });
  };
  auto alpha_pass = [&] {
    std::vector<double> t, y, offset;
    std::vector<double> eta0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& c = ds.curves[i];
      const Eigen::VectorXd off = psi_at[i] * out.scores.row(static_cast<Eigen::Index>(i)).transpose();
      for (std::size_t j = 0; j < c.size(); ++j) {
        t.push_back(c.times[j]);
        y.push_back(c.values[j]);
        offset.push_back(off(static_cast<Eigen::Index>(j)));
        eta0.push_back(interpolate(grid, out.alpha, c.times[j]) + off(static_cast<Eigen::Index>(j)));
      }
    }
    BsplineBasis basis(opts.mean_basis, 3, 0.0, 1.0);
    const IrlsFit fit = penalized_irls(t, y, offset, family, basis, opts.irls,
                                       Eigen::Map<const Eigen::VectorXd>(eta0.data(), static_cast<Eigen::Index>(eta0.size())));
    const Spline s{basis, fit.fit.coef};
    out.alpha = s.values(grid);
  };
  for (int cycle = 0; cycle < opts.backfit_cycles; ++cycle) {
    score_pass();
    alpha_pass();
  }
  score_pass();
  for (std::size_t i = 0; i < n; ++i)
    if (failed[i]) out.flagged.push_back(ds.curves[i].id);
  return out;
}

// ---------------------------------------------------------------------------
// End-to-end fit

struct GfpcaConfig {
  int mean_basis = 8;
  int cov_basis = 10;
  std::optional<int> digits = 3;
  int grid_size = 101;
  double pve = 0.90;
  double drop_below = 0.02;
  std::optional<int> npc;  // forces the FPC count when set
  int backfit_cycles = 2;
  IrlsOptions irls{};
  double newton_tol = 1e-10;
  /// Re-estimate the Gaussian variance / Gamma shape from the covariance nugget.
  bool estimate_dispersion = true;
  int workers = 1;
};

struct GfpcaModel {
  std::vector<double> grid;
  Eigen::VectorXd alpha;  // latent mean on grid
  Eigen::MatrixXd psi;    // m x K
  Eigen::VectorXd tau;    // K
  Eigen::MatrixXd scores; // N x K
  Family family;
  std::vector<std::string> ids;
  std::vector<double> pve_report;  // shares of the full positive spectrum
  Eigen::VectorXd full_tau;
  MarginalMean mean;
  CovarianceEstimate covariance;   // binned raw + smoothed, with tensor coefficients
  Eigen::MatrixXd response_cov;    // smoothed surface on grid
  Eigen::MatrixXd latent_cov;      // latent covariance on grid
  std::vector<std::string> flagged;
  std::vector<std::string> warnings;

  int num_fpcs() const { return static_cast<int>(psi.cols()); }

  /// Latent predictor alpha + sum_k c_ik psi_k at internal times t.
  Eigen::VectorXd latent_curve(std::size_t i, std::span<const double> t) const {
    const Eigen::MatrixXd p = interpolate_rows(grid, psi, t);
    Eigen::VectorXd out = p * scores.row(static_cast<Eigen::Index>(i)).transpose();
    for (std::size_t j = 0; j < t.size(); ++j) out(static_cast<Eigen::Index>(j)) += interpolate(grid, alpha, t[j]);
    return out;
  }

  /// Latent predictor on the model grid for curve i.
  Eigen::VectorXd latent_on_grid(std::size_t i) const {
    return alpha + psi * scores.row(static_cast<Eigen::Index>(i)).transpose();
  }
};

inline GfpcaModel fit_gfpca(const FunctionalDataset& ds, const Family& family_in, const GfpcaConfig& cfg = {}) {
  if (ds.empty()) throw Error(Errc::EmptyDataset, "no curves");
  for (const auto& c : ds.curves) check_observations(family_in, c.values);
  GfpcaModel model;
  model.family = family_in;
  model.grid = uniform_grid(cfg.grid_size);
  for (const auto& c : ds.curves) model.ids.push_back(c.id);

  model.mean = estimate_marginal_mean(ds, family_in, cfg.mean_basis, cfg.irls);
  const FunctionalDataset centered = center_curves(ds, model.mean);
  model.covariance = smooth_covariance(assemble_crossproducts(centered, cfg.digits), cfg.cov_basis);

  if (cfg.estimate_dispersion && family_in.kind != FamilyKind::Binomial) {
    const double nugget = diagonal_nugget(model.covariance);
    if (nugget > 0.0) {
      if (family_in.kind == FamilyKind::Gaussian) {
        model.family.dispersion = nugget;
      } else {
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < model.covariance.grid.size(); ++i) {
          const auto ii = static_cast<Eigen::Index>(i);
          const double mu = model.mean.response(model.covariance.grid[i]);
          num += model.covariance.counts(ii, ii) * mu * mu;
          den += model.covariance.counts(ii, ii);
        }
        model.family.dispersion = (num / den) / nugget;
      }
    } else {
      model.warnings.push_back("non-positive covariance nugget; dispersion kept at its input value");
    }
  }

  const CovarianceEstimate on_grid = model.covariance.resampled(model.grid);
  model.response_cov = on_grid.smoothed;
  model.latent_cov = latent_covariance(on_grid, model.mean, model.family);

  Eigenpairs eig = eigendecompose(model.latent_cov, model.grid);
  model.full_tau = eig.tau;
  const double total = eig.tau.sum();
  for (Eigen::Index k = 0; k < eig.tau.size(); ++k) model.pve_report.push_back(eig.tau(k) / total);

  if (eig.tau.size() == 0) {
    // No positive variance: keep the leading direction with zero variance.
    const Eigenpairs all = detail::weighted_eigen(model.latent_cov, model.grid);
    eig.psi = all.psi.leftCols(1);
    eig.tau = Eigen::VectorXd::Zero(1);
    model.warnings.push_back("covariance has no positive eigenvalues; single zero-variance FPC kept");
  }
  int k = 0;
  if (cfg.npc) {
    if (*cfg.npc < 1) throw Error(Errc::InvalidConfig, "npc must be >= 1");
    k = *cfg.npc;
    if (k > eig.tau.size()) {
      model.warnings.push_back("requested " + std::to_string(k) + " FPCs but only " + std::to_string(eig.tau.size()) +
                               " positive eigenvalues; clipped");
      k = static_cast<int>(eig.tau.size());
    }
  } else {
    k = std::min<int>(select_num_fpcs(std::span<const double>(eig.tau.data(), static_cast<std::size_t>(eig.tau.size())),
                                      cfg.pve, cfg.drop_below),
                      static_cast<int>(eig.tau.size()));
  }
  model.psi = eig.psi.leftCols(k);
  model.tau = eig.tau.head(k);

  ScoreOptions so;
  so.backfit_cycles = cfg.backfit_cycles;
  so.mean_basis = cfg.mean_basis;
  so.irls = cfg.irls;
  so.newton_tol = cfg.newton_tol;
  so.workers = cfg.workers;
  const Eigen::VectorXd alpha0 = model.mean.mu_x.values(model.grid);
  ScoreFit sf = estimate_scores(ds, model.grid, alpha0, model.psi, model.tau, model.family, so);
  model.alpha = std::move(sf.alpha);
  model.scores = std::move(sf.scores);
  model.flagged = std::move(sf.flagged);
  return model;
}

}  // namespace regfpca
