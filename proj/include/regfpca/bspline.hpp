#pragma once

// Clamped B-spline bases, monotone warping functions built on them, and the
// shared penalized (P-spline) least-squares smoother.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <variant>
#include <vector>

#include "regfpca/error.hpp"
#include "regfpca/funcdata.hpp"

namespace regfpca {

/// Open (clamped) B-spline basis with uniform interior knots on [a,b].
class BsplineBasis {
 public:
  BsplineBasis() : BsplineBasis(4) {}

  /// `n_basis` total functions of the given degree; interior knot count is
  /// n_basis - degree - 1.
  explicit BsplineBasis(int n_basis, int degree = 3, double a = 0.0, double b = 1.0)
      : degree_(degree), size_(n_basis), a_(a), b_(b) {
    if (degree < 1) throw Error(Errc::InvalidConfig, "B-spline degree must be >= 1");
    if (n_basis < degree + 1) throw Error(Errc::InvalidConfig, "B-spline basis needs at least degree+1 functions");
    if (!(b > a)) throw Error(Errc::InvalidRange, "B-spline interval must satisfy a < b");
    const int interior = n_basis - degree - 1;
    knots_.reserve(static_cast<std::size_t>(n_basis + degree + 1));
    for (int i = 0; i <= degree; ++i) knots_.push_back(a);
    for (int i = 1; i <= interior; ++i) knots_.push_back(a + (b - a) * i / (interior + 1));
    for (int i = 0; i <= degree; ++i) knots_.push_back(b);
  }

  int size() const { return size_; }
  int degree() const { return degree_; }
  int interior_knot_count() const { return size_ - degree_ - 1; }
  double lower() const { return a_; }
  double upper() const { return b_; }
  const std::vector<double>& knots() const { return knots_; }

  /// Maps t into [a,b], tolerating 1e-12 slack; throws OutOfDomain otherwise.
  double clamp_to_domain(double t) const {
    const double slack = 1e-12 * std::max(1.0, std::abs(b_ - a_));
    if (!(t >= a_ - slack && t <= b_ + slack))
      throw Error(Errc::OutOfDomain, "t=" + format_double(t) + " outside [" + format_double(a_) + "," +
                                         format_double(b_) + "]");
    return std::clamp(t, a_, b_);
  }

  /// Knot span index s with knots[s] <= t < knots[s+1] (last span at t == b).
  int find_span(double t) const {
    if (t >= b_) return size_ - 1;
    if (t <= a_) return degree_;
    const auto it = std::upper_bound(knots_.begin() + degree_, knots_.begin() + size_ + 1, t);
    return static_cast<int>(it - knots_.begin()) - 1;
  }

  /// Values (and optionally first derivatives) of the degree+1 functions that
  /// are nonzero at t. Returns the index of the first of them.
  int eval_nonzero(double t, double* values, double* derivs = nullptr) const {
    t = clamp_to_domain(t);
    const int span = find_span(t);
    basis_funs(span, t, degree_, values);
    if (derivs != nullptr) {
      double lower[16];
      basis_funs(span, t, degree_ - 1, lower);
      const int p = degree_;
      for (int r = 0; r <= p; ++r) {
        const int i = span - p + r;
        double d = 0.0;
        if (r >= 1) {
          const double den = knots_[i + p] - knots_[i];
          if (den > 0.0) d += p * lower[r - 1] / den;
        }
        if (r <= p - 1) {
          const double den = knots_[i + p + 1] - knots_[i + 1];
          if (den > 0.0) d -= p * lower[r] / den;
        }
        derivs[r] = d;
      }
    }
    return span - degree_;
  }

  Eigen::RowVectorXd row(double t) const {
    Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(size_);
    double v[16];
    const int first = eval_nonzero(t, v);
    for (int k = 0; k <= degree_; ++k) r(first + k) = v[k];
    return r;
  }

  /// Greville abscissae (knot averages); coefficients equal to these
  /// reproduce the identity function.
  Eigen::VectorXd greville() const {
    Eigen::VectorXd g(size_);
    for (int j = 0; j < size_; ++j) {
      double s = 0.0;
      for (int k = 1; k <= degree_; ++k) s += knots_[j + k];
      g(j) = s / degree_;
    }
    g(0) = a_;
    g(size_ - 1) = b_;
    return g;
  }

  friend bool operator==(const BsplineBasis& x, const BsplineBasis& y) {
    return x.degree_ == y.degree_ && x.size_ == y.size_ && x.a_ == y.a_ && x.b_ == y.b_;
  }

 private:
  // Cox-de Boor triangle for the deg+1 functions nonzero on `span`.
  void basis_funs(int span, double t, int deg, double* out) const {
    double left[16], right[16];
    out[0] = 1.0;
    for (int j = 1; j <= deg; ++j) {
      left[j] = t - knots_[span + 1 - j];
      right[j] = knots_[span + j] - t;
      double saved = 0.0;
      for (int r = 0; r < j; ++r) {
        const double den = right[r + 1] + left[j - r];
        const double tmp = den != 0.0 ? out[r] / den : 0.0;
        out[r] = saved + right[r + 1] * tmp;
        saved = left[j - r] * tmp;
      }
      out[j] = saved;
    }
  }

  int degree_;
  int size_;
  double a_;
  double b_;
  std::vector<double> knots_;
};

/// Dense len(t) x K design matrix.
inline Eigen::MatrixXd design_matrix(const BsplineBasis& basis, std::span<const double> t) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(t.size()), basis.size());
  double v[16];
  for (std::size_t j = 0; j < t.size(); ++j) {
    const int first = basis.eval_nonzero(t[j], v);
    for (int k = 0; k <= basis.degree(); ++k) m(static_cast<Eigen::Index>(j), first + k) = v[k];
  }
  return m;
}

/// Design matrix of first derivatives.
inline Eigen::MatrixXd derivative_matrix(const BsplineBasis& basis, std::span<const double> t) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(t.size()), basis.size());
  double v[16], d[16];
  for (std::size_t j = 0; j < t.size(); ++j) {
    const int first = basis.eval_nonzero(t[j], v, d);
    for (int k = 0; k <= basis.degree(); ++k) m(static_cast<Eigen::Index>(j), first + k) = d[k];
  }
  return m;
}

/// A spline function: basis plus coefficients.
struct Spline {
  BsplineBasis basis;
  Eigen::VectorXd coef;

  double operator()(double t) const {
    double v[16];
    const int first = basis.eval_nonzero(t, v);
    double s = 0.0;
    for (int k = 0; k <= basis.degree(); ++k) s += v[k] * coef(first + k);
    return s;
  }

  /// Value and first derivative at t.
  std::pair<double, double> eval_with_derivative(double t) const {
    double v[16], d[16];
    const int first = basis.eval_nonzero(t, v, d);
    double s = 0.0, ds = 0.0;
    for (int k = 0; k <= basis.degree(); ++k) {
      s += v[k] * coef(first + k);
      ds += d[k] * coef(first + k);
    }
    return {s, ds};
  }

  double derivative(double t) const { return eval_with_derivative(t).second; }

  Eigen::VectorXd values(std::span<const double> t) const {
    Eigen::VectorXd out(static_cast<Eigen::Index>(t.size()));
    for (std::size_t j = 0; j < t.size(); ++j) out(static_cast<Eigen::Index>(j)) = (*this)(t[j]);
    return out;
  }
};

/// Inverse warping function h^{-1}: chronological time on the curve's
/// observed domain -> internal time in [0,1].
struct WarpingFunction {
  BsplineBasis basis;  // on [t*_min, t*_max]
  Eigen::VectorXd beta;
  IncompletenessMode mode = IncompletenessMode::Complete;

  double t_star_min() const { return basis.lower(); }
  double t_star_max() const { return basis.upper(); }

  double operator()(double t) const { return Spline{basis, beta}(t); }

  /// h^{-1}(t*_max) - h^{-1}(t*_min); clamped ends make this beta_p - beta_1.
  double registered_length() const { return beta(beta.size() - 1) - beta(0); }
  double observed_length() const { return t_star_max() - t_star_min(); }
};

inline std::vector<double> eval_warp(const WarpingFunction& w, std::span<const double> t) {
  std::vector<double> out;
  out.reserve(t.size());
  const Spline s{w.basis, w.beta};
  for (double x : t) out.push_back(s(x));
  return out;
}

/// Coefficients making the warp the affine map [basis.lower, basis.upper] ->
/// [lo, hi].
inline Eigen::VectorXd greville_identity_beta(const BsplineBasis& basis, double lo, double hi) {
  if (!(lo < hi) || lo < 0.0 || hi > 1.0)
    throw Error(Errc::InvalidRange, "need 0 <= lo < hi <= 1, got lo=" + format_double(lo) + " hi=" + format_double(hi));
  const Eigen::VectorXd g = basis.greville();
  const double a = basis.lower(), b = basis.upper();
  Eigen::VectorXd beta(g.size());
  for (Eigen::Index j = 0; j < g.size(); ++j) beta(j) = lo + (g(j) - a) / (b - a) * (hi - lo);
  beta(0) = lo;
  beta(g.size() - 1) = hi;
  return beta;
}

/// Identity warp on a curve's observed domain [t_min, t_max].
inline WarpingFunction identity_warp(double t_min, double t_max, int n_basis,
                                     IncompletenessMode mode = IncompletenessMode::Complete) {
  BsplineBasis basis(n_basis, 3, t_min, t_max);
  Eigen::VectorXd beta = greville_identity_beta(basis, t_min, t_max);
  return WarpingFunction{std::move(basis), std::move(beta), mode};
}

/// Order-d difference matrix, (K-d) x K.
inline Eigen::MatrixXd difference_matrix(int k, int order) {
  Eigen::MatrixXd d = Eigen::MatrixXd::Identity(k, k);
  for (int o = 0; o < order; ++o) {
    const Eigen::Index r = d.rows() - 1;
    Eigen::MatrixXd next(r, k);
    for (Eigen::Index i = 0; i < r; ++i) next.row(i) = d.row(i + 1) - d.row(i);
    d = std::move(next);
  }
  return d;
}

/// Difference penalty operator for a basis: the first differences are divided
/// by the Greville spacings (rescaled to the mean spacing), so with clamped
/// knots an order-2 penalty still annihilates every affine function.
inline Eigen::MatrixXd greville_difference_matrix(const BsplineBasis& basis, int order) {
  const int k = basis.size();
  if (order == 0) return Eigen::MatrixXd::Identity(k, k);
  const Eigen::VectorXd g = basis.greville();
  const double mean_gap = (basis.upper() - basis.lower()) / (k - 1);
  Eigen::MatrixXd d1 = difference_matrix(k, 1);
  for (int j = 0; j + 1 < k; ++j) d1.row(j) *= mean_gap / (g(j + 1) - g(j));
  return difference_matrix(k - 1, order - 1) * d1;
}

/// Marker for smoothing-parameter selection by generalized cross-validation.
struct AutoGcv {};
using SmoothPar = std::variant<double, AutoGcv>;

/// Fixed GCV grid: 31 values with log10 in [-6, 6].
inline std::vector<double> gcv_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 30; ++i) g.push_back(std::pow(10.0, -6.0 + 0.4 * i));
  return g;
}

struct PenalizedFit {
  Eigen::VectorXd coef;
  double smooth_par = 0.0;
  double edf = 0.0;
  double gcv = std::numeric_limits<double>::quiet_NaN();
};

/// Sufficient statistics of a weighted least-squares problem:
/// gram = X'WX, rhs = X'Wy, yy = y'Wy, n_obs = number of positive weights.
struct NormalEquations {
  Eigen::MatrixXd gram;
  Eigen::VectorXd rhs;
  double yy = 0.0;
  double n_obs = 0.0;
};

/// Solves (gram + lambda * penalty) coef = rhs, selecting lambda by GCV when
/// requested. Shared by the 1-d and tensor-product smoothers.
inline PenalizedFit solve_penalized(const NormalEquations& ne, const Eigen::MatrixXd& penalty, const SmoothPar& smooth) {
  auto solve_at = [&](double lambda, PenalizedFit& out) -> bool {
    const Eigen::MatrixXd a = ne.gram + lambda * penalty;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
    if (es.info() != Eigen::Success) return false;
    const Eigen::VectorXd& ev = es.eigenvalues();
    const double top = ev.cwiseAbs().maxCoeff();
    if (!(top > 0.0) || ev.minCoeff() <= 1e-13 * top) return false;
    const Eigen::MatrixXd& v = es.eigenvectors();
    const Eigen::VectorXd inv = ev.cwiseInverse();
    out.coef = v * (inv.asDiagonal() * (v.transpose() * ne.rhs));
    const Eigen::MatrixXd vgv = v.transpose() * ne.gram * v;
    out.edf = (vgv.diagonal().array() * inv.array()).sum();
    const double rss = std::max(0.0, ne.yy - 2.0 * out.coef.dot(ne.rhs) + out.coef.dot(ne.gram * out.coef));
    const double denom = ne.n_obs - out.edf;
    out.gcv = denom > 1e-8 ? ne.n_obs * rss / (denom * denom) : std::numeric_limits<double>::infinity();
    out.smooth_par = lambda;
    return out.coef.allFinite();
  };

  if (const double* fixed = std::get_if<double>(&smooth)) {
    if (!(*fixed >= 0.0) || !std::isfinite(*fixed))
      throw Error(Errc::InvalidConfig, "smoothing parameter must be finite and >= 0");
    PenalizedFit fit;
    if (!solve_at(*fixed, fit)) throw Error(Errc::SingularSystem, "penalized normal equations are singular");
    return fit;
  }
  PenalizedFit best;
  bool found = false;
  for (double lambda : gcv_grid()) {
    PenalizedFit fit;
    if (!solve_at(lambda, fit)) continue;
    if (!found || fit.gcv < best.gcv) {
      best = std::move(fit);
      found = true;
    }
  }
  if (!found) throw Error(Errc::SingularSystem, "penalized normal equations are singular for every GCV candidate");
  return best;
}

/// Weighted P-spline fit: minimizes sum w (y - B coef)^2 + lambda |D_d coef|^2.
inline PenalizedFit penalized_spline_fit(std::span<const double> t, std::span<const double> y,
                                         std::span<const double> w, const BsplineBasis& basis, int penalty_order,
                                         const SmoothPar& smooth = AutoGcv{}) {
  if (t.size() != y.size() || t.size() != w.size())
    throw Error(Errc::InvalidInput, "penalized_spline_fit: t, y, weights must have equal length");
  if (penalty_order < 0 || penalty_order >= basis.size())
    throw Error(Errc::InvalidConfig, "penalty order must be in [0, K)");
  if (static_cast<int>(t.size()) < basis.size() - penalty_order)
    throw Error(Errc::SingularSystem, "too few observations for the spline basis");
  NormalEquations ne;
  const int k = basis.size();
  ne.gram = Eigen::MatrixXd::Zero(k, k);
  ne.rhs = Eigen::VectorXd::Zero(k);
  double v[16];
  for (std::size_t j = 0; j < t.size(); ++j) {
    if (!std::isfinite(t[j]) || !std::isfinite(y[j]) || !std::isfinite(w[j]))
      throw Error(Errc::NonFiniteInput, "penalized_spline_fit: non-finite input");
    if (w[j] < 0.0) throw Error(Errc::InvalidInput, "penalized_spline_fit: negative weight");
    if (w[j] == 0.0) continue;
    const int first = basis.eval_nonzero(t[j], v);
    for (int a = 0; a <= basis.degree(); ++a) {
      ne.rhs(first + a) += w[j] * v[a] * y[j];
      for (int b = 0; b <= basis.degree(); ++b) ne.gram(first + a, first + b) += w[j] * v[a] * v[b];
    }
    ne.yy += w[j] * y[j] * y[j];
    ne.n_obs += 1.0;
  }
  const Eigen::MatrixXd d = greville_difference_matrix(basis, penalty_order);
  return solve_penalized(ne, d.transpose() * d, smooth);
}

}  // namespace regfpca
