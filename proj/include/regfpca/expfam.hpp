#pragma once

// Exponential-family log-likelihoods with canonical links: Gaussian
// (identity), Gamma (log, mean parameterization) and Bernoulli (logit).

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <string_view>

#include "regfpca/error.hpp"

namespace regfpca {

enum class FamilyKind { Gaussian, Gamma, Binomial };

inline std::string_view to_string(FamilyKind k) {
  switch (k) {
    case FamilyKind::Gaussian: return "gaussian";
    case FamilyKind::Gamma: return "gamma";
    case FamilyKind::Binomial: return "binomial";
  }
  return "gaussian";
}

inline FamilyKind parse_family(std::string_view s) {
  if (s == "gaussian") return FamilyKind::Gaussian;
  if (s == "gamma") return FamilyKind::Gamma;
  if (s == "binomial") return FamilyKind::Binomial;
  throw Error(Errc::InvalidConfig, "unknown family '" + std::string(s) + "'");
}

/// Distribution family. `dispersion` is the Gaussian variance sigma^2 or the
/// Gamma shape nu; it is ignored for Binomial.
struct Family {
  FamilyKind kind = FamilyKind::Gaussian;
  double dispersion = 1.0;

  static Family gaussian(double sigma2) { return {FamilyKind::Gaussian, sigma2}; }
  static Family gamma(double shape) { return {FamilyKind::Gamma, shape}; }
  static Family binomial() { return {FamilyKind::Binomial, 1.0}; }

  /// Response function g (inverse link).
  double response(double x) const {
    switch (kind) {
      case FamilyKind::Gaussian: return x;
      case FamilyKind::Gamma: return std::exp(x);
      case FamilyKind::Binomial: return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    return x;
  }

  /// g'(x).
  double response_derivative(double x) const {
    switch (kind) {
      case FamilyKind::Gaussian: return 1.0;
      case FamilyKind::Gamma: return std::exp(x);
      case FamilyKind::Binomial: {
        const double p = response(x);
        return p * (1.0 - p);
      }
    }
    return 1.0;
  }

  /// Link function g^{-1}.
  double link(double mu) const {
    switch (kind) {
      case FamilyKind::Gaussian: return mu;
      case FamilyKind::Gamma: return std::log(mu);
      case FamilyKind::Binomial: return std::log(mu / (1.0 - mu));
    }
    return mu;
  }

  /// Var[Y | eta].
  double variance(double eta) const {
    switch (kind) {
      case FamilyKind::Gaussian: return dispersion;
      case FamilyKind::Gamma: return std::exp(2.0 * eta) / dispersion;
      case FamilyKind::Binomial: {
        const double p = response(eta);
        return p * (1.0 - p);
      }
    }
    return dispersion;
  }

  bool valid_observation(double y) const {
    if (!std::isfinite(y)) return false;
    switch (kind) {
      case FamilyKind::Gaussian: return true;
      case FamilyKind::Gamma: return y > 0.0;
      case FamilyKind::Binomial: return y == 0.0 || y == 1.0;
    }
    return false;
  }
};

inline void check_observations(const Family& f, std::span<const double> y) {
  for (double v : y)
    if (!f.valid_observation(v))
      throw Error(Errc::InvalidObservation, "observation " + std::to_string(v) + " invalid for family " +
                                                std::string(to_string(f.kind)));
}

namespace detail {

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

/// Log density of one observation; no validation, may return -inf.
inline double logpdf(const Family& f, double y, double eta) {
  switch (f.kind) {
    case FamilyKind::Gaussian: {
      const double r = y - eta;
      return -0.5 * std::log(2.0 * std::numbers::pi * f.dispersion) - r * r / (2.0 * f.dispersion);
    }
    case FamilyKind::Gamma: {
      const double nu = f.dispersion;
      return nu * std::log(nu) - nu * eta + (nu - 1.0) * std::log(y) - nu * y * std::exp(-eta) - std::lgamma(nu);
    }
    case FamilyKind::Binomial: return y * eta - softplus(eta);
  }
  return 0.0;
}

/// d logpdf / d eta.
inline double score(const Family& f, double y, double eta) {
  switch (f.kind) {
    case FamilyKind::Gaussian: return (y - eta) / f.dispersion;
    case FamilyKind::Gamma: return f.dispersion * (y * std::exp(-eta) - 1.0);
    case FamilyKind::Binomial: return y - f.response(eta);
  }
  return 0.0;
}

/// d^2 logpdf / d eta^2.
inline double curvature(const Family& f, double y, double eta) {
  switch (f.kind) {
    case FamilyKind::Gaussian: return -1.0 / f.dispersion;
    case FamilyKind::Gamma: return -f.dispersion * y * std::exp(-eta);
    case FamilyKind::Binomial: return -f.response_derivative(eta);
  }
  return 0.0;
}

inline void check_sizes(std::span<const double> y, std::span<const double> eta) {
  if (y.size() != eta.size()) throw Error(Errc::InvalidInput, "y and eta differ in length");
}

}  // namespace detail

/// Full log-likelihood sum_j log f(y_j; g(eta_j)), normalizing constants included.
inline double loglik(const Family& f, std::span<const double> y, std::span<const double> eta) {
  detail::check_sizes(y, eta);
  check_observations(f, y);
  double s = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) {
    if (!std::isfinite(eta[j])) throw Error(Errc::NonFinite, "non-finite linear predictor");
    s += detail::logpdf(f, y[j], eta[j]);
  }
  if (!std::isfinite(s)) throw Error(Errc::NonFinite, "log-likelihood is not finite");
  return s;
}

inline Eigen::VectorXd loglik_grad_eta(const Family& f, std::span<const double> y, std::span<const double> eta) {
  detail::check_sizes(y, eta);
  check_observations(f, y);
  Eigen::VectorXd g(static_cast<Eigen::Index>(y.size()));
  for (std::size_t j = 0; j < y.size(); ++j) {
    g(static_cast<Eigen::Index>(j)) = detail::score(f, y[j], eta[j]);
    if (!std::isfinite(g(static_cast<Eigen::Index>(j)))) throw Error(Errc::NonFinite, "non-finite score");
  }
  return g;
}

/// Diagonal of the Hessian of the log-likelihood with respect to eta.
inline Eigen::VectorXd loglik_hess_eta(const Family& f, std::span<const double> y, std::span<const double> eta) {
  detail::check_sizes(y, eta);
  Eigen::VectorXd h(static_cast<Eigen::Index>(y.size()));
  for (std::size_t j = 0; j < y.size(); ++j) h(static_cast<Eigen::Index>(j)) = detail::curvature(f, y[j], eta[j]);
  return h;
}

struct IrlsWorking {
  Eigen::VectorXd z;  // working response
  Eigen::VectorXd w;  // working weights
};

/// IRLS linearization: z = eta + (y - g(eta)) / g'(eta), w = g'(eta)^2 / Var.
inline IrlsWorking irls_weights(const Family& f, std::span<const double> y, std::span<const double> eta) {
  detail::check_sizes(y, eta);
  check_observations(f, y);
  IrlsWorking out{Eigen::VectorXd(static_cast<Eigen::Index>(y.size())),
                  Eigen::VectorXd(static_cast<Eigen::Index>(y.size()))};
  for (std::size_t j = 0; j < y.size(); ++j) {
    const auto i = static_cast<Eigen::Index>(j);
    const double d = f.response_derivative(eta[j]);
    if (!(d >= std::numeric_limits<double>::min()) || !std::isfinite(d))
      throw Error(Errc::DegenerateWeight, "response derivative underflows at eta=" + std::to_string(eta[j]));
    out.z(i) = eta[j] + (y[j] - f.response(eta[j])) / d;
    out.w(i) = d * d / f.variance(eta[j]);
    if (!std::isfinite(out.z(i)) || !std::isfinite(out.w(i)))
      throw Error(Errc::DegenerateWeight, "non-finite IRLS working values");
  }
  return out;
}

/// Moment estimate of the dispersion from fitted means: residual variance for
/// Gaussian, inverse mean squared Pearson residual for the Gamma shape.
inline double moment_dispersion(FamilyKind kind, std::span<const double> y, std::span<const double> mu) {
  if (y.size() != mu.size() || y.empty()) throw Error(Errc::InvalidInput, "moment_dispersion: size mismatch");
  double s = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) {
    const double r = y[j] - mu[j];
    s += kind == FamilyKind::Gamma ? (r * r) / (mu[j] * mu[j]) : r * r;
  }
  s /= static_cast<double>(y.size());
  const double floor = 1e-10;
  switch (kind) {
    case FamilyKind::Gaussian: return std::max(s, floor);
    case FamilyKind::Gamma: return 1.0 / std::max(s, floor);
    case FamilyKind::Binomial: return 1.0;
  }
  return 1.0;
}

}  // namespace regfpca
