#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "regfpca/expfam.hpp"

using namespace regfpca;

namespace {

const Family kFamilies[] = {Family::gaussian(0.03), Family::gamma(5.0), Family::binomial()};

double draw_y(const Family& f, double eta, std::mt19937_64& rng) {
  switch (f.kind) {
    case FamilyKind::Gaussian: return std::normal_distribution<double>(eta, std::sqrt(f.dispersion))(rng);
    case FamilyKind::Gamma:
      return std::gamma_distribution<double>(f.dispersion, std::exp(eta) / f.dispersion)(rng);
    case FamilyKind::Binomial: return std::bernoulli_distribution(f.response(eta))(rng) ? 1.0 : 0.0;
  }
  return 0.0;
}

}  // namespace

TEST(Family, ResponseDerivativeMatchesFiniteDifference) {
  for (const auto& f : kFamilies) {
    for (int i = 0; i <= 200; ++i) {
      const double x = -10.0 + 0.1 * i, h = 1e-5;
      const double fd = (f.response(x + h) - f.response(x - h)) / (2 * h);
      EXPECT_LE(std::abs(f.response_derivative(x) - fd), 1e-6 * (1 + std::abs(f.response_derivative(x))));
    }
  }
}

TEST(Family, GammaMoments) {
  const Family f = Family::gamma(5.0);
  EXPECT_DOUBLE_EQ(f.response(0.4), std::exp(0.4));
  EXPECT_NEAR(f.variance(0.4), std::exp(0.8) / 5.0, 1e-14);
  EXPECT_NEAR(f.link(f.response(0.4)), 0.4, 1e-14);
}

TEST(Loglik, GaussianAtTheMean) {
  const std::vector<double> y{0.0, 0.0}, eta{0.0, 0.0};
  const double expected = -2.0 * 0.5 * std::log(2.0 * std::numbers::pi * 0.03);
  EXPECT_NEAR(loglik(Family::gaussian(0.03), y, eta), expected, 1e-12);
  EXPECT_NEAR(expected, 1.66868, 1e-5);
}

TEST(Loglik, BinomialHalf) {
  EXPECT_NEAR(loglik(Family::binomial(), std::vector<double>{1.0}, std::vector<double>{0.0}), std::log(0.5), 1e-12);
}

TEST(Loglik, GammaTermByTerm) {
  const std::vector<double> y{1.2, 0.7}, eta{0.1, -0.2};
  const double nu = 5.0;
  double oracle = 0.0;
  for (int j = 0; j < 2; ++j) {
    const double mu = std::exp(eta[j]), scale = mu / nu;
    oracle += std::log(std::pow(y[j], nu - 1) * std::exp(-y[j] / scale) / (std::tgamma(nu) * std::pow(scale, nu)));
  }
  EXPECT_NEAR(loglik(Family::gamma(nu), y, eta), oracle, 1e-10);
}

TEST(Loglik, InvalidObservations) {
  auto code = [](const Family& f, double y) {
    try {
      loglik(f, std::vector<double>{y}, std::vector<double>{0.0});
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::InvalidInput;
  };
  EXPECT_EQ(code(Family::gamma(2.0), 0.0), Errc::InvalidObservation);
  EXPECT_EQ(code(Family::gamma(2.0), -1.0), Errc::InvalidObservation);
  EXPECT_EQ(code(Family::binomial(), 0.5), Errc::InvalidObservation);
  EXPECT_THROW(loglik(Family::gaussian(1.0), std::vector<double>{0.0}, std::vector<double>{INFINITY}), Error);
  EXPECT_THROW(loglik(Family::gaussian(1.0), std::vector<double>{0.0, 1.0}, std::vector<double>{0.0}), Error);
}

TEST(Gradient, ZeroAtMatchedMean) {
  const std::vector<double> eta{-0.3, 0.2, 1.1};
  std::vector<double> ey;
  for (double e : eta) ey.push_back(std::exp(e));
  EXPECT_LT(loglik_grad_eta(Family::gaussian(0.5), eta, eta).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT(loglik_grad_eta(Family::gamma(5.0), ey, eta).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Gradient, MatchesFiniteDifferencesOnRandomDraws) {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> ue(-2.0, 2.0);
  for (const auto& f : kFamilies) {
    for (int rep = 0; rep < 100; ++rep) {
      std::vector<double> eta(5), y(5);
      for (int j = 0; j < 5; ++j) {
        eta[j] = ue(rng);
        y[j] = draw_y(f, ue(rng), rng);
      }
      const Eigen::VectorXd g = loglik_grad_eta(f, y, eta);
      const Eigen::VectorXd hd = loglik_hess_eta(f, y, eta);
      for (int j = 0; j < 5; ++j) {
        const double h = 1e-5;
        auto plus = eta, minus = eta;
        plus[j] += h;
        minus[j] -= h;
        const double fd = (loglik(f, y, plus) - loglik(f, y, minus)) / (2 * h);
        EXPECT_LE(std::abs(g(j) - fd), 1e-6 * std::max(1.0, std::abs(fd)));
        const Eigen::VectorXd gp = loglik_grad_eta(f, y, plus), gm = loglik_grad_eta(f, y, minus);
        const double fd2 = (gp(j) - gm(j)) / (2 * h);
        EXPECT_LE(std::abs(hd(j) - fd2), 1e-5 * std::max(1.0, std::abs(fd2)));
      }
    }
  }
}

TEST(Loglik, MaximizedAtMatchingMean) {
  const std::vector<double> y{0.4, 1.7, 2.2};
  for (const auto& f : {Family::gaussian(0.2), Family::gamma(3.0)}) {
    std::vector<double> eta;
    for (double v : y) eta.push_back(f.link(v));
    const double best = loglik(f, y, eta);
    for (std::size_t j = 0; j < y.size(); ++j)
      for (double d : {-0.01, 0.01}) {
        auto e = eta;
        e[j] += d;
        EXPECT_LT(loglik(f, y, e), best);
      }
  }
}

TEST(Irls, GaussianIsLeastSquares) {
  const std::vector<double> y{0.3, -1.0, 2.0}, eta{1.0, 0.0, -2.0};
  const auto w = irls_weights(Family::gaussian(0.25), y, eta);
  for (int j = 0; j < 3; ++j) {
    EXPECT_NEAR(w.z(j), y[j], 1e-15);
    EXPECT_NEAR(w.w(j), 4.0, 1e-15);
  }
}

TEST(Irls, BinomialAlgebra) {
  const auto w = irls_weights(Family::binomial(), std::vector<double>{1.0}, std::vector<double>{0.0});
  EXPECT_NEAR(w.z(0), 2.0, 1e-15);
  EXPECT_NEAR(w.w(0), 0.25, 1e-15);
}

TEST(Irls, GammaInterceptConvergesToLogMean) {
  const std::vector<double> y{0.5, 1.3, 2.9, 0.8, 4.1, 1.1};
  double eta = 0.0;
  for (int it = 0; it < 100; ++it) {
    const std::vector<double> e(y.size(), eta);
    const auto wk = irls_weights(Family::gamma(5.0), y, e);
    const double next = wk.w.dot(wk.z) / wk.w.sum();
    if (std::abs(next - eta) < 1e-14) break;
    eta = next;
  }
  double mean = 0.0;
  for (double v : y) mean += v / y.size();
  EXPECT_NEAR(eta, std::log(mean), 1e-8);
}

TEST(Irls, DegenerateWeight) {
  try {
    irls_weights(Family::gamma(1.0), std::vector<double>{1.0}, std::vector<double>{-800.0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DegenerateWeight);
  }
}

TEST(Irls, GaussianIdentityMatchesOls) {
  // One weighted IRLS step from any start solves the OLS normal equations.
  Eigen::MatrixXd x(6, 2);
  x << 1, 0, 1, 1, 1, 2, 1, 3, 1, 4, 1, 5;
  const std::vector<double> y{0.1, 1.2, 1.9, 3.2, 3.9, 5.1};
  const Eigen::VectorXd yv = Eigen::Map<const Eigen::VectorXd>(y.data(), 6);
  const std::vector<double> eta(6, 0.7);
  const auto wk = irls_weights(Family::gaussian(2.0), y, eta);
  const Eigen::VectorXd b = (x.transpose() * wk.w.asDiagonal() * x).ldlt().solve(x.transpose() * wk.w.asDiagonal() * wk.z);
  const Eigen::VectorXd ols = x.colPivHouseholderQr().solve(yv);
  EXPECT_LT((b - ols).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Dispersion, MomentEstimates) {
  const std::vector<double> y{1.0, 3.0}, mu{2.0, 2.0};
  EXPECT_NEAR(moment_dispersion(FamilyKind::Gaussian, y, mu), 1.0, 1e-15);
  EXPECT_NEAR(moment_dispersion(FamilyKind::Gamma, y, mu), 4.0, 1e-15);
}

TEST(Family, Parsing) {
  EXPECT_EQ(parse_family("gamma"), FamilyKind::Gamma);
  EXPECT_EQ(to_string(FamilyKind::Binomial), "binomial");
  EXPECT_THROW(parse_family("poisson"), Error);
}
