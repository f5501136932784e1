#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "regfpca/simbench.hpp"

using namespace regfpca;

namespace {

// Integral of the piecewise-linear interpolant of f over t by dense midpoint sampling.
double dense_integral(const std::vector<double>& t, const std::vector<double>& f) {
  const int m = 400000;
  const double h = (t.back() - t.front()) / m;
  double s = 0.0;
  std::size_t j = 0;
  for (int k = 0; k < m; ++k) {
    const double x = t.front() + (k + 0.5) * h;
    while (j + 2 < t.size() && x > t[j + 1]) ++j;
    const double a = (x - t[j]) / (t[j + 1] - t[j]);
    s += h * ((1.0 - a) * f[j] + a * f[j + 1]);
  }
  return s;
}

std::vector<double> sorted_uniform(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> t(static_cast<std::size_t>(n));
  for (auto& x : t) x = u(rng);
  t.front() = 0.0;
  t.back() = 1.0;
  std::sort(t.begin(), t.end());
  return t;
}

}  // namespace

TEST(Simulation, InterceptPeak) { EXPECT_NEAR(simulation_alpha(0.45), 1.0 / (0.2 * std::sqrt(2.0 * std::numbers::pi)), 1e-12); }

TEST(Simulation, RankThreeTruth) {
  const auto tau = simulation_tau(3);
  ASSERT_EQ(tau.size(), 3u);
  EXPECT_DOUBLE_EQ(tau[0], 0.7);
  EXPECT_DOUBLE_EQ(tau[1], 0.25);
  EXPECT_DOUBLE_EQ(tau[2], 0.05);
  EXPECT_EQ(simulation_tau(1), std::vector<double>{1.0});

  // Gauss-Legendre quadrature of the products on [0,1]: exact for these degrees.
  const double gx[] = {-0.9061798459386640, -0.5384693101056831, 0.0, 0.5384693101056831, 0.9061798459386640};
  const double gw[] = {0.2369268850561891, 0.4786286704993665, 0.5688888888888889, 0.4786286704993665,
                       0.2369268850561891};
  for (int k = 1; k <= 3; ++k)
    for (int l = 1; l <= 3; ++l) {
      double s = 0.0;
      for (int q = 0; q < 5; ++q) {
        const double t = 0.5 * (gx[q] + 1.0);
        s += 0.5 * gw[q] * shifted_legendre(k, t) * shifted_legendre(l, t);
      }
      EXPECT_NEAR(s, k == l ? 1.0 : 0.0, 1e-8);
    }
  const std::vector<double> grid = {0.0, 0.25, 0.5, 1.0};
  const auto psi = simulation_psi(3, grid);
  EXPECT_EQ(psi.rows(), 4);
  EXPECT_EQ(psi.cols(), 3);
  EXPECT_NEAR(psi(2, 1), shifted_legendre(2, 0.5), 1e-15);
}

TEST(Simulation, InvalidSettings) {
  SimSetting s;
  s.rank = 2;
  EXPECT_THROW(s.validate(), Error);
  s.rank = 1;
  s.n = 0;
  EXPECT_THROW(s.validate(), Error);
  EXPECT_THROW(parse_incompleteness("medium"), Error);
  EXPECT_EQ(parse_correlation(to_string(Correlation::AmpPhaseNegative)), Correlation::AmpPhaseNegative);
}

TEST(Simulation, WarpsAreValidAndPinned) {
  SimSetting s;
  s.n = 50;
  s.seed = 11;
  const auto [ds, truth] = simulate(s);
  ASSERT_EQ(ds.size(), 50u);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& w = truth.warps[i];
    EXPECT_NEAR(w(0.0), 0.0, 1e-12);
    EXPECT_NEAR(w(1.0), 1.0, 1e-12);
    double prev = -1.0;
    for (int k = 0; k <= 400; ++k) {
      const double v = w(k / 400.0);
      EXPECT_GT(v, prev);
      prev = v;
    }
    EXPECT_EQ(ds.curves[i].size(), 50u);
    for (std::size_t j = 1; j < ds.curves[i].size(); ++j) EXPECT_GT(ds.curves[i].times[j], ds.curves[i].times[j - 1]);
    EXPECT_DOUBLE_EQ(truth.registered_lengths[i], 1.0);
  }
  EXPECT_NO_THROW(validate_dataset(ds));
}

TEST(Simulation, StrongTrailingCutoffs) {
  SimSetting s;
  s.n = 100;
  s.seed = 3;
  const auto complete = simulate(s);
  s.incompleteness = Incompleteness::Strong;
  const auto strong = simulate(s);
  double len_c = 0.0, len_s = 0.0;
  for (std::size_t i = 0; i < 100; ++i) {
    const double cut = strong.second.cutoffs[i];
    EXPECT_GE(cut, 0.3);
    EXPECT_LE(cut, 1.0);
    const auto& c = strong.first.curves[i];
    EXPECT_GE(c.size(), 4u);
    if (c.size() > 4) {
      EXPECT_LE(c.t_max(), cut);
    }
    len_c += complete.first.curves[i].t_max() - complete.first.curves[i].t_min();
    len_s += c.t_max() - c.t_min();
  }
  EXPECT_LT(len_s, len_c);
  EXPECT_EQ(strong.first.mode, IncompletenessMode::Trailing);
}

TEST(Simulation, WeakCutoffsInLastFortyPercent) {
  SimSetting s;
  s.incompleteness = Incompleteness::Weak;
  s.seed = 8;
  const auto [ds, truth] = simulate(s);
  for (double c : truth.cutoffs) {
    EXPECT_GE(c, 0.6);
    EXPECT_LE(c, 1.0);
  }
}

TEST(Simulation, GammaDrawsPositiveWithMatchingMean) {
  SimSetting s;
  s.family = FamilyKind::Gamma;
  s.n = 400;
  s.seed = 6;
  const auto [ds, truth] = simulate(s);
  double ratio = 0.0;
  int count = 0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t j = 0; j < ds.curves[i].size(); ++j) {
      EXPECT_GT(ds.curves[i].values[j], 0.0);
      ratio += ds.curves[i].values[j] / std::exp(truth.latent(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
      ++count;
    }
  // y / exp(X) is Gamma(shape, 1/shape): mean 1, variance 1/shape.
  EXPECT_NEAR(ratio / count, 1.0, 4.0 * std::sqrt(0.2 / count));
}

TEST(Simulation, SameSeedSameData) {
  SimSetting s;
  s.seed = 21;
  s.correlation = Correlation::AmpIncompletenessPositive;
  s.incompleteness = Incompleteness::Weak;
  const auto a = simulate(s);
  const auto b = simulate(s);
  for (std::size_t i = 0; i < a.first.size(); ++i) {
    EXPECT_EQ(a.first.curves[i].times, b.first.curves[i].times);
    EXPECT_EQ(a.first.curves[i].values, b.first.curves[i].values);
  }
}

TEST(Simulation, CopulaSignsFollowSetting) {
  // Positive link between the first score and the cut-off.
  SimSetting s;
  s.n = 400;
  s.seed = 17;
  s.incompleteness = Incompleteness::Strong;
  s.correlation = Correlation::AmpIncompletenessPositive;
  const auto [ds, truth] = simulate(s);
  Eigen::VectorXd a = truth.scores.col(0);
  Eigen::VectorXd c = Eigen::Map<const Eigen::VectorXd>(truth.cutoffs.data(), s.n);
  a.array() -= a.mean();
  c.array() -= c.mean();
  EXPECT_GT(a.dot(c) / (a.norm() * c.norm()), 0.3);
}

TEST(Metrics, MiseExamples) {
  const std::vector<std::vector<double>> grid = {{0.0, 0.3, 1.0}, {0.0, 0.5, 1.0}};
  const std::vector<std::vector<double>> truth = {{1.0, 2.0, 3.0}, {0.0, -1.0, 4.0}};
  EXPECT_EQ(mise_y(grid, truth, truth), 0.0);
  auto shifted = truth;
  for (auto& v : shifted)
    for (auto& x : v) x += 0.3;
  EXPECT_NEAR(mise_y(grid, truth, shifted), 0.09, 1e-15);
  EXPECT_NEAR(mise_h(grid, truth, shifted), 0.09, 1e-15);
  EXPECT_THROW(mise_y(grid, truth, {{1.0}}), Error);
  try {
    mise_h({{0.0, 1.0}}, {{0.0, 1.0, 2.0}}, {{0.0, 1.0, 2.0}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::GridMismatch);
  }
}

TEST(Metrics, MiseMatchesDenseQuadrature) {
  std::mt19937_64 rng(44);
  std::normal_distribution<double> n01;
  std::vector<std::vector<double>> grids, a, b;
  double oracle = 0.0;
  for (int i = 0; i < 4; ++i) {
    grids.push_back(sorted_uniform(rng, 30));
    std::vector<double> x(30), y(30), sq(30);
    for (int j = 0; j < 30; ++j) {
      x[j] = n01(rng);
      y[j] = n01(rng);
      sq[j] = (x[j] - y[j]) * (x[j] - y[j]);
    }
    oracle += dense_integral(grids.back(), sq) / 4.0;
    a.push_back(x);
    b.push_back(y);
  }
  EXPECT_NEAR(mise_y(grids, a, b), oracle, 1e-6);
}

TEST(Metrics, SpanOverlap) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01;
  Eigen::MatrixXd a(20, 2);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = n01(rng);
  EXPECT_NEAR(lv_psi(a, a), 1.0, 1e-12);
  EXPECT_NEAR(lv_psi(a, a.col(0)), 0.5, 1e-12);

  Eigen::MatrixXd mixed(20, 2);
  mixed.col(0) = -3.0 * a.col(1);
  mixed.col(1) = a.col(0) + 2.0 * a.col(1);
  EXPECT_NEAR(lv_psi(a, mixed), 1.0, 1e-12);

  const Eigen::MatrixXd q = a.householderQr().householderQ() * Eigen::MatrixXd::Identity(20, 3);
  EXPECT_NEAR(lv_psi(a, q.col(2)), 0.0, 1e-12);
  EXPECT_THROW(lv_psi(a, Eigen::MatrixXd::Zero(20, 1)), Error);
  EXPECT_THROW(lv_psi(a, Eigen::MatrixXd::Ones(10, 1)), Error);
}

TEST(Metrics, LengthError) {
  const std::vector<double> t = {0.2, 0.5, 1.0};
  EXPECT_EQ(mse_d(t, t), 0.0);
  EXPECT_NEAR(mse_d(t, std::vector<double>{0.3, 0.6, 1.1}), 0.01, 1e-15);
  EXPECT_NEAR(mse_d(t, std::vector<double>{0.0, 0.0, 0.0}), (0.04 + 0.25 + 1.0) / 3.0, 1e-15);
  try {
    mse_d(t, std::vector<double>{1.0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::LengthMismatch);
  }
}

TEST(Metrics, IdentityBaselineMatchesDirectComputation) {
  SimSetting s;
  s.n = 10;
  s.seed = 2;
  const auto [ds, truth] = simulate(s);
  double direct = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::vector<double> sq;
    for (std::size_t j = 0; j < ds.curves[i].size(); ++j) {
      const double d = truth.h_inv[i][j] - ds.curves[i].times[j];
      sq.push_back(d * d);
    }
    direct += dense_integral(ds.curves[i].times, sq) / 10.0;
  }
  EXPECT_NEAR(identity_mise_h(ds, truth), direct, 1e-6);
}

TEST(Benchmark, DeterministicAcrossRunsAndWorkers) {
  SimSetting s;
  s.n = 20;
  s.seed = 100;
  BenchMethod m;
  m.joint.max_iter = 2;
  const auto t1 = run_benchmark(s, m, 2, 1);
  const auto t2 = run_benchmark(s, m, 2, 2);
  std::ostringstream a, b;
  write_bench_csv(t1, a);
  write_bench_csv(t2, b);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(bench_summary_json(t1).dump(), bench_summary_json(t2).dump());
}

TEST(Benchmark, SingleReplicationTable) {
  SimSetting s;
  s.n = 20;
  BenchMethod m;
  m.joint.max_iter = 1;
  const auto t = run_benchmark(s, m, 1);
  std::ostringstream os;
  write_bench_csv(t, os);
  std::istringstream in(os.str());
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[1].rfind("1,", 0), 0u);
  EXPECT_EQ(lines[2].rfind("median,", 0), 0u);
  EXPECT_EQ(bench_summary_json(t)["replications"], 1);
  EXPECT_THROW(run_benchmark(s, m, 0), Error);
}

TEST(Benchmark, GaussianRankOneBeatsIdentityBaseline) {
  SimSetting s;
  s.n = 50;
  s.seed = 300;
  const auto t = run_benchmark(s, BenchMethod{}, 5, 4);
  EXPECT_EQ(t.failed, 0);
  std::vector<double> base;
  for (const auto& r : t.rows) base.push_back(r.identity_mise_h);
  EXPECT_LT(t.median.mise_h, detail::median(base));
}
