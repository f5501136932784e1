#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "regfpca/registration.hpp"
#include "regfpca/simbench.hpp"

using namespace regfpca;

namespace {

std::vector<double> linspace(double a, double b, int n) {
  std::vector<double> v(n);
  for (int i = 0; i < n; ++i) v[i] = a + (b - a) * i / (n - 1);
  return v;
}

TemplateFunction bump_template(const Family& f, double base = 0.0) {
  const auto grid = linspace(0.0, 1.0, 201);
  std::vector<double> lat;
  for (double t : grid) lat.push_back(base + std::exp(-std::pow((t - 0.45) / 0.15, 2)) + 0.5 * std::sin(3.0 * t));
  return fit_template(grid, lat, f, 20);
}

// Noiseless curve on [lo, hi] generated as template(h_inv(t)).
Curve warped_curve(const TemplateFunction& tmpl, const WarpingFunction& w, int n, const std::string& id = "c") {
  Curve c;
  c.id = id;
  c.times = linspace(w.t_star_min(), w.t_star_max(), n);
  for (double t : c.times) c.values.push_back(tmpl.mean(w(t)));
  return c;
}

double warp_mise(const WarpingFunction& a, const WarpingFunction& b) {
  const auto t = linspace(a.t_star_min(), a.t_star_max(), 401);
  double s = 0.0;
  for (std::size_t j = 0; j + 1 < t.size(); ++j) {
    const double d0 = a(t[j]) - b(t[j]), d1 = a(t[j + 1]) - b(t[j + 1]);
    s += 0.5 * (d0 * d0 + d1 * d1) * (t[j + 1] - t[j]);
  }
  return s;
}

void expect_valid_warp(const WarpingFunction& w) {
  const Eigen::Index p = w.beta.size();
  for (Eigen::Index j = 1; j < p; ++j) EXPECT_GE(w.beta(j), w.beta(j - 1) - 1e-10);
  EXPECT_GE(w.beta(0), -1e-10);
  EXPECT_LE(w.beta(p - 1), 1.0 + 1e-10);
  const auto h = eval_warp(w, linspace(w.t_star_min(), w.t_star_max(), 1000));
  for (std::size_t j = 1; j < h.size(); ++j) EXPECT_GE(h[j], h[j - 1] - 1e-12);
  switch (w.mode) {
    case IncompletenessMode::Complete:
      EXPECT_EQ(w.beta(0), w.t_star_min());
      EXPECT_EQ(w.beta(p - 1), w.t_star_max());
      break;
    case IncompletenessMode::Leading: EXPECT_EQ(w.beta(p - 1), w.t_star_max()); break;
    case IncompletenessMode::Trailing: EXPECT_EQ(w.beta(0), w.t_star_min()); break;
    case IncompletenessMode::Full: break;
  }
}

}  // namespace

TEST(Penalty, IdentityIsZeroInEveryMode) {
  for (auto m : {IncompletenessMode::Complete, IncompletenessMode::Leading, IncompletenessMode::Trailing,
                 IncompletenessMode::Full})
    EXPECT_EQ(penalty(identity_warp(0.1, 0.8, 5, m)), 0.0);
}

TEST(Penalty, TrailingEndpointDistance) {
  BsplineBasis basis(4, 3, 0.0, 0.8);
  const WarpingFunction w{basis, greville_identity_beta(basis, 0.0, 1.0), IncompletenessMode::Trailing};
  EXPECT_NEAR(penalty(w), 0.04, 1e-15);
}

TEST(Penalty, FullLengthChange) {
  BsplineBasis basis(4, 3, 0.1, 0.8);
  const WarpingFunction w{basis, greville_identity_beta(basis, 0.0, 0.9), IncompletenessMode::Full};
  EXPECT_NEAR(penalty(w), 0.04, 1e-15);
}

TEST(Penalty, CompleteIsAlwaysZero) {
  BsplineBasis basis(4, 3, 0.0, 0.8);
  Eigen::VectorXd beta(4);
  beta << 0.0, 0.6, 0.7, 0.8;
  EXPECT_EQ(penalty(WarpingFunction{basis, beta, IncompletenessMode::Complete}), 0.0);
}

TEST(Template, MeanDerivativeChainRule) {
  const auto tmpl = bump_template(Family::gamma(3.0));
  for (double t : linspace(0.01, 0.99, 25)) {
    const double fd = (tmpl.mean(t + 1e-6) - tmpl.mean(t - 1e-6)) / 2e-6;
    EXPECT_NEAR(tmpl.mean_derivative(t), fd, 1e-6 * (1 + std::abs(fd)));
    EXPECT_DOUBLE_EQ(tmpl.mean(t), std::exp(tmpl.latent_value(t)));
  }
}

TEST(RegisterCurve, RecoversKnownWarp) {
  const Family f = Family::gaussian(0.03);
  const auto tmpl = bump_template(f);
  BsplineBasis basis(4);
  Eigen::VectorXd beta(4);
  beta << 0.0, 0.18, 0.55, 1.0;
  const WarpingFunction truth{basis, beta, IncompletenessMode::Complete};
  std::mt19937_64 rng(17);
  std::normal_distribution<double> noise(0.0, std::sqrt(0.03));
  Curve c = warped_curve(tmpl, truth, 50);
  for (double& y : c.values) y += noise(rng);
  RegistrationConfig cfg;
  cfg.lambda = 0.025;
  const auto r = register_curve(c, tmpl, cfg);
  EXPECT_LE(warp_mise(r.warp, truth), 1e-3);
  EXPECT_FALSE(r.flag.has_value());
  expect_valid_warp(r.warp);
}

TEST(RegisterCurve, AlignedCurveStaysNearIdentity) {
  const Family f = Family::gaussian(0.03);
  const auto tmpl = bump_template(f);
  const auto id = identity_warp(0.0, 1.0, 4);
  std::mt19937_64 rng(23);
  std::normal_distribution<double> noise(0.0, std::sqrt(0.03));
  Curve c = warped_curve(tmpl, id, 50);
  for (double& y : c.values) y += noise(rng);
  RegistrationConfig cfg;
  cfg.lambda = 0.025;
  const auto r = register_curve(c, tmpl, cfg);
  double sup = 0.0;
  for (double t : linspace(0.0, 1.0, 501)) sup = std::max(sup, std::abs(r.warp(t) - t));
  EXPECT_LE(sup, 1e-2);
}

TEST(RegisterCurve, StrongPenaltyPreservesLength) {
  const Family f = Family::gaussian(0.03);
  const auto tmpl = bump_template(f);
  BsplineBasis basis(4, 3, 0.2, 0.7);
  const WarpingFunction truth{basis, greville_identity_beta(basis, 0.05, 0.95), IncompletenessMode::Full};
  const Curve c = warped_curve(tmpl, truth, 40);
  RegistrationConfig cfg;
  cfg.mode = IncompletenessMode::Full;
  cfg.lambda = 1e6;
  const auto r = register_curve(c, tmpl, cfg);
  EXPECT_LE(std::abs(r.warp.registered_length() - r.warp.observed_length()), 1e-4);
  expect_valid_warp(r.warp);
}

TEST(RegisterCurve, PartialCurveStretchedToTemplate) {
  const Family f = Family::gaussian(0.03);
  const auto tmpl = bump_template(f);
  BsplineBasis basis(4, 3, 0.0, 0.6);
  const WarpingFunction truth{basis, greville_identity_beta(basis, 0.0, 0.85), IncompletenessMode::Trailing};
  const Curve c = warped_curve(tmpl, truth, 40);
  RegistrationConfig cfg;
  cfg.mode = IncompletenessMode::Trailing;
  cfg.lambda = 0.0;
  const auto r = register_curve(c, tmpl, cfg);
  EXPECT_LE(warp_mise(r.warp, truth), 1e-4);
  expect_valid_warp(r.warp);
}

TEST(RegisterCurve, FlaggedDegenerateInputs) {
  const Family f = Family::gamma(4.0);
  Curve flat{"flat", linspace(0.0, 1.0, 10), std::vector<double>(10, 2.0)};
  const auto r = register_curve(flat, bump_template(f), RegistrationConfig{});
  ASSERT_TRUE(r.flag.has_value());
  EXPECT_EQ(*r.flag, Errc::DegenerateData);
  expect_valid_warp(r.warp);

  BsplineBasis basis(4);
  const TemplateFunction constant{Spline{basis, Eigen::VectorXd::Constant(4, 0.3)}, f};
  Curve wiggle{"w", linspace(0.0, 1.0, 10), {1, 2, 1, 2, 1, 2, 1, 2, 1, 2}};
  const auto r2 = register_curve(wiggle, constant, RegistrationConfig{});
  ASSERT_TRUE(r2.flag.has_value());
  EXPECT_EQ(*r2.flag, Errc::DegenerateTemplate);
}

TEST(RegisterCurve, InvalidConfig) {
  RegistrationConfig cfg;
  cfg.kh = 2;
  Curve c{"c", {0.0, 1.0}, {0.0, 1.0}};
  EXPECT_THROW(register_curve(c, bump_template(Family::gaussian(1.0)), cfg), Error);
  cfg.kh = 4;
  cfg.lambda = -1.0;
  EXPECT_THROW(register_curve(c, bump_template(Family::gaussian(1.0)), cfg), Error);
}

TEST(RegistrationObjective, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Family fams[] = {Family::gaussian(0.1), Family::gamma(5.0), Family::binomial()};
  for (const auto& f : fams) {
    const auto tmpl = bump_template(f, f.kind == FamilyKind::Binomial ? -0.5 : 0.0);
    for (auto mode : {IncompletenessMode::Full, IncompletenessMode::Trailing}) {
      Curve c{"c", linspace(0.1, 0.8, 25), {}};
      for (double t : c.times) {
        const double mu = tmpl.mean(t);
        c.values.push_back(f.kind == FamilyKind::Binomial ? (u(rng) < mu ? 1.0 : 0.0) : mu * (0.8 + 0.4 * u(rng)));
      }
      const int p = 5;
      BsplineBasis basis(p, 3, 0.1, 0.8);
      const auto cs = build_constraints(mode, p, 0.1, 0.8);
      const RegistrationObjective obj(c, tmpl, cs, basis, 0.3, mode);
      for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> b(p);
        for (double& v : b) v = 0.02 + 0.96 * u(rng);
        std::sort(b.begin(), b.end());
        Eigen::VectorXd full = Eigen::Map<Eigen::VectorXd>(b.data(), p);
        full = cs.expand(cs.restrict(full));
        if ((cs.slack(cs.restrict(full)).array() <= 1e-6).any()) continue;
        const Eigen::VectorXd x = cs.restrict(full);
        Eigen::VectorXd g(x.size());
        obj(x, &g);
        for (Eigen::Index k = 0; k < x.size(); ++k) {
          Eigen::VectorXd xp = x, xm = x;
          xp(k) += 1e-6;
          xm(k) -= 1e-6;
          const double fd = (obj(xp, nullptr) - obj(xm, nullptr)) / 2e-6;
          EXPECT_LE(std::abs(g(k) - fd), 1e-5 * std::max(1.0, std::abs(fd)));
        }
      }
    }
  }
}

class SimulatedRegistration : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    SimSetting s;
    s.n = 40;
    s.incompleteness = Incompleteness::Strong;
    s.seed = 5;
    auto [d, t] = simulate(s);
    ds_ = new FunctionalDataset(std::move(d));
    std::vector<double> alpha(t.alpha.data(), t.alpha.data() + t.alpha.size());
    tmpl_ = new TemplateFunction(fit_template(t.grid, alpha, Family::gaussian(0.03 + 1.0)));
  }
  static void TearDownTestSuite() {
    delete ds_;
    delete tmpl_;
  }
  static inline FunctionalDataset* ds_ = nullptr;
  static inline TemplateFunction* tmpl_ = nullptr;
};

TEST_F(SimulatedRegistration, WorkerCountDoesNotChangeResults) {
  RegistrationConfig cfg;
  cfg.mode = IncompletenessMode::Trailing;
  cfg.lambda = 0.025;
  cfg.workers = 1;
  const auto one = register_all(*ds_, {*tmpl_}, cfg);
  cfg.workers = 8;
  const auto eight = register_all(*ds_, {*tmpl_}, cfg);
  ASSERT_EQ(one.results.size(), eight.results.size());
  for (std::size_t i = 0; i < one.results.size(); ++i) {
    ASSERT_EQ(one.results[i].warp.beta.size(), eight.results[i].warp.beta.size());
    for (Eigen::Index k = 0; k < one.results[i].warp.beta.size(); ++k)
      EXPECT_EQ(one.results[i].warp.beta(k), eight.results[i].warp.beta(k));
  }
  EXPECT_EQ(one.failures, eight.failures);
}

TEST_F(SimulatedRegistration, SharedTemplateEqualsPerCurveCopies) {
  RegistrationConfig cfg;
  cfg.mode = IncompletenessMode::Trailing;
  cfg.lambda = 0.1;
  const auto shared = register_all(*ds_, {*tmpl_}, cfg);
  const auto copies = register_all(*ds_, std::vector<TemplateFunction>(ds_->size(), *tmpl_), cfg);
  for (std::size_t i = 0; i < ds_->size(); ++i) EXPECT_EQ(shared.results[i].warp.beta, copies.results[i].warp.beta);
}

TEST_F(SimulatedRegistration, SolutionsAreValidAndBeatIdentity) {
  for (auto mode : {IncompletenessMode::Complete, IncompletenessMode::Leading, IncompletenessMode::Trailing,
                    IncompletenessMode::Full}) {
    RegistrationConfig cfg;
    cfg.mode = mode;
    cfg.lambda = 0.025;
    const auto batch = register_all(*ds_, {*tmpl_}, cfg);
    for (std::size_t i = 0; i < ds_->size(); ++i) {
      const auto& r = batch.results[i];
      expect_valid_warp(r.warp);
      const Curve& c = ds_->curves[i];
      const auto id = identity_warp(c.t_min(), c.t_max(), cfg.kh, mode);
      const auto cs = build_constraints(mode, cfg.kh, c.t_min(), c.t_max());
      const RegistrationObjective obj(c, *tmpl_, cs, id.basis, cfg.lambda, mode);
      EXPECT_GE(r.objective, obj.full(id.beta, nullptr) - 1e-9);
    }
  }
}

TEST_F(SimulatedRegistration, LengthDistortionShrinksWithLambda) {
  double previous = std::numeric_limits<double>::infinity();
  for (double lambda : {0.0, 0.025, 0.1, 1.0}) {
    RegistrationConfig cfg;
    cfg.mode = IncompletenessMode::Full;
    cfg.lambda = lambda;
    const auto batch = register_all(*ds_, {*tmpl_}, cfg);
    double distortion = 0.0;
    for (const auto& r : batch.results)
      distortion += std::abs(r.warp.registered_length() - r.warp.observed_length()) / batch.results.size();
    EXPECT_LE(distortion, previous + 1e-9) << "lambda " << lambda;
    previous = distortion;
  }
}

TEST(RegisterAll, DegenerateCurveIsIsolated) {
  const Family f = Family::gamma(5.0);
  const auto tmpl = bump_template(f);
  FunctionalDataset ds;
  for (int i = 0; i < 5; ++i) {
    BsplineBasis basis(4);
    Eigen::VectorXd beta(4);
    beta << 0.0, 0.2 + 0.05 * i, 0.6, 1.0;
    ds.curves.push_back(warped_curve(tmpl, WarpingFunction{basis, beta, IncompletenessMode::Complete}, 30,
                                     "c" + std::to_string(i)));
  }
  ds.curves[2].values.assign(30, 1.5);
  const auto batch = register_all(ds, {tmpl}, RegistrationConfig{});
  EXPECT_EQ(batch.failures, std::vector<std::string>{"c2"});
  for (int i : {0, 1, 3, 4}) EXPECT_FALSE(batch.results[i].flag.has_value());
}

TEST(RegisterAll, TemplateCountMismatch) {
  FunctionalDataset ds;
  ds.curves.push_back({"a", {0.0, 1.0}, {0.0, 1.0}});
  ds.curves.push_back({"b", {0.0, 1.0}, {0.0, 1.0}});
  ds.curves.push_back({"c", {0.0, 1.0}, {0.0, 1.0}});
  const auto t = bump_template(Family::gaussian(1.0));
  EXPECT_THROW(register_all(ds, {t, t}, RegistrationConfig{}), Error);
}

TEST(ApplyWarps, ReplacesTimesAndClamps) {
  FunctionalDataset ds;
  ds.curves.push_back({"a", {0.0, 0.5, 1.0}, {1.0, 2.0, 3.0}});
  BsplineBasis basis(4);
  Eigen::VectorXd beta(4);
  beta << 0.0, 0.1, 0.2, 0.4;
  const auto out = apply_warps(ds, {WarpingFunction{basis, beta, IncompletenessMode::Leading}});
  EXPECT_EQ(out.curves[0].values, ds.curves[0].values);
  EXPECT_NEAR(out.curves[0].times[2], 0.4, 1e-15);
  EXPECT_NEAR(out.curves[0].times[1], 0.1 * 0.375 + 0.2 * 0.375 + 0.4 * 0.125, 1e-15);
}
