#pragma once

// Simulation settings with known latent process, warpings and trailing
// cut-offs, the four benchmark metrics, and a seeded replication harness.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "regfpca/bspline.hpp"
#include "regfpca/error.hpp"
#include "regfpca/expfam.hpp"
#include "regfpca/funcdata.hpp"
#include "regfpca/gfpca.hpp"
#include "regfpca/joint.hpp"
#include "regfpca/parallel.hpp"

namespace regfpca {

enum class Incompleteness { Complete, Weak, Strong };
enum class Correlation { None, AmpPhaseNegative, AmpIncompletenessPositive };

inline std::string_view to_string(Incompleteness v) {
  switch (v) {
    case Incompleteness::Complete: return "complete";
    case Incompleteness::Weak: return "weak";
    case Incompleteness::Strong: return "strong";
  }
  return "complete";
}

inline Incompleteness parse_incompleteness(std::string_view s) {
  if (s == "complete") return Incompleteness::Complete;
  if (s == "weak") return Incompleteness::Weak;
  if (s == "strong") return Incompleteness::Strong;
  throw Error(Errc::InvalidConfig, "unknown incompleteness '" + std::string(s) + "'");
}

inline std::string_view to_string(Correlation v) {
  switch (v) {
    case Correlation::None: return "none";
    case Correlation::AmpPhaseNegative: return "ap";
    case Correlation::AmpIncompletenessPositive: return "ai";
  }
  return "none";
}

inline Correlation parse_correlation(std::string_view s) {
  if (s == "none") return Correlation::None;
  if (s == "ap") return Correlation::AmpPhaseNegative;
  if (s == "ai") return Correlation::AmpIncompletenessPositive;
  throw Error(Errc::InvalidConfig, "unknown correlation '" + std::string(s) + "'");
}

struct SimSetting {
  FamilyKind family = FamilyKind::Gaussian;
  int rank = 1;
  Incompleteness incompleteness = Incompleteness::Complete;
  Correlation correlation = Correlation::None;
  int n = 100;
  int d = 50;
  std::uint64_t seed = 1;
  double rho = 0.6;  // copula correlation magnitude for the correlated settings
  double gaussian_variance = 0.03;
  double gamma_shape = 5.0;

  void validate() const {
    if (rank != 1 && rank != 3 && rank != 4) throw Error(Errc::InvalidConfig, "rank must be 1, 3 or 4");
    if (family == FamilyKind::Binomial) throw Error(Errc::InvalidConfig, "simulation supports gaussian and gamma");
    if (n < 2 || d < 2) throw Error(Errc::InvalidConfig, "N and D must be >= 2");
    if (!(rho >= 0.0 && rho < 1.0)) throw Error(Errc::InvalidConfig, "rho must be in [0,1)");
  }

  IncompletenessMode mode() const {
    return incompleteness == Incompleteness::Complete ? IncompletenessMode::Complete : IncompletenessMode::Trailing;
  }
};

inline std::vector<double> simulation_tau(int rank) {
  switch (rank) {
    case 1: return {1.0};
    case 3: return {0.7, 0.25, 0.05};
    case 4: return {0.4, 0.3, 0.2, 0.1};
  }
  throw Error(Errc::InvalidConfig, "rank must be 1, 3 or 4");
}

/// Normal density with mean 0.45 and standard deviation 0.2.
inline double simulation_alpha(double t) {
  const double z = (t - 0.45) / 0.2;
  return std::exp(-0.5 * z * z) / (0.2 * std::sqrt(2.0 * std::numbers::pi));
}

/// Orthonormal shifted Legendre polynomial of degree k on [0,1].
inline double shifted_legendre(int k, double t) {
  const double x = 2.0 * t - 1.0;
  double p0 = 1.0, p1 = x;
  if (k == 0) return 1.0;
  for (int n = 1; n < k; ++n) {
    const double p2 = ((2.0 * n + 1.0) * x * p1 - n * p0) / (n + 1.0);
    p0 = p1;
    p1 = p2;
  }
  return std::sqrt(2.0 * k + 1.0) * p1;
}

/// True eigenfunctions psi_1..psi_rank (degrees 1..rank) on `grid`.
inline Eigen::MatrixXd simulation_psi(int rank, std::span<const double> grid) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(grid.size()), rank);
  for (std::size_t j = 0; j < grid.size(); ++j)
    for (int k = 0; k < rank; ++k) out(static_cast<Eigen::Index>(j), k) = shifted_legendre(k + 1, grid[j]);
  return out;
}

struct SimTruth {
  std::vector<double> grid;  // regular internal-time grid, length D
  Eigen::MatrixXd latent;    // N x D, X_i on grid
  Eigen::MatrixXd psi;       // D x rank
  Eigen::VectorXd tau;
  Eigen::VectorXd alpha;     // D
  Eigen::MatrixXd scores;    // N x rank
  std::vector<WarpingFunction> warps;  // internal -> chronological, on [0,1]
  std::vector<double> cutoffs;         // chronological cut-off (1 when complete)
  std::vector<std::vector<double>> h_inv;  // true internal time at each kept observation
  std::vector<double> registered_lengths;
};

namespace detail {

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

}  // namespace detail

/// Draws one dataset. Observation times are the warped regular grid; under
/// trailing incompleteness samples after a uniform chronological cut-off are
/// dropped (at least four are kept).
inline std::pair<FunctionalDataset, SimTruth> simulate(const SimSetting& s) {
  s.validate();
  std::mt19937_64 rng(s.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  SimTruth truth;
  truth.grid.resize(static_cast<std::size_t>(s.d));
  for (int j = 0; j < s.d; ++j) truth.grid[static_cast<std::size_t>(j)] = static_cast<double>(j) / (s.d - 1);
  const std::vector<double> tau = simulation_tau(s.rank);
  truth.tau = Eigen::Map<const Eigen::VectorXd>(tau.data(), s.rank);
  truth.psi = simulation_psi(s.rank, truth.grid);
  truth.alpha.resize(s.d);
  for (int j = 0; j < s.d; ++j) truth.alpha(j) = simulation_alpha(truth.grid[static_cast<std::size_t>(j)]);
  truth.latent.resize(s.n, s.d);
  truth.scores.resize(s.n, s.rank);

  const double cut_lo = s.incompleteness == Incompleteness::Weak ? 0.6 : 0.3;
  const BsplineBasis warp_basis(4, 3, 0.0, 1.0);

  FunctionalDataset ds;
  ds.mode = s.mode();
  ds.raw_domain = {0.0, 1.0};
  for (int i = 0; i < s.n; ++i) {
    // Driver variables: z_amp drives the first score; z_link drives either the
    // first warp increment or the cut-off, depending on the setting.
    const double z_amp = normal(rng);
    const double z_free = normal(rng);
    double rho = 0.0;
    if (s.correlation == Correlation::AmpPhaseNegative) rho = -s.rho;
    if (s.correlation == Correlation::AmpIncompletenessPositive) rho = s.rho;
    const double z_link = rho * z_amp + std::sqrt(1.0 - rho * rho) * z_free;

    for (int k = 0; k < s.rank; ++k)
      truth.scores(i, k) = std::sqrt(tau[static_cast<std::size_t>(k)]) * (k == 0 ? z_amp : normal(rng));
    truth.latent.row(i) = (truth.alpha + truth.psi * truth.scores.row(i).transpose()).transpose();

    Eigen::VectorXd inc(3);
    for (int k = 0; k < 3; ++k) inc(k) = unif(rng);
    if (s.correlation == Correlation::AmpPhaseNegative) inc(0) = detail::normal_cdf(z_link);
    Eigen::VectorXd beta(4);
    beta(0) = 0.0;
    for (int k = 0; k < 3; ++k) beta(k + 1) = beta(k) + inc(k);
    beta /= beta(3);
    beta(3) = 1.0;
    WarpingFunction w{warp_basis, beta, IncompletenessMode::Complete};

    double cutoff = 1.0;
    const double u_cut = s.correlation == Correlation::AmpIncompletenessPositive ? detail::normal_cdf(z_link) : unif(rng);
    if (s.incompleteness != Incompleteness::Complete) cutoff = cut_lo + (1.0 - cut_lo) * u_cut;

    Curve c;
    c.id = "c" + std::to_string(i + 1);
    std::vector<double> h_inv;
    const auto chrono = eval_warp(w, truth.grid);
    for (int j = 0; j < s.d; ++j) {
      const double tc = std::clamp(chrono[static_cast<std::size_t>(j)], 0.0, 1.0);
      if (tc > cutoff && j >= 4) break;
      const double x = truth.latent(i, j);
      double y = 0.0;
      if (s.family == FamilyKind::Gaussian) {
        y = x + std::sqrt(s.gaussian_variance) * normal(rng);
      } else {
        std::gamma_distribution<double> gd(s.gamma_shape, std::exp(x) / s.gamma_shape);
        y = gd(rng);
        if (!(y > 0.0)) y = std::numeric_limits<double>::min();
      }
      c.times.push_back(tc);
      c.values.push_back(y);
      h_inv.push_back(truth.grid[static_cast<std::size_t>(j)]);
    }
    truth.registered_lengths.push_back(h_inv.back() - h_inv.front());
    truth.h_inv.push_back(std::move(h_inv));
    truth.cutoffs.push_back(cutoff);
    truth.warps.push_back(std::move(w));
    ds.curves.push_back(std::move(c));
  }
  return {std::move(ds), std::move(truth)};
}

// ---------------------------------------------------------------------------
// Metrics

namespace detail {

inline double trapezoid(std::span<const double> t, std::span<const double> f) {
  double s = 0.0;
  for (std::size_t j = 0; j + 1 < t.size(); ++j) s += 0.5 * (t[j + 1] - t[j]) * (f[j] + f[j + 1]);
  return s;
}

inline double mean_integrated_sq(const std::vector<std::vector<double>>& grids,
                                 const std::vector<std::vector<double>>& a,
                                 const std::vector<std::vector<double>>& b) {
  if (grids.size() != a.size() || grids.size() != b.size() || grids.empty())
    throw Error(Errc::GridMismatch, "metric inputs must cover the same curves");
  double total = 0.0;
  for (std::size_t i = 0; i < grids.size(); ++i) {
    if (a[i].size() != grids[i].size() || b[i].size() != grids[i].size())
      throw Error(Errc::GridMismatch, "curve " + std::to_string(i) + " values do not match its grid");
    std::vector<double> sq(grids[i].size());
    for (std::size_t j = 0; j < sq.size(); ++j) sq[j] = (a[i][j] - b[i][j]) * (a[i][j] - b[i][j]);
    total += trapezoid(grids[i], sq);
  }
  return total / static_cast<double>(grids.size());
}

}  // namespace detail

/// Mean over curves of the trapezoid-integrated squared difference between
/// true and fitted response-scale curves on each chronological grid.
inline double mise_y(const std::vector<std::vector<double>>& grids, const std::vector<std::vector<double>>& truth,
                     const std::vector<std::vector<double>>& fitted) {
  return detail::mean_integrated_sq(grids, truth, fitted);
}

/// Same as mise_y, for true and estimated inverse warping values.
inline double mise_h(const std::vector<std::vector<double>>& grids, const std::vector<std::vector<double>>& truth,
                     const std::vector<std::vector<double>>& estimated) {
  return detail::mean_integrated_sq(grids, truth, estimated);
}

/// Span overlap (1/p_A) ||U_A' U_B||_F^2 with U the left singular vectors.
inline double lv_psi(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows()) throw Error(Errc::GridMismatch, "bases must share the grid");
  if (a.cols() < 1 || b.cols() < 1) throw Error(Errc::DegenerateBasis, "empty basis");
  if (a.rows() <= std::max(a.cols(), b.cols())) throw Error(Errc::DegenerateBasis, "more columns than grid points");
  for (const Eigen::MatrixXd* m : {&a, &b}) {
    if (!m->allFinite()) throw Error(Errc::NonFinite, "basis has non-finite entries");
    for (Eigen::Index k = 0; k < m->cols(); ++k)
      if (m->col(k).cwiseAbs().maxCoeff() == 0.0) throw Error(Errc::DegenerateBasis, "basis has a zero column");
  }
  const Eigen::JacobiSVD<Eigen::MatrixXd> sa(a, Eigen::ComputeThinU), sb(b, Eigen::ComputeThinU);
  const double lv = (sa.matrixU().transpose() * sb.matrixU()).squaredNorm() / static_cast<double>(a.cols());
  return std::clamp(lv, 0.0, 1.0);
}

inline double mse_d(std::span<const double> truth, std::span<const double> estimated) {
  if (truth.size() != estimated.size() || truth.empty()) throw Error(Errc::LengthMismatch, "length vectors differ");
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) s += (truth[i] - estimated[i]) * (truth[i] - estimated[i]);
  return s / static_cast<double>(truth.size());
}

// ---------------------------------------------------------------------------
// Benchmark harness

struct Metrics {
  double mise_y = 0.0;
  double mise_h = 0.0;
  double one_minus_lv = 0.0;
  double mse_d = 0.0;
};

/// Metrics of a joint fit against the simulation truth.
inline Metrics evaluate_fit(const FunctionalDataset& ds, const SimTruth& truth, const JointState& st) {
  std::vector<std::vector<double>> grids, y_true, y_fit, h_true, h_fit;
  std::vector<double> len_est;
  const Family& fam = st.model.family;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Curve& c = ds.curves[i];
    const auto h = eval_warp(st.warpings[i], c.times);
    std::vector<double> hc(h.size());
    for (std::size_t j = 0; j < h.size(); ++j) hc[j] = std::clamp(h[j], 0.0, 1.0);
    const Eigen::VectorXd lat = st.model.latent_curve(i, hc);
    std::vector<double> yt(c.size()), yf(c.size());
    for (std::size_t j = 0; j < c.size(); ++j) {
      yt[j] = fam.response(truth.latent(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
      yf[j] = fam.response(lat(static_cast<Eigen::Index>(j)));
    }
    grids.push_back(c.times);
    y_true.push_back(std::move(yt));
    y_fit.push_back(std::move(yf));
    h_true.push_back(truth.h_inv[i]);
    h_fit.push_back(hc);
    len_est.push_back(hc.back() - hc.front());
  }
  Metrics m;
  m.mise_y = mise_y(grids, y_true, y_fit);
  m.mise_h = mise_h(grids, h_true, h_fit);
  m.one_minus_lv = 1.0 - lv_psi(simulation_psi(static_cast<int>(truth.tau.size()), st.model.grid), st.model.psi);
  m.mse_d = mse_d(truth.registered_lengths, len_est);
  return m;
}

/// MISE_h of the identity warp (no registration) against the truth.
inline double identity_mise_h(const FunctionalDataset& ds, const SimTruth& truth) {
  std::vector<std::vector<double>> grids, h_true, h_id;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    grids.push_back(ds.curves[i].times);
    h_true.push_back(truth.h_inv[i]);
    h_id.push_back(ds.curves[i].times);
  }
  return mise_h(grids, h_true, h_id);
}

/// Benchmark runs iterate until the mean squared per-point warp change is
/// below 1e-6, i.e. an RMS change of 1e-3 of the unit domain.
inline constexpr double kBenchDeltaH = 1e-6;

struct BenchMethod {
  JointConfig joint = [] {
    JointConfig c;
    c.delta_h = kBenchDeltaH;
    return c;
  }();
  std::optional<IncompletenessMode> mode_override;  // default: the setting's mode
  bool fix_rank = true;  // force K to the true rank
  std::optional<double> lambda;  // default: 0.025 Gaussian, 1 Gamma
};

/// Joint configuration used for one simulation setting.
inline JointConfig bench_joint_config(const SimSetting& s, const BenchMethod& m) {
  JointConfig cfg = m.joint;
  cfg.family = s.family == FamilyKind::Gamma ? Family::gamma(s.gamma_shape) : Family::gaussian(s.gaussian_variance);
  cfg.registration.mode = m.mode_override.value_or(s.mode());
  cfg.registration.lambda = m.lambda.value_or(s.family == FamilyKind::Gamma ? 1.0 : 0.025);
  cfg.registration.workers = 1;
  cfg.gfpca.workers = 1;
  if (m.fix_rank) cfg = fixed_num_fpcs_override(cfg, s.rank);
  return cfg;
}

struct BenchRow {
  int replication = 0;
  std::optional<Metrics> metrics;
  std::string reason;  // set when the replication failed
  double identity_mise_h = 0.0;
};

struct BenchTable {
  std::vector<BenchRow> rows;
  Metrics median;
  int failed = 0;
};

namespace detail {

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

}  // namespace detail

inline double median_of(const BenchTable& t, double Metrics::*field) {
  std::vector<double> v;
  for (const auto& r : t.rows)
    if (r.metrics) v.push_back((*r.metrics).*field);
  return detail::median(std::move(v));
}

/// Runs `replications` seeded replications (seed + r) in parallel; rows keep
/// replication order and do not depend on the worker count.
inline BenchTable run_benchmark(const SimSetting& setting, const BenchMethod& method, int replications = 20,
                                int workers = 1) {
  if (replications < 1) throw Error(Errc::InvalidConfig, "replications must be >= 1");
  setting.validate();
  BenchTable table;
  table.rows.resize(static_cast<std::size_t>(replications));
  parallel_for(static_cast<std::size_t>(replications), workers, [&](std::size_t r) {
    SimSetting s = setting;
    s.seed = setting.seed + r;
    BenchRow& row = table.rows[r];
    row.replication = static_cast<int>(r) + 1;
    try {
      auto [ds, truth] = simulate(s);
      row.identity_mise_h = identity_mise_h(ds, truth);
      const JointState st = run_joint(ds, bench_joint_config(s, method));
      row.metrics = evaluate_fit(ds, truth, st);
    } catch (const std::exception& e) {
      row.reason = e.what();
    }
  });
  for (const auto& r : table.rows)
    if (!r.metrics) ++table.failed;
  table.median = {median_of(table, &Metrics::mise_y), median_of(table, &Metrics::mise_h),
                  median_of(table, &Metrics::one_minus_lv), median_of(table, &Metrics::mse_d)};
  return table;
}

inline void write_bench_csv(const BenchTable& t, std::ostream& os) {
  os << "replication,mise_y,mise_h,one_minus_lv,mse_d\n";
  auto cell = [](double v) { return std::isfinite(v) ? format_double(v) : std::string("NA"); };
  for (const auto& r : t.rows) {
    os << r.replication;
    if (r.metrics)
      os << ',' << cell(r.metrics->mise_y) << ',' << cell(r.metrics->mise_h) << ',' << cell(r.metrics->one_minus_lv)
         << ',' << cell(r.metrics->mse_d) << '\n';
    else
      os << ",NA,NA,NA,NA\n";
  }
  os << "median," << cell(t.median.mise_y) << ',' << cell(t.median.mise_h) << ',' << cell(t.median.one_minus_lv) << ','
     << cell(t.median.mse_d) << '\n';
}

inline nlohmann::json bench_summary_json(const BenchTable& t) {
  nlohmann::json j;
  auto num = [](double v) -> nlohmann::json { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  j["replications"] = t.rows.size();
  j["failed"] = t.failed;
  j["median"] = {{"mise_y", num(t.median.mise_y)},
                 {"mise_h", num(t.median.mise_h)},
                 {"one_minus_lv", num(t.median.one_minus_lv)},
                 {"mse_d", num(t.median.mse_d)}};
  std::vector<double> base;
  for (const auto& r : t.rows) base.push_back(r.identity_mise_h);
  j["median_identity_mise_h"] = num(detail::median(base));
  nlohmann::json failures = nlohmann::json::array();
  for (const auto& r : t.rows)
    if (!r.metrics) failures.push_back({{"replication", r.replication}, {"reason", r.reason}});
  j["failures"] = failures;
  return j;
}

}  // namespace regfpca
