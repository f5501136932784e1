// Command-line front-end: register, gfpca, joint, simulate, bench, rerun.
//
// Exit codes: 0 success, 2 usage/configuration, 3 invalid data, 4 numerical
// failure. Chronological times are written in the input's raw units; internal
// times and all model grids live on the normalized domain [0,1].

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "regfpca/regfpca.hpp"

#ifndef REGFPCA_VERSION
#define REGFPCA_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace regfpca;

namespace {

struct Options {
  // data
  std::string input;
  std::string family = "gaussian";
  std::string mode = "complete";
  std::string domain;  // "lo,hi"
  std::optional<double> dispersion;
  std::string out;
  int workers = 1;
  // registration
  double lambda = 0.0;
  std::string template_src = "mean";
  int kh = 4;
  // gfpca
  std::optional<int> npc;
  double pve = 0.90;
  double drop = 0.02;
  int digits = 3;
  int grid = 101;
  int mean_basis = 8;
  int cov_basis = 10;
  int backfit = 2;
  // joint
  double delta_h = 1e-3;
  int max_iter = 20;
  double bench_delta_h = kBenchDeltaH;
  // simulation / bench
  int rank = 1;
  std::string incompleteness = "complete";
  std::string correlation = "none";
  std::uint64_t seed = 1;
  int n = 100;
  int d = 50;
  double rho = 0.6;
  int replications = 20;
  std::optional<double> bench_lambda;
  std::string fit_mode;  // bench: override the registration mode
  bool adaptive_k = false;
  // rerun
  std::string manifest;
};

class Timer {
 public:
  void mark(const std::string& phase) {
    const auto now = std::chrono::steady_clock::now();
    timings_[phase] = std::chrono::duration<double>(now - last_).count();
    last_ = now;
  }
  const json& timings() const { return timings_; }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
  json timings_ = json::object();
};

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot open '" + path + "'");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

std::string num(double v) { return format_double(v); }

std::ofstream open_out(const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw Error(Errc::IoError, "cannot write '" + path.string() + "'");
  return os;
}

Family make_family(const Options& o) {
  switch (parse_family(o.family)) {
    case FamilyKind::Gaussian: return Family::gaussian(o.dispersion.value_or(1.0));
    case FamilyKind::Gamma: return Family::gamma(o.dispersion.value_or(1.0));
    case FamilyKind::Binomial: return Family::binomial();
  }
  return Family::binomial();
}

FunctionalDataset load_input(const Options& o) {
  CsvOptions csv;
  csv.mode = parse_mode(o.mode);
  if (!o.domain.empty()) {
    const auto comma = o.domain.find(',');
    const auto lo = comma == std::string::npos ? std::nullopt : detail::parse_double(o.domain.substr(0, comma));
    const auto hi = comma == std::string::npos ? std::nullopt : detail::parse_double(o.domain.substr(comma + 1));
    if (!lo || !hi || !(*hi > *lo)) throw Error(Errc::InvalidConfig, "--domain expects lo,hi with lo < hi");
    csv.domain = std::make_pair(*lo, *hi);
  }
  FunctionalDataset ds = load_csv(o.input, csv);
  validate_dataset(ds);
  return ds;
}

/// Template from a `t,mu` CSV (response scale, raw time units) or the
/// marginal mean of the data.
TemplateFunction load_template(const Options& o, const FunctionalDataset& ds, const Family& fam) {
  if (o.template_src == "mean") return TemplateFunction{estimate_marginal_mean(ds, fam, o.mean_basis).mu_x, fam};
  std::ifstream in(o.template_src);
  if (!in) throw Error(Errc::IoError, "cannot open template '" + o.template_src + "'");
  std::string line;
  std::getline(in, line);
  const auto header = detail::split_csv_line(line);
  if (header.size() < 2 || header[0] != "t" || header[1] != "mu")
    throw Error(Errc::MissingColumn, "template file needs header `t,mu`");
  std::vector<double> t, lat;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    const auto tv = cells.size() >= 2 ? detail::parse_double(cells[0]) : std::nullopt;
    const auto mv = cells.size() >= 2 ? detail::parse_double(cells[1]) : std::nullopt;
    if (!tv || !mv) throw Error(Errc::NonNumericCell, "template row is not numeric");
    if (!fam.valid_observation(*mv) && fam.kind != FamilyKind::Binomial)
      throw Error(Errc::InvalidObservation, "template value outside the family's mean range");
    if (fam.kind == FamilyKind::Binomial && !(*mv > 0.0 && *mv < 1.0))
      throw Error(Errc::InvalidObservation, "binomial template means must lie in (0,1)");
    t.push_back(std::clamp(ds.from_raw(*tv), 0.0, 1.0));
    lat.push_back(fam.link(*mv));
  }
  if (t.size() < 4) throw Error(Errc::InvalidInput, "template needs at least 4 rows");
  for (std::size_t j = 1; j < t.size(); ++j)
    if (!(t[j] > t[j - 1])) throw Error(Errc::InvalidInput, "template times must be strictly increasing");
  return fit_template(t, lat, fam, 20);
}

/// Fills the Gaussian variance / Gamma shape from the data when not given.
Family resolve_dispersion(const Options& o, const FunctionalDataset& ds, Family fam, const TemplateFunction& tmpl) {
  if (o.dispersion || fam.kind == FamilyKind::Binomial) return fam;
  fam.dispersion = template_dispersion(ds, TemplateFunction{tmpl.latent, fam});
  return fam;
}

GfpcaConfig gfpca_config(const Options& o) {
  GfpcaConfig g;
  g.mean_basis = o.mean_basis;
  g.cov_basis = o.cov_basis;
  g.digits = o.digits > 0 ? std::optional<int>(o.digits) : std::nullopt;
  g.grid_size = o.grid;
  g.pve = o.pve;
  g.drop_below = o.drop;
  g.npc = o.npc;
  g.backfit_cycles = o.backfit;
  g.workers = o.workers;
  return g;
}

json config_json(const std::string& cmd, const Options& o) {
  json c;
  auto data = [&] {
    c["input"] = o.input;
    c["family"] = o.family;
    c["mode"] = o.mode;
    c["domain"] = o.domain;
    c["dispersion"] = o.dispersion ? json(*o.dispersion) : json(nullptr);
  };
  auto reg = [&] {
    c["lambda"] = o.lambda;
    c["template"] = o.template_src;
    c["kh"] = o.kh;
  };
  auto gf = [&] {
    c["npc"] = o.npc ? json(*o.npc) : json(nullptr);
    c["pve"] = o.pve;
    c["drop"] = o.drop;
    c["digits"] = o.digits;
    c["grid"] = o.grid;
    c["mean_basis"] = o.mean_basis;
    c["cov_basis"] = o.cov_basis;
    c["backfit_cycles"] = o.backfit;
  };
  auto sim = [&] {
    c["family"] = o.family;
    c["rank"] = o.rank;
    c["incompleteness"] = o.incompleteness;
    c["correlation"] = o.correlation;
    c["n"] = o.n;
    c["d"] = o.d;
    c["rho"] = o.rho;
  };
  if (cmd == "register") data(), reg();
  if (cmd == "gfpca") data(), gf();
  if (cmd == "joint") {
    data(), reg(), gf();
    c["delta_h"] = o.delta_h;
    c["max_iter"] = o.max_iter;
  }
  if (cmd == "simulate") sim();
  if (cmd == "bench") {
    sim();
    c["replications"] = o.replications;
    c["lambda"] = o.bench_lambda ? json(*o.bench_lambda) : json(nullptr);
    c["fit_mode"] = o.fit_mode;
    c["adaptive_k"] = o.adaptive_k;
    c["pve"] = o.pve;
    c["drop"] = o.drop;
    c["delta_h"] = o.bench_delta_h;
    c["max_iter"] = o.max_iter;
  }
  return c;
}

void write_manifest(const fs::path& dir, const std::string& cmd, const Options& o, const std::vector<std::string>& argv,
                    const Timer& timer, json extra) {
  json m;
  m["tool"] = "regfpca";
  m["version"] = REGFPCA_VERSION;
  m["command"] = cmd;
  m["config"] = config_json(cmd, o);
  m["seed"] = o.seed;
  json inputs = json::object();
  if (!o.input.empty()) inputs[o.input] = sha256_file(o.input);
  if (!o.template_src.empty() && o.template_src != "mean" && (cmd == "register" || cmd == "joint"))
    inputs[o.template_src] = sha256_file(o.template_src);
  m["inputs"] = inputs;
  m["result"] = std::move(extra);
  // Execution details that legitimately differ between reproducing runs.
  m["run"] = {{"argv", argv}, {"workers", o.workers}, {"out", o.out}, {"timings", timer.timings()}};
  auto os = open_out(dir / "manifest.json");
  os << m.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Output writers

void write_registration(const fs::path& dir, const FunctionalDataset& ds, const std::vector<WarpingFunction>& warps) {
  auto w = open_out(dir / "warpings.csv");
  w << "id,t_star,h_inv\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto h = eval_warp(warps[i], ds.curves[i].times);
    for (std::size_t j = 0; j < h.size(); ++j)
      w << ds.curves[i].id << ',' << num(ds.to_raw(ds.curves[i].times[j])) << ',' << num(std::clamp(h[j], 0.0, 1.0))
        << '\n';
  }
  auto b = open_out(dir / "beta.csv");
  const Eigen::Index p = warps.empty() ? 0 : warps.front().beta.size();
  b << "id,t_star_min,t_star_max";
  for (Eigen::Index k = 0; k < p; ++k) b << ",beta_" << k + 1;
  b << '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    b << ds.curves[i].id << ',' << num(warps[i].t_star_min()) << ',' << num(warps[i].t_star_max());
    for (Eigen::Index k = 0; k < p; ++k) b << ',' << num(warps[i].beta(k));
    b << '\n';
  }
  const FunctionalDataset reg = apply_warps(ds, warps);
  auto r = open_out(dir / "registered.csv");
  r << "id,t_internal,y\n";
  for (const auto& c : reg.curves)
    for (std::size_t j = 0; j < c.size(); ++j) r << c.id << ',' << num(c.times[j]) << ',' << num(c.values[j]) << '\n';
}

void write_template(const fs::path& dir, const TemplateFunction& tmpl, int m) {
  auto os = open_out(dir / "template.csv");
  os << "t,mu\n";
  for (double t : uniform_grid(m)) os << num(t) << ',' << num(tmpl.mean(t)) << '\n';
}

void write_failures(const fs::path& dir, const FunctionalDataset& ds, const RegistrationBatch& batch) {
  auto os = open_out(dir / "failures.csv");
  os << "id,code,message\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& r = batch.results[i];
    if (!r.flag) continue;
    std::string msg = r.message;
    std::replace(msg.begin(), msg.end(), ',', ';');
    os << ds.curves[i].id << ',' << to_string(*r.flag) << ',' << msg << '\n';
  }
}

bool numeric_failure(const RegistrationBatch& batch) {
  for (const auto& r : batch.results)
    if (r.flag && *r.flag != Errc::DegenerateData && *r.flag != Errc::DegenerateTemplate) return true;
  return false;
}

void write_model(const fs::path& dir, const GfpcaModel& m) {
  const auto k = m.psi.cols();
  auto f = open_out(dir / "fpcs.csv");
  f << 't';
  for (Eigen::Index c = 0; c < k; ++c) f << ",psi_" << c + 1;
  f << '\n';
  for (std::size_t j = 0; j < m.grid.size(); ++j) {
    f << num(m.grid[j]);
    for (Eigen::Index c = 0; c < k; ++c) f << ',' << num(m.psi(static_cast<Eigen::Index>(j), c));
    f << '\n';
  }
  auto s = open_out(dir / "scores.csv");
  s << "id";
  for (Eigen::Index c = 0; c < k; ++c) s << ",score_" << c + 1;
  s << '\n';
  for (std::size_t i = 0; i < m.ids.size(); ++i) {
    s << m.ids[i];
    for (Eigen::Index c = 0; c < k; ++c) s << ',' << num(m.scores(static_cast<Eigen::Index>(i), c));
    s << '\n';
  }
  auto mu = open_out(dir / "mean.csv");
  mu << "t,alpha,mu_Y\n";
  for (std::size_t j = 0; j < m.grid.size(); ++j)
    mu << num(m.grid[j]) << ',' << num(m.alpha(static_cast<Eigen::Index>(j))) << ','
       << num(m.mean.response(m.grid[j])) << '\n';
  auto e = open_out(dir / "eigenvalues.csv");
  e << "k,tau,pve,selected\n";
  for (Eigen::Index c = 0; c < m.full_tau.size(); ++c)
    e << c + 1 << ',' << num(m.full_tau(c)) << ',' << num(m.pve_report[static_cast<std::size_t>(c)]) << ','
      << (c < k ? 1 : 0) << '\n';
  auto cv = open_out(dir / "covariance.csv");
  cv << "s,t,response_cov,latent_cov\n";
  for (std::size_t a = 0; a < m.grid.size(); ++a)
    for (std::size_t b = 0; b < m.grid.size(); ++b)
      cv << num(m.grid[a]) << ',' << num(m.grid[b]) << ','
         << num(m.response_cov(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b))) << ','
         << num(m.latent_cov(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b))) << '\n';
}

json model_json(const GfpcaModel& m) {
  json j;
  j["num_fpcs"] = m.num_fpcs();
  j["dispersion"] = m.family.dispersion;
  j["flagged"] = m.flagged;
  j["warnings"] = m.warnings;
  return j;
}

// ---------------------------------------------------------------------------
// Commands

int cmd_register(const Options& o, const std::vector<std::string>& argv) {
  Timer timer;
  const fs::path dir(o.out);
  const FunctionalDataset ds = load_input(o);
  Family fam = make_family(o);
  for (const auto& c : ds.curves) check_observations(fam, c.values);
  TemplateFunction tmpl = load_template(o, ds, fam);
  fam = resolve_dispersion(o, ds, fam, tmpl);
  tmpl.family = fam;
  timer.mark("template");
  RegistrationConfig cfg;
  cfg.lambda = o.lambda;
  cfg.kh = o.kh;
  cfg.mode = ds.mode;
  cfg.workers = o.workers;
  const RegistrationBatch batch = register_all(ds, {tmpl}, cfg);
  timer.mark("registration");
  std::vector<WarpingFunction> warps;
  for (const auto& r : batch.results) warps.push_back(r.warp);
  write_registration(dir, ds, warps);
  write_template(dir, tmpl, 101);
  write_failures(dir, ds, batch);
  double obj = 0.0;
  for (const auto& r : batch.results) obj += r.objective;
  write_manifest(dir, "register", o, argv, timer,
                 {{"dispersion", fam.dispersion}, {"penalized_loglik", obj}, {"failures", batch.failures}});
  if (numeric_failure(batch)) {
    std::cerr << "registration failed for " << batch.failures.size() << " curve(s); see failures.csv\n";
    return 4;
  }
  return 0;
}

int cmd_gfpca(const Options& o, const std::vector<std::string>& argv) {
  Timer timer;
  const fs::path dir(o.out);
  const FunctionalDataset ds = load_input(o);
  GfpcaConfig g = gfpca_config(o);
  g.estimate_dispersion = !o.dispersion;
  const GfpcaModel m = fit_gfpca(ds, make_family(o), g);
  timer.mark("gfpca");
  write_model(dir, m);
  write_manifest(dir, "gfpca", o, argv, timer, model_json(m));
  return 0;
}

int cmd_joint(const Options& o, const std::vector<std::string>& argv) {
  Timer timer;
  const fs::path dir(o.out);
  const FunctionalDataset ds = load_input(o);
  JointConfig cfg;
  cfg.family = make_family(o);
  cfg.estimate_dispersion = !o.dispersion;
  cfg.delta_h = o.delta_h;
  cfg.max_iter = o.max_iter;
  cfg.kappa_var = o.pve;
  cfg.drop_below = o.drop;
  cfg.registration.lambda = o.lambda;
  cfg.registration.kh = o.kh;
  cfg.registration.mode = ds.mode;
  cfg.registration.workers = o.workers;
  cfg.gfpca = gfpca_config(o);
  cfg.gfpca.estimate_dispersion = !o.dispersion;
  if (o.template_src != "mean") cfg.initial_template = load_template(o, ds, cfg.family);
  const JointState st = run_joint(ds, cfg);
  timer.mark("joint");
  write_registration(dir, ds, st.warpings);
  write_model(dir, st.model);
  auto tr = open_out(dir / "trace.csv");
  tr << "iteration,warp_change,K,penalized_loglik\n";
  for (const auto& e : st.trace)
    tr << e.iteration << ',' << num(e.warp_change) << ',' << e.num_fpcs << ',' << num(e.penalized_loglik) << '\n';
  json extra = model_json(st.model);
  extra["converged"] = st.converged;
  extra["iterations"] = st.q;
  extra["registration_dispersion"] = st.registration_family.dispersion;
  extra["failures"] = st.failures;
  write_manifest(dir, "joint", o, argv, timer, extra);
  return 0;
}

SimSetting sim_setting(const Options& o) {
  SimSetting s;
  s.family = parse_family(o.family);
  s.rank = o.rank;
  s.incompleteness = parse_incompleteness(o.incompleteness);
  s.correlation = parse_correlation(o.correlation);
  s.n = o.n;
  s.d = o.d;
  s.seed = o.seed;
  s.rho = o.rho;
  s.validate();
  return s;
}

int cmd_simulate(const Options& o, const std::vector<std::string>& argv) {
  Timer timer;
  const fs::path dir(o.out);
  const SimSetting s = sim_setting(o);
  const auto [ds, truth] = simulate(s);
  timer.mark("simulate");
  {
    auto os = open_out(dir / "data.csv");
    write_curves_stream(ds, os);
  }
  const fs::path td = dir / "truth";
  auto w = open_out(td / "warpings.csv");
  w << "id,t,h\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto h = eval_warp(truth.warps[i], truth.grid);
    for (std::size_t j = 0; j < h.size(); ++j) w << ds.curves[i].id << ',' << num(truth.grid[j]) << ',' << num(h[j]) << '\n';
  }
  auto hi = open_out(td / "h_inv.csv");
  hi << "id,t_star,h_inv\n";
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t j = 0; j < ds.curves[i].size(); ++j)
      hi << ds.curves[i].id << ',' << num(ds.curves[i].times[j]) << ',' << num(truth.h_inv[i][j]) << '\n';
  auto p = open_out(td / "psi.csv");
  p << 't';
  for (int k = 0; k < s.rank; ++k) p << ",psi_" << k + 1;
  p << '\n';
  for (std::size_t j = 0; j < truth.grid.size(); ++j) {
    p << num(truth.grid[j]);
    for (int k = 0; k < s.rank; ++k) p << ',' << num(truth.psi(static_cast<Eigen::Index>(j), k));
    p << '\n';
  }
  auto t = open_out(td / "tau.csv");
  t << "k,tau\n";
  for (Eigen::Index k = 0; k < truth.tau.size(); ++k) t << k + 1 << ',' << num(truth.tau(k)) << '\n';
  auto c = open_out(td / "cutoffs.csv");
  c << "id,cutoff,registered_length\n";
  for (std::size_t i = 0; i < ds.size(); ++i)
    c << ds.curves[i].id << ',' << num(truth.cutoffs[i]) << ',' << num(truth.registered_lengths[i]) << '\n';
  auto sc = open_out(td / "scores.csv");
  sc << "id";
  for (int k = 0; k < s.rank; ++k) sc << ",score_" << k + 1;
  sc << '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    sc << ds.curves[i].id;
    for (int k = 0; k < s.rank; ++k) sc << ',' << num(truth.scores(static_cast<Eigen::Index>(i), k));
    sc << '\n';
  }
  auto lat = open_out(td / "latent.csv");
  lat << "id,t,x\n";
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t j = 0; j < truth.grid.size(); ++j)
      lat << ds.curves[i].id << ',' << num(truth.grid[j]) << ','
          << num(truth.latent(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))) << '\n';
  write_manifest(dir, "simulate", o, argv, timer,
                 {{"mode", std::string(to_string(s.mode()))}, {"domain", "0,1"}, {"curves", ds.size()}});
  return 0;
}

int cmd_bench(const Options& o, const std::vector<std::string>& argv) {
  Timer timer;
  const fs::path dir(o.out);
  const SimSetting s = sim_setting(o);
  BenchMethod method;
  method.fix_rank = !o.adaptive_k;
  method.lambda = o.bench_lambda;
  if (!o.fit_mode.empty()) method.mode_override = parse_mode(o.fit_mode);
  method.joint.delta_h = o.bench_delta_h;
  method.joint.max_iter = o.max_iter;
  method.joint.kappa_var = o.pve;
  method.joint.drop_below = o.drop;
  const BenchTable table = run_benchmark(s, method, o.replications, o.workers);
  timer.mark("bench");
  {
    auto os = open_out(dir / "metrics.csv");
    write_bench_csv(table, os);
  }
  {
    auto os = open_out(dir / "summary.json");
    os << bench_summary_json(table).dump(2) << '\n';
  }
  write_manifest(dir, "bench", o, argv, timer, {{"failed", table.failed}});
  return 0;
}

int run_cli(std::vector<std::string> args);

int cmd_rerun(const Options& o) {
  std::ifstream in(o.manifest);
  if (!in) throw Error(Errc::IoError, "cannot open manifest '" + o.manifest + "'");
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(Errc::InvalidInput, std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!m.contains("run") || !m["run"].contains("argv")) throw Error(Errc::InvalidInput, "manifest lacks run.argv");
  auto argv = m["run"]["argv"].get<std::vector<std::string>>();
  if (!o.out.empty()) {
    bool replaced = false;
    for (std::size_t i = 0; i < argv.size(); ++i) {
      if (argv[i] == "--out" && i + 1 < argv.size()) {
        argv[i + 1] = o.out;
        replaced = true;
      } else if (argv[i].rfind("--out=", 0) == 0) {
        argv[i] = "--out=" + o.out;
        replaced = true;
      }
    }
    if (!replaced) {
      argv.push_back("--out");
      argv.push_back(o.out);
    }
  }
  return run_cli(argv);
}

int exit_code(Errc e) {
  if (e == Errc::InvalidConfig) return 2;
  if (is_data_error(e)) return 3;
  return 4;
}

int run_cli(std::vector<std::string> args) {
  CLI::App app{"Registration and generalized FPCA for incomplete functional data", "regfpca"};
  app.require_subcommand(1);
  app.set_version_flag("--version", REGFPCA_VERSION);
  Options o;

  auto data_flags = [&](CLI::App* c) {
    c->add_option("--input", o.input, "Long-format CSV with columns id,t,y")->required()->check(CLI::ExistingFile);
    c->add_option("--family", o.family, "Response family")
        ->required()
        ->check(CLI::IsMember({"gaussian", "gamma", "binomial"}));
    c->add_option("--mode", o.mode, "Incompleteness mode")
        ->check(CLI::IsMember({"complete", "leading", "trailing", "full"}));
    c->add_option("--domain", o.domain, "Raw time domain lo,hi used for normalization (default: pooled range)");
    c->add_option("--dispersion", o.dispersion, "Gaussian variance or Gamma shape (default: estimated)")
        ->check(CLI::PositiveNumber);
    c->add_option("--workers", o.workers, "Worker threads")->check(CLI::Range(1, 256));
    c->add_option("--out", o.out, "Output directory")->required();
  };
  auto reg_flags = [&](CLI::App* c, bool template_required) {
    c->add_option("--lambda", o.lambda, "Domain-length penalty weight")->check(CLI::NonNegativeNumber);
    auto* t = c->add_option("--template", o.template_src, "Template CSV (t,mu) or 'mean'");
    if (template_required) t->required();
    c->add_option("--kh", o.kh, "Warping basis size")->check(CLI::Range(3, 50));
  };
  auto gf_flags = [&](CLI::App* c) {
    c->add_option("--npc", o.npc, "Fixed number of FPCs")->check(CLI::Range(1, 1000));
    c->add_option("--pve", o.pve, "Explained-variance threshold")->check(CLI::Range(1e-6, 1.0));
    c->add_option("--drop", o.drop, "Drop FPCs explaining less than this share")->check(CLI::Range(0.0, 1.0));
    c->add_option("--digits", o.digits, "Binning precision in decimal places (0: no binning)")->check(CLI::Range(0, 6));
    c->add_option("--grid", o.grid, "Output grid size")->check(CLI::Range(3, 5001));
    c->add_option("--mean-basis", o.mean_basis, "Mean basis size")->check(CLI::Range(4, 100));
    c->add_option("--cov-basis", o.cov_basis, "Marginal covariance basis size")->check(CLI::Range(4, 40));
    c->add_option("--backfit", o.backfit, "Score/mean backfitting cycles")->check(CLI::Range(0, 100));
  };
  auto sim_flags = [&](CLI::App* c) {
    c->add_option("--family", o.family, "Simulated family")->required()->check(CLI::IsMember({"gaussian", "gamma"}));
    c->add_option("--rank", o.rank, "Amplitude rank")->check(CLI::IsMember({1, 3, 4}));
    c->add_option("--incompleteness", o.incompleteness, "Incompleteness setting")
        ->check(CLI::IsMember({"complete", "weak", "strong"}));
    c->add_option("--correlation", o.correlation, "Correlation setting")->check(CLI::IsMember({"none", "ap", "ai"}));
    c->add_option("--seed", o.seed, "Random seed");
    c->add_option("--n", o.n, "Number of curves")->check(CLI::Range(2, 1000000));
    c->add_option("--d", o.d, "Points per complete curve")->check(CLI::Range(5, 100000));
    c->add_option("--rho", o.rho, "Copula correlation magnitude")->check(CLI::Range(0.0, 0.99));
    c->add_option("--out", o.out, "Output directory")->required();
  };

  auto* reg = app.add_subcommand("register", "Register curves to a template");
  data_flags(reg);
  reg_flags(reg, true);
  reg->add_option("--mean-basis", o.mean_basis, "Mean basis size for --template mean")->check(CLI::Range(4, 100));
  auto* gf = app.add_subcommand("gfpca", "Generalized FPCA of (registered) curves");
  data_flags(gf);
  gf_flags(gf);
  auto* jt = app.add_subcommand("joint", "Joint registration and GFPCA");
  data_flags(jt);
  reg_flags(jt, false);
  gf_flags(jt);
  jt->add_option("--delta-h", o.delta_h, "Convergence tolerance (mean squared warp change)")
      ->check(CLI::PositiveNumber);
  jt->add_option("--max-iter", o.max_iter, "Maximum joint iterations")->check(CLI::Range(1, 1000));
  auto* sm = app.add_subcommand("simulate", "Simulate a benchmark dataset");
  sim_flags(sm);
  auto* bn = app.add_subcommand("bench", "Run a seeded simulation benchmark");
  sim_flags(bn);
  bn->add_option("--replications", o.replications, "Number of replications")->check(CLI::Range(1, 100000));
  bn->add_option("--lambda", o.bench_lambda, "Penalty weight (default 0.025 gaussian, 1 gamma)")
      ->check(CLI::NonNegativeNumber);
  bn->add_option("--fit-mode", o.fit_mode, "Registration mode override")
      ->check(CLI::IsMember({"complete", "leading", "trailing", "full"}));
  bn->add_flag("--adaptive-k", o.adaptive_k, "Select K from the data instead of the true rank");
  bn->add_option("--pve", o.pve, "Explained-variance threshold")->check(CLI::Range(1e-6, 1.0));
  bn->add_option("--drop", o.drop, "Drop threshold")->check(CLI::Range(0.0, 1.0));
  bn->add_option("--delta-h", o.bench_delta_h, "Joint convergence tolerance")->check(CLI::PositiveNumber);
  bn->add_option("--max-iter", o.max_iter, "Joint iteration cap")->check(CLI::Range(1, 1000));
  bn->add_option("--workers", o.workers, "Parallel replications")->check(CLI::Range(1, 256));
  auto* rr = app.add_subcommand("rerun", "Re-run the command recorded in a manifest");
  rr->add_option("--manifest", o.manifest, "manifest.json of a previous run")->required()->check(CLI::ExistingFile);
  rr->add_option("--out", o.out, "Output directory (default: the recorded one)");

  const std::vector<std::string> original = args;
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (reg->parsed()) return cmd_register(o, original);
    if (gf->parsed()) return cmd_gfpca(o, original);
    if (jt->parsed()) return cmd_joint(o, original);
    if (sm->parsed()) return cmd_simulate(o, original);
    if (bn->parsed()) return cmd_bench(o, original);
    if (rr->parsed()) return cmd_rerun(o);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(std::move(args));
}
