#pragma once

// Joint registration and GFPCA: register to an initial template, then
// alternate GFPCA of the registered curves with re-registration of each curve
// to its own GFPCA representation until the warpings stabilize.

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

#include "regfpca/error.hpp"
#include "regfpca/expfam.hpp"
#include "regfpca/funcdata.hpp"
#include "regfpca/gfpca.hpp"
#include "regfpca/registration.hpp"

namespace regfpca {

struct JointConfig {
  Family family = Family::gaussian(1.0);
  /// Estimate the registration dispersion against the initial template.
  bool estimate_dispersion = true;
  double delta_h = 1e-3;  // mean squared warp change per observation point
  int max_iter = 20;
  double kappa_var = 0.90;
  double drop_below = 0.02;
  RegistrationConfig registration{};
  GfpcaConfig gfpca{};
  std::optional<TemplateFunction> initial_template;  // unset: marginal mean of the data
  bool reduced_accuracy_intermediate = true;
  bool warm_start = true;  // start each re-registration from the previous warp
  int template_basis = 20;

  void validate() const {
    if (!(delta_h > 0.0)) throw Error(Errc::InvalidConfig, "delta_h must be > 0");
    if (max_iter < 1) throw Error(Errc::InvalidConfig, "max_iter must be >= 1");
    if (!(kappa_var > 0.0 && kappa_var <= 1.0)) throw Error(Errc::InvalidConfig, "kappa_var must be in (0,1]");
    registration.validate();
  }
};

/// Forces the number of FPCs in every GFPCA pass.
inline JointConfig fixed_num_fpcs_override(JointConfig cfg, int k) {
  if (k < 1) throw Error(Errc::InvalidConfig, "forced FPC count must be >= 1");
  cfg.gfpca.npc = k;
  return cfg;
}

struct JointTraceEntry {
  int iteration = 0;
  double warp_change = 0.0;  // sum of squared changes of h^-1 at observed points
  int num_fpcs = 0;          // 0 before the first GFPCA pass
  double penalized_loglik = 0.0;
};

struct JointState {
  int q = 0;
  std::vector<WarpingFunction> warpings;
  GfpcaModel model;
  std::vector<TemplateFunction> templates;
  std::vector<JointTraceEntry> trace;
  bool converged = false;
  Family registration_family;
  FunctionalDataset registered;
  int registration_passes = 0;
  int gfpca_passes = 0;
  std::vector<std::string> failures;  // curve ids flagged in the last registration pass
  std::vector<std::string> warnings;
};

namespace detail {

inline double warp_change(const FunctionalDataset& ds, const std::vector<WarpingFunction>& a,
                          const std::vector<WarpingFunction>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto ha = eval_warp(a[i], ds.curves[i].times);
    const auto hb = eval_warp(b[i], ds.curves[i].times);
    for (std::size_t j = 0; j < ha.size(); ++j) s += (ha[j] - hb[j]) * (ha[j] - hb[j]);
  }
  return s;
}

inline double objective_sum(const RegistrationBatch& batch) {
  double s = 0.0;
  for (const auto& r : batch.results) s += r.objective;
  return s;
}

}  // namespace detail

inline JointState run_joint(const FunctionalDataset& ds, const JointConfig& cfg) {
  cfg.validate();
  validate_dataset(ds);
  for (const auto& c : ds.curves) check_observations(cfg.family, c.values);

  JointState st;
  RegistrationConfig reg = cfg.registration;
  GfpcaConfig full = cfg.gfpca;
  full.pve = cfg.kappa_var;
  full.drop_below = cfg.drop_below;
  GfpcaConfig relaxed = full;
  if (cfg.reduced_accuracy_intermediate) {
    relaxed.irls.max_iter = 10;
    relaxed.newton_tol = 1e-5;
    relaxed.backfit_cycles = 1;
  }

  TemplateFunction tmpl0 = cfg.initial_template
                               ? *cfg.initial_template
                               : TemplateFunction{estimate_marginal_mean(ds, cfg.family, full.mean_basis, full.irls).mu_x,
                                                  cfg.family};
  st.registration_family = cfg.family;
  if (cfg.estimate_dispersion && cfg.family.kind != FamilyKind::Binomial)
    st.registration_family.dispersion = template_dispersion(ds, TemplateFunction{tmpl0.latent, cfg.family});
  tmpl0.family = st.registration_family;

  std::vector<WarpingFunction> identity;
  for (const auto& c : ds.curves) identity.push_back(identity_warp(c.t_min(), c.t_max(), reg.kh, reg.mode));

  RegistrationBatch batch = register_all(ds, {tmpl0}, reg);
  ++st.registration_passes;
  for (const auto& r : batch.results) st.warpings.push_back(r.warp);
  st.templates.assign(1, tmpl0);
  st.trace.push_back({0, detail::warp_change(ds, st.warpings, identity), 0, detail::objective_sum(batch)});

  const double threshold = cfg.delta_h * static_cast<double>(ds.total_points());
  while (true) {
    ++st.q;
    const GfpcaConfig& gc = st.gfpca_passes == 0 ? full : relaxed;
    st.model = fit_gfpca(apply_warps(ds, st.warpings), cfg.family, gc);
    ++st.gfpca_passes;
    st.templates.clear();
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const Eigen::VectorXd lat = st.model.latent_on_grid(i);
      st.templates.push_back(fit_template(st.model.grid, std::span<const double>(lat.data(), static_cast<std::size_t>(lat.size())),
                                          st.registration_family, cfg.template_basis));
    }
    std::vector<std::optional<WarpingFunction>> warm(st.warpings.begin(), st.warpings.end());
    batch = register_all(ds, st.templates, reg, cfg.warm_start ? warm : decltype(warm){});
    ++st.registration_passes;
    std::vector<WarpingFunction> next;
    for (const auto& r : batch.results) next.push_back(r.warp);
    const double change = detail::warp_change(ds, next, st.warpings);
    st.warpings = std::move(next);
    st.trace.push_back({st.q, change, st.model.num_fpcs(), detail::objective_sum(batch)});
    if (change <= threshold) {
      st.converged = true;
      break;
    }
    if (st.q >= cfg.max_iter) break;
  }

  st.registered = apply_warps(ds, st.warpings);
  st.model = fit_gfpca(st.registered, cfg.family, full);
  ++st.gfpca_passes;
  st.failures = batch.failures;
  st.warnings = st.model.warnings;
  return st;
}

}  // namespace regfpca
