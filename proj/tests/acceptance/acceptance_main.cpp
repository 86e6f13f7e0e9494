// Copyright 2026 The qbm Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


// Acceptance suite. Each criterion prints one PASS/FAIL line; the process exits 1 if any fails.
// Runtime budgets are part of the criteria and are checked on this machine's wall clock.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "qbm/appendix_oracles.hpp"
#include "qbm/diffusion.hpp"
#include "qbm/evolution.hpp"
#include "qbm/gain_kernel.hpp"
#include "qbm/momentum_process.hpp"

namespace {

using namespace qbm;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Outcome {
  int id = 0;
  std::string name;
  double budget = kInf;  // seconds
  bool pass = false;
  std::string summary;
  json detail = json::object();
  double seconds = 0.0;
};

std::string sci(double v, int digits = 3) {
  std::ostringstream os;
  os.precision(digits);
  os << v;
  return os.str();
}

GainKernel preset(const std::string& name, int dim) {
  const KernelPreset p = kernel_preset(name, dim);
  return build_kernel(p.spec, p.radius);
}

std::vector<double> grid(double t_end, double dt) {
  std::vector<double> t;
  const int n = static_cast<int>(std::lround(t_end / dt));
  for (int i = 0; i <= n; ++i) t.push_back(i * dt);
  return t;
}

DensityState random_pure_state(const LatticeBox& box, int support, std::uint64_t seed) {
  CounterRng rng(seed, 1u);
  Eigen::VectorXcd psi = Eigen::VectorXcd::Zero(box.num_sites());
  for (int a = 0; a < box.num_sites(); ++a) {
    if (linf_norm(box.site(a)) > support) continue;
    psi(a) = Complex(2.0 * rng.uniform() - 1.0, 2.0 * rng.uniform() - 1.0);
  }
  psi.normalize();
  return DensityState::pure(box, psi);
}

std::vector<std::uint64_t> seed_range(std::uint64_t first, int count) {
  std::vector<std::uint64_t> s;
  for (int i = 0; i < count; ++i) s.push_back(first + static_cast<std::uint64_t>(i));
  return s;
}

double min_eigenvalue(const DensityState& s) {
  const Eigen::MatrixXcd h = 0.5 * (s.matrix() + s.matrix().adjoint());
  return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd>(h, Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
}

/// Standard error of mean(a - b) over seed-paired samples of the (0, 0) entry.
double paired_stderr(const DiffusionEstimate& a, const DiffusionEstimate& b) {
  const std::size_t n = a.samples.size();
  if (n < 2 || b.samples.size() != n) return std::hypot(a.scalar_stderr(), b.scalar_stderr());
  std::vector<double> v;
  for (std::size_t k = 0; k < n; ++k) v.push_back(a.samples[k](0, 0) - b.samples[k](0, 0));
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return std::sqrt(var / static_cast<double>(n - 1) / static_cast<double>(n));
}

// 1. Adaptive integration against the dense exponential of the assembled generator.
void generator_fidelity(Outcome& o) {
  const LatticeBox box(1, 6);
  const GainKernel k = preset("cosine", 1);
  const GeneratorParams p{1.0, 2.0, 0.5};
  const DisorderField om = sample(box, DisorderDist::uniform(), 11);
  const DensityState rho0 = random_pure_state(box, 3, 5);
  EvolveOptions opts;
  opts.tol = 1e-11;
  opts.boundary_tol = kInf;
  const Trajectory traj = evolve(rho0, p, om, &k, {0.0, 1.0}, opts);
  const Generator gen(box, p, om, &k);
  const DensityState exact = dense_propagate(rho0, gen, 1.0);
  const double err = (traj.states.back().matrix() - exact.matrix()).cwiseAbs().maxCoeff();
  o.pass = err < 1e-7;
  o.summary = "sup|rho_adaptive - rho_dense| = " + sci(err) + " (< 1e-7)";
  o.detail = {{"sup_error", err}, {"steps", traj.stats.accepted}, {"rejected", traj.stats.rejected}};
}

// 2. Trace, Hermiticity and positivity over [0, 10] for random parameter triples.
void conservation(Outcome& o) {
  const GainKernel k1 = preset("cosine", 1);
  const GainKernel k2 = preset("cosine", 2);
  CounterRng rng(2, 0u);
  double worst_trace = 0.0, worst_herm = 0.0, worst_eig = kInf;
  json runs = json::array();
  for (int i = 0; i < 5; ++i) {
    const GeneratorParams p{0.5 + rng.uniform(), 4.0 * rng.uniform(), 0.1 + 1.9 * rng.uniform()};
    for (const LatticeBox& box : {LatticeBox(1, 7), LatticeBox(2, 1)}) {
      const GainKernel& k = box.dim() == 1 ? k1 : k2;
      const DisorderField om = sample(box, DisorderDist::uniform(), 100 + static_cast<std::uint64_t>(i));
      EvolveOptions opts;
      opts.tol = 1e-10;
      opts.boundary_tol = kInf;
      double tr = 0.0, he = 0.0, ev = kInf;
      evolve_observe(random_pure_state(box, 2, 200 + static_cast<std::uint64_t>(i)), Generator(box, p, om, &k),
                     grid(10.0, 0.5), opts, [&](double, const DensityState& s) {
                       tr = std::max(tr, std::abs(trace(s) - 1.0));
                       he = std::max(he, hermiticity_defect(s));
                       ev = std::min(ev, min_eigenvalue(s));
                     });
      worst_trace = std::max(worst_trace, tr);
      worst_herm = std::max(worst_herm, he);
      worst_eig = std::min(worst_eig, ev);
      runs.push_back({{"u", p.u}, {"lambda", p.lambda}, {"g", p.g}, {"dim", box.dim()}, {"sites", box.num_sites()},
                      {"trace_drift", tr}, {"hermiticity_defect", he}, {"min_eigenvalue", ev}});
    }
  }
  o.pass = worst_trace < 1e-8 && worst_herm < 1e-8 && worst_eig >= -1e-7;
  o.summary = "trace drift " + sci(worst_trace) + ", Hermiticity defect " + sci(worst_herm) +
              " (< 1e-8); min eigenvalue " + sci(worst_eig) + " (>= -1e-7)";
  o.detail = {{"runs", runs}};
}

// 3. Weighted-norm growth bound e^{C_m t} with C_m = 4 d e^m u + g.
void group_velocity(Outcome& o) {
  const GeneratorParams p{1.0, 2.0, 0.5};
  double worst = 0.0, worst_later = 0.0;
  json rows = json::array();
  bool ok = true;
  for (int dim : {1, 2}) {
    const GainKernel k = preset("cosine", dim);
    const LatticeBox box(dim, dim == 1 ? 20 : 10);
    const double horizon = dim == 1 ? 2.0 : 1.0;
    const DisorderField om = sample(box, DisorderDist::uniform(), 31);
    const Trajectory traj = evolve(random_pure_state(box, 2, 32), p, om, &k, grid(horizon, 0.05));
    for (double m : {0.0, 0.5, 1.0}) {
      const CheckResult r = group_velocity_check(traj, m, p);
      const double cm = group_velocity_rate(dim, m, p);
      const double a = weighted_norm(traj.states.front(), m);
      double later = 0.0;
      for (std::size_t i = 1; i < traj.states.size(); ++i) {
        later = std::max(later, std::exp(-cm * traj.times[i]) * weighted_norm(traj.states[i], m) / a);
      }
      worst = std::max(worst, r.worst);
      worst_later = std::max(worst_later, later);
      ok = ok && r.pass;
      rows.push_back({{"dim", dim}, {"m", m}, {"C_m", cm}, {"worst_ratio", r.worst}, {"worst_ratio_after_0", later},
                      {"at_time", r.at_time}});
    }
  }
  o.pass = ok && worst <= 1.0 + 1e-6;
  o.summary = "max_t e^{-C_m t} |rho_t|_m / A = " + sci(worst, 6) + " (<= 1 + 1e-6, t > 0: " + sci(worst_later, 6) +
              ") over m in {0, 0.5, 1}, d in {1, 2}";
  o.detail = {{"checks", rows}};
}

// 4. Zero-disorder law D = C u^2 / g.
void ballistic_law(Outcome& o) {
  const GainKernel k = preset("cosine", 1);
  const double c = spectral_gap(k, 64);
  std::vector<double> cs;
  for (double g : {0.1, 1.0, 10.0}) cs.push_back(closed_form_ballistic(k, 1.0, g).diagnostics["C"].get<double>());
  const double spread = *std::max_element(cs.begin(), cs.end()) - *std::min_element(cs.begin(), cs.end());
  const double cmax = 4.0 / c;
  // The cosine kernel saturates C = 4/c: phi is the gap eigenvector of -L. Equality is allowed.
  const bool part_i = spread <= 1e-12 * std::max(1.0, cs[0]) && cs[0] > 0.0 && cs[0] <= cmax * (1.0 + 1e-12);
  json fits = json::array();
  double worst_rel = 0.0;
  for (double g : {0.5, 1.0, 2.0}) {
    const double t1 = fit_window_start(c, g);
    const double horizon = std::max(3.0 * t1, 30.0);
    MsdRequest req;
    req.box = LatticeBox(1, static_cast<int>(std::ceil(2.2 * horizon)) + 10);
    req.params = {1.0, 0.0, g};
    req.kernel = &k;
    req.seeds = {1};
    req.t_grid = grid(horizon, 1.0);
    const DiffusionEstimate f = fit_diffusion(msd_ensemble(req), t1, horizon);
    const double closed = closed_form_ballistic(k, 1.0, g).D(0, 0);
    const double rel = std::abs(f.D(0, 0) - closed) / closed;
    worst_rel = std::max(worst_rel, rel);
    fits.push_back({{"g", g}, {"D_fit", f.D(0, 0)}, {"D_closed", closed}, {"relative_error", rel},
                    {"window", {t1, horizon}}, {"box_radius", req.box.radius()}});
  }
  o.pass = part_i && worst_rel < 0.05;
  o.summary = "C = D g/u^2 = " + sci(cs[0], 12) + " (spread " + sci(spread) + ", 4/c = " + sci(cmax, 12) +
              "); MSD fit vs closed form worst " + sci(100.0 * worst_rel) + "% (< 5%)";
  o.detail = {{"C", cs}, {"C_spread", spread}, {"c", c}, {"four_over_c", cmax}, {"saturated", cs[0] >= cmax * (1 - 1e-9)},
              {"fits", fits}};
}

// 5. Isotropy and positivity of D in d = 2, plus the resolvent bounds.
void isotropy(Outcome& o) {
  const GainKernel k = preset("cosine", 2);
  const double c = spectral_gap(k, 16);
  const GeneratorParams p{1.0, 3.0, 0.5};
  MsdRequest req;
  req.box = LatticeBox(2, 16);
  req.params = p;
  req.kernel = &k;
  req.seeds = seed_range(5001, 16);
  req.t_grid = grid(20.0, 0.5);
  req.evolve.tol = 1e-7;
  req.evolve.boundary_tol = 1e-5;
  const double t1 = fit_window_start(c, p.g);
  const DiffusionEstimate f = fit_diffusion(msd_ensemble(req), t1, 20.0);
  const double d12 = f.D(0, 1), s12 = f.stderr_(0, 1);
  const double diff = f.D(0, 0) - f.D(1, 1), sdiff = f.difference_stderr(0, 1);
  const double z11 = f.D(0, 0) / f.stderr_(0, 0);
  const bool offdiag = std::abs(d12) <= 3.0 * s12;
  const bool equal = std::abs(diff) <= 3.0 * sdiff;
  const bool positive = z11 > 5.0;

  ResolventEnsembleRequest rr;
  rr.dim = 2;
  rr.box_radius = 3;
  rr.xi_radius = 4;
  rr.params = p;
  rr.kernel = &k;
  rr.c = c;
  rr.seeds = seed_range(6001, 8);
  const ResolventEnsemble re = resolvent_ensemble(rr);
  json members = json::array();
  for (const auto& m : re.members) {
    members.push_back({{"D11", m.d_projected}, {"lower", m.bounds.lower}, {"upper", m.bounds.upper},
                       {"within_bounds", m.within_bounds}, {"agree", m.agree}});
  }
  o.pass = offdiag && equal && positive && re.all_within_bounds;
  o.summary = "|D12| = " + sci(std::abs(d12)) + " vs 3s " + sci(3 * s12) + "; |D11-D22| = " + sci(std::abs(diff)) +
              " vs 3s " + sci(3 * sdiff) + "; D11/s = " + sci(z11) + " (> 5); resolvent in bounds " +
              (re.all_within_bounds ? "8/8" : "no");
  o.detail = {{"fit", to_json(f)}, {"resolvent_mean", to_json(re.estimate)}, {"resolvent_members", members},
              {"checks", {{"offdiagonal", offdiag}, {"diagonal_equal", equal}, {"positive", positive},
                          {"resolvent_within_bounds", re.all_within_bounds}}}};
}

// 6. Linear small-g law with the localization bound.
void small_g_law(Outcome& o) {
  const GainKernel k = preset("cosine", 1);
  const double c = spectral_gap(k, 64);
  LocalizationRequest lr;
  lr.box_radius = 40;
  lr.u = 1.0;
  lr.lambda = 8.0;
  lr.start_radius = 16;
  lr.start_spacing = 8;
  lr.seeds = seed_range(1, 64);
  lr.t_grid = grid(200.0, 0.5);
  const LocalizationResult loc = localization_length(lr);
  const bool loc_ok = loc.relative_error() < 0.1;

  std::vector<CouplingPoint> pts;
  json sweep = json::array();
  bool all_agree = true;
  for (double g : {0.02, 0.05, 0.1, 0.2}) {
    ResolventEnsembleRequest req;
    req.dim = 1;
    req.box_radius = 32;
    req.xi_radius = 10;
    req.params = {1.0, 8.0, g};
    req.kernel = &k;
    req.c = c;
    req.seeds = seed_range(1, 32);
    const ResolventEnsemble e = resolvent_ensemble(req);
    all_agree = all_agree && e.all_agree;
    pts.push_back({g, e.estimate.D(0, 0), e.estimate.stderr_(0, 0), e.members.front().bounds.lower});
    sweep.push_back({{"g", g}, {"D", e.estimate.D(0, 0)}, {"stderr", e.estimate.stderr_(0, 0)},
                     {"all_agree", e.all_agree}});
  }
  double a_norm = 0.0;
  json fibers = json::array();
  const LatticeBox box(1, 32, Boundary::Periodic);
  for (std::uint64_t s = 1; s <= 4; ++s) {
    const SmallCouplingLimit sl =
        small_coupling_limit(build_fiber_space(box, 10, {1.0, 8.0, 0.1}, &k, sample(box, DisorderDist::uniform(), s)));
    a_norm = std::max(a_norm, sl.a_norm);
    fibers.push_back({{"seed", s}, {"branch", sl.branch}, {"pi0_dim", sl.pi0_dim}, {"pi0_phi_norm", sl.pi0_phi_norm},
                      {"delta", sl.delta}, {"A_norm", sl.a_norm}});
  }
  const SlopeResult r = small_g_slope(pts, {1.0, c, loc.ell2, loc.ell2_stderr, a_norm});
  const bool curv_ok = r.curvature < 0.2;
  o.pass = loc_ok && curv_ok && r.pass() && all_agree;
  o.summary = "ell^2 = " + sci(loc.ell2) + " +- " + sci(loc.ell2_stderr) + " (" + sci(100 * loc.relative_error()) +
              "% < 10%); Delta = " + sci(r.delta) + " +- " + sci(r.delta_err) + " in (" + sci(r.lower) + ", " +
              sci(r.upper) + "]; curvature " + sci(r.curvature) + " (< 0.2)";
  json lj = to_json(loc);
  lj.erase("times");
  lj.erase("mean_curve");
  o.detail = {{"localization", lj}, {"sweep", sweep}, {"slope", to_json(r)}, {"fiber_limit", fibers}};
}

// 7. Fit, Abel and resolvent estimates at one strong-disorder point.
void concordance(Outcome& o) {
  const GainKernel k = preset("cosine", 1);
  const double c = spectral_gap(k, 64);
  const GeneratorParams p{1.0, 8.0, 1.0};
  const double horizon = 1200.0;
  MsdRequest req;
  req.box = LatticeBox(1, 60);
  req.params = p;
  req.kernel = &k;
  req.seeds = seed_range(1001, 16);
  req.t_grid = grid(horizon, 5.0);
  const MsdSeries msd = msd_ensemble(req);
  const DiffusionEstimate fit = fit_diffusion(msd, fit_window_start(c, p.g), horizon);
  const DiffusionEstimate abel = abel_extrapolated(msd, kAbelMinEtaT / horizon);

  ResolventEnsembleRequest rr;
  rr.dim = 1;
  rr.box_radius = 64;
  rr.xi_radius = 10;
  rr.params = p;
  rr.kernel = &k;
  rr.c = c;
  rr.seeds = seed_range(1, 32);
  const ResolventEnsemble res = resolvent_ensemble(rr);

  struct Pair {
    const char* name;
    double a, sa, b, sb;
  };
  const Pair pairs[] = {{"fit-abel", fit.scalar(), fit.scalar_stderr(), abel.scalar(), abel.scalar_stderr()},
                        {"fit-resolvent", fit.scalar(), fit.scalar_stderr(), res.estimate.scalar(),
                         res.estimate.scalar_stderr()},
                        {"abel-resolvent", abel.scalar(), abel.scalar_stderr(), res.estimate.scalar(),
                         res.estimate.scalar_stderr()}};
  json pj = json::array();
  double worst = 0.0;
  for (const Pair& q : pairs) {
    const double z = std::abs(q.a - q.b) / std::hypot(q.sa, q.sb);
    worst = std::max(worst, z);
    pj.push_back({{"pair", q.name}, {"difference", q.a - q.b}, {"combined_stderr", std::hypot(q.sa, q.sb)}, {"z", z}});
  }
  pj[0]["paired_z"] = std::abs(fit.scalar() - abel.scalar()) / paired_stderr(fit, abel);
  o.pass = worst <= 3.0;
  o.summary = "fit " + sci(fit.scalar()) + " +- " + sci(fit.scalar_stderr()) + ", abel " + sci(abel.scalar()) + " +- " +
              sci(abel.scalar_stderr()) + ", resolvent " + sci(res.estimate.scalar()) + " +- " +
              sci(res.estimate.scalar_stderr()) + "; worst |diff|/combined = " + sci(worst) + " (<= 3)";
  o.detail = {{"fit", to_json(fit)}, {"abel", to_json(abel)}, {"resolvent", to_json(res.estimate)}, {"pairs", pj}};
}

// 8. Kernel validator on shipped presets and violation fixtures.
void kernel_validator(Outcome& o, const std::string& data_dir) {
  auto load = [&](const std::string& rel) {
    std::ifstream is(data_dir + "/" + rel);
    if (!is) throw Error(ErrorCode::InvalidArgument, "cannot open " + data_dir + "/" + rel);
    return build_kernel(kernel_file_from_json(json::parse(is)));
  };
  json presets = json::object();
  bool ok = true;
  for (const char* name : {"uniform", "cosine", "boson-beta0"}) {
    const ValidationReport r = validate(load(std::string("kernels/") + name + ".json"));
    presets[name] = {{"pass", r.all_pass()}, {"c", r.c}};
    ok = ok && r.all_pass();
  }
  const std::pair<const char*, const char*> fixtures[] = {
      {"violates-item1-parity", "item1_parity"},
      {"violates-item2-positivity", "item2_positivity"},
      {"violates-item3-sum-rule", "item3_sum_rule"},
      {"violates-item4-gap", "item4_spectral_gap"},
      {"violates-assumption2-permutation", "assumption2_permutation"}};
  json fx = json::object();
  int exact = 0;
  for (const auto& [file, item] : fixtures) {
    const std::vector<std::string> failing = validate(load(std::string("fixtures/") + file + ".json")).failing();
    const bool hit = failing == std::vector<std::string>{item};
    exact += hit ? 1 : 0;
    fx[file] = {{"expected", item}, {"failing", failing}, {"exact", hit}};
  }
  o.pass = ok && exact == 5;
  o.summary = std::string("presets ") + (ok ? "3/3 pass" : "FAIL") + "; fixtures failing exactly their item " +
              std::to_string(exact) + "/5";
  o.detail = {{"presets", presets}, {"fixtures", fx}};
}

// 9. Momentum jump process for the cosine kernel.
void momentum_process(Outcome& o) {
  const GainKernel k = preset("cosine", 1);
  const int nq = 64;
  const JumpProcessModel model = JumpProcessModel::from_kernel(k, nq);
  const ChiSquareResult chi = stationarity_test(model, 100000, 9);
  const double gap_eig = generator_gap(model);
  const double gap_kernel = spectral_gap(k, nq);
  const TvDecay tv = tv_decay(model, 0, grid(4.0, 0.25), 20000, 19);
  const bool gap_ok = std::abs(gap_eig - gap_kernel) < 1e-8;
  const bool tv_ok = tv.points_used >= 3 && tv.fitted_rate >= 0.8 * gap_kernel;
  o.pass = chi.pass && gap_ok && tv_ok;
  o.summary = "chi^2 = " + sci(chi.statistic, 5) + " vs " + sci(chi.critical, 5) + " (1%); |gap diff| = " +
              sci(std::abs(gap_eig - gap_kernel)) + "; TV rate " + sci(tv.fitted_rate) + " >= 0.8 c = " +
              sci(0.8 * gap_kernel);
  o.detail = {{"chi2", chi.statistic}, {"critical", chi.critical}, {"dof", chi.dof}, {"thinning", chi.thinning},
              {"gap_eigensolve", gap_eig}, {"gap_kernel", gap_kernel}, {"tv_times", tv.times}, {"tv", tv.tv},
              {"tv_rate", tv.fitted_rate}, {"tv_points", tv.points_used}, {"noise_floor", tv.noise_floor}};
}

// 10. Resolvent limit on random normal/accretive problems.
void resolvent_limit(Outcome& o) {
  const AppendixReport r = appendix_checks();
  o.pass = r.pass();
  o.summary = "worst limit error " + sci(r.worst_limit_error) + " (< 1e-4); decay slope " + sci(r.worst_decay_slope) +
              ", convergence slope " + sci(r.worst_convergence_slope) + " (<= -0.9); |h| c/|psi| <= " +
              sci(r.worst_bound_ratio);
  o.detail = to_json(r);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qbm acceptance suite"};
  std::vector<int> only;
  std::string report = "acceptance_report.json";
  std::string data_dir = QBM_DATA_DIR;
  app.add_option("--only", only, "Run only these criteria (1-10)")->check(CLI::Range(1, 10));
  app.add_option("--report", report, "JSON report path");
  app.add_option("--data", data_dir, "Directory holding kernels/ and fixtures/");
  CLI11_PARSE(app, argc, argv);

  struct Entry {
    int id;
    const char* name;
    double budget;
    std::function<void(Outcome&)> run;
  };
  const std::vector<Entry> entries = {
      {1, "generator fidelity", 30, generator_fidelity},
      {2, "conservation suite", kInf, conservation},
      {3, "finite group velocity", kInf, group_velocity},
      {4, "ballistic-dissipative law", 300, ballistic_law},
      {5, "isotropy and positivity", 1200, isotropy},
      {6, "linear small-g law", 3600, small_g_law},
      {7, "method concordance", kInf, concordance},
      {8, "kernel validator", kInf, [&](Outcome& o) { kernel_validator(o, data_dir); }},
      {9, "momentum process", kInf, momentum_process},
      {10, "resolvent limit oracle", 60, resolvent_limit},
  };
  const std::set<int> selected(only.begin(), only.end());
  json out = json::array();
  int failures = 0;
  for (const Entry& e : entries) {
    if (!selected.empty() && !selected.count(e.id)) continue;
    Outcome o;
    o.id = e.id;
    o.name = e.name;
    o.budget = e.budget;
    const auto t0 = Clock::now();
    try {
      e.run(o);
    } catch (const std::exception& ex) {
      o.pass = false;
      o.summary = std::string("error: ") + ex.what();
    }
    o.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    const bool in_budget = o.seconds < o.budget;
    const bool pass = o.pass && in_budget;
    failures += pass ? 0 : 1;
    std::string timing = sci(o.seconds) + " s";
    if (std::isfinite(o.budget)) timing += in_budget ? " (< " + sci(o.budget) + " s)" : " (over " + sci(o.budget) + " s budget)";
    std::printf("criterion %2d %s  %s: %s; %s\n", o.id, pass ? "PASS" : "FAIL", o.name.c_str(), o.summary.c_str(),
                timing.c_str());
    std::fflush(stdout);
    out.push_back({{"criterion", o.id}, {"name", o.name}, {"pass", pass}, {"checks_pass", o.pass},
                   {"seconds", o.seconds}, {"budget_seconds", std::isfinite(o.budget) ? json(o.budget) : json(nullptr)},
                   {"summary", o.summary}, {"detail", o.detail}});
  }
  std::ofstream(report) << json({{"criteria", out}, {"failures", failures}}).dump(2) << "\n";
  std::printf("%d of %zu criteria failed; report written to %s\n", failures, out.size(), report.c_str());
  return failures == 0 ? 0 : 1;
}
