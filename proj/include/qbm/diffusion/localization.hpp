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


#pragma once

// Localization second moment of the closed (g = 0) Anderson dynamics and the
// through-origin slope of D(g) at small coupling, with the inequality chain
// that bounds it.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "qbm/diffusion/msd.hpp"
#include "qbm/disorder.hpp"
#include "qbm/evolution.hpp"

namespace qbm {

struct LocalizationRequest {
  int dim = 1;
  int box_radius = 30;
  double u = 1.0;
  double lambda = 8.0;
  DisorderDist dist = DisorderDist::uniform();
  std::vector<std::uint64_t> seeds;
  std::vector<double> t_grid;
  /// Start sites on a grid of this spacing inside |s|_inf <= start_radius; 0 radius means the origin only.
  int start_radius = 0;
  int start_spacing = 8;
  /// Largest allowed probability on the outermost shell of the box.
  double edge_tol = 1e-8;
  int workers = 0;
};

struct LocalizationResult {
  double ell2 = 0.0;          // sup_t of the ensemble mean of Sum_x |x - s|^2 / d |psi_t(x)|^2
  double ell2_stderr = 0.0;   // ensemble standard error at the maximizing time
  double t_at_sup = 0.0;
  double plateau_ratio = 1.0; // sup over the first three quarters / global sup
  std::vector<double> times;
  std::vector<double> mean_curve;
  int starts_per_seed = 0;

  double relative_error() const { return ell2 > 0.0 ? ell2_stderr / ell2 : 0.0; }
};

inline nlohmann::json to_json(const LocalizationResult& r) {
  return {{"ell2", r.ell2},           {"ell2_stderr", r.ell2_stderr},   {"relative_error", r.relative_error()},
          {"t_at_sup", r.t_at_sup},   {"plateau_ratio", r.plateau_ratio}, {"starts_per_seed", r.starts_per_seed},
          {"times", r.times},         {"mean_curve", r.mean_curve}};
}

inline constexpr double kPlateauRatio = 0.95;

/// Unitary evolution from each start site by eigendecomposition of H. The plateau rule
/// requires the running sup at 3T/4 to be within 5% of the sup at T; otherwise NoPlateau.
inline LocalizationResult localization_length(const LocalizationRequest& req) {
  require(!req.seeds.empty(), "localization_length: no seeds");
  require(req.t_grid.size() >= 4, "localization_length: need at least four times");
  require(req.start_radius >= 0 && req.start_radius < req.box_radius, "localization_length: bad start radius");
  require(req.start_spacing >= 1, "localization_length: start spacing must be >= 1");
  const LatticeBox box(req.dim, req.box_radius);
  const int n = box.num_sites();
  std::vector<Site> starts;
  for (int i = -req.start_radius; i <= req.start_radius; i += req.start_spacing) {
    for (int j = -req.start_radius; j <= req.start_radius; j += req.start_spacing) {
      if (req.dim == 1 && j != -req.start_radius) break;
      starts.push_back(req.dim == 1 ? Site{i, 0} : Site{i, j});
    }
  }
  std::vector<std::uint64_t> seeds = req.seeds;
  std::sort(seeds.begin(), seeds.end());
  const std::size_t nt = req.t_grid.size();
  std::vector<std::vector<double>> curves(seeds.size());
  std::vector<double> edge(seeds.size(), 0.0);

  parallel_for(seeds.size(), req.workers > 0 ? req.workers : default_workers(), [&](std::size_t k) {
    const DisorderField field = sample(box, req.dist, seeds[k]);
    const Eigen::MatrixXd h = Eigen::MatrixXd(hamiltonian(box, req.u, req.lambda, field).real());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h);
    const Eigen::MatrixXd& v = es.eigenvectors();
    const Eigen::VectorXd& e = es.eigenvalues();
    std::vector<double> curve(nt, 0.0);
    double worst_edge = 0.0;
    for (const Site& s : starts) {
      const Eigen::VectorXd c0 = v.row(box.index(s)).transpose();
      Eigen::VectorXd w(n);
      for (int x = 0; x < n; ++x) {
        const Site d = box.site(x) - s;
        w(x) = static_cast<double>(d[0] * d[0] + d[1] * d[1]) / req.dim;
      }
      for (std::size_t ti = 0; ti < nt; ++ti) {
        const double t = req.t_grid[ti];
        Eigen::VectorXcd ck(n);
        for (int q = 0; q < n; ++q) ck(q) = std::polar(c0(q), -e(q) * t);
        const Eigen::VectorXcd psi = v.cast<Complex>() * ck;
        const Eigen::VectorXd prob = psi.cwiseAbs2();
        curve[ti] += w.dot(prob);
        double shell = 0.0;
        for (int x = 0; x < n; ++x) {
          if (linf_norm(box.site(x)) == req.box_radius) shell += prob(x);
        }
        worst_edge = std::max(worst_edge, shell);
      }
    }
    for (double& c : curve) c /= static_cast<double>(starts.size());
    curves[k] = std::move(curve);
    edge[k] = worst_edge;
  });
  const double max_edge = *std::max_element(edge.begin(), edge.end());
  if (max_edge > req.edge_tol) {
    throw Error(ErrorCode::BoundaryMassExceeded, "edge probability " + fmt(max_edge) + " > " + fmt(req.edge_tol));
  }

  LocalizationResult res;
  res.times = req.t_grid;
  res.starts_per_seed = static_cast<int>(starts.size());
  res.mean_curve.assign(nt, 0.0);
  const double ns = static_cast<double>(seeds.size());
  for (const auto& c : curves) {
    for (std::size_t t = 0; t < nt; ++t) res.mean_curve[t] += c[t] / ns;
  }
  std::size_t arg = 0;
  for (std::size_t t = 1; t < nt; ++t) {
    if (res.mean_curve[t] > res.mean_curve[arg]) arg = t;
  }
  res.ell2 = res.mean_curve[arg];
  res.t_at_sup = req.t_grid[arg];
  if (seeds.size() >= 2) {
    double var = 0.0;
    for (const auto& c : curves) var += (c[arg] - res.ell2) * (c[arg] - res.ell2);
    res.ell2_stderr = std::sqrt(var / (ns - 1.0) / ns);
  }
  const double t_cut = req.t_grid.front() + 0.75 * (req.t_grid.back() - req.t_grid.front());
  double early = 0.0;
  for (std::size_t t = 0; t < nt; ++t) {
    if (req.t_grid[t] <= t_cut) early = std::max(early, res.mean_curve[t]);
  }
  res.plateau_ratio = res.ell2 > 0.0 ? early / res.ell2 : 1.0;
  if (res.plateau_ratio < kPlateauRatio) {
    throw Error(ErrorCode::NoPlateau, "running sup at 3T/4 is " + fmt(100.0 * res.plateau_ratio) +
                                          "% of the sup at T");
  }
  return res;
}

struct CouplingPoint {
  double g = 0.0;
  double D = 0.0;
  double err = 0.0;
  double lower_bound = 0.0;  // 4 g u^2 c / |G_0|^2, 0 if unknown
};

struct SlopeInputs {
  double u = 1.0;
  double c = 0.0;
  double ell2 = 0.0;
  double ell2_err = 0.0;
  double a_norm = 0.0;  // |A_0| = |u T + lambda V|
};

struct SlopeResult {
  double delta = 0.0;
  double delta_err = 0.0;
  double curvature = 0.0;        // |beta| g_max / |Delta'| from the quadratic through-origin fit
  double ratio_observed = 0.0;   // D(g_2) / D(g_1) for the two smallest g
  double ratio_expected = 0.0;   // g_2 / g_1
  double ratio_err = 0.0;
  double upper = 0.0;            // (1 + 1/c) ell^2
  double upper_err = 0.0;
  double lower = 0.0;            // 4 c u^2 / |A_0|^2
  bool positive = false;
  bool below_upper = false;
  bool above_lower = false;
  bool points_above_bound = true;
  bool linear_ratio_ok = false;
  std::vector<CouplingPoint> used;

  bool pass() const { return positive && below_upper && above_lower && points_above_bound; }
};

inline nlohmann::json to_json(const SlopeResult& r) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : r.used) pts.push_back({{"g", p.g}, {"D", p.D}, {"err", p.err}, {"lower_bound", p.lower_bound}});
  return {{"delta", r.delta},
          {"delta_err", r.delta_err},
          {"curvature", r.curvature},
          {"ratio_observed", r.ratio_observed},
          {"ratio_expected", r.ratio_expected},
          {"ratio_err", r.ratio_err},
          {"bounds", {{"lower", r.lower}, {"upper", r.upper}, {"upper_err", r.upper_err}}},
          {"pass_flags",
           {{"positive", r.positive},
            {"below_upper", r.below_upper},
            {"above_lower", r.above_lower},
            {"points_above_bound", r.points_above_bound},
            {"linear_ratio_ok", r.linear_ratio_ok}}},
          {"points", pts}};
}

inline constexpr double kMaxCurvature = 0.2;

/// Weighted fit D = Delta g over the points within two decades of the smallest g.
/// The error is inflated by sqrt(chi^2 / dof) when the scatter exceeds the error bars.
/// A second fit D = Delta' g + beta g^2 measures curvature; above 20% it is NonlinearRegime.
inline SlopeResult small_g_slope(std::vector<CouplingPoint> points, const SlopeInputs& in) {
  require(points.size() >= 2, "small_g_slope: need at least two couplings");
  std::sort(points.begin(), points.end(), [](const auto& a, const auto& b) { return a.g < b.g; });
  for (const auto& p : points) require(p.g > 0.0 && p.err > 0.0, "small_g_slope: g and err must be positive");
  SlopeResult r;
  const double gmin = points.front().g;
  for (const auto& p : points) {
    if (p.g <= 100.0 * gmin * (1.0 + 1e-12)) r.used.push_back(p);
  }
  require(r.used.back().g >= 10.0 * gmin * (1.0 - 1e-12), "small_g_slope: couplings must span a decade");
  double sgd = 0.0, sgg = 0.0;
  for (const auto& p : r.used) {
    const double w = 1.0 / (p.err * p.err);
    sgd += w * p.g * p.D;
    sgg += w * p.g * p.g;
  }
  r.delta = sgd / sgg;
  double chi2 = 0.0;
  for (const auto& p : r.used) chi2 += std::pow((p.D - r.delta * p.g) / p.err, 2);
  const double dof = static_cast<double>(r.used.size()) - 1.0;
  const double inflate = dof > 0.0 ? std::max(1.0, std::sqrt(chi2 / dof)) : 1.0;
  r.delta_err = inflate / std::sqrt(sgg);

  if (r.used.size() >= 3) {
    Eigen::Matrix2d a = Eigen::Matrix2d::Zero();
    Eigen::Vector2d b = Eigen::Vector2d::Zero();
    for (const auto& p : r.used) {
      const double w = 1.0 / (p.err * p.err);
      const Eigen::Vector2d x(p.g, p.g * p.g);
      a += w * x * x.transpose();
      b += w * x * p.D;
    }
    const Eigen::Vector2d q = a.ldlt().solve(b);
    r.curvature = std::abs(q(1)) * r.used.back().g / std::max(std::abs(q(0)), 1e-300);
  }
  const CouplingPoint& p1 = r.used[0];
  const CouplingPoint& p2 = r.used[1];
  r.ratio_expected = p2.g / p1.g;
  r.ratio_observed = p2.D / p1.D;
  r.ratio_err = std::abs(r.ratio_observed) * std::hypot(p1.err / p1.D, p2.err / p2.D);
  r.linear_ratio_ok = std::abs(r.ratio_observed - r.ratio_expected) <= 3.0 * r.ratio_err;

  r.upper = (1.0 + 1.0 / in.c) * in.ell2;
  r.upper_err = (1.0 + 1.0 / in.c) * in.ell2_err;
  r.lower = in.a_norm > 0.0 ? 4.0 * in.c * in.u * in.u / (in.a_norm * in.a_norm) : 0.0;
  const double comb = std::hypot(r.delta_err, r.upper_err);
  r.positive = r.delta > 0.0;
  r.below_upper = r.delta <= r.upper + comb;
  r.above_lower = r.delta >= std::max(0.0, r.lower - r.delta_err);
  for (const auto& p : r.used) {
    if (p.lower_bound > 0.0 && p.D < p.lower_bound - p.err) r.points_above_bound = false;
  }
  if (r.curvature > kMaxCurvature) {
    throw Error(ErrorCode::NonlinearRegime, "curvature " + fmt(r.curvature) + " exceeds " + fmt(kMaxCurvature));
  }
  return r;
}

}  // namespace qbm
