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

// Randomized checks of the resolvent limit lim_{s -> inf} <phi, (s A + B)^{-1} psi>
// for normal A with Re A >= 0 and Re B >= c > 0. The limit is <P phi, (P B P)^{-1} P psi>
// with P the projector onto ker A, and 0 when the kernel is trivial.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "qbm/core.hpp"
#include "qbm/rng.hpp"

namespace qbm {

inline constexpr double kNormalityTol = 1e-10;
inline constexpr double kKernelRankTol = 1e-10;

struct ResolventProblem {
  Eigen::MatrixXcd a;
  Eigen::MatrixXcd b;
  Eigen::VectorXcd phi;
  Eigen::VectorXcd psi;
  std::vector<double> lambdas;  // strictly increasing, positive
};

struct ProblemCheck {
  double normality_defect = 0.0;
  double re_a_min = 0.0;
  double c = 0.0;  // smallest eigenvalue of Re B
};

/// Throws NotNormal or NotAccretive when the hypotheses fail.
inline ProblemCheck check_problem(const ResolventProblem& p) {
  const Eigen::Index n = p.a.rows();
  require(n > 0 && p.a.cols() == n && p.b.rows() == n && p.b.cols() == n, "A and B must be square and equal size");
  require(p.phi.size() == n && p.psi.size() == n, "phi and psi must match the matrix size");
  require(!p.lambdas.empty(), "lambda list is empty");
  for (std::size_t i = 0; i < p.lambdas.size(); ++i) {
    require(p.lambdas[i] > 0.0, "lambdas must be positive");
    require(i == 0 || p.lambdas[i] > p.lambdas[i - 1], "lambdas must be strictly increasing");
  }
  ProblemCheck out;
  out.normality_defect = (p.a * p.a.adjoint() - p.a.adjoint() * p.a).norm();
  if (out.normality_defect > kNormalityTol * std::max(1.0, p.a.squaredNorm())) {
    throw Error(ErrorCode::NotNormal, "|AA* - A*A| = " + fmt(out.normality_defect));
  }
  const Eigen::MatrixXcd re_a = 0.5 * (p.a + p.a.adjoint());
  const Eigen::MatrixXcd re_b = 0.5 * (p.b + p.b.adjoint());
  out.re_a_min = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd>(re_a, Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
  out.c = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd>(re_b, Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
  const double scale = std::max(1.0, p.a.norm());
  if (out.re_a_min < -kNormalityTol * scale) {
    throw Error(ErrorCode::NotAccretive, "Re A has eigenvalue " + fmt(out.re_a_min));
  }
  if (out.c <= 0.0) throw Error(ErrorCode::NotAccretive, "Re B has eigenvalue " + fmt(out.c));
  return out;
}

struct LimitResult {
  std::vector<Complex> values;   // <phi, (s A + B)^{-1} psi> per lambda
  std::vector<double> h_norms;   // |(s A + B)^{-1} psi|
  Complex extrapolated;          // linear in 1/s through the last two points
  Complex reference;
  int kernel_dim = 0;
  ProblemCheck check;
};

inline LimitResult limit_resolvent(const ResolventProblem& p) {
  LimitResult out;
  out.check = check_problem(p);
  for (double s : p.lambdas) {
    const Eigen::VectorXcd h = (s * p.a + p.b).fullPivLu().solve(p.psi);
    out.values.push_back(p.phi.dot(h));
    out.h_norms.push_back(h.norm());
  }
  const std::size_t m = out.values.size();
  if (m >= 2) {
    const double s1 = p.lambdas[m - 2];
    const double s2 = p.lambdas[m - 1];
    out.extrapolated = (s2 * out.values[m - 1] - s1 * out.values[m - 2]) / (s2 - s1);
  } else {
    out.extrapolated = out.values.back();
  }

  Eigen::JacobiSVD<Eigen::MatrixXcd> svd(p.a, Eigen::ComputeFullV);
  const Eigen::VectorXd sv = svd.singularValues();
  const double cut = kKernelRankTol * (sv.size() > 0 ? sv(0) : 0.0);
  std::vector<Eigen::Index> ker;
  for (Eigen::Index k = 0; k < sv.size(); ++k) {
    if (sv(k) <= cut) ker.push_back(k);
  }
  out.kernel_dim = static_cast<int>(ker.size());
  if (ker.empty()) {
    out.reference = Complex(0.0, 0.0);
    return out;
  }
  Eigen::MatrixXcd z(p.a.rows(), out.kernel_dim);
  for (int k = 0; k < out.kernel_dim; ++k) z.col(k) = svd.matrixV().col(ker[static_cast<std::size_t>(k)]);
  const Eigen::MatrixXcd bz = z.adjoint() * p.b * z;
  const Eigen::VectorXcd rhs = z.adjoint() * p.psi;
  out.reference = (z.adjoint() * p.phi).dot(bz.fullPivLu().solve(rhs));
  return out;
}

/// Random problem of size n whose A has an exact kernel of dimension kernel_dim.
/// A = U diag(mu) U* with Re mu >= 0 and |mu| >= 0.1 off the kernel; B = c + X X*/n + skew.
inline ResolventProblem random_problem(int n, int kernel_dim, std::uint64_t seed, std::vector<double> lambdas,
                                       double c = 0.5) {
  require(n > 0 && kernel_dim >= 0 && kernel_dim <= n, "kernel dimension out of range");
  CounterRng rng(seed, 7u);
  auto cplx = [&rng] { return Complex(2.0 * rng.uniform() - 1.0, 2.0 * rng.uniform() - 1.0); };
  Eigen::MatrixXcd g(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) g(i, j) = cplx();
  const Eigen::MatrixXcd u = Eigen::HouseholderQR<Eigen::MatrixXcd>(g).householderQ();
  Eigen::VectorXcd mu(n);
  for (int k = 0; k < n; ++k) {
    if (k < kernel_dim) {
      mu(k) = 0.0;
      continue;
    }
    Complex v(rng.uniform(), 4.0 * rng.uniform() - 2.0);
    if (std::abs(v) < 0.1) v = 0.1 * v / std::max(std::abs(v), 1e-12) + Complex(0.1, 0.0);
    mu(k) = v;
  }
  ResolventProblem p;
  p.a = u * mu.asDiagonal() * u.adjoint();
  Eigen::MatrixXcd x(n, n), y(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      x(i, j) = cplx();
      y(i, j) = cplx();
    }
  p.b = c * Eigen::MatrixXcd::Identity(n, n) + x * x.adjoint() / static_cast<double>(n) + 0.5 * (y - y.adjoint());
  p.phi.resize(n);
  p.psi.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    p.phi(i) = cplx();
    p.psi(i) = cplx();
  }
  p.lambdas = std::move(lambdas);
  return p;
}

/// Least-squares slope of log y against log x over points with y > 0.
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(y[i] > 0.0)) continue;
    const double lx = std::log(x[i]);
    const double ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
    ++n;
  }
  require(n >= 2, "need two positive points for a log-log slope");
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

struct AppendixOptions {
  int cases = 50;
  int n = 20;
  int kernel_dim = 3;
  std::uint64_t seed = 1;
  double lambda_max = 1e6;
  double tolerance = 1e-4;       // |value - reference| < tolerance (1 + |reference|)
  double max_slope = -0.9;
};

struct AppendixReport {
  int cases = 0;
  double worst_limit_error = 0.0;    // relative, at lambda_max
  double worst_convergence_slope = -1e300;
  double worst_decay_slope = -1e300;  // kernel-free cases
  double worst_bound_ratio = 0.0;    // |h| c / |psi|, must stay <= 1
  double worst_decay_bound_ratio = 0.0;  // |value| over the a-priori 1/lambda bound
  bool limit_pass = false;
  bool decay_pass = false;
  bool bound_pass = false;
  bool pass() const { return limit_pass && decay_pass && bound_pass; }
};

inline nlohmann::json to_json(const AppendixReport& r) {
  return {{"cases", r.cases},
          {"worst_limit_error", r.worst_limit_error},
          {"worst_convergence_slope", r.worst_convergence_slope},
          {"worst_decay_slope", r.worst_decay_slope},
          {"worst_bound_ratio", r.worst_bound_ratio},
          {"worst_decay_bound_ratio", r.worst_decay_bound_ratio},
          {"limit_pass", r.limit_pass},
          {"decay_pass", r.decay_pass},
          {"bound_pass", r.bound_pass},
          {"pass", r.pass()}};
}

/// Runs `cases` problems with a kernel and `cases` kernel-free problems.
inline AppendixReport appendix_checks(const AppendixOptions& opt = {}) {
  require(opt.cases > 0 && opt.lambda_max > 1e2, "appendix options out of range");
  std::vector<double> lambdas;
  for (double s = 1e2; s <= opt.lambda_max * (1.0 + 1e-12); s *= 10.0) lambdas.push_back(s);
  AppendixReport rep;
  rep.cases = opt.cases;
  for (int k = 0; k < opt.cases; ++k) {
    const ResolventProblem p = random_problem(opt.n, opt.kernel_dim, opt.seed + 2 * static_cast<std::uint64_t>(k), lambdas);
    const LimitResult r = limit_resolvent(p);
    const double err = std::abs(r.values.back() - r.reference) / (1.0 + std::abs(r.reference));
    rep.worst_limit_error = std::max(rep.worst_limit_error, err);
    std::vector<double> errs;
    for (const Complex& v : r.values) errs.push_back(std::abs(v - r.reference));
    rep.worst_convergence_slope = std::max(rep.worst_convergence_slope, loglog_slope(lambdas, errs));
    for (double h : r.h_norms) rep.worst_bound_ratio = std::max(rep.worst_bound_ratio, h * r.check.c / p.psi.norm());

    const ResolventProblem q = random_problem(opt.n, 0, opt.seed + 2 * static_cast<std::uint64_t>(k) + 1, lambdas);
    const LimitResult s = limit_resolvent(q);
    std::vector<double> mags;
    for (const Complex& v : s.values) mags.push_back(std::abs(v));
    rep.worst_decay_slope = std::max(rep.worst_decay_slope, loglog_slope(lambdas, mags));
    for (double h : s.h_norms) rep.worst_bound_ratio = std::max(rep.worst_bound_ratio, h * s.check.c / q.psi.norm());
    const Eigen::VectorXd sv = Eigen::JacobiSVD<Eigen::MatrixXcd>(q.a).singularValues();
    const double sigma_min = sv(sv.size() - 1);
    const double b_norm = Eigen::JacobiSVD<Eigen::MatrixXcd>(q.b).singularValues()(0);
    for (std::size_t i = 0; i < lambdas.size(); ++i) {
      const double bound = (1.0 + b_norm / s.check.c) * q.psi.norm() * q.phi.norm() / (lambdas[i] * sigma_min);
      rep.worst_decay_bound_ratio = std::max(rep.worst_decay_bound_ratio, mags[i] / bound);
    }
  }
  rep.limit_pass = rep.worst_limit_error < opt.tolerance && rep.worst_convergence_slope <= opt.max_slope;
  rep.decay_pass = rep.worst_decay_slope <= opt.max_slope && rep.worst_decay_bound_ratio <= 1.0;
  rep.bound_pass = rep.worst_bound_ratio <= 1.0 + 1e-9;
  return rep;
}

}  // namespace qbm
