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

// Ensemble mean-squared displacement and the two time-domain diffusion
// estimators built on it: a windowed linear fit and the Abel average
// D(g, eta) = eta^2 Int_0^inf e^{-eta t} M(t) dt.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "qbm/disorder.hpp"
#include "qbm/evolution.hpp"

namespace qbm {

/// Per-seed and ensemble second moments M_ij(t) = Sum_x x_i x_j <x|rho_t|x>.
struct MsdSeries {
  int dim = 1;
  std::vector<double> times;
  std::vector<std::uint64_t> seeds;
  /// per_seed[s][t] is the dim x dim moment matrix for seeds[s] at times[t].
  std::vector<std::vector<Eigen::Matrix2d>> per_seed;
  std::vector<Eigen::Matrix2d> mean;
  std::vector<Eigen::Matrix2d> stderr_;
  /// Model parameters the series was generated with; echoed into estimates.
  GeneratorParams params;

  std::size_t num_seeds() const { return seeds.size(); }
  double t_max() const { return times.empty() ? 0.0 : times.back(); }
};

/// Recomputes ensemble mean and standard error (sample std / sqrt(n)) in seed order.
inline void reduce(MsdSeries& s) {
  const std::size_t nt = s.times.size(), ns = s.per_seed.size();
  s.mean.assign(nt, Eigen::Matrix2d::Zero());
  s.stderr_.assign(nt, Eigen::Matrix2d::Zero());
  if (ns == 0) return;
  for (std::size_t t = 0; t < nt; ++t) {
    Eigen::Matrix2d m = Eigen::Matrix2d::Zero();
    for (std::size_t k = 0; k < ns; ++k) m += s.per_seed[k][t];
    m /= static_cast<double>(ns);
    s.mean[t] = m;
    if (ns < 2) continue;
    Eigen::Matrix2d v = Eigen::Matrix2d::Zero();
    for (std::size_t k = 0; k < ns; ++k) v += (s.per_seed[k][t] - m).cwiseAbs2();
    s.stderr_[t] = (v / static_cast<double>(ns - 1) / static_cast<double>(ns)).cwiseSqrt();
  }
}

/// Builds a series from externally supplied curves (one per seed, M_11 only in d=1).
inline MsdSeries make_series(int dim, std::vector<double> times, std::vector<std::vector<Eigen::Matrix2d>> curves) {
  MsdSeries s;
  s.dim = dim;
  s.times = std::move(times);
  for (std::size_t k = 0; k < curves.size(); ++k) {
    require(curves[k].size() == s.times.size(), "make_series: curve length differs from the time grid");
    s.seeds.push_back(k);
  }
  s.per_seed = std::move(curves);
  reduce(s);
  return s;
}

inline int default_workers() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

/// Runs `task(i)` for i in [0, n) on up to `workers` threads; the first exception is rethrown.
template <class Task>
void parallel_for(std::size_t n, int workers, Task&& task) {
  const std::size_t nw = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
  if (nw <= 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < nw; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          task(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!failure) failure = std::current_exception();
          next.store(n);
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

struct MsdRequest {
  LatticeBox box{1, 8};
  GeneratorParams params;
  const GainKernel* kernel = nullptr;
  DisorderDist dist = DisorderDist::uniform();
  std::vector<std::uint64_t> seeds;
  std::vector<double> t_grid;
  EvolveOptions evolve;
  int workers = 0;  // 0 means all available cores
};

inline Eigen::Matrix2d moment_matrix(const DensityState& s) {
  Eigen::Matrix2d m = Eigen::Matrix2d::Zero();
  const int d = s.box().dim();
  for (int i = 0; i < d; ++i) {
    for (int j = i; j < d; ++j) m(i, j) = m(j, i) = position_moment(s, i, j);
  }
  return m;
}

/// Evolves |0><0| once per seed and records the moment matrix on the time grid.
/// Seeds are sorted, so the reduction order never depends on scheduling.
inline MsdSeries msd_ensemble(const MsdRequest& req) {
  req.params.check();
  require(!req.seeds.empty(), "msd_ensemble: no seeds");
  MsdSeries out;
  out.dim = req.box.dim();
  out.times = req.t_grid;
  out.seeds = req.seeds;
  out.params = req.params;
  std::sort(out.seeds.begin(), out.seeds.end());
  out.per_seed.assign(out.seeds.size(), {});
  const int workers = req.workers > 0 ? req.workers : default_workers();
  parallel_for(out.seeds.size(), workers, [&](std::size_t k) {
    const DisorderField field = req.params.lambda == 0.0 ? DisorderField::zero(req.box)
                                                         : sample(req.box, req.dist, out.seeds[k]);
    const Generator gen(req.box, req.params, field, req.kernel);
    std::vector<Eigen::Matrix2d> curve;
    curve.reserve(req.t_grid.size());
    evolve_observe(DensityState::point(req.box), gen, req.t_grid, req.evolve,
                   [&](double, const DensityState& s) { curve.push_back(moment_matrix(s)); });
    out.per_seed[k] = std::move(curve);
  });
  reduce(out);
  return out;
}

enum class Method { Fit, Abel, Resolvent, ClosedForm };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::Fit: return "fit";
    case Method::Abel: return "abel";
    case Method::Resolvent: return "resolvent";
    case Method::ClosedForm: return "closed_form";
  }
  return "unknown";
}

struct DiffusionEstimate {
  Method method = Method::Fit;
  int dim = 1;
  Eigen::Matrix2d D = Eigen::Matrix2d::Zero();
  Eigen::Matrix2d stderr_ = Eigen::Matrix2d::Zero();
  /// Per-seed (or per-configuration) estimates, when available; used for paired comparisons.
  std::vector<Eigen::Matrix2d> samples;
  double u = 0.0, lambda = 0.0, g = 0.0;
  double eta = 0.0;
  double t1 = 0.0, t2 = 0.0;
  nlohmann::json diagnostics = nlohmann::json::object();

  /// Axis average of the diagonal.
  double scalar() const {
    double s = 0.0;
    for (int i = 0; i < dim; ++i) s += D(i, i);
    return s / dim;
  }

  /// Standard error of the axis average, from the samples when present.
  double scalar_stderr() const {
    if (samples.size() >= 2) {
      std::vector<double> v;
      for (const auto& m : samples) {
        double s = 0.0;
        for (int i = 0; i < dim; ++i) s += m(i, i);
        v.push_back(s / dim);
      }
      double mean = 0.0;
      for (double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      double var = 0.0;
      for (double x : v) var += (x - mean) * (x - mean);
      const double ens = var / static_cast<double>(v.size() - 1) / static_cast<double>(v.size());
      const double extra = diagnostics.value("fit_variance", 0.0);
      return std::sqrt(ens + extra);
    }
    double s = 0.0;
    for (int i = 0; i < dim; ++i) s += stderr_(i, i) * stderr_(i, i);
    return std::sqrt(s) / dim;
  }

  /// Standard error of D_ii - D_jj from paired samples.
  double difference_stderr(int i, int j) const {
    if (samples.size() < 2) return std::hypot(stderr_(i, i), stderr_(j, j));
    std::vector<double> v;
    for (const auto& m : samples) v.push_back(m(i, i) - m(j, j));
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return std::sqrt(var / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
  }
};

inline nlohmann::json matrix_json(const Eigen::Matrix2d& m, int dim) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < dim; ++i) {
    nlohmann::json r = nlohmann::json::array();
    for (int j = 0; j < dim; ++j) r.push_back(m(i, j));
    rows.push_back(r);
  }
  return rows;
}

inline nlohmann::json to_json(const DiffusionEstimate& e) {
  nlohmann::json j = {{"method", to_string(e.method)},
                      {"u", e.u},
                      {"lambda", e.lambda},
                      {"g", e.g},
                      {"D", matrix_json(e.D, e.dim)},
                      {"stderr", matrix_json(e.stderr_, e.dim)},
                      {"D_scalar", e.scalar()},
                      {"D_scalar_stderr", e.scalar_stderr()},
                      {"diagnostics", e.diagnostics}};
  if (e.method == Method::Abel || e.method == Method::Resolvent) j["eta"] = e.eta;
  if (e.method == Method::Fit) j["window"] = {e.t1, e.t2};
  return j;
}

namespace detail {

/// Int_{a}^{b} eta^2 e^{-eta t} (m_a + s (t - a)) dt for the segment's linear interpolant.
inline double abel_segment(double eta, double a, double b, double ma, double mb) {
  const double h = b - a;
  const double s = (mb - ma) / h;
  const double ea = std::exp(-eta * a), eb = std::exp(-eta * b);
  // Int eta^2 e^{-eta t} dt = -eta e^{-eta t}; Int eta^2 (t-a) e^{-eta t} dt by parts.
  const double i0 = eta * (ea - eb);
  const double i1 = (ea - eb) - eta * h * eb;
  return ma * i0 + s * i1;
}

struct AbelParts {
  double body = 0.0;
  double tail = 0.0;
};

/// Product trapezoid with the exponential integrated exactly, plus the tail of the
/// linear extrapolation through the last two grid points.
inline AbelParts abel_integral(const std::vector<double>& t, const std::vector<double>& m, double eta) {
  AbelParts p;
  for (std::size_t k = 1; k < t.size(); ++k) p.body += abel_segment(eta, t[k - 1], t[k], m[k - 1], m[k]);
  const std::size_t n = t.size();
  const double tt = t[n - 1];
  const double slope = (m[n - 1] - m[n - 2]) / (t[n - 1] - t[n - 2]);
  const double et = std::exp(-eta * tt);
  p.tail = eta * et * m[n - 1] + slope * et;
  return p;
}

}  // namespace detail

inline constexpr double kAbelMinEtaT = 5.0;
inline constexpr double kAbelMaxTailFraction = 0.1;

/// D(g, eta) per axis pair, then reported with per-seed standard errors.
inline DiffusionEstimate abel_diffusion(const MsdSeries& msd, double eta) {
  require(msd.times.size() >= 2 && !msd.per_seed.empty(), "abel_diffusion: empty series");
  require(eta > 0.0, "abel_diffusion: eta must be positive");
  require(eta * msd.t_max() >= kAbelMinEtaT, "abel_diffusion: eta * T_max must be >= 5");
  require(msd.times.front() == 0.0, "abel_diffusion: series must start at t = 0");
  DiffusionEstimate est;
  est.method = Method::Abel;
  est.dim = msd.dim;
  est.u = msd.params.u;
  est.lambda = msd.params.lambda;
  est.g = msd.params.g;
  est.eta = eta;
  double worst_tail = 0.0;
  auto axis_values = [&](const std::vector<Eigen::Matrix2d>& curve, bool check) {
    Eigen::Matrix2d d = Eigen::Matrix2d::Zero();
    std::vector<double> m(curve.size());
    for (int i = 0; i < msd.dim; ++i) {
      for (int j = 0; j < msd.dim; ++j) {
        for (std::size_t k = 0; k < curve.size(); ++k) m[k] = curve[k](i, j);
        const detail::AbelParts p = detail::abel_integral(msd.times, m, eta);
        d(i, j) = p.body + p.tail;
        if (check && i == j) {
          const double frac = std::abs(p.tail) / std::max(std::abs(p.body + p.tail), 1e-300);
          worst_tail = std::max(worst_tail, frac);
        }
      }
    }
    return d;
  };
  est.D = axis_values(msd.mean, true);
  if (worst_tail > kAbelMaxTailFraction) {
    throw Error(ErrorCode::TailDominates, "tail correction is " + fmt(100.0 * worst_tail) +
                                              "% of the Abel integral at eta = " + fmt(eta));
  }
  for (const auto& curve : msd.per_seed) est.samples.push_back(axis_values(curve, false));
  if (est.samples.size() >= 2) {
    Eigen::Matrix2d var = Eigen::Matrix2d::Zero();
    for (const auto& s : est.samples) var += (s - est.D).cwiseAbs2();
    const double n = static_cast<double>(est.samples.size());
    est.stderr_ = (var / (n - 1.0) / n).cwiseSqrt();
  }
  est.diagnostics["tail_fraction"] = worst_tail;
  return est;
}

/// Removes the O(eta) bias of D(g, eta) by combining eta and 2 eta: 2 D(eta) - D(2 eta).
inline DiffusionEstimate abel_extrapolated(const MsdSeries& msd, double eta) {
  const DiffusionEstimate a = abel_diffusion(msd, eta);
  const DiffusionEstimate b = abel_diffusion(msd, 2.0 * eta);
  DiffusionEstimate est = a;
  est.D = 2.0 * a.D - b.D;
  est.samples.clear();
  for (std::size_t k = 0; k < a.samples.size(); ++k) est.samples.push_back(2.0 * a.samples[k] - b.samples[k]);
  if (est.samples.size() >= 2) {
    Eigen::Matrix2d var = Eigen::Matrix2d::Zero();
    for (const auto& s : est.samples) var += (s - est.D).cwiseAbs2();
    const double n = static_cast<double>(est.samples.size());
    est.stderr_ = (var / (n - 1.0) / n).cwiseSqrt();
  }
  est.diagnostics["eta_pair"] = {eta, 2.0 * eta};
  est.diagnostics["abel_eta"] = a.scalar();
  est.diagnostics["abel_2eta"] = b.scalar();
  return est;
}

inline constexpr std::size_t kFitMinPoints = 5;
inline constexpr double kFitCurvatureFlag = 0.2;

/// Fit-window lower edge: five dissipative relaxation times 1/(c g).
inline double fit_window_start(double c, double g) {
  require(c > 0.0 && g > 0.0, "fit_window_start: c and g must be positive");
  return 5.0 / (c * g);
}

namespace detail {

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_variance = 0.0;  // from residuals
};

inline LineFit ols(const std::vector<double>& t, const std::vector<double>& y) {
  const std::size_t n = t.size();
  double mt = 0.0, my = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    mt += t[k];
    my += y[k];
  }
  mt /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double stt = 0.0, sty = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    stt += (t[k] - mt) * (t[k] - mt);
    sty += (t[k] - mt) * (y[k] - my);
  }
  LineFit f;
  f.slope = sty / stt;
  f.intercept = my - f.slope * mt;
  double rss = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double r = y[k] - f.intercept - f.slope * t[k];
    rss += r * r;
  }
  f.slope_variance = n > 2 ? rss / static_cast<double>(n - 2) / stt : 0.0;
  return f;
}

}  // namespace detail

/// Least-squares slope of M_ij(t) over [t1, t2]. The ensemble error comes from the
/// spread of per-seed slopes; the residual variance of the mean-curve fit is added.
/// A quadratic refit measures curvature as |b2| (t2 - t1) / |slope|.
inline DiffusionEstimate fit_diffusion(const MsdSeries& msd, double t1, double t2) {
  require(!msd.per_seed.empty(), "fit_diffusion: empty series");
  require(t2 > t1, "fit_diffusion: window must have t2 > t1");
  std::vector<std::size_t> idx;
  for (std::size_t k = 0; k < msd.times.size(); ++k) {
    if (msd.times[k] >= t1 - 1e-12 && msd.times[k] <= t2 + 1e-12) idx.push_back(k);
  }
  if (idx.size() < kFitMinPoints) {
    throw Error(ErrorCode::WindowTooShort, "window [" + fmt(t1) + ", " + fmt(t2) +
                                               "] holds " + std::to_string(idx.size()) + " grid points, need " +
                                               std::to_string(kFitMinPoints));
  }
  std::vector<double> t(idx.size()), y(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) t[k] = msd.times[idx[k]];

  DiffusionEstimate est;
  est.method = Method::Fit;
  est.dim = msd.dim;
  est.u = msd.params.u;
  est.lambda = msd.params.lambda;
  est.g = msd.params.g;
  est.t1 = t1;
  est.t2 = t2;
  Eigen::Matrix2d fit_var = Eigen::Matrix2d::Zero();
  double worst_curv = 0.0;
  for (int i = 0; i < msd.dim; ++i) {
    for (int j = 0; j < msd.dim; ++j) {
      for (std::size_t k = 0; k < idx.size(); ++k) y[k] = msd.mean[idx[k]](i, j);
      const detail::LineFit f = detail::ols(t, y);
      est.D(i, j) = f.slope;
      fit_var(i, j) = f.slope_variance;
      if (i == j) {
        Eigen::MatrixXd a(static_cast<Eigen::Index>(t.size()), 3);
        Eigen::VectorXd b(static_cast<Eigen::Index>(t.size()));
        const double tc = 0.5 * (t.front() + t.back());
        for (std::size_t k = 0; k < t.size(); ++k) {
          const double s = t[k] - tc;
          a.row(static_cast<Eigen::Index>(k)) << 1.0, s, s * s;
          b(static_cast<Eigen::Index>(k)) = y[k];
        }
        const Eigen::Vector3d q = a.colPivHouseholderQr().solve(b);
        const double curv = std::abs(q(2)) * (t.back() - t.front()) / std::max(std::abs(q(1)), 1e-300);
        worst_curv = std::max(worst_curv, curv);
      }
    }
  }
  for (const auto& curve : msd.per_seed) {
    Eigen::Matrix2d d = Eigen::Matrix2d::Zero();
    for (int i = 0; i < msd.dim; ++i) {
      for (int j = 0; j < msd.dim; ++j) {
        for (std::size_t k = 0; k < idx.size(); ++k) y[k] = curve[idx[k]](i, j);
        d(i, j) = detail::ols(t, y).slope;
      }
    }
    est.samples.push_back(d);
  }
  Eigen::Matrix2d var = fit_var;
  if (est.samples.size() >= 2) {
    Eigen::Matrix2d ens = Eigen::Matrix2d::Zero();
    for (const auto& s : est.samples) ens += (s - est.D).cwiseAbs2();
    const double n = static_cast<double>(est.samples.size());
    var += ens / (n - 1.0) / n;
  }
  est.stderr_ = var.cwiseSqrt();
  double fv = 0.0;
  for (int i = 0; i < msd.dim; ++i) fv += fit_var(i, i);
  est.diagnostics["fit_variance"] = fv / (msd.dim * msd.dim);
  est.diagnostics["curvature"] = worst_curv;
  est.diagnostics["curvature_flag"] = worst_curv > kFitCurvatureFlag;
  est.diagnostics["points"] = idx.size();
  return est;
}

}  // namespace qbm
