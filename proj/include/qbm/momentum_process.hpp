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

// Continuous-time jump process of the quasi-momentum on the N_q^d torus grid.
// A jump q -> p happens at rate rhat(p, q) / N with N = N_q^d grid cells.

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <limits>
#include <ostream>
#include <vector>

#include "qbm/gain_kernel.hpp"
#include "qbm/rng.hpp"

namespace qbm {

class JumpProcessModel {
 public:
  /// rates(a, b) = rhat(p_a, p_b) >= 0; the jump b -> a has rate rates(a, b) / N.
  /// Negative rates down to -negative_tol are clamped to zero; anything below is an error.
  JumpProcessModel(int dim, int nq, Eigen::MatrixXd rates, double negative_tol = 0.0)
      : dim_(dim), nq_(nq), rates_(std::move(rates)) {
    require(dim == 1 || dim == 2, "JumpProcessModel: dim must be 1 or 2");
    const int n = torus_grid_size(dim, nq);
    require(rates_.rows() == n && rates_.cols() == n, "JumpProcessModel: rate matrix size mismatch");
    const double scale = rates_.size() ? rates_.cwiseAbs().maxCoeff() : 0.0;
    const double floor = -std::max(negative_tol, 1e-12 * std::max(1.0, scale));
    for (Eigen::Index i = 0; i < rates_.size(); ++i) {
      double& v = rates_.data()[i];
      require(v >= floor, "JumpProcessModel: negative rate " + fmt(v));
      clamped_ = std::max(clamped_, -v);
      v = std::max(v, 0.0);
    }
    const double cell = 1.0 / n;
    exit_ = cell * rates_.colwise().sum().transpose();
    cdf_.resize(static_cast<std::size_t>(n));
    for (int b = 0; b < n; ++b) {
      auto& c = cdf_[static_cast<std::size_t>(b)];
      c.resize(static_cast<std::size_t>(n));
      double acc = 0.0;
      for (int a = 0; a < n; ++a) {
        acc += rates_(a, b);
        c[static_cast<std::size_t>(a)] = acc;
      }
    }
  }

  static JumpProcessModel from_kernel(const GainKernel& k, int nq) {
    return JumpProcessModel(k.dim(), nq, rate_grid(k, nq));
  }

  int dim() const { return dim_; }
  int nq() const { return nq_; }
  int num_states() const { return static_cast<int>(rates_.rows()); }
  const Eigen::MatrixXd& rates() const { return rates_; }
  /// Largest negative rate that was clamped to zero.
  double clamped() const { return clamped_; }

  /// Lambda(p) = (1/N) Sum_q rhat(q, p), the holding rate at p.
  double exit_rate(int state) const { return exit_(state); }
  const Eigen::VectorXd& exit_rates() const { return exit_; }

  TorusPoint point(int state) const { return torus_grid_point(dim_, nq_, state); }

  /// Target of a jump out of `from`, drawn with u in [0, 1).
  int draw_target(int from, double u) const {
    const auto& c = cdf_[static_cast<std::size_t>(from)];
    const double x = u * c.back();
    const auto it = std::upper_bound(c.begin(), c.end(), x);
    return std::min(static_cast<int>(it - c.begin()), num_states() - 1);
  }

 private:
  int dim_;
  int nq_;
  Eigen::MatrixXd rates_;
  Eigen::VectorXd exit_;
  std::vector<std::vector<double>> cdf_;
  double clamped_ = 0.0;
};

struct JumpPath {
  std::vector<double> times;
  std::vector<int> states;
  bool absorbed = false;
};

/// Exact CTMC path on [0, T]; a zero exit rate ends the path with absorbed = true.
inline JumpPath simulate(const JumpProcessModel& model, int start, double horizon, std::uint64_t seed,
                         std::uint32_t stream = 0) {
  require(start >= 0 && start < model.num_states(), "simulate: start state out of range");
  require(horizon >= 0.0, "simulate: horizon must be >= 0");
  CounterRng rng(seed, stream);
  JumpPath path;
  path.times.push_back(0.0);
  path.states.push_back(start);
  double t = 0.0;
  int s = start;
  for (;;) {
    const double rate = model.exit_rate(s);
    if (rate <= 0.0) {
      path.absorbed = true;
      break;
    }
    t += -std::log(rng.uniform_pos()) / rate;
    if (t > horizon) break;
    s = model.draw_target(s, rng.uniform());
    path.times.push_back(t);
    path.states.push_back(s);
  }
  return path;
}

inline void require_not_absorbed(const JumpPath& path) {
  if (path.absorbed) {
    throw Error(ErrorCode::AbsorbingState, "zero exit rate at grid state " + fmt(path.states.back()));
  }
}

/// States of the embedded jump chain after each of n jumps.
inline std::vector<int> simulate_jumps(const JumpProcessModel& model, int start, std::size_t njumps,
                                       std::uint64_t seed) {
  CounterRng rng(seed, 0x6a756d70u);
  std::vector<int> out;
  out.reserve(njumps);
  int s = start;
  for (std::size_t i = 0; i < njumps; ++i) {
    if (model.exit_rate(s) <= 0.0) {
      throw Error(ErrorCode::AbsorbingState, "zero exit rate at grid state " + std::to_string(s));
    }
    s = model.draw_target(s, rng.uniform());
    out.push_back(s);
  }
  return out;
}

/// Dense generator (L f)(p) = (1/N) Sum_q rhat(p, q) [f(q) - f(p)].
inline Eigen::MatrixXd generator_matrix(const JumpProcessModel& model) { return jump_generator(model.rates()); }

inline double mixing_rate(const JumpProcessModel& model) { return symmetrized_gap(generator_matrix(model)).gap; }

/// Slowest relaxation rate -Re(lambda) over the nonzero spectrum of the process generator
/// Q(a, b) = rate(b -> a) - delta_ab Lambda(b), assembled from the simulation's exit rates and
/// solved without symmetrization. Equals mixing_rate for symmetric kernels.
inline double generator_gap(const JumpProcessModel& model) {
  const int n = model.num_states();
  Eigen::MatrixXd q = model.rates() / static_cast<double>(n);
  q.diagonal() -= model.exit_rates();
  const Eigen::VectorXcd ev = Eigen::EigenSolver<Eigen::MatrixXd>(q, false).eigenvalues();
  const double tol = 1e-10 * std::max(1.0, model.exit_rates().maxCoeff());
  double gap = std::numeric_limits<double>::infinity();
  bool zero_seen = false;
  for (Eigen::Index k = 0; k < ev.size(); ++k) {
    if (!zero_seen && std::abs(ev(k)) <= tol) {
      zero_seen = true;
      continue;
    }
    gap = std::min(gap, -ev(k).real());
  }
  return gap;
}

struct ChiSquareResult {
  double statistic = 0.0;
  double critical = 0.0;
  int dof = 0;
  std::size_t samples = 0;
  int thinning = 1;
  bool pass = false;
  std::vector<std::size_t> counts;
};

/// Pearson test of the embedded-chain occupation against its stationary law,
/// proportional to Lambda(p) times Haar measure. The chain is thinned so that
/// consecutive recorded states are close to independent.
inline ChiSquareResult stationarity_test(const JumpProcessModel& model, std::size_t samples, std::uint64_t seed,
                                         double level = 0.01) {
  const int n = model.num_states();
  const double gap = mixing_rate(model);
  const double mmax = model.exit_rates().maxCoeff();
  require(gap > 0.0 && mmax > 0.0, "stationarity_test: process is not mixing");
  ChiSquareResult res;
  res.thinning = std::max(1, static_cast<int>(std::ceil(std::log(1e3) / std::min(1.0, gap / mmax))));
  res.samples = samples;
  const auto jumps = simulate_jumps(model, 0, samples * static_cast<std::size_t>(res.thinning), seed);
  res.counts.assign(static_cast<std::size_t>(n), 0);
  for (std::size_t i = static_cast<std::size_t>(res.thinning) - 1; i < jumps.size();
       i += static_cast<std::size_t>(res.thinning)) {
    ++res.counts[static_cast<std::size_t>(jumps[i])];
  }
  const double total = model.exit_rates().sum();
  for (int a = 0; a < n; ++a) {
    const double expected = static_cast<double>(samples) * model.exit_rate(a) / total;
    if (expected <= 0.0) continue;
    const double diff = static_cast<double>(res.counts[static_cast<std::size_t>(a)]) - expected;
    res.statistic += diff * diff / expected;
    ++res.dof;
  }
  res.dof -= 1;
  boost::math::chi_squared_distribution<double> dist(res.dof);
  res.critical = boost::math::quantile(boost::math::complement(dist, level));
  res.pass = res.statistic <= res.critical;
  return res;
}

struct TvDecay {
  std::vector<double> times;
  std::vector<double> tv;
  double noise_floor = 0.0;
  double fitted_rate = 0.0;
  int points_used = 0;
};

/// Total-variation distance to Haar measure along `paths` independent paths started at `start`,
/// with the exponential rate fitted on points well above the sampling noise floor.
inline TvDecay tv_decay(const JumpProcessModel& model, int start, const std::vector<double>& times,
                        std::size_t paths, std::uint64_t seed) {
  require(!times.empty() && std::is_sorted(times.begin(), times.end()), "tv_decay: times must be sorted");
  const int n = model.num_states();
  std::vector<std::vector<std::size_t>> counts(times.size(), std::vector<std::size_t>(static_cast<std::size_t>(n), 0));
  for (std::size_t k = 0; k < paths; ++k) {
    const JumpPath path = simulate(model, start, times.back(), seed, static_cast<std::uint32_t>(k));
    std::size_t j = 0;
    for (std::size_t ti = 0; ti < times.size(); ++ti) {
      while (j + 1 < path.times.size() && path.times[j + 1] <= times[ti]) ++j;
      ++counts[ti][static_cast<std::size_t>(path.states[j])];
    }
  }
  TvDecay out;
  out.times = times;
  const double unif = 1.0 / n;
  for (const auto& c : counts) {
    double tv = 0.0;
    for (std::size_t a = 0; a < c.size(); ++a) tv += std::abs(static_cast<double>(c[a]) / static_cast<double>(paths) - unif);
    out.tv.push_back(0.5 * tv);
  }
  // E|hat f - f| ~ sqrt(2 f / (pi n)) per cell at stationarity.
  out.noise_floor = 0.5 * n * std::sqrt(2.0 * unif / (kPi * static_cast<double>(paths)));
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int m = 0;
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (out.tv[i] < 10.0 * out.noise_floor) continue;
    const double y = std::log(out.tv[i]);
    sx += times[i];
    sy += y;
    sxx += times[i] * times[i];
    sxy += times[i] * y;
    ++m;
  }
  out.points_used = m;
  if (m >= 2) out.fitted_rate = -(m * sxy - sx * sy) / (m * sxx - sx * sx);
  return out;
}

inline void write_path_csv(std::ostream& os, const JumpProcessModel& model, const JumpPath& path) {
  os << (model.dim() == 1 ? "t,p1\n" : "t,p1,p2\n");
  os.precision(17);
  for (std::size_t i = 0; i < path.times.size(); ++i) {
    const TorusPoint p = model.point(path.states[i]);
    os << path.times[i] << ',' << p[0];
    if (model.dim() == 2) os << ',' << p[1];
    os << '\n';
  }
}

inline nlohmann::json histogram_json(const JumpProcessModel& model, const std::vector<std::size_t>& counts) {
  nlohmann::json bins = nlohmann::json::array();
  for (std::size_t a = 0; a < counts.size(); ++a) {
    const TorusPoint p = model.point(static_cast<int>(a));
    nlohmann::json pj = model.dim() == 1 ? nlohmann::json::array({p[0]}) : nlohmann::json::array({p[0], p[1]});
    bins.push_back({{"p", pj}, {"count", counts[a]}});
  }
  return {{"N_q", model.nq()}, {"dim", model.dim()}, {"bins", bins}};
}

}  // namespace qbm
