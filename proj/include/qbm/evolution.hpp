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

// Generator of the disordered open-system dynamics on a truncated box and an
// adaptive Dormand-Prince 5(4) integrator for it.
//
// In site coordinates the right-hand side reads
//   d/dt rho(x,y) = -i [H, rho](x,y)
//                   + g Sum_k [r(x-y, x-y+2k) - r(0, 2k)] rho(x+k, y-k),
// with H = u Sum_{|e|=1} |x><x+e| + lambda omega(x). Entries leaving the box are zero.

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <unsupported/Eigen/MatrixFunctions>

#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <vector>

#include "qbm/disorder.hpp"
#include "qbm/gain_kernel.hpp"
#include "qbm/lattice_state.hpp"

namespace qbm {

struct GeneratorParams {
  double u = 1.0;
  double lambda = 0.0;
  double g = 0.0;

  void check() const {
    require(std::isfinite(u) && std::isfinite(lambda) && std::isfinite(g), "GeneratorParams: non-finite value");
    require(lambda >= 0.0 && g >= 0.0, "GeneratorParams: lambda and g must be >= 0");
  }
};

using SparseC = Eigen::SparseMatrix<Complex, Eigen::ColMajor>;

/// Anderson Hamiltonian u * hopping + lambda * omega on a box (sites in box order).
inline SparseC hamiltonian(const LatticeBox& box, double u, double lambda, const DisorderField& field) {
  const int n = box.num_sites();
  std::vector<Eigen::Triplet<Complex>> t;
  for (int a = 0; a < n; ++a) {
    const Site x = box.site(a);
    if (lambda != 0.0) t.emplace_back(a, a, lambda * field(x));
    if (u == 0.0) continue;
    for (int i = 0; i < box.dim(); ++i) {
      for (int s : {1, -1}) {
        const Site y = x + unit_vector(i, s);
        if (box.contains(y)) t.emplace_back(a, box.index(y), u);
      }
    }
  }
  SparseC h(n, n);
  h.setFromTriplets(t.begin(), t.end());
  return h;
}

/// Matrix-free right-hand side. Disorder and the k = 0 dissipator act entrywise; the
/// remaining dissipator couplings are held in a sparse superoperator on vec(rho).
class Generator {
 public:
  Generator(LatticeBox box, GeneratorParams params, const DisorderField& field, const GainKernel* kernel)
      : box_(box), params_(params) {
    params.check();
    if (field.box() != box) throw Error(ErrorCode::BoxMismatch, "disorder field and state live on different boxes");
    require(!box.periodic(), "Generator: evolution runs on truncated boxes");
    require(params.g == 0.0 || (kernel != nullptr && !kernel->empty()), "Generator: g > 0 needs a gain kernel");
    if (kernel != nullptr && !kernel->empty()) {
      require(kernel->dim() == box.dim(), "Generator: kernel dimension does not match the box");
    }
    const int n = box.num_sites();
    h_ = hamiltonian(box, params.u, 0.0, field);
    const int deg = 2 * box.dim();
    nbr_.assign(static_cast<std::size_t>(n * deg), -1);
    for (int a = 0; a < n; ++a) {
      for (int i = 0; i < box.dim(); ++i) {
        for (int s = 0; s < 2; ++s) {
          const Site y = box.site(a) + unit_vector(i, s == 0 ? 1 : -1);
          if (box.contains(y)) nbr_[static_cast<std::size_t>(a * deg + 2 * i + s)] = box.index(y);
        }
      }
    }
    diag_.resize(n, n);
    for (int b = 0; b < n; ++b) {
      const Site y = box.site(b);
      for (int a = 0; a < n; ++a) {
        const Site x = box.site(a);
        Complex v = -kI * params.lambda * (field(x) - field(y));
        if (params.g != 0.0) v += params.g * (kernel->value(x - y, x - y) - kernel->loss({0, 0}));
        diag_(a, b) = v;
      }
    }
    if (params.g != 0.0) build_offdiagonal(*kernel);
  }

  const LatticeBox& box() const { return box_; }
  const GeneratorParams& params() const { return params_; }
  const SparseC& hopping() const { return h_; }
  bool has_offdiagonal_dissipator() const { return off_.nonZeros() > 0; }

  void apply(const Eigen::MatrixXcd& rho, Eigen::MatrixXcd& out) const {
    const int n = box_.num_sites();
    const int deg = 2 * box_.dim();
    const Complex* r = rho.data();
    const Complex* dg = diag_.data();
    Complex* o = out.data();
    const double u = params_.u;
    // Complex products are written out to avoid the NaN-recovering library multiply.
    for (int y = 0; y < n; ++y) {
      const int* ny = &nbr_[static_cast<std::size_t>(y * deg)];
      const std::size_t col = static_cast<std::size_t>(y) * static_cast<std::size_t>(n);
      for (int x = 0; x < n; ++x) {
        const int* nx = &nbr_[static_cast<std::size_t>(x * deg)];
        double hr = 0.0, hi = 0.0;
        for (int e = 0; e < deg; ++e) {
          if (nx[e] >= 0) {
            const Complex v = r[col + static_cast<std::size_t>(nx[e])];
            hr += v.real();
            hi += v.imag();
          }
          if (ny[e] >= 0) {
            const Complex v = r[static_cast<std::size_t>(ny[e]) * static_cast<std::size_t>(n) + static_cast<std::size_t>(x)];
            hr -= v.real();
            hi -= v.imag();
          }
        }
        const Complex d = dg[col + static_cast<std::size_t>(x)];
        const Complex v = r[col + static_cast<std::size_t>(x)];
        o[col + static_cast<std::size_t>(x)] = Complex(u * hi + d.real() * v.real() - d.imag() * v.imag(),
                                                       -u * hr + d.real() * v.imag() + d.imag() * v.real());
      }
    }
    if (off_.nonZeros() > 0) {
      Eigen::Map<Eigen::VectorXcd> o(out.data(), out.size());
      Eigen::Map<const Eigen::VectorXcd> r(rho.data(), rho.size());
      o.noalias() += off_ * r;
    }
  }

  Eigen::MatrixXcd operator()(const Eigen::MatrixXcd& rho) const {
    Eigen::MatrixXcd out(rho.rows(), rho.cols());
    apply(rho, out);
    return out;
  }

  /// Full superoperator on vec(rho), column-major (index x + N y).
  SparseC assemble() const {
    const int n = box_.num_sites();
    const Eigen::Index nn = static_cast<Eigen::Index>(n) * n;
    std::vector<Eigen::Triplet<Complex>> t;
    for (int k = 0; k < h_.outerSize(); ++k) {
      for (SparseC::InnerIterator it(h_, k); it; ++it) {
        const auto a = static_cast<Eigen::Index>(it.row()), c = static_cast<Eigen::Index>(it.col());
        for (Eigen::Index y = 0; y < n; ++y) {
          t.emplace_back(a + n * y, c + n * y, -kI * it.value());  // -i H rho
          t.emplace_back(y + n * c, y + n * a, kI * it.value());   // +i rho H
        }
      }
    }
    for (Eigen::Index y = 0; y < n; ++y) {
      for (Eigen::Index x = 0; x < n; ++x) t.emplace_back(x + n * y, x + n * y, diag_(x, y));
    }
    for (int k = 0; k < off_.outerSize(); ++k) {
      for (SparseC::InnerIterator it(off_, k); it; ++it) t.emplace_back(it.row(), it.col(), it.value());
    }
    SparseC m(nn, nn);
    m.setFromTriplets(t.begin(), t.end());
    return m;
  }

 private:
  void build_offdiagonal(const GainKernel& kernel) {
    const int n = box_.num_sites();
    const int d = box_.dim();
    const int rad = kernel.radius();
    const Eigen::Index nn = static_cast<Eigen::Index>(n) * n;
    std::vector<Site> shifts;
    const int kmax = rad;  // |2k| <= 2R covers every coupling with nonzero gain or loss
    for (int a = -kmax; a <= kmax; ++a) {
      for (int b = (d == 2 ? -kmax : 0); b <= (d == 2 ? kmax : 0); ++b) {
        if (a != 0 || b != 0) shifts.push_back({a, b});
      }
    }
    std::vector<Eigen::Triplet<Complex>> t;
    for (const Site k : shifts) {
      const Site k2{2 * k[0], 2 * k[1]};
      const Complex loss = kernel.loss(k2);
      bool any_gain = false;
      for (int a = 0; a < kernel.window().size() && !any_gain; ++a) {
        const Site xi = kernel.window().site(a);
        if (kernel.value(xi, xi + k2) != Complex(0.0)) any_gain = true;
      }
      if (loss == Complex(0.0) && !any_gain) continue;
      for (int yi = 0; yi < n; ++yi) {
        const Site y = box_.site(yi);
        const Site ys = y - k;
        if (!box_.contains(ys)) continue;
        for (int xi = 0; xi < n; ++xi) {
          const Site x = box_.site(xi);
          const Site xs = x + k;
          if (!box_.contains(xs)) continue;
          const Site xi_rel = x - y;
          const Complex coeff = params_.g * (kernel.value(xi_rel, xi_rel + k2) - loss);
          if (coeff == Complex(0.0)) continue;
          t.emplace_back(xi + static_cast<Eigen::Index>(n) * yi,
                         box_.index(xs) + static_cast<Eigen::Index>(n) * box_.index(ys), coeff);
        }
      }
    }
    off_.resize(nn, nn);
    off_.setFromTriplets(t.begin(), t.end());
  }

  LatticeBox box_;
  GeneratorParams params_;
  SparseC h_;
  std::vector<int> nbr_;  // 2d neighbours per site, -1 outside the box
  Eigen::MatrixXcd diag_;
  SparseC off_;
};

/// One evaluation of the right-hand side; the state and the field must share a box.
inline DensityState apply_generator(const DensityState& state, const GeneratorParams& params,
                                    const DisorderField& field, const GainKernel* kernel) {
  if (state.box() != field.box()) throw Error(ErrorCode::BoxMismatch, "state and disorder field boxes differ");
  const Generator gen(state.box(), params, field, kernel);
  return DensityState(state.box(), gen(state.matrix()));
}

struct IntegratorStats {
  long accepted = 0;
  long rejected = 0;
  long evaluations = 0;
  double max_error = 0.0;  // largest accepted local error estimate
  double min_step = std::numeric_limits<double>::infinity();
  double max_step = 0.0;
};

struct EvolveOptions {
  double tol = 1e-9;
  /// Largest allowed sum of |rho|^2 over centres near the box edge; +inf disables the check.
  double boundary_tol = 1e-8;
  double initial_step = 0.0;  // 0 picks from the generator scale
  double max_step = 0.0;      // 0 means unbounded
  double min_step = 1e-12;
};

/// Adaptive Dormand-Prince 5(4) with FSAL and PI step control. The local error is
/// measured in the absolute sup norm. Accepted steps land exactly on every grid time,
/// where `observe(t, y)` is called (also at t_grid[0]).
template <class State, class Rhs, class Observer>
IntegratorStats dopri5(State y, Rhs&& f, const std::vector<double>& t_grid, const EvolveOptions& opts,
                       Observer&& observe) {
  require(!t_grid.empty(), "dopri5: empty time grid");
  require(opts.tol > 0.0, "dopri5: tol must be positive");
  for (std::size_t i = 1; i < t_grid.size(); ++i) {
    require(t_grid[i] > t_grid[i - 1], "dopri5: time grid must be strictly increasing");
  }
  constexpr double a21 = 1.0 / 5;
  constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
  constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                   a65 = -5103.0 / 18656;
  constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
  constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                   e6 = 22.0 / 525, e7 = -1.0 / 40;

  IntegratorStats stats;
  double t = t_grid.front();
  observe(t, y);
  if (t_grid.size() == 1) return stats;

  State k1 = y, k2 = y, k3 = y, k4 = y, k5 = y, k6 = y, k7 = y, tmp = y;
  f(y, k1);
  ++stats.evaluations;

  double h = opts.initial_step;
  if (h <= 0.0) {
    const double scale = std::max(k1.cwiseAbs().maxCoeff(), 1e-300);
    h = std::min(0.1, std::pow(opts.tol, 0.2) / scale);
  }
  if (opts.max_step > 0.0) h = std::min(h, opts.max_step);
  double err_prev = 1.0;
  constexpr double kSafety = 0.9, kAlpha = 0.7 / 5.0, kBeta = 0.4 / 5.0;

  for (std::size_t gi = 1; gi < t_grid.size(); ++gi) {
    const double target = t_grid[gi];
    while (t < target) {
      bool last = false;
      double hs = h;
      if (t + hs >= target - 1e-14 * std::max(1.0, std::abs(target))) {
        hs = target - t;
        last = true;
      }
      if (hs < opts.min_step) {
        throw Error(ErrorCode::StepSizeUnderflow, "step " + fmt(hs) + " at t = " + fmt(t));
      }
      tmp = y + (hs * a21) * k1;
      f(tmp, k2);
      tmp = y + hs * (a31 * k1 + a32 * k2);
      f(tmp, k3);
      tmp = y + hs * (a41 * k1 + a42 * k2 + a43 * k3);
      f(tmp, k4);
      tmp = y + hs * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4);
      f(tmp, k5);
      tmp = y + hs * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5);
      f(tmp, k6);
      tmp = y + hs * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
      f(tmp, k7);
      stats.evaluations += 6;
      const double en = hs * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7).cwiseAbs().maxCoeff() / opts.tol;
      if (!std::isfinite(en)) {
        throw Error(ErrorCode::StepSizeUnderflow, "non-finite error estimate at t = " + fmt(t));
      }
      if (en <= 1.0) {
        t = last ? target : t + hs;
        std::swap(y, tmp);
        std::swap(k1, k7);
        ++stats.accepted;
        stats.max_error = std::max(stats.max_error, en * opts.tol);
        stats.min_step = std::min(stats.min_step, hs);
        stats.max_step = std::max(stats.max_step, hs);
        double fac = kSafety * std::pow(std::max(en, 1e-10), -kAlpha) * std::pow(err_prev, kBeta);
        fac = std::clamp(fac, 0.2, 5.0);
        err_prev = std::max(en, 1e-4);
        // A step shortened to hit the grid should not shrink the next one.
        h = last ? std::max(h, hs * fac) : hs * fac;
      } else {
        ++stats.rejected;
        h = hs * std::max(0.2, kSafety * std::pow(en, -0.2));
      }
      if (opts.max_step > 0.0) h = std::min(h, opts.max_step);
    }
    observe(t, y);
  }
  return stats;
}

struct Trajectory {
  std::vector<double> times;
  std::vector<DensityState> states;
  IntegratorStats stats;
};

namespace detail {

inline void check_boundary(const DensityState& s, double t, double boundary_tol) {
  if (!std::isfinite(boundary_tol)) return;
  const double mass = boundary_mass(s);
  if (mass > boundary_tol) {
    throw Error(ErrorCode::BoundaryMassExceeded, "boundary mass " + fmt(mass) + " > " +
                                                     fmt(boundary_tol) + " at t = " + fmt(t));
  }
}

}  // namespace detail

/// Integrates rho_t and hands each grid-time state to `observe` without storing it.
inline IntegratorStats evolve_observe(const DensityState& state0, const Generator& gen,
                                      const std::vector<double>& t_grid, const EvolveOptions& opts,
                                      const std::function<void(double, const DensityState&)>& observe) {
  if (state0.box() != gen.box()) throw Error(ErrorCode::BoxMismatch, "state and generator boxes differ");
  require(!t_grid.empty() && t_grid.front() == 0.0, "evolve: t_grid must start at 0");
  const LatticeBox box = state0.box();
  auto rhs = [&gen](const Eigen::MatrixXcd& y, Eigen::MatrixXcd& out) { gen.apply(y, out); };
  auto obs = [&](double t, const Eigen::MatrixXcd& y) {
    DensityState s(box, y);
    detail::check_boundary(s, t, opts.boundary_tol);
    observe(t, s);
  };
  return dopri5(Eigen::MatrixXcd(state0.matrix()), rhs, t_grid, opts, obs);
}

inline Trajectory evolve(const DensityState& state0, const GeneratorParams& params, const DisorderField& field,
                         const GainKernel* kernel, const std::vector<double>& t_grid,
                         const EvolveOptions& opts = {}) {
  if (state0.box() != field.box()) throw Error(ErrorCode::BoxMismatch, "state and disorder field boxes differ");
  const Generator gen(state0.box(), params, field, kernel);
  Trajectory traj;
  traj.stats = evolve_observe(state0, gen, t_grid, opts, [&](double t, const DensityState& s) {
    traj.times.push_back(t);
    traj.states.push_back(s);
  });
  return traj;
}

inline constexpr int kDenseExpMaxDim = 4000;

/// exp(t G) rho_0 from the dense superoperator; an oracle for small boxes.
inline DensityState dense_propagate(const DensityState& state0, const Generator& gen, double t) {
  const int n = state0.box().num_sites();
  require(static_cast<long>(n) * n <= kDenseExpMaxDim, "dense_propagate: dimension exceeds the dense limit");
  const Eigen::MatrixXcd super = Eigen::MatrixXcd(gen.assemble()) * Complex(t);
  const Eigen::MatrixXcd prop = super.exp();
  Eigen::Map<const Eigen::VectorXcd> v0(state0.matrix().data(), state0.matrix().size());
  const Eigen::VectorXcd v = prop * v0;
  return DensityState(state0.box(), Eigen::Map<const Eigen::MatrixXcd>(v.data(), n, n));
}

/// C_m = 4 d e^m u + g.
inline double group_velocity_rate(int dim, double m, const GeneratorParams& p) {
  return 4.0 * dim * std::exp(m) * p.u + p.g;
}

struct CheckResult {
  bool pass = false;
  double worst = 0.0;      // largest observed value of the checked ratio
  double threshold = 0.0;  // pass iff worst <= threshold
  double at_time = 0.0;
};

/// sup_t e^{-C_m t} ||rho_t||_m / ||rho_0||_m, compared with 1 + slack.
inline CheckResult group_velocity_check(const Trajectory& traj, double m, const GeneratorParams& params,
                                        double slack = 1e-6) {
  require(!traj.states.empty(), "group_velocity_check: empty trajectory");
  const double a = weighted_norm(traj.states.front(), m);
  require(a > 0.0 && std::isfinite(a), "group_velocity_check: initial weighted norm must be finite and positive");
  const double cm = group_velocity_rate(traj.states.front().box().dim(), m, params);
  CheckResult res;
  res.threshold = 1.0 + slack;
  for (std::size_t i = 0; i < traj.states.size(); ++i) {
    const double ratio = std::exp(-cm * traj.times[i]) * weighted_norm(traj.states[i], m) / a;
    if (ratio > res.worst) {
      res.worst = ratio;
      res.at_time = traj.times[i];
    }
  }
  res.pass = res.worst <= res.threshold;
  return res;
}

/// Box radius from the propagation bound: L >= (4 d u + g) T + margin.
inline int auto_box_radius(int dim, const GeneratorParams& p, double horizon, int margin = 4) {
  return static_cast<int>(std::ceil(group_velocity_rate(dim, 0.0, p) * horizon)) + margin;
}

/// CSV rows "t,X1[,X2],xi1[,xi2],re,im" for every stored state.
inline void write_trajectory_csv(std::ostream& os, const Trajectory& traj) {
  if (traj.states.empty()) return;
  const int d = traj.states.front().box().dim();
  os << (d == 1 ? "t,X1,xi1,re,im\n" : "t,X1,X2,xi1,xi2,re,im\n");
  os.precision(17);
  for (std::size_t i = 0; i < traj.states.size(); ++i) {
    const DensityState& s = traj.states[i];
    const LatticeBox& box = s.box();
    for (int yi = 0; yi < box.num_sites(); ++yi) {
      for (int xi = 0; xi < box.num_sites(); ++xi) {
        const Site x = box.site(xi), y = box.site(yi);
        const Site X = x + y, r = x - y;
        const Complex v = s.matrix()(xi, yi);
        os << traj.times[i] << ',' << X[0];
        if (d == 2) os << ',' << X[1];
        os << ',' << r[0];
        if (d == 2) os << ',' << r[1];
        os << ',' << v.real() << ',' << v.imag() << '\n';
      }
    }
  }
}

}  // namespace qbm
