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

// k = 0 fiber of the disorder-augmented dynamics realized on one periodic
// disorder configuration. Functions f(xi, omega) are sampled on the translation
// orbit omega_a(s) = omega_0(s + a), a in the periodic box B, so the space is
// indexed by (xi, a) with |xi|_inf <= Xi. With that frame
//   (T f)(xi, a) = Sum_{|e|=1} [f(xi + e, a) - f(xi + e, a - e)],
//   (V f)(xi, a) = (omega_0(xi + a) - omega_0(a)) f(xi, a),
//   (L f)(xi, a) = Sum_eta [r(xi, eta) - r(0, eta - xi)] f(eta, a - (eta - xi)/2),
// and G = i (u T + lambda V) - g L. The inner product is (1/|B|) Sum_{xi, a}.

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "qbm/diffusion/msd.hpp"
#include "qbm/disorder.hpp"
#include "qbm/evolution.hpp"
#include "qbm/gain_kernel.hpp"

namespace qbm {

using SparseRowC = Eigen::SparseMatrix<Complex, Eigen::RowMajor>;

namespace detail {

/// Largest singular value by power iteration on A^H A from a fixed start vector.
inline double operator_norm(const SparseC& a, int iterations = 400) {
  if (a.nonZeros() == 0) return 0.0;
  Eigen::VectorXcd v(a.cols());
  for (Eigen::Index k = 0; k < v.size(); ++k) v(k) = 1.0 + 0.37 * std::sin(1.3 * static_cast<double>(k));
  v.normalize();
  double sigma = 0.0;
  for (int it = 0; it < iterations; ++it) {
    Eigen::VectorXcd w = a.adjoint() * (a * v);
    const double n = w.norm();
    if (n == 0.0) return 0.0;
    sigma = std::sqrt(n);
    v = w / n;
  }
  return std::max(sigma, (a * v).norm());
}

}  // namespace detail

class FiberSpace {
 public:
  FiberSpace(LatticeBox box, int xi_radius, GeneratorParams params, DisorderField omega)
      : box_(box), xi_(box.dim(), xi_radius), params_(params), omega_(std::move(omega)) {}

  const LatticeBox& box() const { return box_; }
  const Window& xi_window() const { return xi_; }
  const GeneratorParams& params() const { return params_; }
  const DisorderField& omega() const { return omega_; }
  int dim() const { return box_.dim(); }
  int num_translations() const { return box_.num_sites(); }
  int size() const { return xi_.size() * box_.num_sites(); }
  int index(Site xi, Site a) const { return xi_.index(xi) * box_.num_sites() + box_.index(a); }

  const SparseC& T() const { return t_; }
  const SparseC& V() const { return v_; }
  const SparseC& L() const { return l_; }
  /// A = u T + lambda V
  const SparseC& A() const { return a_; }
  /// G = i A - g L
  const SparseC& G() const { return g_; }

  /// (1/|B|) Sum conj(x) y
  Complex inner(const Eigen::VectorXcd& x, const Eigen::VectorXcd& y) const {
    return x.dot(y) / static_cast<double>(num_translations());
  }

  /// (delta_{e_i} - delta_{-e_i}) (x) 1
  Eigen::VectorXcd phi(int axis = 0) const {
    Eigen::VectorXcd f = Eigen::VectorXcd::Zero(size());
    for (int a = 0; a < num_translations(); ++a) {
      const Site s = box_.site(a);
      f(index(unit_vector(axis, 1), s)) = 1.0;
      f(index(unit_vector(axis, -1), s)) = -1.0;
    }
    return f;
  }

  /// delta_0 (x) 1
  Eigen::VectorXcd vacuum() const {
    Eigen::VectorXcd f = Eigen::VectorXcd::Zero(size());
    for (int a = 0; a < num_translations(); ++a) f(index({0, 0}, box_.site(a))) = 1.0;
    return f;
  }

  /// Positions of the xi = 0 entries, one per translation.
  std::vector<int> origin_indices() const {
    std::vector<int> out;
    for (int a = 0; a < num_translations(); ++a) out.push_back(index({0, 0}, box_.site(a)));
    return out;
  }

 private:
  friend FiberSpace build_fiber_space(const LatticeBox&, int, const GeneratorParams&, const GainKernel*,
                                      const DisorderField&, double);
  LatticeBox box_;
  Window xi_;
  GeneratorParams params_;
  DisorderField omega_;
  SparseC t_, v_, l_, a_, g_;
};

inline constexpr double kFiberConstraintTol = 1e-12;

/// Assembles T, V, L and G on a periodic box. Throws KernelConstraintViolated when
/// the kernel does not respect the parity of item 1 (so (eta - xi)/2 is not a lattice
/// vector) or when L or its adjoint fails to annihilate delta_0 (x) 1.
inline FiberSpace build_fiber_space(const LatticeBox& box, int xi_radius, const GeneratorParams& params,
                                    const GainKernel* kernel, const DisorderField& omega,
                                    double tol = kFiberConstraintTol) {
  params.check();
  require(box.periodic(), "build_fiber_space: box must be periodic");
  require(box.side() >= 3, "build_fiber_space: periodic box must have side >= 3");
  require(xi_radius >= 1, "build_fiber_space: xi radius must be >= 1");
  if (omega.box() != box) throw Error(ErrorCode::BoxMismatch, "disorder field box differs from the fiber box");
  require(params.g == 0.0 || kernel != nullptr, "build_fiber_space: g > 0 needs a kernel");
  if (kernel != nullptr) require(kernel->dim() == box.dim(), "build_fiber_space: kernel dimension mismatch");

  FiberSpace fs(box, xi_radius, params, omega);
  const Window& w = fs.xi_;
  const int nb = box.num_sites();
  const int n = fs.size();
  const int d = box.dim();
  std::vector<Eigen::Triplet<Complex>> tt, vt, lt;
  for (int xk = 0; xk < w.size(); ++xk) {
    const Site xi = w.site(xk);
    for (int ak = 0; ak < nb; ++ak) {
      const Site a = box.site(ak);
      const int row = fs.index(xi, a);
      for (int axis = 0; axis < d; ++axis) {
        for (int sign : {1, -1}) {
          const Site e = unit_vector(axis, sign);
          const Site eta = xi + e;
          if (!w.contains(eta)) continue;
          tt.emplace_back(row, fs.index(eta, a), 1.0);
          tt.emplace_back(row, fs.index(eta, a - e), -1.0);
        }
      }
      const double dv = omega(xi + a) - omega(a);
      if (dv != 0.0) vt.emplace_back(row, row, dv);
      if (kernel == nullptr) continue;
      const int reach = 2 * kernel->radius();
      for (int ek = 0; ek < w.size(); ++ek) {
        const Site eta = w.site(ek);
        const Site k = eta - xi;
        if (linf_norm(k) > reach) continue;
        const Complex kv = kernel->value(xi, eta) - kernel->loss(k);
        if (kv == Complex(0.0)) continue;
        if (!is_even(k[0]) || !is_even(k[1])) {
          throw Error(ErrorCode::KernelConstraintViolated,
                      "kernel couples xi and eta of different parity (item 1 of the kernel hypotheses)");
        }
        lt.emplace_back(row, fs.index(eta, a - Site{k[0] / 2, k[1] / 2}), kv);
      }
    }
  }
  fs.t_.resize(n, n);
  fs.t_.setFromTriplets(tt.begin(), tt.end());
  fs.v_.resize(n, n);
  fs.v_.setFromTriplets(vt.begin(), vt.end());
  fs.l_.resize(n, n);
  fs.l_.setFromTriplets(lt.begin(), lt.end());
  fs.t_.prune(Complex(0.0));
  fs.a_ = params.u * fs.t_ + params.lambda * fs.v_;
  fs.g_ = kI * fs.a_ - params.g * fs.l_;
  fs.g_.makeCompressed();

  const Eigen::VectorXcd vac = fs.vacuum();
  const double scale = std::sqrt(static_cast<double>(nb));
  const double lv = (fs.l_ * vac).norm() / scale;
  const double la = (fs.l_.adjoint() * vac).norm() / scale;
  if (lv > tol || la > tol) {
    throw Error(ErrorCode::KernelConstraintViolated, "|L (delta_0 x 1)| = " + fmt(lv) +
                                                         ", |L^H (delta_0 x 1)| = " + fmt(la));
  }
  return fs;
}

/// Structural checks on an assembled fiber space.
struct FiberChecks {
  double g_vacuum = 0.0;          // |G (delta_0 x 1)|
  double g_adjoint_vacuum = 0.0;  // |G^H (delta_0 x 1)|
  double a_asymmetry = 0.0;       // max |A - A^T|
  double a_imag = 0.0;            // max |Im A|
};

inline FiberChecks check_fiber_space(const FiberSpace& fs) {
  FiberChecks c;
  const Eigen::VectorXcd vac = fs.vacuum();
  const double scale = std::sqrt(static_cast<double>(fs.num_translations()));
  c.g_vacuum = (fs.G() * vac).norm() / scale;
  c.g_adjoint_vacuum = (fs.G().adjoint() * vac).norm() / scale;
  const SparseC diff = fs.A() - SparseC(fs.A().transpose());
  for (int k = 0; k < diff.outerSize(); ++k) {
    for (SparseC::InnerIterator it(diff, k); it; ++it) c.a_asymmetry = std::max(c.a_asymmetry, std::abs(it.value()));
  }
  for (int k = 0; k < fs.A().outerSize(); ++k) {
    for (SparseC::InnerIterator it(fs.A(), k); it; ++it) c.a_imag = std::max(c.a_imag, std::abs(it.value().imag()));
  }
  return c;
}

struct DiffusionBounds {
  double lower = 0.0;           // 4 g u^2 c / |G|^2
  double upper = 0.0;           // 2 u^2 / (c g), as stated with the resolvent formula
  double upper_norm_phi = 0.0;  // 4 u^2 / (c g) = 2 u^2 |phi|^2 / (c g)
  double g_norm = 0.0;
};

inline DiffusionBounds diffusion_bounds(const FiberSpace& fs, double c) {
  const GeneratorParams& p = fs.params();
  require(c > 0.0 && p.g > 0.0, "diffusion_bounds: need c > 0 and g > 0");
  DiffusionBounds b;
  b.g_norm = detail::operator_norm(fs.G());
  b.lower = 4.0 * p.g * p.u * p.u * c / (b.g_norm * b.g_norm);
  b.upper = 2.0 * p.u * p.u / (c * p.g);
  b.upper_norm_phi = 4.0 * p.u * p.u / (c * p.g);
  return b;
}

/// Smallest eigenvalue of Re(-g L) on functions vanishing at xi = 0. Fourier transforming
/// in the translation label conjugates L by a diagonal unitary, so every block has the
/// spectrum of the bare kernel on the xi window; that block is what is diagonalized.
inline double dissipative_floor(const GainKernel& k, int xi_radius, double g) {
  const Eigen::MatrixXcd m = k.lindblad_matrix(xi_radius);
  const Window w(k.dim(), xi_radius);
  const int z = w.index({0, 0});
  std::vector<int> keep;
  for (int i = 0; i < w.size(); ++i) {
    if (i != z) keep.push_back(i);
  }
  Eigen::MatrixXcd s(static_cast<Eigen::Index>(keep.size()), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t i = 0; i < keep.size(); ++i) {
    for (std::size_t j = 0; j < keep.size(); ++j) {
      s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          -0.5 * (m(keep[i], keep[j]) + std::conj(m(keep[j], keep[i])));
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(s, Eigen::EigenvaluesOnly);
  return g * es.eigenvalues()(0);
}

struct ResolventOptions {
  std::vector<double> etas;        // strictly decreasing; empty picks eta_0 2^{-k}, k < eta_count
  double eta0 = 0.0;               // 0 means 0.1 c g / side^2, below the slowest translation mode
  int eta_count = 8;
  double agreement_tol = 1e-6;     // relative |extrapolated - projected|
  double rank_tol = 1e-10;         // singular-value threshold relative to |T|
  double conditioning_factor = 0.5;
};

struct ResolventResult {
  DiffusionEstimate estimate;      // D from the projected formula
  std::vector<double> etas;
  std::vector<double> d_eta;       // 2 u^2 Re <phi_1, (eta + G)^{-1} phi_1>
  double d_extrapolated = 0.0;
  double d_projected = 0.0;
  double imag_projected = 0.0;
  bool agree = false;
  bool stabilizing = false;
  int constraint_rank = 0;
  double phi_constraint_residual = 0.0;  // |C phi|, zero iff phi lies in ran Pi
  double dissipative_floor = 0.0;
  DiffusionBounds bounds;
  bool within_bounds = false;
  bool within_norm_phi_bounds = false;
};

inline nlohmann::json to_json(const ResolventResult& r) {
  nlohmann::json j = to_json(r.estimate);
  j["etas"] = r.etas;
  j["D_eta"] = r.d_eta;
  j["D_extrapolated"] = r.d_extrapolated;
  j["D_projected"] = r.d_projected;
  j["imag_projected"] = r.imag_projected;
  j["constraint_rank"] = r.constraint_rank;
  j["phi_constraint_residual"] = r.phi_constraint_residual;
  j["dissipative_floor"] = r.dissipative_floor;
  j["bounds"] = {{"lower", r.bounds.lower},
                 {"upper", r.bounds.upper},
                 {"upper_norm_phi", r.bounds.upper_norm_phi},
                 {"G_norm", r.bounds.g_norm}};
  j["pass_flags"] = {{"agree", r.agree},
                     {"stabilizing", r.stabilizing},
                     {"within_bounds", r.within_bounds},
                     {"within_norm_phi_bounds", r.within_norm_phi_bounds}};
  return j;
}

namespace detail {

/// Three-point Richardson for a geometric sequence with ratio 1/2, cancelling O(eta) and O(eta^2).
inline double richardson3(double f_h, double f_h2, double f_h4) { return (8.0 * f_h4 - 6.0 * f_h2 + f_h) / 3.0; }

/// Rows of C = Q_0 T Q_1, the xi = 0 component of T applied to functions vanishing at xi = 0.
inline SparseC constraint_matrix(const FiberSpace& fs, const std::vector<int>& h1_of_full) {
  const LatticeBox& box = fs.box();
  const int nb = box.num_sites();
  int n1 = 0;
  for (int v : h1_of_full) n1 = std::max(n1, v + 1);
  std::vector<Eigen::Triplet<Complex>> t;
  for (int ak = 0; ak < nb; ++ak) {
    const Site a = box.site(ak);
    for (int axis = 0; axis < fs.dim(); ++axis) {
      for (int sign : {1, -1}) {
        const Site e = unit_vector(axis, sign);
        t.emplace_back(ak, h1_of_full[static_cast<std::size_t>(fs.index(e, a))], 1.0);
        t.emplace_back(ak, h1_of_full[static_cast<std::size_t>(fs.index(e, a - e))], -1.0);
      }
    }
  }
  SparseC c(nb, n1);
  c.setFromTriplets(t.begin(), t.end());
  c.prune(Complex(0.0));
  return c;
}

}  // namespace detail

/// Independent rows of C chosen by column-pivoted QR of C^T (rank-revealing).
struct ConstraintBasis {
  SparseC rows;  // r x n1
  int rank = 0;
};

inline ConstraintBasis independent_constraints(const SparseC& c, double threshold) {
  const Eigen::MatrixXd ct = Eigen::MatrixXd(SparseC(c.transpose()).real());
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(ct);
  const Eigen::VectorXd diag = qr.matrixQR().diagonal().cwiseAbs();
  int rank = 0;
  for (Eigen::Index i = 0; i < diag.size(); ++i) {
    if (diag(i) > threshold) ++rank;
  }
  std::vector<int> pick;
  for (int i = 0; i < rank; ++i) pick.push_back(static_cast<int>(qr.colsPermutation().indices()(i)));
  std::sort(pick.begin(), pick.end());
  std::vector<Eigen::Triplet<Complex>> t;
  const SparseRowC cr(c);
  for (std::size_t r = 0; r < pick.size(); ++r) {
    for (SparseRowC::InnerIterator it(cr, pick[r]); it; ++it) {
      t.emplace_back(static_cast<int>(r), static_cast<int>(it.col()), it.value());
    }
  }
  ConstraintBasis out;
  out.rank = rank;
  out.rows.resize(rank, c.cols());
  out.rows.setFromTriplets(t.begin(), t.end());
  return out;
}

/// D from the resolvent of G. For each eta the full system (eta + G) x = phi is solved;
/// delta_0 (x) 1 spans an invariant direction of G and G^H, so x stays orthogonal to it.
/// The eta -> 0 limit is Richardson-extrapolated from the last three etas and compared
/// with the projected formula 2 u^2 <phi, (Pi G Pi)^{-1} phi>, evaluated as the saddle-point
/// system [G_11, C^H; C, 0] on functions vanishing at xi = 0 with C restricted to independent rows.
inline ResolventResult resolvent_diffusion(const FiberSpace& fs, const GainKernel& kernel, double c,
                                           const ResolventOptions& opts = {}) {
  const GeneratorParams& p = fs.params();
  require(p.g > 0.0, "resolvent_diffusion: g must be positive");
  require(c > 0.0, "resolvent_diffusion: gap c must be positive");
  ResolventResult res;
  res.etas = opts.etas;
  if (res.etas.empty()) {
    const double side = static_cast<double>(fs.box().side());
    const double e0 = opts.eta0 > 0.0 ? opts.eta0 : 0.1 * c * p.g / (side * side);
    for (int k = 0; k < opts.eta_count; ++k) res.etas.push_back(e0 * std::pow(0.5, k));
  }
  require(res.etas.size() >= 3, "resolvent_diffusion: need at least three etas");
  for (std::size_t k = 1; k < res.etas.size(); ++k) {
    require(res.etas[k] < res.etas[k - 1] && res.etas[k] > 0.0, "resolvent_diffusion: etas must decrease");
  }
  require(res.etas.front() / res.etas.back() >= 100.0 - 1e-9, "resolvent_diffusion: etas must span 2 decades");

  res.dissipative_floor = dissipative_floor(kernel, fs.xi_window().radius(), p.g);
  if (res.dissipative_floor < opts.conditioning_factor * c * p.g) {
    throw Error(ErrorCode::IllConditioned, "Re(-g L) floor " + fmt(res.dissipative_floor) + " < " +
                                               fmt(opts.conditioning_factor) + " c g = " +
                                               fmt(opts.conditioning_factor * c * p.g));
  }

  const int n = fs.size();
  const int d = fs.dim();
  std::vector<Eigen::VectorXcd> phis;
  for (int i = 0; i < d; ++i) phis.push_back(fs.phi(i));
  const double u2 = p.u * p.u;

  // Resolvent sequence for the first axis.
  SparseC id(n, n);
  id.setIdentity();
  Eigen::SparseLU<SparseC> lu;
  bool analyzed = false;
  for (double eta : res.etas) {
    SparseC m = fs.G() + eta * id;
    m.makeCompressed();
    if (!analyzed) {
      lu.analyzePattern(m);
      analyzed = true;
    }
    lu.factorize(m);
    if (lu.info() != Eigen::Success) throw Error(ErrorCode::IllConditioned, "LU failed at eta " + fmt(eta));
    const Eigen::VectorXcd x = lu.solve(phis[0]);
    res.d_eta.push_back(2.0 * u2 * fs.inner(phis[0], x).real());
  }
  const std::size_t m = res.d_eta.size();
  res.d_extrapolated = detail::richardson3(res.d_eta[m - 3], res.d_eta[m - 2], res.d_eta[m - 1]);
  const double step1 = std::abs(res.d_eta[m - 2] - res.d_eta[m - 3]);
  const double step2 = std::abs(res.d_eta[m - 1] - res.d_eta[m - 2]);
  res.stabilizing = step2 <= step1;

  // Projected formula on H_1 = {f : f(0, .) = 0}.
  const std::vector<int> origin = fs.origin_indices();
  std::vector<int> h1_of_full(static_cast<std::size_t>(n), -1), full_of_h1;
  {
    std::vector<char> is_origin(static_cast<std::size_t>(n), 0);
    for (int o : origin) is_origin[static_cast<std::size_t>(o)] = 1;
    for (int k = 0; k < n; ++k) {
      if (is_origin[static_cast<std::size_t>(k)]) continue;
      h1_of_full[static_cast<std::size_t>(k)] = static_cast<int>(full_of_h1.size());
      full_of_h1.push_back(k);
    }
  }
  const int n1 = static_cast<int>(full_of_h1.size());
  const SparseC cmat = detail::constraint_matrix(fs, h1_of_full);
  const double t_norm = detail::operator_norm(fs.T());
  const ConstraintBasis cb = independent_constraints(cmat, opts.rank_tol * std::max(t_norm, 1.0));
  res.constraint_rank = cb.rank;

  std::vector<Eigen::Triplet<Complex>> kt;
  const SparseRowC grow(fs.G());
  for (int i = 0; i < n1; ++i) {
    for (SparseRowC::InnerIterator it(grow, full_of_h1[static_cast<std::size_t>(i)]); it; ++it) {
      const int j = h1_of_full[static_cast<std::size_t>(it.col())];
      if (j >= 0) kt.emplace_back(i, j, it.value());
    }
  }
  for (int k = 0; k < cb.rows.outerSize(); ++k) {
    for (SparseC::InnerIterator it(cb.rows, k); it; ++it) {
      kt.emplace_back(n1 + static_cast<int>(it.row()), static_cast<int>(it.col()), it.value());
      kt.emplace_back(static_cast<int>(it.col()), n1 + static_cast<int>(it.row()), std::conj(it.value()));
    }
  }
  SparseC kkt(n1 + cb.rank, n1 + cb.rank);
  kkt.setFromTriplets(kt.begin(), kt.end());
  kkt.makeCompressed();
  Eigen::SparseLU<SparseC> klu(kkt);
  if (klu.info() != Eigen::Success) throw Error(ErrorCode::IllConditioned, "projected system is singular");

  std::vector<Eigen::VectorXcd> xs;
  double kkt_residual = 0.0;
  for (int i = 0; i < d; ++i) {
    Eigen::VectorXcd rhs = Eigen::VectorXcd::Zero(n1 + cb.rank);
    for (int k = 0; k < n1; ++k) rhs(k) = phis[static_cast<std::size_t>(i)](full_of_h1[static_cast<std::size_t>(k)]);
    if (i == 0) res.phi_constraint_residual = (cmat * rhs.head(n1)).norm();
    const Eigen::VectorXcd sol = klu.solve(rhs);
    kkt_residual = std::max(kkt_residual, (kkt * sol - rhs).norm() / std::max(rhs.norm(), 1e-300));
    Eigen::VectorXcd x = Eigen::VectorXcd::Zero(n);
    for (int k = 0; k < n1; ++k) x(full_of_h1[static_cast<std::size_t>(k)]) = sol(k);
    xs.push_back(x);
  }
  DiffusionEstimate& est = res.estimate;
  est.method = Method::Resolvent;
  est.dim = d;
  est.u = p.u;
  est.lambda = p.lambda;
  est.g = p.g;
  est.eta = 0.0;
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) {
      const Complex a = fs.inner(phis[static_cast<std::size_t>(i)], xs[static_cast<std::size_t>(j)]);
      const Complex b = fs.inner(phis[static_cast<std::size_t>(j)], xs[static_cast<std::size_t>(i)]);
      est.D(i, j) = u2 * (a + b).real();
      if (i == 0 && j == 0) res.imag_projected = 2.0 * u2 * a.imag();
    }
  }
  res.d_projected = est.D(0, 0);
  const double scale = std::max(1.0, std::abs(res.d_projected));
  res.agree = std::abs(res.d_extrapolated - res.d_projected) <= opts.agreement_tol * scale;
  res.bounds = diffusion_bounds(fs, c);
  res.within_bounds = res.d_projected >= res.bounds.lower * (1.0 - 1e-9) &&
                      res.d_projected <= res.bounds.upper * (1.0 + 1e-9);
  res.within_norm_phi_bounds = res.d_projected >= res.bounds.lower * (1.0 - 1e-9) &&
                               res.d_projected <= res.bounds.upper_norm_phi * (1.0 + 1e-9);
  est.diagnostics["kkt_residual"] = kkt_residual;
  est.diagnostics["D_extrapolated"] = res.d_extrapolated;
  est.diagnostics["constraint_rank"] = res.constraint_rank;
  return res;
}

struct ResolventEnsembleRequest {
  int dim = 1;
  int box_radius = 16;  // periodic box [-L_B, L_B]^d
  int xi_radius = 8;
  GeneratorParams params;
  const GainKernel* kernel = nullptr;
  double c = 0.0;
  DisorderDist dist = DisorderDist::uniform();
  std::vector<std::uint64_t> seeds;
  ResolventOptions options;
  int workers = 0;
};

struct ResolventEnsemble {
  DiffusionEstimate estimate;  // mean over configurations, stderr across them
  std::vector<ResolventResult> members;
  bool all_agree = false;
  bool all_within_bounds = false;
};

/// One periodic configuration per seed; the ensemble mean replaces the disorder expectation.
inline ResolventEnsemble resolvent_ensemble(const ResolventEnsembleRequest& req) {
  require(req.kernel != nullptr, "resolvent_ensemble: kernel required");
  require(!req.seeds.empty(), "resolvent_ensemble: no seeds");
  std::vector<std::uint64_t> seeds = req.seeds;
  std::sort(seeds.begin(), seeds.end());
  const LatticeBox box(req.dim, req.box_radius, Boundary::Periodic);
  ResolventEnsemble out;
  out.members.resize(seeds.size());
  parallel_for(seeds.size(), req.workers > 0 ? req.workers : default_workers(), [&](std::size_t k) {
    const DisorderField omega =
        req.params.lambda == 0.0 ? DisorderField::zero(box) : sample(box, req.dist, seeds[k]);
    const FiberSpace fs = build_fiber_space(box, req.xi_radius, req.params, req.kernel, omega);
    out.members[k] = resolvent_diffusion(fs, *req.kernel, req.c, req.options);
  });
  DiffusionEstimate& est = out.estimate;
  est = out.members.front().estimate;
  est.D.setZero();
  est.samples.clear();
  out.all_agree = out.all_within_bounds = true;
  for (const auto& m : out.members) {
    est.D += m.estimate.D;
    est.samples.push_back(m.estimate.D);
    out.all_agree = out.all_agree && m.agree;
    out.all_within_bounds = out.all_within_bounds && m.within_bounds;
  }
  const double n = static_cast<double>(out.members.size());
  est.D /= n;
  est.stderr_.setZero();
  if (out.members.size() >= 2) {
    Eigen::Matrix2d var = Eigen::Matrix2d::Zero();
    for (const auto& s : est.samples) var += (s - est.D).cwiseAbs2();
    est.stderr_ = (var / (n - 1.0) / n).cwiseSqrt();
  }
  est.diagnostics = nlohmann::json::object();
  est.diagnostics["configurations"] = out.members.size();
  est.diagnostics["box_radius"] = req.box_radius;
  est.diagnostics["xi_radius"] = req.xi_radius;
  est.diagnostics["all_agree"] = out.all_agree;
  est.diagnostics["all_within_bounds"] = out.all_within_bounds;
  return out;
}

inline constexpr double kSingularResidualTol = 1e-8;

/// lambda = 0: D = 2 u^2 <phi, (-g L)^{-1} phi> on the bare xi fiber with xi = 0 removed.
inline DiffusionEstimate closed_form_ballistic(const GainKernel& kernel, double u, double g, int xi_radius = 0) {
  require(g > 0.0, "closed_form_ballistic: g must be positive");
  const int radius = xi_radius > 0 ? xi_radius : 3 * kernel.radius();
  const Window w(kernel.dim(), radius);
  const Eigen::MatrixXcd lm = kernel.lindblad_matrix(radius);
  const int z = w.index({0, 0});
  std::vector<int> keep;
  for (int i = 0; i < w.size(); ++i) {
    if (i != z) keep.push_back(i);
  }
  const auto nk = static_cast<Eigen::Index>(keep.size());
  Eigen::MatrixXcd m(nk, nk);
  for (Eigen::Index i = 0; i < nk; ++i) {
    for (Eigen::Index j = 0; j < nk; ++j) m(i, j) = -g * lm(keep[static_cast<std::size_t>(i)], keep[static_cast<std::size_t>(j)]);
  }
  const int d = kernel.dim();
  std::vector<Eigen::VectorXcd> phis, xs;
  const Eigen::PartialPivLU<Eigen::MatrixXcd> lu(m);
  double residual = 0.0;
  for (int axis = 0; axis < d; ++axis) {
    Eigen::VectorXcd f = Eigen::VectorXcd::Zero(nk);
    for (Eigen::Index i = 0; i < nk; ++i) {
      const Site s = w.site(keep[static_cast<std::size_t>(i)]);
      if (s == unit_vector(axis, 1)) f(i) = 1.0;
      if (s == unit_vector(axis, -1)) f(i) = -1.0;
    }
    const Eigen::VectorXcd x = lu.solve(f);
    residual = std::max(residual, (m * x - f).norm() / f.norm());
    phis.push_back(f);
    xs.push_back(x);
  }
  if (!(residual <= kSingularResidualTol)) {
    throw Error(ErrorCode::SingularLindbladian, "solve residual " + fmt(residual));
  }
  DiffusionEstimate est;
  est.method = Method::ClosedForm;
  est.dim = d;
  est.u = u;
  est.g = g;
  double imag = 0.0;
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) {
      const Complex a = phis[static_cast<std::size_t>(i)].dot(xs[static_cast<std::size_t>(j)]);
      const Complex b = phis[static_cast<std::size_t>(j)].dot(xs[static_cast<std::size_t>(i)]);
      est.D(i, j) = u * u * (a + b).real();
      if (i == j) imag = std::max(imag, 2.0 * u * u * std::abs(a.imag()));
    }
  }
  est.diagnostics["residual"] = residual;
  est.diagnostics["imag"] = imag;
  est.diagnostics["xi_radius"] = radius;
  est.diagnostics["C"] = est.D(0, 0) * g / (u * u);
  return est;
}

struct SmallCouplingLimit {
  std::string branch;              // "pi0_empty" or "pi0_nonempty"
  int pi_dim = 0;                  // dimension of ran Pi
  int pi0_dim = 0;                 // dimension of ker(Pi A Pi) inside ran Pi
  double pi0_phi_norm = 0.0;       // |Pi_0 phi|
  double ballistic_coefficient = 0.0;  // lim g D(g) = 2 u^2 <Pi_0 phi, (Pi_0 (-L) Pi_0)^{-1} Pi_0 phi>
  double delta = 0.0;              // lim D(g)/g; Schur complement when Pi_0 phi = 0
  double a_norm = 0.0;             // |A|
};

/// g -> 0 structure of 2 u^2 <phi, (i Pi A Pi + g Pi (-L) Pi)^{-1} phi>. The range of Pi
/// is obtained from a full QR of C^T; Pi A Pi is diagonalized there. If its kernel Pi_0 is
/// trivial, D(g) = Delta g + O(g^2) with Delta = 2 u^2 Re <psi, (-L) psi>, psi = (Pi A Pi)^{-1} phi.
/// Otherwise D(g) ~ (ballistic coefficient)/g when Pi_0 phi != 0; when Pi_0 phi = 0 the
/// slope uses the Schur complement of (-L) onto the complement of Pi_0. Dense; intended for d = 1.
inline SmallCouplingLimit small_coupling_limit(const FiberSpace& fs, double rank_tol = 1e-10) {
  const GeneratorParams& p = fs.params();
  const int n = fs.size();
  const std::vector<int> origin = fs.origin_indices();
  std::vector<int> h1_of_full(static_cast<std::size_t>(n), -1), full_of_h1;
  {
    std::vector<char> is_origin(static_cast<std::size_t>(n), 0);
    for (int o : origin) is_origin[static_cast<std::size_t>(o)] = 1;
    for (int k = 0; k < n; ++k) {
      if (is_origin[static_cast<std::size_t>(k)]) continue;
      h1_of_full[static_cast<std::size_t>(k)] = static_cast<int>(full_of_h1.size());
      full_of_h1.push_back(k);
    }
  }
  const int n1 = static_cast<int>(full_of_h1.size());
  require(n1 <= 6000, "small_coupling_limit: fiber space too large for the dense path");
  const SparseC cmat = detail::constraint_matrix(fs, h1_of_full);
  const double t_norm = detail::operator_norm(fs.T());
  const Eigen::MatrixXd ct = Eigen::MatrixXd(SparseC(cmat.transpose()).real());
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(ct);
  const Eigen::VectorXd diag = qr.matrixQR().diagonal().cwiseAbs();
  int rank = 0;
  for (Eigen::Index i = 0; i < diag.size(); ++i) {
    if (diag(i) > rank_tol * std::max(t_norm, 1.0)) ++rank;
  }
  const Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd basis = q.rightCols(n1 - rank);  // orthonormal basis of ker C

  auto restrict = [&](const SparseC& op) {
    Eigen::MatrixXcd m = Eigen::MatrixXcd::Zero(n1, n1);
    const SparseRowC r(op);
    for (int i = 0; i < n1; ++i) {
      for (SparseRowC::InnerIterator it(r, full_of_h1[static_cast<std::size_t>(i)]); it; ++it) {
        const int j = h1_of_full[static_cast<std::size_t>(it.col())];
        if (j >= 0) m(i, j) = it.value();
      }
    }
    return m;
  };
  const Eigen::MatrixXcd bc = basis.cast<Complex>();
  const Eigen::MatrixXcd a_pi = bc.adjoint() * restrict(fs.A()) * bc;
  const Eigen::MatrixXcd b_pi = bc.adjoint() * restrict(-fs.L()) * bc;
  Eigen::VectorXcd phi1(n1);
  const Eigen::VectorXcd phi = fs.phi(0);
  for (int k = 0; k < n1; ++k) phi1(k) = phi(full_of_h1[static_cast<std::size_t>(k)]);
  const Eigen::VectorXcd phi_pi = bc.adjoint() * phi1;

  SmallCouplingLimit out;
  out.pi_dim = static_cast<int>(basis.cols());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(0.5 * (a_pi + a_pi.adjoint()));
  const Eigen::VectorXd mu = es.eigenvalues();
  out.a_norm = std::max(std::abs(mu(0)), std::abs(mu(mu.size() - 1)));
  const double cut = rank_tol * std::max(out.a_norm, 1.0) * 1e2;
  std::vector<int> zero, nonzero;
  for (Eigen::Index i = 0; i < mu.size(); ++i) (std::abs(mu(i)) <= cut ? zero : nonzero).push_back(static_cast<int>(i));
  out.pi0_dim = static_cast<int>(zero.size());
  const double nb = static_cast<double>(fs.num_translations());
  const double u2 = p.u * p.u;

  Eigen::MatrixXcd z0(phi_pi.size(), static_cast<Eigen::Index>(zero.size()));
  for (std::size_t k = 0; k < zero.size(); ++k) z0.col(static_cast<Eigen::Index>(k)) = es.eigenvectors().col(zero[k]);
  const Eigen::VectorXcd c0 = z0.adjoint() * phi_pi;
  out.pi0_phi_norm = c0.norm() / std::sqrt(nb);
  if (!zero.empty() && out.pi0_phi_norm > 1e-8) {
    const Eigen::MatrixXcd b00 = z0.adjoint() * b_pi * z0;
    out.ballistic_coefficient = 2.0 * u2 * (c0.dot(b00.partialPivLu().solve(c0))).real() / nb;
  }
  // psi = A^{-1} phi on the complement of Pi_0. With a nontrivial Pi_0 the first-order
  // term uses the Schur complement B_11 - B_10 B_00^{-1} B_01, since Pi_0 relaxes at rate g too.
  Eigen::MatrixXcd z1(phi_pi.size(), static_cast<Eigen::Index>(nonzero.size()));
  Eigen::VectorXcd psi1(static_cast<Eigen::Index>(nonzero.size()));
  for (std::size_t k = 0; k < nonzero.size(); ++k) {
    const Eigen::VectorXcd v = es.eigenvectors().col(nonzero[k]);
    z1.col(static_cast<Eigen::Index>(k)) = v;
    psi1(static_cast<Eigen::Index>(k)) = v.dot(phi_pi) / mu(nonzero[k]);
  }
  Eigen::MatrixXcd s11 = z1.adjoint() * b_pi * z1;
  if (!zero.empty()) {
    const Eigen::MatrixXcd b00 = z0.adjoint() * b_pi * z0;
    s11 -= (z1.adjoint() * b_pi * z0) * b00.partialPivLu().solve(z0.adjoint() * b_pi * z1);
  }
  out.delta = 2.0 * u2 * psi1.dot(s11 * psi1).real() / nb;
  out.branch = zero.empty() ? "pi0_empty" : "pi0_nonempty";
  return out;
}

}  // namespace qbm
