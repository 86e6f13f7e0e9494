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

// Density matrices of a single lattice particle, addressed either by the
// site pair (x, y) or by the centre/relative pair X = x + y, xi = x - y.
// Both X and xi share the parity of x + y componentwise, so every stored
// entry is automatically admissible.

#include <Eigen/Dense>

#include <ostream>
#include <vector>

#include "qbm/core.hpp"

namespace qbm {

enum class Boundary { Truncated, Periodic };

/// Square box [-L, L]^d of lattice sites, d in {1, 2}.
class LatticeBox {
 public:
  LatticeBox(int dim, int radius, Boundary boundary = Boundary::Truncated)
      : dim_(dim), radius_(radius), boundary_(boundary) {
    require(dim == 1 || dim == 2, "LatticeBox: dimension must be 1 or 2");
    require(radius >= 1, "LatticeBox: radius must be >= 1");
  }

  int dim() const { return dim_; }
  int radius() const { return radius_; }
  Boundary boundary() const { return boundary_; }
  bool periodic() const { return boundary_ == Boundary::Periodic; }
  int side() const { return 2 * radius_ + 1; }
  int num_sites() const { return dim_ == 1 ? side() : side() * side(); }

  bool contains(Site x) const {
    if (periodic()) return true;
    for (int i = 0; i < dim_; ++i) {
      if (std::abs(x[static_cast<std::size_t>(i)]) > radius_) return false;
    }
    return true;
  }

  /// Maps a coordinate into [-L, L] modulo the side length.
  int wrap_coord(int v) const {
    const int n = side();
    int w = (v + radius_) % n;
    if (w < 0) w += n;
    return w - radius_;
  }

  Site wrap(Site x) const {
    Site w{0, 0};
    for (int i = 0; i < dim_; ++i) w[static_cast<std::size_t>(i)] = wrap_coord(x[static_cast<std::size_t>(i)]);
    return w;
  }

  /// Linear site index; coordinates are wrapped first in periodic mode.
  int index(Site x) const {
    if (periodic()) x = wrap(x);
    if (dim_ == 1) return x[0] + radius_;
    return (x[0] + radius_) * side() + (x[1] + radius_);
  }

  Site site(int idx) const {
    if (dim_ == 1) return {idx - radius_, 0};
    return {idx / side() - radius_, idx % side() - radius_};
  }

  bool operator==(const LatticeBox& o) const {
    return dim_ == o.dim_ && radius_ == o.radius_ && boundary_ == o.boundary_;
  }
  bool operator!=(const LatticeBox& o) const { return !(*this == o); }

 private:
  int dim_;
  int radius_;
  Boundary boundary_;
};

/// Mixed state rho on a LatticeBox, stored densely as the matrix <x|rho|y>.
class DensityState {
 public:
  explicit DensityState(LatticeBox box)
      : box_(box), rho_(Eigen::MatrixXcd::Zero(box.num_sites(), box.num_sites())) {}

  DensityState(LatticeBox box, Eigen::MatrixXcd rho) : box_(box), rho_(std::move(rho)) {
    require(rho_.rows() == box_.num_sites() && rho_.cols() == box_.num_sites(),
            "DensityState: matrix size does not match box");
  }

  /// |0><0|
  static DensityState point(LatticeBox box) {
    DensityState s(box);
    const int o = box.index({0, 0});
    s.rho_(o, o) = 1.0;
    return s;
  }

  /// |psi><psi| for a wavefunction indexed like the box sites.
  static DensityState pure(LatticeBox box, const Eigen::VectorXcd& psi) {
    require(psi.size() == box.num_sites(), "DensityState::pure: size mismatch");
    return DensityState(box, psi * psi.adjoint());
  }

  const LatticeBox& box() const { return box_; }
  const Eigen::MatrixXcd& matrix() const { return rho_; }
  Eigen::MatrixXcd& matrix() { return rho_; }

  /// rho(X, xi); zero off the parity lattice or outside a truncated box.
  Complex at(Site X, Site xi) const {
    Site x{}, y{};
    if (!split(X, xi, x, y)) return 0.0;
    return rho_(box_.index(x), box_.index(y));
  }

  void set(Site X, Site xi, Complex v) {
    Site x{}, y{};
    require(split(X, xi, x, y), "DensityState::set: (X, xi) is not an admissible pair in the box");
    rho_(box_.index(x), box_.index(y)) = v;
  }

  DensityState& operator*=(Complex s) {
    rho_ *= s;
    return *this;
  }

 private:
  bool split(Site X, Site xi, Site& x, Site& y) const {
    for (int i = 0; i < box_.dim(); ++i) {
      const auto k = static_cast<std::size_t>(i);
      if (!is_even(X[k] + xi[k])) return false;
      x[k] = (X[k] + xi[k]) / 2;
      y[k] = (X[k] - xi[k]) / 2;
    }
    for (int i = box_.dim(); i < 2; ++i) {
      const auto k = static_cast<std::size_t>(i);
      if (X[k] != 0 || xi[k] != 0) return false;
      x[k] = y[k] = 0;
    }
    return box_.contains(x) && box_.contains(y);
  }

  LatticeBox box_;
  Eigen::MatrixXcd rho_;
};

inline constexpr double kTraceImagTol = 1e-12;
/// Relative to Sum |x_i x_j| |rho(x,x)|; integration roundoff accumulates in the diagonal phases.
inline constexpr double kMomentImagTol = 1e-8;

/// Sum_X rho(X, 0).
inline double trace(const DensityState& s) {
  const Complex tr = s.matrix().trace();
  if (std::abs(tr.imag()) > kTraceImagTol) {
    throw Error(ErrorCode::NonRealTrace, "imaginary part " + fmt(tr.imag()));
  }
  return tr.real();
}

/// Sum_x x_i x_j <x|rho|x>, equivalently (1/4) Sum_X X_i X_j rho(X, 0).
inline double position_moment(const DensityState& s, int i, int j) {
  const LatticeBox& box = s.box();
  require(i >= 0 && i < box.dim() && j >= 0 && j < box.dim(), "position_moment: axis out of range");
  Complex acc = 0.0;
  double scale = 0.0;
  for (int k = 0; k < box.num_sites(); ++k) {
    const Site x = box.site(k);
    const double w = static_cast<double>(x[static_cast<std::size_t>(i)] * x[static_cast<std::size_t>(j)]);
    acc += w * s.matrix()(k, k);
    scale += std::abs(w) * std::abs(s.matrix()(k, k));
  }
  if (std::abs(acc.imag()) > kMomentImagTol * std::max(1.0, scale)) {
    throw Error(ErrorCode::NonRealMoment, "imaginary part " + fmt(acc.imag()));
  }
  return acc.real();
}

/// Uniform grid of n^d quasi-momenta p_k = 2 pi k / n; flat index k0 * n + k1.
inline TorusPoint torus_grid_point(int dim, int n, int flat) {
  if (dim == 1) return {kTwoPi * flat / n, 0.0};
  return {kTwoPi * (flat / n) / n, kTwoPi * (flat % n) / n};
}

inline int torus_grid_size(int dim, int n) { return dim == 1 ? n : n * n; }

/// Wigner transform rho^W(X, p) = Sum_xi e^{i p.xi} rho(X, xi) on the n^d grid.
inline std::vector<Complex> wigner(const DensityState& s, Site X, int nq) {
  require(nq >= 1, "wigner: grid size must be positive");
  const LatticeBox& box = s.box();
  const int d = box.dim();
  const int side = 4 * box.radius() + 1;
  std::vector<std::pair<Site, Complex>> fiber;
  for (int a = 0; a < side; ++a) {
    for (int b = 0; b < (d == 2 ? side : 1); ++b) {
      const Site xi{a - 2 * box.radius(), d == 2 ? b - 2 * box.radius() : 0};
      const Complex v = s.at(X, xi);
      if (v != Complex(0.0)) fiber.emplace_back(xi, v);
    }
  }
  const int np = torus_grid_size(d, nq);
  std::vector<Complex> out(static_cast<std::size_t>(np), 0.0);
  for (int k = 0; k < np; ++k) {
    const TorusPoint p = torus_grid_point(d, nq, k);
    Complex acc = 0.0;
    for (const auto& [xi, v] : fiber) {
      acc += std::polar(1.0, p[0] * xi[0] + p[1] * xi[1]) * v;
    }
    out[static_cast<std::size_t>(k)] = acc;
  }
  return out;
}

/// Per-fiber squared norms Sum_xi |rho(X, xi)|^2, indexed by X in [-2L, 2L]^d.
inline std::vector<double> fiber_norms_squared(const DensityState& s) {
  const LatticeBox& box = s.box();
  const int w = 4 * box.radius() + 1;
  const int n = box.num_sites();
  std::vector<double> acc(static_cast<std::size_t>(box.dim() == 1 ? w : w * w), 0.0);
  for (int yi = 0; yi < n; ++yi) {
    const Site y = box.site(yi);
    for (int xi = 0; xi < n; ++xi) {
      const Site x = box.site(xi);
      const Site X = x + y;
      const int idx = box.dim() == 1 ? X[0] + 2 * box.radius()
                                     : (X[0] + 2 * box.radius()) * w + (X[1] + 2 * box.radius());
      acc[static_cast<std::size_t>(idx)] += std::norm(s.matrix()(xi, yi));
    }
  }
  return acc;
}

/// sup_X e^{m |X|_1} (Sum_xi |rho(X, xi)|^2)^{1/2}.
inline double weighted_norm(const DensityState& s, double m) {
  require(m >= 0.0, "weighted_norm: m must be >= 0");
  const LatticeBox& box = s.box();
  const int w = 4 * box.radius() + 1;
  const std::vector<double> f = fiber_norms_squared(s);
  double best = 0.0;
  for (std::size_t k = 0; k < f.size(); ++k) {
    if (f[k] == 0.0) continue;
    const int idx = static_cast<int>(k);
    const Site X = box.dim() == 1 ? Site{idx - 2 * box.radius(), 0}
                                  : Site{idx / w - 2 * box.radius(), idx % w - 2 * box.radius()};
    best = std::max(best, std::exp(m * l1_norm(X)) * std::sqrt(f[k]));
  }
  return best;
}

/// max |rho(x,y) - conj(rho(y,x))|
inline double hermiticity_defect(const DensityState& s) {
  return (s.matrix() - s.matrix().adjoint()).cwiseAbs().maxCoeff();
}

/// Sum of |rho(X, xi)|^2 over centres with |X|_inf >= 2L - 2.
inline double boundary_mass(const DensityState& s) {
  const LatticeBox& box = s.box();
  const int n = box.num_sites();
  const int edge = 2 * box.radius() - 2;
  double acc = 0.0;
  for (int yi = 0; yi < n; ++yi) {
    const Site y = box.site(yi);
    for (int xi = 0; xi < n; ++xi) {
      if (linf_norm(box.site(xi) + y) >= edge) acc += std::norm(s.matrix()(xi, yi));
    }
  }
  return acc;
}

/// CSV rows "X1[,X2],xi1[,xi2],re,im" for every stored entry, ordered by (y, x) site index.
inline void write_csv(std::ostream& os, const DensityState& s) {
  const LatticeBox& box = s.box();
  const int d = box.dim();
  os << (d == 1 ? "X1,xi1,re,im\n" : "X1,X2,xi1,xi2,re,im\n");
  os.precision(17);
  const int n = box.num_sites();
  for (int yi = 0; yi < n; ++yi) {
    const Site y = box.site(yi);
    for (int xi = 0; xi < n; ++xi) {
      const Site x = box.site(xi);
      const Site X = x + y;
      const Site r = x - y;
      const Complex v = s.matrix()(xi, yi);
      if (d == 1) {
        os << X[0] << ',' << r[0];
      } else {
        os << X[0] << ',' << X[1] << ',' << r[0] << ',' << r[1];
      }
      os << ',' << v.real() << ',' << v.imag() << '\n';
    }
  }
}

}  // namespace qbm
