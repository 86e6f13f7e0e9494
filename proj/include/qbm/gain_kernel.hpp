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

// Gain kernels r(xi, eta) obtained as Fourier coefficients of a positive
// measure on T^d x T^d, their validation against the structural hypotheses
// of the model, and the grid quantities (rates, gap, jump bound) they induce.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "qbm/core.hpp"
#include "qbm/lattice_state.hpp"

namespace qbm {

struct Atom {
  TorusPoint p{0.0, 0.0};
  TorusPoint q{0.0, 0.0};
  double w = 0.0;
};

struct MeasureSpec {
  int dim = 1;
  std::vector<Atom> atoms;
  bool symmetrize_pi = false;
  bool symmetrize_lattice = false;
};

inline nlohmann::json to_json(const MeasureSpec& spec) {
  nlohmann::json atoms = nlohmann::json::array();
  for (const Atom& a : spec.atoms) {
    nlohmann::json p = nlohmann::json::array(), q = nlohmann::json::array();
    for (int i = 0; i < spec.dim; ++i) {
      p.push_back(a.p[static_cast<std::size_t>(i)]);
      q.push_back(a.q[static_cast<std::size_t>(i)]);
    }
    atoms.push_back({{"p", p}, {"q", q}, {"w", a.w}});
  }
  return {{"dim", spec.dim},
          {"atoms", atoms},
          {"symmetrize_pi", spec.symmetrize_pi},
          {"symmetrize_lattice", spec.symmetrize_lattice}};
}

inline MeasureSpec measure_spec_from_json(const nlohmann::json& j) {
  require(j.is_object(), "measure spec: expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    require(key == "dim" || key == "atoms" || key == "symmetrize_pi" || key == "symmetrize_lattice",
            "measure spec: unknown field '" + key + "'");
  }
  MeasureSpec spec;
  require(j.contains("atoms") && j["atoms"].is_array(), "measure spec: 'atoms' array required");
  spec.dim = j.value("dim", 0);
  if (spec.dim == 0) spec.dim = j["atoms"].empty() ? 1 : static_cast<int>(j["atoms"][0].at("p").size());
  require(spec.dim == 1 || spec.dim == 2, "measure spec: dim must be 1 or 2");
  spec.symmetrize_pi = j.value("symmetrize_pi", false);
  spec.symmetrize_lattice = j.value("symmetrize_lattice", false);
  for (const auto& ja : j["atoms"]) {
    Atom a;
    require(ja.at("p").size() == static_cast<std::size_t>(spec.dim) &&
                ja.at("q").size() == static_cast<std::size_t>(spec.dim),
            "measure spec: atom coordinates must have length dim");
    for (int i = 0; i < spec.dim; ++i) {
      a.p[static_cast<std::size_t>(i)] = ja["p"][static_cast<std::size_t>(i)].get<double>();
      a.q[static_cast<std::size_t>(i)] = ja["q"][static_cast<std::size_t>(i)].get<double>();
    }
    a.w = ja.at("w").get<double>();
    spec.atoms.push_back(a);
  }
  return spec;
}

namespace detail {

inline double wrap_angle(double a) {
  double w = std::fmod(a, kTwoPi);
  if (w < 0.0) w += kTwoPi;
  if (w > kTwoPi - 1e-12) w = 0.0;
  return w;
}

inline long long angle_key(double a) { return std::llround(wrap_angle(a) * 1e9); }

/// Signed permutations of the coordinate axes: (perm, signs).
inline std::vector<std::pair<std::array<int, 2>, std::array<int, 2>>> lattice_group(int dim) {
  std::vector<std::pair<std::array<int, 2>, std::array<int, 2>>> g;
  std::vector<std::array<int, 2>> perms = {{0, 1}};
  if (dim == 2) perms.push_back({1, 0});
  for (const auto& perm : perms) {
    for (int s0 : {1, -1}) {
      for (int s1 : {1, -1}) {
        if (dim == 1 && s1 == -1) continue;
        g.push_back({perm, {s0, s1}});
      }
    }
  }
  return g;
}

}  // namespace detail

/// Applies the requested closures and merges coincident atoms.
inline std::vector<Atom> symmetrized_atoms(const MeasureSpec& spec) {
  std::vector<Atom> atoms = spec.atoms;
  const int d = spec.dim;
  if (spec.symmetrize_pi) {
    std::vector<Atom> out;
    const int nshift = d == 1 ? 2 : 4;
    for (const Atom& a : atoms) {
      for (int n = 0; n < nshift; ++n) {
        Atom b = a;
        for (int i = 0; i < d; ++i) {
          if ((n >> i) & 1) {
            b.p[static_cast<std::size_t>(i)] += kPi;
            b.q[static_cast<std::size_t>(i)] += kPi;
          }
        }
        b.w = a.w / nshift;
        out.push_back(b);
      }
    }
    atoms = std::move(out);
  }
  if (spec.symmetrize_lattice) {
    const auto group = detail::lattice_group(d);
    std::vector<Atom> out;
    for (const Atom& a : atoms) {
      for (const auto& [perm, sign] : group) {
        Atom b;
        for (int i = 0; i < d; ++i) {
          const auto k = static_cast<std::size_t>(i);
          b.p[k] = sign[k] * a.p[static_cast<std::size_t>(perm[k])];
          b.q[k] = sign[k] * a.q[static_cast<std::size_t>(perm[k])];
        }
        b.w = a.w / static_cast<double>(group.size());
        out.push_back(b);
      }
    }
    atoms = std::move(out);
  }
  std::map<std::array<long long, 4>, Atom> merged;
  for (const Atom& a : atoms) {
    Atom b = a;
    for (int i = 0; i < d; ++i) {
      b.p[static_cast<std::size_t>(i)] = detail::wrap_angle(a.p[static_cast<std::size_t>(i)]);
      b.q[static_cast<std::size_t>(i)] = detail::wrap_angle(a.q[static_cast<std::size_t>(i)]);
    }
    const std::array<long long, 4> key{detail::angle_key(b.p[0]), detail::angle_key(b.p[1]),
                                       detail::angle_key(b.q[0]), detail::angle_key(b.q[1])};
    auto it = merged.find(key);
    if (it == merged.end()) {
      merged.emplace(key, b);
    } else {
      it->second.w += b.w;
    }
  }
  std::vector<Atom> out;
  out.reserve(merged.size());
  for (auto& [_, a] : merged) out.push_back(a);
  return out;
}

/// Index map for the lattice window |xi|_inf <= W.
class Window {
 public:
  Window(int dim, int radius) : dim_(dim), radius_(radius) {}
  int dim() const { return dim_; }
  int radius() const { return radius_; }
  int side() const { return 2 * radius_ + 1; }
  int size() const { return dim_ == 1 ? side() : side() * side(); }
  bool contains(Site xi) const {
    if (linf_norm(xi) > radius_) return false;
    return dim_ == 2 || xi[1] == 0;
  }
  int index(Site xi) const {
    if (dim_ == 1) return xi[0] + radius_;
    return (xi[0] + radius_) * side() + (xi[1] + radius_);
  }
  Site site(int idx) const {
    if (dim_ == 1) return {idx - radius_, 0};
    return {idx / side() - radius_, idx % side() - radius_};
  }

 private:
  int dim_;
  int radius_;
};

struct BuildOptions {
  double max_discard_ratio = 0.1;
  bool check_weights = true;
  /// Entries below prune_tol * max|r| are set to exactly zero.
  double prune_tol = 1e-14;
};

class GainKernel {
 public:
  GainKernel() = default;
  GainKernel(int dim, int radius, Eigen::MatrixXcd values, std::vector<Atom> atoms, double discarded,
             double retained)
      : dim_(dim),
        radius_(radius),
        values_(std::move(values)),
        atoms_(std::move(atoms)),
        discarded_(discarded),
        retained_(retained) {
    require(values_.rows() == window().size() && values_.cols() == window().size(),
            "GainKernel: value matrix does not match the window");
  }

  int dim() const { return dim_; }
  int radius() const { return radius_; }
  Window window() const { return Window(dim_, radius_); }
  const Eigen::MatrixXcd& values() const { return values_; }
  const std::vector<Atom>& atoms() const { return atoms_; }
  double discarded_mass() const { return discarded_; }
  double retained_mass() const { return retained_; }

  /// r(xi, eta); zero outside the cutoff window.
  Complex value(Site xi, Site eta) const {
    const Window w = window();
    if (!w.contains(xi) || !w.contains(eta)) return 0.0;
    return values_(w.index(xi), w.index(eta));
  }

  /// l(k) = r(0, k), the loss convolution kernel.
  Complex loss(Site k) const { return value({0, 0}, k); }

  /// Lindblad kernel r(xi, eta) - r(0, eta - xi) restricted to |xi|, |eta| <= W.
  Eigen::MatrixXcd lindblad_matrix(int radius) const {
    const Window w(dim_, radius);
    Eigen::MatrixXcd m(w.size(), w.size());
    for (int a = 0; a < w.size(); ++a) {
      for (int b = 0; b < w.size(); ++b) {
        const Site xi = w.site(a), eta = w.site(b);
        m(a, b) = value(xi, eta) - loss(eta - xi);
      }
    }
    return m;
  }

  GainKernel scaled(double s) const {
    GainKernel k = *this;
    k.values_ *= s;
    for (Atom& a : k.atoms_) a.w *= s;
    k.discarded_ *= std::abs(s);
    k.retained_ *= std::abs(s);
    return k;
  }

  bool empty() const { return dim_ == 0; }

 private:
  int dim_ = 0;
  int radius_ = 0;
  Eigen::MatrixXcd values_;
  std::vector<Atom> atoms_;
  double discarded_ = 0.0;
  double retained_ = 0.0;
};

/// Fourier coefficients of the atom list on a window, accumulated in chunks.
inline Eigen::MatrixXcd evaluate_atoms(const std::vector<Atom>& atoms, const Window& w) {
  const int n = w.size();
  Eigen::MatrixXcd r = Eigen::MatrixXcd::Zero(n, n);
  constexpr std::size_t kChunk = 2048;
  for (std::size_t start = 0; start < atoms.size(); start += kChunk) {
    const std::size_t len = std::min(kChunk, atoms.size() - start);
    Eigen::MatrixXcd a(n, static_cast<Eigen::Index>(len));
    Eigen::MatrixXcd b(n, static_cast<Eigen::Index>(len));
    for (std::size_t j = 0; j < len; ++j) {
      const Atom& at = atoms[start + j];
      for (int k = 0; k < n; ++k) {
        const Site xi = w.site(k);
        a(k, static_cast<Eigen::Index>(j)) = at.w * std::polar(1.0, xi[0] * at.p[0] + xi[1] * at.p[1]);
        b(k, static_cast<Eigen::Index>(j)) = std::polar(1.0, xi[0] * at.q[0] + xi[1] * at.q[1]);
      }
    }
    r.noalias() += a * b.adjoint();
  }
  return r;
}

inline GainKernel build_kernel(const MeasureSpec& spec, int radius, const BuildOptions& opts = {}) {
  require(radius >= 1, "build_kernel: radius must be >= 1");
  require(spec.dim == 1 || spec.dim == 2, "build_kernel: dim must be 1 or 2");
  if (opts.check_weights) {
    for (const Atom& a : spec.atoms) {
      if (a.w < 0.0) {
        throw Error(ErrorCode::NegativeWeight, "atom at p=(" + fmt(a.p[0]) + "," +
                                                   fmt(a.p[1]) + ") has weight " +
                                                   fmt(a.w));
      }
    }
  }
  std::vector<Atom> atoms = symmetrized_atoms(spec);
  const Window wide(spec.dim, 2 * radius);
  const Window narrow(spec.dim, radius);
  const Eigen::MatrixXcd full = evaluate_atoms(atoms, wide);
  const double scale = full.size() > 0 ? full.cwiseAbs().maxCoeff() : 0.0;

  Eigen::MatrixXcd r(narrow.size(), narrow.size());
  double total = 0.0, retained = 0.0;
  for (int a = 0; a < wide.size(); ++a) {
    for (int b = 0; b < wide.size(); ++b) {
      const Complex v = std::abs(full(a, b)) <= opts.prune_tol * scale ? Complex(0.0) : full(a, b);
      total += std::abs(v);
      const Site xi = wide.site(a), eta = wide.site(b);
      if (narrow.contains(xi) && narrow.contains(eta)) {
        r(narrow.index(xi), narrow.index(eta)) = v;
        retained += std::abs(v);
      }
    }
  }
  const double discarded = std::max(0.0, total - retained);
  if (discarded > opts.max_discard_ratio * retained && discarded > 0.0) {
    throw Error(ErrorCode::TruncationTooLossy, "discarded mass " + fmt(discarded) +
                                                   " exceeds " + fmt(opts.max_discard_ratio) +
                                                   " of retained mass " + fmt(retained));
  }
  return GainKernel(spec.dim, radius, std::move(r), std::move(atoms), discarded, retained);
}

/// Rates rhat(p_a, p_b) = Sum r(xi, eta) e^{-i xi.p_a + i eta.p_b} on the n^d grid (real part).
/// Sampled symbol of the truncated kernel, without any clamping.
inline Eigen::MatrixXd symbol_grid(const GainKernel& k, int nq) {
  const Window w = k.window();
  const int np = torus_grid_size(k.dim(), nq);
  Eigen::MatrixXcd f(np, w.size());
  for (int a = 0; a < np; ++a) {
    const TorusPoint p = torus_grid_point(k.dim(), nq, a);
    for (int j = 0; j < w.size(); ++j) {
      const Site xi = w.site(j);
      f(a, j) = std::polar(1.0, -(xi[0] * p[0] + xi[1] * p[1]));
    }
  }
  return (f * k.values() * f.adjoint()).real();
}

/// Jump rates rhat(p_a, p_b) on the grid. Truncation can push the symbol below zero by at
/// most the discarded mass; such values are clamped so every consumer sees the same rates.
inline Eigen::MatrixXd rate_grid(const GainKernel& k, int nq) {
  Eigen::MatrixXd r = symbol_grid(k, nq);
  const double budget = k.discarded_mass();
  for (Eigen::Index i = 0; i < r.size(); ++i) {
    double& v = r.data()[i];
    if (v < 0.0 && v >= -budget) v = 0.0;
  }
  return r;
}

/// Jump generator (L f)(p) = (1/N) Sum_q rhat(p,q) [f(q) - f(p)] on the grid.
inline Eigen::MatrixXd jump_generator(const Eigen::MatrixXd& rates) {
  const double cell = 1.0 / static_cast<double>(rates.rows());
  Eigen::MatrixXd g = cell * rates;
  g.diagonal() -= cell * rates.rowwise().sum();
  return g;
}

struct GapResult {
  double gap = 0.0;
  Eigen::VectorXd eigenvector;
};

/// Smallest eigenvalue of -(G + G^T)/2 on mean-zero grid functions.
inline GapResult symmetrized_gap(const Eigen::MatrixXd& generator) {
  const Eigen::Index n = generator.rows();
  const Eigen::MatrixXd proj =
      Eigen::MatrixXd::Identity(n, n) - Eigen::MatrixXd::Constant(n, n, 1.0 / static_cast<double>(n));
  const Eigen::MatrixXd s = -0.5 * (generator + generator.transpose());
  const double shift = 10.0 * (s.cwiseAbs().rowwise().sum().maxCoeff() + 1.0);
  const Eigen::MatrixXd m = proj * s * proj + Eigen::MatrixXd::Constant(n, n, shift / static_cast<double>(n));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  return {es.eigenvalues()(0), es.eigenvectors().col(0)};
}

inline constexpr double kGridRefineTol = 0.05;

struct SpectralGap {
  double c = 0.0;
  double uncertainty = 0.0;  // |c(N_q) - c(2 N_q)|
  Eigen::VectorXd eigenvector;
};

/// Certified gap on the N_q grid, refined once to 2 N_q.
inline SpectralGap spectral_gap_certified(const GainKernel& k, int nq) {
  require(nq >= 8 && nq % 2 == 0, "spectral_gap: N_q must be even and >= 8");
  const GapResult coarse = symmetrized_gap(jump_generator(rate_grid(k, nq)));
  const GapResult fine = symmetrized_gap(jump_generator(rate_grid(k, 2 * nq)));
  const double diff = std::abs(coarse.gap - fine.gap);
  const double ref = std::max(std::abs(coarse.gap), std::abs(fine.gap));
  if (ref > 1e-12 && diff > kGridRefineTol * ref) {
    throw Error(ErrorCode::GridTooCoarse, "gap " + fmt(coarse.gap) + " at N_q=" +
                                              std::to_string(nq) + " vs " + fmt(fine.gap) +
                                              " at N_q=" + std::to_string(2 * nq));
  }
  return {coarse.gap, diff, coarse.eigenvector};
}

inline double spectral_gap(const GainKernel& k, int nq) { return spectral_gap_certified(k, nq).c; }

struct JumpBound {
  double column_max = 0.0;  // sup_p int rhat(q, p) dq
  double row_max = 0.0;     // sup_p int rhat(p, q) dq
};

inline JumpBound jump_rate_bounds(const GainKernel& k, int nq) {
  const Eigen::MatrixXd rates = rate_grid(k, nq);
  const double cell = 1.0 / static_cast<double>(rates.rows());
  return {cell * rates.colwise().sum().maxCoeff(), cell * rates.rowwise().sum().maxCoeff()};
}

inline double jump_rate_bound(const GainKernel& k, int nq) { return jump_rate_bounds(k, nq).column_max; }

/// sup_p |lhat(p)| with lhat(p) = Sum_k l(k) e^{i k.p}, sampled on a fine grid.
inline double loss_symbol_sup(const GainKernel& k, int nq = 256) {
  const Window w = k.window();
  const int n = k.dim() == 1 ? nq : 64;
  const int np = torus_grid_size(k.dim(), n);
  double best = 0.0;
  for (int a = 0; a < np; ++a) {
    const TorusPoint p = torus_grid_point(k.dim(), n, a);
    Complex acc = 0.0;
    for (int j = 0; j < w.size(); ++j) {
      const Site kk = w.site(j);
      const Complex l = k.loss(kk);
      if (l != Complex(0.0)) acc += l * std::polar(1.0, kk[0] * p[0] + kk[1] * p[1]);
    }
    best = std::max(best, std::abs(acc));
  }
  return best;
}

/// Estimate of the l2 operator norm of G - L on a fiber.
inline double lindblad_norm(const GainKernel& k) {
  const Eigen::MatrixXcd m = k.lindblad_matrix(3 * k.radius());
  Eigen::JacobiSVD<Eigen::MatrixXcd> svd(m);
  return std::max(svd.singularValues()(0), loss_symbol_sup(k));
}

/// Rescales (r, g) -> (r / s, g s) so that the Lindblad operator has norm <= 1.
inline std::pair<GainKernel, double> normalize(const GainKernel& k, double g) {
  require(g > 0.0, "normalize: g must be positive");
  const double s = lindblad_norm(k);
  if (s == 0.0) throw Error(ErrorCode::ZeroKernel, "kernel has zero operator norm");
  if (std::abs(s - 1.0) < 1e-12) return {k, g};
  return {k.scaled(1.0 / s), g * s};
}

struct CheckItem {
  std::string name;
  bool pass = true;
  std::string detail;
  nlohmann::json witness;
};

struct ValidationReport {
  std::vector<CheckItem> items;
  double c = 0.0;
  double c_uncertainty = 0.0;
  double jump_bound = 0.0;
  double opnorm = 0.0;
  double discarded_mass = 0.0;
  int nq = 0;

  bool all_pass() const {
    for (const auto& it : items) {
      if (!it.pass) return false;
    }
    return true;
  }

  const CheckItem& item(const std::string& name) const {
    for (const auto& it : items) {
      if (it.name == name) return it;
    }
    throw Error(ErrorCode::InvalidArgument, "no report item " + name);
  }

  std::vector<std::string> failing() const {
    std::vector<std::string> out;
    for (const auto& it : items) {
      if (!it.pass) out.push_back(it.name);
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["pass"] = all_pass();
    j["constants"] = {{"c", c},
                      {"c_uncertainty", c_uncertainty},
                      {"M", jump_bound},
                      {"opnorm", opnorm},
                      {"discarded_mass", discarded_mass},
                      {"N_q", nq}};
    j["items"] = nlohmann::json::array();
    for (const auto& it : items) {
      nlohmann::json e = {{"name", it.name}, {"pass", it.pass}, {"detail", it.detail}};
      if (!it.witness.is_null()) e["witness"] = it.witness;
      j["items"].push_back(e);
    }
    return j;
  }
};

struct ValidateOptions {
  int nq = 0;  // 0 picks 64 in d=1 and 16 in d=2
  double tol = 1e-12;
  double gap_min = 1e-8;
};

namespace detail {

inline nlohmann::json site_json(Site s, int dim) {
  return dim == 1 ? nlohmann::json::array({s[0]}) : nlohmann::json::array({s[0], s[1]});
}

inline Site apply_signed_perm(Site x, const std::array<int, 2>& perm, const std::array<int, 2>& sign) {
  return {sign[0] * x[static_cast<std::size_t>(perm[0])], sign[1] * x[static_cast<std::size_t>(perm[1])]};
}

}  // namespace detail

inline ValidationReport validate(const GainKernel& k, const ValidateOptions& opts = {}) {
  ValidationReport rep;
  const int d = k.dim();
  const Window w = k.window();
  rep.nq = opts.nq > 0 ? opts.nq : (d == 1 ? 64 : 16);
  rep.discarded_mass = k.discarded_mass();
  const double scale = std::max(1.0, k.values().cwiseAbs().maxCoeff());
  const double tol = opts.tol * scale;

  CheckItem parity{"item1_parity", true, "r(xi,eta) = 0 unless xi + eta is even", {}};
  CheckItem inversion{"assumption2_inversion", true, "r(R_i xi, R_i eta) = r(xi, eta)", {}};
  CheckItem permutation{"assumption2_permutation", true, "r(T xi, T eta) = r(xi, eta)", {}};
  double parity_worst = 0.0, inv_worst = 0.0, perm_worst = 0.0;
  for (int a = 0; a < w.size(); ++a) {
    for (int b = 0; b < w.size(); ++b) {
      const Site xi = w.site(a), eta = w.site(b);
      const Complex v = k.values()(a, b);
      const Site s = xi + eta;
      if ((!is_even(s[0]) || !is_even(s[1])) && std::abs(v) > tol && std::abs(v) > parity_worst) {
        parity_worst = std::abs(v);
        parity.pass = false;
        parity.witness = {{"xi", detail::site_json(xi, d)}, {"eta", detail::site_json(eta, d)}, {"abs_r", std::abs(v)}};
      }
      for (int i = 0; i < d; ++i) {
        Site rx = xi, re = eta;
        rx[static_cast<std::size_t>(i)] = -rx[static_cast<std::size_t>(i)];
        re[static_cast<std::size_t>(i)] = -re[static_cast<std::size_t>(i)];
        const double diff = std::abs(k.value(rx, re) - v);
        if (diff > tol && diff > inv_worst) {
          inv_worst = diff;
          inversion.pass = false;
          inversion.witness = {{"axis", i}, {"xi", detail::site_json(xi, d)}, {"eta", detail::site_json(eta, d)}, {"diff", diff}};
        }
      }
      if (d == 2) {
        const double diff = std::abs(k.value({xi[1], xi[0]}, {eta[1], eta[0]}) - v);
        if (diff > tol && diff > perm_worst) {
          perm_worst = diff;
          permutation.pass = false;
          permutation.witness = {{"xi", detail::site_json(xi, d)}, {"eta", detail::site_json(eta, d)}, {"diff", diff}};
        }
      }
    }
  }

  // The truncated kernel is what the dynamics uses, so its sampled symbol must also stay
  // non-negative up to the truncation error, which the discarded mass bounds.
  CheckItem positivity{"item2_positivity", true, "", {}};
  for (const Atom& at : k.atoms()) {
    if (at.w < 0.0) {
      positivity.pass = false;
      positivity.witness = {{"p", {at.p[0], at.p[1]}}, {"q", {at.q[0], at.q[1]}}, {"w", at.w}};
      break;
    }
  }
  {
    const Eigen::MatrixXd sym = symbol_grid(k, rep.nq);
    Eigen::Index a = 0, b = 0;
    const double lowest = sym.size() ? sym.minCoeff(&a, &b) : 0.0;
    positivity.detail = "weights >= 0, min rhat = " + fmt(lowest) + " vs truncation " + fmt(k.discarded_mass());
    if (positivity.pass && lowest < -(k.discarded_mass() + tol)) {
      positivity.pass = false;
      const TorusPoint p = torus_grid_point(d, rep.nq, static_cast<int>(a));
      const TorusPoint q = torus_grid_point(d, rep.nq, static_cast<int>(b));
      positivity.witness = {{"p", {p[0], p[1]}}, {"q", {q[0], q[1]}}, {"rhat", lowest}};
    }
  }

  CheckItem sum_rule{"item3_sum_rule", true, "r(xi,0) = r(0,-xi)", {}};
  double sum_worst = 0.0;
  for (int a = 0; a < w.size(); ++a) {
    const Site xi = w.site(a);
    const double diff = std::abs(k.value(xi, {0, 0}) - k.value({0, 0}, -xi));
    if (diff > tol && diff > sum_worst) {
      sum_worst = diff;
      sum_rule.pass = false;
      sum_rule.witness = {{"xi", detail::site_json(xi, d)}, {"diff", diff}};
    }
  }

  CheckItem gap{"item4_spectral_gap", true, "", {}};
  try {
    const SpectralGap sg = spectral_gap_certified(k, rep.nq);
    rep.c = sg.c;
    rep.c_uncertainty = sg.uncertainty;
    gap.detail = "c = " + fmt(sg.c) + " +- " + fmt(sg.uncertainty);
    if (!(sg.c > opts.gap_min)) {
      gap.pass = false;
      std::vector<double> v(sg.eigenvector.data(), sg.eigenvector.data() + sg.eigenvector.size());
      gap.witness = {{"eigenvalue", sg.c}, {"eigenvector", v}};
    }
  } catch (const Error& e) {
    gap.pass = false;
    gap.detail = e.what();
  }

  CheckItem bounded{"item5_boundedness", true, "", {}};
  const Eigen::MatrixXd absr = k.values().cwiseAbs();
  const double row = absr.size() ? absr.rowwise().sum().maxCoeff() : 0.0;
  const double col = absr.size() ? absr.colwise().sum().maxCoeff() : 0.0;
  const double schur = std::sqrt(row * col);
  const JumpBound jb = jump_rate_bounds(k, rep.nq);
  rep.jump_bound = jb.column_max;
  rep.opnorm = lindblad_norm(k);
  bounded.detail = "||G|| <= " + fmt(schur) + ", M = " + fmt(jb.column_max) +
                   ", ||L|| ~ " + fmt(rep.opnorm);
  bounded.pass = std::isfinite(schur) && std::isfinite(rep.opnorm) && std::isfinite(jb.column_max);

  rep.items = {parity, positivity, sum_rule, gap, bounded, inversion, permutation};
  return rep;
}

/// Atoms of a density rhat(p, q) sampled on the N_q^d x N_q^d grid with Haar cell weights.
inline MeasureSpec grid_density_spec(int dim, int nq, const std::function<double(TorusPoint, TorusPoint)>& density,
                                     bool symmetrize = true) {
  MeasureSpec spec;
  spec.dim = dim;
  spec.symmetrize_pi = symmetrize;
  spec.symmetrize_lattice = symmetrize;
  const int np = torus_grid_size(dim, nq);
  const double cell = 1.0 / (static_cast<double>(np) * np);
  for (int a = 0; a < np; ++a) {
    for (int b = 0; b < np; ++b) {
      const TorusPoint p = torus_grid_point(dim, nq, a), q = torus_grid_point(dim, nq, b);
      const double v = density(p, q);
      if (v != 0.0) spec.atoms.push_back({p, q, v * cell});
    }
  }
  return spec;
}

/// rhat = 1: the product of Haar measures.
inline MeasureSpec uniform_spec(int dim) {
  return grid_density_spec(dim, dim == 1 ? 16 : 8, [](TorusPoint, TorusPoint) { return 1.0; });
}

/// rhat = 1 + (1/d) Sum_i cos(p_i - q_i).
inline MeasureSpec cosine_spec(int dim) {
  return grid_density_spec(dim, dim == 1 ? 32 : 8, [dim](TorusPoint p, TorusPoint q) {
    double s = 0.0;
    for (int i = 0; i < dim; ++i) s += std::cos(p[static_cast<std::size_t>(i)] - q[static_cast<std::size_t>(i)]);
    return 1.0 + s / dim;
  });
}

using TorusFunction = std::function<double(TorusPoint)>;

/// Band energy eps(p) = 2u(d - Sum cos p_i).
inline double band_energy(TorusPoint p, int dim, double u) {
  double s = 0.0;
  for (int i = 0; i < dim; ++i) s += std::cos(p[static_cast<std::size_t>(i)]);
  return 2.0 * u * (dim - s);
}

/// High-temperature boson kernel with Gaussian-mollified energy shells.
inline MeasureSpec boson_kernel_beta0(int dim, const TorusFunction& form_factor, const TorusFunction& dispersion,
                                      double sigma, double u, int nq) {
  require(sigma > 0.0, "boson_kernel_beta0: sigma must be positive");
  require(nq >= 2 && nq % 2 == 0, "boson_kernel_beta0: N_q must be even");
  const double norm = 1.0 / (sigma * std::sqrt(kTwoPi));
  auto phi = [&](double x) { return norm * std::exp(-0.5 * x * x / (sigma * sigma)); };
  return grid_density_spec(dim, nq, [&](TorusPoint p, TorusPoint q) {
    const TorusPoint k{p[0] - q[0], p[1] - q[1]};
    const double f = form_factor(k);
    require(f >= 0.0, "boson_kernel_beta0: form factor must be non-negative");
    const double de = band_energy(p, dim, u) - band_energy(q, dim, u);
    const double om = dispersion(k);
    return f * (phi(de - om) + phi(de + om));
  });
}

inline MeasureSpec boson_kernel_default(int dim = 1) {
  return boson_kernel_beta0(
      dim, [](TorusPoint) { return 1.0; }, [](TorusPoint) { return 0.0; }, 0.5, 1.0, 64);
}

struct KernelPreset {
  MeasureSpec spec;
  int radius = 6;
};

/// Named presets: "uniform", "cosine", "boson-beta0" (d = 1 only).
inline KernelPreset kernel_preset(const std::string& name, int dim) {
  require(dim == 1 || dim == 2, "kernel_preset: dim must be 1 or 2");
  if (name == "uniform") return {uniform_spec(dim), dim == 1 ? 6 : 3};
  if (name == "cosine") return {cosine_spec(dim), dim == 1 ? 6 : 3};
  if (name == "boson-beta0") {
    require(dim == 1, "boson-beta0 preset is defined for d = 1");
    return {boson_kernel_default(1), 20};
  }
  throw Error(ErrorCode::InvalidArgument, "unknown kernel preset '" + name + "'");
}

inline const std::vector<std::string>& kernel_preset_names() {
  static const std::vector<std::string> names = {"uniform", "cosine", "boson-beta0"};
  return names;
}

/// On-disk kernel description: {"preset": name, "dim": d} or {"spec": MeasureSpec}, plus
/// optional "radius", "check_weights" and "max_discard_ratio".
struct KernelFile {
  std::string name;
  MeasureSpec spec;
  int radius = 6;
  BuildOptions build;
};

inline KernelFile kernel_file_from_json(const nlohmann::json& j) {
  require(j.is_object(), "kernel file: expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    require(key == "name" || key == "preset" || key == "dim" || key == "spec" || key == "radius" ||
                key == "check_weights" || key == "max_discard_ratio",
            "kernel file: unknown field '" + key + "'");
  }
  require(j.contains("preset") != j.contains("spec"), "kernel file: give exactly one of 'preset' or 'spec'");
  KernelFile f;
  if (j.contains("preset")) {
    const KernelPreset p = kernel_preset(j["preset"].get<std::string>(), j.value("dim", 1));
    f.name = j["preset"].get<std::string>();
    f.spec = p.spec;
    f.radius = p.radius;
  } else {
    require(!j.contains("dim"), "kernel file: 'dim' belongs inside 'spec'");
    f.spec = measure_spec_from_json(j["spec"]);
  }
  f.name = j.value("name", f.name);
  f.radius = j.value("radius", f.radius);
  f.build.check_weights = j.value("check_weights", true);
  f.build.max_discard_ratio = j.value("max_discard_ratio", f.build.max_discard_ratio);
  return f;
}

inline nlohmann::json to_json(const KernelFile& f) {
  return {{"name", f.name},
          {"spec", to_json(f.spec)},
          {"radius", f.radius},
          {"check_weights", f.build.check_weights},
          {"max_discard_ratio", f.build.max_discard_ratio}};
}

inline GainKernel build_kernel(const KernelFile& f) { return build_kernel(f.spec, f.radius, f.build); }

}  // namespace qbm
