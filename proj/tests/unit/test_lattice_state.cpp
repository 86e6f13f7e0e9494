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


#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "qbm/evolution.hpp"

namespace qbm {
namespace {

DensityState random_state(const LatticeBox& box, std::uint64_t seed) {
  CounterRng rng(seed, 0);
  const int n = box.num_sites();
  Eigen::MatrixXcd a(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) a(i, j) = Complex(rng.uniform() - 0.5, rng.uniform() - 0.5);
  }
  Eigen::MatrixXcd rho = a * a.adjoint();
  rho /= rho.trace().real();
  return DensityState(box, rho);
}

GainKernel cosine_kernel() {
  const KernelPreset p = kernel_preset("cosine", 1);
  return build_kernel(p.spec, p.radius);
}

TEST(PointState, SingleUnitEntryAtOrigin) {
  const LatticeBox box(1, 4);
  const DensityState s = DensityState::point(box);
  EXPECT_EQ(s.at({0, 0}, {0, 0}), Complex(1.0));
  EXPECT_EQ(s.matrix().cwiseAbs().sum(), 1.0);
  EXPECT_EQ(trace(s), 1.0);
  EXPECT_EQ(hermiticity_defect(s), 0.0);
  EXPECT_EQ(position_moment(s, 0, 0), 0.0);
}

TEST(PointState, WignerIsConstantOne) {
  const DensityState s = DensityState::point(LatticeBox(2, 2));
  for (const Complex& w : wigner(s, {0, 0}, 8)) EXPECT_EQ(w, Complex(1.0));
}

TEST(DensityStateTest, OffParityEntriesAreZero) {
  const DensityState s = random_state(LatticeBox(2, 2), 1);
  EXPECT_EQ(s.at({1, 0}, {0, 0}), Complex(0.0));
  EXPECT_EQ(s.at({1, 1}, {0, 1}), Complex(0.0));
  DensityState t(LatticeBox(1, 2));
  EXPECT_THROW(t.set({1, 0}, {0, 0}, 1.0), Error);
}

TEST(DensityStateTest, HermitianInXiCoordinates) {
  const DensityState s = random_state(LatticeBox(1, 3), 2);
  for (int X = -6; X <= 6; ++X) {
    for (int xi = -6; xi <= 6; ++xi) EXPECT_NEAR(std::abs(s.at({X, 0}, {xi, 0}) - std::conj(s.at({X, 0}, {-xi, 0}))), 0.0, 1e-15);
  }
}

TEST(Trace, IsLinear) {
  DensityState s = DensityState::point(LatticeBox(1, 4));
  s *= 0.5;
  EXPECT_EQ(trace(s), 0.5);
}

TEST(Trace, ImaginaryTraceIsRejected) {
  DensityState s = DensityState::point(LatticeBox(1, 2));
  s.matrix()(0, 0) = Complex(0.0, 1e-6);
  try {
    trace(s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonRealTrace);
  }
}

TEST(Trace, PreservedByDissipativeEvolution) {
  const LatticeBox box(1, 6);
  const GainKernel k = cosine_kernel();
  const DisorderField f = sample(box, DisorderDist::uniform(), 3);
  const Trajectory tr = evolve(random_state(box, 4), {1.0, 2.0, 0.5}, f, &k, {0.0, 0.5, 1.0}, {1e-10, 1.0});
  for (const auto& s : tr.states) {
    EXPECT_NEAR(trace(s), 1.0, 1e-8);
    EXPECT_LT(hermiticity_defect(s), 1e-9);
  }
}

TEST(PositionMoment, TwoPointMass) {
  const LatticeBox box(1, 3);
  DensityState s(box);
  s.set({2, 0}, {0, 0}, 0.5);
  s.set({-2, 0}, {0, 0}, 0.5);
  EXPECT_DOUBLE_EQ(position_moment(s, 0, 0), 1.0);
}

TEST(PositionMoment, SymmetricInAxes) {
  const DensityState s = random_state(LatticeBox(2, 2), 5);
  EXPECT_NEAR(position_moment(s, 0, 1), position_moment(s, 1, 0), 1e-15);
}

// Free hopping from a point: |<x|psi_t>|^2 = J_x(2ut)^2, so the moment is Sum x^2 J_x(2ut)^2.
TEST(PositionMoment, FreeWavefunctionMatchesBesselOracle) {
  const LatticeBox box(1, 12);
  const Trajectory tr = evolve(DensityState::point(box), {1.0, 0.0, 0.0}, DisorderField::zero(box), nullptr,
                               {0.0, 0.5}, {1e-12, 1e-10});
  double oracle = 0.0;
  for (int x = -40; x <= 40; ++x) oracle += x * x * std::pow(std::cyl_bessel_j(std::abs(x), 1.0), 2);
  EXPECT_NEAR(position_moment(tr.states.back(), 0, 0), oracle, 1e-10);
  EXPECT_NEAR(oracle, 0.5, 1e-12);
}

TEST(Wigner, PeriodicOrAntiPeriodicUnderPiShift) {
  const int nq = 16;
  const DensityState s = random_state(LatticeBox(1, 3), 6);
  for (int X = -6; X <= 6; ++X) {
    const std::vector<Complex> w = wigner(s, {X, 0}, nq);
    const double sign = is_even(X) ? 1.0 : -1.0;
    for (int k = 0; k < nq / 2; ++k) EXPECT_NEAR(std::abs(w[k + nq / 2] - sign * w[k]), 0.0, 1e-12);
  }
}

TEST(Wigner, GridMeanRecoversDiagonal) {
  const DensityState s = random_state(LatticeBox(1, 3), 7);
  for (int X = -6; X <= 6; ++X) {
    const std::vector<Complex> w = wigner(s, {X, 0}, 32);
    Complex mean = 0.0;
    for (const Complex& v : w) mean += v;
    mean /= 32.0;
    EXPECT_NEAR(std::abs(mean - s.at({X, 0}, {0, 0})), 0.0, 1e-13);
  }
}

TEST(WeightedNorm, PointStateHasUnitNorm) {
  EXPECT_EQ(weighted_norm(DensityState::point(LatticeBox(1, 4)), 1.0), 1.0);
}

TEST(WeightedNorm, OffsetEntryPicksUpExponentialWeight) {
  DensityState s(LatticeBox(1, 4));
  s.set({2, 0}, {0, 0}, 1.0);
  EXPECT_NEAR(weighted_norm(s, 1.0), std::exp(2.0), 1e-14);
}

TEST(WeightedNorm, GrowthBoundedByGroupVelocity) {
  const LatticeBox box(1, 8);
  const GainKernel k = cosine_kernel();
  const GeneratorParams p{1.0, 1.0, 0.5};
  std::vector<double> grid;
  for (int i = 0; i <= 10; ++i) grid.push_back(0.1 * i);
  const Trajectory tr = evolve(DensityState::point(box), p, sample(box, DisorderDist::uniform(), 9), &k, grid,
                               {1e-11, 1.0});
  const CheckResult r = group_velocity_check(tr, 0.5, p);
  EXPECT_TRUE(r.pass) << r.worst;
  EXPECT_EQ(r.at_time, 0.0);
}

TEST(StateCsv, ColumnOrder) {
  DensityState s(LatticeBox(1, 1));
  s.set({0, 0}, {0, 0}, Complex(0.25, -0.5));
  std::ostringstream os;
  write_csv(os, s);
  const std::string out = os.str();
  EXPECT_EQ(out.substr(0, out.find('\n')), "X1,xi1,re,im");
  EXPECT_NE(out.find("\n0,0,0.25,-0.5\n"), std::string::npos);
}

}  // namespace
}  // namespace qbm
