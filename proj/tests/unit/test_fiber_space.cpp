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

#include <unsupported/Eigen/MatrixFunctions>

#include "qbm/diffusion/fiber_space.hpp"

namespace qbm {
namespace {

GainKernel cosine_kernel(int dim) {
  const KernelPreset p = kernel_preset("cosine", dim);
  return build_kernel(p.spec, p.radius);
}

DisorderField periodic_field(int dim, int radius, std::uint64_t seed) {
  return sample(LatticeBox(dim, radius, Boundary::Periodic), DisorderDist::uniform(), seed);
}

TEST(FiberSpace, VanishingDisorderGivesZeroPotential) {
  const GainKernel k = cosine_kernel(1);
  const LatticeBox box(1, 2, Boundary::Periodic);
  const FiberSpace fs = build_fiber_space(box, 4, {1.0, 0.0, 1.0}, &k, DisorderField::zero(box));
  EXPECT_EQ(fs.V().nonZeros(), 0);
}

TEST(FiberSpace, VacuumIsInvariantAndAIsRealSymmetric) {
  for (int dim : {1, 2}) {
    const GainKernel k = cosine_kernel(dim);
    const int lb = dim == 1 ? 4 : 2;
    const LatticeBox box(dim, lb, Boundary::Periodic);
    const FiberSpace fs = build_fiber_space(box, 3, {1.0, 2.5, 0.7}, &k, periodic_field(dim, lb, 11));
    const FiberChecks c = check_fiber_space(fs);
    EXPECT_LT(c.g_vacuum, 1e-12);
    EXPECT_LT(c.g_adjoint_vacuum, 1e-12);
    EXPECT_LT(c.a_asymmetry, 1e-12);
    EXPECT_LT(c.a_imag, 1e-12);
  }
}

TEST(FiberSpace, ParityBreakingKernelIsRejected) {
  MeasureSpec spec = grid_density_spec(1, 16, [](TorusPoint p, TorusPoint q) {
    return 1.0 + 0.5 * (std::cos(p[0]) + std::cos(q[0]));
  }, false);
  const GainKernel k = build_kernel(spec, 3);
  const LatticeBox box(1, 2, Boundary::Periodic);
  try {
    build_fiber_space(box, 4, {1.0, 1.0, 1.0}, &k, periodic_field(1, 2, 1));
    FAIL() << "expected KernelConstraintViolated";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::KernelConstraintViolated);
  }
}

// With the frame convention omega_a(s) = omega_0(s + a), the fiber function at label a is
// F(xi, a) = Sum_y rho^{(y)}(y + xi, y), where rho^{(y)} evolves from |0><0| in the potential
// x -> omega_0(x - y + a). Both sides come from dense exponentials of independently
// assembled generators.
TEST(FiberSpace, FiberDynamicsMatchesDensityMatrixDynamics) {
  const GainKernel k = cosine_kernel(1);
  const int lb = 1;
  const LatticeBox pbox(1, lb, Boundary::Periodic);
  const DisorderField omega0 = periodic_field(1, lb, 5);
  const GeneratorParams params{1.0, 1.7, 0.6};
  const int xi_radius = 10;
  const FiberSpace fs = build_fiber_space(pbox, xi_radius, params, &k, omega0);
  const double t = 0.4;
  const Eigen::VectorXcd f = (Eigen::MatrixXcd(fs.G()) * Complex(-t)).exp() * fs.vacuum();

  const int L = 7;
  const LatticeBox box(1, L);
  double worst = 0.0;
  for (int ak = 0; ak < pbox.num_sites(); ++ak) {
    const Site a = pbox.site(ak);
    std::vector<Complex> expect(9, 0.0);
    for (int y = -L; y <= L; ++y) {
      std::vector<double> vals(static_cast<std::size_t>(box.num_sites()));
      for (int s = 0; s < box.num_sites(); ++s) {
        vals[static_cast<std::size_t>(s)] = omega0(box.site(s) - Site{y, 0} + a);
      }
      const Generator gen(box, params, DisorderField(box, vals), &k);
      const DensityState rho = dense_propagate(DensityState::point(box), gen, t);
      for (int xi = -4; xi <= 4; ++xi) {
        if (!box.contains({y + xi, 0})) continue;
        expect[static_cast<std::size_t>(xi + 4)] += rho.matrix()(box.index({y + xi, 0}), box.index({y, 0}));
      }
    }
    for (int xi = -4; xi <= 4; ++xi) {
      worst = std::max(worst, std::abs(f(fs.index({xi, 0}, a)) - expect[static_cast<std::size_t>(xi + 4)]));
    }
  }
  EXPECT_LT(worst, 1e-7) << worst;
}

}  // namespace
}  // namespace qbm
