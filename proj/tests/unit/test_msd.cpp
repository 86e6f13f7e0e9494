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
#include <functional>

#include "qbm/diffusion/msd.hpp"

namespace qbm {
namespace {

std::vector<double> grid(double dt, double t_end) {
  std::vector<double> t;
  for (int i = 0; i * dt <= t_end + 1e-12; ++i) t.push_back(i * dt);
  return t;
}

MsdSeries synthetic(const std::vector<double>& t, const std::function<double(double, int)>& m, int seeds = 1) {
  std::vector<std::vector<Eigen::Matrix2d>> curves(static_cast<std::size_t>(seeds));
  for (int s = 0; s < seeds; ++s) {
    for (double ti : t) {
      Eigen::Matrix2d v = Eigen::Matrix2d::Zero();
      v(0, 0) = m(ti, s);
      curves[static_cast<std::size_t>(s)].push_back(v);
    }
  }
  return make_series(1, t, curves);
}

TEST(Abel, LinearGrowthGivesSlopeForEveryEta) {
  const MsdSeries s = synthetic(grid(0.5, 200.0), [](double t, int) { return 2.5 * t; });
  for (double eta : {0.05, 0.2, 1.0}) EXPECT_NEAR(abel_diffusion(s, eta).D(0, 0), 2.5, 1e-6) << eta;
}

TEST(Abel, QuadraticGrowthGivesGammaIntegral) {
  const double v2 = 0.8;
  const MsdSeries s = synthetic(grid(0.01, 100.0), [&](double t, int) { return v2 * t * t; });
  for (double eta : {0.5, 1.0}) EXPECT_NEAR(abel_diffusion(s, eta).D(0, 0), 2.0 * v2 / eta, 1e-4) << eta;
}

TEST(Abel, ShortSeriesIsRejected) {
  const MsdSeries s = synthetic(grid(0.5, 10.0), [](double t, int) { return t; });
  EXPECT_THROW(abel_diffusion(s, 0.4), Error);
}

TEST(Abel, HeavyTailIsReported) {
  const MsdSeries s = synthetic(grid(0.1, 10.0), [](double t, int) { return std::pow(t, 6); });
  try {
    abel_diffusion(s, 0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TailDominates);
  }
}

TEST(Abel, ExtrapolationRemovesLinearBias) {
  // M = D t + b (1 - e^{-t}) has D(eta) = D + b eta / (1 + eta); extrapolation cancels the O(eta) term.
  const MsdSeries s = synthetic(grid(0.02, 400.0), [](double t, int) { return 1.5 * t + 4.0 * (1.0 - std::exp(-t)); });
  const double eta = 0.02;
  const double plain = abel_diffusion(s, eta).D(0, 0);
  const double extrap = abel_extrapolated(s, eta).D(0, 0);
  EXPECT_NEAR(plain, 1.5 + 4.0 * eta / (1.0 + eta), 1e-5);
  EXPECT_LT(std::abs(extrap - 1.5), 0.1 * std::abs(plain - 1.5));
}

TEST(Fit, NoisyLineRecoversSlope) {
  const auto t = grid(0.5, 40.0);
  const MsdSeries s = synthetic(t, [](double ti, int seed) {
    CounterRng rng(static_cast<std::uint64_t>(seed), static_cast<std::uint32_t>(ti * 2.0));
    return 3.0 * ti + 0.01 * std::sqrt(12.0) * (rng.uniform() - 0.5);
  }, 8);
  const DiffusionEstimate e = fit_diffusion(s, 5.0, 40.0);
  EXPECT_LT(std::abs(e.D(0, 0) - 3.0), 3.0 * e.stderr_(0, 0));
  EXPECT_LT(e.stderr_(0, 0), 1e-3);
  EXPECT_FALSE(e.diagnostics.at("curvature_flag").get<bool>());
}

TEST(Fit, CurvedSeriesIsFlagged) {
  const MsdSeries s = synthetic(grid(0.5, 20.0), [](double t, int) { return t * t; });
  EXPECT_TRUE(fit_diffusion(s, 2.0, 20.0).diagnostics.at("curvature_flag").get<bool>());
}

TEST(Fit, ShortWindowIsRejected) {
  const MsdSeries s = synthetic(grid(1.0, 20.0), [](double t, int) { return t; });
  try {
    fit_diffusion(s, 10.0, 12.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::WindowTooShort);
  }
}

TEST(Fit, WindowStartsAfterFiveRelaxationTimes) { EXPECT_DOUBLE_EQ(fit_window_start(0.5, 2.0), 5.0); }

TEST(MsdEnsemble, NoHoppingMeansNoSpreading) {
  MsdRequest req;
  req.box = LatticeBox(1, 6);
  req.params = {0.0, 2.0, 0.0};
  req.seeds = {1, 2};
  req.t_grid = grid(0.5, 3.0);
  const MsdSeries s = msd_ensemble(req);
  for (const auto& m : s.mean) EXPECT_EQ(m(0, 0), 0.0);
}

TEST(MsdEnsemble, FreeLatticeIsBallistic) {
  MsdRequest req;
  req.box = LatticeBox(1, 24);
  req.params = {1.0, 0.0, 0.0};
  req.seeds = {1};
  req.t_grid = grid(0.5, 4.0);
  req.evolve.tol = 1e-11;
  const MsdSeries s = msd_ensemble(req);
  for (std::size_t k = 0; k < s.times.size(); ++k) {
    EXPECT_NEAR(s.mean[k](0, 0), 2.0 * s.times[k] * s.times[k], 1e-7) << s.times[k];
  }
}

TEST(MsdEnsemble, ReflectedDisorderFlipsOffDiagonalMoment) {
  const KernelPreset p = kernel_preset("cosine", 2);
  const GainKernel k = build_kernel(p.spec, p.radius);
  const LatticeBox box(2, 6);
  const GeneratorParams params{1.0, 3.0, 0.5};
  const DisorderField f = sample(box, DisorderDist::uniform(), 3);
  EvolveOptions opts;
  opts.tol = 1e-10;
  opts.boundary_tol = 1.0;
  const auto at_one = [&](const DisorderField& field) {
    return moment_matrix(evolve(DensityState::point(box), params, field, &k, {0.0, 1.0}, opts).states.back());
  };
  const Eigen::Matrix2d m = at_one(f);
  ASSERT_GT(std::abs(m(0, 1)), 1e-4);
  for (int axis = 0; axis < 2; ++axis) {
    const Eigen::Matrix2d r = at_one(reflect(f, axis));
    EXPECT_NEAR(r(0, 1), -m(0, 1), 1e-9) << axis;
    EXPECT_NEAR(r(0, 0), m(0, 0), 1e-9) << axis;
  }
  const Eigen::Matrix2d t = at_one(transpose(f));
  EXPECT_NEAR(t(0, 0), m(1, 1), 1e-9);
  EXPECT_NEAR(t(0, 1), m(0, 1), 1e-9);
  EXPECT_NEAR(at_one(DisorderField::zero(box))(0, 1), 0.0, 1e-12);
}

TEST(MsdEnsemble, ReductionFollowsSeedOrder) {
  MsdRequest req;
  req.box = LatticeBox(1, 14);
  req.params = {1.0, 2.0, 0.0};
  req.t_grid = grid(0.5, 2.0);
  req.seeds = {3, 1, 2};
  const MsdSeries a = msd_ensemble(req);
  req.seeds = {1, 2, 3};
  req.workers = 1;
  const MsdSeries b = msd_ensemble(req);
  EXPECT_EQ(a.seeds, b.seeds);
  for (std::size_t t = 0; t < a.times.size(); ++t) EXPECT_EQ(a.mean[t], b.mean[t]);
}

}  // namespace
}  // namespace qbm
