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


// Regenerates data/kernels and data/fixtures. Run from the repository root.

#include <cmath>
#include <fstream>
#include <iostream>

#include "qbm/gain_kernel.hpp"

namespace {

using namespace qbm;

void save(const std::string& path, const KernelFile& f) {
  std::ofstream(path) << to_json(f).dump() << "\n";
  const KernelFile back = kernel_file_from_json(nlohmann::json::parse(std::ifstream(path)));
  const ValidationReport r = validate(build_kernel(back));
  std::cout << path << " pass=" << r.all_pass() << " c=" << r.c << " failing:";
  for (const auto& n : r.failing()) std::cout << ' ' << n;
  std::cout << '\n';
}

}  // namespace

int main() {
  for (const std::string& n : kernel_preset_names()) {
    for (int d : {1, 2}) {
      if (n == "boson-beta0" && d == 2) continue;
      const KernelPreset p = kernel_preset(n, d);
      save("data/kernels/" + n + (d == 1 ? "" : "-2d") + ".json", {n, p.spec, p.radius, {}});
    }
  }
  // Off-lattice support: no pi symmetrization.
  save("data/fixtures/violates-item1-parity.json",
       {"violates-item1-parity",
        grid_density_spec(1, 32, [](TorusPoint p, TorusPoint q) { return 1.0 + 0.5 * (std::cos(p[0]) + std::cos(q[0])); },
                          false),
        6, {}});
  KernelFile f2{"violates-item2-positivity",
                grid_density_spec(1, 32, [](TorusPoint p, TorusPoint q) { return 1.0 + 1.5 * std::cos(p[0] - q[0]); }), 6, {}};
  f2.build.check_weights = false;
  save("data/fixtures/violates-item2-positivity.json", f2);
  save("data/fixtures/violates-item3-sum-rule.json",
       {"violates-item3-sum-rule",
        grid_density_spec(1, 32, [](TorusPoint p, TorusPoint) { return 1.0 + 0.5 * std::cos(2 * p[0]); }), 6, {}});
  // p = 0 and p = pi carry no rates, so the jump process has two absorbing points.
  save("data/fixtures/violates-item4-gap.json",
       {"violates-item4-gap", grid_density_spec(1, 32, [](TorusPoint p, TorusPoint q) {
          return (1.0 - std::cos(2 * p[0])) * (1.0 - std::cos(2 * q[0]));
        }), 6, {}});
  MeasureSpec perm = grid_density_spec(2, 8, [](TorusPoint p, TorusPoint q) { return 1.0 + 0.5 * std::cos(p[0] - q[0]); });
  perm.symmetrize_lattice = false;
  save("data/fixtures/violates-assumption2-permutation.json", {"violates-assumption2-permutation", perm, 3, {}});
}
