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


// qbm command-line interface. Exit codes: 0 success, 1 failed check or module error,
// 2 invalid configuration or arguments.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "qbm/appendix_oracles.hpp"
#include "qbm/gain_kernel.hpp"
#include "qbm/runner.hpp"

namespace {

using json = nlohmann::json;

constexpr int kExitFail = 1;
constexpr int kExitConfig = 2;

void print_error(const qbm::Error& e) {
  std::cerr << json({{"error", {{"code", qbm::to_string(e.code())}, {"message", e.what()}}}}).dump() << "\n";
}

json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw qbm::Error(qbm::ErrorCode::ConfigInvalid, "cannot read '" + path + "'");
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw qbm::Error(qbm::ErrorCode::ConfigInvalid, "'" + path + "' is not valid JSON: " + e.what());
  }
}

struct Common {
  std::string config;
  std::string preset;
  std::optional<std::string> out;
  std::optional<int> workers;
  bool dump = false;
  bool quiet = false;
};

void add_common(CLI::App* sub, Common& c, bool allow_preset) {
  auto* cfg = sub->add_option("config", c.config, "Experiment config (JSON)");
  if (allow_preset) {
    auto* pre = sub->add_option("--preset", c.preset, "Built-in config instead of a file")->check(CLI::IsMember({"ballistic-check"}));
    cfg->excludes(pre);
  } else {
    cfg->required();
  }
  sub->add_option("--out", c.out, "Output directory (overrides config and QBM_OUTPUT_DIR)");
  sub->add_option("--workers", c.workers, "Worker threads for seed ensembles")->check(CLI::PositiveNumber);
  sub->add_flag("--dump", c.dump, "Write per-seed trajectory CSVs");
  sub->add_flag("-q,--quiet", c.quiet, "No progress output");
}

int run_pipeline(const Common& c, const std::optional<std::string>& stage) {
  json raw;
  std::filesystem::path base;
  if (!c.preset.empty()) {
    raw = qbm::preset_config(c.preset);
  } else {
    if (c.config.empty()) throw qbm::Error(qbm::ErrorCode::ConfigInvalid, "give a config file or --preset");
    raw = read_json(c.config);
    base = std::filesystem::path(c.config).parent_path();
  }
  qbm::ExperimentConfig cfg = qbm::parse_config(raw, base);
  if (stage) {
    const bool loc_first = *stage == "sweep-g" &&
                           std::find(cfg.pipeline.begin(), cfg.pipeline.end(), "localization") != cfg.pipeline.end();
    cfg.pipeline = loc_first ? std::vector<std::string>{"localization", *stage} : std::vector<std::string>{*stage};
  }
  qbm::RunOptions opts;
  opts.out_dir = c.out;
  opts.workers = c.workers;
  opts.dump = c.dump;
  opts.log = c.quiet ? nullptr : &std::cerr;
  const qbm::RunResult r = qbm::run_experiment(cfg, opts);
  for (const auto& chk : r.checks) {
    std::cout << (chk.pass ? "PASS " : "FAIL ") << chk.name << " value=" << chk.value.dump()
              << " threshold=" << chk.threshold.dump() << "\n";
  }
  if (r.error) std::cerr << json({{"error", r.results["error"]}}).dump() << "\n";
  std::cout << "results in " << r.out_dir.string() << "\n";
  return r.exit_code;
}

int validate_kernel(const std::string& source, int dim, const std::optional<std::string>& out) {
  qbm::KernelFile kf;
  if (std::filesystem::exists(source)) {
    try {
      kf = qbm::kernel_file_from_json(read_json(source));
    } catch (const qbm::Error& e) {
      if (e.code() == qbm::ErrorCode::ConfigInvalid) throw;
      throw qbm::Error(qbm::ErrorCode::ConfigInvalid, "'" + source + "': " + e.what());
    }
  } else {
    const auto& names = qbm::kernel_preset_names();
    if (std::find(names.begin(), names.end(), source) == names.end()) {
      throw qbm::Error(qbm::ErrorCode::ConfigInvalid, "'" + source + "' is neither a file nor a preset name");
    }
    kf = qbm::kernel_file_from_json({{"preset", source}, {"dim", dim}});
  }
  const qbm::ValidationReport rep = qbm::validate(qbm::build_kernel(kf));
  json j = rep.to_json();
  j["kernel"] = kf.name.empty() ? source : kf.name;
  if (out) {
    std::ofstream(*out) << j.dump(2) << "\n";
  }
  std::cout << j.dump(2) << "\n";
  return rep.all_pass() ? 0 : kExitFail;
}

int appendix(int cases, std::uint64_t seed, const std::optional<std::string>& out) {
  qbm::AppendixOptions o;
  o.cases = cases;
  o.seed = seed;
  const qbm::AppendixReport r = qbm::appendix_checks(o);
  const json j = qbm::to_json(r);
  if (out) std::ofstream(*out) << j.dump(2) << "\n";
  std::cout << j.dump(2) << "\n";
  return r.pass() ? 0 : kExitFail;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Disordered Lindblad lattice dynamics and diffusion estimates"};
  app.set_version_flag("--version", std::string(qbm::kVersion));
  app.require_subcommand(1);

  Common run_c, msd_c, diff_c, sweep_c, loc_c;
  auto* run = app.add_subcommand("run", "Run the configured pipeline");
  add_common(run, run_c, true);
  auto* msd = app.add_subcommand("msd", "Mean squared displacement ensemble");
  add_common(msd, msd_c, false);
  auto* diff = app.add_subcommand("diffusion", "Diffusion estimates by the configured methods");
  add_common(diff, diff_c, false);
  auto* sweep = app.add_subcommand("sweep-g", "Diffusion estimates over model.g_list");
  add_common(sweep, sweep_c, true);
  auto* loc = app.add_subcommand("localization", "Localization second moment of the Hamiltonian dynamics");
  add_common(loc, loc_c, false);

  std::string kernel_source;
  int kernel_dim = 1;
  std::optional<std::string> kernel_out;
  auto* vk = app.add_subcommand("validate-kernel", "Check a kernel file or preset against the assumptions");
  vk->add_option("kernel", kernel_source, "Kernel file (JSON) or preset name")->required();
  vk->add_option("--dim", kernel_dim, "Dimension for preset names")->check(CLI::IsMember({1, 2}));
  vk->add_option("--out", kernel_out, "Also write the report to this file");

  int cases = 50;
  std::uint64_t seed = 1;
  std::optional<std::string> appendix_out;
  auto* ap = app.add_subcommand("appendix-checks", "Randomized resolvent-limit checks");
  ap->add_option("--cases", cases, "Random problems with and without kernel")->check(CLI::PositiveNumber);
  ap->add_option("--seed", seed, "First seed");
  ap->add_option("--out", appendix_out, "Also write the report to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) return run_pipeline(run_c, std::nullopt);
    if (*msd) return run_pipeline(msd_c, "msd");
    if (*diff) return run_pipeline(diff_c, "diffusion");
    if (*sweep) return run_pipeline(sweep_c, "sweep-g");
    if (*loc) return run_pipeline(loc_c, "localization");
    if (*vk) return validate_kernel(kernel_source, kernel_dim, kernel_out);
    if (*ap) return appendix(cases, seed, appendix_out);
  } catch (const qbm::Error& e) {
    print_error(e);
    return e.code() == qbm::ErrorCode::ConfigInvalid ? kExitConfig : kExitFail;
  } catch (const std::exception& e) {
    std::cerr << json({{"error", {{"code", "Internal"}, {"message", e.what()}}}}).dump() << "\n";
    return kExitFail;
  }
  return kExitFail;
}
