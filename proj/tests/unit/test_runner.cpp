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

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "qbm/runner.hpp"

namespace qbm {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("qbm-runner-" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

nlohmann::json tiny_msd() {
  return {{"name", "tiny"},
          {"pipeline", {"msd", "diffusion"}},
          {"model", {{"d", 1}, {"L", 10}, {"lambda", 2.0}, {"g", 1.0}}},
          {"kernel", "cosine"},
          {"disorder", {{"seeds", {1, 2}}}},
          {"evolution", {{"t_end", 5.0}, {"dt", 0.5}, {"boundary_tol", 1e-3}}},
          {"analysis", {{"methods", {"fit"}}, {"fit_window", {{"t1", 1.0}, {"t2", 5.0}}}}}};
}

ErrorCode parse_error(const nlohmann::json& j, std::string* message = nullptr) {
  try {
    parse_config(j);
  } catch (const Error& e) {
    if (message != nullptr) *message = e.what();
    return e.code();
  }
  return ErrorCode::InvalidArgument;
}

TEST(Config, UnknownFieldIsNamed) {
  nlohmann::json j = tiny_msd();
  j["model"]["foo"] = 1;
  std::string msg;
  EXPECT_EQ(parse_error(j, &msg), ErrorCode::ConfigInvalid);
  EXPECT_NE(msg.find("model.foo"), std::string::npos) << msg;
}

TEST(Config, SeedsMustBeExplicitAndDistinct) {
  nlohmann::json j = tiny_msd();
  j["disorder"].erase("seeds");
  EXPECT_EQ(parse_error(j), ErrorCode::ConfigInvalid);
  j["disorder"]["seeds"] = {1, 1};
  EXPECT_EQ(parse_error(j), ErrorCode::ConfigInvalid);
  j["disorder"]["seeds"] = {-1};
  EXPECT_EQ(parse_error(j), ErrorCode::ConfigInvalid);
  j["disorder"]["seeds"] = {0, 18446744073709551615ull};
  EXPECT_EQ(parse_config(j).seeds.back(), 18446744073709551615ull);
}

TEST(Config, RejectsBadValues) {
  for (const auto& [path, value] : std::vector<std::pair<std::string, nlohmann::json>>{
           {"/analysis/methods", {"spline"}},
           {"/model/d", 3},
           {"/model/lambda", -1.0},
           {"/model/g", 0.0},
           {"/pipeline", {"msd", "bogus"}},
           {"/evolution/dt", 0.0},
           {"/disorder/dist", "cauchy"}}) {
    nlohmann::json j = tiny_msd();
    j[nlohmann::json::json_pointer(path)] = value;
    EXPECT_EQ(parse_error(j), ErrorCode::ConfigInvalid) << path;
  }
  nlohmann::json j = tiny_msd();
  j.erase("kernel");
  EXPECT_EQ(parse_error(j), ErrorCode::ConfigInvalid);
}

TEST(Config, KernelFileIsResolvedAgainstConfigDirectory) {
  nlohmann::json j = tiny_msd();
  j["kernel"] = {{"file", "kernels/cosine.json"}};
  const ExperimentConfig c = parse_config(j, QBM_DATA_DIR);
  EXPECT_EQ(c.kernel.spec.dim, 1);
  EXPECT_EQ(parse_error(j), ErrorCode::ConfigInvalid);
}

TEST(Config, ResolvedConfigRoundTrips) {
  nlohmann::json j = tiny_msd();
  j["kernel"] = {{"preset", "uniform"}, {"radius", 5}};
  const nlohmann::json once = to_json(parse_config(j));
  EXPECT_EQ(to_json(parse_config(once)), once);
  EXPECT_EQ(once["kernel"]["radius"], 5);
  EXPECT_EQ(once["model"]["g_list"], nlohmann::json({1.0}));
}

TEST(Runner, AppendixRunPassesAndWritesManifest) {
  const fs::path dir = temp_dir("appendix");
  ExperimentConfig c = parse_config({{"pipeline", {"appendix-checks"}},
                                     {"kernel", "cosine"},
                                     {"disorder", {{"seeds", {1}}}},
                                     {"analysis", {{"appendix", {{"cases", 5}}}}},
                                     {"checks", {{"appendix", true}}}});
  RunOptions o;
  o.out_dir = dir.string();
  const RunResult r = run_experiment(c, o);
  EXPECT_EQ(r.exit_code, 0);
  const nlohmann::json m = nlohmann::json::parse(slurp(dir / "manifest.json"));
  EXPECT_EQ(m["exit_code"], 0);
  EXPECT_EQ(m["config"]["analysis"]["appendix"]["cases"], 5);
  EXPECT_TRUE(nlohmann::json::parse(slurp(dir / "results.json"))["pass"].get<bool>());
}

TEST(Runner, MsdPipelineIsDeterministic) {
  const ExperimentConfig c = parse_config(tiny_msd());
  RunOptions o;
  std::string first;
  for (const char* name : {"det-a", "det-b"}) {
    const fs::path dir = temp_dir(name);
    o.out_dir = dir.string();
    o.workers = name[4] == 'a' ? 1 : 2;
    const RunResult r = run_experiment(c, o);
    ASSERT_EQ(r.exit_code, 0) << r.error.value_or("");
    std::istringstream csv(slurp(dir / "msd_g1.csv"));
    std::string header;
    std::getline(csv, header);
    EXPECT_EQ(header, "t,M11,M11_stderr");
    const std::string results = slurp(dir / "results.json");
    if (first.empty()) {
      first = results;
    } else {
      EXPECT_EQ(results, first);
    }
  }
}

TEST(Runner, ModuleErrorIsReportedInResults) {
  nlohmann::json j = tiny_msd();
  j["model"]["L"] = 2;
  j["evolution"]["boundary_tol"] = 1e-12;
  RunOptions o;
  const fs::path dir = temp_dir("error");
  o.out_dir = dir.string();
  const RunResult r = run_experiment(parse_config(j), o);
  EXPECT_EQ(r.exit_code, 1);
  const nlohmann::json res = nlohmann::json::parse(slurp(dir / "results.json"));
  EXPECT_EQ(res["error"]["code"], "BoundaryMassExceeded");
  EXPECT_FALSE(res["pass"].get<bool>());
}

TEST(Runner, OutputDirectoryPrecedence) {
  ExperimentConfig c = parse_config(tiny_msd());
  c.out_dir = "from-config";
  RunOptions o;
  ::unsetenv("QBM_OUTPUT_DIR");
  EXPECT_EQ(resolve_out_dir(c, o), fs::path("from-config"));
  ::setenv("QBM_OUTPUT_DIR", "from-env", 1);
  EXPECT_EQ(resolve_out_dir(c, o), fs::path("from-env"));
  o.out_dir = "from-flag";
  EXPECT_EQ(resolve_out_dir(c, o), fs::path("from-flag"));
  ::unsetenv("QBM_OUTPUT_DIR");
}

}  // namespace
}  // namespace qbm
