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

// JSON-configured experiment runner. Configs are validated strictly: an unknown field or a
// wrong type is ConfigInvalid and names the offending path. Results carry no timestamps, so
// reruns of one config are byte-identical.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <limits>
#include <list>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "qbm/appendix_oracles.hpp"
#include "qbm/diffusion.hpp"
#include "qbm/gain_kernel.hpp"

namespace qbm {

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names = {"validate-kernel", "msd",          "diffusion",
                                                 "sweep-g",         "localization", "appendix-checks"};
  return names;
}

inline const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names = {"fit", "abel", "resolvent", "closed_form"};
  return names;
}

struct ExperimentConfig {
  std::string name = "experiment";
  std::vector<std::string> pipeline = {"validate-kernel", "msd", "diffusion"};
  // model
  int dim = 1;
  std::optional<int> box_radius;  // empty: auto from the propagation bound
  Boundary boundary = Boundary::Truncated;
  double u = 1.0;
  double lambda = 0.0;
  std::vector<double> g_list = {1.0};
  // kernel
  KernelFile kernel;
  std::string kernel_source;
  // disorder
  std::string dist = "uniform";
  std::vector<std::uint64_t> seeds;
  // evolution
  std::optional<double> t_end;  // empty: max(3 t_1, 30) with t_1 = 5 / (c g)
  double dt = 1.0;
  double tol = 1e-9;
  double boundary_tol = 1e-8;
  // analysis
  std::vector<std::string> methods = {"fit"};
  std::vector<double> eta_list;  // empty: 5 / t_end
  bool abel_extrapolate = true;
  std::optional<std::pair<double, double>> fit_window;  // empty: [5 / (c g), t_end]
  int resolvent_box_radius = 16;
  int resolvent_xi_radius = 8;
  int loc_box_radius = 40;
  int loc_start_radius = 16;
  int loc_start_spacing = 8;
  double loc_t_end = 200.0;
  double loc_dt = 0.5;
  double loc_edge_tol = 1e-8;
  int appendix_cases = 50;
  std::uint64_t appendix_seed = 1;
  // checks
  nlohmann::json checks = nlohmann::json::object();
  // output
  std::string out_dir = "qbm-out";
  std::vector<std::string> formats = {"json", "csv"};
  int workers = 0;
};

namespace config_detail {

[[noreturn]] inline void invalid(const std::string& what) { throw Error(ErrorCode::ConfigInvalid, what); }

inline std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

inline void allow_only(const nlohmann::json& j, const std::string& path, std::initializer_list<const char*> keys) {
  if (!j.is_object()) invalid("'" + (path.empty() ? std::string("<root>") : path) + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : keys) ok = ok || key == k;
    if (!ok) invalid("unknown field '" + join(path, key) + "'");
  }
}

inline double number(const nlohmann::json& j, const std::string& path) {
  if (!j.is_number()) invalid("'" + path + "' must be a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) invalid("'" + path + "' must be finite");
  return v;
}

inline int integer(const nlohmann::json& j, const std::string& path) {
  if (!j.is_number_integer()) invalid("'" + path + "' must be an integer");
  return j.get<int>();
}

inline bool boolean(const nlohmann::json& j, const std::string& path) {
  if (!j.is_boolean()) invalid("'" + path + "' must be true or false");
  return j.get<bool>();
}

inline std::string text(const nlohmann::json& j, const std::string& path) {
  if (!j.is_string()) invalid("'" + path + "' must be a string");
  return j.get<std::string>();
}

inline std::vector<double> numbers(const nlohmann::json& j, const std::string& path) {
  if (!j.is_array() || j.empty()) invalid("'" + path + "' must be a non-empty array of numbers");
  std::vector<double> v;
  for (std::size_t i = 0; i < j.size(); ++i) v.push_back(number(j[i], path + "[" + std::to_string(i) + "]"));
  return v;
}

inline std::vector<std::string> texts(const nlohmann::json& j, const std::string& path) {
  if (!j.is_array()) invalid("'" + path + "' must be an array of strings");
  std::vector<std::string> v;
  for (std::size_t i = 0; i < j.size(); ++i) v.push_back(text(j[i], path + "[" + std::to_string(i) + "]"));
  return v;
}

inline void one_of(const std::string& v, const std::vector<std::string>& allowed, const std::string& path) {
  if (std::find(allowed.begin(), allowed.end(), v) == allowed.end()) invalid("'" + path + "' has unknown value '" + v + "'");
}

}  // namespace config_detail

/// Relative kernel file paths resolve against `base_dir`.
inline ExperimentConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  using namespace config_detail;
  allow_only(j, "", {"name", "pipeline", "model", "kernel", "disorder", "evolution", "analysis", "checks", "output",
                     "workers"});
  ExperimentConfig c;
  if (j.contains("name")) c.name = text(j["name"], "name");
  if (j.contains("pipeline")) {
    c.pipeline = texts(j["pipeline"], "pipeline");
    for (std::size_t i = 0; i < c.pipeline.size(); ++i) {
      one_of(c.pipeline[i], stage_names(), "pipeline[" + std::to_string(i) + "]");
    }
  }
  if (j.contains("workers")) c.workers = integer(j["workers"], "workers");

  if (j.contains("model")) {
    const auto& m = j["model"];
    allow_only(m, "model", {"d", "L", "boundary", "u", "lambda", "g", "g_list"});
    if (m.contains("d")) c.dim = integer(m["d"], "model.d");
    if (c.dim != 1 && c.dim != 2) invalid("'model.d' must be 1 or 2");
    if (m.contains("L") && !(m["L"].is_string() && m["L"] == "auto")) c.box_radius = integer(m["L"], "model.L");
    if (m.contains("boundary")) {
      const std::string b = text(m["boundary"], "model.boundary");
      one_of(b, {"truncated", "periodic"}, "model.boundary");
      c.boundary = b == "periodic" ? Boundary::Periodic : Boundary::Truncated;
    }
    if (m.contains("u")) c.u = number(m["u"], "model.u");
    if (m.contains("lambda")) c.lambda = number(m["lambda"], "model.lambda");
    if (m.contains("g") && m.contains("g_list")) invalid("give only one of 'model.g' and 'model.g_list'");
    if (m.contains("g")) c.g_list = {number(m["g"], "model.g")};
    if (m.contains("g_list")) c.g_list = numbers(m["g_list"], "model.g_list");
  }
  if (c.box_radius && *c.box_radius < 1) invalid("'model.L' must be >= 1");
  if (c.lambda < 0.0) invalid("'model.lambda' must be >= 0");
  for (double g : c.g_list) {
    if (g <= 0.0) invalid("coupling g must be > 0");
  }

  if (!j.contains("kernel")) invalid("missing field 'kernel'");
  {
    const auto& k = j["kernel"];
    if (k.is_string()) {
      c.kernel_source = k.get<std::string>();
      c.kernel = kernel_file_from_json({{"preset", c.kernel_source}, {"dim", c.dim}});
    } else {
      allow_only(k, "kernel", {"preset", "file", "radius"});
      if (k.contains("preset") == k.contains("file")) invalid("'kernel' needs exactly one of 'preset' or 'file'");
      if (k.contains("preset")) {
        c.kernel_source = text(k["preset"], "kernel.preset");
        one_of(c.kernel_source, kernel_preset_names(), "kernel.preset");
        c.kernel = kernel_file_from_json({{"preset", c.kernel_source}, {"dim", c.dim}});
      } else {
        std::filesystem::path p = text(k["file"], "kernel.file");
        if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
        std::ifstream is(p);
        if (!is) invalid("cannot read kernel file '" + p.string() + "'");
        try {
          c.kernel = kernel_file_from_json(nlohmann::json::parse(is));
        } catch (const nlohmann::json::exception& e) {
          invalid("kernel file '" + p.string() + "': " + e.what());
        } catch (const Error& e) {
          invalid("kernel file '" + p.string() + "': " + e.what());
        }
        c.kernel_source = p.string();
      }
      if (k.contains("radius")) c.kernel.radius = integer(k["radius"], "kernel.radius");
    }
    if (c.kernel.spec.dim != c.dim) invalid("kernel dimension does not match 'model.d'");
  }

  if (j.contains("disorder")) {
    const auto& d = j["disorder"];
    allow_only(d, "disorder", {"dist", "seeds"});
    if (d.contains("dist")) c.dist = text(d["dist"], "disorder.dist");
    if (d.contains("seeds")) {
      if (!d["seeds"].is_array() || d["seeds"].empty()) invalid("'disorder.seeds' must be a non-empty array");
      for (std::size_t i = 0; i < d["seeds"].size(); ++i) {
        const auto& s = d["seeds"][i];
        if (!s.is_number_unsigned() && !(s.is_number_integer() && s.get<std::int64_t>() >= 0)) invalid("'disorder.seeds[" + std::to_string(i) + "]' must be a non-negative integer");
        c.seeds.push_back(s.get<std::uint64_t>());
      }
    }
  }
  try {
    parse_dist(c.dist);
  } catch (const Error& e) {
    invalid(std::string("'disorder.dist': ") + e.what());
  }
  if (c.seeds.empty()) invalid("'disorder.seeds' must be given explicitly");
  {
    std::set<std::uint64_t> uniq(c.seeds.begin(), c.seeds.end());
    if (uniq.size() != c.seeds.size()) invalid("'disorder.seeds' contains duplicates");
  }

  if (j.contains("evolution")) {
    const auto& e = j["evolution"];
    allow_only(e, "evolution", {"t_end", "dt", "tol", "boundary_tol"});
    if (e.contains("t_end") && !(e["t_end"].is_string() && e["t_end"] == "auto")) c.t_end = number(e["t_end"], "evolution.t_end");
    if (e.contains("dt")) c.dt = number(e["dt"], "evolution.dt");
    if (e.contains("tol")) c.tol = number(e["tol"], "evolution.tol");
    if (e.contains("boundary_tol")) {
      c.boundary_tol = e["boundary_tol"].is_null() ? std::numeric_limits<double>::infinity()
                                                   : number(e["boundary_tol"], "evolution.boundary_tol");
    }
  }
  if (c.dt <= 0.0 || c.tol <= 0.0 || (c.t_end && *c.t_end <= 0.0)) invalid("'evolution' values must be positive");

  if (j.contains("analysis")) {
    const auto& a = j["analysis"];
    allow_only(a, "analysis", {"methods", "eta_list", "abel_extrapolate", "fit_window", "resolvent", "localization",
                               "appendix"});
    if (a.contains("methods")) {
      c.methods = texts(a["methods"], "analysis.methods");
      for (std::size_t i = 0; i < c.methods.size(); ++i) {
        one_of(c.methods[i], method_names(), "analysis.methods[" + std::to_string(i) + "]");
      }
    }
    if (a.contains("eta_list") && !(a["eta_list"].is_string() && a["eta_list"] == "auto")) {
      c.eta_list = numbers(a["eta_list"], "analysis.eta_list");
    }
    if (a.contains("abel_extrapolate")) c.abel_extrapolate = boolean(a["abel_extrapolate"], "analysis.abel_extrapolate");
    if (a.contains("fit_window")) {
      const auto& f = a["fit_window"];
      if (!(f.is_string() && f == "auto")) {
        allow_only(f, "analysis.fit_window", {"t1", "t2"});
        if (!f.contains("t1") || !f.contains("t2")) invalid("'analysis.fit_window' needs 't1' and 't2' or \"auto\"");
        c.fit_window = std::make_pair(number(f["t1"], "analysis.fit_window.t1"), number(f["t2"], "analysis.fit_window.t2"));
      }
    }
    if (a.contains("resolvent")) {
      const auto& r = a["resolvent"];
      allow_only(r, "analysis.resolvent", {"box_radius", "xi_radius"});
      if (r.contains("box_radius")) c.resolvent_box_radius = integer(r["box_radius"], "analysis.resolvent.box_radius");
      if (r.contains("xi_radius")) c.resolvent_xi_radius = integer(r["xi_radius"], "analysis.resolvent.xi_radius");
    }
    if (a.contains("localization")) {
      const auto& l = a["localization"];
      allow_only(l, "analysis.localization", {"box_radius", "start_radius", "start_spacing", "t_end", "dt", "edge_tol"});
      if (l.contains("box_radius")) c.loc_box_radius = integer(l["box_radius"], "analysis.localization.box_radius");
      if (l.contains("start_radius")) c.loc_start_radius = integer(l["start_radius"], "analysis.localization.start_radius");
      if (l.contains("start_spacing")) c.loc_start_spacing = integer(l["start_spacing"], "analysis.localization.start_spacing");
      if (l.contains("t_end")) c.loc_t_end = number(l["t_end"], "analysis.localization.t_end");
      if (l.contains("dt")) c.loc_dt = number(l["dt"], "analysis.localization.dt");
      if (l.contains("edge_tol")) c.loc_edge_tol = number(l["edge_tol"], "analysis.localization.edge_tol");
    }
    if (a.contains("appendix")) {
      const auto& p = a["appendix"];
      allow_only(p, "analysis.appendix", {"cases", "seed"});
      if (p.contains("cases")) c.appendix_cases = integer(p["cases"], "analysis.appendix.cases");
      if (p.contains("seed")) c.appendix_seed = static_cast<std::uint64_t>(integer(p["seed"], "analysis.appendix.seed"));
    }
  }
  for (double e : c.eta_list) {
    if (e <= 0.0) invalid("'analysis.eta_list' entries must be positive");
  }

  if (j.contains("checks")) {
    const auto& k = j["checks"];
    allow_only(k, "checks", {"kernel_valid", "ballistic_constant_rel_tol", "concordance_sigma", "within_bounds",
                             "small_g_slope", "localization_rel_err", "appendix"});
    for (const char* b : {"kernel_valid", "within_bounds", "small_g_slope", "appendix"}) {
      if (k.contains(b)) boolean(k[b], std::string("checks.") + b);
    }
    for (const char* n : {"ballistic_constant_rel_tol", "concordance_sigma", "localization_rel_err"}) {
      if (k.contains(n) && number(k[n], std::string("checks.") + n) <= 0.0) invalid(std::string("'checks.") + n + "' must be > 0");
    }
    c.checks = k;
  }

  if (j.contains("output")) {
    const auto& o = j["output"];
    allow_only(o, "output", {"dir", "formats"});
    if (o.contains("dir")) c.out_dir = text(o["dir"], "output.dir");
    if (o.contains("formats")) {
      c.formats = texts(o["formats"], "output.formats");
      for (std::size_t i = 0; i < c.formats.size(); ++i) one_of(c.formats[i], {"json", "csv"}, "output.formats[" + std::to_string(i) + "]");
    }
  }
  return c;
}

/// Every knob with defaults filled in; echoed into the manifest.
inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json model = {{"d", c.dim},
                          {"L", c.box_radius ? nlohmann::json(*c.box_radius) : nlohmann::json("auto")},
                          {"boundary", c.boundary == Boundary::Periodic ? "periodic" : "truncated"},
                          {"u", c.u},
                          {"lambda", c.lambda},
                          {"g_list", c.g_list}};
  nlohmann::json fit = c.fit_window ? nlohmann::json{{"t1", c.fit_window->first}, {"t2", c.fit_window->second}}
                                    : nlohmann::json("auto");
  const auto& presets = kernel_preset_names();
  const bool is_preset = std::find(presets.begin(), presets.end(), c.kernel_source) != presets.end();
  nlohmann::json kernel = {{is_preset ? "preset" : "file", c.kernel_source}, {"radius", c.kernel.radius}};
  return {{"name", c.name},
          {"pipeline", c.pipeline},
          {"model", model},
          {"kernel", kernel},
          {"disorder", {{"dist", c.dist}, {"seeds", c.seeds}}},
          {"evolution", {{"t_end", c.t_end ? nlohmann::json(*c.t_end) : nlohmann::json("auto")},
                         {"dt", c.dt},
                         {"tol", c.tol},
                         {"boundary_tol", std::isfinite(c.boundary_tol) ? nlohmann::json(c.boundary_tol) : nlohmann::json(nullptr)}}},
          {"analysis", {{"methods", c.methods},
                        {"eta_list", c.eta_list.empty() ? nlohmann::json("auto") : nlohmann::json(c.eta_list)},
                        {"abel_extrapolate", c.abel_extrapolate},
                        {"fit_window", fit},
                        {"resolvent", {{"box_radius", c.resolvent_box_radius}, {"xi_radius", c.resolvent_xi_radius}}},
                        {"localization", {{"box_radius", c.loc_box_radius},
                                          {"start_radius", c.loc_start_radius},
                                          {"start_spacing", c.loc_start_spacing},
                                          {"t_end", c.loc_t_end},
                                          {"dt", c.loc_dt},
                                          {"edge_tol", c.loc_edge_tol}}},
                        {"appendix", {{"cases", c.appendix_cases}, {"seed", c.appendix_seed}}}}},
          {"checks", c.checks},
          {"output", {{"dir", c.out_dir}, {"formats", c.formats}}},
          {"workers", c.workers}};
}

/// Built-in configs: "ballistic-check" sweeps g in {0.5, 1, 2} at zero disorder.
inline nlohmann::json preset_config(const std::string& name) {
  if (name == "ballistic-check") {
    return {{"name", "ballistic-check"},
            {"pipeline", {"validate-kernel", "sweep-g"}},
            {"model", {{"d", 1}, {"u", 1.0}, {"lambda", 0.0}, {"g_list", {0.5, 1.0, 2.0}}}},
            {"kernel", {{"preset", "cosine"}}},
            {"disorder", {{"dist", "uniform"}, {"seeds", {1}}}},
            {"evolution", {{"t_end", "auto"}, {"dt", 1.0}, {"tol", 1e-9}}},
            {"analysis", {{"methods", {"closed_form", "fit"}}}},
            {"checks", {{"kernel_valid", true}, {"ballistic_constant_rel_tol", 0.05}}},
            {"output", {{"dir", "ballistic-check"}}}};
  }
  throw Error(ErrorCode::ConfigInvalid, "unknown preset '" + name + "'");
}

struct RunOptions {
  std::optional<std::string> out_dir;  // overrides config and QBM_OUTPUT_DIR
  std::optional<int> workers;
  bool dump = false;
  std::ostream* log = nullptr;
};

struct CheckOutcome {
  std::string name;
  bool pass = false;
  nlohmann::json value;
  nlohmann::json threshold;
};

struct RunResult {
  int exit_code = 0;
  std::filesystem::path out_dir;
  nlohmann::json results = nlohmann::json::object();
  std::vector<CheckOutcome> checks;
  std::vector<std::string> files;
  std::optional<std::string> error;
};

namespace runner_detail {

inline std::string gtag(double g) { return "g" + fmt(g); }

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) { std::ofstream(p) << j.dump(2) << "\n"; }

class Runner {
 public:
  Runner(const ExperimentConfig& cfg, const RunOptions& opts, RunResult& res)
      : cfg_(cfg), opts_(opts), res_(res), dist_(parse_dist(cfg.dist)) {
    workers_ = opts.workers ? *opts.workers : cfg.workers;
  }

  void run() {
    std::filesystem::create_directories(res_.out_dir);
    for (const std::string& stage : cfg_.pipeline) {
      log("stage " + stage);
      if (stage == "validate-kernel") validate_stage();
      if (stage == "msd") msd_stage();
      if (stage == "diffusion") diffusion_stage();
      if (stage == "sweep-g") sweep_stage();
      if (stage == "localization") localization_stage();
      if (stage == "appendix-checks") appendix_stage();
    }
    evaluate_checks();
  }

 private:
  bool wants(const std::string& fmt_name) const {
    return std::find(cfg_.formats.begin(), cfg_.formats.end(), fmt_name) != cfg_.formats.end();
  }

  void log(const std::string& s) const {
    if (opts_.log) *opts_.log << s << "\n";
  }

  void emit_json(const std::string& file, const nlohmann::json& j) {
    if (!wants("json")) return;
    write_json(res_.out_dir / file, j);
    res_.files.push_back(file);
  }

  std::ofstream* open_csv(const std::string& file) {
    if (!wants("csv")) return nullptr;
    csv_.emplace_back(res_.out_dir / file);
    csv_.back().precision(12);
    res_.files.push_back(file);
    return &csv_.back();
  }

  const GainKernel& kernel() {
    if (!kernel_) kernel_ = build_kernel(cfg_.kernel);
    return *kernel_;
  }

  double gap() {
    if (!gap_) gap_ = spectral_gap(kernel(), cfg_.dim == 1 ? 64 : 16);
    return *gap_;
  }

  GeneratorParams params(double g) const { return {cfg_.u, cfg_.lambda, g}; }

  double t_end(double g) {
    if (cfg_.t_end) return *cfg_.t_end;
    return std::max(3.0 * fit_window_start(gap(), g), 30.0);
  }

  std::vector<double> t_grid(double g) {
    const double te = t_end(g);
    std::vector<double> t;
    const int n = static_cast<int>(std::ceil(te / cfg_.dt - 1e-9));
    for (int i = 0; i < n; ++i) t.push_back(i * cfg_.dt);
    t.push_back(te);
    return t;
  }

  LatticeBox evolution_box(double g) {
    const int r = cfg_.box_radius ? *cfg_.box_radius : auto_box_radius(cfg_.dim, params(g), t_end(g));
    return LatticeBox(cfg_.dim, r);
  }

  void validate_stage() {
    const ValidationReport rep = validate(kernel());
    results()["kernel"] = rep.to_json();
    emit_json("kernel_report.json", rep.to_json());
    kernel_pass_ = rep.all_pass();
  }

  const MsdSeries& msd_for(double g) {
    auto it = msd_.find(g);
    if (it != msd_.end()) return it->second;
    if (cfg_.boundary == Boundary::Periodic) {
      throw Error(ErrorCode::ConfigInvalid, "msd needs 'model.boundary' = truncated; periodic boxes serve the resolvent");
    }
    MsdRequest req;
    req.box = evolution_box(g);
    req.params = params(g);
    req.kernel = &kernel();
    req.dist = dist_;
    req.seeds = cfg_.seeds;
    req.t_grid = t_grid(g);
    req.evolve.tol = cfg_.tol;
    req.evolve.boundary_tol = cfg_.boundary_tol;
    req.workers = workers_;
    log("  msd g=" + fmt(g) + " L=" + std::to_string(req.box.radius()) + " T=" + fmt(req.t_grid.back()));
    const MsdSeries& s = msd_.emplace(g, msd_ensemble(req)).first->second;
    if (std::ofstream* os = open_csv("msd_" + gtag(g) + ".csv")) {
      *os << (cfg_.dim == 1 ? "t,M11,M11_stderr\n" : "t,M11,M11_stderr,M12,M12_stderr,M22,M22_stderr\n");
      for (std::size_t i = 0; i < s.times.size(); ++i) {
        *os << s.times[i] << ',' << s.mean[i](0, 0) << ',' << s.stderr_[i](0, 0);
        if (cfg_.dim == 2) {
          *os << ',' << s.mean[i](0, 1) << ',' << s.stderr_[i](0, 1) << ',' << s.mean[i](1, 1) << ','
              << s.stderr_[i](1, 1);
        }
        *os << '\n';
      }
    }
    if (opts_.dump) dump_trajectories(g, req);
    return s;
  }

  void dump_trajectories(double g, const MsdRequest& req) {
    for (std::uint64_t seed : cfg_.seeds) {
      const std::string file = "trajectory_" + gtag(g) + "_seed" + std::to_string(seed) + ".csv";
      const Trajectory tr = evolve(DensityState::point(req.box), req.params, sample(req.box, dist_, seed), &kernel(),
                                   req.t_grid, req.evolve);
      std::ofstream os(res_.out_dir / file);
      write_trajectory_csv(os, tr);
      res_.files.push_back(file);
    }
  }

  void msd_stage() {
    for (double g : cfg_.g_list) msd_for(g);
  }

  bool has_method(const std::string& m) const {
    return std::find(cfg_.methods.begin(), cfg_.methods.end(), m) != cfg_.methods.end();
  }

  /// Estimates at one g, in the configured method order.
  const std::vector<nlohmann::json>& estimates_for(double g) {
    auto it = est_.find(g);
    if (it != est_.end()) return it->second;
    std::vector<nlohmann::json> out;
    for (const std::string& m : cfg_.methods) {
      if (m == "fit") {
        const MsdSeries& s = msd_for(g);
        const auto w = cfg_.fit_window ? *cfg_.fit_window : std::make_pair(fit_window_start(gap(), g), s.times.back());
        const DiffusionEstimate e = fit_diffusion(s, w.first, w.second);
        out.push_back(entry(m, g, e));
      } else if (m == "abel") {
        const MsdSeries& s = msd_for(g);
        std::vector<double> etas = cfg_.eta_list;
        if (etas.empty()) etas = {kAbelMinEtaT / s.times.back()};
        for (double eta : etas) {
          const DiffusionEstimate e = cfg_.abel_extrapolate ? abel_extrapolated(s, eta) : abel_diffusion(s, eta);
          out.push_back(entry(cfg_.abel_extrapolate ? "abel_extrapolated" : "abel", g, e));
        }
      } else if (m == "resolvent") {
        ResolventEnsembleRequest req;
        req.dim = cfg_.dim;
        req.box_radius = cfg_.resolvent_box_radius;
        req.xi_radius = cfg_.resolvent_xi_radius;
        req.params = params(g);
        req.kernel = &kernel();
        req.c = gap();
        req.dist = dist_;
        req.seeds = cfg_.seeds;
        req.workers = workers_;
        log("  resolvent g=" + fmt(g) + " L_B=" + std::to_string(req.box_radius));
        const ResolventEnsemble ens = resolvent_ensemble(req);
        nlohmann::json j = entry(m, g, ens.estimate);
        j["all_agree"] = ens.all_agree;
        j["all_within_bounds"] = ens.all_within_bounds;
        j["bounds"] = {{"lower", ens.members.front().bounds.lower}, {"upper", ens.members.front().bounds.upper},
                       {"upper_norm_phi", ens.members.front().bounds.upper_norm_phi}};
        within_bounds_ = within_bounds_ && ens.all_within_bounds;
        any_resolvent_ = true;
        out.push_back(j);
      } else if (m == "closed_form") {
        if (cfg_.lambda != 0.0) throw Error(ErrorCode::ConfigInvalid, "method closed_form requires model.lambda = 0");
        out.push_back(entry(m, g, closed_form_ballistic(kernel(), cfg_.u, g)));
      }
    }
    return est_.emplace(g, std::move(out)).first->second;
  }

  nlohmann::json entry(const std::string& method, double g, const DiffusionEstimate& e) const {
    nlohmann::json j = to_json(e);
    j["method"] = method;
    j["g"] = g;
    return j;
  }

  void diffusion_stage() {
    nlohmann::json all = nlohmann::json::array();
    for (double g : cfg_.g_list) {
      for (const auto& e : estimates_for(g)) all.push_back(e);
    }
    results()["diffusion"] = all;
    emit_json("diffusion.json", all);
  }

  void sweep_stage() {
    if (cfg_.g_list.size() < 2) throw Error(ErrorCode::ConfigInvalid, "sweep-g needs at least two entries in 'model.g_list'");
    nlohmann::json rows = nlohmann::json::array();
    std::ofstream* os = open_csv("sweep_g.csv");
    if (os) *os << "g,method,D,D_stderr,D_g_over_u2,D_over_g\n";
    const double u2 = cfg_.u * cfg_.u;
    for (double g : cfg_.g_list) {
      for (const auto& e : estimates_for(g)) {
        const double d = e["D_scalar"].get<double>(), s = e["D_scalar_stderr"].get<double>();
        const std::string m = e["method"].get<std::string>();
        rows.push_back({{"g", g}, {"method", m}, {"D", d}, {"D_stderr", s}, {"D_g_over_u2", d * g / u2},
                        {"D_over_g", d / g}});
        if (os) *os << g << ',' << m << ',' << d << ',' << s << ',' << d * g / u2 << ',' << d / g << '\n';
      }
    }
    results()["sweep_g"] = rows;
    emit_json("sweep_g.json", rows);
    if (cfg_.lambda > 0.0 && loc_) slope_fit();
  }

  void slope_fit() {
    const std::string method = has_method("resolvent") ? "resolvent" : cfg_.methods.front();
    std::vector<CouplingPoint> pts;
    for (double g : cfg_.g_list) {
      for (const auto& e : estimates_for(g)) {
        if (e["method"] != method && !(method == "abel" && e["method"] == "abel_extrapolated")) continue;
        const double lower = e.contains("bounds") ? e["bounds"]["lower"].get<double>() : 0.0;
        pts.push_back({g, e["D_scalar"].get<double>(), e["D_scalar_stderr"].get<double>(), lower});
        break;
      }
    }
    const LatticeBox box(cfg_.dim, cfg_.resolvent_box_radius, Boundary::Periodic);
    double a_norm = 0.0;
    for (std::size_t k = 0; k < std::min<std::size_t>(4, cfg_.seeds.size()); ++k) {
      const FiberSpace fs = build_fiber_space(box, cfg_.resolvent_xi_radius, params(cfg_.g_list.front()), &kernel(),
                                              sample(box, dist_, cfg_.seeds[k]));
      a_norm = std::max(a_norm, detail::operator_norm(fs.A()));
    }
    try {
      const SlopeResult r = small_g_slope(pts, {cfg_.u, gap(), loc_->ell2, loc_->ell2_stderr, a_norm});
      nlohmann::json j = to_json(r);
      j["method"] = method;
      j["A_norm"] = a_norm;
      results()["slope"] = j;
      emit_json("slope.json", j);
      slope_pass_ = r.pass();
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NonlinearRegime) throw;
      results()["slope"] = {{"error", e.what()}};
      slope_pass_ = false;
    }
  }

  void localization_stage() {
    LocalizationRequest req;
    req.dim = cfg_.dim;
    req.box_radius = cfg_.loc_box_radius;
    req.u = cfg_.u;
    req.lambda = cfg_.lambda;
    req.dist = dist_;
    req.seeds = cfg_.seeds;
    for (int i = 0; i * cfg_.loc_dt <= cfg_.loc_t_end + 1e-9; ++i) req.t_grid.push_back(i * cfg_.loc_dt);
    req.start_radius = cfg_.loc_start_radius;
    req.start_spacing = cfg_.loc_start_spacing;
    req.edge_tol = cfg_.loc_edge_tol;
    req.workers = workers_;
    loc_ = localization_length(req);
    nlohmann::json j = to_json(*loc_);
    j.erase("times");
    j.erase("mean_curve");
    results()["localization"] = j;
    emit_json("localization.json", j);
    if (std::ofstream* os = open_csv("localization.csv")) {
      *os << "t,ell2_mean\n";
      for (std::size_t i = 0; i < loc_->times.size(); ++i) *os << loc_->times[i] << ',' << loc_->mean_curve[i] << '\n';
    }
  }

  void appendix_stage() {
    AppendixOptions o;
    o.cases = cfg_.appendix_cases;
    o.seed = cfg_.appendix_seed;
    const AppendixReport r = appendix_checks(o);
    results()["appendix"] = to_json(r);
    emit_json("appendix.json", to_json(r));
    appendix_pass_ = r.pass();
  }

  void add_check(const std::string& name, bool pass, nlohmann::json value, nlohmann::json threshold) {
    res_.checks.push_back({name, pass, std::move(value), std::move(threshold)});
  }

  void evaluate_checks() {
    const nlohmann::json& k = cfg_.checks;
    const bool validated = std::find(cfg_.pipeline.begin(), cfg_.pipeline.end(), "validate-kernel") != cfg_.pipeline.end();
    if (validated && k.value("kernel_valid", true)) add_check("kernel_valid", kernel_pass_, kernel_pass_, true);
    if (k.contains("ballistic_constant_rel_tol")) {
      const double tol = k["ballistic_constant_rel_tol"].get<double>();
      std::map<std::string, std::vector<double>> cols;
      for (const auto& row : results().value("sweep_g", nlohmann::json::array())) {
        cols[row["method"].get<std::string>()].push_back(row["D_g_over_u2"].get<double>());
      }
      if (cols.empty()) add_check("ballistic_constant", false, "no sweep-g results", tol);
      for (const auto& [m, v] : cols) {
        const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
        const double spread = (*hi - *lo) / std::max(std::abs(*hi), 1e-300);
        add_check("ballistic_constant_" + m, spread <= tol, spread, tol);
      }
    }
    if (k.contains("concordance_sigma")) {
      const double sig = k["concordance_sigma"].get<double>();
      double worst = 0.0;
      for (const auto& [g, list] : est_) {
        for (std::size_t a = 0; a < list.size(); ++a) {
          for (std::size_t b = a + 1; b < list.size(); ++b) {
            const double da = list[a]["D_scalar"].get<double>(), db = list[b]["D_scalar"].get<double>();
            const double s = std::hypot(list[a]["D_scalar_stderr"].get<double>(), list[b]["D_scalar_stderr"].get<double>());
            worst = std::max(worst, s > 0.0 ? std::abs(da - db) / s : (da == db ? 0.0 : 1e300));
          }
        }
      }
      add_check("concordance", worst <= sig, worst, sig);
    }
    if (k.value("within_bounds", false)) add_check("within_bounds", any_resolvent_ && within_bounds_, within_bounds_, true);
    if (k.value("small_g_slope", false)) add_check("small_g_slope", slope_pass_, slope_pass_, true);
    if (k.contains("localization_rel_err")) {
      const double tol = k["localization_rel_err"].get<double>();
      const double v = loc_ ? loc_->relative_error() : 1e300;
      add_check("localization_rel_err", loc_ && v < tol, v, tol);
    }
    if (k.value("appendix", false)) add_check("appendix", appendix_pass_, appendix_pass_, true);
  }

  nlohmann::json& results() { return res_.results; }

  const ExperimentConfig& cfg_;
  const RunOptions& opts_;
  RunResult& res_;
  DisorderDist dist_;
  int workers_ = 0;
  std::optional<GainKernel> kernel_;
  std::optional<double> gap_;
  std::map<double, MsdSeries> msd_;
  std::map<double, std::vector<nlohmann::json>> est_;
  std::optional<LocalizationResult> loc_;
  std::list<std::ofstream> csv_;
  bool kernel_pass_ = false;
  bool within_bounds_ = true;
  bool any_resolvent_ = false;
  bool slope_pass_ = false;
  bool appendix_pass_ = false;
};

}  // namespace runner_detail

inline std::filesystem::path resolve_out_dir(const ExperimentConfig& cfg, const RunOptions& opts) {
  if (opts.out_dir) return *opts.out_dir;
  if (const char* env = std::getenv("QBM_OUTPUT_DIR"); env != nullptr && *env != '\0') return env;
  return cfg.out_dir;
}

/// Runs the pipeline and writes results.json and manifest.json. Exit code 0 iff every
/// configured check passes, 1 on a failed check or module error.
inline RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
  RunResult res;
  res.out_dir = resolve_out_dir(cfg, opts);
  try {
    runner_detail::Runner(cfg, opts, res).run();
  } catch (const Error& e) {
    res.error = e.what();
    res.results["error"] = {{"code", to_string(e.code())}, {"message", e.what()}};
  }
  nlohmann::json checks = nlohmann::json::array();
  bool all = true;
  for (const auto& c : res.checks) {
    checks.push_back({{"name", c.name}, {"pass", c.pass}, {"value", c.value}, {"threshold", c.threshold}});
    all = all && c.pass;
  }
  res.results["checks"] = checks;
  res.results["pass"] = all && !res.error;
  res.exit_code = res.error || !all ? 1 : 0;
  std::filesystem::create_directories(res.out_dir);
  runner_detail::write_json(res.out_dir / "results.json", res.results);
  res.files.push_back("results.json");
  nlohmann::json resolved = to_json(cfg);
  resolved["output"]["dir"] = res.out_dir.string();
  if (opts.workers) resolved["workers"] = *opts.workers;
  runner_detail::write_json(res.out_dir / "manifest.json", {{"version", kVersion},
                                                            {"config", resolved},
                                                            {"dump", opts.dump},
                                                            {"files", res.files},
                                                            {"exit_code", res.exit_code}});
  return res;
}

}  // namespace qbm
