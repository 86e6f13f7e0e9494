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

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "qbm/lattice_state.hpp"
#include "qbm/rng.hpp"

namespace qbm {

/// Bounded single-site law of the random potential.
struct DisorderDist {
  enum class Kind { Uniform, Discrete };

  Kind kind = Kind::Uniform;
  double lo = -1.0;
  double hi = 1.0;
  std::vector<double> values;  // Discrete: equally likely values

  static DisorderDist uniform(double a = -1.0, double b = 1.0) {
    require(a < b, "uniform disorder needs a < b");
    return {Kind::Uniform, a, b, {}};
  }
  static DisorderDist bernoulli() { return {Kind::Discrete, -1.0, 1.0, {-1.0, 1.0}}; }
  static DisorderDist discrete(std::vector<double> vals) {
    require(!vals.empty(), "discrete disorder needs at least one value");
    DisorderDist d{Kind::Discrete, vals.front(), vals.front(), vals};
    for (double v : vals) {
      d.lo = std::min(d.lo, v);
      d.hi = std::max(d.hi, v);
    }
    return d;
  }

  double bound() const { return std::max(std::abs(lo), std::abs(hi)); }
  double mean() const;
  double variance() const;

  double draw(double u) const {
    if (kind == Kind::Uniform) return lo + (hi - lo) * u;
    auto k = static_cast<std::size_t>(u * static_cast<double>(values.size()));
    return values[std::min(k, values.size() - 1)];
  }

  std::string name() const {
    std::ostringstream os;
    os.precision(17);
    if (kind == Kind::Uniform) {
      if (lo == -1.0 && hi == 1.0) return "uniform";
      os << "uniform(" << lo << ',' << hi << ')';
      return os.str();
    }
    if (values == std::vector<double>{-1.0, 1.0}) return "bernoulli";
    os << "discrete(";
    for (std::size_t i = 0; i < values.size(); ++i) os << (i ? "," : "") << values[i];
    os << ')';
    return os.str();
  }
};

inline double DisorderDist::mean() const {
  if (kind == Kind::Uniform) return 0.5 * (lo + hi);
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

inline double DisorderDist::variance() const {
  if (kind == Kind::Uniform) return (hi - lo) * (hi - lo) / 12.0;
  const double m = mean();
  double s = 0.0;
  for (double v : values) s += (v - m) * (v - m);
  return s / static_cast<double>(values.size());
}

/// Parses "uniform", "uniform(a,b)", "bernoulli" or "discrete(v1,v2,...)".
inline DisorderDist parse_dist(const std::string& text) {
  auto args = [&](std::size_t open) {
    require(text.back() == ')', "disorder dist: missing ')' in '" + text + "'");
    std::vector<double> out;
    std::stringstream ss(text.substr(open + 1, text.size() - open - 2));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      try {
        out.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw Error(ErrorCode::InvalidArgument, "disorder dist: bad number '" + tok + "'");
      }
    }
    return out;
  };
  if (text == "uniform") return DisorderDist::uniform();
  if (text == "bernoulli") return DisorderDist::bernoulli();
  if (text.rfind("uniform(", 0) == 0) {
    const auto a = args(7);
    require(a.size() == 2, "uniform(a,b) takes two arguments");
    return DisorderDist::uniform(a[0], a[1]);
  }
  if (text.rfind("discrete(", 0) == 0) return DisorderDist::discrete(args(8));
  throw Error(ErrorCode::InvalidArgument, "unknown disorder dist '" + text + "'");
}

/// Site potential omega(x); a pure function of (seed, dist, x).
inline double disorder_value(std::uint64_t seed, const DisorderDist& dist, Site x) {
  const auto c = Philox4x32::generate(
      {static_cast<std::uint32_t>(x[0]), static_cast<std::uint32_t>(x[1]), 0x6f6d6567u, 0u},
      philox_key(seed));
  return dist.draw(u01(c[0], c[1]));
}

/// Random potential on a box. Values are indexed like the box sites.
class DisorderField {
 public:
  DisorderField(LatticeBox box, std::vector<double> values, std::uint64_t seed = 0,
                DisorderDist dist = DisorderDist::uniform())
      : box_(box), values_(std::move(values)), seed_(seed), dist_(std::move(dist)) {
    require(static_cast<int>(values_.size()) == box_.num_sites(), "DisorderField: size mismatch");
  }

  static DisorderField zero(LatticeBox box) {
    return DisorderField(box, std::vector<double>(static_cast<std::size_t>(box.num_sites()), 0.0));
  }

  const LatticeBox& box() const { return box_; }
  std::uint64_t seed() const { return seed_; }
  const DisorderDist& dist() const { return dist_; }
  const std::vector<double>& values() const { return values_; }

  /// omega(x); zero outside a truncated box, wrapped in a periodic one.
  double operator()(Site x) const {
    if (!box_.contains(x)) return 0.0;
    return values_[static_cast<std::size_t>(box_.index(x))];
  }

  bool operator==(const DisorderField& o) const { return box_ == o.box_ && values_ == o.values_; }

 private:
  LatticeBox box_;
  std::vector<double> values_;
  std::uint64_t seed_;
  DisorderDist dist_;
};

inline DisorderField sample(LatticeBox box, const DisorderDist& dist, std::uint64_t seed) {
  std::vector<double> v(static_cast<std::size_t>(box.num_sites()));
  for (int k = 0; k < box.num_sites(); ++k) v[static_cast<std::size_t>(k)] = disorder_value(seed, dist, box.site(k));
  return DisorderField(box, std::move(v), seed, dist);
}

/// (tau_a omega)(x) = omega(x - a) on a periodic box.
inline DisorderField shift(const DisorderField& f, Site a) {
  if (!f.box().periodic()) {
    throw Error(ErrorCode::TruncatedBoxShift, "shift is defined only on periodic boxes");
  }
  const LatticeBox& box = f.box();
  std::vector<double> v(static_cast<std::size_t>(box.num_sites()));
  for (int k = 0; k < box.num_sites(); ++k) v[static_cast<std::size_t>(k)] = f(box.site(k) - a);
  return DisorderField(box, std::move(v), f.seed(), f.dist());
}

/// omega(R_i x), R_i flipping the sign of coordinate i.
inline DisorderField reflect(const DisorderField& f, int axis) {
  const LatticeBox& box = f.box();
  require(axis >= 0 && axis < box.dim(), "reflect: axis out of range");
  std::vector<double> v(static_cast<std::size_t>(box.num_sites()));
  for (int k = 0; k < box.num_sites(); ++k) {
    Site x = box.site(k);
    x[static_cast<std::size_t>(axis)] = -x[static_cast<std::size_t>(axis)];
    v[static_cast<std::size_t>(k)] = f(x);
  }
  return DisorderField(box, std::move(v), f.seed(), f.dist());
}

/// omega with the two coordinates swapped (d = 2).
inline DisorderField transpose(const DisorderField& f) {
  const LatticeBox& box = f.box();
  require(box.dim() == 2, "transpose: needs d = 2");
  std::vector<double> v(static_cast<std::size_t>(box.num_sites()));
  for (int k = 0; k < box.num_sites(); ++k) {
    const Site x = box.site(k);
    v[static_cast<std::size_t>(k)] = f({x[1], x[0]});
  }
  return DisorderField(box, std::move(v), f.seed(), f.dist());
}

}  // namespace qbm
