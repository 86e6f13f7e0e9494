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

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <string>

namespace qbm {

inline constexpr const char* kVersion = "0.1.0";

using Complex = std::complex<double>;
inline constexpr Complex kI{0.0, 1.0};
inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kTwoPi = 2.0 * kPi;

enum class ErrorCode {
  InvalidArgument,
  NonRealTrace,
  NonRealMoment,
  NegativeWeight,
  TruncationTooLossy,
  GridTooCoarse,
  ZeroKernel,
  TruncatedBoxShift,
  BoxMismatch,
  StepSizeUnderflow,
  BoundaryMassExceeded,
  AbsorbingState,
  TailDominates,
  WindowTooShort,
  KernelConstraintViolated,
  IllConditioned,
  SingularLindbladian,
  NoPlateau,
  NonlinearRegime,
  NotNormal,
  NotAccretive,
  ConfigInvalid,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::NonRealTrace: return "NonRealTrace";
    case ErrorCode::NonRealMoment: return "NonRealMoment";
    case ErrorCode::NegativeWeight: return "NegativeWeight";
    case ErrorCode::TruncationTooLossy: return "TruncationTooLossy";
    case ErrorCode::GridTooCoarse: return "GridTooCoarse";
    case ErrorCode::ZeroKernel: return "ZeroKernel";
    case ErrorCode::TruncatedBoxShift: return "TruncatedBoxShift";
    case ErrorCode::BoxMismatch: return "BoxMismatch";
    case ErrorCode::StepSizeUnderflow: return "StepSizeUnderflow";
    case ErrorCode::BoundaryMassExceeded: return "BoundaryMassExceeded";
    case ErrorCode::AbsorbingState: return "AbsorbingState";
    case ErrorCode::TailDominates: return "TailDominates";
    case ErrorCode::WindowTooShort: return "WindowTooShort";
    case ErrorCode::KernelConstraintViolated: return "KernelConstraintViolated";
    case ErrorCode::IllConditioned: return "IllConditioned";
    case ErrorCode::SingularLindbladian: return "SingularLindbladian";
    case ErrorCode::NoPlateau: return "NoPlateau";
    case ErrorCode::NonlinearRegime: return "NonlinearRegime";
    case ErrorCode::NotNormal: return "NotNormal";
    case ErrorCode::NotAccretive: return "NotAccretive";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
  }
  return "Unknown";
}

/// All library failures are reported as qbm::Error carrying a machine-readable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Shortest round-trip-ish rendering of a double for messages.
inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

inline void require(bool cond, const std::string& what) {
  if (!cond) throw Error(ErrorCode::InvalidArgument, what);
}

/// Integer lattice vector in d <= 2 dimensions; unused trailing components stay 0.
using Site = std::array<int, 2>;

inline Site operator+(Site a, Site b) { return {a[0] + b[0], a[1] + b[1]}; }
inline Site operator-(Site a, Site b) { return {a[0] - b[0], a[1] - b[1]}; }
inline Site operator-(Site a) { return {-a[0], -a[1]}; }

inline int l1_norm(Site a) { return std::abs(a[0]) + std::abs(a[1]); }
inline int linf_norm(Site a) { return std::max(std::abs(a[0]), std::abs(a[1])); }

inline Site unit_vector(int axis, int sign = 1) {
  Site e{0, 0};
  e[static_cast<std::size_t>(axis)] = sign;
  return e;
}

inline bool is_even(int v) { return (v % 2) == 0; }

/// Torus point in d <= 2 dimensions.
using TorusPoint = std::array<double, 2>;

}  // namespace qbm
