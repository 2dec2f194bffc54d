// Copyright 2026 The flsplit Authors
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

#include <random>
#include <string>

#include "flsplit/tensor.hpp"

namespace flsplit {

enum class NoiseTarget {
  kNone,
  kForwardHA,       // h_A before it leaves the client
  kBackwardGradHB,  // experimental: gradient of h_B before it goes back to the server
};

inline std::string_view to_string(NoiseTarget t) {
  switch (t) {
    case NoiseTarget::kNone: return "none";
    case NoiseTarget::kForwardHA: return "forward_hA";
    case NoiseTarget::kBackwardGradHB: return "backward_grad_hB";
  }
  return "none";
}

inline NoiseTarget parse_noise_target(std::string_view s) {
  if (s == "none") return NoiseTarget::kNone;
  if (s == "forward_hA") return NoiseTarget::kForwardHA;
  if (s == "backward_grad_hB") return NoiseTarget::kBackwardGradHB;
  throw Error(ErrorCode::kConfig, "unknown noise target '" + std::string(s) + "'");
}

// scale is the standard deviation of N(0, scale^2).
struct NoiseConfig {
  double scale = 0.0;
  NoiseTarget target = NoiseTarget::kForwardHA;
  std::uint64_t seed = 0;
  bool at_inference = false;

  void validate() const {
    if (!(scale >= 0.0) || !std::isfinite(scale)) throw Error(ErrorCode::kConfig, "noise scale must be finite and >= 0");
  }

  bool active(NoiseTarget where) const { return target == where && scale > 0.0; }
};

// h + eps with eps ~ N(0, delta^2) drawn fresh from rng; delta == 0 returns h untouched.
inline Tensor inject_noise(const Tensor& h, double delta, std::mt19937_64& rng) {
  if (delta == 0.0) return h;
  if (!(delta > 0.0)) throw Error(ErrorCode::kConfig, "noise scale must be >= 0");
  Tensor out = h;
  std::normal_distribution<double> dist(0.0, delta);
  for (auto& v : out.data()) v += dist(rng);
  return out;
}

inline Tensor inject_noise(const Tensor& h, const NoiseConfig& cfg, std::mt19937_64& rng) {
  return inject_noise(h, cfg.target == NoiseTarget::kNone ? 0.0 : cfg.scale, rng);
}

}  // namespace flsplit
