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

// Sequence overlap metrics on token ids. Both return values in [0, 1].

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <vector>

#include "flsplit/ops.hpp"

namespace flsplit {

namespace metrics_detail {

inline std::map<std::vector<TokenId>, std::size_t> ngram_counts(std::span<const TokenId> s, std::size_t n) {
  std::map<std::vector<TokenId>, std::size_t> c;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++c[std::vector<TokenId>(s.begin() + i, s.begin() + i + n)];
  return c;
}

// Clipped overlap: each candidate n-gram counts at most as often as in the reference.
inline std::size_t clipped_overlap(std::span<const TokenId> cand, std::span<const TokenId> ref, std::size_t n) {
  const auto rc = ngram_counts(ref, n);
  std::size_t hit = 0;
  for (const auto& [g, k] : ngram_counts(cand, n)) {
    auto it = rc.find(g);
    if (it != rc.end()) hit += std::min(k, it->second);
  }
  return hit;
}

}  // namespace metrics_detail

// Unsmoothed corpus-free BLEU-4: geometric mean of clipped 1..4-gram
// precisions times exp(1 - r/c) when the candidate is shorter.
inline double bleu4(std::span<const TokenId> cand, std::span<const TokenId> ref) {
  if (ref.empty()) throw Error(ErrorCode::kUndefinedMetric, "BLEU needs a non-empty reference");
  if (cand.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    if (cand.size() < n) return 0.0;
    const std::size_t hit = metrics_detail::clipped_overlap(cand, ref, n);
    if (hit == 0) return 0.0;
    log_sum += std::log(static_cast<double>(hit) / static_cast<double>(cand.size() - n + 1));
  }
  const double c = static_cast<double>(cand.size()), r = static_cast<double>(ref.size());
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / 4.0);
}

// Bigram-overlap F1.
inline double rouge2_f1(std::span<const TokenId> cand, std::span<const TokenId> ref) {
  if (ref.size() < 2) throw Error(ErrorCode::kUndefinedMetric, "ROUGE-2 needs a reference of at least 2 tokens");
  if (cand.size() < 2) return 0.0;
  const std::size_t hit = metrics_detail::clipped_overlap(cand, ref, 2);
  if (hit == 0) return 0.0;
  const double p = static_cast<double>(hit) / static_cast<double>(cand.size() - 1);
  const double r = static_cast<double>(hit) / static_cast<double>(ref.size() - 1);
  return 2.0 * p * r / (p + r);
}

}  // namespace flsplit
