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

#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "flsplit/tensor.hpp"

namespace flsplit {

inline constexpr double kMaskBlocked = -std::numeric_limits<double>::infinity();

// Compressed form of a causal + left-padding additive attention mask.
//
// Padding occupies the earliest positions of each row. The uniform case
// carries a single pad_len shared by every batch row; when rows differ,
// pad_lens holds one entry per row.
struct MaskMeta {
  std::size_t seq_len = 0;
  std::size_t batch = 0;
  std::vector<std::size_t> pad_lens{0};

  static MaskMeta uniform(std::size_t seq_len, std::size_t pad_len, std::size_t batch) {
    return MaskMeta{seq_len, batch, {pad_len}};
  }

  static MaskMeta per_row(std::size_t seq_len, std::vector<std::size_t> pad_lens) {
    MaskMeta m{seq_len, pad_lens.size(), std::move(pad_lens)};
    m.normalize();
    return m;
  }

  bool is_uniform() const { return pad_lens.size() == 1; }

  std::size_t pad_len(std::size_t row) const { return is_uniform() ? pad_lens[0] : pad_lens.at(row); }

  // Collapses a per-row list with identical entries to the uniform form.
  void normalize() {
    if (pad_lens.size() > 1 &&
        std::all_of(pad_lens.begin(), pad_lens.end(), [&](std::size_t p) { return p == pad_lens[0]; })) {
      pad_lens.resize(1);
    }
  }

  void validate() const {
    if (seq_len == 0 || batch == 0) throw Error(ErrorCode::kInvalidMeta, "seq_len and batch must be positive");
    if (pad_lens.size() != 1 && pad_lens.size() != batch) {
      throw Error(ErrorCode::kInvalidMeta, "pad_lens must hold 1 or batch entries");
    }
    for (std::size_t p : pad_lens) {
      if (p >= seq_len) throw Error(ErrorCode::kInvalidMeta, "pad_len must be < seq_len");
    }
  }

  // Whether query slot `query` may attend key slot `key` in batch row `row`.
  bool allowed(std::size_t row, std::size_t query, std::size_t key) const {
    return key <= query && key >= pad_len(row);
  }

  friend bool operator==(const MaskMeta&, const MaskMeta&) = default;
};

// Meta describing rows concatenated along the batch dimension.
inline MaskMeta concat_meta(std::span<const MaskMeta> parts) {
  if (parts.empty()) throw Error(ErrorCode::kInvalidMeta, "concat of zero metas");
  std::vector<std::size_t> pads;
  const std::size_t seq = parts.front().seq_len;
  for (const auto& m : parts) {
    if (m.seq_len != seq) throw Error(ErrorCode::kBatchIncompatible, "seq_len differs across parts");
    for (std::size_t r = 0; r < m.batch; ++r) pads.push_back(m.pad_len(r));
  }
  return MaskMeta::per_row(seq, std::move(pads));
}

inline MaskMeta slice_meta(const MaskMeta& m, std::size_t begin, std::size_t count) {
  std::vector<std::size_t> pads;
  for (std::size_t r = begin; r < begin + count; ++r) pads.push_back(m.pad_len(r));
  return MaskMeta::per_row(m.seq_len, std::move(pads));
}

// Expands metadata into the batch x seq_len x seq_len additive mask with
// entries in {0, -inf}.
inline Tensor reconstruct_mask(const MaskMeta& meta) {
  meta.validate();
  const std::size_t s = meta.seq_len;
  Tensor mask({meta.batch, s, s});
  for (std::size_t b = 0; b < meta.batch; ++b) {
    for (std::size_t i = 0; i < s; ++i) {
      for (std::size_t j = 0; j < s; ++j) {
        mask[(b * s + i) * s + j] = meta.allowed(b, i, j) ? 0.0 : kMaskBlocked;
      }
    }
  }
  return mask;
}

// Recovers metadata from a full mask, rejecting anything outside the
// causal + left-padding family.
inline MaskMeta compress_mask(const Tensor& mask) {
  if (mask.rank() != 3 || mask.dim(1) != mask.dim(2) || mask.dim(1) == 0 || mask.dim(0) == 0) {
    throw Error(ErrorCode::kIncompressibleMask, "expected batch x s x s mask, got " + shape_str(mask.shape()));
  }
  const std::size_t batch = mask.dim(0);
  const std::size_t s = mask.dim(1);
  std::vector<std::size_t> pads(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    // The last query row sees every non-padding key; its leading blocked run is pad_len.
    const double* last = &mask[(b * s + (s - 1)) * s];
    std::size_t pad = 0;
    while (pad < s && last[pad] == kMaskBlocked) ++pad;
    if (pad >= s) throw Error(ErrorCode::kIncompressibleMask, "row fully blocked");
    pads[b] = pad;
  }
  MaskMeta meta = MaskMeta::per_row(s, std::move(pads));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < s; ++i) {
      for (std::size_t j = 0; j < s; ++j) {
        const double v = mask[(b * s + i) * s + j];
        const double expect = meta.allowed(b, i, j) ? 0.0 : kMaskBlocked;
        // Compare bit patterns so -0.0 or NaN entries are rejected too.
        if (std::signbit(v) != std::signbit(expect) || !(v == expect)) {
          throw Error(ErrorCode::kIncompressibleMask,
                      "entry (" + std::to_string(b) + "," + std::to_string(i) + "," + std::to_string(j) +
                          ") is not causal + left-padding");
        }
      }
    }
  }
  return meta;
}

}  // namespace flsplit
