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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace flsplit {

enum class ErrorCode {
  kDimension,
  kContextOverflow,
  kDegenerateBatch,
  kPartition,
  kProtocolOrder,
  kMerge,
  kConsistency,
  kIncompressibleMask,
  kInvalidMeta,
  kFrame,
  kChannelClosed,
  kProtocol,
  kBatchIncompatible,
  kBarrierTimeout,
  kThreatModel,
  kUndefinedMetric,
  kIdOutOfRange,
  kConfig,
  kCheckpoint,
  kInterrupted,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDimension: return "dimension";
    case ErrorCode::kContextOverflow: return "context-overflow";
    case ErrorCode::kDegenerateBatch: return "degenerate-batch";
    case ErrorCode::kPartition: return "partition";
    case ErrorCode::kProtocolOrder: return "protocol-order";
    case ErrorCode::kMerge: return "merge";
    case ErrorCode::kConsistency: return "consistency";
    case ErrorCode::kIncompressibleMask: return "incompressible-mask";
    case ErrorCode::kInvalidMeta: return "invalid-meta";
    case ErrorCode::kFrame: return "frame";
    case ErrorCode::kChannelClosed: return "channel-closed";
    case ErrorCode::kProtocol: return "protocol";
    case ErrorCode::kBatchIncompatible: return "batch-incompatible";
    case ErrorCode::kBarrierTimeout: return "barrier-timeout";
    case ErrorCode::kThreatModel: return "threat-model";
    case ErrorCode::kUndefinedMetric: return "undefined-metric";
    case ErrorCode::kIdOutOfRange: return "id-out-of-range";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kCheckpoint: return "checkpoint";
    case ErrorCode::kInterrupted: return "interrupted";
  }
  return "unknown";
}

// Every failure in the library is reported as an Error carrying a code the
// orchestrator can map to an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + " error: " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major array of doubles. A zero-sized dimension is allowed so that
// empty payloads can cross the wire.
class Tensor {
 public:
  Tensor() : shape_{0} {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
      throw Error(ErrorCode::kDimension, "shape " + shape_str(shape_) + " does not match " +
                                             std::to_string(data_.size()) + " scalars");
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    Shape shape{rows.size(), rows.size() ? rows.begin()->size() : 0};
    std::vector<double> data;
    for (const auto& row : rows) {
      if (row.size() != shape[1]) throw Error(ErrorCode::kDimension, "ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(std::move(shape), std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  // Leading dimensions collapsed into rows, last dimension kept.
  std::size_t rows() const { return shape_.empty() || shape_.back() == 0 ? 0 : size() / shape_.back(); }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  Tensor reshaped(Shape shape) const& { return Tensor(std::move(shape), data_); }
  Tensor reshaped(Shape shape) && { return Tensor(std::move(shape), std::move(data_)); }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, std::string_view what) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::kDimension,
                std::string(what) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// ||a - b|| / max(||a||, ||b||); zero when both vanish.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::kDimension, "relative_error length mismatch");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  const double scale = std::max(l2_norm(a), l2_norm(b));
  if (scale == 0.0) return 0.0;
  return std::sqrt(diff) / scale;
}

inline double relative_error(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "relative_error");
  return relative_error(a.data(), b.data());
}

inline void axpy(double alpha, const Tensor& x, Tensor& y) {
  require_same_shape(x, y, "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < a.size(); ++i) out[i] += b[i];
  return out;
}

// Concatenates tensors along dimension 0.
inline Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) return Tensor();
  Shape shape = parts.front().shape();
  std::size_t lead = 0;
  for (const auto& p : parts) {
    if (p.rank() != shape.size() || !std::equal(p.shape().begin() + 1, p.shape().end(), shape.begin() + 1)) {
      throw Error(ErrorCode::kDimension, "concat_rows: incompatible " + shape_str(p.shape()));
    }
    lead += p.dim(0);
  }
  shape[0] = lead;
  std::vector<double> data;
  data.reserve(shape_numel(shape));
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return Tensor(std::move(shape), std::move(data));
}

// Rows [begin, begin + count) along dimension 0.
inline Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t count) {
  if (t.rank() == 0 || begin + count > t.dim(0)) {
    throw Error(ErrorCode::kDimension, "slice_rows out of range for " + shape_str(t.shape()));
  }
  Shape shape = t.shape();
  shape[0] = count;
  const std::size_t inner = shape_numel(Shape(shape.begin() + 1, shape.end()));
  std::vector<double> data(t.data().begin() + static_cast<std::ptrdiff_t>(begin * inner),
                           t.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * inner));
  return Tensor(std::move(shape), std::move(data));
}

// Deterministic parameter initialization: every named parameter draws from
// its own stream, so any slice of a model reproduces the monolithic values.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::mt19937_64 named_stream(std::uint64_t seed, std::string_view name) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(fnv1a(name)), static_cast<std::uint32_t>(fnv1a(name) >> 32)};
  return std::mt19937_64(seq);
}

inline Tensor random_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& x : t.data()) x = stddev * dist(rng);
  return t;
}

inline Tensor random_uniform(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& x : t.data()) x = dist(rng);
  return t;
}

// Keeps large tensor buffers in the heap rather than fresh mmap pages; the
// default threshold makes every activation allocation page-fault.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
}

}  // namespace flsplit
