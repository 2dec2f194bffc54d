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

// Flat checkpoint file:
//   "FLSPCKPT" | u64 version | u64 count | count x entry
//   entry = u64 name_len | name | u64 rank | rank x u64 dim | numel x f64
// All integers and scalars little-endian. Parameter names are global
// (blocks.<i>...), so a split model and a monolithic model write the same
// entries and every segment loads its own slice.

#include <fstream>
#include <initializer_list>
#include <iterator>
#include <map>
#include <string>

#include "flsplit/bytes.hpp"
#include "flsplit/model.hpp"

namespace flsplit {

inline constexpr std::string_view kCheckpointMagic = "FLSPCKPT";
inline constexpr std::uint64_t kCheckpointVersion = 1;

using ParameterMap = std::map<std::string, Tensor>;

inline void collect_parameters(const SegmentModel& seg, ParameterMap& out) {
  seg.visit_params([&](const Param& p) { out[p.name] = p.value; });
}

inline Bytes encode_checkpoint(const ParameterMap& params) {
  Bytes out;
  ByteWriter w(out);
  w.raw({reinterpret_cast<const std::uint8_t*>(kCheckpointMagic.data()), kCheckpointMagic.size()});
  w.u64(kCheckpointVersion);
  w.u64(params.size());
  for (const auto& [name, t] : params) {
    w.str(name);
    w.u64(t.rank());
    for (auto d : t.shape()) w.u64(d);
    for (double v : t.data()) w.f64(v);
  }
  return out;
}

inline ParameterMap decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kCheckpointMagic.size() ||
      std::string_view(reinterpret_cast<const char*>(bytes.data()), kCheckpointMagic.size()) != kCheckpointMagic) {
    throw Error(ErrorCode::kCheckpoint, "bad magic");
  }
  ByteReader r(bytes.subspan(kCheckpointMagic.size()), kCheckpointMagic.size());
  try {
    if (r.u64() != kCheckpointVersion) throw Error(ErrorCode::kCheckpoint, "unsupported version");
    const auto count = r.u64();
    ParameterMap out;
    for (std::uint64_t i = 0; i < count; ++i) {
      std::string name = r.str();
      const auto rank = r.u64();
      if (rank > 8) r.fail("rank " + std::to_string(rank));
      Shape shape(rank);
      for (auto& d : shape) d = r.u64();
      const std::size_t n = shape_numel(shape);
      if (n > r.remaining() / 8) r.fail("tensor larger than file");
      std::vector<double> data(n);
      for (auto& v : data) v = r.f64();
      out.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    if (r.remaining() != 0) r.fail("trailing bytes");
    return out;
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kCheckpoint) throw;
    throw Error(ErrorCode::kCheckpoint, e.what());
  }
}

inline void save_checkpoint(const std::string& path, std::initializer_list<const SegmentModel*> segments) {
  ParameterMap params;
  for (const auto* s : segments) collect_parameters(*s, params);
  const Bytes bytes = encode_checkpoint(params);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::kCheckpoint, "cannot open " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error(ErrorCode::kCheckpoint, "write failed for " + path);
}

inline ParameterMap load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::kCheckpoint, "cannot open " + path);
  Bytes bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

// Overwrites every parameter of seg from the map; all must be present.
inline void load_parameters(SegmentModel& seg, const ParameterMap& params) {
  seg.visit_params([&](Param& p) {
    auto it = params.find(p.name);
    if (it == params.end()) throw Error(ErrorCode::kCheckpoint, "missing parameter " + p.name);
    if (it->second.shape() != p.value.shape()) {
      throw Error(ErrorCode::kCheckpoint, "shape mismatch for " + p.name);
    }
    p.value = it->second;
  });
}

}  // namespace flsplit
