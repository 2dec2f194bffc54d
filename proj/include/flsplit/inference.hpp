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

// Autoregressive generation across the split. With the cache on, both sides
// keep per-block keys/values and each decode step moves a single position
// each way in a CacheStepMsg; with it off every step resends the whole
// sequence as a HiddenStateMsg.

#include "flsplit/training.hpp"

namespace flsplit {

enum class DecodeMode { kGreedy, kTemperature };

inline std::string_view to_string(DecodeMode m) { return m == DecodeMode::kGreedy ? "greedy" : "temperature"; }

inline DecodeMode parse_decode_mode(std::string_view s) {
  if (s == "greedy") return DecodeMode::kGreedy;
  if (s == "temperature") return DecodeMode::kTemperature;
  throw Error(ErrorCode::kConfig, "unknown decode mode '" + std::string(s) + "'");
}

struct GenerationConfig {
  std::size_t max_new_tokens = 16;
  DecodeMode mode = DecodeMode::kGreedy;
  double temperature = 1.0;
  std::optional<TokenId> stop_token;
  std::uint64_t seed = 0;
  bool use_cache = true;

  void validate() const {
    if (max_new_tokens < 1) throw Error(ErrorCode::kConfig, "max_new_tokens must be >= 1");
    if (mode == DecodeMode::kTemperature && !(temperature > 0.0 && std::isfinite(temperature))) {
      throw Error(ErrorCode::kConfig, "temperature must be > 0");
    }
  }
};

struct PaddedPrompts {
  TokenBatch tokens;
  MaskMeta meta;
};

// Left-pads to the longest prompt.
inline PaddedPrompts pad_prompts(std::span<const std::vector<TokenId>> prompts, TokenId pad = 0) {
  if (prompts.empty()) throw Error(ErrorCode::kDegenerateBatch, "no prompts");
  std::size_t len = 0;
  for (const auto& p : prompts) len = std::max(len, p.size());
  PaddedPrompts out;
  out.tokens = TokenBatch{prompts.size(), len, std::vector<TokenId>(prompts.size() * len, pad)};
  std::vector<std::size_t> pads;
  for (std::size_t r = 0; r < prompts.size(); ++r) {
    if (prompts[r].empty()) throw Error(ErrorCode::kDegenerateBatch, "empty prompt");
    pads.push_back(len - prompts[r].size());
    std::copy(prompts[r].begin(), prompts[r].end(), out.tokens.ids.begin() + static_cast<std::ptrdiff_t>(r * len + pads.back()));
  }
  out.meta = MaskMeta::per_row(len, std::move(pads));
  return out;
}

// One generation session of one client against the server on the other end
// of `ch`. Logits come back as [b, V] for the last position.
class InferenceSession {
 public:
  InferenceSession(ClientNode& client, Channel& ch, std::uint64_t session_id, bool use_cache = true)
      : client_(client), ch_(ch), session_(session_id), cached_(use_cache) {}

  InferenceSession(const InferenceSession&) = delete;
  InferenceSession& operator=(const InferenceSession&) = delete;

  std::uint64_t session_id() const { return session_; }
  bool cached() const { return cached_; }
  bool started() const { return started_; }
  // Positions processed so far.
  std::size_t length() const { return cached_ ? cache_a_.length() : tokens_.seq; }
  const KVCache& cache_a() const { return cache_a_; }
  const KVCache& cache_c() const { return cache_c_; }
  KVCache& mutable_cache_a() { return cache_a_; }

  Tensor prefill(const TokenBatch& prompt, const MaskMeta& meta) {
    if (started_) throw Error(ErrorCode::kProtocol, "session " + std::to_string(session_) + " already prefilled");
    check_context(prompt.seq, client_.a.config());
    check_batch(prompt, meta);
    started_ = true;
    if (!cached_) {
      tokens_ = prompt;
      pads_ = meta.pad_lens.size() == 1 ? std::vector<std::size_t>(prompt.batch, meta.pad_lens[0]) : meta.pad_lens;
      return full_pass();
    }
    cache_a_ = client_.a.make_cache();
    cache_c_ = client_.c.make_cache();
    const auto pos = iota_positions(0, prompt.seq);
    HiddenStateMsg m;
    m.client_id = client_.id();
    m.session_id = session_;
    m.flags = kFlagPrefill;
    m.positions = pos;
    m.mask_meta = meta;
    m.tensor = client_.inference_hidden(client_.a.forward(prompt, meta, pos, &cache_a_, {false, false}));
    ch_.send(m);
    auto hb = ch_.recv_as<HiddenStateMsg>();
    expect_reply(hb.session_id, hb.tensor, prompt.batch, prompt.seq);
    return flatten(client_.c.forward(hb.tensor, meta, pos, &cache_c_, {false, true}));
  }

  Tensor decode_step(std::span<const TokenId> last) {
    if (!started_) throw Error(ErrorCode::kProtocolOrder, "decode_step before prefill");
    const std::size_t b = cached_ ? cache_a_.batch : tokens_.batch;
    if (last.size() != b) throw Error(ErrorCode::kDimension, "decode_step needs one token per row");
    if (!cached_) {
      check_context(tokens_.seq + 1, client_.a.config());
      TokenBatch next{b, tokens_.seq + 1, {}};
      for (std::size_t r = 0; r < b; ++r) {
        next.ids.insert(next.ids.end(), tokens_.ids.begin() + static_cast<std::ptrdiff_t>(r * tokens_.seq),
                        tokens_.ids.begin() + static_cast<std::ptrdiff_t>((r + 1) * tokens_.seq));
        next.ids.push_back(last[r]);
      }
      tokens_ = std::move(next);
      return full_pass();
    }
    if (cache_a_.length() != cache_c_.length()) {
      throw Error(ErrorCode::kProtocol, "client caches out of step: " + std::to_string(cache_a_.length()) + " vs " +
                                            std::to_string(cache_c_.length()));
    }
    const std::size_t p = cache_a_.length();
    check_context(p + 1, client_.a.config());
    const std::size_t pos[1] = {p};
    TokenBatch step{b, 1, std::vector<TokenId>(last.begin(), last.end())};
    const MaskMeta meta = cache_a_.meta_after(1);
    CacheStepMsg m;
    m.client_id = client_.id();
    m.session_id = session_;
    m.position = p;
    m.tensor = client_.inference_hidden(client_.a.forward(step, meta, pos, &cache_a_, {false, false}));
    ch_.send(m);
    auto hb = ch_.recv_as<CacheStepMsg>();
    expect_reply(hb.session_id, hb.tensor, b, 1);
    if (hb.position != p) {
      throw Error(ErrorCode::kProtocol, "cache desync: sent position " + std::to_string(p) + ", reply for " +
                                            std::to_string(hb.position));
    }
    return flatten(client_.c.forward(hb.tensor, cache_c_.meta_after(1), pos, &cache_c_, {false, true}));
  }

  // Drops the server-side cache; the local ones are cleared too.
  void end() {
    if (cached_ && started_) {
      ch_.send(ControlMsg{ControlKind::kEndSession, client_.id(), session_, 0, ""});
      auto ack = ch_.recv_as<ControlMsg>();
      if (ack.kind != ControlKind::kAck || ack.session_id != session_) {
        throw Error(ErrorCode::kProtocol, "end of session " + std::to_string(session_) + " not acknowledged");
      }
    }
    cache_a_.clear();
    cache_c_.clear();
    tokens_ = TokenBatch{};
    started_ = false;
  }

 private:
  static Tensor flatten(Tensor logits) {
    const std::size_t b = logits.dim(0), v = logits.dim(2);
    return std::move(logits).reshaped({b, v});
  }

  void expect_reply(std::uint64_t session, const Tensor& t, std::size_t b, std::size_t s) const {
    if (session != session_) {
      throw Error(ErrorCode::kProtocol, "reply for session " + std::to_string(session) + " in session " +
                                            std::to_string(session_));
    }
    if (t.rank() != 3 || t.dim(0) != b || t.dim(1) != s || t.dim(2) != client_.a.config().hidden_size) {
      throw Error(ErrorCode::kProtocol, "reply shape " + shape_str(t.shape()));
    }
  }

  Tensor full_pass() {
    const MaskMeta meta = MaskMeta::per_row(tokens_.seq, pads_);
    const auto pos = iota_positions(0, tokens_.seq);
    HiddenStateMsg m;
    m.client_id = client_.id();
    m.session_id = session_;
    m.positions = pos;
    m.mask_meta = meta;
    m.tensor = client_.inference_hidden(client_.a.forward(tokens_, meta, pos, nullptr, {false, false}));
    ch_.send(m);
    auto hb = ch_.recv_as<HiddenStateMsg>();
    expect_reply(hb.session_id, hb.tensor, tokens_.batch, tokens_.seq);
    return flatten(client_.c.forward(hb.tensor, meta, pos, nullptr, {false, true}));
  }

  ClientNode& client_;
  Channel& ch_;
  std::uint64_t session_;
  bool cached_;
  bool started_ = false;
  KVCache cache_a_;
  KVCache cache_c_;
  TokenBatch tokens_;
  std::vector<std::size_t> pads_;
};

// Greedy picks the lowest id among ties.
inline TokenId pick_token(std::span<const double> logits, const GenerationConfig& cfg, std::mt19937_64& rng) {
  if (cfg.mode == DecodeMode::kGreedy) {
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  std::vector<double> scaled(logits.begin(), logits.end());
  for (auto& v : scaled) v /= cfg.temperature;
  const auto p = softmax(scaled);
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(p.size() - 1);
}

struct GenerationResult {
  std::vector<std::vector<TokenId>> tokens;  // per prompt, stop token excluded
  std::size_t decode_steps = 0;
  std::optional<ErrorCode> error;  // set when generation broke off; tokens hold the partial output
  std::string error_text;
  CommSnapshot comm;

  bool ok() const { return !error; }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["tokens"] = tokens;
    j["decode_steps"] = decode_steps;
    j["error"] = error ? nlohmann::json(std::string(to_string(*error))) : nlohmann::json(nullptr);
    if (error) j["error_text"] = error_text;
    j["comm"] = comm.to_json();
    return j;
  }
};

// Prefill, then one decode_step per emitted token until every row has hit
// the stop token or max_new_tokens. Rows that stopped keep feeding the stop
// token so the batch stays rectangular.
inline GenerationResult generate(ClientNode& client, Channel& ch, std::uint64_t session_id,
                                 std::span<const std::vector<TokenId>> prompts, const GenerationConfig& cfg) {
  cfg.validate();
  const auto padded = pad_prompts(prompts);
  const CommSnapshot before = ch.stats() ? ch.stats()->snapshot() : CommSnapshot{};
  GenerationResult out;
  out.tokens.resize(prompts.size());
  std::vector<bool> done(prompts.size(), false);
  auto rng = named_stream(cfg.seed, "sampler");
  InferenceSession s(client, ch, session_id, cfg.use_cache);
  try {
    Tensor logits = s.prefill(padded.tokens, padded.meta);
    const std::size_t v = logits.dim(1);
    for (std::size_t n = 0; n < cfg.max_new_tokens; ++n) {
      std::vector<TokenId> next(prompts.size());
      for (std::size_t r = 0; r < prompts.size(); ++r) {
        next[r] = pick_token(std::span<const double>(&logits[r * v], v), cfg, rng);
        if (done[r]) {
          next[r] = *cfg.stop_token;
        } else if (cfg.stop_token && next[r] == *cfg.stop_token) {
          done[r] = true;
        } else {
          out.tokens[r].push_back(next[r]);
        }
      }
      if (std::all_of(done.begin(), done.end(), [](bool d) { return d; })) break;
      logits = s.decode_step(next);
      ++out.decode_steps;
    }
    s.end();
  } catch (const Error& e) {
    out.error = e.code();
    out.error_text = e.what();
  }
  if (ch.stats()) out.comm = ch.stats()->snapshot() - before;
  return out;
}

}  // namespace flsplit
