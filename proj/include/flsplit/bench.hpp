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

// Experiment orchestration: config, scoring, byte accounting and the runs
// behind each CLI subcommand.

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "flsplit/attack.hpp"
#include "flsplit/checkpoint.hpp"
#include "flsplit/inference.hpp"
#include "flsplit/parallel.hpp"

namespace flsplit {

// ---------------------------------------------------------------------------
// scoring

// Softmax restricted to the candidate logits, in candidate order.
inline std::vector<double> score_single_token(std::span<const double> logits, std::span<const TokenId> candidates) {
  if (candidates.empty()) throw Error(ErrorCode::kConfig, "no candidates");
  std::vector<double> sel;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const TokenId c = candidates[i];
    if (c < 0 || static_cast<std::size_t>(c) >= logits.size()) {
      throw Error(ErrorCode::kIdOutOfRange, "candidate id " + std::to_string(c));
    }
    if (std::find(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(i), c) !=
        candidates.begin() + static_cast<std::ptrdiff_t>(i)) {
      throw Error(ErrorCode::kConfig, "duplicate candidate " + std::to_string(c));
    }
    sel.push_back(logits[static_cast<std::size_t>(c)]);
  }
  const double lse = log_sum_exp(sel);
  for (auto& v : sel) v = std::exp(v - lse);
  return sel;
}

inline double log_prob(std::span<const double> logits, TokenId id) {
  if (id < 0 || static_cast<std::size_t>(id) >= logits.size()) throw Error(ErrorCode::kIdOutOfRange, "id " + std::to_string(id));
  return logits[static_cast<std::size_t>(id)] - log_sum_exp(logits);
}

// Teacher-forced sum of log P(answer_t | prompt, answer_<t) through the split.
inline double score_multi_token(ClientNode& client, Channel& ch, std::uint64_t session_id,
                                std::span<const TokenId> prompt, std::span<const TokenId> answer, bool use_cache = true) {
  if (answer.empty()) throw Error(ErrorCode::kConfig, "empty answer");
  if (prompt.empty()) throw Error(ErrorCode::kDegenerateBatch, "empty prompt");
  check_context(prompt.size() + answer.size() - 1, client.a.config());
  InferenceSession s(client, ch, session_id, use_cache);
  const TokenBatch tb{1, prompt.size(), {prompt.begin(), prompt.end()}};
  Tensor logits = s.prefill(tb, MaskMeta::uniform(prompt.size(), 0, 1));
  double total = 0.0;
  for (std::size_t t = 0; t < answer.size(); ++t) {
    if (t > 0) logits = s.decode_step(answer.subspan(t - 1, 1));
    total += log_prob(logits.data(), answer[t]);
  }
  s.end();
  return total;
}

// ---------------------------------------------------------------------------
// parameter and byte accounting

struct MemoryProxy {
  PartitionSpec partition;
  std::size_t client_params = 0;  // A + C
  std::size_t server_params = 0;  // B
  std::size_t total_params = 0;

  double client_fraction() const { return static_cast<double>(client_params) / static_cast<double>(total_params); }

  nlohmann::json to_json() const {
    return {{"partition", {partition.p, partition.k, partition.q}},
            {"client_params", client_params},
            {"server_params", server_params},
            {"total_params", total_params},
            {"client_fraction", client_fraction()},
            {"reduction", 1.0 - client_fraction()}};
  }
};

inline MemoryProxy memory_proxy(const ModelConfig& cfg, const PartitionSpec& spec, bool allow_embedding_only = false) {
  auto parts = build_partitioned(cfg, spec, 0, TrainMode::kLora, allow_embedding_only);
  MemoryProxy m;
  m.partition = spec;
  m.client_params = parts.a.parameter_count() + parts.c.parameter_count();
  m.server_params = parts.b.parameter_count();
  m.total_params = m.client_params + m.server_params;
  return m;
}

struct MaskComparison {
  std::size_t batch = 0, seq_len = 0, width = 0;
  std::size_t meta_bytes = 0;
  std::size_t full_bytes = 0;

  nlohmann::json to_json() const {
    return {{"batch", batch}, {"seq_len", seq_len}, {"width", width}, {"meta_bytes", meta_bytes},
            {"full_mask_bytes", full_bytes},
            {"ratio", static_cast<double>(full_bytes) / static_cast<double>(meta_bytes)}};
  }
};

// Mask field size of an actual training message in both encodings.
inline MaskComparison compare_mask_bytes(std::size_t batch, std::size_t seq_len, std::size_t width) {
  HiddenStateMsg m;
  m.scalar_width = width;
  m.mask_meta = MaskMeta::uniform(seq_len, 0, batch);
  MaskComparison c{batch, seq_len, width, mask_field_bytes(m), 0};
  m.flags = kFlagFullMask;
  c.full_bytes = mask_field_bytes(m);
  return c;
}

struct DecodeBytes {
  std::size_t context = 0;
  std::uint64_t cached = 0;    // one decode step, both directions
  std::uint64_t uncached = 0;

  nlohmann::json to_json() const { return {{"context", context}, {"cached_step_bytes", cached}, {"uncached_step_bytes", uncached}}; }
};

// Prefill a random prompt of `context` tokens, then time one decode step's
// traffic on each path. The model context is widened to fit.
inline DecodeBytes measure_decode_bytes(ModelConfig cfg, const PartitionSpec& spec, std::uint64_t seed,
                                        std::size_t context, TransportKind transport = TransportKind::kLoopback) {
  cfg.max_context = std::max(cfg.max_context, context + 1);
  FederationOptions fo;
  fo.model = cfg;
  fo.partition = spec;
  fo.seed = seed;
  fo.transport = transport;
  Federation fed(fo);
  auto rng = named_stream(seed, "comm.prompt");
  std::vector<TokenId> ids(context);
  for (auto& t : ids) t = 1 + static_cast<TokenId>(rng() % (cfg.vocab_size - 1));
  const TokenBatch tb{1, context, ids};
  DecodeBytes out{context, 0, 0};
  for (bool cached : {true, false}) {
    InferenceSession s(fed.client(0), fed.channel(0), cached ? 1 : 2, cached);
    s.prefill(tb, MaskMeta::uniform(context, 0, 1));
    const auto before = fed.client_stats(0).snapshot();
    const TokenId next = 1;
    s.decode_step(std::span<const TokenId>(&next, 1));
    const auto d = fed.client_stats(0).snapshot() - before;
    (cached ? out.cached : out.uncached) = d.total_bytes_sent() + d.total_bytes_received();
    s.end();
  }
  return out;
}

inline nlohmann::json comm_report(const CommSnapshot& run, std::span<const MaskComparison> masks,
                                  std::span<const DecodeBytes> decode) {
  nlohmann::json j;
  j["run"] = run.to_json();
  j["mask"] = nlohmann::json::array();
  for (const auto& m : masks) j["mask"].push_back(m.to_json());
  j["decode"] = nlohmann::json::array();
  for (const auto& d : decode) j["decode"].push_back(d.to_json());
  if (decode.size() >= 2) {
    const auto& a = decode.front();
    const auto& b = decode.back();
    j["decode_scaling"] = {
        {"context_ratio", static_cast<double>(b.context) / static_cast<double>(a.context)},
        {"cached_ratio", static_cast<double>(b.cached) / static_cast<double>(a.cached)},
        {"uncached_ratio", static_cast<double>(b.uncached) / static_cast<double>(a.uncached)},
    };
  }
  return j;
}

// ---------------------------------------------------------------------------
// experiment config

inline constexpr std::uint64_t kConfigVersion = 1;

struct DatasetConfig {
  std::string kind = "cyclic";  // cyclic | random | file
  std::string path;             // kind == file
  CorpusOptions corpus;
  std::size_t num_candidates = 4;
  std::size_t eval_items = 32;
};

struct TrainConfig {
  std::size_t steps = 200;
  std::size_t batch = 8;
  double lr = 0.2;
  std::uint64_t scalar_width = 8;
};

struct PromptConfig {
  std::vector<std::vector<TokenId>> prompts;  // empty: prefixes of the dataset
  std::size_t count = 4;
  std::size_t length = 4;
  bool compare_uncached = false;
};

struct AttackConfig {
  double attack_lr = 0.5;
  std::size_t heldout = 16;
  std::size_t steps = 200;
  std::size_t batch = 8;
  std::vector<std::size_t> ps{1, 2, 3};
  std::vector<double> deltas{0.0, 0.02, 0.05};
};

struct GridConfig {
  std::size_t num_blocks = 7;
  std::vector<std::size_t> ps{1, 2, 3};
  std::vector<std::size_t> qs{1, 2, 3};
  std::size_t steps = 50;
};

struct CommConfig {
  std::size_t mask_batch = 2;
  std::size_t mask_seq = 128;
  std::size_t mask_width = 8;
  std::vector<std::size_t> contexts{128, 512};
};

struct AcceptanceConfig {
  std::optional<double> max_loss_ratio;       // train: final / initial loss
  std::optional<double> min_eval_accuracy;    // eval
  std::optional<double> max_attack_accuracy;  // attack, p >= 1 cells
};

namespace config_detail {

template <class T> struct is_vector : std::false_type {};
template <class T> struct is_vector<std::vector<T>> : std::true_type {};

template <class T>
bool type_ok(const nlohmann::json& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v.is_boolean();
  } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  } else if constexpr (std::is_integral_v<T>) {
    return v.is_number_integer();
  } else if constexpr (std::is_floating_point_v<T>) {
    return v.is_number();
  } else if constexpr (std::is_same_v<T, std::string>) {
    return v.is_string();
  } else if constexpr (is_vector<T>::value) {
    if (!v.is_array()) return false;
    for (const auto& e : v)
      if (!type_ok<typename T::value_type>(e)) return false;
    return true;
  } else {
    static_assert(sizeof(T) == 0, "unsupported config type");
  }
}

// Strict reader: wrong types and unknown keys become messages, never throw.
class Reader {
 public:
  Reader(const nlohmann::json* j, std::string path, std::vector<std::string>* errs)
      : j_(j), path_(std::move(path)), errs_(errs) {}

  bool has(const std::string& key) const { return j_ && j_->contains(key); }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!has(key)) return;
    const auto& v = (*j_)[key];
    if (!type_ok<T>(v)) {
      errs_->push_back(path_ + key + ": wrong type");
      return;
    }
    out = v.template get<T>();
  }

  template <class T>
  void get(const std::string& key, std::optional<T>& out) {
    seen_.insert(key);
    if (!has(key) || (*j_)[key].is_null()) return;
    T v{};
    get(key, v);
    out = v;
  }

  // String field mapped through a parser that throws Error on bad input.
  template <class T, class F>
  void get_enum(const std::string& key, T& out, F parse) {
    std::string s;
    if (!has(key)) {
      seen_.insert(key);
      return;
    }
    get(key, s);
    if (!(*j_)[key].is_string()) return;
    try {
      out = parse(s);
    } catch (const Error& e) {
      errs_->push_back(path_ + key + ": " + e.what());
    }
  }

  Reader child(const std::string& key) {
    seen_.insert(key);
    if (!has(key)) return Reader(nullptr, path_ + key + ".", errs_);
    if (!(*j_)[key].is_object()) {
      errs_->push_back(path_ + key + ": expected an object");
      return Reader(nullptr, path_ + key + ".", errs_);
    }
    return Reader(&(*j_)[key], path_ + key + ".", errs_);
  }

  void finish() const {
    if (!j_) return;
    for (const auto& [k, v] : j_->items())
      if (!seen_.contains(k)) errs_->push_back(path_ + k + ": unknown key");
  }

 private:
  const nlohmann::json* j_;
  std::string path_;
  std::vector<std::string>* errs_;
  std::set<std::string> seen_;
};

}  // namespace config_detail

struct ExperimentConfig {
  std::uint64_t version = kConfigVersion;
  std::uint64_t seed = 0;
  ModelConfig model;
  PartitionSpec partition;
  bool allow_embedding_only = false;
  NoiseConfig noise;
  StrategyConfig strategy;
  GenerationConfig generation;
  PromptConfig prompts;
  TransportKind transport = TransportKind::kLoopback;
  Endpoint endpoint;
  DatasetConfig dataset;
  TrainConfig train;
  AttackConfig attack;
  GridConfig grid;
  CommConfig comm;
  AcceptanceConfig acceptance;
  std::string checkpoint;  // load before eval / generate when set
  std::string out_dir = "runs/default";

  // Every problem in one pass; empty means valid.
  std::vector<std::string> problems() const {
    std::vector<std::string> e;
    auto check = [&](const std::function<void()>& f) {
      try {
        f();
      } catch (const Error& x) {
        e.push_back(x.what());
      }
    };
    if (version != kConfigVersion) e.push_back("version " + std::to_string(version) + " is not supported");
    check([&] { model.validate(); });
    check([&] { partition.validate(model, allow_embedding_only); });
    check([&] { noise.validate(); });
    check([&] { strategy.validate(); });
    check([&] { generation.validate(); });
    if (generation.stop_token && (*generation.stop_token < 0 || static_cast<std::size_t>(*generation.stop_token) >= model.vocab_size))
      e.push_back("generation.stop_token outside the vocabulary");
    if (train.batch == 0) e.push_back("train.batch must be >= 1");
    if (!(train.lr >= 0.0) || !std::isfinite(train.lr)) e.push_back("train.lr must be finite and >= 0");
    check([&] { wire_detail::check_width(train.scalar_width); });
    if (dataset.kind != "cyclic" && dataset.kind != "random" && dataset.kind != "file")
      e.push_back("dataset.kind must be cyclic, random or file");
    if (dataset.kind == "file" && dataset.path.empty()) e.push_back("dataset.path is required for kind file");
    if (dataset.kind != "file") {
      const auto& c = dataset.corpus;
      if (c.num_samples < strategy.num_clients)
        e.push_back("dataset has " + std::to_string(c.num_samples) + " samples for " +
                    std::to_string(strategy.num_clients) + " clients");
      if (c.seq_len < 2 || c.seq_len > model.max_context) e.push_back("dataset.seq_len must be in [2, max_context]");
      if (dataset.kind == "cyclic" && (c.alphabet < 4 || c.first_id < 1 || static_cast<std::size_t>(c.first_id) + c.alphabet > model.vocab_size))
        e.push_back("dataset alphabet does not fit the vocabulary");
      if (dataset.kind == "random" && (c.first_id < 1 || static_cast<std::size_t>(c.first_id) >= model.vocab_size))
        e.push_back("dataset.first_id outside the vocabulary");
    }
    if (dataset.num_candidates < 2) e.push_back("dataset.num_candidates must be >= 2");
    for (const auto& p : prompts.prompts) {
      if (p.empty()) e.push_back("prompts must be non-empty");
      for (TokenId t : p)
        if (t < 0 || static_cast<std::size_t>(t) >= model.vocab_size) e.push_back("prompt id " + std::to_string(t) + " outside the vocabulary");
    }
    if (prompts.prompts.empty() && (prompts.count == 0 || prompts.length == 0)) e.push_back("prompts.count and prompts.length must be >= 1");
    if (!(attack.attack_lr > 0.0)) e.push_back("attack.attack_lr must be > 0");
    if (attack.heldout == 0 || attack.steps == 0 || attack.batch == 0) e.push_back("attack.heldout, steps and batch must be >= 1");
    for (std::size_t p : attack.ps)
      if (p + partition.q >= model.num_blocks) e.push_back("attack p=" + std::to_string(p) + " leaves no server block");
    for (double d : attack.deltas)
      if (!(d >= 0.0)) e.push_back("attack deltas must be >= 0");
    if (grid.ps.empty() || grid.qs.empty()) e.push_back("grid.ps and grid.qs must be non-empty");
    for (auto v : grid.ps)
      if (v == 0) e.push_back("grid.ps entries must be >= 1");
    for (auto v : grid.qs)
      if (v == 0) e.push_back("grid.qs entries must be >= 1");
    if (!grid.ps.empty() && !grid.qs.empty() &&
        *std::max_element(grid.ps.begin(), grid.ps.end()) + *std::max_element(grid.qs.begin(), grid.qs.end()) + 1 > grid.num_blocks)
      e.push_back("grid.num_blocks too small for max(p) + max(q) + 1");
    if (comm.contexts.empty()) e.push_back("comm.contexts must be non-empty");
    for (auto L : comm.contexts)
      if (L == 0) e.push_back("comm.contexts entries must be >= 1");
    check([&] { wire_detail::check_width(comm.mask_width); });
    if (comm.mask_batch == 0 || comm.mask_seq == 0) e.push_back("comm mask shape must be positive");
    if (out_dir.empty()) e.push_back("out_dir must be set");
    return e;
  }

  void validate() const {
    const auto e = problems();
    if (e.empty()) return;
    std::string msg = std::to_string(e.size()) + " problem(s):";
    for (const auto& s : e) msg += "\n  " + s;
    throw Error(ErrorCode::kConfig, msg);
  }

  static ExperimentConfig from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw Error(ErrorCode::kConfig, "config must be an object");
    ExperimentConfig c;
    std::vector<std::string> errs;
    config_detail::Reader r(&j, "", &errs);
    if (!j.contains("version")) errs.push_back("version: required");
    r.get("version", c.version);
    r.get("seed", c.seed);
    r.get("checkpoint", c.checkpoint);
    r.get("out_dir", c.out_dir);
    {
      auto m = r.child("model");
      m.get("vocab_size", c.model.vocab_size);
      m.get("hidden_size", c.model.hidden_size);
      m.get("num_heads", c.model.num_heads);
      m.get("num_blocks", c.model.num_blocks);
      m.get("mlp_hidden", c.model.mlp_hidden);
      m.get("max_context", c.model.max_context);
      m.get("rms_eps", c.model.rms_eps);
      m.get("rope_base", c.model.rope_base);
      auto l = m.child("lora");
      l.get("enabled", c.model.lora.enabled);
      l.get("rank", c.model.lora.rank);
      l.get("alpha", c.model.lora.alpha);
      l.finish();
      m.finish();
    }
    {
      auto p = r.child("partition");
      p.get("p", c.partition.p);
      p.get("k", c.partition.k);
      p.get("q", c.partition.q);
      p.get("allow_embedding_only", c.allow_embedding_only);
      p.finish();
    }
    {
      auto n = r.child("noise");
      n.get("scale", c.noise.scale);
      n.get_enum("target", c.noise.target, parse_noise_target);
      n.get("seed", c.noise.seed);
      n.get("at_inference", c.noise.at_inference);
      n.finish();
    }
    {
      auto s = r.child("strategy");
      s.get_enum("mode", c.strategy.mode, parse_strategy);
      s.get("num_clients", c.strategy.num_clients);
      s.get("sync_interval", c.strategy.sync_interval);
      s.get("weights", c.strategy.weights);
      s.get("average_clients", c.strategy.average_clients);
      std::uint64_t ms = static_cast<std::uint64_t>(c.strategy.barrier_timeout.count());
      s.get("barrier_timeout_ms", ms);
      c.strategy.barrier_timeout = std::chrono::milliseconds(ms);
      s.finish();
    }
    {
      auto g = r.child("generation");
      g.get("max_new_tokens", c.generation.max_new_tokens);
      g.get_enum("mode", c.generation.mode, parse_decode_mode);
      g.get("temperature", c.generation.temperature);
      g.get("stop_token", c.generation.stop_token);
      g.get("seed", c.generation.seed);
      g.get("use_cache", c.generation.use_cache);
      g.finish();
    }
    {
      auto p = r.child("prompts");
      p.get("prompts", c.prompts.prompts);
      p.get("count", c.prompts.count);
      p.get("length", c.prompts.length);
      p.get("compare_uncached", c.prompts.compare_uncached);
      p.finish();
    }
    {
      auto t = r.child("transport");
      t.get_enum("kind", c.transport, parse_transport);
      std::string ep;
      t.get("endpoint", ep);
      if (!ep.empty()) {
        try {
          c.endpoint = Endpoint::parse(ep);
        } catch (const Error& e) {
          errs.push_back(std::string("transport.endpoint: ") + e.what());
        }
      }
      t.finish();
    }
    {
      auto d = r.child("dataset");
      d.get("kind", c.dataset.kind);
      d.get("path", c.dataset.path);
      d.get("num_samples", c.dataset.corpus.num_samples);
      d.get("seq_len", c.dataset.corpus.seq_len);
      d.get("alphabet", c.dataset.corpus.alphabet);
      d.get("first_id", c.dataset.corpus.first_id);
      d.get("seed", c.dataset.corpus.seed);
      d.get("num_candidates", c.dataset.num_candidates);
      d.get("eval_items", c.dataset.eval_items);
      d.finish();
    }
    {
      auto t = r.child("train");
      t.get("steps", c.train.steps);
      t.get("batch", c.train.batch);
      t.get("lr", c.train.lr);
      t.get("scalar_width", c.train.scalar_width);
      t.finish();
    }
    {
      auto a = r.child("attack");
      a.get("attack_lr", c.attack.attack_lr);
      a.get("heldout", c.attack.heldout);
      a.get("steps", c.attack.steps);
      a.get("batch", c.attack.batch);
      a.get("ps", c.attack.ps);
      a.get("deltas", c.attack.deltas);
      a.finish();
    }
    {
      auto g = r.child("grid");
      g.get("num_blocks", c.grid.num_blocks);
      g.get("ps", c.grid.ps);
      g.get("qs", c.grid.qs);
      g.get("steps", c.grid.steps);
      g.finish();
    }
    {
      auto m = r.child("comm");
      m.get("mask_batch", c.comm.mask_batch);
      m.get("mask_seq", c.comm.mask_seq);
      m.get("mask_width", c.comm.mask_width);
      m.get("contexts", c.comm.contexts);
      m.finish();
    }
    {
      auto a = r.child("acceptance");
      a.get("max_loss_ratio", c.acceptance.max_loss_ratio);
      a.get("min_eval_accuracy", c.acceptance.min_eval_accuracy);
      a.get("max_attack_accuracy", c.acceptance.max_attack_accuracy);
      a.finish();
    }
    r.finish();
    for (auto& e : c.problems()) errs.push_back(std::move(e));
    if (!errs.empty()) {
      std::string msg = std::to_string(errs.size()) + " problem(s):";
      for (const auto& s : errs) msg += "\n  " + s;
      throw Error(ErrorCode::kConfig, msg);
    }
    return c;
  }

  static ExperimentConfig load(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw Error(ErrorCode::kConfig, "cannot open config " + path.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(f, nullptr, true, true);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kConfig, path.string() + ": " + e.what());
    }
    return from_json(j);
  }

  // FLSPLIT_ENDPOINT=host:port, FLSPLIT_OUT_DIR=dir.
  void apply_env() {
    if (const char* ep = std::getenv("FLSPLIT_ENDPOINT"); ep && *ep) endpoint = Endpoint::parse(ep);
    if (const char* dir = std::getenv("FLSPLIT_OUT_DIR"); dir && *dir) out_dir = dir;
  }

  nlohmann::json to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {
        {"version", version},
        {"seed", seed},
        {"model",
         {{"vocab_size", model.vocab_size}, {"hidden_size", model.hidden_size}, {"num_heads", model.num_heads},
          {"num_blocks", model.num_blocks}, {"mlp_hidden", model.mlp_hidden}, {"max_context", model.max_context},
          {"rms_eps", model.rms_eps}, {"rope_base", model.rope_base},
          {"lora", {{"enabled", model.lora.enabled}, {"rank", model.lora.rank}, {"alpha", model.lora.alpha}}}}},
        {"partition", {{"p", partition.p}, {"k", partition.k}, {"q", partition.q}, {"allow_embedding_only", allow_embedding_only}}},
        {"noise", {{"scale", noise.scale}, {"target", to_string(noise.target)}, {"seed", noise.seed}, {"at_inference", noise.at_inference}}},
        {"strategy",
         {{"mode", to_string(strategy.mode)}, {"num_clients", strategy.num_clients}, {"sync_interval", strategy.sync_interval},
          {"weights", strategy.weights}, {"average_clients", strategy.average_clients},
          {"barrier_timeout_ms", strategy.barrier_timeout.count()}}},
        {"generation",
         {{"max_new_tokens", generation.max_new_tokens}, {"mode", to_string(generation.mode)},
          {"temperature", generation.temperature},
          {"stop_token", generation.stop_token ? nlohmann::json(*generation.stop_token) : nlohmann::json(nullptr)},
          {"seed", generation.seed}, {"use_cache", generation.use_cache}}},
        {"prompts", {{"prompts", prompts.prompts}, {"count", prompts.count}, {"length", prompts.length}, {"compare_uncached", prompts.compare_uncached}}},
        {"transport", {{"kind", to_string(transport)}, {"endpoint", endpoint.host + ":" + std::to_string(endpoint.port)}}},
        {"dataset",
         {{"kind", dataset.kind}, {"path", dataset.path}, {"num_samples", dataset.corpus.num_samples},
          {"seq_len", dataset.corpus.seq_len}, {"alphabet", dataset.corpus.alphabet}, {"first_id", dataset.corpus.first_id},
          {"seed", dataset.corpus.seed}, {"num_candidates", dataset.num_candidates}, {"eval_items", dataset.eval_items}}},
        {"train", {{"steps", train.steps}, {"batch", train.batch}, {"lr", train.lr}, {"scalar_width", train.scalar_width}}},
        {"attack", {{"attack_lr", attack.attack_lr}, {"heldout", attack.heldout}, {"steps", attack.steps}, {"batch", attack.batch},
                    {"ps", attack.ps}, {"deltas", attack.deltas}}},
        {"grid", {{"num_blocks", grid.num_blocks}, {"ps", grid.ps}, {"qs", grid.qs}, {"steps", grid.steps}}},
        {"comm", {{"mask_batch", comm.mask_batch}, {"mask_seq", comm.mask_seq}, {"mask_width", comm.mask_width}, {"contexts", comm.contexts}}},
        {"acceptance", {{"max_loss_ratio", opt(acceptance.max_loss_ratio)}, {"min_eval_accuracy", opt(acceptance.min_eval_accuracy)},
                        {"max_attack_accuracy", opt(acceptance.max_attack_accuracy)}}},
        {"checkpoint", checkpoint},
        {"out_dir", out_dir},
    };
  }
};

// ---------------------------------------------------------------------------
// data

// {"vocab_size": V, "samples": [{"tokens": [...], "candidates": [...], "answer": a}, ...]}
inline ToyCorpus load_corpus_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::kConfig, "cannot open dataset " + path.string());
  try {
    const auto j = nlohmann::json::parse(f);
    ToyCorpus c;
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    for (const auto& s : j.at("samples")) {
      Sample x;
      x.tokens = s.at("tokens").get<std::vector<TokenId>>();
      if (s.contains("candidates")) x.candidates = s["candidates"].get<std::vector<TokenId>>();
      if (s.contains("answer")) x.answer = s["answer"].get<TokenId>();
      c.samples.push_back(std::move(x));
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfig, path.string() + ": " + e.what());
  }
}

inline ToyCorpus make_dataset(const ExperimentConfig& cfg) {
  ToyCorpus c;
  if (cfg.dataset.kind == "cyclic") c = make_cyclic_corpus(cfg.model.vocab_size, cfg.dataset.corpus);
  else if (cfg.dataset.kind == "random") c = make_random_corpus(cfg.model.vocab_size, cfg.dataset.corpus);
  else c = load_corpus_file(cfg.dataset.path);
  if (c.vocab_size != cfg.model.vocab_size) throw Error(ErrorCode::kConfig, "dataset vocabulary differs from the model's");
  if (c.samples.size() < cfg.strategy.num_clients) throw Error(ErrorCode::kConfig, "fewer samples than clients");
  for (const auto& s : c.samples) {
    if (s.tokens.size() < 2) throw Error(ErrorCode::kConfig, "dataset sequences need at least 2 tokens");
    if (s.tokens.size() > cfg.model.max_context) throw Error(ErrorCode::kConfig, "dataset sequence longer than the context");
  }
  try {
    c.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::kConfig, e.what());
  }
  return c;
}

// Cloze items cut from training sequences: prefix as prompt, next token as
// answer, distractors drawn from ids the corpus uses. Items that already
// carry candidates are kept as they are.
inline std::vector<Sample> make_eval_items(const ToyCorpus& c, std::size_t count, std::size_t num_candidates,
                                           std::uint64_t seed) {
  std::vector<TokenId> pool;
  for (const auto& s : c.samples) pool.insert(pool.end(), s.tokens.begin(), s.tokens.end());
  std::sort(pool.begin(), pool.end());
  pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
  auto rng = named_stream(seed, "eval.cloze");
  std::vector<Sample> out;
  for (std::size_t i = 0; i < c.samples.size() && out.size() < count; ++i) {
    const Sample& s = c.samples[i];
    if (!s.candidates.empty()) {
      out.push_back(s);
      continue;
    }
    const std::size_t cut = 1 + rng() % (s.tokens.size() - 1);
    Sample item;
    item.tokens.assign(s.tokens.begin(), s.tokens.begin() + static_cast<std::ptrdiff_t>(cut));
    item.answer = s.tokens[cut];
    item.candidates = {item.answer};
    const std::size_t want = std::min(num_candidates, pool.size());
    while (item.candidates.size() < want) {
      const TokenId t = pool[rng() % pool.size()];
      if (std::find(item.candidates.begin(), item.candidates.end(), t) == item.candidates.end()) item.candidates.push_back(t);
    }
    std::shuffle(item.candidates.begin(), item.candidates.end(), rng);
    out.push_back(std::move(item));
  }
  return out;
}

// Client i trains on samples i, i + M, i + 2M, ...
inline std::vector<ToyCorpus> shard_corpus(const ToyCorpus& c, std::size_t clients) {
  std::vector<ToyCorpus> out(clients);
  for (auto& s : out) s.vocab_size = c.vocab_size;
  for (std::size_t i = 0; i < c.samples.size(); ++i) out[i % clients].samples.push_back(c.samples[i]);
  return out;
}

// ---------------------------------------------------------------------------
// runs

// Set from a signal handler; data callbacks poll it and abort the run.
inline std::atomic<bool>& interrupt_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitProtocol = 3;
inline constexpr int kExitAcceptance = 4;
inline constexpr int kExitInterrupted = 130;

inline int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::kConfig:
    case ErrorCode::kPartition:
    case ErrorCode::kThreatModel:
    case ErrorCode::kCheckpoint:
      return kExitConfig;
    case ErrorCode::kInterrupted:
      return kExitInterrupted;
    default:
      return kExitProtocol;
  }
}

inline FederationOptions federation_options(const ExperimentConfig& cfg) {
  FederationOptions o;
  o.model = cfg.model;
  o.partition = cfg.partition;
  o.allow_embedding_only = cfg.allow_embedding_only;
  o.seed = cfg.seed;
  o.lr = cfg.train.lr;
  o.noise = cfg.noise;
  o.num_clients = cfg.strategy.num_clients;
  o.transport = cfg.transport;
  o.endpoint = cfg.endpoint;
  o.scalar_width = cfg.train.scalar_width;
  return o;
}

struct TrainedModel {
  SegmentModel a, b, c;  // client 0's A and C, the server's (central) B
};

struct TrainOutcome {
  std::vector<TrainStepRecord> records;
  std::optional<ErrorCode> error;
  std::string error_text;
  CommSnapshot comm;  // all clients
  TrainedModel model;
  std::size_t merges = 0;
  std::vector<HierarchicalResult::Failure> failures;

  // Mean over clients of last loss / first loss.
  std::optional<double> loss_ratio() const {
    std::map<std::uint64_t, std::pair<double, double>> firstlast;
    for (const auto& r : records) {
      auto [it, fresh] = firstlast.try_emplace(r.client_id, r.loss, r.loss);
      if (!fresh) it->second.second = r.loss;
    }
    if (firstlast.empty()) return std::nullopt;
    double s = 0.0;
    for (const auto& [id, fl] : firstlast) s += fl.second / fl.first;
    return s / static_cast<double>(firstlast.size());
  }
};

inline TrainOutcome run_training(const ExperimentConfig& cfg, const ToyCorpus& data, const RecordSink& sink = {}) {
  const auto shards = shard_corpus(data, cfg.strategy.num_clients);
  const std::size_t batch = cfg.train.batch;
  DataFn fn = [&](std::size_t i, std::size_t s) {
    if (interrupt_flag().load()) throw Error(ErrorCode::kInterrupted, "interrupted");
    return corpus_batch(shards[i], s, batch);
  };
  TrainOutcome out;
  auto take = [&](RoundResult r) {
    out.records = std::move(r.records);
    out.error = r.error;
    out.error_text = std::move(r.error_text);
  };
  const auto fo = federation_options(cfg);
  switch (cfg.strategy.mode) {
    case StrategyMode::kSequential: {
      Federation fed(fo);
      take(fed.run_sequential(fn, cfg.train.steps, sink));
      fed.shutdown();
      out.comm = fed.total_client_comm();
      out.model = {fed.client(0).a, fed.server().model(), fed.client(0).c};
      break;
    }
    case StrategyMode::kClientBatch: {
      Federation fed(fo, client_batch_host(cfg.strategy.barrier_timeout));
      take(run_client_batch(fed, fn, cfg.train.steps, sink));
      fed.shutdown();
      out.comm = fed.total_client_comm();
      out.model = {fed.client(0).a, fed.server().model(), fed.client(0).c};
      break;
    }
    case StrategyMode::kServerHierarchical: {
      HierarchicalFederation h(fo, cfg.strategy);
      auto r = h.run(fn, cfg.train.steps, sink);
      out.records = std::move(r.records);
      out.error = r.error;
      out.error_text = r.error_text;
      out.merges = r.merges;
      out.failures = r.failures;
      for (const auto& f : r.failures) {
        if (f.code == ErrorCode::kInterrupted && !out.error) {
          out.error = f.code;
          out.error_text = f.text;
        }
      }
      out.comm = h.total_client_comm();
      out.model = {h.sub(0).client(0).a, h.central(), h.sub(0).client(0).c};
      break;
    }
  }
  return out;
}

// One client, one server, holding the given weights.
inline std::unique_ptr<Federation> inference_federation(const ExperimentConfig& cfg, const TrainedModel* m) {
  auto fo = federation_options(cfg);
  fo.num_clients = 1;
  auto fed = std::make_unique<Federation>(fo);
  if (m) {
    ParameterMap p;
    collect_parameters(m->a, p);
    collect_parameters(m->b, p);
    collect_parameters(m->c, p);
    load_parameters(fed->server().model(), p);
    load_parameters(fed->client(0).a, p);
    load_parameters(fed->client(0).c, p);
  }
  return fed;
}

inline void save_trained(const TrainedModel& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_checkpoint((dir / "server.ckpt").string(), {&m.b});
  save_checkpoint((dir / "client_0.ckpt").string(), {&m.a, &m.c});
}

struct EvalReport {
  std::size_t items = 0;
  double accuracy = 0.0;
  double mean_answer_log_prob = 0.0;  // s(y|x) of the correct answer
  std::vector<std::vector<double>> probabilities;  // per item, candidate order

  nlohmann::json to_json() const {
    return {{"items", items}, {"accuracy", accuracy}, {"accuracy_x100", 100 * accuracy},
            {"mean_answer_log_prob", mean_answer_log_prob}, {"probabilities", probabilities}};
  }
};

inline EvalReport evaluate_cloze(ClientNode& client, Channel& ch, std::span<const Sample> items, bool use_cache,
                                 std::uint64_t first_session = 1000) {
  EvalReport r;
  std::size_t hit = 0;
  std::uint64_t sid = first_session;
  for (const auto& it : items) {
    if (interrupt_flag().load()) throw Error(ErrorCode::kInterrupted, "interrupted");
    InferenceSession s(client, ch, sid++, use_cache);
    const TokenBatch tb{1, it.tokens.size(), it.tokens};
    const Tensor logits = s.prefill(tb, MaskMeta::uniform(it.tokens.size(), 0, 1));
    s.end();
    auto probs = score_single_token(logits.data(), it.candidates);
    const auto best = static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
    hit += it.candidates[best] == it.answer;
    const TokenId ans = it.answer;
    r.mean_answer_log_prob += score_multi_token(client, ch, sid++, it.tokens, std::span<const TokenId>(&ans, 1), use_cache);
    r.probabilities.push_back(std::move(probs));
    ++r.items;
  }
  if (r.items) {
    r.accuracy = static_cast<double>(hit) / static_cast<double>(r.items);
    r.mean_answer_log_prob /= static_cast<double>(r.items);
  }
  return r;
}

inline std::vector<std::vector<TokenId>> make_prompts(const ExperimentConfig& cfg, const ToyCorpus& data) {
  if (!cfg.prompts.prompts.empty()) return cfg.prompts.prompts;
  std::vector<std::vector<TokenId>> out;
  for (std::size_t i = 0; i < cfg.prompts.count; ++i) {
    const auto& t = data.samples[i % data.samples.size()].tokens;
    out.emplace_back(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(std::min(cfg.prompts.length, t.size())));
  }
  return out;
}

inline AttackOptions attack_options(const ExperimentConfig& cfg) {
  AttackOptions o;
  o.model = cfg.model;
  o.p = cfg.partition.p;
  o.q = cfg.partition.q;
  o.delta = cfg.noise.scale;
  o.seed = cfg.seed;
  o.lr = cfg.train.lr;
  o.attack_lr = cfg.attack.attack_lr;
  o.steps = cfg.attack.steps;
  o.batch = cfg.attack.batch;
  o.num_clients = cfg.strategy.num_clients;
  o.heldout = cfg.attack.heldout;
  o.corpus = cfg.dataset.corpus;
  o.transport = cfg.transport;
  return o;
}

// Output files of one run. records.jsonl is a pure function of the config;
// anything wall-clock goes to timing.jsonl.
class RunFiles {
 public:
  explicit RunFiles(std::filesystem::path dir) : dir_(std::move(dir)), t0_(std::chrono::steady_clock::now()) {
    std::filesystem::create_directories(dir_);
  }

  const std::filesystem::path& dir() const { return dir_; }

  void open_records() {
    records_.open(dir_ / "records.jsonl", std::ios::trunc);
    timing_.open(dir_ / "timing.jsonl", std::ios::trunc);
    if (!records_ || !timing_) throw Error(ErrorCode::kConfig, "cannot write to " + dir_.string());
  }

  void record(const TrainStepRecord& r) {
    records_ << r.to_json().dump() << '\n';
    records_.flush();
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    timing_ << nlohmann::json{{"step", r.step}, {"client_id", r.client_id}, {"seconds", sec}}.dump() << '\n';
    timing_.flush();
  }

  void timing(const nlohmann::json& j) {
    if (!timing_.is_open()) timing_.open(dir_ / "timing.jsonl", std::ios::app);
    timing_ << j.dump() << '\n';
    timing_.flush();
  }

  double elapsed() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

  void write(const std::string& name, const nlohmann::json& j) const {
    std::ofstream f(dir_ / name, std::ios::trunc);
    if (!f) throw Error(ErrorCode::kConfig, "cannot write " + (dir_ / name).string());
    f << j.dump(2) << '\n';
  }

  void write_text(const std::string& name, const std::string& s) const {
    std::ofstream f(dir_ / name, std::ios::trunc);
    if (!f) throw Error(ErrorCode::kConfig, "cannot write " + (dir_ / name).string());
    f << s;
  }

 private:
  std::filesystem::path dir_;
  std::ofstream records_;
  std::ofstream timing_;
  std::chrono::steady_clock::time_point t0_;
};

struct RunResult {
  int exit_code = kExitOk;
  nlohmann::json summary;
};

namespace run_detail {

inline nlohmann::json error_json(ErrorCode c, const std::string& text) {
  return {{"code", std::string(to_string(c))}, {"text", text}};
}

inline RunResult finish(RunFiles& files, nlohmann::json summary, std::optional<ErrorCode> err, const std::string& text,
                        bool accepted) {
  RunResult r;
  summary["accepted"] = accepted;
  if (err) {
    summary["error"] = error_json(*err, text);
    r.exit_code = exit_code_for(*err);
  } else if (!accepted) {
    r.exit_code = kExitAcceptance;
  }
  summary["exit_code"] = r.exit_code;
  files.write("summary.json", summary);
  r.summary = std::move(summary);
  return r;
}

// Trains unless steps == 0 or a checkpoint is given; returns the weights to use.
inline std::optional<TrainedModel> prepare_model(const ExperimentConfig& cfg, const ToyCorpus& data, RunFiles& files,
                                                 nlohmann::json& summary, std::optional<ErrorCode>& err,
                                                 std::string& err_text) {
  if (!cfg.checkpoint.empty()) {
    auto fed = inference_federation(cfg, nullptr);
    fed->load(cfg.checkpoint, 0);
    fed->shutdown();
    TrainedModel m{fed->client(0).a, fed->server().model(), fed->client(0).c};
    summary["checkpoint"] = cfg.checkpoint;
    return m;
  }
  if (cfg.train.steps == 0) return std::nullopt;
  files.open_records();
  auto t = run_training(cfg, data, [&](const TrainStepRecord& r) { files.record(r); });
  summary["train"] = {{"steps", cfg.train.steps}, {"records", t.records.size()},
                      {"loss_ratio", t.loss_ratio() ? nlohmann::json(*t.loss_ratio()) : nlohmann::json(nullptr)}};
  if (t.error) {
    err = t.error;
    err_text = t.error_text;
  }
  return std::move(t.model);
}

}  // namespace run_detail

inline RunResult run_train(const ExperimentConfig& cfg) {
  RunFiles files(cfg.out_dir);
  files.write("config.json", cfg.to_json());
  const auto data = make_dataset(cfg);
  files.open_records();
  auto t = run_training(cfg, data, [&](const TrainStepRecord& r) { files.record(r); });
  files.write("comm.json", t.comm.to_json());
  nlohmann::json s;
  s["command"] = "train";
  s["strategy"] = to_string(cfg.strategy.mode);
  s["records"] = t.records.size();
  const auto ratio = t.loss_ratio();
  s["loss_ratio"] = ratio ? nlohmann::json(*ratio) : nlohmann::json(nullptr);
  if (!t.records.empty()) {
    s["initial_loss"] = t.records.front().loss;
    s["final_loss"] = t.records.back().loss;
  }
  s["memory"] = memory_proxy(cfg.model, cfg.partition, cfg.allow_embedding_only).to_json();
  if (cfg.strategy.mode == StrategyMode::kServerHierarchical) {
    s["merges"] = t.merges;
    s["failures"] = nlohmann::json::array();
    for (const auto& f : t.failures)
      s["failures"].push_back({{"sub_server", f.sub_server}, {"step", f.step}, {"code", to_string(f.code)}, {"text", f.text}});
  }
  if (!t.error) save_trained(t.model, files.dir() / "checkpoint");
  files.timing({{"event", "train_done"}, {"seconds", files.elapsed()}});
  const bool ok = !cfg.acceptance.max_loss_ratio || (ratio && *ratio <= *cfg.acceptance.max_loss_ratio);
  return run_detail::finish(files, s, t.error, t.error_text, ok);
}

inline RunResult run_eval(const ExperimentConfig& cfg) {
  RunFiles files(cfg.out_dir);
  files.write("config.json", cfg.to_json());
  const auto data = make_dataset(cfg);
  nlohmann::json s{{"command", "eval"}};
  std::optional<ErrorCode> err;
  std::string text;
  const auto m = run_detail::prepare_model(cfg, data, files, s, err, text);
  if (err) return run_detail::finish(files, s, err, text, false);
  auto fed = inference_federation(cfg, m ? &*m : nullptr);
  const auto items = make_eval_items(data, cfg.dataset.eval_items, cfg.dataset.num_candidates, cfg.seed);
  try {
    const auto rep = evaluate_cloze(fed->client(0), fed->channel(0), items, cfg.generation.use_cache);
    files.write("eval.json", rep.to_json());
    s["accuracy"] = rep.accuracy;
    s["mean_answer_log_prob"] = rep.mean_answer_log_prob;
  } catch (const Error& e) {
    err = e.code();
    text = e.what();
  }
  fed->shutdown();
  const bool ok = err || !cfg.acceptance.min_eval_accuracy ||
                  (s.contains("accuracy") && s["accuracy"].get<double>() >= *cfg.acceptance.min_eval_accuracy);
  return run_detail::finish(files, s, err, text, ok);
}

inline RunResult run_generate(const ExperimentConfig& cfg) {
  RunFiles files(cfg.out_dir);
  files.write("config.json", cfg.to_json());
  const auto data = make_dataset(cfg);
  nlohmann::json s{{"command", "generate"}};
  std::optional<ErrorCode> err;
  std::string text;
  const auto m = run_detail::prepare_model(cfg, data, files, s, err, text);
  if (err) return run_detail::finish(files, s, err, text, false);
  auto fed = inference_federation(cfg, m ? &*m : nullptr);
  const auto prompts = make_prompts(cfg, data);
  auto res = generate(fed->client(0), fed->channel(0), 1, prompts, cfg.generation);
  nlohmann::json out{{"prompts", prompts}, {"result", res.to_json()}};
  if (res.error) {
    err = res.error;
    text = res.error_text;
  }
  bool ok = true;
  if (cfg.prompts.compare_uncached && !err) {
    auto other = cfg.generation;
    other.use_cache = !other.use_cache;
    auto res2 = generate(fed->client(0), fed->channel(0), 2, prompts, other);
    out["compare"] = res2.to_json();
    ok = res2.ok() && res2.tokens == res.tokens;
    out["identical"] = ok;
  }
  fed->shutdown();
  files.write("generate.json", out);
  s["decode_steps"] = res.decode_steps;
  return run_detail::finish(files, s, err, text, ok);
}

inline RunResult run_attack_cmd(const ExperimentConfig& cfg, bool grid) {
  RunFiles files(cfg.out_dir);
  files.write("config.json", cfg.to_json());
  nlohmann::json s{{"command", "attack"}};
  const auto base = attack_options(cfg);
  std::vector<AttackReport> reps;
  if (grid) {
    reps = attack_grid(base, cfg.attack.ps, cfg.attack.deltas);
  } else {
    reps.push_back(run_attack(base));
  }
  nlohmann::json arr = nlohmann::json::array();
  bool ok = true;
  std::optional<ErrorCode> err;
  std::string text;
  for (const auto& r : reps) {
    arr.push_back(r.to_json());
    if (r.error && !err) {
      err = r.error;
      text = r.error_text;
    }
    if (cfg.acceptance.max_attack_accuracy && r.p >= 1 && r.token_accuracy > *cfg.acceptance.max_attack_accuracy) ok = false;
  }
  files.write("attack.json", arr);
  std::ostringstream csv;
  csv << "p,delta,token_accuracy,bleu4,rouge2_f1,train_accuracy\n";
  for (const auto& r : reps)
    csv << r.p << ',' << r.delta << ',' << r.token_accuracy << ',' << r.bleu4 << ',' << r.rouge2_f1 << ','
        << r.train_accuracy << '\n';
  files.write_text("attack.csv", csv.str());
  s["cells"] = reps.size();
  return run_detail::finish(files, s, err, text, ok);
}

inline RunResult run_comm_report(const ExperimentConfig& cfg) {
  RunFiles files(cfg.out_dir);
  files.write("config.json", cfg.to_json());
  const auto data = make_dataset(cfg);
  files.open_records();
  auto t = run_training(cfg, data, [&](const TrainStepRecord& r) { files.record(r); });
  nlohmann::json s{{"command", "comm-report"}};
  if (t.error) return run_detail::finish(files, s, t.error, t.error_text, false);
  const std::vector<MaskComparison> masks{compare_mask_bytes(cfg.comm.mask_batch, cfg.comm.mask_seq, cfg.comm.mask_width)};
  std::vector<DecodeBytes> dec;
  for (auto L : cfg.comm.contexts) dec.push_back(measure_decode_bytes(cfg.model, cfg.partition, cfg.seed, L, cfg.transport));
  auto rep = comm_report(t.comm, masks, dec);
  rep["memory"] = {memory_proxy(cfg.model, cfg.partition, cfg.allow_embedding_only).to_json(),
                   memory_proxy(cfg.model, {1, cfg.model.num_blocks - 2, 1}).to_json()};
  files.write("comm_report.json", rep);
  files.write("comm.json", t.comm.to_json());
  s["mask_ratio"] = rep["mask"][0]["ratio"];
  return run_detail::finish(files, s, std::nullopt, "", true);
}

// Partition sweep: train + eval per (p, q) on a model of grid.num_blocks blocks.
inline RunResult run_grid(const ExperimentConfig& cfg) {
  RunFiles files(cfg.out_dir);
  files.write("config.json", cfg.to_json());
  nlohmann::json s{{"command", "grid"}};
  nlohmann::json cells = nlohmann::json::array();
  std::ostringstream csv;
  csv << "p,k,q,final_loss,loss_ratio,eval_accuracy,client_fraction\n";
  std::optional<ErrorCode> err;
  std::string text;
  for (auto p : cfg.grid.ps) {
    for (auto q : cfg.grid.qs) {
      ExperimentConfig c = cfg;
      c.model.num_blocks = cfg.grid.num_blocks;
      c.partition = {p, cfg.grid.num_blocks - p - q, q};
      c.allow_embedding_only = false;
      c.train.steps = cfg.grid.steps;
      c.validate();
      const auto data = make_dataset(c);
      auto t = run_training(c, data);
      if (t.error) {
        err = t.error;
        text = t.error_text;
        break;
      }
      auto fed = inference_federation(c, &t.model);
      const auto items = make_eval_items(data, c.dataset.eval_items, c.dataset.num_candidates, c.seed);
      EvalReport ev;
      try {
        ev = evaluate_cloze(fed->client(0), fed->channel(0), items, true);
      } catch (const Error& e) {
        err = e.code();
        text = e.what();
      }
      fed->shutdown();
      if (err) break;
      const auto mem = memory_proxy(c.model, c.partition);
      const double final_loss = t.records.empty() ? 0.0 : t.records.back().loss;
      const double ratio = t.loss_ratio().value_or(1.0);
      cells.push_back({{"p", p}, {"k", c.partition.k}, {"q", q}, {"final_loss", final_loss}, {"loss_ratio", ratio},
                       {"eval_accuracy", ev.accuracy}, {"client_fraction", mem.client_fraction()}});
      csv << p << ',' << c.partition.k << ',' << q << ',' << final_loss << ',' << ratio << ',' << ev.accuracy << ','
          << mem.client_fraction() << '\n';
      files.timing({{"event", "grid_cell"}, {"p", p}, {"q", q}, {"seconds", files.elapsed()}});
    }
    if (err) break;
  }
  nlohmann::json table = nlohmann::json::array();
  for (auto p : cfg.grid.ps) {
    nlohmann::json row = nlohmann::json::array();
    for (const auto& cell : cells)
      if (cell["p"] == p) row.push_back(cell["eval_accuracy"]);
    table.push_back(row);
  }
  files.write("grid.json", {{"num_blocks", cfg.grid.num_blocks}, {"ps", cfg.grid.ps}, {"qs", cfg.grid.qs},
                            {"cells", cells}, {"eval_accuracy_table", table}});
  files.write_text("grid.csv", csv.str());
  s["cells"] = cells.size();
  return run_detail::finish(files, s, err, text, true);
}

}  // namespace flsplit
