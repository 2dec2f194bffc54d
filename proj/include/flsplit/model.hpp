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

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "flsplit/mask.hpp"
#include "flsplit/ops.hpp"
#include "flsplit/tensor.hpp"

namespace flsplit {

struct LoraConfig {
  bool enabled = true;
  std::size_t rank = 8;
  double alpha = 16.0;
};

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t hidden_size = 64;
  std::size_t num_heads = 4;
  std::size_t num_blocks = 6;
  std::size_t mlp_hidden = 172;
  std::size_t max_context = 128;
  double rms_eps = 1e-6;
  double rope_base = 10000.0;
  LoraConfig lora;

  std::size_t head_dim() const { return hidden_size / num_heads; }

  void validate() const {
    if (vocab_size == 0 || hidden_size == 0 || num_heads == 0 || mlp_hidden == 0 || max_context == 0) {
      throw Error(ErrorCode::kConfig, "model dimensions must be positive");
    }
    if (hidden_size % num_heads != 0) throw Error(ErrorCode::kConfig, "hidden_size must be divisible by num_heads");
    if (head_dim() % 2 != 0) throw Error(ErrorCode::kConfig, "head dim must be even");
    if (num_blocks < 3) throw Error(ErrorCode::kConfig, "num_blocks must be >= 3");
    if (!(rms_eps > 0.0)) throw Error(ErrorCode::kConfig, "rms_eps must be positive");
    if (lora.enabled && (lora.rank == 0 || !(lora.alpha > 0.0))) {
      throw Error(ErrorCode::kConfig, "lora rank and alpha must be positive");
    }
  }
};

// Block counts held by the client input segment (p), the server (k) and the
// client output segment (q).
struct PartitionSpec {
  std::size_t p = 1;
  std::size_t k = 4;
  std::size_t q = 1;

  // allow_embedding_only admits p == 0, where the client keeps only the
  // embedding table. Used by the inversion-attack baseline.
  void validate(const ModelConfig& cfg, bool allow_embedding_only = false) const {
    if ((p == 0 && !allow_embedding_only) || k == 0 || q == 0) {
      throw Error(ErrorCode::kPartition, "every segment needs at least one block");
    }
    if (p + k + q != cfg.num_blocks) {
      throw Error(ErrorCode::kPartition, "p+k+q=" + std::to_string(p + k + q) + " but model has " +
                                             std::to_string(cfg.num_blocks) + " blocks");
    }
  }

  friend bool operator==(const PartitionSpec&, const PartitionSpec&) = default;
};

// Every valid (p, k, q) for a model of n blocks.
inline std::vector<PartitionSpec> all_partitions(std::size_t n) {
  std::vector<PartitionSpec> out;
  for (std::size_t p = 1; p + 2 <= n; ++p)
    for (std::size_t q = 1; p + q + 1 <= n; ++q) out.push_back({p, n - p - q, q});
  return out;
}

enum class TrainMode {
  kLora,  // only adapter matrices receive gradients
  kFull,  // every parameter receives gradients
};

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  bool adapter = false;
};

inline Param make_param(std::string name, Tensor value, bool adapter = false) {
  Tensor grad(value.shape());
  return Param{std::move(name), std::move(value), std::move(grad), adapter};
}

// ---------------------------------------------------------------------------

// y = x W^T + (alpha / r) (x A^T) B^T, with A [r x in] and B [out x r].
struct Linear {
  Param weight;
  std::optional<Param> lora_a;
  std::optional<Param> lora_b;
  double lora_scaling = 0.0;

  struct Tape {
    Tensor x;
    Tensor xa;
  };

  static Linear create(const std::string& name, std::size_t in, std::size_t out, std::uint64_t seed,
                       const LoraConfig* lora) {
    Linear l;
    auto rng = named_stream(seed, name + ".weight");
    l.weight = make_param(name + ".weight", random_normal({out, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
    if (lora != nullptr && lora->enabled) {
      auto arng = named_stream(seed, name + ".lora_a");
      l.lora_a = make_param(name + ".lora_a",
                            random_normal({lora->rank, in}, 1.0 / std::sqrt(static_cast<double>(in)), arng), true);
      l.lora_b = make_param(name + ".lora_b", Tensor({out, lora->rank}), true);
      l.lora_scaling = lora->alpha / static_cast<double>(lora->rank);
    }
    return l;
  }

  Tensor forward(const Tensor& x, Tape* tape) const {
    Tensor y = linear(x, weight.value);
    if (lora_a) {
      Tensor xa = linear(x, lora_a->value);
      Tensor delta = linear(xa, lora_b->value);
      axpy(lora_scaling, delta, y);
      if (tape) tape->xa = std::move(xa);
    }
    if (tape) tape->x = x;
    return y;
  }

  Tensor backward(const Tensor& dy, const Tape& tape, TrainMode mode) {
    Tensor dx = linear_backward_input(dy, weight.value);
    if (mode == TrainMode::kFull) linear_backward_weight_acc(dy, tape.x, weight.grad);
    if (lora_a) {
      // d(xa) = s * dy B ; dB += s * dy^T xa ; dA += d(xa)^T x
      Tensor dxa = linear_backward_input(dy, lora_b->value);
      for (auto& v : dxa.data()) v *= lora_scaling;
      Tensor dy_scaled = dy;
      for (auto& v : dy_scaled.data()) v *= lora_scaling;
      linear_backward_weight_acc(dy_scaled, tape.xa, lora_b->grad);
      linear_backward_weight_acc(dxa, tape.x, lora_a->grad);
      axpy(1.0, linear_backward_input(dxa, lora_a->value), dx);
    }
    return dx;
  }

  template <class F>
  void visit(F&& f) {
    f(weight);
    if (lora_a) f(*lora_a);
    if (lora_b) f(*lora_b);
  }
};

struct RmsNormLayer {
  Param weight;

  static RmsNormLayer create(const std::string& name, std::size_t d) {
    return RmsNormLayer{make_param(name + ".weight", Tensor({d}, 1.0))};
  }
};

// ---------------------------------------------------------------------------

// Keys/values of one block, [b, h, t, dh], already rotated.
struct BlockCache {
  Tensor keys;
  Tensor values;

  std::size_t length() const { return keys.rank() == 4 ? keys.dim(2) : 0; }

  void append(const Tensor& k, const Tensor& v) {
    if (length() == 0) {
      keys = k;
      values = v;
      return;
    }
    if (k.dim(0) != keys.dim(0) || k.dim(1) != keys.dim(1) || k.dim(3) != keys.dim(3)) {
      throw Error(ErrorCode::kProtocol, "cache append with mismatched batch/heads");
    }
    keys = append_seq(keys, k);
    values = append_seq(values, v);
  }

 private:
  static Tensor append_seq(const Tensor& a, const Tensor& b) {
    const std::size_t bh = a.dim(0) * a.dim(1), ta = a.dim(2), tb = b.dim(2), dh = a.dim(3);
    Tensor out({a.dim(0), a.dim(1), ta + tb, dh});
    for (std::size_t i = 0; i < bh; ++i) {
      std::copy_n(&a[i * ta * dh], ta * dh, &out[i * (ta + tb) * dh]);
      std::copy_n(&b[i * tb * dh], tb * dh, &out[(i * (ta + tb) + ta) * dh]);
    }
    return out;
  }
};

// Per-segment key/value store for one generation session.
struct KVCache {
  std::vector<BlockCache> blocks;
  std::vector<std::size_t> pad_lens{0};
  std::size_t batch = 0;

  std::size_t length() const { return blocks.empty() ? filled_ : blocks.front().length(); }
  bool empty() const { return length() == 0; }

  // Meta for attending over the cached prefix plus n_new fresh positions.
  MaskMeta meta_after(std::size_t n_new) const {
    MaskMeta m{length() + n_new, batch, pad_lens};
    return m;
  }

  void clear() {
    blocks.clear();
    filled_ = 0;
    batch = 0;
    pad_lens = {0};
  }

  // Segments without blocks still need to track length.
  void advance_without_blocks(std::size_t n) { filled_ += n; }

 private:
  std::size_t filled_ = 0;
};

struct BlockTape {
  Tensor x;
  Tensor n1;
  Linear::Tape q, k, v, o;
  CausalAttentionResult attn;
  Tensor h2;
  Tensor n2;
  Linear::Tape gate, up, down;
  Tensor g;
  Tensor u;
};

struct TransformerBlock {
  RmsNormLayer attn_norm;
  Linear q_proj, k_proj, v_proj, o_proj;
  RmsNormLayer mlp_norm;
  Linear gate_proj, up_proj, down_proj;

  static TransformerBlock create(const ModelConfig& cfg, std::size_t index, std::uint64_t seed) {
    const std::string p = "blocks." + std::to_string(index);
    const std::size_t d = cfg.hidden_size, m = cfg.mlp_hidden;
    const LoraConfig* lora = cfg.lora.enabled ? &cfg.lora : nullptr;
    TransformerBlock b;
    b.attn_norm = RmsNormLayer::create(p + ".attn_norm", d);
    b.q_proj = Linear::create(p + ".attn.q", d, d, seed, lora);
    b.k_proj = Linear::create(p + ".attn.k", d, d, seed, lora);
    b.v_proj = Linear::create(p + ".attn.v", d, d, seed, lora);
    b.o_proj = Linear::create(p + ".attn.o", d, d, seed, lora);
    b.mlp_norm = RmsNormLayer::create(p + ".mlp_norm", d);
    b.gate_proj = Linear::create(p + ".mlp.gate", d, m, seed, nullptr);
    b.up_proj = Linear::create(p + ".mlp.up", d, m, seed, nullptr);
    b.down_proj = Linear::create(p + ".mlp.down", m, d, seed, nullptr);
    return b;
  }

  // h2 = x + Attn(RMSNorm(x));  h4 = h2 + W_down[silu(W_gate n2) * (W_up n2)],  n2 = RMSNorm(h2)
  Tensor forward(const ModelConfig& cfg, const Tensor& x, const MaskMeta& meta, std::span<const std::size_t> positions,
                 BlockCache* cache, BlockTape* tape) const {
    const std::size_t heads = cfg.num_heads;
    Tensor n1 = rms_norm(x, attn_norm.weight.value, cfg.rms_eps);
    Tensor q = split_heads(q_proj.forward(n1, tape ? &tape->q : nullptr), heads);
    Tensor k = split_heads(k_proj.forward(n1, tape ? &tape->k : nullptr), heads);
    Tensor v = split_heads(v_proj.forward(n1, tape ? &tape->v : nullptr), heads);
    const AttentionOptions opts{cfg.rope_base, cfg.max_context};
    Tensor attn_out;
    if (cache != nullptr) {
      check_positions(positions, cache->length() + k.dim(2), cfg.max_context);
      apply_rope(q, positions, cfg.rope_base);
      apply_rope(k, positions, cfg.rope_base);
      cache->append(k, v);
      attn_out = attention_core(q, cache->keys, cache->values, meta, positions).out;
    } else {
      auto r = causal_attention(q, k, v, meta, positions, opts);
      attn_out = r.out;
      if (tape) tape->attn = std::move(r);
    }
    Tensor h2 = add(x, o_proj.forward(merge_heads(attn_out), tape ? &tape->o : nullptr));
    Tensor n2 = rms_norm(h2, mlp_norm.weight.value, cfg.rms_eps);
    Tensor g = gate_proj.forward(n2, tape ? &tape->gate : nullptr);
    Tensor u = up_proj.forward(n2, tape ? &tape->up : nullptr);
    Tensor act = silu(g);
    for (std::size_t i = 0; i < act.size(); ++i) act[i] *= u[i];
    Tensor h4 = add(h2, down_proj.forward(act, tape ? &tape->down : nullptr));
    if (tape) {
      tape->x = x;
      tape->n1 = std::move(n1);
      tape->h2 = std::move(h2);
      tape->n2 = std::move(n2);
      tape->g = std::move(g);
      tape->u = std::move(u);
    }
    return h4;
  }

  Tensor backward(const ModelConfig& cfg, const Tensor& dh4, const BlockTape& tape, TrainMode mode) {
    const bool full = mode == TrainMode::kFull;
    // MLP branch
    Tensor dact = down_proj.backward(dh4, tape.down, mode);
    Tensor sg = silu(tape.g);
    Tensor dg_pre(tape.g.shape()), du(tape.u.shape());
    for (std::size_t i = 0; i < dact.size(); ++i) {
      dg_pre[i] = dact[i] * tape.u[i];
      du[i] = dact[i] * sg[i];
    }
    Tensor dg = silu_backward(tape.g, dg_pre);
    Tensor dn2 = gate_proj.backward(dg, tape.gate, mode);
    axpy(1.0, up_proj.backward(du, tape.up, mode), dn2);
    auto n2g = rms_norm_backward(tape.h2, mlp_norm.weight.value, cfg.rms_eps, dn2);
    if (full) axpy(1.0, n2g.dweight, mlp_norm.weight.grad);
    Tensor dh2 = add(dh4, n2g.dx);
    // attention branch
    Tensor dattn = split_heads(o_proj.backward(dh2, tape.o, mode), cfg.num_heads);
    auto ag = causal_attention_backward(tape.attn, dattn);
    Tensor dn1 = q_proj.backward(merge_heads(ag.dq), tape.q, mode);
    axpy(1.0, k_proj.backward(merge_heads(ag.dk), tape.k, mode), dn1);
    axpy(1.0, v_proj.backward(merge_heads(ag.dv), tape.v, mode), dn1);
    auto n1g = rms_norm_backward(tape.x, attn_norm.weight.value, cfg.rms_eps, dn1);
    if (full) axpy(1.0, n1g.dweight, attn_norm.weight.grad);
    return add(dh2, n1g.dx);
  }

  template <class F>
  void visit(F&& f) {
    f(attn_norm.weight);
    q_proj.visit(f);
    k_proj.visit(f);
    v_proj.visit(f);
    o_proj.visit(f);
    f(mlp_norm.weight);
    gate_proj.visit(f);
    up_proj.visit(f);
    down_proj.visit(f);
  }
};

// ---------------------------------------------------------------------------

struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<TokenId> ids;  // row-major [batch, seq]

  std::span<const TokenId> row(std::size_t b) const { return std::span<const TokenId>(ids).subspan(b * seq, seq); }
};

enum class SegmentRole { kInput, kServer, kOutput, kFull };

inline std::string_view to_string(SegmentRole r) {
  switch (r) {
    case SegmentRole::kInput: return "A";
    case SegmentRole::kServer: return "B";
    case SegmentRole::kOutput: return "C";
    case SegmentRole::kFull: return "full";
  }
  return "?";
}

using SegmentInput = std::variant<TokenBatch, Tensor>;

struct ForwardOptions {
  bool record_tape = true;       // ignored when a cache is supplied
  bool logits_last_only = false;  // output segments: head on the final position only
};

struct SegmentGrads {
  Tensor input_grad;                    // empty for token-input segments
  std::vector<Tensor> param_grads;      // aligned with SegmentModel::trainable()
  std::vector<Tensor> block_input_grads;  // gradient at the input of each local block
  Tensor head_input_grad;               // gradient at the final-norm input (output segments)
};

// A contiguous slice of the transformer: optional embedding, blocks
// [first_block, first_block + blocks.size()), optional final norm and head.
class SegmentModel {
 public:
  SegmentModel() = default;

  static SegmentModel build(const ModelConfig& cfg, SegmentRole role, std::size_t first_block,
                            std::size_t num_blocks, std::uint64_t seed, TrainMode mode = TrainMode::kLora) {
    SegmentModel s;
    s.cfg_ = cfg;
    s.role_ = role;
    s.first_block_ = first_block;
    s.mode_ = mode;
    if (role == SegmentRole::kInput || role == SegmentRole::kFull) {
      auto rng = named_stream(seed, "embed.weight");
      s.embed_ = make_param("embed.weight", random_normal({cfg.vocab_size, cfg.hidden_size}, 1.0, rng));
    }
    for (std::size_t i = 0; i < num_blocks; ++i) s.blocks_.push_back(TransformerBlock::create(cfg, first_block + i, seed));
    if (role == SegmentRole::kOutput || role == SegmentRole::kFull) {
      s.final_norm_ = RmsNormLayer::create("final_norm", cfg.hidden_size);
      s.head_ = Linear::create("head", cfg.hidden_size, cfg.vocab_size, seed, nullptr);
    }
    return s;
  }

  const ModelConfig& config() const { return cfg_; }
  SegmentRole role() const { return role_; }
  TrainMode mode() const { return mode_; }
  std::size_t first_block() const { return first_block_; }
  std::size_t num_blocks() const { return blocks_.size(); }
  bool takes_tokens() const { return embed_.has_value(); }
  bool has_head() const { return head_.has_value(); }
  bool has_tape() const { return tape_.has_value(); }
  void clear_tape() { tape_.reset(); }

  TransformerBlock& block(std::size_t i) { return blocks_.at(i); }
  const TransformerBlock& block(std::size_t i) const { return blocks_.at(i); }

  KVCache make_cache() const {
    KVCache c;
    c.blocks.resize(blocks_.size());
    return c;
  }

  // Role A returns h_A, role B returns h_B, role C / full return logits.
  // With a cache, new keys/values are appended per block and meta must
  // describe the full key range (cached prefix + new positions).
  Tensor forward(const SegmentInput& input, const MaskMeta& meta, std::span<const std::size_t> positions,
                 KVCache* cache = nullptr, ForwardOptions opts = {}) {
    const bool record = cache == nullptr && opts.record_tape;
    std::optional<Tape> tape;
    if (record) tape.emplace();
    Tensor h;
    if (const auto* tokens = std::get_if<TokenBatch>(&input)) {
      if (!embed_) throw Error(ErrorCode::kDimension, "segment " + std::string(to_string(role_)) + " takes hidden states");
      h = embed(*tokens);
      if (tape) tape->tokens = *tokens;
    } else {
      if (embed_) throw Error(ErrorCode::kDimension, "segment " + std::string(to_string(role_)) + " takes token ids");
      h = std::get<Tensor>(input);
      if (h.rank() != 3 || h.dim(2) != cfg_.hidden_size) {
        throw Error(ErrorCode::kDimension, "hidden input " + shape_str(h.shape()) + " for hidden size " +
                                               std::to_string(cfg_.hidden_size));
      }
    }
    if (positions.size() != h.dim(1)) throw Error(ErrorCode::kDimension, "positions length != sequence length");
    if (cache != nullptr) {
      if (cache->blocks.size() != blocks_.size()) throw Error(ErrorCode::kProtocol, "cache built for another segment");
      if (cache->empty()) {
        cache->batch = meta.batch;
        cache->pad_lens = meta.pad_lens;
      }
      if (meta.seq_len != cache->length() + h.dim(1)) {
        throw Error(ErrorCode::kProtocol, "cache length " + std::to_string(cache->length()) +
                                              " inconsistent with mask seq_len " + std::to_string(meta.seq_len));
      }
    }
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      BlockTape* bt = nullptr;
      if (tape) bt = &tape->blocks.emplace_back();
      h = blocks_[i].forward(cfg_, h, meta, positions, cache ? &cache->blocks[i] : nullptr, bt);
    }
    if (cache != nullptr && blocks_.empty()) cache->advance_without_blocks(h.dim(1));
    if (!head_) {
      if (tape) {
        tape->output_shape = h.shape();
        tape_ = std::move(tape);
      }
      return h;
    }
    if (opts.logits_last_only && !record) h = last_position(h);
    Tensor normed = rms_norm(h, final_norm_->weight.value, cfg_.rms_eps);
    Linear::Tape* head_tape = tape ? &tape->head : nullptr;
    Tensor logits = head_->forward(normed, head_tape);
    if (tape) {
      tape->head_in = std::move(h);
      tape->output_shape = logits.shape();
      tape_ = std::move(tape);
    }
    return logits;
  }

  // Consumes the tape from the last recording forward.
  SegmentGrads backward(const Tensor& upstream) {
    if (!tape_) throw Error(ErrorCode::kProtocolOrder, "backward without a recorded forward");
    Tape tape = std::move(*tape_);
    tape_.reset();
    if (upstream.shape() != tape.output_shape) {
      throw Error(ErrorCode::kDimension, "upstream grad " + shape_str(upstream.shape()) + " vs output " +
                                             shape_str(tape.output_shape));
    }
    zero_grad();
    SegmentGrads out;
    Tensor g = upstream;
    if (head_) {
      Tensor dnormed = head_->backward(g, tape.head, mode_);
      auto ng = rms_norm_backward(tape.head_in, final_norm_->weight.value, cfg_.rms_eps, dnormed);
      if (mode_ == TrainMode::kFull) axpy(1.0, ng.dweight, final_norm_->weight.grad);
      g = std::move(ng.dx);
      out.head_input_grad = g;
    }
    out.block_input_grads.resize(blocks_.size());
    for (std::size_t i = blocks_.size(); i-- > 0;) {
      g = blocks_[i].backward(cfg_, g, tape.blocks[i], mode_);
      out.block_input_grads[i] = g;
    }
    if (embed_) {
      if (mode_ == TrainMode::kFull) {
        const std::size_t d = cfg_.hidden_size;
        for (std::size_t r = 0; r < tape.tokens.ids.size(); ++r) {
          const auto id = static_cast<std::size_t>(tape.tokens.ids[r]);
          for (std::size_t j = 0; j < d; ++j) embed_->grad[id * d + j] += g[r * d + j];
        }
      }
    } else {
      out.input_grad = std::move(g);
    }
    for (Param* p : trainable()) out.param_grads.push_back(p->grad);
    return out;
  }

  template <class F>
  void visit_params(F&& f) {
    if (embed_) f(*embed_);
    for (auto& b : blocks_) b.visit(f);
    if (final_norm_) f(final_norm_->weight);
    if (head_) head_->visit(f);
  }

  template <class F>
  void visit_params(F&& f) const {
    const_cast<SegmentModel*>(this)->visit_params([&](Param& p) { f(static_cast<const Param&>(p)); });
  }

  std::vector<Param*> trainable() {
    std::vector<Param*> out;
    visit_params([&](Param& p) {
      if (mode_ == TrainMode::kFull || p.adapter) out.push_back(&p);
    });
    return out;
  }

  std::size_t parameter_count(bool adapters_only = false) const {
    std::size_t n = 0;
    visit_params([&](const Param& p) {
      if (!adapters_only || p.adapter) n += p.value.size();
    });
    return n;
  }

  void zero_grad() {
    visit_params([](Param& p) { p.grad.fill(0.0); });
  }

  Param* find(const std::string& name) {
    Param* hit = nullptr;
    visit_params([&](Param& p) {
      if (p.name == name) hit = &p;
    });
    return hit;
  }

 private:
  struct Tape {
    TokenBatch tokens;
    std::vector<BlockTape> blocks;
    Tensor head_in;
    Linear::Tape head;
    Shape output_shape;
  };

  Tensor embed(const TokenBatch& tokens) const {
    const std::size_t d = cfg_.hidden_size;
    if (tokens.ids.size() != tokens.batch * tokens.seq) throw Error(ErrorCode::kDimension, "token batch size mismatch");
    Tensor h({tokens.batch, tokens.seq, d});
    for (std::size_t r = 0; r < tokens.ids.size(); ++r) {
      const TokenId id = tokens.ids[r];
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
        throw Error(ErrorCode::kIdOutOfRange, "token id " + std::to_string(id));
      }
      std::copy_n(&embed_->value[static_cast<std::size_t>(id) * d], d, &h[r * d]);
    }
    return h;
  }

  static Tensor last_position(const Tensor& h) {
    const std::size_t b = h.dim(0), s = h.dim(1), d = h.dim(2);
    Tensor out({b, 1, d});
    for (std::size_t bi = 0; bi < b; ++bi) std::copy_n(&h[(bi * s + s - 1) * d], d, &out[bi * d]);
    return out;
  }

  ModelConfig cfg_;
  SegmentRole role_ = SegmentRole::kFull;
  std::size_t first_block_ = 0;
  TrainMode mode_ = TrainMode::kLora;
  std::optional<Param> embed_;
  std::vector<TransformerBlock> blocks_;
  std::optional<RmsNormLayer> final_norm_;
  std::optional<Linear> head_;
  std::optional<Tape> tape_;
};

struct PartitionedModel {
  SegmentModel a;
  SegmentModel b;
  SegmentModel c;
};

inline SegmentModel build_monolithic(const ModelConfig& cfg, std::uint64_t seed, TrainMode mode = TrainMode::kLora) {
  cfg.validate();
  return SegmentModel::build(cfg, SegmentRole::kFull, 0, cfg.num_blocks, seed, mode);
}

inline PartitionedModel build_partitioned(const ModelConfig& cfg, const PartitionSpec& spec, std::uint64_t seed,
                                          TrainMode mode = TrainMode::kLora, bool allow_embedding_only = false) {
  cfg.validate();
  spec.validate(cfg, allow_embedding_only);
  return PartitionedModel{
      SegmentModel::build(cfg, SegmentRole::kInput, 0, spec.p, seed, mode),
      SegmentModel::build(cfg, SegmentRole::kServer, spec.p, spec.k, seed, mode),
      SegmentModel::build(cfg, SegmentRole::kOutput, spec.p + spec.k, spec.q, seed, mode),
  };
}

inline Tensor segment_forward(SegmentModel& seg, const SegmentInput& input, const MaskMeta& meta,
                              std::span<const std::size_t> positions, KVCache* cache = nullptr,
                              ForwardOptions opts = {}) {
  return seg.forward(input, meta, positions, cache, opts);
}

inline SegmentGrads segment_backward(SegmentModel& seg, const Tensor& upstream) { return seg.backward(upstream); }

// Plain gradient descent on the segment's trainable parameters.
inline void apply_lora_step(SegmentModel& seg, std::span<const Tensor> grads, double lr) {
  auto params = seg.trainable();
  if (grads.size() != params.size()) throw Error(ErrorCode::kDimension, "gradient list does not match adapters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(params[i]->value, grads[i], params[i]->name);
    if (lr == 0.0) continue;
    auto v = params[i]->value.data();
    for (std::size_t j = 0; j < v.size(); ++j) v[j] -= lr * grads[i][j];
  }
}

inline double grad_norm(std::span<const Tensor> grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (double v : g.data()) s += v * v;
  return std::sqrt(s);
}

// Weighted average of trainable parameters; frozen parameters must agree
// bit-for-bit across inputs. Each merged value is x0 + sum_i (w_i/W)(x_i - x0),
// which returns x0 exactly when all inputs agree.
inline SegmentModel fedavg_merge(std::span<const SegmentModel* const> models, std::span<const double> weights) {
  if (models.empty()) throw Error(ErrorCode::kMerge, "nothing to merge");
  if (weights.size() != models.size()) throw Error(ErrorCode::kMerge, "weights length != model count");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw Error(ErrorCode::kMerge, "weights must be non-negative");
    total += w;
  }
  if (!(total > 0.0)) throw Error(ErrorCode::kMerge, "weights must sum to a positive value");
  SegmentModel merged = *models.front();
  merged.clear_tape();
  std::vector<std::vector<const Param*>> sources(models.size());
  for (std::size_t m = 0; m < models.size(); ++m) {
    models[m]->visit_params([&](const Param& p) { sources[m].push_back(&p); });
    if (sources[m].size() != sources[0].size()) throw Error(ErrorCode::kMerge, "architectures differ");
  }
  std::size_t idx = 0;
  merged.visit_params([&](Param& dst) {
    const bool train = merged.mode() == TrainMode::kFull || dst.adapter;
    for (std::size_t m = 0; m < models.size(); ++m) {
      const Param* src = sources[m][idx];
      if (src->name != dst.name || src->value.shape() != dst.value.shape()) {
        throw Error(ErrorCode::kMerge, "parameter mismatch at " + dst.name);
      }
      if (!train && src->value != dst.value) {
        throw Error(ErrorCode::kConsistency, "frozen parameter " + dst.name + " differs across models");
      }
    }
    if (train) {
      const Tensor& x0 = sources[0][idx]->value;
      for (std::size_t j = 0; j < dst.value.size(); ++j) {
        double acc = x0[j];
        for (std::size_t m = 1; m < models.size(); ++m) acc += (weights[m] / total) * (sources[m][idx]->value[j] - x0[j]);
        dst.value[j] = acc;
      }
    }
    dst.grad.fill(0.0);
    ++idx;
  });
  return merged;
}

inline SegmentModel fedavg_merge(std::span<const SegmentModel> models, std::span<const double> weights) {
  std::vector<const SegmentModel*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  return fedavg_merge(std::span<const SegmentModel* const>(ptrs), weights);
}

// Copies trainable values from src into dst (same architecture).
inline void copy_trainable(const SegmentModel& src, SegmentModel& dst) {
  std::vector<const Param*> from;
  src.visit_params([&](const Param& p) { from.push_back(&p); });
  std::size_t i = 0;
  dst.visit_params([&](Param& p) {
    if (i >= from.size() || from[i]->name != p.name) throw Error(ErrorCode::kMerge, "architectures differ");
    if (dst.mode() == TrainMode::kFull || p.adapter) p.value = from[i]->value;
    ++i;
  });
}

}  // namespace flsplit
