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

// Honest-but-curious server: while serving a two-client federation it fits a
// reconstruction decoder on the colluding client's (h_A, plaintext) pairs,
// then decodes the honest client's hidden states.

#include <map>
#include <mutex>
#include <optional>
#include <vector>

#include "flsplit/corpus.hpp"
#include "flsplit/metrics.hpp"
#include "flsplit/training.hpp"

namespace flsplit {

// Same depth as the client input segment, fresh weights, no adapters.
class AttackModel {
 public:
  AttackModel(const ModelConfig& cfg, std::size_t p, std::uint64_t seed) {
    ModelConfig c = cfg;
    c.lora.enabled = false;
    model_ = SegmentModel::build(c, SegmentRole::kOutput, 0, p, seed, TrainMode::kFull);
  }

  SegmentModel& model() { return model_; }

  // One SGD step of per-position cross-entropy against the input ids.
  double train_step(const HiddenStateMsg& h, std::span<const TokenId> ids, double lr) {
    const auto targets = supervision(h.mask_meta, ids);
    auto ce = softmax_cross_entropy(model_.forward(h.tensor, h.mask_meta, h.positions), targets);
    auto g = model_.backward(ce.grad);
    apply_lora_step(model_, g.param_grads, lr);
    return ce.loss;
  }

  // Argmax id per position, [batch * seq].
  std::vector<TokenId> decode(const Tensor& h, const MaskMeta& meta, std::span<const std::size_t> positions) {
    const Tensor logits = model_.forward(h, meta, positions, nullptr, {false, false});
    const std::size_t v = logits.cols();
    std::vector<TokenId> out(logits.rows());
    for (std::size_t r = 0; r < out.size(); ++r) {
      std::span<const double> row(&logits[r * v], v);
      out[r] = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
  }

  static std::vector<TokenId> supervision(const MaskMeta& meta, std::span<const TokenId> ids) {
    std::vector<TokenId> t(ids.begin(), ids.end());
    for (std::size_t r = 0; r < meta.batch; ++r)
      for (std::size_t j = 0; j < meta.pad_len(r); ++j) t[r * meta.seq_len + j] = kIgnoreIndex;
    return t;
  }

 private:
  SegmentModel model_;
};

struct AttackOptions {
  ModelConfig model;
  std::size_t p = 1;
  std::size_t q = 1;
  double delta = 0.02;
  std::uint64_t seed = 0;
  double lr = 0.2;          // federation
  double attack_lr = 0.5;   // decoder
  std::size_t steps = 200;
  std::size_t batch = 8;
  std::size_t num_clients = 2;
  std::size_t heldout = 16;  // honest samples never used in training
  CorpusOptions corpus;      // seq_len / alphabet shared by both clients
  TransportKind transport = TransportKind::kLoopback;
  bool enabled = true;       // false: same run, no decoder

  void validate() const {
    if (num_clients < 2) throw Error(ErrorCode::kThreatModel, "attack needs a malicious and an honest client");
    if (p + q >= model.num_blocks) throw Error(ErrorCode::kConfig, "p + q must leave at least one server block");
    if (q == 0) throw Error(ErrorCode::kConfig, "q must be >= 1");
    if (steps == 0 || batch == 0 || heldout == 0) throw Error(ErrorCode::kConfig, "steps, batch and heldout must be >= 1");
    if (!(delta >= 0.0) || !(attack_lr > 0.0)) throw Error(ErrorCode::kConfig, "bad delta or attack_lr");
  }
};

struct AttackReport {
  std::size_t p = 0;
  double delta = 0.0;
  std::uint64_t seed = 0;
  bool enabled = true;
  double token_accuracy = 0.0;  // honest held-out
  double bleu4 = 0.0;
  double rouge2_f1 = 0.0;
  double train_accuracy = 0.0;  // colluding client's own corpus
  double chance = 0.0;
  double final_attack_loss = 0.0;
  std::size_t attack_updates = 0;
  std::vector<double> honest_losses;
  std::vector<Bytes> honest_frames;  // every frame to or from the honest client
  std::optional<ErrorCode> error;
  std::string error_text;

  nlohmann::json to_json() const {
    nlohmann::json j{{"p", p},
                     {"delta", delta},
                     {"seed", seed},
                     {"enabled", enabled},
                     {"token_accuracy", token_accuracy},
                     {"bleu4", bleu4},
                     {"rouge2_f1", rouge2_f1},
                     {"train_accuracy", train_accuracy},
                     {"chance", chance},
                     {"final_attack_loss", final_attack_loss},
                     {"attack_updates", attack_updates},
                     {"scaled", {{"token_accuracy", 100 * token_accuracy},
                                 {"bleu4", 100 * bleu4},
                                 {"rouge2_f1", 100 * rouge2_f1}}}};
    if (error) j["error"] = {{"code", to_string(*error)}, {"text", error_text}};
    return j;
  }
};

namespace attack_detail {

struct Scores {
  double accuracy = 0.0, bleu = 0.0, rouge = 0.0;
};

// What the server would have received from this client: its own input
// segment plus the client's noise level, on a stream of our own.
inline Scores score(AttackModel& atk, ClientNode& client, std::span<const Sample> samples, double delta,
                    std::mt19937_64& rng) {
  const TrainBatch b = make_train_batch(samples);
  const auto pos = iota_positions(0, b.tokens.seq);
  Tensor h = client.a.forward(b.tokens, b.meta, pos, nullptr, {false, false});
  h = inject_noise(h, delta, rng);
  const auto pred = atk.decode(h, b.meta, pos);
  Scores s;
  std::size_t hit = 0, total = 0;
  for (std::size_t r = 0; r < b.tokens.batch; ++r) {
    const std::size_t pad = b.meta.pad_len(r), L = b.tokens.seq;
    std::vector<TokenId> cand, ref;
    for (std::size_t j = pad; j < L; ++j) {
      cand.push_back(pred[r * L + j]);
      ref.push_back(b.tokens.ids[r * L + j]);
      hit += cand.back() == ref.back();
      ++total;
    }
    s.bleu += bleu4(cand, ref);
    s.rouge += ref.size() >= 2 ? rouge2_f1(cand, ref) : static_cast<double>(cand == ref);
  }
  s.accuracy = static_cast<double>(hit) / static_cast<double>(total);
  s.bleu /= static_cast<double>(b.tokens.batch);
  s.rouge /= static_cast<double>(b.tokens.batch);
  return s;
}

}  // namespace attack_detail

// Client 0 colludes: its plaintext reaches the server out of band. Every other
// client is honest; client 1 is the one evaluated.
inline AttackReport run_attack(const AttackOptions& opt) {
  opt.validate();
  FederationOptions fo;
  fo.model = opt.model;
  fo.partition = {opt.p, opt.model.num_blocks - opt.p - opt.q, opt.q};
  fo.allow_embedding_only = opt.p == 0;
  fo.seed = opt.seed;
  fo.lr = opt.lr;
  fo.noise.scale = opt.delta;
  fo.noise.seed = opt.seed;
  fo.num_clients = opt.num_clients;
  fo.transport = opt.transport;
  fo.log_frames = true;
  Federation fed(fo);

  CorpusOptions mal = opt.corpus;
  mal.seed = opt.seed * 2 + 1;
  CorpusOptions hon = opt.corpus;
  hon.seed = opt.seed * 2 + 2;
  hon.num_samples = opt.corpus.num_samples + opt.heldout;
  const ToyCorpus mal_corpus = make_cyclic_corpus(opt.model.vocab_size, mal);
  const ToyCorpus hon_all = make_cyclic_corpus(opt.model.vocab_size, hon);
  ToyCorpus hon_train{hon_all.vocab_size, {hon_all.samples.begin(), hon_all.samples.begin() + opt.corpus.num_samples}};
  const auto heldout = hon_all.slice(opt.corpus.num_samples, opt.heldout);

  // Side channel from the colluding client, keyed by step.
  std::mutex mu;
  std::map<std::uint64_t, std::vector<TokenId>> leaked;
  const std::uint64_t mal_id = fed.client(0).id();

  std::optional<AttackModel> atk;
  AttackReport rep;
  rep.p = opt.p;
  rep.delta = opt.delta;
  rep.seed = opt.seed;
  rep.enabled = opt.enabled;
  rep.chance = 1.0 / static_cast<double>(opt.model.vocab_size);
  if (opt.enabled) {
    atk.emplace(opt.model, opt.p, named_stream(opt.seed, "attack.decoder")());
    fed.server().set_observer([&](const HiddenStateMsg& m) {
      if (m.client_id != mal_id) return;
      std::vector<TokenId> ids;
      {
        std::lock_guard lock(mu);
        auto it = leaked.find(m.step_id);
        if (it == leaked.end()) return;
        ids = std::move(it->second);
        leaked.erase(it);
      }
      rep.final_attack_loss = atk->train_step(m, ids, opt.attack_lr);
      ++rep.attack_updates;
    });
  }

  auto data = [&](std::size_t i, std::size_t s) {
    if (i == 0) {
      TrainBatch b = corpus_batch(mal_corpus, s, opt.batch);
      std::lock_guard lock(mu);
      leaked[fed.client(0).step()] = b.tokens.ids;
      return b;
    }
    return corpus_batch(hon_train, s + (i - 1) * 7, opt.batch);
  };
  auto round = fed.run_sequential(data, opt.steps, [&](const TrainStepRecord& r) {
    if (r.client_id == fed.client(1).id()) rep.honest_losses.push_back(r.loss);
  });
  fed.shutdown();
  fed.server().set_observer({});
  if (round.error) {
    rep.error = round.error;
    rep.error_text = round.error_text;
  }
  for (const auto& f : fed.client_log(1).frames()) rep.honest_frames.push_back(f);
  for (const auto& f : fed.server_log(1).frames()) rep.honest_frames.push_back(f);

  if (atk) {
    auto rng = named_stream(opt.seed, "attack.eval");
    const auto held = attack_detail::score(*atk, fed.client(1), heldout, opt.delta, rng);
    rep.token_accuracy = held.accuracy;
    rep.bleu4 = held.bleu;
    rep.rouge2_f1 = held.rouge;
    rep.train_accuracy = attack_detail::score(*atk, fed.client(0), mal_corpus.samples, opt.delta, rng).accuracy;
  }
  return rep;
}

// p x delta sweep, one report per cell, row-major in p.
inline std::vector<AttackReport> attack_grid(const AttackOptions& base, std::span<const std::size_t> ps,
                                             std::span<const double> deltas) {
  std::vector<AttackReport> out;
  for (std::size_t p : ps) {
    for (double d : deltas) {
      AttackOptions o = base;
      o.p = p;
      o.delta = d;
      out.push_back(run_attack(o));
    }
  }
  return out;
}

}  // namespace flsplit
