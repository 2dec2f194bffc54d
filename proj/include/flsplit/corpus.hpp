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

// Deterministic synthetic data: memorizable cyclic sequences for training,
// cloze items for scoring and prompts for generation.

#include <algorithm>
#include <random>
#include <span>
#include <vector>

#include "flsplit/training.hpp"

namespace flsplit {

inline constexpr TokenId kPadToken = 0;

struct Sample {
  std::vector<TokenId> tokens;      // full sequence, trained with next-token targets
  std::vector<TokenId> candidates;  // cloze items: candidate answers for the next token
  TokenId answer = kIgnoreIndex;    // cloze items: correct candidate
};

struct CorpusOptions {
  std::size_t num_samples = 32;
  std::size_t seq_len = 16;
  std::size_t alphabet = 16;  // distinct non-pad ids used by cyclic sequences
  TokenId first_id = 1;
  std::uint64_t seed = 0;
};

struct ToyCorpus {
  std::size_t vocab_size = 0;
  std::vector<Sample> samples;

  void validate() const {
    for (const auto& s : samples) {
      for (TokenId t : s.tokens)
        if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) throw Error(ErrorCode::kIdOutOfRange, "corpus id " + std::to_string(t));
      for (TokenId t : s.candidates)
        if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) throw Error(ErrorCode::kIdOutOfRange, "candidate id " + std::to_string(t));
    }
  }

  std::span<const Sample> slice(std::size_t begin, std::size_t count) const {
    return std::span<const Sample>(samples).subspan(begin, count);
  }
};

// Sample i walks the alphabet with stride 1 + (i % 3) from a seeded start:
//   x_j = first_id + (start_i + j * stride_i) mod alphabet
inline ToyCorpus make_cyclic_corpus(std::size_t vocab_size, const CorpusOptions& o) {
  if (o.alphabet < 4 || o.first_id < 1 || static_cast<std::size_t>(o.first_id) + o.alphabet > vocab_size) {
    throw Error(ErrorCode::kConfig, "alphabet does not fit the vocabulary");
  }
  if (o.seq_len < 2) throw Error(ErrorCode::kConfig, "corpus sequences need at least 2 tokens");
  ToyCorpus c;
  c.vocab_size = vocab_size;
  auto rng = named_stream(o.seed, "corpus.cyclic");
  for (std::size_t i = 0; i < o.num_samples; ++i) {
    Sample s;
    const std::size_t start = rng() % o.alphabet;
    const std::size_t stride = 1 + i % 3;
    for (std::size_t j = 0; j < o.seq_len; ++j) {
      s.tokens.push_back(o.first_id + static_cast<TokenId>((start + j * stride) % o.alphabet));
    }
    c.samples.push_back(std::move(s));
  }
  return c;
}

// Uniform random ids in [first_id, vocab); covers the whole non-pad vocabulary
// when num_samples * seq_len is large enough.
inline ToyCorpus make_random_corpus(std::size_t vocab_size, const CorpusOptions& o) {
  ToyCorpus c;
  c.vocab_size = vocab_size;
  auto rng = named_stream(o.seed, "corpus.random");
  std::uniform_int_distribution<TokenId> dist(o.first_id, static_cast<TokenId>(vocab_size - 1));
  for (std::size_t i = 0; i < o.num_samples; ++i) {
    Sample s;
    for (std::size_t j = 0; j < o.seq_len; ++j) s.tokens.push_back(dist(rng));
    c.samples.push_back(std::move(s));
  }
  return c;
}

// Cloze items from cyclic sequences: the prompt is a prefix, the answer is the
// next element of the cycle and the distractors are other alphabet ids.
inline ToyCorpus make_cloze_corpus(std::size_t vocab_size, const CorpusOptions& o, std::size_t num_candidates = 4) {
  ToyCorpus base = make_cyclic_corpus(vocab_size, o);
  auto rng = named_stream(o.seed, "corpus.cloze");
  for (auto& s : base.samples) {
    const std::size_t cut = 2 + rng() % (s.tokens.size() - 1);
    s.answer = s.tokens[cut - 1];
    s.tokens.resize(cut - 1);
    std::vector<TokenId> cands{s.answer};
    while (cands.size() < std::min(num_candidates, o.alphabet)) {
      const TokenId t = o.first_id + static_cast<TokenId>(rng() % o.alphabet);
      if (std::find(cands.begin(), cands.end(), t) == cands.end()) cands.push_back(t);
    }
    std::shuffle(cands.begin(), cands.end(), rng);
    s.candidates = std::move(cands);
  }
  return base;
}

// Left-pads sequences to the longest one and builds next-token targets; pad
// slots and the final slot of each row are ignored.
inline TrainBatch make_train_batch(std::span<const std::vector<TokenId>> seqs, TokenId pad = kPadToken) {
  if (seqs.empty()) throw Error(ErrorCode::kDegenerateBatch, "empty batch");
  std::size_t len = 0;
  for (const auto& s : seqs) len = std::max(len, s.size());
  if (len == 0) throw Error(ErrorCode::kDegenerateBatch, "all sequences empty");
  TrainBatch b;
  b.tokens = TokenBatch{seqs.size(), len, std::vector<TokenId>(seqs.size() * len, pad)};
  b.targets.assign(seqs.size() * len, kIgnoreIndex);
  std::vector<std::size_t> pads;
  for (std::size_t r = 0; r < seqs.size(); ++r) {
    const std::size_t p = len - seqs[r].size();
    if (p == len) throw Error(ErrorCode::kDegenerateBatch, "empty sequence in batch");
    pads.push_back(p);
    std::copy(seqs[r].begin(), seqs[r].end(), b.tokens.ids.begin() + static_cast<std::ptrdiff_t>(r * len + p));
    for (std::size_t j = p; j + 1 < len; ++j) b.targets[r * len + j] = b.tokens.ids[r * len + j + 1];
  }
  b.meta = MaskMeta::per_row(len, std::move(pads));
  return b;
}

inline TrainBatch make_train_batch(std::span<const Sample> samples, TokenId pad = kPadToken) {
  std::vector<std::vector<TokenId>> seqs;
  for (const auto& s : samples) seqs.push_back(s.tokens);
  return make_train_batch(std::span<const std::vector<TokenId>>(seqs), pad);
}

// Cycles through the corpus in fixed-size batches: step s uses samples
// [s * batch, (s + 1) * batch) modulo the corpus size.
inline TrainBatch corpus_batch(const ToyCorpus& c, std::size_t step, std::size_t batch) {
  if (c.samples.empty() || batch == 0) throw Error(ErrorCode::kDegenerateBatch, "empty corpus or batch");
  std::vector<Sample> picked;
  for (std::size_t i = 0; i < batch; ++i) picked.push_back(c.samples[(step * batch + i) % c.samples.size()]);
  return make_train_batch(std::span<const Sample>(picked));
}

}  // namespace flsplit
