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

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "flsplit/checkpoint.hpp"
#include "flsplit/model.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace flsplit {
namespace {

using testing::next_token_targets;
using testing::random_tokens;
using testing::randomize_adapters;
using testing::tiny_config;

ModelConfig default_config() { return ModelConfig{}; }

Tensor split_logits(PartitionedModel& m, const TokenBatch& x, const MaskMeta& meta) {
  auto pos = iota_positions(0, x.seq);
  Tensor ha = m.a.forward(x, meta, pos);
  Tensor hb = m.b.forward(ha, meta, pos);
  return m.c.forward(hb, meta, pos);
}

TEST(PartitionTest, SegmentBlockCounts) {
  auto cfg = default_config();
  cfg.num_blocks = 4;
  auto m = build_partitioned(cfg, {1, 2, 1}, 1);
  EXPECT_EQ(m.a.num_blocks(), 1u);
  EXPECT_EQ(m.b.num_blocks(), 2u);
  EXPECT_EQ(m.c.num_blocks(), 1u);
  cfg.num_blocks = 6;
  auto m6 = build_partitioned(cfg, {3, 2, 1}, 1);
  EXPECT_EQ(m6.a.num_blocks(), 3u);
  EXPECT_EQ(m6.b.num_blocks(), 2u);
  EXPECT_EQ(m6.c.num_blocks(), 1u);
  EXPECT_EQ(m6.c.first_block(), 5u);
}

TEST(PartitionTest, RejectsSpecThatDoesNotCoverModel) {
  auto cfg = default_config();
  cfg.num_blocks = 4;
  try {
    build_partitioned(cfg, {2, 2, 1}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kPartition);
  }
  EXPECT_THROW(build_partitioned(cfg, {0, 3, 1}, 1), Error);
  EXPECT_NO_THROW(build_partitioned(cfg, {0, 3, 1}, 1, TrainMode::kLora, /*allow_embedding_only=*/true));
}

TEST(PartitionTest, TenPartitionsForSixBlocks) { EXPECT_EQ(all_partitions(6).size(), 10u); }

TEST(SplitModelTest, SplitForwardEqualsMonolithicForEveryPartition) {
  auto cfg = default_config();
  std::mt19937_64 rng(3);
  auto x = random_tokens(2, 12, cfg.vocab_size, rng);
  auto meta = MaskMeta::per_row(12, {0, 3});
  auto mono = build_monolithic(cfg, 42);
  randomize_adapters(mono, 5);
  Tensor expect = mono.forward(x, meta, iota_positions(0, 12));
  for (const auto& spec : all_partitions(cfg.num_blocks)) {
    auto m = build_partitioned(cfg, spec, 42);
    randomize_adapters(m, 5);
    EXPECT_LT(max_abs_diff(split_logits(m, x, meta), expect), 1e-12) << spec.p << spec.k << spec.q;
  }
}

TEST(SplitModelTest, ZeroInitAdaptersLeaveLogitsUnchanged) {
  auto cfg = default_config();
  auto plain_cfg = cfg;
  plain_cfg.lora.enabled = false;
  std::mt19937_64 rng(4);
  auto x = random_tokens(1, 9, cfg.vocab_size, rng);
  auto meta = MaskMeta::uniform(9, 0, 1);
  auto with = build_monolithic(cfg, 7);
  auto without = build_monolithic(plain_cfg, 7);
  EXPECT_EQ(with.forward(x, meta, iota_positions(0, 9)), without.forward(x, meta, iota_positions(0, 9)));
}

TEST(SplitModelTest, AdapterCountIndependentOfPartition) {
  auto cfg = default_config();
  std::size_t expect = 0;
  for (const auto& spec : all_partitions(cfg.num_blocks)) {
    auto m = build_partitioned(cfg, spec, 1);
    const std::size_t n = m.a.parameter_count(true) + m.b.parameter_count(true) + m.c.parameter_count(true);
    if (expect == 0) expect = n;
    EXPECT_EQ(n, expect);
  }
  // q, k, v, o adapters: 2 * r * d each, per block.
  EXPECT_EQ(expect, cfg.num_blocks * 4 * 2 * cfg.lora.rank * cfg.hidden_size);
}

TEST(SplitModelTest, BatchOfTwoEqualsStackedSingles) {
  auto cfg = default_config();
  auto mono = build_monolithic(cfg, 8);
  randomize_adapters(mono, 9);
  std::mt19937_64 rng(5);
  auto x = random_tokens(2, 10, cfg.vocab_size, rng);
  auto pos = iota_positions(0, 10);
  Tensor both = mono.forward(x, MaskMeta::per_row(10, {2, 0}), pos);
  for (std::size_t b = 0; b < 2; ++b) {
    TokenBatch one{1, 10, {x.ids.begin() + b * 10, x.ids.begin() + (b + 1) * 10}};
    Tensor solo = mono.forward(one, MaskMeta::uniform(10, b == 0 ? 2 : 0, 1), pos);
    EXPECT_LT(max_abs_diff(slice_rows(both, b, 1), solo), 1e-12);
  }
}

TEST(SplitModelTest, SingleTokenWithEmptyCacheMatchesNoCache) {
  auto cfg = default_config();
  auto mono = build_monolithic(cfg, 10);
  TokenBatch x{1, 1, {17}};
  auto meta = MaskMeta::uniform(1, 0, 1);
  std::vector<std::size_t> pos{0};
  auto cache = mono.make_cache();
  EXPECT_EQ(mono.forward(x, meta, pos, &cache), mono.forward(x, meta, pos));
  EXPECT_EQ(cache.length(), 1u);
}

TEST(SplitModelTest, HiddenSizeMismatchIsShapeError) {
  auto cfg = default_config();
  auto m = build_partitioned(cfg, {1, 4, 1}, 1);
  std::vector<std::size_t> pos{0, 1};
  try {
    m.b.forward(Tensor({1, 2, 7}), MaskMeta::uniform(2, 0, 1), pos);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDimension);
  }
}

// ---------------------------------------------------------------------------

TEST(SegmentBackwardTest, WithoutForwardIsProtocolOrderError) {
  auto m = build_partitioned(default_config(), {1, 4, 1}, 1);
  try {
    m.b.backward(Tensor({1, 2, 64}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kProtocolOrder);
  }
}

TEST(SegmentBackwardTest, ZeroUpstreamGivesZeroGradients) {
  auto cfg = default_config();
  auto m = build_partitioned(cfg, {1, 4, 1}, 1);
  randomize_adapters(m, 2);
  std::mt19937_64 rng(6);
  Tensor h = random_normal({1, 5, cfg.hidden_size}, 1.0, rng);
  auto pos = iota_positions(0, 5);
  m.b.forward(h, MaskMeta::uniform(5, 1, 1), pos);
  auto g = m.b.backward(Tensor({1, 5, cfg.hidden_size}));
  for (double v : g.input_grad.data()) EXPECT_EQ(v, 0.0);
  for (const auto& t : g.param_grads)
    for (double v : t.data()) EXPECT_EQ(v, 0.0);
}

TEST(SegmentBackwardTest, RelayedBackwardEqualsMonolithic) {
  auto cfg = default_config();
  std::mt19937_64 rng(7);
  auto x = random_tokens(2, 8, cfg.vocab_size, rng);
  auto meta = MaskMeta::per_row(8, {0, 2});
  auto targets = next_token_targets(x, meta);
  auto pos = iota_positions(0, 8);

  auto mono = build_monolithic(cfg, 11);
  randomize_adapters(mono, 12);
  auto ce = softmax_cross_entropy(mono.forward(x, meta, pos), targets);
  auto mg = mono.backward(ce.grad);

  for (const auto& spec : std::vector<PartitionSpec>{{1, 4, 1}, {2, 1, 3}, {3, 2, 1}}) {
    auto m = build_partitioned(cfg, spec, 11);
    randomize_adapters(m, 12);
    auto logits = split_logits(m, x, meta);
    auto sce = softmax_cross_entropy(logits, targets);
    EXPECT_EQ(sce.loss, ce.loss);
    auto gc = m.c.backward(sce.grad);
    auto gb = m.b.backward(gc.input_grad);
    auto ga = m.a.backward(gb.input_grad);
    std::vector<Tensor> relayed;
    for (auto* g : {&ga, &gb, &gc}) relayed.insert(relayed.end(), g->param_grads.begin(), g->param_grads.end());
    ASSERT_EQ(relayed.size(), mg.param_grads.size());
    for (std::size_t i = 0; i < relayed.size(); ++i) EXPECT_LT(relative_error(relayed[i], mg.param_grads[i]), 1e-10);
    // gradient arriving at h_A equals the monolithic gradient at block p's input
    EXPECT_LT(relative_error(gb.input_grad, mg.block_input_grads[spec.p]), 1e-10);
  }
}

// Whole-model check: LoRA and full-parameter gradients of the loss against
// central differences on a tiny model.
TEST(SegmentBackwardTest, ModelGradientsMatchFiniteDifferences) {
  for (TrainMode mode : {TrainMode::kLora, TrainMode::kFull}) {
    auto cfg = tiny_config(3);
    auto model = build_monolithic(cfg, 21, mode);
    randomize_adapters(model, 22);
    std::mt19937_64 rng(8);
    auto x = random_tokens(2, 5, cfg.vocab_size, rng);
    auto meta = MaskMeta::per_row(5, {1, 0});
    auto targets = next_token_targets(x, meta);
    auto pos = iota_positions(0, 5);
    auto ce = softmax_cross_entropy(model.forward(x, meta, pos), targets);
    auto grads = model.backward(ce.grad);
    auto params = model.trainable();
    ASSERT_EQ(params.size(), grads.param_grads.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor original = params[i]->value;
      auto numeric = oracle::numeric_grad(
          [&](const Tensor& v) {
            params[i]->value = v;
            double loss = softmax_cross_entropy(model.forward(x, meta, pos, nullptr, {false}), targets).loss;
            params[i]->value = original;
            return loss;
          },
          original);
      EXPECT_LT(relative_error(grads.param_grads[i], numeric), 1e-5) << params[i]->name;
    }
  }
}

// ---------------------------------------------------------------------------

TEST(LoraStepTest, ZeroLearningRateIsNoOp) {
  auto m = build_monolithic(tiny_config(), 1);
  randomize_adapters(m, 2);
  auto before = m;
  std::vector<Tensor> grads;
  for (auto* p : m.trainable()) grads.push_back(Tensor(p->value.shape(), 5.0));
  apply_lora_step(m, grads, 0.0);
  for (auto* p : m.trainable()) EXPECT_EQ(p->value, before.find(p->name)->value);
}

TEST(LoraStepTest, SingleStepOnScalarAdapter) {
  // Hand computation for a 1x1 linear with rank-1 adapter:
  // y = w x + (alpha/r) b a x with w=2, a=0.5, b=0.25, alpha=r=1, x=3.
  // L = y^2 / 2 -> dL/dy = y = 6 + 0.375 = 6.375
  // dA = s * b * x * dy = 0.25 * 3 * 6.375 = 4.78125
  // dB = s * a * x * dy = 0.5 * 3 * 6.375 = 9.5625
  // lr = 0.1 -> a' = 0.5 - 0.478125 = 0.021875, b' = 0.25 - 0.95625 = -0.70625
  LoraConfig lc{true, 1, 1.0};
  Linear l = Linear::create("toy", 1, 1, 0, &lc);
  l.weight.value[0] = 2.0;
  l.lora_a->value[0] = 0.5;
  l.lora_b->value[0] = 0.25;
  Linear::Tape tape;
  Tensor y = l.forward(Tensor({1, 1}, 3.0), &tape);
  EXPECT_DOUBLE_EQ(y[0], 6.375);
  l.backward(y, tape, TrainMode::kLora);
  EXPECT_DOUBLE_EQ(l.lora_a->grad[0], 4.78125);
  EXPECT_DOUBLE_EQ(l.lora_b->grad[0], 9.5625);
  EXPECT_EQ(l.weight.grad[0], 0.0);
}

TEST(LoraStepTest, SegmentUpdateTouchesOnlyAdapters) {
  auto cfg = default_config();
  auto m = build_partitioned(cfg, {1, 4, 1}, 3);
  randomize_adapters(m, 4);
  auto before = m.b;
  std::mt19937_64 rng(9);
  auto pos = iota_positions(0, 6);
  m.b.forward(random_normal({1, 6, cfg.hidden_size}, 1.0, rng), MaskMeta::uniform(6, 0, 1), pos);
  auto g = m.b.backward(random_normal({1, 6, cfg.hidden_size}, 1.0, rng));
  apply_lora_step(m.b, g.param_grads, 0.1);
  bool adapter_moved = false;
  m.b.visit_params([&](const Param& p) {
    const auto& old = before.find(p.name)->value;
    if (p.adapter) {
      adapter_moved |= !(p.value == old);
    } else {
      EXPECT_EQ(p.value, old) << p.name;
    }
  });
  EXPECT_TRUE(adapter_moved);
}

TEST(LoraStepTest, IdenticalGradsMoveIdentically) {
  auto a = build_monolithic(tiny_config(), 1);
  auto b = build_monolithic(tiny_config(), 1);
  std::vector<Tensor> grads;
  std::mt19937_64 rng(10);
  for (auto* p : a.trainable()) grads.push_back(random_normal(p->value.shape(), 1.0, rng));
  apply_lora_step(a, grads, 0.05);
  apply_lora_step(b, grads, 0.05);
  for (auto* p : a.trainable()) EXPECT_EQ(p->value, b.find(p->name)->value);
}

// ---------------------------------------------------------------------------

TEST(FedAvgTest, MeanOfTwoAdapters) {
  auto a = build_monolithic(tiny_config(), 1);
  auto b = a;
  for (auto* p : a.trainable()) p->value.fill(1.0);
  for (auto* p : b.trainable()) p->value.fill(3.0);
  std::vector<SegmentModel> models{a, b};
  std::vector<double> w{1.0, 1.0};
  auto merged = fedavg_merge(std::span<const SegmentModel>(models), w);
  for (auto* p : merged.trainable())
    for (double v : p->value.data()) EXPECT_EQ(v, 2.0);
}

TEST(FedAvgTest, SingleModelAndDegenerateWeights) {
  auto a = build_monolithic(tiny_config(), 1);
  randomize_adapters(a, 2);
  auto b = a;
  randomize_adapters(b, 3);
  std::vector<SegmentModel> one{a};
  std::vector<double> w1{2.5};
  auto m1 = fedavg_merge(std::span<const SegmentModel>(one), w1);
  std::vector<SegmentModel> two{a, b};
  std::vector<double> w10{1.0, 0.0};
  auto m2 = fedavg_merge(std::span<const SegmentModel>(two), w10);
  a.visit_params([&](const Param& p) {
    EXPECT_EQ(m1.find(p.name)->value, p.value);
    EXPECT_EQ(m2.find(p.name)->value, p.value);
  });
}

TEST(FedAvgTest, DivergentBaseWeightsRejected) {
  auto a = build_monolithic(tiny_config(), 1);
  auto b = build_monolithic(tiny_config(), 2);
  std::vector<SegmentModel> two{a, b};
  std::vector<double> w{1.0, 1.0};
  try {
    fedavg_merge(std::span<const SegmentModel>(two), w);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConsistency);
  }
}

TEST(FedAvgTest, MismatchedArchitecturesRejected) {
  auto a = build_monolithic(tiny_config(3), 1);
  auto b = build_monolithic(tiny_config(4), 1);
  std::vector<SegmentModel> two{a, b};
  std::vector<double> w{1.0, 1.0};
  try {
    fedavg_merge(std::span<const SegmentModel>(two), w);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMerge);
  }
}

// ---------------------------------------------------------------------------

TEST(CheckpointTest, SegmentsAreSlicesOfMonolithicCheckpoint) {
  auto cfg = default_config();
  auto mono = build_monolithic(cfg, 5);
  randomize_adapters(mono, 6);
  const auto path = (std::filesystem::temp_directory_path() / "flsplit_model_test.ckpt").string();
  save_checkpoint(path, {&mono});
  auto params = load_checkpoint(path);
  std::filesystem::remove(path);

  auto split = build_partitioned(cfg, {2, 3, 1}, 999);
  load_parameters(split.a, params);
  load_parameters(split.b, params);
  load_parameters(split.c, params);
  std::mt19937_64 rng(11);
  auto x = random_tokens(1, 7, cfg.vocab_size, rng);
  auto meta = MaskMeta::uniform(7, 0, 1);
  EXPECT_EQ(split_logits(split, x, meta), mono.forward(x, meta, iota_positions(0, 7)));

  // split checkpoint bytes equal monolithic checkpoint bytes
  ParameterMap from_split;
  for (auto* s : {&split.a, &split.b, &split.c}) collect_parameters(*s, from_split);
  EXPECT_EQ(encode_checkpoint(from_split), encode_checkpoint(params));
}

TEST(CheckpointTest, CorruptFilesRejected) {
  ParameterMap p{{"x", Tensor({2}, 1.0)}};
  auto bytes = encode_checkpoint(p);
  auto truncated = Bytes(bytes.begin(), bytes.end() - 3);
  EXPECT_THROW(decode_checkpoint(truncated), Error);
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), Error);
}

}  // namespace
}  // namespace flsplit
