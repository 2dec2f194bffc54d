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

#include <cstdlib>

#include "flsplit/bench.hpp"
#include "test_util.hpp"

namespace flsplit {
namespace {

using Ids = std::vector<TokenId>;
using nlohmann::json;

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::kConfig;
}

ModelConfig small_model() {
  ModelConfig c;
  c.vocab_size = 48;
  c.hidden_size = 32;
  c.num_heads = 2;
  c.mlp_hidden = 64;
  c.max_context = 40;
  return c;
}

// ---------------------------------------------------------------------------

TEST(ScoreSingleToken, EqualLogitsSplitEvenly) {
  const std::vector<double> logits{0.3, 1.7, 1.7, -2.0};
  const auto p = score_single_token(logits, Ids{1, 2});
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(ScoreSingleToken, LargeGapSaturates) {
  const std::vector<double> logits{0.0, 20.0};
  EXPECT_GT(score_single_token(logits, Ids{1, 0})[0], 1 - 1e-8);
}

TEST(ScoreSingleToken, OneTwoThree) {
  // oracle: direct evaluation of exp(l_i) / sum exp(l_j)
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  const std::vector<double> want{std::exp(1.0) / z, std::exp(2.0) / z, std::exp(3.0) / z};
  EXPECT_NEAR(want[0], 0.0900, 5e-5);
  EXPECT_NEAR(want[1], 0.2447, 5e-5);
  EXPECT_NEAR(want[2], 0.6652, 5e-5);
  // only the candidate logits matter
  const std::vector<double> logits{9.0, 1.0, -4.0, 2.0, 3.0};
  const auto p = score_single_token(logits, Ids{1, 3, 4});
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p[i], want[i], 1e-15);
  EXPECT_NEAR(p[0] + p[1] + p[2], 1.0, 1e-15);
}

TEST(ScoreSingleToken, Errors) {
  const std::vector<double> logits(4, 0.0);
  EXPECT_EQ(code_of([&] { score_single_token(logits, Ids{1, 4}); }), ErrorCode::kIdOutOfRange);
  EXPECT_EQ(code_of([&] { score_single_token(logits, Ids{-1}); }), ErrorCode::kIdOutOfRange);
  EXPECT_EQ(code_of([&] { score_single_token(logits, Ids{}); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([&] { score_single_token(logits, Ids{2, 2}); }), ErrorCode::kConfig);
}

// ---------------------------------------------------------------------------

struct Rig {
  std::unique_ptr<Federation> fed;
  explicit Rig(const ModelConfig& cfg, std::uint64_t seed = 5) {
    FederationOptions o;
    o.model = cfg;
    o.partition = {1, cfg.num_blocks - 2, 1};
    o.seed = seed;
    fed = std::make_unique<Federation>(o);
    testing::randomize_adapters(fed->client(0).a, seed + 1);
    testing::randomize_adapters(fed->server().model(), seed + 2);
    testing::randomize_adapters(fed->client(0).c, seed + 3);
  }
  ClientNode& client() { return fed->client(0); }
  Channel& ch() { return fed->channel(0); }
};

TEST(ScoreMultiToken, SingleTokenIsLogOfNumerator) {
  Rig rig(small_model());
  const Ids prompt{3, 9, 4, 11};
  InferenceSession s(rig.client(), rig.ch(), 1);
  const Tensor logits = s.prefill(TokenBatch{1, 4, prompt}, MaskMeta::uniform(4, 0, 1));
  s.end();
  // numerator of p(a|q) with the whole vocabulary as the candidate set
  std::vector<double> row(logits.data().begin(), logits.data().end());
  double z = 0.0;
  for (double v : row) z += std::exp(v);
  const Ids ans{17};
  const double got = score_multi_token(rig.client(), rig.ch(), 2, prompt, ans);
  EXPECT_NEAR(got, std::log(std::exp(row[17]) / z), 1e-12);
}

TEST(ScoreMultiToken, CachedEqualsUncached) {
  Rig rig(small_model());
  const Ids prompt{3, 9, 4, 11, 2};
  for (const Ids& ans : {Ids{7}, Ids{7, 8, 9}, Ids{1, 2, 3, 4, 5, 6, 7, 8}}) {
    const double a = score_multi_token(rig.client(), rig.ch(), 10, prompt, ans, true);
    const double b = score_multi_token(rig.client(), rig.ch(), 11, prompt, ans, false);
    EXPECT_LT(std::abs(a - b), 1e-10) << ans.size();
    EXPECT_LT(a, 0.0);
  }
}

TEST(ScoreMultiToken, SumOfTeacherForcedSteps) {
  // recompute oracle: each term from a fresh prefill of prompt + answer prefix
  Rig rig(small_model());
  const Ids prompt{5, 6};
  const Ids ans{7, 1, 30};
  double want = 0.0;
  std::uint64_t sid = 100;
  for (std::size_t t = 0; t < ans.size(); ++t) {
    Ids ctx = prompt;
    ctx.insert(ctx.end(), ans.begin(), ans.begin() + static_cast<std::ptrdiff_t>(t));
    InferenceSession s(rig.client(), rig.ch(), sid++);
    const Tensor l = s.prefill(TokenBatch{1, ctx.size(), ctx}, MaskMeta::uniform(ctx.size(), 0, 1));
    s.end();
    want += log_prob(l.data(), ans[t]);
  }
  EXPECT_NEAR(score_multi_token(rig.client(), rig.ch(), sid, prompt, ans), want, 1e-10);
}

TEST(ScoreMultiToken, Errors) {
  Rig rig(small_model());
  EXPECT_EQ(code_of([&] { score_multi_token(rig.client(), rig.ch(), 1, Ids{1, 2}, Ids{}); }), ErrorCode::kConfig);
  const Ids long_prompt(30, 3), long_ans(11, 4);  // 30 + 11 - 1 = 40 fits, one more does not
  EXPECT_NO_THROW(score_multi_token(rig.client(), rig.ch(), 2, long_prompt, long_ans));
  const Ids longer(12, 4);
  EXPECT_EQ(code_of([&] { score_multi_token(rig.client(), rig.ch(), 3, long_prompt, longer); }),
            ErrorCode::kContextOverflow);
}

TEST(ScoreMultiToken, CopyTrainedModelPrefersTheCycle) {
  // period-8 sequences: the continuation repeats the prompt
  ExperimentConfig cfg;
  cfg.model = small_model();
  cfg.partition = {1, 4, 1};
  cfg.dataset.corpus = {32, 24, 8, 1, 0};
  cfg.train.steps = 150;
  cfg.train.batch = 8;
  cfg.train.lr = 0.2;
  cfg.validate();
  const auto data = make_dataset(cfg);
  auto t = run_training(cfg, data);
  ASSERT_FALSE(t.error) << t.error_text;
  auto fed = inference_federation(cfg, &t.model);
  auto rng = named_stream(9, "test.random_answer");
  int wins = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    const auto& s = data.samples[i].tokens;
    const Ids prompt(s.begin(), s.begin() + 12);
    const Ids copy(s.begin() + 12, s.begin() + 16);
    EXPECT_TRUE(std::equal(copy.begin(), copy.end(), s.begin() + 4));
    Ids rnd(4);
    for (auto& x : rnd) x = 9 + static_cast<TokenId>(rng() % 39);  // ids never in the corpus
    const double sc = score_multi_token(fed->client(0), fed->channel(0), 2 * i, prompt, copy);
    const double sr = score_multi_token(fed->client(0), fed->channel(0), 2 * i + 1, prompt, rnd);
    wins += sc > sr;
  }
  EXPECT_EQ(wins, 8);
}

// ---------------------------------------------------------------------------

// Oracle: closed-form parameter counts. Per block: two norms, four d x d
// attention projections each with rank-r A and B adapters, three MLP mats.
std::size_t block_params(const ModelConfig& c) {
  const std::size_t d = c.hidden_size, m = c.mlp_hidden, r = c.lora.rank;
  return 2 * d + 4 * (d * d + r * d + d * r) + 3 * d * m;
}

TEST(MemoryProxy, CountsMatchClosedForm) {
  const ModelConfig c;
  for (const PartitionSpec& s : all_partitions(c.num_blocks)) {
    const auto m = memory_proxy(c, s);
    const std::size_t emb = c.vocab_size * c.hidden_size;
    const std::size_t head = c.vocab_size * c.hidden_size + c.hidden_size;
    EXPECT_EQ(m.client_params, emb + (s.p + s.q) * block_params(c) + head);
    EXPECT_EQ(m.server_params, s.k * block_params(c));
    EXPECT_EQ(m.total_params, emb + c.num_blocks * block_params(c) + head);
  }
}

TEST(MemoryProxy, ThinClientSplit) {
  const ModelConfig c;
  const auto m = memory_proxy(c, {1, c.num_blocks - 2, 1});
  // 2 * 16384 + 2 * 53632 + 64 over 32768 + 6 * 53632 + 64
  EXPECT_EQ(block_params(c), 53632u);
  EXPECT_EQ(m.client_params, 140096u);
  EXPECT_EQ(m.total_params, 354624u);
  EXPECT_NEAR(m.client_fraction(), 140096.0 / 354624.0, 1e-15);
  const auto j = m.to_json();
  EXPECT_NEAR(j["reduction"].get<double>(), 1 - 140096.0 / 354624.0, 1e-15);
}

// ---------------------------------------------------------------------------

TEST(CommReport, MaskArithmetic) {
  const auto m = compare_mask_bytes(2, 128, 8);
  EXPECT_EQ(m.full_bytes, 262144u);
  EXPECT_EQ(m.meta_bytes, 24u);
  EXPECT_LE(m.meta_bytes, 32u);
  EXPECT_EQ(compare_mask_bytes(1, 16, 2).full_bytes, 512u);
}

TEST(CommReport, DecodeBytesScaling) {
  const ModelConfig c = small_model();
  const PartitionSpec s{1, 4, 1};
  const auto a = measure_decode_bytes(c, s, 1, 128);
  const auto b = measure_decode_bytes(c, s, 1, 256);
  const auto d = measure_decode_bytes(c, s, 1, 512);
  EXPECT_EQ(a.cached, d.cached);
  EXPECT_EQ(a.cached, b.cached);
  // exactly affine in L
  EXPECT_EQ(d.uncached - b.uncached, 2 * (b.uncached - a.uncached));
  const double ratio = static_cast<double>(d.uncached) / static_cast<double>(a.uncached);
  EXPECT_NEAR(ratio, 4.0, 0.05);
  const std::vector<DecodeBytes> dec{a, d};
  const std::vector<MaskComparison> masks{compare_mask_bytes(2, 128, 8)};
  const auto j = comm_report(CommSnapshot{}, masks, dec);
  EXPECT_DOUBLE_EQ(j["decode_scaling"]["cached_ratio"].get<double>(), 1.0);
  EXPECT_DOUBLE_EQ(j["decode_scaling"]["context_ratio"].get<double>(), 4.0);
  EXPECT_EQ(j["mask"][0]["full_mask_bytes"], 262144);
}

// ---------------------------------------------------------------------------

TEST(ExperimentConfig, MinimalUsesDefaults) {
  const auto c = ExperimentConfig::from_json(json{{"version", 1}});
  EXPECT_EQ(c.model.vocab_size, 256u);
  EXPECT_EQ(c.partition, (PartitionSpec{1, 4, 1}));
  EXPECT_EQ(c.strategy.mode, StrategyMode::kSequential);
  EXPECT_EQ(c.grid.num_blocks, 7u);
}

TEST(ExperimentConfig, RoundTrip) {
  json j = {{"version", 1},
            {"seed", 4},
            {"model", {{"num_blocks", 8}, {"lora", {{"rank", 4}}}}},
            {"partition", {{"p", 2}, {"k", 3}, {"q", 3}}},
            {"noise", {{"scale", 0.05}, {"target", "backward_grad_hB"}}},
            {"strategy", {{"mode", "server_hierarchical"}, {"num_clients", 3}, {"sync_interval", 4}, {"weights", {1, 2, 3}}}},
            {"generation", {{"stop_token", 0}, {"mode", "temperature"}, {"temperature", 0.7}}},
            {"transport", {{"kind", "tcp"}, {"endpoint", "127.0.0.1:9100"}}},
            {"acceptance", {{"max_loss_ratio", 0.5}}}};
  const auto c = ExperimentConfig::from_json(j);
  EXPECT_EQ(c.model.lora.rank, 4u);
  EXPECT_EQ(c.strategy.weights, (std::vector<double>{1, 2, 3}));
  EXPECT_EQ(c.endpoint.port, 9100);
  EXPECT_EQ(c.generation.stop_token, 0);
  EXPECT_EQ(c.acceptance.max_loss_ratio, 0.5);
  const auto again = ExperimentConfig::from_json(c.to_json());
  EXPECT_EQ(again.to_json(), c.to_json());
}

TEST(ExperimentConfig, EveryProblemIsReported) {
  json j = {{"version", 1},
            {"partition", {{"p", 2}, {"k", 2}, {"q", 1}}},
            {"train", {{"batch", -3}, {"lr", "fast"}}},
            {"strategy", {{"mode", "ring"}, {"num_clients", 2}, {"weights", {1}}}},
            {"extra", true}};
  try {
    ExperimentConfig::from_json(j);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfig);
    const std::string w = e.what();
    for (const char* frag : {"train.batch: wrong type", "train.lr: wrong type", "strategy.mode", "extra: unknown key",
                             "p+k+q=5", "weights length 1"}) {
      EXPECT_NE(w.find(frag), std::string::npos) << frag << "\n" << w;
    }
  }
}

TEST(ExperimentConfig, CrossFieldChecks) {
  auto problems = [](json j) {
    if (!j.contains("version")) j["version"] = 1;
    try {
      ExperimentConfig::from_json(j);
    } catch (const Error& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(problems({{"version", 2}}).find("version 2"), std::string::npos);
  EXPECT_NE(problems({{"grid", {{"num_blocks", 6}}}}).find("grid.num_blocks"), std::string::npos);
  EXPECT_NE(problems({{"strategy", {{"num_clients", 40}}}}).find("samples for 40 clients"), std::string::npos);
  EXPECT_NE(problems({{"dataset", {{"seq_len", 500}}}}).find("seq_len"), std::string::npos);
  EXPECT_NE(problems({{"train", {{"scalar_width", 4}}}}).find("scalar width"), std::string::npos);
  EXPECT_NE(problems({{"partition", {{"p", 0}, {"k", 5}}}}).find("partition"), std::string::npos);
  EXPECT_EQ(problems({{"partition", {{"p", 0}, {"k", 5}, {"allow_embedding_only", true}}}}), "");
  EXPECT_NE(problems({{"generation", {{"stop_token", 256}}}}).find("stop_token"), std::string::npos);
  EXPECT_EQ(code_of([] { ExperimentConfig::from_json(json{{"seed", 1}}); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([] { ExperimentConfig::from_json(json::array()); }), ErrorCode::kConfig);
}

TEST(ExperimentConfig, EnvOverrides) {
  auto c = ExperimentConfig::from_json(json{{"version", 1}});
  ::setenv("FLSPLIT_ENDPOINT", "10.0.0.9:7001", 1);
  ::setenv("FLSPLIT_OUT_DIR", "/tmp/elsewhere", 1);
  c.apply_env();
  ::unsetenv("FLSPLIT_ENDPOINT");
  ::unsetenv("FLSPLIT_OUT_DIR");
  EXPECT_EQ(c.endpoint.host, "10.0.0.9");
  EXPECT_EQ(c.endpoint.port, 7001);
  EXPECT_EQ(c.out_dir, "/tmp/elsewhere");
}

// ---------------------------------------------------------------------------

TEST(Data, ShardsAreRoundRobin) {
  const auto c = make_cyclic_corpus(64, {10, 8, 16, 1, 0});
  const auto s = shard_corpus(c, 3);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s[0].samples.size(), 4u);
  EXPECT_EQ(s[2].samples.size(), 3u);
  EXPECT_EQ(s[1].samples[1].tokens, c.samples[4].tokens);
}

TEST(Data, EvalItemsAreCutsOfTrainingSequences) {
  const auto c = make_cyclic_corpus(64, {20, 10, 16, 1, 3});
  const auto items = make_eval_items(c, 12, 4, 3);
  ASSERT_EQ(items.size(), 12u);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    const auto& src = c.samples[i].tokens;
    ASSERT_LT(it.tokens.size(), src.size());
    EXPECT_TRUE(std::equal(it.tokens.begin(), it.tokens.end(), src.begin()));
    EXPECT_EQ(it.answer, src[it.tokens.size()]);
    EXPECT_EQ(it.candidates.size(), 4u);
    EXPECT_NE(std::find(it.candidates.begin(), it.candidates.end(), it.answer), it.candidates.end());
    std::set<TokenId> uniq(it.candidates.begin(), it.candidates.end());
    EXPECT_EQ(uniq.size(), 4u);
  }
  const auto again = make_eval_items(c, 12, 4, 3);
  for (std::size_t i = 0; i < items.size(); ++i) EXPECT_EQ(again[i].candidates, items[i].candidates);
}

// ---------------------------------------------------------------------------

ExperimentConfig tiny(StrategyMode mode) {
  ExperimentConfig c;
  c.model = small_model();
  c.seed = 11;
  c.noise.scale = 0.02;
  c.noise.seed = 11;
  c.strategy.mode = mode;
  c.strategy.num_clients = 2;
  c.strategy.sync_interval = 2;
  c.dataset.corpus = {8, 10, 12, 1, 2};
  c.train.steps = 4;
  c.train.batch = 2;
  c.validate();
  return c;
}

TEST(RunTraining, SameConfigSameRecords) {
  for (auto mode : {StrategyMode::kSequential, StrategyMode::kClientBatch, StrategyMode::kServerHierarchical}) {
    const auto cfg = tiny(mode);
    const auto data = make_dataset(cfg);
    const auto a = run_training(cfg, data);
    const auto b = run_training(cfg, data);
    ASSERT_FALSE(a.error) << a.error_text;
    ASSERT_EQ(a.records.size(), 8u) << to_string(mode);
    for (std::size_t i = 0; i < a.records.size(); ++i) {
      EXPECT_EQ(a.records[i].to_json().dump(), b.records[i].to_json().dump()) << to_string(mode) << " " << i;
    }
    EXPECT_TRUE(a.comm == b.comm);
    if (mode == StrategyMode::kServerHierarchical) EXPECT_EQ(a.merges, 2u);
  }
}

TEST(RunTraining, InterruptStopsTheRun) {
  const auto cfg = tiny(StrategyMode::kSequential);
  const auto data = make_dataset(cfg);
  interrupt_flag().store(true);
  const auto r = run_training(cfg, data);
  interrupt_flag().store(false);
  ASSERT_TRUE(r.error);
  EXPECT_EQ(*r.error, ErrorCode::kInterrupted);
  EXPECT_TRUE(r.records.empty());
  EXPECT_EQ(exit_code_for(*r.error), kExitInterrupted);
}

TEST(RunTraining, InferenceCopyServesTheTrainedWeights) {
  const auto cfg = tiny(StrategyMode::kSequential);
  const auto data = make_dataset(cfg);
  auto t = run_training(cfg, data);
  ASSERT_FALSE(t.error);
  auto fed = inference_federation(cfg, &t.model);
  // monolithic reference from the same weights
  const Ids prompt{1, 2, 3, 4, 5};
  const auto pos = iota_positions(0, prompt.size());
  const MaskMeta meta = MaskMeta::uniform(prompt.size(), 0, 1);
  const TokenBatch tb{1, prompt.size(), prompt};
  Tensor h = t.model.a.forward(tb, meta, pos, nullptr, {false, false});
  h = t.model.b.forward(h, meta, pos, nullptr, {false, false});
  const Tensor want = t.model.c.forward(h, meta, pos, nullptr, {false, true});
  InferenceSession s(fed->client(0), fed->channel(0), 1);
  const Tensor got = s.prefill(tb, meta);
  s.end();
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_EQ(got[i], want[i]);
}

TEST(ExitCodes, Mapping) {
  EXPECT_EQ(exit_code_for(ErrorCode::kConfig), 2);
  EXPECT_EQ(exit_code_for(ErrorCode::kPartition), 2);
  EXPECT_EQ(exit_code_for(ErrorCode::kThreatModel), 2);
  EXPECT_EQ(exit_code_for(ErrorCode::kProtocol), 3);
  EXPECT_EQ(exit_code_for(ErrorCode::kProtocolOrder), 3);
  EXPECT_EQ(exit_code_for(ErrorCode::kBarrierTimeout), 3);
  EXPECT_EQ(exit_code_for(ErrorCode::kContextOverflow), 3);
}

}  // namespace
}  // namespace flsplit
