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

#include <algorithm>

#include "flsplit/corpus.hpp"
#include "flsplit/parallel.hpp"
#include "test_util.hpp"

namespace flsplit {
namespace {

using testing::randomize_adapters;

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::kConfig;
}

ToyCorpus shard(std::uint64_t seed) {
  CorpusOptions o;
  o.seed = seed;
  return make_cyclic_corpus(ModelConfig{}.vocab_size, o);
}

// M clients sharing one seed, each with its own batch of equal seq_len.
struct BatchFixture {
  ModelConfig cfg;
  PartitionedModel m;
  std::vector<ClientNode> clients;
  std::vector<TrainBatch> batches;

  BatchFixture(std::size_t M, std::uint64_t seed) : m(build_partitioned(cfg, {1, 4, 1}, seed)) {
    randomize_adapters(m, seed + 1);
    for (std::size_t i = 0; i < M; ++i) {
      clients.emplace_back(i, m.a, m.c, 0.1);
      batches.push_back(corpus_batch(shard(seed + 10 + i), i, 1 + i % 2));
    }
  }

  std::vector<HiddenStateMsg> forwards() {
    std::vector<HiddenStateMsg> hs;
    for (std::size_t i = 0; i < clients.size(); ++i)
      hs.push_back(clients[i].client_forward(batches[i].tokens, batches[i].meta));
    return hs;
  }
};

class ClientBatchEquivalence : public ::testing::TestWithParam<std::size_t> {};

TEST_P(ClientBatchEquivalence, SlicesEqualSoloForwards) {
  const std::size_t M = GetParam();
  BatchFixture f(M, 40 + M);
  auto hs = f.forwards();
  ServerNode node(f.m.b, 0.1);
  ClientBatchServer cbs(node, M);
  auto replies = cbs.forward(hs);
  ASSERT_EQ(replies.size(), M);
  for (std::size_t i = 0; i < M; ++i) {
    EXPECT_EQ(replies[i].client_id, i);
    ServerNode solo(f.m.b, 0.1);
    EXPECT_LT(max_abs_diff(replies[i].tensor, solo.server_forward(hs[i]).tensor), 1e-12);
  }
}

TEST_P(ClientBatchEquivalence, ServerGradIsSumOfSoloGrads) {
  const std::size_t M = GetParam();
  BatchFixture f(M, 50 + M);
  auto hs = f.forwards();
  ServerNode node(f.m.b, 0.0);
  ClientBatchServer cbs(node, M);
  auto replies = cbs.forward(hs);
  std::vector<GradMsg> grads;
  for (std::size_t i = 0; i < M; ++i) grads.push_back(f.clients[i].client_loss_and_backward(replies[i], f.batches[i].targets).grad);
  auto gha = cbs.backward(grads);

  std::vector<Tensor> sum;
  for (std::size_t i = 0; i < M; ++i) {
    ServerNode solo(f.m.b, 0.0);
    solo.server_forward(hs[i]);
    auto g = solo.server_backward(grads[i]);
    EXPECT_LT(relative_error(gha[i].tensor, g.tensor), 1e-10);
    std::vector<Tensor> pg;
    for (auto* p : solo.model().trainable()) pg.push_back(p->grad);
    if (sum.empty()) {
      sum = pg;
    } else {
      for (std::size_t k = 0; k < sum.size(); ++k)
        for (std::size_t j = 0; j < sum[k].size(); ++j) sum[k][j] += pg[k][j];
    }
  }
  const auto& got = cbs.last_server_grads();
  ASSERT_EQ(got.size(), sum.size());
  for (std::size_t k = 0; k < sum.size(); ++k) EXPECT_LT(relative_error(got[k], sum[k]), 1e-10) << k;
}

INSTANTIATE_TEST_SUITE_P(M, ClientBatchEquivalence, ::testing::Values(2u, 4u, 8u));

TEST(ClientBatchTest, SingleClientEqualsSequentialForward) {
  BatchFixture f(1, 60);
  auto hs = f.forwards();
  ServerNode node(f.m.b, 0.1), solo(f.m.b, 0.1);
  ClientBatchServer cbs(node, 1);
  EXPECT_EQ(cbs.forward(hs)[0], solo.server_forward(hs[0]));
}

TEST(ClientBatchTest, ArrivalOrderDoesNotMatter) {
  BatchFixture f(4, 61);
  auto hs = f.forwards();
  auto run = [&](std::vector<std::size_t> perm) {
    ServerNode node(f.m.b, 0.1);
    ClientBatchServer cbs(node, 4);
    std::vector<HiddenStateMsg> in;
    for (auto i : perm) in.push_back(hs[i]);
    auto out = cbs.forward(in);
    std::vector<GradMsg> gs;
    for (std::size_t i = 0; i < 4; ++i) {
      GradMsg g;
      g.client_id = i;
      std::mt19937_64 rng(i);
      g.tensor = random_normal(out[i].tensor.shape(), 1.0, rng);
      gs.push_back(g);
    }
    std::vector<GradMsg> gin;
    for (auto i : perm) gin.push_back(gs[i]);
    auto back = cbs.backward(gin);
    return std::tuple(out, back, cbs.last_server_grads());
  };
  auto base = run({0, 1, 2, 3});
  EXPECT_EQ(run({3, 1, 0, 2}), base);
  EXPECT_EQ(run({2, 3, 1, 0}), base);
}

TEST(ClientBatchTest, ZeroGradClientContributesNothing) {
  BatchFixture f(3, 62);
  auto hs = f.forwards();
  ServerNode node(f.m.b, 0.0);
  ClientBatchServer cbs(node, 3);
  auto out = cbs.forward(hs);
  std::vector<GradMsg> gs;
  for (std::size_t i = 0; i < 3; ++i) gs.push_back(f.clients[i].client_loss_and_backward(out[i], f.batches[i].targets).grad);
  gs[1].tensor.fill(0.0);
  auto back = cbs.backward(gs);
  for (double v : back[1].tensor.data()) EXPECT_EQ(v, 0.0);
  const auto with_zero = cbs.last_server_grads();

  // same result from the other two alone
  ServerNode node2(f.m.b, 0.0);
  ClientBatchServer two(node2, 2);
  std::vector<HiddenStateMsg> h2{hs[0], hs[2]};
  two.forward(h2);
  std::vector<GradMsg> g2{gs[0], gs[2]};
  two.backward(g2);
  for (std::size_t k = 0; k < with_zero.size(); ++k) EXPECT_LT(relative_error(with_zero[k], two.last_server_grads()[k]), 1e-10);
}

TEST(ClientBatchTest, MismatchedSeqLenIsBatchIncompatible) {
  BatchFixture f(2, 63);
  auto hs = f.forwards();
  auto b = corpus_batch(shard(1), 0, 1);
  b.tokens.seq = 8;
  b.tokens.ids.resize(8);
  b.meta = MaskMeta::uniform(8, 0, 1);
  hs[1] = f.clients[1].client_forward(b.tokens, b.meta);
  ServerNode node(f.m.b, 0.1);
  ClientBatchServer cbs(node, 2);
  EXPECT_EQ(code_of([&] { cbs.forward(hs); }), ErrorCode::kBatchIncompatible);
}

TEST(ClientBatchTest, MissingGradientAndOrder) {
  BatchFixture f(2, 64);
  auto hs = f.forwards();
  ServerNode node(f.m.b, 0.1);
  ClientBatchServer cbs(node, 2);
  std::vector<GradMsg> none;
  EXPECT_EQ(code_of([&] { cbs.backward(none); }), ErrorCode::kProtocolOrder);
  auto out = cbs.forward(hs);
  EXPECT_EQ(code_of([&] { cbs.forward(hs); }), ErrorCode::kProtocolOrder);
  std::vector<GradMsg> one{f.clients[0].client_loss_and_backward(out[0], f.batches[0].targets).grad};
  EXPECT_EQ(code_of([&] { cbs.backward(one); }), ErrorCode::kBarrierTimeout);
  std::vector<HiddenStateMsg> dup{hs[0], hs[0]};
  ServerNode node2(f.m.b, 0.1);
  ClientBatchServer cbs2(node2, 2);
  EXPECT_EQ(code_of([&] { cbs2.forward(dup); }), ErrorCode::kProtocol);
}

// Networked barrier vs the same steps driven in-process.
class ClientBatchNetwork : public ::testing::TestWithParam<TransportKind> {};

TEST_P(ClientBatchNetwork, MatchesInProcessSteps) {
  const std::size_t M = 3, steps = 4;
  FederationOptions opt;
  opt.seed = 70;
  opt.lr = 0.2;
  opt.num_clients = M;
  opt.transport = GetParam();
  opt.noise = {0.02, NoiseTarget::kForwardHA, 9};
  std::vector<ToyCorpus> shards{shard(1), shard(2), shard(3)};
  DataFn data = [&](std::size_t i, std::size_t s) { return corpus_batch(shards[i], s, 2); };
  Federation fed(opt, client_batch_host());
  auto result = run_client_batch(fed, data, steps);
  ASSERT_FALSE(result.error) << result.error_text;
  ASSERT_EQ(result.records.size(), M * steps);

  auto m = build_partitioned(opt.model, opt.partition, opt.seed);
  std::vector<ClientNode> clients;
  for (std::size_t i = 0; i < M; ++i) clients.emplace_back(i, m.a, m.c, opt.lr, opt.noise);
  ServerNode node(m.b, opt.lr);
  ClientBatchServer cbs(node, M);
  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<HiddenStateMsg> hs;
    for (std::size_t i = 0; i < M; ++i) hs.push_back(clients[i].client_forward(data(i, s).tokens, data(i, s).meta));
    auto out = cbs.forward(hs);
    std::vector<GradMsg> gs;
    for (std::size_t i = 0; i < M; ++i) {
      auto l = clients[i].client_loss_and_backward(out[i], data(i, s).targets);
      EXPECT_EQ(result.records[s * M + i].loss, l.loss);
      EXPECT_EQ(result.records[s * M + i].client_id, i);
      gs.push_back(l.grad);
    }
    auto back = cbs.backward(gs);
    for (std::size_t i = 0; i < M; ++i) clients[i].finish(back[i]);
  }
  fed.shutdown();
  EXPECT_EQ(fed.server().model().trainable().size(), node.model().trainable().size());
  auto got = fed.server().model().trainable();
  auto want = node.model().trainable();
  for (std::size_t k = 0; k < got.size(); ++k) EXPECT_EQ(got[k]->value, want[k]->value);
  const auto comm = fed.total_client_comm();
  EXPECT_EQ(comm[MsgClass::kHiddenState].sent, M * steps);
  EXPECT_EQ(comm[MsgClass::kGrad].sent, M * steps);
}

INSTANTIATE_TEST_SUITE_P(Kinds, ClientBatchNetwork, ::testing::Values(TransportKind::kLoopback, TransportKind::kTcp),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(ClientBatchTest, StragglerHitsBarrierTimeout) {
  FederationOptions opt;
  opt.seed = 71;
  opt.num_clients = 2;
  Federation fed(opt, client_batch_host(std::chrono::milliseconds(200)));
  auto b = corpus_batch(shard(4), 0, 1);
  EXPECT_EQ(code_of([&] { fed.client(0).train_step(fed.channel(0), b); }), ErrorCode::kBarrierTimeout);
}

// ---------------------------------------------------------------------------

TEST(StrategyConfigTest, Validation) {
  StrategyConfig s;
  s.validate();
  s.num_clients = 0;
  EXPECT_EQ(code_of([&] { s.validate(); }), ErrorCode::kConfig);
  s.num_clients = 2;
  s.sync_interval = 0;
  EXPECT_EQ(code_of([&] { s.validate(); }), ErrorCode::kConfig);
  s.sync_interval = 1;
  s.weights = {1.0};
  EXPECT_EQ(code_of([&] { s.validate(); }), ErrorCode::kConfig);
  s.weights = {1.0, -1.0};
  EXPECT_EQ(code_of([&] { s.validate(); }), ErrorCode::kConfig);
  EXPECT_EQ(parse_strategy("client_batch"), StrategyMode::kClientBatch);
  EXPECT_EQ(code_of([&] { parse_strategy("async"); }), ErrorCode::kConfig);
}

FederationOptions hier_base(std::uint64_t seed) {
  FederationOptions o;
  o.seed = seed;
  o.lr = 0.2;
  return o;
}

TEST(HierarchicalTest, SingleSubServerEqualsSequential) {
  auto corpus = shard(5);
  DataFn data = [&](std::size_t, std::size_t s) { return corpus_batch(corpus, s, 2); };
  StrategyConfig st;
  st.mode = StrategyMode::kServerHierarchical;
  st.sync_interval = 3;
  HierarchicalFederation h(hier_base(80), st);
  auto hr = h.run(data, 7);
  Federation seq(hier_base(80));
  auto sr = seq.run_sequential(data, 7);
  ASSERT_EQ(hr.records.size(), sr.records.size());
  for (std::size_t i = 0; i < sr.records.size(); ++i) EXPECT_EQ(hr.records[i].loss, sr.records[i].loss);
  EXPECT_EQ(hr.merges, 2u);
  h.sub(0).shutdown();
  seq.shutdown();
  auto a = h.sub(0).server().model().trainable(), b = seq.server().model().trainable();
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k]->value, b[k]->value);
}

TEST(HierarchicalTest, IdenticalBranchesMergeToEitherBranch) {
  auto corpus = shard(6);
  StrategyConfig st;
  st.num_clients = 2;
  st.sync_interval = 4;
  HierarchicalFederation h(hier_base(81), st);
  std::vector<SegmentModel> captured;
  h.set_merge_observer([&](std::size_t, std::span<const SegmentModel* const> subs) {
    for (auto* s : subs) captured.push_back(*s);
  });
  auto r = h.run([&](std::size_t, std::size_t s) { return corpus_batch(corpus, s, 2); }, 4);
  ASSERT_FALSE(r.error);
  ASSERT_EQ(captured.size(), 2u);
  auto c = const_cast<SegmentModel&>(h.central()).trainable();
  auto x = captured[0].trainable(), y = captured[1].trainable();
  for (std::size_t k = 0; k < c.size(); ++k) {
    EXPECT_EQ(x[k]->value, y[k]->value);
    EXPECT_EQ(c[k]->value, x[k]->value);
  }
}

TEST(HierarchicalTest, MergeIsMeanOfCapturedSnapshots) {
  std::vector<ToyCorpus> shards{shard(7), shard(8)};
  StrategyConfig st;
  st.num_clients = 2;
  st.sync_interval = 10;
  HierarchicalFederation h(hier_base(82), st);
  std::vector<SegmentModel> captured;
  h.set_merge_observer([&](std::size_t, std::span<const SegmentModel* const> subs) {
    captured.clear();
    for (auto* s : subs) captured.push_back(*s);
  });
  auto r = h.run([&](std::size_t i, std::size_t s) { return corpus_batch(shards[i], s, 2); }, 10);
  ASSERT_FALSE(r.error);
  ASSERT_EQ(r.merges, 1u);
  auto c = const_cast<SegmentModel&>(h.central()).trainable();
  auto x = captured[0].trainable(), y = captured[1].trainable();
  bool differed = false;
  for (std::size_t k = 0; k < c.size(); ++k) {
    differed |= !(x[k]->value == y[k]->value);
    for (std::size_t j = 0; j < c[k]->value.size(); ++j) {
      EXPECT_NEAR(c[k]->value[j], 0.5 * (x[k]->value[j] + y[k]->value[j]), 1e-15);
    }
  }
  EXPECT_TRUE(differed);
  // redistributed to both sub-servers
  for (std::size_t i = 0; i < 2; ++i) {
    auto s = h.sub(i).server().model().trainable();
    for (std::size_t k = 0; k < c.size(); ++k) EXPECT_EQ(s[k]->value, c[k]->value);
  }
}

TEST(HierarchicalTest, BranchBetweenSyncsDependsOnlyOnItsShard) {
  std::vector<ToyCorpus> shards{shard(9), shard(10)};
  StrategyConfig st;
  st.num_clients = 2;
  st.sync_interval = 5;
  HierarchicalFederation h(hier_base(83), st);
  std::vector<SegmentModel> captured;
  h.set_merge_observer([&](std::size_t, std::span<const SegmentModel* const> subs) {
    if (captured.empty())
      for (auto* s : subs) captured.push_back(*s);
  });
  h.run([&](std::size_t i, std::size_t s) { return corpus_batch(shards[i], s, 2); }, 5);
  for (std::size_t i = 0; i < 2; ++i) {
    auto o = hier_base(83);
    o.first_client_id = i;
    Federation solo(o);
    solo.run_sequential([&](std::size_t, std::size_t s) { return corpus_batch(shards[i], s, 2); }, 5);
    solo.shutdown();
    auto a = captured[i].trainable(), b = solo.server().model().trainable();
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k]->value, b[k]->value);
  }
}

TEST(HierarchicalTest, FailedSubServerIsExcludedAndReported) {
  std::vector<ToyCorpus> shards{shard(11), shard(12)};
  StrategyConfig st;
  st.num_clients = 2;
  st.sync_interval = 2;
  HierarchicalFederation h(hier_base(84), st);
  std::vector<std::size_t> merged_counts;
  h.set_merge_observer([&](std::size_t, std::span<const SegmentModel* const> subs) { merged_counts.push_back(subs.size()); });
  auto r = h.run(
      [&](std::size_t i, std::size_t s) {
        if (i == 1 && s == 3) throw Error(ErrorCode::kProtocol, "shard unavailable");
        return corpus_batch(shards[i], s, 2);
      },
      6);
  ASSERT_FALSE(r.error);
  ASSERT_EQ(r.failures.size(), 1u);
  EXPECT_EQ(r.failures[0].sub_server, 1u);
  EXPECT_EQ(r.failures[0].step, 3u);
  EXPECT_EQ(merged_counts, (std::vector<std::size_t>{2, 1, 1}));
  EXPECT_FALSE(h.alive(1));
  auto c = const_cast<SegmentModel&>(h.central()).trainable();
  auto s0 = h.sub(0).server().model().trainable();
  for (std::size_t k = 0; k < c.size(); ++k) EXPECT_EQ(c[k]->value, s0[k]->value);
}

TEST(HierarchicalTest, ClientAveragingIsOptional) {
  std::vector<ToyCorpus> shards{shard(13), shard(14)};
  for (bool avg : {false, true}) {
    StrategyConfig st;
    st.num_clients = 2;
    st.sync_interval = 3;
    st.average_clients = avg;
    HierarchicalFederation h(hier_base(85), st);
    h.run([&](std::size_t i, std::size_t s) { return corpus_batch(shards[i], s, 2); }, 3);
    auto a0 = h.sub(0).client(0).a.trainable(), a1 = h.sub(1).client(0).a.trainable();
    bool equal = true;
    for (std::size_t k = 0; k < a0.size(); ++k) equal &= a0[k]->value == a1[k]->value;
    EXPECT_EQ(equal, avg);
  }
}

// ---------------------------------------------------------------------------

bool contains(const Bytes& hay, const Bytes& needle) {
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

template <class T>
Bytes pack(std::span<const TokenId> ids) {
  Bytes out;
  for (TokenId t : ids) {
    const T v = static_cast<T>(t);
    for (std::size_t k = 0; k < sizeof(T); ++k) out.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * k)));
  }
  return out;
}

void expect_no_tokens(const std::vector<Bytes>& frames, const std::vector<TrainBatch>& batches, std::size_t d) {
  ASSERT_FALSE(frames.empty());
  for (const auto& f : frames) {
    const Message m = decode(f);
    const auto tag = static_cast<std::uint64_t>(message_class(m));
    EXPECT_GE(tag, 1u);
    EXPECT_LE(tag, 4u);
    if (const auto* h = std::get_if<HiddenStateMsg>(&m)) {
      EXPECT_EQ(h->tensor.dim(2), d);
    }
    for (const auto& b : batches) {
      for (std::size_t r = 0; r < b.tokens.batch; ++r) {
        std::span<const TokenId> row(b.tokens.ids.data() + r * b.tokens.seq, b.tokens.seq);
        EXPECT_FALSE(contains(f, pack<std::uint64_t>(row)));
        EXPECT_FALSE(contains(f, pack<std::uint32_t>(row)));
      }
    }
  }
}

TEST(PrivacyTest, RawTokensNeverOnTheWireInAnyMode) {
  std::vector<ToyCorpus> shards{shard(15), shard(16)};
  DataFn data = [&](std::size_t i, std::size_t s) { return corpus_batch(shards[i], s, 2); };
  std::vector<TrainBatch> used;
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t s = 0; s < 3; ++s) used.push_back(data(i, s));
  const std::size_t d = ModelConfig{}.hidden_size;
  auto opt = hier_base(90);
  opt.num_clients = 2;
  opt.log_frames = true;
  auto gather = [](Federation& f) {
    std::vector<Bytes> all;
    for (std::size_t i = 0; i < f.size(); ++i) {
      for (auto& x : f.client_log(i).frames()) all.push_back(x);
      for (auto& x : f.server_log(i).frames()) all.push_back(x);
    }
    return all;
  };
  {
    Federation f(opt);
    f.run_sequential(data, 3);
    expect_no_tokens(gather(f), used, d);
  }
  {
    Federation f(opt, client_batch_host());
    run_client_batch(f, data, 3);
    expect_no_tokens(gather(f), used, d);
  }
  {
    StrategyConfig st;
    st.num_clients = 2;
    st.sync_interval = 2;
    auto o = opt;
    o.num_clients = 1;
    HierarchicalFederation h(o, st);
    h.run(data, 3);
    for (std::size_t i = 0; i < 2; ++i) expect_no_tokens(gather(h.sub(i)), used, d);
  }
}

}  // namespace
}  // namespace flsplit
