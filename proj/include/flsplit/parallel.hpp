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

// Multi-client schedules: sequential (see training.hpp), client-batch with a
// server-side barrier, and hierarchical sub-servers with periodic FedAvg.

#include <algorithm>
#include <condition_variable>
#include <deque>
#include <numeric>

#include "flsplit/training.hpp"

namespace flsplit {

enum class StrategyMode { kSequential, kClientBatch, kServerHierarchical };

inline std::string_view to_string(StrategyMode m) {
  switch (m) {
    case StrategyMode::kSequential: return "sequential";
    case StrategyMode::kClientBatch: return "client_batch";
    case StrategyMode::kServerHierarchical: return "server_hierarchical";
  }
  return "sequential";
}

inline StrategyMode parse_strategy(std::string_view s) {
  if (s == "sequential") return StrategyMode::kSequential;
  if (s == "client_batch") return StrategyMode::kClientBatch;
  if (s == "server_hierarchical") return StrategyMode::kServerHierarchical;
  throw Error(ErrorCode::kConfig, "unknown strategy '" + std::string(s) + "'");
}

inline constexpr std::chrono::milliseconds kDefaultBarrierTimeout{30000};

struct StrategyConfig {
  StrategyMode mode = StrategyMode::kSequential;
  std::size_t num_clients = 1;
  std::size_t sync_interval = 1;  // hierarchical: steps between merges
  std::vector<double> weights;    // per client / sub-server; empty means equal
  bool average_clients = false;   // hierarchical: also merge client adapters
  std::chrono::milliseconds barrier_timeout = kDefaultBarrierTimeout;

  void validate() const {
    if (num_clients < 1) throw Error(ErrorCode::kConfig, "num_clients must be >= 1");
    if (sync_interval < 1) throw Error(ErrorCode::kConfig, "sync_interval must be >= 1");
    if (!weights.empty() && weights.size() != num_clients) {
      throw Error(ErrorCode::kConfig, "weights length " + std::to_string(weights.size()) + " != num_clients " +
                                          std::to_string(num_clients));
    }
    for (double w : weights)
      if (!(w >= 0.0) || !std::isfinite(w)) throw Error(ErrorCode::kConfig, "weights must be finite and >= 0");
    if (barrier_timeout.count() <= 0) throw Error(ErrorCode::kConfig, "barrier timeout must be positive");
  }

  double weight(std::size_t i) const { return weights.empty() ? 1.0 : weights.at(i); }
};

// ---------------------------------------------------------------------------

// One pending message per slot; released when every slot has delivered.
class StepBarrier {
 public:
  explicit StepBarrier(std::size_t slots) : queues_(slots), closed_(slots, false) {}

  void deposit(std::size_t slot, Message m) {
    std::lock_guard lock(mu_);
    queues_.at(slot).push_back(std::move(m));
    cv_.notify_all();
  }

  void close_slot(std::size_t slot) {
    std::lock_guard lock(mu_);
    closed_.at(slot) = true;
    cv_.notify_all();
  }

  // Waits for the first arrival without limit, then at most `timeout` for the
  // rest. Returns early when a shutdown control arrives.
  std::vector<Message> collect(std::chrono::milliseconds timeout) {
    std::unique_lock lock(mu_);
    auto any = [&] {
      for (std::size_t i = 0; i < queues_.size(); ++i)
        if (!queues_[i].empty() || closed_[i]) return true;
      return false;
    };
    cv_.wait(lock, any);
    const auto deadline = Clock::now() + timeout;
    auto done = [&] {
      for (std::size_t i = 0; i < queues_.size(); ++i) {
        if (!queues_[i].empty() && is_shutdown(queues_[i].front())) return true;
        if (queues_[i].empty() && closed_[i]) return true;
      }
      return std::all_of(queues_.begin(), queues_.end(), [](const auto& q) { return !q.empty(); });
    };
    if (!cv_.wait_until(lock, deadline, done)) {
      std::string missing;
      for (std::size_t i = 0; i < queues_.size(); ++i)
        if (queues_[i].empty()) missing += (missing.empty() ? "" : ",") + std::to_string(i);
      throw Error(ErrorCode::kBarrierTimeout, "barrier timed out waiting for slot(s) " + missing);
    }
    for (std::size_t i = 0; i < queues_.size(); ++i) {
      if (!queues_[i].empty() && is_shutdown(queues_[i].front())) return {queues_[i].front()};
      if (queues_[i].empty() && closed_[i]) throw Error(ErrorCode::kChannelClosed, "slot " + std::to_string(i) + " closed");
    }
    std::vector<Message> out;
    for (auto& q : queues_) {
      out.push_back(std::move(q.front()));
      q.pop_front();
    }
    return out;
  }

  static bool is_shutdown(const Message& m) {
    const auto* c = std::get_if<ControlMsg>(&m);
    return c && c->kind == ControlKind::kShutdown;
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<std::deque<Message>> queues_;
  std::vector<bool> closed_;
};

// Server side of client-batch training: all M hidden states of a step go
// through one forward on the concatenated batch, and all M gradients through
// one backward. Slices and replies are in client-id order.
class ClientBatchServer {
 public:
  ClientBatchServer(ServerNode& node, std::size_t num_clients,
                    std::chrono::milliseconds barrier_timeout = kDefaultBarrierTimeout)
      : node_(node), m_(num_clients), timeout_(barrier_timeout) {
    if (num_clients == 0) throw Error(ErrorCode::kConfig, "num_clients must be >= 1");
  }

  std::vector<HiddenStateMsg> forward(std::span<const HiddenStateMsg> msgs) {
    if (msgs.size() != m_) {
      throw Error(ErrorCode::kBarrierTimeout, "client batch has " + std::to_string(msgs.size()) + " of " +
                                                  std::to_string(m_) + " clients");
    }
    auto order = by_client(msgs);
    const auto& first = msgs[order[0]];
    const std::size_t d = node_.model().config().hidden_size;
    std::vector<Tensor> parts;
    std::vector<MaskMeta> metas;
    for (std::size_t i : order) {
      const auto& m = msgs[i];
      if (!(m.flags & kFlagTrain) || (m.flags & kFlagPrefill)) {
        throw Error(ErrorCode::kProtocol, "client batch carries training hidden states only");
      }
      m.mask_meta.validate();
      if (m.tensor.rank() != 3 || m.tensor.dim(2) != d || m.tensor.dim(0) != m.mask_meta.batch ||
          m.tensor.dim(1) != m.mask_meta.seq_len || m.positions.size() != m.tensor.dim(1)) {
        throw Error(ErrorCode::kProtocol, "client " + std::to_string(m.client_id) + " sent " +
                                              shape_str(m.tensor.shape()) + " that does not fit the server segment");
      }
      if (m.tensor.dim(1) != first.tensor.dim(1) || m.positions != first.positions) {
        throw Error(ErrorCode::kBatchIncompatible, "client " + std::to_string(m.client_id) + " seq_len " +
                                                       std::to_string(m.tensor.dim(1)) + " differs from " +
                                                       std::to_string(first.tensor.dim(1)));
      }
      parts.push_back(m.tensor);
      metas.push_back(m.mask_meta);
    }
    const Tensor cat = concat_rows(parts);
    const MaskMeta meta = concat_meta(metas);
    std::lock_guard lock(node_.mutex());
    if (!pending_.empty()) throw Error(ErrorCode::kProtocolOrder, "client batch forward while a backward is pending");
    const Tensor out = node_.model().forward(cat, meta, first.positions, nullptr, {true, false});
    std::vector<HiddenStateMsg> replies;
    std::size_t row = 0;
    for (std::size_t i : order) {
      const auto& m = msgs[i];
      HiddenStateMsg r;
      r.client_id = m.client_id;
      r.step_id = m.step_id;
      r.session_id = m.session_id;
      r.flags = (m.flags & ~kFlagFullMask) | kFlagReply;
      r.scalar_width = m.scalar_width;
      r.positions = m.positions;
      r.mask_meta = m.mask_meta;
      r.tensor = slice_rows(out, row, m.tensor.dim(0));
      pending_.push_back({m.client_id, m.step_id, row, m.tensor.dim(0)});
      row += m.tensor.dim(0);
      replies.push_back(std::move(r));
    }
    shape_ = out.shape();
    return replies;
  }

  std::vector<GradMsg> backward(std::span<const GradMsg> grads) {
    std::lock_guard lock(node_.mutex());
    if (pending_.empty()) throw Error(ErrorCode::kProtocolOrder, "client batch backward without forward");
    if (grads.size() != pending_.size()) {
      throw Error(ErrorCode::kBarrierTimeout, "client batch backward has " + std::to_string(grads.size()) + " of " +
                                                  std::to_string(pending_.size()) + " gradients");
    }
    auto order = by_client(grads);
    std::vector<Tensor> parts;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const auto& g = grads[order[k]];
      const auto& p = pending_[k];
      if (g.client_id != p.client_id || g.step_id != p.step_id) {
        throw Error(ErrorCode::kProtocolOrder, "gradient for client " + std::to_string(g.client_id) + " step " +
                                                   std::to_string(g.step_id) + " without matching forward");
      }
      if (g.tensor.shape() != Shape{p.rows, shape_[1], shape_[2]}) {
        throw Error(ErrorCode::kProtocol, "gradient " + shape_str(g.tensor.shape()) + " does not match its slice");
      }
      parts.push_back(g.tensor);
    }
    auto sg = node_.model().backward(concat_rows(parts));
    last_grads_ = sg.param_grads;
    apply_lora_step(node_.model(), sg.param_grads, node_.lr());
    std::vector<GradMsg> out;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const auto& g = grads[order[k]];
      GradMsg r;
      r.client_id = g.client_id;
      r.step_id = g.step_id;
      r.session_id = g.session_id;
      r.scalar_width = g.scalar_width;
      r.tensor = slice_rows(sg.input_grad, pending_[k].row, pending_[k].rows);
      out.push_back(std::move(r));
    }
    pending_.clear();
    return out;
  }

  // Server adapter gradients of the last backward, before the update.
  const std::vector<Tensor>& last_server_grads() const { return last_grads_; }

  // Barrier loop over one channel per client. A failed step is reported to
  // every client and ends the loop.
  void serve(std::span<Channel* const> chans) {
    if (chans.size() != m_) throw Error(ErrorCode::kConfig, "one channel per client required");
    StepBarrier barrier(m_);
    std::vector<std::thread> readers;
    for (std::size_t i = 0; i < m_; ++i) {
      readers.emplace_back([&barrier, ch = chans[i], i] {
        for (;;) {
          try {
            Message m = ch->recv();
            const bool stop = StepBarrier::is_shutdown(m);
            barrier.deposit(i, std::move(m));
            if (stop) return;
          } catch (const Error&) {
            barrier.close_slot(i);
            return;
          }
        }
      });
    }
    try {
      for (;;) {
        auto hs = collect<HiddenStateMsg>(barrier);
        if (hs.empty()) break;
        reply(chans, forward(hs));
        auto gs = collect<GradMsg>(barrier);
        if (gs.empty()) break;
        reply(chans, backward(gs));
      }
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kChannelClosed) {
        for (auto* ch : chans) {
          try {
            ch->send(ControlMsg{ControlKind::kError, 0, 0, static_cast<std::uint64_t>(e.code()), e.what()});
          } catch (const Error&) {
          }
        }
      }
      std::lock_guard lock(node_.mutex());
      pending_.clear();
    }
    for (auto* ch : chans) ch->close();
    for (auto& t : readers) t.join();
  }

 private:
  struct Slice {
    std::uint64_t client_id;
    std::uint64_t step_id;
    std::size_t row;
    std::size_t rows;
  };

  template <class T>
  static std::vector<std::size_t> by_client(std::span<const T> msgs) {
    std::vector<std::size_t> order(msgs.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto x, auto y) { return msgs[x].client_id < msgs[y].client_id; });
    for (std::size_t k = 1; k < order.size(); ++k) {
      if (msgs[order[k]].client_id == msgs[order[k - 1]].client_id) {
        throw Error(ErrorCode::kProtocol, "client " + std::to_string(msgs[order[k]].client_id) + " appears twice");
      }
    }
    return order;
  }

  template <class T>
  std::vector<T> collect(StepBarrier& barrier) {
    auto ms = barrier.collect(timeout_);
    std::vector<T> out;
    for (std::size_t slot = 0; slot < ms.size(); ++slot) {
      auto& m = ms[slot];
      if (StepBarrier::is_shutdown(m)) return {};
      auto* t = std::get_if<T>(&m);
      if (!t) throw Error(ErrorCode::kProtocolOrder, std::string("unexpected ") + std::string(to_string(
                                                         static_cast<MsgClass>(message_class(m)))) + " in client batch");
      route_[t->client_id] = slot;
      out.push_back(std::move(*t));
    }
    return out;
  }

  template <class T>
  void reply(std::span<Channel* const> chans, const std::vector<T>& msgs) {
    for (const auto& m : msgs) chans[route_.at(m.client_id)]->send(m);
  }

  ServerNode& node_;
  std::size_t m_;
  std::chrono::milliseconds timeout_;
  std::vector<Slice> pending_;
  Shape shape_;
  std::vector<Tensor> last_grads_;
  std::map<std::uint64_t, std::size_t> route_;
};

// Host running ClientBatchServer::serve on one thread over all server ends.
class ClientBatchHost : public Host {
 public:
  ClientBatchHost(ServerNode& node, std::vector<std::unique_ptr<Channel>> ends, std::chrono::milliseconds timeout)
      : ends_(std::move(ends)), server_(node, ends_.size(), timeout) {
    for (auto& e : ends_) raw_.push_back(e.get());
    thread_ = std::thread([this] { server_.serve(raw_); });
  }
  ~ClientBatchHost() override { stop(); }

  void stop() override {
    for (auto& e : ends_) e->close();
    if (thread_.joinable()) thread_.join();
  }

  ClientBatchServer& server() { return server_; }

 private:
  std::vector<std::unique_ptr<Channel>> ends_;
  std::vector<Channel*> raw_;
  ClientBatchServer server_;
  std::thread thread_;
};

inline HostFactory client_batch_host(std::chrono::milliseconds timeout = kDefaultBarrierTimeout) {
  return [timeout](ServerNode& node, std::vector<std::unique_ptr<Channel>> ends) -> std::unique_ptr<Host> {
    return std::make_unique<ClientBatchHost>(node, std::move(ends), timeout);
  };
}

inline void sort_records(std::vector<TrainStepRecord>& recs) {
  std::stable_sort(recs.begin(), recs.end(), [](const auto& x, const auto& y) {
    return std::tie(x.step, x.client_id) < std::tie(y.step, y.client_id);
  });
}

// Every client runs its steps on its own thread; the server barrier pairs them
// up per step. Records come back ordered by (step, client).
inline RoundResult run_client_batch_round(std::span<ClientNode* const> clients, std::span<Channel* const> channels,
                                          const ServerNode* server, const DataFn& data, std::size_t steps,
                                          const RecordSink& sink = {}) {
  if (clients.empty()) throw Error(ErrorCode::kConfig, "client batch needs at least one client");
  if (clients.size() != channels.size()) throw Error(ErrorCode::kConfig, "one channel per client required");
  std::vector<RoundResult> per(clients.size());
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < clients.size(); ++i) {
    threads.emplace_back([&, i] {
      const std::size_t base = clients[i]->step();
      for (std::size_t s = 0; s < steps; ++s) {
        try {
          per[i].records.push_back(clients[i]->train_step(*channels[i], data(i, base + s), server));
        } catch (const Error& e) {
          per[i].error = e.code();
          per[i].error_text = "client " + std::to_string(clients[i]->id()) + ": " + e.what();
          return;
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  RoundResult out;
  for (auto& r : per) {
    out.records.insert(out.records.end(), r.records.begin(), r.records.end());
    if (r.error && !out.error) {
      out.error = r.error;
      out.error_text = r.error_text;
    }
  }
  sort_records(out.records);
  if (sink)
    for (const auto& r : out.records) sink(r);
  return out;
}

inline RoundResult run_client_batch(Federation& fed, const DataFn& data, std::size_t steps,
                                    const RecordSink& sink = {}) {
  std::vector<ClientNode*> cs;
  std::vector<Channel*> chs;
  for (std::size_t i = 0; i < fed.size(); ++i) {
    cs.push_back(&fed.client(i));
    chs.push_back(&fed.channel(i));
  }
  return run_client_batch_round(cs, chs, &fed.server(), data, steps, sink);
}

// ---------------------------------------------------------------------------

struct HierarchicalResult {
  std::vector<TrainStepRecord> records;  // ordered by (step, client)
  std::size_t merges = 0;
  struct Failure {
    std::size_t sub_server;
    std::size_t step;
    ErrorCode code;
    std::string text;
  };
  std::vector<Failure> failures;
  std::optional<ErrorCode> error;  // set when no sub-server is left
  std::string error_text;
};

// Called right before each merge with the sub-server B segments taking part.
using MergeObserver = std::function<void(std::size_t merge_index, std::span<const SegmentModel* const> subs)>;

// M independent pipelines (sub-server + client), each on its own threads,
// synchronized every S steps: the central copy of B becomes the weighted
// FedAvg of the live sub-servers and is pushed back to all of them.
class HierarchicalFederation {
 public:
  HierarchicalFederation(const FederationOptions& base, const StrategyConfig& strategy) : strategy_(strategy) {
    strategy.validate();
    for (std::size_t i = 0; i < strategy.num_clients; ++i) {
      FederationOptions o = base;
      o.num_clients = 1;
      o.first_client_id = base.first_client_id + i;
      subs_.push_back(std::make_unique<Federation>(o));
      alive_.push_back(true);
    }
    central_ = subs_.front()->server().model();
  }

  std::size_t size() const { return subs_.size(); }
  Federation& sub(std::size_t i) { return *subs_.at(i); }
  const SegmentModel& central() const { return central_; }
  bool alive(std::size_t i) const { return alive_.at(i); }
  void set_merge_observer(MergeObserver f) { observer_ = std::move(f); }

  // data(i, step) feeds pipeline i.
  HierarchicalResult run(const DataFn& data, std::size_t steps, const RecordSink& sink = {}) {
    HierarchicalResult out;
    std::size_t done = 0;
    while (done < steps) {
      const std::size_t chunk = std::min(strategy_.sync_interval - since_merge_, steps - done);
      std::vector<RoundResult> per(size());
      std::vector<std::thread> threads;
      for (std::size_t i = 0; i < size(); ++i) {
        if (!alive_[i]) continue;
        threads.emplace_back([&, i] {
          const std::size_t base = subs_[i]->client(0).step();
          per[i] = subs_[i]->run_sequential([&](std::size_t, std::size_t s) { return data(i, base + s); }, chunk);
        });
      }
      for (auto& t : threads) t.join();
      std::vector<TrainStepRecord> recs;
      for (std::size_t i = 0; i < size(); ++i) {
        if (!alive_[i]) continue;
        recs.insert(recs.end(), per[i].records.begin(), per[i].records.end());
        if (per[i].error) {
          alive_[i] = false;
          out.failures.push_back({i, subs_[i]->client(0).step(), *per[i].error, per[i].error_text});
        }
      }
      sort_records(recs);
      if (sink)
        for (const auto& r : recs) sink(r);
      out.records.insert(out.records.end(), recs.begin(), recs.end());
      done += chunk;
      since_merge_ += chunk;
      if (std::none_of(alive_.begin(), alive_.end(), [](bool a) { return a; })) {
        out.error = ErrorCode::kMerge;
        out.error_text = "every sub-server failed";
        return out;
      }
      if (since_merge_ == strategy_.sync_interval) {
        merge(out.merges++);
        since_merge_ = 0;
      }
    }
    return out;
  }

  // Weighted FedAvg over the live sub-servers (and their clients when
  // average_clients is set), redistributed to everyone alive.
  void merge(std::size_t index = 0) {
    std::vector<const SegmentModel*> bs, as, cs;
    std::vector<double> w;
    for (std::size_t i = 0; i < size(); ++i) {
      if (!alive_[i]) continue;
      bs.push_back(&subs_[i]->server().model());
      as.push_back(&subs_[i]->client(0).a);
      cs.push_back(&subs_[i]->client(0).c);
      w.push_back(strategy_.weight(i));
    }
    if (bs.empty()) throw Error(ErrorCode::kMerge, "no sub-server to merge");
    if (observer_) observer_(index, bs);
    central_ = fedavg_merge(std::span<const SegmentModel* const>(bs), w);
    std::optional<SegmentModel> a, c;
    if (strategy_.average_clients) {
      a = fedavg_merge(std::span<const SegmentModel* const>(as), w);
      c = fedavg_merge(std::span<const SegmentModel* const>(cs), w);
    }
    for (std::size_t i = 0; i < size(); ++i) {
      if (!alive_[i]) continue;
      std::lock_guard lock(subs_[i]->server().mutex());
      copy_trainable(central_, subs_[i]->server().model());
      if (a) {
        copy_trainable(*a, subs_[i]->client(0).a);
        copy_trainable(*c, subs_[i]->client(0).c);
      }
    }
  }

  CommSnapshot total_client_comm() const {
    CommSnapshot s;
    for (const auto& f : subs_) s += f->total_client_comm();
    return s;
  }

 private:
  StrategyConfig strategy_;
  std::vector<std::unique_ptr<Federation>> subs_;
  std::vector<bool> alive_;
  SegmentModel central_;
  std::size_t since_merge_ = 0;
  MergeObserver observer_;
};

}  // namespace flsplit
