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

// One split training step per client, in four hops:
//   1. client -> server  HiddenStateMsg  h_A (optionally noised)
//   2. server -> client  HiddenStateMsg  h_B
//   3. client -> server  GradMsg         dL/dh_B
//   4. server -> client  GradMsg         dL/dh_A
// followed by plain SGD on the adapters of all three segments.

#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <thread>

#include <nlohmann/json.hpp>

#include "flsplit/checkpoint.hpp"
#include "flsplit/model.hpp"
#include "flsplit/noise.hpp"
#include "flsplit/transport.hpp"
#include "flsplit/wire.hpp"

namespace flsplit {

struct TrainBatch {
  TokenBatch tokens;
  MaskMeta meta;
  std::vector<TokenId> targets;  // [batch * seq], kIgnoreIndex where unsupervised
};

struct GradNorms {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
};

struct TrainStepRecord {
  std::size_t step = 0;
  std::uint64_t client_id = 0;
  double loss = 0.0;
  std::size_t tokens = 0;
  GradNorms grad_norm;
  CommSnapshot comm;
  bool diverged = false;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["step"] = step;
    j["client_id"] = client_id;
    j["loss"] = loss;
    j["tokens"] = tokens;
    j["grad_norm"] = {{"a", grad_norm.a}, {"b", grad_norm.b}, {"c", grad_norm.c}};
    j["comm"] = comm.to_json();
    j["diverged"] = diverged;
    return j;
  }
};

inline void check_context(std::size_t seq, const ModelConfig& cfg) {
  if (seq > cfg.max_context) {
    throw Error(ErrorCode::kContextOverflow,
                "input length " + std::to_string(seq) + " exceeds context " + std::to_string(cfg.max_context));
  }
}

inline void check_batch(const TokenBatch& t, const MaskMeta& meta) {
  meta.validate();
  if (meta.seq_len != t.seq || meta.batch != t.batch || t.ids.size() != t.batch * t.seq) {
    throw Error(ErrorCode::kDimension, "token batch does not match mask metadata");
  }
}

// ---------------------------------------------------------------------------

class ServerNode {
 public:
  ServerNode(SegmentModel b, double lr) : b_(std::move(b)), lr_(lr) {}

  // Called after the legitimate forward of every training message, under the
  // server lock. The message is the one that arrived, unchanged.
  void set_observer(std::function<void(const HiddenStateMsg&)> f) {
    std::lock_guard lock(mu_);
    observer_ = std::move(f);
  }

  HiddenStateMsg server_forward(const HiddenStateMsg& msg) {
    std::lock_guard lock(mu_);
    return forward_locked(msg);
  }

  GradMsg server_backward(const GradMsg& g) {
    std::lock_guard lock(mu_);
    return backward_locked(g);
  }

  CacheStepMsg server_decode(const CacheStepMsg& m) {
    std::lock_guard lock(mu_);
    return decode_locked(m);
  }

  std::optional<Message> handle(const Message& msg) {
    std::lock_guard lock(mu_);
    if (const auto* h = std::get_if<HiddenStateMsg>(&msg)) return Message(forward_locked(*h));
    if (const auto* g = std::get_if<GradMsg>(&msg)) return Message(backward_locked(*g));
    if (const auto* c = std::get_if<CacheStepMsg>(&msg)) return Message(decode_locked(*c));
    const auto& ctl = std::get<ControlMsg>(msg);
    if (ctl.kind == ControlKind::kEndSession) {
      sessions_.erase({ctl.client_id, ctl.session_id});
      return Message(ControlMsg{ControlKind::kAck, ctl.client_id, ctl.session_id, 0, ""});
    }
    return std::nullopt;
  }

  // Serves one connection until shutdown or disconnect. Errors in a message
  // are reported back to the peer as ControlMsg{kError}.
  void serve(Channel& ch) {
    for (;;) {
      Message m;
      try {
        m = ch.recv();
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kChannelClosed) report(ch, e);
        return;
      }
      if (const auto* c = std::get_if<ControlMsg>(&m); c && c->kind == ControlKind::kShutdown) return;
      try {
        if (auto reply = handle(m)) ch.send(*reply);
      } catch (const Error& e) {
        if (e.code() == ErrorCode::kChannelClosed) return;
        if (!report(ch, e)) return;
      }
    }
  }

  SegmentModel& model() { return b_; }
  const SegmentModel& model() const { return b_; }
  std::mutex& mutex() { return mu_; }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

  double last_grad_norm(std::uint64_t client_id) const {
    std::lock_guard lock(mu_);
    auto it = grad_norms_.find(client_id);
    return it == grad_norms_.end() ? 0.0 : it->second;
  }

  std::size_t forwards() const {
    std::lock_guard lock(mu_);
    return forwards_;
  }

  std::size_t session_count() const {
    std::lock_guard lock(mu_);
    return sessions_.size();
  }

  std::size_t cache_length(std::uint64_t client_id, std::uint64_t session_id) const {
    std::lock_guard lock(mu_);
    auto it = sessions_.find({client_id, session_id});
    return it == sessions_.end() ? 0 : it->second.length();
  }

 private:
  static bool report(Channel& ch, const Error& e) {
    try {
      ch.send(ControlMsg{ControlKind::kError, 0, 0, static_cast<std::uint64_t>(e.code()), e.what()});
      return true;
    } catch (const Error&) {
      return false;
    }
  }

  void check_hidden(const Tensor& t, std::size_t batch, std::size_t seq) const {
    if (t.rank() != 3 || t.dim(2) != b_.config().hidden_size || t.dim(0) != batch || t.dim(1) != seq) {
      throw Error(ErrorCode::kProtocol, "hidden state " + shape_str(t.shape()) + " does not fit server segment");
    }
  }

  HiddenStateMsg forward_locked(const HiddenStateMsg& msg) {
    msg.mask_meta.validate();
    const bool train = msg.flags & kFlagTrain;
    const bool prefill = msg.flags & kFlagPrefill;
    if (train && prefill) throw Error(ErrorCode::kProtocol, "train and prefill are exclusive");
    if (msg.positions.size() != msg.tensor.dim(1)) throw Error(ErrorCode::kProtocol, "positions do not match payload");
    check_hidden(msg.tensor, msg.mask_meta.batch, msg.mask_meta.seq_len);
    HiddenStateMsg out;
    out.client_id = msg.client_id;
    out.step_id = msg.step_id;
    out.session_id = msg.session_id;
    out.flags = (msg.flags & ~kFlagFullMask) | kFlagReply;
    out.scalar_width = msg.scalar_width;
    out.positions = msg.positions;
    out.mask_meta = msg.mask_meta;
    if (prefill) {
      auto key = std::pair(msg.client_id, msg.session_id);
      if (sessions_.count(key) && !sessions_[key].empty()) {
        throw Error(ErrorCode::kProtocol, "session " + std::to_string(msg.session_id) + " already prefilled");
      }
      KVCache& cache = sessions_[key] = b_.make_cache();
      out.tensor = b_.forward(msg.tensor, msg.mask_meta, msg.positions, &cache);
    } else if (train) {
      if (pending_ && *pending_ != msg.client_id) {
        throw Error(ErrorCode::kProtocolOrder, "client " + std::to_string(msg.client_id) + " forward while client " +
                                                   std::to_string(*pending_) + " awaits backward");
      }
      out.tensor = b_.forward(msg.tensor, msg.mask_meta, msg.positions);
      pending_ = msg.client_id;
      pending_step_ = msg.step_id;
      if (observer_) observer_(msg);
    } else {
      out.tensor = b_.forward(msg.tensor, msg.mask_meta, msg.positions, nullptr, {false, false});
    }
    ++forwards_;
    return out;
  }

  GradMsg backward_locked(const GradMsg& g) {
    if (!pending_ || *pending_ != g.client_id || pending_step_ != g.step_id) {
      throw Error(ErrorCode::kProtocolOrder, "gradient for client " + std::to_string(g.client_id) + " step " +
                                                 std::to_string(g.step_id) + " without matching forward");
    }
    SegmentGrads grads;
    try {
      grads = b_.backward(g.tensor);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::kDimension) throw Error(ErrorCode::kProtocol, e.what());
      throw;
    }
    pending_.reset();
    grad_norms_[g.client_id] = grad_norm(grads.param_grads);
    apply_lora_step(b_, grads.param_grads, lr_);
    GradMsg out;
    out.client_id = g.client_id;
    out.step_id = g.step_id;
    out.session_id = g.session_id;
    out.scalar_width = g.scalar_width;
    out.tensor = std::move(grads.input_grad);
    return out;
  }

  CacheStepMsg decode_locked(const CacheStepMsg& m) {
    auto it = sessions_.find({m.client_id, m.session_id});
    if (it == sessions_.end()) throw Error(ErrorCode::kProtocol, "unknown session " + std::to_string(m.session_id));
    KVCache& cache = it->second;
    if (m.position != cache.length()) {
      throw Error(ErrorCode::kProtocol, "cache desync: client at " + std::to_string(m.position) + ", server at " +
                                            std::to_string(cache.length()));
    }
    check_hidden(m.tensor, cache.batch, 1);
    const std::size_t pos[1] = {static_cast<std::size_t>(m.position)};
    CacheStepMsg out = m;
    out.tensor = b_.forward(m.tensor, cache.meta_after(1), pos, &cache);
    ++forwards_;
    return out;
  }

  SegmentModel b_;
  double lr_;
  mutable std::mutex mu_;
  std::function<void(const HiddenStateMsg&)> observer_;
  std::optional<std::uint64_t> pending_;
  std::uint64_t pending_step_ = 0;
  std::map<std::uint64_t, double> grad_norms_;
  std::map<std::pair<std::uint64_t, std::uint64_t>, KVCache> sessions_;
  std::size_t forwards_ = 0;
};

// Something serving the server ends of a set of channels on its own threads.
class Host {
 public:
  virtual ~Host() = default;
  virtual void stop() = 0;
};

// Runs ServerNode::serve on one thread per connection.
class ServerHost : public Host {
 public:
  ServerHost(ServerNode& server, std::vector<std::unique_ptr<Channel>> ends) : ends_(std::move(ends)) {
    for (auto& e : ends_) threads_.emplace_back([&server, ch = e.get()] { server.serve(*ch); });
  }
  ~ServerHost() override { stop(); }
  ServerHost(const ServerHost&) = delete;
  ServerHost& operator=(const ServerHost&) = delete;

  Channel& end(std::size_t i) { return *ends_.at(i); }

  void stop() override {
    for (auto& e : ends_) e->close();
    for (auto& t : threads_)
      if (t.joinable()) t.join();
  }

 private:
  std::vector<std::unique_ptr<Channel>> ends_;
  std::vector<std::thread> threads_;
};

// ---------------------------------------------------------------------------

struct ClientLoss {
  double loss = 0.0;
  std::size_t tokens = 0;
  GradMsg grad;  // dL/dh_B toward the server
};

class ClientNode {
 public:
  ClientNode(std::uint64_t id, SegmentModel a, SegmentModel c, double lr, NoiseConfig noise = {})
      : a(std::move(a)), c(std::move(c)), id_(id), lr_(lr), noise_(noise),
        noise_rng_(named_stream(noise.seed, "noise.client." + std::to_string(id))) {
    noise_.validate();
  }

  std::uint64_t id() const { return id_; }
  std::size_t step() const { return step_; }
  void set_step(std::size_t s) { step_ = s; }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  const NoiseConfig& noise() const { return noise_; }
  const GradNorms& last_grad_norms() const { return norms_; }

  // Step 1: h_A = Blocks_A(embed(x)), plus noise when configured.
  HiddenStateMsg client_forward(const TokenBatch& tokens, const MaskMeta& meta, bool train = true) {
    check_context(tokens.seq, a.config());
    check_batch(tokens, meta);
    const auto pos = iota_positions(0, tokens.seq);
    HiddenStateMsg m;
    m.client_id = id_;
    m.step_id = step_;
    m.flags = train ? kFlagTrain : 0;
    m.positions = pos;
    m.mask_meta = meta;
    Tensor h = a.forward(tokens, meta, pos, nullptr, {train, false});
    if (noise_.active(NoiseTarget::kForwardHA) && (train || noise_.at_inference)) {
      m.tensor = inject_noise(h, noise_.scale, noise_rng_);
    } else {
      m.tensor = std::move(h);
    }
    if (train) pending_meta_ = meta;
    return m;
  }

  // h_A leaving the client outside training; noised only with at_inference.
  Tensor inference_hidden(Tensor h) {
    if (noise_.active(NoiseTarget::kForwardHA) && noise_.at_inference) return inject_noise(h, noise_.scale, noise_rng_);
    return h;
  }

  // Step 3: loss on Blocks_C(h_B) and the gradient toward the server.
  ClientLoss client_loss_and_backward(const HiddenStateMsg& hb, std::span<const TokenId> targets) {
    if (!pending_meta_ || hb.step_id != step_ || hb.client_id != id_) {
      throw Error(ErrorCode::kProtocolOrder, "h_B for step " + std::to_string(hb.step_id) + " not expected");
    }
    const Tensor logits = c.forward(hb.tensor, *pending_meta_, hb.positions);
    auto ce = softmax_cross_entropy(logits, targets);
    auto g = c.backward(ce.grad);
    grads_c_ = std::move(g.param_grads);
    ClientLoss out;
    out.loss = ce.loss;
    out.tokens = ce.count;
    out.grad.client_id = id_;
    out.grad.step_id = step_;
    out.grad.scalar_width = hb.scalar_width;
    out.grad.tensor = noise_.active(NoiseTarget::kBackwardGradHB) ? inject_noise(g.input_grad, noise_.scale, noise_rng_)
                                                                   : std::move(g.input_grad);
    return out;
  }

  // After step 4: backward through Blocks_A and update A and C.
  void finish(const GradMsg& grad_ha) {
    if (!grads_c_ || grad_ha.step_id != step_ || grad_ha.client_id != id_) {
      throw Error(ErrorCode::kProtocolOrder, "dL/dh_A for step " + std::to_string(grad_ha.step_id) + " not expected");
    }
    auto g = a.backward(grad_ha.tensor);
    norms_.a = grad_norm(g.param_grads);
    norms_.c = grad_norm(*grads_c_);
    apply_lora_step(a, g.param_grads, lr_);
    apply_lora_step(c, *grads_c_, lr_);
    grads_c_.reset();
    pending_meta_.reset();
    ++step_;
  }

  TrainStepRecord train_step(Channel& ch, const TrainBatch& batch, const ServerNode* server = nullptr) {
    const CommSnapshot before = ch.stats() ? ch.stats()->snapshot() : CommSnapshot{};
    TrainStepRecord rec;
    rec.step = step_;
    rec.client_id = id_;
    ch.send(client_forward(batch.tokens, batch.meta, true));
    auto hb = ch.recv_as<HiddenStateMsg>();
    auto loss = client_loss_and_backward(hb, batch.targets);
    ch.send(loss.grad);
    auto gha = ch.recv_as<GradMsg>();
    if (ch.stats()) {
      ch.stats()->record_round_trip();
      ch.stats()->record_round_trip();
    }
    finish(gha);
    rec.loss = loss.loss;
    rec.tokens = loss.tokens;
    rec.diverged = !std::isfinite(loss.loss);
    rec.grad_norm = norms_;
    if (server) rec.grad_norm.b = server->last_grad_norm(id_);
    if (ch.stats()) rec.comm = ch.stats()->snapshot() - before;
    return rec;
  }

  SegmentModel a;
  SegmentModel c;

 private:
  std::uint64_t id_;
  double lr_;
  NoiseConfig noise_;
  std::mt19937_64 noise_rng_;
  std::size_t step_ = 0;
  std::optional<MaskMeta> pending_meta_;
  std::optional<std::vector<Tensor>> grads_c_;
  GradNorms norms_;
};

// ---------------------------------------------------------------------------

using DataFn = std::function<TrainBatch(std::size_t client_index, std::size_t step)>;
using RecordSink = std::function<void(const TrainStepRecord&)>;

struct RoundResult {
  std::vector<TrainStepRecord> records;
  std::optional<ErrorCode> error;
  std::string error_text;
};

// Round-robin: every step visits clients in index order, one full relay each.
inline RoundResult run_sequential_round(std::span<ClientNode* const> clients, std::span<Channel* const> channels,
                                        const ServerNode* server, const DataFn& data, std::size_t steps,
                                        const RecordSink& sink = {}) {
  if (clients.empty()) throw Error(ErrorCode::kConfig, "sequential round needs at least one client");
  if (clients.size() != channels.size()) throw Error(ErrorCode::kConfig, "one channel per client required");
  RoundResult out;
  for (std::size_t s = 0; s < steps; ++s) {
    for (std::size_t i = 0; i < clients.size(); ++i) {
      try {
        auto rec = clients[i]->train_step(*channels[i], data(i, s), server);
        if (sink) sink(rec);
        out.records.push_back(std::move(rec));
      } catch (const Error& e) {
        out.error = e.code();
        out.error_text = e.what();
        return out;
      }
    }
  }
  return out;
}

// Reference: the same step on an unsplit model.
inline double train_monolithic_step(SegmentModel& model, const TrainBatch& batch, double lr) {
  check_batch(batch.tokens, batch.meta);
  const auto pos = iota_positions(0, batch.tokens.seq);
  auto ce = softmax_cross_entropy(model.forward(batch.tokens, batch.meta, pos), batch.targets);
  auto g = model.backward(ce.grad);
  apply_lora_step(model, g.param_grads, lr);
  return ce.loss;
}

// ---------------------------------------------------------------------------

struct FederationOptions {
  ModelConfig model;
  PartitionSpec partition;
  std::uint64_t seed = 0;
  double lr = 0.01;
  NoiseConfig noise;
  std::size_t num_clients = 1;
  TransportKind transport = TransportKind::kLoopback;
  Endpoint endpoint{"127.0.0.1", 0};
  bool allow_embedding_only = false;
  std::uint64_t scalar_width = 8;
  std::uint64_t first_client_id = 0;
  bool log_frames = false;  // keep every frame in server_log / client_log
};

using HostFactory = std::function<std::unique_ptr<Host>(ServerNode&, std::vector<std::unique_ptr<Channel>>)>;

// A server plus M clients wired over real channels, the server answering on
// its own threads. All clients start from the same base model and adapters.
class Federation {
 public:
  explicit Federation(const FederationOptions& opt, const HostFactory& host = {}) : opt_(opt) {
    opt.noise.validate();
    if (opt.num_clients == 0) throw Error(ErrorCode::kConfig, "num_clients must be >= 1");
    auto parts = build_partitioned(opt.model, opt.partition, opt.seed, TrainMode::kLora, opt.allow_embedding_only);
    server_ = std::make_unique<ServerNode>(std::move(parts.b), opt.lr);
    std::vector<std::unique_ptr<Channel>> server_ends;
    std::optional<TcpListener> listener;
    if (opt.transport == TransportKind::kTcp) listener.emplace(opt.endpoint);
    client_stats_ = std::vector<CommStats>(opt.num_clients);
    server_logs_ = std::vector<FrameLog>(opt.num_clients);
    client_logs_ = std::vector<FrameLog>(opt.num_clients);
    for (std::size_t i = 0; i < opt.num_clients; ++i) {
      clients_.push_back(
          std::make_unique<ClientNode>(opt.first_client_id + i, parts.a, parts.c, opt.lr, opt.noise));
      std::unique_ptr<Channel> client_end, server_end;
      if (listener) {
        client_end = tcp_connect(Endpoint{opt.endpoint.host, listener->port()});
        server_end = listener->accept();
      } else {
        std::tie(client_end, server_end) = make_loopback_pair();
      }
      client_end->attach_stats(&client_stats_[i]);
      if (opt.log_frames) client_end->attach_log(&client_logs_[i]);
      server_end->attach_stats(&server_stats_);
      if (opt.log_frames) server_end->attach_log(&server_logs_[i]);
      client_ends_.push_back(std::move(client_end));
      server_ends.push_back(std::move(server_end));
    }
    host_ = host ? host(*server_, std::move(server_ends))
                 : std::make_unique<ServerHost>(*server_, std::move(server_ends));
  }

  ~Federation() { shutdown(); }

  void shutdown() {
    if (!host_) return;
    for (auto& ch : client_ends_) {
      try {
        ch->send(ControlMsg{ControlKind::kShutdown, 0, 0, 0, ""});
      } catch (const Error&) {
      }
    }
    host_->stop();
    host_.reset();
  }

  std::size_t size() const { return clients_.size(); }
  ServerNode& server() { return *server_; }
  ClientNode& client(std::size_t i) { return *clients_.at(i); }
  Channel& channel(std::size_t i) { return *client_ends_.at(i); }
  CommStats& client_stats(std::size_t i) { return client_stats_.at(i); }
  CommStats& server_stats() { return server_stats_; }
  // Frames the server sent to client i.
  const FrameLog& server_log(std::size_t i) const { return server_logs_.at(i); }
  // Frames client i sent.
  const FrameLog& client_log(std::size_t i) const { return client_logs_.at(i); }
  const FederationOptions& options() const { return opt_; }

  CommSnapshot total_client_comm() const {
    CommSnapshot s;
    for (const auto& c : client_stats_) s += c.snapshot();
    return s;
  }

  RoundResult run_sequential(const DataFn& data, std::size_t steps, const RecordSink& sink = {}) {
    std::vector<ClientNode*> cs;
    std::vector<Channel*> chs;
    for (std::size_t i = 0; i < size(); ++i) {
      cs.push_back(&client(i));
      chs.push_back(&channel(i));
    }
    return run_sequential_round(cs, chs, server_.get(), data, steps, sink);
  }

  // server.ckpt plus client_<i>.ckpt in dir.
  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    save_checkpoint((dir / "server.ckpt").string(), {&server_->model()});
    for (std::size_t i = 0; i < clients_.size(); ++i) {
      save_checkpoint((dir / ("client_" + std::to_string(i) + ".ckpt")).string(), {&clients_[i]->a, &clients_[i]->c});
    }
  }

  void load(const std::filesystem::path& dir, std::size_t step) {
    load_parameters(server_->model(), load_checkpoint((dir / "server.ckpt").string()));
    for (std::size_t i = 0; i < clients_.size(); ++i) {
      const auto p = load_checkpoint((dir / ("client_" + std::to_string(i) + ".ckpt")).string());
      load_parameters(clients_[i]->a, p);
      load_parameters(clients_[i]->c, p);
      clients_[i]->set_step(step);
    }
  }

 private:
  FederationOptions opt_;
  std::unique_ptr<ServerNode> server_;
  std::vector<std::unique_ptr<ClientNode>> clients_;
  std::vector<std::unique_ptr<Channel>> client_ends_;
  std::vector<CommStats> client_stats_;
  CommStats server_stats_;
  std::vector<FrameLog> server_logs_;
  std::vector<FrameLog> client_logs_;
  std::unique_ptr<Host> host_;
};

// ---------------------------------------------------------------------------

struct NoisePropagationReport {
  double delta = 0.0;
  std::size_t draws = 0;
  std::string parameter;
  double mean_perturbation = 0.0;
  double max_perturbation = 0.0;
  std::vector<double> perturbations;

  nlohmann::json to_json() const {
    return {{"delta", delta}, {"draws", draws}, {"parameter", parameter},
            {"mean_perturbation", mean_perturbation}, {"max_perturbation", max_perturbation}};
  }
};

// dL/dW_n of the last block's down projection, with clean and noised h_A.
inline NoisePropagationReport noise_gradient_propagation_check(const ModelConfig& cfg, const PartitionSpec& spec,
                                                               std::uint64_t model_seed, const TrainBatch& batch,
                                                               double delta, std::size_t draws,
                                                               std::uint64_t noise_seed) {
  if (draws == 0) throw Error(ErrorCode::kConfig, "draws must be >= 1");
  auto m = build_partitioned(cfg, spec, model_seed, TrainMode::kFull);
  const auto pos = iota_positions(0, batch.tokens.seq);
  const Tensor ha = m.a.forward(batch.tokens, batch.meta, pos, nullptr, {false, false});
  auto& wn = m.c.block(m.c.num_blocks() - 1).down_proj.weight;
  auto grad_wn = [&](const Tensor& h) {
    const Tensor hb = m.b.forward(h, batch.meta, pos, nullptr, {false, false});
    auto ce = softmax_cross_entropy(m.c.forward(hb, batch.meta, pos), batch.targets);
    m.c.backward(ce.grad);
    return wn.grad;
  };
  const Tensor clean = grad_wn(ha);
  NoisePropagationReport r;
  r.delta = delta;
  r.draws = draws;
  r.parameter = wn.name;
  auto rng = named_stream(noise_seed, "noise.propagation");
  for (std::size_t i = 0; i < draws; ++i) {
    const Tensor noisy = grad_wn(inject_noise(ha, delta, rng));
    double s = 0.0;
    for (std::size_t j = 0; j < clean.size(); ++j) s += (noisy[j] - clean[j]) * (noisy[j] - clean[j]);
    r.perturbations.push_back(std::sqrt(s));
  }
  for (double p : r.perturbations) {
    r.mean_perturbation += p / static_cast<double>(draws);
    r.max_perturbation = std::max(r.max_perturbation, p);
  }
  return r;
}

}  // namespace flsplit
