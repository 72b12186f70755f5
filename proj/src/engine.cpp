#include "sfl/engine.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <thread>
#include <utility>

#include "json.hpp"

namespace sfl {

int RunHistory::rounds() const {
  int r = 0;
  for (const auto& rec : records) r = std::max(r, rec.round);
  return r;
}

std::int64_t RunHistory::total_bytes_up() const {
  std::int64_t n = 0;
  for (const auto& rec : records) n += rec.bytes_up;
  return n;
}

std::int64_t RunHistory::total_bytes_down() const {
  std::int64_t n = 0;
  for (const auto& rec : records) n += rec.bytes_down;
  return n;
}

std::string RunHistory::to_jsonl() const {
  std::string out;
  for (const auto& rec : records) {
    nlohmann::ordered_json j;
    j["regime"] = regime;
    j["round"] = rec.round;
    j["client"] = rec.client;
    j["loss"] = rec.loss;
    j["iou"] = rec.iou;
    j["bytes_up"] = rec.bytes_up;
    j["bytes_down"] = rec.bytes_down;
    out += j.dump();
    out += '\n';
  }
  return out;
}

TensorList fedavg(const std::vector<WeightUpload>& uploads) {
  if (uploads.empty()) throw AggregationError("fedavg: no uploads");
  std::int64_t total = 0;
  for (const auto& u : uploads) {
    if (u.sample_count < 0) throw AggregationError("fedavg: negative sample count");
    total += u.sample_count;
  }
  if (total <= 0) throw AggregationError("fedavg: total sample count is zero");
  const auto& ref = uploads.front().state;
  for (std::size_t k = 1; k < uploads.size(); ++k) {
    const auto& s = uploads[k].state;
    if (s.size() != ref.size())
      throw AggregationError("fedavg: upload " + std::to_string(k) + " has " + std::to_string(s.size()) +
                             " tensors, expected " + std::to_string(ref.size()));
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (s[i].name != ref[i].name)
        throw AggregationError("fedavg: upload " + std::to_string(k) + " tensor " + std::to_string(i) + " is '" +
                               s[i].name + "', expected '" + ref[i].name + "'");
      if (s[i].tensor.shape() != ref[i].tensor.shape())
        throw AggregationError("fedavg: '" + ref[i].name + "' shape " + shape_str(s[i].tensor.shape()) + " vs " +
                               shape_str(ref[i].tensor.shape()));
    }
  }
  TensorList out;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const auto n = static_cast<std::size_t>(ref[i].tensor.numel());
    std::vector<double> acc(n, 0.0);
    for (const auto& u : uploads) {
      const double w = static_cast<double>(u.sample_count);
      dispatch(u.state[i].tensor.dtype(), [&]<class T>(T) {
        auto d = std::as_const(u.state[i].tensor).data<T>();
        for (std::size_t e = 0; e < n; ++e) acc[e] += w * static_cast<double>(d[e]);
      });
    }
    Tensor t = Tensor::zeros(ref[i].tensor.shape(), ref[i].tensor.dtype());
    dispatch(t.dtype(), [&]<class T>(T) {
      auto d = t.data<T>();
      for (std::size_t e = 0; e < n; ++e) d[e] = static_cast<T>(acc[e] / static_cast<double>(total));
    });
    out.push_back({ref[i].name, t});
  }
  return out;
}

Tensor segmentation_loss(const Tensor& logits, std::span<const ClassId> masks) {
  return soft_dice_loss(softmax_channel(logits), masks);
}

namespace {

std::vector<std::string> names_of(const std::vector<Port>& ports) {
  std::vector<std::string> out;
  for (Port p : ports) out.push_back(port_name(p));
  return out;
}

Message tensor_message(MessageTag tag, std::uint16_t round, int client, std::uint32_t batch) {
  Message m;
  m.tag = tag;
  m.round = round;
  m.client_id = static_cast<std::uint16_t>(client);
  m.batch_id = batch;
  return m;
}

Message control(const std::string& text, int client, std::uint16_t round = 0) {
  Message m;
  m.tag = MessageTag::control;
  m.client_id = static_cast<std::uint16_t>(client);
  m.round = round;
  m.text = text;
  return m;
}

Message expect(Connection& conn, MessageTag tag) {
  auto m = conn.recv();
  if (m.tag != tag)
    throw ProtocolError(std::string("expected ") + tag_name(tag) + ", got " + tag_name(m.tag));
  return m;
}

Tensor grad_or_zeros(const Tensor& t) {
  return t.has_grad() ? t.grad() : Tensor::zeros(t.shape(), t.dtype());
}

std::vector<PortShape> signature_at(const SubModel& m, bool inputs, std::int64_t h, std::int64_t w) {
  try {
    return inputs ? m.input_signature(h, w) : m.output_signature(h, w);
  } catch (const BuildError& e) {
    throw ProtocolError(std::string("payload implies an unusable input extent: ") + e.what());
  }
}

}  // namespace

ClientParty::ClientParty(int id, const ModelGraph& global, const SplitPlan& plan, const AdamOptions& adam)
    : id_(id),
      fe_(std::make_unique<SubModel>(global, plan, Partition::fe)),
      be_(std::make_unique<SubModel>(global, plan, Partition::be)),
      fe_adam_(adam),
      be_adam_(adam),
      act_ports_(fe_->wire_ports()),
      out_ports_(be_->wire_ports()),
      act_names_(names_of(act_ports_)),
      out_names_(names_of(out_ports_)) {}

Message ClientParty::fe_forward(const Tensor& images, std::uint16_t round, std::uint32_t batch_id, NormMode mode) {
  if (images.rank() != 4) throw ContractError("fe_forward: images must be (N,C,H,W)");
  act_signature_ = fe_->output_signature(images.size(2), images.size(3));
  act_signature_.resize(act_ports_.size());
  const auto be_in = be_->input_signature(images.size(2), images.size(3));
  out_signature_.assign(be_in.begin(), be_in.begin() + static_cast<std::ptrdiff_t>(out_ports_.size()));
  round_ = round;
  batch_id_ = batch_id;
  fe_outputs_.clear();
  const Value in[] = {Value::of(images)};
  std::vector<Value> outs;
  if (mode == NormMode::train) {
    outs = fe_->forward(in, mode);
  } else {
    NoGradGuard guard;
    outs = fe_->forward(in, mode);
  }
  const auto& cuts = fe_->cut_outputs();
  for (std::size_t i = 0; i < cuts.size(); ++i) fe_outputs_[cuts[i]] = outs[i].tensor;
  auto m = tensor_message(MessageTag::activation, round, id_, batch_id);
  for (std::size_t i = 0; i < act_ports_.size(); ++i)
    m.tensors.push_back({act_names_[i], fe_outputs_.at(act_ports_[i]).detach()});
  return m;
}

std::vector<Value> ClientParty::be_inputs(const Message& server_output, bool track) {
  if (server_output.tag != MessageTag::server_output)
    throw ProtocolError(std::string("expected SERVER_OUTPUT, got ") + tag_name(server_output.tag));
  if (server_output.batch_id != batch_id_)
    throw ProtocolError("SERVER_OUTPUT for batch " + std::to_string(server_output.batch_id) + ", expected " +
                        std::to_string(batch_id_));
  check_payload(server_output, out_names_, out_signature_);
  server_leaves_.clear();
  local_leaves_.clear();
  std::vector<Value> in;
  for (const auto& [name, t] : server_output.tensors) {
    Tensor leaf = t.detach();
    if (track) leaf.set_requires_grad(true);
    server_leaves_.push_back(leaf);
    in.push_back(Value::of(leaf));
  }
  const auto& cuts = be_->cut_inputs();
  for (std::size_t i = out_ports_.size(); i < cuts.size(); ++i) {
    Tensor leaf = fe_outputs_.at(cuts[i]).detach();
    if (track) leaf.set_requires_grad(true);
    local_leaves_[cuts[i]] = leaf;
    in.push_back(Value::of(leaf));
  }
  return in;
}

Tensor ClientParty::be_forward_loss(const Message& server_output, std::span<const ClassId> masks) {
  const auto in = be_inputs(server_output, true);
  logits_ = be_->forward(in, NormMode::train).front().tensor;
  loss_ = segmentation_loss(logits_, masks);
  return loss_;
}

Tensor ClientParty::be_forward_eval(const Message& server_output) {
  NoGradGuard guard;
  const auto in = be_inputs(server_output, false);
  logits_ = be_->forward(in, NormMode::eval).front().tensor;
  return logits_;
}

Message ClientParty::be_backward() {
  if (!loss_.defined()) throw ContractError("be_backward: no loss recorded");
  backward(loss_);
  loss_ = Tensor();
  auto m = tensor_message(MessageTag::output_grad, round_, id_, batch_id_);
  for (std::size_t i = 0; i < server_leaves_.size(); ++i)
    m.tensors.push_back({out_names_[i], grad_or_zeros(server_leaves_[i])});
  server_leaves_.clear();
  return m;
}

void ClientParty::fe_backward(const Message& activation_grad) {
  if (activation_grad.tag != MessageTag::activation_grad)
    throw ProtocolError(std::string("expected ACTIVATION_GRAD, got ") + tag_name(activation_grad.tag));
  if (activation_grad.batch_id != batch_id_)
    throw ProtocolError("ACTIVATION_GRAD for batch " + std::to_string(activation_grad.batch_id) + ", expected " +
                        std::to_string(batch_id_));
  check_payload(activation_grad, act_names_, act_signature_);
  std::map<Port, Tensor> seeds;
  for (std::size_t i = 0; i < act_ports_.size(); ++i) seeds[act_ports_[i]] = activation_grad.tensors[i].tensor;
  {
    NoGradGuard guard;
    for (const auto& [p, leaf] : local_leaves_) {
      if (!leaf.has_grad()) continue;
      auto it = seeds.find(p);
      if (it == seeds.end())
        seeds[p] = leaf.grad();
      else
        it->second = add(it->second, leaf.grad());
    }
  }
  std::vector<GradSeed> list;
  for (const auto& [p, g] : seeds) {
    const Tensor& out = fe_outputs_.at(p);
    if (out.requires_grad()) list.push_back({out, g});
  }
  if (!list.empty()) backward(list);
  fe_outputs_.clear();
  local_leaves_.clear();
}

void ClientParty::step() {
  fe_adam_.step(fe_->parameters());
  be_adam_.step(be_->parameters());
}

TensorList ClientParty::state() const {
  TensorList s = fe_->state();
  auto b = be_->state();
  s.insert(s.end(), b.begin(), b.end());
  return s;
}

Message ClientParty::upload(std::uint16_t round, std::int64_t sample_count) const {
  auto m = tensor_message(MessageTag::weights_upload, round, id_, static_cast<std::uint32_t>(sample_count));
  m.tensors = detach_all(state());
  return m;
}

void ClientParty::load_global(const Message& global) {
  if (global.tag != MessageTag::global_weights)
    throw ProtocolError(std::string("expected GLOBAL_WEIGHTS, got ") + tag_name(global.tag));
  const auto mine = state();
  if (global.tensors.size() != mine.size())
    throw ProtocolError("GLOBAL_WEIGHTS carries " + std::to_string(global.tensors.size()) + " tensors, expected " +
                        std::to_string(mine.size()));
  for (std::size_t i = 0; i < mine.size(); ++i)
    if (global.tensors[i].name != mine[i].name || global.tensors[i].tensor.shape() != mine[i].tensor.shape() ||
        global.tensors[i].tensor.dtype() != mine[i].tensor.dtype())
      throw ProtocolError("GLOBAL_WEIGHTS entry " + std::to_string(i) + " '" + global.tensors[i].name +
                          "' does not match '" + mine[i].name + "'");
  NoGradGuard guard;
  load_state(mine, global.tensors);
}

ServerParty::ServerParty(int client_id, const ModelGraph& global, const SplitPlan& plan, const AdamOptions& adam)
    : client_id_(client_id),
      model_(std::make_unique<SubModel>(global, plan, Partition::server)),
      adam_(adam),
      in_names_(names_of(model_->cut_inputs())),
      out_names_(names_of(model_->cut_outputs())) {
  reference_ = model_->input_signature(global.meta().input_size, global.meta().input_size);
  input_size_ = global.meta().input_size;
}

Message ServerParty::forward(const Message& activation, NormMode mode) {
  if (activation.tag != MessageTag::activation)
    throw ProtocolError(std::string("expected ACTIVATION, got ") + tag_name(activation.tag));
  if (activation.tensors.empty() || activation.tensors.size() != in_names_.size())
    throw ProtocolError("ACTIVATION: expected " + std::to_string(in_names_.size()) + " tensors, got " +
                        std::to_string(activation.tensors.size()));
  const Tensor& first = activation.tensors.front().tensor;
  std::int64_t h = input_size_, w = input_size_;
  if (first.rank() == 4 && reference_[0].height > 0) {
    h = first.size(2) * input_size_ / reference_[0].height;
    w = first.size(3) * input_size_ / reference_[0].width;
  }
  in_signature_ = signature_at(*model_, true, h, w);
  check_payload(activation, in_names_, in_signature_);
  if (mode == NormMode::train && tapes_.count(activation.batch_id))
    throw ProtocolError("duplicate ACTIVATION for batch " + std::to_string(activation.batch_id));

  Tape tape;
  std::vector<Value> in;
  for (const auto& [name, t] : activation.tensors) {
    Tensor leaf = t.detach();
    if (mode == NormMode::train) leaf.set_requires_grad(true);
    tape.inputs.push_back(leaf);
    in.push_back(Value::of(leaf));
  }
  std::vector<Value> outs;
  if (mode == NormMode::train) {
    outs = model_->forward(in, mode);
  } else {
    NoGradGuard guard;
    outs = model_->forward(in, mode);
  }
  auto reply = tensor_message(MessageTag::server_output, activation.round, client_id_, activation.batch_id);
  for (std::size_t i = 0; i < outs.size(); ++i) {
    tape.outputs.push_back(outs[i].tensor);
    reply.tensors.push_back({out_names_[i], outs[i].tensor.detach()});
  }
  if (mode == NormMode::train) tapes_[activation.batch_id] = std::move(tape);
  return reply;
}

Message ServerParty::backward(const Message& output_grad) {
  if (output_grad.tag != MessageTag::output_grad)
    throw ProtocolError(std::string("expected OUTPUT_GRAD, got ") + tag_name(output_grad.tag));
  auto it = tapes_.find(output_grad.batch_id);
  if (it == tapes_.end())
    throw ProtocolError("OUTPUT_GRAD for unknown batch " + std::to_string(output_grad.batch_id));
  auto& tape = it->second;
  if (output_grad.tensors.size() != tape.outputs.size())
    throw ProtocolError("OUTPUT_GRAD: expected " + std::to_string(tape.outputs.size()) + " tensors, got " +
                        std::to_string(output_grad.tensors.size()));
  std::vector<GradSeed> seeds;
  for (std::size_t i = 0; i < tape.outputs.size(); ++i) {
    const auto& [name, g] = output_grad.tensors[i];
    if (name != out_names_[i] || g.shape() != tape.outputs[i].shape() || g.dtype() != tape.outputs[i].dtype())
      throw ProtocolError("OUTPUT_GRAD: tensor '" + name + "' " + shape_str(g.shape()) + " does not match '" +
                          out_names_[i] + "' " + shape_str(tape.outputs[i].shape()));
    if (tape.outputs[i].requires_grad()) seeds.push_back({tape.outputs[i], g});
  }
  if (!seeds.empty()) sfl::backward(seeds);
  auto reply = tensor_message(MessageTag::activation_grad, output_grad.round, client_id_, output_grad.batch_id);
  for (std::size_t i = 0; i < tape.inputs.size(); ++i)
    reply.tensors.push_back({in_names_[i], grad_or_zeros(tape.inputs[i])});
  tapes_.erase(it);
  return reply;
}

void ServerParty::step() { adam_.step(model_->parameters()); }

namespace {

struct GradStats {
  double max_rel = 0.0;
  std::string worst;
};

void compare_grads(const TensorList& mono, const std::map<std::string, Tensor>& split, GradStats& stats) {
  for (const auto& [name, p] : mono) {
    const Tensor gm = grad_or_zeros(p);
    const Tensor gs = split.at(name);
    const double diff = max_abs_diff(gm, gs);
    double scale = 0.0;
    for (double v : gm.to_doubles()) scale = std::max(scale, std::abs(v));
    const double rel = scale > 0.0 ? diff / scale : diff;
    if (rel > stats.max_rel || stats.worst.empty()) {
      if (rel >= stats.max_rel) stats.worst = name;
      stats.max_rel = std::max(stats.max_rel, rel);
    }
  }
}

}  // namespace

EquivalenceReport check_split_equivalence(const ModelGraph& graph, const SplitPlan& plan, const Batch& batch,
                                          int steps, const EquivalenceTolerances& tol) {
  if (steps < 1) throw ContractError("check_split_equivalence: steps must be >= 1");
  auto mono = graph.replicate();
  const AdamOptions adam;
  AdamState mono_adam(adam);
  ClientParty client(0, graph, plan, adam);
  ServerParty server(0, graph, plan, adam);
  EquivalenceReport r;
  GradStats gs;
  for (int s = 0; s < steps; ++s) {
    Tensor logits = mono->forward(batch.images, NormMode::train);
    Tensor loss = segmentation_loss(logits, batch.masks);
    backward(loss);
    r.monolithic_losses.push_back(loss.item());

    const auto act = client.fe_forward(batch.images, 1, static_cast<std::uint32_t>(s), NormMode::train);
    const auto out = server.forward(act, NormMode::train);
    Tensor split_loss = client.be_forward_loss(out, batch.masks);
    r.split_losses.push_back(split_loss.item());
    const auto og = client.be_backward();
    const auto ag = server.backward(og);
    client.fe_backward(ag);

    r.loss_max_abs = std::max(r.loss_max_abs, std::abs(loss.item() - split_loss.item()));
    if (s == 0) {
      r.forward_max_abs = max_abs_diff(logits, client.logits());
      std::map<std::string, Tensor> split_grads;
      for (const SubModel* m : {&client.fe(), &server.model(), &client.be()})
        for (const auto& [name, p] : m->parameters()) split_grads[name] = grad_or_zeros(p);
      compare_grads(mono->parameters(), split_grads, gs);
    }
    mono_adam.step(mono->parameters());
    client.step();
    server.step();
  }
  std::map<std::string, Tensor> split_state;
  for (const SubModel* m : {&client.fe(), &server.model(), &client.be()})
    for (const auto& [name, t] : m->state()) split_state[name] = t;
  for (const auto& [name, t] : mono->state())
    r.param_max_abs = std::max(r.param_max_abs, max_abs_diff(t, split_state.at(name)));
  r.grad_max_rel = gs.max_rel;
  r.worst_grad = gs.worst;
  r.passed = r.forward_max_abs <= tol.forward_abs && r.grad_max_rel <= tol.grad_rel &&
             r.param_max_abs <= tol.param_abs && r.loss_max_abs <= tol.loss_abs;
  return r;
}

SplitFedServer::SplitFedServer(const ModelGraph& initial, const SplitPlan& plan, const RoundConfig& cfg,
                               int num_clients)
    : initial_(initial), plan_(plan), cfg_(cfg), num_clients_(num_clients) {
  if (num_clients < 1) throw ConfigError("splitfed server needs at least one client");
  validate_plan(initial, plan);
}

void SplitFedServer::abort() {
  std::lock_guard lock(mu_);
  aborted_ = true;
  cv_.notify_all();
}

std::pair<TensorList, TensorList> SplitFedServer::aggregate(int round, int client, WeightUpload client_state,
                                                            WeightUpload server_state) {
  std::unique_lock lock(mu_);
  auto& slot = rounds_[round];
  if (slot.client_state.count(client))
    throw ProtocolError("client " + std::to_string(client) + " uploaded twice in round " + std::to_string(round));
  slot.client_state[client] = std::move(client_state);
  slot.server_state[client] = std::move(server_state);
  if (static_cast<int>(slot.client_state.size()) == num_clients_) {
    std::vector<WeightUpload> c, s;
    for (auto& [id, u] : slot.client_state) c.push_back(std::move(u));
    for (auto& [id, u] : slot.server_state) s.push_back(std::move(u));
    slot.client_state.clear();
    slot.server_state.clear();
    slot.client_avg = fedavg(c);
    slot.server_avg = fedavg(s);
    final_client_avg_ = slot.client_avg;
    final_server_avg_ = slot.server_avg;
    cv_.notify_all();
  } else {
    cv_.wait(lock, [&] { return aborted_ || slot.client_avg.has_value(); });
    if (!slot.client_avg) throw TransportError("session aborted while waiting for round " + std::to_string(round));
  }
  std::pair<TensorList, TensorList> result{*slot.client_avg, *slot.server_avg};
  if (++slot.collected == num_clients_) rounds_.erase(round);
  return result;
}

void SplitFedServer::serve(Connection& conn) {
  const auto hello = expect(conn, MessageTag::control);
  if (hello.text != "hello") throw ProtocolError("expected hello, got '" + hello.text + "'");
  const int client = hello.client_id;
  ServerParty party(client, initial_, plan_, AdamOptions{cfg_.lr});
  NormMode mode = NormMode::train;
  std::int64_t up = 0, down = 0;
  auto reply = [&](const Message& m) {
    down += tensor_bytes(m);
    conn.send(m);
  };
  for (;;) {
    const auto m = conn.recv();
    up += tensor_bytes(m);
    switch (m.tag) {
      case MessageTag::activation:
        reply(party.forward(m, mode));
        break;
      case MessageTag::output_grad: {
        auto g = party.backward(m);
        party.step();
        reply(g);
        break;
      }
      case MessageTag::weights_upload: {
        WeightUpload cs{m.tensors, static_cast<std::int64_t>(m.batch_id)};
        WeightUpload ss{detach_all(party.model().state()), static_cast<std::int64_t>(m.batch_id)};
        auto [client_avg, server_avg] = aggregate(m.round, client, std::move(cs), std::move(ss));
        if (cfg_.aggregate_server) {
          NoGradGuard guard;
          load_state(party.model().state(), server_avg);
        }
        auto g = tensor_message(MessageTag::global_weights, m.round, client, 0);
        g.tensors = std::move(client_avg);
        reply(g);
        break;
      }
      case MessageTag::control: {
        if (m.text == "mode:train") {
          mode = NormMode::train;
        } else if (m.text == "mode:eval") {
          mode = NormMode::eval;
        } else if (m.text == "bye") {
          return;
        } else {
          nlohmann::json j;
          try {
            j = nlohmann::json::parse(m.text);
          } catch (const nlohmann::json::exception&) {
            throw ProtocolError("unrecognized CONTROL text '" + m.text + "'");
          }
          HistoryRecord rec{j.at("round").get<int>(), client, j.at("loss").get<double>(), j.at("iou").get<double>(),
                            up, down};
          {
            std::lock_guard lock(mu_);
            records_.push_back(rec);
          }
          up = down = 0;
        }
        break;
      }
      default:
        throw ProtocolError(std::string("server cannot handle ") + tag_name(m.tag));
    }
  }
}

RunHistory SplitFedServer::finish(const std::vector<Sample>& test) {
  std::lock_guard lock(mu_);
  RunHistory h;
  h.regime = "splitfed";
  h.records = records_;
  std::sort(h.records.begin(), h.records.end(),
            [](const auto& a, const auto& b) { return std::tie(a.round, a.client) < std::tie(b.round, b.client); });
  auto model = initial_.replicate();
  if (final_client_avg_) {
    TensorList all = *final_client_avg_;
    all.insert(all.end(), final_server_avg_->begin(), final_server_avg_->end());
    NoGradGuard guard;
    load_state(model->state(), all);
  }
  if (!test.empty()) {
    auto e = evaluate_model(*model, test, std::max(1, cfg_.batch_size), true);
    h.test = e.report;
    h.test_loss = e.loss;
    h.test_predictions = std::move(e.predictions);
  }
  return h;
}

namespace {

std::vector<Sample> gather(const std::vector<Sample>& src, std::span<const std::size_t> idx, const RoundConfig& cfg,
                           std::mt19937_64& rng) {
  std::vector<Sample> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(cfg.augment ? augment_sample(src[i], cfg.augment_config, rng) : src[i]);
  return out;
}

int num_classes_of(const ModelGraph& g) { return g.meta().num_classes; }

}  // namespace

void run_client(Connection& conn, const ModelGraph& initial, const SplitPlan& plan, const RoundConfig& cfg,
                const ClientData& data) {
  if (data.train.empty()) throw ConfigError("client " + std::to_string(data.id) + " has no training samples");
  ClientParty party(data.id, initial, plan, AdamOptions{cfg.lr});
  const auto dtype = initial.dtype();
  const std::size_t bs = static_cast<std::size_t>(std::max(1, cfg.batch_size));
  std::uint32_t batch_id = 0;
  conn.send(control("hello", data.id));
  for (int r = 1; r <= cfg.global_rounds; ++r) {
    const auto round = static_cast<std::uint16_t>(r);
    conn.send(control("mode:train", data.id, round));
    double epoch_loss = 0.0;
    for (int e = 1; e <= cfg.local_epochs; ++e) {
      const std::string tag = "client" + std::to_string(data.id) + "/round" + std::to_string(r) + "/epoch" +
                              std::to_string(e);
      const auto perm = seeded_permutation(data.train.size(), name_seed(cfg.seed, tag));
      std::mt19937_64 rng(name_seed(cfg.seed, "augment/" + tag));
      double loss_sum = 0.0;
      for (std::size_t b = 0; b < perm.size(); b += bs) {
        const std::span<const std::size_t> idx(perm.data() + b, std::min(bs, perm.size() - b));
        const auto batch = make_batch(gather(data.train, idx, cfg, rng), dtype);
        conn.send(party.fe_forward(batch.images, round, batch_id, NormMode::train));
        const auto out = expect(conn, MessageTag::server_output);
        loss_sum += party.be_forward_loss(out, batch.masks).item() * static_cast<double>(idx.size());
        conn.send(party.be_backward());
        party.fe_backward(expect(conn, MessageTag::activation_grad));
        party.step();
        ++batch_id;
      }
      epoch_loss = loss_sum / static_cast<double>(perm.size());
    }
    conn.send(party.upload(round, static_cast<std::int64_t>(data.train.size())));
    party.load_global(expect(conn, MessageTag::global_weights));

    conn.send(control("mode:eval", data.id, round));
    IouAccumulator acc(num_classes_of(initial), default_foreground(num_classes_of(initial)));
    for (std::size_t b = 0; b < data.val.size(); b += bs) {
      std::vector<std::size_t> idx;
      for (std::size_t i = b; i < std::min(b + bs, data.val.size()); ++i) idx.push_back(i);
      const auto batch = make_batch(data.val, idx, dtype);
      conn.send(party.fe_forward(batch.images, round, batch_id, NormMode::eval));
      const auto pred = argmax_channel(party.be_forward_eval(expect(conn, MessageTag::server_output)));
      const auto plane = pred.size() / idx.size();
      for (std::size_t k = 0; k < idx.size(); ++k)
        acc.add(std::span(pred).subspan(k * plane, plane), std::span(batch.masks).subspan(k * plane, plane));
      ++batch_id;
    }
    nlohmann::ordered_json stats;
    stats["round"] = r;
    stats["loss"] = epoch_loss;
    stats["iou"] = data.val.empty() ? 0.0 : acc.report().average_iou;
    conn.send(control(stats.dump(), data.id, round));
  }
  conn.send(control("bye", data.id));
}

RunHistory run_splitfed(const ModelGraph& initial, const SplitPlan& plan, const RoundConfig& cfg,
                        const std::vector<ClientData>& clients, const std::vector<Sample>& test,
                        TransportKind transport, const std::string& tcp_host) {
  if (clients.empty()) throw ConfigError("splitfed needs at least one client");
  const auto n = clients.size();
  SplitFedServer server(initial, plan, cfg, static_cast<int>(n));
  std::vector<std::unique_ptr<Connection>> server_ends(n), client_ends(n);

  std::mutex err_mu;
  std::exception_ptr first_error;
  auto fail = [&](std::exception_ptr e) {
    {
      std::lock_guard lock(err_mu);
      if (!first_error) first_error = e;
    }
    server.abort();
    for (auto* ends : {&server_ends, &client_ends})
      for (auto& c : *ends)
        if (c) c->close();
  };

  std::vector<std::thread> threads;
  if (transport == TransportKind::inproc) {
    for (std::size_t i = 0; i < n; ++i) std::tie(server_ends[i], client_ends[i]) = make_inproc_pair();
  } else {
    TcpListener listener({tcp_host, 0});
    const TcpAddress addr{tcp_host, listener.port()};
    // Clients connect one at a time so accept order matches client order.
    for (std::size_t i = 0; i < n; ++i) {
      std::unique_ptr<Connection> c;
      std::thread t([&] { c = tcp_connect(addr); });
      server_ends[i] = listener.accept();
      t.join();
      client_ends[i] = std::move(c);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    threads.emplace_back([&, i] {
      try {
        server.serve(*server_ends[i]);
      } catch (...) {
        fail(std::current_exception());
      }
    });
    threads.emplace_back([&, i] {
      try {
        run_client(*client_ends[i], initial, plan, cfg, clients[i]);
      } catch (...) {
        fail(std::current_exception());
      }
    });
  }
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
  return server.finish(test);
}

EvalResult evaluate_model(ModelGraph& model, const std::vector<Sample>& samples, int batch_size,
                          bool keep_predictions) {
  EvalResult r;
  const int classes = model.meta().num_classes;
  IouAccumulator acc(classes, default_foreground(classes));
  NoGradGuard guard;
  const std::size_t bs = static_cast<std::size_t>(std::max(1, batch_size));
  double loss_sum = 0.0;
  for (std::size_t b = 0; b < samples.size(); b += bs) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b; i < std::min(b + bs, samples.size()); ++i) idx.push_back(i);
    const auto batch = make_batch(samples, idx, model.dtype());
    const Tensor logits = model.forward(batch.images, NormMode::eval);
    loss_sum += segmentation_loss(logits, batch.masks).item() * static_cast<double>(idx.size());
    const auto pred = argmax_channel(logits);
    const auto plane = pred.size() / idx.size();
    for (std::size_t k = 0; k < idx.size(); ++k)
      acc.add(std::span(pred).subspan(k * plane, plane), std::span(batch.masks).subspan(k * plane, plane));
    if (keep_predictions) r.predictions.insert(r.predictions.end(), pred.begin(), pred.end());
  }
  r.report = acc.report();
  r.loss = samples.empty() ? 0.0 : loss_sum / static_cast<double>(samples.size());
  return r;
}

RunHistory train_monolithic(ModelGraph& model, const std::vector<Sample>& train, const std::vector<Sample>& val,
                            const std::vector<Sample>& test, int epochs, const RoundConfig& cfg, int client_id,
                            const std::string& regime) {
  if (train.empty()) throw ConfigError(regime + ": no training samples");
  AdamState adam(AdamOptions{cfg.lr});
  const std::size_t bs = static_cast<std::size_t>(std::max(1, cfg.batch_size));
  RunHistory h;
  h.regime = regime;
  for (int e = 1; e <= epochs; ++e) {
    const std::string tag = regime + "/client" + std::to_string(client_id) + "/epoch" + std::to_string(e);
    const auto perm = seeded_permutation(train.size(), name_seed(cfg.seed, tag));
    std::mt19937_64 rng(name_seed(cfg.seed, "augment/" + tag));
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < perm.size(); b += bs) {
      const std::span<const std::size_t> idx(perm.data() + b, std::min(bs, perm.size() - b));
      const auto batch = make_batch(gather(train, idx, cfg, rng), model.dtype());
      Tensor loss = segmentation_loss(model.forward(batch.images, NormMode::train), batch.masks);
      backward(loss);
      adam.step(model.parameters());
      loss_sum += loss.item() * static_cast<double>(idx.size());
    }
    const double iou = val.empty() ? 0.0 : evaluate_model(model, val, cfg.batch_size).report.average_iou;
    h.records.push_back({e, client_id, loss_sum / static_cast<double>(perm.size()), iou, 0, 0});
  }
  if (!test.empty()) {
    auto r = evaluate_model(model, test, cfg.batch_size, true);
    h.test = r.report;
    h.test_loss = r.loss;
    h.test_predictions = std::move(r.predictions);
  }
  return h;
}

RunHistory run_centralized(const ModelGraph& initial, const RoundConfig& cfg, const std::vector<ClientData>& clients,
                           const std::vector<Sample>& test, int epochs) {
  std::vector<Sample> train, val;
  for (const auto& c : clients) {
    train.insert(train.end(), c.train.begin(), c.train.end());
    val.insert(val.end(), c.val.begin(), c.val.end());
  }
  auto model = initial.replicate();
  return train_monolithic(*model, train, val, test, epochs, cfg, -1, "centralized");
}

std::vector<RunHistory> run_local_baselines(const ModelGraph& initial, const RoundConfig& cfg,
                                            const std::vector<ClientData>& clients, const std::vector<Sample>& test,
                                            int epochs) {
  std::vector<RunHistory> out;
  for (const auto& c : clients) {
    auto model = initial.replicate();
    out.push_back(train_monolithic(*model, c.train, c.val, test, epochs, cfg, c.id, "local"));
  }
  return out;
}

double mean_test_iou(const std::vector<RunHistory>& histories) {
  if (histories.empty()) return 0.0;
  double s = 0.0;
  for (const auto& h : histories) s += h.test.average_iou;
  return s / static_cast<double>(histories.size());
}

}  // namespace sfl
