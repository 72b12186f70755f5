#include "sfl/graph.hpp"

#include <algorithm>
#include <cstdio>
#include <iomanip>
#include <map>
#include <sstream>

namespace sfl {

namespace {

std::string make_prefix(int stage, const std::string& label) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "s%02d_", stage);
  return buf + label;
}

InitContext init_for(const GraphMeta& meta, DType dtype) { return {meta.seed, dtype}; }

const PortShape& port_shape(const std::vector<std::vector<PortShape>>& shapes, const PortShape& input, Port p) {
  if (p.stage < 0) return input;
  return shapes.at(static_cast<std::size_t>(p.stage)).at(static_cast<std::size_t>(p.slot));
}

TensorList collect(const std::vector<std::unique_ptr<Block>>& blocks, bool params) {
  TensorList out;
  for (const auto& b : blocks) {
    const auto& src = params ? b->parameters() : b->buffers();
    out.insert(out.end(), src.begin(), src.end());
  }
  return out;
}

std::vector<Value> run_stage(Block& block, const StageDef& def, const std::map<Port, Value>& values,
                             NormMode mode) {
  std::vector<Value> in;
  in.reserve(def.inputs.size());
  for (Port p : def.inputs) {
    auto it = values.find(p);
    if (it == values.end()) throw ContractError("stage '" + def.label + "' input " + port_name(p) + " unavailable");
    in.push_back(it->second);
  }
  return block.forward(in, mode);
}

}  // namespace

std::string port_name(Port p) {
  if (p.stage < 0) return "input";
  return "s" + std::to_string(p.stage) + ":" + std::to_string(p.slot);
}

std::vector<std::vector<PortShape>> infer_stages(const std::vector<StageDef>& stages, int in_channels,
                                                 std::int64_t height, std::int64_t width) {
  const PortShape input{PortKind::tensor, in_channels, height, width};
  std::vector<std::vector<PortShape>> shapes;
  shapes.reserve(stages.size());
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& def = stages[i];
    std::vector<PortShape> in;
    for (Port p : def.inputs) {
      if (p.stage >= static_cast<int>(i))
        throw BuildError("stage '" + def.label + "' reads " + port_name(p) + " which is not upstream");
      const auto& src = port_shape(shapes, input, p);
      in.push_back(src);
      if (p.stage >= 0 && p.slot >= static_cast<int>(shapes[static_cast<std::size_t>(p.stage)].size()))
        throw BuildError("stage '" + def.label + "' reads missing port " + port_name(p));
    }
    try {
      shapes.push_back(def.spec.infer(in));
    } catch (const BuildError& e) {
      throw BuildError("stage " + std::to_string(i) + " '" + def.label + "' at input " + std::to_string(height) + "x" +
                       std::to_string(width) + ": " + e.what());
    }
  }
  return shapes;
}

ModelGraph::ModelGraph(GraphMeta meta, std::vector<StageDef> stages, SplitPlan default_plan, DType dtype)
    : meta_(std::move(meta)), stages_(std::move(stages)), default_plan_(default_plan), dtype_(dtype) {
  if (stages_.empty()) throw BuildError("model graph has no stages");
  infer(meta_.input_size, meta_.input_size);
  const auto ctx = init_for(meta_, dtype_);
  for (int i = 0; i < num_stages(); ++i) blocks_.push_back(stages_[static_cast<std::size_t>(i)].spec.instantiate(stage_prefix(i), ctx));
  validate_plan(*this, default_plan_);
}

std::string ModelGraph::stage_prefix(int stage) const {
  return make_prefix(stage, stages_.at(static_cast<std::size_t>(stage)).label);
}

std::vector<Edge> ModelGraph::edges() const {
  std::vector<Edge> out;
  for (int i = 0; i < num_stages(); ++i) {
    const auto& def = stages_[static_cast<std::size_t>(i)];
    const auto kinds = def.spec.input_kinds();
    for (std::size_t s = 0; s < def.inputs.size(); ++s) {
      const Port p = def.inputs[s];
      const bool chain = (p.stage == i - 1 && p.slot == 0);
      out.push_back({p, i, static_cast<int>(s), kinds[s], !chain});
    }
  }
  return out;
}

std::vector<std::vector<PortShape>> ModelGraph::infer(std::int64_t height, std::int64_t width) const {
  return infer_stages(stages_, meta_.in_channels, height, width);
}

std::vector<std::int64_t> ModelGraph::stage_macs(std::int64_t height, std::int64_t width) const {
  const auto shapes = infer(height, width);
  const PortShape input{PortKind::tensor, meta_.in_channels, height, width};
  std::vector<std::int64_t> out;
  for (const auto& def : stages_) {
    std::vector<PortShape> in;
    for (Port p : def.inputs) in.push_back(port_shape(shapes, input, p));
    out.push_back(def.spec.macs(in));
  }
  return out;
}

TensorList ModelGraph::parameters() const { return collect(blocks_, true); }
TensorList ModelGraph::buffers() const { return collect(blocks_, false); }

TensorList ModelGraph::state() const {
  TensorList s = parameters();
  auto b = buffers();
  s.insert(s.end(), b.begin(), b.end());
  return s;
}

Tensor ModelGraph::forward(const Tensor& x, NormMode mode) {
  if (x.rank() != 4 || x.size(1) != meta_.in_channels)
    throw ContractError(meta_.network + ": expected (N," + std::to_string(meta_.in_channels) + ",H,W) input, got " +
                        shape_str(x.shape()));
  infer(x.size(2), x.size(3));
  std::map<Port, Value> values;
  values[graph_input] = Value::of(x);
  for (int i = 0; i < num_stages(); ++i) {
    auto out = run_stage(*blocks_[static_cast<std::size_t>(i)], stages_[static_cast<std::size_t>(i)], values, mode);
    for (std::size_t s = 0; s < out.size(); ++s) values[{i, static_cast<int>(s)}] = std::move(out[s]);
  }
  return values[{num_stages() - 1, 0}].tensor;
}

std::unique_ptr<ModelGraph> ModelGraph::replicate() const {
  auto copy = std::make_unique<ModelGraph>(meta_, stages_, default_plan_, dtype_);
  NoGradGuard guard;
  load_state(copy->state(), state());
  return copy;
}

std::string ModelGraph::describe(std::int64_t height, std::int64_t width) const {
  const auto shapes = infer(height, width);
  const auto macs = stage_macs(height, width);
  std::ostringstream os;
  os << meta_.network << " (in=" << meta_.in_channels << ", classes=" << meta_.num_classes
     << ", base_width=" << meta_.base_width << ", input " << height << "x" << width << ")\n";
  for (int i = 0; i < num_stages(); ++i) {
    const auto& def = stages_[static_cast<std::size_t>(i)];
    os << std::setw(3) << i << "  " << std::left << std::setw(12) << def.label << std::right << def.spec.describe()
       << "\n     inputs:";
    for (Port p : def.inputs) os << ' ' << port_name(p);
    os << "  outputs:";
    for (const auto& s : shapes[static_cast<std::size_t>(i)]) os << ' ' << port_shape_str(s);
    os << "\n     params=" << total_numel(blocks_[static_cast<std::size_t>(i)]->parameters())
       << " macs=" << macs[static_cast<std::size_t>(i)] << '\n';
  }
  os << "edges:\n";
  for (const auto& e : edges())
    if (e.skip)
      os << "  " << port_name(e.src) << " -> s" << e.dst << " slot " << e.dst_slot << " ("
         << (e.kind == PortKind::tensor ? "tensor" : "pool_indices") << ")\n";
  return os.str();
}

Tensor forward_monolithic(ModelGraph& graph, const Tensor& x, NormMode mode) { return graph.forward(x, mode); }

const char* partition_name(Partition p) {
  switch (p) {
    case Partition::fe: return "FE";
    case Partition::server: return "SERVER";
    case Partition::be: return "BE";
  }
  return "?";
}

Partition partition_of(const SplitPlan& plan, int stage) {
  if (stage <= plan.fe_last) return Partition::fe;
  if (stage < plan.be_first) return Partition::server;
  return Partition::be;
}

std::optional<std::string> plan_violation(const ModelGraph& graph, const SplitPlan& plan) {
  const int last = graph.num_stages() - 1;
  const std::string tag = "plan (" + std::to_string(plan.fe_last) + "," + std::to_string(plan.be_first) + ")";
  if (plan.fe_last < 0) return tag + ": front-end is empty";
  if (plan.be_first > last) return tag + ": back-end is empty";
  if (plan.fe_last + 1 >= plan.be_first) return tag + ": server partition is empty";
  for (const auto& e : graph.edges()) {
    const Partition dst = partition_of(plan, e.dst);
    if (e.src.stage < 0) {
      if (dst != Partition::fe)
        return tag + ": stage " + std::to_string(e.dst) + " (" + partition_name(dst) + ") reads the raw input";
      continue;
    }
    const Partition src = partition_of(plan, e.src.stage);
    if (e.kind == PortKind::pool_indices && src != dst)
      return tag + ": pool indices edge " + port_name(e.src) + " -> s" + std::to_string(e.dst) + " crosses " +
             partition_name(src) + "->" + partition_name(dst);
  }
  return std::nullopt;
}

void validate_plan(const ModelGraph& graph, const SplitPlan& plan) {
  if (auto v = plan_violation(graph, plan)) throw InvalidSplit(*v);
}

SubModel::SubModel(const ModelGraph& graph, const SplitPlan& plan, Partition partition)
    : partition_(partition), graph_defs_(graph.stages()), in_channels_(graph.meta().in_channels) {
  validate_plan(graph, plan);
  for (int i = 0; i < graph.num_stages(); ++i)
    if (partition_of(plan, i) == partition) stages_.push_back(i);

  std::vector<Port> to_server, to_be_local, from_server, from_fe;
  for (const auto& e : graph.edges()) {
    if (e.src.stage < 0) continue;
    const Partition src = partition_of(plan, e.src.stage), dst = partition_of(plan, e.dst);
    if (src == dst) continue;
    if (partition == Partition::fe && src == Partition::fe)
      (dst == Partition::server ? to_server : to_be_local).push_back(e.src);
    if (partition == Partition::server && dst == Partition::server) from_fe.push_back(e.src);
    if (partition == Partition::server && src == Partition::server) to_server.push_back(e.src);
    if (partition == Partition::be && dst == Partition::be)
      (src == Partition::server ? from_server : to_be_local).push_back(e.src);
  }
  auto uniq = [](std::vector<Port>& v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  };
  uniq(to_server);
  uniq(to_be_local);
  uniq(from_server);
  uniq(from_fe);
  if (partition != Partition::server) local_ = to_be_local;
  if (partition == Partition::fe) wire_ = to_server;
  if (partition == Partition::be) wire_ = from_server;
  switch (partition) {
    case Partition::fe:
      cut_inputs_ = {graph_input};
      cut_outputs_ = to_server;
      for (Port p : to_be_local)
        if (!std::binary_search(to_server.begin(), to_server.end(), p)) cut_outputs_.push_back(p);
      break;
    case Partition::server:
      cut_inputs_ = from_fe;
      cut_outputs_ = to_server;
      break;
    case Partition::be:
      cut_inputs_ = from_server;
      cut_inputs_.insert(cut_inputs_.end(), to_be_local.begin(), to_be_local.end());
      cut_outputs_ = {{graph.num_stages() - 1, 0}};
      break;
  }

  const auto ctx = init_for(graph.meta(), graph.dtype());
  for (int i : stages_)
    blocks_.push_back(graph_defs_[static_cast<std::size_t>(i)].spec.instantiate(graph.stage_prefix(i), ctx));
  NoGradGuard guard;
  load_state(state(), graph.state());
}

bool SubModel::client_local(Port p) const { return std::binary_search(local_.begin(), local_.end(), p); }

std::vector<PortShape> SubModel::input_signature(std::int64_t height, std::int64_t width) const {
  const auto shapes = infer_stages(graph_defs_, in_channels_, height, width);
  const PortShape input{PortKind::tensor, in_channels_, height, width};
  std::vector<PortShape> out;
  for (Port p : cut_inputs_) out.push_back(port_shape(shapes, input, p));
  return out;
}

std::vector<PortShape> SubModel::output_signature(std::int64_t height, std::int64_t width) const {
  const auto shapes = infer_stages(graph_defs_, in_channels_, height, width);
  const PortShape input{PortKind::tensor, in_channels_, height, width};
  std::vector<PortShape> out;
  for (Port p : cut_outputs_) out.push_back(port_shape(shapes, input, p));
  return out;
}

std::vector<Value> SubModel::forward(std::span<const Value> inputs, NormMode mode) {
  if (inputs.size() != cut_inputs_.size())
    throw ContractError(std::string(partition_name(partition_)) + " sub-model expects " +
                        std::to_string(cut_inputs_.size()) + " inputs, got " + std::to_string(inputs.size()));
  std::map<Port, Value> values;
  for (std::size_t i = 0; i < inputs.size(); ++i) values[cut_inputs_[i]] = inputs[i];
  for (std::size_t k = 0; k < stages_.size(); ++k) {
    const int i = stages_[k];
    auto out = run_stage(*blocks_[k], graph_defs_[static_cast<std::size_t>(i)], values, mode);
    for (std::size_t s = 0; s < out.size(); ++s) values[{i, static_cast<int>(s)}] = std::move(out[s]);
  }
  std::vector<Value> result;
  for (Port p : cut_outputs_) result.push_back(values.at(p));
  return result;
}

TensorList SubModel::parameters() const { return collect(blocks_, true); }
TensorList SubModel::buffers() const { return collect(blocks_, false); }

TensorList SubModel::state() const {
  TensorList s = parameters();
  auto b = buffers();
  s.insert(s.end(), b.begin(), b.end());
  return s;
}

SplitModels split_model(const ModelGraph& graph, const SplitPlan& plan) {
  validate_plan(graph, plan);
  SplitModels parts;
  parts.fe = std::make_unique<SubModel>(graph, plan, Partition::fe);
  parts.server = std::make_unique<SubModel>(graph, plan, Partition::server);
  parts.be = std::make_unique<SubModel>(graph, plan, Partition::be);
  return parts;
}

void merge_into(ModelGraph& graph, const SplitModels& parts) {
  TensorList all = parts.fe->state();
  for (const SubModel* m : {parts.server.get(), parts.be.get()}) {
    auto s = m->state();
    all.insert(all.end(), s.begin(), s.end());
  }
  NoGradGuard guard;
  load_state(graph.state(), all);
}

}  // namespace sfl
