#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sfl/blocks.hpp"

namespace sfl {

// Output slot `slot` of stage `stage`; stage -1 is the graph input.
struct Port {
  int stage = -1;
  int slot = 0;

  auto operator<=>(const Port&) const = default;
};

inline constexpr Port graph_input{-1, 0};

std::string port_name(Port p);

struct StageDef {
  std::string label;
  BlockSpec spec;
  std::vector<Port> inputs;
};

struct Edge {
  Port src;
  int dst = 0;
  int dst_slot = 0;
  PortKind kind = PortKind::tensor;
  // Anything other than "previous stage, main output" is a skip edge.
  bool skip = false;
};

struct SplitPlan {
  int fe_last = 0;
  int be_first = 0;

  bool operator==(const SplitPlan&) const = default;
};

struct GraphMeta {
  std::string network;
  int in_channels = 3;
  int num_classes = 2;
  int base_width = 32;
  int depth = 4;
  std::uint64_t seed = 0;
  // Spatial extent used for build-time validation.
  int input_size = 64;
};

// Ordered stage graph plus its instantiated parameters. Stage i may read any
// port of stages < i; the last stage's slot 0 is the network output.
class ModelGraph {
 public:
  ModelGraph(GraphMeta meta, std::vector<StageDef> stages, SplitPlan default_plan, DType dtype = DType::f32);

  const GraphMeta& meta() const { return meta_; }
  const std::vector<StageDef>& stages() const { return stages_; }
  int num_stages() const { return static_cast<int>(stages_.size()); }
  SplitPlan default_plan() const { return default_plan_; }
  DType dtype() const { return dtype_; }

  std::vector<Edge> edges() const;
  // Per-stage output port shapes for an H x W input. Throws BuildError.
  std::vector<std::vector<PortShape>> infer(std::int64_t height, std::int64_t width) const;
  std::vector<std::int64_t> stage_macs(std::int64_t height, std::int64_t width) const;

  Block& block(int stage) { return *blocks_.at(static_cast<std::size_t>(stage)); }
  const Block& block(int stage) const { return *blocks_.at(static_cast<std::size_t>(stage)); }
  std::string stage_prefix(int stage) const;

  TensorList parameters() const;
  TensorList buffers() const;
  // Parameters followed by buffers: everything a replica needs.
  TensorList state() const;

  Tensor forward(const Tensor& x, NormMode mode);

  // Same specs and seed, state copied from this graph.
  std::unique_ptr<ModelGraph> replicate() const;

  std::string describe(std::int64_t height, std::int64_t width) const;

 private:
  GraphMeta meta_;
  std::vector<StageDef> stages_;
  SplitPlan default_plan_;
  DType dtype_;
  std::vector<std::unique_ptr<Block>> blocks_;
};

// Shape inference over a bare stage list.
std::vector<std::vector<PortShape>> infer_stages(const std::vector<StageDef>& stages, int in_channels,
                                                 std::int64_t height, std::int64_t width);

Tensor forward_monolithic(ModelGraph& graph, const Tensor& x, NormMode mode = NormMode::train);

enum class Partition : std::uint8_t { fe, server, be };

const char* partition_name(Partition p);
Partition partition_of(const SplitPlan& plan, int stage);

// Reason the plan is unusable for `graph`, or nullopt when valid.
std::optional<std::string> plan_violation(const ModelGraph& graph, const SplitPlan& plan);
// Throws InvalidSplit with the violation.
void validate_plan(const ModelGraph& graph, const SplitPlan& plan);

// One executable partition. Stage blocks are fresh instances loaded with the
// source graph's state; the sub-model never shares tensors with it.
class SubModel {
 public:
  SubModel(const ModelGraph& graph, const SplitPlan& plan, Partition partition);
  SubModel(const SubModel&) = delete;
  SubModel& operator=(const SubModel&) = delete;

  Partition partition() const { return partition_; }
  const std::vector<int>& stages() const { return stages_; }
  // Ports read from other partitions / produced for them, sorted. For the
  // BE, server-produced ports come before FE-produced (client-local) ones.
  // For the FE, server-bound ports come before BE-only ports.
  const std::vector<Port>& cut_inputs() const { return cut_inputs_; }
  const std::vector<Port>& cut_outputs() const { return cut_outputs_; }
  bool client_local(Port p) const;
  // FE: ports sent to the server. BE: ports received from the server.
  const std::vector<Port>& wire_ports() const { return wire_; }

  std::vector<PortShape> input_signature(std::int64_t height, std::int64_t width) const;
  std::vector<PortShape> output_signature(std::int64_t height, std::int64_t width) const;

  // `inputs` follows cut_inputs() (the FE takes the image alone). Returns
  // values in cut_outputs() order; the BE returns the logits alone.
  std::vector<Value> forward(std::span<const Value> inputs, NormMode mode);

  TensorList parameters() const;
  TensorList buffers() const;
  TensorList state() const;

 private:
  Partition partition_;
  std::vector<int> stages_;
  std::vector<Port> cut_inputs_;
  std::vector<Port> cut_outputs_;
  std::vector<Port> local_;
  std::vector<Port> wire_;
  std::vector<std::unique_ptr<Block>> blocks_;
  std::vector<StageDef> graph_defs_;
  int in_channels_;
};

struct SplitModels {
  std::unique_ptr<SubModel> fe;
  std::unique_ptr<SubModel> server;
  std::unique_ptr<SubModel> be;
};

SplitModels split_model(const ModelGraph& graph, const SplitPlan& plan);

// Copies the partitions' state back into `graph`.
void merge_into(ModelGraph& graph, const SplitModels& parts);

}  // namespace sfl
