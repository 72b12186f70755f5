#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sfl/graph.hpp"

namespace sfl {

std::int64_t count_params(const TensorList& params);
std::int64_t count_params(const ModelGraph& graph);
std::int64_t count_params(const SubModel& model);

// MACs of one forward pass for input (N,C,H,W). Throws BuildError when the
// input does not close over the graph.
std::int64_t count_macs(const ModelGraph& graph, const Shape& input_shape);

struct PartitionCost {
  Partition partition = Partition::fe;
  std::int64_t params = 0;
  std::int64_t macs = 0;
};

struct CutEntry {
  Port port;
  PortShape shape;
  Partition from = Partition::fe;
  Partition to = Partition::server;
  bool client_local = false;
  // Forward payload per sample; zero for client-local edges.
  std::int64_t wire_bytes_per_sample = 0;
};

// Costs of a plan for one batch. "up" is client to server, "down" server to
// client. Gradients retrace the cuts in reverse, so the BE's output gradient
// travels up and the FE's activation gradient travels down.
struct CostReport {
  SplitPlan plan;
  Shape input_shape;
  std::size_t elem_size = 4;
  std::array<PartitionCost, 3> partitions{};
  std::int64_t total_params = 0;
  std::int64_t total_macs = 0;
  std::vector<CutEntry> cuts;
  std::int64_t activation_bytes = 0;     // FE -> server, per batch
  std::int64_t server_output_bytes = 0;  // server -> BE, per batch
  std::int64_t output_grad_bytes = 0;    // BE -> server
  std::int64_t activation_grad_bytes = 0;  // server -> FE

  std::int64_t forward_up() const { return activation_bytes; }
  std::int64_t forward_down() const { return server_output_bytes; }
  std::int64_t train_up() const { return activation_bytes + output_grad_bytes; }
  std::int64_t train_down() const { return server_output_bytes + activation_grad_bytes; }
  std::int64_t train_total() const { return train_up() + train_down(); }
  double client_mac_share() const;
  const PartitionCost& cost(Partition p) const { return partitions[static_cast<std::size_t>(p)]; }
};

CostReport cut_cost_report(const ModelGraph& graph, const SplitPlan& plan, const Shape& input_shape);

struct SplitCriteriaReport {
  // 1: informational, depth of the two cuts in stages.
  int fe_stages = 0;
  int be_stages = 0;
  // 2: wire bytes per sample for one training step (both directions).
  std::int64_t comm_bytes_per_sample = 0;
  // 3 and 4.
  bool dimension_closure = false;
  bool privacy_placement = false;
  // 5.
  double client_mac_share = 0.0;
};

struct SplitConstraints {
  std::optional<double> max_client_mac_share;
  std::optional<std::int64_t> max_cut_bytes;  // per sample, training step
};

struct PlanEvaluation {
  SplitPlan plan;
  SplitCriteriaReport criteria;
  std::optional<std::string> failure;  // first failing criterion
};

struct SplitRecommendation {
  std::optional<SplitPlan> plan;
  SplitCriteriaReport criteria;
  std::vector<PlanEvaluation> evaluated;  // every (fe_last, be_first) pair

  bool feasible() const { return plan.has_value(); }
  std::string infeasibility_report() const;
};

PlanEvaluation evaluate_plan(const ModelGraph& graph, const SplitPlan& plan, std::int64_t height, std::int64_t width,
                             const SplitConstraints& constraints = {});

// Exhaustive search: filter on closure, privacy, share and byte bounds, pick
// minimal bytes, then smallest client share, then smallest fe_last.
SplitRecommendation recommend_split(const ModelGraph& graph, const SplitConstraints& constraints,
                                    std::int64_t height, std::int64_t width);

struct ComplexityRow {
  std::string network;
  std::int64_t params = 0;
  std::int64_t macs = 0;
  double params_ratio = 0.0;  // vs the anchor row
  double macs_ratio = 0.0;
};

// Ratios are taken against the row named `anchor` (first row if absent).
std::vector<ComplexityRow> complexity_rows(std::vector<ComplexityRow> rows, const std::string& anchor = "unet");
std::string export_table(const std::vector<ComplexityRow>& rows);
std::string export_csv(const std::vector<ComplexityRow>& rows);
std::vector<ComplexityRow> parse_csv(const std::string& csv);

// Wire traffic of one client in one global round of a SplitFed run.
struct TrafficPrediction {
  std::int64_t bytes_up = 0;
  std::int64_t bytes_down = 0;
};

struct ClientSchedule {
  std::int64_t train_samples = 0;
  std::int64_t val_samples = 0;
};

// Every training sample crosses both cuts in both directions once per
// local epoch; validation samples cross forward only; the FE and BE weights
// go up once and come back once per round.
TrafficPrediction predict_round_traffic(const ModelGraph& graph, const SplitPlan& plan, std::int64_t height,
                                        std::int64_t width, const ClientSchedule& schedule, int local_epochs);

}  // namespace sfl
