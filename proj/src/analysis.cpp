#include "sfl/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace sfl {

std::int64_t count_params(const TensorList& params) { return total_numel(params); }
std::int64_t count_params(const ModelGraph& graph) { return total_numel(graph.parameters()); }
std::int64_t count_params(const SubModel& model) { return total_numel(model.parameters()); }

namespace {

void check_input(const ModelGraph& graph, const Shape& input_shape) {
  if (input_shape.size() != 4 || input_shape[1] != graph.meta().in_channels || input_shape[0] < 1)
    throw BuildError(graph.meta().network + ": input shape " + shape_str(input_shape) + " is not (N," +
                     std::to_string(graph.meta().in_channels) + ",H,W)");
}

std::int64_t stage_state_numel(const ModelGraph& graph, int stage) {
  return total_numel(graph.block(stage).parameters()) + total_numel(graph.block(stage).buffers());
}

}  // namespace

std::int64_t count_macs(const ModelGraph& graph, const Shape& input_shape) {
  check_input(graph, input_shape);
  std::int64_t total = 0;
  for (auto m : graph.stage_macs(input_shape[2], input_shape[3])) total += m;
  return total * input_shape[0];
}

double CostReport::client_mac_share() const {
  if (total_macs == 0) return 0.0;
  return static_cast<double>(cost(Partition::fe).macs + cost(Partition::be).macs) / static_cast<double>(total_macs);
}

CostReport cut_cost_report(const ModelGraph& graph, const SplitPlan& plan, const Shape& input_shape) {
  check_input(graph, input_shape);
  validate_plan(graph, plan);
  const auto N = input_shape[0], H = input_shape[2], W = input_shape[3];
  const auto shapes = graph.infer(H, W);
  const auto macs = graph.stage_macs(H, W);

  CostReport r;
  r.plan = plan;
  r.input_shape = input_shape;
  r.elem_size = dtype_size(graph.dtype());
  for (std::size_t p = 0; p < 3; ++p) r.partitions[p].partition = static_cast<Partition>(p);
  for (int i = 0; i < graph.num_stages(); ++i) {
    auto& pc = r.partitions[static_cast<std::size_t>(partition_of(plan, i))];
    pc.params += total_numel(graph.block(i).parameters());
    pc.macs += macs[static_cast<std::size_t>(i)] * N;
  }
  for (const auto& pc : r.partitions) {
    r.total_params += pc.params;
    r.total_macs += pc.macs;
  }

  std::vector<std::pair<Port, Partition>> seen;
  for (const auto& e : graph.edges()) {
    if (e.src.stage < 0) continue;
    const Partition from = partition_of(plan, e.src.stage), to = partition_of(plan, e.dst);
    if (from == to) continue;
    if (std::find(seen.begin(), seen.end(), std::make_pair(e.src, to)) != seen.end()) continue;
    seen.emplace_back(e.src, to);
    CutEntry c;
    c.port = e.src;
    c.shape = shapes[static_cast<std::size_t>(e.src.stage)][static_cast<std::size_t>(e.src.slot)];
    c.from = from;
    c.to = to;
    c.client_local = from == Partition::fe && to == Partition::be;
    c.wire_bytes_per_sample = c.client_local ? 0 : c.shape.numel() * static_cast<std::int64_t>(r.elem_size);
    r.cuts.push_back(c);
  }
  std::sort(r.cuts.begin(), r.cuts.end(), [](const CutEntry& a, const CutEntry& b) {
    return std::tie(a.from, a.to, a.port) < std::tie(b.from, b.to, b.port);
  });
  for (const auto& c : r.cuts) {
    if (c.from == Partition::fe && c.to == Partition::server) r.activation_bytes += c.wire_bytes_per_sample * N;
    if (c.from == Partition::server && c.to == Partition::be) r.server_output_bytes += c.wire_bytes_per_sample * N;
  }
  r.output_grad_bytes = r.server_output_bytes;
  r.activation_grad_bytes = r.activation_bytes;
  return r;
}

PlanEvaluation evaluate_plan(const ModelGraph& graph, const SplitPlan& plan, std::int64_t height, std::int64_t width,
                             const SplitConstraints& constraints) {
  PlanEvaluation ev;
  ev.plan = plan;
  ev.criteria.fe_stages = plan.fe_last + 1;
  ev.criteria.be_stages = graph.num_stages() - plan.be_first;

  const int last = graph.num_stages() - 1;
  const bool partitions_nonempty = plan.fe_last >= 0 && plan.fe_last + 1 < plan.be_first && plan.be_first <= last;
  if (!partitions_nonempty) {
    ev.failure = "dimension closure: a partition is empty";
    return ev;
  }
  bool crosses_indices = false;
  bool raw_input_outside_fe = false;
  for (const auto& e : graph.edges()) {
    if (e.src.stage < 0) {
      raw_input_outside_fe |= partition_of(plan, e.dst) != Partition::fe;
      continue;
    }
    if (e.kind == PortKind::pool_indices && partition_of(plan, e.src.stage) != partition_of(plan, e.dst))
      crosses_indices = true;
  }
  bool shapes_close = true;
  try {
    graph.infer(height, width);
  } catch (const BuildError&) {
    shapes_close = false;
  }
  ev.criteria.dimension_closure = shapes_close && !crosses_indices;
  // Labels attach after the last stage, which always sits in the BE.
  ev.criteria.privacy_placement = !raw_input_outside_fe;
  if (!ev.criteria.dimension_closure) {
    ev.failure = crosses_indices ? "dimension closure: pool indices cross a cut"
                                 : "dimension closure: input does not close over the graph";
    return ev;
  }
  if (!ev.criteria.privacy_placement) {
    ev.failure = "privacy placement: a non-FE stage reads raw images";
    return ev;
  }
  const auto cost = cut_cost_report(graph, plan, {1, graph.meta().in_channels, height, width});
  ev.criteria.comm_bytes_per_sample = cost.train_total();
  ev.criteria.client_mac_share = cost.client_mac_share();
  if (constraints.max_client_mac_share && ev.criteria.client_mac_share > *constraints.max_client_mac_share) {
    std::ostringstream os;
    os << "client compute share: " << ev.criteria.client_mac_share << " > " << *constraints.max_client_mac_share;
    ev.failure = os.str();
    return ev;
  }
  if (constraints.max_cut_bytes && ev.criteria.comm_bytes_per_sample > *constraints.max_cut_bytes) {
    ev.failure = "communication cost: " + std::to_string(ev.criteria.comm_bytes_per_sample) + " > " +
                 std::to_string(*constraints.max_cut_bytes) + " bytes per sample";
    return ev;
  }
  return ev;
}

SplitRecommendation recommend_split(const ModelGraph& graph, const SplitConstraints& constraints,
                                    std::int64_t height, std::int64_t width) {
  SplitRecommendation rec;
  const int n = graph.num_stages();
  const PlanEvaluation* best = nullptr;
  for (int fe = 0; fe < n; ++fe)
    for (int be = fe + 2; be < n; ++be) rec.evaluated.push_back(evaluate_plan(graph, {fe, be}, height, width, constraints));
  for (const auto& ev : rec.evaluated) {
    if (ev.failure) continue;
    if (!best) {
      best = &ev;
      continue;
    }
    const auto key = [](const PlanEvaluation& e) {
      return std::make_tuple(e.criteria.comm_bytes_per_sample, e.criteria.client_mac_share, e.plan.fe_last,
                             e.plan.be_first);
    };
    if (key(ev) < key(*best)) best = &ev;
  }
  if (best) {
    rec.plan = best->plan;
    rec.criteria = best->criteria;
  }
  return rec;
}

std::string SplitRecommendation::infeasibility_report() const {
  std::ostringstream os;
  os << "no feasible split plan among " << evaluated.size() << " candidates\n";
  for (const auto& ev : evaluated)
    os << "  (" << ev.plan.fe_last << "," << ev.plan.be_first << "): " << (ev.failure ? *ev.failure : "ok") << '\n';
  return os.str();
}

std::vector<ComplexityRow> complexity_rows(std::vector<ComplexityRow> rows, const std::string& anchor) {
  if (rows.empty()) return rows;
  const ComplexityRow* ref = &rows.front();
  for (const auto& r : rows)
    if (r.network == anchor) ref = &r;
  const double p = static_cast<double>(ref->params), m = static_cast<double>(ref->macs);
  for (auto& r : rows) {
    r.params_ratio = p > 0 ? static_cast<double>(r.params) / p : 0.0;
    r.macs_ratio = m > 0 ? static_cast<double>(r.macs) / m : 0.0;
  }
  return rows;
}

std::string export_table(const std::vector<ComplexityRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(16) << "network" << std::right << std::setw(14) << "params" << std::setw(18)
     << "MACs" << std::setw(18) << "params ratio" << std::setw(16) << "MACs ratio" << '\n';
  for (const auto& r : rows) {
    os << std::left << std::setw(16) << r.network << std::right << std::setw(14) << r.params << std::setw(18)
       << r.macs << std::fixed << std::setprecision(4) << std::setw(18) << r.params_ratio << std::setw(16)
       << r.macs_ratio << '\n';
    os.unsetf(std::ios::fixed);
  }
  os << "(ratio columns are fractions of the anchor network, not percentages)\n";
  return os.str();
}

std::string export_csv(const std::vector<ComplexityRow>& rows) {
  std::ostringstream os;
  os << "network,params,macs,params_ratio_vs_unet,macs_ratio_vs_unet\n";
  os << std::setprecision(17);
  for (const auto& r : rows)
    os << r.network << ',' << r.params << ',' << r.macs << ',' << r.params_ratio << ',' << r.macs_ratio << '\n';
  return os.str();
}

std::vector<ComplexityRow> parse_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::vector<ComplexityRow> rows;
  if (!std::getline(in, line)) return rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string f[5];
    for (auto& s : f)
      if (!std::getline(ls, s, ',')) throw DataError("complexity csv: short row '" + line + "'");
    ComplexityRow r;
    r.network = f[0];
    r.params = std::stoll(f[1]);
    r.macs = std::stoll(f[2]);
    r.params_ratio = std::stod(f[3]);
    r.macs_ratio = std::stod(f[4]);
    rows.push_back(r);
  }
  return rows;
}

TrafficPrediction predict_round_traffic(const ModelGraph& graph, const SplitPlan& plan, std::int64_t height,
                                        std::int64_t width, const ClientSchedule& schedule, int local_epochs) {
  const auto per_sample = cut_cost_report(graph, plan, {1, graph.meta().in_channels, height, width});
  std::int64_t client_state = 0;
  for (int i = 0; i < graph.num_stages(); ++i)
    if (partition_of(plan, i) != Partition::server) client_state += stage_state_numel(graph, i);
  const std::int64_t state_bytes = client_state * static_cast<std::int64_t>(dtype_size(graph.dtype()));
  const std::int64_t steps = schedule.train_samples * local_epochs;
  TrafficPrediction t;
  t.bytes_up = steps * per_sample.train_up() + schedule.val_samples * per_sample.forward_up() + state_bytes;
  t.bytes_down = steps * per_sample.train_down() + schedule.val_samples * per_sample.forward_down() + state_bytes;
  return t;
}

}  // namespace sfl
