#pragma once

#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sfl/data.hpp"
#include "sfl/graph.hpp"
#include "sfl/metrics.hpp"
#include "sfl/optim.hpp"
#include "sfl/transport.hpp"
#include "sfl/wire.hpp"

namespace sfl {

struct RoundConfig {
  int global_rounds = 10;
  int local_epochs = 12;
  int batch_size = 4;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  bool aggregate_server = true;
  bool augment = true;
  AugmentConfig augment_config;
};

struct ClientData {
  int id = 0;
  std::vector<Sample> train;
  std::vector<Sample> val;
};

struct HistoryRecord {
  int round = 0;
  int client = -1;
  double loss = 0.0;
  double iou = 0.0;
  std::int64_t bytes_up = 0;
  std::int64_t bytes_down = 0;

  bool operator==(const HistoryRecord&) const = default;
};

struct RunHistory {
  std::string regime;
  std::vector<HistoryRecord> records;
  MetricReport test;
  double test_loss = 0.0;
  // Argmax masks of the final model on the test set, sample-major.
  std::vector<ClassId> test_predictions;

  int rounds() const;
  std::int64_t total_bytes_up() const;
  std::int64_t total_bytes_down() const;
  // One JSON object per record.
  std::string to_jsonl() const;
};

// Per-parameter weighted mean, weights count_i / sum(counts), accumulated in
// double in upload order. Throws AggregationError on mismatched names or
// shapes, or a non-positive total count.
struct WeightUpload {
  TensorList state;
  std::int64_t sample_count = 0;
};
TensorList fedavg(const std::vector<WeightUpload>& uploads);

Tensor segmentation_loss(const Tensor& logits, std::span<const ClassId> masks);

// Client side of the relay: FE and BE sub-models with their optimizers.
// Images enter fe_forward only and masks enter be_forward_loss only.
class ClientParty {
 public:
  ClientParty(int id, const ModelGraph& global, const SplitPlan& plan, const AdamOptions& adam);

  int id() const { return id_; }
  SubModel& fe() { return *fe_; }
  SubModel& be() { return *be_; }

  Message fe_forward(const Tensor& images, std::uint16_t round, std::uint32_t batch_id, NormMode mode);
  // Returns the loss; the logits stay available through logits().
  Tensor be_forward_loss(const Message& server_output, std::span<const ClassId> masks);
  Tensor be_forward_eval(const Message& server_output);
  Message be_backward();
  void fe_backward(const Message& activation_grad);
  // Adam on FE and BE; grads are cleared.
  void step();
  const Tensor& logits() const { return logits_; }

  Message upload(std::uint16_t round, std::int64_t sample_count) const;
  void load_global(const Message& global);
  TensorList state() const;

 private:
  std::vector<Value> be_inputs(const Message& server_output, bool track);

  int id_;
  std::unique_ptr<SubModel> fe_, be_;
  AdamState fe_adam_, be_adam_;
  std::vector<Port> act_ports_, out_ports_;
  std::vector<std::string> act_names_, out_names_;
  std::vector<PortShape> act_signature_, out_signature_;
  std::map<Port, Tensor> fe_outputs_;
  std::vector<Tensor> server_leaves_;
  std::map<Port, Tensor> local_leaves_;
  Tensor loss_;
  Tensor logits_;
  std::uint16_t round_ = 0;
  std::uint32_t batch_id_ = 0;
};

// One server copy serving one client. Tapes are kept per batch id until
// the matching gradient arrives.
class ServerParty {
 public:
  ServerParty(int client_id, const ModelGraph& global, const SplitPlan& plan, const AdamOptions& adam);

  SubModel& model() { return *model_; }
  Message forward(const Message& activation, NormMode mode);
  Message backward(const Message& output_grad);
  void step();
  std::size_t pending() const { return tapes_.size(); }

 private:
  struct Tape {
    std::vector<Tensor> inputs;
    std::vector<Tensor> outputs;
  };
  int client_id_;
  std::unique_ptr<SubModel> model_;
  AdamState adam_;
  std::vector<std::string> in_names_, out_names_;
  std::vector<PortShape> in_signature_;
  // Input signature at the build-time extent; scales incoming payloads.
  std::vector<PortShape> reference_;
  std::int64_t input_size_ = 0;
  std::map<std::uint32_t, Tape> tapes_;
};

struct EquivalenceTolerances {
  double forward_abs = 1e-6;
  double grad_rel = 1e-5;
  double param_abs = 1e-5;
  double loss_abs = 1e-4;
};

struct EquivalenceReport {
  double forward_max_abs = 0.0;
  double grad_max_rel = 0.0;
  double param_max_abs = 0.0;
  double loss_max_abs = 0.0;
  std::vector<double> monolithic_losses;
  std::vector<double> split_losses;
  std::string worst_grad;
  bool passed = false;
};

// Runs `steps` train steps on a monolithic replica and on the three-party
// relay from identical state. Gradient error per tensor is
// max|g_split - g_mono| / max|g_mono|, measured on the first step.
EquivalenceReport check_split_equivalence(const ModelGraph& graph, const SplitPlan& plan, const Batch& batch,
                                          int steps, const EquivalenceTolerances& tol = {});

// Server role of a SplitFed session. serve() runs one client connection to
// completion and may be called concurrently, one thread per client; FedAvg
// is a barrier across those threads.
class SplitFedServer {
 public:
  SplitFedServer(const ModelGraph& initial, const SplitPlan& plan, const RoundConfig& cfg, int num_clients);

  void serve(Connection& conn);
  // Unblocks waiting serve() calls with an error.
  void abort();
  // Assembles the global model and scores it on `test`.
  RunHistory finish(const std::vector<Sample>& test);

 private:
  struct RoundUploads {
    std::map<int, WeightUpload> client_state;
    std::map<int, WeightUpload> server_state;
    std::optional<TensorList> client_avg;
    std::optional<TensorList> server_avg;
    int collected = 0;
  };

  std::pair<TensorList, TensorList> aggregate(int round, int client, WeightUpload client_state,
                                              WeightUpload server_state);

  const ModelGraph& initial_;
  SplitPlan plan_;
  RoundConfig cfg_;
  int num_clients_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool aborted_ = false;
  std::map<int, RoundUploads> rounds_;
  std::vector<HistoryRecord> records_;
  std::optional<TensorList> final_client_avg_;
  std::optional<TensorList> final_server_avg_;
};

// Client role of a SplitFed session over `conn`.
void run_client(Connection& conn, const ModelGraph& initial, const SplitPlan& plan, const RoundConfig& cfg,
                const ClientData& data);

enum class TransportKind { inproc, tcp };

// Full session inside this process: one thread per client and one per
// server connection.
RunHistory run_splitfed(const ModelGraph& initial, const SplitPlan& plan, const RoundConfig& cfg,
                        const std::vector<ClientData>& clients, const std::vector<Sample>& test,
                        TransportKind transport = TransportKind::inproc, const std::string& tcp_host = "127.0.0.1");

// Monolithic training of `model` in place; one record per epoch.
RunHistory train_monolithic(ModelGraph& model, const std::vector<Sample>& train, const std::vector<Sample>& val,
                            const std::vector<Sample>& test, int epochs, const RoundConfig& cfg, int client_id,
                            const std::string& regime);

RunHistory run_centralized(const ModelGraph& initial, const RoundConfig& cfg, const std::vector<ClientData>& clients,
                           const std::vector<Sample>& test, int epochs);
std::vector<RunHistory> run_local_baselines(const ModelGraph& initial, const RoundConfig& cfg,
                                            const std::vector<ClientData>& clients, const std::vector<Sample>& test,
                                            int epochs);

// Mean test IoU over the per-client histories.
double mean_test_iou(const std::vector<RunHistory>& histories);

struct EvalResult {
  MetricReport report;
  double loss = 0.0;
  std::vector<ClassId> predictions;
};

EvalResult evaluate_model(ModelGraph& model, const std::vector<Sample>& samples, int batch_size,
                          bool keep_predictions = false);

}  // namespace sfl
