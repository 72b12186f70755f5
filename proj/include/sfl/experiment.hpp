#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sfl/engine.hpp"
#include "sfl/zoo.hpp"

namespace sfl {

struct DatasetConfig {
  // Named client/test split; explicit counts below take precedence.
  std::string preset = "synthetic-4client";
  std::vector<int> client_counts;
  int test_count = 0;
  // 0 takes the preset's class count.
  int num_classes = 0;
  // Empty directories mean synthetic data.
  std::string images_dir;
  std::string masks_dir;
  int image_size = 64;

  bool operator==(const DatasetConfig&) const = default;
};

struct ExperimentConfig {
  NetworkConfig network;
  DatasetConfig dataset;
  RoundConfig training;
  // Epochs of the centralized and local baselines; 0 means rounds x local epochs.
  int baseline_epochs = 0;
  std::optional<SplitPlan> split;
  TransportKind transport = TransportKind::inproc;
  std::string address = "127.0.0.1:5555";
  std::string output_dir = "runs/default";
  std::uint64_t seed = 0;
  int save_masks = 4;

  int effective_baseline_epochs() const;
};

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

// Strict reader: unknown keys and type mismatches raise ConfigError naming
// the offending key path. `network` is required.
ExperimentConfig parse_config(const nlohmann::json& doc);
nlohmann::ordered_json config_to_json(const ExperimentConfig& cfg);
nlohmann::json load_json_file(const std::filesystem::path& path);

// Built-in experiment documents, also shipped under configs/.
std::vector<std::string> experiment_preset_names();
nlohmann::json experiment_preset(const std::string& name);

// Layers documents left to right with JSON merge-patch semantics.
nlohmann::json merge_documents(const std::vector<nlohmann::json>& docs);

struct ExperimentData {
  std::vector<ClientData> clients;
  std::vector<Sample> test;
  int num_classes = 0;
};

ExperimentData prepare_data(const ExperimentConfig& cfg);
std::unique_ptr<ModelGraph> build_model(const ExperimentConfig& cfg, int num_classes);
SplitPlan resolve_plan(const ExperimentConfig& cfg, const ModelGraph& graph);

// Regime names: centralized, local, splitfed.
struct RegimeResult {
  std::string regime;
  std::vector<RunHistory> histories;
  double test_iou = 0.0;
};

RegimeResult run_regime(const ExperimentConfig& cfg, const std::string& regime);

// Writes config.json, metrics.jsonl, summary.json/.csv/.txt and mask PNGs
// for the first `save_masks` test samples under cfg.output_dir.
void write_outputs(const ExperimentConfig& cfg, const RegimeResult& result);

// Marks an output directory as incomplete.
void flag_partial(const std::filesystem::path& dir, const std::string& error);

struct RunSummary {
  std::string network;
  std::string regime;
  double test_iou = 0.0;
  std::uint64_t seed = 0;
};

RunSummary read_summary(const std::filesystem::path& run_dir);
// One row per network with C / L / S columns; missing regimes print "-".
std::string results_table(const std::vector<RunSummary>& runs);

}  // namespace sfl
