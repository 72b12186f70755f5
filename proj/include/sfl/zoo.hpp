#pragma once

#include <memory>
#include <string>
#include <vector>

#include "sfl/graph.hpp"

namespace sfl {

struct NetworkConfig {
  std::string network = "unet";
  int in_channels = 3;
  int num_classes = 2;
  int base_width = 32;
  int depth = 4;
  int input_size = 64;
  std::uint64_t seed = 0;
  DType dtype = DType::f32;

  // CGNet
  int cg_stem_width = 32;
  int cg_stage1_width = 64;
  int cg_stage2_width = 128;
  int cg_stage1_blocks = 3;
  int cg_stage2_blocks = 4;
  int cg_stage1_dilation = 2;
  int cg_stage2_dilation = 4;
  int cg_reduction = 16;
  bool cg_global_context = true;
};

const std::vector<std::string>& network_names();

std::unique_ptr<ModelGraph> build_unet(const NetworkConfig& cfg);
std::unique_ptr<ModelGraph> build_segnet(const NetworkConfig& cfg);
std::unique_ptr<ModelGraph> build_attention_unet(const NetworkConfig& cfg);
std::unique_ptr<ModelGraph> build_cgnet(const NetworkConfig& cfg);
// Dispatches on cfg.network; unknown names are a ConfigError.
std::unique_ptr<ModelGraph> build_network(const NetworkConfig& cfg);

int count_attention_gates(const ModelGraph& graph);

}  // namespace sfl
