#include "sfl/zoo.hpp"

namespace sfl {

namespace {

GraphMeta meta_from(const NetworkConfig& cfg, const std::string& name, int depth) {
  GraphMeta m;
  m.network = name;
  m.in_channels = cfg.in_channels;
  m.num_classes = cfg.num_classes;
  m.base_width = cfg.base_width;
  m.depth = depth;
  m.seed = cfg.seed;
  m.input_size = cfg.input_size;
  return m;
}

void check_common(const NetworkConfig& cfg, const char* name) {
  if (cfg.in_channels < 1) throw BuildError(std::string(name) + ": in_channels must be >= 1");
  if (cfg.num_classes < 2) throw BuildError(std::string(name) + ": num_classes must be >= 2");
  if (cfg.base_width < 1) throw BuildError(std::string(name) + ": base_width must be >= 1");
}

std::unique_ptr<ModelGraph> build_u_shaped(const NetworkConfig& cfg, Variant variant, const char* name) {
  check_common(cfg, name);
  const int D = cfg.depth;
  if (D < 2) throw BuildError(std::string(name) + ": depth must be >= 2, got " + std::to_string(D));
  std::vector<int> w;
  for (int i = 0; i <= D; ++i) w.push_back(cfg.base_width << i);

  std::vector<StageDef> stages;
  for (int i = 0; i < D; ++i) {
    const Port in = i == 0 ? graph_input : Port{i - 1, 0};
    stages.push_back({"enc" + std::to_string(i), encoder_stage(i == 0 ? cfg.in_channels : w[i - 1], w[i], Variant::unet),
                      {in}});
  }
  stages.push_back({"bottleneck", double_conv(w[D - 1], w[D]), {{D - 1, 0}}});
  for (int i = D - 1; i >= 0; --i) {
    const int prev = static_cast<int>(stages.size()) - 1;
    stages.push_back(
        {"dec" + std::to_string(i), decoder_stage(w[i + 1], w[i], w[i], variant), {{prev, 0}, {i, 1}}});
  }
  const int prev = static_cast<int>(stages.size()) - 1;
  stages.push_back({"head", classifier_head(w[0], cfg.num_classes), {{prev, 0}}});
  const int n = static_cast<int>(stages.size());
  return std::make_unique<ModelGraph>(meta_from(cfg, name, D), std::move(stages), SplitPlan{0, n - 2}, cfg.dtype);
}

}  // namespace

const std::vector<std::string>& network_names() {
  static const std::vector<std::string> names{"unet", "segnet", "attention_unet", "cgnet"};
  return names;
}

std::unique_ptr<ModelGraph> build_unet(const NetworkConfig& cfg) { return build_u_shaped(cfg, Variant::unet, "unet"); }

std::unique_ptr<ModelGraph> build_attention_unet(const NetworkConfig& cfg) {
  return build_u_shaped(cfg, Variant::attention_unet, "attention_unet");
}

std::unique_ptr<ModelGraph> build_segnet(const NetworkConfig& cfg) {
  check_common(cfg, "segnet");
  const int D = cfg.depth;
  if (D < 2) throw BuildError("segnet: depth must be >= 2, got " + std::to_string(D));
  std::vector<int> w;
  for (int i = 0; i <= D; ++i) w.push_back(cfg.base_width << i);

  std::vector<StageDef> stages;
  stages.push_back({"stem", double_conv(cfg.in_channels, w[0]), {graph_input}});
  for (int i = 1; i <= D; ++i)
    stages.push_back({"enc" + std::to_string(i), encoder_stage(w[i - 1], w[i], Variant::segnet), {{i - 1, 0}}});
  for (int i = D; i >= 1; --i) {
    const int prev = static_cast<int>(stages.size()) - 1;
    stages.push_back({"dec" + std::to_string(i), decoder_stage(w[i], 0, w[i - 1], Variant::segnet), {{prev, 0}, {i, 1}}});
  }
  stages.push_back({"tail", double_conv(w[0], w[0]), {{static_cast<int>(stages.size()) - 1, 0}}});
  stages.push_back({"head", classifier_head(w[0], cfg.num_classes), {{static_cast<int>(stages.size()) - 1, 0}}});
  const int n = static_cast<int>(stages.size());
  return std::make_unique<ModelGraph>(meta_from(cfg, "segnet", D), std::move(stages), SplitPlan{0, n - 2}, cfg.dtype);
}

std::unique_ptr<ModelGraph> build_cgnet(const NetworkConfig& cfg) {
  check_common(cfg, "cgnet");
  auto stage1 = cg_stage(cfg.cg_stem_width, cfg.cg_stage1_width, cfg.cg_stage1_blocks, cfg.cg_stage1_dilation,
                         cfg.cg_reduction);
  auto stage2 = cg_stage(cfg.cg_stage1_width, cfg.cg_stage2_width, cfg.cg_stage2_blocks, cfg.cg_stage2_dilation,
                         cfg.cg_reduction);
  stage1.global_context = stage2.global_context = cfg.cg_global_context;
  std::vector<StageDef> stages{
      {"stem", cg_stem(cfg.in_channels, cfg.cg_stem_width), {graph_input}},
      {"stage1", stage1, {{0, 0}}},
      {"stage2", stage2, {{1, 0}}},
      {"head", classifier_head(cfg.cg_stage2_width, cfg.num_classes, 8), {{2, 0}}},
  };
  return std::make_unique<ModelGraph>(meta_from(cfg, "cgnet", 3), std::move(stages), SplitPlan{0, 3}, cfg.dtype);
}

std::unique_ptr<ModelGraph> build_network(const NetworkConfig& cfg) {
  if (cfg.network == "unet") return build_unet(cfg);
  if (cfg.network == "segnet") return build_segnet(cfg);
  if (cfg.network == "attention_unet") return build_attention_unet(cfg);
  if (cfg.network == "cgnet") return build_cgnet(cfg);
  throw ConfigError("unknown network '" + cfg.network + "' (expected unet, segnet, attention_unet or cgnet)");
}

int count_attention_gates(const ModelGraph& graph) {
  int n = 0;
  for (const auto& s : graph.stages()) {
    if (s.spec.kind == BlockKind::attention_gate) ++n;
    if (s.spec.kind == BlockKind::decoder_stage && s.spec.variant == Variant::attention_unet) ++n;
  }
  return n;
}

}  // namespace sfl
