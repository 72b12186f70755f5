#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sfl/module.hpp"
#include "sfl/ops.hpp"

namespace sfl {

enum class PortKind : std::uint8_t { tensor, pool_indices };

// Per-sample extent of a stage port. For pool_indices ports the extent is
// the pre-pooling grid, i.e. the shape the matching unpool restores.
struct PortShape {
  PortKind kind = PortKind::tensor;
  std::int64_t channels = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;

  std::int64_t numel() const { return channels * height * width; }
  bool operator==(const PortShape&) const = default;
};

std::string port_shape_str(const PortShape& s);

// Runtime value flowing along a graph edge.
struct Value {
  PortKind kind = PortKind::tensor;
  Tensor tensor;
  std::shared_ptr<const PoolIndices> indices;

  static Value of(Tensor t) { return {PortKind::tensor, std::move(t), nullptr}; }
  static Value of(std::shared_ptr<const PoolIndices> idx) { return {PortKind::pool_indices, {}, std::move(idx)}; }
};

class Block : public Module {
 public:
  virtual std::vector<Value> forward(std::span<const Value> inputs, NormMode mode) = 0;
};

enum class BlockKind : std::uint8_t {
  double_conv,
  encoder_stage,
  decoder_stage,
  attention_gate,
  cg_block,
  classifier_head,
  cg_stem,
  cg_stage,
};

enum class Variant : std::uint8_t { unet, attention_unet, segnet };

const char* block_kind_name(BlockKind kind);
const char* variant_name(Variant v);

// Immutable description of a stage. Shape inference and MAC counts are
// defined here so analysis never needs instantiated weights.
struct BlockSpec {
  BlockKind kind = BlockKind::double_conv;
  Variant variant = Variant::unet;
  int in_c = 0;
  int out_c = 0;
  int skip_c = 0;   // decoder: skip channels; attention gate: gating channels
  int inter_c = 0;  // attention gate hidden width
  int dilation = 1;
  int reduction = 16;
  int repeats = 1;   // cg_stage: number of CG blocks
  int upsample = 1;  // classifier_head: bilinear output scale
  bool global_context = true;

  std::vector<PortKind> input_kinds() const;
  std::vector<PortKind> output_kinds() const;
  // Throws BuildError when the inputs do not close.
  std::vector<PortShape> infer(std::span<const PortShape> inputs) const;
  std::int64_t macs(std::span<const PortShape> inputs) const;
  std::unique_ptr<Block> instantiate(const std::string& prefix, const InitContext& ctx) const;
  std::string describe() const;
};

BlockSpec double_conv(int in_c, int out_c);
// unet: double_conv then 2x2 max pool, outputs {pooled, pre-pool skip}.
// segnet: pool (switches kept) then double_conv, outputs {features, indices}.
BlockSpec encoder_stage(int in_c, int out_c, Variant variant);
// unet / attention_unet: inputs {x, skip}; transpose-conv x to skip_c
// channels, concat with the (gated) skip, double_conv to out_c.
// segnet: inputs {x, indices}; double_conv to out_c, then max unpool.
BlockSpec decoder_stage(int in_c, int skip_c, int out_c, Variant variant);
BlockSpec attention_gate(int x_c, int g_c, int inter_c);
BlockSpec cg_block(int in_c, int out_c, int dilation, int reduction = 16);
BlockSpec cg_stem(int in_c, int out_c);
BlockSpec cg_stage(int in_c, int out_c, int repeats, int dilation, int reduction = 16);
BlockSpec classifier_head(int in_c, int num_classes, int upsample = 1);

// conv3x3-BN-ReLU twice, padding 1.
class DoubleConv {
 public:
  DoubleConv() = default;
  DoubleConv(Module& owner, const std::string& name, int in_c, int out_c, const InitContext& ctx);
  Tensor operator()(const Tensor& x, NormMode mode);

  Conv2d conv1, conv2;
  BatchNorm2d norm1, norm2;
};

// alpha = sigmoid(psi(relu(Wx x + Wg g))), output alpha * x. Wg is applied
// on the gating grid and bilinearly resampled onto the skip grid.
class AttentionGate {
 public:
  AttentionGate() = default;
  AttentionGate(Module& owner, const std::string& name, int x_c, int g_c, int inter_c, const InitContext& ctx);
  Tensor operator()(const Tensor& x_skip, const Tensor& g) const;
  Tensor coefficients(const Tensor& x_skip, const Tensor& g) const;

  Conv2d wx, wg, psi;
};

// Local 3x3 conv and dilated 3x3 "surrounding" conv, concatenated, BN+PReLU,
// then a global-context channel gate and a residual when shapes allow.
class CgBlock {
 public:
  CgBlock() = default;
  CgBlock(Module& owner, const std::string& name, int in_c, int out_c, int dilation, int reduction,
          bool global_context, const InitContext& ctx);
  Tensor operator()(const Tensor& x, NormMode mode);

  Conv2d local, surround;
  BatchNorm2d norm;
  PRelu act;
  Linear fc1, fc2;
  bool residual = false;
  bool global_context = true;
};

}  // namespace sfl
