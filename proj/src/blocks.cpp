#include "sfl/blocks.hpp"

#include <sstream>

namespace sfl {

std::string port_shape_str(const PortShape& s) {
  std::ostringstream os;
  os << (s.kind == PortKind::tensor ? "tensor" : "indices") << '(' << s.channels << ',' << s.height << ','
     << s.width << ')';
  return os.str();
}

const char* block_kind_name(BlockKind kind) {
  switch (kind) {
    case BlockKind::double_conv: return "double_conv";
    case BlockKind::encoder_stage: return "encoder_stage";
    case BlockKind::decoder_stage: return "decoder_stage";
    case BlockKind::attention_gate: return "attention_gate";
    case BlockKind::cg_block: return "cg_block";
    case BlockKind::classifier_head: return "classifier_head";
    case BlockKind::cg_stem: return "cg_stem";
    case BlockKind::cg_stage: return "cg_stage";
  }
  return "?";
}

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::unet: return "unet";
    case Variant::attention_unet: return "attention_unet";
    case Variant::segnet: return "segnet";
  }
  return "?";
}

// --- composite layers -------------------------------------------------------

DoubleConv::DoubleConv(Module& owner, const std::string& name, int in_c, int out_c, const InitContext& ctx)
    : conv1(owner, name + ".conv1", in_c, out_c, 3, {1, 1, 1}, ctx, false),
      conv2(owner, name + ".conv2", out_c, out_c, 3, {1, 1, 1}, ctx, false),
      norm1(owner, name + ".norm1", out_c, ctx),
      norm2(owner, name + ".norm2", out_c, ctx) {}

Tensor DoubleConv::operator()(const Tensor& x, NormMode mode) {
  Tensor h = relu(norm1(conv1(x), mode));
  return relu(norm2(conv2(h), mode));
}

AttentionGate::AttentionGate(Module& owner, const std::string& name, int x_c, int g_c, int inter_c,
                             const InitContext& ctx)
    : wx(owner, name + ".wx", x_c, inter_c, 1, {}, ctx),
      wg(owner, name + ".wg", g_c, inter_c, 1, {}, ctx),
      psi(owner, name + ".psi", inter_c, 1, 1, {}, ctx) {}

Tensor AttentionGate::coefficients(const Tensor& x_skip, const Tensor& g) const {
  Tensor a = wx(x_skip);
  Tensor b = wg(g);
  if (b.size(2) != a.size(2) || b.size(3) != a.size(3)) {
    const auto scale = a.size(2) / b.size(2);
    if (scale < 1 || a.size(2) != scale * b.size(2) || a.size(3) != scale * b.size(3))
      throw ContractError("attention_gate: gating grid " + shape_str(g.shape()) + " does not divide skip grid " +
                          shape_str(x_skip.shape()));
    b = upsample_bilinear(b, static_cast<int>(scale));
  }
  return sigmoid(psi(relu(add(a, b))));
}

Tensor AttentionGate::operator()(const Tensor& x_skip, const Tensor& g) const {
  return gate_spatial(x_skip, coefficients(x_skip, g));
}

CgBlock::CgBlock(Module& owner, const std::string& name, int in_c, int out_c, int dilation, int reduction,
                 bool gc, const InitContext& ctx)
    : local(owner, name + ".local", in_c, out_c / 2, 3, {1, 1, 1}, ctx, false),
      surround(owner, name + ".surround", in_c, out_c / 2, 3, {1, dilation, dilation}, ctx, false),
      norm(owner, name + ".norm", out_c, ctx),
      act(owner, name + ".act", out_c, ctx),
      residual(in_c == out_c),
      global_context(gc) {
  if (gc) {
    const int hidden = std::max(1, out_c / reduction);
    fc1 = Linear(owner, name + ".fc1", out_c, hidden, ctx);
    fc2 = Linear(owner, name + ".fc2", hidden, out_c, ctx);
  }
}

Tensor CgBlock::operator()(const Tensor& x, NormMode mode) {
  std::vector<Tensor> branches{local(x), surround(x)};
  Tensor joint = act(norm(concat_channels(branches), mode));
  if (global_context) {
    Tensor scale = sigmoid(fc2(relu(fc1(mean_spatial(joint)))));
    joint = scale_channels(joint, scale);
  }
  return residual ? add(joint, x) : joint;
}

// --- stage blocks -----------------------------------------------------------

namespace {

const Tensor& tensor_in(std::span<const Value> in, std::size_t i) { return in[i].tensor; }

class DoubleConvStage final : public Block {
 public:
  DoubleConvStage(const BlockSpec& s, const std::string& p, const InitContext& ctx)
      : dc_(*this, p + ".dc", s.in_c, s.out_c, ctx) {}
  std::vector<Value> forward(std::span<const Value> in, NormMode mode) override {
    return {Value::of(dc_(tensor_in(in, 0), mode))};
  }

 private:
  DoubleConv dc_;
};

class UnetEncoder final : public Block {
 public:
  UnetEncoder(const BlockSpec& s, const std::string& p, const InitContext& ctx)
      : dc_(*this, p + ".dc", s.in_c, s.out_c, ctx) {}
  std::vector<Value> forward(std::span<const Value> in, NormMode mode) override {
    Tensor f = dc_(tensor_in(in, 0), mode);
    return {Value::of(maxpool2d(f, 2, 2).values), Value::of(f)};
  }

 private:
  DoubleConv dc_;
};

class SegnetEncoder final : public Block {
 public:
  SegnetEncoder(const BlockSpec& s, const std::string& p, const InitContext& ctx)
      : dc_(*this, p + ".dc", s.in_c, s.out_c, ctx) {}
  std::vector<Value> forward(std::span<const Value> in, NormMode mode) override {
    auto pooled = maxpool2d(tensor_in(in, 0), 2, 2);
    return {Value::of(dc_(pooled.values, mode)), Value::of(pooled.indices)};
  }

 private:
  DoubleConv dc_;
};

class UnetDecoder final : public Block {
 public:
  UnetDecoder(const BlockSpec& s, const std::string& p, const InitContext& ctx)
      : up_(*this, p + ".up", s.in_c, s.skip_c, 2, 2, ctx), dc_(*this, p + ".dc", 2 * s.skip_c, s.out_c, ctx) {
    if (s.variant == Variant::attention_unet) {
      gate_ = std::make_unique<AttentionGate>(*this, p + ".gate", s.skip_c, s.in_c, s.inter_c, ctx);
    }
  }
  std::vector<Value> forward(std::span<const Value> in, NormMode mode) override {
    const Tensor& x = tensor_in(in, 0);
    Tensor skip = tensor_in(in, 1);
    if (gate_) skip = (*gate_)(skip, x);
    std::vector<Tensor> parts{skip, up_(x)};
    return {Value::of(dc_(concat_channels(parts), mode))};
  }

 private:
  ConvTranspose2d up_;
  DoubleConv dc_;
  std::unique_ptr<AttentionGate> gate_;
};

class SegnetDecoder final : public Block {
 public:
  SegnetDecoder(const BlockSpec& s, const std::string& p, const InitContext& ctx)
      : dc_(*this, p + ".dc", s.in_c, s.out_c, ctx) {}
  std::vector<Value> forward(std::span<const Value> in, NormMode mode) override {
    Tensor h = dc_(tensor_in(in, 0), mode);
    const auto& idx = *in[1].indices;
    return {Value::of(max_unpool2d(h, idx, idx.input_shape))};
  }

 private:
  DoubleConv dc_;
};

class AttentionGateStage final : public Block {
 public:
  AttentionGateStage(const BlockSpec& s, const std::string& p, const InitContext& ctx)
      : gate_(*this, p + ".gate", s.in_c, s.skip_c, s.inter_c, ctx) {}
  std::vector<Value> forward(std::span<const Value> in, NormMode) override {
    return {Value::of(gate_(tensor_in(in, 0), tensor_in(in, 1)))};
  }

 private:
  AttentionGate gate_;
};

class CgBlockStage final : public Block {
 public:
  CgBlockStage(const BlockSpec& s, const std::string& p, const InitContext& ctx)
      : block_(*this, p + ".cg", s.in_c, s.out_c, s.dilation, s.reduction, s.global_context, ctx) {}
  std::vector<Value> forward(std::span<const Value> in, NormMode mode) override {
    return {Value::of(block_(tensor_in(in, 0), mode))};
  }

 private:
  CgBlock block_;
};

class CgStem final : public Block {
 public:
  CgStem(const BlockSpec& s, const std::string& p, const InitContext& ctx)
      : c1_(*this, p + ".conv1", s.in_c, s.out_c, 3, {2, 1, 1}, ctx, false),
        c2_(*this, p + ".conv2", s.out_c, s.out_c, 3, {1, 1, 1}, ctx, false),
        c3_(*this, p + ".conv3", s.out_c, s.out_c, 3, {1, 1, 1}, ctx, false),
        n1_(*this, p + ".norm1", s.out_c, ctx),
        n2_(*this, p + ".norm2", s.out_c, ctx),
        n3_(*this, p + ".norm3", s.out_c, ctx),
        a1_(*this, p + ".act1", s.out_c, ctx),
        a2_(*this, p + ".act2", s.out_c, ctx),
        a3_(*this, p + ".act3", s.out_c, ctx) {}
  std::vector<Value> forward(std::span<const Value> in, NormMode mode) override {
    Tensor h = a1_(n1_(c1_(tensor_in(in, 0)), mode));
    h = a2_(n2_(c2_(h), mode));
    return {Value::of(a3_(n3_(c3_(h), mode)))};
  }

 private:
  Conv2d c1_, c2_, c3_;
  BatchNorm2d n1_, n2_, n3_;
  PRelu a1_, a2_, a3_;
};

class CgStage final : public Block {
 public:
  CgStage(const BlockSpec& s, const std::string& p, const InitContext& ctx)
      : down_(*this, p + ".down", s.in_c, s.out_c, 3, {2, 1, 1}, ctx, false),
        norm_(*this, p + ".norm", s.out_c, ctx),
        act_(*this, p + ".act", s.out_c, ctx) {
    for (int r = 0; r < s.repeats; ++r)
      blocks_.push_back(std::make_unique<CgBlock>(*this, p + ".cg" + std::to_string(r), s.out_c, s.out_c,
                                                  s.dilation, s.reduction, s.global_context, ctx));
  }
  std::vector<Value> forward(std::span<const Value> in, NormMode mode) override {
    Tensor h = act_(norm_(down_(tensor_in(in, 0)), mode));
    for (auto& b : blocks_) h = (*b)(h, mode);
    return {Value::of(h)};
  }

 private:
  Conv2d down_;
  BatchNorm2d norm_;
  PRelu act_;
  std::vector<std::unique_ptr<CgBlock>> blocks_;
};

class ClassifierHead final : public Block {
 public:
  ClassifierHead(const BlockSpec& s, const std::string& p, const InitContext& ctx)
      : conv_(*this, p + ".conv", s.in_c, s.out_c, 1, {}, ctx), upsample_(s.upsample) {}
  std::vector<Value> forward(std::span<const Value> in, NormMode) override {
    Tensor logits = conv_(tensor_in(in, 0));
    if (upsample_ > 1) logits = upsample_bilinear(logits, upsample_);
    return {Value::of(logits)};
  }

 private:
  Conv2d conv_;
  int upsample_;
};

[[noreturn]] void shape_fail(const BlockSpec& s, const std::string& what) {
  throw BuildError(std::string(block_kind_name(s.kind)) + " (" + s.describe() + "): " + what);
}

void expect_tensor(const BlockSpec& s, const PortShape& p, std::int64_t channels, const char* role) {
  if (p.kind != PortKind::tensor) shape_fail(s, std::string(role) + " must be a tensor");
  if (p.channels != channels)
    shape_fail(s, std::string(role) + " has " + std::to_string(p.channels) + " channels, expected " +
                      std::to_string(channels));
}

void expect_even(const BlockSpec& s, const PortShape& p) {
  if (p.height % 2 != 0 || p.width % 2 != 0 || p.height < 2 || p.width < 2)
    shape_fail(s, "spatial extent " + port_shape_str(p) + " not divisible by the pooling stride 2");
}

std::int64_t conv_macs(std::int64_t out_c, std::int64_t in_c, std::int64_t k, std::int64_t h, std::int64_t w) {
  return out_c * in_c * k * k * h * w;
}

std::int64_t cg_block_macs(const BlockSpec& s, int in_c, int out_c, std::int64_t h, std::int64_t w) {
  std::int64_t m = 2 * conv_macs(out_c / 2, in_c, 3, h, w);
  if (s.global_context) {
    const std::int64_t hidden = std::max(1, out_c / s.reduction);
    m += out_c * hidden + hidden * out_c;
  }
  return m;
}

}  // namespace

std::vector<PortKind> BlockSpec::input_kinds() const {
  switch (kind) {
    case BlockKind::decoder_stage:
      return {PortKind::tensor, variant == Variant::segnet ? PortKind::pool_indices : PortKind::tensor};
    case BlockKind::attention_gate:
      return {PortKind::tensor, PortKind::tensor};
    default:
      return {PortKind::tensor};
  }
}

std::vector<PortKind> BlockSpec::output_kinds() const {
  if (kind == BlockKind::encoder_stage)
    return {PortKind::tensor, variant == Variant::segnet ? PortKind::pool_indices : PortKind::tensor};
  return {PortKind::tensor};
}

std::vector<PortShape> BlockSpec::infer(std::span<const PortShape> in) const {
  const auto kinds = input_kinds();
  if (in.size() != kinds.size())
    shape_fail(*this, "expects " + std::to_string(kinds.size()) + " inputs, got " + std::to_string(in.size()));
  const PortShape& x = in[0];
  switch (kind) {
    case BlockKind::double_conv:
      expect_tensor(*this, x, in_c, "input");
      return {{PortKind::tensor, out_c, x.height, x.width}};
    case BlockKind::encoder_stage:
      expect_tensor(*this, x, in_c, "input");
      expect_even(*this, x);
      if (variant == Variant::segnet)
        return {{PortKind::tensor, out_c, x.height / 2, x.width / 2},
                {PortKind::pool_indices, in_c, x.height, x.width}};
      return {{PortKind::tensor, out_c, x.height / 2, x.width / 2}, {PortKind::tensor, out_c, x.height, x.width}};
    case BlockKind::decoder_stage: {
      expect_tensor(*this, x, in_c, "input");
      const PortShape& side = in[1];
      if (variant == Variant::segnet) {
        if (side.kind != PortKind::pool_indices) shape_fail(*this, "second input must carry pool indices");
        if (side.channels != out_c || side.height != 2 * x.height || side.width != 2 * x.width)
          shape_fail(*this, "pool indices " + port_shape_str(side) + " incompatible with unpooling " +
                                std::to_string(out_c) + " channels from " + port_shape_str(x));
        return {{PortKind::tensor, out_c, side.height, side.width}};
      }
      expect_tensor(*this, side, skip_c, "skip");
      if (side.height != 2 * x.height || side.width != 2 * x.width)
        shape_fail(*this, "skip " + port_shape_str(side) + " does not match upsampled " + port_shape_str(x));
      return {{PortKind::tensor, out_c, side.height, side.width}};
    }
    case BlockKind::attention_gate: {
      expect_tensor(*this, x, in_c, "skip");
      expect_tensor(*this, in[1], skip_c, "gating signal");
      const auto& g = in[1];
      if (g.height < 1 || x.height % g.height != 0 || x.width % g.width != 0 ||
          x.height / g.height != x.width / g.width)
        shape_fail(*this, "gating grid " + port_shape_str(g) + " does not divide " + port_shape_str(x));
      return {x};
    }
    case BlockKind::cg_block:
      expect_tensor(*this, x, in_c, "input");
      return {{PortKind::tensor, out_c, x.height, x.width}};
    case BlockKind::cg_stem:
    case BlockKind::cg_stage:
      expect_tensor(*this, x, in_c, "input");
      expect_even(*this, x);
      return {{PortKind::tensor, out_c, x.height / 2, x.width / 2}};
    case BlockKind::classifier_head:
      expect_tensor(*this, x, in_c, "input");
      return {{PortKind::tensor, out_c, x.height * upsample, x.width * upsample}};
  }
  shape_fail(*this, "unknown block kind");
}

std::int64_t BlockSpec::macs(std::span<const PortShape> in) const {
  const auto out = infer(in);
  const PortShape& x = in[0];
  switch (kind) {
    case BlockKind::double_conv:
      return conv_macs(out_c, in_c, 3, x.height, x.width) + conv_macs(out_c, out_c, 3, x.height, x.width);
    case BlockKind::encoder_stage: {
      const auto h = variant == Variant::segnet ? x.height / 2 : x.height;
      const auto w = variant == Variant::segnet ? x.width / 2 : x.width;
      return conv_macs(out_c, in_c, 3, h, w) + conv_macs(out_c, out_c, 3, h, w);
    }
    case BlockKind::decoder_stage: {
      if (variant == Variant::segnet)
        return conv_macs(out_c, in_c, 3, x.height, x.width) + conv_macs(out_c, out_c, 3, x.height, x.width);
      const auto H = out[0].height, W = out[0].width;
      std::int64_t m = static_cast<std::int64_t>(in_c) * skip_c * 4 * x.height * x.width;
      m += conv_macs(out_c, 2 * skip_c, 3, H, W) + conv_macs(out_c, out_c, 3, H, W);
      if (variant == Variant::attention_unet)
        m += conv_macs(inter_c, skip_c, 1, H, W) + conv_macs(inter_c, in_c, 1, x.height, x.width) +
             conv_macs(1, inter_c, 1, H, W);
      return m;
    }
    case BlockKind::attention_gate:
      return conv_macs(inter_c, in_c, 1, x.height, x.width) + conv_macs(inter_c, skip_c, 1, in[1].height, in[1].width) +
             conv_macs(1, inter_c, 1, x.height, x.width);
    case BlockKind::cg_block:
      return cg_block_macs(*this, in_c, out_c, x.height, x.width);
    case BlockKind::cg_stem: {
      const auto h = out[0].height, w = out[0].width;
      return conv_macs(out_c, in_c, 3, h, w) + 2 * conv_macs(out_c, out_c, 3, h, w);
    }
    case BlockKind::cg_stage: {
      const auto h = out[0].height, w = out[0].width;
      return conv_macs(out_c, in_c, 3, h, w) + repeats * cg_block_macs(*this, out_c, out_c, h, w);
    }
    case BlockKind::classifier_head:
      return conv_macs(out_c, in_c, 1, x.height, x.width);
  }
  return 0;
}

std::unique_ptr<Block> BlockSpec::instantiate(const std::string& prefix, const InitContext& ctx) const {
  switch (kind) {
    case BlockKind::double_conv:
      return std::make_unique<DoubleConvStage>(*this, prefix, ctx);
    case BlockKind::encoder_stage:
      if (variant == Variant::segnet) return std::make_unique<SegnetEncoder>(*this, prefix, ctx);
      return std::make_unique<UnetEncoder>(*this, prefix, ctx);
    case BlockKind::decoder_stage:
      if (variant == Variant::segnet) return std::make_unique<SegnetDecoder>(*this, prefix, ctx);
      return std::make_unique<UnetDecoder>(*this, prefix, ctx);
    case BlockKind::attention_gate:
      return std::make_unique<AttentionGateStage>(*this, prefix, ctx);
    case BlockKind::cg_block:
      return std::make_unique<CgBlockStage>(*this, prefix, ctx);
    case BlockKind::cg_stem:
      return std::make_unique<CgStem>(*this, prefix, ctx);
    case BlockKind::cg_stage:
      return std::make_unique<CgStage>(*this, prefix, ctx);
    case BlockKind::classifier_head:
      return std::make_unique<ClassifierHead>(*this, prefix, ctx);
  }
  throw BuildError("instantiate: unknown block kind");
}

std::string BlockSpec::describe() const {
  std::ostringstream os;
  os << block_kind_name(kind);
  if (kind == BlockKind::encoder_stage || kind == BlockKind::decoder_stage) os << '[' << variant_name(variant) << ']';
  os << " in=" << in_c << " out=" << out_c;
  if (skip_c) os << " side=" << skip_c;
  if (inter_c) os << " inter=" << inter_c;
  if (kind == BlockKind::cg_block || kind == BlockKind::cg_stage) os << " dilation=" << dilation;
  if (kind == BlockKind::cg_stage) os << " repeats=" << repeats;
  if (upsample > 1) os << " upsample=" << upsample;
  return os.str();
}

namespace {

void require_positive(const char* what, std::initializer_list<int> values) {
  for (int v : values)
    if (v < 1) throw BuildError(std::string(what) + ": channel counts must be >= 1");
}

}  // namespace

BlockSpec double_conv(int in_c, int out_c) {
  require_positive("double_conv", {in_c, out_c});
  BlockSpec s;
  s.kind = BlockKind::double_conv;
  s.in_c = in_c;
  s.out_c = out_c;
  return s;
}

BlockSpec encoder_stage(int in_c, int out_c, Variant variant) {
  require_positive("encoder_stage", {in_c, out_c});
  BlockSpec s;
  s.kind = BlockKind::encoder_stage;
  s.variant = variant == Variant::segnet ? Variant::segnet : Variant::unet;
  s.in_c = in_c;
  s.out_c = out_c;
  return s;
}

BlockSpec decoder_stage(int in_c, int skip_c, int out_c, Variant variant) {
  require_positive("decoder_stage", {in_c, out_c});
  BlockSpec s;
  s.kind = BlockKind::decoder_stage;
  s.variant = variant;
  s.in_c = in_c;
  s.out_c = out_c;
  if (variant != Variant::segnet) {
    require_positive("decoder_stage skip", {skip_c});
    s.skip_c = skip_c;
    if (variant == Variant::attention_unet) s.inter_c = std::max(1, skip_c / 2);
  }
  return s;
}

BlockSpec attention_gate(int x_c, int g_c, int inter_c) {
  require_positive("attention_gate", {x_c, g_c, inter_c});
  BlockSpec s;
  s.kind = BlockKind::attention_gate;
  s.in_c = x_c;
  s.out_c = x_c;
  s.skip_c = g_c;
  s.inter_c = inter_c;
  return s;
}

BlockSpec cg_block(int in_c, int out_c, int dilation, int reduction) {
  require_positive("cg_block", {in_c, out_c, dilation, reduction});
  if (out_c % 2 != 0) throw BuildError("cg_block: out_c must be even, got " + std::to_string(out_c));
  BlockSpec s;
  s.kind = BlockKind::cg_block;
  s.in_c = in_c;
  s.out_c = out_c;
  s.dilation = dilation;
  s.reduction = reduction;
  return s;
}

BlockSpec cg_stem(int in_c, int out_c) {
  require_positive("cg_stem", {in_c, out_c});
  BlockSpec s;
  s.kind = BlockKind::cg_stem;
  s.in_c = in_c;
  s.out_c = out_c;
  return s;
}

BlockSpec cg_stage(int in_c, int out_c, int repeats, int dilation, int reduction) {
  require_positive("cg_stage", {in_c, out_c, repeats, dilation, reduction});
  if (out_c % 2 != 0) throw BuildError("cg_stage: out_c must be even, got " + std::to_string(out_c));
  BlockSpec s;
  s.kind = BlockKind::cg_stage;
  s.in_c = in_c;
  s.out_c = out_c;
  s.repeats = repeats;
  s.dilation = dilation;
  s.reduction = reduction;
  return s;
}

BlockSpec classifier_head(int in_c, int num_classes, int upsample) {
  require_positive("classifier_head", {in_c, num_classes, upsample});
  BlockSpec s;
  s.kind = BlockKind::classifier_head;
  s.in_c = in_c;
  s.out_c = num_classes;
  s.upsample = upsample;
  return s;
}

}  // namespace sfl
