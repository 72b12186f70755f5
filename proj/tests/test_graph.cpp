#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <numeric>
#include <random>

#include "sfl/analysis.hpp"
#include "sfl/zoo.hpp"
#include "support/gradcheck.hpp"

using namespace sfl;

namespace {

NetworkConfig small(const std::string& network) {
  NetworkConfig c;
  c.network = network;
  c.base_width = 4;
  c.num_classes = 3;
  c.input_size = 32;
  c.cg_stem_width = 8;
  c.cg_stage1_width = 16;
  c.cg_stage2_width = 32;
  c.cg_stage1_blocks = 1;
  c.cg_stage2_blocks = 1;
  c.cg_reduction = 4;
  return c;
}

}  // namespace

TEST(SplitPlan, UnetDefaultCutsAtOuterBlocks) {
  auto g = build_unet(small("unet"));
  const auto plan = g->default_plan();
  EXPECT_EQ(plan, (SplitPlan{0, g->num_stages() - 2}));
  auto parts = split_model(*g, plan);
  // FE ships the pooled activation up; its skip stays on the client.
  EXPECT_EQ(parts.fe->wire_ports(), (std::vector<Port>{{0, 0}}));
  EXPECT_EQ(parts.be->wire_ports(), (std::vector<Port>{{7, 0}}));
  EXPECT_TRUE(parts.be->client_local({0, 1}));
  EXPECT_EQ(parts.server->cut_inputs(), (std::vector<Port>{{0, 0}}));
  EXPECT_EQ(parts.server->cut_outputs(), (std::vector<Port>{{7, 0}}));
}

TEST(SplitPlan, PartitionsCoverStagesInOrder) {
  for (const auto& name : network_names()) {
    auto g = build_network(small(name));
    for (int fe = 0; fe < g->num_stages(); ++fe) {
      for (int be = fe + 2; be < g->num_stages(); ++be) {
        if (plan_violation(*g, {fe, be})) continue;
        auto parts = split_model(*g, {fe, be});
        std::vector<int> all = parts.fe->stages();
        for (int s : parts.server->stages()) all.push_back(s);
        for (int s : parts.be->stages()) all.push_back(s);
        std::vector<int> expect(static_cast<std::size_t>(g->num_stages()));
        std::iota(expect.begin(), expect.end(), 0);
        EXPECT_EQ(all, expect) << name << " " << fe << "," << be;
      }
    }
  }
}

TEST(SplitPlan, SegnetPoolUnpoolMustStayTogether) {
  auto g = build_segnet(small("segnet"));
  // enc1 on the client, dec1 on the server.
  EXPECT_THROW(validate_plan(*g, {1, g->num_stages() - 2}), InvalidSplit);
  EXPECT_NO_THROW(validate_plan(*g, g->default_plan()));
}

TEST(SplitPlan, RejectsMalformedPlans) {
  auto g = build_unet(small("unet"));
  EXPECT_TRUE(plan_violation(*g, {3, 3}).has_value());
  EXPECT_TRUE(plan_violation(*g, {3, 4}).has_value());  // empty server
  EXPECT_TRUE(plan_violation(*g, {-1, 5}).has_value());
  EXPECT_TRUE(plan_violation(*g, {0, g->num_stages()}).has_value());
  EXPECT_THROW(split_model(*g, {5, 2}), InvalidSplit);
}

TEST(SplitPlan, PartitionOfStage) {
  const SplitPlan plan{1, 7};
  EXPECT_EQ(partition_of(plan, 0), Partition::fe);
  EXPECT_EQ(partition_of(plan, 1), Partition::fe);
  EXPECT_EQ(partition_of(plan, 2), Partition::server);
  EXPECT_EQ(partition_of(plan, 6), Partition::server);
  EXPECT_EQ(partition_of(plan, 7), Partition::be);
}

TEST(SubModel, CompositionEqualsMonolithicForward) {
  std::mt19937_64 rng(2);
  for (const auto& name : network_names()) {
    auto g = build_network(small(name));
    auto parts = split_model(*g, g->default_plan());
    auto x = sfl::testing::random_tensor({2, 3, 32, 32}, rng, 0.0, 1.0, DType::f32);
    auto mono = forward_monolithic(*g, x, NormMode::eval);

    std::vector<Value> in{Value::of(x)};
    auto fe_out = parts.fe->forward(in, NormMode::eval);
    std::map<Port, Value> produced;
    for (std::size_t i = 0; i < fe_out.size(); ++i) produced[parts.fe->cut_outputs()[i]] = fe_out[i];
    std::vector<Value> server_in;
    for (auto p : parts.server->cut_inputs()) server_in.push_back(produced.at(p));
    auto server_out = parts.server->forward(server_in, NormMode::eval);
    for (std::size_t i = 0; i < server_out.size(); ++i) produced[parts.server->cut_outputs()[i]] = server_out[i];
    std::vector<Value> be_in;
    for (auto p : parts.be->cut_inputs()) be_in.push_back(produced.at(p));
    auto logits = parts.be->forward(be_in, NormMode::eval)[0].tensor;
    EXPECT_LT(max_abs_diff(logits, mono), 1e-6) << name;
  }
}

TEST(SubModel, OwnsIndependentState) {
  auto g = build_unet(small("unet"));
  auto parts = split_model(*g, g->default_plan());
  auto p = parts.fe->parameters().front().tensor;
  Tensor(p).data<float>()[0] += 1.0f;
  EXPECT_NE(g->parameters().front().tensor.at(0), p.at(0));
  merge_into(*g, parts);
  EXPECT_EQ(g->parameters().front().tensor.at(0), p.at(0));
}

TEST(SubModel, StateCountsPartitionTheGraph) {
  for (const auto& name : network_names()) {
    auto g = build_network(small(name));
    auto parts = split_model(*g, g->default_plan());
    EXPECT_EQ(count_params(*parts.fe) + count_params(*parts.server) + count_params(*parts.be), count_params(*g));
    EXPECT_EQ(parts.fe->state().size() + parts.server->state().size() + parts.be->state().size(), g->state().size());
  }
}

TEST(ModelGraph, ReplicateCopiesState) {
  auto g = build_unet(small("unet"));
  for (auto& v : Tensor(g->parameters()[3].tensor).data<float>()) v = 0.5f;
  auto r = g->replicate();
  ASSERT_EQ(r->state().size(), g->state().size());
  for (std::size_t i = 0; i < g->state().size(); ++i)
    EXPECT_TRUE(bit_equal(r->state()[i].tensor, g->state()[i].tensor));
  EXPECT_NE(r->parameters()[3].tensor.impl(), g->parameters()[3].tensor.impl());
}

TEST(ModelGraph, LoadStateRejectsShapeMismatch) {
  auto a = build_unet(small("unet"));
  auto c = small("unet");
  c.base_width = 8;
  auto b = build_unet(c);
  EXPECT_THROW(load_state(a->state(), b->state()), ContractError);
}
