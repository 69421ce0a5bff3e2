#include <doctest.h>

#include <cmath>
#include <random>
#include <stdexcept>

#include "rdl/backbone.hpp"

using namespace rdl;

namespace {

BackboneConfig small_config(int c = 8) {
  BackboneConfig cfg;
  cfg.c = c;
  return cfg;
}

const ShapeRow* find_row(const ShapePlan& plan, const std::string& name) {
  for (const auto& r : plan) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

}  // namespace

TEST_CASE("stage widths follow the width unit") {
  const BackboneConfig cfg;
  CHECK(cfg.stage_channels(1) == 288);
  CHECK(cfg.stage_channels(2) == 576);
  CHECK(cfg.stage_channels(3) == 1152);
}

TEST_CASE("config validation") {
  BackboneConfig cfg = small_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.c = 12;  // 4c = 48 splits into 4 x 2 groups of 6, but c itself is not a multiple of 8
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.c = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.c = 8;
  cfg.groups = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("shape plan for the 224 classification layout") {
  for (int c : {8, 72}) {
    const ShapePlan plan = shape_plan(small_config(c), 224);
    const ShapeRow* s0 = find_row(plan, "stage0.pool");
    REQUIRE(s0);
    CHECK(s0->size == 56);
    CHECK(s0->channels == 32);
    CHECK(find_row(plan, "stage1.blocks")->size == 28);
    CHECK(find_row(plan, "stage1.blocks")->channels == 4 * c);
    CHECK(find_row(plan, "stage2.blocks")->size == 14);
    CHECK(find_row(plan, "stage2.blocks")->channels == 8 * c);
    CHECK(find_row(plan, "stage3.blocks")->size == 7);
    CHECK(find_row(plan, "stage3.blocks")->channels == 16 * c);
    CHECK(find_row(plan, "stage4.pool")->size == 1);
    CHECK(find_row(plan, "stage4.fc")->channels == 1000);
  }
}

TEST_CASE("shape plan at 320") {
  const ShapePlan plan = shape_plan(small_config(72), 320);
  CHECK(*find_row(plan, "stage1.blocks") == ShapeRow{"stage1.blocks", 40, 288});
  CHECK(*find_row(plan, "stage2.blocks") == ShapeRow{"stage2.blocks", 20, 576});
  CHECK(*find_row(plan, "stage3.blocks") == ShapeRow{"stage3.blocks", 10, 1152});
  const ShapePlan twice = shape_plan(small_config(72), 640);
  REQUIRE(twice.size() == plan.size());
  for (size_t i = 0; i < plan.size(); ++i) {
    if (plan[i].size > 1) CHECK(twice[i].size == 2 * plan[i].size);
  }
  CHECK_THROWS_AS(shape_plan(small_config(), 330), std::invalid_argument);
  CHECK_THROWS_AS(shape_plan(small_config(), 32), std::invalid_argument);
}

TEST_CASE("shape plan matches measured forward shapes") {
  for (int c : {8, 72}) {
    for (int size : {224, 320}) {
      Rng rng(1);
      Res2NetLite net = build_backbone(small_config(c), rng);
      const BackboneFeatures f = net.forward(Tensor(1, 3, size, size, 0.5f), Mode::kEval);
      const ShapePlan plan = shape_plan(small_config(c), size);
      const Tensor* measured[] = {&f.stage0, &f.stage1, &f.stage2, &f.stage3};
      const char* rows[] = {"stage0.pool", "stage1.blocks", "stage2.blocks", "stage3.blocks"};
      for (int s = 0; s < 4; ++s) {
        const ShapeRow* r = find_row(plan, rows[s]);
        CHECK(measured[s]->h() == r->size);
        CHECK(measured[s]->w() == r->size);
        CHECK(measured[s]->c() == r->channels);
      }
      if (c == 8) {
        const Tensor logits = net.classify(Tensor(1, 3, size, size, 0.5f));
        CHECK(logits.c() == find_row(plan, "stage4.fc")->channels);
        CHECK(logits.h() == 1);
      }
    }
  }
}

TEST_CASE("every Res2Block keeps its width and no conv is depthwise") {
  Rng rng(2);
  Res2NetLite net = build_backbone(small_config(72), rng);
  for (int s = 0; s < 3; ++s) {
    CHECK(static_cast<int>(net.stages[s].blocks.size()) == net.config().blocks_per_stage[s]);
    for (const Res2Block& b : net.stages[s].blocks) {
      CHECK(b.width() == net.config().stage_channels(s + 1));
      CHECK(b.reduce.conv.shape().in == b.width());
      CHECK(b.expand.conv.shape().out == b.width());
    }
  }
  int convs = 0;
  net.for_each_conv(
      [&](const Conv2d& c) {
        ++convs;
        CHECK(c.shape().groups >= 1);
        CHECK(c.shape().groups <= 2);
        CHECK(c.shape().in / c.shape().groups > 1);
      },
      true);
  CHECK(convs > 50);
  CHECK(net.stem_conv.conv.shape().groups == 1);
  CHECK(net.stem_conv.conv.shape().kernel == 3);
  CHECK(net.stem_conv.conv.shape().stride == 2);
  CHECK(net.stem_conv.conv.shape().out == 32);
}

TEST_CASE("res2block: zero transform is the identity on non-negative input") {
  Rng rng(3);
  Res2Block block(32, 4, 2, rng);
  block.expand.conv.zero_weights();
  Tensor x(2, 32, 6, 6);
  std::uniform_real_distribution<float> u(0.0f, 2.0f);
  for (float& v : x.values()) v = u(rng);
  const Tensor y = block.forward(x, Mode::kEval);
  REQUIRE(y.same_shape(x));
  for (size_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));
  CHECK_THROWS_AS(block.forward(Tensor(1, 16, 6, 6), Mode::kEval), std::invalid_argument);
  CHECK_THROWS_AS(Res2Block(30, 4, 2, rng), std::invalid_argument);
}

TEST_CASE("res2block: last split sees a stack of 3x3 convolutions") {
  Rng rng(3);
  Res2Block block(32, 4, 2, rng);
  CHECK(block.branch_depth(0) == 0);
  CHECK(block.branch_depth(3) >= 2);
  CHECK(block.branches.size() == 3u);
  // Receptive field measured on the real module: a single impulse reaches
  // 2 * depth + 1 pixels through the hierarchical path.
  for (auto& br : block.branches) {
    for (float& w : br.conv.weight.value.values()) w = std::abs(w) + 0.01f;
  }
  for (float& w : block.reduce.conv.weight.value.values()) w = std::abs(w) + 0.01f;
  for (float& w : block.expand.conv.weight.value.values()) w = std::abs(w) + 0.01f;
  block.expand.bn.gamma.value.fill(1.0f);
  Tensor x(1, 32, 15, 15);
  for (int c = 0; c < 32; ++c) x.at(0, c, 7, 7) = 1.0f;
  Tensor zero_out = block.forward(Tensor(1, 32, 15, 15), Mode::kEval);
  Tensor y = block.forward(x, Mode::kEval);
  int reach = 0;
  for (int col = 0; col < 15; ++col) {
    bool changed = false;
    for (int c = 0; c < 32; ++c) changed |= std::abs(y.at(0, c, 7, col) - zero_out.at(0, c, 7, col)) > 1e-6f;
    if (changed) ++reach;
  }
  CHECK(reach == 2 * 3 + 1);
  CHECK(reach > 3);
}

TEST_CASE("res2block starts as the identity on nonnegative input") {
  Rng rng(8);
  Res2Block block(32, 4, 2, rng);
  Tensor x(2, 32, 9, 9);
  std::uniform_real_distribution<float> ud(0.0f, 2.0f);
  for (float& v : x.values()) v = ud(rng);
  for (Mode mode : {Mode::kEval, Mode::kTrain}) {
    const Tensor y = block.forward(x, mode);
    for (size_t i = 0; i < x.values().size(); ++i) REQUIRE(y.values()[i] == x.values()[i]);
  }
}

TEST_CASE("bottleneck halves space and is cheaper than a plain 3x3 conv") {
  Rng rng(4);
  Bottleneck b(288, 576, 2, rng);
  const Tensor y = b.forward(Tensor(1, 288, 40, 40, 0.1f), Mode::kEval);
  CHECK(y.c() == 576);
  CHECK(y.h() == 20);
  const Tensor odd = Bottleneck(16, 32, 2, rng).forward(Tensor(1, 16, 5, 5, 0.1f), Mode::kEval);
  CHECK(odd.h() == 3);
  CHECK(b.param_count() < int64_t(288) * 576 * 9);
  CHECK_THROWS_AS(b.forward(Tensor(1, 100, 8, 8), Mode::kEval), std::invalid_argument);
}

TEST_CASE("cost counter") {
  Rng rng(5);
  Res2NetLite net = build_backbone(small_config(8), rng);
  const ModelCost a = count_params_flops(net, 160);
  const ModelCost b = count_params_flops(net, 320);
  CHECK(a.params == b.params);
  CHECK(b.macs == 4 * a.macs);
  // With the classifier the parameter count grows by exactly the 1x1 fc layer.
  const ModelCost full = count_params_flops(net, 320, true);
  CHECK(full.params == b.params + 16 * 8 * 1000 + 1000);
}

TEST_CASE("Res2NetLite72 cost snapshot") {
  Rng rng(6);
  Res2NetLite net = build_backbone(BackboneConfig{}, rng);
  const ModelCost cost = count_params_flops(net, 320);
  CHECK(cost.params == 15164278);
  CHECK(cost.macs == 3971635200LL);
}

TEST_CASE("gradients reach every backbone parameter") {
  Rng rng(7);
  Res2NetLite net = build_backbone(small_config(8), rng);
  ParamCollector init;
  net.visit(init, "backbone", false);
  for (size_t i = 0; i < init.params.size(); ++i) {
    if (init.names[i].ends_with("expand.bn.gamma")) init.params[i]->value.fill(0.5f);
  }
  Tensor x(2, 3, 64, 64);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  for (float& v : x.values()) v = nd(rng);
  const BackboneFeatures f = net.forward(x, Mode::kTrain);
  BackboneFeatures g;
  g.stage3 = Tensor(f.stage3.n(), f.stage3.c(), f.stage3.h(), f.stage3.w());
  for (float& v : g.stage3.values()) v = nd(rng);
  net.backward(g);
  ParamCollector pc;
  net.visit(pc, "backbone", false);
  REQUIRE(!pc.params.empty());
  for (size_t i = 0; i < pc.params.size(); ++i) {
    bool finite = true, nonzero = false;
    for (float v : pc.params[i]->grad.values()) {
      finite &= std::isfinite(v);
      nonzero |= v != 0.0f;
    }
    INFO(pc.names[i]);
    CHECK(finite);
    CHECK(nonzero);
  }
}
