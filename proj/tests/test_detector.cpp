#include <doctest.h>

#include <cmath>
#include <random>
#include <stdexcept>

#include "rdl/detector.hpp"
#include "rdl/losses.hpp"

using namespace rdl;

namespace {

Tensor random_images(int n, int size, uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  Tensor t(n, 3, size, size);
  for (float& v : t.values()) v = nd(rng);
  return t;
}

bool all_finite(const std::vector<float>& v) {
  for (float x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("pyramid shapes and channels") {
  RefineDetLite net(make_detector_config(8, 5), 1);
  CHECK(net.pyramid_channels() == std::array<int, 4>{64, 128, 512, 512});
  const Pyramid p = net.build_pyramid(random_images(1, 320, 2), Mode::kEval);
  const int sizes[4] = {20, 10, 5, 3};
  const int channels[4] = {64, 128, 512, 512};
  for (int k = 0; k < 4; ++k) {
    CHECK(p.levels[k].h() == sizes[k]);
    CHECK(p.levels[k].w() == sizes[k]);
    CHECK(p.levels[k].c() == channels[k]);
  }
  const Pyramid f = net.fuse_features(p, Mode::kEval);
  for (int k = 0; k < 4; ++k) {
    CHECK(f.levels[k].h() == sizes[k]);
    CHECK(f.levels[k].c() == 256);
  }
}

TEST_CASE("pyramid channels for the width-72 model") {
  DetectorConfig cfg = make_detector_config(72, 81);
  CHECK_NOTHROW(cfg.validate());
  // Channel arithmetic only; building the full model here would be slow.
  CHECK(cfg.backbone.stage_channels(2) == 576);
  CHECK(cfg.backbone.stage_channels(3) == 1152);
  CHECK(cfg.extra_channels == 512);
}

TEST_CASE("light head: shape, path ablation, parameter budget") {
  Rng rng(3);
  LightHead head(64, 32, rng);
  Tensor x = random_images(2, 8, 4);
  Tensor x64(2, 64, 6, 6);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  for (float& v : x64.values()) v = nd(rng);
  const Tensor y = head.forward(x64, Mode::kEval);
  CHECK(y.h() == 6);
  CHECK(y.w() == 6);
  CHECK(y.c() == 32);

  head.expand.conv.zero_weights();
  const Tensor ablated = head.forward(x64, Mode::kEval);
  Tensor only_pointwise = head.pointwise.forward(x64, Mode::kEval);
  relu_inplace(only_pointwise);
  for (size_t i = 0; i < ablated.size(); ++i) {
    CHECK(ablated.data()[i] == doctest::Approx(only_pointwise.data()[i]).epsilon(1e-6));
  }

  for (int in : {576, 1152, 512, 512}) {
    Rng r(0);
    LightHead h(in, 256, r);
    CHECK(h.param_count() < int64_t(in) * 256 * 9);
  }
}

TEST_CASE("fusion dataflow is top-down") {
  RefineDetLite net(make_detector_config(8, 5), 5);
  Pyramid p = net.build_pyramid(random_images(1, 320, 6), Mode::kEval);
  const Pyramid base = net.fuse_features(p, Mode::kEval);

  Pyramid lower_changed = p;
  for (int k = 0; k < 3; ++k) {
    for (float& v : lower_changed.levels[k].values()) v += 1.0f;
  }
  const Pyramid f1 = net.fuse_features(lower_changed, Mode::kEval);
  for (size_t i = 0; i < base.levels[3].size(); ++i) {
    CHECK(f1.levels[3].data()[i] == base.levels[3].data()[i]);
  }

  Pyramid top_changed = p;
  for (float& v : top_changed.levels[3].values()) v += 0.5f;
  const Pyramid f2 = net.fuse_features(top_changed, Mode::kEval);
  for (int k = 0; k < 4; ++k) {
    double diff = 0.0;
    for (size_t i = 0; i < base.levels[k].size(); ++i) {
      diff += std::abs(f2.levels[k].data()[i] - base.levels[k].data()[i]);
    }
    CHECK(diff > 0.0);
  }
}

TEST_CASE("head outputs: dimensions, finiteness, determinism") {
  RefineDetLite net(make_detector_config(8, 7), 7);
  CHECK(net.num_anchors() == 1602);
  for (int batch : {1, 4}) {
    const Tensor x = random_images(batch, 320, 8 + batch);
    const HeadOutputs a = net.forward(x, Mode::kEval);
    CHECK(a.batch == batch);
    CHECK(a.anchors == 1602);
    CHECK(a.classes == 7);
    CHECK(a.arm_loc.size() == size_t(batch) * 1602 * 4);
    CHECK(a.arm_cls.size() == size_t(batch) * 1602 * 2);
    CHECK(a.odm_loc.size() == size_t(batch) * 1602 * 4);
    CHECK(a.odm_cls.size() == size_t(batch) * 1602 * 7);
    CHECK(all_finite(a.arm_loc));
    CHECK(all_finite(a.arm_cls));
    CHECK(all_finite(a.odm_loc));
    CHECK(all_finite(a.odm_cls));
    const HeadOutputs b = net.forward(x, Mode::kEval);
    CHECK(a.odm_cls == b.odm_cls);
    CHECK(a.arm_loc == b.arm_loc);
  }
  CHECK_THROWS_AS(net.forward(Tensor(1, 3, 256, 256), Mode::kEval), std::invalid_argument);
  CHECK_THROWS_AS(net.forward(Tensor(1, 1, 320, 320), Mode::kEval), std::invalid_argument);
}

TEST_CASE("background-biased classification init") {
  RefineDetLite net(make_detector_config(8, 11), 9);
  const HeadOutputs o = net.forward(random_images(2, 320, 10), Mode::kTrain);
  double bg = 0.0;
  const int rows = o.batch * o.anchors;
  for (int a = 0; a < rows; ++a) {
    const float* x = o.odm_cls.data() + size_t(a) * 11;
    double z = 0.0;
    for (int i = 0; i < 11; ++i) z += std::exp(double(x[i]) - x[0]);
    bg += 1.0 / z;
  }
  CHECK(bg / rows == doctest::Approx(0.99).epsilon(0.01));
}

TEST_CASE("anchor ordering is aligned with the heads") {
  // Place a gt exactly on one anchor and take a gradient step on the head
  // biases only: the loss attributed to that anchor must drop.
  const DetectorConfig cfg = make_detector_config(8, 3);
  RefineDetLite net(cfg, 15);
  const auto anchors = anchor_boxes(generate_anchors(cfg.anchors, cfg.input_size));
  const int target = 1602 - 9 * 3 - 5;  // a level-3 anchor
  ImageTargets tg;
  tg.boxes = {anchors[target]};
  tg.labels = {2};
  DetectionLossConfig lc;
  const Tensor x = random_images(1, 320, 16);

  auto anchor_loss = [&](const HeadOutputs& o) {
    std::vector<double> logits(o.odm_cls.begin() + target * 3, o.odm_cls.begin() + target * 3 + 3);
    const std::vector<double> y = one_hot(2, 3);
    const std::vector<double> w(3, 1.0);
    return weighted_kl(logits, y, 1.0, w);
  };
  const HeadOutputs before = net.forward(x, Mode::kTrain);
  DetectionLossResult r = detection_losses(before, anchors, std::span(&tg, 1), lc);
  CHECK(r.odm_positives >= 1);
  net.zero_grad();
  net.backward(r.grad);
  ParamCollector pc;
  net.visit(pc);
  for (size_t i = 0; i < pc.params.size(); ++i) {
    if (pc.names[i].rfind("odm_cls", 0) != 0) continue;
    auto& p = *pc.params[i];
    for (size_t j = 0; j < p.value.size(); ++j) p.value.data()[j] -= 1.0f * p.grad.data()[j];
  }
  const HeadOutputs after = net.forward(x, Mode::kTrain);
  CHECK(anchor_loss(after) < anchor_loss(before));
}
