#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "rdl/backbone.hpp"
#include "rdl/geometry.hpp"

namespace rdl {

struct DetectorConfig {
  BackboneConfig backbone;
  int num_classes = 81;  // foreground classes + background
  int input_size = 320;
  int fused_channels = 256;
  int extra_channels = 512;
  AnchorLayout anchors = default_anchor_layout(320);

  void validate() const;
};

/// Per-anchor predictions for a batch, flattened anchor-major in the same
/// order as generate_anchors().
struct HeadOutputs {
  int batch = 0;
  int anchors = 0;
  int classes = 0;
  std::vector<Real> arm_loc;  // [batch][anchors][4]
  std::vector<Real> arm_cls;  // [batch][anchors][2], index 0 = background
  std::vector<Real> odm_loc;  // [batch][anchors][4]
  std::vector<Real> odm_cls;  // [batch][anchors][classes]

  HeadOutputs() = default;
  HeadOutputs(int batch, int anchors, int classes);

  std::span<const Real> arm_loc_of(int n) const { return {arm_loc.data() + size_t(n) * anchors * 4, size_t(anchors) * 4}; }
  std::span<const Real> arm_cls_of(int n) const { return {arm_cls.data() + size_t(n) * anchors * 2, size_t(anchors) * 2}; }
  std::span<const Real> odm_loc_of(int n) const { return {odm_loc.data() + size_t(n) * anchors * 4, size_t(anchors) * 4}; }
  std::span<const Real> odm_cls_of(int n) const { return {odm_cls.data() + size_t(n) * anchors * classes, size_t(anchors) * classes}; }
};

/// Two-path head block: a 1x1-3x3-1x1 bottleneck summed with a 1x1 path,
/// followed by ReLU.
class LightHead {
 public:
  LightHead() = default;
  LightHead(int in, int out, Rng& rng);

  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy);
  void visit(StateVisitor& v, const std::string& prefix);
  void for_each_conv(const ConvFn& fn) const;
  int64_t param_count() const;

  ConvBn reduce;
  ConvBn spatial;
  ConvBn expand;
  ConvBn pointwise;

 private:
  Tensor output_;
};

struct Pyramid {
  std::array<Tensor, 4> levels;
};

class RefineDetLite {
 public:
  RefineDetLite() = default;
  RefineDetLite(const DetectorConfig& config, uint64_t seed);

  HeadOutputs forward(const Tensor& images, Mode mode);
  /// Backpropagates head gradients (same layout as HeadOutputs) into parameter
  /// gradients. Returns the input-image gradient when requested.
  Tensor backward(const HeadOutputs& grads, bool need_input_grad = false);

  /// Raw pyramid (levels feeding the ARM) from the last forward with recording.
  Pyramid build_pyramid(const Tensor& images, Mode mode);
  /// Reverse top-down fusion of a pyramid into ODM features.
  Pyramid fuse_features(const Pyramid& pyramid, Mode mode);

  void visit(StateVisitor& v);
  void for_each_conv(const ConvFn& fn) const;
  void zero_grad();

  const DetectorConfig& config() const { return config_; }
  int num_anchors() const { return config_.anchors.total_anchors(); }
  std::array<int, 4> pyramid_channels() const;

  Res2NetLite backbone;
  std::array<Bottleneck, 2> extras;
  std::array<LightHead, 4> arm_heads;
  std::array<Conv2d, 4> arm_loc;
  std::array<Conv2d, 4> arm_cls;
  std::array<LightHead, 4> fuse_heads;
  std::array<Conv2d, 4> odm_loc;
  std::array<Conv2d, 4> odm_cls;

 private:
  DetectorConfig config_;
  Pyramid pyramid_;
  Pyramid fused_;
};

/// Default desk-scale and full-scale detector settings.
DetectorConfig make_detector_config(int c, int num_classes, int input_size = 320);

}  // namespace rdl
