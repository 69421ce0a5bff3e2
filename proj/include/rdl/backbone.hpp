#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rdl/nn.hpp"

namespace rdl {

/// Structural parameters of Res2NetLite. Stage outputs are 4c, 8c and 16c channels.
struct BackboneConfig {
  int c = 72;
  std::array<int, 3> blocks_per_stage{3, 7, 3};
  int groups = 2;
  int res2_splits = 4;
  int stem_channels = 32;
  int num_classes = 1000;  // classification tail only

  int stage_channels(int stage) const { return (4 << (stage - 1)) * c; }  // stage in 1..3
  void validate() const;
};

using ConvFn = std::function<void(const Conv2d&)>;

/// Residual block with hierarchical split convolutions. Input and output
/// widths are identical.
class Res2Block {
 public:
  Res2Block() = default;
  Res2Block(int width, int splits, int groups, Rng& rng);

  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy);
  void visit(StateVisitor& v, const std::string& prefix);
  void for_each_conv(const ConvFn& fn) const;

  int width() const { return width_; }
  int splits() const { return splits_; }
  /// Stacked 3x3 convolutions along the path feeding split i.
  int branch_depth(int split) const { return split; }

  ConvBn reduce;                 // 1x1 group conv
  std::vector<ConvBn> branches;  // 3x3 group convs for splits 1..s-1
  ConvBn expand;                 // 1x1 group conv, no activation

 private:
  int width_ = 0;
  int splits_ = 0;
  Tensor output_;
};

/// Stride-2 downsampling block: 1x1 reduce, 3x3 stride-2, 1x1 expand, with a
/// strided 1x1 projection shortcut. The inner width is half the output width.
class Bottleneck {
 public:
  Bottleneck() = default;
  Bottleneck(int in, int out, int groups, Rng& rng);

  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy, bool need_input_grad = true);
  void visit(StateVisitor& v, const std::string& prefix);
  void for_each_conv(const ConvFn& fn) const;

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int64_t param_count() const;

  ConvBn reduce;
  ConvBn spatial;
  ConvBn expand;
  ConvBn shortcut;

 private:
  int in_ = 0;
  int out_ = 0;
  Tensor output_;
};

struct BackboneFeatures {
  Tensor stage0;
  Tensor stage1;
  Tensor stage2;
  Tensor stage3;
};

struct ShapeRow {
  std::string name;
  int size = 0;  // spatial side
  int channels = 0;

  bool operator==(const ShapeRow&) const = default;
};

using ShapePlan = std::vector<ShapeRow>;

class Res2NetLite {
 public:
  struct Stage {
    Bottleneck downsample;
    std::vector<Res2Block> blocks;
  };

  Res2NetLite() = default;
  Res2NetLite(const BackboneConfig& config, Rng& rng);

  BackboneFeatures forward(const Tensor& image, Mode mode);
  /// Gradients for any subset of stage outputs; empty tensors mean zero.
  Tensor backward(const BackboneFeatures& grads, bool need_input_grad = false);
  /// Stage4: global pooling and 1x1 conv to class logits.
  Tensor classify(const Tensor& image);

  void visit(StateVisitor& v, const std::string& prefix, bool include_classifier = true);
  void for_each_conv(const ConvFn& fn, bool include_classifier = false) const;
  const BackboneConfig& config() const { return config_; }

  BatchNorm2d stem_bn;
  ConvBn stem_conv;
  MaxPool stem_pool;
  std::array<Stage, 3> stages;
  Conv2d classifier;

 private:
  BackboneConfig config_;
};

Res2NetLite build_backbone(const BackboneConfig& config, Rng& rng);

/// Table of layer output shapes derived by arithmetic only.
ShapePlan shape_plan(const BackboneConfig& config, int input_size);

struct ModelCost {
  int64_t params = 0;
  int64_t macs = 0;
};

/// Parameter and multiply-add counts of the feature path (optionally the
/// classification tail) for one image of the given size.
ModelCost count_params_flops(Res2NetLite& model, int input_size, bool include_classifier = false);

}  // namespace rdl
