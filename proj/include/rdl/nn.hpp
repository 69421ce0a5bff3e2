#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rdl/tensor.hpp"

namespace rdl {

using Rng = std::mt19937_64;

/// kTrain uses batch statistics and records activations for backward.
/// kEval uses running statistics and records nothing.
/// kEvalGrad uses running statistics but records, for input-gradient checks.
enum class Mode { kTrain, kEval, kEvalGrad };

inline bool records(Mode m) { return m != Mode::kEval; }

struct Param {
  Tensor value;
  Tensor grad;
  bool decay = true;
};

/// Enumerates named parameters and persistent buffers of a module tree.
class StateVisitor {
 public:
  virtual ~StateVisitor() = default;
  virtual void param(const std::string& name, Param& p) = 0;
  virtual void buffer(const std::string& name, Tensor& t) = 0;
};

struct ConvShape {
  int in = 0;
  int out = 0;
  int kernel = 1;
  int stride = 1;
  int pad = 0;
  int groups = 1;
  bool bias = false;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const ConvShape& shape, Rng& rng);

  Tensor forward(const Tensor& x, Mode mode);
  /// Accumulates parameter gradients; returns dx unless need_input_grad is false.
  Tensor backward(const Tensor& dy, bool need_input_grad = true);

  void visit(StateVisitor& v, const std::string& prefix);
  void zero_weights();
  /// Normal(0, std) weights and constant bias.
  void reset(double std, Real bias_value, Rng& rng);

  const ConvShape& shape() const { return shape_; }
  int out_size(int in) const { return (in + 2 * shape_.pad - shape_.kernel) / shape_.stride + 1; }
  int64_t param_count() const;
  int64_t macs(int out_h, int out_w) const;
  int64_t last_macs() const { return last_macs_; }

  Param weight;
  Param bias;

 private:
  void im2col(const Real* image, int h, int w, int group, Real* col) const;
  void col2im(const Real* col, int h, int w, int group, Real* image) const;
  bool is_pointwise() const {
    return shape_.kernel == 1 && shape_.stride == 1 && shape_.pad == 0;
  }

  ConvShape shape_;
  Tensor input_;
  int64_t last_macs_ = 0;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels, double momentum = 0.1, double eps = 1e-5);

  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy);
  void visit(StateVisitor& v, const std::string& prefix);

  int channels() const { return channels_; }

  Param gamma;
  Param beta;
  Tensor running_mean;
  Tensor running_var;

 private:
  int channels_ = 0;
  double momentum_ = 0.1;
  double eps_ = 1e-5;
  bool used_batch_stats_ = false;
  Tensor xhat_;
  std::vector<Real> inv_std_;
};

/// Convolution (no bias) followed by batch normalization and optional ReLU.
class ConvBn {
 public:
  ConvBn() = default;
  ConvBn(const ConvShape& shape, bool relu, Rng& rng);

  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy, bool need_input_grad = true);
  void visit(StateVisitor& v, const std::string& prefix);

  Conv2d conv;
  BatchNorm2d bn;

 private:
  bool relu_ = true;
  Tensor output_;
};

/// 3x3, stride 2, pad 1 max pooling.
class MaxPool {
 public:
  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy);
  static int out_size(int in) { return (in + 2 - 3) / 2 + 1; }

 private:
  int in_h_ = 0, in_w_ = 0, in_c_ = 0;
  std::vector<int32_t> argmax_;
};

/// Nearest-neighbour resize to an explicit target size (2x upsampling when exact).
Tensor resize_nearest(const Tensor& x, int out_h, int out_w);
Tensor resize_nearest_backward(const Tensor& dy, int in_h, int in_w);

Tensor global_avg_pool(const Tensor& x);
Tensor global_avg_pool_backward(const Tensor& dy, int h, int w);

/// Visits every parameter, collecting pointers in traversal order.
class ParamCollector : public StateVisitor {
 public:
  void param(const std::string& name, Param& p) override {
    names.push_back(name);
    params.push_back(&p);
  }
  void buffer(const std::string& name, Tensor& t) override {
    buffer_names.push_back(name);
    buffers.push_back(&t);
  }
  std::vector<std::string> names;
  std::vector<Param*> params;
  std::vector<std::string> buffer_names;
  std::vector<Tensor*> buffers;
};

}  // namespace rdl
