#include "rdl/backbone.hpp"

#include <stdexcept>

namespace rdl {

void BackboneConfig::validate() const {
  if (c <= 0) throw std::invalid_argument("backbone: c must be positive");
  if (groups < 1) throw std::invalid_argument("backbone: groups must be >= 1");
  if (res2_splits < 2) throw std::invalid_argument("backbone: res2_splits must be >= 2");
  if (c % (res2_splits * groups) != 0) {
    throw std::invalid_argument("backbone: c=" + std::to_string(c) +
                                " not divisible by res2_splits*groups=" +
                                std::to_string(res2_splits * groups));
  }
  for (int b : blocks_per_stage) {
    if (b < 0) throw std::invalid_argument("backbone: negative block count");
  }
  if (stem_channels <= 0 || stem_channels % groups != 0) {
    throw std::invalid_argument("backbone: stem channels must be divisible by groups");
  }
}

// -------------------------------------------------------------- Res2Block

Res2Block::Res2Block(int width, int splits, int groups, Rng& rng)
    : width_(width), splits_(splits) {
  if (width % splits != 0 || (width / splits) % groups != 0) {
    throw std::invalid_argument("res2block: width " + std::to_string(width) +
                                " cannot be split into " + std::to_string(splits) +
                                " parts of group " + std::to_string(groups));
  }
  const int ws = width / splits;
  reduce = ConvBn({width, width, 1, 1, 0, groups}, true, rng);
  for (int i = 1; i < splits; ++i) branches.emplace_back(ConvShape{ws, ws, 3, 1, 1, groups}, true, rng);
  expand = ConvBn({width, width, 1, 1, 0, groups}, false, rng);
  expand.bn.gamma.value.fill(0.0f);
}

Tensor Res2Block::forward(const Tensor& x, Mode mode) {
  if (x.c() != width_) {
    throw std::invalid_argument("res2block: expected " + std::to_string(width_) +
                                " channels, got " + std::to_string(x.c()));
  }
  const int ws = width_ / splits_;
  Tensor a = reduce.forward(x, mode);
  std::vector<Tensor> ys;
  ys.reserve(splits_);
  ys.push_back(slice_channels(a, 0, ws));
  for (int i = 1; i < splits_; ++i) {
    Tensor in = slice_channels(a, i * ws, (i + 1) * ws);
    if (i >= 2) in.add_(ys.back());
    ys.push_back(branches[i - 1].forward(in, mode));
  }
  Tensor out = expand.forward(concat_channels(ys), mode);
  out.add_(x);
  relu_inplace(out);
  if (records(mode)) output_ = out;
  return out;
}

Tensor Res2Block::backward(const Tensor& dy) {
  const int ws = width_ / splits_;
  Tensor d = dy;
  relu_backward_inplace(d, output_);
  Tensor dcat = expand.backward(d);
  std::vector<Tensor> da(splits_);
  Tensor carry;
  for (int i = splits_ - 1; i >= 1; --i) {
    Tensor g = slice_channels(dcat, i * ws, (i + 1) * ws);
    if (!carry.empty()) g.add_(carry);
    Tensor din = branches[i - 1].backward(g);
    if (i >= 2) {
      carry = din;
    } else {
      carry = Tensor();
    }
    da[i] = std::move(din);
  }
  da[0] = slice_channels(dcat, 0, ws);
  Tensor dx = reduce.backward(concat_channels(da));
  dx.add_(d);
  return dx;
}

void Res2Block::visit(StateVisitor& v, const std::string& prefix) {
  reduce.visit(v, prefix + ".reduce");
  for (size_t i = 0; i < branches.size(); ++i) {
    branches[i].visit(v, prefix + ".branch" + std::to_string(i + 1));
  }
  expand.visit(v, prefix + ".expand");
}

void Res2Block::for_each_conv(const ConvFn& fn) const {
  fn(reduce.conv);
  for (const auto& b : branches) fn(b.conv);
  fn(expand.conv);
}

// ------------------------------------------------------------- Bottleneck

Bottleneck::Bottleneck(int in, int out, int groups, Rng& rng) : in_(in), out_(out) {
  const int mid = out / 2;
  if (mid % groups != 0 || in % groups != 0) {
    throw std::invalid_argument("bottleneck: channels not divisible by groups");
  }
  reduce = ConvBn({in, mid, 1, 1, 0, groups}, true, rng);
  spatial = ConvBn({mid, mid, 3, 2, 1, groups}, true, rng);
  expand = ConvBn({mid, out, 1, 1, 0, groups}, false, rng);
  shortcut = ConvBn({in, out, 1, 2, 0, groups}, false, rng);
}

Tensor Bottleneck::forward(const Tensor& x, Mode mode) {
  if (x.c() != in_) {
    throw std::invalid_argument("bottleneck: expected " + std::to_string(in_) +
                                " channels, got " + std::to_string(x.c()));
  }
  Tensor main = expand.forward(spatial.forward(reduce.forward(x, mode), mode), mode);
  main.add_(shortcut.forward(x, mode));
  relu_inplace(main);
  if (records(mode)) output_ = main;
  return main;
}

Tensor Bottleneck::backward(const Tensor& dy, bool need_input_grad) {
  Tensor d = dy;
  relu_backward_inplace(d, output_);
  Tensor dmain = reduce.backward(spatial.backward(expand.backward(d)), need_input_grad);
  Tensor dshort = shortcut.backward(d, need_input_grad);
  if (!need_input_grad) return {};
  dmain.add_(dshort);
  return dmain;
}

void Bottleneck::visit(StateVisitor& v, const std::string& prefix) {
  reduce.visit(v, prefix + ".reduce");
  spatial.visit(v, prefix + ".spatial");
  expand.visit(v, prefix + ".expand");
  shortcut.visit(v, prefix + ".shortcut");
}

void Bottleneck::for_each_conv(const ConvFn& fn) const {
  fn(reduce.conv);
  fn(spatial.conv);
  fn(expand.conv);
  fn(shortcut.conv);
}

int64_t Bottleneck::param_count() const {
  int64_t total = 0;
  for_each_conv([&](const Conv2d& c) { total += c.param_count() + 2 * c.shape().out; });
  return total;
}

// ------------------------------------------------------------ Res2NetLite

Res2NetLite::Res2NetLite(const BackboneConfig& config, Rng& rng) : config_(config) {
  config.validate();
  stem_bn = BatchNorm2d(3);
  // Three input channels cannot be grouped, so the stem conv is dense.
  stem_conv = ConvBn({3, config.stem_channels, 3, 2, 1, 1}, true, rng);
  int in = config.stem_channels;
  for (int s = 0; s < 3; ++s) {
    const int out = config.stage_channels(s + 1);
    stages[s].downsample = Bottleneck(in, out, config.groups, rng);
    for (int b = 0; b < config.blocks_per_stage[s]; ++b) {
      stages[s].blocks.emplace_back(out, config.res2_splits, config.groups, rng);
    }
    in = out;
  }
  classifier = Conv2d({in, config.num_classes, 1, 1, 0, 1, true}, rng);
}

BackboneFeatures Res2NetLite::forward(const Tensor& image, Mode mode) {
  if (image.c() != 3) throw std::invalid_argument("backbone: expected a 3-channel image");
  BackboneFeatures f;
  f.stage0 = stem_pool.forward(stem_conv.forward(stem_bn.forward(image, mode), mode), mode);
  const Tensor* prev = &f.stage0;
  Tensor* outs[3] = {&f.stage1, &f.stage2, &f.stage3};
  for (int s = 0; s < 3; ++s) {
    Tensor t = stages[s].downsample.forward(*prev, mode);
    for (auto& b : stages[s].blocks) t = b.forward(t, mode);
    *outs[s] = std::move(t);
    prev = outs[s];
  }
  return f;
}

Tensor Res2NetLite::backward(const BackboneFeatures& grads, bool need_input_grad) {
  const Tensor* stage_grads[3] = {&grads.stage1, &grads.stage2, &grads.stage3};
  Tensor carry;  // gradient flowing into the output of the current stage from above
  for (int s = 2; s >= 0; --s) {
    Tensor d = carry;
    if (!stage_grads[s]->empty()) {
      if (d.empty()) {
        d = *stage_grads[s];
      } else {
        d.add_(*stage_grads[s]);
      }
    }
    if (d.empty()) continue;
    for (int b = static_cast<int>(stages[s].blocks.size()) - 1; b >= 0; --b) {
      d = stages[s].blocks[b].backward(d);
    }
    carry = stages[s].downsample.backward(d, true);
  }
  if (!grads.stage0.empty()) {
    if (carry.empty()) {
      carry = grads.stage0;
    } else {
      carry.add_(grads.stage0);
    }
  }
  if (carry.empty()) return {};
  Tensor d = stem_conv.backward(stem_pool.backward(carry), true);
  Tensor dx = stem_bn.backward(d);
  if (!need_input_grad) return {};
  return dx;
}

Tensor Res2NetLite::classify(const Tensor& image) {
  BackboneFeatures f = forward(image, Mode::kEval);
  return classifier.forward(global_avg_pool(f.stage3), Mode::kEval);
}

void Res2NetLite::visit(StateVisitor& v, const std::string& prefix, bool include_classifier) {
  stem_bn.visit(v, prefix + ".stem_bn");
  stem_conv.visit(v, prefix + ".stem_conv");
  for (int s = 0; s < 3; ++s) {
    const std::string sp = prefix + ".stage" + std::to_string(s + 1);
    stages[s].downsample.visit(v, sp + ".downsample");
    for (size_t b = 0; b < stages[s].blocks.size(); ++b) {
      stages[s].blocks[b].visit(v, sp + ".block" + std::to_string(b));
    }
  }
  if (include_classifier) classifier.visit(v, prefix + ".classifier");
}

void Res2NetLite::for_each_conv(const ConvFn& fn, bool include_classifier) const {
  fn(stem_conv.conv);
  for (const auto& s : stages) {
    s.downsample.for_each_conv(fn);
    for (const auto& b : s.blocks) b.for_each_conv(fn);
  }
  if (include_classifier) fn(classifier);
}

Res2NetLite build_backbone(const BackboneConfig& config, Rng& rng) {
  return Res2NetLite(config, rng);
}

ShapePlan shape_plan(const BackboneConfig& config, int input_size) {
  config.validate();
  if (input_size < 64 || input_size % 32 != 0) {
    throw std::invalid_argument("shape_plan: input size must be >= 64 and divisible by 32");
  }
  auto half = [](int s) { return (s + 1) / 2; };
  ShapePlan plan;
  int s = input_size;
  plan.push_back({"stage0.bn", s, 3});
  s = half(s);
  plan.push_back({"stage0.conv", s, config.stem_channels});
  s = half(s);
  plan.push_back({"stage0.pool", s, config.stem_channels});
  for (int k = 1; k <= 3; ++k) {
    s = half(s);
    const std::string name = "stage" + std::to_string(k);
    plan.push_back({name + ".downsample", s, config.stage_channels(k)});
    plan.push_back({name + ".blocks", s, config.stage_channels(k)});
  }
  plan.push_back({"stage4.pool", 1, config.stage_channels(3)});
  plan.push_back({"stage4.fc", 1, config.num_classes});
  return plan;
}

namespace {

class ParamCounter : public StateVisitor {
 public:
  void param(const std::string&, Param& p) override { total += static_cast<int64_t>(p.value.size()); }
  void buffer(const std::string&, Tensor&) override {}
  int64_t total = 0;
};

}  // namespace

ModelCost count_params_flops(Res2NetLite& model, int input_size, bool include_classifier) {
  ModelCost cost;
  ParamCounter counter;
  model.visit(counter, "backbone", include_classifier);
  cost.params = counter.total;
  Tensor probe(1, 3, input_size, input_size);
  if (include_classifier) {
    model.classify(probe);
  } else {
    model.forward(probe, Mode::kEval);
  }
  model.for_each_conv([&](const Conv2d& c) { cost.macs += c.last_macs(); }, include_classifier);
  return cost;
}

}  // namespace rdl
