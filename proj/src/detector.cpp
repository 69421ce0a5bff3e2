#include "rdl/detector.hpp"

#include <cmath>
#include <stdexcept>

namespace rdl {

namespace {

constexpr double kHeadInitStd = 0.01;
constexpr double kBackgroundPrior = 0.99;

// Writes a [N, A*D, H, W] head map into the flat anchor-major layout.
void flatten_level(const Tensor& map, int anchors_per_cell, int dim, int base, int total_anchors,
                   std::vector<Real>& out) {
  const int H = map.h(), W = map.w();
  for (int n = 0; n < map.n(); ++n) {
    Real* dst = out.data() + (static_cast<size_t>(n) * total_anchors + base) * dim;
    for (int a = 0; a < anchors_per_cell; ++a) {
      for (int d = 0; d < dim; ++d) {
        const Real* src = map.plane(n, a * dim + d);
        for (int y = 0; y < H; ++y) {
          for (int x = 0; x < W; ++x) {
            dst[((static_cast<size_t>(y) * W + x) * anchors_per_cell + a) * dim + d] = src[y * W + x];
          }
        }
      }
    }
  }
}

Tensor unflatten_level(const std::vector<Real>& flat, int batch, int anchors_per_cell, int dim,
                       int base, int total_anchors, int H, int W) {
  Tensor map(batch, anchors_per_cell * dim, H, W);
  for (int n = 0; n < batch; ++n) {
    const Real* src = flat.data() + (static_cast<size_t>(n) * total_anchors + base) * dim;
    for (int a = 0; a < anchors_per_cell; ++a) {
      for (int d = 0; d < dim; ++d) {
        Real* dst = map.plane(n, a * dim + d);
        for (int y = 0; y < H; ++y) {
          for (int x = 0; x < W; ++x) {
            dst[y * W + x] = src[((static_cast<size_t>(y) * W + x) * anchors_per_cell + a) * dim + d];
          }
        }
      }
    }
  }
  return map;
}

void accumulate(Tensor& dst, const Tensor& src) {
  if (src.empty()) return;
  if (dst.empty()) {
    dst = src;
  } else {
    dst.add_(src);
  }
}

}  // namespace

void DetectorConfig::validate() const {
  backbone.validate();
  if (num_classes < 2) throw std::invalid_argument("detector: need at least 2 classes");
  if (input_size < 64 || input_size % 32 != 0) {
    throw std::invalid_argument("detector: input size must be >= 64 and divisible by 32");
  }
  if (fused_channels <= 0 || fused_channels % 4 != 0) {
    throw std::invalid_argument("detector: fused channels must be a positive multiple of 4");
  }
  if (anchors.levels.size() != 4) throw std::invalid_argument("detector: anchor layout needs 4 levels");
  const auto grids = pyramid_grid_sizes(input_size);
  for (int k = 0; k < 4; ++k) {
    if (anchors.levels[k].grid_size != grids[k]) {
      throw std::invalid_argument("detector: anchor grid does not match pyramid level " +
                                  std::to_string(k));
    }
  }
}

HeadOutputs::HeadOutputs(int b, int a, int k)
    : batch(b),
      anchors(a),
      classes(k),
      arm_loc(size_t(b) * a * 4),
      arm_cls(size_t(b) * a * 2),
      odm_loc(size_t(b) * a * 4),
      odm_cls(size_t(b) * a * k) {}

// -------------------------------------------------------------- LightHead

LightHead::LightHead(int in, int out, Rng& rng) {
  const int mid = out / 4;
  reduce = ConvBn({in, mid, 1, 1, 0, 1}, true, rng);
  spatial = ConvBn({mid, mid, 3, 1, 1, 1}, true, rng);
  expand = ConvBn({mid, out, 1, 1, 0, 1}, false, rng);
  pointwise = ConvBn({in, out, 1, 1, 0, 1}, false, rng);
}

Tensor LightHead::forward(const Tensor& x, Mode mode) {
  Tensor y = expand.forward(spatial.forward(reduce.forward(x, mode), mode), mode);
  y.add_(pointwise.forward(x, mode));
  relu_inplace(y);
  if (records(mode)) output_ = y;
  return y;
}

Tensor LightHead::backward(const Tensor& dy) {
  Tensor d = dy;
  relu_backward_inplace(d, output_);
  Tensor dx = reduce.backward(spatial.backward(expand.backward(d)));
  dx.add_(pointwise.backward(d));
  return dx;
}

void LightHead::visit(StateVisitor& v, const std::string& prefix) {
  reduce.visit(v, prefix + ".reduce");
  spatial.visit(v, prefix + ".spatial");
  expand.visit(v, prefix + ".expand");
  pointwise.visit(v, prefix + ".pointwise");
}

void LightHead::for_each_conv(const ConvFn& fn) const {
  fn(reduce.conv);
  fn(spatial.conv);
  fn(expand.conv);
  fn(pointwise.conv);
}

int64_t LightHead::param_count() const {
  int64_t total = 0;
  for_each_conv([&](const Conv2d& c) { total += c.param_count() + 2 * c.shape().out; });
  return total;
}

// ---------------------------------------------------------- RefineDetLite

RefineDetLite::RefineDetLite(const DetectorConfig& config, uint64_t seed) : config_(config) {
  config.validate();
  Rng rng(seed);
  backbone = build_backbone(config.backbone, rng);
  const int c3 = config.backbone.stage_channels(3);
  extras[0] = Bottleneck(c3, config.extra_channels, config.backbone.groups, rng);
  extras[1] = Bottleneck(config.extra_channels, config.extra_channels, config.backbone.groups, rng);
  const auto in_channels = pyramid_channels();
  const int F = config.fused_channels;
  const int K = config.num_classes;
  const Real bg_bias = static_cast<Real>(std::log((K - 1) * kBackgroundPrior / (1.0 - kBackgroundPrior)));
  for (int k = 0; k < 4; ++k) {
    const int A = config.anchors.anchors_per_cell(k);
    arm_heads[k] = LightHead(in_channels[k], F, rng);
    arm_loc[k] = Conv2d({F, A * 4, 1, 1, 0, 1, true}, rng);
    arm_cls[k] = Conv2d({F, A * 2, 1, 1, 0, 1, true}, rng);
    fuse_heads[k] = LightHead(in_channels[k], F, rng);
    odm_loc[k] = Conv2d({F, A * 4, 1, 1, 0, 1, true}, rng);
    odm_cls[k] = Conv2d({F, A * K, 1, 1, 0, 1, true}, rng);
    arm_loc[k].reset(kHeadInitStd, 0.0f, rng);
    arm_cls[k].reset(kHeadInitStd, 0.0f, rng);
    odm_loc[k].reset(kHeadInitStd, 0.0f, rng);
    odm_cls[k].reset(kHeadInitStd, 0.0f, rng);
    for (int a = 0; a < A; ++a) odm_cls[k].bias.value.data()[a * K] = bg_bias;
  }
}

std::array<int, 4> RefineDetLite::pyramid_channels() const {
  return {config_.backbone.stage_channels(2), config_.backbone.stage_channels(3),
          config_.extra_channels, config_.extra_channels};
}

Pyramid RefineDetLite::build_pyramid(const Tensor& images, Mode mode) {
  if (images.c() != 3 || images.h() != config_.input_size || images.w() != config_.input_size) {
    throw std::invalid_argument("detector: expected input [N,3," + std::to_string(config_.input_size) +
                                "," + std::to_string(config_.input_size) + "], got " +
                                images.shape_string());
  }
  BackboneFeatures f = backbone.forward(images, mode);
  Pyramid p;
  p.levels[0] = std::move(f.stage2);
  p.levels[1] = std::move(f.stage3);
  p.levels[2] = extras[0].forward(p.levels[1], mode);
  p.levels[3] = extras[1].forward(p.levels[2], mode);
  return p;
}

Pyramid RefineDetLite::fuse_features(const Pyramid& pyramid, Mode mode) {
  Pyramid fused;
  fused.levels[3] = fuse_heads[3].forward(pyramid.levels[3], mode);
  for (int k = 2; k >= 0; --k) {
    Tensor own = fuse_heads[k].forward(pyramid.levels[k], mode);
    own.add_(resize_nearest(fused.levels[k + 1], own.h(), own.w()));
    fused.levels[k] = std::move(own);
  }
  return fused;
}

HeadOutputs RefineDetLite::forward(const Tensor& images, Mode mode) {
  pyramid_ = build_pyramid(images, mode);
  fused_ = fuse_features(pyramid_, mode);
  const int total = num_anchors();
  const int K = config_.num_classes;
  HeadOutputs out(images.n(), total, K);
  int base = 0;
  for (int k = 0; k < 4; ++k) {
    const int A = config_.anchors.anchors_per_cell(k);
    Tensor h = arm_heads[k].forward(pyramid_.levels[k], mode);
    flatten_level(arm_loc[k].forward(h, mode), A, 4, base, total, out.arm_loc);
    flatten_level(arm_cls[k].forward(h, mode), A, 2, base, total, out.arm_cls);
    flatten_level(odm_loc[k].forward(fused_.levels[k], mode), A, 4, base, total, out.odm_loc);
    flatten_level(odm_cls[k].forward(fused_.levels[k], mode), A, K, base, total, out.odm_cls);
    base += A * h.h() * h.w();
  }
  if (!records(mode)) {
    pyramid_ = Pyramid();
    fused_ = Pyramid();
  }
  return out;
}

Tensor RefineDetLite::backward(const HeadOutputs& grads, bool need_input_grad) {
  const int total = num_anchors();
  const int K = config_.num_classes;
  const int N = grads.batch;
  std::array<Tensor, 4> dlevel;
  std::array<Tensor, 4> dfused;
  std::array<int, 4> bases{};
  int base = 0;
  for (int k = 0; k < 4; ++k) {
    bases[k] = base;
    const int A = config_.anchors.anchors_per_cell(k);
    const int H = pyramid_.levels[k].h(), W = pyramid_.levels[k].w();
    Tensor dh = arm_loc[k].backward(unflatten_level(grads.arm_loc, N, A, 4, base, total, H, W));
    dh.add_(arm_cls[k].backward(unflatten_level(grads.arm_cls, N, A, 2, base, total, H, W)));
    accumulate(dlevel[k], arm_heads[k].backward(dh));
    Tensor df = odm_loc[k].backward(unflatten_level(grads.odm_loc, N, A, 4, base, total, H, W));
    df.add_(odm_cls[k].backward(unflatten_level(grads.odm_cls, N, A, K, base, total, H, W)));
    dfused[k] = std::move(df);
    base += A * H * W;
  }
  for (int k = 0; k < 4; ++k) {
    if (k < 3) {
      const Tensor& upper = fused_.levels[k + 1];
      dfused[k + 1].add_(resize_nearest_backward(dfused[k], upper.h(), upper.w()));
    }
    accumulate(dlevel[k], fuse_heads[k].backward(dfused[k]));
  }
  accumulate(dlevel[2], extras[1].backward(dlevel[3]));
  accumulate(dlevel[1], extras[0].backward(dlevel[2]));
  BackboneFeatures bg;
  bg.stage2 = std::move(dlevel[0]);
  bg.stage3 = std::move(dlevel[1]);
  return backbone.backward(bg, need_input_grad);
}

void RefineDetLite::visit(StateVisitor& v) {
  backbone.visit(v, "backbone", false);
  extras[0].visit(v, "extra0");
  extras[1].visit(v, "extra1");
  for (int k = 0; k < 4; ++k) {
    const std::string s = std::to_string(k);
    arm_heads[k].visit(v, "arm_head" + s);
    arm_loc[k].visit(v, "arm_loc" + s);
    arm_cls[k].visit(v, "arm_cls" + s);
    fuse_heads[k].visit(v, "fuse_head" + s);
    odm_loc[k].visit(v, "odm_loc" + s);
    odm_cls[k].visit(v, "odm_cls" + s);
  }
}

void RefineDetLite::for_each_conv(const ConvFn& fn) const {
  backbone.for_each_conv(fn, false);
  for (const auto& e : extras) e.for_each_conv(fn);
  for (int k = 0; k < 4; ++k) {
    arm_heads[k].for_each_conv(fn);
    fn(arm_loc[k]);
    fn(arm_cls[k]);
    fuse_heads[k].for_each_conv(fn);
    fn(odm_loc[k]);
    fn(odm_cls[k]);
  }
}

void RefineDetLite::zero_grad() {
  ParamCollector c;
  visit(c);
  for (Param* p : c.params) p->grad.fill(0.0f);
}

DetectorConfig make_detector_config(int c, int num_classes, int input_size) {
  DetectorConfig cfg;
  cfg.backbone.c = c;
  cfg.num_classes = num_classes;
  cfg.input_size = input_size;
  cfg.anchors = default_anchor_layout(input_size);
  return cfg;
}

}  // namespace rdl
