#include "rdl/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace rdl {

namespace {

// Upper bound on the log-scale step in decode; keeps exp() finite for
// untrained regressors without touching any realistic box ratio.
constexpr double kMaxLogScale = 10.0;

bool finite(const Box& b) {
  return std::isfinite(b.x1) && std::isfinite(b.y1) && std::isfinite(b.x2) &&
         std::isfinite(b.y2);
}

}  // namespace

int AnchorLayout::total_anchors() const {
  int total = 0;
  for (const auto& l : levels) total += l.grid_size * l.grid_size * l.anchors_per_cell();
  return total;
}

void validate_box(const Box& b) {
  if (!finite(b)) throw std::invalid_argument("box has non-finite coordinates");
  if (b.x2 < b.x1 || b.y2 < b.y1) throw std::invalid_argument("box corners inverted");
}

double iou(const Box& a, const Box& b) {
  validate_box(a);
  validate_box(b);
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

double giou(const Box& a, const Box& b) {
  const double base = iou(a, b);
  const double cw = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  const double ch = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  const double enclosing = cw * ch;
  if (!(enclosing > 0.0)) throw std::invalid_argument("giou: degenerate enclosing box");
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double uni = a.area() + b.area() - iw * ih;
  return base - (enclosing - uni) / enclosing;
}

BoxDeltas encode(const Box& anchor, const Box& gt, Variances v) {
  validate_box(anchor);
  validate_box(gt);
  const double aw = anchor.width(), ah = anchor.height();
  const double gw = gt.width(), gh = gt.height();
  if (!(aw > 0.0 && ah > 0.0)) throw std::invalid_argument("encode: zero-size anchor");
  if (!(gw > 0.0 && gh > 0.0)) throw std::invalid_argument("encode: zero-size target");
  return {(gt.cx() - anchor.cx()) / aw / v.center,
          (gt.cy() - anchor.cy()) / ah / v.center,
          std::log(gw / aw) / v.size,
          std::log(gh / ah) / v.size};
}

Box decode(const Box& anchor, const BoxDeltas& d, Variances v) {
  validate_box(anchor);
  if (!std::isfinite(d.dx) || !std::isfinite(d.dy) || !std::isfinite(d.dw) ||
      !std::isfinite(d.dh)) {
    throw std::invalid_argument("decode: non-finite deltas");
  }
  const double aw = anchor.width(), ah = anchor.height();
  const double cx = anchor.cx() + d.dx * v.center * aw;
  const double cy = anchor.cy() + d.dy * v.center * ah;
  const double w = aw * std::exp(std::min(d.dw * v.size, kMaxLogScale));
  const double h = ah * std::exp(std::min(d.dh * v.size, kMaxLogScale));
  return Box::from_center(cx, cy, w, h);
}

std::vector<int> pyramid_grid_sizes(int input_size) {
  std::vector<int> sizes;
  int g = (input_size + 15) / 16;
  for (int i = 0; i < 4; ++i) {
    sizes.push_back(g);
    g = (g + 1) / 2;
  }
  return sizes;
}

AnchorLayout default_anchor_layout(int input_size) {
  AnchorLayout layout;
  for (int g : pyramid_grid_sizes(input_size)) {
    PyramidLevel level;
    level.grid_size = g;
    level.stride = static_cast<double>(input_size) / g;
    level.scales = {4.0 * level.stride / input_size};
    level.aspect_ratios = {0.5, 1.0, 2.0};
    layout.levels.push_back(std::move(level));
  }
  return layout;
}

std::vector<Anchor> generate_anchors(const AnchorLayout& layout, int input_size) {
  if (input_size <= 0) throw std::invalid_argument("generate_anchors: input size must be positive");
  std::vector<Anchor> anchors;
  anchors.reserve(layout.total_anchors());
  for (int li = 0; li < static_cast<int>(layout.levels.size()); ++li) {
    const PyramidLevel& level = layout.levels[li];
    if (level.scales.empty() || level.aspect_ratios.empty()) {
      throw std::invalid_argument("generate_anchors: level needs scales and aspect ratios");
    }
    if (level.grid_size <= 0) throw std::invalid_argument("generate_anchors: empty grid");
    for (double s : level.scales) {
      if (!(s > 0.0)) throw std::invalid_argument("generate_anchors: scale must be positive");
    }
    for (double r : level.aspect_ratios) {
      if (!(r > 0.0)) throw std::invalid_argument("generate_anchors: ratio must be positive");
    }
    const double cell = level.stride / input_size;
    for (int row = 0; row < level.grid_size; ++row) {
      for (int col = 0; col < level.grid_size; ++col) {
        const double cx = (col + 0.5) * cell;
        const double cy = (row + 0.5) * cell;
        int slot = 0;
        for (double s : level.scales) {
          for (double r : level.aspect_ratios) {
            const double sr = std::sqrt(r);
            anchors.push_back({Box::from_center(cx, cy, s * sr, s / sr), li, row, col, slot++});
          }
        }
      }
    }
  }
  return anchors;
}

std::vector<Box> anchor_boxes(std::span<const Anchor> anchors) {
  std::vector<Box> boxes;
  boxes.reserve(anchors.size());
  for (const auto& a : anchors) boxes.push_back(a.box);
  return boxes;
}

std::vector<Box> refine_anchors(std::span<const Box> anchors, std::span<const BoxDeltas> deltas,
                                Variances v) {
  if (anchors.size() != deltas.size()) {
    throw std::invalid_argument("refine_anchors: one delta per anchor required");
  }
  std::vector<Box> out;
  out.reserve(anchors.size());
  for (size_t i = 0; i < anchors.size(); ++i) out.push_back(decode(anchors[i], deltas[i], v));
  return out;
}

Box clip_unit(const Box& b) {
  auto c = [](double x) { return std::clamp(x, 0.0, 1.0); };
  return {c(b.x1), c(b.y1), c(b.x2), c(b.y2)};
}

}  // namespace rdl
