#pragma once

#include <array>
#include <span>
#include <vector>

namespace rdl {

/// Axis-aligned box in corner form, normalized to the image extent.
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }

  static Box from_center(double cx, double cy, double w, double h) {
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  }

  bool operator==(const Box&) const = default;
};

/// SSD offset parameterization of one box relative to an anchor.
struct BoxDeltas {
  double dx = 0.0;
  double dy = 0.0;
  double dw = 0.0;
  double dh = 0.0;

  bool operator==(const BoxDeltas&) const = default;
};

struct Variances {
  double center = 0.1;
  double size = 0.2;
};

inline constexpr Variances kDefaultVariances{0.1, 0.2};

struct PyramidLevel {
  int grid_size = 0;
  double stride = 0.0;  // pixels per cell
  std::vector<double> scales;
  std::vector<double> aspect_ratios;

  int anchors_per_cell() const {
    return static_cast<int>(scales.size() * aspect_ratios.size());
  }
};

struct AnchorLayout {
  std::vector<PyramidLevel> levels;

  int anchors_per_cell(int level) const { return levels[level].anchors_per_cell(); }
  int total_anchors() const;
};

struct Anchor {
  Box box;
  int level = 0;
  int row = 0;
  int col = 0;
  int slot = 0;
};

/// Throws std::invalid_argument when a coordinate is non-finite or the box is inverted.
void validate_box(const Box& b);

double iou(const Box& a, const Box& b);
double giou(const Box& a, const Box& b);

BoxDeltas encode(const Box& anchor, const Box& gt, Variances v = kDefaultVariances);
Box decode(const Box& anchor, const BoxDeltas& deltas, Variances v = kDefaultVariances);

/// Grid sizes {20, 10, 5, 3} for a 320 input; one scale per level of 4 cells,
/// aspect ratios {0.5, 1, 2}.
AnchorLayout default_anchor_layout(int input_size = 320);

/// Cell size halves per level with ceil rounding, starting at input_size / 16.
std::vector<int> pyramid_grid_sizes(int input_size);

/// Level-major, then row, col, slot. Slot enumerates scales outer, ratios inner.
std::vector<Anchor> generate_anchors(const AnchorLayout& layout, int input_size);

std::vector<Box> anchor_boxes(std::span<const Anchor> anchors);

std::vector<Box> refine_anchors(std::span<const Box> anchors,
                                std::span<const BoxDeltas> deltas,
                                Variances v = kDefaultVariances);

Box clip_unit(const Box& b);

}  // namespace rdl
