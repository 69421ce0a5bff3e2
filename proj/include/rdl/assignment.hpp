#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rdl/geometry.hpp"
#include "rdl/tensor.hpp"

namespace rdl {

inline constexpr int kNoMatch = -1;

/// Per-anchor assignment. label 0 is background.
struct MatchResult {
  std::vector<int> label;
  std::vector<int> gt_index;       // kNoMatch for background
  std::vector<double> iou_pre;     // IOU of the matched box against its gt (max IOU for negatives)
  std::vector<double> iou_hat;     // IOU recomputed after regression

  size_t size() const { return label.size(); }
  bool positive(size_t i) const { return label[i] > 0; }
  int num_positives() const;
};

struct SampleSelection {
  std::vector<int> positives;
  std::vector<int> negatives;
};

/// Each gt claims its best anchor first (lowest gt index wins ties); the rest
/// become positive when their best IOU reaches pos_threshold.
MatchResult match_anchors(std::span<const Box> anchors, std::span<const Box> gt_boxes,
                          std::span<const int> gt_labels, int num_classes,
                          double pos_threshold = 0.5);

/// Sets iou_hat from regressed boxes: IOU with the assigned gt for positives,
/// best IOU over all gts for negatives (0 when there are none).
void assign_iou_hat(MatchResult& match, std::span<const Box> regressed,
                    std::span<const Box> gt_boxes);

/// Keep-mask for the ODM: negatives whose ARM background probability exceeds
/// theta are dropped; positives are always kept. arm_logits is [anchors][2].
std::vector<uint8_t> filter_negatives(const MatchResult& match, std::span<const Real> arm_logits,
                                      double theta = 0.99);

/// Background probability of a 2-way logit pair.
double arm_background_prob(Real bg_logit, Real fg_logit);

/// All positives plus the highest-loss unfiltered negatives, capped at
/// ratio * |positives|. Ties break toward the lower anchor index.
SampleSelection ohem_select(std::span<const double> per_anchor_loss, const MatchResult& match,
                            double ratio = 3.0, std::span<const uint8_t> keep = {});

}  // namespace rdl
