#include "rdl/assignment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace rdl {

int MatchResult::num_positives() const {
  return static_cast<int>(std::count_if(label.begin(), label.end(), [](int l) { return l > 0; }));
}

MatchResult match_anchors(std::span<const Box> anchors, std::span<const Box> gt_boxes,
                          std::span<const int> gt_labels, int num_classes, double pos_threshold) {
  if (anchors.empty()) throw std::invalid_argument("match_anchors: no anchors");
  if (gt_boxes.size() != gt_labels.size()) {
    throw std::invalid_argument("match_anchors: boxes and labels differ in length");
  }
  for (int l : gt_labels) {
    if (l < 1 || l >= num_classes) {
      throw std::invalid_argument("match_anchors: label " + std::to_string(l) + " outside [1," +
                                  std::to_string(num_classes - 1) + "]");
    }
  }
  const size_t A = anchors.size(), G = gt_boxes.size();
  MatchResult m;
  m.label.assign(A, 0);
  m.gt_index.assign(A, kNoMatch);
  m.iou_pre.assign(A, 0.0);
  m.iou_hat.assign(A, 0.0);
  if (G == 0) return m;

  std::vector<double> overlaps(A * G);
  for (size_t a = 0; a < A; ++a) {
    for (size_t g = 0; g < G; ++g) overlaps[a * G + g] = iou(anchors[a], gt_boxes[g]);
  }
  // Best gt per anchor; strict > keeps the lowest gt index on ties.
  std::vector<int> best_gt(A, 0);
  for (size_t a = 0; a < A; ++a) {
    double best = -1.0;
    for (size_t g = 0; g < G; ++g) {
      if (overlaps[a * G + g] > best) {
        best = overlaps[a * G + g];
        best_gt[a] = static_cast<int>(g);
      }
    }
    m.iou_pre[a] = best;
    if (best >= pos_threshold) {
      m.gt_index[a] = best_gt[a];
      m.label[a] = gt_labels[best_gt[a]];
    }
  }
  // Bipartite step: every gt keeps its best anchor, processed in gt order so a
  // later gt cannot steal an anchor already claimed by an earlier one.
  std::vector<uint8_t> claimed(A, 0);
  for (size_t g = 0; g < G; ++g) {
    double best = -1.0;
    size_t best_a = A;
    for (size_t a = 0; a < A; ++a) {
      if (claimed[a]) continue;
      if (overlaps[a * G + g] > best) {
        best = overlaps[a * G + g];
        best_a = a;
      }
    }
    if (best_a == A || best <= 0.0) continue;
    claimed[best_a] = 1;
    m.gt_index[best_a] = static_cast<int>(g);
    m.label[best_a] = gt_labels[g];
    m.iou_pre[best_a] = best;
  }
  return m;
}

void assign_iou_hat(MatchResult& match, std::span<const Box> regressed,
                    std::span<const Box> gt_boxes) {
  if (regressed.size() != match.size()) {
    throw std::invalid_argument("assign_iou_hat: one regressed box per anchor required");
  }
  for (size_t a = 0; a < match.size(); ++a) {
    if (match.positive(a)) {
      match.iou_hat[a] = iou(regressed[a], gt_boxes[match.gt_index[a]]);
    } else {
      double best = 0.0;
      for (const Box& g : gt_boxes) best = std::max(best, iou(regressed[a], g));
      match.iou_hat[a] = best;
    }
  }
}

double arm_background_prob(Real bg_logit, Real fg_logit) {
  // softmax over two logits = logistic of the difference
  return 1.0 / (1.0 + std::exp(static_cast<double>(fg_logit) - bg_logit));
}

std::vector<uint8_t> filter_negatives(const MatchResult& match, std::span<const Real> arm_logits,
                                      double theta) {
  if (!(theta > 0.0 && theta <= 1.0)) {
    throw std::invalid_argument("filter_negatives: theta must lie in (0, 1]");
  }
  if (arm_logits.size() != match.size() * 2) {
    throw std::invalid_argument("filter_negatives: expected two ARM logits per anchor");
  }
  std::vector<uint8_t> keep(match.size(), 1);
  for (size_t a = 0; a < match.size(); ++a) {
    if (match.positive(a)) continue;
    if (arm_background_prob(arm_logits[2 * a], arm_logits[2 * a + 1]) > theta) keep[a] = 0;
  }
  return keep;
}

SampleSelection ohem_select(std::span<const double> per_anchor_loss, const MatchResult& match,
                            double ratio, std::span<const uint8_t> keep) {
  if (ratio < 0.0 || !std::isfinite(ratio)) {
    throw std::invalid_argument("ohem_select: ratio must be a finite non-negative number");
  }
  if (per_anchor_loss.size() != match.size()) {
    throw std::invalid_argument("ohem_select: one loss value per anchor required");
  }
  if (!keep.empty() && keep.size() != match.size()) {
    throw std::invalid_argument("ohem_select: keep mask length mismatch");
  }
  SampleSelection sel;
  std::vector<int> candidates;
  for (size_t a = 0; a < match.size(); ++a) {
    if (match.positive(a)) {
      sel.positives.push_back(static_cast<int>(a));
    } else if (keep.empty() || keep[a]) {
      candidates.push_back(static_cast<int>(a));
    }
  }
  size_t quota;
  if (sel.positives.empty()) {
    quota = ratio > 0.0 ? std::max<size_t>(1, static_cast<size_t>(std::floor(ratio))) : 0;
  } else {
    quota = static_cast<size_t>(std::floor(ratio * sel.positives.size()));
  }
  quota = std::min(quota, candidates.size());
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](int a, int b) { return per_anchor_loss[a] > per_anchor_loss[b]; });
  sel.negatives.assign(candidates.begin(), candidates.begin() + static_cast<long>(quota));
  std::sort(sel.negatives.begin(), sel.negatives.end());
  return sel;
}

}  // namespace rdl
