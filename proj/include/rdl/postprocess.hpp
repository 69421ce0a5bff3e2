#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "rdl/detector.hpp"
#include "rdl/geometry.hpp"

namespace rdl {

struct Detection {
  Box box;  // normalized, or pixels once scaled for evaluation
  int label = 0;
  double score = 0.0;
};

struct PostprocessConfig {
  double score_threshold = 0.01;
  int top_k = 400;       // per class, before suppression
  int keep_top_k = 100;  // per image, after suppression
  double nms_threshold = 0.45;
  bool soft_nms = false;
  double soft_sigma = 0.5;
  double soft_score_floor = 0.01;
  double neg_theta = 0.99;
  Variances variances = kDefaultVariances;

  void validate() const;
};

/// Per-class candidates for one image (index 0 is empty). ODM deltas are
/// decoded against the ARM-refined anchors; anchors whose ARM background
/// probability exceeds neg_theta are skipped.
std::vector<std::vector<Detection>> decode_detections(const HeadOutputs& outputs, int image,
                                                      std::span<const Box> anchors,
                                                      const PostprocessConfig& config);

/// Greedy suppression of boxes overlapping a higher-scored one by more than
/// iou_threshold. Output is ordered by (score desc, input index asc).
std::vector<Detection> nms(std::span<const Detection> candidates, double iou_threshold);

/// Gaussian soft-NMS: scores decay by exp(-iou^2 / sigma); boxes below
/// score_floor are dropped. Output is in selection order.
std::vector<Detection> soft_nms(std::span<const Detection> candidates, double sigma, double score_floor);

/// decode -> per-class suppression -> top keep_top_k by score.
std::vector<Detection> postprocess(const HeadOutputs& outputs, int image, std::span<const Box> anchors,
                                   const PostprocessConfig& config);

/// Normalized detections to pixel coordinates of a width x height image.
std::vector<Detection> to_pixels(std::span<const Detection> dets, int width, int height);

// ---- COCO-style evaluation

/// Ground truth and detections of one image, both in pixels.
struct EvalImage {
  int64_t image_id = 0;
  std::vector<Box> gt_boxes;
  std::vector<int> gt_labels;
  std::vector<Detection> detections;
};

/// Average precision values; -1 marks an undefined entry (no ground truth).
struct EvalResult {
  double ap = -1, ap50 = -1, ap75 = -1;
  double ap_small = -1, ap_medium = -1, ap_large = -1;
  std::vector<double> class_ap;    // index 0 unused
  std::vector<double> class_ap50;  // index 0 unused
};

/// 101-point interpolated AP over IOU .50:.05:.95 with at most max_dets
/// detections per image and class. Throws on duplicate image ids.
EvalResult coco_map(std::span<const EvalImage> images, int num_classes, int max_dets = 100);

/// COCO results JSON: [{image_id, category_id, bbox [x,y,w,h], score}].
void write_coco_results(const std::filesystem::path& path, std::span<const EvalImage> images,
                        std::span<const int64_t> category_ids);

}  // namespace rdl
