#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rdl/assignment.hpp"
#include "rdl/detector.hpp"
#include "rdl/geometry.hpp"

namespace rdl {

struct LossHyper {
  double alpha = 0.25;      // soft-label strength
  double beta = 0.90;       // anchor-weight strength
  double gamma = 0.75;      // class-weight exponent
  double max_weight = 10.0; // W, weight of the rarest class
  double lambda_arm_loc = 1.0;
  double lambda_arm_cls = 1.0;
  double lambda_odm_loc = 1.0;
  double lambda_odm_cls = 1.0;

  void validate() const;
};

/// Independent strategy toggles; every combination is a valid configuration.
struct LossFlags {
  bool giou = false;
  bool iou_guided = false;
  bool class_weights = false;
  bool multitask = false;
};

/// w[0] is the background weight (always 1); w[i] belongs to class i.
struct ClassWeightTable {
  std::vector<double> w;

  static ClassWeightTable uniform(int num_classes) {
    return {std::vector<double>(static_cast<size_t>(num_classes), 1.0)};
  }
};

struct UncertaintyParams {
  std::array<double, 4> log_var{0.0, 0.0, 0.0, 0.0};  // arm_loc, arm_cls, odm_loc, odm_cls
};

struct LossBreakdown {
  double arm_loc = 0.0;
  double arm_cls = 0.0;
  double odm_loc = 0.0;
  double odm_cls = 0.0;
  double total = 0.0;

  std::array<double, 4> terms() const { return {arm_loc, arm_cls, odm_loc, odm_cls}; }
};

// ---- component losses; optional gradient outputs are overwritten, not accumulated

double smooth_l1(const BoxDeltas& pred, const BoxDeltas& target, BoxDeltas* grad = nullptr);

/// 1 - GIOU. Gradient is with respect to the prediction's corners (x1, y1, x2, y2).
double giou_loss(const Box& pred, const Box& target, std::array<double, 4>* grad = nullptr);

/// GIOU loss of decode(anchor, deltas) against target, differentiated through
/// the decode. Predicted sides are clamped to at least 1e-6.
double giou_loss_deltas(const Box& anchor, const BoxDeltas& deltas, const Box& target,
                        Variances v = kDefaultVariances, BoxDeltas* grad = nullptr);

/// Dataset-aware weights from foreground box counts (counts[i] is class i+1).
ClassWeightTable class_weights(std::span<const int64_t> counts, double gamma, double max_weight);

/// IOU-guided soft label for hard label t over K classes.
std::vector<double> soft_labels(int t, double iou_hat, double alpha, int num_classes);
std::vector<double> one_hot(int t, int num_classes);

double anchor_weight(int t, double iou_hat, double beta);

/// eta * sum_i w_i y_i log(y_i / softmax(x)_i) for one anchor; grad is d/dx.
double weighted_kl(std::span<const double> logits, std::span<const double> y, double eta,
                   std::span<const double> w, std::span<double> grad = {});

/// Mean of weighted_kl over N anchors laid out [N][K]. Rejects labels whose
/// rows do not sum to 1 within 1e-4.
double weighted_kl_cls_loss(std::span<const double> logits, std::span<const double> y,
                            std::span<const double> eta, std::span<const double> w, int num_classes,
                            std::vector<double>* grad = nullptr);

double total_loss_fixed(const LossBreakdown& b, const LossHyper& h);

/// Coefficient each term is multiplied by, and d total / d log_var.
struct MultitaskGrad {
  std::array<double, 4> term_scale{};
  std::array<double, 4> d_log_var{};
};

double total_loss_multitask(const LossBreakdown& b, const UncertaintyParams& u,
                            MultitaskGrad* grad = nullptr);

// ---- batch-level detection losses

struct ImageTargets {
  std::vector<Box> boxes;  // normalized
  std::vector<int> labels; // 1..K-1
};

struct DetectionLossConfig {
  LossHyper hyper;
  LossFlags flags;
  ClassWeightTable weights;  // used when flags.class_weights is set
  double pos_threshold = 0.5;
  double neg_theta = 0.99;
  double ohem_ratio = 3.0;
  Variances variances = kDefaultVariances;
};

struct DetectionLossResult {
  LossBreakdown breakdown;  // total left at 0; see combine_losses
  HeadOutputs grad;         // d term / d output, each array from its own term
  int arm_positives = 0;
  int odm_positives = 0;
};

/// Evaluates the four loss terms (ARM and ODM, localization and
/// classification) for a batch of head outputs.
DetectionLossResult detection_losses(const HeadOutputs& outputs, std::span<const Box> anchors,
                                     std::span<const ImageTargets> targets,
                                     const DetectionLossConfig& config);

/// Fills breakdown.total and scales the per-term gradients in place.
/// Multitask mode also writes d total / d log_var.
void combine_losses(DetectionLossResult& result, const DetectionLossConfig& config,
                    const UncertaintyParams& uncertainty,
                    std::array<double, 4>* d_log_var = nullptr);

}  // namespace rdl
