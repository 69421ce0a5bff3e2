#include "rdl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace rdl {
namespace {

constexpr double kMinSide = 1e-6;
constexpr double kMaxLogScale = 10.0;

BoxDeltas to_deltas(std::span<const Real> v, size_t a) {
  return {v[4 * a], v[4 * a + 1], v[4 * a + 2], v[4 * a + 3]};
}

void store(std::span<Real> v, size_t a, const BoxDeltas& d, double scale) {
  v[4 * a] = static_cast<Real>(d.dx * scale);
  v[4 * a + 1] = static_cast<Real>(d.dy * scale);
  v[4 * a + 2] = static_cast<Real>(d.dw * scale);
  v[4 * a + 3] = static_cast<Real>(d.dh * scale);
}

Box with_min_side(const Box& b) {
  if (b.width() >= kMinSide && b.height() >= kMinSide) return b;
  return Box::from_center(b.cx(), b.cy(), std::max(b.width(), kMinSide),
                          std::max(b.height(), kMinSide));
}

// Log-softmax of one row, computed stably.
void log_softmax(std::span<const double> x, std::span<double> out) {
  const double m = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  const double lse = m + std::log(s);
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
}

void check_unit_interval(double v, const char* what) {
  if (!(v >= 0.0 && v <= 1.0)) {
    throw std::invalid_argument(std::string(what) + " must lie in [0, 1]");
  }
}

// Localization term for one anchor: value and d/d(deltas).
double loc_term(const Box& anchor, const BoxDeltas& pred, const Box& gt, bool use_giou,
                Variances v, BoxDeltas* grad) {
  if (use_giou) return giou_loss_deltas(anchor, pred, gt, v, grad);
  return smooth_l1(pred, encode(anchor, gt, v), grad);
}

}  // namespace

void LossHyper::validate() const {
  check_unit_interval(alpha, "alpha");
  if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("beta must lie in [0, 1)");
  if (!(gamma > 0.0)) throw std::invalid_argument("gamma must be positive");
  if (!(max_weight >= 1.0)) throw std::invalid_argument("max class weight W must be >= 1");
  for (double l : {lambda_arm_loc, lambda_arm_cls, lambda_odm_loc, lambda_odm_cls}) {
    if (!(l > 0.0)) throw std::invalid_argument("loss weights lambda must be positive");
  }
}

double smooth_l1(const BoxDeltas& pred, const BoxDeltas& target, BoxDeltas* grad) {
  const std::array<double, 4> d{pred.dx - target.dx, pred.dy - target.dy, pred.dw - target.dw,
                                pred.dh - target.dh};
  std::array<double, 4> g{};
  double loss = 0.0;
  for (int i = 0; i < 4; ++i) {
    const double a = std::abs(d[i]);
    if (a < 1.0) {
      loss += 0.5 * d[i] * d[i];
      g[i] = d[i];
    } else {
      loss += a - 0.5;
      g[i] = d[i] > 0.0 ? 1.0 : -1.0;
    }
  }
  if (grad) *grad = {g[0], g[1], g[2], g[3]};
  return loss;
}

double giou_loss(const Box& pred_in, const Box& target, std::array<double, 4>* grad) {
  validate_box(pred_in);
  validate_box(target);
  const Box p = with_min_side(pred_in);
  const bool clamped_w = pred_in.width() < kMinSide, clamped_h = pred_in.height() < kMinSide;

  const double ix1 = std::max(p.x1, target.x1), iy1 = std::max(p.y1, target.y1);
  const double ix2 = std::min(p.x2, target.x2), iy2 = std::min(p.y2, target.y2);
  const double iw = std::max(0.0, ix2 - ix1), ih = std::max(0.0, iy2 - iy1);
  const double inter = iw * ih;
  const double ap = p.area(), at = target.area();
  const double uni = ap + at - inter;
  const double ex1 = std::min(p.x1, target.x1), ey1 = std::min(p.y1, target.y1);
  const double ex2 = std::max(p.x2, target.x2), ey2 = std::max(p.y2, target.y2);
  const double ew = ex2 - ex1, eh = ey2 - ey1;
  const double enc = ew * eh;
  const double loss = 1.0 - (inter / uni - (enc - uni) / enc);

  if (grad) {
    // giou = I/U - 1 + U/C
    const double dI = 1.0 / uni;
    const double dU = -inter / (uni * uni) + 1.0 / enc;
    const double dC = -uni / (enc * enc);
    const double dI_total = dI - dU;  // U = Ap + At - I
    std::array<double, 4> dI_dp{};    // intersection wrt pred corners
    if (iw > 0.0 && ih > 0.0) {
      if (p.x1 > target.x1) dI_dp[0] = -ih;
      if (p.x2 < target.x2) dI_dp[2] = ih;
      if (p.y1 > target.y1) dI_dp[1] = -iw;
      if (p.y2 < target.y2) dI_dp[3] = iw;
    }
    const std::array<double, 4> dA_dp{-p.height(), -p.width(), p.height(), p.width()};
    std::array<double, 4> dC_dp{};
    if (p.x1 < target.x1) dC_dp[0] = -eh;
    if (p.x2 > target.x2) dC_dp[2] = eh;
    if (p.y1 < target.y1) dC_dp[1] = -ew;
    if (p.y2 > target.y2) dC_dp[3] = ew;
    for (int i = 0; i < 4; ++i) {
      const double dgiou = dI_total * dI_dp[i] + dU * dA_dp[i] + dC * dC_dp[i];
      (*grad)[i] = -dgiou;
    }
    if (clamped_w) (*grad)[0] = (*grad)[2] = 0.0;
    if (clamped_h) (*grad)[1] = (*grad)[3] = 0.0;
  }
  return loss;
}

double giou_loss_deltas(const Box& anchor, const BoxDeltas& d, const Box& target, Variances v,
                        BoxDeltas* grad) {
  const Box pred = decode(anchor, d, v);
  if (!grad) return giou_loss(pred, target);
  std::array<double, 4> gc{};
  const double loss = giou_loss(pred, target, &gc);
  const double aw = anchor.width(), ah = anchor.height();
  const bool w_live = d.dw * v.size < kMaxLogScale && pred.width() >= kMinSide;
  const bool h_live = d.dh * v.size < kMaxLogScale && pred.height() >= kMinSide;
  grad->dx = (gc[0] + gc[2]) * v.center * aw;
  grad->dy = (gc[1] + gc[3]) * v.center * ah;
  grad->dw = w_live ? (gc[2] - gc[0]) * 0.5 * pred.width() * v.size : 0.0;
  grad->dh = h_live ? (gc[3] - gc[1]) * 0.5 * pred.height() * v.size : 0.0;
  return loss;
}

ClassWeightTable class_weights(std::span<const int64_t> counts, double gamma, double max_weight) {
  if (counts.empty()) throw std::invalid_argument("class_weights: no foreground classes");
  if (!(gamma > 0.0)) throw std::invalid_argument("class_weights: gamma must be positive");
  if (!(max_weight >= 1.0)) throw std::invalid_argument("class_weights: W must be >= 1");
  for (size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] < 1) {
      throw std::invalid_argument("class_weights: class " + std::to_string(i + 1) +
                                  " has no boxes");
    }
  }
  const auto [mn, mx] = std::minmax_element(counts.begin(), counts.end());
  const double m_max = static_cast<double>(*mx);
  const double r_max_g = std::pow(m_max / static_cast<double>(*mn), gamma);
  ClassWeightTable t;
  t.w.assign(counts.size() + 1, 1.0);
  if (*mn == *mx) return t;
  const double scale = (max_weight - 1.0) / (r_max_g - 1.0);
  for (size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] == *mn) {
      t.w[i + 1] = max_weight;
    } else if (counts[i] == *mx) {
      t.w[i + 1] = 1.0;
    } else {
      const double r = m_max / static_cast<double>(counts[i]);
      t.w[i + 1] = scale * (std::pow(r, gamma) - 1.0) + 1.0;
    }
  }
  return t;
}

std::vector<double> one_hot(int t, int num_classes) {
  if (num_classes < 2) throw std::invalid_argument("one_hot: need at least two classes");
  if (t < 0 || t >= num_classes) throw std::invalid_argument("one_hot: label out of range");
  std::vector<double> y(static_cast<size_t>(num_classes), 0.0);
  y[t] = 1.0;
  return y;
}

std::vector<double> soft_labels(int t, double iou_hat, double alpha, int num_classes) {
  check_unit_interval(alpha, "soft_labels: alpha");
  check_unit_interval(iou_hat, "soft_labels: iou_hat");
  std::vector<double> y = one_hot(t, num_classes);
  const double key = t > 0 ? 1.0 - alpha * (1.0 - iou_hat) : 1.0 - alpha * iou_hat;
  const double rest = (1.0 - key) / (num_classes - 1);
  std::fill(y.begin(), y.end(), rest);
  y[t] = key;
  return y;
}

double anchor_weight(int t, double iou_hat, double beta) {
  if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("anchor_weight: beta in [0, 1)");
  check_unit_interval(iou_hat, "anchor_weight: iou_hat");
  if (t <= 0) return 1.0;
  return 1.0 / (1.0 + beta * (iou_hat - 1.0));
}

double weighted_kl(std::span<const double> x, std::span<const double> y, double eta,
                   std::span<const double> w, std::span<double> grad) {
  const size_t K = x.size();
  if (y.size() != K || w.size() != K || (!grad.empty() && grad.size() != K)) {
    throw std::invalid_argument("weighted_kl: length mismatch");
  }
  double logp_buf[256];
  std::vector<double> heap;
  double* logp = logp_buf;
  if (K > 256) {
    heap.resize(K);
    logp = heap.data();
  }
  log_softmax(x, {logp, K});
  double loss = 0.0, wy_sum = 0.0;
  for (size_t i = 0; i < K; ++i) {
    const double wy = w[i] * y[i];
    wy_sum += wy;
    if (y[i] > 0.0) loss += wy * (std::log(y[i]) - logp[i]);
  }
  if (!grad.empty()) {
    for (size_t i = 0; i < K; ++i) grad[i] = eta * (std::exp(logp[i]) * wy_sum - w[i] * y[i]);
  }
  return eta * loss;
}

double weighted_kl_cls_loss(std::span<const double> logits, std::span<const double> y,
                            std::span<const double> eta, std::span<const double> w,
                            int num_classes, std::vector<double>* grad) {
  const size_t K = static_cast<size_t>(num_classes);
  if (num_classes < 2 || logits.size() % K != 0) {
    throw std::invalid_argument("weighted_kl_cls_loss: logits are not [N][K]");
  }
  const size_t N = logits.size() / K;
  if (y.size() != N * K || eta.size() != N || w.size() != K) {
    throw std::invalid_argument("weighted_kl_cls_loss: shape mismatch");
  }
  for (size_t j = 0; j < N; ++j) {
    double s = 0.0;
    for (size_t i = 0; i < K; ++i) s += y[j * K + i];
    if (std::abs(s - 1.0) > 1e-4) {
      throw std::invalid_argument("weighted_kl_cls_loss: label row " + std::to_string(j) +
                                  " does not sum to 1");
    }
  }
  if (grad) grad->assign(N * K, 0.0);
  if (N == 0) return 0.0;
  double total = 0.0;
  for (size_t j = 0; j < N; ++j) {
    std::span<double> g;
    if (grad) g = std::span<double>(grad->data() + j * K, K);
    total += weighted_kl(logits.subspan(j * K, K), y.subspan(j * K, K), eta[j], w, g);
  }
  if (grad) {
    for (double& g : *grad) g /= static_cast<double>(N);
  }
  return total / static_cast<double>(N);
}

double total_loss_fixed(const LossBreakdown& b, const LossHyper& h) {
  return h.lambda_arm_loc * b.arm_loc + h.lambda_arm_cls * b.arm_cls +
         h.lambda_odm_loc * b.odm_loc + h.lambda_odm_cls * b.odm_cls;
}

double total_loss_multitask(const LossBreakdown& b, const UncertaintyParams& u, MultitaskGrad* grad) {
  const auto terms = b.terms();
  // localization terms carry 1/(2 sigma^2), classification terms 1/sigma^2
  constexpr std::array<double, 4> kFactor{0.5, 1.0, 0.5, 1.0};
  double total = 0.0;
  for (int k = 0; k < 4; ++k) {
    const double inv = std::exp(-u.log_var[k]);
    total += kFactor[k] * terms[k] * inv + 0.5 * u.log_var[k];
    if (grad) {
      grad->term_scale[k] = kFactor[k] * inv;
      grad->d_log_var[k] = -kFactor[k] * terms[k] * inv + 0.5;
    }
  }
  return total;
}

DetectionLossResult detection_losses(const HeadOutputs& out, std::span<const Box> anchors,
                                     std::span<const ImageTargets> targets,
                                     const DetectionLossConfig& cfg) {
  const int B = out.batch, A = out.anchors, K = out.classes;
  if (static_cast<int>(anchors.size()) != A) {
    throw std::invalid_argument("detection_losses: anchor count does not match head outputs");
  }
  if (static_cast<int>(targets.size()) != B) {
    throw std::invalid_argument("detection_losses: one target set per image required");
  }
  cfg.hyper.validate();
  const bool weighted = cfg.flags.class_weights;
  if (weighted && static_cast<int>(cfg.weights.w.size()) != K) {
    throw std::invalid_argument("detection_losses: class weight table has wrong length");
  }
  const std::vector<double> unit_w(static_cast<size_t>(K), 1.0);
  const std::span<const double> w_odm = weighted ? std::span<const double>(cfg.weights.w) : unit_w;
  const std::array<double, 2> w_arm{1.0, 1.0};
  const Variances v = cfg.variances;

  DetectionLossResult r;
  r.grad = HeadOutputs(B, A, K);
  double arm_loc_sum = 0.0, arm_cls_sum = 0.0, odm_loc_sum = 0.0, odm_cls_sum = 0.0;
  int arm_pos = 0, odm_pos = 0, arm_sel = 0, odm_sel = 0;
  // Per-anchor gradients are stored unnormalized and scaled once counts are known.
  std::vector<double> arm_cls_loss(A), odm_cls_loss(A);
  std::vector<double> arm_cls_grad(size_t(A) * 2), odm_cls_grad(size_t(A) * K);
  std::vector<double> xbuf(K);
  std::vector<Box> refined(A);

  for (int n = 0; n < B; ++n) {
    const ImageTargets& tg = targets[n];
    const auto arm_loc = out.arm_loc_of(n), arm_cls = out.arm_cls_of(n);
    const auto odm_loc = out.odm_loc_of(n), odm_cls = out.odm_cls_of(n);
    std::span<Real> g_arm_loc(r.grad.arm_loc.data() + size_t(n) * A * 4, size_t(A) * 4);
    std::span<Real> g_arm_cls(r.grad.arm_cls.data() + size_t(n) * A * 2, size_t(A) * 2);
    std::span<Real> g_odm_loc(r.grad.odm_loc.data() + size_t(n) * A * 4, size_t(A) * 4);
    std::span<Real> g_odm_cls(r.grad.odm_cls.data() + size_t(n) * A * K, size_t(A) * K);

    // ---- ARM: class-agnostic matching on the raw anchors
    const std::vector<int> agnostic(tg.boxes.size(), 1);
    const MatchResult arm_match = match_anchors(anchors, tg.boxes, agnostic, 2, cfg.pos_threshold);
    for (int a = 0; a < A; ++a) {
      if (!arm_match.positive(a)) continue;
      BoxDeltas g;
      arm_loc_sum += loc_term(anchors[a], to_deltas(arm_loc, a), tg.boxes[arm_match.gt_index[a]],
                              cfg.flags.giou, v, &g);
      store(g_arm_loc, a, g, 1.0);
      ++arm_pos;
    }
    for (int a = 0; a < A; ++a) {
      const double x[2] = {arm_cls[2 * a], arm_cls[2 * a + 1]};
      const double y[2] = {arm_match.positive(a) ? 0.0 : 1.0, arm_match.positive(a) ? 1.0 : 0.0};
      arm_cls_loss[a] = weighted_kl(x, y, 1.0, w_arm, {arm_cls_grad.data() + 2 * a, 2});
    }
    const SampleSelection arm_sel_idx = ohem_select(arm_cls_loss, arm_match, cfg.ohem_ratio);
    for (const auto* set : {&arm_sel_idx.positives, &arm_sel_idx.negatives}) {
      for (int a : *set) {
        arm_cls_sum += arm_cls_loss[a];
        g_arm_cls[2 * a] = static_cast<Real>(arm_cls_grad[2 * a]);
        g_arm_cls[2 * a + 1] = static_cast<Real>(arm_cls_grad[2 * a + 1]);
        ++arm_sel;
      }
    }

    // ---- ODM: K-way matching on the refined anchors
    for (int a = 0; a < A; ++a) refined[a] = with_min_side(decode(anchors[a], to_deltas(arm_loc, a), v));
    MatchResult odm_match = match_anchors(refined, tg.boxes, tg.labels, K, cfg.pos_threshold);
    assign_iou_hat(odm_match, refined, tg.boxes);
    const std::vector<uint8_t> keep = filter_negatives(odm_match, arm_cls, cfg.neg_theta);
    for (int a = 0; a < A; ++a) {
      if (!odm_match.positive(a)) continue;
      BoxDeltas g;
      odm_loc_sum += loc_term(refined[a], to_deltas(odm_loc, a), tg.boxes[odm_match.gt_index[a]],
                              cfg.flags.giou, v, &g);
      store(g_odm_loc, a, g, 1.0);
      ++odm_pos;
    }
    for (int a = 0; a < A; ++a) {
      if (!keep[a]) {
        odm_cls_loss[a] = 0.0;
        continue;
      }
      const int t = odm_match.label[a];
      std::vector<double> y;
      double eta = 1.0;
      if (cfg.flags.iou_guided) {
        y = soft_labels(t, odm_match.iou_hat[a], cfg.hyper.alpha, K);
        eta = anchor_weight(t, odm_match.iou_hat[a], cfg.hyper.beta);
      } else {
        y = one_hot(t, K);
      }
      for (int i = 0; i < K; ++i) xbuf[i] = odm_cls[size_t(a) * K + i];
      odm_cls_loss[a] = weighted_kl(xbuf, y, eta, w_odm, {odm_cls_grad.data() + size_t(a) * K, size_t(K)});
    }
    const SampleSelection odm_sel_idx = ohem_select(odm_cls_loss, odm_match, cfg.ohem_ratio, keep);
    for (const auto* set : {&odm_sel_idx.positives, &odm_sel_idx.negatives}) {
      for (int a : *set) {
        odm_cls_sum += odm_cls_loss[a];
        for (int i = 0; i < K; ++i) {
          g_odm_cls[size_t(a) * K + i] = static_cast<Real>(odm_cls_grad[size_t(a) * K + i]);
        }
        ++odm_sel;
      }
    }
  }

  auto normalize = [](std::vector<Real>& g, int count) {
    if (count == 0) return;
    const Real s = 1.0f / static_cast<Real>(count);
    for (Real& x : g) x *= s;
  };
  normalize(r.grad.arm_loc, arm_pos);
  normalize(r.grad.arm_cls, arm_sel);
  normalize(r.grad.odm_loc, odm_pos);
  normalize(r.grad.odm_cls, odm_sel);
  r.breakdown.arm_loc = arm_pos ? arm_loc_sum / arm_pos : 0.0;
  r.breakdown.arm_cls = arm_sel ? arm_cls_sum / arm_sel : 0.0;
  r.breakdown.odm_loc = odm_pos ? odm_loc_sum / odm_pos : 0.0;
  r.breakdown.odm_cls = odm_sel ? odm_cls_sum / odm_sel : 0.0;
  r.arm_positives = arm_pos;
  r.odm_positives = odm_pos;
  return r;
}

void combine_losses(DetectionLossResult& r, const DetectionLossConfig& cfg,
                    const UncertaintyParams& u, std::array<double, 4>* d_log_var) {
  std::array<double, 4> scale;
  if (cfg.flags.multitask) {
    MultitaskGrad g;
    r.breakdown.total = total_loss_multitask(r.breakdown, u, &g);
    scale = g.term_scale;
    if (d_log_var) *d_log_var = g.d_log_var;
  } else {
    const LossHyper& h = cfg.hyper;
    r.breakdown.total = total_loss_fixed(r.breakdown, h);
    scale = {h.lambda_arm_loc, h.lambda_arm_cls, h.lambda_odm_loc, h.lambda_odm_cls};
    if (d_log_var) d_log_var->fill(0.0);
  }
  std::array<std::vector<Real>*, 4> grads{&r.grad.arm_loc, &r.grad.arm_cls, &r.grad.odm_loc,
                                           &r.grad.odm_cls};
  for (int k = 0; k < 4; ++k) {
    if (scale[k] == 1.0) continue;
    const Real s = static_cast<Real>(scale[k]);
    for (Real& x : *grads[k]) x *= s;
  }
}

}  // namespace rdl
