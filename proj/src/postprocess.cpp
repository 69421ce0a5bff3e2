#include "rdl/postprocess.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "rdl/assignment.hpp"

namespace rdl {

void PostprocessConfig::validate() const {
  if (!(nms_threshold > 0.0 && nms_threshold <= 1.0)) throw std::invalid_argument("nms threshold must be in (0,1]");
  if (!(soft_sigma > 0.0)) throw std::invalid_argument("soft-nms sigma must be positive");
  if (top_k < 1 || keep_top_k < 1) throw std::invalid_argument("top_k and keep_top_k must be positive");
}

std::vector<std::vector<Detection>> decode_detections(const HeadOutputs& o, int image, std::span<const Box> anchors,
                                                      const PostprocessConfig& cfg) {
  if (image < 0 || image >= o.batch) throw std::out_of_range("decode_detections: image index");
  if (static_cast<int>(anchors.size()) != o.anchors) throw std::invalid_argument("decode_detections: anchor count");
  const int A = o.anchors, K = o.classes;
  std::vector<std::vector<Detection>> out(static_cast<size_t>(K));
  const size_t base = static_cast<size_t>(image) * A;
  std::vector<double> p(static_cast<size_t>(K));
  for (int a = 0; a < A; ++a) {
    const Real* arm_cls = o.arm_cls.data() + (base + a) * 2;
    if (arm_background_prob(arm_cls[0], arm_cls[1]) > cfg.neg_theta) continue;
    const Real* x = o.odm_cls.data() + (base + a) * K;
    const double mx = *std::max_element(x, x + K);
    double z = 0.0;
    for (int k = 0; k < K; ++k) z += p[k] = std::exp(double(x[k]) - mx);
    bool any = false;
    for (int k = 1; k < K; ++k) any = any || p[k] / z > cfg.score_threshold;
    if (!any) continue;
    const Real* al = o.arm_loc.data() + (base + a) * 4;
    const Real* ol = o.odm_loc.data() + (base + a) * 4;
    const Box refined = decode(anchors[a], {al[0], al[1], al[2], al[3]}, cfg.variances);
    const Box box = clip_unit(decode(refined, {ol[0], ol[1], ol[2], ol[3]}, cfg.variances));
    for (int k = 1; k < K; ++k) {
      if (p[k] / z > cfg.score_threshold) out[k].push_back({box, k, p[k] / z});
    }
  }
  for (auto& list : out) {
    if (static_cast<int>(list.size()) > cfg.top_k) {
      std::stable_sort(list.begin(), list.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
      list.resize(static_cast<size_t>(cfg.top_k));
    }
  }
  return out;
}

namespace {

std::vector<size_t> score_order(std::span<const Detection> c) {
  std::vector<size_t> idx(c.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return c[a].score > c[b].score; });
  return idx;
}

}  // namespace

std::vector<Detection> nms(std::span<const Detection> candidates, double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) throw std::invalid_argument("nms threshold must be in (0,1]");
  std::vector<Detection> kept;
  for (size_t i : score_order(candidates)) {
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (iou(k.box, candidates[i].box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(candidates[i]);
  }
  return kept;
}

std::vector<Detection> soft_nms(std::span<const Detection> candidates, double sigma, double score_floor) {
  if (!(sigma > 0.0)) throw std::invalid_argument("soft-nms sigma must be positive");
  std::vector<Detection> pool;
  for (size_t i : score_order(candidates)) {
    if (candidates[i].score >= score_floor) pool.push_back(candidates[i]);
  }
  std::vector<Detection> out;
  while (!pool.empty()) {
    size_t best = 0;
    for (size_t i = 1; i < pool.size(); ++i) {
      if (pool[i].score > pool[best].score) best = i;
    }
    const Detection pick = pool[best];
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(best));
    out.push_back(pick);
    std::vector<Detection> next;
    next.reserve(pool.size());
    for (Detection d : pool) {
      const double o = iou(pick.box, d.box);
      d.score *= std::exp(-o * o / sigma);
      if (d.score >= score_floor) next.push_back(d);
    }
    pool = std::move(next);
  }
  return out;
}

std::vector<Detection> postprocess(const HeadOutputs& outputs, int image, std::span<const Box> anchors,
                                   const PostprocessConfig& cfg) {
  cfg.validate();
  std::vector<Detection> all;
  for (const auto& list : decode_detections(outputs, image, anchors, cfg)) {
    if (list.empty()) continue;
    const auto kept = cfg.soft_nms ? soft_nms(list, cfg.soft_sigma, cfg.soft_score_floor) : nms(list, cfg.nms_threshold);
    all.insert(all.end(), kept.begin(), kept.end());
  }
  std::stable_sort(all.begin(), all.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (static_cast<int>(all.size()) > cfg.keep_top_k) all.resize(static_cast<size_t>(cfg.keep_top_k));
  return all;
}

std::vector<Detection> to_pixels(std::span<const Detection> dets, int width, int height) {
  std::vector<Detection> out(dets.begin(), dets.end());
  for (Detection& d : out) d.box = {d.box.x1 * width, d.box.y1 * height, d.box.x2 * width, d.box.y2 * height};
  return out;
}

// ---- evaluation

namespace {

constexpr int kThresholds = 10;
constexpr int kRecallPoints = 101;
constexpr std::array<std::array<double, 2>, 4> kAreaRanges{
    {{0.0, 1e10}, {0.0, 32.0 * 32.0}, {32.0 * 32.0, 96.0 * 96.0}, {96.0 * 96.0, 1e10}}};

double threshold(int t) { return 0.5 + 0.05 * t; }

struct Accumulator {
  std::vector<double> scores;
  std::vector<std::array<bool, kThresholds>> matched;
  std::vector<std::array<bool, kThresholds>> ignored;
  int64_t num_gt = 0;
};

// Matching of one image / class / area range, following the reference
// evaluation: non-ignored gts are preferred, crowd regions are not modeled.
void evaluate_image(const std::vector<Box>& gts, const std::vector<Detection>& dets, std::array<double, 2> range,
                    Accumulator& acc) {
  auto outside = [&](const Box& b) { return b.area() < range[0] || b.area() > range[1]; };
  std::vector<size_t> gorder(gts.size());
  std::iota(gorder.begin(), gorder.end(), 0);
  std::stable_sort(gorder.begin(), gorder.end(),
                   [&](size_t a, size_t b) { return !outside(gts[a]) && outside(gts[b]); });
  std::vector<bool> gt_ignore(gts.size());
  for (size_t g = 0; g < gts.size(); ++g) {
    gt_ignore[g] = outside(gts[gorder[g]]);
    if (!gt_ignore[g]) ++acc.num_gt;
  }
  std::vector<std::vector<double>> ious(dets.size(), std::vector<double>(gts.size()));
  for (size_t d = 0; d < dets.size(); ++d) {
    for (size_t g = 0; g < gts.size(); ++g) ious[d][g] = iou(dets[d].box, gts[gorder[g]]);
  }
  std::vector<std::array<bool, kThresholds>> dtm(dets.size()), dtig(dets.size());
  for (int t = 0; t < kThresholds; ++t) {
    std::vector<bool> gtm(gts.size(), false);
    for (size_t d = 0; d < dets.size(); ++d) {
      double best = std::min(threshold(t), 1.0 - 1e-10);
      int m = -1;
      for (size_t g = 0; g < gts.size(); ++g) {
        if (gtm[g]) continue;
        if (m > -1 && !gt_ignore[m] && gt_ignore[g]) break;
        if (ious[d][g] < best) continue;
        best = ious[d][g];
        m = static_cast<int>(g);
      }
      dtm[d][t] = m >= 0;
      dtig[d][t] = m >= 0 ? bool(gt_ignore[m]) : outside(dets[d].box);
      if (m >= 0) gtm[m] = true;
    }
  }
  for (size_t d = 0; d < dets.size(); ++d) {
    acc.scores.push_back(dets[d].score);
    acc.matched.push_back(dtm[d]);
    acc.ignored.push_back(dtig[d]);
  }
}

// 101-point interpolated precision per threshold; empty when no gt.
std::vector<double> accumulate(const Accumulator& acc) {
  if (acc.num_gt == 0) return {};
  std::vector<size_t> order(acc.scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return acc.scores[a] > acc.scores[b]; });
  std::vector<double> ap(kThresholds, 0.0);
  for (int t = 0; t < kThresholds; ++t) {
    std::vector<double> rc, pr;
    double tp = 0, fp = 0;
    for (size_t i : order) {
      if (acc.ignored[i][t]) continue;
      (acc.matched[i][t] ? tp : fp) += 1;
      rc.push_back(tp / double(acc.num_gt));
      pr.push_back(tp / (tp + fp + std::numeric_limits<double>::epsilon()));
    }
    for (size_t i = pr.size(); i-- > 1;) pr[i - 1] = std::max(pr[i - 1], pr[i]);
    double sum = 0.0;
    for (int r = 0; r < kRecallPoints; ++r) {
      const double level = r / 100.0;
      const auto it = std::lower_bound(rc.begin(), rc.end(), level);
      if (it != rc.end()) sum += pr[static_cast<size_t>(it - rc.begin())];
    }
    ap[t] = sum / kRecallPoints;
  }
  return ap;
}

}  // namespace

EvalResult coco_map(std::span<const EvalImage> images, int num_classes, int max_dets) {
  if (num_classes < 2) throw std::invalid_argument("coco_map: need at least one foreground class");
  std::set<int64_t> ids;
  for (const auto& im : images) {
    if (!ids.insert(im.image_id).second) throw std::invalid_argument("coco_map: duplicate image id");
    if (im.gt_boxes.size() != im.gt_labels.size()) throw std::invalid_argument("coco_map: gt boxes/labels mismatch");
  }
  EvalResult res;
  res.class_ap.assign(static_cast<size_t>(num_classes), -1.0);
  res.class_ap50.assign(static_cast<size_t>(num_classes), -1.0);
  // [area][class] -> per-threshold AP
  std::array<std::vector<std::vector<double>>, 4> table;
  for (auto& t : table) t.resize(static_cast<size_t>(num_classes));

  for (int k = 1; k < num_classes; ++k) {
    std::vector<std::vector<Box>> gts(images.size());
    std::vector<std::vector<Detection>> dets(images.size());
    for (size_t i = 0; i < images.size(); ++i) {
      for (size_t g = 0; g < images[i].gt_boxes.size(); ++g) {
        if (images[i].gt_labels[g] == k) gts[i].push_back(images[i].gt_boxes[g]);
      }
      for (const Detection& d : images[i].detections) {
        if (d.label == k) dets[i].push_back(d);
      }
      std::stable_sort(dets[i].begin(), dets[i].end(),
                       [](const Detection& a, const Detection& b) { return a.score > b.score; });
      if (static_cast<int>(dets[i].size()) > max_dets) dets[i].resize(static_cast<size_t>(max_dets));
    }
    for (int a = 0; a < 4; ++a) {
      Accumulator acc;
      for (size_t i = 0; i < images.size(); ++i) {
        if (gts[i].empty() && dets[i].empty()) continue;
        evaluate_image(gts[i], dets[i], kAreaRanges[a], acc);
      }
      table[a][k] = accumulate(acc);
    }
    if (!table[0][k].empty()) {
      res.class_ap[k] = std::accumulate(table[0][k].begin(), table[0][k].end(), 0.0) / kThresholds;
      res.class_ap50[k] = table[0][k][0];
    }
  }

  auto summarize = [&](int area, int t) {
    double sum = 0.0;
    int n = 0;
    for (int k = 1; k < num_classes; ++k) {
      const auto& ap = table[area][k];
      if (ap.empty()) continue;
      if (t >= 0) {
        sum += ap[t];
        ++n;
      } else {
        for (double v : ap) sum += v;
        n += kThresholds;
      }
    }
    return n == 0 ? -1.0 : sum / n;
  };
  res.ap = summarize(0, -1);
  res.ap50 = summarize(0, 0);
  res.ap75 = summarize(0, 5);
  res.ap_small = summarize(1, -1);
  res.ap_medium = summarize(2, -1);
  res.ap_large = summarize(3, -1);
  return res;
}

void write_coco_results(const std::filesystem::path& path, std::span<const EvalImage> images,
                        std::span<const int64_t> category_ids) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& im : images) {
    for (const Detection& d : im.detections) {
      if (d.label < 1 || d.label > static_cast<int>(category_ids.size())) {
        throw std::invalid_argument("write_coco_results: label without a category");
      }
      out.push_back({{"image_id", im.image_id},
                     {"category_id", category_ids[static_cast<size_t>(d.label - 1)]},
                     {"bbox", {d.box.x1, d.box.y1, d.box.width(), d.box.height()}},
                     {"score", d.score}});
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << out.dump() << '\n';
}

}  // namespace rdl
