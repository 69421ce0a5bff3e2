#include "rdl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>

#include <fmt/format.h>
#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace rdl {

namespace fs = std::filesystem;
using nlohmann::json;

int64_t ClassStats::max_count() const {
  validate();
  return *std::max_element(counts.begin(), counts.end());
}

int64_t ClassStats::min_count() const {
  validate();
  return *std::min_element(counts.begin(), counts.end());
}

void ClassStats::validate() const {
  if (counts.empty()) throw std::invalid_argument("class stats: no foreground classes");
  for (size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] < 1) {
      throw std::invalid_argument(fmt::format("class stats: class {} has no labeled boxes", i + 1));
    }
  }
}

ClassStats CocoDataset::stats() const {
  ClassStats s;
  s.counts.assign(category_ids.size(), 0);
  for (const auto& r : records) {
    for (int l : r.labels) ++s.counts.at(static_cast<size_t>(l - 1));
  }
  s.validate();
  return s;
}

namespace {

const json& require_array(const json& root, const char* key) {
  if (!root.is_object() || !root.contains(key) || !root[key].is_array()) {
    throw std::runtime_error(fmt::format("COCO json: missing '{}' array", key));
  }
  return root[key];
}

}  // namespace

CocoDataset load_coco(const fs::path& annotation_file) {
  std::ifstream in(annotation_file);
  if (!in) throw std::runtime_error("cannot open " + annotation_file.string());
  json root;
  try {
    root = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(fmt::format("malformed COCO json {}: {}", annotation_file.string(), e.what()));
  }
  const json& images = require_array(root, "images");
  const json& annotations = require_array(root, "annotations");
  const json& categories = require_array(root, "categories");

  CocoDataset ds;
  ds.root = annotation_file.parent_path();
  std::vector<std::pair<int64_t, std::string>> cats;
  for (const auto& c : categories) {
    cats.emplace_back(c.at("id").get<int64_t>(), c.value("name", std::string{}));
  }
  std::sort(cats.begin(), cats.end());
  std::map<int64_t, int> label_of;
  for (const auto& [id, name] : cats) {
    if (label_of.count(id)) throw std::runtime_error(fmt::format("duplicate category id {}", id));
    label_of[id] = static_cast<int>(ds.category_ids.size()) + 1;
    ds.category_ids.push_back(id);
    ds.class_names.push_back(name.empty() ? fmt::format("class{}", id) : name);
  }

  std::map<int64_t, size_t> slot;
  for (const auto& im : images) {
    AnnotationRecord r;
    r.image_id = im.at("id").get<int64_t>();
    r.file_name = im.at("file_name").get<std::string>();
    r.width = im.at("width").get<int>();
    r.height = im.at("height").get<int>();
    if (slot.count(r.image_id)) throw std::runtime_error(fmt::format("duplicate image id {}", r.image_id));
    slot[r.image_id] = ds.records.size();
    ds.records.push_back(std::move(r));
  }

  for (const auto& a : annotations) {
    const int64_t image_id = a.at("image_id").get<int64_t>();
    const auto it = slot.find(image_id);
    if (it == slot.end()) throw std::runtime_error(fmt::format("annotation refers to unknown image {}", image_id));
    if (a.value("iscrowd", 0) != 0) {
      ++ds.skipped_crowd;
      continue;
    }
    const auto cat = label_of.find(a.at("category_id").get<int64_t>());
    if (cat == label_of.end()) {
      ++ds.skipped_unknown_category;
      continue;
    }
    const json& bb = a.at("bbox");
    if (!bb.is_array() || bb.size() != 4) throw std::runtime_error("annotation bbox must have 4 numbers");
    AnnotationRecord& r = ds.records[it->second];
    const double x = bb[0].get<double>(), y = bb[1].get<double>();
    const double w = bb[2].get<double>(), h = bb[3].get<double>();
    Box b{x, y, x + w, y + h};
    b.x1 = std::clamp(b.x1, 0.0, double(r.width));
    b.x2 = std::clamp(b.x2, 0.0, double(r.width));
    b.y1 = std::clamp(b.y1, 0.0, double(r.height));
    b.y2 = std::clamp(b.y2, 0.0, double(r.height));
    if (!(w > 0.0 && h > 0.0 && b.width() > 0.0 && b.height() > 0.0)) {
      ++ds.skipped_degenerate;
      continue;
    }
    r.boxes.push_back(b);
    r.labels.push_back(cat->second);
  }
  return ds;
}

CocoDataset load_dataset(const fs::path& dir) { return load_coco(dir / kAnnotationFile); }

void save_coco(const CocoDataset& ds, const fs::path& annotation_file) {
  json images = json::array(), annotations = json::array(), categories = json::array();
  for (size_t i = 0; i < ds.category_ids.size(); ++i) {
    categories.push_back({{"id", ds.category_ids[i]}, {"name", ds.class_names.at(i)}});
  }
  int64_t ann_id = 1;
  for (const auto& r : ds.records) {
    images.push_back({{"id", r.image_id}, {"file_name", r.file_name}, {"width", r.width}, {"height", r.height}});
    for (size_t j = 0; j < r.boxes.size(); ++j) {
      const Box& b = r.boxes[j];
      annotations.push_back({{"id", ann_id++},
                             {"image_id", r.image_id},
                             {"category_id", ds.category_ids.at(static_cast<size_t>(r.labels[j] - 1))},
                             {"bbox", {b.x1, b.y1, b.width(), b.height()}},
                             {"area", b.area()},
                             {"iscrowd", 0}});
    }
  }
  const json root = {{"images", images}, {"annotations", annotations}, {"categories", categories}};
  if (annotation_file.has_parent_path()) fs::create_directories(annotation_file.parent_path());
  std::ofstream out(annotation_file);
  if (!out) throw std::runtime_error("cannot write " + annotation_file.string());
  out << root.dump(1) << '\n';
  if (!out) throw std::runtime_error("write failed: " + annotation_file.string());
}

cv::Mat read_image(const fs::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (m.empty()) throw std::runtime_error("cannot read image " + path.string());
  return m;
}

// ---- augmentation

AugmentConfig AugmentConfig::identity(int output_size) {
  AugmentConfig c;
  c.photometric = c.expand = c.crop = c.flip = false;
  c.output_size = output_size;
  return c;
}

void AugmentConfig::validate() const {
  if (output_size <= 0) throw std::invalid_argument("augment: output size must be positive");
  if (!(max_expand_ratio >= 1.0)) throw std::invalid_argument("augment: expand ratio must be >= 1");
  if (!(contrast_lower > 0 && contrast_lower <= contrast_upper)) throw std::invalid_argument("augment: contrast range");
  if (!(saturation_lower > 0 && saturation_lower <= saturation_upper)) {
    throw std::invalid_argument("augment: saturation range");
  }
  if (crop && crop_min_ious.empty()) throw std::invalid_argument("augment: no crop options");
}

uint64_t sample_seed(uint64_t base_seed, int epoch, int64_t index) {
  std::seed_seq seq{uint32_t(base_seed), uint32_t(base_seed >> 32), uint32_t(epoch), uint32_t(index),
                    uint32_t(uint64_t(index) >> 32)};
  uint32_t parts[2];
  seq.generate(parts, parts + 2);
  return (uint64_t(parts[0]) << 32) | parts[1];
}

namespace {

struct Sampler {
  std::mt19937_64 rng;
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  bool coin(double p) { return uniform(0.0, 1.0) < p; }
};

// img: float BGR in [0,255]
void photometric_distort(cv::Mat& img, const AugmentConfig& c, Sampler& s) {
  auto contrast = [&] {
    if (s.coin(0.5)) img *= s.uniform(c.contrast_lower, c.contrast_upper);
  };
  if (s.coin(0.5)) img += cv::Scalar::all(s.uniform(-c.brightness_delta, c.brightness_delta));
  const bool contrast_first = s.coin(0.5);
  if (contrast_first) contrast();
  cv::Mat hsv;
  cv::Mat unit = img / 255.0;
  cv::threshold(unit, unit, 1.0, 1.0, cv::THRESH_TRUNC);
  cv::max(unit, 0.0, unit);
  cv::cvtColor(unit, hsv, cv::COLOR_BGR2HSV);
  std::vector<cv::Mat> ch;
  cv::split(hsv, ch);
  if (s.coin(0.5)) ch[1] *= s.uniform(c.saturation_lower, c.saturation_upper);
  cv::threshold(ch[1], ch[1], 1.0, 1.0, cv::THRESH_TRUNC);
  if (s.coin(0.5)) {
    ch[0] += s.uniform(-c.hue_delta, c.hue_delta);  // float HSV: hue in degrees
    for (int y = 0; y < ch[0].rows; ++y) {
      float* h = ch[0].ptr<float>(y);
      for (int x = 0; x < ch[0].cols; ++x) {
        h[x] = std::fmod(h[x] + 360.0f, 360.0f);
      }
    }
  }
  cv::merge(ch, hsv);
  cv::cvtColor(hsv, img, cv::COLOR_HSV2BGR);
  img *= 255.0;
  if (!contrast_first) contrast();
  cv::threshold(img, img, 255.0, 255.0, cv::THRESH_TRUNC);
  cv::max(img, 0.0, img);
}

}  // namespace

AugmentedSample augment(const AnnotationRecord& record, const cv::Mat& image, const AugmentConfig& config,
                        uint64_t seed) {
  config.validate();
  if (image.empty() || image.type() != CV_8UC3) throw std::invalid_argument("augment: expected a BGR 8-bit image");
  if (record.boxes.size() != record.labels.size()) throw std::invalid_argument("augment: boxes/labels mismatch");
  Sampler s{std::mt19937_64(seed)};

  cv::Mat img;
  image.convertTo(img, CV_32FC3);
  std::vector<Box> boxes = record.boxes;
  std::vector<int> labels = record.labels;
  // boxes are relative to the image actually passed in
  const double sx = record.width > 0 ? double(image.cols) / record.width : 1.0;
  const double sy = record.height > 0 ? double(image.rows) / record.height : 1.0;
  for (Box& b : boxes) b = {b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy};

  if (config.photometric) photometric_distort(img, config, s);

  if (config.expand && s.coin(config.expand_prob)) {
    const double ratio = s.uniform(1.0, config.max_expand_ratio);
    const int W = static_cast<int>(img.cols * ratio), H = static_cast<int>(img.rows * ratio);
    const int left = static_cast<int>(s.uniform(0.0, W - img.cols));
    const int top = static_cast<int>(s.uniform(0.0, H - img.rows));
    cv::Mat canvas(H, W, CV_32FC3, cv::Scalar(kPixelMean[2] * 255.0, kPixelMean[1] * 255.0, kPixelMean[0] * 255.0));
    img.copyTo(canvas(cv::Rect(left, top, img.cols, img.rows)));
    img = canvas;
    for (Box& b : boxes) b = {b.x1 + left, b.y1 + top, b.x2 + left, b.y2 + top};
  }

  if (config.crop && !boxes.empty()) {
    const size_t pick = std::uniform_int_distribution<size_t>(0, config.crop_min_ious.size() - 1)(s.rng);
    const double min_iou = config.crop_min_ious[pick];
    if (min_iou >= 0.0) {
      const double W = img.cols, H = img.rows;
      for (int trial = 0; trial < config.crop_trials; ++trial) {
        const double w = s.uniform(0.3 * W, W), h = s.uniform(0.3 * H, H);
        if (h / w < 0.5 || h / w > 2.0) continue;
        const double left = s.uniform(0.0, W - w), top = s.uniform(0.0, H - h);
        const Box rect{std::floor(left), std::floor(top), std::floor(left + w), std::floor(top + h)};
        if (rect.width() < 1.0 || rect.height() < 1.0) continue;
        double best = 0.0;
        for (const Box& b : boxes) best = std::max(best, iou(b, rect));
        if (best < min_iou) continue;
        std::vector<Box> kept;
        std::vector<int> kept_labels;
        for (size_t i = 0; i < boxes.size(); ++i) {
          const Box& b = boxes[i];
          if (b.cx() > rect.x1 && b.cx() < rect.x2 && b.cy() > rect.y1 && b.cy() < rect.y2) {
            kept.push_back({std::max(b.x1, rect.x1) - rect.x1, std::max(b.y1, rect.y1) - rect.y1,
                            std::min(b.x2, rect.x2) - rect.x1, std::min(b.y2, rect.y2) - rect.y1});
            kept_labels.push_back(labels[i]);
          }
        }
        if (kept.empty()) continue;
        img = img(cv::Rect(int(rect.x1), int(rect.y1), int(rect.width()), int(rect.height()))).clone();
        boxes = std::move(kept);
        labels = std::move(kept_labels);
        break;
      }
    }
  }

  if (config.flip && s.coin(config.flip_prob)) {
    cv::flip(img, img, 1);
    const double W = img.cols;
    for (Box& b : boxes) b = {W - b.x2, b.y1, W - b.x1, b.y2};
  }

  AugmentedSample out;
  const int size = config.output_size;
  cv::Mat resized;
  cv::resize(img, resized, cv::Size(size, size), 0, 0, cv::INTER_LINEAR);
  resized.convertTo(out.image, CV_8UC3);
  const double fx = double(size) / img.cols, fy = double(size) / img.rows;
  for (size_t i = 0; i < boxes.size(); ++i) {
    Box b{boxes[i].x1 * fx, boxes[i].y1 * fy, boxes[i].x2 * fx, boxes[i].y2 * fy};
    b.x1 = std::clamp(b.x1, 0.0, double(size));
    b.x2 = std::clamp(b.x2, 0.0, double(size));
    b.y1 = std::clamp(b.y1, 0.0, double(size));
    b.y2 = std::clamp(b.y2, 0.0, double(size));
    if (b.width() > 0.0 && b.height() > 0.0) {
      out.boxes.push_back(b);
      out.labels.push_back(labels[i]);
    }
  }
  return out;
}

void image_to_tensor(const cv::Mat& bgr, Tensor& batch, int n) {
  if (bgr.type() != CV_8UC3 || bgr.rows != batch.h() || bgr.cols != batch.w() || batch.c() != 3) {
    throw std::invalid_argument("image_to_tensor: image does not fit the batch slot");
  }
  for (int y = 0; y < bgr.rows; ++y) {
    const cv::Vec3b* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      for (int c = 0; c < 3; ++c) {
        batch.at(n, c, y, x) = static_cast<Real>(row[x][2 - c] / 255.0f - kPixelMean[c]);
      }
    }
  }
}

// ---- synthetic shapes

namespace {

const cv::Scalar kPalette[] = {{40, 40, 220}, {40, 200, 40}, {220, 60, 40}, {30, 210, 230},
                               {200, 40, 200}, {220, 220, 40}, {30, 120, 240}, {140, 140, 140}};
const char* const kShapeNames[] = {"rectangle", "disc", "triangle"};

}  // namespace

CocoDataset make_synth_dataset(const SynthConfig& cfg, const fs::path& out_dir) {
  if (cfg.num_images < 1) throw std::invalid_argument("synth: need at least one image");
  if (cfg.class_ratios.empty()) throw std::invalid_argument("synth: need at least one class");
  for (double r : cfg.class_ratios) {
    if (!(r > 0.0)) throw std::invalid_argument("synth: class ratios must be positive");
  }
  if (cfg.min_objects < 1 || cfg.max_objects < cfg.min_objects) throw std::invalid_argument("synth: object range");
  if (!(cfg.min_side >= 2.0 && cfg.max_side >= cfg.min_side && cfg.max_side <= cfg.image_size)) {
    throw std::invalid_argument("synth: side range");
  }

  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw std::runtime_error("synth: cannot create " + (out_dir / "images").string() + ": " + ec.message());

  CocoDataset ds;
  ds.root = out_dir;
  const int K = static_cast<int>(cfg.class_ratios.size());
  for (int k = 0; k < K; ++k) {
    ds.category_ids.push_back(k + 1);
    ds.class_names.push_back(k < 3 ? std::string(kShapeNames[k]) : fmt::format("{}{}", kShapeNames[k % 3], k / 3 + 1));
  }

  std::mt19937_64 rng(cfg.seed);
  std::discrete_distribution<int> pick_class(cfg.class_ratios.begin(), cfg.class_ratios.end());
  std::uniform_int_distribution<int> pick_count(cfg.min_objects, cfg.max_objects);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 18.0);
  const int S = cfg.image_size;

  for (int i = 0; i < cfg.num_images; ++i) {
    cv::Mat img(S, S, CV_8UC3);
    const cv::Vec3d base(60 + 120 * u(rng), 60 + 120 * u(rng), 60 + 120 * u(rng));
    for (int y = 0; y < S; ++y) {
      cv::Vec3b* row = img.ptr<cv::Vec3b>(y);
      for (int x = 0; x < S; ++x) {
        for (int c = 0; c < 3; ++c) row[x][c] = cv::saturate_cast<uchar>(base[c] + noise(rng));
      }
    }

    AnnotationRecord r;
    r.image_id = i + 1;
    r.file_name = fmt::format("images/{:06d}.png", i);
    r.width = r.height = S;
    const int n = pick_count(rng);
    for (int j = 0; j < n; ++j) {
      const int label = pick_class(rng) + 1;
      for (int attempt = 0; attempt < 30; ++attempt) {
        const double side = std::exp(std::log(cfg.min_side) + u(rng) * (std::log(cfg.max_side) - std::log(cfg.min_side)));
        const double aspect = (label - 1) % 3 == 1 ? 1.0 : std::exp(std::log(0.5) + u(rng) * std::log(4.0));
        const int w = std::clamp(int(std::round(side * std::sqrt(aspect))), 2, S);
        const int h = std::clamp(int(std::round(side / std::sqrt(aspect))), 2, S);
        const int x = static_cast<int>(u(rng) * (S - w + 1));
        const int y = static_cast<int>(u(rng) * (S - h + 1));
        const Box b{double(x), double(y), double(x + w), double(y + h)};
        bool clash = false;
        for (const Box& o : r.boxes) clash = clash || iou(o, b) > 0.2;
        if (clash) continue;

        cv::Scalar color = kPalette[(label - 1) % 8];
        for (int c = 0; c < 3; ++c) color[c] = std::clamp(color[c] + 50.0 * (u(rng) - 0.5), 0.0, 255.0);
        switch ((label - 1) % 3) {
          case 0:
            cv::rectangle(img, cv::Point(x, y), cv::Point(x + w - 1, y + h - 1), color, cv::FILLED);
            break;
          case 1:
            cv::ellipse(img, cv::Point(x + w / 2, y + h / 2), cv::Size(w / 2, h / 2), 0, 0, 360, color, cv::FILLED);
            break;
          default: {
            const cv::Point pts[3] = {{x, y + h - 1}, {x + w - 1, y + h - 1}, {x + w / 2, y}};
            cv::fillConvexPoly(img, pts, 3, color);
          }
        }
        r.boxes.push_back(b);
        r.labels.push_back(label);
        break;
      }
    }
    const fs::path path = out_dir / r.file_name;
    if (!cv::imwrite(path.string(), img)) throw std::runtime_error("synth: cannot write " + path.string());
    ds.records.push_back(std::move(r));
  }
  save_coco(ds, out_dir / kAnnotationFile);
  return ds;
}

cv::Mat render_weight_curve(std::span<const int64_t> counts, std::span<const double> weights) {
  if (counts.empty() || counts.size() != weights.size()) throw std::invalid_argument("weight curve: size mismatch");
  const int W = 640, H = 420, L = 70, R = 20, T = 30, B = 60;
  cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
  std::vector<size_t> order(counts.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return counts[a] < counts[b]; });
  const double lo = std::log10(double(counts[order.front()])), hi = std::log10(double(counts[order.back()]));
  const double span_x = std::max(hi - lo, 1e-9);
  double wmax = 1.0;
  for (double w : weights) wmax = std::max(wmax, w);
  wmax = std::ceil(wmax);
  auto px = [&](int64_t c) { return L + int((std::log10(double(c)) - lo) / span_x * (W - L - R)); };
  auto py = [&](double w) { return H - B - int(w / wmax * (H - T - B)); };

  const cv::Scalar axis(40, 40, 40), curve(200, 90, 30);
  cv::line(img, {L, H - B}, {W - R, H - B}, axis, 1);
  cv::line(img, {L, H - B}, {L, T}, axis, 1);
  for (int k = 0; k <= int(wmax); ++k) {
    cv::line(img, {L - 4, py(k)}, {L, py(k)}, axis, 1);
    cv::putText(img, std::to_string(k), {L - 30, py(k) + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4, axis, 1);
  }
  for (int e = int(std::floor(lo)); e <= int(std::ceil(hi)); ++e) {
    const double x = L + (e - lo) / span_x * (W - L - R);
    if (x < L - 1 || x > W - R + 1) continue;
    cv::line(img, {int(x), H - B}, {int(x), H - B + 4}, axis, 1);
    cv::putText(img, fmt::format("1e{}", e), {int(x) - 12, H - B + 18}, cv::FONT_HERSHEY_SIMPLEX, 0.4, axis, 1);
  }
  cv::putText(img, "number of labels (log)", {W / 2 - 80, H - 15}, cv::FONT_HERSHEY_SIMPLEX, 0.5, axis, 1);
  cv::putText(img, "weight", {8, T - 10}, cv::FONT_HERSHEY_SIMPLEX, 0.5, axis, 1);
  for (size_t k = 0; k + 1 < order.size(); ++k) {
    cv::line(img, {px(counts[order[k]]), py(weights[order[k]])},
             {px(counts[order[k + 1]]), py(weights[order[k + 1]])}, curve, 2, cv::LINE_AA);
  }
  for (size_t i : order) cv::circle(img, {px(counts[i]), py(weights[i])}, 3, curve, cv::FILLED, cv::LINE_AA);
  return img;
}

}  // namespace rdl
