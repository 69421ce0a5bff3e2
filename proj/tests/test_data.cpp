#include <doctest.h>

#include <fstream>
#include <random>
#include <stdexcept>

#include <unistd.h>

#include <json.hpp>
#include <opencv2/imgproc.hpp>

#include "rdl/data.hpp"
#include "rdl/losses.hpp"

using namespace rdl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rdl_data_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

AnnotationRecord record(int w, int h, std::vector<Box> boxes) {
  AnnotationRecord r;
  r.width = w;
  r.height = h;
  r.boxes = std::move(boxes);
  r.labels.assign(r.boxes.size(), 1);
  return r;
}

}  // namespace

TEST_CASE("load_coco: hand fixture") {
  const fs::path dir = scratch("fixture");
  write_text(dir / "a.json", R"({
    "images": [{"id": 7, "file_name": "x.png", "width": 100, "height": 80},
               {"id": 9, "file_name": "y.png", "width": 50, "height": 50}],
    "categories": [{"id": 18, "name": "dog"}, {"id": 3, "name": "car"}],
    "annotations": [
      {"id": 1, "image_id": 7, "category_id": 18, "bbox": [10, 20, 30, 40], "iscrowd": 0},
      {"id": 2, "image_id": 7, "category_id": 3, "bbox": [90, 70, 20, 20]},
      {"id": 3, "image_id": 9, "category_id": 18, "bbox": [0, 0, 50, 50]},
      {"id": 4, "image_id": 9, "category_id": 18, "bbox": [5, 5, 10, 10], "iscrowd": 1},
      {"id": 5, "image_id": 9, "category_id": 99, "bbox": [5, 5, 10, 10]},
      {"id": 6, "image_id": 9, "category_id": 3, "bbox": [5, 5, 0, 10]}
    ]})");
  const CocoDataset ds = load_coco(dir / "a.json");
  CHECK(ds.root == dir);
  CHECK(ds.category_ids == std::vector<int64_t>{3, 18});
  CHECK(ds.class_names == std::vector<std::string>{"car", "dog"});
  CHECK(ds.num_classes() == 3);
  CHECK(ds.skipped_crowd == 1);
  CHECK(ds.skipped_unknown_category == 1);
  CHECK(ds.skipped_degenerate == 1);
  REQUIRE(ds.records.size() == 2);
  const AnnotationRecord& a = ds.records[0];
  CHECK(a.image_id == 7);
  CHECK(a.width == 100);
  CHECK(a.height == 80);
  REQUIRE(a.boxes.size() == 2);
  CHECK(a.boxes[0] == Box{10, 20, 40, 60});
  CHECK(a.labels[0] == 2);
  CHECK(a.boxes[1] == Box{90, 70, 100, 80});  // clamped to the image
  CHECK(a.labels[1] == 1);
  const AnnotationRecord& b = ds.records[1];
  REQUIRE(b.boxes.size() == 1);
  CHECK(b.boxes[0] == Box{0, 0, 50, 50});
  CHECK(b.labels[0] == 2);
  CHECK(ds.image_path(b) == dir / "y.png");
  CHECK(ds.stats().counts == std::vector<int64_t>{1, 2});
}

TEST_CASE("load_coco: empty and malformed input") {
  const fs::path dir = scratch("bad");
  write_text(dir / "empty.json", R"({"images": [], "annotations": [], "categories": [{"id": 1, "name": "a"}]})");
  const CocoDataset e = load_coco(dir / "empty.json");
  CHECK(e.records.empty());
  CHECK_THROWS_AS(e.stats(), std::invalid_argument);

  write_text(dir / "broken.json", R"({"images": [)");
  CHECK_THROWS_AS(load_coco(dir / "broken.json"), std::runtime_error);
  write_text(dir / "noarrays.json", R"({"images": []})");
  CHECK_THROWS_AS(load_coco(dir / "noarrays.json"), std::runtime_error);
  CHECK_THROWS_AS(load_coco(dir / "missing.json"), std::runtime_error);
}

TEST_CASE("load_coco: class-count endpoints give weights 1 and 10") {
  const fs::path dir = scratch("counts");
  const std::vector<std::pair<int, int64_t>> counts{{1, 273468}, {3, 43867}, {44, 8725}, {89, 209}};
  nlohmann::json root;
  root["images"] = {{{"id", 1}, {"file_name", "a.png"}, {"width", 640}, {"height", 480}}};
  root["categories"] = nlohmann::json::array();
  root["annotations"] = nlohmann::json::array();
  int64_t id = 1;
  for (const auto& [cat, n] : counts) {
    root["categories"].push_back({{"id", cat}, {"name", cat == 1 ? "person" : cat == 89 ? "hair drier" : "other"}});
    for (int64_t k = 0; k < n; ++k) {
      root["annotations"].push_back(
          {{"id", id++}, {"image_id", 1}, {"category_id", cat}, {"bbox", {1, 2, 3, 4}}, {"iscrowd", 0}});
    }
  }
  write_text(dir / "c.json", root.dump());
  const ClassStats s = load_coco(dir / "c.json").stats();
  CHECK(s.counts == std::vector<int64_t>{273468, 43867, 8725, 209});
  CHECK(s.max_count() == 273468);
  CHECK(s.min_count() == 209);
  const ClassWeightTable w = class_weights(s.counts, 0.75, 10.0);
  CHECK(w.w[1] == 1.0);
  CHECK(w.w[4] == 10.0);
}

TEST_CASE("augment: identity config only resizes") {
  cv::Mat img(200, 400, CV_8UC3);
  cv::randu(img, 0, 255);
  const AnnotationRecord r = record(400, 200, {{40, 20, 120, 100}, {0, 0, 400, 200}});
  const AugmentedSample s = augment(r, img, AugmentConfig::identity(320), 5);
  cv::Mat expected;
  cv::resize(img, expected, cv::Size(320, 320), 0, 0, cv::INTER_LINEAR);
  CHECK(cv::norm(s.image, expected, cv::NORM_INF) <= 1.0);
  REQUIRE(s.boxes.size() == 2);
  CHECK(s.boxes[0].x1 == doctest::Approx(32));
  CHECK(s.boxes[0].y1 == doctest::Approx(32));
  CHECK(s.boxes[0].x2 == doctest::Approx(96));
  CHECK(s.boxes[0].y2 == doctest::Approx(160));
  CHECK(s.boxes[1] == Box{0, 0, 320, 320});
}

TEST_CASE("augment: horizontal flip mirrors boxes") {
  cv::Mat img(320, 320, CV_8UC3, cv::Scalar::all(0));
  AugmentConfig c = AugmentConfig::identity(320);
  c.flip = true;
  c.flip_prob = 1.0;
  const AugmentedSample s = augment(record(320, 320, {{32, 64, 96, 128}}), img, c, 1);
  REQUIRE(s.boxes.size() == 1);
  CHECK(s.boxes[0].x1 / 320 == doctest::Approx(0.7));
  CHECK(s.boxes[0].x2 / 320 == doctest::Approx(0.9));
  CHECK(s.boxes[0].y1 == doctest::Approx(64));
}

TEST_CASE("augment: deterministic per seed") {
  cv::Mat img(240, 300, CV_8UC3);
  cv::randu(img, 0, 255);
  const AnnotationRecord r = record(300, 240, {{30, 30, 150, 120}, {100, 90, 280, 230}});
  const AugmentConfig c;
  const AugmentedSample ref = augment(r, img, c, 77);
  bool differs_for_other_seed = false;
  for (int i = 0; i < 100; ++i) {
    const AugmentedSample s = augment(r, img, c, 77);
    REQUIRE(cv::norm(s.image, ref.image, cv::NORM_INF) == 0.0);
    REQUIRE(s.boxes == ref.boxes);
    REQUIRE(s.labels == ref.labels);
    const AugmentedSample o = augment(r, img, c, 1000 + i);
    differs_for_other_seed = differs_for_other_seed || o.boxes != ref.boxes;
  }
  CHECK(differs_for_other_seed);
}

TEST_CASE("augment: boxes stay valid and follow the pixels") {
  // white boxes on a black image; photometric jitter off so colors stay readable
  cv::Mat img(300, 400, CV_8UC3, cv::Scalar::all(0));
  const std::vector<Box> boxes{{40, 40, 140, 120}, {220, 150, 360, 280}, {300, 20, 380, 70}};
  for (const Box& b : boxes) {
    cv::rectangle(img, cv::Point(int(b.x1), int(b.y1)), cv::Point(int(b.x2) - 1, int(b.y2) - 1),
                  cv::Scalar::all(255), cv::FILLED);
  }
  AnnotationRecord r = record(400, 300, boxes);
  r.labels = {1, 2, 3};
  AugmentConfig c;
  c.photometric = false;
  int checked = 0;
  for (uint64_t seed = 0; seed < 300; ++seed) {
    const AugmentedSample s = augment(r, img, c, seed);
    REQUIRE(s.image.rows == 320);
    REQUIRE(s.image.cols == 320);
    REQUIRE(s.boxes.size() == s.labels.size());
    for (size_t i = 0; i < s.boxes.size(); ++i) {
      const Box& b = s.boxes[i];
      REQUIRE(b.x1 >= 0.0);
      REQUIRE(b.y1 >= 0.0);
      REQUIRE(b.x2 <= 320.0);
      REQUIRE(b.y2 <= 320.0);
      REQUIRE(b.width() > 0.0);
      REQUIRE(b.height() > 0.0);
      if (b.width() < 10 || b.height() < 10) continue;
      const cv::Rect inner(int(std::ceil(b.x1)) + 2, int(std::ceil(b.y1)) + 2, int(b.width()) - 5,
                           int(b.height()) - 5);
      CHECK(cv::mean(s.image(inner))[0] > 230.0);
      ++checked;
    }
  }
  CHECK(checked > 200);
}

TEST_CASE("image_to_tensor normalization") {
  cv::Mat img(4, 4, CV_8UC3, cv::Scalar(0, 0, 255));  // BGR red
  Tensor t(2, 3, 4, 4);
  image_to_tensor(img, t, 1);
  CHECK(t.at(1, 0, 2, 2) == doctest::Approx(1.0 - 0.485));
  CHECK(t.at(1, 1, 2, 2) == doctest::Approx(-0.456));
  CHECK(t.at(1, 2, 2, 2) == doctest::Approx(-0.406));
  CHECK(t.at(0, 0, 0, 0) == 0.0f);
  Tensor wrong(1, 3, 5, 5);
  CHECK_THROWS_AS(image_to_tensor(img, wrong, 0), std::invalid_argument);
}

TEST_CASE("sample seeds separate epochs and indices") {
  CHECK(sample_seed(1, 0, 0) == sample_seed(1, 0, 0));
  CHECK(sample_seed(1, 0, 0) != sample_seed(1, 1, 0));
  CHECK(sample_seed(1, 0, 0) != sample_seed(1, 0, 1));
  CHECK(sample_seed(1, 0, 0) != sample_seed(2, 0, 0));
}

TEST_CASE("synthetic dataset: balance, round trip, determinism") {
  SynthConfig c;
  c.num_images = 300;
  c.seed = 3;
  const fs::path dir = scratch("synth_a");
  const CocoDataset ds = make_synth_dataset(c, dir);
  const ClassStats s = ds.stats();
  REQUIRE(s.counts.size() == 3);
  CHECK(double(s.max_count() - s.min_count()) <= 0.1 * s.max_count());

  int64_t small = 0, medium = 0, large = 0;
  for (const auto& r : ds.records) {
    CHECK(r.boxes.size() >= 1);
    CHECK(r.boxes.size() <= 6);
    for (const Box& b : r.boxes) {
      const double a = b.area();
      (a < 32 * 32 ? small : a < 96 * 96 ? medium : large)++;
    }
  }
  CHECK(small > 0);
  CHECK(medium > 0);
  CHECK(large > 0);

  const CocoDataset back = load_dataset(dir);
  REQUIRE(back.records.size() == ds.records.size());
  for (size_t i = 0; i < ds.records.size(); ++i) {
    CHECK(back.records[i].image_id == ds.records[i].image_id);
    CHECK(back.records[i].file_name == ds.records[i].file_name);
    CHECK(back.records[i].boxes == ds.records[i].boxes);
    CHECK(back.records[i].labels == ds.records[i].labels);
  }
  CHECK(back.category_ids == ds.category_ids);
  CHECK(back.class_names == ds.class_names);
  const cv::Mat first = read_image(back.image_path(back.records[0]));
  CHECK(first.rows == 320);
  CHECK(first.cols == 320);

  SynthConfig small_cfg = c;
  small_cfg.num_images = 5;
  const fs::path d1 = scratch("synth_b"), d2 = scratch("synth_c");
  make_synth_dataset(small_cfg, d1);
  make_synth_dataset(small_cfg, d2);
  CHECK(slurp(d1 / kAnnotationFile) == slurp(d2 / kAnnotationFile));
  for (int i = 0; i < 5; ++i) {
    const std::string name = "images/00000" + std::to_string(i) + ".png";
    CHECK(slurp(d1 / name) == slurp(d2 / name));
  }
}

TEST_CASE("synthetic dataset: imbalance drives the rarest weight to W") {
  SynthConfig c;
  c.num_images = 200;
  c.class_ratios = {50, 5, 1};
  c.seed = 4;
  const CocoDataset ds = make_synth_dataset(c, scratch("synth_imb"));
  const ClassStats s = ds.stats();
  CHECK(s.counts[0] > s.counts[1]);
  CHECK(s.counts[1] > s.counts[2]);
  const ClassWeightTable w = class_weights(s.counts, 0.75, 10.0);
  CHECK(w.w[3] == 10.0);
  CHECK(w.w[1] == 1.0);
}

TEST_CASE("synthetic dataset: argument checks") {
  SynthConfig c;
  c.num_images = 0;
  CHECK_THROWS_AS(make_synth_dataset(c, scratch("synth_bad")), std::invalid_argument);
  c.num_images = 1;
  c.class_ratios = {1.0, 0.0};
  CHECK_THROWS_AS(make_synth_dataset(c, scratch("synth_bad")), std::invalid_argument);
}

TEST_CASE("weight curve renders") {
  const std::vector<int64_t> counts{273468, 43867, 8725, 209};
  const ClassWeightTable w = class_weights(counts, 0.75, 10.0);
  const std::vector<double> fg(w.w.begin() + 1, w.w.end());
  const cv::Mat img = render_weight_curve(counts, fg);
  CHECK(!img.empty());
  CHECK(cv::countNonZero(img.reshape(1) != 255) > 100);
}
