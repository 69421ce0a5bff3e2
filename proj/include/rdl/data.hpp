#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "rdl/geometry.hpp"
#include "rdl/tensor.hpp"

namespace rdl {

/// One image with its boxes in absolute pixels and contiguous class ids.
struct AnnotationRecord {
  int64_t image_id = 0;
  std::string file_name;  // relative to the dataset root
  int width = 0;
  int height = 0;
  std::vector<Box> boxes;
  std::vector<int> labels;  // 1..K-1
};

/// Labeled-box counts per foreground class (index i is class i+1).
struct ClassStats {
  std::vector<int64_t> counts;

  int64_t max_count() const;
  int64_t min_count() const;
  /// Throws when empty or when some class has no boxes.
  void validate() const;
};

struct CocoDataset {
  std::filesystem::path root;
  std::vector<AnnotationRecord> records;
  std::vector<int64_t> category_ids;  // contiguous class i+1 -> COCO category id
  std::vector<std::string> class_names;
  int skipped_degenerate = 0;
  int skipped_unknown_category = 0;
  int skipped_crowd = 0;

  int num_classes() const { return static_cast<int>(category_ids.size()) + 1; }
  std::filesystem::path image_path(const AnnotationRecord& r) const { return root / r.file_name; }
  ClassStats stats() const;
};

inline constexpr const char* kAnnotationFile = "annotations.json";

/// Reads a COCO-format annotation file. Image paths resolve against the
/// file's directory. Throws std::runtime_error on malformed input.
CocoDataset load_coco(const std::filesystem::path& annotation_file);
/// load_coco(dir / annotations.json)
CocoDataset load_dataset(const std::filesystem::path& dir);
void save_coco(const CocoDataset& dataset, const std::filesystem::path& annotation_file);

/// BGR 8-bit image; throws when unreadable.
cv::Mat read_image(const std::filesystem::path& path);

// ---- augmentation

struct AugmentConfig {
  bool photometric = true;
  double brightness_delta = 32.0;
  double contrast_lower = 0.5, contrast_upper = 1.5;
  double saturation_lower = 0.5, saturation_upper = 1.5;
  double hue_delta = 18.0;

  bool expand = true;
  double expand_prob = 0.5;
  double max_expand_ratio = 4.0;

  bool crop = true;
  std::vector<double> crop_min_ious{0.1, 0.3, 0.5, 0.7, 0.9, -1.0};  // -1: keep the whole image
  int crop_trials = 50;

  bool flip = true;
  double flip_prob = 0.5;

  int output_size = 320;

  /// Resize only.
  static AugmentConfig identity(int output_size = 320);
  void validate() const;
};

struct AugmentedSample {
  cv::Mat image;            // output_size x output_size, BGR 8-bit
  std::vector<Box> boxes;   // pixels in [0, output_size]
  std::vector<int> labels;
};

AugmentedSample augment(const AnnotationRecord& record, const cv::Mat& image,
                        const AugmentConfig& config, uint64_t seed);

/// Seed for one sample of one epoch.
uint64_t sample_seed(uint64_t base_seed, int epoch, int64_t index);

/// ImageNet channel means (RGB) on the [0,1] scale.
inline constexpr float kPixelMean[3] = {0.485f, 0.456f, 0.406f};

/// Writes a BGR image into slot n of an NCHW batch as RGB, scaled by 1/255
/// then mean-subtracted.
void image_to_tensor(const cv::Mat& bgr, Tensor& batch, int n);

// ---- synthetic shapes

struct SynthConfig {
  int num_images = 100;
  std::vector<double> class_ratios{1.0, 1.0, 1.0};
  uint64_t seed = 0;
  int image_size = 320;
  int min_objects = 1;
  int max_objects = 6;
  double min_side = 12.0;
  double max_side = 160.0;
};

/// Renders rectangles, discs and triangles on noisy backgrounds and writes
/// images/ plus annotations.json under out_dir.
CocoDataset make_synth_dataset(const SynthConfig& config, const std::filesystem::path& out_dir);

/// Plot of class weight against labeled-box count (log scale).
cv::Mat render_weight_curve(std::span<const int64_t> counts, std::span<const double> weights);

}  // namespace rdl
