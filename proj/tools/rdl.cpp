#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "rdl/training.hpp"

namespace fs = std::filesystem;
using namespace rdl;
using nlohmann::ordered_json;

namespace {

struct Shared {
  std::string config;
  std::vector<std::string> set;
  int64_t seed = -1;
  std::string out;
};

void add_shared(CLI::App* app, Shared& s, bool out_required, bool with_config = true) {
  if (with_config) {
    app->add_option("--config", s.config, "Config file (key = value lines)")->check(CLI::ExistingFile);
    app->add_option("--set", s.set, "Override a config key, e.g. --set width=8 (repeatable)");
  }
  app->add_option("--seed", s.seed, "Seed for every random choice")->check(CLI::NonNegativeNumber);
  auto* out = app->add_option("--out", s.out, "Output directory");
  if (out_required) out->required();
}

TrainConfig resolve_config(const Shared& s) {
  TrainConfig c = s.config.empty() ? make_preset("basic") : load_config(s.config);
  for (const auto& kv : s.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (s.seed >= 0) c.seed = static_cast<uint64_t>(s.seed);
  c.validate();
  return c;
}

std::string label_name(const std::vector<std::string>& names, int label) {
  return label >= 1 && label <= static_cast<int>(names.size()) ? names[label - 1] : std::to_string(label);
}

ordered_json detections_json(const std::vector<Detection>& dets, const std::vector<std::string>& names) {
  ordered_json arr = ordered_json::array();
  for (const auto& d : dets) {
    arr.push_back({{"label", d.label},
                   {"class", label_name(names, d.label)},
                   {"score", d.score},
                   {"box", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}}});
  }
  return arr;
}

cv::Scalar class_color(int label) {
  static const cv::Scalar palette[] = {{40, 40, 230}, {230, 120, 30}, {40, 180, 40}, {200, 40, 200}, {30, 200, 220}};
  return palette[label % 5];
}

void draw(cv::Mat& img, const std::vector<Detection>& dets, const std::vector<std::string>& names) {
  for (const auto& d : dets) {
    const cv::Point p1(static_cast<int>(d.box.x1), static_cast<int>(d.box.y1));
    const cv::Point p2(static_cast<int>(d.box.x2), static_cast<int>(d.box.y2));
    cv::rectangle(img, p1, p2, class_color(d.label), 2);
    const std::string text = fmt::format("{} {:.2f}", label_name(names, d.label), d.score);
    cv::putText(img, text, {p1.x + 2, std::max(12, p1.y - 4)}, cv::FONT_HERSHEY_SIMPLEX, 0.4, class_color(d.label), 1,
                cv::LINE_AA);
  }
}

std::vector<Detection> above(const std::vector<Detection>& dets, double threshold) {
  std::vector<Detection> out;
  for (const auto& d : dets) {
    if (d.score >= threshold) out.push_back(d);
  }
  return out;
}

/// Post-processing comes from --config/--set when given, else from the checkpoint.
PostprocessConfig post_for(const Shared& shared, const TrainConfig& ckpt_config, const std::string& post) {
  const bool own = !shared.config.empty() || !shared.set.empty();
  PostprocessConfig p = own ? resolve_config(shared).postprocess_config() : ckpt_config.postprocess_config();
  if (post == "basic") p.soft_nms = false;
  if (post == "advanced") p.soft_nms = true;
  return p;
}

void write_json(const fs::path& path, const ordered_json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// ---- subcommands

struct TrainArgs {
  Shared shared;
  std::string data, resume;
};

int cmd_train(const TrainArgs& a) {
  const CocoDataset ds = load_dataset(a.data);
  std::unique_ptr<Trainer> t;
  if (!a.resume.empty()) {
    t = std::make_unique<Trainer>(load_checkpoint(a.resume), ds);
  } else {
    t = std::make_unique<Trainer>(resolve_config(a.shared), ds);
  }
  const TrainConfig& c = t->config();
  fmt::print("preset {} config {} width {} input {} epochs {} classes {} images {}\n", c.preset, c.hash(), c.width,
             c.input_size, c.total_epochs(), ds.num_classes() - 1, ds.records.size());
  t->run(a.shared.out, [](const EpochMetrics& m) {
    fmt::print("epoch {:3d} lr {:.0e} loss {:.4f} (arm {:.3f}/{:.3f} odm {:.3f}/{:.3f}) sigma2 {:.3f} {:.3f} {:.3f} {:.3f}\n",
               m.epoch, m.lr, m.loss.total, m.loss.arm_loc, m.loss.arm_cls, m.loss.odm_loc, m.loss.odm_cls,
               m.sigma2[0], m.sigma2[1], m.sigma2[2], m.sigma2[3]);
    std::fflush(stdout);
  });
  fmt::print("wrote {}\n", (fs::path(a.shared.out) / "final.ckpt").string());
  return 0;
}

struct EvalArgs {
  Shared shared;
  std::string ckpt, data, post = "config";
  int batch = 8;
};

int cmd_eval(const EvalArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const CocoDataset ds = load_dataset(a.data);
  RefineDetLite model = model_from_checkpoint(ck);
  const EvaluationOutput ev = evaluate(model, ds, post_for(a.shared, ck.config, a.post), a.batch);
  auto cell = [](double v) { return v < 0 ? std::string("   n/a") : fmt::format("{:6.3f}", v); };
  const EvalResult& r = ev.metrics;
  fmt::print("{:>8} {:>6} {:>6} {:>6} {:>6} {:>6}\n", "AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L");
  fmt::print("{:>8} {} {} {} {} {}\n", cell(r.ap), cell(r.ap50), cell(r.ap75), cell(r.ap_small), cell(r.ap_medium),
             cell(r.ap_large));
  fmt::print("\n{:<16} {:>6} {:>6}\n", "class", "AP", "AP50");
  for (int k = 1; k < ds.num_classes(); ++k) {
    fmt::print("{:<16} {} {}\n", label_name(ds.class_names, k), cell(r.class_ap[k]), cell(r.class_ap50[k]));
  }
  if (!a.shared.out.empty()) {
    fs::create_directories(a.shared.out);
    write_coco_results(fs::path(a.shared.out) / "detections.json", ev.images, ds.category_ids);
    ordered_json m{{"ap", r.ap},           {"ap50", r.ap50},           {"ap75", r.ap75},
                   {"ap_small", r.ap_small}, {"ap_medium", r.ap_medium}, {"ap_large", r.ap_large},
                   {"class_ap", r.class_ap}, {"class_ap50", r.class_ap50}};
    write_json(fs::path(a.shared.out) / "metrics.json", m);
  }
  return 0;
}

struct InferArgs {
  Shared shared;
  std::string ckpt, post = "config";
  std::vector<std::string> images;
  double score = 0.3;
};

int cmd_infer(const InferArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  RefineDetLite model = model_from_checkpoint(ck);
  const PostprocessConfig post = post_for(a.shared, ck.config, a.post);
  fs::create_directories(a.shared.out);
  ordered_json all = ordered_json::object();
  for (const auto& path : a.images) {
    cv::Mat img = cv::imread(path, cv::IMREAD_COLOR);
    if (img.empty()) {
      std::cerr << "warning: skipping unreadable image " << path << '\n';
      continue;
    }
    const auto dets = above(detect(model, img, post), a.score);
    draw(img, dets, ck.class_names);
    const std::string stem = fs::path(path).stem().string();
    cv::imwrite((fs::path(a.shared.out) / (stem + ".png")).string(), img);
    all[fs::path(path).filename().string()] = detections_json(dets, ck.class_names);
  }
  write_json(fs::path(a.shared.out) / "detections.json", all);
  fmt::print("annotated {} image(s) into {}\n", all.size(), a.shared.out);
  return 0;
}

struct VisualizeArgs {
  Shared shared;
  std::string ckpt, data, post = "config";
  int limit = 16;
  double score = 0.3;
};

int cmd_visualize(const VisualizeArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const CocoDataset ds = load_dataset(a.data);
  RefineDetLite model = model_from_checkpoint(ck);
  const PostprocessConfig post = post_for(a.shared, ck.config, a.post);
  fs::create_directories(a.shared.out);
  ordered_json all = ordered_json::object();
  const size_t n = std::min(ds.records.size(), static_cast<size_t>(a.limit));
  for (size_t i = 0; i < n; ++i) {
    const AnnotationRecord& r = ds.records[i];
    cv::Mat img = read_image(ds.image_path(r));
    const auto dets = above(detect(model, img, post), a.score);
    for (size_t j = 0; j < r.boxes.size(); ++j) {
      cv::rectangle(img, cv::Point(int(r.boxes[j].x1), int(r.boxes[j].y1)),
                    cv::Point(int(r.boxes[j].x2), int(r.boxes[j].y2)), cv::Scalar(255, 255, 255), 1);
    }
    draw(img, dets, ck.class_names);
    const std::string name = fs::path(r.file_name).stem().string() + ".png";
    cv::imwrite((fs::path(a.shared.out) / name).string(), img);
    all[name] = detections_json(dets, ck.class_names);
  }
  write_json(fs::path(a.shared.out) / "detections.json", all);
  fmt::print("rendered {} image(s) into {}\n", n, a.shared.out);
  return 0;
}

struct BenchArgs {
  Shared shared;
  std::string ckpt, data;
  int n = 100, warmup = 10;
};

int cmd_benchmark(const BenchArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  RefineDetLite model = model_from_checkpoint(ck);
  std::vector<cv::Mat> images;
  if (!a.data.empty()) {
    const CocoDataset ds = load_dataset(a.data);
    for (size_t i = 0; i < ds.records.size() && i < static_cast<size_t>(a.n); ++i) {
      images.push_back(read_image(ds.image_path(ds.records[i])));
    }
  }
  if (images.empty()) {
    cv::Mat img(480, 640, CV_8UC3);
    cv::RNG rng(a.shared.seed >= 0 ? static_cast<uint64_t>(a.shared.seed) : 0);
    rng.fill(img, cv::RNG::UNIFORM, 0, 256);
    images.push_back(img);
  }
  const BenchmarkReport r = benchmark(model, images, a.n, post_for(a.shared, ck.config, "config"), a.warmup);
  fmt::print("images {} warmup {} threads {}\n", r.images, r.warmup, r.threads);
  fmt::print("forward      {:8.2f} ms +- {:.2f}\n", r.forward_mean_ms, r.forward_std_ms);
  fmt::print("end-to-end   {:8.2f} ms +- {:.2f}\n", r.end_to_end_mean_ms, r.end_to_end_std_ms);
  fmt::print("params {:.3f} M, multiply-adds {:.3f} G (not a latency proxy on CPUs)\n", r.params / 1e6, r.macs / 1e9);
  if (!a.shared.out.empty()) {
    fs::create_directories(a.shared.out);
    write_json(fs::path(a.shared.out) / "benchmark.json",
               {{"images", r.images},
                {"warmup", r.warmup},
                {"threads", r.threads},
                {"forward_mean_ms", r.forward_mean_ms},
                {"forward_std_ms", r.forward_std_ms},
                {"end_to_end_mean_ms", r.end_to_end_mean_ms},
                {"end_to_end_std_ms", r.end_to_end_std_ms},
                {"params", r.params},
                {"multiply_adds", r.macs}});
  }
  return 0;
}

struct StatsArgs {
  Shared shared;
  std::string data;
};

int cmd_stats(const StatsArgs& a) {
  const TrainConfig c = resolve_config(a.shared);
  const CocoDataset ds = load_dataset(a.data);
  if (ds.records.empty()) throw std::runtime_error("dataset has no images");
  const ClassStats st = ds.stats();
  const ClassWeightTable w = class_weights(st.counts, c.hyper.gamma, c.hyper.max_weight);
  fmt::print("{:<16} {:>10} {:>8}\n", "class", "boxes", "weight");
  for (size_t k = 0; k < st.counts.size(); ++k) {
    fmt::print("{:<16} {:>10} {:>8.4f}\n", label_name(ds.class_names, int(k) + 1), st.counts[k], w.w[k + 1]);
  }
  if (!a.shared.out.empty()) {
    fs::create_directories(a.shared.out);
    const std::vector<double> weights(w.w.begin() + 1, w.w.end());
    const fs::path plot = fs::path(a.shared.out) / "class_weights.png";
    if (!cv::imwrite(plot.string(), render_weight_curve(st.counts, weights))) {
      throw std::runtime_error("cannot write " + plot.string());
    }
    ordered_json rows = ordered_json::array();
    for (size_t k = 0; k < st.counts.size(); ++k) {
      rows.push_back({{"class", label_name(ds.class_names, int(k) + 1)}, {"boxes", st.counts[k]}, {"weight", w.w[k + 1]}});
    }
    write_json(fs::path(a.shared.out) / "class_weights.json", rows);
    fmt::print("wrote {}\n", plot.string());
  }
  return 0;
}

struct SynthArgs {
  Shared shared;
  int images = 500, size = 320;
  std::vector<double> ratios{1, 1, 1};
};

int cmd_synth(const SynthArgs& a) {
  SynthConfig s;
  s.num_images = a.images;
  s.image_size = a.size;
  s.class_ratios = a.ratios;
  s.min_side *= a.size / 320.0;
  s.max_side *= a.size / 320.0;
  s.seed = a.shared.seed >= 0 ? static_cast<uint64_t>(a.shared.seed) : 0;
  const CocoDataset ds = make_synth_dataset(s, a.shared.out);
  fmt::print("wrote {} images, {} classes into {}\n", ds.records.size(), ds.num_classes() - 1, a.shared.out);
  return 0;
}

void fail(int code, const std::string& kind, const std::string& message) {
  std::cerr << ordered_json{{"error", kind}, {"code", code}, {"message", message}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RefineDetLite: CPU object detector training and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "rdl 1.0");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a detector on a COCO-format dataset");
  add_shared(t, train.shared, true);
  t->add_option("--data", train.data, "Dataset directory with annotations.json")->required()->check(CLI::ExistingDirectory);
  t->add_option("--resume", train.resume, "Continue from a checkpoint (its config wins)")->check(CLI::ExistingFile);

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "COCO-style AP of a checkpoint on a dataset");
  add_shared(e, eval.shared, false);
  e->add_option("--ckpt", eval.ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  e->add_option("--data", eval.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  e->add_option("--post", eval.post, "Suppression: config, basic (hard NMS) or advanced (soft-NMS)")
      ->check(CLI::IsMember({"config", "basic", "advanced"}));
  e->add_option("--batch", eval.batch, "Images per forward pass")->check(CLI::PositiveNumber);

  InferArgs infer;
  auto* i = app.add_subcommand("infer", "Detect objects in images and draw them");
  add_shared(i, infer.shared, true);
  i->add_option("--ckpt", infer.ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  i->add_option("images", infer.images, "Image files")->required();
  i->add_option("--post", infer.post, "Suppression: config, basic or advanced")
      ->check(CLI::IsMember({"config", "basic", "advanced"}));
  i->add_option("--score", infer.score, "Minimum score to draw and report")->check(CLI::Range(0.0, 1.0));

  VisualizeArgs vis;
  auto* v = app.add_subcommand("visualize", "Draw ground truth and detections for dataset images");
  add_shared(v, vis.shared, true);
  v->add_option("--ckpt", vis.ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  v->add_option("--data", vis.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  v->add_option("--post", vis.post, "Suppression: config, basic or advanced")
      ->check(CLI::IsMember({"config", "basic", "advanced"}));
  v->add_option("--limit", vis.limit, "Number of images")->check(CLI::PositiveNumber);
  v->add_option("--score", vis.score, "Minimum score to draw and report")->check(CLI::Range(0.0, 1.0));

  BenchArgs bench;
  auto* b = app.add_subcommand("benchmark", "Single-thread latency per image");
  add_shared(b, bench.shared, false);
  b->add_option("--ckpt", bench.ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  b->add_option("--data", bench.data, "Dataset whose images are timed (default: one random image)")
      ->check(CLI::ExistingDirectory);
  b->add_option("--n", bench.n, "Timed images (at least 10)");
  b->add_option("--warmup", bench.warmup, "Discarded warmup runs")->check(CLI::NonNegativeNumber);

  StatsArgs stats;
  auto* s = app.add_subcommand("stats", "Per-class box counts, class weights and the weight curve plot");
  add_shared(s, stats.shared, false);
  s->add_option("--data", stats.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);

  SynthArgs synth;
  auto* y = app.add_subcommand("synth", "Generate a synthetic shapes dataset");
  add_shared(y, synth.shared, true, false);
  y->add_option("--images", synth.images, "Number of images")->check(CLI::PositiveNumber);
  y->add_option("--size", synth.size, "Image side in pixels")->check(CLI::PositiveNumber);
  y->add_option("--ratios", synth.ratios, "Relative class frequencies, e.g. --ratios 50 5 1");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForVersion& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    fail(2, "usage", ex.what());
    return 2;
  }

  try {
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(eval);
    if (*i) return cmd_infer(infer);
    if (*v) return cmd_visualize(vis);
    if (*b) return cmd_benchmark(bench);
    if (*s) return cmd_stats(stats);
    if (*y) return cmd_synth(synth);
  } catch (const ConfigError& ex) {
    fail(2, "config", ex.what());
    return 2;
  } catch (const std::exception& ex) {
    fail(1, "runtime", ex.what());
    return 1;
  }
  return 1;
}
