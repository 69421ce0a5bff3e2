#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "rdl/training.hpp"

using namespace rdl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rdl_train_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

CocoDataset tiny_dataset(const std::string& name, int images, int size = 128) {
  SynthConfig s;
  s.num_images = images;
  s.image_size = size;
  s.min_objects = 1;
  s.max_objects = 2;
  s.min_side = size * 0.2;
  s.max_side = size * 0.5;
  s.seed = 11;
  return make_synth_dataset(s, scratch(name));
}

TrainConfig tiny_config(const std::string& preset = "basic") {
  TrainConfig c = make_preset(preset);
  apply_desk_scale(c);
  c.input_size = 128;
  c.batch_size = 4;
  c.augment = false;
  return c;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a.data()[i]) - b.data()[i]));
  return m;
}

}  // namespace

TEST_CASE("config: text round trip and hash") {
  for (const auto& name : preset_names()) {
    TrainConfig c = make_preset(name);
    c.seed = 42;
    c.schedule_scale = 0.1;
    c.phase_lr[1] = 3.3e-4;
    const TrainConfig back = parse_config(c.to_text());
    CHECK(back.to_text() == c.to_text());
    CHECK(back.hash() == c.hash());
  }
}

TEST_CASE("config: ablation rows are distinct and follow the table") {
  std::set<std::string> hashes;
  for (char r = 'c'; r <= 'o'; ++r) hashes.insert(make_preset(std::string(1, r)).hash());
  CHECK(hashes.size() == 13);

  const TrainConfig c = make_preset("c");
  CHECK_FALSE(c.soft_nms);
  CHECK_FALSE(c.flags.giou);
  CHECK(c.phase_lr[0] == doctest::Approx(4e-3));
  const TrainConfig d = make_preset("d");
  CHECK(d.soft_nms);
  CHECK(d.phase_lr[0] == doctest::Approx(4e-3));
  const TrainConfig l = make_preset("l");
  CHECK(l.flags.giou);
  CHECK(l.flags.class_weights);
  CHECK(l.flags.iou_guided);
  CHECK_FALSE(l.flags.multitask);
  CHECK(l.phase_lr[0] == doctest::Approx(1e-2));
  const TrainConfig o = make_preset("o");
  const TrainConfig adv = make_preset("advanced");
  CHECK(o.flags.giou == adv.flags.giou);
  CHECK(o.flags.multitask == adv.flags.multitask);
  CHECK(o.phase_lr == adv.phase_lr);
  CHECK(o.phase_epochs == std::array<int, 3>{150, 50, 50});
}

TEST_CASE("config: syntax and value errors") {
  CHECK_THROWS_AS(parse_config("width 8"), ConfigError);
  CHECK_THROWS_AS(parse_config("nonsense = 1"), ConfigError);
  CHECK_THROWS_AS(parse_config("width = eight"), ConfigError);
  CHECK_THROWS_AS(parse_config("width = 8\nwidth = 9"), ConfigError);
  CHECK_THROWS_AS(parse_config("preset = z"), ConfigError);
  CHECK_THROWS_AS(parse_config("giou = maybe"), ConfigError);
  CHECK_THROWS_AS(parse_config("lr = 1,2"), ConfigError);
  CHECK_THROWS_AS(parse_config("lr = 0,1e-3,1e-4"), ConfigError);
  CHECK_THROWS_AS(parse_config("alpha = 1.5"), ConfigError);
  CHECK_THROWS_AS(parse_config("width = 6"), ConfigError);
  CHECK_THROWS_AS(parse_config("input_size = 300"), ConfigError);
  CHECK_THROWS_AS(parse_config("momentum = 1"), ConfigError);
  CHECK_THROWS_AS(parse_config("epochs = 0,0,0"), ConfigError);
  CHECK_THROWS_AS(parse_config("seed = -1"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/x.cfg"), ConfigError);

  const TrainConfig c = parse_config("# comment\npreset = advanced\n  width = 8   # trailing\nbatch_size=8\n");
  CHECK(c.preset == "advanced");
  CHECK(c.width == 8);
  CHECK(c.batch_size == 8);
  CHECK(c.flags.multitask);
}

TEST_CASE("config: desk scaling shortens the schedule, keeps the rates") {
  TrainConfig c = make_preset("advanced");
  const auto lr = c.phase_lr;
  apply_desk_scale(c);
  CHECK(c.scaled_epochs() == std::array<int, 3>{15, 5, 5});
  CHECK(c.total_epochs() == 25);
  CHECK(c.phase_lr == lr);
  CHECK(c.lr_at_epoch(0) == 1e-2);
  CHECK(c.lr_at_epoch(14) == 1e-2);
  CHECK(c.lr_at_epoch(15) == 1e-3);
  CHECK(c.lr_at_epoch(19) == 1e-3);
  CHECK(c.lr_at_epoch(20) == 1e-4);
  CHECK(c.lr_at_epoch(24) == 1e-4);

  TrainConfig t = make_preset("basic");
  t.schedule_scale = 0.001;
  CHECK(t.scaled_epochs() == std::array<int, 3>{1, 1, 1});
}

TEST_CASE("sgd: zero learning rate leaves weights unchanged, decay skips flagged params") {
  Param a, b;
  a.value = Tensor(1, 1, 1, 3);
  a.grad = Tensor(1, 1, 1, 3);
  b.value = Tensor(1, 1, 1, 2);
  b.grad = Tensor(1, 1, 1, 2);
  b.decay = false;
  for (int i = 0; i < 3; ++i) a.value.data()[i] = Real(i + 1);
  b.value.data()[0] = 2;
  b.value.data()[1] = -1;
  Sgd sgd({&a, &b});
  const Tensor a0 = a.value, b0 = b.value;
  a.grad.data()[0] = 5;
  sgd.step(0.0, 0.9, 0.1, 0.0, nullptr, nullptr);
  CHECK(max_abs_diff(a.value, a0) == 0.0);

  a.grad.fill(0);
  b.grad.fill(0);
  sgd = Sgd({&a, &b});
  sgd.step(1.0, 0.0, 0.1, 0.0, nullptr, nullptr);
  CHECK(a.value.data()[0] == doctest::Approx(1 - 0.1 * 1));
  CHECK(a.value.data()[2] == doctest::Approx(3 - 0.1 * 3));
  CHECK(max_abs_diff(b.value, b0) == 0.0);
}

TEST_CASE("sgd: momentum and global norm clipping") {
  Param p;
  p.value = Tensor(1, 1, 1, 2);
  p.grad = Tensor(1, 1, 1, 2);
  p.grad.data()[0] = 3;
  p.grad.data()[1] = 0;
  UncertaintyState u;
  const std::array<double, 4> d{4, 0, 0, 0};
  Sgd sgd({&p});
  const double norm = sgd.step(0.5, 0.9, 0.0, 1.0, &u, &d);
  CHECK(norm == doctest::Approx(5.0));
  CHECK(p.value.data()[0] == doctest::Approx(-0.5 * 3.0 / 5.0));
  CHECK(u.params.log_var[0] == doctest::Approx(-0.5 * 4.0 / 5.0));
  sgd.step(0.5, 0.9, 0.0, 1.0, &u, &d);
  CHECK(p.value.data()[0] == doctest::Approx(-0.3 - 0.5 * (0.9 * 0.6 + 0.6)));
}

TEST_CASE("checkpoint: round trip, resume equivalence and errors") {
  const CocoDataset ds = tiny_dataset("ckpt", 8);
  const fs::path dir = scratch("ckpt_out");
  TrainConfig cfg = tiny_config("advanced");

  Trainer a(cfg, ds);
  for (int s = 0; s < 3; ++s) a.train_step({size_t(2 * s), size_t(2 * s + 1)}, 0);
  save_checkpoint(a.checkpoint(), dir / "a.ckpt");
  const Checkpoint loaded = load_checkpoint(dir / "a.ckpt");
  CHECK(loaded.step == 3);
  CHECK(loaded.config.hash() == cfg.hash());
  CHECK(loaded.class_weights.w == a.class_weights().w);
  CHECK(loaded.uncertainty.params.log_var == a.uncertainty().params.log_var);

  Trainer b(loaded, ds);
  const std::vector<size_t> next{5, 6};
  CHECK(std::abs(a.batch_loss(next, 1).total - b.batch_loss(next, 1).total) < 1e-7);

  for (int s = 0; s < 20; ++s) {
    const std::vector<size_t> idx{size_t(s % 8), size_t((s + 3) % 8)};
    const double la = a.train_step(idx, 1).total;
    const double lb = b.train_step(idx, 1).total;
    REQUIRE(std::abs(la - lb) <= 1e-5 * std::max(1.0, std::abs(la)));
  }

  SUBCASE("wrong class count") {
    SynthConfig s;
    s.num_images = 4;
    s.image_size = 128;
    s.class_ratios = {1, 1};
    s.min_side = 30;
    s.max_side = 60;
    const CocoDataset other = make_synth_dataset(s, scratch("ckpt_other"));
    CHECK_THROWS_AS(Trainer(loaded, other), std::invalid_argument);
  }
  SUBCASE("corruption and version") {
    std::string bytes;
    {
      std::ifstream in(dir / "a.ckpt", std::ios::binary);
      bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    std::string flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x5a;
    std::ofstream(dir / "bad.ckpt", std::ios::binary) << flipped;
    CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), std::runtime_error);

    std::ofstream(dir / "short.ckpt", std::ios::binary) << bytes.substr(0, 100);
    CHECK_THROWS_AS(load_checkpoint(dir / "short.ckpt"), std::runtime_error);

    std::string versioned = bytes;
    versioned[8] = 7;
    uint64_t h = 14695981039346656037ull;
    for (size_t i = 0; i + 8 < versioned.size(); ++i) {
      h ^= static_cast<unsigned char>(versioned[i]);
      h *= 1099511628211ull;
    }
    std::memcpy(versioned.data() + versioned.size() - 8, &h, 8);
    std::ofstream(dir / "v.ckpt", std::ios::binary) << versioned;
    try {
      load_checkpoint(dir / "v.ckpt");
      FAIL("expected a version error");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), std::runtime_error);
  }
}

TEST_CASE("multitask: every log-variance receives gradient and moves") {
  const CocoDataset ds = tiny_dataset("mt", 8);
  TrainConfig cfg = tiny_config("advanced");
  Trainer t(cfg, ds);
  REQUIRE(t.uncertainty().params.log_var == std::array<double, 4>{});
  const auto before = t.uncertainty().params.log_var;
  t.train_step({0, 1, 2, 3}, 0);
  const auto after = t.uncertainty().params.log_var;
  for (int k = 0; k < 4; ++k) CHECK(after[k] != before[k]);

  TrainConfig off = tiny_config("l");
  Trainer u(off, ds);
  u.train_step({0, 1, 2, 3}, 0);
  for (int k = 0; k < 4; ++k) CHECK(u.uncertainty().params.log_var[k] == 0.0);
}

TEST_CASE("multitask: variances approach L for localization and 2L for classification") {
  const CocoDataset ds = tiny_dataset("mt_target", 8);
  TrainConfig cfg = tiny_config("advanced");
  Trainer t(cfg, ds);
  EpochMetrics m;
  for (int e = 0; e < 10; ++e) m = t.train_epoch();
  const auto terms = m.loss.terms();
  for (int k = 0; k < 4; ++k) {
    const double target = k % 2 == 0 ? terms[k] : 2.0 * terms[k];
    CAPTURE(k);
    CAPTURE(target);
    CAPTURE(m.sigma2[k]);
    CHECK(std::abs(std::log(m.sigma2[k] / target)) < std::abs(std::log(1.0 / target)));
    CHECK(m.sigma2[k] == doctest::Approx(std::exp(t.uncertainty().params.log_var[k])));
  }
}

TEST_CASE("overfit smoke: one image is memorized") {
  SynthConfig s;
  s.num_images = 1;
  s.seed = 3;
  const CocoDataset ds = make_synth_dataset(s, scratch("overfit"));
  TrainConfig cfg = make_preset("basic");
  apply_desk_scale(cfg);
  cfg.augment = false;
  Trainer t(cfg, ds);
  const double first = t.batch_loss({0}, 0).total;
  for (int step = 0; step < 200; ++step) t.train_step({0}, 0);
  const double last = t.batch_loss({0}, 0).total;
  MESSAGE("loss " << first << " -> " << last);
  CHECK(last <= 0.1 * first);

  const EvaluationOutput ev = evaluate(t.model(), ds, cfg.postprocess_config());
  MESSAGE("AP50 " << ev.metrics.ap50);
  CHECK(ev.metrics.ap50 == doctest::Approx(1.0));
}

TEST_CASE("training run: deterministic metrics and checkpoints") {
  const CocoDataset ds = tiny_dataset("det", 6);
  TrainConfig cfg = tiny_config("advanced");
  cfg.augment = true;
  cfg.phase_epochs = {1, 1, 0};
  cfg.schedule_scale = 1.0;
  const fs::path d1 = scratch("run1"), d2 = scratch("run2");
  int seen = 0;
  {
    Trainer t(cfg, ds);
    t.run(d1, [&](const EpochMetrics& m) {
      ++seen;
      CHECK(m.epoch == seen);
      CHECK(std::isfinite(m.loss.total));
    });
  }
  {
    Trainer t(cfg, ds);
    t.run(d2);
  }
  CHECK(seen == 2);
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(slurp(d1 / "metrics.jsonl") == slurp(d2 / "metrics.jsonl"));
  CHECK(slurp(d1 / "final.ckpt") == slurp(d2 / "final.ckpt"));
  CHECK(fs::exists(d1 / "phase1.ckpt"));
  CHECK(fs::exists(d1 / "phase2.ckpt"));
  CHECK_FALSE(fs::exists(d1 / "phase3.ckpt"));
  CHECK(parse_config(slurp(d1 / "config.cfg")).hash() == cfg.hash());

  const Checkpoint ck = load_checkpoint(d1 / "final.ckpt");
  CHECK(ck.epoch == 2);
  RefineDetLite m = model_from_checkpoint(ck);
  const cv::Mat img = read_image(ds.image_path(ds.records[0]));
  const auto dets = detect(m, img, cfg.postprocess_config());
  for (const auto& d : dets) {
    CHECK(d.box.x1 >= 0);
    CHECK(d.box.x2 <= img.cols);
  }
}

TEST_CASE("detector cost and benchmark report") {
  RefineDetLite m(make_detector_config(8, 4, 128), 1);
  const auto [params, macs] = detector_cost(m);
  CHECK(params > 0);
  CHECK(macs > params);
  std::vector<cv::Mat> imgs{cv::Mat(100, 120, CV_8UC3, cv::Scalar(10, 20, 30))};
  PostprocessConfig post;
  const BenchmarkReport r = benchmark(m, imgs, 10, post, 1);
  CHECK(r.images == 10);
  CHECK(r.threads == 1);
  CHECK(r.forward_mean_ms > 0);
  CHECK(r.end_to_end_mean_ms >= r.forward_mean_ms);
  CHECK(r.params == params);
  CHECK_THROWS_AS(benchmark(m, imgs, 5, post), std::invalid_argument);
}
