#include "rdl/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <cblas.h>
#include <fmt/format.h>
#include <json.hpp>
#include <opencv2/core/utility.hpp>
#include <opencv2/imgproc.hpp>

namespace rdl {

namespace fs = std::filesystem;

// ---- configuration

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (width < 1) fail("width must be positive");
  if (input_size < 32) fail("input_size too small");
  if (batch_size < 1) fail("batch_size must be positive");
  for (int e : phase_epochs) {
    if (e < 0) fail("epochs must be non-negative");
  }
  if (!(schedule_scale > 0.0)) fail("schedule_scale must be positive");
  if (total_epochs() < 1) fail("schedule has no epochs");
  for (double lr : phase_lr) {
    if (!(lr > 0.0)) fail("learning rates must be positive");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must be in [0,1)");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (!(clip_norm >= 0.0)) fail("clip_norm must be non-negative (0 disables)");
  if (!(pos_threshold > 0.0 && pos_threshold <= 1.0)) fail("pos_threshold must be in (0,1]");
  if (!(neg_theta > 0.0 && neg_theta <= 1.0)) fail("neg_theta must be in (0,1]");
  if (!(ohem_ratio >= 0.0)) fail("ohem_ratio must be non-negative");
  try {
    hyper.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  try {
    make_detector_config(width, 2, input_size).validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
}

std::array<int, 3> TrainConfig::scaled_epochs() const {
  std::array<int, 3> out{};
  for (int i = 0; i < 3; ++i) {
    out[i] = phase_epochs[i] == 0 ? 0 : std::max(1, static_cast<int>(std::lround(phase_epochs[i] * schedule_scale)));
  }
  return out;
}

int TrainConfig::total_epochs() const {
  const auto e = scaled_epochs();
  return e[0] + e[1] + e[2];
}

double TrainConfig::lr_at_epoch(int epoch) const {
  const auto e = scaled_epochs();
  int end = 0;
  for (int i = 0; i < 3; ++i) {
    end += e[i];
    if (epoch < end) return phase_lr[i];
  }
  return phase_lr[2];
}

namespace {

std::string num(double v) { return fmt::format("{}", v); }
std::string flag(bool b) { return b ? "true" : "false"; }

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(fmt::format("{}: expected a boolean, got '{}'", key, v));
}

double parse_double(const std::string& key, const std::string& v) {
  size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(fmt::format("{}: expected a number, got '{}'", key, v));
  return out;
}

int64_t parse_int(const std::string& key, const std::string& v) {
  size_t used = 0;
  int64_t out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(fmt::format("{}: expected an integer, got '{}'", key, v));
  return out;
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    out.push_back(b == std::string::npos ? "" : item.substr(b, e - b + 1));
  }
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

const std::vector<std::string> kKeys{
    "preset",       "width",          "input_size",     "batch_size",     "epochs",         "schedule_scale",
    "lr",           "momentum",       "weight_decay",   "clip_norm",      "alpha",          "beta",
    "gamma",        "max_weight",     "lambda_arm_loc", "lambda_arm_cls", "lambda_odm_loc", "lambda_odm_cls",
    "giou",         "iou_guided",     "class_weights",  "multitask",      "soft_nms",       "augment",
    "pos_threshold", "neg_theta",     "ohem_ratio",     "seed"};

}  // namespace

std::string TrainConfig::to_text() const {
  std::string s;
  auto put = [&](const std::string& k, const std::string& v) { s += k + " = " + v + "\n"; };
  put("preset", preset);
  put("width", std::to_string(width));
  put("input_size", std::to_string(input_size));
  put("batch_size", std::to_string(batch_size));
  put("epochs", fmt::format("{},{},{}", phase_epochs[0], phase_epochs[1], phase_epochs[2]));
  put("schedule_scale", num(schedule_scale));
  put("lr", fmt::format("{},{},{}", phase_lr[0], phase_lr[1], phase_lr[2]));
  put("momentum", num(momentum));
  put("weight_decay", num(weight_decay));
  put("clip_norm", num(clip_norm));
  put("alpha", num(hyper.alpha));
  put("beta", num(hyper.beta));
  put("gamma", num(hyper.gamma));
  put("max_weight", num(hyper.max_weight));
  put("lambda_arm_loc", num(hyper.lambda_arm_loc));
  put("lambda_arm_cls", num(hyper.lambda_arm_cls));
  put("lambda_odm_loc", num(hyper.lambda_odm_loc));
  put("lambda_odm_cls", num(hyper.lambda_odm_cls));
  put("giou", flag(flags.giou));
  put("iou_guided", flag(flags.iou_guided));
  put("class_weights", flag(flags.class_weights));
  put("multitask", flag(flags.multitask));
  put("soft_nms", flag(soft_nms));
  put("augment", flag(augment));
  put("pos_threshold", num(pos_threshold));
  put("neg_theta", num(neg_theta));
  put("ohem_ratio", num(ohem_ratio));
  put("seed", std::to_string(seed));
  return s;
}

std::string TrainConfig::hash() const {
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : to_text()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return fmt::format("{:016x}", h);
}

DetectionLossConfig TrainConfig::loss_config(const ClassWeightTable& weights) const {
  DetectionLossConfig c;
  c.hyper = hyper;
  c.flags = flags;
  c.weights = weights;
  c.pos_threshold = pos_threshold;
  c.neg_theta = neg_theta;
  c.ohem_ratio = ohem_ratio;
  return c;
}

PostprocessConfig TrainConfig::postprocess_config() const {
  PostprocessConfig p;
  p.soft_nms = soft_nms;
  p.neg_theta = neg_theta;
  return p;
}

std::vector<std::string> preset_names() {
  std::vector<std::string> out{"basic", "advanced"};
  for (char r = 'c'; r <= 'o'; ++r) out.emplace_back(1, r);
  return out;
}

TrainConfig make_preset(const std::string& name) {
  TrainConfig c;
  c.preset = name;
  // soft-nms, giou, class weights, iou guided, multitask
  static const std::map<std::string, std::array<bool, 5>> rows{
      {"c", {0, 0, 0, 0, 0}}, {"d", {1, 0, 0, 0, 0}}, {"e", {1, 0, 1, 0, 0}}, {"f", {1, 0, 0, 1, 0}},
      {"g", {1, 0, 0, 0, 1}}, {"h", {1, 1, 0, 0, 0}}, {"i", {1, 1, 1, 0, 0}}, {"j", {1, 1, 0, 1, 0}},
      {"k", {1, 1, 0, 0, 1}}, {"l", {1, 1, 1, 1, 0}}, {"m", {1, 1, 0, 1, 1}}, {"n", {1, 1, 1, 0, 1}},
      {"o", {1, 1, 1, 1, 1}}, {"basic", {0, 0, 0, 0, 0}}, {"advanced", {1, 1, 1, 1, 1}}};
  const auto it = rows.find(name);
  if (it == rows.end()) throw ConfigError(fmt::format("unknown preset '{}'", name));
  const auto& r = it->second;
  c.soft_nms = r[0];
  c.flags.giou = r[1];
  c.flags.class_weights = r[2];
  c.flags.iou_guided = r[3];
  c.flags.multitask = r[4];
  if (c.flags.giou || c.flags.class_weights || c.flags.iou_guided || c.flags.multitask) {
    c.phase_lr = {1e-2, 1e-3, 1e-4};
  }
  return c;
}

void apply_desk_scale(TrainConfig& c) {
  c.width = 8;
  c.batch_size = 8;
  c.schedule_scale = 0.1;
}

std::vector<std::string> config_keys() { return kKeys; }

void set_config_value(TrainConfig& c, const std::string& key, const std::string& v) {
  auto as_int = [&] {
    const int64_t x = parse_int(key, v);
    if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
      throw ConfigError(key + ": out of range");
    }
    return static_cast<int>(x);
  };
  if (key == "preset") {
    TrainConfig fresh = make_preset(v);
    c = fresh;
  } else if (key == "width") {
    c.width = as_int();
  } else if (key == "input_size") {
    c.input_size = as_int();
  } else if (key == "batch_size") {
    c.batch_size = as_int();
  } else if (key == "epochs") {
    const auto parts = split_list(v);
    if (parts.size() != 3) throw ConfigError("epochs: expected three comma-separated values");
    for (int i = 0; i < 3; ++i) c.phase_epochs[i] = static_cast<int>(parse_int(key, parts[i]));
  } else if (key == "schedule_scale") {
    c.schedule_scale = parse_double(key, v);
  } else if (key == "lr") {
    const auto parts = split_list(v);
    if (parts.size() != 3) throw ConfigError("lr: expected three comma-separated values");
    for (int i = 0; i < 3; ++i) c.phase_lr[i] = parse_double(key, parts[i]);
  } else if (key == "momentum") {
    c.momentum = parse_double(key, v);
  } else if (key == "weight_decay") {
    c.weight_decay = parse_double(key, v);
  } else if (key == "clip_norm") {
    c.clip_norm = parse_double(key, v);
  } else if (key == "alpha") {
    c.hyper.alpha = parse_double(key, v);
  } else if (key == "beta") {
    c.hyper.beta = parse_double(key, v);
  } else if (key == "gamma") {
    c.hyper.gamma = parse_double(key, v);
  } else if (key == "max_weight") {
    c.hyper.max_weight = parse_double(key, v);
  } else if (key == "lambda_arm_loc") {
    c.hyper.lambda_arm_loc = parse_double(key, v);
  } else if (key == "lambda_arm_cls") {
    c.hyper.lambda_arm_cls = parse_double(key, v);
  } else if (key == "lambda_odm_loc") {
    c.hyper.lambda_odm_loc = parse_double(key, v);
  } else if (key == "lambda_odm_cls") {
    c.hyper.lambda_odm_cls = parse_double(key, v);
  } else if (key == "giou") {
    c.flags.giou = parse_bool(key, v);
  } else if (key == "iou_guided") {
    c.flags.iou_guided = parse_bool(key, v);
  } else if (key == "class_weights") {
    c.flags.class_weights = parse_bool(key, v);
  } else if (key == "multitask") {
    c.flags.multitask = parse_bool(key, v);
  } else if (key == "soft_nms") {
    c.soft_nms = parse_bool(key, v);
  } else if (key == "augment") {
    c.augment = parse_bool(key, v);
  } else if (key == "pos_threshold") {
    c.pos_threshold = parse_double(key, v);
  } else if (key == "neg_theta") {
    c.neg_theta = parse_double(key, v);
  } else if (key == "ohem_ratio") {
    c.ohem_ratio = parse_double(key, v);
  } else if (key == "seed") {
    const int64_t s = parse_int(key, v);
    if (s < 0) throw ConfigError("seed must be non-negative");
    c.seed = static_cast<uint64_t>(s);
  } else {
    throw ConfigError(fmt::format("unknown key '{}'", key));
  }
}

TrainConfig parse_config(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::stringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(fmt::format("line {}: expected key = value", line_no));
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) throw ConfigError(fmt::format("line {}: empty key or value", line_no));
    for (const auto& [k, _] : entries) {
      if (k == key) throw ConfigError(fmt::format("line {}: duplicate key '{}'", line_no, key));
    }
    entries.emplace_back(key, value);
  }
  TrainConfig c = make_preset("basic");
  for (const auto& [k, v] : entries) {
    if (k == "preset") c = make_preset(v);
  }
  for (const auto& [k, v] : entries) {
    if (k != "preset") set_config_value(c, k, v);
  }
  c.validate();
  return c;
}

TrainConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// ---- optimizer

double Sgd::step(double lr, double momentum, double weight_decay, double clip_norm, UncertaintyState* unc,
                 const std::array<double, 4>* d_log_var) {
  if (velocity_.size() != params_.size()) {
    velocity_.clear();
    for (Param* p : params_) velocity_.emplace_back(p->value.n(), p->value.c(), p->value.h(), p->value.w());
  }
  double sq = 0.0;
  for (Param* p : params_) {
    for (Real g : p->grad.values()) sq += double(g) * g;
  }
  if (d_log_var) {
    for (double g : *d_log_var) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double scale = clip_norm > 0.0 && norm > clip_norm ? clip_norm / norm : 1.0;
  for (size_t i = 0; i < params_.size(); ++i) {
    Param& p = *params_[i];
    Real* w = p.value.data();
    const Real* g = p.grad.data();
    Real* v = velocity_[i].data();
    const double wd = p.decay ? weight_decay : 0.0;
    for (size_t j = 0; j < p.value.size(); ++j) {
      const double gj = g[j] * scale + wd * w[j];
      v[j] = static_cast<Real>(momentum * v[j] + gj);
      w[j] = static_cast<Real>(w[j] - lr * v[j]);
    }
  }
  if (unc && d_log_var) {
    for (int k = 0; k < 4; ++k) {
      unc->momentum[k] = momentum * unc->momentum[k] + (*d_log_var)[k] * scale;
      unc->params.log_var[k] -= lr * unc->momentum[k];
    }
  }
  return norm;
}

// ---- checkpoint

namespace {

constexpr char kMagic[8] = {'R', 'D', 'L', 'C', 'K', 'P', 'T', '\0'};

class Writer {
 public:
  template <typename T>
  void pod(const T& v) {
    buf_.append(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void str(const std::string& s) {
    pod<uint64_t>(s.size());
    buf_ += s;
  }
  void tensor(const Tensor& t) {
    for (int d : {t.n(), t.c(), t.h(), t.w()}) pod<int32_t>(d);
    pod<uint8_t>(sizeof(Real));
    buf_.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(Real));
  }
  void tensors(const std::map<std::string, Tensor>& m) {
    pod<uint64_t>(m.size());
    for (const auto& [k, t] : m) {
      str(k);
      tensor(t);
    }
  }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(const std::string& b) : buf_(b) {}
  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const uint64_t n = pod<uint64_t>();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Tensor tensor() {
    int32_t d[4];
    for (int32_t& x : d) {
      x = pod<int32_t>();
      if (x < 0) throw std::runtime_error("checkpoint: corrupted tensor shape");
    }
    if (pod<uint8_t>() != sizeof(Real)) throw std::runtime_error("checkpoint: floating-point width differs from this build");
    Tensor t(d[0], d[1], d[2], d[3]);
    need(t.size() * sizeof(Real));
    std::memcpy(t.data(), buf_.data() + pos_, t.size() * sizeof(Real));
    pos_ += t.size() * sizeof(Real);
    return t;
  }
  std::map<std::string, Tensor> tensors() {
    std::map<std::string, Tensor> m;
    const uint64_t n = pod<uint64_t>();
    for (uint64_t i = 0; i < n; ++i) {
      std::string k = str();
      m.emplace(std::move(k), tensor());
    }
    return m;
  }
  size_t pos() const { return pos_; }

 private:
  void need(uint64_t n) const {
    if (n > buf_.size() - pos_) throw std::runtime_error("checkpoint: truncated or corrupted file");
  }
  const std::string& buf_;
  size_t pos_ = 0;
};

uint64_t fnv1a(const char* data, size_t n) {
  uint64_t h = 14695981039346656037ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const fs::path& path) {
  Writer w;
  w.buffer().append(kMagic, sizeof(kMagic));
  w.pod<uint32_t>(Checkpoint::kVersion);
  w.str(ck.config.to_text());
  w.pod<int32_t>(ck.num_classes);
  w.pod<uint64_t>(ck.category_ids.size());
  for (int64_t id : ck.category_ids) w.pod(id);
  w.pod<uint64_t>(ck.class_names.size());
  for (const auto& n : ck.class_names) w.str(n);
  w.pod<uint64_t>(ck.class_weights.w.size());
  for (double x : ck.class_weights.w) w.pod(x);
  w.tensors(ck.params);
  w.tensors(ck.buffers);
  w.tensors(ck.velocity);
  for (double x : ck.uncertainty.params.log_var) w.pod(x);
  for (double x : ck.uncertainty.momentum) w.pod(x);
  w.pod<int32_t>(ck.epoch);
  w.pod<int64_t>(ck.step);
  const uint64_t sum = fnv1a(w.buffer().data(), w.buffer().size());
  w.pod(sum);

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(in)), {});
  if (buf.size() < sizeof(kMagic) + 12 || std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a checkpoint: " + path.string());
  }
  uint64_t stored = 0;
  std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
  if (stored != fnv1a(buf.data(), buf.size() - 8)) throw std::runtime_error("checkpoint checksum mismatch: " + path.string());
  const std::string body = buf.substr(0, buf.size() - 8);
  Reader r(body);
  r.pod<std::array<char, 8>>();
  const uint32_t version = r.pod<uint32_t>();
  if (version != Checkpoint::kVersion) {
    throw std::runtime_error(fmt::format("checkpoint version {} unsupported (expected {})", version, Checkpoint::kVersion));
  }
  Checkpoint ck;
  ck.config = parse_config(r.str());
  ck.num_classes = r.pod<int32_t>();
  ck.category_ids.resize(r.pod<uint64_t>());
  for (auto& id : ck.category_ids) id = r.pod<int64_t>();
  ck.class_names.resize(r.pod<uint64_t>());
  for (auto& n : ck.class_names) n = r.str();
  ck.class_weights.w.resize(r.pod<uint64_t>());
  for (auto& x : ck.class_weights.w) x = r.pod<double>();
  ck.params = r.tensors();
  ck.buffers = r.tensors();
  ck.velocity = r.tensors();
  for (auto& x : ck.uncertainty.params.log_var) x = r.pod<double>();
  for (auto& x : ck.uncertainty.momentum) x = r.pod<double>();
  ck.epoch = r.pod<int32_t>();
  ck.step = r.pod<int64_t>();
  if (r.pos() != body.size()) throw std::runtime_error("checkpoint has trailing data");
  return ck;
}

namespace {

void copy_into(Tensor& dst, const std::map<std::string, Tensor>& src, const std::string& name) {
  const auto it = src.find(name);
  if (it == src.end()) throw std::runtime_error("checkpoint lacks " + name);
  if (!it->second.same_shape(dst)) {
    throw std::runtime_error(fmt::format("checkpoint shape mismatch for {}: {} vs {}", name, it->second.shape_string(),
                                         dst.shape_string()));
  }
  std::copy(it->second.data(), it->second.data() + dst.size(), dst.data());
}

}  // namespace

RefineDetLite model_from_checkpoint(const Checkpoint& ck) {
  RefineDetLite model(make_detector_config(ck.config.width, ck.num_classes, ck.config.input_size), ck.config.seed);
  ParamCollector pc;
  model.visit(pc);
  if (pc.params.size() != ck.params.size() || pc.buffers.size() != ck.buffers.size()) {
    throw std::runtime_error("checkpoint does not match the model architecture");
  }
  for (size_t i = 0; i < pc.params.size(); ++i) copy_into(pc.params[i]->value, ck.params, pc.names[i]);
  for (size_t i = 0; i < pc.buffers.size(); ++i) copy_into(*pc.buffers[i], ck.buffers, pc.buffer_names[i]);
  return model;
}

// ---- training

std::string metrics_json(const EpochMetrics& m) {
  nlohmann::ordered_json j;
  j["epoch"] = m.epoch;
  j["lr"] = m.lr;
  j["steps"] = m.steps;
  j["arm_loc"] = m.loss.arm_loc;
  j["arm_cls"] = m.loss.arm_cls;
  j["odm_loc"] = m.loss.odm_loc;
  j["odm_cls"] = m.loss.odm_cls;
  j["total"] = m.loss.total;
  j["sigma2"] = m.sigma2;
  j["grad_norm"] = m.grad_norm;
  j["odm_positives"] = m.odm_positives;
  return j.dump();
}

Trainer::Trainer(const TrainConfig& config, const CocoDataset& dataset)
    : config_(config),
      dataset_(&dataset),
      model_((config.validate(), make_detector_config(config.width, dataset.num_classes(), config.input_size)),
             config.seed) {
  weights_ = config_.flags.class_weights
                 ? rdl::class_weights(dataset.stats().counts, config_.hyper.gamma, config_.hyper.max_weight)
                 : ClassWeightTable::uniform(dataset.num_classes());
  init_optimizer();
}

Trainer::Trainer(const Checkpoint& ck, const CocoDataset& dataset)
    : config_(ck.config), dataset_(&dataset), model_(model_from_checkpoint(ck)) {
  if (ck.num_classes != dataset.num_classes()) {
    throw std::invalid_argument(fmt::format("checkpoint has {} classes, dataset has {}", ck.num_classes,
                                            dataset.num_classes()));
  }
  weights_ = ck.class_weights;
  uncertainty_ = ck.uncertainty;
  epoch_ = ck.epoch;
  step_ = ck.step;
  init_optimizer();
  if (!ck.velocity.empty()) {
    auto& vel = sgd_.velocity();
    vel.clear();
    for (size_t i = 0; i < params_.params.size(); ++i) {
      const Tensor& shape = params_.params[i]->value;
      vel.emplace_back(shape.n(), shape.c(), shape.h(), shape.w());
      copy_into(vel.back(), ck.velocity, params_.names[i]);
    }
  }
}

void Trainer::init_optimizer() {
  anchors_ = anchor_boxes(generate_anchors(model_.config().anchors, config_.input_size));
  loss_config_ = config_.loss_config(weights_);
  params_ = ParamCollector{};
  model_.visit(params_);
  sgd_ = Sgd(params_.params);
  cache_.assign(dataset_->records.size(), cv::Mat{});
}

const cv::Mat& Trainer::image(size_t index) {
  cv::Mat& m = cache_.at(index);
  if (m.empty()) m = read_image(dataset_->image_path(dataset_->records[index]));
  return m;
}

std::vector<size_t> Trainer::epoch_order(int epoch) const {
  std::vector<size_t> order(dataset_->records.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(sample_seed(config_.seed, epoch, -1));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

Trainer::Batch Trainer::make_batch(const std::vector<size_t>& indices, int epoch) {
  const int S = config_.input_size;
  Batch b{Tensor(static_cast<int>(indices.size()), 3, S, S), {}};
  AugmentConfig aug = config_.augment ? AugmentConfig{} : AugmentConfig::identity(S);
  aug.output_size = S;
  for (size_t i = 0; i < indices.size(); ++i) {
    const AnnotationRecord& rec = dataset_->records.at(indices[i]);
    const AugmentedSample s = augment(rec, image(indices[i]), aug, sample_seed(config_.seed, epoch, int64_t(indices[i])));
    image_to_tensor(s.image, b.images, static_cast<int>(i));
    ImageTargets t;
    for (size_t j = 0; j < s.boxes.size(); ++j) {
      const Box& p = s.boxes[j];
      t.boxes.push_back({p.x1 / S, p.y1 / S, p.x2 / S, p.y2 / S});
      t.labels.push_back(s.labels[j]);
    }
    b.targets.push_back(std::move(t));
  }
  return b;
}

LossBreakdown Trainer::batch_loss(const std::vector<size_t>& indices, int epoch) {
  Batch b = make_batch(indices, epoch);
  const HeadOutputs out = model_.forward(b.images, Mode::kTrain);
  DetectionLossResult r = detection_losses(out, anchors_, b.targets, loss_config_);
  combine_losses(r, loss_config_, uncertainty_.params);
  return r.breakdown;
}

LossBreakdown Trainer::train_step(const std::vector<size_t>& indices, int epoch) {
  Batch b = make_batch(indices, epoch);
  const HeadOutputs out = model_.forward(b.images, Mode::kTrain);
  DetectionLossResult r = detection_losses(out, anchors_, b.targets, loss_config_);
  std::array<double, 4> dlv{};
  combine_losses(r, loss_config_, uncertainty_.params, &dlv);
  if (!std::isfinite(r.breakdown.total)) {
    nlohmann::ordered_json dump;
    dump["epoch"] = epoch;
    dump["step"] = step_;
    dump["losses"] = {r.breakdown.arm_loc, r.breakdown.arm_cls, r.breakdown.odm_loc, r.breakdown.odm_cls};
    dump["log_var"] = uncertainty_.params.log_var;
    for (size_t i = 0; i < indices.size(); ++i) {
      nlohmann::ordered_json im;
      im["file_name"] = dataset_->records[indices[i]].file_name;
      im["boxes"] = nlohmann::json::array();
      for (const Box& bx : b.targets[i].boxes) im["boxes"].push_back({bx.x1, bx.y1, bx.x2, bx.y2});
      im["labels"] = b.targets[i].labels;
      dump["images"].push_back(im);
    }
    const fs::path where = (dump_dir_.empty() ? fs::temp_directory_path() : dump_dir_) / "nonfinite_batch.json";
    std::ofstream(where) << dump.dump(1) << '\n';
    throw NonFiniteLoss(fmt::format("non-finite loss at epoch {} step {}; batch dumped to {}", epoch, step_, where.string()));
  }
  model_.zero_grad();
  model_.backward(r.grad);
  last_grad_norm_ = sgd_.step(config_.lr_at_epoch(epoch), config_.momentum, config_.weight_decay, config_.clip_norm,
                              &uncertainty_, config_.flags.multitask ? &dlv : nullptr);
  last_positives_ = r.odm_positives;
  ++step_;
  return r.breakdown;
}

EpochMetrics Trainer::train_epoch() {
  const std::vector<size_t> order = epoch_order(epoch_);
  EpochMetrics m;
  m.lr = config_.lr_at_epoch(epoch_);
  const size_t B = static_cast<size_t>(config_.batch_size);
  for (size_t start = 0; start < order.size(); start += B) {
    const std::vector<size_t> idx(order.begin() + start, order.begin() + std::min(order.size(), start + B));
    const LossBreakdown l = train_step(idx, epoch_);
    m.loss.arm_loc += l.arm_loc;
    m.loss.arm_cls += l.arm_cls;
    m.loss.odm_loc += l.odm_loc;
    m.loss.odm_cls += l.odm_cls;
    m.loss.total += l.total;
    m.grad_norm += last_grad_norm_;
    m.odm_positives += last_positives_;
    ++m.steps;
  }
  if (m.steps > 0) {
    const double n = double(m.steps);
    m.loss.arm_loc /= n;
    m.loss.arm_cls /= n;
    m.loss.odm_loc /= n;
    m.loss.odm_cls /= n;
    m.loss.total /= n;
    m.grad_norm /= n;
  }
  for (int k = 0; k < 4; ++k) m.sigma2[k] = std::exp(uncertainty_.params.log_var[k]);
  ++epoch_;
  m.epoch = epoch_;
  return m;
}

void Trainer::run(const fs::path& out_dir, const std::function<void(const EpochMetrics&)>& on_epoch) {
  fs::create_directories(out_dir);
  dump_dir_ = out_dir;
  {
    std::ofstream cfg(out_dir / "config.cfg");
    cfg << config_.to_text();
  }
  std::ofstream log(out_dir / "metrics.jsonl", epoch_ == 0 ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("cannot write " + (out_dir / "metrics.jsonl").string());
  const auto phases = config_.scaled_epochs();
  const int total = config_.total_epochs();
  while (epoch_ < total) {
    const EpochMetrics m = train_epoch();
    log << metrics_json(m) << '\n';
    log.flush();
    if (on_epoch) on_epoch(m);
    int boundary = 0;
    for (int p = 0; p < 3; ++p) {
      boundary += phases[p];
      if (phases[p] > 0 && epoch_ == boundary) save_checkpoint(checkpoint(), out_dir / fmt::format("phase{}.ckpt", p + 1));
    }
  }
  save_checkpoint(checkpoint(), out_dir / "final.ckpt");
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ck;
  ck.config = config_;
  ck.num_classes = dataset_->num_classes();
  ck.category_ids = dataset_->category_ids;
  ck.class_names = dataset_->class_names;
  ck.class_weights = weights_;
  for (size_t i = 0; i < params_.params.size(); ++i) ck.params.emplace(params_.names[i], params_.params[i]->value);
  for (size_t i = 0; i < params_.buffers.size(); ++i) ck.buffers.emplace(params_.buffer_names[i], *params_.buffers[i]);
  const auto& vel = sgd_.velocity();
  for (size_t i = 0; i < vel.size(); ++i) ck.velocity.emplace(params_.names[i], vel[i]);
  ck.uncertainty = uncertainty_;
  ck.epoch = epoch_;
  ck.step = step_;
  return ck;
}

// ---- evaluation and benchmark

namespace {

void load_resized(const cv::Mat& bgr, Tensor& batch, int n) {
  cv::Mat resized;
  cv::resize(bgr, resized, cv::Size(batch.w(), batch.h()), 0, 0, cv::INTER_LINEAR);
  image_to_tensor(resized, batch, n);
}

}  // namespace

EvaluationOutput evaluate(RefineDetLite& model, const CocoDataset& dataset, const PostprocessConfig& post,
                          int batch_size) {
  const int K = model.config().num_classes;
  if (K != dataset.num_classes()) {
    throw std::invalid_argument(fmt::format("model has {} classes, dataset has {}", K, dataset.num_classes()));
  }
  if (batch_size < 1) throw std::invalid_argument("evaluate: batch size must be positive");
  const int S = model.config().input_size;
  const auto anchors = anchor_boxes(generate_anchors(model.config().anchors, S));
  EvaluationOutput out;
  const size_t N = dataset.records.size();
  for (size_t start = 0; start < N; start += size_t(batch_size)) {
    const size_t end = std::min(N, start + size_t(batch_size));
    Tensor x(static_cast<int>(end - start), 3, S, S);
    for (size_t i = start; i < end; ++i) {
      load_resized(read_image(dataset.image_path(dataset.records[i])), x, static_cast<int>(i - start));
    }
    const HeadOutputs o = model.forward(x, Mode::kEval);
    for (size_t i = start; i < end; ++i) {
      const AnnotationRecord& r = dataset.records[i];
      const auto dets = postprocess(o, static_cast<int>(i - start), anchors, post);
      out.images.push_back({r.image_id, r.boxes, r.labels, to_pixels(dets, r.width, r.height)});
    }
  }
  out.metrics = coco_map(out.images, K);
  return out;
}

std::vector<Detection> detect(RefineDetLite& model, const cv::Mat& bgr, const PostprocessConfig& post) {
  const int S = model.config().input_size;
  Tensor x(1, 3, S, S);
  load_resized(bgr, x, 0);
  const HeadOutputs o = model.forward(x, Mode::kEval);
  const auto anchors = anchor_boxes(generate_anchors(model.config().anchors, S));
  return to_pixels(postprocess(o, 0, anchors, post), bgr.cols, bgr.rows);
}

std::pair<int64_t, int64_t> detector_cost(RefineDetLite& model) {
  ParamCollector pc;
  model.visit(pc);
  int64_t params = 0;
  for (Param* p : pc.params) params += static_cast<int64_t>(p->value.size());
  const int S = model.config().input_size;
  model.forward(Tensor(1, 3, S, S), Mode::kEval);
  int64_t macs = 0;
  model.for_each_conv([&](const Conv2d& c) { macs += c.last_macs(); });
  return {params, macs};
}

BenchmarkReport benchmark(RefineDetLite& model, const std::vector<cv::Mat>& images, int n,
                          const PostprocessConfig& post, int warmup) {
  if (n < 10) throw std::invalid_argument("benchmark: need at least 10 images");
  if (images.empty()) throw std::invalid_argument("benchmark: no images");
  if (warmup < 0) throw std::invalid_argument("benchmark: negative warmup");
  openblas_set_num_threads(1);
  cv::setNumThreads(1);
  const int S = model.config().input_size;
  const auto anchors = anchor_boxes(generate_anchors(model.config().anchors, S));
  using Clock = std::chrono::steady_clock;
  auto ms = [](Clock::duration d) { return std::chrono::duration<double, std::milli>(d).count(); };
  std::vector<double> fwd, e2e;
  for (int i = 0; i < warmup + n; ++i) {
    const cv::Mat& img = images[static_cast<size_t>(i) % images.size()];
    const auto t0 = Clock::now();
    Tensor x(1, 3, S, S);
    load_resized(img, x, 0);
    const auto t1 = Clock::now();
    const HeadOutputs o = model.forward(x, Mode::kEval);
    const auto t2 = Clock::now();
    const auto dets = to_pixels(postprocess(o, 0, anchors, post), img.cols, img.rows);
    const auto t3 = Clock::now();
    if (i < warmup) continue;
    fwd.push_back(ms(t2 - t1));
    e2e.push_back(ms(t3 - t0));
  }
  auto stats = [](const std::vector<double>& v) {
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return std::pair{mean, std::sqrt(var / v.size())};
  };
  BenchmarkReport rep;
  rep.images = n;
  rep.warmup = warmup;
  std::tie(rep.forward_mean_ms, rep.forward_std_ms) = stats(fwd);
  std::tie(rep.end_to_end_mean_ms, rep.end_to_end_std_ms) = stats(e2e);
  std::tie(rep.params, rep.macs) = detector_cost(model);
  return rep;
}

}  // namespace rdl
