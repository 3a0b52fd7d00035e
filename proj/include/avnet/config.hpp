// Run configuration and dataset manifest, both JSON. Unknown keys are
// rejected so that typos never fall back to defaults silently.
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "avnet/data.hpp"
#include "avnet/model.hpp"
#include "avnet/optim.hpp"
#include "avnet/train.hpp"

namespace avnet {

using nlohmann::json;

struct TrainingConfig {
  std::size_t batch_size = 4;
  std::size_t checkpoint_every = 0;
  std::size_t folds = 5;
  std::size_t fold = 0;
};

struct SyntheticConfig {
  std::size_t count = 0;  // > 0 replaces the manifest with generated samples
  std::size_t size = 64;
  std::size_t validation = 0;
};

struct EvalConfig {
  PadMode padding = PadMode::Reflect;
  bool report_recall = false;
};

struct RunConfig {
  ModelConfig model;
  AugmentationConfig augmentation;
  LrSchedule schedule;
  OptimizerConfig optimizer;
  ClassWeights class_weights;
  TrainingConfig training;
  std::string manifest;
  SyntheticConfig synthetic;
  std::string output_dir = "runs";
  std::uint64_t seed = 0;
  EvalConfig eval;
};

namespace detail {

class JsonReader {
 public:
  JsonReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  // Parsed text yields unsigned numbers; json built in code may hold
  // signed ones.
  static bool non_negative_integer(const json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  }

  // Call after all fields were read.
  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown key '" + key + "' in " + where());
    }
  }

  template <typename V>
  void read(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<V, bool>) {
        if (!v.is_boolean()) throw ConfigError("expected true or false");
      } else if constexpr (std::is_unsigned_v<V>) {
        if (!non_negative_integer(v)) throw ConfigError("expected a non-negative integer");
      } else if constexpr (std::is_floating_point_v<V>) {
        if (!v.is_number()) throw ConfigError("expected a number");
      } else if constexpr (std::is_same_v<V, std::string>) {
        if (!v.is_string()) throw ConfigError("expected a string");
      } else if constexpr (std::is_same_v<V, std::vector<std::size_t>>) {
        if (!v.is_array()) throw ConfigError("expected an array of non-negative integers");
        for (const auto& e : v)
          if (!non_negative_integer(e)) throw ConfigError("expected an array of non-negative integers");
      }
      out = v.get<V>();
    } catch (const ConfigError& e) {
      throw ConfigError(field(key) + ": " + e.what());
    }
  }

  // Nested object, or nullptr when absent.
  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string field(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline ModelConfig model_config_from_json(const json& j, const std::string& path = "model") {
  ModelConfig m;
  detail::JsonReader r(j, path);
  r.read("encoder_channels", m.encoder_channels);
  r.read("decoder_channels", m.decoder_channels);
  r.read("num_classes", m.num_classes);
  r.read("input_channels", m.input_channels);
  r.read("dropout_rate", m.dropout_rate);
  bool cdc_given = false;
  if (const json* c = r.child("cdc")) {
    detail::JsonReader rc(*c, r.field("cdc"));
    rc.read("channels", m.cdc.channels);
    rc.read("dilation_rates", m.cdc.dilation_rates);
    rc.read("batch_norm", m.cdc.batch_norm);
    rc.finish();
    cdc_given = c->contains("channels");
  }
  r.finish();
  // The bottleneck width follows the last encoder stage unless set.
  if (!cdc_given) m.cdc.channels = m.encoder_channels.empty() ? 0 : m.encoder_channels.back();
  m.validate();
  return m;
}

inline json to_json(const ModelConfig& m) {
  return json{{"encoder_channels", m.encoder_channels},
              {"decoder_channels", m.decoder_channels},
              {"num_classes", m.num_classes},
              {"input_channels", m.input_channels},
              {"dropout_rate", m.dropout_rate},
              {"cdc",
               {{"channels", m.cdc.channels},
                {"dilation_rates", m.cdc.dilation_rates},
                {"batch_norm", m.cdc.batch_norm}}}};
}

inline RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  detail::JsonReader r(j, "");
  if (const json* m = r.child("model")) c.model = model_config_from_json(*m);
  if (const json* a = r.child("augmentation")) {
    detail::JsonReader ra(*a, "augmentation");
    auto& g = c.augmentation;
    ra.read("enabled", g.enabled);
    ra.read("crop_size", g.crop_size);
    ra.read("scale_min", g.scale_min);
    ra.read("scale_max", g.scale_max);
    ra.read("max_pan", g.max_pan);
    ra.read("horizontal_flip", g.horizontal_flip);
    ra.read("vertical_flip", g.vertical_flip);
    ra.read("multiplier", g.multiplier);
    ra.read("seed", g.seed);
    ra.finish();
    if (g.crop_size == 0) throw ConfigError("augmentation.crop_size must be positive");
    if (!(g.scale_min > 0.0 && g.scale_min <= g.scale_max)) {
      throw ConfigError("augmentation.scale_min must be positive and not above scale_max");
    }
    if (g.max_pan < 0.0) throw ConfigError("augmentation.max_pan must be non-negative");
    if (g.multiplier == 0) throw ConfigError("augmentation.multiplier must be positive");
  }
  if (const json* s = r.child("schedule")) {
    detail::JsonReader rs(*s, "schedule");
    rs.read("base_lr", c.schedule.base_lr);
    rs.read("power", c.schedule.power);
    rs.read("max_iter", c.schedule.max_iter);
    rs.finish();
    if (!(c.schedule.base_lr > 0.0)) throw ConfigError("schedule.base_lr must be positive");
    if (c.schedule.power < 0.0) throw ConfigError("schedule.power must be non-negative");
  }
  if (const json* o = r.child("optimizer")) {
    detail::JsonReader ro(*o, "optimizer");
    std::string kind = std::string(optimizer_name(c.optimizer.kind));
    ro.read("kind", kind);
    if (kind == "momentum") c.optimizer.kind = OptimizerKind::Momentum;
    else if (kind == "adam") c.optimizer.kind = OptimizerKind::Adam;
    else throw ConfigError("optimizer.kind: expected \"momentum\" or \"adam\", got \"" + kind + "\"");
    ro.read("momentum", c.optimizer.momentum);
    ro.read("beta1", c.optimizer.beta1);
    ro.read("beta2", c.optimizer.beta2);
    ro.read("epsilon", c.optimizer.epsilon);
    ro.finish();
    if (c.optimizer.momentum < 0.0 || c.optimizer.momentum >= 1.0) {
      throw ConfigError("optimizer.momentum must be in [0, 1)");
    }
  }
  if (const json* w = r.child("class_weights")) {
    detail::JsonReader rw(*w, "class_weights");
    for (std::uint8_t k = 0; k < kNumClasses; ++k) {
      const std::string name(class_name(k));
      rw.read(name.c_str(), c.class_weights.values[k]);
      if (!(c.class_weights.values[k] >= 0.0)) {
        throw ConfigError("class_weights." + name + " must be non-negative");
      }
    }
    rw.finish();
  }
  if (const json* t = r.child("training")) {
    detail::JsonReader rt(*t, "training");
    rt.read("batch_size", c.training.batch_size);
    rt.read("checkpoint_every", c.training.checkpoint_every);
    rt.read("folds", c.training.folds);
    rt.read("fold", c.training.fold);
    rt.finish();
    if (c.training.batch_size == 0) throw ConfigError("training.batch_size must be positive");
    if (c.training.folds < 2) throw ConfigError("training.folds must be at least 2");
    if (c.training.fold >= c.training.folds) {
      throw ConfigError("training.fold must be below training.folds");
    }
  }
  r.read("manifest", c.manifest);
  if (const json* s = r.child("synthetic")) {
    detail::JsonReader rs(*s, "synthetic");
    rs.read("count", c.synthetic.count);
    rs.read("size", c.synthetic.size);
    rs.read("validation", c.synthetic.validation);
    rs.finish();
    if (c.synthetic.size < 32) throw ConfigError("synthetic.size must be at least 32");
  }
  r.read("output_dir", c.output_dir);
  r.read("seed", c.seed);
  if (const json* e = r.child("eval")) {
    detail::JsonReader re(*e, "eval");
    std::string pad = "reflect";
    re.read("padding", pad);
    if (pad == "reflect") c.eval.padding = PadMode::Reflect;
    else if (pad == "zero") c.eval.padding = PadMode::Zero;
    else throw ConfigError("eval.padding: expected \"reflect\" or \"zero\", got \"" + pad + "\"");
    re.read("report_recall", c.eval.report_recall);
    re.finish();
  }
  r.finish();
  return c;
}

inline json to_json(const RunConfig& c) {
  const auto& a = c.augmentation;
  json weights = json::object();
  for (std::uint8_t k = 0; k < kNumClasses; ++k) {
    weights[std::string(class_name(k))] = c.class_weights.values[k];
  }
  return json{
      {"model", to_json(c.model)},
      {"augmentation",
       {{"enabled", a.enabled},
        {"crop_size", a.crop_size},
        {"scale_min", a.scale_min},
        {"scale_max", a.scale_max},
        {"max_pan", a.max_pan},
        {"horizontal_flip", a.horizontal_flip},
        {"vertical_flip", a.vertical_flip},
        {"multiplier", a.multiplier},
        {"seed", a.seed}}},
      {"schedule",
       {{"base_lr", c.schedule.base_lr},
        {"power", c.schedule.power},
        {"max_iter", c.schedule.max_iter}}},
      {"optimizer",
       {{"kind", optimizer_name(c.optimizer.kind)},
        {"momentum", c.optimizer.momentum},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"epsilon", c.optimizer.epsilon}}},
      {"class_weights", weights},
      {"training",
       {{"batch_size", c.training.batch_size},
        {"checkpoint_every", c.training.checkpoint_every},
        {"folds", c.training.folds},
        {"fold", c.training.fold}}},
      {"manifest", c.manifest},
      {"synthetic",
       {{"count", c.synthetic.count},
        {"size", c.synthetic.size},
        {"validation", c.synthetic.validation}}},
      {"output_dir", c.output_dir},
      {"seed", c.seed},
      {"eval",
       {{"padding", c.eval.padding == PadMode::Reflect ? "reflect" : "zero"},
        {"report_recall", c.eval.report_recall}}},
  };
}

inline json read_json_file(const std::filesystem::path& path, const char* what) {
  std::ifstream f(path);
  if (!f) throw ConfigError(std::string(what) + " not found: " + path.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string(what) + " " + path.string() + " is not valid JSON: " + e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  return run_config_from_json(read_json_file(path, "config"));
}

// 64-bit FNV-1a of the canonical JSON text, as 16 hex digits.
inline std::string config_hash(const RunConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(detail::hash_string(to_json(c).dump())));
  return buf;
}

struct ManifestEntry {
  std::string id;
  std::filesystem::path image;
  std::filesystem::path label;
  std::string split = "train";  // "train" or "test"
};

struct Manifest {
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> entries;

  std::vector<std::string> ids(const std::string& split) const {
    std::vector<std::string> out;
    for (const auto& e : entries)
      if (e.split == split) out.push_back(e.id);
    return out;
  }
  const ManifestEntry& entry(const std::string& id) const {
    for (const auto& e : entries)
      if (e.id == id) return e;
    throw ConfigError("manifest has no sample " + id);
  }
};

// {"seed": N, "samples": [{"id", "image", "label", "split"}]}. Paths are
// relative to the manifest's directory; "label" defaults to <id>_av.png
// next to the image.
inline Manifest load_manifest(const std::filesystem::path& path) {
  const json j = read_json_file(path, "manifest");
  detail::JsonReader r(j, "manifest");
  Manifest m;
  r.read("seed", m.seed);
  const json* samples = r.child("samples");
  r.finish();
  if (!samples || !samples->is_array()) throw ConfigError("manifest.samples must be an array");
  const auto base = path.parent_path();
  std::set<std::string> ids;
  for (std::size_t i = 0; i < samples->size(); ++i) {
    detail::JsonReader rs((*samples)[i], "manifest.samples[" + std::to_string(i) + "]");
    ManifestEntry e;
    std::string image, label;
    rs.read("id", e.id);
    rs.read("image", image);
    rs.read("label", label);
    rs.read("split", e.split);
    rs.finish();
    if (image.empty()) throw ConfigError(rs.field("image") + " is required");
    e.image = base / image;
    if (e.id.empty()) e.id = e.image.stem().string();
    e.label = label.empty() ? e.image.parent_path() / (e.image.stem().string() + "_av.png")
                            : base / label;
    if (e.split != "train" && e.split != "test") {
      throw ConfigError(rs.field("split") + ": expected \"train\" or \"test\"");
    }
    if (!ids.insert(e.id).second) throw ConfigError("manifest lists sample " + e.id + " twice");
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline json to_json(const Manifest& m, const std::filesystem::path& base) {
  json samples = json::array();
  for (const auto& e : m.entries) {
    samples.push_back({{"id", e.id},
                       {"image", std::filesystem::relative(e.image, base).generic_string()},
                       {"label", std::filesystem::relative(e.label, base).generic_string()},
                       {"split", e.split}});
  }
  return json{{"seed", m.seed}, {"samples", samples}};
}

}  // namespace avnet
