// Training loop, full-image inference and the arteriole/venule metrics.
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "avnet/checkpoint.hpp"
#include "avnet/data.hpp"
#include "avnet/model.hpp"
#include "avnet/ops.hpp"
#include "avnet/optim.hpp"

namespace avnet {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct Batch {
  Tensor<T> images;   // [B, 3, H, W]
  ClassMap labels;    // B x H x W
  Tensor<T> weights;  // [B, 1, H, W]
  std::vector<std::string> ids;
};

template <typename T>
Batch<T> make_batch(const std::vector<FundusSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("make_batch: no samples");
  const std::size_t h = samples[0].height(), w = samples[0].width(), plane = h * w;
  const std::size_t c = samples[0].image.dim(0);
  Batch<T> b;
  b.labels = ClassMap(samples.size(), h, w);
  std::vector<T> img, wts;
  img.reserve(samples.size() * c * plane);
  wts.reserve(samples.size() * plane);
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const auto& s = samples[n];
    if (s.height() != h || s.width() != w || s.image.dim(0) != c) {
      throw ShapeError("make_batch: sample " + s.id + " is " + shape_string(s.image.shape()) +
                       ", batch expects " + shape_string({c, h, w}));
    }
    img.insert(img.end(), s.image.values().begin(), s.image.values().end());
    wts.insert(wts.end(), s.weight_map.begin(), s.weight_map.end());
    std::copy(s.class_map.labels.begin(), s.class_map.labels.end(),
              b.labels.labels.begin() + static_cast<std::ptrdiff_t>(n * plane));
    b.ids.push_back(s.id);
  }
  b.images = Tensor<T>({samples.size(), c, h, w}, std::move(img));
  b.weights = Tensor<T>({samples.size(), 1, h, w}, std::move(wts));
  return b;
}

struct TrainConfig {
  std::size_t batch_size = 4;
  LrSchedule schedule;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0 disables intermediate checkpoints
  std::filesystem::path checkpoint_dir;
  CheckpointMeta meta;
};

struct TrainRecord {
  std::size_t iteration = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

template <typename T>
struct TrainResult {
  std::vector<TrainRecord> log;
  OptimizerState<T> optimizer;
  Checkpoint checkpoint;
};

using TrainCallback = std::function<void(const TrainRecord&)>;

// Order in which dataset items are visited during one epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  detail::seeded_shuffle(order, detail::splitmix64(seed ^ detail::splitmix64(epoch + 1)));
  return order;
}

inline std::uint64_t iteration_dropout_seed(std::uint64_t seed, std::size_t iteration) {
  return detail::splitmix64(seed + 0x5851f42d4c957f2dull * (iteration + 1));
}

template <typename T>
TrainResult<T> train(Network<T>& net, const AugmentedDataset& data, const TrainConfig& cfg,
                     const TrainCallback& on_iteration = {}) {
  if (data.size() == 0) throw std::invalid_argument("train: dataset is empty");
  if (cfg.batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  const std::size_t batch = std::min(cfg.batch_size, data.size());
  const std::size_t per_epoch = (data.size() + batch - 1) / batch;

  TrainResult<T> result{{}, OptimizerState<T>(cfg.optimizer), {}};
  auto params = net.parameters();
  net.zero_grad();
  std::vector<std::size_t> order;
  for (std::size_t it = 0; it < cfg.schedule.max_iter; ++it) {
    const std::size_t epoch = it / per_epoch, slot = it % per_epoch;
    if (slot == 0) order = epoch_order(data.size(), cfg.seed, epoch);
    std::vector<FundusSample> samples;
    for (std::size_t k = slot * batch; k < std::min(order.size(), (slot + 1) * batch); ++k) {
      samples.push_back(data[order[k]]);
    }
    const Batch<T> b = make_batch<T>(samples);
    const double lr = poly_lr(cfg.schedule, it);

    const Tensor<T> probs =
        net.forward(b.images, {Mode::Train, iteration_dropout_seed(cfg.seed, it)});
    Tensor<T> loss = weighted_cross_entropy(probs, b.labels, b.weights);
    const double value = static_cast<double>(loss.item());
    if (!std::isfinite(value)) {
      GradTape<T>::current().clear();
      std::string ids;
      for (const auto& id : b.ids) ids += (ids.empty() ? "" : ", ") + id;
      throw TrainingError("non-finite loss at iteration " + std::to_string(it) +
                          " (epoch " + std::to_string(epoch) + ", batch: " + ids + ")");
    }
    backward(loss);
    optimizer_step(params, result.optimizer, lr);

    const TrainRecord rec{it, epoch, lr, value};
    result.log.push_back(rec);
    if (on_iteration) on_iteration(rec);
    if (cfg.checkpoint_every && (it + 1) % cfg.checkpoint_every == 0 &&
        !cfg.checkpoint_dir.empty()) {
      CheckpointMeta meta = cfg.meta;
      meta.iteration = static_cast<std::int64_t>(it + 1);
      save_checkpoint(make_checkpoint(net, &result.optimizer, meta),
                      cfg.checkpoint_dir / ("iter_" + std::to_string(it + 1) + ".avnet"));
    }
  }
  CheckpointMeta meta = cfg.meta;
  meta.iteration = static_cast<std::int64_t>(cfg.schedule.max_iter);
  result.checkpoint = make_checkpoint(net, &result.optimizer, meta);
  return result;
}

inline std::string format_training_log(const std::vector<TrainRecord>& log) {
  std::string out = "iteration,epoch,lr,loss\n";
  char line[128];
  for (const auto& r : log) {
    std::snprintf(line, sizeof line, "%zu,%zu,%.17g,%.17g\n", r.iteration, r.epoch, r.lr, r.loss);
    out += line;
  }
  return out;
}

inline void write_training_log(const std::vector<TrainRecord>& log,
                               const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << format_training_log(log);
}

// Pixel tallies over ground-truth arteriole and venule pixels.
// fp_at: truth venule, predicted arteriole. fp_ve: truth arteriole,
// predicted venule. missed_*: vessel pixel predicted background or
// intersection; kept out of the ratios.
struct ConfusionCounts {
  std::uint64_t tp_at = 0;
  std::uint64_t fp_at = 0;
  std::uint64_t tp_ve = 0;
  std::uint64_t fp_ve = 0;
  std::uint64_t missed_at = 0;
  std::uint64_t missed_ve = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp_at += o.tp_at;
    fp_at += o.fp_at;
    tp_ve += o.tp_ve;
    fp_ve += o.fp_ve;
    missed_at += o.missed_at;
    missed_ve += o.missed_ve;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
  std::uint64_t evaluable() const { return tp_at + fp_at + tp_ve + fp_ve + missed_at + missed_ve; }
};

template <typename T>
ConfusionCounts count_confusion(const Tensor<T>& probs, const ClassMap& truth) {
  if (probs.rank() != 4 || probs.dim(0) != truth.batch || probs.dim(2) != truth.height ||
      probs.dim(3) != truth.width) {
    throw ShapeError("count_confusion: probabilities " + shape_string(probs.shape()) +
                     " do not match labels " +
                     shape_string({truth.batch, truth.height, truth.width}));
  }
  const std::size_t k = probs.dim(1), plane = truth.height * truth.width;
  const auto& p = probs.values();
  const auto at = class_index(ClassId::Arteriole), ve = class_index(ClassId::Venule);
  ConfusionCounts c;
  for (std::size_t n = 0; n < truth.batch; ++n) {
    for (std::size_t i = 0; i < plane; ++i) {
      const auto t = truth.labels[n * plane + i];
      if (t != at && t != ve) continue;
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j) {
        if (p[(n * k + j) * plane + i] > p[(n * k + best) * plane + i]) best = j;
      }
      if (t == at) {
        if (best == at) ++c.tp_at;
        else if (best == ve) ++c.fp_ve;
        else ++c.missed_at;
      } else {
        if (best == ve) ++c.tp_ve;
        else if (best == at) ++c.fp_at;
        else ++c.missed_ve;
      }
    }
  }
  return c;
}

struct Metrics {
  double tpr_at = std::numeric_limits<double>::quiet_NaN();
  double tpr_ve = std::numeric_limits<double>::quiet_NaN();
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::string> undefined;
  // TP / (TP + FN), reported when asked for.
  std::optional<double> recall_at;
  std::optional<double> recall_ve;
};

inline Metrics metrics(const ConfusionCounts& c, bool with_recall = false) {
  Metrics m;
  auto ratio = [&](std::uint64_t num, std::uint64_t den, double& out, const char* name) {
    if (den == 0) {
      m.undefined.emplace_back(name);
      return;
    }
    out = static_cast<double>(num) / static_cast<double>(den);
  };
  ratio(c.tp_at, c.tp_at + c.fp_at, m.tpr_at, "tpr_at");
  ratio(c.tp_ve, c.tp_ve + c.fp_ve, m.tpr_ve, "tpr_ve");
  ratio(c.tp_ve + c.tp_at, c.tp_ve + c.fp_ve + c.tp_at + c.fp_at, m.accuracy, "accuracy");
  if (with_recall) {
    double r = std::numeric_limits<double>::quiet_NaN();
    ratio(c.tp_at, c.tp_at + c.fp_ve + c.missed_at, r, "recall_at");
    m.recall_at = r;
    r = std::numeric_limits<double>::quiet_NaN();
    ratio(c.tp_ve, c.tp_ve + c.fp_at + c.missed_ve, r, "recall_ve");
    m.recall_ve = r;
  }
  return m;
}

enum class PadMode { Reflect, Zero };

inline std::size_t round_up(std::size_t n, std::size_t multiple) {
  return (n + multiple - 1) / multiple * multiple;
}

// Mirror index without repeating the edge sample: -1 -> 1, n -> n-2.
inline std::size_t reflect_index(long long i, std::size_t n) {
  if (n == 1) return 0;
  const long long period = 2 * static_cast<long long>(n) - 2;
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < static_cast<long long>(n) ? i : period - i);
}

// [C, H, W] -> [1, C, H', W'] with H', W' rounded up to `multiple`; the
// extra rows and columns are added at the bottom and right.
template <typename T>
Tensor<T> pad_image(const Tensor<float>& image, std::size_t multiple, PadMode mode) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::size_t ph = round_up(h, multiple), pw = round_up(w, multiple);
  std::vector<T> out(c * ph * pw, T(0));
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < ph; ++y)
      for (std::size_t x = 0; x < pw; ++x) {
        if (mode == PadMode::Zero && (y >= h || x >= w)) continue;
        const std::size_t sy = reflect_index(static_cast<long long>(y), h);
        const std::size_t sx = reflect_index(static_cast<long long>(x), w);
        out[(ch * ph + y) * pw + x] = static_cast<T>(image.at(ch, sy, sx));
      }
  return Tensor<T>({1, c, ph, pw}, std::move(out));
}

template <typename T>
Tensor<T> crop_top_left(const Tensor<T>& t, std::size_t h, std::size_t w) {
  const std::size_t n = t.dim(0), c = t.dim(1), th = t.dim(2), tw = t.dim(3);
  std::vector<T> out(n * c * h * w);
  const auto& v = t.values();
  for (std::size_t i = 0; i < n * c; ++i)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(i * h + y) * w + x] = v[(i * th + y) * tw + x];
  return Tensor<T>({n, c, h, w}, std::move(out));
}

struct InferenceOptions {
  PadMode pad = PadMode::Reflect;
};

// Eval-mode class probabilities [1, K, H, W] for a full image of any size.
template <typename T>
Tensor<T> predict_probabilities(Network<T>& net, const Tensor<float>& image,
                                const InferenceOptions& opts = {}) {
  NoGradGuard<T> no_grad;
  std::size_t multiple = 1;
  for (const auto& n : net.graph().nodes())
    if (n.require_even_input) multiple *= 2;
  const Tensor<T> padded = pad_image<T>(image, multiple, opts.pad);
  const Tensor<T> probs = net.forward(padded, {Mode::Eval, 0});
  return crop_top_left(probs, image.dim(1), image.dim(2));
}

struct EvalResult {
  ConfusionCounts counts;
  Metrics metrics;
  std::size_t samples = 0;
};

template <typename T>
EvalResult evaluate(Network<T>& net, const std::vector<FundusSample>& samples,
                    const InferenceOptions& opts = {}, bool with_recall = false) {
  EvalResult r;
  for (const auto& s : samples) {
    const Tensor<T> probs = predict_probabilities(net, s.image, opts);
    r.counts += count_confusion(probs, s.class_map);
    ++r.samples;
  }
  if (r.counts.evaluable() == 0) {
    throw std::invalid_argument("evaluate: no arteriole or venule pixels to score");
  }
  r.metrics = metrics(r.counts, with_recall);
  return r;
}

inline nlohmann::json metrics_json(const EvalResult& r) {
  auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
  nlohmann::json j{
      {"tpr_at", num(r.metrics.tpr_at)},
      {"tpr_ve", num(r.metrics.tpr_ve)},
      {"accuracy", num(r.metrics.accuracy)},
      {"missed_at", r.counts.missed_at},
      {"missed_ve", r.counts.missed_ve},
      {"counts",
       {{"tp_at", r.counts.tp_at},
        {"fp_at", r.counts.fp_at},
        {"tp_ve", r.counts.tp_ve},
        {"fp_ve", r.counts.fp_ve},
        {"evaluable_pixels", r.counts.evaluable()}}},
      {"samples", r.samples},
      {"undefined", r.metrics.undefined},
  };
  if (r.metrics.recall_at) j["recall_at"] = num(*r.metrics.recall_at);
  if (r.metrics.recall_ve) j["recall_ve"] = num(*r.metrics.recall_ve);
  return j;
}

}  // namespace avnet
