// Fundus samples: label palette codec, class weight maps, paired geometric
// augmentation, case-level fold splits and a synthetic vessel generator.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "avnet/image_io.hpp"
#include "avnet/labels.hpp"
#include "avnet/model.hpp"
#include "avnet/tensor.hpp"

namespace avnet {

class LabelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Annotation colours. White marks uncertain pixels.
inline constexpr Rgb kBackgroundColor{0, 0, 0};
inline constexpr Rgb kArterioleColor{255, 0, 0};
inline constexpr Rgb kVenuleColor{0, 0, 255};
inline constexpr Rgb kIntersectionColor{0, 255, 0};
inline constexpr Rgb kIgnoreColor{255, 255, 255};

inline constexpr std::array<Rgb, kNumClasses> kClassColors{
    kBackgroundColor, kArterioleColor, kVenuleColor, kIntersectionColor};

inline Rgb label_color(std::uint8_t label) {
  if (label == kIgnore) return kIgnoreColor;
  return kClassColors.at(label);
}

enum class LabelDecodeMode { Strict, Nearest };

struct EncodedLabels {
  ClassMap class_map;                // 1 x H x W
  std::vector<std::uint8_t> ignore;  // 1 where the pixel is uncertain
};

inline EncodedLabels encode_labels(const RgbImage& label,
                                   LabelDecodeMode mode = LabelDecodeMode::Strict) {
  EncodedLabels out{ClassMap(1, label.height, label.width), {}};
  out.ignore.assign(label.width * label.height, 0);
  std::map<Rgb, std::pair<std::size_t, std::size_t>> unknown;  // colour -> first (x, y)
  for (std::size_t i = 0; i < label.width * label.height; ++i) {
    const Rgb c = label.get(i);
    std::optional<std::uint8_t> cls;
    if (c == kIgnoreColor) {
      cls = kIgnore;
    } else {
      for (std::size_t k = 0; k < kNumClasses; ++k) {
        if (c == kClassColors[k]) cls = static_cast<std::uint8_t>(k);
      }
    }
    if (!cls && mode == LabelDecodeMode::Nearest) {
      int best = std::numeric_limits<int>::max();
      for (std::uint8_t k : {std::uint8_t{0}, std::uint8_t{1}, std::uint8_t{2}, std::uint8_t{3},
                             kIgnore}) {
        const Rgb p = label_color(k);
        int d = 0;
        for (int ch = 0; ch < 3; ++ch) d += (c[ch] - p[ch]) * (c[ch] - p[ch]);
        if (d < best) {
          best = d;
          cls = k;
        }
      }
    }
    if (!cls) {
      unknown.emplace(c, std::make_pair(i % label.width, i / label.width));
      continue;
    }
    out.class_map.labels[i] = *cls;
    out.ignore[i] = *cls == kIgnore;
  }
  if (!unknown.empty()) {
    std::ostringstream msg;
    msg << unknown.size() << " unrecognized label colour(s):";
    std::size_t shown = 0;
    for (const auto& [c, at] : unknown) {
      if (shown++ == 8) {
        msg << " ...";
        break;
      }
      msg << " (" << int(c[0]) << "," << int(c[1]) << "," << int(c[2]) << ") first at x="
          << at.first << " y=" << at.second << ";";
    }
    throw LabelError(msg.str());
  }
  return out;
}

inline RgbImage class_map_to_rgb(const ClassMap& map, std::size_t n = 0) {
  RgbImage img(map.width, map.height);
  for (std::size_t y = 0; y < map.height; ++y)
    for (std::size_t x = 0; x < map.width; ++x) img.set(x, y, label_color(map.at(n, y, x)));
  return img;
}

// Per-class loss weights, indexed by ClassId.
struct ClassWeights {
  std::array<double, kNumClasses> values{1.0, 5.0, 5.0, 1e-12};

  double operator[](std::uint8_t label) const {
    return label == kIgnore ? 0.0 : values.at(label);
  }
};

inline std::vector<float> class_weight_map(const ClassMap& map, const ClassWeights& weights) {
  for (double w : weights.values) {
    if (w < 0.0 || !std::isfinite(w)) throw std::invalid_argument("class weights must be finite and non-negative");
  }
  std::vector<float> out(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) {
    out[i] = static_cast<float>(weights[map.labels[i]]);
  }
  return out;
}

struct FundusSample {
  std::string id;
  Tensor<float> image;  // [3, H, W], values in [0, 1]
  ClassMap class_map;   // 1 x H x W
  std::vector<float> weight_map;

  std::size_t height() const { return class_map.height; }
  std::size_t width() const { return class_map.width; }

  std::vector<std::uint8_t> ignore_mask() const {
    std::vector<std::uint8_t> mask(class_map.size());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = class_map.labels[i] == kIgnore;
    return mask;
  }
};

inline Tensor<float> image_to_tensor(const RgbImage& img) {
  const std::size_t plane = img.width * img.height;
  std::vector<float> data(3 * plane);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) data[c * plane + i] = img.pixels[3 * i + c] / 255.0f;
  return Tensor<float>({3, img.height, img.width}, std::move(data));
}

inline RgbImage tensor_to_image(const Tensor<float>& t) {
  const std::size_t h = t.dim(1), w = t.dim(2), plane = h * w;
  RgbImage img(w, h);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = std::clamp(t[c * plane + i], 0.0f, 1.0f);
      img.pixels[3 * i + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  return img;
}

inline FundusSample make_sample(std::string id, const RgbImage& image, const RgbImage& label,
                                const ClassWeights& weights = {},
                                LabelDecodeMode mode = LabelDecodeMode::Strict) {
  if (image.width != label.width || image.height != label.height) {
    throw LabelError("image " + id + " is " + std::to_string(image.width) + "x" +
                     std::to_string(image.height) + " but its label map is " +
                     std::to_string(label.width) + "x" + std::to_string(label.height));
  }
  FundusSample s;
  s.id = std::move(id);
  s.image = image_to_tensor(image);
  s.class_map = encode_labels(label, mode).class_map;
  s.weight_map = class_weight_map(s.class_map, weights);
  return s;
}

inline FundusSample load_sample(const std::filesystem::path& image_path,
                                const std::filesystem::path& label_path,
                                const ClassWeights& weights = {},
                                LabelDecodeMode mode = LabelDecodeMode::Strict) {
  return make_sample(image_path.stem().string(), read_png(image_path), read_png(label_path),
                     weights, mode);
}

inline void save_sample(const FundusSample& s, const std::filesystem::path& image_path,
                        const std::filesystem::path& label_path) {
  write_png(image_path, tensor_to_image(s.image));
  write_png(label_path, class_map_to_rgb(s.class_map));
}

struct AugmentationConfig {
  bool enabled = true;
  std::size_t crop_size = 512;
  double scale_min = 0.8;
  double scale_max = 1.25;
  double max_pan = 0.1;  // fraction of the source extent
  bool horizontal_flip = true;
  bool vertical_flip = true;
  std::size_t multiplier = 83;
  std::uint64_t seed = 0;
};

struct AugmentParams {
  double scale = 1.0;
  double pan_x = 0.0;  // source pixels
  double pan_y = 0.0;
  bool flip_h = false;
  bool flip_v = false;
};

namespace detail {

inline std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline double unit_draw(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace detail

// Each draw gets its own stream derived from (seed, source id, draw index).
inline AugmentParams draw_augment_params(const AugmentationConfig& cfg, std::string_view source_id,
                                         std::size_t source_w, std::size_t source_h,
                                         std::size_t draw_index) {
  std::mt19937_64 rng(detail::splitmix64(cfg.seed ^ detail::splitmix64(
                                             detail::hash_string(source_id) + draw_index)));
  AugmentParams p;
  const double u = detail::unit_draw(rng);
  // Log-uniform so that zoom in and zoom out are equally likely.
  p.scale = std::exp(std::log(cfg.scale_min) + u * (std::log(cfg.scale_max) - std::log(cfg.scale_min)));
  p.pan_x = (2.0 * detail::unit_draw(rng) - 1.0) * cfg.max_pan * static_cast<double>(source_w);
  p.pan_y = (2.0 * detail::unit_draw(rng) - 1.0) * cfg.max_pan * static_cast<double>(source_h);
  p.flip_h = cfg.horizontal_flip && detail::unit_draw(rng) < 0.5;
  p.flip_v = cfg.vertical_flip && detail::unit_draw(rng) < 0.5;
  return p;
}

// Source coordinate (pixel centres at integers) seen by output pixel (x, y)
// of a crop_size x crop_size window.
inline std::array<double, 2> source_coordinate(const AugmentParams& p, std::size_t source_w,
                                               std::size_t source_h, std::size_t crop_size,
                                               std::size_t x, std::size_t y) {
  const double c = static_cast<double>(crop_size);
  const double ox = p.flip_h ? c - 1.0 - static_cast<double>(x) : static_cast<double>(x);
  const double oy = p.flip_v ? c - 1.0 - static_cast<double>(y) : static_cast<double>(y);
  const double off_x = std::floor((static_cast<double>(source_w) - c) / 2.0);
  const double off_y = std::floor((static_cast<double>(source_h) - c) / 2.0);
  const double sx = off_x + c / 2.0 - 0.5 + (ox + 0.5 - c / 2.0) / p.scale + p.pan_x;
  const double sy = off_y + c / 2.0 - 0.5 + (oy + 0.5 - c / 2.0) / p.scale + p.pan_y;
  return {sx, sy};
}

// Resamples image (bilinear) and labels/weights (nearest) through one
// geometric transform. Pixels that land outside the source become black
// background.
inline FundusSample apply_augment(const FundusSample& s, const AugmentParams& p,
                                  std::size_t crop_size) {
  const std::size_t w = s.width(), h = s.height(), plane = w * h;
  const std::size_t out_plane = crop_size * crop_size;
  float background_weight = 1.0f;
  for (std::size_t i = 0; i < plane; ++i) {
    if (s.class_map.labels[i] == class_index(ClassId::Background)) {
      background_weight = s.weight_map[i];
      break;
    }
  }
  FundusSample out;
  out.id = s.id;
  out.class_map = ClassMap(1, crop_size, crop_size);
  out.weight_map.assign(out_plane, background_weight);
  std::vector<float> img(3 * out_plane, 0.0f);
  const auto& src = s.image.values();
  auto pixel = [&](std::size_t c, long long yy, long long xx) -> float {
    if (xx < 0 || yy < 0 || xx >= static_cast<long long>(w) || yy >= static_cast<long long>(h)) {
      return 0.0f;
    }
    return src[c * plane + static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
  };
  for (std::size_t y = 0; y < crop_size; ++y) {
    for (std::size_t x = 0; x < crop_size; ++x) {
      const auto [sx, sy] = source_coordinate(p, w, h, crop_size, x, y);
      const std::size_t o = y * crop_size + x;
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const double fx = sx - fx0, fy = sy - fy0;
      const auto x0 = static_cast<long long>(fx0), y0 = static_cast<long long>(fy0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (1.0 - fy) * ((1.0 - fx) * pixel(c, y0, x0) + fx * pixel(c, y0, x0 + 1)) +
                         fy * ((1.0 - fx) * pixel(c, y0 + 1, x0) + fx * pixel(c, y0 + 1, x0 + 1));
        img[c * out_plane + o] = static_cast<float>(v);
      }
      const auto nx = static_cast<long long>(std::floor(sx + 0.5));
      const auto ny = static_cast<long long>(std::floor(sy + 0.5));
      if (nx >= 0 && ny >= 0 && nx < static_cast<long long>(w) && ny < static_cast<long long>(h)) {
        const std::size_t si = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
        out.class_map.labels[o] = s.class_map.labels[si];
        out.weight_map[o] = s.weight_map[si];
      }
    }
  }
  out.image = Tensor<float>({3, crop_size, crop_size}, std::move(img));
  return out;
}

inline FundusSample augment(const FundusSample& s, const AugmentationConfig& cfg,
                            std::size_t draw_index) {
  if (!cfg.enabled) return s;
  return apply_augment(s, draw_augment_params(cfg, s.id, s.width(), s.height(), draw_index),
                       cfg.crop_size);
}

// Sources x multiplier augmented samples, produced on demand.
class AugmentedDataset {
 public:
  AugmentedDataset(std::vector<FundusSample> sources, AugmentationConfig cfg)
      : sources_(std::move(sources)), cfg_(cfg) {
    if (!cfg_.enabled) cfg_.multiplier = 1;
    if (cfg_.multiplier == 0) throw std::invalid_argument("augmentation multiplier must be positive");
  }

  std::size_t size() const { return sources_.size() * cfg_.multiplier; }
  std::size_t source_index(std::size_t i) const { return i / cfg_.multiplier; }
  FundusSample operator[](std::size_t i) const {
    return augment(sources_.at(i / cfg_.multiplier), cfg_, i % cfg_.multiplier);
  }
  const std::vector<FundusSample>& sources() const { return sources_; }

 private:
  std::vector<FundusSample> sources_;
  AugmentationConfig cfg_;
};

struct Fold {
  std::vector<std::string> train;
  std::vector<std::string> validation;
};

namespace detail {

template <typename V>
void seeded_shuffle(V& items, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace detail

// Case-level k-fold partition; validation folds differ in size by at most one.
inline std::vector<Fold> split_folds(std::vector<std::string> ids, std::size_t k,
                                     std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("split_folds: k must be at least 2");
  if (k > ids.size()) {
    throw std::invalid_argument("split_folds: k=" + std::to_string(k) + " exceeds " +
                                std::to_string(ids.size()) + " ids");
  }
  detail::seeded_shuffle(ids, seed);
  std::vector<Fold> folds(k);
  const std::size_t base = ids.size() / k, extra = ids.size() % k;
  std::size_t start = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t len = base + (f < extra ? 1 : 0);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      (i >= start && i < start + len ? folds[f].validation : folds[f].train).push_back(ids[i]);
    }
    start += len;
  }
  return folds;
}

// Random case-level train/test partition.
inline std::pair<std::vector<std::string>, std::vector<std::string>> split_holdout(
    std::vector<std::string> ids, std::size_t test_count, std::uint64_t seed) {
  if (test_count >= ids.size()) throw std::invalid_argument("split_holdout: test set too large");
  detail::seeded_shuffle(ids, seed);
  std::vector<std::string> test(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(test_count));
  std::vector<std::string> train(ids.begin() + static_cast<std::ptrdiff_t>(test_count), ids.end());
  return {train, test};
}

// Renders smooth random vessels of both classes over a shaded, noisy
// background. One arteriole spans left to right and one venule top to
// bottom, so every sample contains a crossing. A few small uncertain
// patches are stamped on top.
inline FundusSample generate_synthetic(std::size_t size, std::uint64_t seed,
                                       const ClassWeights& weights = {}) {
  if (size < 32) throw std::invalid_argument("generate_synthetic: size must be at least 32");
  std::mt19937_64 rng(detail::splitmix64(seed));
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * detail::unit_draw(rng); };
  const double s = static_cast<double>(size);
  const std::size_t plane = size * size;

  std::vector<std::uint8_t> artery(plane, 0), vein(plane, 0);
  auto draw_curve = [&](std::vector<std::uint8_t>& mask, bool horizontal, double radius) {
    const double a0 = uniform(0.15, 0.85) * s, a1 = uniform(0.15, 0.85) * s;
    const double amp = uniform(0.03, 0.12) * s;
    const double freq = uniform(0.5, 2.0), phase = uniform(0.0, 2.0 * std::numbers::pi);
    const std::size_t steps = 8 * size;
    const int reach = static_cast<int>(std::ceil(radius));
    for (std::size_t k = 0; k <= steps; ++k) {
      const double t = static_cast<double>(k) / static_cast<double>(steps);
      const double along = -1.0 + t * (s + 1.0);
      const double across = a0 + (a1 - a0) * t + amp * std::sin(std::numbers::pi * freq * t + phase);
      const double cx = horizontal ? along : across;
      const double cy = horizontal ? across : along;
      for (int dy = -reach; dy <= reach; ++dy)
        for (int dx = -reach; dx <= reach; ++dx) {
          const long long px = std::lround(cx) + dx, py = std::lround(cy) + dy;
          if (px < 0 || py < 0 || px >= static_cast<long long>(size) ||
              py >= static_cast<long long>(size))
            continue;
          const double ddx = static_cast<double>(px) - cx, ddy = static_cast<double>(py) - cy;
          if (ddx * ddx + ddy * ddy <= radius * radius) {
            mask[static_cast<std::size_t>(py) * size + static_cast<std::size_t>(px)] = 1;
          }
        }
    }
  };
  const std::size_t per_class = std::max<std::size_t>(1, size / 64);
  for (std::size_t i = 0; i < per_class; ++i) {
    draw_curve(artery, i == 0 ? true : uniform(0, 1) < 0.5, uniform(0.8, 1.2));
    draw_curve(vein, i == 0 ? false : uniform(0, 1) < 0.5, uniform(1.1, 1.6));
  }

  FundusSample out;
  out.id = "synthetic-" + std::to_string(seed);
  out.class_map = ClassMap(1, size, size);
  for (std::size_t i = 0; i < plane; ++i) {
    out.class_map.labels[i] = artery[i] && vein[i] ? class_index(ClassId::Intersection)
                              : artery[i]          ? class_index(ClassId::Arteriole)
                              : vein[i]            ? class_index(ClassId::Venule)
                                                   : class_index(ClassId::Background);
  }
  const std::size_t patches = 2 + size / 32;
  for (std::size_t k = 0; k < patches; ++k) {
    const auto px = static_cast<std::size_t>(uniform(0, s - 2));
    const auto py = static_cast<std::size_t>(uniform(0, s - 2));
    for (std::size_t dy = 0; dy < 2; ++dy)
      for (std::size_t dx = 0; dx < 2; ++dx) out.class_map.labels[(py + dy) * size + px + dx] = kIgnore;
  }

  constexpr std::array<std::array<double, 3>, 4> tint{{
      {0.80, 0.42, 0.20},  // background
      {0.68, 0.20, 0.13},  // arteriole: lighter, redder
      {0.40, 0.09, 0.17},  // venule: darker, bluer
      {0.54, 0.15, 0.15},  // intersection
  }};
  const double fx = uniform(0.3, 0.7) * s, fy = uniform(0.3, 0.7) * s;
  const double wave = uniform(2.0, 5.0) / s, wave_phase = uniform(0.0, 6.28);
  std::vector<float> img(3 * plane);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const std::size_t i = y * size + x;
      const double r = std::hypot(static_cast<double>(x) - fx, static_cast<double>(y) - fy) / s;
      const double shade = 1.0 - 0.35 * r * r + 0.04 * std::sin(wave * static_cast<double>(x + 2 * y) + wave_phase);
      const std::size_t cls = artery[i] && vein[i] ? 3 : artery[i] ? 1 : vein[i] ? 2 : 0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(tint[cls][c] * shade + uniform(-0.03, 0.03), 0.0, 1.0);
        img[c * plane + i] = static_cast<float>(std::lround(v * 255.0) / 255.0);
      }
    }
  }
  out.image = Tensor<float>({3, size, size}, std::move(img));
  out.weight_map = class_weight_map(out.class_map, weights);
  return out;
}

// Per-pixel argmax of probs[n] mapped to annotation colours; uncertain pixels
// (mask != 0) are drawn white. Ties resolve to the lowest class index.
template <typename T>
RgbImage decode_predictions(const Tensor<T>& probs, const std::vector<std::uint8_t>& ignore_mask = {},
                            std::size_t n = 0) {
  if (probs.rank() != 4 || probs.dim(1) != kNumClasses) {
    throw ShapeError("decode_predictions: expected [N, 4, H, W], got " + shape_string(probs.shape()));
  }
  const std::size_t h = probs.dim(2), w = probs.dim(3), plane = h * w;
  if (!ignore_mask.empty() && ignore_mask.size() != plane) {
    throw ShapeError("decode_predictions: ignore mask does not match the image size");
  }
  RgbImage img(w, h);
  const auto& p = probs.values();
  for (std::size_t i = 0; i < plane; ++i) {
    if (!ignore_mask.empty() && ignore_mask[i]) {
      img.set(i, kIgnoreColor);
      continue;
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < kNumClasses; ++c) {
      if (p[(n * kNumClasses + c) * plane + i] > p[(n * kNumClasses + best) * plane + i]) best = c;
    }
    img.set(i, kClassColors[best]);
  }
  return img;
}

}  // namespace avnet
