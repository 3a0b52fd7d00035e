// Network assembly: Inception encoder blocks, pooled/strided down-sampling,
// the cascaded dilated-convolution bottleneck and a Unet decoder with skip
// concatenations. A LayerGraph is the declarative description; Network<T>
// owns parameters for one graph and executes it.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "avnet/ops.hpp"
#include "avnet/tensor.hpp"

namespace avnet {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct InceptionBlockConfig {
  std::size_t in_channels = 32;
  std::size_t out_channels = 32;
  double dropout_rate = 0.2;
};

struct CDCConfig {
  std::size_t channels = 128;
  std::vector<std::size_t> dilation_rates{2, 4, 8, 12};
  bool batch_norm = true;
};

struct ModelConfig {
  std::vector<std::size_t> encoder_channels{32, 32, 64, 128};
  std::vector<std::size_t> decoder_channels{128, 64, 32};
  std::size_t num_classes = 4;
  std::size_t input_channels = 3;
  double dropout_rate = 0.2;
  CDCConfig cdc;

  void validate() const {
    if (encoder_channels.size() < 2) {
      throw ConfigError("model.encoder_channels needs at least two stages");
    }
    if (decoder_channels.size() + 1 != encoder_channels.size()) {
      throw ConfigError(
          "model.decoder_channels must have one entry fewer than "
          "model.encoder_channels");
    }
    for (std::size_t c : encoder_channels) {
      if (c == 0 || c % 4 != 0) {
        throw ConfigError("model.encoder_channels entries must be positive multiples of 4");
      }
    }
    for (std::size_t c : decoder_channels) {
      if (c == 0) throw ConfigError("model.decoder_channels entries must be positive");
    }
    if (num_classes < 2) throw ConfigError("model.num_classes must be at least 2");
    if (input_channels == 0) throw ConfigError("model.input_channels must be positive");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      throw ConfigError("model.dropout_rate must be in [0, 1)");
    }
    if (cdc.channels != encoder_channels.back()) {
      throw ConfigError("model.cdc.channels must equal the last encoder width");
    }
    for (std::size_t r : cdc.dilation_rates) {
      if (r == 0) throw ConfigError("model.cdc.dilation_rates must be positive");
    }
  }

  // Each down-sampling halves the resolution.
  std::size_t size_divisor() const {
    return std::size_t{1} << (encoder_channels.size() - 1);
  }
};

enum class LayerKind { Input, Conv, MaxPool, Upsample, Concat, Softmax };

inline std::string_view kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Input: return "input";
    case LayerKind::Conv: return "conv";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::Upsample: return "upsample";
    case LayerKind::Concat: return "concat";
    case LayerKind::Softmax: return "softmax";
  }
  return "?";
}

struct LayerNode {
  std::string name;
  LayerKind kind = LayerKind::Input;
  std::vector<std::size_t> inputs;
  std::size_t channels = 0;  // channels emitted
  Conv2dSpec conv;
  bool batch_norm = false;
  bool relu = false;
  double dropout = 0.0;
  PoolSpec pool;
  bool require_even_input = false;
};

struct SkipEdge {
  std::size_t from = 0;
  std::size_t to = 0;
};

struct ParamSpec {
  std::string name;
  Shape shape;
};

struct ConvUnitOptions {
  bool batch_norm = true;
  bool relu = true;
  double dropout = 0.0;
};

class LayerGraph {
 public:
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  const std::vector<LayerNode>& nodes() const { return nodes_; }
  const LayerNode& node(std::size_t i) const { return nodes_.at(i); }
  std::size_t size() const { return nodes_.size(); }
  std::size_t output() const { return nodes_.size() - 1; }

  std::size_t find(const std::string& name) const {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].name == name) return i;
    }
    return npos;
  }

  std::size_t add_input(std::string name, std::size_t channels) {
    LayerNode n;
    n.name = std::move(name);
    n.kind = LayerKind::Input;
    n.channels = channels;
    return push(std::move(n));
  }

  std::size_t add_conv(std::string name, std::size_t input, const Conv2dSpec& spec,
                       ConvUnitOptions opts = {}) {
    if (nodes_.at(input).channels != spec.in_channels) {
      throw ConfigError(name + ": expects " + std::to_string(spec.in_channels) +
                        " input channels, '" + nodes_.at(input).name + "' emits " +
                        std::to_string(nodes_.at(input).channels));
    }
    LayerNode n;
    n.name = std::move(name);
    n.kind = LayerKind::Conv;
    n.inputs = {input};
    n.channels = spec.out_channels;
    n.conv = spec;
    n.batch_norm = opts.batch_norm;
    n.relu = opts.relu;
    n.dropout = opts.dropout;
    return push(std::move(n));
  }

  std::size_t add_maxpool(std::string name, std::size_t input, PoolSpec spec,
                          bool require_even_input = false) {
    LayerNode n;
    n.name = std::move(name);
    n.kind = LayerKind::MaxPool;
    n.inputs = {input};
    n.channels = nodes_.at(input).channels;
    n.pool = spec;
    n.require_even_input = require_even_input;
    return push(std::move(n));
  }

  std::size_t add_upsample(std::string name, std::size_t input) {
    LayerNode n;
    n.name = std::move(name);
    n.kind = LayerKind::Upsample;
    n.inputs = {input};
    n.channels = nodes_.at(input).channels;
    return push(std::move(n));
  }

  std::size_t add_concat(std::string name, std::vector<std::size_t> inputs) {
    LayerNode n;
    n.name = std::move(name);
    n.kind = LayerKind::Concat;
    for (std::size_t i : inputs) n.channels += nodes_.at(i).channels;
    n.inputs = std::move(inputs);
    return push(std::move(n));
  }

  std::size_t add_softmax(std::string name, std::size_t input) {
    LayerNode n;
    n.name = std::move(name);
    n.kind = LayerKind::Softmax;
    n.inputs = {input};
    n.channels = nodes_.at(input).channels;
    return push(std::move(n));
  }

  void add_skip(std::size_t from, std::size_t to) { skips_.push_back({from, to}); }
  const std::vector<SkipEdge>& skips() const { return skips_; }

  // Stage bookkeeping filled in by build_model.
  std::vector<std::size_t> encoder_stages;
  std::vector<std::size_t> decoder_stages;
  std::size_t bottleneck = npos;
  std::size_t cdc_input = npos;

  // Trainable tensors in graph order. Names are the checkpoint keys.
  std::vector<ParamSpec> parameters() const {
    std::vector<ParamSpec> out;
    for (const auto& n : nodes_) {
      if (n.kind != LayerKind::Conv) continue;
      const auto& s = n.conv;
      out.push_back({n.name + ".weight", {s.out_channels, s.in_channels, s.kernel_h, s.kernel_w}});
      out.push_back({n.name + ".bias", {s.out_channels}});
      if (n.batch_norm) {
        out.push_back({n.name + ".bn.gamma", {s.out_channels}});
        out.push_back({n.name + ".bn.beta", {s.out_channels}});
      }
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : parameters()) total += shape_numel(p.shape);
    return total;
  }

 private:
  std::size_t push(LayerNode n) {
    for (std::size_t i : n.inputs) {
      if (i >= nodes_.size()) throw ConfigError(n.name + ": input index out of range");
    }
    if (find(n.name) != npos) throw ConfigError("duplicate layer name " + n.name);
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  std::vector<LayerNode> nodes_;
  std::vector<SkipEdge> skips_;
};

// Four parallel branches, each emitting out/4 channels:
//   1x1 | 1x1 -> 3x3 | 1x1 -> 1x7 -> 7x1 | 3x3 max-pool (stride 1) -> 1x1
// concatenated in that order. Spatial size is preserved.
inline std::size_t append_inception_block(LayerGraph& g, const std::string& prefix,
                                          std::size_t input,
                                          const InceptionBlockConfig& cfg) {
  if (cfg.out_channels == 0 || cfg.out_channels % 4 != 0) {
    throw ConfigError(prefix + ": inception out_channels " +
                      std::to_string(cfg.out_channels) + " is not divisible by 4");
  }
  const std::size_t in = cfg.in_channels;
  const std::size_t width = cfg.out_channels / 4;
  const ConvUnitOptions unit{true, true, cfg.dropout_rate};

  const auto b1 = g.add_conv(prefix + ".b1_1x1", input, Conv2dSpec::same(in, width, 1, 1), unit);

  auto b2 = g.add_conv(prefix + ".b2_1x1", input, Conv2dSpec::same(in, width, 1, 1), unit);
  b2 = g.add_conv(prefix + ".b2_3x3", b2, Conv2dSpec::same(width, width, 3, 3), unit);

  auto b3 = g.add_conv(prefix + ".b3_1x1", input, Conv2dSpec::same(in, width, 1, 1), unit);
  b3 = g.add_conv(prefix + ".b3_1x7", b3, Conv2dSpec::same(width, width, 1, 7), unit);
  b3 = g.add_conv(prefix + ".b3_7x1", b3, Conv2dSpec::same(width, width, 7, 1), unit);

  auto b4 = g.add_maxpool(prefix + ".b4_pool", input, PoolSpec{3, 1, 1});
  b4 = g.add_conv(prefix + ".b4_1x1", b4, Conv2dSpec::same(in, width, 1, 1), unit);

  return g.add_concat(prefix + ".concat", {b1, b2, b3, b4});
}

// concat(2x2 max-pool, 3x3 stride-2 conv) doubles the channels at half
// resolution; a 1x1 conv then maps to `out_channels`.
inline std::size_t append_downsample_block(LayerGraph& g, const std::string& prefix,
                                           std::size_t input, std::size_t in_channels,
                                           std::size_t out_channels, double dropout_rate) {
  const ConvUnitOptions unit{true, true, dropout_rate};
  const auto pool = g.add_maxpool(prefix + ".pool", input, PoolSpec{2, 2, 0}, true);
  const auto strided = g.add_conv(prefix + ".conv_s2", input,
                                  Conv2dSpec{in_channels, in_channels, 3, 3, 2, 1, 1, 1}, unit);
  const auto merged = g.add_concat(prefix + ".concat", {pool, strided});
  return g.add_conv(prefix + ".project", merged,
                    Conv2dSpec::same(2 * in_channels, out_channels, 1, 1), unit);
}

// Sequential 3x3 convolutions with the configured dilation rates, each
// padded to preserve size and followed by BN (optional) and ReLU.
inline std::size_t append_cdc(LayerGraph& g, const std::string& prefix, std::size_t input,
                              const CDCConfig& cfg) {
  std::size_t x = input;
  for (std::size_t i = 0; i < cfg.dilation_rates.size(); ++i) {
    const std::size_t rate = cfg.dilation_rates[i];
    if (rate == 0) throw ConfigError(prefix + ": dilation rates must be positive");
    x = g.add_conv(prefix + ".d" + std::to_string(rate) + "_" + std::to_string(i), x,
                   Conv2dSpec::same(cfg.channels, cfg.channels, 3, 3, rate),
                   ConvUnitOptions{cfg.batch_norm, true, 0.0});
  }
  return x;
}

inline LayerGraph build_inception_block(const InceptionBlockConfig& cfg) {
  LayerGraph g;
  const auto in = g.add_input("input", cfg.in_channels);
  append_inception_block(g, "inception", in, cfg);
  return g;
}

inline LayerGraph build_downsample_block(std::size_t in_channels, std::size_t out_channels,
                                         double dropout_rate = 0.2) {
  LayerGraph g;
  const auto in = g.add_input("input", in_channels);
  append_downsample_block(g, "down", in, in_channels, out_channels, dropout_rate);
  return g;
}

inline LayerGraph build_cdc(const CDCConfig& cfg) {
  LayerGraph g;
  const auto in = g.add_input("input", cfg.channels);
  g.cdc_input = in;
  g.bottleneck = append_cdc(g, "cdc", in, cfg);
  return g;
}

// stem -> [inception, downsample] per resolution step -> inception -> CDC
// -> decoder steps (upsample, 3x3 conv, concat skip, two 3x3 convs)
// -> 1x1 head -> softmax.
inline LayerGraph build_model(const ModelConfig& cfg) {
  cfg.validate();
  const auto& enc = cfg.encoder_channels;
  const auto& dec = cfg.decoder_channels;
  const double p = cfg.dropout_rate;
  const ConvUnitOptions encoder_unit{true, true, p};
  const ConvUnitOptions decoder_unit{true, true, 0.0};

  LayerGraph g;
  std::size_t x = g.add_input("input", cfg.input_channels);
  x = g.add_conv("stem", x, Conv2dSpec::same(cfg.input_channels, enc[0], 3, 3), encoder_unit);

  std::size_t channels = enc[0];
  for (std::size_t s = 0; s < enc.size(); ++s) {
    const std::string stage = "enc" + std::to_string(s);
    x = append_inception_block(g, stage + ".inception", x,
                               InceptionBlockConfig{channels, enc[s], p});
    channels = enc[s];
    g.encoder_stages.push_back(x);
    if (s + 1 < enc.size()) {
      x = append_downsample_block(g, stage + ".down", x, channels, enc[s + 1], p);
      channels = enc[s + 1];
    }
  }

  g.cdc_input = x;
  CDCConfig cdc = cfg.cdc;
  cdc.channels = channels;
  x = append_cdc(g, "cdc", x, cdc);
  g.bottleneck = x;

  for (std::size_t s = 0; s < dec.size(); ++s) {
    const std::string stage = "dec" + std::to_string(s);
    const std::size_t skip = g.encoder_stages[enc.size() - 2 - s];
    x = g.add_upsample(stage + ".up", x);
    x = g.add_conv(stage + ".up_conv", x, Conv2dSpec::same(channels, dec[s], 3, 3), decoder_unit);
    const std::size_t joined = g.add_concat(stage + ".concat", {x, skip});
    g.add_skip(skip, joined);
    const std::size_t skip_channels = g.node(skip).channels;
    x = g.add_conv(stage + ".conv1", joined,
                   Conv2dSpec::same(dec[s] + skip_channels, dec[s], 3, 3), decoder_unit);
    x = g.add_conv(stage + ".conv2", x, Conv2dSpec::same(dec[s], dec[s], 3, 3), decoder_unit);
    channels = dec[s];
    g.decoder_stages.push_back(x);
  }

  x = g.add_conv("head", x, Conv2dSpec::same(channels, cfg.num_classes, 1, 1),
                 ConvUnitOptions{false, false, 0.0});
  g.add_softmax("probs", x);
  return g;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Standard normal draws via Box-Muller on a 64-bit Mersenne twister.
class GaussianSource {
 public:
  explicit GaussianSource(std::uint64_t seed) : rng_(seed) {}
  double next() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
    const double u2 = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 rng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace detail

struct ForwardOptions {
  Mode mode = Mode::Eval;
  std::uint64_t dropout_seed = 0;
};

template <typename T>
class Network {
 public:
  Network() = default;

  // Conv weights ~ N(0, 2/fan_in), biases 0, BN gamma 1 / beta 0.
  explicit Network(LayerGraph graph, std::uint64_t init_seed = 0)
      : graph_(std::move(graph)) {
    detail::GaussianSource gauss(detail::splitmix64(init_seed));
    for (const auto& n : graph_.nodes()) {
      if (n.kind != LayerKind::Conv) continue;
      const auto& s = n.conv;
      const double std_dev =
          std::sqrt(2.0 / static_cast<double>(s.in_channels * s.kernel_h * s.kernel_w));
      std::vector<T> w(s.weight_count());
      for (auto& v : w) v = static_cast<T>(gauss.next() * std_dev);
      params_.emplace(n.name + ".weight",
                      Tensor<T>({s.out_channels, s.in_channels, s.kernel_h, s.kernel_w},
                                std::move(w), true));
      params_.emplace(n.name + ".bias", Tensor<T>::zeros({s.out_channels}, true));
      if (n.batch_norm) {
        BatchNormState<T> bn(s.out_channels);
        params_.emplace(n.name + ".bn.gamma", bn.gamma);
        params_.emplace(n.name + ".bn.beta", bn.beta);
        batch_norms_.emplace(n.name, std::move(bn));
      }
    }
  }

  static Network from_config(const ModelConfig& cfg, std::uint64_t init_seed = 0) {
    return Network(build_model(cfg), init_seed);
  }

  const LayerGraph& graph() const { return graph_; }

  // Parameters in graph order, paired with their checkpoint names.
  std::vector<std::pair<std::string, Tensor<T>>> parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (const auto& spec : graph_.parameters()) {
      out.emplace_back(spec.name, params_.at(spec.name));
    }
    return out;
  }

  Tensor<T>& parameter(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no parameter named " + name);
    return it->second;
  }

  std::map<std::string, BatchNormState<T>>& batch_norms() { return batch_norms_; }
  const std::map<std::string, BatchNormState<T>>& batch_norms() const { return batch_norms_; }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& [name, t] : params_) total += t.numel();
    return total;
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  // Outputs of every graph node, in graph order.
  std::vector<Tensor<T>> forward_all(const Tensor<T>& input, const ForwardOptions& opts = {}) {
    const auto& nodes = graph_.nodes();
    if (input.rank() != 4) {
      throw ShapeError("model input must be NCHW, got " + shape_string(input.shape()));
    }
    if (input.dim(1) != nodes.front().channels) {
      throw ShapeError("model expects " + std::to_string(nodes.front().channels) +
                       " input channels, got " + std::to_string(input.dim(1)));
    }
    std::vector<Tensor<T>> values(nodes.size());
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const LayerNode& n = nodes[i];
      switch (n.kind) {
        case LayerKind::Input:
          values[i] = input;
          break;
        case LayerKind::Conv: {
          const Tensor<T>& x = values[n.inputs[0]];
          Tensor<T> y = conv2d(x, params_.at(n.name + ".weight"), params_.at(n.name + ".bias"),
                               n.conv);
          if (n.batch_norm) {
            auto& bn = batch_norms_.at(n.name);
            bn.mode = opts.mode;
            y = batchnorm2d(y, bn);
          }
          if (n.relu) y = relu(y);
          if (n.dropout > 0.0) {
            y = dropout(y, n.dropout, opts.mode,
                        detail::splitmix64(opts.dropout_seed ^ detail::splitmix64(i)));
          }
          values[i] = std::move(y);
          break;
        }
        case LayerKind::MaxPool: {
          const Tensor<T>& x = values[n.inputs[0]];
          if (n.require_even_input && (x.dim(2) % 2 || x.dim(3) % 2)) {
            throw ShapeError(n.name + ": down-sampling needs even spatial size, got " +
                             shape_string(x.shape()));
          }
          values[i] = maxpool2d(x, n.pool);
          break;
        }
        case LayerKind::Upsample:
          values[i] = upsample_nearest2x(values[n.inputs[0]]);
          break;
        case LayerKind::Concat: {
          std::vector<Tensor<T>> parts;
          for (std::size_t j : n.inputs) parts.push_back(values[j]);
          values[i] = concat_channels(parts);
          break;
        }
        case LayerKind::Softmax:
          values[i] = softmax_channels(values[n.inputs[0]]);
          break;
      }
    }
    return values;
  }

  // Class probabilities [N, K, H, W].
  Tensor<T> forward(const Tensor<T>& input, const ForwardOptions& opts = {}) {
    return forward_all(input, opts).back();
  }

 private:
  LayerGraph graph_;
  std::map<std::string, Tensor<T>> params_;
  std::map<std::string, BatchNormState<T>> batch_norms_;
};

// Static report over a graph for a given input size.
struct LayerReport {
  std::string name;
  std::string kind;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t params = 0;
  std::size_t rf_h = 1;  // receptive field in input pixels
  std::size_t rf_w = 1;
  double jump = 1.0;  // input pixels between adjacent outputs
};

struct StageReport {
  std::string name;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t rf = 0;
};

struct AnalysisReport {
  std::size_t input_height = 0;
  std::size_t input_width = 0;
  std::vector<LayerReport> layers;
  std::vector<StageReport> stages;
  std::size_t parameter_count = 0;
  // Receptive field of the dilated cascade alone, at the resolution it runs at.
  std::size_t cdc_rf_local = 0;
};

// Receptive field of a single chain of square stride-1 convolutions.
inline std::size_t chain_receptive_field(std::size_t kernel,
                                         const std::vector<std::size_t>& dilations) {
  std::size_t rf = 1;
  for (std::size_t d : dilations) rf += (kernel - 1) * d;
  return rf;
}

inline AnalysisReport analyze(const LayerGraph& g, std::size_t input_h, std::size_t input_w) {
  AnalysisReport report;
  report.input_height = input_h;
  report.input_width = input_w;
  const auto& nodes = g.nodes();
  std::vector<LayerReport> rows(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const LayerNode& n = nodes[i];
    LayerReport r;
    r.name = n.name;
    r.kind = std::string(kind_name(n.kind));
    r.channels = n.channels;
    if (n.kind == LayerKind::Input) {
      r.height = input_h;
      r.width = input_w;
      rows[i] = r;
      continue;
    }
    const LayerReport& in = rows[n.inputs[0]];
    r.height = in.height;
    r.width = in.width;
    r.rf_h = in.rf_h;
    r.rf_w = in.rf_w;
    r.jump = in.jump;
    switch (n.kind) {
      case LayerKind::Conv: {
        const auto& s = n.conv;
        r.height = s.out_h(in.height);
        r.width = s.out_w(in.width);
        r.rf_h += static_cast<std::size_t>((s.extent_h() - 1) * in.jump);
        r.rf_w += static_cast<std::size_t>((s.extent_w() - 1) * in.jump);
        r.jump = in.jump * static_cast<double>(s.stride);
        r.params = s.weight_count() + s.out_channels + (n.batch_norm ? 2 * s.out_channels : 0);
        break;
      }
      case LayerKind::MaxPool: {
        const auto& p = n.pool;
        if (n.require_even_input && (in.height % 2 || in.width % 2)) {
          throw ShapeError(n.name + ": down-sampling needs even spatial size, got " +
                           std::to_string(in.height) + "x" + std::to_string(in.width));
        }
        r.height = (in.height + 2 * p.pad - p.kernel) / p.stride + 1;
        r.width = (in.width + 2 * p.pad - p.kernel) / p.stride + 1;
        r.rf_h += static_cast<std::size_t>((p.kernel - 1) * in.jump);
        r.rf_w += static_cast<std::size_t>((p.kernel - 1) * in.jump);
        r.jump = in.jump * static_cast<double>(p.stride);
        break;
      }
      case LayerKind::Upsample:
        r.height = 2 * in.height;
        r.width = 2 * in.width;
        r.jump = in.jump / 2.0;
        break;
      case LayerKind::Concat:
        for (std::size_t j : n.inputs) {
          const LayerReport& other = rows[j];
          if (other.height != in.height || other.width != in.width) {
            throw ShapeError(n.name + ": concatenates " + std::to_string(in.height) + "x" +
                             std::to_string(in.width) + " with " +
                             std::to_string(other.height) + "x" +
                             std::to_string(other.width));
          }
          r.rf_h = std::max(r.rf_h, other.rf_h);
          r.rf_w = std::max(r.rf_w, other.rf_w);
        }
        break;
      case LayerKind::Softmax:
      case LayerKind::Input:
        break;
    }
    rows[i] = r;
  }
  for (std::size_t s = 0; s < g.encoder_stages.size(); ++s) {
    const auto& r = rows[g.encoder_stages[s]];
    report.stages.push_back({"encoder" + std::to_string(s), r.channels, r.height, r.width,
                             std::max(r.rf_h, r.rf_w)});
  }
  if (g.bottleneck != LayerGraph::npos) {
    const auto& r = rows[g.bottleneck];
    report.stages.push_back({"bottleneck", r.channels, r.height, r.width,
                             std::max(r.rf_h, r.rf_w)});
    // Same recurrence restricted to the cascade, starting from one pixel at
    // the bottleneck resolution.
    std::size_t rf = 1;
    for (std::size_t i = g.cdc_input + 1; i <= g.bottleneck; ++i) {
      const auto& n = nodes[i];
      if (n.kind == LayerKind::Conv) rf += n.conv.extent_h() - 1;
    }
    report.cdc_rf_local = rf;
  }
  for (std::size_t s = 0; s < g.decoder_stages.size(); ++s) {
    const auto& r = rows[g.decoder_stages[s]];
    report.stages.push_back({"decoder" + std::to_string(s), r.channels, r.height, r.width,
                             std::max(r.rf_h, r.rf_w)});
  }
  if (!rows.empty()) {
    const auto& r = rows.back();
    report.stages.push_back({"output", r.channels, r.height, r.width, std::max(r.rf_h, r.rf_w)});
  }
  for (const auto& r : rows) report.parameter_count += r.params;
  report.layers = std::move(rows);
  return report;
}

inline nlohmann::json to_json(const AnalysisReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.layers) {
    layers.push_back({{"name", l.name},
                      {"kind", l.kind},
                      {"shape", {l.channels, l.height, l.width}},
                      {"params", l.params},
                      {"receptive_field", {l.rf_h, l.rf_w}},
                      {"jump", l.jump}});
  }
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : r.stages) {
    stages.push_back({{"name", s.name},
                      {"shape", {s.channels, s.height, s.width}},
                      {"receptive_field", s.rf}});
  }
  return {{"input", {r.input_height, r.input_width}},
          {"parameter_count", r.parameter_count},
          {"cdc_receptive_field_bottleneck_scale", r.cdc_rf_local},
          {"stages", stages},
          {"layers", layers}};
}

inline std::string to_text(const AnalysisReport& r) {
  std::ostringstream os;
  auto pad = [](std::string s, std::size_t w) {
    if (s.size() < w) s.append(w - s.size(), ' ');
    return s;
  };
  os << "input " << r.input_height << "x" << r.input_width << "\n\n";
  os << pad("layer", 28) << pad("kind", 10) << pad("output (C,H,W)", 18) << pad("params", 10)
     << "receptive field\n";
  for (const auto& l : r.layers) {
    std::ostringstream shape, rf;
    shape << l.channels << "," << l.height << "," << l.width;
    rf << l.rf_h << "x" << l.rf_w;
    os << pad(l.name, 28) << pad(l.kind, 10) << pad(shape.str(), 18)
       << pad(std::to_string(l.params), 10) << rf.str() << "\n";
  }
  os << "\n" << pad("stage", 14) << pad("output (C,H,W)", 18) << "receptive field\n";
  for (const auto& s : r.stages) {
    std::ostringstream shape;
    shape << s.channels << "," << s.height << "," << s.width;
    os << pad(s.name, 14) << pad(shape.str(), 18) << s.rf << "\n";
  }
  os << "\nparameter count: " << r.parameter_count << "\n";
  os << "cdc receptive field (bottleneck scale): " << r.cdc_rf_local << "\n";
  return os.str();
}

}  // namespace avnet
