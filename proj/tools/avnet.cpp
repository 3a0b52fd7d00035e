// avnet: train, evaluate, predict and analyze from the command line.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or input error.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "avnet/checkpoint.hpp"
#include "avnet/config.hpp"
#include "avnet/train.hpp"

namespace fs = std::filesystem;
using namespace avnet;

namespace {

// Anything wrong with what the user handed us: flags, config, data files.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

// Runs `f` and reports any exception as a usage error.
template <typename F>
auto prepare(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

std::string utc_stamp(const char* fmt) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, fmt, &tm);
  return buf;
}

// Timestamps only ever reach stderr, so artifacts stay reproducible.
void log_line(const std::string& msg) {
  std::cerr << "[" << utc_stamp("%H:%M:%S") << "] " << msg << "\n";
}

RunConfig load_config(const CommonFlags& common) {
  RunConfig cfg = common.config.empty() ? RunConfig{} : load_run_config(common.config);
  if (common.seed) cfg.seed = *common.seed;
  if (!common.out.empty()) cfg.output_dir = common.out;
  // A relative manifest is taken relative to the config that names it.
  if (!cfg.manifest.empty() && !common.config.empty() && fs::path(cfg.manifest).is_relative()) {
    cfg.manifest = (fs::path(common.config).parent_path() / cfg.manifest).lexically_normal().string();
  }
  return cfg;
}

fs::path make_run_dir(const fs::path& root, const std::string& hash) {
  const std::string base = hash + "-" + utc_stamp("%Y%m%dT%H%M%SZ");
  fs::path dir = root / base;
  for (int k = 1; fs::exists(dir); ++k) dir = root / (base + "-" + std::to_string(k));
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

// Synthetic samples use seeds derived from the run seed so that training
// and validation images never coincide.
std::vector<FundusSample> synthetic_set(std::size_t count, std::size_t size, std::uint64_t seed,
                                        std::uint64_t offset, const ClassWeights& w) {
  std::vector<FundusSample> out;
  for (std::size_t k = 0; k < count; ++k) out.push_back(generate_synthetic(size, seed * 1000003 + offset + k, w));
  return out;
}

std::vector<FundusSample> load_entries(const Manifest& m, const std::vector<std::string>& ids,
                                       const ClassWeights& w) {
  std::vector<FundusSample> out;
  for (const auto& id : ids) {
    const ManifestEntry& e = m.entry(id);
    FundusSample s = load_sample(e.image, e.label, w);
    s.id = e.id;
    out.push_back(std::move(s));
  }
  return out;
}

struct TrainFlags {
  std::optional<std::size_t> fold, iters, synthetic;
};

struct DataSplit {
  std::vector<FundusSample> train, validation;
  std::string validation_name;
  std::uint64_t split_seed = 0;
};

DataSplit training_data(const RunConfig& cfg) {
  DataSplit d;
  if (cfg.synthetic.count > 0) {
    d.train = synthetic_set(cfg.synthetic.count, cfg.synthetic.size, cfg.seed, 0, cfg.class_weights);
    d.validation = synthetic_set(cfg.synthetic.validation, cfg.synthetic.size, cfg.seed, 500009,
                                 cfg.class_weights);
    d.validation_name = d.validation.empty() ? "train" : "synthetic-validation";
    if (d.validation.empty()) d.validation = d.train;
    d.split_seed = cfg.seed;
    return d;
  }
  if (cfg.manifest.empty()) {
    throw UsageError("no training data: set \"manifest\" in the config or pass --synthetic N");
  }
  const Manifest m = load_manifest(cfg.manifest);
  const auto pool = m.ids("train");
  if (pool.empty()) throw UsageError("manifest " + cfg.manifest + " lists no training samples");
  d.split_seed = m.seed;
  if (pool.size() < cfg.training.folds) {
    d.train = load_entries(m, pool, cfg.class_weights);
    d.validation = d.train;
    d.validation_name = "train";
    return d;
  }
  const Fold f = split_folds(pool, cfg.training.folds, m.seed).at(cfg.training.fold);
  d.train = load_entries(m, f.train, cfg.class_weights);
  d.validation = load_entries(m, f.validation, cfg.class_weights);
  d.validation_name = "fold-" + std::to_string(cfg.training.fold);
  return d;
}

int cmd_train(const CommonFlags& common, const TrainFlags& flags) {
  RunConfig cfg;
  DataSplit data;
  prepare([&] {
    cfg = load_config(common);
    if (flags.iters) cfg.schedule.max_iter = *flags.iters;
    if (flags.synthetic) cfg.synthetic.count = *flags.synthetic;
    if (flags.fold) {
      if (*flags.fold >= cfg.training.folds) throw UsageError("--fold must be below training.folds");
      cfg.training.fold = *flags.fold;
    }
    data = training_data(cfg);
  });

  const std::string hash = config_hash(cfg);
  const fs::path dir = make_run_dir(cfg.output_dir, hash);
  const nlohmann::json snapshot = to_json(cfg);
  write_json(dir / "config.json", snapshot);
  log_line("run directory " + dir.string());

  auto net = Network<float>::from_config(cfg.model, cfg.seed);
  AugmentedDataset dataset(data.train, cfg.augmentation);
  TrainConfig tc;
  tc.batch_size = cfg.training.batch_size;
  tc.schedule = cfg.schedule;
  tc.optimizer = cfg.optimizer;
  tc.seed = cfg.seed;
  tc.checkpoint_every = cfg.training.checkpoint_every;
  tc.checkpoint_dir = dir / "checkpoints";
  tc.meta = {snapshot.dump(), 0, static_cast<std::int64_t>(data.split_seed)};
  if (tc.checkpoint_every) fs::create_directories(tc.checkpoint_dir);

  log_line("training on " + std::to_string(data.train.size()) + " sources (" +
           std::to_string(dataset.size()) + " samples), " + std::to_string(cfg.schedule.max_iter) +
           " iterations");
  const std::size_t every = std::max<std::size_t>(1, cfg.schedule.max_iter / 20);
  const auto result = train(net, dataset, tc, [&](const TrainRecord& r) {
    if (r.iteration % every == 0 || r.iteration + 1 == cfg.schedule.max_iter) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "iter %zu  lr %.3g  loss %.5f", r.iteration, r.lr, r.loss);
      log_line(buf);
    }
  });
  write_training_log(result.log, dir / "train_log.csv");
  save_checkpoint(result.checkpoint, dir / "final.avnet");

  nlohmann::json report{{"config", snapshot},
                        {"config_hash", hash},
                        {"evaluated_on", data.validation_name},
                        {"iterations", cfg.schedule.max_iter},
                        {"final_loss", result.log.empty() ? nlohmann::json(nullptr)
                                                          : nlohmann::json(result.log.back().loss)}};
  const EvalResult ev = evaluate(net, data.validation, {cfg.eval.padding}, cfg.eval.report_recall);
  report["metrics"] = metrics_json(ev);
  write_json(dir / "metrics.json", report);
  std::cout << dir.string() << "\n";
  return 0;
}

struct LoadedModel {
  RunConfig config;
  Network<float> net;
};

LoadedModel load_model(const std::string& checkpoint_path, const CommonFlags& common) {
  const Checkpoint c = load_checkpoint(checkpoint_path);
  const std::string text = c.get_string("meta/config");
  RunConfig cfg;
  try {
    cfg = run_config_from_json(nlohmann::json::parse(text));
  } catch (const std::exception& e) {
    throw UsageError("checkpoint " + checkpoint_path + " carries an unusable config: " + e.what());
  }
  if (!common.config.empty()) {
    const RunConfig given = load_config(common);
    if (to_json(given.model) != to_json(cfg.model)) {
      throw UsageError("model in " + common.config + " does not match checkpoint " + checkpoint_path);
    }
    cfg.eval = given.eval;
  }
  if (cfg.model.input_channels != 3) {
    throw UsageError("checkpoint model expects " + std::to_string(cfg.model.input_channels) +
                     " input channels; images are RGB");
  }
  auto net = Network<float>::from_config(cfg.model, 0);
  restore_model(net, c);
  return {cfg, std::move(net)};
}

struct EvalFlags {
  std::string checkpoint, data, split;
  std::optional<std::size_t> synthetic;
  std::size_t synthetic_size = 64;
};

int cmd_eval(const CommonFlags& common, const EvalFlags& flags) {
  std::optional<LoadedModel> model;
  std::vector<FundusSample> samples;
  std::string source;
  prepare([&] {
    model.emplace(load_model(flags.checkpoint, common));
    const ClassWeights& w = model->config.class_weights;
    if (flags.synthetic) {
      samples = synthetic_set(*flags.synthetic, flags.synthetic_size, common.seed.value_or(0), 900001, w);
      source = "synthetic";
    } else {
      if (flags.data.empty()) throw UsageError("eval needs --data MANIFEST or --synthetic N");
      const Manifest m = load_manifest(flags.data);
      std::vector<std::string> ids;
      for (const auto& e : m.entries)
        if (flags.split.empty() || e.split == flags.split) ids.push_back(e.id);
      samples = load_entries(m, ids, w);
      source = flags.data;
    }
    if (samples.empty()) throw UsageError("no samples to evaluate");
  });

  const RunConfig& cfg = model->config;
  const EvalResult ev = evaluate(model->net, samples, {cfg.eval.padding}, cfg.eval.report_recall);
  nlohmann::json report{{"config", to_json(cfg)},
                        {"checkpoint", flags.checkpoint},
                        {"data", source},
                        {"metrics", metrics_json(ev)}};
  if (!common.out.empty()) {
    const fs::path dir = make_run_dir(common.out, "eval-" + config_hash(cfg));
    write_json(dir / "metrics.json", report);
    log_line("wrote " + (dir / "metrics.json").string());
  }
  std::cout << report["metrics"].dump(2) << "\n";
  return 0;
}

struct PredictFlags {
  std::string checkpoint, image;
};

int cmd_predict(const CommonFlags& common, const PredictFlags& flags) {
  std::optional<LoadedModel> model;
  RgbImage image;
  prepare([&] {
    if (common.out.empty()) throw UsageError("predict needs --out PATH for the overlay");
    model.emplace(load_model(flags.checkpoint, common));
    if (model->config.model.num_classes != kNumClasses) {
      throw UsageError("overlays need a " + std::to_string(kNumClasses) + "-class model");
    }
    image = read_png(flags.image);
  });
  const auto probs = predict_probabilities(model->net, image_to_tensor(image), {model->config.eval.padding});
  const fs::path out(common.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_png(out, decode_predictions(probs));
  log_line("wrote " + out.string());
  return 0;
}

struct AnalyzeFlags {
  std::size_t height = 512, width = 512;
};

int cmd_analyze(const CommonFlags& common, const AnalyzeFlags& flags) {
  RunConfig cfg;
  prepare([&] {
    cfg = load_config(common);
    if (flags.height == 0 || flags.width == 0) throw UsageError("--height and --width must be positive");
  });
  const auto net = Network<float>::from_config(cfg.model, 0);
  const AnalysisReport r = analyze(net.graph(), flags.height, flags.width);
  const std::string text = to_text(r);
  std::cout << text;
  if (!common.out.empty()) {
    const fs::path dir = make_run_dir(common.out, "analyze-" + config_hash(cfg));
    write_text(dir / "report.txt", text);
    nlohmann::json j = to_json(r);
    j["config"] = to_json(cfg);
    write_json(dir / "report.json", j);
    log_line("wrote " + dir.string());
  }
  return 0;
}

void add_common(CLI::App* cmd, CommonFlags& common) {
  cmd->add_option("--config", common.config, "Run config (JSON)");
  cmd->add_option("--seed", common.seed, "Override the config seed");
  cmd->add_option("--out", common.out, "Output directory (predict: overlay PNG path)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Artery/vein segmentation: train, eval, predict, analyze"};
  app.require_subcommand(1);

  CommonFlags common;
  TrainFlags train_flags;
  EvalFlags eval_flags;
  PredictFlags predict_flags;
  AnalyzeFlags analyze_flags;

  auto* train_cmd = app.add_subcommand("train", "Train a model and evaluate it on the held-out fold");
  add_common(train_cmd, common);
  train_cmd->add_option("--fold", train_flags.fold, "Validation fold index");
  train_cmd->add_option("--iters", train_flags.iters, "Override schedule.max_iter");
  train_cmd->add_option("--synthetic", train_flags.synthetic, "Train on N generated samples");

  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on labelled images");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--checkpoint", eval_flags.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval_flags.data, "Manifest of images to score");
  eval_cmd->add_option("--split", eval_flags.split, "Only score manifest entries with this split");
  eval_cmd->add_option("--synthetic", eval_flags.synthetic, "Score N generated samples instead");
  eval_cmd->add_option("--synthetic-size", eval_flags.synthetic_size, "Side of generated samples");

  auto* predict_cmd = app.add_subcommand("predict", "Write a colour-coded classification PNG");
  add_common(predict_cmd, common);
  predict_cmd->add_option("--checkpoint", predict_flags.checkpoint, "Checkpoint file")->required();
  predict_cmd->add_option("--image", predict_flags.image, "Input RGB PNG")->required();

  auto* analyze_cmd = app.add_subcommand("analyze", "Print shapes, parameter counts and receptive fields");
  add_common(analyze_cmd, common);
  analyze_cmd->add_option("--height", analyze_flags.height, "Input height");
  analyze_cmd->add_option("--width", analyze_flags.width, "Input width");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*train_cmd) return cmd_train(common, train_flags);
    if (*eval_cmd) return cmd_eval(common, eval_flags);
    if (*predict_cmd) return cmd_predict(common, predict_flags);
    return cmd_analyze(common, analyze_flags);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << "\n";
    return 1;
  }
}
