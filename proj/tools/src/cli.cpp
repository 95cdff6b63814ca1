#include "cmseg/tools/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "cmseg/forge.hpp"
#include "cmseg/image.hpp"
#include "cmseg/loss_metrics.hpp"
#include "cmseg/model.hpp"
#include "cmseg/toy.hpp"
#include "cmseg/train.hpp"
#include "cmseg/weight_io.hpp"

namespace cmseg::tools {

namespace fs = std::filesystem;
using nlohmann::json;

int worker_threads(bool deterministic) {
  if (deterministic) return 1;
  if (const char* env = std::getenv("CMSEG_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && n > 0) return static_cast<int>(std::min<long>(n, 256));
  }
  return static_cast<int>(std::max(1U, std::thread::hardware_concurrency()));
}

namespace {

// Runs fn(i) for i in [0, n) on up to `threads` workers; fn(i) writes only
// to slot i of its outputs.
template <typename Fn>
void parallel_for(size_t n, int threads, Fn fn) {
  const size_t workers = std::min<size_t>(n, static_cast<size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  for (size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

std::string config_key(const std::string& flag) {
  std::string key = flag.substr(flag.find_first_not_of('-'));
  std::replace(key.begin(), key.end(), '-', '_');
  return key;
}

// Binds each flag to a variable and to a same-named key of the optional JSON
// config file. Values given on the command line win over the file, which
// wins over the defaults already held by the variables.
class ConfigBinder {
 public:
  explicit ConfigBinder(CLI::App* app) : app_(app) {
    app_->add_option("--config", config_path_, "JSON file with defaults for any option of this command");
  }

  template <typename T>
  CLI::Option* bind(const std::string& flag, T& target, const std::string& help) {
    CLI::Option* opt = app_->add_option(flag, target, help)->capture_default_str();
    const std::string key = config_key(flag);
    setters_[key] = {opt, [&target, key](const json& v) {
                       try {
                         target = v.get<T>();
                       } catch (const json::exception&) {
                         throw UsageError("config key '" + key + "' has the wrong type");
                       }
                     }};
    return opt;
  }

  void apply() {
    if (config_path_.empty()) return;
    std::ifstream in(config_path_);
    if (!in) throw UsageError("cannot read config file " + config_path_);
    json doc;
    try {
      doc = json::parse(in);
    } catch (const json::exception& e) {
      throw UsageError("config file " + config_path_ + " is not valid JSON: " + e.what());
    }
    if (!doc.is_object()) throw UsageError("config file " + config_path_ + " must hold a JSON object");
    for (const auto& [key, value] : doc.items()) {
      const auto it = setters_.find(key);
      if (it == setters_.end()) throw UsageError("unknown config key '" + key + "' in " + config_path_);
      if (it->second.option->count() == 0) {
        it->second.set(value);
        from_file_.insert(key);
      }
    }
  }

  /// True when the flag was given on the command line or in the config file.
  bool given(const std::string& flag) const {
    const std::string key = config_key(flag);
    const auto it = setters_.find(key);
    return from_file_.count(key) || (it != setters_.end() && it->second.option->count() > 0);
  }

 private:
  struct Setter {
    CLI::Option* option;
    std::function<void(const json&)> set;
  };
  CLI::App* app_;
  std::string config_path_;
  std::map<std::string, Setter> setters_;
  std::set<std::string> from_file_;
};

struct ModelFlags {
  int64_t size = 128;
  float width_multiplier = 0.25F;
  float gamma = 4.0F;
  bool use_cor = true;
  bool use_aspp = true;
  bool use_sam = true;
  bool use_irb = true;
  std::string attention_combine = "add";
  bool freeze_bn = false;

  void bind(ConfigBinder& b) {
    b.bind("--size", size, "Square model input resolution");
    b.bind("--width-multiplier", width_multiplier, "Encoder width multiplier");
    b.bind("--gamma", gamma, "Suppression length scale");
    b.bind("--use-cor", use_cor, "Enable self-correlation");
    b.bind("--use-aspp", use_aspp, "Enable the dilated pyramid branch");
    b.bind("--use-sam", use_sam, "Enable spatial attention");
    b.bind("--use-irb", use_irb, "Use inverted residual decoder blocks");
    b.bind("--attention-combine", attention_combine, "add or mul")->check(CLI::IsMember({"add", "mul"}));
    b.bind("--freeze-bn", freeze_bn, "Use running batchnorm statistics during training");
  }

  ModelConfig to_config(uint64_t seed) const {
    ModelConfig cfg;
    cfg.encoder.height = size;
    cfg.encoder.width = size;
    cfg.encoder.width_multiplier = width_multiplier;
    cfg.encoder.seed = seed;
    cfg.gamma = gamma;
    cfg.ablation = {use_cor, use_aspp, use_sam, use_irb};
    cfg.attention_combine = attention_combine == "mul" ? AttentionCombine::kMul : AttentionCombine::kAdd;
    cfg.freeze_bn = freeze_bn;
    try {
      cfg.validate();
    } catch (const ValueError& e) {
      throw UsageError(std::string("invalid model configuration: ") + e.what());
    }
    return cfg;
  }

  json to_json() const {
    return json{{"size", size},         {"width_multiplier", width_multiplier},
                {"gamma", gamma},       {"use_cor", use_cor},
                {"use_aspp", use_aspp}, {"use_sam", use_sam},
                {"use_irb", use_irb},   {"attention_combine", attention_combine},
                {"freeze_bn", freeze_bn}};
  }
};

fs::path sidecar_path(const fs::path& weights) { return fs::path(weights.string() + ".json"); }

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::vector<fs::path> image_files(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string join(const std::vector<std::string>& items, const std::string& sep) {
  std::string out;
  for (size_t i = 0; i < items.size(); ++i) out += (i ? sep : "") + items[i];
  return out;
}

// Marks foreground pixels with a background 4-neighbour (or on the image
// edge) in red.
Image boundary_overlay(const Image& rgb, const Image& mask) {
  Image out = rgb;
  const auto fg = [&](int x, int y) { return mask.at(x, y) > 127; };
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!fg(x, y)) continue;
      const bool edge = x == 0 || y == 0 || x == mask.width - 1 || y == mask.height - 1 || !fg(x - 1, y) ||
                        !fg(x + 1, y) || !fg(x, y - 1) || !fg(x, y + 1);
      if (!edge) continue;
      out.at(x, y, 0) = 255;
      out.at(x, y, 1) = 0;
      out.at(x, y, 2) = 0;
    }
  }
  return out;
}

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

// --- toy-scenes -------------------------------------------------------------

struct ToyArgs {
  std::string out;
  int count = 200;
  uint64_t seed = 0;
  ToySceneOptions scene;
};

int cmd_toy_scenes(const ToyArgs& a, Streams io) {
  const auto sources = write_toy_sources(a.out, a.count, a.seed, a.scene);
  io.out << "toy-scenes: wrote " << sources.size() << " scenes to " << a.out << " (seed " << a.seed << ")\n";
  return kExitOk;
}

// --- synth ------------------------------------------------------------------

struct SynthArgs {
  std::string sources;
  int count = 100;
  uint64_t seed = 0;
  std::string out;
  std::string attacks = "BC,CA,CR,IB,JC,NA,Ro,Sc,SR,MIR";
  std::string mask_mode = "union";
};

int cmd_synth(const SynthArgs& a, Streams io) {
  if (!fs::is_regular_file(a.sources)) throw UsageError("sources file not found: " + a.sources);
  if (a.count < 1) throw UsageError("--count must be >= 1");
  std::vector<AttackChoice> menu;
  try {
    menu = parse_attack_menu(a.attacks);
  } catch (const ValueError& e) {
    throw UsageError(std::string("bad --attacks: ") + e.what());
  }
  std::vector<SourceSpec> sources;
  try {
    sources = read_sources(a.sources);
  } catch (const Error& e) {
    throw UsageError("cannot read sources file " + a.sources + ": " + e.what());
  }
  GenerateOptions opts;
  opts.mask_mode = a.mask_mode == "target_only" ? MaskMode::kTargetOnly : MaskMode::kUnion;
  const auto result = generate_dataset(sources, a.count, a.seed, menu, a.out, opts);
  for (const auto& w : result.warnings) io.err << "synth: warning: " << w << '\n';
  io.out << "synth: wrote " << result.records.size() << " samples, skipped " << result.warnings.size()
         << ", seed " << a.seed << ", to " << a.out << '\n';
  return kExitOk;
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string holdout;
  std::string out;
  std::string log;
  int epochs = 10;
  int batch = 4;
  float lr = 1e-3F;
  uint64_t seed = 0;
  float threshold = 0.5F;
  bool augment = true;
  ModelFlags model;
};

int cmd_train(const TrainArgs& a, Streams io) {
  if (!fs::is_regular_file(fs::path(a.data) / "manifest.jsonl")) {
    throw UsageError("no manifest.jsonl in data directory " + a.data);
  }
  if (!a.holdout.empty() && !fs::is_regular_file(fs::path(a.holdout) / "manifest.jsonl")) {
    throw UsageError("no manifest.jsonl in holdout directory " + a.holdout);
  }
  if (a.epochs < 0 || a.batch < 1) throw UsageError("--epochs must be >= 0 and --batch >= 1");
  if (!(a.lr >= 0.0F)) throw UsageError("--lr must be >= 0");
  const ModelConfig cfg = a.model.to_config(a.seed);
  const auto train_set = load_dataset(a.data, cfg.encoder.height, cfg.encoder.width);
  const auto holdout = a.holdout.empty() ? std::vector<Sample>{}
                                         : load_dataset(a.holdout, cfg.encoder.height, cfg.encoder.width);
  CMSegNet net(cfg);

  TrainOptions opts;
  opts.epochs = a.epochs;
  opts.batch = a.batch;
  opts.adam.lr = a.lr;
  opts.seed = a.seed;
  opts.threshold = a.threshold;
  opts.augment = a.augment;

  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  const fs::path log_path = a.log.empty() ? fs::path(out).replace_extension(".log.jsonl") : fs::path(a.log);
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw Error("cannot write training log " + log_path.string());
  std::vector<EpochLog> history;
  try {
    history = train(net, train_set, holdout, opts, [&](const EpochLog& e) {
      log << epoch_log_to_json(e, a.seed) << '\n';
      log.flush();
      io.out << "epoch " << e.epoch << " loss " << e.mean_loss;
      if (!std::isnan(e.holdout_f1)) io.out << " holdout_f1 " << e.holdout_f1;
      io.out << '\n';
    });
  } catch (const NonFiniteLossError& e) {
    io.err << "train: " << e.what() << '\n';
    return kExitFailure;
  }
  save(net.save(), out);
  std::ofstream side(sidecar_path(out), std::ios::trunc);
  side << json{{"model", a.model.to_json()}, {"seed", a.seed}, {"epochs", a.epochs}}.dump(2) << '\n';
  if (!side) throw Error("cannot write " + sidecar_path(out).string());
  io.out << "train: " << train_set.size() << " samples, " << a.epochs << " epochs, seed " << a.seed << ", weights "
         << out.string() << '\n';
  return kExitOk;
}

// --- infer ------------------------------------------------------------------

struct InferArgs {
  std::string weights;
  std::string input;
  std::string out_mask;
  std::string out_overlay;
  float threshold = 0.5F;
  ModelFlags model;
};

void load_sidecar_defaults(const fs::path& weights, ModelFlags& m, const ConfigBinder& binder) {
  std::ifstream in(sidecar_path(weights));
  if (!in) return;
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("cannot parse " + sidecar_path(weights).string() + ": " + e.what());
  }
  const json& mj = doc.value("model", json::object());
  const auto take = [&](const char* flag, const char* key, auto& target) {
    if (mj.contains(key) && !binder.given(flag)) target = mj.at(key).get<std::decay_t<decltype(target)>>();
  };
  take("--size", "size", m.size);
  take("--width-multiplier", "width_multiplier", m.width_multiplier);
  take("--gamma", "gamma", m.gamma);
  take("--use-cor", "use_cor", m.use_cor);
  take("--use-aspp", "use_aspp", m.use_aspp);
  take("--use-sam", "use_sam", m.use_sam);
  take("--use-irb", "use_irb", m.use_irb);
  take("--attention-combine", "attention_combine", m.attention_combine);
}

int cmd_infer(const InferArgs& a, Streams io) {
  if (!(a.threshold >= 0.0F && a.threshold <= 1.0F)) throw UsageError("--threshold must be in [0, 1]");
  const ModelConfig cfg = a.model.to_config(0);
  CMSegNet net(cfg);
  net.load(load(a.weights));

  std::vector<fs::path> inputs;
  if (fs::is_directory(a.input)) {
    inputs = image_files(a.input);
  } else if (fs::exists(a.input)) {
    inputs.push_back(a.input);
  } else {
    throw UsageError("input not found: " + a.input);
  }
  fs::create_directories(a.out_mask);
  if (!a.out_overlay.empty()) fs::create_directories(a.out_overlay);

  std::vector<std::string> unreadable;
  for (const auto& path : inputs) {
    Image rgb;
    try {
      rgb = to_rgb(read_image(path));
    } catch (const Error& e) {
      unreadable.push_back(path.string());
      continue;
    }
    const Image resized = resize(rgb, static_cast<int>(cfg.encoder.width), static_cast<int>(cfg.encoder.height));
    const Tensor pred = net.predict_mask(image_to_tensor(resized), a.threshold);
    const Image mask = resize(tensor_to_mask(pred), rgb.width, rgb.height, true);
    const std::string name = path.stem().string() + ".png";
    write_png(mask, fs::path(a.out_mask) / name);
    if (!a.out_overlay.empty()) write_png(boundary_overlay(rgb, mask), fs::path(a.out_overlay) / name);
  }
  io.out << "infer: " << inputs.size() - unreadable.size() << " images, threshold " << a.threshold << '\n';
  if (!unreadable.empty()) {
    io.err << "infer: unreadable files: " << join(unreadable, ", ") << '\n';
    return kExitFailure;
  }
  return kExitOk;
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string pred;
  std::string gt;
  std::string report;
  double f1_threshold = 0.5;
};

std::vector<uint8_t> binary_pixels(const Image& mask) {
  const Image g = to_gray(mask);
  std::vector<uint8_t> bits(g.pixels.size());
  for (size_t i = 0; i < bits.size(); ++i) bits[i] = g.pixels[i] > 127 ? 1 : 0;
  return bits;
}

int cmd_eval(const EvalArgs& a, Streams io, int threads) {
  for (const auto& d : {a.pred, a.gt}) {
    if (!fs::is_directory(d)) throw UsageError("not a directory: " + d);
  }
  std::map<std::string, fs::path> preds;
  std::map<std::string, fs::path> gts;
  for (const auto& p : image_files(a.pred)) preds[p.stem().string()] = p;
  for (const auto& p : image_files(a.gt)) gts[p.stem().string()] = p;
  std::vector<std::string> unmatched;
  std::vector<std::string> names;
  for (const auto& [stem, p] : preds) {
    if (gts.count(stem)) names.push_back(stem);
    else unmatched.push_back(p.string());
  }
  for (const auto& [stem, p] : gts) {
    if (!preds.count(stem)) unmatched.push_back(p.string());
  }
  if (!unmatched.empty() || names.empty()) {
    io.err << "eval: unmatched files: " << (unmatched.empty() ? std::string("(no files)") : join(unmatched, ", "))
           << '\n';
    return kExitFailure;
  }
  std::vector<ImageScore> scores(names.size());
  std::vector<std::string> errors(names.size());
  parallel_for(names.size(), threads, [&](size_t i) {
    try {
      const Image p = read_image(preds[names[i]]);
      const Image g = read_image(gts[names[i]]);
      if (p.width != g.width || p.height != g.height) {
        errors[i] = names[i] + ": size mismatch";
        return;
      }
      const auto pb = binary_pixels(p);
      const auto gb = binary_pixels(g);
      scores[i].name = names[i];
      scores[i].confusion = confusion(std::span<const uint8_t>(pb), std::span<const uint8_t>(gb));
      scores[i].rates = rates(scores[i].confusion);
    } catch (const std::exception& e) {
      errors[i] = names[i] + ": " + e.what();
    }
  });
  std::vector<std::string> failed;
  for (const auto& e : errors) {
    if (!e.empty()) failed.push_back(e);
  }
  if (!failed.empty()) {
    io.err << "eval: " << join(failed, "; ") << '\n';
    return kExitFailure;
  }
  const EvalReport report = make_report(std::move(scores), a.f1_threshold);
  const fs::path out(a.report);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream f(out, std::ios::trunc);
  f << report_to_json(report) << '\n';
  if (!f) throw Error("cannot write report " + a.report);
  io.out << "eval: " << report.images.size() << " images, mF1 " << report.mean.f1 << ", detected "
         << report.detected_count << '\n';
  return kExitOk;
}

// --- verify -----------------------------------------------------------------

int cmd_verify(const VerifyHooks& hooks, Streams io) {
  const auto checks = run_verify(hooks);
  print_checks(checks, io.out);
  std::vector<std::string> failed;
  for (const auto& c : checks) {
    if (!c.passed) failed.push_back(c.name);
  }
  if (!failed.empty()) {
    io.err << "verify: failed checks: " << join(failed, ", ") << '\n';
    return kExitFailure;
  }
  io.out << "verify: all " << checks.size() << " checks passed\n";
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, const CliEnvironment& env) {
  Streams io{env.out ? *env.out : std::cout, env.err ? *env.err : std::cerr};
  CLI::App app{"Copy-move forgery segmentation toolkit", "cmseg"};
  app.require_subcommand(1);
  bool deterministic = false;
  app.add_flag("--deterministic", deterministic, "Single-threaded, bit-reproducible mode");

  ToyArgs toy;
  auto* toy_cmd = app.add_subcommand("toy-scenes", "Write synthetic source scenes and sources.jsonl");
  ConfigBinder toy_b(toy_cmd);
  toy_b.bind("--out", toy.out, "Output directory")->required();
  toy_b.bind("--count", toy.count, "Number of scenes");
  toy_b.bind("--seed", toy.seed, "Random seed");
  toy_b.bind("--size", toy.scene.size, "Scene side length");
  toy_b.bind("--distractors", toy.scene.distractors, "Distractor shapes per scene");
  toy_b.bind("--min-object", toy.scene.min_object, "Smallest copied object side");
  toy_b.bind("--max-object", toy.scene.max_object, "Largest copied object side");

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a copy-move dataset");
  ConfigBinder synth_b(synth_cmd);
  synth_b.bind("--sources", synth.sources, "Sources manifest (JSON Lines)")->required();
  synth_b.bind("--count", synth.count, "Number of samples");
  synth_b.bind("--seed", synth.seed, "Random seed");
  synth_b.bind("--out", synth.out, "Output directory")->required();
  synth_b.bind("--attacks", synth.attacks, "Attack menu, e.g. Ro,Sc,JC:9");
  synth_b.bind("--mask-mode", synth.mask_mode, "union or target_only")
      ->check(CLI::IsMember({"union", "target_only"}));

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a dataset");
  ConfigBinder train_b(train_cmd);
  train_b.bind("--data", tr.data, "Dataset directory with manifest.jsonl")->required();
  train_b.bind("--holdout", tr.holdout, "Optional held-out dataset directory");
  train_b.bind("--out", tr.out, "Output weights (.cmsw)")->required();
  train_b.bind("--log", tr.log, "Training log path (JSON Lines)");
  train_b.bind("--epochs", tr.epochs, "Epochs");
  train_b.bind("--batch", tr.batch, "Batch size");
  train_b.bind("--lr", tr.lr, "Adam learning rate");
  train_b.bind("--seed", tr.seed, "Seed for initialisation, shuffling and augmentation");
  train_b.bind("--threshold", tr.threshold, "Mask threshold for holdout F1");
  train_b.bind("--augment", tr.augment, "Random flips and transposes");
  tr.model.bind(train_b);

  InferArgs inf;
  auto* infer_cmd = app.add_subcommand("infer", "Predict masks and boundary overlays");
  ConfigBinder infer_b(infer_cmd);
  infer_b.bind("--weights", inf.weights, "Weights (.cmsw)")->required();
  infer_b.bind("--input", inf.input, "Image file or directory")->required();
  infer_b.bind("--out-mask", inf.out_mask, "Mask output directory")->required();
  infer_b.bind("--out-overlay", inf.out_overlay, "Overlay output directory");
  infer_b.bind("--threshold", inf.threshold, "Mask threshold");
  inf.model.bind(infer_b);

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Score predicted masks against ground truth");
  ConfigBinder eval_b(eval_cmd);
  eval_b.bind("--pred", ev.pred, "Predicted mask directory")->required();
  eval_b.bind("--gt", ev.gt, "Ground-truth mask directory")->required();
  eval_b.bind("--report", ev.report, "Report output (JSON)")->required();
  eval_b.bind("--f1-threshold", ev.f1_threshold, "F1 above which an image counts as detected");

  auto* verify_cmd = app.add_subcommand("verify", "Run the built-in self-checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, io.out, io.err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (toy_cmd->parsed()) {
      toy_b.apply();
      return cmd_toy_scenes(toy, io);
    }
    if (synth_cmd->parsed()) {
      synth_b.apply();
      return cmd_synth(synth, io);
    }
    if (train_cmd->parsed()) {
      train_b.apply();
      return cmd_train(tr, io);
    }
    if (infer_cmd->parsed()) {
      infer_b.apply();
      load_sidecar_defaults(inf.weights, inf.model, infer_b);
      return cmd_infer(inf, io);
    }
    if (eval_cmd->parsed()) {
      eval_b.apply();
      return cmd_eval(ev, io, worker_threads(deterministic));
    }
    if (verify_cmd->parsed()) return cmd_verify(env.verify, io);
  } catch (const UsageError& e) {
    io.err << "cmseg: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    io.err << "cmseg: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

int run_cli(const std::vector<std::string>& args, const CliEnvironment& env) {
  std::vector<const char*> argv{"cmseg"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data(), env);
}

}  // namespace cmseg::tools
