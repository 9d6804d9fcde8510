// SPDX-License-Identifier: Apache-2.0
#include "smol/cli.hpp"

#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <set>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "smol/checkpoint.hpp"
#include "smol/evaluation.hpp"
#include "smol/inference.hpp"
#include "smol/rng.hpp"
#include "smol/sampler.hpp"
#ifdef SMOL_WITH_SERVICE
#include "smol/service.hpp"
#endif
#include "smol/training.hpp"

namespace smol::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using synthmap::ConfigError;

namespace {

// Missing input files are configuration problems, not runtime failures.
class MissingPath : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Context {
  const RunSpec& spec;
  std::ostream& out;
  std::ostream& err;
  json config;
  fs::path base;  // relative paths in the config resolve against this directory

  void progress(const std::string& line) const {
    if (spec.verbosity >= 1) err << line << "\n" << std::flush;
  }
  fs::path path(const std::string& key) const {
    if (!config.contains(key)) throw ConfigError(key, "missing key");
    if (!config[key].is_string()) throw ConfigError(key, "expected a path string");
    return resolve(config[key].get<std::string>());
  }
  fs::path resolve(const fs::path& p) const { return p.is_absolute() ? p : base / p; }
  fs::path existing(const std::string& key) const {
    const fs::path p = path(key);
    if (!fs::exists(p)) throw MissingPath(key + ": no such file or directory: " + p.string());
    return p;
  }
  fs::path dataset_root() const {
    if (config.contains("dataset")) return existing("dataset");
    const char* env = std::getenv("SMOL_DATA_ROOT");
    if (!env || !*env) throw ConfigError("dataset", "missing key and SMOL_DATA_ROOT is unset");
    if (!fs::exists(env)) throw MissingPath(std::string("SMOL_DATA_ROOT: no such directory: ") + env);
    return env;
  }
  fs::path out_dir(const fs::path& fallback = {}) const {
    fs::path o = spec.out.empty() ? fallback : spec.out;
    if (o.empty()) throw ConfigError("--out", "an output directory is required");
    fs::create_directories(o);
    return o;
  }
};

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where = "") {
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError(where + k, "unknown key");
  }
}

template <typename T>
T get(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(key, "wrong type");
  }
}

training::TrainConfig train_section(const json& j, const std::string& key, training::TrainConfig defaults) {
  if (!j.contains(key)) return defaults;
  json merged = training::to_json(defaults);
  if (!j[key].is_object()) throw ConfigError(key, "expected an object");
  for (const auto& [k, v] : j[key].items()) merged[k] = v;
  try {
    return training::train_config_from_json(merged);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key, e.what());
  } catch (const json::exception& e) {
    throw ConfigError(key, e.what());
  }
}

void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

training::EpochCallback epoch_printer(const Context& ctx, const std::string& tag) {
  return [&ctx, tag](const training::EpochRecord& r) {
    ctx.progress(tag + " epoch " + std::to_string(r.epoch) + " lr " + fixed(r.lr * 1e6, 3) + "e-6 loss " +
                 (r.mean_loss ? fixed(*r.mean_loss) : std::string("-")) + " positives " +
                 std::to_string(r.positives) + "/" + std::to_string(r.samples) + " (" + fixed(r.wall_time_s, 1) +
                 " s)");
  };
}

// ---- generate ----------------------------------------------------------------

int cmd_generate(Context& ctx) {
  json& c = ctx.config;
  if (ctx.spec.seed) c["seed"] = *ctx.spec.seed;
  const auto gen = synthmap::ambiguity_config_from_json(c);
  const int patch_size = get(c, "patch_size", 64);
  const int min_pixels = get(c, "min_pixels", 0);
  if (patch_size < 1) throw ConfigError("patch_size", "must be positive");
  if (min_pixels < 0) throw ConfigError("min_pixels", "must be >= 0");
  const auto library = synthmap::resolve_library(gen);
  for (const auto& s : gen.styles) {
    for (const auto& [cls, pid] : s.class_to_pattern) {
      if (pid < 0 || pid >= static_cast<int>(library.size())) {
        throw ConfigError("styles", "pattern id " + std::to_string(pid) + " is outside the library");
      }
    }
  }
  auto sheets = synthmap::make_ambiguity_suite(gen);
  const int first_fewshot_id = static_cast<int>(sheets.size());
  auto ds = datapipe::build_dataset(std::move(sheets), gen.classes, gen.styles, library,
                                    {.patch_size = patch_size, .min_pixels = min_pixels});

  if (c.contains("fewshot")) {
    const json& f = c["fewshot"];
    reject_unknown(f, {"style", "sheets", "sheet_height", "sheet_width", "region", "margin", "classes"}, "fewshot.");
    if (!f.contains("style")) throw ConfigError("fewshot.style", "missing key");
    const auto style = synthmap::style_from_json(f["style"]);
    synthmap::validate_style(style);
    const int n = get(f, "sheets", 1);
    const int h = get(f, "sheet_height", gen.sheet_height);
    const int w = get(f, "sheet_width", gen.sheet_width);
    const int margin = get(f, "margin", patch_size / 4);
    json r = f.value("region", json{{"y", 0}, {"x", 0}, {"height", h}, {"width", w}});
    const datapipe::Rect region{get(r, "y", 0), get(r, "x", 0), get(r, "height", h), get(r, "width", w)};
    std::vector<int> cls;
    for (const auto& [k, v] : style.class_to_pattern) cls.push_back(k);
    for (const auto& extra : f.value("classes", json::array())) {
      if (!extra.is_object() || !extra.contains("id")) throw ConfigError("fewshot.classes", "expected {id, name}");
      const int id = extra["id"].get<int>();
      if (std::none_of(ds.manifest.classes.begin(), ds.manifest.classes.end(), [&](auto& ci) { return ci.id == id; })) {
        ds.manifest.classes.push_back({id, extra.value("name", std::string{})});
      }
    }
    if (std::none_of(ds.manifest.styles.begin(), ds.manifest.styles.end(),
                     [&](auto& s) { return s.style_id == style.style_id; })) {
      ds.manifest.styles.push_back(style);
    }
    for (int k = 0; k < n; ++k) {
      auto sheet = synthmap::render_sheet(style, library, derive_seed(gen.seed, 0xF5u, static_cast<std::uint64_t>(k)),
                                          h, w, cls, gen.layout);
      sheet.sheet_id = first_fewshot_id + k;
      try {
        datapipe::add_fewshot(ds, sheet, region, margin);
      } catch (const std::invalid_argument& e) {
        throw ConfigError("fewshot.region", e.what());
      }
    }
  }

  const fs::path root = ctx.out_dir([] {
    const char* env = std::getenv("SMOL_DATA_ROOT");
    return env ? fs::path(env) : fs::path();
  }());
  datapipe::write_dataset(ds, root);
  ctx.out << "dataset " << root.string() << "\n"
          << "sheets " << ds.sheets.size() << "  train " << ds.train.size() << "  test " << ds.test.size()
          << "  fewshot " << ds.fewshot.size() << "  min_pixels " << ds.manifest.min_pixels << "\n";
  if (auto it = ds.manifest.ambiguity.find("test"); it != ds.manifest.ambiguity.end()) {
    ctx.out << "style-blind IoU ceiling (test):";
    for (const auto& [cls, v] : it->second.iou_ceiling) ctx.out << " " << cls << "=" << fixed(v, 3);
    ctx.out << "\n";
  }
  return kOk;
}

// ---- train -----------------------------------------------------------------

checkpoint::Checkpoint load_checkpoint(const fs::path& p) {
  try {
    return checkpoint::load(p);
  } catch (const checkpoint::CheckpointError& e) {
    throw MissingPath(e.what());
  }
}

int cmd_train(Context& ctx) {
  const json& c = ctx.config;
  reject_unknown(c, {"dataset", "kind", "model", "train", "init_checkpoint"});
  const std::string kind = get<std::string>(c, "kind", "smol");
  if (kind != "smol" && kind != "unet") throw ConfigError("kind", "expected 'smol' or 'unet'");
  auto tc = train_section(c, "train", {});
  if (ctx.spec.seed) tc.seed = *ctx.spec.seed;
  const json model_json = c.value("model", json::object());
  if (!model_json.is_object()) throw ConfigError("model", "expected an object");
  const fs::path root = ctx.dataset_root();
  const auto ds = datapipe::load_dataset(root);
  const fs::path out = ctx.out_dir();
  if (ctx.spec.verbosity >= 2) ctx.err << "train config " << training::to_json(tc).dump() << "\n";

  checkpoint::Checkpoint ckpt;
  training::TrainLog log;
  if (kind == "smol") {
    model::ModelConfig mc;
    try {
      mc = model::model_config_from_json(model_json);
      mc.validate();
    } catch (const std::exception& e) {
      throw ConfigError("model", e.what());
    }
    if (mc.patch_size != ds.manifest.patch_size) {
      throw ConfigError("model.patch_size", "differs from the dataset patch size " +
                                                std::to_string(ds.manifest.patch_size));
    }
    model::SmolMapSeg<float> m(mc, tc.seed);
    if (c.contains("init_checkpoint")) {
      const auto n = checkpoint::load_donor(m, load_checkpoint(ctx.existing("init_checkpoint")));
      ctx.progress("initialised " + std::to_string(n) + " tensors from the donor checkpoint");
    }
    log = training::train(m, ds, tc, epoch_printer(ctx, "train"));
    ckpt = checkpoint::from_params(m.params(), "smol", model::to_json(mc), ds.manifest.classes);
  } else {
    model::UNetConfig uc;
    int max_class = 0;
    for (const auto& ci : ds.manifest.classes) max_class = std::max(max_class, ci.id);
    uc.num_classes = max_class;
    uc.patch_size = ds.manifest.patch_size;
    try {
      json merged = model::to_json(uc);
      for (const auto& [k, v] : model_json.items()) merged[k] = v;
      uc = model::unet_config_from_json(merged);
      uc.validate();
    } catch (const std::exception& e) {
      throw ConfigError("model", e.what());
    }
    model::UNet<float> u(uc, tc.seed);
    log = training::train_baseline(u, ds, tc, epoch_printer(ctx, "baseline"));
    ckpt = checkpoint::from_params(u.params(), "unet", model::to_json(uc), ds.manifest.classes);
  }
  ckpt.metadata = {{"train", training::to_json(tc)}, {"config_hash", log.config_hash}};
  const fs::path ckpt_path = out / "checkpoint.tar";
  checkpoint::save(ckpt_path, ckpt);
  log.checkpoint_path = ckpt_path.string();
  training::write_log_jsonl(out / "train_log.jsonl", log);
  ctx.out << "checkpoint " << ckpt_path.string() << "\n";
  return kOk;
}

// ---- fewshot -----------------------------------------------------------------

int cmd_fewshot(Context& ctx) {
  const json& c = ctx.config;
  reject_unknown(c, {"dataset", "checkpoint", "new_class", "classes", "split", "train"});
  if (!c.contains("new_class")) throw ConfigError("new_class", "missing key");
  const int new_class = get(c, "new_class", 0);
  training::TrainConfig defaults;
  defaults.epochs = 50;
  auto tc = train_section(c, "train", defaults);
  if (ctx.spec.seed) tc.seed = *ctx.spec.seed;
  datapipe::Split split;
  try {
    split = datapipe::split_from_string(get<std::string>(c, "split", "fewshot"));
  } catch (const std::exception& e) {
    throw ConfigError("split", e.what());
  }
  const auto ds = datapipe::load_dataset(ctx.dataset_root());
  auto ckpt = load_checkpoint(ctx.existing("checkpoint"));
  auto m = checkpoint::load_smol(ckpt);
  std::vector<int> classes = get(c, "classes", std::vector<int>{});
  if (classes.empty()) {
    for (int id : ds.class_ids())
      if (id != new_class) classes.push_back(id);
  }
  const fs::path out = ctx.out_dir();
  training::TrainLog log;
  try {
    log = training::fewshot_finetune(m, ds.split(split), classes, new_class, ds.manifest.min_pixels, tc,
                                     epoch_printer(ctx, "fewshot"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("new_class", e.what());
  }
  auto classes_info = ckpt.classes;
  if (std::none_of(classes_info.begin(), classes_info.end(), [&](auto& ci) { return ci.id == new_class; })) {
    std::string name;
    for (const auto& ci : ds.manifest.classes)
      if (ci.id == new_class) name = ci.name;
    classes_info.push_back({new_class, name});
  }
  auto adapted = checkpoint::from_params(m.params(), "smol", model::to_json(m.config()), classes_info);
  adapted.metadata = {{"fewshot", training::to_json(tc)}, {"new_class", new_class}, {"config_hash", log.config_hash}};
  const fs::path ckpt_path = out / "checkpoint.tar";
  checkpoint::save(ckpt_path, adapted);
  log.checkpoint_path = ckpt_path.string();
  training::write_log_jsonl(out / "fewshot_log.jsonl", log);
  ctx.out << "checkpoint " << ckpt_path.string() << "\n";
  return kOk;
}

// ---- eval --------------------------------------------------------------------

struct LoadedSegmenter {
  std::optional<model::SmolMapSeg<float>> smol;
  std::optional<model::UNet<float>> unet;
  std::unique_ptr<evaluation::Segmenter> seg;
};

LoadedSegmenter make_segmenter(const checkpoint::Checkpoint& ckpt) {
  LoadedSegmenter l;
  if (ckpt.model_kind == "smol") {
    l.smol.emplace(checkpoint::load_smol(ckpt));
    l.seg = std::make_unique<evaluation::SmolSegmenter>(*l.smol);
  } else if (ckpt.model_kind == "unet") {
    l.unet.emplace(checkpoint::load_unet(ckpt));
    l.seg = std::make_unique<evaluation::UNetSegmenter>(*l.unet);
  } else if (ckpt.model_kind == "oracle") {
    l.seg = std::make_unique<evaluation::OracleSegmenter>();
  } else {
    throw ConfigError("checkpoint", "unknown model kind '" + ckpt.model_kind + "'");
  }
  return l;
}

void print_report(std::ostream& out, const evaluation::EvalReport& r) {
  out << std::left << std::setw(14) << "class" << std::right << std::setw(8) << "IoU" << std::setw(8) << "Prec"
      << std::setw(8) << "Rec" << std::setw(9) << "patches" << "\n";
  for (const auto& c : r.classes) {
    out << std::left << std::setw(14) << (c.name.empty() ? std::to_string(c.class_id) : c.name) << std::right
        << std::setw(8) << fixed(c.metrics.iou, 3) << std::setw(8) << fixed(c.metrics.precision, 3) << std::setw(8)
        << fixed(c.metrics.recall, 3) << std::setw(9) << c.patches << (c.degraded ? "  DEGRADED" : "");
    if (!c.skipped_sheets.empty()) out << "  (" << c.skipped_sheets.size() << " sheets without a source)";
    out << "\n";
  }
  out << std::left << std::setw(14) << "mean" << std::right << std::setw(8) << fixed(r.mean.iou, 3) << std::setw(8)
      << fixed(r.mean.precision, 3) << std::setw(8) << fixed(r.mean.recall, 3) << "\n";
}

int cmd_eval(Context& ctx) {
  const json& c = ctx.config;
  reject_unknown(c, {"dataset", "checkpoint", "baseline_checkpoint", "threshold", "prompt_seed", "style_id", "classes"});
  evaluation::EvalOptions opts;
  opts.threshold = get(c, "threshold", 0.5);
  if (!(opts.threshold > 0.0 && opts.threshold < 1.0)) throw ConfigError("threshold", "must lie in (0, 1)");
  opts.prompt_seed = ctx.spec.seed ? *ctx.spec.seed : get<std::uint64_t>(c, "prompt_seed", 0);
  if (c.contains("style_id")) opts.style_id = get(c, "style_id", 0);
  std::vector<int> classes = get(c, "classes", std::vector<int>{});
  const fs::path root = ctx.dataset_root();
  const auto ds = datapipe::load_dataset(root);
  if (classes.empty()) {
    // Classes that only occur in few-shot crops have nothing to evaluate.
    std::set<int> seen;
    for (const auto* split : {&ds.train, &ds.test})
      for (const auto& p : *split)
        for (auto v : p.label.pixels) seen.insert(v);
    for (int id : ds.class_ids())
      if (seen.count(id)) classes.push_back(id);
  }
  const fs::path ckpt_path = ctx.existing("checkpoint");
  std::optional<fs::path> base_path;
  if (c.contains("baseline_checkpoint")) base_path = ctx.existing("baseline_checkpoint");
  const fs::path out = ctx.out_dir();

  auto primary = make_segmenter(load_checkpoint(ckpt_path));
  auto report = evaluation::evaluate(*primary.seg, ds, opts, classes);
  report.dataset = root.string();
  report.checkpoint = ckpt_path.string();
  write_json(out / "eval_report.json", evaluation::to_json(report));
  print_report(ctx.out, report);
  if (base_path) {
    auto baseline = make_segmenter(load_checkpoint(*base_path));
    auto base_report = evaluation::evaluate(*baseline.seg, ds, opts, classes);
    base_report.dataset = root.string();
    base_report.checkpoint = base_path->string();
    write_json(out / "baseline_report.json", evaluation::to_json(base_report));
    const auto cmp = evaluation::compare_models(report, base_report, report.model_kind, base_report.model_kind);
    write_json(out / "comparison.json", cmp.to_json());
    write_file(out / "comparison.txt", cmp.to_text());
    ctx.out << "\n" << cmp.to_text();
  }
  return kOk;
}

// ---- infer -------------------------------------------------------------------

int cmd_infer(Context& ctx) {
  const json& c = ctx.config;
  reject_unknown(c, {"checkpoint", "source_image", "source_mask", "target_image", "threshold"});
  const double threshold = get(c, "threshold", 0.5);
  auto ckpt = load_checkpoint(ctx.existing("checkpoint"));
  if (ckpt.model_kind != "smol") throw ConfigError("checkpoint", "infer needs a smol checkpoint");
  auto m = checkpoint::load_smol(ckpt);
  auto read_rgb = [&](const std::string& key) {
    const auto p = ctx.existing(key);
    try {
      return read_png_rgb(p);
    } catch (const ImageIoError& e) {
      throw ConfigError(key, e.what());
    }
  };
  const RgbImage source = read_rgb("source_image");
  const RgbImage target = read_rgb("target_image");
  BinaryMask mask;
  try {
    mask = inference::binarize(read_png_gray(ctx.existing("source_mask")));
  } catch (const ImageIoError& e) {
    throw ConfigError("source_mask", e.what());
  }
  inference::Segmentation seg;
  try {
    seg = inference::segment_image(m, source, mask, target, threshold);
  } catch (const inference::InputError& e) {
    throw ConfigError(e.field(), e.what());
  }
  const fs::path out = ctx.out_dir();
  GrayImage png = seg.mask;
  for (auto& v : png.pixels) v = v ? 255 : 0;
  write_png(out / "mask.png", png);
  write_png(out / "overlay.png", evaluation::overlay(target, seg.mask));
  ctx.out << "mask " << (out / "mask.png").string() << "  foreground " << fixed(seg.foreground_fraction, 4) << "\n";
  return kOk;
}

// ---- serve -------------------------------------------------------------------

#ifdef SMOL_WITH_SERVICE
int cmd_serve(Context& ctx) {
  auto cfg = service::service_config_from_json(ctx.config);
  cfg.checkpoint = ctx.resolve(cfg.checkpoint);
  if (cfg.dataset) cfg.dataset = ctx.resolve(*cfg.dataset);
  if (!fs::exists(cfg.checkpoint)) throw MissingPath("checkpoint: no such file: " + cfg.checkpoint.string());
  std::optional<datapipe::Dataset> demo;
  if (cfg.dataset) demo = datapipe::load_dataset(*cfg.dataset);
  auto svc = std::make_shared<const service::SegmentService>(load_checkpoint(cfg.checkpoint), std::move(demo),
                                                             cfg.max_side, cfg.thumbnail_side);
  service::HttpServer server(svc);
  const int port = server.start(cfg.host, cfg.port);
  ctx.out << "listening on http://" << cfg.host << ":" << port << "\n" << std::flush;
  server.wait();
  return kOk;
}
#else
int cmd_serve(Context& ctx) {
  ctx.err << "error: serve: this build has no HTTP service (configure with SMOL_BUILD_SERVICE=ON)\n";
  return kFailure;
}
#endif

}  // namespace

int run(const RunSpec& spec, std::ostream& out, std::ostream& err) {
  try {
    Context ctx{spec, out, err, json::object(), fs::current_path()};
    if (!spec.config.empty()) {
      if (!fs::exists(spec.config)) {
        err << "error: --config: no such file: " << spec.config.string() << "\n";
        return kConfigError;
      }
      try {
        ctx.config = json::parse(read_file(spec.config));
      } catch (const json::parse_error& e) {
        err << "config error: " << spec.config.string() << ": " << e.what() << "\n";
        return kConfigError;
      }
      if (!ctx.config.is_object()) throw ConfigError("<root>", "expected a JSON object");
      ctx.base = fs::absolute(spec.config).parent_path();
    }
    if (spec.command == "generate") return cmd_generate(ctx);
    if (spec.command == "train") return cmd_train(ctx);
    if (spec.command == "fewshot") return cmd_fewshot(ctx);
    if (spec.command == "eval") return cmd_eval(ctx);
    if (spec.command == "infer") return cmd_infer(ctx);
    if (spec.command == "serve") return cmd_serve(ctx);
    err << "error: unknown command '" << spec.command << "'\n";
    return kConfigError;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const MissingPath& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const json::exception& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const sampler::UnsatisfiableDataset& e) {
    err << "sampler: " << e.what() << "\n";
    return kFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

int main(int argc, char** argv) {
  CLI::App app{"SMOL-MapSeg: prompted segmentation of historical map sheets"};
  app.require_subcommand(1);
  RunSpec spec;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  bool verbose = false;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"generate", "Render a synthetic multi-style dataset"},
      {"train", "Train SMOL-MapSeg or the UNet baseline"},
      {"fewshot", "Fine-tune a checkpoint on a few-shot pool for a new class"},
      {"eval", "Evaluate a checkpoint with the prompted protocol"},
      {"infer", "Segment a target image from one labelled source image"},
      {"serve", "Run the HTTP inference service"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", spec.config, "JSON config file")->required();
    sub->add_option("--out", spec.out, "Output directory");
    sub->add_option("--seed", seed, "Override the config seed");
    sub->add_flag("-q,--quiet", quiet, "Suppress progress output");
    sub->add_flag("-v,--verbose", verbose, "Print extra detail");
    sub->callback([&spec, name = name] { spec.command = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }
  spec.seed = seed;
  spec.verbosity = quiet ? 0 : verbose ? 2 : 1;
  return run(spec, std::cout, std::cerr);
}

}  // namespace smol::cli
