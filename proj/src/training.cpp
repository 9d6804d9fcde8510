// SPDX-License-Identifier: Apache-2.0
#include "smol/training.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "smol/nn/params.hpp"
#include "smol/rng.hpp"
#include "smol/sampler.hpp"

namespace smol::training {

using nn::Matrix;
using nn::Tape;
using nn::Var;

std::string to_string(LossKind kind) { return kind == LossKind::bce ? "bce" : "bce_plus_dice"; }

LossKind loss_kind_from_string(const std::string& name) {
  if (name == "bce") return LossKind::bce;
  if (name == "bce_plus_dice") return LossKind::bce_plus_dice;
  throw std::invalid_argument("loss must be 'bce' or 'bce_plus_dice', got '" + name + "'");
}

void TrainConfig::validate() const {
  if (!(base_lr > 0.0)) throw std::invalid_argument("base_lr must be > 0");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (pairs_per_epoch < 0) throw std::invalid_argument("pairs_per_epoch must be >= 0");
  if (p < 0.0 || p > 1.0) throw std::invalid_argument("p must lie in [0, 1]");
  if (grad_clip < 0.0) throw std::invalid_argument("grad_clip must be >= 0");
  if (encoder_lr_scale < 0.0) throw std::invalid_argument("encoder_lr_scale must be >= 0");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"base_lr", c.base_lr}, {"weight_decay", c.weight_decay}, {"epochs", c.epochs},
          {"batch_size", c.batch_size}, {"pairs_per_epoch", c.pairs_per_epoch}, {"p", c.p},
          {"seed", c.seed}, {"loss", to_string(c.loss)}, {"grad_clip", c.grad_clip},
          {"encoder_lr_scale", c.encoder_lr_scale}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {"base_lr", "weight_decay", "epochs", "batch_size",
                                              "pairs_per_epoch", "p", "seed", "loss", "grad_clip", "encoder_lr_scale"};
  if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw std::invalid_argument("unknown train config key '" + k + "'");
  }
  TrainConfig c;
  try {
    if (j.contains("base_lr")) c.base_lr = j["base_lr"].get<double>();
    if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"].get<double>();
    if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
    if (j.contains("pairs_per_epoch")) c.pairs_per_epoch = j["pairs_per_epoch"].get<int>();
    if (j.contains("p")) c.p = j["p"].get<double>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("grad_clip")) c.grad_clip = j["grad_clip"].get<double>();
    if (j.contains("encoder_lr_scale")) c.encoder_lr_scale = j["encoder_lr_scale"].get<double>();
    if (j.contains("loss")) c.loss = loss_kind_from_string(j["loss"].get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string config_hash(const nlohmann::json& j) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << h;
  return out.str();
}

nlohmann::json to_json(const EpochRecord& r) {
  nlohmann::json j = {{"epoch", r.epoch}, {"lr", r.lr}, {"samples", r.samples}, {"positives", r.positives},
                      {"wall_time_s", r.wall_time_s}};
  j["mean_loss"] = r.mean_loss ? nlohmann::json(*r.mean_loss) : nlohmann::json(nullptr);
  return j;
}

void write_log_jsonl(const std::filesystem::path& path, const TrainLog& log) {
  std::ostringstream out;
  for (const auto& e : log.epochs) out << to_json(e).dump() << "\n";
  out << nlohmann::json{{"run", {{"config_hash", log.config_hash}, {"checkpoint", log.checkpoint_path}}}}.dump()
      << "\n";
  write_file(path, out.str());
}

double lr_at(int e, int E, double b) {
  if (E < 1) throw std::invalid_argument("lr_at: E must be >= 1");
  if (e < 0 || e > E) throw std::invalid_argument("lr_at: e must lie in [0, E]");
  return b * 0.5 * (1.0 + std::cos(static_cast<double>(e) * std::numbers::pi / static_cast<double>(E)));
}

template <typename T>
Var mask_loss(Tape<T>& t, Var logits, const Matrix<T>& target, LossKind kind) {
  Var l = nn::bce_with_logits(t, logits, target);
  if (kind == LossKind::bce_plus_dice) l = nn::add(t, l, nn::soft_dice_loss(t, logits, target));
  return l;
}

template Var mask_loss<float>(Tape<float>&, Var, const Matrix<float>&, LossKind);
template Var mask_loss<double>(Tape<double>&, Var, const Matrix<double>&, LossKind);

double loss_value(const Matrix<double>& logits, const Matrix<double>& target, LossKind kind) {
  Tape<double> t(false);
  return t.value(mask_loss(t, t.constant(logits), target, kind))(0, 0);
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

template <typename Params>
void clip_global_norm(Params& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params.all()) sq += static_cast<double>(p.grad.squaredNorm());
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const auto s = static_cast<float>(max_norm / norm);
  for (auto& p : params.all()) p.grad *= s;
}

/// Shared epoch loop: `step(i)` accumulates gradients for sample i of the
/// epoch and returns its loss; the batch mean is applied via the backward seed.
template <typename Model, typename Draw, typename Step>
TrainLog run_epochs(Model& model, const TrainConfig& cfg, nlohmann::json hash_input, Draw&& draw, Step&& step,
                    const EpochCallback& on_epoch) {
  cfg.validate();
  TrainLog log;
  log.config_hash = config_hash(hash_input);
  nn::AdamW<float> opt(model.params(), {.weight_decay = cfg.weight_decay});
  opt.scale_group("image_encoder/", cfg.encoder_lr_scale);
  for (int e = 0; e < cfg.epochs; ++e) {
    const auto start = Clock::now();
    EpochRecord rec;
    rec.epoch = e;
    rec.lr = lr_at(e, cfg.epochs, cfg.base_lr);
    const int n = cfg.pairs_per_epoch;
    if (n > 0) {
      draw(e, n);
      double total = 0.0;
      for (int b0 = 0; b0 < n; b0 += cfg.batch_size) {
        const int b1 = std::min(n, b0 + cfg.batch_size);
        model.params().zero_grad();
        for (int i = b0; i < b1; ++i) {
          const auto [loss, positive] = step(i, 1.0f / static_cast<float>(b1 - b0));
          total += loss;
          rec.positives += positive ? 1 : 0;
        }
        if (cfg.grad_clip > 0.0) clip_global_norm(model.params(), cfg.grad_clip);
        opt.step(rec.lr);
      }
      rec.samples = n;
      rec.mean_loss = total / n;
    }
    rec.wall_time_s = seconds_since(start);
    log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return log;
}

struct PairBatchSource {
  const std::vector<datapipe::Patch>& patches;
  const datapipe::ClassIndex& index;
  sampler::SamplerConfig scfg;
  std::uint64_t seed;
  std::vector<sampler::PairSample> pairs;
  std::vector<Matrix<float>> images;

  PairBatchSource(const std::vector<datapipe::Patch>& p, const datapipe::ClassIndex& idx, sampler::SamplerConfig s,
                  std::uint64_t base_seed)
      : patches(p), index(idx), scfg(std::move(s)), seed(base_seed) {
    images.reserve(patches.size());
    for (const auto& patch : patches) images.push_back(model::image_to_matrix<float>(patch.image));
  }

  void draw(int epoch, int n) {
    auto c = scfg;
    c.seed = derive_seed(seed, epoch);
    pairs = sampler::make_epoch(index, patches, c, n);
  }

  std::pair<double, bool> step(model::SmolMapSeg<float>& m, LossKind loss, int i, float weight) const {
    const auto& pr = pairs[static_cast<std::size_t>(i)];
    Tape<float> t;
    Var logits = m.forward(t, t.constant(images[pr.source]), t.constant(model::mask_to_matrix<float>(pr.source_mask)),
                           t.constant(images[pr.target]));
    Var l = mask_loss(t, logits, model::mask_to_matrix<float>(pr.target_mask), loss);
    const double value = t.value(l)(0, 0);
    t.backward(l, weight);
    return {value, pr.polarity == sampler::Polarity::positive};
  }
};

}  // namespace

TrainLog train(model::SmolMapSeg<float>& model, const datapipe::Dataset& ds, const TrainConfig& cfg,
               const EpochCallback& on_epoch) {
  cfg.validate();
  const auto index = datapipe::index_classes(ds.train, ds.manifest.min_pixels);
  sampler::SamplerConfig scfg;
  scfg.p = cfg.p;
  scfg.seed = cfg.seed;
  scfg.classes = ds.class_ids();
  PairBatchSource src(ds.train, index, scfg, cfg.seed);
  nlohmann::json h = {{"train", to_json(cfg)}, {"model", model::to_json(model.config())}};
  return run_epochs(
      model, cfg, h, [&](int e, int n) { src.draw(e, n); },
      [&](int i, float w) { return src.step(model, cfg.loss, i, w); }, on_epoch);
}

TrainLog fewshot_finetune(model::SmolMapSeg<float>& model, const std::vector<datapipe::Patch>& pool,
                          const std::vector<datapipe::ClassId>& classes, datapipe::ClassId new_class, int min_pixels,
                          const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  const auto index = datapipe::index_classes(pool, min_pixels);
  bool found = false;
  for (std::size_t i = 0; i < index.size() && !found; ++i) found = index.classes_of(i).count(new_class) > 0;
  if (!found) {
    throw std::invalid_argument("fewshot: class " + std::to_string(new_class) + " is absent from every few-shot patch");
  }
  std::vector<datapipe::ClassId> universe = classes;
  if (std::find(universe.begin(), universe.end(), new_class) == universe.end()) universe.push_back(new_class);
  sampler::SamplerConfig scfg{.p = cfg.p, .seed = cfg.seed, .classes = universe, .positive_class = new_class};
  PairBatchSource src(pool, index, scfg, cfg.seed);
  nlohmann::json h = {{"fewshot", to_json(cfg)}, {"new_class", new_class}, {"model", model::to_json(model.config())}};
  return run_epochs(
      model, cfg, h, [&](int e, int n) { src.draw(e, n); },
      [&](int i, float w) { return src.step(model, cfg.loss, i, w); }, on_epoch);
}

TrainLog train_baseline(model::UNet<float>& unet, const datapipe::Dataset& ds, const TrainConfig& cfg,
                        const EpochCallback& on_epoch) {
  cfg.validate();
  if (ds.train.empty() && cfg.pairs_per_epoch > 0) throw std::invalid_argument("train_baseline: empty train split");
  const int channels = unet.config().num_classes + 1;
  std::vector<Matrix<float>> images;
  std::vector<std::vector<int>> labels;
  for (const auto& p : ds.train) {
    images.push_back(model::image_to_matrix<float>(p.image));
    std::vector<int> l(p.label.pixels.begin(), p.label.pixels.end());
    for (int v : l) {
      if (v >= channels) throw std::invalid_argument("train_baseline: label " + std::to_string(v) + " exceeds num_classes");
    }
    labels.push_back(std::move(l));
  }
  std::vector<std::size_t> order;
  nlohmann::json h = {{"baseline", to_json(cfg)}, {"unet", model::to_json(unet.config())}};
  return run_epochs(
      unet, cfg, h,
      [&](int e, int n) {
        std::mt19937_64 rng(derive_seed(cfg.seed, e));
        std::uniform_int_distribution<std::size_t> pick(0, images.size() - 1);
        order.resize(static_cast<std::size_t>(n));
        for (auto& o : order) o = pick(rng);
      },
      [&](int i, float w) {
        const std::size_t k = order[static_cast<std::size_t>(i)];
        Tape<float> t;
        Var l = nn::softmax_cross_entropy(t, unet.forward(t, t.constant(images[k])), labels[k]);
        const double value = t.value(l)(0, 0);
        t.backward(l, w);
        return std::pair<double, bool>{value, false};
      },
      on_epoch);
}

}  // namespace smol::training
