// SPDX-License-Identifier: Apache-2.0
#include "smol/evaluation.hpp"

#include <algorithm>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "smol/rng.hpp"

namespace smol::evaluation {

ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw std::invalid_argument("confusion: prediction and ground truth differ in shape");
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.pixels.size(); ++i) {
    const bool p = pred.pixels[i] != 0;
    const bool g = gt.pixels[i] != 0;
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
  }
  return c;
}

Metrics metrics_from_counts(const ConfusionCounts& c) {
  if (c.tp == 0 && c.fp == 0 && c.fn == 0) return {1.0, 1.0, 1.0};
  auto ratio = [](std::uint64_t num, std::uint64_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  return {ratio(c.tp, c.tp + c.fp + c.fn), ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn)};
}

const nn::Matrix<float>& SmolSegmenter::features(const Patch& p) {
  auto it = features_.find(p.patch_id);
  if (it == features_.end()) {
    it = features_.emplace(p.patch_id, model_.image_features(model::image_to_matrix<float>(p.image))).first;
  }
  return it->second;
}

nn::Matrix<float> SmolSegmenter::logits(const Patch& source, ClassId class_x, const Patch& target) {
  const auto key = std::make_pair(source.patch_id, class_x);
  auto it = prompts_.find(key);
  if (it == prompts_.end()) {
    const auto mask = model::mask_to_matrix<float>(class_mask(source.label, class_x));
    it = prompts_.emplace(key, model_.prompt_grid(features(source), mask)).first;
  }
  return model_.mask_logits(features(target), it->second);
}

BinaryMask SmolSegmenter::segment(const Patch& source, ClassId class_x, const Patch& target, double threshold) {
  return model::threshold_logits(logits(source, class_x, target), target.image.height, target.image.width, threshold);
}

BinaryMask UNetSegmenter::segment(const Patch&, ClassId class_x, const Patch& target, double) {
  auto it = labels_.find(target.patch_id);
  if (it == labels_.end()) {
    const auto logits = unet_.logits(model::image_to_matrix<float>(target.image));
    it = labels_.emplace(target.patch_id, model::argmax_labels(logits, target.image.height, target.image.width)).first;
  }
  return class_mask(it->second, class_x);
}

ClassResult evaluate_class(Segmenter& seg, const datapipe::Dataset& ds, ClassId class_x, const EvalOptions& opts) {
  const int min_pixels = ds.manifest.min_pixels;
  const auto train_index = datapipe::index_classes(ds.train, min_pixels);
  const auto test_index = datapipe::index_classes(ds.test, min_pixels);

  std::set<int> sheets;
  for (const auto* idx : {&train_index, &test_index}) {
    for (const auto& [sheet, classes] : idx->by_sheet()) {
      if (classes.count(class_x)) sheets.insert(sheet);
    }
  }
  ClassResult r;
  r.class_id = class_x;
  for (const auto& c : ds.manifest.classes) {
    if (c.id == class_x) r.name = c.name;
  }
  for (std::size_t i = 0; i < ds.test.size(); ++i) {
    const Patch& target = ds.test[i];
    if (!sheets.count(target.sheet_id)) continue;
    if (opts.style_id && ds.style_of(target.sheet_id) != *opts.style_id) continue;
    const auto& sources = train_index.patches_with(target.sheet_id, class_x);
    if (sources.empty()) {
      if (r.skipped_sheets.empty() || r.skipped_sheets.back() != target.sheet_id) {
        r.skipped_sheets.push_back(target.sheet_id);
      }
      continue;
    }
    std::mt19937_64 rng(derive_seed(opts.prompt_seed, class_x, target.patch_id));
    const int source_id = sources[std::uniform_int_distribution<std::size_t>(0, sources.size() - 1)(rng)];
    const Patch& source = ds.train[train_index.position_of(source_id)];
    const BinaryMask pred = seg.segment(source, class_x, target, opts.threshold);
    r.counts += confusion(pred, class_mask(target.label, class_x));
    ++r.patches;
  }
  std::sort(r.skipped_sheets.begin(), r.skipped_sheets.end());
  r.skipped_sheets.erase(std::unique(r.skipped_sheets.begin(), r.skipped_sheets.end()), r.skipped_sheets.end());
  r.metrics = metrics_from_counts(r.counts);
  r.degraded = r.metrics.iou < kDegradedIou;
  return r;
}

const ClassResult& EvalReport::at(ClassId id) const {
  for (const auto& c : classes) {
    if (c.class_id == id) return c;
  }
  throw std::out_of_range("report has no class " + std::to_string(id));
}

EvalReport evaluate(Segmenter& seg, const datapipe::Dataset& ds, const EvalOptions& opts,
                    std::vector<ClassId> classes) {
  if (classes.empty()) classes = ds.class_ids();
  EvalReport report;
  report.model_kind = seg.kind();
  report.options = opts;
  for (ClassId c : classes) report.classes.push_back(evaluate_class(seg, ds, c, opts));
  for (const auto& c : report.classes) {
    report.mean.iou += c.metrics.iou;
    report.mean.precision += c.metrics.precision;
    report.mean.recall += c.metrics.recall;
  }
  if (!report.classes.empty()) {
    const double n = static_cast<double>(report.classes.size());
    report.mean.iou /= n;
    report.mean.precision /= n;
    report.mean.recall /= n;
  }
  return report;
}

namespace {

nlohmann::json metrics_json(const Metrics& m) {
  return {{"iou", m.iou}, {"precision", m.precision}, {"recall", m.recall}};
}

Metrics metrics_from(const nlohmann::json& j) {
  return {j.at("iou").get<double>(), j.at("precision").get<double>(), j.at("recall").get<double>()};
}

}  // namespace

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : r.classes) {
    nlohmann::json j = metrics_json(c.metrics);
    j["class_id"] = c.class_id;
    j["name"] = c.name;
    j["tp"] = c.counts.tp;
    j["fp"] = c.counts.fp;
    j["fn"] = c.counts.fn;
    j["patches"] = c.patches;
    j["skipped_sheets"] = c.skipped_sheets;
    j["degraded"] = c.degraded;
    classes.push_back(j);
  }
  nlohmann::json meta = {{"dataset", r.dataset}, {"checkpoint", r.checkpoint}, {"model_kind", r.model_kind},
                         {"prompt_seed", r.options.prompt_seed}, {"threshold", r.options.threshold}};
  meta["style_id"] = r.options.style_id ? nlohmann::json(*r.options.style_id) : nlohmann::json(nullptr);
  return {{"metadata", meta}, {"classes", classes}, {"mean", metrics_json(r.mean)}};
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  const auto& meta = j.at("metadata");
  r.dataset = meta.value("dataset", "");
  r.checkpoint = meta.value("checkpoint", "");
  r.model_kind = meta.value("model_kind", "");
  r.options.prompt_seed = meta.value("prompt_seed", std::uint64_t{0});
  r.options.threshold = meta.value("threshold", 0.5);
  if (meta.contains("style_id") && !meta["style_id"].is_null()) r.options.style_id = meta["style_id"].get<int>();
  for (const auto& c : j.at("classes")) {
    ClassResult cr;
    cr.class_id = c.at("class_id").get<int>();
    cr.name = c.value("name", "");
    cr.metrics = metrics_from(c);
    cr.counts = {c.at("tp").get<std::uint64_t>(), c.at("fp").get<std::uint64_t>(), c.at("fn").get<std::uint64_t>()};
    cr.patches = c.value("patches", 0);
    cr.skipped_sheets = c.value("skipped_sheets", std::vector<int>{});
    cr.degraded = c.value("degraded", false);
    r.classes.push_back(cr);
  }
  r.mean = metrics_from(j.at("mean"));
  return r;
}

BinaryMask stitch_sheet(const std::vector<TilePrediction>& tiles, int sheet_height, int sheet_width) {
  BinaryMask out(sheet_height, sheet_width);
  std::set<std::pair<int, int>> seen;
  for (const auto& t : tiles) {
    if (!seen.insert({t.grid_row, t.grid_col}).second) {
      throw std::invalid_argument("stitch_sheet: duplicate grid cell (" + std::to_string(t.grid_row) + ", " +
                                  std::to_string(t.grid_col) + ")");
    }
    const int y0 = t.grid_row * t.mask.height;
    const int x0 = t.grid_col * t.mask.width;
    if (t.grid_row < 0 || t.grid_col < 0 || y0 + t.mask.height > sheet_height || x0 + t.mask.width > sheet_width) {
      throw std::invalid_argument("stitch_sheet: tile outside the sheet");
    }
    for (int y = 0; y < t.mask.height; ++y) {
      std::copy_n(t.mask.pixels.begin() + static_cast<std::ptrdiff_t>(y) * t.mask.width, t.mask.width,
                  out.pixels.begin() + static_cast<std::ptrdiff_t>(y0 + y) * sheet_width + x0);
    }
  }
  return out;
}

Comparison compare_models(const EvalReport& a, const EvalReport& b, std::string label_a, std::string label_b) {
  if (a.classes.size() != b.classes.size()) throw std::invalid_argument("compare_models: class sets differ");
  Comparison cmp;
  cmp.label_a = std::move(label_a);
  cmp.label_b = std::move(label_b);
  for (std::size_t i = 0; i < a.classes.size(); ++i) {
    if (a.classes[i].class_id != b.classes[i].class_id) {
      throw std::invalid_argument("compare_models: class sets differ");
    }
    cmp.rows.push_back({a.classes[i].class_id, a.classes[i].name, a.classes[i].metrics, b.classes[i].metrics});
  }
  cmp.mean_a = a.mean;
  cmp.mean_b = b.mean;
  return cmp;
}

namespace {

std::string winner(double a, double b) {
  if (a > b) return "a";
  if (b > a) return "b";
  return "";
}

nlohmann::json side_by_side(const Metrics& a, const Metrics& b) {
  nlohmann::json j;
  for (auto [name, va, vb] : {std::tuple{"iou", a.iou, b.iou}, std::tuple{"precision", a.precision, b.precision},
                              std::tuple{"recall", a.recall, b.recall}}) {
    j[name] = {{"a", va}, {"b", vb}};
    const auto w = winner(va, vb);
    j[name]["winner"] = w.empty() ? nlohmann::json(nullptr) : nlohmann::json(w);
  }
  return j;
}

}  // namespace

nlohmann::json Comparison::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json j = side_by_side(r.a, r.b);
    j["class_id"] = r.class_id;
    j["name"] = r.name;
    rows_json.push_back(j);
  }
  return {{"a", label_a}, {"b", label_b}, {"classes", rows_json}, {"mean", side_by_side(mean_a, mean_b)}};
}

std::string Comparison::to_text() const {
  std::ostringstream out;
  out << std::fixed << std::setprecision(3);
  auto cell = [&](double v, double other) {
    std::ostringstream c;
    c << std::fixed << std::setprecision(3) << v << (v > other ? "*" : " ");
    return c.str();
  };
  const std::string metrics[] = {"IoU", "Prec", "Rec"};
  out << std::left << std::setw(12) << "class";
  for (const auto& m : metrics) {
    out << std::right << std::setw(9) << (m + " " + label_a.substr(0, 4)) << std::setw(9)
        << (m + " " + label_b.substr(0, 4));
  }
  out << "\n";
  auto line = [&](const std::string& name, const Metrics& a, const Metrics& b) {
    out << std::left << std::setw(12) << name.substr(0, 11);
    for (auto [va, vb] : {std::pair{a.iou, b.iou}, std::pair{a.precision, b.precision}, std::pair{a.recall, b.recall}}) {
      out << std::right << std::setw(9) << cell(va, vb) << std::setw(9) << cell(vb, va);
    }
    out << "\n";
  };
  for (const auto& r : rows) line(r.name.empty() ? std::to_string(r.class_id) : r.name, r.a, r.b);
  line("mean", mean_a, mean_b);
  return out.str();
}

RgbImage overlay(const RgbImage& image, const BinaryMask& mask, Rgb color, double alpha) {
  if (image.height != mask.height || image.width != mask.width) {
    throw std::invalid_argument("overlay: image and mask differ in shape");
  }
  RgbImage out = image;
  const std::uint8_t c[3] = {color.r, color.g, color.b};
  for (std::size_t i = 0; i < mask.pixels.size(); ++i) {
    if (!mask.pixels[i]) continue;
    for (int k = 0; k < 3; ++k) {
      auto& v = out.pixels[i * 3 + static_cast<std::size_t>(k)];
      v = static_cast<std::uint8_t>(std::lround((1.0 - alpha) * v + alpha * c[k]));
    }
  }
  return out;
}

}  // namespace smol::evaluation
