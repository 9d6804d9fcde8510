// SPDX-License-Identifier: Apache-2.0
//
// Pixel metrics, the per-class prompted evaluation protocol, sheet stitching
// and model comparison tables.
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "smol/datapipe.hpp"
#include "smol/model.hpp"

namespace smol::evaluation {

using datapipe::ClassId;
using datapipe::Patch;

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

struct Metrics {
  double iou = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

/// Throws std::invalid_argument on a shape mismatch.
ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& gt);

/// Empty prediction and empty ground truth score 1 on every metric; otherwise
/// a metric whose denominator is zero scores 0.
Metrics metrics_from_counts(const ConfusionCounts& c);

/// Produces a binary mask for `class_x` on `target`. Prompted models use the
/// source patch; unprompted ones ignore it.
class Segmenter {
 public:
  virtual ~Segmenter() = default;
  virtual BinaryMask segment(const Patch& source, ClassId class_x, const Patch& target, double threshold) = 0;
  virtual std::string kind() const = 0;
};

/// Returns the ground-truth indicator; an upper bound used to test the pipeline.
class OracleSegmenter : public Segmenter {
 public:
  BinaryMask segment(const Patch&, ClassId class_x, const Patch& target, double) override {
    return class_mask(target.label, class_x);
  }
  std::string kind() const override { return "oracle"; }
};

/// SMOL-MapSeg with per-patch feature and per-(source, class) prompt caches.
class SmolSegmenter : public Segmenter {
 public:
  explicit SmolSegmenter(model::SmolMapSeg<float>& model) : model_(model) {}
  BinaryMask segment(const Patch& source, ClassId class_x, const Patch& target, double threshold) override;
  /// Raw logits for a pair, [P*P, 1].
  nn::Matrix<float> logits(const Patch& source, ClassId class_x, const Patch& target);
  std::string kind() const override { return "smol"; }
  void clear_cache() {
    features_.clear();
    prompts_.clear();
  }

 private:
  const nn::Matrix<float>& features(const Patch& p);

  model::SmolMapSeg<float>& model_;
  std::map<int, nn::Matrix<float>> features_;
  std::map<std::pair<int, ClassId>, nn::Matrix<float>> prompts_;
};

/// UNet baseline: argmax class map per target, cached.
class UNetSegmenter : public Segmenter {
 public:
  explicit UNetSegmenter(model::UNet<float>& unet) : unet_(unet) {}
  BinaryMask segment(const Patch& source, ClassId class_x, const Patch& target, double threshold) override;
  std::string kind() const override { return "unet"; }

 private:
  model::UNet<float>& unet_;
  std::map<int, LabelRaster> labels_;
};

struct EvalOptions {
  double threshold = 0.5;
  std::uint64_t prompt_seed = 0;
  /// Restricts evaluation to sheets of one style.
  std::optional<int> style_id;
};

struct ClassResult {
  ClassId class_id = 0;
  std::string name;
  ConfusionCounts counts;
  Metrics metrics;
  int patches = 0;
  /// Sheets holding the class but offering no train-split source patch.
  std::vector<int> skipped_sheets;
  /// IoU below 0.5.
  bool degraded = false;
};

/// Prompted protocol: every test patch of every sheet holding `class_x` is
/// segmented with a seeded random source patch from the same sheet's train
/// split that contains the class; counts are pooled before computing metrics.
ClassResult evaluate_class(Segmenter& seg, const datapipe::Dataset& ds, ClassId class_x, const EvalOptions& opts);

struct EvalReport {
  std::string dataset;
  std::string checkpoint;
  std::string model_kind;
  EvalOptions options;
  std::vector<ClassResult> classes;
  Metrics mean;

  const ClassResult& at(ClassId id) const;
};

constexpr double kDegradedIou = 0.5;

/// Evaluates `classes` (all dataset classes when empty).
EvalReport evaluate(Segmenter& seg, const datapipe::Dataset& ds, const EvalOptions& opts,
                    std::vector<ClassId> classes = {});

nlohmann::json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);

struct TilePrediction {
  int grid_row = 0;
  int grid_col = 0;
  BinaryMask mask;
};

/// Places P x P tiles at (row * P, col * P) on a zeroed sheet-sized mask.
BinaryMask stitch_sheet(const std::vector<TilePrediction>& tiles, int sheet_height, int sheet_width);

struct ComparisonRow {
  ClassId class_id = 0;
  std::string name;
  Metrics a;
  Metrics b;
};

struct Comparison {
  std::string label_a;
  std::string label_b;
  std::vector<ComparisonRow> rows;
  Metrics mean_a;
  Metrics mean_b;

  nlohmann::json to_json() const;
  /// Fixed-width table; '*' marks the strictly better value of each pair.
  std::string to_text() const;
};

/// Throws std::invalid_argument when the class sets differ.
Comparison compare_models(const EvalReport& a, const EvalReport& b, std::string label_a = "smol",
                          std::string label_b = "unet");

/// Mask pixels tinted with `color` at `alpha` over the image.
RgbImage overlay(const RgbImage& image, const BinaryMask& mask, Rgb color = {255, 40, 0}, double alpha = 0.5);

}  // namespace smol::evaluation
