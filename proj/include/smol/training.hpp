// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "smol/datapipe.hpp"
#include "smol/model.hpp"

namespace smol::training {

enum class LossKind { bce, bce_plus_dice };

std::string to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& name);

struct TrainConfig {
  double base_lr = 5e-5;
  double weight_decay = 0.01;
  int epochs = 30;
  int batch_size = 8;
  int pairs_per_epoch = 512;
  /// Positive-pair probability forwarded to the sampler.
  double p = 0.7;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::bce;
  /// Caps the global L2 norm of each batch gradient; 0 disables clipping.
  double grad_clip = 0.0;
  /// Step-size multiplier for the image encoder group (SMOL-MapSeg only).
  double encoder_lr_scale = 1.0;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// FNV-1a over the canonical JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& j);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  /// Absent when the epoch drew no samples.
  std::optional<double> mean_loss;
  int samples = 0;
  int positives = 0;
  double wall_time_s = 0.0;
};

struct TrainLog {
  std::string config_hash;
  std::vector<EpochRecord> epochs;
  std::string checkpoint_path;
};

nlohmann::json to_json(const EpochRecord& r);
/// One JSON object per epoch followed by a {"run": ...} summary line.
void write_log_jsonl(const std::filesystem::path& path, const TrainLog& log);

/// b * 0.5 * (1 + cos(e * pi / E)) for 0 <= e <= E.
double lr_at(int e, int E, double b);

template <typename T>
nn::Var mask_loss(nn::Tape<T>& t, nn::Var logits, const nn::Matrix<T>& target, LossKind kind);

/// Scalar loss value on plain matrices (no tape); shapes must match.
double loss_value(const nn::Matrix<double>& logits, const nn::Matrix<double>& target, LossKind kind);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Main prompted training run over the dataset's train split (Alg. 1 pairs).
TrainLog train(model::SmolMapSeg<float>& model, const datapipe::Dataset& ds, const TrainConfig& cfg,
               const EpochCallback& on_epoch = {});

/// Fine-tunes on `pool`. Positives prompt only `new_class`; negatives use any
/// class of `classes` absent from the target but present in its sheet.
TrainLog fewshot_finetune(model::SmolMapSeg<float>& model, const std::vector<datapipe::Patch>& pool,
                          const std::vector<datapipe::ClassId>& classes, datapipe::ClassId new_class, int min_pixels,
                          const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Per-pixel cross-entropy over background + classes; each epoch draws
/// `pairs_per_epoch` train patches uniformly (label channel = class id).
TrainLog train_baseline(model::UNet<float>& unet, const datapipe::Dataset& ds, const TrainConfig& cfg,
                        const EpochCallback& on_epoch = {});

}  // namespace smol::training
