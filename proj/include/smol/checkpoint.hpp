// SPDX-License-Identifier: Apache-2.0
//
// Checkpoints are POSIX tar archives holding config.json plus one NumPy .npy
// file per named parameter (float32, C order). They open with `tar` and
// `numpy.load` without any project code.
#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "smol/model.hpp"
#include "smol/synthmap.hpp"

namespace smol::checkpoint {

using nn::Matrix;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// "smol", "unet", or "oracle" (ground-truth predictor used in pipeline tests).
struct Checkpoint {
  std::string model_kind = "smol";
  nlohmann::json model_config = nlohmann::json::object();
  std::vector<synthmap::ClassInfo> classes;
  std::map<std::string, Matrix<float>> tensors;
  /// Free-form provenance (training config, seed); not interpreted on load.
  nlohmann::json metadata = nlohmann::json::object();
};

std::vector<std::uint8_t> encode_npy(const Matrix<float>& m);
/// Accepts <f4 and <f8 2-D (or 1-D, read as one row) C-order arrays.
Matrix<float> decode_npy(const std::vector<std::uint8_t>& bytes);

/// Minimal ustar archive of regular files.
std::vector<std::uint8_t> write_tar(const std::vector<std::pair<std::string, std::vector<std::uint8_t>>>& files);
std::vector<std::pair<std::string, std::vector<std::uint8_t>>> read_tar(const std::vector<std::uint8_t>& bytes);

void save(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load(const std::filesystem::path& path);

template <typename T>
Checkpoint from_params(const nn::ParameterSet<T>& params, const std::string& kind, nlohmann::json model_config,
                       std::vector<synthmap::ClassInfo> classes);

/// Copies every tensor whose name starts with one of `prefixes` (all when empty)
/// into `params`. Every matching parameter must be present with equal shape.
/// Returns the number of tensors copied.
template <typename T>
std::size_t load_into(nn::ParameterSet<T>& params, const Checkpoint& ckpt, const std::vector<std::string>& prefixes = {});

/// Initialises the image encoder and mask decoder from a donor checkpoint and
/// leaves the prompt encoder at its fresh initialisation.
std::size_t load_donor(model::SmolMapSeg<float>& model, const Checkpoint& donor);

model::SmolMapSeg<float> load_smol(const Checkpoint& ckpt);
model::UNet<float> load_unet(const Checkpoint& ckpt);

}  // namespace smol::checkpoint
