// SPDX-License-Identifier: Apache-2.0
//
// The prompted segmentation network and the UNet baseline.
//
// Feature grids are [G*G, C] matrices with G = patch_size / token_size. The
// prompt path is F = g(F_I ⊙ f(L)): f downsamples the binary source mask to
// the encoder grid, the product gates the source features, and g refines the
// result. The decoder adds the prompt grid onto the target grid and reads a
// single mask token out through two-way attention.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "smol/nn/ops.hpp"
#include "smol/nn/params.hpp"
#include "smol/raster.hpp"

namespace smol::model {

using nn::Matrix;
using nn::Tape;
using nn::Var;

class ModelConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  int patch_size = 64;
  /// Pixels per encoder token side (d_enc).
  int token_size = 4;
  int channels = 128;
  int encoder_depth = 4;
  int encoder_heads = 8;
  int encoder_mlp_ratio = 4;
  int decoder_depth = 2;
  int decoder_heads = 8;
  int decoder_mlp_dim = 256;
  /// Learned output tokens; row 0 drives the hypernetwork. SAM carries five
  /// (IoU + four mask tokens); more than one keeps image->token attention
  /// position dependent.
  int decoder_tokens = 5;
  /// Appends the mean of the prompt grid (plus a learned type embedding) as a
  /// sparse-prompt token, so the decoder sees the prompt apart from the target.
  bool prompt_token = true;
  /// f: conv(1 -> c1, s1 x s1 / s1), conv(c1 -> c2, s2 x s2 / s2), conv1x1(c2 -> C).
  int prompt_c1 = 32;
  int prompt_c2 = 128;
  int prompt_stride1 = 2;
  int prompt_stride2 = 2;

  int grid() const { return patch_size / token_size; }
  int upsample_stages() const;

  /// Throws ModelConfigError naming the violated constraint.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& cfg);
/// Missing keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);

struct UNetConfig {
  int patch_size = 64;
  int levels = 3;
  int base_width = 16;
  /// Output channels = num_classes + 1 (background).
  int num_classes = 4;

  void validate() const;
  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

nlohmann::json to_json(const UNetConfig& cfg);
UNetConfig unet_config_from_json(const nlohmann::json& j);

/// [H*W, 3] in [0, 1].
template <typename T>
Matrix<T> image_to_matrix(const RgbImage& image);
/// [H*W, 1] with values in {0, 1}.
template <typename T>
Matrix<T> mask_to_matrix(const BinaryMask& mask);
/// sigmoid(logit) >= threshold, i.e. logit >= log(threshold / (1 - threshold)).
BinaryMask threshold_logits(const Matrix<float>& logits, int height, int width, double threshold);

template <typename T>
class SmolMapSeg {
 public:
  SmolMapSeg(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  nn::ParameterSet<T>& params() { return params_; }
  const nn::ParameterSet<T>& params() const { return params_; }

  /// image: [P*P, 3]. Returns F_I as [G*G, C].
  Var encode_image(Tape<T>& t, Var image);
  /// f(L): [P*P, 1] mask to [G*G, C].
  Var prompt_features(Tape<T>& t, Var mask);
  /// g(F_I ⊙ f(L)).
  Var encode_prompt(Tape<T>& t, Var source_features, Var mask);
  /// Returns [P*P, 1] logits in row-major pixel order.
  Var decode_mask(Tape<T>& t, Var target_features, Var prompt_features);
  Var forward(Tape<T>& t, Var source_image, Var source_mask, Var target_image);

  /// Inference helpers on a non-recording tape.
  Matrix<T> image_features(const Matrix<T>& image);
  Matrix<T> prompt_grid(const Matrix<T>& source_features, const Matrix<T>& mask);
  Matrix<T> mask_logits(const Matrix<T>& target_features, const Matrix<T>& prompt_grid);
  Matrix<T> logits(const Matrix<T>& source_image, const Matrix<T>& source_mask, const Matrix<T>& target_image);

 private:
  Var p(Tape<T>& t, const std::string& name) { return t.param(params_[name]); }
  Var layer_norm(Tape<T>& t, Var x, const std::string& prefix);
  Var linear(Tape<T>& t, Var x, const std::string& prefix);
  Var attention(Tape<T>& t, Var q, Var k, Var v, const std::string& prefix, int heads);
  Var vit_block(Tape<T>& t, Var x, const std::string& prefix);
  Var two_way_block(Tape<T>& t, Var& queries, Var keys, Var query_pe, Var key_pe, const std::string& prefix,
                    bool skip_first_pe);

  void add_linear(const std::string& prefix, int in, int out, bool bias = true);
  void add_norm(const std::string& prefix, int width);
  void add_conv(const std::string& prefix, int k, int in, int out);
  void add_attention(const std::string& prefix, int dim, int internal);

  ModelConfig cfg_;
  nn::ParameterSet<T> params_;
};

template <typename T>
class UNet {
 public:
  UNet(const UNetConfig& cfg, std::uint64_t seed);

  const UNetConfig& config() const { return cfg_; }
  nn::ParameterSet<T>& params() { return params_; }
  const nn::ParameterSet<T>& params() const { return params_; }

  /// image: [P*P, 3]. Returns [P*P, num_classes + 1] logits.
  Var forward(Tape<T>& t, Var image);
  Matrix<T> logits(const Matrix<T>& image);

 private:
  Var conv(Tape<T>& t, Var x, int h, int w, const std::string& prefix, int k);
  Var double_conv(Tape<T>& t, Var x, int h, int w, const std::string& prefix);

  UNetConfig cfg_;
  nn::ParameterSet<T> params_;
};

/// Per-pixel argmax over class logits.
LabelRaster argmax_labels(const Matrix<float>& logits, int height, int width);

extern template class SmolMapSeg<float>;
extern template class SmolMapSeg<double>;
extern template class UNet<float>;
extern template class UNet<double>;

}  // namespace smol::model
