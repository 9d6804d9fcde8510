// SPDX-License-Identifier: Apache-2.0
#include "smol/model.hpp"

#include <bit>
#include <cmath>

namespace smol::model {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ModelConfigError(what);
}

}  // namespace

int ModelConfig::upsample_stages() const {
  return token_size > 0 ? std::countr_zero(static_cast<unsigned>(token_size)) : 0;
}

void ModelConfig::validate() const {
  require(patch_size > 0 && patch_size % 16 == 0, "patch_size must be a positive multiple of 16");
  require(token_size >= 2 && std::has_single_bit(static_cast<unsigned>(token_size)),
          "token_size must be a power of two >= 2");
  require(patch_size % token_size == 0, "patch_size must be divisible by token_size");
  require(channels > 0 && encoder_depth >= 1 && decoder_depth >= 1, "channels and depths must be positive");
  require(encoder_heads >= 1 && channels % encoder_heads == 0, "encoder_heads must divide channels");
  require(channels % 2 == 0 && decoder_heads >= 1 && (channels / 2) % decoder_heads == 0,
          "decoder_heads must divide channels / 2");
  require(channels % (1 << (upsample_stages() + 1)) == 0,
          "channels must be divisible by 2^(stages + 1) for the upscaling widths");
  require(encoder_mlp_ratio >= 1 && decoder_mlp_dim >= 1 && prompt_c1 >= 1, "hidden widths must be positive");
  require(decoder_tokens >= 1, "decoder_tokens must be >= 1");
  require(prompt_stride1 >= 1 && prompt_stride2 >= 1 && prompt_stride1 * prompt_stride2 == token_size,
          "prompt encoder strides must multiply to token_size so f(L) aligns with the image grid");
  require(prompt_c2 == channels, "prompt_c2 must equal channels so f(L) can gate the image features");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"patch_size", c.patch_size},         {"token_size", c.token_size},
          {"channels", c.channels},             {"encoder_depth", c.encoder_depth},
          {"encoder_heads", c.encoder_heads},   {"encoder_mlp_ratio", c.encoder_mlp_ratio},
          {"decoder_depth", c.decoder_depth},   {"decoder_heads", c.decoder_heads},
          {"decoder_mlp_dim", c.decoder_mlp_dim}, {"decoder_tokens", c.decoder_tokens},
          {"prompt_token", c.prompt_token},     {"prompt_c1", c.prompt_c1},
          {"prompt_c2", c.prompt_c2},           {"prompt_stride1", c.prompt_stride1},
          {"prompt_stride2", c.prompt_stride2}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  auto get = [&](const char* key, int& field) {
    if (j.contains(key)) field = j.at(key).get<int>();
  };
  get("patch_size", c.patch_size);
  get("token_size", c.token_size);
  get("channels", c.channels);
  get("encoder_depth", c.encoder_depth);
  get("encoder_heads", c.encoder_heads);
  get("encoder_mlp_ratio", c.encoder_mlp_ratio);
  get("decoder_depth", c.decoder_depth);
  get("decoder_heads", c.decoder_heads);
  get("decoder_mlp_dim", c.decoder_mlp_dim);
  get("decoder_tokens", c.decoder_tokens);
  if (j.contains("prompt_token")) c.prompt_token = j.at("prompt_token").get<bool>();
  get("prompt_c1", c.prompt_c1);
  // c2 follows channels unless given explicitly.
  c.prompt_c2 = c.channels;
  get("prompt_c2", c.prompt_c2);
  get("prompt_stride1", c.prompt_stride1);
  c.prompt_stride2 = c.prompt_stride1 > 0 ? c.token_size / c.prompt_stride1 : 0;
  get("prompt_stride2", c.prompt_stride2);
  return c;
}

void UNetConfig::validate() const {
  require(levels >= 2 && levels <= 5, "unet levels must lie in [2, 5]");
  require(base_width >= 1 && num_classes >= 1, "unet widths and class count must be positive");
  require(patch_size > 0 && patch_size % (1 << (levels - 1)) == 0, "unet patch_size must divide by 2^(levels - 1)");
}

nlohmann::json to_json(const UNetConfig& c) {
  return {{"patch_size", c.patch_size}, {"levels", c.levels}, {"base_width", c.base_width},
          {"num_classes", c.num_classes}};
}

UNetConfig unet_config_from_json(const nlohmann::json& j) {
  UNetConfig c;
  if (j.contains("patch_size")) c.patch_size = j.at("patch_size").get<int>();
  if (j.contains("levels")) c.levels = j.at("levels").get<int>();
  if (j.contains("base_width")) c.base_width = j.at("base_width").get<int>();
  if (j.contains("num_classes")) c.num_classes = j.at("num_classes").get<int>();
  return c;
}

template <typename T>
Matrix<T> image_to_matrix(const RgbImage& image) {
  Matrix<T> m(static_cast<Eigen::Index>(image.height) * image.width, 3);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (int c = 0; c < 3; ++c) m(i, c) = T(image.pixels[static_cast<std::size_t>(i * 3 + c)]) / T(255);
  }
  return m;
}

template <typename T>
Matrix<T> mask_to_matrix(const BinaryMask& mask) {
  Matrix<T> m(static_cast<Eigen::Index>(mask.height) * mask.width, 1);
  for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, 0) = mask.pixels[static_cast<std::size_t>(i)] ? T(1) : T(0);
  return m;
}

template Matrix<float> image_to_matrix<float>(const RgbImage&);
template Matrix<double> image_to_matrix<double>(const RgbImage&);
template Matrix<float> mask_to_matrix<float>(const BinaryMask&);
template Matrix<double> mask_to_matrix<double>(const BinaryMask&);

BinaryMask threshold_logits(const Matrix<float>& logits, int height, int width, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("threshold must lie in (0, 1)");
  if (logits.rows() != static_cast<Eigen::Index>(height) * width || logits.cols() != 1) {
    throw std::invalid_argument("threshold_logits: logits do not match the mask size");
  }
  BinaryMask out(height, width);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double prob = 1.0 / (1.0 + std::exp(-static_cast<double>(logits(i, 0))));
    out.pixels[static_cast<std::size_t>(i)] = prob >= threshold ? 1 : 0;
  }
  return out;
}

LabelRaster argmax_labels(const Matrix<float>& logits, int height, int width) {
  if (logits.rows() != static_cast<Eigen::Index>(height) * width) {
    throw std::invalid_argument("argmax_labels: logits do not match the raster size");
  }
  LabelRaster out(height, width);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    logits.row(i).maxCoeff(&best);
    out.pixels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(best);
  }
  return out;
}

// ---- SmolMapSeg ------------------------------------------------------------

template <typename T>
void SmolMapSeg<T>::add_linear(const std::string& prefix, int in, int out, bool bias) {
  params_.add(prefix + "/w", in, out, nn::Init::xavier);
  if (bias) params_.add(prefix + "/b", 1, out, nn::Init::zeros);
}

template <typename T>
void SmolMapSeg<T>::add_norm(const std::string& prefix, int width) {
  params_.add(prefix + "/gamma", 1, width, nn::Init::ones);
  params_.add(prefix + "/beta", 1, width, nn::Init::zeros);
}

template <typename T>
void SmolMapSeg<T>::add_conv(const std::string& prefix, int k, int in, int out) {
  params_.add(prefix + "/w", k * k * in, out, nn::Init::xavier, 0.0, k * k * in, k * k * out);
  params_.add(prefix + "/b", 1, out, nn::Init::zeros);
}

template <typename T>
void SmolMapSeg<T>::add_attention(const std::string& prefix, int dim, int internal) {
  add_linear(prefix + "/q", dim, internal);
  add_linear(prefix + "/k", dim, internal);
  add_linear(prefix + "/v", dim, internal);
  add_linear(prefix + "/out", internal, dim);
}

template <typename T>
SmolMapSeg<T>::SmolMapSeg(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), params_(seed) {
  cfg_.validate();
  const int C = cfg_.channels;
  const int G = cfg_.grid();
  const int d = cfg_.token_size;

  add_conv("image_encoder/patch_embed", d, 3, C);
  params_.add("image_encoder/pos_embed", G * G, C, nn::Init::normal, 0.02);
  for (int i = 0; i < cfg_.encoder_depth; ++i) {
    const std::string b = "image_encoder/blocks/" + std::to_string(i);
    add_norm(b + "/norm1", C);
    add_attention(b + "/attn", C, C);
    add_norm(b + "/norm2", C);
    add_linear(b + "/mlp/fc1", C, C * cfg_.encoder_mlp_ratio);
    add_linear(b + "/mlp/fc2", C * cfg_.encoder_mlp_ratio, C);
  }
  add_conv("image_encoder/neck/conv1", 1, C, C);
  add_norm("image_encoder/neck/norm1", C);
  add_conv("image_encoder/neck/conv2", 3, C, C);
  add_norm("image_encoder/neck/norm2", C);

  add_conv("prompt_encoder/f/conv1", cfg_.prompt_stride1, 1, cfg_.prompt_c1);
  add_norm("prompt_encoder/f/norm1", cfg_.prompt_c1);
  add_conv("prompt_encoder/f/conv2", cfg_.prompt_stride2, cfg_.prompt_c1, cfg_.prompt_c2);
  add_norm("prompt_encoder/f/norm2", cfg_.prompt_c2);
  add_conv("prompt_encoder/f/conv3", 1, cfg_.prompt_c2, C);
  add_conv("prompt_encoder/g/conv1", 3, C, C);
  add_conv("prompt_encoder/g/conv2", 3, C, C);

  params_.add("mask_decoder/output_tokens", cfg_.decoder_tokens, C, nn::Init::normal, 1.0);
  if (cfg_.prompt_token) params_.add("mask_decoder/prompt_token_embed", 1, C, nn::Init::normal, 1.0);
  params_.add("mask_decoder/pos_embed", G * G, C, nn::Init::normal, 1.0);
  for (int i = 0; i < cfg_.decoder_depth; ++i) {
    const std::string b = "mask_decoder/layers/" + std::to_string(i);
    add_attention(b + "/self_attn", C, C);
    add_norm(b + "/norm1", C);
    add_attention(b + "/cross_token_to_image", C, C / 2);
    add_norm(b + "/norm2", C);
    add_linear(b + "/mlp/fc1", C, cfg_.decoder_mlp_dim);
    add_linear(b + "/mlp/fc2", cfg_.decoder_mlp_dim, C);
    add_norm(b + "/norm3", C);
    add_attention(b + "/cross_image_to_token", C, C / 2);
    add_norm(b + "/norm4", C);
  }
  add_attention("mask_decoder/final_attn", C, C / 2);
  add_norm("mask_decoder/final_norm", C);
  int width = C;
  for (int s = 0; s < cfg_.upsample_stages(); ++s) {
    const int out = s == 0 ? C / 4 : width / 2;
    const std::string b = "mask_decoder/upscale/" + std::to_string(s);
    params_.add(b + "/w", width, 4 * out, nn::Init::xavier, 0.0, width, 4 * out);
    params_.add(b + "/b", 1, out, nn::Init::zeros);
    if (s + 1 < cfg_.upsample_stages()) add_norm(b + "/norm", out);
    width = out;
  }
  add_linear("mask_decoder/hyper/fc1", C, C);
  add_linear("mask_decoder/hyper/fc2", C, C);
  add_linear("mask_decoder/hyper/fc3", C, width);
}

template <typename T>
Var SmolMapSeg<T>::layer_norm(Tape<T>& t, Var x, const std::string& prefix) {
  return nn::layer_norm(t, x, p(t, prefix + "/gamma"), p(t, prefix + "/beta"));
}

template <typename T>
Var SmolMapSeg<T>::linear(Tape<T>& t, Var x, const std::string& prefix) {
  const std::string bias = prefix + "/b";
  return nn::linear(t, x, p(t, prefix + "/w"), params_.contains(bias) ? p(t, bias) : Var{});
}

template <typename T>
Var SmolMapSeg<T>::attention(Tape<T>& t, Var q, Var k, Var v, const std::string& prefix, int heads) {
  Var qp = linear(t, q, prefix + "/q");
  Var kp = linear(t, k, prefix + "/k");
  Var vp = linear(t, v, prefix + "/v");
  return linear(t, nn::attention(t, qp, kp, vp, heads), prefix + "/out");
}

template <typename T>
Var SmolMapSeg<T>::vit_block(Tape<T>& t, Var x, const std::string& b) {
  Var h = layer_norm(t, x, b + "/norm1");
  x = nn::add(t, x, attention(t, h, h, h, b + "/attn", cfg_.encoder_heads));
  h = layer_norm(t, x, b + "/norm2");
  h = linear(t, nn::gelu(t, linear(t, h, b + "/mlp/fc1")), b + "/mlp/fc2");
  return nn::add(t, x, h);
}

template <typename T>
Var SmolMapSeg<T>::encode_image(Tape<T>& t, Var image) {
  const int P = cfg_.patch_size;
  const int G = cfg_.grid();
  const int d = cfg_.token_size;
  const auto& img = t.value(image);
  if (img.rows() != static_cast<Eigen::Index>(P) * P || img.cols() != 3) {
    throw std::invalid_argument("encode_image: expected a " + std::to_string(P) + "x" + std::to_string(P) +
                                " RGB patch");
  }
  // Fixed pixel standardisation: [0, 1] -> roughly zero-mean, unit-scale inputs.
  Var centred = nn::scale(t, nn::add_row(t, image, t.constant(Matrix<T>::Constant(1, 3, T(-0.5)))), T(4));
  Var x = nn::conv2d(t, centred, {P, P, d, d, 0}, p(t, "image_encoder/patch_embed/w"),
                     p(t, "image_encoder/patch_embed/b"));
  x = nn::add(t, x, p(t, "image_encoder/pos_embed"));
  for (int i = 0; i < cfg_.encoder_depth; ++i) x = vit_block(t, x, "image_encoder/blocks/" + std::to_string(i));
  x = nn::conv2d(t, x, {G, G, 1, 1, 0}, p(t, "image_encoder/neck/conv1/w"), p(t, "image_encoder/neck/conv1/b"));
  x = layer_norm(t, x, "image_encoder/neck/norm1");
  x = nn::conv2d(t, x, {G, G, 3, 1, 1}, p(t, "image_encoder/neck/conv2/w"), p(t, "image_encoder/neck/conv2/b"));
  return layer_norm(t, x, "image_encoder/neck/norm2");
}

template <typename T>
Var SmolMapSeg<T>::prompt_features(Tape<T>& t, Var mask) {
  const int P = cfg_.patch_size;
  const int s1 = cfg_.prompt_stride1;
  const int s2 = cfg_.prompt_stride2;
  const auto& m = t.value(mask);
  if (m.rows() != static_cast<Eigen::Index>(P) * P || m.cols() != 1) {
    throw std::invalid_argument("encode_prompt: mask must be " + std::to_string(P) + "x" + std::to_string(P));
  }
  Var x = nn::conv2d(t, mask, {P, P, s1, s1, 0}, p(t, "prompt_encoder/f/conv1/w"), p(t, "prompt_encoder/f/conv1/b"));
  x = nn::gelu(t, layer_norm(t, x, "prompt_encoder/f/norm1"));
  const int h1 = P / s1;
  x = nn::conv2d(t, x, {h1, h1, s2, s2, 0}, p(t, "prompt_encoder/f/conv2/w"), p(t, "prompt_encoder/f/conv2/b"));
  x = nn::gelu(t, layer_norm(t, x, "prompt_encoder/f/norm2"));
  const int G = h1 / s2;
  return nn::conv2d(t, x, {G, G, 1, 1, 0}, p(t, "prompt_encoder/f/conv3/w"), p(t, "prompt_encoder/f/conv3/b"));
}

template <typename T>
Var SmolMapSeg<T>::encode_prompt(Tape<T>& t, Var source_features, Var mask) {
  const int G = cfg_.grid();
  Var fl = prompt_features(t, mask);
  if (t.value(fl).rows() != t.value(source_features).rows() || t.value(fl).cols() != t.value(source_features).cols()) {
    throw std::invalid_argument("encode_prompt: source features do not match the configured grid");
  }
  Var f = nn::mul(t, source_features, fl);
  f = nn::conv2d(t, f, {G, G, 3, 1, 1}, p(t, "prompt_encoder/g/conv1/w"), p(t, "prompt_encoder/g/conv1/b"));
  f = nn::gelu(t, f);
  return nn::conv2d(t, f, {G, G, 3, 1, 1}, p(t, "prompt_encoder/g/conv2/w"), p(t, "prompt_encoder/g/conv2/b"));
}

template <typename T>
Var SmolMapSeg<T>::two_way_block(Tape<T>& t, Var& queries, Var keys, Var query_pe, Var key_pe,
                                 const std::string& b, bool skip_first_pe) {
  const int heads = cfg_.decoder_heads;
  if (skip_first_pe) {
    queries = attention(t, queries, queries, queries, b + "/self_attn", heads);
  } else {
    Var q = nn::add(t, queries, query_pe);
    queries = nn::add(t, queries, attention(t, q, q, queries, b + "/self_attn", heads));
  }
  queries = layer_norm(t, queries, b + "/norm1");

  Var q = nn::add(t, queries, query_pe);
  Var k = nn::add(t, keys, key_pe);
  queries = nn::add(t, queries, attention(t, q, k, keys, b + "/cross_token_to_image", heads));
  queries = layer_norm(t, queries, b + "/norm2");

  Var h = linear(t, nn::relu(t, linear(t, queries, b + "/mlp/fc1")), b + "/mlp/fc2");
  queries = layer_norm(t, nn::add(t, queries, h), b + "/norm3");

  q = nn::add(t, queries, query_pe);
  k = nn::add(t, keys, key_pe);
  keys = nn::add(t, keys, attention(t, k, q, queries, b + "/cross_image_to_token", heads));
  return layer_norm(t, keys, b + "/norm4");
}

template <typename T>
Var SmolMapSeg<T>::decode_mask(Tape<T>& t, Var target_features, Var prompt) {
  const int G = cfg_.grid();
  const int C = cfg_.channels;
  const auto& a = t.value(target_features);
  const auto& b = t.value(prompt);
  if (a.rows() != static_cast<Eigen::Index>(G) * G || a.cols() != C || b.rows() != a.rows() || b.cols() != a.cols()) {
    throw std::invalid_argument("decode_mask: feature grids must both be " + std::to_string(G) + "x" +
                                std::to_string(G) + "x" + std::to_string(C));
  }
  Var keys = nn::add(t, target_features, prompt);
  Var key_pe = p(t, "mask_decoder/pos_embed");
  Var query_pe = p(t, "mask_decoder/output_tokens");
  if (cfg_.prompt_token) {
    query_pe = nn::concat_rows(t, query_pe, nn::add(t, nn::mean_rows(t, prompt), p(t, "mask_decoder/prompt_token_embed")));
  }
  Var queries = query_pe;
  for (int i = 0; i < cfg_.decoder_depth; ++i) {
    keys = two_way_block(t, queries, keys, query_pe, key_pe, "mask_decoder/layers/" + std::to_string(i), i == 0);
  }
  Var q = nn::add(t, queries, query_pe);
  Var k = nn::add(t, keys, key_pe);
  queries = nn::add(t, queries, attention(t, q, k, keys, "mask_decoder/final_attn", cfg_.decoder_heads));
  queries = layer_norm(t, queries, "mask_decoder/final_norm");

  Var x = keys;
  int side = G;
  const int stages = cfg_.upsample_stages();
  for (int s = 0; s < stages; ++s) {
    const std::string pre = "mask_decoder/upscale/" + std::to_string(s);
    x = nn::conv_transpose2x2(t, x, side, side, p(t, pre + "/w"), p(t, pre + "/b"));
    side *= 2;
    if (s + 1 < stages) x = layer_norm(t, x, pre + "/norm");
    x = nn::gelu(t, x);
  }
  Var mask_token = t.value(queries).rows() > 1 ? nn::slice_rows(t, queries, 0, 1) : queries;
  Var h = nn::relu(t, linear(t, mask_token, "mask_decoder/hyper/fc1"));
  h = nn::relu(t, linear(t, h, "mask_decoder/hyper/fc2"));
  h = linear(t, h, "mask_decoder/hyper/fc3");
  return nn::matmul_nt(t, x, h);
}

template <typename T>
Var SmolMapSeg<T>::forward(Tape<T>& t, Var source_image, Var source_mask, Var target_image) {
  Var fs = encode_image(t, source_image);
  Var ft = encode_image(t, target_image);
  return decode_mask(t, ft, encode_prompt(t, fs, source_mask));
}

template <typename T>
Matrix<T> SmolMapSeg<T>::image_features(const Matrix<T>& image) {
  Tape<T> t(false);
  return t.value(encode_image(t, t.constant(image)));
}

template <typename T>
Matrix<T> SmolMapSeg<T>::prompt_grid(const Matrix<T>& source_features, const Matrix<T>& mask) {
  Tape<T> t(false);
  return t.value(encode_prompt(t, t.constant(source_features), t.constant(mask)));
}

template <typename T>
Matrix<T> SmolMapSeg<T>::mask_logits(const Matrix<T>& target_features, const Matrix<T>& prompt) {
  Tape<T> t(false);
  return t.value(decode_mask(t, t.constant(target_features), t.constant(prompt)));
}

template <typename T>
Matrix<T> SmolMapSeg<T>::logits(const Matrix<T>& source_image, const Matrix<T>& source_mask,
                                const Matrix<T>& target_image) {
  Tape<T> t(false);
  return t.value(forward(t, t.constant(source_image), t.constant(source_mask), t.constant(target_image)));
}

// ---- UNet ------------------------------------------------------------------

template <typename T>
UNet<T>::UNet(const UNetConfig& cfg, std::uint64_t seed) : cfg_(cfg), params_(seed) {
  cfg_.validate();
  auto conv = [&](const std::string& prefix, int k, int in, int out) {
    params_.add(prefix + "/w", k * k * in, out, nn::Init::xavier, 0.0, k * k * in, k * k * out);
    params_.add(prefix + "/b", 1, out, nn::Init::zeros);
  };
  int in = 3;
  for (int l = 0; l < cfg_.levels; ++l) {
    const int w = cfg_.base_width << l;
    conv("unet/down/" + std::to_string(l) + "/conv1", 3, in, w);
    conv("unet/down/" + std::to_string(l) + "/conv2", 3, w, w);
    in = w;
  }
  for (int l = cfg_.levels - 2; l >= 0; --l) {
    const int w = cfg_.base_width << l;
    const std::string b = "unet/up/" + std::to_string(l);
    params_.add(b + "/upconv/w", 2 * w, 4 * w, nn::Init::xavier, 0.0, 2 * w, 4 * w);
    params_.add(b + "/upconv/b", 1, w, nn::Init::zeros);
    conv(b + "/conv1", 3, 2 * w, w);
    conv(b + "/conv2", 3, w, w);
  }
  conv("unet/head", 1, cfg_.base_width, cfg_.num_classes + 1);
}

template <typename T>
Var UNet<T>::conv(Tape<T>& t, Var x, int h, int w, const std::string& prefix, int k) {
  return nn::conv2d(t, x, {h, w, k, 1, k / 2}, t.param(params_[prefix + "/w"]), t.param(params_[prefix + "/b"]));
}

template <typename T>
Var UNet<T>::double_conv(Tape<T>& t, Var x, int h, int w, const std::string& prefix) {
  x = nn::relu(t, conv(t, x, h, w, prefix + "/conv1", 3));
  return nn::relu(t, conv(t, x, h, w, prefix + "/conv2", 3));
}

template <typename T>
Var UNet<T>::forward(Tape<T>& t, Var image) {
  const int P = cfg_.patch_size;
  const auto& img = t.value(image);
  if (img.rows() != static_cast<Eigen::Index>(P) * P || img.cols() != 3) {
    throw std::invalid_argument("unet_forward: expected a " + std::to_string(P) + "x" + std::to_string(P) +
                                " RGB patch");
  }
  std::vector<Var> skips;
  Var x = image;
  int side = P;
  for (int l = 0; l < cfg_.levels; ++l) {
    x = double_conv(t, x, side, side, "unet/down/" + std::to_string(l));
    if (l + 1 < cfg_.levels) {
      skips.push_back(x);
      x = nn::max_pool2x2(t, x, side, side);
      side /= 2;
    }
  }
  for (int l = cfg_.levels - 2; l >= 0; --l) {
    const std::string b = "unet/up/" + std::to_string(l);
    x = nn::conv_transpose2x2(t, x, side, side, t.param(params_[b + "/upconv/w"]), t.param(params_[b + "/upconv/b"]));
    side *= 2;
    x = nn::concat_cols(t, skips[static_cast<std::size_t>(l)], x);
    x = double_conv(t, x, side, side, b);
  }
  return conv(t, x, side, side, "unet/head", 1);
}

template <typename T>
Matrix<T> UNet<T>::logits(const Matrix<T>& image) {
  Tape<T> t(false);
  return t.value(forward(t, t.constant(image)));
}

template class SmolMapSeg<float>;
template class SmolMapSeg<double>;
template class UNet<float>;
template class UNet<double>;

}  // namespace smol::model
