// SPDX-License-Identifier: Apache-2.0
#include "smol/inference.hpp"

#include <algorithm>

#include "smol/evaluation.hpp"

namespace smol::inference {

namespace {

int round_up(int v, int m) { return std::max(m, (v + m - 1) / m * m); }

BinaryMask pad_zero(const BinaryMask& mask, int height, int width) {
  BinaryMask out(height, width);
  for (int y = 0; y < mask.height; ++y) {
    std::copy_n(mask.pixels.begin() + static_cast<std::ptrdiff_t>(y) * mask.width, mask.width,
                out.pixels.begin() + static_cast<std::ptrdiff_t>(y) * width);
  }
  return out;
}

}  // namespace

RgbImage pad_edge(const RgbImage& image, int height, int width) {
  if (image.empty()) throw std::invalid_argument("pad_edge: empty image");
  RgbImage out(height, width);
  for (int y = 0; y < height; ++y) {
    const int sy = std::min(y, image.height - 1);
    for (int x = 0; x < width; ++x) set_pixel(out, y, x, pixel(image, sy, std::min(x, image.width - 1)));
  }
  return out;
}

BinaryMask binarize(const GrayImage& gray) {
  BinaryMask out(gray.height, gray.width);
  for (std::size_t i = 0; i < gray.pixels.size(); ++i) out.pixels[i] = gray.pixels[i] ? 1 : 0;
  return out;
}

Segmentation segment_image(model::SmolMapSeg<float>& model, const RgbImage& source, const BinaryMask& source_mask,
                           const RgbImage& target, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw InputError("threshold", "must lie in (0, 1)");
  if (source.empty()) throw InputError("source_image", "empty image");
  if (target.empty()) throw InputError("target_image", "empty image");
  if (source_mask.height != source.height || source_mask.width != source.width) {
    throw InputError("source_mask", "mask is " + std::to_string(source_mask.width) + "x" +
                                        std::to_string(source_mask.height) + " but the source image is " +
                                        std::to_string(source.width) + "x" + std::to_string(source.height));
  }
  const int P = model.config().patch_size;

  // Prompt tile: the grid cell with the most labelled pixels.
  const int sh = round_up(source.height, P), sw = round_up(source.width, P);
  const RgbImage src = pad_edge(source, sh, sw);
  const BinaryMask src_mask = pad_zero(source_mask, sh, sw);
  int best_y = 0, best_x = 0;
  long best = -1;
  for (int y = 0; y < sh; y += P) {
    for (int x = 0; x < sw; x += P) {
      const long n = static_cast<long>(count_foreground(src_mask.crop(y, x, P, P)));
      if (n > best) {
        best = n;
        best_y = y;
        best_x = x;
      }
    }
  }
  const auto prompt = model.prompt_grid(model.image_features(model::image_to_matrix<float>(src.crop(best_y, best_x, P, P))),
                                        model::mask_to_matrix<float>(src_mask.crop(best_y, best_x, P, P)));

  const int th = round_up(target.height, P), tw = round_up(target.width, P);
  const RgbImage tgt = pad_edge(target, th, tw);
  std::vector<evaluation::TilePrediction> tiles;
  for (int r = 0; r * P < th; ++r) {
    for (int c = 0; c * P < tw; ++c) {
      const auto features = model.image_features(model::image_to_matrix<float>(tgt.crop(r * P, c * P, P, P)));
      tiles.push_back({r, c, model::threshold_logits(model.mask_logits(features, prompt), P, P, threshold)});
    }
  }
  Segmentation out;
  out.mask = evaluation::stitch_sheet(tiles, th, tw).crop(0, 0, target.height, target.width);
  out.foreground_fraction = static_cast<double>(count_foreground(out.mask)) / static_cast<double>(out.mask.pixel_count());
  return out;
}

}  // namespace smol::inference
