// SPDX-License-Identifier: Apache-2.0
//
// Whole-image prompted inference: images of any size are padded to a multiple
// of the patch size, tiled, segmented tile by tile and stitched back.
#pragma once

#include <stdexcept>
#include <string>

#include "smol/model.hpp"
#include "smol/raster.hpp"

namespace smol::inference {

/// Invalid request data; `field` names the offending input.
class InputError : public std::invalid_argument {
 public:
  InputError(std::string field, const std::string& what)
      : std::invalid_argument(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// Pads to (height, width) by replicating the last row and column.
RgbImage pad_edge(const RgbImage& image, int height, int width);

/// Reads a mask PNG: any nonzero gray value is foreground.
BinaryMask binarize(const GrayImage& gray);

struct Segmentation {
  BinaryMask mask;
  double foreground_fraction = 0.0;
};

/// The prompt is the P x P source tile holding the most mask pixels (first
/// in row-major order on ties). Inputs smaller than P are padded.
/// Throws InputError on shape or threshold violations.
Segmentation segment_image(model::SmolMapSeg<float>& model, const RgbImage& source, const BinaryMask& source_mask,
                           const RgbImage& target, double threshold);

}  // namespace smol::inference
