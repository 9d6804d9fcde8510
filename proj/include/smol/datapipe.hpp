// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "smol/raster.hpp"
#include "smol/synthmap.hpp"

namespace smol::datapipe {

using synthmap::ClassId;

enum class Split { train, test, fewshot };

std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct Patch {
  int patch_id = 0;
  int sheet_id = 0;
  int grid_row = 0;
  int grid_col = 0;
  RgbImage image;
  LabelRaster label;
  Split split = Split::train;
};

struct Rect {
  int y = 0;
  int x = 0;
  int height = 0;
  int width = 0;
};

/// Non-overlapping P x P tiles in row-major grid order; right/bottom residue is dropped.
/// Patch ids are assigned consecutively from `first_patch_id`.
std::vector<Patch> crop_patches(const synthmap::MapSheet& sheet, int patch_size, int first_patch_id = 0);

struct SplitResult {
  std::vector<Patch> train;
  std::vector<Patch> test;
};

/// Checkerboard assignment: even (row + col) parity goes to train.
SplitResult grid_split(std::vector<Patch> patches);

/// Overlapping tiles over `region` with stride P - margin, plus flush tiles at the
/// far edges so the region is fully covered. Grid coordinates index the tile
/// sequence within the region.
std::vector<Patch> crop_fewshot(const synthmap::MapSheet& sheet, const Rect& region, int patch_size, int margin,
                                int first_patch_id = 0);

/// Default presence threshold for a P x P patch; see DatasetManifest::min_pixels.
int default_min_pixels(int patch_size);

/// Which patches contain which classes (with at least `min_pixels` pixels).
class ClassIndex {
 public:
  ClassIndex() = default;
  ClassIndex(const std::vector<Patch>& patches, int min_pixels);

  int min_pixels() const { return min_pixels_; }
  /// Patch ids of `sheet_id` holding `class_id`; empty when none.
  const std::vector<int>& patches_with(int sheet_id, ClassId class_id) const;
  /// Classes present (>= min_pixels) in the patch at `position`.
  const std::set<ClassId>& classes_of(std::size_t position) const { return present_[position]; }
  /// Raw pixel count of `class_id` in the patch at `position`.
  std::uint32_t pixel_count(std::size_t position, ClassId class_id) const {
    return counts_[position][static_cast<std::size_t>(class_id)];
  }
  std::size_t position_of(int patch_id) const;
  std::size_t size() const { return present_.size(); }
  /// Classes present anywhere in the sheet.
  std::set<ClassId> sheet_classes(int sheet_id) const;
  std::vector<int> sheet_ids() const;

  /// sheet -> class -> sorted patch ids.
  const std::map<int, std::map<ClassId, std::vector<int>>>& by_sheet() const { return by_sheet_; }

  friend bool operator==(const ClassIndex&, const ClassIndex&) = default;

 private:
  int min_pixels_ = 1;
  std::vector<std::array<std::uint32_t, 256>> counts_;
  std::vector<std::set<ClassId>> present_;
  std::map<int, std::map<ClassId, std::vector<int>>> by_sheet_;
  std::map<int, std::size_t> position_;
};

ClassIndex index_classes(const std::vector<Patch>& patches, int min_pixels);

struct SheetRecord {
  int sheet_id = 0;
  int style_id = 0;
  int height = 0;
  int width = 0;
  std::uint64_t layout_seed = 0;
};

struct DatasetManifest {
  static constexpr int kFormatVersion = 1;
  int format_version = kFormatVersion;
  int patch_size = 64;
  int min_pixels = 64;
  std::vector<SheetRecord> sheets;
  std::map<std::string, int> split_counts;
  std::vector<synthmap::ClassInfo> classes;
  std::vector<synthmap::StyleSpec> styles;
  std::vector<synthmap::PatternSpec> patterns;
  /// Style-blind ceilings keyed by "all" and "test".
  std::map<std::string, synthmap::AmbiguityStats> ambiguity;
};

/// In-memory dataset: sheets, split patches and the manifest describing them.
struct Dataset {
  DatasetManifest manifest;
  std::vector<synthmap::MapSheet> sheets;
  std::vector<Patch> train;
  std::vector<Patch> test;
  std::vector<Patch> fewshot;

  const std::vector<Patch>& split(Split s) const;
  std::vector<Patch>& split(Split s);
  const synthmap::MapSheet* find_sheet(int sheet_id) const;
  int style_of(int sheet_id) const;
  std::vector<ClassId> class_ids() const;
};

struct BuildOptions {
  int patch_size = 64;
  /// 0 selects default_min_pixels(patch_size).
  int min_pixels = 0;
};

/// Crops, splits and indexes the sheets; computes the ambiguity ceilings.
Dataset build_dataset(std::vector<synthmap::MapSheet> sheets, const std::vector<synthmap::ClassInfo>& classes,
                      const std::vector<synthmap::StyleSpec>& styles,
                      const std::vector<synthmap::PatternSpec>& patterns, const BuildOptions& options);

/// Appends few-shot crops of `region` from `sheet`. The sheet is registered in the
/// dataset if absent but contributes no train/test patches.
void add_fewshot(Dataset& ds, const synthmap::MapSheet& sheet, const Rect& region, int margin);

void write_dataset(const Dataset& ds, const std::filesystem::path& root);
Dataset load_dataset(const std::filesystem::path& root);

/// Throws ImageIoError on malformed manifests.
DatasetManifest read_manifest(const std::filesystem::path& root);

}  // namespace smol::datapipe
