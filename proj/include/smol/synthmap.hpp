// SPDX-License-Identifier: Apache-2.0
//
// Procedural "historical map" sheets. Each style binds classes to visual
// patterns; two styles may bind one pattern to different classes, which is
// the ambiguity a style-blind classifier cannot resolve.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "smol/raster.hpp"

namespace smol::synthmap {

using ClassId = int;

struct ClassInfo {
  ClassId id = 0;
  std::string name;
  friend bool operator==(const ClassInfo&, const ClassInfo&) = default;
};

/// The canonical four-class set: woodland, grassland, settlement, water.
std::vector<ClassInfo> canonical_classes();

enum class PatternKind { solid_color, dots, hatching, cross_hatch, stipple_with_symbols, blank };

std::string to_string(PatternKind kind);
PatternKind pattern_kind_from_string(const std::string& name);

struct PatternSpec {
  int pattern_id = 0;
  PatternKind kind = PatternKind::solid_color;
  Rgb color;
  int spacing = 4;             // pixels between marks / lines
  int mark_size = 1;           // dot radius or line width
  double orientation_deg = 0;  // hatching direction

  friend bool operator==(const PatternSpec&, const PatternSpec&) = default;
};

struct StyleSpec {
  int style_id = 0;
  std::map<ClassId, int> class_to_pattern;
  Rgb background_color{245, 240, 225};

  friend bool operator==(const StyleSpec&, const StyleSpec&) = default;
};

struct MapSheet {
  int sheet_id = 0;
  int style_id = 0;
  RgbImage image;
  LabelRaster labels;
  std::uint64_t layout_seed = 0;
};

/// Seeded cell decomposition parameters.
struct LayoutParams {
  /// Mean area of one layout cell in pixels; the cell count scales with sheet area.
  int cell_area = 96 * 96;
  /// Relative weight of background cells against each class when filling extra cells.
  double background_weight = 1.0;
};

class InvalidStyle : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Throws InvalidStyle when two classes share a pattern inside the style.
void validate_style(const StyleSpec& style);

std::vector<PatternSpec> make_pattern_library(std::uint64_t seed, int n_patterns);

/// Colour of pixel (y, x) in sheet coordinates. Patterns are anchored to the
/// sheet origin so a texture continues seamlessly across region borders.
Rgb render_pattern_pixel(const PatternSpec& pattern, Rgb background, int y, int x);

MapSheet render_sheet(const StyleSpec& style, const std::vector<PatternSpec>& library,
                      std::uint64_t layout_seed, int height, int width,
                      const std::vector<ClassId>& classes, const LayoutParams& layout = {});

struct AmbiguityConfig {
  std::vector<StyleSpec> styles;
  std::vector<ClassInfo> classes;
  int sheets_per_style = 4;
  int sheet_height = 256;
  int sheet_width = 256;
  std::uint64_t seed = 0;
  int n_patterns = 8;
  /// Explicit pattern library; when empty, make_pattern_library(seed, n_patterns) is used.
  std::vector<PatternSpec> patterns;
  LayoutParams layout;
};

/// Parses the generator config. Throws ConfigError naming the offending key.
AmbiguityConfig ambiguity_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AmbiguityConfig& cfg);
nlohmann::json to_json(const PatternSpec& p);
nlohmann::json to_json(const StyleSpec& s);
PatternSpec pattern_from_json(const nlohmann::json& j);
StyleSpec style_from_json(const nlohmann::json& j);

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& key, const std::string& what)
      : std::invalid_argument(key + ": " + what), key_(key) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct Collision {
  int pattern_id = 0;
  int style_a = 0;
  ClassId class_a = 0;
  int style_b = 0;
  ClassId class_b = 0;
};

/// Every (pattern, style pair) bound to different classes across styles.
std::vector<Collision> find_collisions(const std::vector<StyleSpec>& styles);

/// Sheets grouped by style, `sheets_per_style` each, ids assigned in order.
/// Throws std::invalid_argument when the config contains no pattern collision.
std::vector<MapSheet> make_ambiguity_suite(const AmbiguityConfig& config);

std::vector<PatternSpec> resolve_library(const AmbiguityConfig& config);

struct StyledLabels {
  int style_id = 0;
  const LabelRaster* labels = nullptr;
};

/// Upper bound on what a classifier that only sees the pattern can achieve.
struct AmbiguityStats {
  std::vector<int> collision_patterns;
  /// Fraction of labeled (non-background) pixels drawn with a collision pattern.
  double collision_fraction = 0;
  /// Any style-blind classifier misassigns at least this fraction of labeled pixels.
  double misassignment_bound = 0;
  /// Best achievable IoU per class for a deterministic pattern -> class map.
  std::map<ClassId, double> iou_ceiling;
};

AmbiguityStats ambiguity_stats(const std::vector<StyledLabels>& sheets,
                               const std::vector<StyleSpec>& styles,
                               const std::vector<PatternSpec>& library);
nlohmann::json to_json(const AmbiguityStats& stats);
AmbiguityStats ambiguity_stats_from_json(const nlohmann::json& j);

}  // namespace smol::synthmap
