// SPDX-License-Identifier: Apache-2.0
#include "smol/synthmap.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "smol/rng.hpp"

namespace smol::synthmap {

using nlohmann::json;

std::vector<ClassInfo> canonical_classes() {
  return {{1, "WL"}, {2, "GL"}, {3, "SM"}, {4, "WT"}};
}

namespace {

constexpr std::array<PatternKind, 5> kMarkedKinds = {
    PatternKind::solid_color, PatternKind::dots, PatternKind::hatching, PatternKind::cross_hatch,
    PatternKind::stipple_with_symbols};

constexpr std::array<std::pair<PatternKind, const char*>, 6> kKindNames = {{
    {PatternKind::solid_color, "solid_color"},
    {PatternKind::dots, "dots"},
    {PatternKind::hatching, "hatching"},
    {PatternKind::cross_hatch, "cross_hatch"},
    {PatternKind::stipple_with_symbols, "stipple_with_symbols"},
    {PatternKind::blank, "blank"},
}};

Rgb hsv_to_rgb(double h, double s, double v) {
  const double c = v * s;
  const double hp = std::fmod(h, 1.0) * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp)) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const double m = v - c;
  auto q = [m](double u) { return static_cast<std::uint8_t>(std::lround((u + m) * 255.0)); };
  return {q(r), q(g), q(b)};
}

int positive_mod(int a, int m) {
  const int r = a % m;
  return r < 0 ? r + m : r;
}

bool on_hatch_line(int y, int x, double angle_deg, int spacing, int width) {
  const double theta = angle_deg * std::numbers::pi / 180.0;
  const double u = x * std::cos(theta) + y * std::sin(theta);
  double m = std::fmod(u, static_cast<double>(spacing));
  if (m < 0) m += spacing;
  return m < width;
}

}  // namespace

std::string to_string(PatternKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

PatternKind pattern_kind_from_string(const std::string& name) {
  for (const auto& [k, n] : kKindNames) {
    if (name == n) return k;
  }
  throw std::invalid_argument("unknown pattern kind '" + name + "'");
}

std::vector<PatternSpec> make_pattern_library(std::uint64_t seed, int n_patterns) {
  if (n_patterns < 1) throw std::invalid_argument("n_patterns must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto pick = [&](int lo, int hi) { return lo + static_cast<int>(unit(rng) * (hi - lo + 1)) % (hi - lo + 1); };

  std::vector<PatternSpec> out;
  out.reserve(static_cast<std::size_t>(n_patterns));
  int marked = 0;
  for (int i = 0; i < n_patterns; ++i) {
    PatternSpec p;
    p.pattern_id = i;
    // Slot 5 is the single blank pattern; every other slot cycles the marked kinds.
    p.kind = i == 5 ? PatternKind::blank : kMarkedKinds[static_cast<std::size_t>(marked++ % 5)];
    const double hue = std::fmod(i * 0.381966 + 0.05 * unit(rng), 1.0);
    const double sat = 0.55 + 0.25 * unit(rng);
    const double val = 0.35 + 0.30 * unit(rng);
    p.color = hsv_to_rgb(hue, sat, val);
    switch (p.kind) {
      case PatternKind::solid_color:
        p.spacing = 4;
        p.mark_size = 1;
        break;
      case PatternKind::dots:
        p.spacing = pick(4, 5);
        p.mark_size = 1;
        break;
      case PatternKind::hatching:
        p.spacing = pick(4, 5);
        p.mark_size = pick(1, 2);
        p.orientation_deg = 30.0 + 30.0 * pick(0, 4);
        break;
      case PatternKind::cross_hatch:
        p.spacing = pick(4, 6);
        p.mark_size = 1;
        p.orientation_deg = 15.0 * pick(0, 5);
        break;
      case PatternKind::stipple_with_symbols:
        p.spacing = 3;
        p.mark_size = 1;
        break;
      case PatternKind::blank:
        p.color = {0, 0, 0};
        p.spacing = 4;
        p.mark_size = 0;
        break;
    }
    out.push_back(p);
  }
  return out;
}

Rgb render_pattern_pixel(const PatternSpec& p, Rgb background, int y, int x) {
  switch (p.kind) {
    case PatternKind::solid_color:
      return p.color;
    case PatternKind::blank:
      return background;
    case PatternKind::dots: {
      const int s = p.spacing;
      const int dy = positive_mod(y, s) - s / 2;
      const int dx = positive_mod(x, s) - s / 2;
      return dx * dx + dy * dy <= p.mark_size * p.mark_size ? p.color : background;
    }
    case PatternKind::hatching:
      return on_hatch_line(y, x, p.orientation_deg, p.spacing, p.mark_size) ? p.color : background;
    case PatternKind::cross_hatch:
      return on_hatch_line(y, x, p.orientation_deg, p.spacing, p.mark_size) ||
                     on_hatch_line(y, x, p.orientation_deg + 90.0, p.spacing, p.mark_size)
                 ? p.color
                 : background;
    case PatternKind::stipple_with_symbols: {
      const int s = p.spacing;
      if (positive_mod(y, s) == 0 && positive_mod(x, s) == 0) return p.color;
      // Square symbols on a staggered grid four stipple cells apart.
      const int cell = 4 * s;
      const int row = y >= 0 ? y / cell : (y - cell + 1) / cell;
      const int shift = (row % 2 != 0) ? cell / 2 : 0;
      const int cy = row * cell + cell / 2;
      const int cx = (x - shift) >= 0 ? ((x - shift) / cell) * cell + cell / 2 + shift
                                      : ((x - shift - cell + 1) / cell) * cell + cell / 2 + shift;
      return std::abs(y - cy) <= p.mark_size && std::abs(x - cx) <= p.mark_size ? p.color : background;
    }
  }
  return background;
}

void validate_style(const StyleSpec& style) {
  std::set<int> used;
  for (const auto& [cls, pattern] : style.class_to_pattern) {
    if (cls < 1 || cls > 255) {
      throw InvalidStyle("style " + std::to_string(style.style_id) + ": class id " + std::to_string(cls) +
                         " outside 1..255");
    }
    if (!used.insert(pattern).second) {
      throw InvalidStyle("style " + std::to_string(style.style_id) + ": pattern " + std::to_string(pattern) +
                         " bound to more than one class");
    }
  }
}

MapSheet render_sheet(const StyleSpec& style, const std::vector<PatternSpec>& library,
                      std::uint64_t layout_seed, int height, int width,
                      const std::vector<ClassId>& classes, const LayoutParams& layout) {
  if (classes.empty()) throw std::invalid_argument("render_sheet: classes must be nonempty");
  if (height <= 0 || width <= 0) throw std::invalid_argument("render_sheet: empty sheet");
  if (layout.cell_area <= 0 || layout.background_weight < 0) {
    throw std::invalid_argument("render_sheet: invalid layout parameters");
  }
  validate_style(style);
  std::vector<const PatternSpec*> pattern_of(256, nullptr);
  for (ClassId c : classes) {
    auto it = style.class_to_pattern.find(c);
    if (it == style.class_to_pattern.end()) {
      throw InvalidStyle("style " + std::to_string(style.style_id) + " has no pattern for class " +
                         std::to_string(c));
    }
    auto pit = std::find_if(library.begin(), library.end(),
                            [&](const PatternSpec& p) { return p.pattern_id == it->second; });
    if (pit == library.end()) {
      throw InvalidStyle("pattern " + std::to_string(it->second) + " missing from the library");
    }
    pattern_of[static_cast<std::size_t>(c)] = &*pit;
  }

  std::mt19937_64 rng(layout_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int n_classes = static_cast<int>(classes.size());
  const int min_cells = n_classes + (layout.background_weight > 0 ? 1 : 0);
  const int n_cells = std::max(
      min_cells, static_cast<int>(std::lround(double(height) * double(width) / layout.cell_area)));

  std::vector<double> sy(static_cast<std::size_t>(n_cells)), sx(static_cast<std::size_t>(n_cells));
  for (int i = 0; i < n_cells; ++i) {
    sy[static_cast<std::size_t>(i)] = unit(rng) * height;
    sx[static_cast<std::size_t>(i)] = unit(rng) * width;
  }
  // Every class owns at least one cell; remaining cells draw from background + classes.
  std::vector<ClassId> owner(static_cast<std::size_t>(n_cells), 0);
  std::vector<ClassId> shuffled = classes;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  for (int i = 0; i < n_classes; ++i) owner[static_cast<std::size_t>(i)] = shuffled[static_cast<std::size_t>(i)];
  const double total_weight = layout.background_weight + n_classes;
  for (int i = n_classes; i < n_cells; ++i) {
    const double r = unit(rng) * total_weight;
    if (r < layout.background_weight) {
      owner[static_cast<std::size_t>(i)] = 0;
    } else {
      const int k = std::min(n_classes - 1, static_cast<int>(r - layout.background_weight));
      owner[static_cast<std::size_t>(i)] = classes[static_cast<std::size_t>(k)];
    }
  }

  MapSheet sheet;
  sheet.style_id = style.style_id;
  sheet.layout_seed = layout_seed;
  sheet.image = RgbImage(height, width);
  sheet.labels = LabelRaster(height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int i = 0; i < n_cells; ++i) {
        const double dy = sy[static_cast<std::size_t>(i)] - y;
        const double dx = sx[static_cast<std::size_t>(i)] - x;
        const double d = dy * dy + dx * dx;
        if (d < best_d) {
          best_d = d;
          best = i;
        }
      }
      const ClassId c = owner[static_cast<std::size_t>(best)];
      sheet.labels.at(y, x) = static_cast<std::uint8_t>(c);
      const Rgb color = c == 0 ? style.background_color
                               : render_pattern_pixel(*pattern_of[static_cast<std::size_t>(c)],
                                                      style.background_color, y, x);
      set_pixel(sheet.image, y, x, color);
    }
  }
  return sheet;
}

std::vector<Collision> find_collisions(const std::vector<StyleSpec>& styles) {
  std::vector<Collision> out;
  for (std::size_t a = 0; a < styles.size(); ++a) {
    for (std::size_t b = a + 1; b < styles.size(); ++b) {
      for (const auto& [ca, pa] : styles[a].class_to_pattern) {
        for (const auto& [cb, pb] : styles[b].class_to_pattern) {
          if (pa == pb && ca != cb) {
            out.push_back({pa, styles[a].style_id, ca, styles[b].style_id, cb});
          }
        }
      }
    }
  }
  return out;
}

std::vector<PatternSpec> resolve_library(const AmbiguityConfig& config) {
  return config.patterns.empty() ? make_pattern_library(config.seed, config.n_patterns) : config.patterns;
}

std::vector<MapSheet> make_ambiguity_suite(const AmbiguityConfig& config) {
  if (config.styles.size() < 2) throw std::invalid_argument("ambiguity suite needs at least two styles");
  if (config.classes.size() < 2) throw std::invalid_argument("ambiguity suite needs at least two classes");
  if (config.sheets_per_style < 1) throw std::invalid_argument("sheets_per_style must be >= 1");
  if (find_collisions(config.styles).empty()) {
    throw std::invalid_argument("ambiguity suite config contains no pattern collision between styles");
  }
  const auto library = resolve_library(config);
  std::vector<ClassId> class_ids;
  for (const auto& c : config.classes) class_ids.push_back(c.id);

  std::vector<MapSheet> sheets;
  int next_id = 0;
  for (std::size_t si = 0; si < config.styles.size(); ++si) {
    for (int k = 0; k < config.sheets_per_style; ++k) {
      const std::uint64_t layout_seed = derive_seed(config.seed, si, static_cast<std::uint64_t>(k));
      MapSheet sheet = render_sheet(config.styles[si], library, layout_seed, config.sheet_height,
                                    config.sheet_width, class_ids, config.layout);
      sheet.sheet_id = next_id++;
      sheets.push_back(std::move(sheet));
    }
  }
  return sheets;
}

AmbiguityStats ambiguity_stats(const std::vector<StyledLabels>& sheets, const std::vector<StyleSpec>& styles,
                               const std::vector<PatternSpec>& library) {
  std::set<int> blank_ids;
  for (const auto& p : library) {
    if (p.kind == PatternKind::blank) blank_ids.insert(p.pattern_id);
  }
  constexpr int kBackgroundKey = -1;
  // counts[key][class]; blank patterns look exactly like background so they share its key.
  std::map<int, std::map<ClassId, std::uint64_t>> counts;
  std::uint64_t labeled = 0;
  for (const auto& s : sheets) {
    auto sit = std::find_if(styles.begin(), styles.end(), [&](const StyleSpec& st) { return st.style_id == s.style_id; });
    if (sit == styles.end()) throw std::invalid_argument("ambiguity_stats: unknown style id");
    std::array<int, 256> key_of{};
    key_of.fill(kBackgroundKey);
    for (const auto& [c, p] : sit->class_to_pattern) {
      key_of[static_cast<std::size_t>(c)] = blank_ids.count(p) ? kBackgroundKey : p;
    }
    std::array<std::uint64_t, 256> hist{};
    for (auto v : s.labels->pixels) ++hist[v];
    for (int c = 0; c < 256; ++c) {
      if (hist[static_cast<std::size_t>(c)] == 0) continue;
      counts[key_of[static_cast<std::size_t>(c)]][c] += hist[static_cast<std::size_t>(c)];
      if (c != 0) labeled += hist[static_cast<std::size_t>(c)];
    }
  }

  AmbiguityStats stats;
  std::set<int> collision;
  for (const auto& c : find_collisions(styles)) collision.insert(blank_ids.count(c.pattern_id) ? kBackgroundKey : c.pattern_id);
  stats.collision_patterns.assign(collision.begin(), collision.end());
  std::uint64_t collision_pixels = 0;
  std::uint64_t unavoidable = 0;
  for (int key : collision) {
    auto it = counts.find(key);
    if (it == counts.end()) continue;
    std::uint64_t total = 0, best = 0, labeled_here = 0;
    for (const auto& [c, n] : it->second) {
      total += n;
      best = std::max(best, n);
      if (c != 0) labeled_here += n;
    }
    collision_pixels += labeled_here;
    unavoidable += total - best;
  }
  if (labeled > 0) {
    stats.collision_fraction = double(collision_pixels) / double(labeled);
    stats.misassignment_bound = double(unavoidable) / double(labeled);
  }

  std::set<ClassId> all_classes;
  for (const auto& st : styles) {
    for (const auto& [c, p] : st.class_to_pattern) all_classes.insert(c);
  }
  for (ClassId c : all_classes) {
    std::vector<std::pair<std::uint64_t, std::uint64_t>> carriers;  // (pixels of c, all pixels) per key
    std::uint64_t gt = 0;
    for (const auto& [key, per_class] : counts) {
      auto it = per_class.find(c);
      if (it == per_class.end() || it->second == 0) continue;
      std::uint64_t total = 0;
      for (const auto& [cc, n] : per_class) total += n;
      carriers.emplace_back(it->second, total);
      gt += it->second;
    }
    double best = 0;
    const std::size_t n = std::min<std::size_t>(carriers.size(), 20);
    // IoU is linear-fractional in the per-key assignment, so the maximum sits on a subset.
    for (std::uint64_t subset = 1; subset < (std::uint64_t{1} << n); ++subset) {
      std::uint64_t tp = 0, pred = 0;
      for (std::size_t k = 0; k < n; ++k) {
        if (subset & (std::uint64_t{1} << k)) {
          tp += carriers[k].first;
          pred += carriers[k].second;
        }
      }
      best = std::max(best, double(tp) / double(pred + gt - tp));
    }
    stats.iou_ceiling[c] = gt > 0 ? best : 1.0;
  }
  return stats;
}

// ---- JSON ------------------------------------------------------------------

namespace {

const json& require(const json& j, const std::string& key) {
  if (!j.is_object() || !j.contains(key)) throw ConfigError(key, "missing required key");
  return j.at(key);
}

Rgb rgb_from_json(const json& j, const std::string& key) {
  if (!j.is_array() || j.size() != 3) throw ConfigError(key, "expected [r, g, b]");
  auto ch = [&](std::size_t i) {
    const int v = j.at(i).get<int>();
    if (v < 0 || v > 255) throw ConfigError(key, "colour channel outside 0..255");
    return static_cast<std::uint8_t>(v);
  };
  return {ch(0), ch(1), ch(2)};
}

json rgb_to_json(Rgb c) { return json::array({c.r, c.g, c.b}); }

}  // namespace

json to_json(const PatternSpec& p) {
  return {{"pattern_id", p.pattern_id}, {"kind", to_string(p.kind)},  {"color", rgb_to_json(p.color)},
          {"spacing", p.spacing},       {"mark_size", p.mark_size},   {"orientation_deg", p.orientation_deg}};
}

PatternSpec pattern_from_json(const json& j) {
  PatternSpec p;
  p.pattern_id = require(j, "pattern_id").get<int>();
  p.kind = pattern_kind_from_string(require(j, "kind").get<std::string>());
  p.color = rgb_from_json(j.value("color", json::array({0, 0, 0})), "color");
  p.spacing = j.value("spacing", 4);
  p.mark_size = j.value("mark_size", 1);
  p.orientation_deg = j.value("orientation_deg", 0.0);
  if (p.spacing < 2) throw ConfigError("spacing", "must be >= 2");
  const bool needs_marks = p.kind != PatternKind::solid_color && p.kind != PatternKind::blank;
  if (needs_marks && p.mark_size < 1) throw ConfigError("mark_size", "must be >= 1");
  return p;
}

json to_json(const StyleSpec& s) {
  json mapping = json::object();
  for (const auto& [c, p] : s.class_to_pattern) mapping[std::to_string(c)] = p;
  return {{"style_id", s.style_id}, {"class_to_pattern", mapping}, {"background_color", rgb_to_json(s.background_color)}};
}

StyleSpec style_from_json(const json& j) {
  StyleSpec s;
  s.style_id = require(j, "style_id").get<int>();
  const json& mapping = require(j, "class_to_pattern");
  if (!mapping.is_object()) throw ConfigError("class_to_pattern", "expected an object of class id -> pattern id");
  for (const auto& [k, v] : mapping.items()) {
    try {
      s.class_to_pattern[std::stoi(k)] = v.get<int>();
    } catch (const std::exception&) {
      throw ConfigError("class_to_pattern", "non-integer class id '" + k + "'");
    }
  }
  if (j.contains("background_color")) s.background_color = rgb_from_json(j.at("background_color"), "background_color");
  try {
    validate_style(s);
  } catch (const InvalidStyle& e) {
    throw ConfigError("class_to_pattern", e.what());
  }
  return s;
}

AmbiguityConfig ambiguity_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("<root>", "expected a JSON object");
  AmbiguityConfig cfg;
  const json& styles = require(j, "styles");
  if (!styles.is_array()) throw ConfigError("styles", "expected an array");
  for (const auto& s : styles) cfg.styles.push_back(style_from_json(s));
  const json& classes = require(j, "classes");
  if (!classes.is_array() || classes.empty()) throw ConfigError("classes", "expected a nonempty array");
  for (const auto& c : classes) {
    if (c.is_object()) {
      cfg.classes.push_back({require(c, "id").get<int>(), c.value("name", std::string{})});
    } else {
      cfg.classes.push_back({c.get<int>(), ""});
    }
  }
  cfg.sheets_per_style = require(j, "sheets_per_style").get<int>();
  cfg.sheet_height = require(j, "sheet_height").get<int>();
  cfg.sheet_width = require(j, "sheet_width").get<int>();
  cfg.seed = require(j, "seed").get<std::uint64_t>();
  cfg.n_patterns = j.value("n_patterns", 8);
  if (j.contains("patterns")) {
    for (const auto& p : j.at("patterns")) cfg.patterns.push_back(pattern_from_json(p));
  }
  if (j.contains("layout")) {
    cfg.layout.cell_area = j.at("layout").value("cell_area", cfg.layout.cell_area);
    cfg.layout.background_weight = j.at("layout").value("background_weight", cfg.layout.background_weight);
  }
  if (cfg.sheets_per_style < 1) throw ConfigError("sheets_per_style", "must be >= 1");
  if (cfg.sheet_height < 1 || cfg.sheet_width < 1) throw ConfigError("sheet_height", "sheet dims must be positive");
  return cfg;
}

json to_json(const AmbiguityConfig& cfg) {
  json styles = json::array();
  for (const auto& s : cfg.styles) styles.push_back(to_json(s));
  json classes = json::array();
  for (const auto& c : cfg.classes) classes.push_back({{"id", c.id}, {"name", c.name}});
  json out = {{"styles", styles},
              {"classes", classes},
              {"sheets_per_style", cfg.sheets_per_style},
              {"sheet_height", cfg.sheet_height},
              {"sheet_width", cfg.sheet_width},
              {"seed", cfg.seed},
              {"n_patterns", cfg.n_patterns},
              {"layout", {{"cell_area", cfg.layout.cell_area}, {"background_weight", cfg.layout.background_weight}}}};
  if (!cfg.patterns.empty()) {
    json patterns = json::array();
    for (const auto& p : cfg.patterns) patterns.push_back(to_json(p));
    out["patterns"] = patterns;
  }
  return out;
}

json to_json(const AmbiguityStats& stats) {
  json ceiling = json::object();
  for (const auto& [c, v] : stats.iou_ceiling) ceiling[std::to_string(c)] = v;
  return {{"collision_patterns", stats.collision_patterns},
          {"collision_fraction", stats.collision_fraction},
          {"misassignment_bound", stats.misassignment_bound},
          {"iou_ceiling", ceiling}};
}

AmbiguityStats ambiguity_stats_from_json(const json& j) {
  AmbiguityStats s;
  s.collision_patterns = j.at("collision_patterns").get<std::vector<int>>();
  s.collision_fraction = j.at("collision_fraction").get<double>();
  s.misassignment_bound = j.at("misassignment_bound").get<double>();
  for (const auto& [k, v] : j.at("iou_ceiling").items()) s.iou_ceiling[std::stoi(k)] = v.get<double>();
  return s;
}

}  // namespace smol::synthmap
