// SPDX-License-Identifier: Apache-2.0
#include "smol/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace smol::datapipe {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::fewshot: return "fewshot";
  }
  return "train";
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "test") return Split::test;
  if (name == "fewshot") return Split::fewshot;
  throw std::invalid_argument("unknown split '" + name + "'");
}

std::vector<Patch> crop_patches(const synthmap::MapSheet& sheet, int patch_size, int first_patch_id) {
  const int h = sheet.image.height;
  const int w = sheet.image.width;
  if (patch_size <= 0 || patch_size > h || patch_size > w) {
    throw std::invalid_argument("crop_patches: patch size " + std::to_string(patch_size) + " exceeds sheet " +
                                std::to_string(h) + "x" + std::to_string(w));
  }
  const int rows = h / patch_size;
  const int cols = w / patch_size;
  std::vector<Patch> out;
  out.reserve(static_cast<std::size_t>(rows * cols));
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      Patch p;
      p.patch_id = first_patch_id + r * cols + c;
      p.sheet_id = sheet.sheet_id;
      p.grid_row = r;
      p.grid_col = c;
      p.image = sheet.image.crop(r * patch_size, c * patch_size, patch_size, patch_size);
      p.label = sheet.labels.crop(r * patch_size, c * patch_size, patch_size, patch_size);
      out.push_back(std::move(p));
    }
  }
  return out;
}

SplitResult grid_split(std::vector<Patch> patches) {
  SplitResult out;
  for (auto& p : patches) {
    if ((p.grid_row + p.grid_col) % 2 == 0) {
      p.split = Split::train;
      out.train.push_back(std::move(p));
    } else {
      p.split = Split::test;
      out.test.push_back(std::move(p));
    }
  }
  return out;
}

namespace {

std::vector<int> tile_offsets(int length, int patch_size, int stride) {
  std::vector<int> offsets;
  int pos = 0;
  for (; pos + patch_size <= length; pos += stride) offsets.push_back(pos);
  if (offsets.back() + patch_size < length) offsets.push_back(length - patch_size);
  return offsets;
}

}  // namespace

std::vector<Patch> crop_fewshot(const synthmap::MapSheet& sheet, const Rect& region, int patch_size, int margin,
                                int first_patch_id) {
  if (margin < 0 || margin >= patch_size) throw std::invalid_argument("crop_fewshot: margin must lie in [0, P)");
  if (region.height < patch_size || region.width < patch_size) {
    throw std::invalid_argument("crop_fewshot: region smaller than the patch size");
  }
  if (region.y < 0 || region.x < 0 || region.y + region.height > sheet.image.height ||
      region.x + region.width > sheet.image.width) {
    throw std::invalid_argument("crop_fewshot: region outside the sheet");
  }
  const int stride = patch_size - margin;
  const auto ys = tile_offsets(region.height, patch_size, stride);
  const auto xs = tile_offsets(region.width, patch_size, stride);
  std::vector<Patch> out;
  int id = first_patch_id;
  for (std::size_t r = 0; r < ys.size(); ++r) {
    for (std::size_t c = 0; c < xs.size(); ++c) {
      Patch p;
      p.patch_id = id++;
      p.sheet_id = sheet.sheet_id;
      p.grid_row = static_cast<int>(r);
      p.grid_col = static_cast<int>(c);
      p.image = sheet.image.crop(region.y + ys[r], region.x + xs[c], patch_size, patch_size);
      p.label = sheet.labels.crop(region.y + ys[r], region.x + xs[c], patch_size, patch_size);
      p.split = Split::fewshot;
      out.push_back(std::move(p));
    }
  }
  return out;
}

int default_min_pixels(int patch_size) {
  // Area-proportional threshold (64 px at 384), floored at 64 px so that small
  // patches do not accept slivers as prompts.
  const double scaled = 64.0 * (patch_size / 384.0) * (patch_size / 384.0);
  return std::max(64, static_cast<int>(std::lround(scaled)));
}

ClassIndex::ClassIndex(const std::vector<Patch>& patches, int min_pixels) : min_pixels_(min_pixels) {
  if (min_pixels < 1) throw std::invalid_argument("index_classes: min_pixels must be >= 1");
  counts_.resize(patches.size());
  present_.resize(patches.size());
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const auto& p = patches[i];
    auto& hist = counts_[i];
    hist.fill(0);
    for (auto v : p.label.pixels) ++hist[v];
    for (int c = 1; c < 256; ++c) {
      if (hist[static_cast<std::size_t>(c)] >= static_cast<std::uint32_t>(min_pixels)) {
        present_[i].insert(c);
        by_sheet_[p.sheet_id][c].push_back(p.patch_id);
      }
    }
    by_sheet_[p.sheet_id];  // every sheet appears, even with no classes
    if (!position_.emplace(p.patch_id, i).second) {
      throw std::invalid_argument("index_classes: duplicate patch id " + std::to_string(p.patch_id));
    }
  }
  for (auto& [sheet, per_class] : by_sheet_) {
    for (auto& [c, ids] : per_class) std::sort(ids.begin(), ids.end());
  }
}

const std::vector<int>& ClassIndex::patches_with(int sheet_id, ClassId class_id) const {
  static const std::vector<int> kEmpty;
  auto sit = by_sheet_.find(sheet_id);
  if (sit == by_sheet_.end()) return kEmpty;
  auto cit = sit->second.find(class_id);
  return cit == sit->second.end() ? kEmpty : cit->second;
}

std::size_t ClassIndex::position_of(int patch_id) const {
  auto it = position_.find(patch_id);
  if (it == position_.end()) throw std::out_of_range("patch id " + std::to_string(patch_id) + " not indexed");
  return it->second;
}

std::set<ClassId> ClassIndex::sheet_classes(int sheet_id) const {
  std::set<ClassId> out;
  auto sit = by_sheet_.find(sheet_id);
  if (sit == by_sheet_.end()) return out;
  for (const auto& [c, ids] : sit->second) {
    if (!ids.empty()) out.insert(c);
  }
  return out;
}

std::vector<int> ClassIndex::sheet_ids() const {
  std::vector<int> out;
  for (const auto& [s, _] : by_sheet_) out.push_back(s);
  return out;
}

ClassIndex index_classes(const std::vector<Patch>& patches, int min_pixels) { return ClassIndex(patches, min_pixels); }

// ---- Dataset ---------------------------------------------------------------

const std::vector<Patch>& Dataset::split(Split s) const {
  switch (s) {
    case Split::train: return train;
    case Split::test: return test;
    case Split::fewshot: return fewshot;
  }
  return train;
}

std::vector<Patch>& Dataset::split(Split s) {
  return const_cast<std::vector<Patch>&>(static_cast<const Dataset&>(*this).split(s));
}

const synthmap::MapSheet* Dataset::find_sheet(int sheet_id) const {
  for (const auto& s : sheets) {
    if (s.sheet_id == sheet_id) return &s;
  }
  return nullptr;
}

int Dataset::style_of(int sheet_id) const {
  for (const auto& r : manifest.sheets) {
    if (r.sheet_id == sheet_id) return r.style_id;
  }
  throw std::out_of_range("unknown sheet id " + std::to_string(sheet_id));
}

std::vector<ClassId> Dataset::class_ids() const {
  std::vector<ClassId> out;
  for (const auto& c : manifest.classes) out.push_back(c.id);
  return out;
}

namespace {

SheetRecord record_of(const synthmap::MapSheet& s) {
  return {s.sheet_id, s.style_id, s.image.height, s.image.width, s.layout_seed};
}

void refresh_counts(Dataset& ds) {
  ds.manifest.split_counts = {{"train", static_cast<int>(ds.train.size())},
                              {"test", static_cast<int>(ds.test.size())},
                              {"fewshot", static_cast<int>(ds.fewshot.size())}};
}

int next_patch_id(const Dataset& ds) {
  int next = 0;
  for (auto s : {Split::train, Split::test, Split::fewshot}) {
    for (const auto& p : ds.split(s)) next = std::max(next, p.patch_id + 1);
  }
  return next;
}

}  // namespace

Dataset build_dataset(std::vector<synthmap::MapSheet> sheets, const std::vector<synthmap::ClassInfo>& classes,
                      const std::vector<synthmap::StyleSpec>& styles,
                      const std::vector<synthmap::PatternSpec>& patterns, const BuildOptions& options) {
  Dataset ds;
  ds.manifest.patch_size = options.patch_size;
  ds.manifest.min_pixels = options.min_pixels > 0 ? options.min_pixels : default_min_pixels(options.patch_size);
  ds.manifest.classes = classes;
  ds.manifest.styles = styles;
  ds.manifest.patterns = patterns;
  int next_id = 0;
  std::vector<Patch> all;
  for (const auto& sheet : sheets) {
    auto patches = crop_patches(sheet, options.patch_size, next_id);
    next_id += static_cast<int>(patches.size());
    std::move(patches.begin(), patches.end(), std::back_inserter(all));
    ds.manifest.sheets.push_back(record_of(sheet));
  }
  auto split = grid_split(std::move(all));
  ds.train = std::move(split.train);
  ds.test = std::move(split.test);
  ds.sheets = std::move(sheets);
  refresh_counts(ds);

  std::vector<synthmap::StyledLabels> whole, test;
  for (const auto& s : ds.sheets) whole.push_back({s.style_id, &s.labels});
  for (const auto& p : ds.test) test.push_back({ds.style_of(p.sheet_id), &p.label});
  if (!styles.empty()) {
    ds.manifest.ambiguity["all"] = synthmap::ambiguity_stats(whole, styles, patterns);
    ds.manifest.ambiguity["test"] = synthmap::ambiguity_stats(test, styles, patterns);
  }
  return ds;
}

void add_fewshot(Dataset& ds, const synthmap::MapSheet& sheet, const Rect& region, int margin) {
  int row_offset = 0;
  for (const auto& p : ds.fewshot) {
    if (p.sheet_id == sheet.sheet_id) row_offset = std::max(row_offset, p.grid_row + 1);
  }
  auto patches = crop_fewshot(sheet, region, ds.manifest.patch_size, margin, next_patch_id(ds));
  for (auto& p : patches) {
    p.grid_row += row_offset;
    ds.fewshot.push_back(std::move(p));
  }
  if (ds.find_sheet(sheet.sheet_id) == nullptr) {
    ds.sheets.push_back(sheet);
    ds.manifest.sheets.push_back(record_of(sheet));
  }
  refresh_counts(ds);
}

// ---- On-disk format --------------------------------------------------------

namespace {

json manifest_to_json(const DatasetManifest& m) {
  json sheets = json::array();
  for (const auto& s : m.sheets) {
    sheets.push_back({{"sheet_id", s.sheet_id},
                      {"style_id", s.style_id},
                      {"height", s.height},
                      {"width", s.width},
                      {"layout_seed", s.layout_seed}});
  }
  json classes = json::array();
  for (const auto& c : m.classes) classes.push_back({{"id", c.id}, {"name", c.name}});
  json styles = json::array();
  for (const auto& s : m.styles) styles.push_back(synthmap::to_json(s));
  json patterns = json::array();
  for (const auto& p : m.patterns) patterns.push_back(synthmap::to_json(p));
  json ambiguity = json::object();
  for (const auto& [k, v] : m.ambiguity) ambiguity[k] = synthmap::to_json(v);
  return {{"format_version", m.format_version},
          {"patch_size", m.patch_size},
          {"min_pixels", m.min_pixels},
          {"sheets", sheets},
          {"split_counts", m.split_counts},
          {"classes", classes},
          {"styles", styles},
          {"patterns", patterns},
          {"ambiguity", ambiguity}};
}

DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  m.format_version = j.at("format_version").get<int>();
  if (m.format_version != DatasetManifest::kFormatVersion) {
    throw ImageIoError("unsupported dataset format version " + std::to_string(m.format_version));
  }
  m.patch_size = j.at("patch_size").get<int>();
  m.min_pixels = j.at("min_pixels").get<int>();
  for (const auto& s : j.at("sheets")) {
    m.sheets.push_back({s.at("sheet_id").get<int>(), s.at("style_id").get<int>(), s.at("height").get<int>(),
                        s.at("width").get<int>(), s.at("layout_seed").get<std::uint64_t>()});
  }
  m.split_counts = j.at("split_counts").get<std::map<std::string, int>>();
  for (const auto& c : j.at("classes")) m.classes.push_back({c.at("id").get<int>(), c.at("name").get<std::string>()});
  for (const auto& s : j.at("styles")) m.styles.push_back(synthmap::style_from_json(s));
  for (const auto& p : j.at("patterns")) m.patterns.push_back(synthmap::pattern_from_json(p));
  for (const auto& [k, v] : j.at("ambiguity").items()) m.ambiguity[k] = synthmap::ambiguity_stats_from_json(v);
  return m;
}

std::string patch_stem(const Patch& p) { return std::to_string(p.patch_id); }

}  // namespace

void write_dataset(const Dataset& ds, const fs::path& root) {
  fs::create_directories(root);
  write_file(root / "manifest.json", manifest_to_json(ds.manifest).dump(2) + "\n");
  for (const auto& s : ds.sheets) {
    const fs::path dir = root / "sheets" / std::to_string(s.sheet_id);
    write_png(dir / "image.png", s.image);
    write_png(dir / "labels.png", s.labels);
    const json meta = {{"style_id", s.style_id}, {"layout_seed", s.layout_seed}};
    write_file(dir / "meta.json", meta.dump(2) + "\n");
  }
  for (auto split : {Split::train, Split::test, Split::fewshot}) {
    const auto& patches = ds.split(split);
    const fs::path dir = root / "patches" / to_string(split);
    fs::create_directories(dir);
    std::ostringstream index;
    for (const auto& p : patches) {
      write_png(dir / (patch_stem(p) + ".png"), p.image);
      write_png(dir / (patch_stem(p) + "_label.png"), p.label);
      std::vector<int> present;
      std::array<std::uint32_t, 256> hist{};
      for (auto v : p.label.pixels) ++hist[v];
      for (int c = 1; c < 256; ++c) {
        if (hist[static_cast<std::size_t>(c)] >= static_cast<std::uint32_t>(ds.manifest.min_pixels)) present.push_back(c);
      }
      const json line = {{"patch_id", p.patch_id},
                         {"sheet_id", p.sheet_id},
                         {"grid_row", p.grid_row},
                         {"grid_col", p.grid_col},
                         {"classes", present}};
      index << line.dump() << "\n";
    }
    write_file(dir / "patches.jsonl", index.str());
  }
}

DatasetManifest read_manifest(const fs::path& root) {
  const auto bytes = read_file(root / "manifest.json");
  try {
    return manifest_from_json(json::parse(bytes.begin(), bytes.end()));
  } catch (const json::exception& e) {
    throw ImageIoError("malformed manifest in " + root.string() + ": " + e.what());
  }
}

Dataset load_dataset(const fs::path& root) {
  Dataset ds;
  ds.manifest = read_manifest(root);
  for (const auto& rec : ds.manifest.sheets) {
    const fs::path dir = root / "sheets" / std::to_string(rec.sheet_id);
    synthmap::MapSheet s;
    s.sheet_id = rec.sheet_id;
    s.style_id = rec.style_id;
    s.layout_seed = rec.layout_seed;
    s.image = read_png_rgb(dir / "image.png");
    s.labels = read_png_gray(dir / "labels.png");
    if (s.image.height != rec.height || s.image.width != rec.width) {
      throw ImageIoError("sheet " + std::to_string(rec.sheet_id) + " dims disagree with the manifest");
    }
    ds.sheets.push_back(std::move(s));
  }
  for (auto split : {Split::train, Split::test, Split::fewshot}) {
    const fs::path dir = root / "patches" / to_string(split);
    auto& out = ds.split(split);
    if (!fs::exists(dir / "patches.jsonl")) continue;
    std::ifstream in(dir / "patches.jsonl");
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      Patch p;
      p.patch_id = j.at("patch_id").get<int>();
      p.sheet_id = j.at("sheet_id").get<int>();
      p.grid_row = j.at("grid_row").get<int>();
      p.grid_col = j.at("grid_col").get<int>();
      p.split = split;
      p.image = read_png_rgb(dir / (patch_stem(p) + ".png"));
      p.label = read_png_gray(dir / (patch_stem(p) + "_label.png"));
      out.push_back(std::move(p));
    }
    const auto it = ds.manifest.split_counts.find(to_string(split));
    const int expected = it == ds.manifest.split_counts.end() ? 0 : it->second;
    if (expected != static_cast<int>(out.size())) {
      throw ImageIoError("split " + to_string(split) + " has " + std::to_string(out.size()) +
                         " patches on disk, manifest says " + std::to_string(expected));
    }
  }
  return ds;
}

}  // namespace smol::datapipe
