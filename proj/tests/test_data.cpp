// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "smol/datapipe.hpp"
#include "smol/sampler.hpp"
#include "smol/synthmap.hpp"

using namespace smol;
using synthmap::StyleSpec;

namespace {

synthmap::AmbiguityConfig swap_config(int sheets_per_style, int side = 128) {
  synthmap::AmbiguityConfig cfg;
  cfg.classes = synthmap::canonical_classes();
  cfg.styles = {StyleSpec{1, {{1, 1}, {2, 2}, {3, 4}, {4, 0}}}, StyleSpec{2, {{1, 2}, {2, 1}, {3, 4}, {4, 0}}}};
  cfg.sheets_per_style = sheets_per_style;
  cfg.sheet_height = side;
  cfg.sheet_width = side;
  cfg.seed = 11;
  return cfg;
}

datapipe::Dataset swap_dataset(int sheets_per_style, int side = 128, int patch = 32) {
  const auto cfg = swap_config(sheets_per_style, side);
  return datapipe::build_dataset(synthmap::make_ambiguity_suite(cfg), cfg.classes, cfg.styles,
                                 synthmap::resolve_library(cfg), {.patch_size = patch});
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("smol_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("sheets are a pure function of the layout seed") {
  const auto cfg = swap_config(1);
  const auto lib = synthmap::resolve_library(cfg);
  const auto a = synthmap::render_sheet(cfg.styles[0], lib, 42, 96, 80, {1, 2, 3, 4});
  const auto b = synthmap::render_sheet(cfg.styles[0], lib, 42, 96, 80, {1, 2, 3, 4});
  const auto c = synthmap::render_sheet(cfg.styles[0], lib, 43, 96, 80, {1, 2, 3, 4});
  CHECK(a.image == b.image);
  CHECK(a.labels == b.labels);
  CHECK_FALSE(a.labels == c.labels);
  CHECK(a.image.height == 96);
  CHECK(a.image.width == 80);
}

TEST_CASE("every pixel is drawn with the pattern its label maps to") {
  const auto cfg = swap_config(1);
  const auto lib = synthmap::resolve_library(cfg);
  for (const auto& style : cfg.styles) {
    const auto sheet = synthmap::render_sheet(style, lib, 7, 64, 64, {1, 2, 3, 4});
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        const int label = sheet.labels.at(y, x);
        const Rgb expect = label == 0 ? style.background_color
                                      : synthmap::render_pattern_pixel(lib[static_cast<std::size_t>(
                                                                           style.class_to_pattern.at(label))],
                                                                       style.background_color, y, x);
        REQUIRE(pixel(sheet.image, y, x) == expect);
      }
  }
}

TEST_CASE("blank patterns render as background") {
  synthmap::PatternSpec blank{5, synthmap::PatternKind::blank, {1, 2, 3}};
  const Rgb bg{240, 230, 210};
  for (int y = 0; y < 9; ++y)
    for (int x = 0; x < 9; ++x) CHECK(synthmap::render_pattern_pixel(blank, bg, y, x) == bg);
}

TEST_CASE("a style may not bind one pattern to two classes") {
  CHECK_THROWS_AS(synthmap::validate_style(StyleSpec{1, {{1, 3}, {2, 3}}}), synthmap::InvalidStyle);
  CHECK_NOTHROW(synthmap::validate_style(StyleSpec{1, {{1, 3}, {2, 4}}}));
}

TEST_CASE("collisions and suites") {
  const auto cfg = swap_config(1);
  const auto cols = synthmap::find_collisions(cfg.styles);
  std::set<int> ids;
  for (const auto& c : cols) ids.insert(c.pattern_id);
  CHECK(ids == std::set<int>{1, 2});

  auto no_collision = cfg;
  no_collision.styles[1] = no_collision.styles[0];
  no_collision.styles[1].style_id = 2;
  CHECK_THROWS_AS(synthmap::make_ambiguity_suite(no_collision), std::invalid_argument);

  const auto sheets = synthmap::make_ambiguity_suite(swap_config(3, 64));
  REQUIRE(sheets.size() == 6);
  for (std::size_t i = 0; i < sheets.size(); ++i) {
    CHECK(sheets[i].sheet_id == static_cast<int>(i));
    CHECK(sheets[i].style_id == (i < 3 ? 1 : 2));
  }
}

TEST_CASE("generator config rejects bad keys with their name") {
  nlohmann::json j = synthmap::to_json(swap_config(2));
  CHECK(synthmap::to_json(synthmap::ambiguity_config_from_json(j)) == j);
  j["sheets_per_style"] = -1;
  try {
    synthmap::ambiguity_config_from_json(j);
    FAIL("expected ConfigError");
  } catch (const synthmap::ConfigError& e) {
    CHECK(e.key() == "sheets_per_style");
  }
}

// Exhaustive oracle: for each class try every subset of visual keys as "predict
// this class" and score the IoU pixel by pixel.
TEST_CASE("ambiguity ceiling matches a brute-force pixel oracle") {
  auto cfg = swap_config(3, 64);
  const auto lib = synthmap::resolve_library(cfg);
  const auto sheets = synthmap::make_ambiguity_suite(cfg);
  std::vector<synthmap::StyledLabels> styled;
  for (const auto& s : sheets) styled.push_back({s.style_id, &s.labels});
  const auto stats = synthmap::ambiguity_stats(styled, cfg.styles, lib);

  auto key_of = [&](int style_id, int label) {
    if (label == 0) return -1;
    const auto& st = cfg.styles[style_id == 1 ? 0 : 1];
    const int p = st.class_to_pattern.at(label);
    return lib[static_cast<std::size_t>(p)].kind == synthmap::PatternKind::blank ? -1 : p;
  };
  const std::vector<int> keys{-1, 0, 1, 2, 4};
  for (int c = 1; c <= 4; ++c) {
    double best = 0;
    for (unsigned subset = 1; subset < (1u << keys.size()); ++subset) {
      std::set<int> chosen;
      for (std::size_t k = 0; k < keys.size(); ++k)
        if (subset & (1u << k)) chosen.insert(keys[k]);
      long tp = 0, fp = 0, fn = 0;
      for (const auto& s : sheets)
        for (int y = 0; y < 64; ++y)
          for (int x = 0; x < 64; ++x) {
            const int l = s.labels.at(y, x);
            const bool pred = chosen.count(key_of(s.style_id, l)) > 0;
            tp += pred && l == c;
            fp += pred && l != c;
            fn += !pred && l == c;
          }
      if (tp + fp + fn > 0) best = std::max(best, double(tp) / double(tp + fp + fn));
    }
    CHECK(stats.iou_ceiling.at(c) == doctest::Approx(best).epsilon(1e-12));
  }
  CHECK(stats.iou_ceiling.at(3) == 1.0);
  CHECK(stats.iou_ceiling.at(1) < 0.75);
  CHECK(stats.misassignment_bound > 0.0);
  CHECK(stats.misassignment_bound <= stats.collision_fraction / 2 + 1e-12);
}

TEST_CASE("crop_patches tiles row-major and drops the residue") {
  const auto cfg = swap_config(1);
  const auto sheet = synthmap::render_sheet(cfg.styles[0], synthmap::resolve_library(cfg), 3, 70, 100, {1, 2, 3, 4});
  const auto patches = datapipe::crop_patches(sheet, 32, 10);
  REQUIRE(patches.size() == 2 * 3);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const auto& p = patches[i];
    CHECK(p.patch_id == 10 + static_cast<int>(i));
    CHECK(p.grid_row == static_cast<int>(i) / 3);
    CHECK(p.grid_col == static_cast<int>(i) % 3);
    CHECK(p.image == sheet.image.crop(p.grid_row * 32, p.grid_col * 32, 32, 32));
    CHECK(p.label == sheet.labels.crop(p.grid_row * 32, p.grid_col * 32, 32, 32));
  }
}

TEST_CASE("checkerboard split follows grid parity and loses nothing") {
  const auto cfg = swap_config(1);
  const auto sheet = synthmap::render_sheet(cfg.styles[0], synthmap::resolve_library(cfg), 3, 128, 96, {1, 2, 3, 4});
  const auto split = datapipe::grid_split(datapipe::crop_patches(sheet, 32));
  CHECK(split.train.size() + split.test.size() == 12);
  for (const auto& p : split.train) CHECK((p.grid_row + p.grid_col) % 2 == 0);
  for (const auto& p : split.test) CHECK((p.grid_row + p.grid_col) % 2 == 1);
}

TEST_CASE("few-shot crops cover the region") {
  // Coordinates encoded in the pixels locate each tile exactly.
  synthmap::MapSheet sheet;
  sheet.image = RgbImage(160, 160);
  sheet.labels = LabelRaster(160, 160);
  for (int y = 0; y < 160; ++y)
    for (int x = 0; x < 160; ++x) set_pixel(sheet.image, y, x, {std::uint8_t(y), std::uint8_t(x), 0});
  const datapipe::Rect region{10, 20, 100, 90};
  const int P = 32, margin = 8;
  const auto tiles = datapipe::crop_fewshot(sheet, region, P, margin);
  std::vector<int> covered(static_cast<std::size_t>(region.height * region.width), 0);
  std::set<std::pair<int, int>> origins;
  for (const auto& t : tiles) {
    CHECK(t.split == datapipe::Split::fewshot);
    const int y = t.image.at(0, 0, 0), x = t.image.at(0, 0, 1);
    CHECK(y >= region.y);
    CHECK(x >= region.x);
    CHECK(y + P <= region.y + region.height);
    CHECK(x + P <= region.x + region.width);
    CHECK(t.image == sheet.image.crop(y, x, P, P));
    origins.insert({y, x});
    for (int dy = 0; dy < P; ++dy)
      for (int dx = 0; dx < P; ++dx)
        covered[static_cast<std::size_t>((y - region.y + dy) * region.width + (x - region.x + dx))] = 1;
  }
  CHECK(origins.size() == tiles.size());
  CHECK(std::count(covered.begin(), covered.end(), 0) == 0);
  // Stride P - margin gives ceil((L - P) / stride) + 1 tiles per axis.
  CHECK(tiles.size() == std::size_t((68 + 23) / 24 + 1) * std::size_t((58 + 23) / 24 + 1));
}

TEST_CASE("class index counts agree with a direct scan") {
  const auto ds = swap_dataset(2);
  const auto& idx = datapipe::index_classes(ds.train, ds.manifest.min_pixels);
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    std::map<int, std::uint32_t> hist;
    for (auto v : ds.train[i].label.pixels) ++hist[v];
    std::set<int> present;
    for (auto [c, n] : hist)
      if (c != 0 && static_cast<int>(n) >= ds.manifest.min_pixels) present.insert(c);
    CHECK(idx.classes_of(i) == present);
    for (auto [c, n] : hist) CHECK(idx.pixel_count(i, c) == n);
    for (int c : present) {
      const auto& ids = idx.patches_with(ds.train[i].sheet_id, c);
      CHECK(std::find(ids.begin(), ids.end(), ds.train[i].patch_id) != ids.end());
    }
  }
}

TEST_CASE("datasets round-trip through disk") {
  auto ds = swap_dataset(2, 96);
  const auto cfg = swap_config(1);
  const auto extra = synthmap::render_sheet(cfg.styles[1], synthmap::resolve_library(cfg), 99, 96, 96, {1, 2, 3, 4});
  auto sheet = extra;
  sheet.sheet_id = 1000;
  datapipe::add_fewshot(ds, sheet, {0, 0, 64, 64}, 8);
  const auto dir = temp_dir("dataset");
  datapipe::write_dataset(ds, dir);
  const auto back = datapipe::load_dataset(dir);
  CHECK(back.manifest.patch_size == ds.manifest.patch_size);
  CHECK(back.manifest.min_pixels == ds.manifest.min_pixels);
  CHECK(back.manifest.styles == ds.manifest.styles);
  CHECK(back.manifest.patterns == ds.manifest.patterns);
  for (auto s : {datapipe::Split::train, datapipe::Split::test, datapipe::Split::fewshot}) {
    REQUIRE(back.split(s).size() == ds.split(s).size());
    for (std::size_t i = 0; i < ds.split(s).size(); ++i) {
      CHECK(back.split(s)[i].patch_id == ds.split(s)[i].patch_id);
      CHECK(back.split(s)[i].image == ds.split(s)[i].image);
      CHECK(back.split(s)[i].label == ds.split(s)[i].label);
    }
  }
  CHECK(back.manifest.ambiguity.at("test").iou_ceiling == ds.manifest.ambiguity.at("test").iou_ceiling);
  std::filesystem::remove_all(dir);
}

TEST_CASE("sampler draws satisfy the pair contract") {
  const auto ds = swap_dataset(4);
  const auto idx = datapipe::index_classes(ds.train, ds.manifest.min_pixels);
  sampler::SamplerConfig cfg{.p = 0.7, .seed = 5, .classes = ds.class_ids(), .max_retries = 1000, .positive_class = {}};
  sampler::PairSampler s(idx, ds.train, cfg);
  int eligible = 0, positive = 0;
  for (int i = 0; i < 2000; ++i) {
    const auto pair = s.sample();
    REQUIRE(sampler::check_invariants(pair, idx, ds.train, cfg.classes) == "");
    if (!idx.classes_of(pair.target).empty()) {
      ++eligible;
      positive += pair.polarity == sampler::Polarity::positive;
    }
  }
  const double rate = double(positive) / eligible;
  const double sigma = std::sqrt(0.7 * 0.3 / eligible);
  CHECK(std::abs(rate - 0.7) < 3 * sigma);
}

TEST_CASE("sampler streams are seed-deterministic") {
  const auto ds = swap_dataset(2);
  const auto idx = datapipe::index_classes(ds.train, ds.manifest.min_pixels);
  sampler::SamplerConfig cfg{.p = 0.7, .seed = 9, .classes = ds.class_ids(), .max_retries = 1000, .positive_class = {}};
  const auto a = sampler::make_epoch(idx, ds.train, cfg, 50);
  const auto b = sampler::make_epoch(idx, ds.train, cfg, 50);
  cfg.seed = 10;
  const auto c = sampler::make_epoch(idx, ds.train, cfg, 50);
  int same_as_c = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].target == b[i].target);
    CHECK(a[i].source == b[i].source);
    CHECK(a[i].class_x == b[i].class_x);
    CHECK(a[i].target_mask == b[i].target_mask);
    same_as_c += a[i].target == c[i].target && a[i].class_x == c[i].class_x;
  }
  CHECK(same_as_c < 25);
}

TEST_CASE("positive_class pins the prompted class of positive pairs") {
  const auto ds = swap_dataset(2);
  const auto idx = datapipe::index_classes(ds.train, ds.manifest.min_pixels);
  sampler::SamplerConfig cfg{.p = 1.0, .seed = 1, .classes = ds.class_ids(), .positive_class = 3};
  sampler::PairSampler s(idx, ds.train, cfg);
  for (const auto& pair : s.sample_many(200)) {
    if (pair.polarity == sampler::Polarity::positive) CHECK(pair.class_x == 3);
    CHECK(sampler::check_invariants(pair, idx, ds.train, cfg.classes) == "");
  }
}

TEST_CASE("a dataset without usable pairs is reported") {
  auto ds = swap_dataset(1);
  for (auto& p : ds.train) std::fill(p.label.pixels.begin(), p.label.pixels.end(), 0);
  const auto idx = datapipe::index_classes(ds.train, ds.manifest.min_pixels);
  sampler::SamplerConfig cfg{.p = 0.7, .seed = 1, .classes = ds.class_ids(), .max_retries = 20, .positive_class = {}};
  sampler::PairSampler s(idx, ds.train, cfg);
  CHECK_THROWS_AS(s.sample(), sampler::UnsatisfiableDataset);
}
