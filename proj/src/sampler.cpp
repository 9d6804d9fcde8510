// SPDX-License-Identifier: Apache-2.0
#include "smol/sampler.hpp"

#include <algorithm>
#include <sstream>

#include <nlohmann/json.hpp>

namespace smol::sampler {

namespace {

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

std::size_t pick_source(const datapipe::ClassIndex& index, int sheet_id, ClassId c,
                        std::optional<std::size_t> avoid, std::mt19937_64& rng) {
  const auto& ids = index.patches_with(sheet_id, c);
  std::vector<std::size_t> candidates;
  candidates.reserve(ids.size());
  for (int id : ids) {
    const auto pos = index.position_of(id);
    if (!avoid || pos != *avoid) candidates.push_back(pos);
  }
  // Self-prompting only when the class lives in a single patch of the sheet.
  if (candidates.empty() && avoid) return *avoid;
  return candidates[uniform_index(rng, candidates.size())];
}

PairSample make_pair(const std::vector<Patch>& patches, std::size_t target, std::size_t source, ClassId c,
                     Polarity polarity) {
  PairSample s;
  s.target = target;
  s.source = source;
  s.class_x = c;
  s.polarity = polarity;
  s.source_mask = class_mask(patches[source].label, c);
  s.target_mask = polarity == Polarity::positive ? class_mask(patches[target].label, c)
                                                 : BinaryMask(patches[target].label.height, patches[target].label.width);
  return s;
}

std::optional<PairSample> try_target(const datapipe::ClassIndex& index, const std::vector<Patch>& patches,
                                     const SamplerConfig& cfg, std::mt19937_64& rng, std::size_t target) {
  const Patch& t = patches[target];
  const auto& present = index.classes_of(target);
  std::vector<ClassId> positives;
  for (ClassId c : cfg.classes) {
    if (!present.count(c)) continue;
    if (cfg.positive_class && c != *cfg.positive_class) continue;
    positives.push_back(c);
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (!present.empty() && unit(rng) < cfg.p && !positives.empty()) {
    const ClassId c = positives[uniform_index(rng, positives.size())];
    const std::size_t source = pick_source(index, t.sheet_id, c, target, rng);
    return make_pair(patches, target, source, c, Polarity::positive);
  }
  // Negative classes are absent from the target altogether (zero pixels, so the
  // all-zero supervision is exact) but present somewhere else in the same sheet.
  std::vector<ClassId> negatives;
  for (ClassId c : cfg.classes) {
    if (index.pixel_count(target, c) != 0) continue;
    if (index.patches_with(t.sheet_id, c).empty()) continue;
    negatives.push_back(c);
  }
  if (negatives.empty()) return std::nullopt;
  const ClassId c = negatives[uniform_index(rng, negatives.size())];
  const std::size_t source = pick_source(index, t.sheet_id, c, std::nullopt, rng);
  return make_pair(patches, target, source, c, Polarity::negative);
}

void validate(const datapipe::ClassIndex& index, const std::vector<Patch>& patches, const SamplerConfig& cfg) {
  if (cfg.p < 0.0 || cfg.p > 1.0) throw std::invalid_argument("sampler: p must lie in [0, 1]");
  if (cfg.classes.empty()) throw std::invalid_argument("sampler: class universe is empty");
  if (patches.empty()) throw UnsatisfiableDataset("sampler: no patches to sample from");
  if (index.size() != patches.size()) throw std::invalid_argument("sampler: index was built over a different patch list");
}

}  // namespace

PairSample sample_pair(const datapipe::ClassIndex& index, const std::vector<Patch>& patches, const SamplerConfig& cfg,
                       std::mt19937_64& rng) {
  validate(index, patches, cfg);
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    const std::size_t target = uniform_index(rng, patches.size());
    if (auto pair = try_target(index, patches, cfg, rng, target)) return std::move(*pair);
  }
  throw UnsatisfiableDataset("sampler: no valid pair after " + std::to_string(cfg.max_retries + 1) +
                             " target draws; sheets lack absent classes to serve as negatives");
}

PairSampler::PairSampler(const datapipe::ClassIndex& index, const std::vector<Patch>& patches, SamplerConfig cfg)
    : index_(index), patches_(patches), cfg_(std::move(cfg)), rng_(cfg_.seed) {
  validate(index_, patches_, cfg_);
}

PairSample PairSampler::sample() { return sample_pair(index_, patches_, cfg_, rng_); }

std::vector<PairSample> PairSampler::sample_many(int n) {
  std::vector<PairSample> out;
  out.reserve(static_cast<std::size_t>(std::max(n, 0)));
  for (int i = 0; i < n; ++i) out.push_back(sample());
  return out;
}

std::vector<PairSample> make_epoch(const datapipe::ClassIndex& index, const std::vector<Patch>& patches,
                                   const SamplerConfig& cfg, int n_pairs) {
  if (n_pairs < 1) throw std::invalid_argument("make_epoch: n_pairs must be >= 1");
  PairSampler sampler(index, patches, cfg);
  return sampler.sample_many(n_pairs);
}

std::string check_invariants(const PairSample& pair, const datapipe::ClassIndex& index,
                             const std::vector<Patch>& patches, const std::vector<ClassId>& classes) {
  const Patch& t = patches.at(pair.target);
  const Patch& s = patches.at(pair.source);
  if (std::find(classes.begin(), classes.end(), pair.class_x) == classes.end()) return "class outside the universe";
  if (t.sheet_id != s.sheet_id) return "source and target come from different sheets";
  const bool in_target = index.classes_of(pair.target).count(pair.class_x) > 0;
  if (!index.classes_of(pair.source).count(pair.class_x)) return "class absent from source";
  if (count_foreground(pair.source_mask) < static_cast<std::size_t>(index.min_pixels())) {
    return "source mask below min_pixels";
  }
  if (pair.source_mask != class_mask(s.label, pair.class_x)) return "source mask is not the class indicator";
  if (pair.polarity == Polarity::positive) {
    if (!in_target) return "positive pair whose class is not in C_T";
    if (pair.target_mask != class_mask(t.label, pair.class_x)) return "positive target mask is not the class indicator";
  } else {
    if (in_target) return "negative pair whose class is in C_T";
    if (count_foreground(pair.target_mask) != 0) return "negative pair with nonzero target mask";
  }
  return {};
}

void write_pairs_jsonl(const std::filesystem::path& path, const std::vector<PairSample>& pairs,
                       const std::vector<Patch>& patches) {
  std::ostringstream out;
  for (const auto& p : pairs) {
    const nlohmann::json line = {{"target_patch_id", patches[p.target].patch_id},
                                 {"source_patch_id", patches[p.source].patch_id},
                                 {"class_id", p.class_x},
                                 {"polarity", p.polarity == Polarity::positive ? "positive" : "negative"}};
    out << line.dump() << "\n";
  }
  write_file(path, out.str());
}

}  // namespace smol::sampler
