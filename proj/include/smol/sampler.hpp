// SPDX-License-Identifier: Apache-2.0
//
// Source/target pair sampling. A target patch is drawn uniformly; with
// probability p (and only when the target contains a class) the prompt class
// is one of the target's classes (positive pair), otherwise it is a class
// absent from the target (negative pair). The source patch always comes from
// the target's own sheet so both share one symbolisation.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "smol/datapipe.hpp"

namespace smol::sampler {

using datapipe::ClassId;
using datapipe::Patch;

enum class Polarity { positive, negative };

struct SamplerConfig {
  double p = 0.7;
  std::uint64_t seed = 0;
  std::vector<ClassId> classes;
  int max_retries = 1000;
  /// When set, positive pairs only use this class (few-shot adaptation).
  std::optional<ClassId> positive_class;
};

struct PairSample {
  /// Positions into the patch list the sampler was built over.
  std::size_t target = 0;
  std::size_t source = 0;
  ClassId class_x = 0;
  Polarity polarity = Polarity::negative;
  BinaryMask source_mask;
  BinaryMask target_mask;
};

class UnsatisfiableDataset : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Deterministic stream of pairs over one patch list. Not thread-safe.
class PairSampler {
 public:
  PairSampler(const datapipe::ClassIndex& index, const std::vector<Patch>& patches, SamplerConfig cfg);

  PairSample sample();
  std::vector<PairSample> sample_many(int n);

  const SamplerConfig& config() const { return cfg_; }

 private:
  const datapipe::ClassIndex& index_;
  const std::vector<Patch>& patches_;
  SamplerConfig cfg_;
  std::mt19937_64 rng_;
};

/// One draw with an externally owned generator.
PairSample sample_pair(const datapipe::ClassIndex& index, const std::vector<Patch>& patches,
                       const SamplerConfig& cfg, std::mt19937_64& rng);

/// `n_pairs` draws from a fresh stream seeded by cfg.seed.
std::vector<PairSample> make_epoch(const datapipe::ClassIndex& index, const std::vector<Patch>& patches,
                                   const SamplerConfig& cfg, int n_pairs);

/// Returns the violated invariant, or an empty string when the pair is valid.
std::string check_invariants(const PairSample& pair, const datapipe::ClassIndex& index,
                             const std::vector<Patch>& patches, const std::vector<ClassId>& classes);

/// pairs.jsonl lines {target_patch_id, source_patch_id, class_id, polarity}.
void write_pairs_jsonl(const std::filesystem::path& path, const std::vector<PairSample>& pairs,
                       const std::vector<Patch>& patches);

}  // namespace smol::sampler
