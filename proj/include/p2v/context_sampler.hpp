#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "p2v/ingest.hpp"
#include "p2v/random.hpp"

namespace p2v {

struct Candidate {
  std::size_t index = 0;  // into the training instance list
  double distance = 0.0;

  bool operator==(const Candidate&) const = default;
};

struct SamplerParams {
  int k_close = 10;
  int k_similar = 10;
  int grid_steps = 36;
  double refine_tol = 1e-3;
};

// Per-anchor candidate lists, ascending by distance (ties by index).
//   close:   centroid distance, same scene only, k_close nearest
//   similar: rotation-optimized chamfer over the whole training set
struct SimilarityCache {
  SamplerParams params;
  std::uint64_t content_hash = 0;
  std::vector<std::vector<Candidate>> close;
  std::vector<std::vector<Candidate>> similar;

  std::size_t size() const { return close.size(); }
};

struct ContextQuadruple {
  std::size_t anchor = 0;
  std::size_t close = 0;
  std::size_t similar = 0;
  std::size_t negative = 0;

  bool operator==(const ContextQuadruple&) const = default;
};

// Hash of everything the cache depends on: scene ids, centroids, point
// coordinates and the sampler parameters. Labels are not part of it.
std::uint64_t cache_content_hash(std::span<const InstanceRecord> instances, const SamplerParams& params);

// Rows are independent; `workers` > 1 fans anchors out over threads.
SimilarityCache build_cache(std::span<const InstanceRecord> instances, const SamplerParams& params = {},
                            int workers = 1);

void save_cache(const std::filesystem::path& path, const SimilarityCache& cache);
// Returns nullopt when the file is missing, unreadable or of another version.
std::optional<SimilarityCache> load_cache(const std::filesystem::path& path);

// Reuses `path` when its content hash matches, otherwise rebuilds and rewrites it.
SimilarityCache load_or_build_cache(const std::filesystem::path& path, std::span<const InstanceRecord> instances,
                                    const SamplerParams& params = {}, int workers = 1);

inline constexpr double kInverseWeightEpsilon = 1e-6;

// Draws candidate i with probability proportional to 1 / (d_i + 1e-6) by
// inverting the cumulative weights with one uniform variate.
std::size_t inverse_transform_sample(std::span<const Candidate> candidates, Rng& rng);

// Anchor uniform over instances with a non-empty close list; similar drawn
// first, close drawn excluding it, negative uniform over the rest.
ContextQuadruple sample_quadruple(const SimilarityCache& cache, Rng& rng, int max_anchor_retries = 1000);

}  // namespace p2v
