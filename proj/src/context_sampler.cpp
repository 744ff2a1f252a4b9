#include "p2v/context_sampler.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "p2v/errors.hpp"
#include "p2v/hash.hpp"
#include "p2v/parallel.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace p2v {

namespace {

constexpr int kCacheVersion = 1;

void sort_candidates(std::vector<Candidate>& v) {
  std::sort(v.begin(), v.end(), [](const Candidate& a, const Candidate& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.index < b.index;
  });
}

void build_row(std::span<const InstanceRecord> inst, const SamplerParams& p, std::size_t a,
               SimilarityCache& cache) {
  std::vector<Candidate> close, similar;
  for (std::size_t j = 0; j < inst.size(); ++j) {
    if (j == a) continue;
    if (inst[j].scene_id == inst[a].scene_id)
      close.push_back({j, (inst[j].centroid - inst[a].centroid).norm()});
    similar.push_back({j, rotation_optimized_chamfer(inst[a].cloud, inst[j].cloud, p.grid_steps, p.refine_tol).distance});
  }
  sort_candidates(close);
  sort_candidates(similar);
  if (close.size() > static_cast<std::size_t>(p.k_close)) close.resize(static_cast<std::size_t>(p.k_close));
  if (similar.size() > static_cast<std::size_t>(p.k_similar)) similar.resize(static_cast<std::size_t>(p.k_similar));
  cache.close[a] = std::move(close);
  cache.similar[a] = std::move(similar);
}

json candidates_to_json(const std::vector<std::vector<Candidate>>& rows) {
  json out = json::array();
  for (const auto& row : rows) {
    json r = json::array();
    for (const auto& c : row) r.push_back(json::array({c.index, c.distance}));
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<std::vector<Candidate>> candidates_from_json(const json& j) {
  std::vector<std::vector<Candidate>> out;
  for (const auto& r : j) {
    std::vector<Candidate> row;
    for (const auto& c : r) row.push_back({c.at(0).get<std::size_t>(), c.at(1).get<double>()});
    out.push_back(std::move(row));
  }
  return out;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::uint64_t cache_content_hash(std::span<const InstanceRecord> instances, const SamplerParams& params) {
  Fnv1a h;
  h.update_pod(kCacheVersion);
  h.update_pod(params.k_close);
  h.update_pod(params.k_similar);
  h.update_pod(params.grid_steps);
  h.update_pod(params.refine_tol);
  h.update_pod(static_cast<std::uint64_t>(instances.size()));
  for (const auto& r : instances) {
    h.update(r.scene_id);
    h.update(r.centroid.data(), 3 * sizeof(double));
    h.update_pod(static_cast<std::uint64_t>(r.cloud.rows()));
    h.update(r.cloud.data(), static_cast<std::size_t>(r.cloud.size()) * sizeof(double));
  }
  return h.digest();
}

SimilarityCache build_cache(std::span<const InstanceRecord> instances, const SamplerParams& params, int workers) {
  if (instances.size() < 2) throw InvalidInput("build_cache: need at least 2 training instances");
  if (params.k_close < 1 || params.k_similar < 1) throw InvalidInput("build_cache: k_close and k_similar must be >= 1");
  for (const auto& r : instances) require_valid_cloud(r.cloud, "build_cache");

  SimilarityCache cache;
  cache.params = params;
  cache.content_hash = cache_content_hash(instances, params);
  cache.close.resize(instances.size());
  cache.similar.resize(instances.size());

  parallel_for(instances.size(), workers, [&](std::size_t a) { build_row(instances, params, a, cache); });
  return cache;
}

void save_cache(const fs::path& path, const SimilarityCache& cache) {
  json j;
  j["format"] = "p2v-similarity-cache";
  j["version"] = kCacheVersion;
  j["content_hash"] = hex64(cache.content_hash);
  j["k_close"] = cache.params.k_close;
  j["k_similar"] = cache.params.k_similar;
  j["grid_steps"] = cache.params.grid_steps;
  j["refine_tol"] = cache.params.refine_tol;
  j["close"] = candidates_to_json(cache.close);
  j["similar"] = candidates_to_json(cache.similar);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw LoadError(path.string() + ": cannot write cache");
  out << j.dump() << '\n';
}

std::optional<SimilarityCache> load_cache(const fs::path& path) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  try {
    const json j = json::parse(in);
    if (j.at("format") != "p2v-similarity-cache" || j.at("version") != kCacheVersion) return std::nullopt;
    SimilarityCache c;
    c.content_hash = std::stoull(j.at("content_hash").get<std::string>(), nullptr, 16);
    c.params.k_close = j.at("k_close");
    c.params.k_similar = j.at("k_similar");
    c.params.grid_steps = j.at("grid_steps");
    c.params.refine_tol = j.at("refine_tol");
    c.close = candidates_from_json(j.at("close"));
    c.similar = candidates_from_json(j.at("similar"));
    if (c.close.size() != c.similar.size()) return std::nullopt;
    return c;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

SimilarityCache load_or_build_cache(const fs::path& path, std::span<const InstanceRecord> instances,
                                    const SamplerParams& params, int workers) {
  const std::uint64_t want = cache_content_hash(instances, params);
  if (auto cached = load_cache(path); cached && cached->content_hash == want && cached->size() == instances.size())
    return *cached;
  auto cache = build_cache(instances, params, workers);
  save_cache(path, cache);
  return cache;
}

std::size_t inverse_transform_sample(std::span<const Candidate> candidates, Rng& rng) {
  if (candidates.empty()) throw InvalidInput("inverse_transform_sample: empty candidate list");
  std::vector<double> cdf;
  cdf.reserve(candidates.size());
  double total = 0.0;
  for (const auto& c : candidates) {
    if (!(c.distance >= 0.0)) throw InvalidInput("inverse_transform_sample: negative or NaN distance");
    total += 1.0 / (c.distance + kInverseWeightEpsilon);
    cdf.push_back(total);
  }
  const double u = uniform01(rng) * total;
  auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  if (it == cdf.end()) --it;
  return candidates[static_cast<std::size_t>(it - cdf.begin())].index;
}

ContextQuadruple sample_quadruple(const SimilarityCache& cache, Rng& rng, int max_anchor_retries) {
  const std::size_t m = cache.size();
  if (m < 4) throw InvalidInput("sample_quadruple: need at least 4 training instances");

  for (int attempt = 0; attempt <= max_anchor_retries; ++attempt) {
    ContextQuadruple q;
    q.anchor = static_cast<std::size_t>(uniform_index(rng, m));
    const auto& close = cache.close[q.anchor];
    const auto& similar = cache.similar[q.anchor];
    if (close.empty() || similar.empty()) continue;

    q.similar = inverse_transform_sample(similar, rng);
    std::vector<Candidate> close_rest;
    for (const auto& c : close)
      if (c.index != q.similar) close_rest.push_back(c);
    if (close_rest.empty()) continue;
    q.close = inverse_transform_sample(close_rest, rng);

    std::array<std::size_t, 3> taken{q.anchor, q.close, q.similar};
    std::sort(taken.begin(), taken.end());
    std::size_t k = static_cast<std::size_t>(uniform_index(rng, m - 3));
    for (auto t : taken)
      if (k >= t) ++k;
    q.negative = k;
    return q;
  }
  throw InvalidInput("sample_quadruple: no anchor with usable close candidates after retries");
}

}  // namespace p2v
