#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "p2v/geometry.hpp"
#include "p2v/model.hpp"

namespace p2v {

// Embeddings stacked one per row.
using EmbeddingMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct KMeansResult {
  std::vector<int> assignments;
  EmbeddingMatrix centers;
  double objective = 0.0;  // sum of squared distances to assigned centers
  int iterations = 0;
};

// Lloyd iterations from k-means++ seeding until the assignment is a fixpoint
// or 300 iterations. Empty clusters are re-seeded with the point farthest
// from its center.
KMeansResult kmeans(const EmbeddingMatrix& x, int k, std::uint64_t seed, int max_iterations = 300);

// Best of `restarts` runs by objective, restart r seeded with derive(seed, r).
KMeansResult kmeans_best_of(const EmbeddingMatrix& x, int k, std::uint64_t seed, int restarts = 10);

double kmeans_objective(const EmbeddingMatrix& x, std::span<const int> assignments);

// Hubert-Arabie adjusted Rand index from the pair-counting contingency table.
double adjusted_rand_index(std::span<const int> a, std::span<const int> b);
double adjusted_rand_index(std::span<const std::string> a, std::span<const std::string> b);

struct ClusterReport {
  int k = 0;
  std::vector<int> assignments;
  double ari = 0.0;
  double objective = 0.0;
};

// k = number of distinct labels; ARI of the best-of-`restarts` clustering.
// Throws InvalidInput if any label is missing.
ClusterReport ari_km_report(const EmbeddingMatrix& x, std::span<const std::optional<std::string>> labels,
                            std::uint64_t seed, int restarts = 10);

struct DistanceMatrixReport {
  std::vector<std::string> classes;
  // Averaged cosine distance (1 - u.v) per class pair; the diagonal excludes
  // self pairs and is empty for classes with a single instance.
  std::vector<std::vector<std::optional<double>>> matrix;
  double intra_mean = 0.0;  // mean of the available diagonal entries
  double inter_mean = 0.0;  // mean of the off-diagonal entries (i < j)
};

// `class_subset` empty -> all classes, sorted.
DistanceMatrixReport cosine_distance_matrix(const EmbeddingMatrix& x,
                                            std::span<const std::optional<std::string>> labels,
                                            std::span<const std::string> class_subset = {});

// Mean chamfer distance between each cloud and its reconstruction.
double acd(std::span<const PointCloud> clouds, const std::function<PointCloud(const PointCloud&)>& reconstruct);
double acd(const Model& model, std::span<const PointCloud> clouds);

struct PcaResult {
  EmbeddingMatrix projected;   // n x out_dim
  EmbeddingMatrix components;  // out_dim x d, unit rows, largest-|.| entry positive
  Eigen::RowVectorXd mean;
  std::vector<double> explained_ratio;  // descending, sums to <= 1
  int effective_dim = 0;                // components with non-negligible variance
};

PcaResult pca_project(const EmbeddingMatrix& x, int out_dim);

struct Heatmap {
  std::vector<int> angle_counts;  // bins over [-pi, pi)
  std::vector<std::vector<int>> grid;  // grid[row][col] over the projected bounding box
  double x_min = 0, x_max = 0, y_min = 0, y_max = 0;
};

// Projects to 2D; the angle histogram uses the projections renormalized onto
// the unit circle, the grid uses the raw projections.
Heatmap pca_heatmap(const EmbeddingMatrix& x, int angle_bins = 36, int grid_bins = 20);

struct InterpolationStep {
  double t = 0.0;
  std::optional<PointCloud> cloud;  // empty when the blended code is the zero vector
  std::string note;
};

// e(t) = normalize((1-t) e_a + t e_b) decoded for t = 0, 1/(steps-1), ..., 1.
// The endpoints use e_a and e_b unchanged.
std::vector<InterpolationStep> interpolate(const Model& model, const Embedding& e_a, const Embedding& e_b, int steps);

struct Neighbor {
  std::string id;
  double distance = 0.0;
};

// Ascending cosine distance to `query_id`, query excluded, ties broken by id.
std::vector<Neighbor> query_similar(std::span<const std::string> ids, const EmbeddingMatrix& x,
                                    const std::string& query_id, int top_k);

nlohmann::json to_json(const ClusterReport& r);
nlohmann::json to_json(const DistanceMatrixReport& r);
nlohmann::json to_json(const PcaResult& r);

}  // namespace p2v
