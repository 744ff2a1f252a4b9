#include "p2v/eval.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "p2v/errors.hpp"
#include "p2v/random.hpp"

using nlohmann::json;

namespace p2v {

namespace {

using Index = Eigen::Index;

double sq_dist(const EmbeddingMatrix& x, Index i, const EmbeddingMatrix& c, Index j) {
  return (x.row(i) - c.row(j)).squaredNorm();
}

EmbeddingMatrix seed_plus_plus(const EmbeddingMatrix& x, int k, Rng& rng) {
  const Index n = x.rows();
  EmbeddingMatrix centers(k, x.cols());
  centers.row(0) = x.row(static_cast<Index>(uniform_index(rng, static_cast<std::uint64_t>(n))));
  std::vector<double> d2(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) d2[i] = sq_dist(x, i, centers, 0);
  for (int c = 1; c < k; ++c) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    Index pick = 0;
    if (total > 0.0) {
      const double u = uniform01(rng) * total;
      double acc = 0.0;
      pick = n - 1;
      for (Index i = 0; i < n; ++i) {
        acc += d2[i];
        if (u < acc && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<Index>(uniform_index(rng, static_cast<std::uint64_t>(n)));
    }
    centers.row(c) = x.row(pick);
    for (Index i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq_dist(x, i, centers, c));
  }
  return centers;
}

__int128 choose2(long long v) { return static_cast<__int128>(v) * (v - 1) / 2; }

std::vector<int> encode_labels(std::span<const std::string> labels) {
  std::map<std::string, int> ids;
  for (const auto& l : labels) ids.emplace(l, 0);
  int next = 0;
  for (auto& [name, id] : ids) id = next++;
  std::vector<int> out;
  out.reserve(labels.size());
  for (const auto& l : labels) out.push_back(ids.at(l));
  return out;
}

void fix_sign(Eigen::Ref<Eigen::RowVectorXd> v) {
  Index arg = 0;
  for (Index i = 1; i < v.size(); ++i)
    if (std::abs(v(i)) > std::abs(v(arg))) arg = i;
  if (v(arg) < 0.0) v = -v;
}

}  // namespace

double kmeans_objective(const EmbeddingMatrix& x, std::span<const int> assignments) {
  if (static_cast<Index>(assignments.size()) != x.rows()) throw InvalidInput("kmeans_objective: size mismatch");
  const int k = assignments.empty() ? 0 : *std::max_element(assignments.begin(), assignments.end()) + 1;
  EmbeddingMatrix sums = EmbeddingMatrix::Zero(k, x.cols());
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (Index i = 0; i < x.rows(); ++i) {
    sums.row(assignments[i]) += x.row(i);
    ++counts[assignments[i]];
  }
  for (int c = 0; c < k; ++c)
    if (counts[c] > 0) sums.row(c) /= counts[c];
  double obj = 0.0;
  for (Index i = 0; i < x.rows(); ++i) obj += sq_dist(x, i, sums, assignments[i]);
  return obj;
}

KMeansResult kmeans(const EmbeddingMatrix& x, int k, std::uint64_t seed, int max_iterations) {
  const Index n = x.rows();
  if (k < 1) throw InvalidInput("kmeans: k must be >= 1");
  if (k > n) throw InvalidInput("kmeans: k = " + std::to_string(k) + " exceeds number of points " + std::to_string(n));
  if (!x.allFinite()) throw InvalidInput("kmeans: non-finite input");

  Rng rng(seed);
  KMeansResult r;
  r.centers = seed_plus_plus(x, k, rng);
  r.assignments.assign(static_cast<std::size_t>(n), -1);
  std::vector<double> best_d(static_cast<std::size_t>(n));

  for (r.iterations = 0; r.iterations < max_iterations; ++r.iterations) {
    bool changed = false;
    for (Index i = 0; i < n; ++i) {
      int best = 0;
      double bd = sq_dist(x, i, r.centers, 0);
      for (int c = 1; c < k; ++c) {
        const double d = sq_dist(x, i, r.centers, c);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      best_d[i] = bd;
      if (r.assignments[i] != best) {
        r.assignments[i] = best;
        changed = true;
      }
    }
    if (!changed) break;

    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (int a : r.assignments) ++counts[a];
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      Index far = -1;
      for (Index i = 0; i < n; ++i)
        if (counts[r.assignments[i]] > 1 && (far < 0 || best_d[i] > best_d[far])) far = i;
      --counts[r.assignments[far]];
      r.assignments[far] = c;
      counts[c] = 1;
      best_d[far] = 0.0;
    }
    r.centers.setZero();
    for (Index i = 0; i < n; ++i) r.centers.row(r.assignments[i]) += x.row(i);
    for (int c = 0; c < k; ++c) r.centers.row(c) /= counts[c];
  }
  r.objective = 0.0;
  for (Index i = 0; i < n; ++i) r.objective += sq_dist(x, i, r.centers, r.assignments[i]);
  return r;
}

KMeansResult kmeans_best_of(const EmbeddingMatrix& x, int k, std::uint64_t seed, int restarts) {
  if (restarts < 1) throw InvalidInput("kmeans_best_of: restarts must be >= 1");
  KMeansResult best;
  for (int r = 0; r < restarts; ++r) {
    KMeansResult cur = kmeans(x, k, derive_rng(seed, static_cast<std::uint64_t>(r))());
    if (r == 0 || cur.objective < best.objective) best = std::move(cur);
  }
  return best;
}

double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw InvalidInput("adjusted_rand_index: label lists differ in length");
  if (a.size() < 2) throw InvalidInput("adjusted_rand_index: need at least 2 labels");
  std::map<std::pair<int, int>, long long> cells;
  std::map<int, long long> rows, cols;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++cells[{a[i], b[i]}];
    ++rows[a[i]];
    ++cols[b[i]];
  }
  __int128 index = 0, sa = 0, sb = 0;
  for (const auto& [key, v] : cells) index += choose2(v);
  for (const auto& [key, v] : rows) sa += choose2(v);
  for (const auto& [key, v] : cols) sb += choose2(v);
  const __int128 pairs = choose2(static_cast<long long>(a.size()));
  // ARI = (index - sa*sb/pairs) / ((sa+sb)/2 - sa*sb/pairs), scaled by 2*pairs.
  const __int128 num = 2 * (index * pairs - sa * sb);
  const __int128 den = (sa + sb) * pairs - 2 * sa * sb;
  if (den == 0) return 1.0;
  return static_cast<double>(num) / static_cast<double>(den);
}

double adjusted_rand_index(std::span<const std::string> a, std::span<const std::string> b) {
  const auto ia = encode_labels(a);
  const auto ib = encode_labels(b);
  return adjusted_rand_index(std::span<const int>(ia), std::span<const int>(ib));
}

ClusterReport ari_km_report(const EmbeddingMatrix& x, std::span<const std::optional<std::string>> labels,
                            std::uint64_t seed, int restarts) {
  if (static_cast<Index>(labels.size()) != x.rows()) throw InvalidInput("ari_km_report: label count mismatch");
  std::vector<std::string> names;
  for (const auto& l : labels) {
    if (!l) throw InvalidInput("ari_km_report: instance without a label");
    names.push_back(*l);
  }
  const auto truth = encode_labels(names);
  ClusterReport r;
  r.k = truth.empty() ? 0 : *std::max_element(truth.begin(), truth.end()) + 1;
  auto km = kmeans_best_of(x, r.k, seed, restarts);
  r.assignments = std::move(km.assignments);
  r.objective = km.objective;
  r.ari = adjusted_rand_index(std::span<const int>(r.assignments), std::span<const int>(truth));
  return r;
}

DistanceMatrixReport cosine_distance_matrix(const EmbeddingMatrix& x, std::span<const std::optional<std::string>> labels,
                                            std::span<const std::string> class_subset) {
  if (static_cast<Index>(labels.size()) != x.rows()) throw InvalidInput("cosine_distance_matrix: label count mismatch");
  if (x.rows() < 2) throw InvalidInput("cosine_distance_matrix: need at least 2 instances");
  std::map<std::string, std::vector<Index>> members;
  for (Index i = 0; i < x.rows(); ++i) {
    if (!labels[i]) throw InvalidInput("cosine_distance_matrix: instance without a label");
    members[*labels[i]].push_back(i);
  }
  DistanceMatrixReport r;
  if (class_subset.empty()) {
    for (const auto& [name, idx] : members) r.classes.push_back(name);
  } else {
    for (const auto& c : class_subset) {
      if (!members.contains(c)) throw InvalidInput("cosine_distance_matrix: unknown class '" + c + "'");
      r.classes.push_back(c);
    }
  }
  const std::size_t nc = r.classes.size();
  r.matrix.assign(nc, std::vector<std::optional<double>>(nc));
  double intra_sum = 0.0, inter_sum = 0.0;
  int intra_n = 0, inter_n = 0;
  for (std::size_t a = 0; a < nc; ++a) {
    const auto& ia = members.at(r.classes[a]);
    for (std::size_t b = a; b < nc; ++b) {
      const auto& ib = members.at(r.classes[b]);
      double sum = 0.0;
      long long count = 0;
      for (std::size_t p = 0; p < ia.size(); ++p)
        for (std::size_t q = (a == b ? p + 1 : 0); q < ib.size(); ++q) {
          sum += 1.0 - x.row(ia[p]).dot(x.row(ib[q]));
          ++count;
        }
      if (count == 0) continue;
      const double mean = sum / static_cast<double>(count);
      r.matrix[a][b] = mean;
      r.matrix[b][a] = mean;
      if (a == b) {
        intra_sum += mean;
        ++intra_n;
      } else {
        inter_sum += mean;
        ++inter_n;
      }
    }
  }
  r.intra_mean = intra_n ? intra_sum / intra_n : std::numeric_limits<double>::quiet_NaN();
  r.inter_mean = inter_n ? inter_sum / inter_n : std::numeric_limits<double>::quiet_NaN();
  return r;
}

double acd(std::span<const PointCloud> clouds, const std::function<PointCloud(const PointCloud&)>& reconstruct) {
  if (clouds.empty()) throw InvalidInput("acd: no instances");
  double sum = 0.0;
  for (const auto& c : clouds) sum += chamfer_distance(c, reconstruct(c));
  return sum / static_cast<double>(clouds.size());
}

double acd(const Model& model, std::span<const PointCloud> clouds) {
  return acd(clouds, [&](const PointCloud& c) { return decode(model, encode(model, c, Mode::eval)); });
}

PcaResult pca_project(const EmbeddingMatrix& x, int out_dim) {
  if (out_dim < 1) throw InvalidInput("pca_project: out_dim must be >= 1");
  if (x.rows() < out_dim + 1) throw InvalidInput("pca_project: need at least out_dim + 1 embeddings");
  if (x.cols() < out_dim) throw InvalidInput("pca_project: out_dim exceeds embedding dimension");
  PcaResult r;
  r.mean = x.colwise().mean();
  const EmbeddingMatrix centered = x.rowwise() - r.mean;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::VectorXd vals = eig.eigenvalues().cwiseMax(0.0);  // ascending
  const double total = vals.sum();
  const double top = vals(vals.size() - 1);
  r.components.resize(out_dim, x.cols());
  for (int c = 0; c < out_dim; ++c) {
    const Index col = vals.size() - 1 - c;
    r.components.row(c) = eig.eigenvectors().col(col).transpose();
    fix_sign(r.components.row(c));
    r.explained_ratio.push_back(total > 0.0 ? vals(col) / total : 0.0);
  }
  for (Index i = 0; i < vals.size(); ++i)
    if (top > 0.0 && vals(i) > 1e-12 * top) ++r.effective_dim;
  r.projected = centered * r.components.transpose();
  return r;
}

Heatmap pca_heatmap(const EmbeddingMatrix& x, int angle_bins, int grid_bins) {
  if (angle_bins < 1 || grid_bins < 1) throw InvalidInput("pca_heatmap: bin counts must be >= 1");
  const PcaResult p = pca_project(x, 2);
  Heatmap h;
  h.angle_counts.assign(static_cast<std::size_t>(angle_bins), 0);
  h.grid.assign(static_cast<std::size_t>(grid_bins), std::vector<int>(static_cast<std::size_t>(grid_bins), 0));
  h.x_min = p.projected.col(0).minCoeff();
  h.x_max = p.projected.col(0).maxCoeff();
  h.y_min = p.projected.col(1).minCoeff();
  h.y_max = p.projected.col(1).maxCoeff();
  auto bin = [](double v, double lo, double hi, int n) {
    if (!(hi > lo)) return 0;
    return std::clamp(static_cast<int>((v - lo) / (hi - lo) * n), 0, n - 1);
  };
  for (Index i = 0; i < p.projected.rows(); ++i) {
    const double px = p.projected(i, 0), py = p.projected(i, 1);
    const double norm = std::hypot(px, py);
    if (norm > 0.0) {
      const double angle = std::atan2(py / norm, px / norm);
      ++h.angle_counts[static_cast<std::size_t>(bin(angle, -M_PI, M_PI, angle_bins))];
    }
    ++h.grid[static_cast<std::size_t>(bin(py, h.y_min, h.y_max, grid_bins))]
            [static_cast<std::size_t>(bin(px, h.x_min, h.x_max, grid_bins))];
  }
  return h;
}

std::vector<InterpolationStep> interpolate(const Model& model, const Embedding& e_a, const Embedding& e_b, int steps) {
  if (steps < 2) throw InvalidInput("interpolate: steps must be >= 2");
  if (e_a.size() != e_b.size()) throw InvalidInput("interpolate: embedding dimensions differ");
  std::vector<InterpolationStep> out;
  for (int i = 0; i < steps; ++i) {
    InterpolationStep s;
    s.t = static_cast<double>(i) / (steps - 1);
    if (i == 0) {
      s.cloud = decode(model, e_a);
    } else if (i == steps - 1) {
      s.cloud = decode(model, e_b);
    } else {
      const Eigen::VectorXd blend = (1.0 - s.t) * e_a + s.t * e_b;
      const double norm = blend.norm();
      if (norm < 1e-12) {
        s.note = "blended code is the zero vector (antipodal endpoints); skipped";
      } else {
        s.cloud = decode(model, Embedding(blend / norm));
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Neighbor> query_similar(std::span<const std::string> ids, const EmbeddingMatrix& x,
                                    const std::string& query_id, int top_k) {
  if (static_cast<Index>(ids.size()) != x.rows()) throw InvalidInput("query_similar: id count mismatch");
  if (top_k < 1) throw InvalidInput("query_similar: top_k must be >= 1");
  const auto it = std::find(ids.begin(), ids.end(), query_id);
  if (it == ids.end()) throw InvalidInput("query_similar: unknown id '" + query_id + "'");
  const auto q = static_cast<Index>(it - ids.begin());
  std::vector<Neighbor> out;
  for (Index i = 0; i < x.rows(); ++i) {
    if (i == q) continue;
    out.push_back({ids[static_cast<std::size_t>(i)], 1.0 - x.row(q).dot(x.row(i))});
  }
  std::sort(out.begin(), out.end(), [](const Neighbor& a, const Neighbor& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.id < b.id;
  });
  if (out.size() > static_cast<std::size_t>(top_k)) out.resize(static_cast<std::size_t>(top_k));
  return out;
}

json to_json(const ClusterReport& r) {
  return json{{"k", r.k}, {"ari", r.ari}, {"objective", r.objective}, {"assignments", r.assignments}};
}

json to_json(const DistanceMatrixReport& r) {
  json m = json::array();
  for (const auto& row : r.matrix) {
    json jr = json::array();
    for (const auto& v : row) jr.push_back(v ? json(*v) : json(nullptr));
    m.push_back(std::move(jr));
  }
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  return json{{"classes", r.classes}, {"matrix", m}, {"intra_mean", num(r.intra_mean)}, {"inter_mean", num(r.inter_mean)}};
}

json to_json(const PcaResult& r) {
  return json{{"explained_ratio", r.explained_ratio}, {"effective_dim", r.effective_dim}};
}

}  // namespace p2v
