#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "p2v/errors.hpp"
#include "p2v/geometry.hpp"
#include "test_support.hpp"

using namespace p2v;

TEST_CASE("chamfer matches the pairwise oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const auto na = 4 + static_cast<Eigen::Index>(uniform_index(rng, 61));
    const auto nb = 4 + static_cast<Eigen::Index>(uniform_index(rng, 61));
    const PointCloud a = test::random_cloud(rng, na);
    const PointCloud b = test::random_cloud(rng, nb);
    const double want = oracle::chamfer(a, b);
    CHECK(chamfer_distance(a, b) == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("chamfer is symmetric and zero on identical sets") {
  Rng rng(3);
  const PointCloud a = test::random_cloud(rng, 17);
  const PointCloud b = test::random_cloud(rng, 9);
  CHECK(chamfer_distance(a, b) == doctest::Approx(chamfer_distance(b, a)).epsilon(1e-14));
  CHECK(chamfer_distance(a, a) == 0.0);
}

TEST_CASE("chamfer of two single points is twice the squared distance") {
  PointCloud a(1, 3), b(1, 3);
  a << 0, 0, 0;
  b << 1, 2, 2;
  CHECK(chamfer_distance(a, b) == doctest::Approx(18.0));
}

TEST_CASE("chamfer rejects empty and non-finite clouds") {
  PointCloud a(3, 3);
  a.setZero();
  PointCloud empty(0, 3);
  CHECK_THROWS_AS(chamfer_distance(a, empty), InvalidInput);
  CHECK_THROWS_AS(chamfer_distance(empty, a), InvalidInput);
  PointCloud bad = a;
  bad(1, 2) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(chamfer_distance(a, bad), InvalidInput);
  bad(1, 2) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(chamfer_distance(bad, a), InvalidInput);
}

TEST_CASE("chamfer gradient agrees with central differences") {
  Rng rng(5);
  const PointCloud a = test::random_cloud(rng, 12);
  PointCloud b = test::random_cloud(rng, 10);
  const auto g = chamfer_distance_grad(a, b);
  CHECK(g.value == doctest::Approx(oracle::chamfer(a, b)).epsilon(1e-12));
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < b.rows(); ++i) {
    for (int k = 0; k < 3; ++k) {
      const double keep = b(i, k);
      b(i, k) = keep + h;
      const double up = oracle::chamfer(a, b);
      b(i, k) = keep - h;
      const double down = oracle::chamfer(a, b);
      b(i, k) = keep;
      CHECK(g.d_b(i, k) == doctest::Approx((up - down) / (2 * h)).epsilon(1e-5));
    }
  }
}

TEST_CASE("rotate_z matches the explicit rotation and preserves z") {
  Rng rng(8);
  const PointCloud a = test::random_cloud(rng, 20);
  const double theta = 0.7;
  const PointCloud r = rotate_z(a, theta);
  const PointCloud o = oracle::rotate(a, theta);
  CHECK((r - o).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((r.col(2) - a.col(2)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("center returns a zero-mean cloud and the removed centroid") {
  Rng rng(9);
  PointCloud a = test::random_cloud(rng, 31);
  a.rowwise() += Eigen::RowVector3d(4, -2, 7);
  const auto c = center(a);
  CHECK(c.cloud.colwise().mean().norm() < 1e-12);
  Vec3 mean = Vec3::Zero();
  for (Eigen::Index i = 0; i < a.rows(); ++i) mean += a.row(i).transpose();
  mean /= static_cast<double>(a.rows());
  CHECK((c.centroid - mean).norm() < 1e-12);
  PointCloud back = c.cloud;
  back.rowwise() += c.centroid.transpose();
  CHECK((back - a).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("rotation-optimized chamfer recovers a known rotation") {
  Rng rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    const PointCloud a = test::random_centered_cloud(rng, 24);
    const double theta = uniform(rng, 0.0, 2 * M_PI);
    const PointCloud b = oracle::rotate(a, theta);
    const auto m = rotation_optimized_chamfer(a, b);
    CHECK(m.distance <= 1e-6);
    CHECK(m.angle >= 0.0);
    CHECK(m.angle < 2 * M_PI);
    double diff = std::fmod(std::abs(m.angle - theta), 2 * M_PI);
    diff = std::min(diff, 2 * M_PI - diff);
    CHECK(diff < 1e-3);
  }
}

TEST_CASE("rotation-optimized chamfer: quarter-turn example") {
  PointCloud a(4, 3);
  a << 1, 0, 0, 0, 2, 0, -3, 0, 0, 0, -4, 0;
  const auto m = rotation_optimized_chamfer(a, oracle::rotate(a, M_PI / 3));
  CHECK(m.distance < 1e-9);
  CHECK(m.angle == doctest::Approx(M_PI / 3).epsilon(1e-3));
}

TEST_CASE("rotation-optimized chamfer never exceeds the grid minimum or the unrotated distance") {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const PointCloud a = test::random_centered_cloud(rng, 15);
    const PointCloud b = test::random_centered_cloud(rng, 12);
    const auto m = rotation_optimized_chamfer(a, b);
    CHECK(m.distance <= oracle::grid_min_chamfer(a, b, 36) + 1e-15);
    CHECK(m.distance <= oracle::chamfer(a, b) + 1e-15);
    CHECK(m.distance == doctest::Approx(oracle::chamfer(oracle::rotate(a, m.angle), b)).epsilon(1e-9));
  }
}

TEST_CASE("rotation-optimized chamfer is invariant to rotating its first argument") {
  Rng rng(6);
  const PointCloud a = test::random_centered_cloud(rng, 15);
  const PointCloud b = test::random_centered_cloud(rng, 15);
  // Rotating by whole grid steps leaves the grid search unchanged.
  const auto m0 = rotation_optimized_chamfer(a, b);
  const auto m1 = rotation_optimized_chamfer(oracle::rotate(a, 2 * M_PI * 5 / 36), b);
  CHECK(m1.distance == doctest::Approx(m0.distance).epsilon(1e-6));
}

TEST_CASE("rotation-optimized chamfer rejects a degenerate grid") {
  PointCloud a(2, 3);
  a.setOnes();
  CHECK_THROWS_AS(rotation_optimized_chamfer(a, a, 2), InvalidInput);
}

TEST_CASE("triangle area") {
  CHECK(triangle_area(Vec3(0, 0, 0), Vec3(2, 0, 0), Vec3(0, 3, 0)) == doctest::Approx(3.0));
  CHECK(triangle_area(Vec3(0, 0, 0), Vec3(1, 1, 1), Vec3(2, 2, 2)) == 0.0);
}

namespace {

TriangleMesh two_triangle_mesh() {
  // Triangle 0 has area 0.5, triangle 1 has area 1.5, triangle 2 is degenerate,
  // triangle 3 belongs to another instance.
  TriangleMesh m;
  m.vertices.resize(9, 3);
  m.vertices << 0, 0, 0, 1, 0, 0, 0, 1, 0,  //
      5, 0, 1, 8, 0, 1, 5, 1, 1,             //
      9, 9, 9, 9, 9, 9, 7, 7, 7;
  m.faces = {{0, 1, 2}, {3, 4, 5}, {6, 7, 8}, {0, 3, 6}};
  m.face_instance_ids = {"a", "a", "a", "b"};
  return m;
}

}  // namespace

TEST_CASE("surface samples lie on the instance's faces with area-proportional frequency") {
  const TriangleMesh m = two_triangle_mesh();
  const std::size_t n = 20000;
  const PointCloud s = sample_surface(m, "a", n, 77);
  REQUIRE(static_cast<std::size_t>(s.rows()) == n);
  std::vector<long long> counts(2, 0);
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const Vec3 p = s.row(i).transpose();
    const bool in0 = oracle::in_triangle(p, m.vertices.row(0), m.vertices.row(1), m.vertices.row(2));
    const bool in1 = oracle::in_triangle(p, m.vertices.row(3), m.vertices.row(4), m.vertices.row(5));
    REQUIRE((in0 || in1));
    ++counts[in0 ? 0 : 1];
  }
  CHECK(oracle::chi_square(counts, {0.25, 0.75}) < oracle::chi_square_critical_001(1));
}

TEST_CASE("surface samples are uniform within a triangle") {
  // Split the unit right triangle into 4 congruent sub-triangles via edge midpoints.
  TriangleMesh m;
  m.vertices.resize(3, 3);
  m.vertices << 0, 0, 0, 1, 0, 0, 0, 1, 0;
  m.faces = {{0, 1, 2}};
  m.face_instance_ids = {"t"};
  const PointCloud s = sample_surface(m, "t", 40000, 5);
  std::vector<long long> counts(4, 0);
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double x = s(i, 0), y = s(i, 1);
    int cell;
    if (x >= 0.5) cell = 0;
    else if (y >= 0.5) cell = 1;
    else if (x + y < 0.5) cell = 2;
    else cell = 3;
    ++counts[cell];
  }
  CHECK(oracle::chi_square(counts, {0.25, 0.25, 0.25, 0.25}) < oracle::chi_square_critical_001(3));
}

TEST_CASE("surface sampling is seed-deterministic") {
  const TriangleMesh m = two_triangle_mesh();
  const PointCloud a = sample_surface(m, "a", 50, 3);
  const PointCloud b = sample_surface(m, "a", 50, 3);
  const PointCloud c = sample_surface(m, "a", 50, 4);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a - c).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("surface sampling errors") {
  TriangleMesh m = two_triangle_mesh();
  CHECK_THROWS_AS(sample_surface(m, "missing", 10, 0), InvalidInput);
  m.face_instance_ids[0] = "z";
  m.face_instance_ids[1] = "z";
  // Only the degenerate face is left for "a".
  CHECK_THROWS_AS(sample_surface(m, "a", 10, 0), InvalidInput);
  TriangleMesh bad = two_triangle_mesh();
  bad.faces[0][1] = 42;
  CHECK_THROWS_AS(bad.validate(), InvalidInput);
}
