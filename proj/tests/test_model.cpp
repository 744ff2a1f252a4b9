#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include "model_oracle.hpp"
#include "p2v/checkpoint.hpp"
#include "p2v/errors.hpp"
#include "p2v/model.hpp"
#include "test_support.hpp"

using namespace p2v;
namespace fs = std::filesystem;

namespace {

// Moves every weight off its initial value so no parameter has an
// identically zero gradient (the transform nets start with zero weights).
Model jittered(const ModelConfig& c, std::uint64_t seed, double scale = 0.05) {
  Model m = init_params(c, seed);
  Rng rng(seed + 1000);
  for (Eigen::Index i = 0; i < m.weights.size(); ++i) m.weights[i] += scale * normal(rng);
  for (Eigen::Index i = 0; i < m.state.size(); ++i) m.state[i] += 0.1 * uniform01(rng);
  return m;
}

double max_abs_diff(const Embedding& a, const std::vector<double>& b) {
  double d = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[static_cast<std::size_t>(i)]));
  return d;
}

double rel_err(double a, double n) {
  const double denom = std::max({std::abs(a), std::abs(n), 1e-8});
  return std::abs(a - n) / denom;
}

std::size_t expected_weight_count(const ModelConfig& c) {
  auto point = [](std::size_t in, std::size_t out) { return in * out + 2 * out; };
  auto dense = [](std::size_t in, std::size_t out) { return in * out + out; };
  auto tnet = [&](std::size_t k) {
    std::size_t n = 0, in = k;
    for (int w : c.tnet_point_widths) {
      n += point(in, static_cast<std::size_t>(w));
      in = static_cast<std::size_t>(w);
    }
    return n + dense(in, static_cast<std::size_t>(c.tnet_fc_width)) +
           dense(static_cast<std::size_t>(c.tnet_fc_width), k * k);
  };
  std::size_t n = 0;
  if (c.input_transform) n += tnet(3);
  n += point(3, static_cast<std::size_t>(c.feature_width));
  if (c.feature_transform) n += tnet(static_cast<std::size_t>(c.feature_width));
  std::size_t in = static_cast<std::size_t>(c.feature_width);
  for (int w : c.point_widths) {
    n += point(in, static_cast<std::size_t>(w));
    in = static_cast<std::size_t>(w);
  }
  for (int w : c.head_widths) {
    n += dense(in, static_cast<std::size_t>(w));
    in = static_cast<std::size_t>(w);
  }
  n += dense(in, static_cast<std::size_t>(c.code_size));
  return n;
}

std::size_t expected_decoder_count(const ModelConfig& c) {
  std::size_t n = 0, in = static_cast<std::size_t>(c.code_size);
  for (int w : c.decoder_widths) {
    n += in * static_cast<std::size_t>(w) + static_cast<std::size_t>(w);
    in = static_cast<std::size_t>(w);
  }
  return n + in * 3 * static_cast<std::size_t>(c.decoder_points) + 3 * static_cast<std::size_t>(c.decoder_points);
}

}  // namespace

TEST_CASE("parameter layout sizes follow the architecture") {
  for (const ModelConfig& c : {ModelConfig{}, test::tiny_config(), [] {
         auto t = test::tiny_config();
         t.input_transform = false;
         t.feature_transform = false;
         return t;
       }()}) {
    const Layout l = make_layout(c);
    CHECK(l.encoder_weight_count == expected_weight_count(c));
    CHECK(l.weight_count - l.encoder_weight_count == expected_decoder_count(c));
    for (const auto& d : l.decoder) CHECK(d.weight >= l.encoder_weight_count);
    for (const auto& h : l.head) CHECK(h.weight < l.encoder_weight_count);
  }
  const Layout full = make_layout(ModelConfig{});
  CHECK(full.head.back().out == 256);
  CHECK(full.decoder.back().out == 3 * 1024);
  CHECK(full.trunk.back().dense.out == 1024);
  CHECK(!full.first.dense.bias);
}

TEST_CASE("config validation and JSON") {
  ModelConfig c = test::tiny_config();
  const nlohmann::json j = c;
  CHECK(nlohmann::json(j.get<ModelConfig>()) == j);
  c.code_size = 1;
  CHECK_THROWS_AS(c.validate(), InvalidInput);
  c = test::tiny_config();
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), InvalidInput);
  c = test::tiny_config();
  c.point_widths.clear();
  CHECK_THROWS_AS(Model{c}, InvalidInput);
}

TEST_CASE("initialization is seed-deterministic") {
  const auto c = test::tiny_config();
  const Model a = init_params(c, 4), b = init_params(c, 4), d = init_params(c, 5);
  CHECK(a.weights == b.weights);
  CHECK(a.state == b.state);
  CHECK(a.weights != d.weights);
}

TEST_CASE("transform nets start at the identity") {
  const auto c = test::tiny_config();
  const Model m = init_params(c, 1);
  Rng rng(1);
  const PointCloud cloud = test::random_centered_cloud(rng, 10);
  oracle::Grid x(10, std::vector<double>(3));
  for (int r = 0; r < 10; ++r)
    for (int k = 0; k < 3; ++k) x[r][k] = cloud(r, k);
  for (Mode mode : {Mode::train, Mode::eval}) CHECK(oracle::transform_all(m, *m.layout().input_tnet, {x}, mode)[0] == x);
  const auto& ft = *m.layout().feature_tnet;
  for (int i = 0; i < ft.fc_out.in * ft.fc_out.out; ++i) CHECK(m.weights[static_cast<Eigen::Index>(ft.fc_out.weight) + i] == 0.0);
}

TEST_CASE("He initialization scale") {
  const Model m = init_params(ModelConfig{}, 7);
  const auto& s = m.layout().trunk.back().dense;  // 128 x 1024
  const auto n = static_cast<Eigen::Index>(s.in) * s.out;
  const auto w = m.weights.segment(static_cast<Eigen::Index>(s.weight), n);
  const double mean = w.mean();
  const double sd = std::sqrt((w.array() - mean).square().mean());
  CHECK(std::abs(mean) < 0.01 * std::sqrt(2.0 / s.in));
  CHECK(sd == doctest::Approx(std::sqrt(2.0 / s.in)).epsilon(0.02));
  const auto& ns = m.layout().trunk.back().norm;
  CHECK(m.state.segment(static_cast<Eigen::Index>(ns.running_var), ns.width).minCoeff() == 1.0);
}

TEST_CASE("encoder matches the scalar oracle in both modes") {
  const auto c = test::tiny_config();
  const Model m = jittered(c, 3);
  Rng rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const PointCloud cloud = test::random_centered_cloud(rng, 9);
    const auto masks = draw_dropout_masks(c, rng);
    CHECK(max_abs_diff(encode(m, cloud, Mode::eval), oracle::encode(m, cloud, Mode::eval)) < 1e-12);
    CHECK(max_abs_diff(encode(m, cloud, Mode::train), oracle::encode(m, cloud, Mode::train)) < 1e-12);
    CHECK(max_abs_diff(encode(m, cloud, Mode::train, &masks), oracle::encode(m, cloud, Mode::train, &masks)) < 1e-12);
  }
}

TEST_CASE("encoder without transform nets matches the oracle") {
  auto c = test::tiny_config();
  c.input_transform = false;
  c.feature_transform = false;
  const Model m = jittered(c, 8);
  Rng rng(3);
  const PointCloud cloud = test::random_centered_cloud(rng, 7);
  CHECK(max_abs_diff(encode(m, cloud, Mode::train), oracle::encode(m, cloud, Mode::train)) < 1e-12);
}

TEST_CASE("batched encoder pools statistics over all clouds") {
  const auto c = test::tiny_config();
  const Model m = jittered(c, 4);
  Rng rng(5);
  std::vector<PointCloud> clouds{test::random_centered_cloud(rng, 9), test::random_centered_cloud(rng, 5),
                                 test::random_centered_cloud(rng, 12)};
  std::vector<DropoutMasks> masks;
  for (int i = 0; i < 3; ++i) masks.push_back(draw_dropout_masks(c, rng));
  const std::vector<const PointCloud*> ptrs{&clouds[0], &clouds[1], &clouds[2]};
  const std::vector<const DropoutMasks*> mptrs{&masks[0], nullptr, &masks[2]};

  const auto got = encode_batch(m, ptrs, Mode::train, mptrs);
  const auto want = oracle::encode_batch(m, clouds, Mode::train, mptrs);
  REQUIRE(got.embeddings.size() == 3);
  REQUIRE(got.trace);
  CHECK(batch_size(*got.trace) == 3);
  for (int b = 0; b < 3; ++b) CHECK(max_abs_diff(got.embeddings[b], want[b]) < 1e-12);
  // Shared statistics: a cloud's train-mode code depends on its batch mates.
  CHECK(max_abs_diff(got.embeddings[1], oracle::encode(m, clouds[1], Mode::train)) > 1e-6);

  const auto eval = encode_batch(m, ptrs, Mode::eval);
  CHECK_FALSE(eval.trace);
  for (int b = 0; b < 3; ++b) CHECK(eval.embeddings[b] == encode(m, clouds[b], Mode::eval));
  CHECK_THROWS_AS(encode_batch(m, {}, Mode::train), InvalidInput);
  CHECK_THROWS_AS(encode_batch(m, ptrs, Mode::train, std::vector<const DropoutMasks*>{nullptr}), InvalidInput);
}

TEST_CASE("decoder matches the scalar oracle") {
  const auto c = test::tiny_config();
  const Model m = jittered(c, 5);
  Rng rng(4);
  Embedding e(c.code_size);
  for (int i = 0; i < c.code_size; ++i) e[i] = normal(rng);
  e.normalize();
  const PointCloud out = decode(m, e);
  REQUIRE(out.rows() == c.decoder_points);
  const auto want = oracle::decode(m, std::vector<double>(e.data(), e.data() + e.size()));
  for (int p = 0; p < c.decoder_points; ++p)
    for (int k = 0; k < 3; ++k) CHECK(out(p, k) == doctest::Approx(want[static_cast<std::size_t>(3 * p + k)]).epsilon(1e-12));
}

TEST_CASE("embeddings are unit norm and permutation invariant") {
  const auto c = test::tiny_config();
  const Model m = jittered(c, 9);
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const PointCloud cloud = test::random_centered_cloud(rng, 16);
    std::vector<Eigen::Index> perm(16);
    for (Eigen::Index i = 0; i < 16; ++i) perm[static_cast<std::size_t>(i)] = i;
    shuffle(perm, rng);
    PointCloud shuffled(16, 3);
    for (Eigen::Index i = 0; i < 16; ++i) shuffled.row(i) = cloud.row(perm[static_cast<std::size_t>(i)]);
    for (Mode mode : {Mode::eval, Mode::train}) {
      const Embedding a = encode(m, cloud, mode);
      const Embedding b = encode(m, shuffled, mode);
      CHECK(std::abs(a.norm() - 1.0) < 1e-12);
      CHECK((a - b).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("eval-mode encoding is pure") {
  const auto c = test::tiny_config();
  const Model m = jittered(c, 10);
  const Eigen::VectorXd w = m.weights, s = m.state;
  Rng rng(6);
  const PointCloud cloud = test::random_centered_cloud(rng, 12);
  const Embedding a = encode(m, cloud);
  const Embedding b = encode(m, cloud);
  CHECK(a == b);
  CHECK(m.weights == w);
  CHECK(m.state == s);
}

TEST_CASE("dropout masks are inverted-dropout scaled") {
  auto c = test::tiny_config();
  c.head_widths = {4000};
  c.dropout = 0.3;
  Rng rng(1);
  const auto masks = draw_dropout_masks(c, rng);
  REQUIRE(masks.size() == 1);
  int kept = 0;
  for (Eigen::Index i = 0; i < masks[0].size(); ++i) {
    const double v = masks[0][i];
    CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.7)));
    kept += v != 0.0;
  }
  // Binomial(4000, 0.7): sd ~ 29.
  CHECK(std::abs(kept - 2800) < 150);
}

TEST_CASE("encoder gradient agrees with central differences") {
  const auto c = test::tiny_config();
  Model m = jittered(c, 11);
  Rng rng(7);
  const PointCloud cloud = test::random_centered_cloud(rng, 8);
  const auto masks = draw_dropout_masks(c, rng);
  Embedding v(c.code_size);
  for (int i = 0; i < c.code_size; ++i) v[i] = normal(rng);
  auto loss = [&](const Model& mm) { return v.dot(encode(mm, cloud, Mode::train, &masks)); };

  const auto pass = encode_pass(m, cloud, Mode::train, &masks);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m.weight_count()));
  encoder_backward(m, *pass.trace, v, grad);
  CHECK(grad.tail(static_cast<Eigen::Index>(m.weight_count() - m.encoder_weight_count())).isZero(0.0));

  const double h = 1e-6;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(m.encoder_weight_count()); ++i) {
    const double keep = m.weights[i];
    m.weights[i] = keep + h;
    const double up = loss(m);
    m.weights[i] = keep - h;
    const double down = loss(m);
    m.weights[i] = keep;
    worst = std::max(worst, rel_err(grad[i], (up - down) / (2 * h)));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("batched encoder gradient agrees with central differences") {
  const auto c = test::tiny_config();
  Model m = jittered(c, 14);
  Rng rng(17);
  std::vector<PointCloud> clouds{test::random_centered_cloud(rng, 8), test::random_centered_cloud(rng, 5),
                                 test::random_centered_cloud(rng, 7)};
  std::vector<DropoutMasks> masks;
  std::vector<Eigen::VectorXd> v;
  for (int b = 0; b < 3; ++b) {
    masks.push_back(draw_dropout_masks(c, rng));
    Eigen::VectorXd vb(c.code_size);
    for (int i = 0; i < c.code_size; ++i) vb[i] = normal(rng);
    v.push_back(vb);
  }
  const std::vector<const PointCloud*> ptrs{&clouds[0], &clouds[1], &clouds[2]};
  const std::vector<const DropoutMasks*> mptrs{&masks[0], &masks[1], &masks[2]};
  auto loss = [&](const Model& mm) {
    const auto e = encode_batch(mm, ptrs, Mode::train, mptrs).embeddings;
    double acc = 0.0;
    for (int b = 0; b < 3; ++b) acc += v[b].dot(e[b]);
    return acc;
  };

  const auto pass = encode_batch(m, ptrs, Mode::train, mptrs);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m.weight_count()));
  encoder_backward(m, *pass.trace, v, grad);

  const double h = 1e-6;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(m.encoder_weight_count()); ++i) {
    const double keep = m.weights[i];
    m.weights[i] = keep + h;
    const double up = loss(m);
    m.weights[i] = keep - h;
    const double down = loss(m);
    m.weights[i] = keep;
    worst = std::max(worst, rel_err(grad[i], (up - down) / (2 * h)));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("decoder gradient agrees with central differences") {
  const auto c = test::tiny_config();
  Model m = jittered(c, 12);
  Rng rng(8);
  Embedding e(c.code_size);
  for (int i = 0; i < c.code_size; ++i) e[i] = normal(rng);
  PointCloud wts = test::random_cloud(rng, c.decoder_points);
  auto loss = [&](const Model& mm, const Embedding& ee) { return (decode(mm, ee).array() * wts.array()).sum(); };

  const auto pass = decode_pass(m, e);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m.weight_count()));
  const Eigen::VectorXd de = decoder_backward(m, *pass.trace, wts, grad);
  CHECK(grad.head(static_cast<Eigen::Index>(m.encoder_weight_count())).isZero(0.0));

  const double h = 1e-6;
  double worst = 0.0;
  for (auto i = static_cast<Eigen::Index>(m.encoder_weight_count()); i < m.weights.size(); ++i) {
    const double keep = m.weights[i];
    m.weights[i] = keep + h;
    const double up = loss(m, e);
    m.weights[i] = keep - h;
    const double down = loss(m, e);
    m.weights[i] = keep;
    worst = std::max(worst, rel_err(grad[i], (up - down) / (2 * h)));
  }
  for (Eigen::Index i = 0; i < e.size(); ++i) {
    Embedding ep = e, em = e;
    ep[i] += h;
    em[i] -= h;
    worst = std::max(worst, rel_err(de[i], (loss(m, ep) - loss(m, em)) / (2 * h)));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("running statistics blend toward the batch statistics") {
  auto c = test::tiny_config();
  c.input_transform = false;
  Model m = jittered(c, 13);
  Rng rng(9);
  const PointCloud c1 = test::random_centered_cloud(rng, 10);
  const PointCloud c2 = test::random_centered_cloud(rng, 6);
  const auto& first = m.layout().first;
  const Eigen::VectorXd before = m.state;
  const std::vector<const PointCloud*> ptrs{&c1, &c2};
  const auto pass = encode_batch(m, ptrs, Mode::train);
  update_running_stats(m, *pass.trace);
  for (int col = 0; col < first.dense.out; ++col) {
    std::vector<double> a;
    for (const PointCloud* cl : ptrs)
      for (Eigen::Index r = 0; r < cl->rows(); ++r) {
        double v = 0.0;
        for (int k = 0; k < 3; ++k) v += (*cl)(r, k) * oracle::w_at(m, first.dense, k, col);
        a.push_back(v);
      }
    double mean = 0.0, var = 0.0;
    for (double v : a) mean += v / 16;
    for (double v : a) var += (v - mean) * (v - mean) / 16;
    const auto rm = static_cast<Eigen::Index>(first.norm.running_mean) + col;
    const auto rv = static_cast<Eigen::Index>(first.norm.running_var) + col;
    CHECK(m.state[rm] == doctest::Approx(0.9 * before[rm] + 0.1 * mean).epsilon(1e-12));
    CHECK(m.state[rv] == doctest::Approx(0.9 * before[rv] + 0.1 * var).epsilon(1e-12));
  }
}

TEST_CASE("non-finite activations name the failing layer") {
  auto c = test::tiny_config();
  c.input_transform = false;
  Model m = init_params(c, 1);
  m.weights[static_cast<Eigen::Index>(m.layout().first.dense.weight)] = std::numeric_limits<double>::infinity();
  Rng rng(1);
  const PointCloud cloud = test::random_centered_cloud(rng, 6);
  try {
    encode(m, cloud, Mode::train);
    FAIL("expected NumericalFailure");
  } catch (const NumericalFailure& e) {
    CHECK(e.layer() == "first");
  }
  Model d = init_params(c, 1);
  d.weights[static_cast<Eigen::Index>(*d.layout().decoder.back().bias)] = std::numeric_limits<double>::quiet_NaN();
  try {
    decode(d, encode(d, cloud));
    FAIL("expected NumericalFailure");
  } catch (const NumericalFailure& e) {
    CHECK(e.layer() == "decoder_out");
  }
}

TEST_CASE("input validation") {
  const auto c = test::tiny_config();
  const Model m = init_params(c, 1);
  CHECK_THROWS_AS(encode(m, PointCloud(0, 3)), InvalidInput);
  CHECK_THROWS_AS(decode(m, Embedding::Ones(c.code_size + 1)), InvalidInput);
  DropoutMasks wrong(5);
  Rng rng(1);
  CHECK_THROWS_AS(encode(m, test::random_cloud(rng, 5), Mode::train, &wrong), InvalidInput);
}

TEST_CASE("checkpoint round trip") {
  test::TempDir tmp("ckpt");
  const auto c = test::tiny_config();
  const Model m = jittered(c, 14);
  const nlohmann::json meta = {{"seed", 14}, {"epoch", 3}};
  save_checkpoint(tmp.path() / "m.p2vk", m, meta);
  const Checkpoint back = load_checkpoint(tmp.path() / "m.p2vk");
  CHECK(back.model.weights == m.weights);
  CHECK(back.model.state == m.state);
  CHECK(nlohmann::json(back.model.config()) == nlohmann::json(c));
  CHECK(back.meta.at("seed") == 14);
  CHECK(back.meta.at("epoch") == 3);
  CHECK(!fs::exists(tmp.path() / "m.p2vk.tmp"));

  Rng rng(2);
  const PointCloud cloud = test::random_centered_cloud(rng, 8);
  CHECK(encode(back.model, cloud) == encode(m, cloud));
}

TEST_CASE("checkpoint load errors") {
  test::TempDir tmp("ckpt_err");
  CHECK_THROWS_AS(load_checkpoint(tmp.path() / "none.p2vk"), LoadError);
  std::ofstream(tmp.path() / "bad.p2vk") << "XXXXxxxxxxxxxxxx";
  CHECK_THROWS_AS(load_checkpoint(tmp.path() / "bad.p2vk"), LoadError);
  const Model m = init_params(test::tiny_config(), 1);
  save_checkpoint(tmp.path() / "t.p2vk", m);
  fs::resize_file(tmp.path() / "t.p2vk", fs::file_size(tmp.path() / "t.p2vk") - 9);
  CHECK_THROWS_AS(load_checkpoint(tmp.path() / "t.p2vk"), LoadError);
}

TEST_CASE("unit norm holds for degenerate and huge codes") {
  auto c = test::tiny_config();
  Model m = init_params(c, 3);
  const auto& code = m.layout().head.back();
  Rng rng(4);
  const PointCloud cloud = test::random_centered_cloud(rng, 8);

  // Zero weights and bias on the code layer: fixed direction, no gradient.
  Model zero = m;
  zero.weights.segment(static_cast<Eigen::Index>(code.weight), code.in * code.out).setZero();
  zero.weights.segment(static_cast<Eigen::Index>(*code.bias), code.out).setZero();
  const auto pass = encode_pass(zero, cloud, Mode::train);
  CHECK(std::abs(pass.embedding.norm() - 1.0) < 1e-12);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(zero.weight_count()));
  encoder_backward(zero, *pass.trace, Embedding::Ones(c.code_size), grad);
  CHECK(grad.isZero(0.0));

  // A code whose squared norm overflows.
  Model huge = m;
  huge.weights.segment(static_cast<Eigen::Index>(*code.bias), code.out).setConstant(1e200);
  const Embedding e = encode(huge, cloud);
  CHECK(std::abs(e.norm() - 1.0) < 1e-12);
}
