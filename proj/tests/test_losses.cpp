#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/QR>

#include "oracles.hpp"
#include "p2v/errors.hpp"
#include "p2v/losses.hpp"
#include "p2v/trainer.hpp"
#include "test_support.hpp"

using namespace p2v;

namespace {

Embedding unit(std::initializer_list<double> v) {
  Embedding e(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) e[i++] = x;
  return e;
}

Embedding random_unit(Rng& rng, int dim) {
  Embedding e(dim);
  for (int i = 0; i < dim; ++i) e[i] = normal(rng);
  return e.normalized();
}

struct Quad {
  Model model;
  std::array<PointCloud, 4> clouds;
  std::array<DropoutMasks, 4> masks;

  QuadrupleInput input(bool with_masks = true) const {
    QuadrupleInput in;
    for (std::size_t r = 0; r < 4; ++r) {
      in.clouds[r] = &clouds[r];
      in.masks[r] = with_masks ? &masks[r] : nullptr;
    }
    return in;
  }
};

Quad make_quad(std::uint64_t seed, Eigen::Index points = 8) {
  const auto c = test::tiny_config(4, 8);
  Quad q{init_params(c, seed), {}, {}};
  Rng rng(seed + 100);
  for (Eigen::Index i = 0; i < q.model.weights.size(); ++i) q.model.weights[i] += 0.05 * normal(rng);
  for (std::size_t r = 0; r < 4; ++r) {
    q.clouds[r] = test::random_centered_cloud(rng, points, 0.5);
    q.masks[r] = draw_dropout_masks(c, rng);
  }
  return q;
}

double rel_err(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
}

// Train-mode embeddings of all clouds of the given quads in one pass, so
// normalization statistics are shared as in the step.
// Train-mode embeddings with one pass per role, so normalization statistics are
// shared as in the step. Result index 4*b + r is role r of quad b.
std::vector<Embedding> embed_quads(const std::vector<const Quad*>& qs, const Model& m) {
  std::vector<Embedding> out(4 * qs.size());
  for (std::size_t r = 0; r < 4; ++r) {
    std::vector<const PointCloud*> clouds;
    std::vector<const DropoutMasks*> masks;
    for (const Quad* q : qs) {
      clouds.push_back(&q->clouds[r]);
      masks.push_back(&q->masks[r]);
    }
    const auto e = encode_batch(m, clouds, Mode::train, masks).embeddings;
    for (std::size_t b = 0; b < qs.size(); ++b) out[4 * b + r] = e[b];
  }
  return out;
}

// Independent recomputation of the mean losses over a batch of quads.
double total_encoder_loss(const std::vector<const Quad*>& qs, const Model& m, const StepOptions& o) {
  const auto e = embed_quads(qs, m);
  double acc = 0.0;
  for (std::size_t b = 0; b < qs.size(); ++b) {
    const double margin = margin_loss(e[4 * b], e[4 * b + 1], e[4 * b + 2], e[4 * b + 3], o.alpha).loss;
    acc += o.lambda * margin + oracle::chamfer(qs[b]->clouds[0], decode(m, e[4 * b]));
  }
  return acc / static_cast<double>(qs.size());
}

double reconstruction_only(const std::vector<const Quad*>& qs, const Model& m) {
  const auto e = embed_quads(qs, m);
  double acc = 0.0;
  for (std::size_t b = 0; b < qs.size(); ++b) acc += oracle::chamfer(qs[b]->clouds[0], decode(m, e[4 * b]));
  return acc / static_cast<double>(qs.size());
}

double total_encoder_loss(const Quad& q, const Model& m, const StepOptions& o) { return total_encoder_loss({&q}, m, o); }
double reconstruction_only(const Quad& q, const Model& m) { return reconstruction_only({&q}, m); }

}  // namespace

TEST_CASE("margin example: identical close and similar, clamped") {
  const Embedding a = unit({1, 0, 0});
  const Embedding n = unit({0, 1, 0});
  const auto t = margin_loss(a, a, a, n, 1.0);
  CHECK(t.d_close == 0.0);
  CHECK(t.d_similar == 0.0);
  CHECK(t.d_negative == 2.0);
  CHECK(t.loss == 0.0);
}

TEST_CASE("margin example: negative equal to anchor") {
  const Embedding a = unit({0, 0, 1});
  const auto t = margin_loss(a, a, a, a, 1.0);
  CHECK(t.loss == 1.0);
}

TEST_CASE("margin example: 4D cosines 0.5, 0, -0.5") {
  const double s = std::sqrt(0.75);
  const Embedding a = unit({1, 0, 0, 0});
  const Embedding c = unit({0.5, s, 0, 0});
  const Embedding sim = unit({0, 0, 1, 0});
  const Embedding n = unit({-0.5, 0, 0, s});
  // d = 2 - 2 cos for unit vectors.
  const auto t1 = margin_loss(a, c, sim, n, 1.0);
  CHECK(t1.d_close == doctest::Approx(2 - 2 * 0.5).epsilon(1e-15));
  CHECK(t1.d_similar == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(t1.d_negative == doctest::Approx(2 + 2 * 0.5).epsilon(1e-15));
  CHECK(t1.loss == 0.0);
  const auto t2 = margin_loss(a, c, sim, n, 2.0);
  CHECK(std::abs(t2.loss - 0.5) < 4 * std::numeric_limits<double>::epsilon());
}

TEST_CASE("margin loss properties on random unit vectors") {
  Rng rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    const int dim = 2 + static_cast<int>(uniform_index(rng, 8));
    const Embedding a = random_unit(rng, dim), c = random_unit(rng, dim), s = random_unit(rng, dim),
                    n = random_unit(rng, dim);
    const double alpha = uniform(rng, 0.0, 2.0);
    const auto t = margin_loss(a, c, s, n, alpha);
    CHECK(t.loss >= 0.0);
    for (double d : {t.d_close, t.d_similar, t.d_negative}) CHECK((d >= 0.0 && d <= 4.0 + 1e-12));
    CHECK((t.loss == 0.0) == ((t.d_close + t.d_similar) / 2 + alpha <= t.d_negative));

    // Common orthogonal transform.
    Eigen::MatrixXd g(dim, dim);
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < dim; ++j) g(i, j) = normal(rng);
    const Eigen::MatrixXd qm = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
    const auto tq = margin_loss(qm * a, qm * c, qm * s, qm * n, alpha);
    CHECK(tq.loss == doctest::Approx(t.loss).epsilon(1e-12).scale(1.0));
  }
}

TEST_CASE("margin loss is monotone in each distance where unclamped") {
  const Embedding a = unit({1, 0});
  auto at = [](double angle) { return unit({std::cos(angle), std::sin(angle)}); };
  const double alpha = 1.0;
  const double base = margin_loss(a, at(0.8), at(0.9), at(1.2), alpha).loss;
  REQUIRE(base > 0.0);
  CHECK(margin_loss(a, at(0.6), at(0.9), at(1.2), alpha).loss < base);
  CHECK(margin_loss(a, at(0.8), at(0.7), at(1.2), alpha).loss < base);
  CHECK(margin_loss(a, at(0.8), at(0.9), at(1.4), alpha).loss < base);
}

TEST_CASE("margin gradient matches central differences and vanishes when clamped") {
  Rng rng(2);
  int unclamped = 0;
  for (int trial = 0; trial < 50; ++trial) {
    std::array<Embedding, 4> e;
    for (auto& x : e) x = random_unit(rng, 5);
    const double alpha = 1.0;
    const auto g = margin_loss_grad(e[0], e[1], e[2], e[3], alpha);
    if (g.terms.loss == 0.0) {
      for (const auto& d : g.d) CHECK(d.isZero(0.0));
      continue;
    }
    ++unclamped;
    const double h = 1e-6;
    for (std::size_t r = 0; r < 4; ++r)
      for (int i = 0; i < 5; ++i) {
        auto up = e, down = e;
        up[r][i] += h;
        down[r][i] -= h;
        const double fd = (margin_loss(up[0], up[1], up[2], up[3], alpha).loss -
                           margin_loss(down[0], down[1], down[2], down[3], alpha).loss) /
                          (2 * h);
        CHECK(rel_err(g.d[r][i], fd) < 1e-6);
      }
  }
  CHECK(unclamped > 5);
}

TEST_CASE("margin loss rejects mismatched dimensions") {
  CHECK_THROWS_AS(margin_loss(unit({1, 0}), unit({1, 0}), unit({1, 0, 0}), unit({1, 0}), 1.0), InvalidInput);
}

TEST_CASE("reconstruction loss is the chamfer distance") {
  Rng rng(3);
  const PointCloud a = test::random_cloud(rng, 10);
  const PointCloud b = test::random_cloud(rng, 7);
  CHECK(reconstruction_loss(a, a) == 0.0);
  CHECK(reconstruction_loss(a, b) == doctest::Approx(oracle::chamfer(a, b)).epsilon(1e-12));
  PointCloud p(1, 3), q(1, 3);
  p << 0, 0, 0;
  q << 0, 1, 0;
  CHECK(reconstruction_loss(p, q) == 2.0);
}

TEST_CASE("default weighting constants") {
  const StepOptions o;
  CHECK(o.alpha == 1.0);
  CHECK(o.lambda == 10.0);
  CHECK(o.mode == TrainMode::points2vec);
  CHECK(!o.reconstruct_all);
  const TrainConfig t;
  CHECK(t.learning_rate == 1e-4);
  CHECK(t.batch_size == 20);
  CHECK(t.epochs == 4000);
  CHECK(t.model.code_size == 256);
  CHECK(t.adam_beta1 == 0.9);
  CHECK(t.adam_beta2 == 0.999);
  CHECK(t.adam_eps == 1e-8);
  CHECK(!t.clip_norm);
  CHECK(t.checkpoint_every == 100);
}

TEST_CASE("report composes the total encoder loss") {
  const Quad q = make_quad(1);
  StepOptions o;
  o.alpha = 2.0;
  const auto res = combined_step_losses(q.model, q.input(), o);
  CHECK(res.report.total_encoder_loss ==
        doctest::Approx(10.0 * res.report.margin_loss + res.report.reconstruction_loss).epsilon(1e-15));
  CHECK(res.report.total_encoder_loss == doctest::Approx(total_encoder_loss(q, q.model, o)).epsilon(1e-12));
  REQUIRE(res.trace);
  CHECK(batch_size(*res.trace) == 1);
}

TEST_CASE("gradient blocks match central differences on a tiny model") {
  for (std::uint64_t seed : {1, 2, 3}) {
    Quad q = make_quad(seed);
    StepOptions o;
    o.alpha = 2.0;  // keeps the hinge active at these scales
    const auto res = combined_step_losses(q.model, q.input(), o);
    REQUIRE(res.report.margin_loss > 0.0);
    const auto enc = static_cast<Eigen::Index>(q.model.encoder_weight_count());
    const double h = 1e-6;
    double worst_enc = 0.0, worst_dec = 0.0;
    for (Eigen::Index i = 0; i < q.model.weights.size(); ++i) {
      const double keep = q.model.weights[i];
      const bool is_enc = i < enc;
      auto f = [&] { return is_enc ? total_encoder_loss(q, q.model, o) : reconstruction_only(q, q.model); };
      q.model.weights[i] = keep + h;
      const double up = f();
      q.model.weights[i] = keep - h;
      const double down = f();
      q.model.weights[i] = keep;
      const double e = rel_err(res.grad[i], (up - down) / (2 * h));
      (is_enc ? worst_enc : worst_dec) = std::max(is_enc ? worst_enc : worst_dec, e);
    }
    CHECK(worst_enc < 1e-4);
    CHECK(worst_dec < 1e-4);
  }
}

TEST_CASE("margin gradient never reaches the decoder") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Quad q = make_quad(seed);
    StepOptions o;
    o.keep_parts = true;
    o.alpha = 2.0;
    const auto res = combined_step_losses(q.model, q.input(), o);
    const auto enc = static_cast<Eigen::Index>(q.model.encoder_weight_count());
    const auto dec = q.model.weights.size() - enc;
    CHECK(res.margin_grad.tail(dec).isZero(0.0));
    CHECK(!res.margin_grad.head(enc).isZero(0.0));
    CHECK(res.grad.tail(dec) == res.recon_grad.tail(dec));
    const Eigen::VectorXd want = res.recon_grad.head(enc) + 10.0 * res.margin_grad.head(enc);
    CHECK((res.grad.head(enc) - want).cwiseAbs().maxCoeff() == 0.0);

    // The unsplit path gives the same routed gradient up to summation order.
    o.keep_parts = false;
    const auto plain = combined_step_losses(q.model, q.input(), o);
    CHECK((plain.grad - res.grad).cwiseAbs().maxCoeff() <= 1e-12 * res.grad.cwiseAbs().maxCoeff());

    o.mode = TrainMode::margin_only;
    const auto mo = combined_step_losses(q.model, q.input(), o);
    CHECK(mo.grad.tail(dec).isZero(0.0));
    CHECK(mo.report.reconstruction_loss == 0.0);
    CHECK(mo.report.total_encoder_loss == mo.report.margin_loss);
  }
}

TEST_CASE("lambda = 0 leaves only the reconstruction gradient") {
  const Quad q = make_quad(7);
  StepOptions p2v;
  p2v.lambda = 0.0;
  p2v.alpha = 2.0;
  const auto a = combined_step_losses(q.model, q.input(), p2v);
  p2v.keep_parts = true;
  const auto parts = combined_step_losses(q.model, q.input(), p2v);
  REQUIRE(a.report.margin_loss > 0.0);
  CHECK(!parts.margin_grad.isZero(0.0));
  CHECK(a.grad == parts.recon_grad);
  CHECK(a.report.total_encoder_loss == a.report.reconstruction_loss);
}

TEST_CASE("lambda = 0 reproduces the autoencoder gradient") {
  const Quad q1 = make_quad(7), q2 = make_quad(10);
  StepOptions p2v;
  p2v.lambda = 0.0;
  p2v.alpha = 2.0;
  StepOptions ae;
  ae.mode = TrainMode::autoencoder_only;
  const std::vector<QuadrupleInput> full{q1.input(), q2.input()};
  std::vector<QuadrupleInput> anchors(2);
  for (std::size_t b = 0; b < 2; ++b) {
    anchors[b].clouds[0] = full[b].clouds[0];
    anchors[b].masks[0] = full[b].masks[0];
  }
  const auto a = combined_step_losses(q1.model, full, p2v);
  const auto b = combined_step_losses(q1.model, anchors, ae);
  REQUIRE(a.report.margin_loss > 0.0);
  CHECK(a.grad == b.grad);
  CHECK(b.report.margin_loss == 0.0);
  CHECK(b.report.reconstruction_loss == a.report.reconstruction_loss);
}

TEST_CASE("autoencoder mode encodes and reconstructs the anchors only") {
  const Quad q1 = make_quad(8), q2 = make_quad(9);
  StepOptions ae;
  ae.mode = TrainMode::autoencoder_only;
  std::vector<QuadrupleInput> in(2);
  in[0].clouds[0] = &q1.clouds[0];
  in[0].masks[0] = &q1.masks[0];
  in[1].clouds[0] = &q2.clouds[0];
  in[1].masks[0] = &q2.masks[0];
  const auto b = combined_step_losses(q1.model, in, ae);
  CHECK(b.report.margin_loss == 0.0);
  REQUIRE(b.trace);
  CHECK(batch_size(*b.trace) == 2);
  const std::vector<const PointCloud*> clouds{&q1.clouds[0], &q2.clouds[0]};
  const std::vector<const DropoutMasks*> masks{&q1.masks[0], &q2.masks[0]};
  const auto e = encode_batch(q1.model, clouds, Mode::train, masks).embeddings;
  const double want =
      (oracle::chamfer(q1.clouds[0], decode(q1.model, e[0])) + oracle::chamfer(q2.clouds[0], decode(q1.model, e[1]))) / 2;
  CHECK(b.report.reconstruction_loss == doctest::Approx(want).epsilon(1e-12));
  CHECK(b.report.total_encoder_loss == b.report.reconstruction_loss);
}

TEST_CASE("a batch of quadruples gives the gradient of the mean loss") {
  Quad q1 = make_quad(21), q2 = make_quad(22), q3 = make_quad(23);
  q2.model = q1.model;
  q3.model = q1.model;
  Model& m = q1.model;
  StepOptions o;
  o.alpha = 2.0;
  const std::vector<QuadrupleInput> in{q1.input(), q2.input(), q3.input()};
  const std::vector<const Quad*> qs{&q1, &q2, &q3};
  const auto res = combined_step_losses(m, in, o);
  CHECK(res.report.total_encoder_loss == doctest::Approx(total_encoder_loss(qs, m, o)).epsilon(1e-12));
  REQUIRE(res.trace);
  CHECK(batch_size(*res.trace) == 3);

  const auto enc = static_cast<Eigen::Index>(m.encoder_weight_count());
  const double h = 1e-6;
  double worst_enc = 0.0, worst_dec = 0.0;
  for (Eigen::Index i = 0; i < m.weights.size(); i += 3) {
    const double keep = m.weights[i];
    const bool is_enc = i < enc;
    auto f = [&] { return is_enc ? total_encoder_loss(qs, m, o) : reconstruction_only(qs, m); };
    m.weights[i] = keep + h;
    const double up = f();
    m.weights[i] = keep - h;
    const double down = f();
    m.weights[i] = keep;
    const double e = rel_err(res.grad[i], (up - down) / (2 * h));
    (is_enc ? worst_enc : worst_dec) = std::max(is_enc ? worst_enc : worst_dec, e);
  }
  CHECK(worst_enc < 1e-4);
  CHECK(worst_dec < 1e-4);

  // Workers only split the decoder passes.
  StepOptions par = o;
  par.workers = 3;
  CHECK(combined_step_losses(m, in, par).grad == res.grad);
}

TEST_CASE("a clamped margin gives the lambda = 0 gradient") {
  int found = 0;
  for (std::uint64_t seed = 1; seed <= 60 && found < 3; ++seed) {
    const Quad q = make_quad(seed);
    StepOptions o;
    o.alpha = 0.0;
    const auto res = combined_step_losses(q.model, q.input(), o);
    if (res.report.margin_loss != 0.0) continue;
    ++found;
    StepOptions zero = o;
    zero.lambda = 0.0;
    CHECK(res.grad == combined_step_losses(q.model, q.input(), zero).grad);
  }
  CHECK(found > 0);
}

TEST_CASE("reconstruct_all averages the four chamfer losses") {
  const Quad q = make_quad(4);
  StepOptions o;
  o.reconstruct_all = true;
  const auto res = combined_step_losses(q.model, q.input(), o);
  const auto e = embed_quads({&q}, q.model);
  double want = 0.0;
  for (std::size_t r = 0; r < 4; ++r) want += oracle::chamfer(q.clouds[r], decode(q.model, e[r])) / 4;
  CHECK(res.report.reconstruction_loss == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("step input validation") {
  const Quad q = make_quad(5);
  QuadrupleInput in = q.input();
  in.clouds[3] = nullptr;
  CHECK_THROWS_AS(combined_step_losses(q.model, in, {}), InvalidInput);
  CHECK(train_mode_from_string("margin_only") == TrainMode::margin_only);
  CHECK_THROWS_AS(train_mode_from_string("triplet"), InvalidInput);
}
