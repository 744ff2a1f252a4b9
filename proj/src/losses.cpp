#include "p2v/losses.hpp"

#include <algorithm>

#include "p2v/errors.hpp"
#include "p2v/parallel.hpp"

namespace p2v {

namespace {

void check_dims(const Embedding& a, const Embedding& b, const Embedding& c, const Embedding& d) {
  if (a.size() != b.size() || a.size() != c.size() || a.size() != d.size())
    throw InvalidInput("margin_loss: embedding dimensions differ");
}

}  // namespace

MarginTerms margin_loss(const Embedding& anchor, const Embedding& close, const Embedding& similar,
                        const Embedding& negative, double alpha) {
  check_dims(anchor, close, similar, negative);
  MarginTerms t;
  t.d_close = (anchor - close).squaredNorm();
  t.d_similar = (anchor - similar).squaredNorm();
  t.d_negative = (anchor - negative).squaredNorm();
  t.loss = std::max((t.d_close + t.d_similar) / 2.0 - t.d_negative + alpha, 0.0);
  return t;
}

MarginGradient margin_loss_grad(const Embedding& anchor, const Embedding& close, const Embedding& similar,
                                const Embedding& negative, double alpha) {
  MarginGradient g;
  g.terms = margin_loss(anchor, close, similar, negative, alpha);
  for (auto& d : g.d) d = Eigen::VectorXd::Zero(anchor.size());
  if (g.terms.loss > 0.0) {
    const Eigen::VectorXd ac = anchor - close;
    const Eigen::VectorXd as = anchor - similar;
    const Eigen::VectorXd an = anchor - negative;
    g.d[kAnchor] = ac + as - 2.0 * an;
    g.d[kClose] = -ac;
    g.d[kSimilar] = -as;
    g.d[kNegative] = 2.0 * an;
  }
  return g;
}

double reconstruction_loss(const PointCloud& original, const PointCloud& reconstructed) {
  return chamfer_distance(original, reconstructed);
}

const char* to_string(TrainMode m) {
  switch (m) {
    case TrainMode::points2vec: return "points2vec";
    case TrainMode::autoencoder_only: return "autoencoder_only";
    case TrainMode::margin_only: return "margin_only";
  }
  return "?";
}

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "points2vec") return TrainMode::points2vec;
  if (s == "autoencoder_only") return TrainMode::autoencoder_only;
  if (s == "margin_only") return TrainMode::margin_only;
  throw InvalidInput("unknown mode '" + s + "' (expected points2vec, autoencoder_only or margin_only)");
}

StepResult combined_step_losses(const Model& model, std::span<const QuadrupleInput> batch, const StepOptions& opt) {
  if (batch.empty()) throw InvalidInput("combined_step_losses: empty batch");
  const bool use_margin = opt.mode != TrainMode::autoencoder_only;
  const bool use_rec = opt.mode != TrainMode::margin_only;
  const std::size_t n_roles = use_margin ? 4 : 1;
  const std::size_t n_quads = batch.size();
  const double inv_b = 1.0 / static_cast<double>(n_quads);
  for (const auto& in : batch)
    for (std::size_t r = 0; r < n_roles; ++r)
      if (!in.clouds[r]) throw InvalidInput("combined_step_losses: missing cloud for role " + std::to_string(r));

  const auto n = static_cast<Eigen::Index>(model.weight_count());
  const auto code = static_cast<Eigen::Index>(model.config().code_size);
  StepResult res;
  res.grad = Eigen::VectorXd::Zero(n);
  if (opt.keep_parts) {
    res.margin_grad = Eigen::VectorXd::Zero(n);
    res.recon_grad = Eigen::VectorXd::Zero(n);
  }

  // One encoder pass per role; e[r][q] is role r of quadruple q.
  std::array<EncoderBatch, 4> enc;
  for (std::size_t r = 0; r < n_roles; ++r) {
    std::vector<const PointCloud*> clouds;
    std::vector<const DropoutMasks*> masks;
    for (const auto& in : batch) {
      clouds.push_back(in.clouds[r]);
      masks.push_back(in.masks[r]);
    }
    enc[r] = encode_batch(model, clouds, Mode::train, masks);
  }
  res.trace = enc[kAnchor].trace;

  std::array<std::vector<Eigen::VectorXd>, 4> d_margin, d_rec;
  for (std::size_t r = 0; r < n_roles; ++r) {
    d_margin[r].assign(n_quads, Eigen::VectorXd::Zero(code));
    d_rec[r].assign(n_quads, Eigen::VectorXd::Zero(code));
  }

  if (use_margin)
    for (std::size_t q = 0; q < n_quads; ++q) {
      const auto mg = margin_loss_grad(enc[kAnchor].embeddings[q], enc[kClose].embeddings[q],
                                       enc[kSimilar].embeddings[q], enc[kNegative].embeddings[q], opt.alpha);
      res.report.margin_loss += inv_b * mg.terms.loss;
      res.report.d_close += inv_b * mg.terms.d_close;
      res.report.d_similar += inv_b * mg.terms.d_similar;
      res.report.d_negative += inv_b * mg.terms.d_negative;
      for (std::size_t r = 0; r < 4; ++r) d_margin[r][q] = inv_b * mg.d[r];
    }

  if (use_rec) {
    const std::size_t n_rec = (opt.reconstruct_all && use_margin) ? 4 : 1;
    const double w = inv_b / static_cast<double>(n_rec);
    struct RecPart {
      DecoderPass pass;
      ChamferGradient chamfer;
    };
    std::vector<RecPart> parts(n_quads * n_rec);
    parallel_for(parts.size(), opt.workers, [&](std::size_t i) {
      const std::size_t q = i / n_rec, r = i % n_rec;
      DecoderPass dp = decode_pass(model, enc[r].embeddings[q]);
      ChamferGradient cg = chamfer_distance_grad(*batch[q].clouds[r], dp.cloud);
      parts[i] = {std::move(dp), std::move(cg)};
    });
    Eigen::VectorXd& dec_grad = opt.keep_parts ? res.recon_grad : res.grad;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const std::size_t q = i / n_rec, r = i % n_rec;
      res.report.reconstruction_loss += w * parts[i].chamfer.value;
      d_rec[r][q] = decoder_backward(model, *parts[i].pass.trace, w * parts[i].chamfer.d_b, dec_grad);
    }
  }

  const double margin_coef = opt.mode == TrainMode::margin_only ? 1.0 : opt.lambda;
  res.report.total_encoder_loss =
      (use_margin ? margin_coef * res.report.margin_loss : 0.0) + res.report.reconstruction_loss;

  if (opt.keep_parts) {
    for (std::size_t r = 0; r < n_roles; ++r) {
      if (use_margin) encoder_backward(model, *enc[r].trace, d_margin[r], res.margin_grad);
      if (use_rec) encoder_backward(model, *enc[r].trace, d_rec[r], res.recon_grad);
    }
    const auto enc_n = static_cast<Eigen::Index>(model.encoder_weight_count());
    res.grad = res.recon_grad;
    if (use_margin) res.grad.head(enc_n) += margin_coef * res.margin_grad.head(enc_n);
    return res;
  }

  for (std::size_t r = 0; r < n_roles; ++r) {
    std::vector<Eigen::VectorXd> d(n_quads);
    for (std::size_t q = 0; q < n_quads; ++q)
      d[q] = use_margin ? Eigen::VectorXd(margin_coef * d_margin[r][q] + d_rec[r][q]) : d_rec[r][q];
    encoder_backward(model, *enc[r].trace, d, res.grad);
  }
  return res;
}

StepResult combined_step_losses(const Model& model, const QuadrupleInput& input, const StepOptions& opt) {
  return combined_step_losses(model, std::span<const QuadrupleInput>(&input, 1), opt);
}

}  // namespace p2v
