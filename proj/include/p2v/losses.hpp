#pragma once

#include <array>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "p2v/geometry.hpp"
#include "p2v/model.hpp"

namespace p2v {

struct MarginTerms {
  double loss = 0.0;
  double d_close = 0.0;
  double d_similar = 0.0;
  double d_negative = 0.0;
};

// loss = max{(d_close + d_similar)/2 - d_negative + alpha, 0} with
// d_x = |e_anchor - e_x|^2.
MarginTerms margin_loss(const Embedding& anchor, const Embedding& close, const Embedding& similar,
                        const Embedding& negative, double alpha);

struct MarginGradient {
  MarginTerms terms;
  // d loss / d e for anchor, close, similar, negative (zero when clamped).
  std::array<Eigen::VectorXd, 4> d;
};

MarginGradient margin_loss_grad(const Embedding& anchor, const Embedding& close, const Embedding& similar,
                                const Embedding& negative, double alpha);

double reconstruction_loss(const PointCloud& original, const PointCloud& reconstructed);

enum class TrainMode { points2vec, autoencoder_only, margin_only };

const char* to_string(TrainMode m);
TrainMode train_mode_from_string(const std::string& s);

enum Role : std::size_t { kAnchor = 0, kClose = 1, kSimilar = 2, kNegative = 3 };

struct StepOptions {
  TrainMode mode = TrainMode::points2vec;
  double alpha = 1.0;
  double lambda = 10.0;          // total = lambda * margin + reconstruction
  bool reconstruct_all = false;  // reconstruct all four clouds instead of the anchor only
  bool keep_parts = false;       // also return the separate margin/reconstruction gradients
  int workers = 1;               // threads for the per-quadruple decoder passes
};

struct LossReport {
  double margin_loss = 0.0;
  double reconstruction_loss = 0.0;
  double total_encoder_loss = 0.0;
  double d_close = 0.0;
  double d_similar = 0.0;
  double d_negative = 0.0;
};

// Clouds for one quadruple; only the anchor is read in autoencoder_only mode.
struct QuadrupleInput {
  std::array<const PointCloud*, 4> clouds{};
  std::array<const DropoutMasks*, 4> masks{};  // null -> no dropout for that pass
};

struct StepResult {
  LossReport report;  // means over the quadruples
  // Routed gradient of the mean loss: encoder gets d(lambda*margin + rec),
  // decoder gets d(rec). In margin_only mode this is d(margin) alone.
  Eigen::VectorXd grad;
  // keep_parts only: d(margin)/d(weights) and d(rec)/d(weights), both full size.
  Eigen::VectorXd margin_grad;
  Eigen::VectorXd recon_grad;
  // Train-mode encoder trace of the anchor pass, for the running-statistics update.
  std::shared_ptr<const EncoderTrace> trace;
};

// Each role goes through one encoder pass over all quadruples of the batch, so
// normalization statistics are shared within a role. The anchor pass is thus
// the same in every mode.
StepResult combined_step_losses(const Model& model, std::span<const QuadrupleInput> batch, const StepOptions& options);
StepResult combined_step_losses(const Model& model, const QuadrupleInput& input, const StepOptions& options);

}  // namespace p2v
