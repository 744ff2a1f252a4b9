#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "p2v/context_sampler.hpp"
#include "p2v/ingest.hpp"
#include "p2v/losses.hpp"
#include "p2v/model.hpp"

namespace p2v {

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 20;
  int epochs = 4000;
  double alpha = 1.0;
  double lambda = 10.0;
  TrainMode mode = TrainMode::points2vec;
  std::uint64_t seed = 0;
  ModelConfig model;
  SamplerParams sampler;
  bool reconstruct_all = false;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::optional<double> clip_norm;  // global-norm clipping, off unless set (CLI flag uses 10)
  int checkpoint_every = 100;
  int workers = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochLog {
  int epoch = 0;
  std::optional<double> margin_loss;          // absent in autoencoder_only mode
  std::optional<double> reconstruction_loss;  // absent in margin_only mode
  double total = 0.0;
  double wall_time = 0.0;  // seconds since training started
};

nlohmann::json to_json(const EpochLog& e);

struct TrainIO {
  std::optional<std::filesystem::path> checkpoint_path;
  std::optional<std::filesystem::path> log_path;    // JSON lines, appended
  std::optional<std::filesystem::path> cache_path;  // similarity cache, reused when the hash matches
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  Model model;
  std::vector<EpochLog> log;
};

class Adam {
 public:
  Adam(std::size_t n, double beta1, double beta2, double eps);
  // Updates weights[0, limit) only.
  void step(Eigen::VectorXd& weights, const Eigen::VectorXd& grad, double lr, std::size_t limit);

 private:
  Eigen::VectorXd m_, v_;
  double beta1_, beta2_, eps_;
  long long t_ = 0;
};

// One epoch is ceil(M / batch_size) steps over M training instances; every
// step averages the routed gradients of batch_size quadruples (or anchors in
// autoencoder_only mode) and applies one Adam update. Deterministic per seed.
// Throws NumericalFailure on a non-finite loss; the last checkpoint on disk is
// left as it was.
TrainResult train(std::span<const InstanceRecord> train_instances, const TrainConfig& config, const TrainIO& io = {},
                  const SimilarityCache* cache = nullptr);

TrainResult train(const Dataset& dataset, const TrainConfig& config, const TrainIO& io = {});

// Gradient of one batch, exposed so callers can drive custom loops. Only the
// anchor of each quadruple is used in autoencoder_only mode. The result does
// not depend on `workers`.
StepResult batch_gradient(const Model& model, std::span<const InstanceRecord> instances,
                          std::span<const ContextQuadruple> quads, const TrainConfig& config, std::uint64_t step_index,
                          int workers = 1);

void write_checkpoint(const std::filesystem::path& path, const Model& model, const TrainConfig& config, int epoch);

struct EmbeddedInstance {
  InstanceRecord record;
  Embedding embedding;
};

// Eval-mode encoding of every instance in `split` (all instances when
// nullopt), in dataset order.
std::vector<EmbeddedInstance> embed_dataset(const Model& model, const Dataset& dataset,
                                            std::optional<Split> split = std::nullopt);

}  // namespace p2v
