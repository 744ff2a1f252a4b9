#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "p2v/geometry.hpp"
#include "p2v/random.hpp"

namespace p2v {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Embedding = Eigen::VectorXd;

// Layer widths of the encoder/decoder. Defaults reproduce the reference
// architecture:
//   3x3 transform, 3->64, 64x64 transform, 64->64->128->1024 (shared per
//   point, batch-normalized), max-pool, 1024->512->256 (ReLU + dropout),
//   256->code, unit normalization; decoder code->256->512->1024->3*points.
// Transform sub-networks use per-point widths 64/128/256, max-pool, and two
// fully connected layers (256->128->k*k).
struct ModelConfig {
  int code_size = 256;
  int decoder_points = 1024;
  int feature_width = 64;
  std::vector<int> point_widths = {64, 128, 1024};
  std::vector<int> head_widths = {512, 256};
  std::vector<int> decoder_widths = {256, 512, 1024};
  std::vector<int> tnet_point_widths = {64, 128, 256};
  int tnet_fc_width = 128;
  bool input_transform = true;
  bool feature_transform = true;
  double dropout = 0.3;
  double bn_momentum = 0.9;
  double bn_eps = 1e-5;

  void validate() const;
  int pooled_width() const { return point_widths.back(); }
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class Mode { train, eval };

// Offsets into the flat weight vector. `bias` is absent for layers that
// feed a batch normalization.
struct DenseSlot {
  std::string name;
  int in = 0;
  int out = 0;
  std::size_t weight = 0;  // in x out, row-major
  std::optional<std::size_t> bias;
};

// gamma/beta live in the weight vector, running mean/var in the state vector.
struct NormSlot {
  int width = 0;
  std::size_t gamma = 0, beta = 0;
  std::size_t running_mean = 0, running_var = 0;
};

// Shared per-point layer: dense (no bias) -> batch norm -> ReLU.
struct PointLayer {
  DenseSlot dense;
  NormSlot norm;
};

struct TransformNet {
  int k = 0;
  std::vector<PointLayer> points;
  DenseSlot fc_hidden;
  DenseSlot fc_out;  // emits k*k values read as a row-major k x k matrix
};

struct Layout {
  std::optional<TransformNet> input_tnet;
  PointLayer first;
  std::optional<TransformNet> feature_tnet;
  std::vector<PointLayer> trunk;
  std::vector<DenseSlot> head;  // hidden layers (ReLU + dropout) then the code layer
  std::vector<DenseSlot> decoder;

  std::size_t weight_count = 0;
  std::size_t encoder_weight_count = 0;  // decoder weights occupy [encoder_weight_count, weight_count)
  std::size_t state_count = 0;
};

Layout make_layout(const ModelConfig& config);

// All learnable weights plus batch-norm running statistics. The layout is a
// pure function of the config, so the parameter count is too.
class Model {
 public:
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const Layout& layout() const { return layout_; }

  Eigen::VectorXd weights;
  Eigen::VectorXd state;

  std::size_t weight_count() const { return layout_.weight_count; }
  std::size_t encoder_weight_count() const { return layout_.encoder_weight_count; }

 private:
  ModelConfig config_;
  Layout layout_;
};

// Transform nets emit the identity at step 0 (zero final weights, identity
// bias); other layers get He-normal weights and zero biases.
Model init_params(const ModelConfig& config, std::uint64_t seed);

// Inverted-dropout masks for the head's hidden layers: entries are 0 or 1/(1-p).
using DropoutMasks = std::vector<Eigen::RowVectorXd>;
DropoutMasks draw_dropout_masks(const ModelConfig& config, Rng& rng);

// Intermediates of one train-mode encoder pass, consumed by encoder_backward.
struct EncoderTrace;
struct DecoderTrace;

struct EncoderPass {
  Embedding embedding;
  std::shared_ptr<const EncoderTrace> trace;  // train mode only
};

struct EncoderBatch {
  std::vector<Embedding> embeddings;
  std::shared_ptr<const EncoderTrace> trace;  // train mode only
};

// Eval mode: running statistics, no dropout, each embedding a pure function of
// (model, cloud). Train mode: normalization statistics pooled over every point
// of every cloud in the batch, and the given dropout masks (empty span or null
// entry -> no dropout); the trace is kept for the backward pass.
EncoderBatch encode_batch(const Model& model, std::span<const PointCloud* const> clouds, Mode mode,
                          std::span<const DropoutMasks* const> masks = {});

// A batch of one.
EncoderPass encode_pass(const Model& model, const PointCloud& cloud, Mode mode, const DropoutMasks* masks = nullptr);

Embedding encode(const Model& model, const PointCloud& cloud, Mode mode = Mode::eval,
                 const DropoutMasks* masks = nullptr);

std::size_t batch_size(const EncoderTrace& trace);

// Accumulates d loss / d weights into `grad` (size weight_count) given
// d loss / d embedding for every cloud of the batch.
void encoder_backward(const Model& model, const EncoderTrace& trace, std::span<const Eigen::VectorXd> d_embeddings,
                      Eigen::VectorXd& grad);
void encoder_backward(const Model& model, const EncoderTrace& trace, const Eigen::VectorXd& d_embedding,
                      Eigen::VectorXd& grad);

// Blends this pass's batch statistics into the running statistics.
void update_running_stats(Model& model, const EncoderTrace& trace);

struct DecoderPass {
  PointCloud cloud;
  std::shared_ptr<const DecoderTrace> trace;
};

DecoderPass decode_pass(const Model& model, const Embedding& e);
PointCloud decode(const Model& model, const Embedding& e);

// Accumulates decoder weight gradients into `grad`; returns d loss / d embedding.
Eigen::VectorXd decoder_backward(const Model& model, const DecoderTrace& trace, const PointCloud& d_cloud,
                                 Eigen::VectorXd& grad);

}  // namespace p2v
