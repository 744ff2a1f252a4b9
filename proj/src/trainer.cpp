#include "p2v/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "p2v/checkpoint.hpp"
#include "p2v/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace p2v {

namespace {

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kDropoutStream = 2;
constexpr std::uint64_t kSamplingStream = 3;

void require(bool ok, const std::string& msg) {
  if (!ok) throw InvalidInput("TrainConfig: " + msg);
}

std::vector<InstanceRecord> train_subset(const Dataset& d) {
  d.validate();
  return d.subset(Split::train);
}

}  // namespace

void TrainConfig::validate() const {
  require(learning_rate > 0.0, "learning_rate must be > 0");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(epochs >= 1, "epochs must be >= 1");
  require(alpha >= 0.0, "alpha must be >= 0");
  require(lambda >= 0.0, "lambda must be >= 0");
  require(checkpoint_every >= 1, "checkpoint_every must be >= 1");
  require(!clip_norm || *clip_norm > 0.0, "clip_norm must be > 0");
  model.validate();
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"learning_rate", c.learning_rate},
           {"batch_size", c.batch_size},
           {"epochs", c.epochs},
           {"alpha", c.alpha},
           {"lambda", c.lambda},
           {"mode", to_string(c.mode)},
           {"seed", c.seed},
           {"model", c.model},
           {"k_close", c.sampler.k_close},
           {"k_similar", c.sampler.k_similar},
           {"grid_steps", c.sampler.grid_steps},
           {"refine_tol", c.sampler.refine_tol},
           {"reconstruct_all", c.reconstruct_all},
           {"adam_beta1", c.adam_beta1},
           {"adam_beta2", c.adam_beta2},
           {"adam_eps", c.adam_eps},
           {"clip_norm", c.clip_norm ? json(*c.clip_norm) : json(nullptr)},
           {"checkpoint_every", c.checkpoint_every},
           {"workers", c.workers}};
}

void from_json(const json& j, TrainConfig& c) {
  const TrainConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.alpha = j.value("alpha", d.alpha);
  c.lambda = j.value("lambda", d.lambda);
  c.mode = train_mode_from_string(j.value("mode", std::string(to_string(d.mode))));
  c.seed = j.value("seed", d.seed);
  c.model = j.contains("model") ? j.at("model").get<ModelConfig>() : d.model;
  if (j.contains("code_size")) c.model.code_size = j.at("code_size");
  c.sampler.k_close = j.value("k_close", d.sampler.k_close);
  c.sampler.k_similar = j.value("k_similar", d.sampler.k_similar);
  c.sampler.grid_steps = j.value("grid_steps", d.sampler.grid_steps);
  c.sampler.refine_tol = j.value("refine_tol", d.sampler.refine_tol);
  c.reconstruct_all = j.value("reconstruct_all", d.reconstruct_all);
  c.adam_beta1 = j.value("adam_beta1", d.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", d.adam_beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.clip_norm = (j.contains("clip_norm") && !j.at("clip_norm").is_null()) ? std::optional<double>(j.at("clip_norm"))
                                                                           : d.clip_norm;
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.workers = j.value("workers", d.workers);
}

json to_json(const EpochLog& e) {
  json j;
  j["epoch"] = e.epoch;
  if (e.margin_loss) j["margin_loss"] = *e.margin_loss;
  if (e.reconstruction_loss) j["reconstruction_loss"] = *e.reconstruction_loss;
  j["total"] = e.total;
  j["wall_time"] = e.wall_time;
  return j;
}

Adam::Adam(std::size_t n, double beta1, double beta2, double eps)
    : m_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))),
      v_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps) {}

void Adam::step(Eigen::VectorXd& weights, const Eigen::VectorXd& grad, double lr, std::size_t limit) {
  ++t_;
  const auto n = static_cast<Eigen::Index>(limit);
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  m_.head(n) = beta1_ * m_.head(n) + (1.0 - beta1_) * grad.head(n);
  v_.head(n) = beta2_ * v_.head(n) + (1.0 - beta2_) * grad.head(n).cwiseAbs2();
  weights.head(n).array() -= lr * (m_.head(n).array() / c1) / ((v_.head(n).array() / c2).sqrt() + eps_);
}

StepResult batch_gradient(const Model& model, std::span<const InstanceRecord> instances,
                          std::span<const ContextQuadruple> quads, const TrainConfig& config, std::uint64_t step_index,
                          int workers) {
  if (quads.empty()) throw InvalidInput("batch_gradient: empty batch");
  StepOptions opt;
  opt.mode = config.mode;
  opt.alpha = config.alpha;
  opt.lambda = config.lambda;
  opt.reconstruct_all = config.reconstruct_all;

  opt.workers = workers;

  const std::size_t roles = config.mode == TrainMode::autoencoder_only ? 1 : 4;
  std::vector<QuadrupleInput> inputs(quads.size());
  std::vector<DropoutMasks> masks(quads.size() * roles);
  for (std::size_t b = 0; b < quads.size(); ++b) {
    const auto& q = quads[b];
    const std::array<std::size_t, 4> idx{q.anchor, q.close, q.similar, q.negative};
    for (std::size_t r = 0; r < roles; ++r) {
      if (idx[r] >= instances.size()) throw InvalidInput("batch_gradient: quadruple index out of range");
      inputs[b].clouds[r] = &instances[idx[r]].cloud;
      Rng mask_rng = derive_rng(config.seed, kDropoutStream, step_index, b * 4 + r);
      masks[b * roles + r] = draw_dropout_masks(model.config(), mask_rng);
      inputs[b].masks[r] = &masks[b * roles + r];
    }
  }
  return combined_step_losses(model, inputs, opt);
}

void write_checkpoint(const fs::path& path, const Model& model, const TrainConfig& config, int epoch) {
  json meta;
  meta["train"] = config;
  meta["seed"] = config.seed;
  meta["epoch"] = epoch;
  save_checkpoint(path, model, meta);
}

TrainResult train(std::span<const InstanceRecord> inst, const TrainConfig& config, const TrainIO& io,
                  const SimilarityCache* cache) {
  config.validate();
  if (inst.size() < 4) throw InvalidInput("train: need at least 4 training instances");

  std::optional<SimilarityCache> own_cache;
  if (config.mode != TrainMode::autoencoder_only && !cache) {
    own_cache = io.cache_path ? load_or_build_cache(*io.cache_path, inst, config.sampler, config.workers)
                              : build_cache(inst, config.sampler, config.workers);
    cache = &*own_cache;
  }
  if (cache && cache->size() != inst.size()) throw InvalidInput("train: similarity cache does not match instances");

  TrainResult result{init_params(config.model, derive_rng(config.seed, kInitStream)()), {}};
  Model& model = result.model;
  const std::size_t limit =
      config.mode == TrainMode::margin_only ? model.encoder_weight_count() : model.weight_count();
  Adam adam(model.weight_count(), config.adam_beta1, config.adam_beta2, config.adam_eps);
  Rng rng = derive_rng(config.seed, kSamplingStream);

  std::ofstream log_out;
  if (io.log_path) {
    if (io.log_path->has_parent_path()) fs::create_directories(io.log_path->parent_path());
    log_out.open(*io.log_path, std::ios::app);
    if (!log_out) throw LoadError(io.log_path->string() + ": cannot open training log");
  }

  const std::size_t m = inst.size();
  const std::size_t bs = static_cast<std::size_t>(config.batch_size);
  const std::size_t steps = (m + bs - 1) / bs;
  const auto start = std::chrono::steady_clock::now();
  std::uint64_t step_index = 0;
  std::vector<ContextQuadruple> quads(bs);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    double margin_sum = 0.0, rec_sum = 0.0, total_sum = 0.0;
    for (std::size_t s = 0; s < steps; ++s, ++step_index) {
      for (auto& q : quads) {
        if (config.mode == TrainMode::autoencoder_only) {
          q = ContextQuadruple{};
          q.anchor = static_cast<std::size_t>(uniform_index(rng, m));
        } else {
          q = sample_quadruple(*cache, rng);
        }
      }
      StepResult step = batch_gradient(model, inst, quads, config, step_index, config.workers);
      if (!std::isfinite(step.report.total_encoder_loss) || !step.grad.allFinite())
        throw NumericalFailure("loss", "non-finite loss at epoch " + std::to_string(epoch));
      if (config.clip_norm) {
        const double norm = step.grad.norm();
        if (norm > *config.clip_norm) step.grad *= *config.clip_norm / norm;
      }
      adam.step(model.weights, step.grad, config.learning_rate, limit);
      update_running_stats(model, *step.trace);
      margin_sum += step.report.margin_loss;
      rec_sum += step.report.reconstruction_loss;
      total_sum += step.report.total_encoder_loss;
    }

    EpochLog entry;
    entry.epoch = epoch;
    const double inv = 1.0 / static_cast<double>(steps);
    if (config.mode != TrainMode::autoencoder_only) entry.margin_loss = margin_sum * inv;
    if (config.mode != TrainMode::margin_only) entry.reconstruction_loss = rec_sum * inv;
    entry.total = total_sum * inv;
    entry.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(entry);
    if (log_out.is_open()) log_out << to_json(entry).dump() << '\n' << std::flush;
    if (io.on_epoch) io.on_epoch(entry);
    if (io.checkpoint_path && (epoch % config.checkpoint_every == 0 || epoch == config.epochs))
      write_checkpoint(*io.checkpoint_path, model, config, epoch);
  }
  return result;
}

TrainResult train(const Dataset& dataset, const TrainConfig& config, const TrainIO& io) {
  const auto inst = train_subset(dataset);
  return train(std::span<const InstanceRecord>(inst), config, io, nullptr);
}

std::vector<EmbeddedInstance> embed_dataset(const Model& model, const Dataset& dataset, std::optional<Split> split) {
  std::vector<EmbeddedInstance> out;
  for (std::size_t i = 0; i < dataset.instances.size(); ++i) {
    const auto& r = dataset.instances[i];
    if (split) {
      auto it = dataset.split.find(r.scene_id);
      if (it == dataset.split.end() || it->second != *split) continue;
    }
    out.push_back({r, encode(model, r.cloud, Mode::eval)});
  }
  return out;
}

}  // namespace p2v
