#include "p2v/model.hpp"

#include <cmath>

#include "p2v/errors.hpp"

using nlohmann::json;

namespace p2v {

using RowVec = Eigen::RowVectorXd;
using Index = Eigen::Index;

struct PointLayerTrace {
  Matrix input;
  Matrix xhat;
  RowVec mean, var, invstd;
  Matrix output;
};

struct TransformTrace {
  std::vector<PointLayerTrace> points;
  std::vector<std::vector<Index>> argmax;  // per cloud, stacked row of each channel's max
  Matrix pooled;                           // clouds x width
  Matrix hidden;
  std::vector<Matrix> transform;
};

// All clouds of a batch are stacked row-wise; per-point layers run once over
// the stack, so train-mode normalization pools every point of every cloud.
struct EncoderTrace {
  Matrix input;
  std::vector<Index> starts;  // first row of each cloud, then the total row count
  std::optional<TransformTrace> input_tnet;
  PointLayerTrace first;
  std::optional<TransformTrace> feature_tnet;
  std::vector<PointLayerTrace> trunk;
  std::vector<std::vector<Index>> argmax;
  std::vector<Matrix> head_in;   // input of every head layer, clouds x width
  std::vector<Matrix> head_act;  // post-ReLU, pre-dropout, hidden layers only
  std::vector<DropoutMasks> masks;  // per cloud; empty -> no dropout
  std::vector<double> code_norm;    // 0 for an all-zero code
  std::vector<Embedding> embeddings;
};

struct DecoderTrace {
  std::vector<RowVec> inputs;  // input of every decoder layer
  std::vector<RowVec> hidden;  // post-ReLU outputs of the hidden layers
};

namespace {

// ---- config -----------------------------------------------------------------

void require(bool ok, const std::string& msg) {
  if (!ok) throw InvalidInput("ModelConfig: " + msg);
}

// ---- layout -----------------------------------------------------------------

struct Allocator {
  std::size_t weights = 0;
  std::size_t state = 0;

  DenseSlot dense(std::string name, int in, int out, bool bias) {
    DenseSlot s{std::move(name), in, out, weights, std::nullopt};
    weights += static_cast<std::size_t>(in) * static_cast<std::size_t>(out);
    if (bias) {
      s.bias = weights;
      weights += static_cast<std::size_t>(out);
    }
    return s;
  }

  PointLayer point(std::string name, int in, int out) {
    PointLayer p;
    p.dense = dense(std::move(name), in, out, false);
    p.norm.width = out;
    p.norm.gamma = weights;
    p.norm.beta = weights + static_cast<std::size_t>(out);
    weights += 2 * static_cast<std::size_t>(out);
    p.norm.running_mean = state;
    p.norm.running_var = state + static_cast<std::size_t>(out);
    state += 2 * static_cast<std::size_t>(out);
    return p;
  }

  TransformNet tnet(const std::string& name, int k, const ModelConfig& c) {
    TransformNet t;
    t.k = k;
    int in = k;
    for (std::size_t i = 0; i < c.tnet_point_widths.size(); ++i) {
      t.points.push_back(point(name + ".point" + std::to_string(i), in, c.tnet_point_widths[i]));
      in = c.tnet_point_widths[i];
    }
    t.fc_hidden = dense(name + ".fc_hidden", in, c.tnet_fc_width, true);
    t.fc_out = dense(name + ".fc_out", c.tnet_fc_width, k * k, true);
    return t;
  }
};

// ---- parameter views --------------------------------------------------------

Eigen::Map<const Matrix> weight_of(const Model& m, const DenseSlot& s) {
  return {m.weights.data() + s.weight, s.in, s.out};
}

Eigen::Map<Matrix> weight_grad(Eigen::VectorXd& g, const DenseSlot& s) {
  return {g.data() + s.weight, s.in, s.out};
}

Eigen::Map<const RowVec> row_of(const Eigen::VectorXd& v, std::size_t off, int n) {
  return {v.data() + off, n};
}

Eigen::Map<RowVec> row_of(Eigen::VectorXd& v, std::size_t off, int n) {
  return {v.data() + off, n};
}

void check_finite(const auto& x, const std::string& layer) {
  if (!x.allFinite()) throw NumericalFailure(layer, "non-finite activation");
}

// ---- layers -----------------------------------------------------------------

Matrix point_forward(const Model& m, const PointLayer& layer, const Matrix& x, Mode mode, PointLayerTrace* tr) {
  const Matrix a = x * weight_of(m, layer.dense);
  const int w = layer.norm.width;
  RowVec mean, var;
  if (mode == Mode::train) {
    mean = a.colwise().mean();
    var = (a.rowwise() - mean).array().square().colwise().mean();
  } else {
    mean = row_of(m.state, layer.norm.running_mean, w);
    var = row_of(m.state, layer.norm.running_var, w);
  }
  const RowVec invstd = (var.array() + m.config().bn_eps).rsqrt().matrix();
  Matrix xhat = (a.rowwise() - mean).array().rowwise() * invstd.array();
  const auto gamma = row_of(m.weights, layer.norm.gamma, w);
  const auto beta = row_of(m.weights, layer.norm.beta, w);
  Matrix out = ((xhat.array().rowwise() * gamma.array()).rowwise() + beta.array()).cwiseMax(0.0);
  check_finite(out, layer.dense.name);
  if (tr) {
    tr->input = x;
    tr->xhat = std::move(xhat);
    tr->mean = std::move(mean);
    tr->var = std::move(var);
    tr->invstd = invstd;
    tr->output = out;
  }
  return out;
}

Matrix point_backward(const Model& m, const PointLayer& layer, const PointLayerTrace& tr, const Matrix& d_out,
                      Eigen::VectorXd& grad) {
  const int w = layer.norm.width;
  const double n = static_cast<double>(tr.input.rows());
  const Matrix dy = (tr.output.array() > 0.0).select(d_out, 0.0);
  row_of(grad, layer.norm.gamma, w) += (dy.array() * tr.xhat.array()).colwise().sum().matrix();
  row_of(grad, layer.norm.beta, w) += dy.colwise().sum();
  const Matrix dxhat = dy.array().rowwise() * row_of(m.weights, layer.norm.gamma, w).array();
  const RowVec sum_d = dxhat.colwise().sum();
  const RowVec sum_dx = (dxhat.array() * tr.xhat.array()).colwise().sum().matrix();
  const Matrix da = ((n * dxhat.array()).rowwise() - sum_d.array() - tr.xhat.array().rowwise() * sum_dx.array())
                        .rowwise() *
                    (tr.invstd.array() / n);
  weight_grad(grad, layer.dense).noalias() += tr.input.transpose() * da;
  return da * weight_of(m, layer.dense).transpose();
}

Matrix dense_forward(const Model& m, const DenseSlot& s, const Matrix& x) {
  Matrix y = x * weight_of(m, s);
  if (s.bias) y.rowwise() += row_of(m.weights, *s.bias, s.out);
  check_finite(y, s.name);
  return y;
}

Matrix dense_backward(const Model& m, const DenseSlot& s, const Matrix& input, const Matrix& d_out,
                      Eigen::VectorXd& grad) {
  weight_grad(grad, s).noalias() += input.transpose() * d_out;
  if (s.bias) row_of(grad, *s.bias, s.out) += d_out.colwise().sum();
  return d_out * weight_of(m, s).transpose();
}

// Channel-wise max over each cloud's rows.
Matrix max_pool(const Matrix& h, const std::vector<Index>& starts, std::vector<std::vector<Index>>& argmax) {
  const std::size_t clouds = starts.size() - 1;
  Matrix out(static_cast<Index>(clouds), h.cols());
  argmax.assign(clouds, std::vector<Index>(static_cast<std::size_t>(h.cols()), 0));
  for (std::size_t b = 0; b < clouds; ++b)
    for (Index j = 0; j < h.cols(); ++j) {
      Index best = starts[b];
      for (Index i = starts[b] + 1; i < starts[b + 1]; ++i)
        if (h(i, j) > h(best, j)) best = i;
      argmax[b][static_cast<std::size_t>(j)] = best;
      out(static_cast<Index>(b), j) = h(best, j);
    }
  return out;
}

Matrix unpool(const Matrix& d, const std::vector<std::vector<Index>>& argmax, Index rows) {
  Matrix out = Matrix::Zero(rows, d.cols());
  for (std::size_t b = 0; b < argmax.size(); ++b)
    for (Index j = 0; j < d.cols(); ++j) out(argmax[b][static_cast<std::size_t>(j)], j) = d(static_cast<Index>(b), j);
  return out;
}

Matrix apply_transforms(const Matrix& x, const std::vector<Matrix>& t, const std::vector<Index>& starts) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t b = 0; b < t.size(); ++b) {
    const Index n = starts[b + 1] - starts[b];
    out.middleRows(starts[b], n).noalias() = x.middleRows(starts[b], n) * t[b];
  }
  return out;
}

std::vector<Matrix> tnet_forward(const Model& m, const TransformNet& t, const Matrix& x, const std::vector<Index>& starts,
                                 Mode mode, TransformTrace* tr) {
  Matrix h = x;
  if (tr) tr->points.resize(t.points.size());
  for (std::size_t i = 0; i < t.points.size(); ++i)
    h = point_forward(m, t.points[i], h, mode, tr ? &tr->points[i] : nullptr);
  std::vector<std::vector<Index>> argmax;
  Matrix pooled = max_pool(h, starts, argmax);
  Matrix hidden = dense_forward(m, t.fc_hidden, pooled).cwiseMax(0.0);
  const Matrix flat = dense_forward(m, t.fc_out, hidden);
  std::vector<Matrix> transform;
  for (Index b = 0; b < flat.rows(); ++b) transform.push_back(Eigen::Map<const Matrix>(flat.row(b).data(), t.k, t.k));
  if (tr) {
    tr->argmax = std::move(argmax);
    tr->pooled = std::move(pooled);
    tr->hidden = std::move(hidden);
    tr->transform = transform;
  }
  return transform;
}

Matrix tnet_backward(const Model& m, const TransformNet& t, const TransformTrace& tr,
                     const std::vector<Matrix>& d_transform, Index rows, Eigen::VectorXd& grad) {
  Matrix d_flat(static_cast<Index>(d_transform.size()), t.k * t.k);
  for (std::size_t b = 0; b < d_transform.size(); ++b)
    d_flat.row(static_cast<Index>(b)) = Eigen::Map<const RowVec>(d_transform[b].data(), t.k * t.k);
  Matrix d_hidden = dense_backward(m, t.fc_out, tr.hidden, d_flat, grad);
  d_hidden = (tr.hidden.array() > 0.0).select(d_hidden, 0.0);
  const Matrix d_pooled = dense_backward(m, t.fc_hidden, tr.pooled, d_hidden, grad);
  Matrix d = unpool(d_pooled, tr.argmax, rows);
  for (std::size_t i = t.points.size(); i-- > 0;) d = point_backward(m, t.points[i], tr.points[i], d, grad);
  return d;
}

// d/dT_b of sum(d_out .* (x_b T_b)) for each cloud b.
std::vector<Matrix> transform_grads(const Matrix& x, const Matrix& d_out, const std::vector<Index>& starts) {
  std::vector<Matrix> out;
  for (std::size_t b = 0; b + 1 < starts.size(); ++b) {
    const Index n = starts[b + 1] - starts[b];
    out.push_back(x.middleRows(starts[b], n).transpose() * d_out.middleRows(starts[b], n));
  }
  return out;
}

Matrix transform_input_grad(const Matrix& d_out, const std::vector<Matrix>& t, const std::vector<Index>& starts) {
  Matrix out(d_out.rows(), d_out.cols());
  for (std::size_t b = 0; b < t.size(); ++b) {
    const Index n = starts[b + 1] - starts[b];
    out.middleRows(starts[b], n).noalias() = d_out.middleRows(starts[b], n) * t[b].transpose();
  }
  return out;
}

void blend_stats(Model& m, const PointLayer& layer, const PointLayerTrace& tr) {
  const double mom = m.config().bn_momentum;
  const int w = layer.norm.width;
  auto rm = row_of(m.state, layer.norm.running_mean, w);
  auto rv = row_of(m.state, layer.norm.running_var, w);
  rm = mom * rm + (1.0 - mom) * tr.mean;
  rv = mom * rv + (1.0 - mom) * tr.var;
}

void init_dense(Eigen::VectorXd& w, const DenseSlot& s, double gain, Rng& rng) {
  const double stddev = std::sqrt(gain / s.in);
  const std::size_t n = static_cast<std::size_t>(s.in) * static_cast<std::size_t>(s.out);
  for (std::size_t i = 0; i < n; ++i) w[static_cast<Index>(s.weight + i)] = stddev * normal(rng);
  if (s.bias) row_of(w, *s.bias, s.out).setZero();
}

void init_point(Model& m, const PointLayer& p, Rng& rng) {
  init_dense(m.weights, p.dense, 2.0, rng);
  row_of(m.weights, p.norm.gamma, p.norm.width).setOnes();
  row_of(m.weights, p.norm.beta, p.norm.width).setZero();
  row_of(m.state, p.norm.running_mean, p.norm.width).setZero();
  row_of(m.state, p.norm.running_var, p.norm.width).setOnes();
}

void init_tnet(Model& m, const TransformNet& t, Rng& rng) {
  for (const auto& p : t.points) init_point(m, p, rng);
  init_dense(m.weights, t.fc_hidden, 2.0, rng);
  Eigen::Map<Matrix>(m.weights.data() + t.fc_out.weight, t.fc_out.in, t.fc_out.out).setZero();
  Eigen::Map<Matrix>(m.weights.data() + *t.fc_out.bias, t.k, t.k).setIdentity();
}

}  // namespace

// ---- config -------------------------------------------------------------------

void ModelConfig::validate() const {
  require(code_size >= 2, "code_size must be >= 2");
  require(decoder_points >= 4, "decoder_points must be >= 4");
  require(feature_width >= 1, "feature_width must be >= 1");
  require(!point_widths.empty(), "point_widths must not be empty");
  require(!tnet_point_widths.empty(), "tnet_point_widths must not be empty");
  require(tnet_fc_width >= 1, "tnet_fc_width must be >= 1");
  for (int w : point_widths) require(w >= 1, "widths must be >= 1");
  for (int w : head_widths) require(w >= 1, "widths must be >= 1");
  for (int w : decoder_widths) require(w >= 1, "widths must be >= 1");
  for (int w : tnet_point_widths) require(w >= 1, "widths must be >= 1");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
  require(bn_momentum >= 0.0 && bn_momentum <= 1.0, "bn_momentum must be in [0, 1]");
  require(bn_eps > 0.0, "bn_eps must be > 0");
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"code_size", c.code_size},
           {"decoder_points", c.decoder_points},
           {"feature_width", c.feature_width},
           {"point_widths", c.point_widths},
           {"head_widths", c.head_widths},
           {"decoder_widths", c.decoder_widths},
           {"tnet_point_widths", c.tnet_point_widths},
           {"tnet_fc_width", c.tnet_fc_width},
           {"input_transform", c.input_transform},
           {"feature_transform", c.feature_transform},
           {"dropout", c.dropout},
           {"bn_momentum", c.bn_momentum},
           {"bn_eps", c.bn_eps}};
}

void from_json(const json& j, ModelConfig& c) {
  const ModelConfig d;
  c.code_size = j.value("code_size", d.code_size);
  c.decoder_points = j.value("decoder_points", d.decoder_points);
  c.feature_width = j.value("feature_width", d.feature_width);
  c.point_widths = j.value("point_widths", d.point_widths);
  c.head_widths = j.value("head_widths", d.head_widths);
  c.decoder_widths = j.value("decoder_widths", d.decoder_widths);
  c.tnet_point_widths = j.value("tnet_point_widths", d.tnet_point_widths);
  c.tnet_fc_width = j.value("tnet_fc_width", d.tnet_fc_width);
  c.input_transform = j.value("input_transform", d.input_transform);
  c.feature_transform = j.value("feature_transform", d.feature_transform);
  c.dropout = j.value("dropout", d.dropout);
  c.bn_momentum = j.value("bn_momentum", d.bn_momentum);
  c.bn_eps = j.value("bn_eps", d.bn_eps);
}

// ---- layout / init --------------------------------------------------------------

Layout make_layout(const ModelConfig& c) {
  c.validate();
  Allocator alloc;
  Layout l;
  if (c.input_transform) l.input_tnet = alloc.tnet("input_tnet", 3, c);
  l.first = alloc.point("first", 3, c.feature_width);
  if (c.feature_transform) l.feature_tnet = alloc.tnet("feature_tnet", c.feature_width, c);
  int in = c.feature_width;
  for (std::size_t i = 0; i < c.point_widths.size(); ++i) {
    l.trunk.push_back(alloc.point("trunk" + std::to_string(i), in, c.point_widths[i]));
    in = c.point_widths[i];
  }
  for (std::size_t i = 0; i < c.head_widths.size(); ++i) {
    l.head.push_back(alloc.dense("head" + std::to_string(i), in, c.head_widths[i], true));
    in = c.head_widths[i];
  }
  l.head.push_back(alloc.dense("code", in, c.code_size, true));
  l.encoder_weight_count = alloc.weights;
  in = c.code_size;
  for (std::size_t i = 0; i < c.decoder_widths.size(); ++i) {
    l.decoder.push_back(alloc.dense("decoder" + std::to_string(i), in, c.decoder_widths[i], true));
    in = c.decoder_widths[i];
  }
  l.decoder.push_back(alloc.dense("decoder_out", in, 3 * c.decoder_points, true));
  l.weight_count = alloc.weights;
  l.state_count = alloc.state;
  return l;
}

Model::Model(ModelConfig config) : config_(std::move(config)), layout_(make_layout(config_)) {
  weights = Eigen::VectorXd::Zero(static_cast<Index>(layout_.weight_count));
  state = Eigen::VectorXd::Zero(static_cast<Index>(layout_.state_count));
}

Model init_params(const ModelConfig& config, std::uint64_t seed) {
  Model m(config);
  Rng rng(seed);
  const Layout& l = m.layout();
  if (l.input_tnet) init_tnet(m, *l.input_tnet, rng);
  init_point(m, l.first, rng);
  if (l.feature_tnet) init_tnet(m, *l.feature_tnet, rng);
  for (const auto& p : l.trunk) init_point(m, p, rng);
  for (std::size_t i = 0; i < l.head.size(); ++i) init_dense(m.weights, l.head[i], i + 1 < l.head.size() ? 2.0 : 1.0, rng);
  for (std::size_t i = 0; i < l.decoder.size(); ++i)
    init_dense(m.weights, l.decoder[i], i + 1 < l.decoder.size() ? 2.0 : 1.0, rng);
  return m;
}

DropoutMasks draw_dropout_masks(const ModelConfig& config, Rng& rng) {
  DropoutMasks masks;
  const double keep = 1.0 - config.dropout;
  for (int w : config.head_widths) {
    RowVec mask(w);
    for (int i = 0; i < w; ++i) mask(i) = uniform01(rng) < keep ? 1.0 / keep : 0.0;
    masks.push_back(std::move(mask));
  }
  return masks;
}

// ---- encoder --------------------------------------------------------------------

EncoderBatch encode_batch(const Model& m, std::span<const PointCloud* const> clouds, Mode mode,
                          std::span<const DropoutMasks* const> masks) {
  const Layout& l = m.layout();
  if (clouds.empty()) throw InvalidInput("encode: empty batch");
  if (!masks.empty() && masks.size() != clouds.size()) throw InvalidInput("encode: one mask set per cloud expected");
  for (const auto* mk : masks)
    if (mk && mk->size() != m.config().head_widths.size())
      throw InvalidInput("encode: dropout mask count does not match head layers");

  std::vector<Index> starts{0};
  for (const auto* c : clouds) {
    if (!c) throw InvalidInput("encode: null cloud");
    require_valid_cloud(*c, "encode");
    starts.push_back(starts.back() + c->rows());
  }
  const Index rows = starts.back();
  const auto n_clouds = static_cast<Index>(clouds.size());
  Matrix x(rows, 3);
  for (std::size_t b = 0; b < clouds.size(); ++b) x.middleRows(starts[b], clouds[b]->rows()) = *clouds[b];

  std::shared_ptr<EncoderTrace> tr;
  if (mode == Mode::train) {
    tr = std::make_shared<EncoderTrace>();
    tr->input = x;
    tr->starts = starts;
  }
  if (l.input_tnet) {
    if (tr) tr->input_tnet.emplace();
    x = apply_transforms(x, tnet_forward(m, *l.input_tnet, x, starts, mode, tr ? &*tr->input_tnet : nullptr), starts);
  }
  Matrix h = point_forward(m, l.first, x, mode, tr ? &tr->first : nullptr);
  if (l.feature_tnet) {
    if (tr) tr->feature_tnet.emplace();
    h = apply_transforms(h, tnet_forward(m, *l.feature_tnet, h, starts, mode, tr ? &*tr->feature_tnet : nullptr),
                         starts);
    check_finite(h, "feature_transform");
  }
  if (tr) tr->trunk.resize(l.trunk.size());
  for (std::size_t i = 0; i < l.trunk.size(); ++i) h = point_forward(m, l.trunk[i], h, mode, tr ? &tr->trunk[i] : nullptr);

  std::vector<std::vector<Index>> argmax;
  Matrix z = max_pool(h, starts, argmax);
  if (tr) tr->argmax = std::move(argmax);
  const std::size_t hidden = l.head.size() - 1;
  for (std::size_t i = 0; i < hidden; ++i) {
    if (tr) tr->head_in.push_back(z);
    z = dense_forward(m, l.head[i], z).cwiseMax(0.0);
    if (tr) tr->head_act.push_back(z);
    if (mode == Mode::train)
      for (std::size_t b = 0; b < masks.size(); ++b)
        if (masks[b]) z.row(static_cast<Index>(b)).array() *= (*masks[b])[i].array();
  }
  if (tr) tr->head_in.push_back(z);
  const Matrix code = dense_forward(m, l.head.back(), z);

  EncoderBatch out;
  std::vector<double> norms;
  for (Index b = 0; b < n_clouds; ++b) {
    // Scale first so huge finite codes do not overflow the norm. An all-zero
    // code has no direction; it maps to a fixed unit vector with zero gradient.
    const RowVec c = code.row(b);
    const double scale = c.cwiseAbs().maxCoeff();
    if (scale > 0.0) {
      const RowVec scaled = c / scale;
      const double n = scaled.norm();
      out.embeddings.push_back((scaled / n).transpose());
      norms.push_back(n * scale);
    } else {
      out.embeddings.push_back(Embedding::Constant(c.size(), 1.0 / std::sqrt(static_cast<double>(c.size()))));
      norms.push_back(0.0);
    }
  }
  if (tr) {
    for (std::size_t b = 0; b < clouds.size(); ++b)
      tr->masks.push_back(!masks.empty() && masks[b] ? *masks[b] : DropoutMasks{});
    tr->code_norm = std::move(norms);
    tr->embeddings = out.embeddings;
    out.trace = std::move(tr);
  }
  return out;
}

EncoderPass encode_pass(const Model& m, const PointCloud& cloud, Mode mode, const DropoutMasks* masks) {
  const PointCloud* c = &cloud;
  auto batch = encode_batch(m, {&c, 1}, mode, {&masks, 1});
  return {std::move(batch.embeddings[0]), std::move(batch.trace)};
}

Embedding encode(const Model& model, const PointCloud& cloud, Mode mode, const DropoutMasks* masks) {
  return encode_pass(model, cloud, mode, masks).embedding;
}

std::size_t batch_size(const EncoderTrace& tr) { return tr.embeddings.size(); }

void encoder_backward(const Model& m, const EncoderTrace& tr, std::span<const Eigen::VectorXd> d_embeddings,
                      Eigen::VectorXd& grad) {
  const Layout& l = m.layout();
  if (grad.size() != static_cast<Index>(l.weight_count)) throw InvalidInput("encoder_backward: gradient size mismatch");
  if (d_embeddings.size() != tr.embeddings.size()) throw InvalidInput("encoder_backward: one gradient per cloud expected");
  const auto n_clouds = static_cast<Index>(tr.embeddings.size());
  const Index code = m.config().code_size;

  Matrix d = Matrix::Zero(n_clouds, code);
  for (Index b = 0; b < n_clouds; ++b) {
    const Embedding& e = tr.embeddings[static_cast<std::size_t>(b)];
    const Eigen::VectorXd& de = d_embeddings[static_cast<std::size_t>(b)];
    if (de.size() != code) throw InvalidInput("encoder_backward: embedding gradient size mismatch");
    const double norm = tr.code_norm[static_cast<std::size_t>(b)];
    if (norm == 0.0) continue;
    d.row(b) = ((de - e * e.dot(de)) / norm).transpose();
  }
  if (d.isZero(0.0)) return;
  d = dense_backward(m, l.head.back(), tr.head_in.back(), d, grad);
  for (std::size_t i = l.head.size() - 1; i-- > 0;) {
    for (Index b = 0; b < n_clouds; ++b) {
      const auto& mk = tr.masks[static_cast<std::size_t>(b)];
      if (!mk.empty()) d.row(b).array() *= mk[i].array();
    }
    d = (tr.head_act[i].array() > 0.0).select(d, 0.0);
    d = dense_backward(m, l.head[i], tr.head_in[i], d, grad);
  }

  const Index rows = tr.input.rows();
  Matrix dh = unpool(d, tr.argmax, rows);
  for (std::size_t i = l.trunk.size(); i-- > 0;) dh = point_backward(m, l.trunk[i], tr.trunk[i], dh, grad);

  if (l.feature_tnet) {
    const TransformTrace& ft = *tr.feature_tnet;
    const std::vector<Matrix> d_transform = transform_grads(tr.first.output, dh, tr.starts);
    Matrix dh1 = transform_input_grad(dh, ft.transform, tr.starts);
    dh1 += tnet_backward(m, *l.feature_tnet, ft, d_transform, rows, grad);
    dh = std::move(dh1);
  }
  const Matrix dx = point_backward(m, l.first, tr.first, dh, grad);
  if (l.input_tnet)
    tnet_backward(m, *l.input_tnet, *tr.input_tnet, transform_grads(tr.input, dx, tr.starts), rows, grad);
}

void encoder_backward(const Model& m, const EncoderTrace& tr, const Eigen::VectorXd& d_embedding,
                      Eigen::VectorXd& grad) {
  encoder_backward(m, tr, std::span<const Eigen::VectorXd>(&d_embedding, 1), grad);
}

void update_running_stats(Model& m, const EncoderTrace& tr) {
  const Layout& l = m.layout();
  if (l.input_tnet)
    for (std::size_t i = 0; i < l.input_tnet->points.size(); ++i)
      blend_stats(m, l.input_tnet->points[i], tr.input_tnet->points[i]);
  blend_stats(m, l.first, tr.first);
  if (l.feature_tnet)
    for (std::size_t i = 0; i < l.feature_tnet->points.size(); ++i)
      blend_stats(m, l.feature_tnet->points[i], tr.feature_tnet->points[i]);
  for (std::size_t i = 0; i < l.trunk.size(); ++i) blend_stats(m, l.trunk[i], tr.trunk[i]);
}

// ---- decoder --------------------------------------------------------------------

DecoderPass decode_pass(const Model& m, const Embedding& e) {
  const Layout& l = m.layout();
  if (e.size() != m.config().code_size)
    throw InvalidInput("decode: embedding has dimension " + std::to_string(e.size()) + ", expected " +
                       std::to_string(m.config().code_size));
  if (!e.allFinite()) throw InvalidInput("decode: non-finite embedding");
  auto tr = std::make_shared<DecoderTrace>();
  RowVec x = e.transpose();
  for (std::size_t i = 0; i + 1 < l.decoder.size(); ++i) {
    tr->inputs.push_back(x);
    x = dense_forward(m, l.decoder[i], x).cwiseMax(0.0);
    tr->hidden.push_back(x);
  }
  tr->inputs.push_back(x);
  const RowVec out = dense_forward(m, l.decoder.back(), x);
  PointCloud cloud = Eigen::Map<const PointCloud>(out.data(), m.config().decoder_points, 3);
  return {std::move(cloud), std::move(tr)};
}

PointCloud decode(const Model& model, const Embedding& e) { return decode_pass(model, e).cloud; }

Eigen::VectorXd decoder_backward(const Model& m, const DecoderTrace& tr, const PointCloud& d_cloud,
                                 Eigen::VectorXd& grad) {
  const Layout& l = m.layout();
  if (grad.size() != static_cast<Index>(l.weight_count)) throw InvalidInput("decoder_backward: gradient size mismatch");
  if (d_cloud.rows() != m.config().decoder_points) throw InvalidInput("decoder_backward: cloud gradient shape mismatch");
  RowVec d = Eigen::Map<const RowVec>(d_cloud.data(), d_cloud.size());
  d = dense_backward(m, l.decoder.back(), tr.inputs.back(), d, grad);
  for (std::size_t i = l.decoder.size() - 1; i-- > 0;) {
    d = (tr.hidden[i].array() > 0.0).select(d, 0.0);
    d = dense_backward(m, l.decoder[i], tr.inputs[i], d, grad);
  }
  return d.transpose();
}

}  // namespace p2v
