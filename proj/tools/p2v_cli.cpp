#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "p2v/checkpoint.hpp"
#include "p2v/context_sampler.hpp"
#include "p2v/embeddings_io.hpp"
#include "p2v/errors.hpp"
#include "p2v/eval.hpp"
#include "p2v/ingest.hpp"
#include "p2v/synthetic.hpp"
#include "p2v/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace p2v;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

// Bad flags or config values detected after parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw UsageError("cannot open config file " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError(p.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& p, const json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw LoadError(p.string() + ": cannot write");
  out << j.dump(2) << '\n';
}

// Prints to stdout, and to `out` when given.
void emit_json(const std::optional<std::string>& out, const json& j) {
  if (out) write_json_file(*out, j);
  std::cout << j.dump(2) << '\n';
}

template <class T>
void set_if(const std::optional<T>& flag, T& target) {
  if (flag) target = *flag;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << v;
  return ss.str();
}

// ---- data options ------------------------------------------------------------

struct DataOptions {
  fs::path root;
  LoadOptions load;
};

json data_json(const DataOptions& d) {
  return json{{"root", fs::absolute(d.root).string()},
              {"points_per_instance", d.load.points_per_instance},
              {"seed", d.load.seed},
              {"n_val", d.load.n_val},
              {"n_test", d.load.n_test}};
}

struct DataFlags {
  std::string root;
  std::optional<std::size_t> points;
  std::optional<std::uint64_t> data_seed;
  std::optional<int> n_val, n_test;

  void add(CLI::App* app, bool required = true) {
    auto* o = app->add_option("--data", root, "Dataset root (one directory per scene)");
    if (required) o->required();
    app->add_option("--points", points, "Points per instance after resampling (default 1000)");
    app->add_option("--data-seed", data_seed, "Seed for resampling and the scene split (default 0)");
    app->add_option("--n-val", n_val, "Validation scenes when no split.json exists (default 1)");
    app->add_option("--n-test", n_test, "Test scenes when no split.json exists (default 1)");
  }

  DataOptions resolve(const json& config) const {
    DataOptions d;
    const json j = config.value("data", json::object());
    d.root = root.empty() ? fs::path(j.value("root", std::string())) : fs::path(root);
    d.load.points_per_instance = j.value("points_per_instance", d.load.points_per_instance);
    d.load.seed = j.value("seed", d.load.seed);
    d.load.n_val = j.value("n_val", d.load.n_val);
    d.load.n_test = j.value("n_test", d.load.n_test);
    set_if(points, d.load.points_per_instance);
    set_if(data_seed, d.load.seed);
    set_if(n_val, d.load.n_val);
    set_if(n_test, d.load.n_test);
    if (d.root.empty()) throw UsageError("--data is required");
    if (d.load.points_per_instance == 0) throw UsageError("--points must be positive");
    return d;
  }
};

Dataset load(const DataOptions& d) {
  auto result = load_dataset(d.root, d.load);
  for (const auto& w : result.warnings)
    std::cerr << "warning: " << w.scene_id << "/" << w.instance_id << ": " << w.reason << '\n';
  return std::move(result.dataset);
}

fs::path cache_dir_for(const fs::path& data_root) {
  if (const char* env = std::getenv("P2V_CACHE_DIR"); env && *env) return env;
  return data_root / ".p2v_cache";
}

fs::path cache_path_for(const DataOptions& d, std::span<const InstanceRecord> inst, const SamplerParams& p) {
  return cache_dir_for(d.root) / ("similarity_" + hex64(cache_content_hash(inst, p)) + ".json");
}

std::optional<Split> parse_split(const std::string& s) {
  if (s == "all") return std::nullopt;
  try {
    return split_from_string(s);
  } catch (const InvalidInput& e) {
    throw UsageError(std::string(e.what()) + " (expected train, validation, test or all)");
  }
}

// ---- training options ----------------------------------------------------------

struct TrainFlags {
  std::optional<std::string> config;
  std::optional<std::string> mode;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs, batch_size, code_size, decoder_points, k_close, k_similar, grid_steps, checkpoint_every,
      workers;
  std::optional<double> lr, alpha, lambda, clip_norm;
  bool reconstruct_all = false;

  void add(CLI::App* app) {
    app->add_option("--config", config, "JSON config file; flags override its values");
    app->add_option("--mode", mode, "points2vec | autoencoder_only | margin_only")
        ->check(CLI::IsMember({"points2vec", "autoencoder_only", "margin_only"}));
    app->add_option("--seed", seed, "Training seed");
    app->add_option("--epochs", epochs, "Epochs (default 4000)");
    app->add_option("--batch-size", batch_size, "Quadruples per step (default 20)");
    app->add_option("--lr", lr, "Adam learning rate (default 1e-4)");
    app->add_option("--alpha", alpha, "Margin (default 1)");
    app->add_option("--lambda", lambda, "Margin-to-reconstruction weight (default 10)");
    app->add_option("--code-size", code_size, "Embedding dimension (default 256)");
    app->add_option("--decoder-points", decoder_points, "Points emitted by the decoder (default 1024)");
    app->add_option("--k-close", k_close, "Close candidates per anchor (default 10)");
    app->add_option("--k-similar", k_similar, "Similar candidates per anchor (default 10)");
    app->add_option("--grid-steps", grid_steps, "Rotation grid size for the similarity search (default 36)");
    app->add_option("--clip-norm", clip_norm, "Global gradient-norm clip (off unless set; 10 is a sane value)");
    app->add_option("--checkpoint-every", checkpoint_every, "Checkpoint cadence in epochs (default 100)");
    app->add_option("--workers", workers, "Worker threads (default 1)");
    app->add_flag("--reconstruct-all", reconstruct_all, "Reconstruct all four clouds of a quadruple");
  }

  json config_json() const { return config ? read_json_file(*config) : json::object(); }

  TrainConfig resolve(const json& j) const {
    TrainConfig c;
    try {
      c = j.get<TrainConfig>();
      if (mode) c.mode = train_mode_from_string(*mode);
    } catch (const std::exception& e) {
      throw UsageError(std::string("config: ") + e.what());
    }
    set_if(seed, c.seed);
    set_if(epochs, c.epochs);
    set_if(batch_size, c.batch_size);
    set_if(lr, c.learning_rate);
    set_if(alpha, c.alpha);
    set_if(lambda, c.lambda);
    set_if(code_size, c.model.code_size);
    set_if(decoder_points, c.model.decoder_points);
    set_if(k_close, c.sampler.k_close);
    set_if(k_similar, c.sampler.k_similar);
    set_if(grid_steps, c.sampler.grid_steps);
    set_if(checkpoint_every, c.checkpoint_every);
    set_if(workers, c.workers);
    if (clip_norm) c.clip_norm = *clip_norm;
    if (reconstruct_all) c.reconstruct_all = true;
    try {
      c.validate();
    } catch (const InvalidInput& e) {
      throw UsageError(e.what());
    }
    return c;
  }
};

// ---- subcommands -----------------------------------------------------------------

struct SyntheticFlags {
  std::string out;
  std::optional<std::string> spec_file;
  std::optional<int> scenes, per_scene;
  std::optional<std::size_t> points;
  std::optional<double> radius, separation;
  std::uint64_t seed = 0;
  int n_val = 1, n_test = 1;
  bool no_rotation = false;
};

int cmd_make_synthetic(const SyntheticFlags& f) {
  SyntheticSpec spec = SyntheticSpec::default_fixture();
  if (f.spec_file) {
    try {
      spec = read_json_file(*f.spec_file).get<SyntheticSpec>();
    } catch (const json::exception& e) {
      throw UsageError(std::string("spec: ") + e.what());
    }
  }
  set_if(f.scenes, spec.scenes);
  set_if(f.per_scene, spec.instances_per_scene);
  set_if(f.points, spec.points_per_instance);
  set_if(f.radius, spec.group_radius);
  set_if(f.separation, spec.group_separation);
  if (f.no_rotation) spec.random_rotation = false;
  try {
    spec.validate();
  } catch (const InvalidInput& e) {
    throw UsageError(e.what());
  }
  const fs::path root = f.out;
  const auto dirs = generate_synthetic_scenes(spec, root, f.seed);
  std::vector<std::string> ids;
  for (const auto& d : dirs) ids.push_back(d.filename().string());
  write_split_file(root / "split.json", make_split(ids, f.n_val, f.n_test, f.seed));
  json spec_json = spec;
  write_json_file(root / "synthetic.json", json{{"spec", spec_json}, {"seed", f.seed}, {"n_val", f.n_val}, {"n_test", f.n_test}});
  std::cout << "wrote " << dirs.size() << " scenes to " << root.string() << '\n';
  return 0;
}

int cmd_ingest(const DataFlags& df, const std::string& out) {
  const DataOptions d = df.resolve(json::object());
  const auto result = load_dataset(d.root, d.load);
  write_dataset(out, result.dataset);
  std::ofstream warn(fs::path(out) / "warnings.jsonl");
  for (const auto& w : result.warnings) {
    warn << json{{"scene_id", w.scene_id}, {"instance_id", w.instance_id}, {"reason", w.reason}}.dump() << '\n';
    std::cerr << "warning: " << w.scene_id << "/" << w.instance_id << ": " << w.reason << '\n';
  }
  std::size_t scenes = result.dataset.split.size();
  std::cout << "ingested " << result.dataset.instances.size() << " instances from " << scenes << " scenes ("
            << result.warnings.size() << " skipped) into " << out << '\n';
  return 0;
}

int cmd_precompute(const DataFlags& df, const TrainFlags& tf, const std::optional<std::string>& cache_out) {
  const json cfg = tf.config_json();
  const DataOptions d = df.resolve(cfg);
  const TrainConfig tc = tf.resolve(cfg);
  const Dataset ds = load(d);
  const auto inst = ds.subset(Split::train);
  const fs::path path = cache_out ? fs::path(*cache_out) : cache_path_for(d, inst, tc.sampler);
  const auto cache = load_or_build_cache(path, inst, tc.sampler, tc.workers);
  std::cout << "similarity cache for " << cache.size() << " training instances: " << path.string() << '\n';
  return 0;
}

int cmd_train(const DataFlags& df, const TrainFlags& tf, const std::string& out_flag) {
  const json cfg = tf.config_json();
  const DataOptions d = df.resolve(cfg);
  const TrainConfig tc = tf.resolve(cfg);
  const std::string out = out_flag.empty() ? cfg.value("out", std::string()) : out_flag;
  if (out.empty()) throw UsageError("--out is required (or \"out\" in the config file)");
  const Dataset ds = load(d);
  const auto inst = ds.subset(Split::train);
  if (inst.size() < 4) throw InvalidInput("training split has " + std::to_string(inst.size()) + " instances; need 4");

  const fs::path run = out;
  fs::create_directories(run);
  json effective = tc;
  effective["data"] = data_json(d);
  effective["out"] = fs::absolute(run).string();
  write_json_file(run / "config.json", effective);

  TrainIO io;
  io.checkpoint_path = run / "checkpoint.p2vk";
  io.log_path = run / "train_log.jsonl";
  if (fs::exists(*io.log_path)) fs::remove(*io.log_path);
  if (tc.mode != TrainMode::autoencoder_only) io.cache_path = cache_path_for(d, inst, tc.sampler);
  const int report_every = std::max(1, tc.epochs / 20);
  io.on_epoch = [&](const EpochLog& e) {
    if (e.epoch % report_every != 0 && e.epoch != tc.epochs) return;
    std::cerr << "epoch " << e.epoch << "/" << tc.epochs << "  total " << e.total;
    if (e.margin_loss) std::cerr << "  margin " << *e.margin_loss;
    if (e.reconstruction_loss) std::cerr << "  rec " << *e.reconstruction_loss;
    std::cerr << "  (" << e.wall_time << " s)\n";
  };
  train(std::span<const InstanceRecord>(inst), tc, io);
  std::cout << "checkpoint: " << io.checkpoint_path->string() << "\nlog: " << io.log_path->string() << '\n';
  return 0;
}

int cmd_embed(const DataFlags& df, const std::string& checkpoint, const std::string& split, const std::string& out) {
  const DataOptions d = df.resolve(json::object());
  const auto s = parse_split(split);
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Dataset ds = load(d);
  const auto items = embed_dataset(ck.model, ds, s);
  write_embeddings(out, items);
  std::cout << "wrote " << items.size() << " embeddings to " << out << '\n';
  return 0;
}

std::vector<EmbeddingRecord> read_nonempty_embeddings(const std::string& path) {
  auto items = read_embeddings(path);
  if (items.empty()) throw InvalidInput(path + ": no embeddings");
  return items;
}

int cmd_eval_cluster(const std::string& emb, std::uint64_t seed, int restarts, const std::optional<std::string>& out) {
  const auto items = read_nonempty_embeddings(emb);
  const auto labels = labels_of(items);
  const auto rep = ari_km_report(stack(items), labels, seed, restarts);
  json j = to_json(rep);
  j["n"] = items.size();
  j["seed"] = seed;
  j["restarts"] = restarts;
  emit_json(out, j);
  return 0;
}

int cmd_eval_distances(const std::string& emb, const std::vector<std::string>& classes,
                       const std::optional<std::string>& out) {
  const auto items = read_nonempty_embeddings(emb);
  const auto labels = labels_of(items);
  emit_json(out, to_json(cosine_distance_matrix(stack(items), labels, classes)));
  return 0;
}

std::vector<PointCloud> clouds_of(const Dataset& ds, std::optional<Split> s) {
  std::vector<PointCloud> out;
  for (std::size_t i = 0; i < ds.instances.size(); ++i)
    if (!s || ds.split.at(ds.instances[i].scene_id) == *s) out.push_back(ds.instances[i].cloud);
  return out;
}

int cmd_eval_recon(const DataFlags& df, const std::string& checkpoint, const std::string& split,
                   const std::optional<std::string>& out) {
  const DataOptions d = df.resolve(json::object());
  const auto s = parse_split(split);
  const Checkpoint ck = load_checkpoint(checkpoint);
  const auto clouds = clouds_of(load(d), s);
  if (clouds.empty()) throw InvalidInput("no instances in split '" + split + "'");
  emit_json(out, json{{"acd", acd(ck.model, clouds)}, {"n", clouds.size()}, {"split", split}});
  return 0;
}

void write_point_ply(const fs::path& p, const PointCloud& c) {
  std::ofstream out(p);
  if (!out) throw LoadError(p.string() + ": cannot write");
  out << "ply\nformat ascii 1.0\nelement vertex " << c.rows()
      << "\nproperty float x\nproperty float y\nproperty float z\nend_header\n"
      << std::setprecision(9);
  for (Eigen::Index i = 0; i < c.rows(); ++i) out << c(i, 0) << ' ' << c(i, 1) << ' ' << c(i, 2) << '\n';
}

const InstanceRecord& find_instance(const Dataset& ds, const std::string& id) {
  const InstanceRecord* hit = nullptr;
  int matches = 0;
  for (const auto& r : ds.instances) {
    if (r.scene_id + "/" + r.instance_id == id) return r;
    if (r.instance_id == id) {
      hit = &r;
      ++matches;
    }
  }
  if (matches == 0) throw InvalidInput("unknown instance '" + id + "'");
  if (matches > 1) throw InvalidInput("instance id '" + id + "' is ambiguous; use scene_id/instance_id");
  return *hit;
}

int cmd_interpolate(const DataFlags& df, const std::string& checkpoint, const std::string& from, const std::string& to,
                    int steps, const std::string& out) {
  const DataOptions d = df.resolve(json::object());
  if (steps < 2) throw UsageError("--steps must be >= 2");
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Dataset ds = load(d);
  const auto& a = find_instance(ds, from);
  const auto& b = find_instance(ds, to);
  const auto path = interpolate(ck.model, encode(ck.model, a.cloud), encode(ck.model, b.cloud), steps);
  fs::create_directories(out);
  json index = json::array();
  for (std::size_t i = 0; i < path.size(); ++i) {
    json entry{{"t", path[i].t}};
    if (path[i].cloud) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%03zu.ply", i);
      write_point_ply(fs::path(out) / name, *path[i].cloud);
      entry["file"] = name;
    } else {
      entry["note"] = path[i].note;
      std::cerr << "warning: t=" << path[i].t << ": " << path[i].note << '\n';
    }
    index.push_back(entry);
  }
  write_json_file(fs::path(out) / "interpolation.json",
                  json{{"from", a.scene_id + "/" + a.instance_id}, {"to", b.scene_id + "/" + b.instance_id}, {"steps", index}});
  std::cout << "wrote " << path.size() << " steps to " << out << '\n';
  return 0;
}

int cmd_query(const std::string& emb, const std::string& id, int top_k) {
  if (top_k < 1) throw UsageError("--top-k must be >= 1");
  const auto items = read_nonempty_embeddings(emb);
  const auto ids = qualified_ids(items);
  const std::string q = resolve_id(items, id);
  const auto res = query_similar(ids, stack(items), q, top_k);
  std::map<std::string, std::string> label_of;
  for (const auto& it : items) label_of[it.scene_id + "/" + it.instance_id] = it.label.value_or("-");
  std::cout << "rank\tid\tlabel\tcosine_distance\n";
  for (std::size_t i = 0; i < res.size(); ++i)
    std::cout << i + 1 << '\t' << res[i].id << '\t' << label_of[res[i].id] << '\t' << std::setprecision(6)
              << res[i].distance << '\n';
  return 0;
}

int cmd_report(const DataFlags& df, const std::string& checkpoint, const std::string& split, std::uint64_t seed,
               int restarts, int angle_bins, int grid_bins, const std::string& out) {
  const DataOptions d = df.resolve(json::object());
  const auto s = parse_split(split);
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Dataset ds = load(d);
  const auto items = embed_dataset(ck.model, ds, s);
  if (items.size() < 3) throw InvalidInput("report needs at least 3 instances in split '" + split + "'");

  std::vector<EmbeddingRecord> recs;
  for (const auto& it : items) recs.push_back({it.record.scene_id, it.record.instance_id, it.record.label, it.embedding});
  const EmbeddingMatrix x = stack(recs);
  const auto labels = labels_of(recs);
  std::vector<PointCloud> clouds;
  for (const auto& it : items) clouds.push_back(it.record.cloud);

  const fs::path dir = out;
  fs::create_directories(dir);
  write_embeddings(dir / "embeddings.jsonl", recs);

  json rep;
  rep["checkpoint"] = checkpoint;
  rep["checkpoint_meta"] = ck.meta;
  rep["data"] = data_json(d);
  rep["split"] = split;
  rep["n"] = items.size();
  rep["cluster"] = to_json(ari_km_report(x, labels, seed, restarts));
  rep["cluster"]["seed"] = seed;
  rep["cluster"]["restarts"] = restarts;
  rep["distances"] = to_json(cosine_distance_matrix(x, labels));
  rep["reconstruction"] = json{{"acd", acd(ck.model, clouds)}, {"n", clouds.size()}, {"split", split}};
  const PcaResult pca = pca_project(x, 2);
  rep["pca"] = to_json(pca);

  {
    std::ofstream csv(dir / "pca_2d.csv");
    csv << "scene_id,instance_id,label,pc1,pc2\n" << std::setprecision(9);
    for (std::size_t i = 0; i < recs.size(); ++i)
      csv << recs[i].scene_id << ',' << recs[i].instance_id << ',' << recs[i].label.value_or("") << ','
          << pca.projected(static_cast<Eigen::Index>(i), 0) << ',' << pca.projected(static_cast<Eigen::Index>(i), 1)
          << '\n';
  }
  const Heatmap h = pca_heatmap(x, angle_bins, grid_bins);
  {
    std::ofstream csv(dir / "heatmap_angles.csv");
    csv << "bin,angle_start,angle_end,count\n" << std::setprecision(9);
    for (int b = 0; b < angle_bins; ++b)
      csv << b << ',' << -M_PI + 2 * M_PI * b / angle_bins << ',' << -M_PI + 2 * M_PI * (b + 1) / angle_bins << ','
          << h.angle_counts[static_cast<std::size_t>(b)] << '\n';
  }
  {
    std::ofstream csv(dir / "heatmap_grid.csv");
    csv << "row,col,count\n";
    for (int r = 0; r < grid_bins; ++r)
      for (int c = 0; c < grid_bins; ++c)
        csv << r << ',' << c << ',' << h.grid[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] << '\n';
  }
  rep["heatmap"] = json{{"angle_counts", h.angle_counts},
                        {"grid", h.grid},
                        {"x_range", {h.x_min, h.x_max}},
                        {"y_range", {h.y_min, h.y_max}}};
  write_json_file(dir / "report.json", rep);
  std::cout << "ARI-KM " << rep["cluster"]["ari"].get<double>() << "  ACD " << rep["reconstruction"]["acd"].get<double>()
            << "  intra " << rep["distances"]["intra_mean"].get<double>() << "  inter "
            << rep["distances"]["inter_mean"].get<double>() << "\nreport: " << (dir / "report.json").string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"p2v: context-aware embeddings of segmented 3D objects"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  std::function<int()> run;

  // make-synthetic
  SyntheticFlags syn;
  auto* c_syn = app.add_subcommand("make-synthetic", "Generate the synthetic scene fixture");
  c_syn->add_option("--out", syn.out, "Output root")->required();
  c_syn->add_option("--spec", syn.spec_file, "JSON spec (classes, groups, layout); flags override it");
  c_syn->add_option("--scenes", syn.scenes, "Number of scenes (default 12)");
  c_syn->add_option("--instances-per-scene", syn.per_scene, "Instances per scene (default 10)");
  c_syn->add_option("--points", syn.points, "Points per instance (default 1000)");
  c_syn->add_option("--group-radius", syn.radius, "Radius around each group center (default 1)");
  c_syn->add_option("--group-separation", syn.separation, "Minimum distance between group centers (default 6)");
  c_syn->add_option("--seed", syn.seed, "Generator and split seed (default 0)");
  c_syn->add_option("--n-val", syn.n_val, "Validation scenes (default 1)");
  c_syn->add_option("--n-test", syn.n_test, "Test scenes (default 1)");
  c_syn->add_flag("--no-rotation", syn.no_rotation, "Keep shapes axis-aligned");
  c_syn->callback([&] { run = [&] { return cmd_make_synthetic(syn); }; });

  // ingest
  DataFlags ing_data;
  std::string ing_out;
  auto* c_ing = app.add_subcommand("ingest", "Load manifests/meshes and write a normalized points dataset");
  ing_data.add(c_ing);
  c_ing->add_option("--out", ing_out, "Output root")->required();
  c_ing->callback([&] { run = [&] { return cmd_ingest(ing_data, ing_out); }; });

  // precompute-sim
  DataFlags pre_data;
  TrainFlags pre_train;
  std::optional<std::string> pre_cache;
  auto* c_pre = app.add_subcommand("precompute-sim", "Build the close/similar candidate cache for the train split");
  pre_data.add(c_pre, false);
  pre_train.add(c_pre);
  c_pre->add_option("--cache", pre_cache, "Cache file (default: $P2V_CACHE_DIR or <data>/.p2v_cache)");
  c_pre->callback([&] { run = [&] { return cmd_precompute(pre_data, pre_train, pre_cache); }; });

  // train
  DataFlags tr_data;
  TrainFlags tr_train;
  std::string tr_out;
  auto* c_tr = app.add_subcommand("train", "Train a model; writes config.json, checkpoint.p2vk, train_log.jsonl");
  tr_data.add(c_tr, false);
  tr_train.add(c_tr);
  c_tr->add_option("--out", tr_out, "Run directory (or \"out\" in the config file)");
  c_tr->callback([&] { run = [&] { return cmd_train(tr_data, tr_train, tr_out); }; });

  // embed
  DataFlags em_data;
  std::string em_ckpt, em_split = "all", em_out;
  auto* c_em = app.add_subcommand("embed", "Encode instances to a JSON-lines embeddings file");
  em_data.add(c_em);
  c_em->add_option("--checkpoint", em_ckpt, "Checkpoint file")->required();
  c_em->add_option("--split", em_split, "train | validation | test | all (default all)");
  c_em->add_option("--out", em_out, "Output .jsonl")->required();
  c_em->callback([&] { run = [&] { return cmd_embed(em_data, em_ckpt, em_split, em_out); }; });

  // eval-cluster
  std::string cl_emb;
  std::uint64_t cl_seed = 0;
  int cl_restarts = 10;
  std::optional<std::string> cl_out;
  auto* c_cl = app.add_subcommand("eval-cluster", "k-means over embeddings, adjusted Rand index against labels");
  c_cl->add_option("--embeddings", cl_emb, "Embeddings .jsonl")->required();
  c_cl->add_option("--seed", cl_seed, "k-means seed (default 0)");
  c_cl->add_option("--restarts", cl_restarts, "k-means restarts (default 10)")->check(CLI::PositiveNumber);
  c_cl->add_option("--out", cl_out, "Also write the JSON report here");
  c_cl->callback([&] { run = [&] { return cmd_eval_cluster(cl_emb, cl_seed, cl_restarts, cl_out); }; });

  // eval-distances
  std::string di_emb;
  std::vector<std::string> di_classes;
  std::optional<std::string> di_out;
  auto* c_di = app.add_subcommand("eval-distances", "Averaged cosine distances between classes");
  c_di->add_option("--embeddings", di_emb, "Embeddings .jsonl")->required();
  c_di->add_option("--classes", di_classes, "Class subset (comma separated)")->delimiter(',');
  c_di->add_option("--out", di_out, "Also write the JSON report here");
  c_di->callback([&] { run = [&] { return cmd_eval_distances(di_emb, di_classes, di_out); }; });

  // eval-recon
  DataFlags re_data;
  std::string re_ckpt, re_split = "test";
  std::optional<std::string> re_out;
  auto* c_re = app.add_subcommand("eval-recon", "Averaged chamfer distance of reconstructions");
  re_data.add(c_re);
  c_re->add_option("--checkpoint", re_ckpt, "Checkpoint file")->required();
  c_re->add_option("--split", re_split, "train | validation | test | all (default test)");
  c_re->add_option("--out", re_out, "Also write the JSON report here");
  c_re->callback([&] { run = [&] { return cmd_eval_recon(re_data, re_ckpt, re_split, re_out); }; });

  // interpolate
  DataFlags in_data;
  std::string in_ckpt, in_from, in_to, in_out;
  int in_steps = 8;
  auto* c_in = app.add_subcommand("interpolate", "Decode points along the path between two embeddings");
  in_data.add(c_in);
  c_in->add_option("--checkpoint", in_ckpt, "Checkpoint file")->required();
  c_in->add_option("--from", in_from, "Start instance (scene/instance or unique instance id)")->required();
  c_in->add_option("--to", in_to, "End instance")->required();
  c_in->add_option("--steps", in_steps, "Number of steps including endpoints (default 8)");
  c_in->add_option("--out", in_out, "Output directory for step_XXX.ply files")->required();
  c_in->callback([&] { run = [&] { return cmd_interpolate(in_data, in_ckpt, in_from, in_to, in_steps, in_out); }; });

  // query
  std::string qu_emb, qu_id;
  int qu_k = 5;
  auto* c_qu = app.add_subcommand("query", "Nearest instances by cosine distance");
  c_qu->add_option("--embeddings", qu_emb, "Embeddings .jsonl")->required();
  c_qu->add_option("--id", qu_id, "Query instance (scene/instance or unique instance id)")->required();
  c_qu->add_option("--top-k", qu_k, "Rows to print (default 5)");
  c_qu->callback([&] { run = [&] { return cmd_query(qu_emb, qu_id, qu_k); }; });

  // report
  DataFlags rp_data;
  std::string rp_ckpt, rp_split = "test", rp_out;
  std::uint64_t rp_seed = 0;
  int rp_restarts = 10, rp_angle_bins = 36, rp_grid_bins = 20;
  auto* c_rp = app.add_subcommand("report", "All metrics for one split: clustering, distances, ACD, PCA, heatmap");
  rp_data.add(c_rp);
  c_rp->add_option("--checkpoint", rp_ckpt, "Checkpoint file")->required();
  c_rp->add_option("--split", rp_split, "train | validation | test | all (default test)");
  c_rp->add_option("--seed", rp_seed, "k-means seed (default 0)");
  c_rp->add_option("--restarts", rp_restarts, "k-means restarts (default 10)")->check(CLI::PositiveNumber);
  c_rp->add_option("--angle-bins", rp_angle_bins, "Heatmap angle bins (default 36)")->check(CLI::PositiveNumber);
  c_rp->add_option("--grid-bins", rp_grid_bins, "Heatmap grid bins per axis (default 20)")->check(CLI::PositiveNumber);
  c_rp->add_option("--out", rp_out, "Output directory")->required();
  c_rp->callback([&] {
    run = [&] { return cmd_report(rp_data, rp_ckpt, rp_split, rp_seed, rp_restarts, rp_angle_bins, rp_grid_bins, rp_out); };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitUsage;
  }

  try {
    return run();
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\nrun with --help for options\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}
