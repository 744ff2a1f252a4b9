#include "p2v/checkpoint.hpp"

#include <bit>
#include <fstream>

#include "p2v/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace p2v {

namespace {

constexpr char kMagic[4] = {'P', '2', 'V', 'K'};
constexpr std::uint32_t kVersion = 1;

template <class U>
void put(std::ostream& out, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <class U>
U get(std::istream& in, const fs::path& path) {
  unsigned char b[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(U))) throw LoadError(path.string() + ": truncated checkpoint");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

void put_vector(std::ostream& out, const Eigen::VectorXd& v) {
  put<std::uint64_t>(out, static_cast<std::uint64_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v[i]));
}

void get_vector(std::istream& in, const fs::path& path, Eigen::VectorXd& v) {
  const auto n = get<std::uint64_t>(in, path);
  if (n != static_cast<std::uint64_t>(v.size()))
    throw LoadError(path.string() + ": parameter count " + std::to_string(n) + " does not match the model config (" +
                    std::to_string(v.size()) + ")");
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = std::bit_cast<double>(get<std::uint64_t>(in, path));
}

}  // namespace

void save_checkpoint(const fs::path& path, const Model& model, const json& meta) {
  json header = meta.is_object() ? meta : json::object();
  header["model"] = model.config();
  const std::string text = header.dump();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw LoadError(tmp.string() + ": cannot write checkpoint");
    out.write(kMagic, 4);
    put<std::uint32_t>(out, kVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    put_vector(out, model.weights);
    put_vector(out, model.state);
    if (!out) throw LoadError(tmp.string() + ": write failed");
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(path.string() + ": cannot open checkpoint");
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != std::string_view(kMagic, 4))
    throw LoadError(path.string() + ": not a checkpoint (bad magic)");
  const auto version = get<std::uint32_t>(in, path);
  if (version != kVersion) throw LoadError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  const auto len = get<std::uint32_t>(in, path);
  std::string text(len, '\0');
  if (!in.read(text.data(), len)) throw LoadError(path.string() + ": truncated header");
  json meta;
  try {
    meta = json::parse(text);
  } catch (const json::exception& e) {
    throw LoadError(path.string() + ": bad header: " + e.what());
  }
  Checkpoint ck{Model(meta.at("model").get<ModelConfig>()), meta};
  ck.meta.erase("model");
  get_vector(in, path, ck.model.weights);
  get_vector(in, path, ck.model.state);
  return ck;
}

}  // namespace p2v
