#include "vasa/serialize.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

namespace vasa {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'V', 'T', 'N', 'S'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  require(in.good(), "truncated tensor stream");
  return v;
}

std::string tensor_file_name(const std::string& name) {
  std::string f = name;
  for (char& c : f) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) c = '_';
  }
  return f + ".vt";
}

}  // namespace

void save_tensor(std::ostream& out, const Tensor& t) {
  out.write(kMagic, 4);
  write_pod(out, kVersion);
  write_pod(out, static_cast<uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) write_pod(out, static_cast<int64_t>(t.dim(i)));
  out.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
  require(out.good(), "tensor write failed");
}

Tensor load_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  require(in.good() && std::memcmp(magic, kMagic, 4) == 0, "bad tensor magic");
  uint32_t version = read_pod<uint32_t>(in);
  require(version == kVersion, "unsupported tensor version");
  uint32_t rank = read_pod<uint32_t>(in);
  require(rank <= 8, "tensor rank too large");
  Shape shape(rank);
  for (uint32_t i = 0; i < rank; ++i) {
    shape[i] = read_pod<int64_t>(in);
    require(shape[i] >= 0, "negative tensor dim");
  }
  Tensor t(shape);
  in.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.numel() * sizeof(double)));
  require(in.good(), "truncated tensor data");
  return t;
}

void save_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "cannot write tensor file: " + path);
  save_tensor(f, t);
}

Tensor load_tensor_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "cannot open tensor file: " + path);
  return load_tensor(f);
}

void Checkpoint::save(const std::string& dir) const {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "vasa-checkpoint";
  manifest["version"] = 1;
  json cfg = json::object();
  for (const std::string& k : config.keys()) cfg[k] = config.get_str(k);
  manifest["config"] = cfg;
  manifest["meta"] = meta;
  json table = json::array();
  for (const auto& [name, t] : tensors) {
    std::string file = tensor_file_name(name);
    save_tensor_file((fs::path(dir) / file).string(), t);
    json row;
    row["name"] = name;
    row["file"] = file;
    row["shape"] = t.shape();
    table.push_back(row);
  }
  manifest["tensors"] = table;
  std::ofstream f(fs::path(dir) / "manifest.json");
  require(f.good(), "cannot write manifest in " + dir);
  f << manifest.dump(2) << "\n";
}

Checkpoint Checkpoint::load(const std::string& dir) {
  std::ifstream f(fs::path(dir) / "manifest.json");
  require(f.good(), "cannot open checkpoint manifest in " + dir);
  json manifest = json::parse(f);
  require(manifest.value("format", "") == "vasa-checkpoint", "not a checkpoint manifest");
  Checkpoint ck;
  for (auto& [k, v] : manifest.at("config").items()) ck.config.set(k, v.get<std::string>());
  ck.meta = manifest.value("meta", json::object());
  for (const json& row : manifest.at("tensors")) {
    std::string name = row.at("name").get<std::string>();
    std::string file = row.at("file").get<std::string>();
    Tensor t = load_tensor_file((fs::path(dir) / file).string());
    Shape expect = row.at("shape").get<Shape>();
    require(t.shape() == expect, "manifest shape mismatch for tensor " + name);
    ck.tensors.emplace(std::move(name), std::move(t));
  }
  return ck;
}

}  // namespace vasa
