#include "semiseg/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

namespace semiseg::io {
namespace fs = std::filesystem;
namespace {

constexpr char kMagic[8] = {'S', 'S', 'C', 'K', 'P', 'T', '0', '1'};

void put_le_f32(std::vector<char>& out, const Tensor<float>& t) {
  const std::size_t base = out.size();
  out.resize(base + sizeof(float) * static_cast<std::size_t>(t.numel()));
  std::memcpy(out.data() + base, t.data(), sizeof(float) * static_cast<std::size_t>(t.numel()));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = base; i < out.size(); i += 4) std::swap(out[i], out[i + 3]), std::swap(out[i + 1], out[i + 2]);
  }
}

void get_le_f32(const char* src, Tensor<float>& t) {
  std::memcpy(t.data(), src, sizeof(float) * static_cast<std::size_t>(t.numel()));
  if constexpr (std::endian::native == std::endian::big) {
    auto* b = reinterpret_cast<char*>(t.data());
    for (std::int64_t i = 0; i < t.numel() * 4; i += 4) std::swap(b[i], b[i + 3]), std::swap(b[i + 1], b[i + 2]);
  }
}

std::vector<char> read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open '" + p.string() + "'");
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

void write_all(const fs::path& p, const char* data, std::size_t n) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  out.write(data, static_cast<std::streamsize>(n));
  if (!out) throw DataError("short write to '" + p.string() + "'");
}

void write_raw_pair(const fs::path& stem, const Tensor<float>& data, nlohmann::json manifest) {
  std::vector<char> payload;
  put_le_f32(payload, data);
  fs::path raw = stem, man = stem;
  raw += ".f32raw";
  man += ".manifest";
  write_all(raw, payload.data(), payload.size());
  const std::string text = manifest.dump(2) + "\n";
  write_all(man, text.data(), text.size());
}

std::pair<nlohmann::json, Tensor<float>> read_raw_pair(const fs::path& stem) {
  fs::path raw = stem, man = stem;
  raw += ".f32raw";
  man += ".manifest";
  const auto text = read_all(man);
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt manifest '" + man.string() + "': " + e.what());
  }
  if (m.value("dtype", "") != "float32" || m.value("order", "") != "row-major")
    throw DataError("unsupported manifest '" + man.string() + "' (need dtype=float32, order=row-major)");
  Shape dims;
  try {
    dims = m.at("dims").get<Shape>();
  } catch (const nlohmann::json::exception&) {
    throw DataError("manifest '" + man.string() + "' lacks dims");
  }
  if (dims.size() != 3) throw DataError("manifest '" + man.string() + "' must describe a 3-D volume");
  for (auto d : dims)
    if (d <= 0) throw DataError("manifest '" + man.string() + "' has a non-positive extent");
  const auto bytes = read_all(raw);
  Tensor<float> t(dims);
  if (bytes.size() != sizeof(float) * static_cast<std::size_t>(t.numel()))
    throw DataError("corrupt volume '" + raw.string() + "': expected " +
                    std::to_string(sizeof(float) * static_cast<std::size_t>(t.numel())) + " bytes, found " +
                    std::to_string(bytes.size()));
  get_le_f32(bytes.data(), t);
  return {std::move(m), std::move(t)};
}

}  // namespace

fs::path stem_of(const fs::path& path) {
  const auto ext = path.extension();
  if (ext == ".f32raw" || ext == ".manifest") {
    fs::path s = path;
    s.replace_extension();
    return s;
  }
  return path;
}

void save_volume(const Volume& v, const fs::path& path) {
  if (v.data.rank() != 3) throw ShapeError("save_volume: expected a 3-D volume");
  nlohmann::json m;
  m["dims"] = v.data.shape();
  m["spacing"] = v.spacing;
  m["dtype"] = "float32";
  m["order"] = "row-major";
  m["id"] = v.id;
  write_raw_pair(stem_of(path), v.data, std::move(m));
}

Volume load_volume(const fs::path& path) {
  auto [m, t] = read_raw_pair(stem_of(path));
  Volume v;
  v.data = std::move(t);
  try {
    v.spacing = m.at("spacing").get<Spacing>();
  } catch (const nlohmann::json::exception&) {
    throw DataError("manifest for '" + path.string() + "' lacks a 3-element spacing");
  }
  for (double s : v.spacing)
    if (!(s > 0.0)) throw DataError("manifest for '" + path.string() + "' has non-positive spacing");
  v.id = m.value("id", stem_of(path).filename().string());
  return v;
}

void save_label(const LabelMask& mask, const fs::path& path) {
  Volume v;
  v.data = mask.classes.cast<float>();
  v.id = "label";
  save_volume(v, path);
}

LabelMask load_label(const fs::path& path, int num_classes) {
  Volume v = load_volume(path);
  LabelMask m;
  m.num_classes = num_classes;
  m.classes = Tensor<std::int32_t>(v.data.shape());
  for (std::int64_t i = 0; i < v.data.numel(); ++i) {
    const float f = v.data[i];
    if (f != std::floor(f) || f < 0 || f >= static_cast<float>(num_classes))
      throw DataError("label file '" + path.string() + "' holds a value outside the class range");
    m.classes[i] = static_cast<std::int32_t>(f);
  }
  return m;
}

const Tensor<float>& Checkpoint::at(const std::string& name) const {
  for (const auto& [n, t] : arrays)
    if (n == name) return t;
  throw DataError("checkpoint has no array named '" + name + "'");
}

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& entry : arrays)
    if (entry.first == name) return true;
  return false;
}

void Checkpoint::add(std::string name, Tensor<float> t) {
  if (contains(name)) throw DataError("duplicate checkpoint array '" + name + "'");
  arrays.emplace_back(std::move(name), std::move(t));
}

std::vector<char> checkpoint_payload(const Checkpoint& ckpt) {
  std::vector<char> payload;
  for (const auto& entry : ckpt.arrays) put_le_f32(payload, entry.second);
  return payload;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  nlohmann::json manifest = ckpt.manifest;
  nlohmann::json table = nlohmann::json::array();
  std::set<std::string> names;
  std::int64_t offset = 0;
  for (const auto& [name, t] : ckpt.arrays) {
    if (!names.insert(name).second) throw DataError("duplicate checkpoint array '" + name + "'");
    table.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel() * 4;
  }
  manifest["arrays"] = std::move(table);
  const std::string text = manifest.dump();
  const std::vector<char> payload = checkpoint_payload(ckpt);

  std::vector<char> out(kMagic, kMagic + 8);
  std::uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  fs::path tmp = path;
  tmp += ".tmp";
  write_all(tmp, out.data(), out.size());
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  const auto bytes = read_all(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw DataError("'" + path.string() + "' is not a checkpoint archive");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  if (16 + len > bytes.size()) throw DataError("checkpoint '" + path.string() + "' is truncated");
  Checkpoint ckpt;
  try {
    ckpt.manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt checkpoint manifest: " + std::string(e.what()));
  }
  const char* payload = bytes.data() + 16 + len;
  const std::size_t payload_size = bytes.size() - 16 - len;
  std::size_t expected = 0;
  for (const auto& entry : ckpt.manifest.at("arrays")) {
    Tensor<float> t(entry.at("shape").get<Shape>());
    const auto off = entry.at("offset").get<std::size_t>();
    const std::size_t n = 4 * static_cast<std::size_t>(t.numel());
    if (off != expected || off + n > payload_size)
      throw DataError("checkpoint '" + path.string() + "' has an inconsistent array table");
    get_le_f32(payload + off, t);
    ckpt.add(entry.at("name").get<std::string>(), std::move(t));
    expected += n;
  }
  if (expected != payload_size) throw DataError("checkpoint '" + path.string() + "' payload size mismatch");
  ckpt.manifest.erase("arrays");
  return ckpt;
}

}  // namespace semiseg::io
