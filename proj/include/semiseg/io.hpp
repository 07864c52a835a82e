#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "semiseg/volume.hpp"

namespace semiseg::io {

// Volume files are `<stem>.f32raw` (little-endian float32, row-major) plus a
// `<stem>.manifest` JSON sidecar {dims, spacing, dtype, order, id}. Either
// file name or the bare stem may be passed.
void save_volume(const Volume& v, const std::filesystem::path& path);
Volume load_volume(const std::filesystem::path& path);

// Labels use the same container with integer class values stored as float32.
void save_label(const LabelMask& m, const std::filesystem::path& path);
LabelMask load_label(const std::filesystem::path& path, int num_classes);

// Flat archive of named float32 arrays plus a JSON manifest.
struct Checkpoint {
  nlohmann::json manifest = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor<float>>> arrays;

  const Tensor<float>& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  void add(std::string name, Tensor<float> t);
};

// Layout: 8-byte magic "SSCKPT01", u64 manifest length, manifest JSON (with an
// "arrays" table of name/shape/offset), then the concatenated payload.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Raw little-endian float32 payload exactly as written to disk.
std::vector<char> checkpoint_payload(const Checkpoint& ckpt);

std::filesystem::path stem_of(const std::filesystem::path& path);

}  // namespace semiseg::io
