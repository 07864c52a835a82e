#include "semiseg/volume.hpp"

#include <cmath>
#include <set>

namespace semiseg {

void check_volume_dims(const Dims3& d) {
  for (auto e : d)
    if (e < 8 || e % 4 != 0)
      throw ShapeError("volume extents must be >= 8 and divisible by 4, got " +
                       shape_str(Shape(d.begin(), d.end())));
}

void check_requested_dims(const Dims3& d) {
  try {
    check_volume_dims(d);
  } catch (const ShapeError& e) {
    throw ConfigError(e.what());
  }
}

void Volume::validate() const {
  if (data.rank() != 3) throw ShapeError("volume must be 3-D, got " + shape_str(data.shape()));
  check_volume_dims(dims());
  for (double s : spacing)
    if (!(s > 0.0) || !std::isfinite(s)) throw DataError("volume '" + id + "': spacing must be positive");
  for (float v : data.span())
    if (!std::isfinite(v)) throw DataError("volume '" + id + "' contains non-finite intensities");
}

void LabelMask::validate() const {
  if (classes.rank() != 3) throw ShapeError("label mask must be 3-D, got " + shape_str(classes.shape()));
  if (num_classes < 2) throw ConfigError("label mask needs at least 2 classes");
  for (auto c : classes.span())
    if (c < 0 || c >= num_classes) throw DataError("label value " + std::to_string(c) + " outside class range");
}

std::vector<std::uint8_t> LabelMask::binary(int c) const {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(classes.numel()));
  for (std::int64_t i = 0; i < classes.numel(); ++i) out[i] = classes[i] == c ? 1 : 0;
  return out;
}

void DatasetSplit::validate() const {
  if (unlabelled.size() < labelled.size())
    throw ConfigError("semi-supervised split needs at least as many unlabelled as labelled volumes");
  std::set<std::string> ids;
  auto claim = [&ids](const std::string& id) {
    if (!ids.insert(id).second) throw DataError("duplicate volume id '" + id + "' across splits");
  };
  for (const auto& c : labelled) claim(c.image.id);
  for (const auto& v : unlabelled) claim(v.id);
  for (const auto& c : val) claim(c.image.id);
}

Volume normalize_intensity(const Volume& v) {
  Volume out = v;
  const auto n = static_cast<double>(v.data.numel());
  double mean = 0.0;
  for (float x : v.data.span()) mean += x;
  mean /= n;
  double var = 0.0;
  for (float x : v.data.span()) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / n);
  if (sd <= 0.0) return out;
  for (auto& x : out.data.storage()) x = static_cast<float>((x - mean) / sd);
  return out;
}

}  // namespace semiseg
