#include "semiseg/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

namespace semiseg::synthetic {
namespace {

double dot(const Vec3& u, const Vec3& v) { return u[0] * v[0] + u[1] * v[1] + u[2] * v[2]; }
Vec3 sub(const Vec3& u, const Vec3& v) { return {u[0] - v[0], u[1] - v[1], u[2] - v[2]}; }
double norm(const Vec3& u) { return std::sqrt(dot(u, u)); }

// Uniformly random rotation from a unit quaternion.
std::array<Vec3, 3> random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  double q[4];
  double len = 0.0;
  do {
    len = 0.0;
    for (double& c : q) {
      c = nd(rng);
      len += c * c;
    }
  } while (len < 1e-12);
  len = std::sqrt(len);
  const double w = q[0] / len, x = q[1] / len, y = q[2] / len, z = q[3] / len;
  return {{{1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)},
           {2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)},
           {2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)}}};
}

double segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = sub(b, a), ap = sub(p, a);
  const double len2 = dot(ab, ab);
  const double t = len2 > 0 ? std::clamp(dot(ap, ab) / len2, 0.0, 1.0) : 0.0;
  const Vec3 c{a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]};
  return norm(sub(p, c));
}

Primitive random_primitive(std::mt19937_64& rng, const Dims3& size, int label) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double extent = static_cast<double>(*std::min_element(size.begin(), size.end()));
  Primitive s;
  s.label = label;
  Vec3 centre;
  for (int k = 0; k < 3; ++k) centre[k] = (0.3 + 0.4 * u(rng)) * static_cast<double>(size[k] - 1);
  if (u(rng) < 0.6) {
    s.kind = Primitive::Kind::Ellipsoid;
    s.centre = centre;
    for (auto& r : s.radii) r = (0.12 + 0.14 * u(rng)) * extent;
    s.axes = random_rotation(rng);
  } else {
    s.kind = Primitive::Kind::Tube;
    const auto rot = random_rotation(rng);
    const double half = (0.15 + 0.15 * u(rng)) * extent;
    for (int k = 0; k < 3; ++k) {
      s.a[k] = centre[k] - half * rot[0][k];
      s.b[k] = centre[k] + half * rot[0][k];
    }
    s.radius = (0.07 + 0.05 * u(rng)) * extent;
  }
  return s;
}

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace

bool Primitive::contains(const Vec3& p) const { return depth(p) >= 0.0; }

double Primitive::depth(const Vec3& p) const {
  if (kind == Kind::Tube) return radius - segment_distance(p, a, b);
  const Vec3 d = sub(p, centre);
  double q = 0.0;
  for (int k = 0; k < 3; ++k) {
    const double l = dot(axes[k], d) / radii[k];
    q += l * l;
  }
  // Radial depth scaled by the smallest semi-axis; exact sign, approximate size.
  const double rmin = *std::min_element(radii.begin(), radii.end());
  return (1.0 - std::sqrt(q)) * rmin;
}

LabelMask rasterize(const std::vector<Primitive>& shapes, const Dims3& size, int num_classes) {
  LabelMask m;
  m.num_classes = num_classes;
  m.classes = Tensor<std::int32_t>({size[0], size[1], size[2]});
  for (std::int64_t i = 0; i < size[0]; ++i)
    for (std::int64_t j = 0; j < size[1]; ++j)
      for (std::int64_t k = 0; k < size[2]; ++k) {
        const Vec3 p{static_cast<double>(i), static_cast<double>(j), static_cast<double>(k)};
        std::int32_t lab = 0;
        for (const auto& s : shapes)
          if (s.contains(p)) lab = s.label;
        m.classes[(i * size[1] + j) * size[2] + k] = lab;
      }
  return m;
}

Case generate_case(std::uint64_t seed, std::uint64_t stream, std::uint64_t index, const GeneratorOptions& opt) {
  check_requested_dims(opt.size);
  if (opt.num_classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  auto rng = make_rng(seed, stream, index);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> count(1, 3);
  const std::int64_t n = opt.size[0] * opt.size[1] * opt.size[2];

  Case out;
  for (int attempt = 0;; ++attempt) {
    if (attempt > 1000) throw Error("synthetic generator could not meet the foreground fraction bounds");
    out.shapes.clear();
    for (int c = 1; c < opt.num_classes; ++c) {
      const int k = count(rng);
      for (int s = 0; s < k; ++s) out.shapes.push_back(random_primitive(rng, opt.size, c));
    }
    out.label = rasterize(out.shapes, opt.size, opt.num_classes);
    std::int64_t fg = 0;
    for (auto c : out.label.classes.span()) fg += c != 0;
    const double frac = static_cast<double>(fg) / static_cast<double>(n);
    bool every_class = true;
    for (int c = 1; c < opt.num_classes; ++c)
      every_class = every_class && std::count(out.label.classes.span().begin(), out.label.classes.span().end(), c) > 0;
    if (every_class && frac >= opt.min_foreground && frac <= opt.max_foreground) break;
  }

  // Smooth linear background ramp plus per-class contrast; a thin rim inside
  // each shape is nearly background-coloured.
  Vec3 ramp;
  for (auto& g : ramp) g = (u(rng) - 0.5) / static_cast<double>(opt.size[0]);
  const double base = u(rng) - 0.5;
  std::normal_distribution<double> noise(0.0, opt.noise_sigma);
  out.image.data = Tensor<float>({opt.size[0], opt.size[1], opt.size[2]});
  out.image.spacing = opt.spacing;
  for (std::int64_t i = 0; i < opt.size[0]; ++i)
    for (std::int64_t j = 0; j < opt.size[1]; ++j)
      for (std::int64_t k = 0; k < opt.size[2]; ++k) {
        const Vec3 p{static_cast<double>(i), static_cast<double>(j), static_cast<double>(k)};
        double v = base + ramp[0] * (p[0] - opt.size[0] / 2.0) + ramp[1] * (p[1] - opt.size[1] / 2.0) +
                   ramp[2] * (p[2] - opt.size[2] / 2.0);
        const std::int64_t idx = (i * opt.size[1] + j) * opt.size[2] + k;
        const int lab = out.label.classes[idx];
        if (lab != 0) {
          double depth = 0.0;
          for (const auto& s : out.shapes)
            if (s.label == lab && s.contains(p)) depth = std::max(depth, s.depth(p));
          v += depth < opt.rim_width ? opt.rim_gap * opt.noise_sigma : opt.contrast * lab;
        }
        out.image.data[idx] = static_cast<float>(v + noise(rng));
      }
  return out;
}

DatasetSplit generate_dataset(std::uint64_t seed, int n_labelled, int n_unlabelled, int n_val,
                              const GeneratorOptions& opt) {
  check_requested_dims(opt.size);
  if (opt.num_classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  auto name = [](const char* prefix, int i) {
    std::string s = std::to_string(i);
    return std::string(prefix) + std::string(3 - std::min<std::size_t>(3, s.size()), '0') + s;
  };
  DatasetSplit split;
  for (int i = 0; i < n_labelled; ++i) {
    Case c = generate_case(seed, 0, static_cast<std::uint64_t>(i), opt);
    c.image.id = name("lab_", i);
    split.labelled.push_back({std::move(c.image), std::move(c.label)});
  }
  for (int i = 0; i < n_unlabelled; ++i) {
    Case c = generate_case(seed, 1, static_cast<std::uint64_t>(i), opt);
    c.image.id = name("unl_", i);
    split.unlabelled.push_back(std::move(c.image));
    split.unlabelled_truth.push_back(std::move(c.label));
  }
  for (int i = 0; i < n_val; ++i) {
    Case c = generate_case(seed, 2, static_cast<std::uint64_t>(i), opt);
    c.image.id = name("val_", i);
    split.val.push_back({std::move(c.image), std::move(c.label)});
  }
  return split;
}

}  // namespace semiseg::synthetic
