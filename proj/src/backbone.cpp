#include "semiseg/backbone.hpp"

#include <string>

#include "semiseg/ops.hpp"

namespace semiseg::backbone {
namespace {

const std::string kP = "backbone.";

template <typename T>
void add_conv(ParamSet<T>& ps, const std::string& name, int cin, int cout, int k, std::mt19937_64& rng) {
  ps.add(kP + name + ".w", he_normal<T>({cout, cin, k, k, k}, std::int64_t{cin} * k * k * k, rng));
}

template <typename T>
void add_norm(ParamSet<T>& ps, const std::string& name, int ch) {
  ps.add(kP + name + ".gamma", Tensor<T>({ch}, T(1)));
  ps.add(kP + name + ".beta", Tensor<T>({ch}));
}

// conv (no bias, the norm absorbs it) -> instance norm -> relu
template <typename T>
Var<T> cnr(const ParamSet<T>& ps, const std::string& name, const Var<T>& x, int stride, int pad) {
  auto y = ops::conv3d(x, ps.at(kP + name + ".w"), Var<T>(), stride, pad);
  y = ops::instance_norm(y, ps.at(kP + name + ".gamma"), ps.at(kP + name + ".beta"));
  return ops::relu(y);
}

template <typename T>
Var<T> up(const ParamSet<T>& ps, const std::string& name, const Var<T>& x) {
  auto y = ops::conv_transpose3d_k2s2(x, ps.at(kP + name + ".w"), Var<T>());
  y = ops::instance_norm(y, ps.at(kP + name + ".gamma"), ps.at(kP + name + ".beta"));
  return ops::relu(y);
}

}  // namespace

void Config::validate() const {
  if (in_channels < 1 || num_classes < 2) throw ConfigError("backbone needs in_channels >= 1 and num_classes >= 2");
  if (!(F4 > 0 && F4 < F3 && F3 < F))
    throw ConfigError("backbone widths must satisfy 0 < F4 < F3 < F, got " + std::to_string(F4) + "," +
                      std::to_string(F3) + "," + std::to_string(F));
}

template <typename T>
void init(ParamSet<T>& ps, const Config& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const int c1 = cfg.F4, c2 = cfg.F3, c3 = cfg.F;
  auto block = [&](const std::string& n, int cin, int cout, int k) {
    add_conv(ps, n, cin, cout, k, rng);
    add_norm(ps, n, cout);
  };
  block("enc1a", cfg.in_channels, c1, 3);
  block("enc1b", c1, c1, 3);
  block("down1", c1, c2, 2);
  block("enc2", c2, c2, 3);
  block("down2", c2, c3, 2);
  block("enc3", c3, c3, 3);
  block("dec3", c3, c3, 3);
  ps.add(kP + "up2.w", he_normal<T>({c3, c2, 2, 2, 2}, c3, rng));
  add_norm(ps, "up2", c2);
  block("dec2", c2, c2, 3);
  ps.add(kP + "up1.w", he_normal<T>({c2, c1, 2, 2, 2}, c2, rng));
  add_norm(ps, "up1", c1);
  block("dec1", c1, c1, 3);
  ps.add(kP + "head.w", he_normal<T>({cfg.num_classes, c1, 1, 1, 1}, c1, rng, 1.0));
  ps.add(kP + "head.b", Tensor<T>({cfg.num_classes}));
}

template <typename T>
FeaturePyramid<T> forward(const ParamSet<T>& ps, const Config& cfg, const Var<T>& x) {
  if (x.value().rank() != 4 || x.dim(0) != cfg.in_channels)
    throw ShapeError("backbone input must be [" + std::to_string(cfg.in_channels) + ",H,W,D], got " +
                     shape_str(x.shape()));
  for (int a = 1; a <= 3; ++a)
    if (x.dim(a) % 4 != 0 || x.dim(a) < 8)
      throw ShapeError("backbone input extents must be >= 8 and divisible by 4, got " + shape_str(x.shape()));

  auto e1 = cnr(ps, "enc1b", cnr(ps, "enc1a", x, 1, 1), 1, 1);
  auto e2 = cnr(ps, "enc2", cnr(ps, "down1", e1, 2, 0), 1, 1);
  auto e3 = cnr(ps, "enc3", cnr(ps, "down2", e2, 2, 0), 1, 1);

  FeaturePyramid<T> out;
  out.f2 = cnr(ps, "dec3", e3, 1, 1);
  out.f3 = cnr(ps, "dec2", ops::add(up(ps, "up2", out.f2), e2), 1, 1);
  out.f4 = cnr(ps, "dec1", ops::add(up(ps, "up1", out.f3), e1), 1, 1);
  out.logits = ops::conv3d(out.f4, ps.at(kP + "head.w"), ps.at(kP + "head.b"), 1, 0);
  return out;
}

template void init<float>(ParamSet<float>&, const Config&, std::mt19937_64&);
template void init<double>(ParamSet<double>&, const Config&, std::mt19937_64&);
template FeaturePyramid<float> forward<float>(const ParamSet<float>&, const Config&, const Var<float>&);
template FeaturePyramid<double> forward<double>(const ParamSet<double>&, const Config&, const Var<double>&);

}  // namespace semiseg::backbone
